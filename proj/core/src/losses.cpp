#include "ghnn/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ghnn/threading.hpp"

namespace ghnn {

namespace {
constexpr int kLossBlocks = 8;  // fixed partition: results independent of thread count
}

TestBasis TestBasis::gaussian(int K, double gamma, double dt, int samples) {
    if (K < 2) throw_config("test basis: need K >= 2");
    if (samples < 2) throw_config("test basis: need at least 2 samples");
    TestBasis b;
    b.K = K;
    b.gamma = gamma;
    b.dt = dt;
    b.psi = Mat(K, samples);
    b.psi_dot = Mat(K, samples);
    const double span = dt * (samples - 1);
    for (int k = 0; k < K; ++k) {
        const double c = span * static_cast<double>(k) / (K - 1);  // endpoints included
        for (int s = 0; s < samples; ++s) {
            const double t = dt * s;
            const double p = std::exp(-gamma * (t - c) * (t - c));
            b.psi(k, s) = p;
            b.psi_dot(k, s) = -2.0 * gamma * (t - c) * p;
        }
    }
    return b;
}

TestBasis TestBasis::from_tables(Mat psi, Mat psi_dot, double dt) {
    if (!psi.same_shape(psi_dot)) throw_shape("test basis: psi/psi_dot shape mismatch");
    TestBasis b;
    b.K = psi.rows();
    b.dt = dt;
    b.psi = std::move(psi);
    b.psi_dot = std::move(psi_dot);
    return b;
}

std::vector<Window> sample_batch(const TrajectoryDataset& ds, const BatchSpec& spec, Rng& rng) {
    if (ds.trajectories.empty()) throw_config("sample_batch: empty dataset");
    if (spec.batch_size < 1) throw_config("sample_batch: batch_size must be >= 1");
    const int l = spec.batch_steps;
    for (size_t i = 0; i < ds.trajectories.size(); ++i) {
        const int T = ds.trajectories[i].states.rows();
        if (T < l + 1)
            throw_config("sample_batch: trajectory " + std::to_string(i) + " has " + std::to_string(T) +
                         " samples, need at least batch_steps+1 = " + std::to_string(l + 1));
    }
    std::vector<Window> out;
    out.reserve(static_cast<size_t>(spec.batch_size));
    for (int b = 0; b < spec.batch_size; ++b) {
        Window w;
        w.traj = rng.uniform_int(static_cast<int>(ds.trajectories.size()));
        const int T = ds.trajectories[static_cast<size_t>(w.traj)].states.rows();
        w.start = rng.uniform_int(T - l);
        out.push_back(w);
    }
    return out;
}

std::vector<Window> enumerate_windows(const TrajectoryDataset& ds, int batch_steps, int max_windows) {
    std::vector<Window> out;
    for (size_t tr = 0; tr < ds.trajectories.size(); ++tr) {
        const int T = ds.trajectories[tr].states.rows();
        for (int s = 0; s + batch_steps < T; s += batch_steps) {
            out.push_back(Window{static_cast<int>(tr), s});
            if (max_windows > 0 && static_cast<int>(out.size()) >= max_windows) return out;
        }
    }
    return out;
}

const char* loss_kind_name(LossKind k) {
    switch (k) {
        case LossKind::Weak: return "weak";
        case LossKind::Deriv: return "deriv";
        case LossKind::State: return "state";
    }
    return "?";
}

namespace {

double dataset_dt(const TrajectoryDataset& ds) {
    for (const auto& tr : ds.trajectories) {
        if (tr.times.size() >= 2) {
            const double dt = tr.times[1] - tr.times[0];
            for (size_t i = 1; i + 1 < tr.times.size(); ++i)
                if (std::fabs(tr.times[i + 1] - tr.times[i] - dt) > 1e-9 * std::max(1.0, dt))
                    throw_config("loss: non-uniform sample times");
            return dt;
        }
    }
    throw_config("loss: dataset has no usable trajectory");
}

Mat stack_window_states(const TrajectoryDataset& ds, const std::vector<Window>& windows, size_t lo, size_t hi,
                        int S) {
    const int n = ds.n;
    Mat X(static_cast<int>(hi - lo) * S, n);
    int r = 0;
    for (size_t w = lo; w < hi; ++w) {
        const Mat& st = ds.trajectories[static_cast<size_t>(windows[w].traj)].states;
        for (int s = 0; s < S; ++s, ++r)
            for (int c = 0; c < n; ++c) X(r, c) = st(windows[w].start + s, c);
    }
    return X;
}

// Trapezoid weights folded into a test-function table.
Mat weighted(const Mat& table, double dt) {
    Mat w = table;
    const int S = table.cols();
    for (int k = 0; k < table.rows(); ++k) {
        w(k, 0) *= 0.5 * dt;
        w(k, S - 1) *= 0.5 * dt;
        for (int s = 1; s < S - 1; ++s) w(k, s) *= dt;
    }
    return w;
}

// Data side of the weak residuals: boundary term minus trapezoid(psi_dot x).
Mat weak_data_side(const TrajectoryDataset& ds, const Window& w, const TestBasis& basis, const Mat& psi_dot_w) {
    const int n = ds.n;
    const int S = basis.psi.cols();
    const Mat& st = ds.trajectories[static_cast<size_t>(w.traj)].states;
    Mat D(basis.K, n);
    for (int k = 0; k < basis.K; ++k)
        for (int c = 0; c < n; ++c)
            D(k, c) = basis.psi(k, S - 1) * st(w.start + S - 1, c) - basis.psi(k, 0) * st(w.start, c);
    for (int k = 0; k < basis.K; ++k)
        for (int s = 0; s < S; ++s) {
            const double pw = psi_dot_w(k, s);
            for (int c = 0; c < n; ++c) D(k, c) -= pw * st(w.start + s, c);
        }
    return D;
}

struct BlockOut {
    double value = 0.0;
    std::vector<double> grad;
    int diverged_windows = 0;
    bool all_diverged = false;
    bool has_error = false;
    std::string error;
};

struct LossShared {
    const DecompModel* model;
    const TrajectoryDataset* ds;
    const std::vector<Window>* windows;
    const LossOptions* opts;
    bool want_grad;
    int S;        // samples per window
    double dt;
    size_t total_windows;
    // weak
    TestBasis basis;
    Mat psi_w, psi_dot_w;
    // deriv
    DerivativeEstimates derivs;
    // state
    std::vector<double> rel_times;
};

void add_priors(Tape& t, const Binding& bind, Var& node, Var X, const LossShared& sh, size_t lo, size_t hi,
                int block) {
    const LossOptions& o = *sh.opts;
    if (o.lambda_flux > 0.0 && o.hdot_nom) {
        Mat nom(static_cast<int>(hi - lo) * sh.S, 1);
        int r = 0;
        for (size_t w = lo; w < hi; ++w) {
            const Window& win = (*sh.windows)[w];
            const auto& series = (*o.hdot_nom)[static_cast<size_t>(win.traj)];
            for (int s = 0; s < sh.S; ++s, ++r) nom(r, 0) = series[static_cast<size_t>(win.start + s)];
        }
        Var rate = sh.model->energy_rate_on_tape(t, bind, X);
        Var pen = t.sum(t.square(t.sub(rate, t.constant(nom))));
        node = t.add(node, t.smul(pen, o.lambda_flux / (static_cast<double>(sh.total_windows) * sh.S)));
    }
    if (o.lambda_curl > 0.0 && block == 0) {
        const int probe_rows = std::min(t.rows(X), 16);
        Var cp = sh.model->curl_penalty_on_tape(t, bind, t.slice_rows(X, 0, probe_rows));
        node = t.add(node, t.smul(cp, o.lambda_curl));
    }
}

void finish_block(Tape& t, const Binding& bind, Var node, bool want_grad, const ParamStore& ps, BlockOut& out) {
    out.value = t.val(node)[0];
    if (!want_grad) return;
    auto grads = t.backward(node, bind.vars);
    out.grad.reserve(ps.scalar_count());
    for (const Mat& g : grads)
        for (size_t i = 0; i < g.size(); ++i) out.grad.push_back(g[i]);
}

void check_finite_windows(const Mat& F, const std::vector<Window>& windows, size_t lo, size_t hi, int S,
                          const char* kind, BlockOut& out) {
    for (size_t w = lo; w < hi; ++w) {
        const int base = static_cast<int>(w - lo) * S;
        for (int r = base; r < base + S; ++r)
            for (int c = 0; c < F.cols(); ++c)
                if (!std::isfinite(F(r, c))) {
                    out.has_error = true;
                    out.error = std::string(kind) + " loss: non-finite model output in window (trajectory " +
                                std::to_string(windows[w].traj) + ", start " + std::to_string(windows[w].start) +
                                ")";
                    return;
                }
    }
}

BlockOut eval_block_weak(const LossShared& sh, int block, size_t lo, size_t hi) {
    BlockOut out;
    Tape t;
    Binding bind = Binding::bind(t, sh.model->params());
    Var X = t.constant(stack_window_states(*sh.ds, *sh.windows, lo, hi, sh.S));
    Var F = sh.model->field_on_tape(t, bind, X);
    check_finite_windows(t.val(F), *sh.windows, lo, hi, sh.S, "weak", out);
    if (out.has_error) return out;

    Var pw = t.constant(sh.psi_w);
    Var acc;
    for (size_t w = lo; w < hi; ++w) {
        Mat D = weak_data_side(*sh.ds, (*sh.windows)[w], sh.basis, sh.psi_dot_w);
        const int base = static_cast<int>(w - lo) * sh.S;
        Var Fw = t.slice_rows(F, base, base + sh.S);
        Var r = t.sub(t.constant(std::move(D)), t.matmul(pw, Fw));
        Var term = t.sum(t.square(r));
        acc = acc.valid() ? t.add(acc, term) : term;
    }
    Var node = t.smul(acc, 1.0 / (static_cast<double>(sh.total_windows) * sh.basis.K));
    add_priors(t, bind, node, X, sh, lo, hi, block);
    finish_block(t, bind, node, sh.want_grad, sh.model->params(), out);
    return out;
}

BlockOut eval_block_deriv(const LossShared& sh, int block, size_t lo, size_t hi) {
    BlockOut out;
    Tape t;
    Binding bind = Binding::bind(t, sh.model->params());
    Var X = t.constant(stack_window_states(*sh.ds, *sh.windows, lo, hi, sh.S));
    Var F = sh.model->field_on_tape(t, bind, X);
    check_finite_windows(t.val(F), *sh.windows, lo, hi, sh.S, "derivative", out);
    if (out.has_error) return out;

    const int n = sh.ds->n;
    Mat targets(static_cast<int>(hi - lo) * sh.S, n);
    int r = 0;
    for (size_t w = lo; w < hi; ++w) {
        const Mat& dst = sh.derivs.dstates[static_cast<size_t>((*sh.windows)[w].traj)];
        for (int s = 0; s < sh.S; ++s, ++r)
            for (int c = 0; c < n; ++c) targets(r, c) = dst((*sh.windows)[w].start + s, c);
    }
    Var node = t.smul(t.sum(t.square(t.sub(F, t.constant(std::move(targets))))),
                      1.0 / (static_cast<double>(sh.total_windows) * sh.S));
    add_priors(t, bind, node, X, sh, lo, hi, block);
    finish_block(t, bind, node, sh.want_grad, sh.model->params(), out);
    return out;
}

BlockOut eval_block_state(const LossShared& sh, int block, size_t lo, size_t hi) {
    BlockOut out;
    const int n = sh.ds->n;
    const int S = sh.S;

    auto build = [&](Tape& t, const Binding& bind, const std::vector<size_t>& use) -> Var {
        Mat X0(static_cast<int>(use.size()), n);
        for (size_t i = 0; i < use.size(); ++i) {
            const Window& w = (*sh.windows)[use[i]];
            const Mat& st = sh.ds->trajectories[static_cast<size_t>(w.traj)].states;
            for (int c = 0; c < n; ++c) X0(static_cast<int>(i), c) = st(w.start, c);
        }
        TapeOdeFn fn = [&](Tape& tt, Var Xv) { return sh.model->field_on_tape(tt, bind, Xv); };
        DiffIntegrateResult ir = integrate_diff(t, fn, t.constant(std::move(X0)), sh.rel_times,
                                                sh.opts->state_cfg);
        if (ir.diverged) return Var{};
        Var acc;
        for (int s = 1; s < S; ++s) {
            Mat data(static_cast<int>(use.size()), n);
            for (size_t i = 0; i < use.size(); ++i) {
                const Window& w = (*sh.windows)[use[i]];
                const Mat& st = sh.ds->trajectories[static_cast<size_t>(w.traj)].states;
                for (int c = 0; c < n; ++c) data(static_cast<int>(i), c) = st(w.start + s, c);
            }
            Var term = t.sum(t.square(t.sub(ir.states[static_cast<size_t>(s)], t.constant(std::move(data)))));
            acc = acc.valid() ? t.add(acc, term) : term;
        }
        return acc;
    };

    std::vector<size_t> all;
    for (size_t w = lo; w < hi; ++w) all.push_back(w);

    Tape t;
    Binding bind = Binding::bind(t, sh.model->params());
    Var acc = build(t, bind, all);
    std::vector<size_t> use = all;
    if (!acc.valid()) {
        // Identify divergent windows numerically (row independence makes the
        // per-window integration arithmetic identical to the batched one).
        use.clear();
        for (size_t w = lo; w < hi; ++w) {
            const Window& win = (*sh.windows)[w];
            const Mat& st = sh.ds->trajectories[static_cast<size_t>(win.traj)].states;
            std::vector<double> x0(static_cast<size_t>(n));
            for (int c = 0; c < n; ++c) x0[static_cast<size_t>(c)] = st(win.start, c);
            OdeFn f = [&](const std::vector<double>& x, std::vector<double>& dx) {
                Mat xm(1, n);
                for (int c = 0; c < n; ++c) xm(0, c) = x[static_cast<size_t>(c)];
                Mat fm = sh.model->eval_field(xm);
                dx.resize(static_cast<size_t>(n));
                for (int c = 0; c < n; ++c) dx[static_cast<size_t>(c)] = fm(0, c);
            };
            IntegrateResult r = integrate(f, x0, sh.rel_times, sh.opts->state_cfg);
            bool ok = !r.diverged && r.states.all_finite();
            if (ok)
                use.push_back(w);
            else
                ++out.diverged_windows;
        }
        if (use.empty()) {
            out.all_diverged = true;
            out.value = std::numeric_limits<double>::quiet_NaN();
            return out;
        }
        t.clear();
        bind = Binding::bind(t, sh.model->params());
        acc = build(t, bind, use);
        if (!acc.valid()) {
            out.has_error = true;
            out.error = "state loss: divergence persisted after excluding divergent windows";
            return out;
        }
    }

    // Mean over surviving windows and steps; divergent windows are tabulated.
    Var node = t.smul(acc, 1.0 / (static_cast<double>(sh.total_windows - 0) * (S - 1)));
    Var X = t.constant(stack_window_states(*sh.ds, *sh.windows, lo, hi, sh.S));
    add_priors(t, bind, node, X, sh, lo, hi, block);
    finish_block(t, bind, node, sh.want_grad, sh.model->params(), out);
    return out;
}

}  // namespace

LossResult loss_eval(const DecompModel& model, const TrajectoryDataset& ds, const std::vector<Window>& windows,
                     const LossOptions& opts, bool want_grad) {
    if (windows.empty()) throw_config("loss: empty window set");
    if (opts.batch_steps < 1) throw_config("loss: batch_steps must be >= 1");

    LossShared sh;
    sh.model = &model;
    sh.ds = &ds;
    sh.windows = &windows;
    sh.opts = &opts;
    sh.want_grad = want_grad;
    sh.S = opts.batch_steps + 1;
    sh.dt = dataset_dt(ds);
    sh.total_windows = windows.size();

    for (const Window& w : windows) {
        if (w.traj < 0 || static_cast<size_t>(w.traj) >= ds.trajectories.size())
            throw_config("loss: window references missing trajectory");
        if (w.start < 0 || w.start + sh.S > ds.trajectories[static_cast<size_t>(w.traj)].states.rows())
            throw_config("loss: window exceeds trajectory length");
    }

    switch (opts.kind) {
        case LossKind::Weak:
            sh.basis = TestBasis::gaussian(opts.k_test, opts.shape_gamma, sh.dt, sh.S);
            sh.psi_w = weighted(sh.basis.psi, sh.dt);
            sh.psi_dot_w = weighted(sh.basis.psi_dot, sh.dt);
            break;
        case LossKind::Deriv: sh.derivs = estimate_derivatives(ds); break;
        case LossKind::State:
            sh.rel_times.resize(static_cast<size_t>(sh.S));
            for (int s = 0; s < sh.S; ++s) sh.rel_times[static_cast<size_t>(s)] = sh.dt * s;
            break;
    }

    const int nb = static_cast<int>(std::min<size_t>(kLossBlocks, windows.size()));
    std::vector<BlockOut> outs(static_cast<size_t>(nb));
    parallel_blocks(nb, opts.threads, [&](int b) {
        const size_t lo = windows.size() * static_cast<size_t>(b) / nb;
        const size_t hi = windows.size() * static_cast<size_t>(b + 1) / nb;
        switch (opts.kind) {
            case LossKind::Weak: outs[static_cast<size_t>(b)] = eval_block_weak(sh, b, lo, hi); break;
            case LossKind::Deriv: outs[static_cast<size_t>(b)] = eval_block_deriv(sh, b, lo, hi); break;
            case LossKind::State: outs[static_cast<size_t>(b)] = eval_block_state(sh, b, lo, hi); break;
        }
    });

    LossResult res;
    const size_t P = model.params().scalar_count();
    if (want_grad) res.grad.assign(P, 0.0);
    bool any_ok = false;
    for (const BlockOut& o : outs) {
        if (o.has_error) throw_numeric(o.error);
        res.diverged_windows += o.diverged_windows;
        if (o.all_diverged) continue;
        any_ok = true;
        res.value += o.value;
        if (want_grad && !o.grad.empty())
            for (size_t i = 0; i < P; ++i) res.grad[i] += o.grad[i];
    }
    res.diverged = res.diverged_windows > 0;
    if (!any_ok) {
        res.value = std::numeric_limits<double>::quiet_NaN();
        return res;
    }
    if (!std::isfinite(res.value)) throw_numeric("loss: non-finite value");
    return res;
}

Mat weak_residuals(const DecompModel& model, const TrajectoryDataset& ds, const Window& w,
                   const TestBasis& basis) {
    const int S = basis.psi.cols();
    const int n = ds.n;
    const Mat& st = ds.trajectories[static_cast<size_t>(w.traj)].states;
    if (w.start + S > st.rows()) throw_config("weak_residuals: window exceeds trajectory");
    const double dt = basis.dt;
    Mat psi_dot_w = weighted(basis.psi_dot, dt);
    Mat D = weak_data_side(ds, w, basis, psi_dot_w);

    Mat X(S, n);
    for (int s = 0; s < S; ++s)
        for (int c = 0; c < n; ++c) X(s, c) = st(w.start + s, c);
    Mat F = model.eval_field(X);
    Mat pw = weighted(basis.psi, dt);
    Mat I2(basis.K, n);
    kernels::matmul(pw, F, I2);
    for (int k = 0; k < basis.K; ++k)
        for (int c = 0; c < n; ++c) D(k, c) -= I2(k, c);
    return D;
}

double weak_loss(const DecompModel& model, const TrajectoryDataset& ds, const std::vector<Window>& windows,
                 const LossOptions& opts) {
    LossOptions o = opts;
    o.kind = LossKind::Weak;
    return loss_eval(model, ds, windows, o, false).value;
}

DerivativeEstimates estimate_derivatives(const TrajectoryDataset& ds) {
    DerivativeEstimates est;
    for (const auto& tr : ds.trajectories) {
        const int T = tr.states.rows();
        const int n = tr.states.cols();
        if (T < 3) throw_config("estimate_derivatives: need at least 3 samples per trajectory");
        const double dt = tr.times[1] - tr.times[0];
        Mat d(T, n);
        for (int c = 0; c < n; ++c) {
            d(0, c) = (-3.0 * tr.states(0, c) + 4.0 * tr.states(1, c) - tr.states(2, c)) / (2.0 * dt);
            for (int r = 1; r < T - 1; ++r) d(r, c) = (tr.states(r + 1, c) - tr.states(r - 1, c)) / (2.0 * dt);
            d(T - 1, c) =
                (3.0 * tr.states(T - 1, c) - 4.0 * tr.states(T - 2, c) + tr.states(T - 3, c)) / (2.0 * dt);
        }
        est.dstates.push_back(std::move(d));
    }
    return est;
}

double derivative_loss(const DecompModel& model, const TrajectoryDataset& ds) {
    DerivativeEstimates est = estimate_derivatives(ds);
    double sum = 0.0;
    size_t count = 0;
    for (size_t tr = 0; tr < ds.trajectories.size(); ++tr) {
        const Mat& X = ds.trajectories[tr].states;
        Mat F = model.eval_field(X);
        const Mat& D = est.dstates[tr];
        for (size_t i = 0; i < F.size(); ++i) {
            const double e = F[i] - D[i];
            sum += e * e;
        }
        count += static_cast<size_t>(X.rows());
    }
    return sum / static_cast<double>(count);
}

double state_loss(const DecompModel& model, const TrajectoryDataset& ds, const std::vector<Window>& windows,
                  int batch_steps, const IntegrationConfig& cfg) {
    LossOptions o;
    o.kind = LossKind::State;
    o.batch_steps = batch_steps;
    o.state_cfg = cfg;
    return loss_eval(model, ds, windows, o, false).value;
}

double flux_prior_penalty(const DecompModel& model, const TrajectoryDataset& ds,
                          const std::vector<Window>& windows, int batch_steps,
                          const std::vector<std::vector<double>>& hdot_nom, double lambda) {
    if (lambda == 0.0) return 0.0;
    if (hdot_nom.size() != ds.trajectories.size())
        throw_config("flux prior: nominal series misaligned with dataset trajectories");
    const int S = batch_steps + 1;
    double sum = 0.0;
    size_t count = 0;
    for (const Window& w : windows) {
        const auto& series = hdot_nom[static_cast<size_t>(w.traj)];
        const Mat& st = ds.trajectories[static_cast<size_t>(w.traj)].states;
        if (w.start + S > st.rows() || series.size() < static_cast<size_t>(w.start + S))
            throw_config("flux prior: window exceeds nominal series");
        Mat X(S, ds.n);
        for (int s = 0; s < S; ++s)
            for (int c = 0; c < ds.n; ++c) X(s, c) = st(w.start + s, c);
        Mat rate = model.energy_rate(X);
        for (int s = 0; s < S; ++s) {
            const double e = rate(s, 0) - series[static_cast<size_t>(w.start + s)];
            sum += e * e;
        }
        count += static_cast<size_t>(S);
    }
    return lambda * sum / static_cast<double>(count);
}

std::vector<std::vector<double>> nominal_rate_series(const AnalyticSystem& sys, const TrajectoryDataset& ds) {
    std::vector<std::vector<double>> out;
    for (const auto& tr : ds.trajectories) {
        std::vector<double> series(static_cast<size_t>(tr.states.rows()));
        std::vector<double> x(static_cast<size_t>(ds.n));
        for (int r = 0; r < tr.states.rows(); ++r) {
            for (int c = 0; c < ds.n; ++c) x[static_cast<size_t>(c)] = tr.states(r, c);
            series[static_cast<size_t>(r)] = sys.energy_rate_true(x);
        }
        out.push_back(std::move(series));
    }
    return out;
}

}  // namespace ghnn
