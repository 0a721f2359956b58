#include "ghnn/eval.hpp"

#include <algorithm>
#include <cmath>

#include "ghnn/odeint.hpp"
#include "ghnn/threading.hpp"

namespace ghnn {

namespace {

void mean_std(const std::vector<double>& v, double& mean, double& std_out) {
    if (v.empty()) {
        mean = std_out = 0.0;
        return;
    }
    double s = 0.0;
    for (double x : v) s += x;
    mean = s / static_cast<double>(v.size());
    double q = 0.0;
    for (double x : v) q += (x - mean) * (x - mean);
    std_out = std::sqrt(q / static_cast<double>(v.size()));
}

}  // namespace

MetricsReport evaluate(const DecompModel& model, const AnalyticSystem& sys, const EvalConfig& cfg) {
    if (model.dim() != sys.dim())
        throw_config("evaluate: model dimension " + std::to_string(model.dim()) + " != system dimension " +
                     std::to_string(sys.dim()));
    const int n = sys.dim();
    const int m = cfg.n_ics;
    const int P = cfg.n_pts;

    // output grid: t_i = i * horizon / n_pts, i = 0..n_pts (errors over i >= 1)
    std::vector<double> ts(static_cast<size_t>(P) + 1);
    for (int i = 0; i <= P; ++i) ts[static_cast<size_t>(i)] = cfg.horizon * i / P;

    // shared initial conditions
    std::vector<std::vector<double>> ics(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) {
        Rng rng = Rng::stream(cfg.seed, static_cast<uint64_t>(i));
        ics[static_cast<size_t>(i)] = sys.sample_ic(rng);
    }

    // true trajectories (reference tolerances), parallel over fixed blocks
    std::vector<Mat> truth(static_cast<size_t>(m));
    std::vector<bool> truth_ok(static_cast<size_t>(m), true);
    const IntegrationConfig ref = IntegrationConfig::paper_dopri();
    const int nb = std::min(8, m);
    parallel_blocks(nb, cfg.threads, [&](int b) {
        const int lo = m * b / nb, hi = m * (b + 1) / nb;
        for (int i = lo; i < hi; ++i) {
            IntegrateResult r = integrate(sys.ode(), ics[static_cast<size_t>(i)], ts, ref);
            truth[static_cast<size_t>(i)] = std::move(r.states);
            truth_ok[static_cast<size_t>(i)] = !r.diverged;
        }
    });

    MetricsReport rep;
    rep.state_error_included = cfg.include_state_error;
    std::vector<bool> ic_diverged(static_cast<size_t>(m), false);

    // derivative error: model evaluated at true states, batched over everything
    {
        Mat X(m * P, n);
        for (int i = 0; i < m; ++i)
            for (int p = 1; p <= P; ++p)
                for (int c = 0; c < n; ++c) X((static_cast<int>(i)) * P + p - 1, c) = truth[static_cast<size_t>(i)](p, c);
        Mat F = model.eval_field(X);
        std::vector<double> fx(static_cast<size_t>(n)), dx(static_cast<size_t>(n));
        for (int i = 0; i < m; ++i) {
            if (!truth_ok[static_cast<size_t>(i)]) {
                ic_diverged[static_cast<size_t>(i)] = true;
                continue;
            }
            double acc = 0.0;
            bool finite = true;
            for (int p = 1; p <= P && finite; ++p) {
                for (int c = 0; c < n; ++c) fx[static_cast<size_t>(c)] = truth[static_cast<size_t>(i)](p, c);
                sys.eval(fx, dx);
                double e2 = 0.0;
                for (int c = 0; c < n; ++c) {
                    const double d = dx[static_cast<size_t>(c)] - F(i * P + p - 1, c);
                    if (!std::isfinite(d)) {
                        finite = false;
                        break;
                    }
                    e2 += d * d;
                }
                acc += std::sqrt(e2);
            }
            if (!finite) {
                ic_diverged[static_cast<size_t>(i)] = true;
                continue;
            }
            rep.per_ic_deriv_error.push_back(acc / P);
        }
    }

    // state error: batched fixed-step rollout of the model on the output grid;
    // rows that go non-finite are marked divergent and frozen at zero.
    if (cfg.include_state_error) {
        rep.per_ic_state_error.clear();
        Mat X(m, n);
        for (int i = 0; i < m; ++i)
            for (int c = 0; c < n; ++c) X(i, c) = ics[static_cast<size_t>(i)][static_cast<size_t>(c)];
        std::vector<bool> row_dead(static_cast<size_t>(m), false);
        std::vector<double> acc(static_cast<size_t>(m), 0.0);

        Mat k1, k2, k3, k4, xt;
        for (int p = 1; p <= P; ++p) {
            const double span = ts[static_cast<size_t>(p)] - ts[static_cast<size_t>(p) - 1];
            const double h = span / cfg.rk4_substeps;
            for (int s = 0; s < cfg.rk4_substeps; ++s) {
                k1 = model.eval_field(X);
                xt = X;
                kernels::axpy(0.5 * h, k1, xt);
                k2 = model.eval_field(xt);
                xt = X;
                kernels::axpy(0.5 * h, k2, xt);
                k3 = model.eval_field(xt);
                xt = X;
                kernels::axpy(h, k3, xt);
                k4 = model.eval_field(xt);
                for (int i = 0; i < m; ++i) {
                    if (row_dead[static_cast<size_t>(i)]) continue;
                    for (int c = 0; c < n; ++c)
                        X(i, c) += h / 6.0 * (k1(i, c) + 2.0 * k2(i, c) + 2.0 * k3(i, c) + k4(i, c));
                }
                for (int i = 0; i < m; ++i) {
                    if (row_dead[static_cast<size_t>(i)]) continue;
                    bool ok = true;
                    double norm2 = 0.0;
                    for (int c = 0; c < n; ++c) {
                        if (!std::isfinite(X(i, c))) ok = false;
                        norm2 += X(i, c) * X(i, c);
                    }
                    if (!(norm2 <= cfg.divergence_radius * cfg.divergence_radius)) ok = false;
                    if (!ok) {
                        row_dead[static_cast<size_t>(i)] = true;
                        for (int c = 0; c < n; ++c) X(i, c) = 0.0;  // keep the batch finite
                    }
                }
            }
            for (int i = 0; i < m; ++i) {
                if (row_dead[static_cast<size_t>(i)] || ic_diverged[static_cast<size_t>(i)]) continue;
                double e2 = 0.0;
                for (int c = 0; c < n; ++c) {
                    const double d = truth[static_cast<size_t>(i)](p, c) - X(i, c);
                    e2 += d * d;
                }
                acc[static_cast<size_t>(i)] += std::sqrt(e2);
            }
        }
        for (int i = 0; i < m; ++i) {
            if (ic_diverged[static_cast<size_t>(i)]) continue;
            if (row_dead[static_cast<size_t>(i)]) {
                ic_diverged[static_cast<size_t>(i)] = true;
                // drop its derivative entry? keep: derivative error was computable.
                continue;
            }
            rep.per_ic_state_error.push_back(acc[static_cast<size_t>(i)] / P);
        }
    }

    for (int i = 0; i < m; ++i)
        if (ic_diverged[static_cast<size_t>(i)]) rep.diverged_ic_indices.push_back(i);
    rep.diverged_ics = static_cast<int>(rep.diverged_ic_indices.size());
    rep.diverged = rep.diverged_ics > 0;
    mean_std(rep.per_ic_state_error, rep.state_error_mean, rep.state_error_std);
    mean_std(rep.per_ic_deriv_error, rep.deriv_error_mean, rep.deriv_error_std);
    return rep;
}

FluxReport flux_report(const DecompModel& model, const std::vector<double>& x) {
    const int n = model.dim();
    if (static_cast<int>(x.size()) != n)
        throw_shape("flux_report: state has dimension " + std::to_string(x.size()) + ", model expects " +
                    std::to_string(n));
    if (n % 4 != 0)
        throw_config("flux_report: state layout must group (px, py, vx, vy) per particle; dimension " +
                     std::to_string(n) + " is not a multiple of 4");
    if (!model.has_energy()) throw_config("flux_report: model exposes no energy function");

    Mat X(1, n);
    for (int c = 0; c < n; ++c) X(0, c) = x[static_cast<size_t>(c)];
    Mat flux = model.flux_per_state(X);

    FluxReport rep;
    rep.particles = n / 4;
    rep.per_particle.assign(static_cast<size_t>(rep.particles), 0.0);
    double total = 0.0;
    for (int c = 0; c < n; ++c) total += flux(0, c);
    rep.total_rate = total;
    for (int p = 0; p < rep.particles; ++p) {
        double s = 0.0;
        for (int c = 4 * p; c < 4 * p + 4; ++c) s += flux(0, c);
        rep.per_particle[static_cast<size_t>(p)] = s;
        rep.positions.push_back({x[static_cast<size_t>(4 * p)], x[static_cast<size_t>(4 * p + 1)]});
        rep.velocities.push_back({x[static_cast<size_t>(4 * p + 2)], x[static_cast<size_t>(4 * p + 3)]});
        double fx, fy;
        AnalyticSystem::force_field(x[static_cast<size_t>(4 * p)], x[static_cast<size_t>(4 * p + 1)], fx, fy);
        rep.field_vectors.push_back({fx, fy});
    }
    return rep;
}

}  // namespace ghnn
