#include "ghnn/systems.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace ghnn {

using nlohmann::json;

AnalyticSystem AnalyticSystem::make(SystemKind kind, int nbody_particles) {
    AnalyticSystem s;
    s.kind_ = kind;
    switch (kind) {
        case SystemKind::Pendulum:
        case SystemKind::Duffing: s.n_ = 2; break;
        case SystemKind::Lorenz63: s.n_ = 3; break;
        case SystemKind::NBody:
            if (nbody_particles < 1) throw_config("nbody: need at least one particle");
            s.particles_ = nbody_particles;
            s.n_ = 4 * nbody_particles;
            break;
    }
    return s;
}

AnalyticSystem AnalyticSystem::make_nbody(int particles, bool with_force_field) {
    AnalyticSystem s = make(SystemKind::NBody, particles);
    s.force_field_enabled_ = with_force_field;
    return s;
}

std::optional<AnalyticSystem> AnalyticSystem::from_name(const std::string& name, int nbody_particles) {
    if (name == "pendulum") return make(SystemKind::Pendulum);
    if (name == "duffing") return make(SystemKind::Duffing);
    if (name == "lorenz63" || name == "lorenz") return make(SystemKind::Lorenz63);
    if (name == "nbody") return make(SystemKind::NBody, nbody_particles);
    return std::nullopt;
}

const char* AnalyticSystem::name() const {
    switch (kind_) {
        case SystemKind::Pendulum: return "pendulum";
        case SystemKind::Duffing: return "duffing";
        case SystemKind::Lorenz63: return "lorenz63";
        case SystemKind::NBody: return "nbody";
    }
    return "?";
}

void AnalyticSystem::force_field(double px, double py, double& fx, double& fy) {
    const double r = std::sqrt(px * px + py * py);
    const double s = r < 1e-12 ? 1.0 : std::sin(r) / r;  // unnormalized sinc
    fx = s * py;
    fy = -s * px;
}

void AnalyticSystem::eval(const std::vector<double>& x, std::vector<double>& dx) const {
    if (static_cast<int>(x.size()) != n_)
        throw_shape(std::string(name()) + ": state has dimension " + std::to_string(x.size()) + ", expected " +
                    std::to_string(n_));
    dx.resize(x.size());
    switch (kind_) {
        case SystemKind::Pendulum:
            dx[0] = x[1];
            dx[1] = -pendulum_g * std::sin(x[0]) - damping * x[1];
            break;
        case SystemKind::Duffing:
            dx[0] = x[1];
            dx[1] = x[0] - x[0] * x[0] * x[0] - damping * x[1];
            break;
        case SystemKind::Lorenz63:
            dx[0] = lorenz_sigma * (x[1] - x[0]);
            dx[1] = x[0] * (lorenz_rho - x[2]) - x[1];
            dx[2] = x[0] * x[1] - lorenz_beta * x[2];
            break;
        case SystemKind::NBody: {
            const int N = particles_;
            for (int i = 0; i < N; ++i) {
                const double* pi = &x[static_cast<size_t>(4 * i)];
                double ax = 0.0, ay = 0.0;
                for (int j = 0; j < N; ++j) {
                    if (j == i) continue;
                    const double* pj = &x[static_cast<size_t>(4 * j)];
                    const double ddx = pj[0] - pi[0], ddy = pj[1] - pi[1];
                    const double d2 = ddx * ddx + ddy * ddy;
                    if (d2 < 1e-24)
                        throw_numeric("nbody: particles " + std::to_string(i) + " and " + std::to_string(j) +
                                      " are coincident");
                    const double inv3 = 1.0 / (d2 * std::sqrt(d2));
                    ax += ddx * inv3;
                    ay += ddy * inv3;
                }
                double fx = 0.0, fy = 0.0;
                if (force_field_enabled_) force_field(pi[0], pi[1], fx, fy);
                dx[static_cast<size_t>(4 * i)] = pi[2];
                dx[static_cast<size_t>(4 * i + 1)] = pi[3];
                dx[static_cast<size_t>(4 * i + 2)] = ax + fx;
                dx[static_cast<size_t>(4 * i + 3)] = ay + fy;
            }
            break;
        }
    }
}

OdeFn AnalyticSystem::ode() const {
    AnalyticSystem self = *this;
    return [self](const std::vector<double>& x, std::vector<double>& dx) { self.eval(x, dx); };
}

double AnalyticSystem::energy(const std::vector<double>& x) const {
    switch (kind_) {
        case SystemKind::Pendulum: return pendulum_g * (1.0 - std::cos(x[0])) + 0.5 * x[1] * x[1];
        case SystemKind::Duffing:
            return 0.25 * x[0] * x[0] * x[0] * x[0] - 0.5 * x[0] * x[0] + 0.5 * x[1] * x[1];
        case SystemKind::Lorenz63:
            return -0.5 * (lorenz_rho / lorenz_sigma) * x[0] * x[0] + 0.5 * (x[1] * x[1] + x[2] * x[2]);
        case SystemKind::NBody: {
            const int N = particles_;
            double h = 0.0;
            for (int i = 0; i < N; ++i) {
                const double* pi = &x[static_cast<size_t>(4 * i)];
                h += 0.5 * (pi[2] * pi[2] + pi[3] * pi[3]);
                for (int j = i + 1; j < N; ++j) {
                    const double* pj = &x[static_cast<size_t>(4 * j)];
                    const double ddx = pj[0] - pi[0], ddy = pj[1] - pi[1];
                    const double d = std::sqrt(ddx * ddx + ddy * ddy);
                    if (d < 1e-12) throw_numeric("nbody: coincident particles in energy");
                    h -= 1.0 / d;
                }
            }
            return h;
        }
    }
    return 0.0;
}

Mat AnalyticSystem::j_true(const std::vector<double>& x) const {
    Mat J(n_, n_);
    switch (kind_) {
        case SystemKind::Pendulum:
        case SystemKind::Duffing:
            J(0, 1) = 1.0;
            J(1, 0) = -1.0;
            break;
        case SystemKind::Lorenz63:
            J(0, 1) = lorenz_sigma;
            J(1, 0) = -lorenz_sigma;
            J(1, 2) = -x[0];
            J(2, 1) = x[0];
            break;
        case SystemKind::NBody: throw_config("nbody: no analytic J oracle");
    }
    return J;
}

Mat AnalyticSystem::r_true(const std::vector<double>&) const {
    Mat R(n_, n_);
    switch (kind_) {
        case SystemKind::Pendulum:
        case SystemKind::Duffing: R(1, 1) = -damping; break;
        case SystemKind::Lorenz63:
            R(0, 0) = lorenz_sigma * lorenz_sigma / lorenz_rho;
            R(1, 1) = -1.0;
            R(2, 2) = -lorenz_beta;
            break;
        case SystemKind::NBody: throw_config("nbody: no analytic R oracle");
    }
    return R;
}

std::vector<double> AnalyticSystem::grad_h_true(const std::vector<double>& x) const {
    switch (kind_) {
        case SystemKind::Pendulum: return {pendulum_g * std::sin(x[0]), x[1]};
        case SystemKind::Duffing: return {x[0] * x[0] * x[0] - x[0], x[1]};
        case SystemKind::Lorenz63: return {-(lorenz_rho / lorenz_sigma) * x[0], x[1], x[2]};
        case SystemKind::NBody: throw_config("nbody: no analytic grad-H oracle");
    }
    return {};
}

double AnalyticSystem::energy_rate_true(const std::vector<double>& x) const {
    switch (kind_) {
        case SystemKind::Pendulum:
        case SystemKind::Duffing: return -damping * x[1] * x[1];
        case SystemKind::Lorenz63:
            return lorenz_rho * x[0] * x[0] - x[1] * x[1] - lorenz_beta * x[2] * x[2];
        case SystemKind::NBody: throw_config("nbody: no analytic energy-rate oracle");
    }
    return 0.0;
}

Var AnalyticSystem::field_on_tape(Tape& t, Var X) const {
    switch (kind_) {
        case SystemKind::Pendulum: {
            Var x1 = t.slice_cols(X, 0, 1), x2 = t.slice_cols(X, 1, 2);
            Var f2 = t.neg(t.add(t.smul(t.sin(x1), pendulum_g), t.smul(x2, damping)));
            return t.concat(x2, f2);
        }
        case SystemKind::Duffing: {
            Var x1 = t.slice_cols(X, 0, 1), x2 = t.slice_cols(X, 1, 2);
            Var f2 = t.sub(t.sub(x1, t.mul(t.square(x1), x1)), t.smul(x2, damping));
            return t.concat(x2, f2);
        }
        case SystemKind::Lorenz63: {
            Var x1 = t.slice_cols(X, 0, 1), x2 = t.slice_cols(X, 1, 2), x3 = t.slice_cols(X, 2, 3);
            Var f1 = t.smul(t.sub(x2, x1), lorenz_sigma);
            Var f2 = t.sub(t.mul(x1, t.sub(t.constant_scalar(lorenz_rho), x3)), x2);
            Var f3 = t.sub(t.mul(x1, x2), t.smul(x3, lorenz_beta));
            return t.concat(t.concat(f1, f2), f3);
        }
        case SystemKind::NBody: {
            const int N = particles_;
            const int m = t.rows(X);
            Var ones_row2 = t.constant(Mat::full(1, 2, 1.0));
            std::vector<Var> dv(static_cast<size_t>(N));
            for (int i = 0; i < N; ++i) {
                Var pos_i = t.slice_cols(X, 4 * i, 4 * i + 2);
                for (int j = i + 1; j < N; ++j) {
                    Var pos_j = t.slice_cols(X, 4 * j, 4 * j + 2);
                    Var diff = t.sub(pos_j, pos_i);  // m x 2
                    Var d2 = rowwise_sqnorm(t, diff);
                    Var inv3 = t.matmul(t.pow(d2, -1.5), ones_row2);  // m x 2 broadcast
                    Var pull = t.mul(diff, inv3);
                    dv[static_cast<size_t>(i)] =
                        dv[static_cast<size_t>(i)].valid() ? t.add(dv[static_cast<size_t>(i)], pull) : pull;
                    Var push = t.neg(pull);
                    dv[static_cast<size_t>(j)] =
                        dv[static_cast<size_t>(j)].valid() ? t.add(dv[static_cast<size_t>(j)], push) : push;
                }
            }
            Var out;
            for (int i = 0; i < N; ++i) {
                Var px = t.slice_cols(X, 4 * i, 4 * i + 1);
                Var py = t.slice_cols(X, 4 * i + 1, 4 * i + 2);
                Var vel = t.slice_cols(X, 4 * i + 2, 4 * i + 4);
                Var r = t.pow(t.add(t.square(px), t.square(py)), 0.5);
                Var sinc = t.mul(t.sin(r), t.pow(r, -1.0));
                Var fx = t.mul(sinc, py);
                Var fy = t.neg(t.mul(sinc, px));
                Var acc = dv[static_cast<size_t>(i)].valid() ? dv[static_cast<size_t>(i)] : t.constant(Mat(m, 2));
                Var dvel = t.add(acc, t.concat(fx, fy));
                Var blk = t.concat(vel, dvel);
                out = out.valid() ? t.concat(out, blk) : blk;
            }
            return out;
        }
    }
    throw_config("unknown system");
}

Var AnalyticSystem::energy_on_tape(Tape& t, Var X) const {
    switch (kind_) {
        case SystemKind::Pendulum: {
            Var x1 = t.slice_cols(X, 0, 1), x2 = t.slice_cols(X, 1, 2);
            Var pe = t.smul(t.sub(t.constant_scalar(1.0), t.cos(x1)), pendulum_g);
            return t.add(pe, t.smul(t.square(x2), 0.5));
        }
        case SystemKind::Duffing: {
            Var x1 = t.slice_cols(X, 0, 1), x2 = t.slice_cols(X, 1, 2);
            Var q = t.square(x1);
            return t.add(t.sub(t.smul(t.square(q), 0.25), t.smul(q, 0.5)), t.smul(t.square(x2), 0.5));
        }
        case SystemKind::Lorenz63: {
            Var x1 = t.slice_cols(X, 0, 1), x2 = t.slice_cols(X, 1, 2), x3 = t.slice_cols(X, 2, 3);
            Var kin = t.smul(t.add(t.square(x2), t.square(x3)), 0.5);
            return t.sub(kin, t.smul(t.square(x1), 0.5 * lorenz_rho / lorenz_sigma));
        }
        case SystemKind::NBody: {
            const int N = particles_;
            Var h;
            for (int i = 0; i < N; ++i) {
                Var vel = t.slice_cols(X, 4 * i + 2, 4 * i + 4);
                Var kin = t.smul(rowwise_sqnorm(t, vel), 0.5);
                h = h.valid() ? t.add(h, kin) : kin;
                Var pos_i = t.slice_cols(X, 4 * i, 4 * i + 2);
                for (int j = i + 1; j < N; ++j) {
                    Var pos_j = t.slice_cols(X, 4 * j, 4 * j + 2);
                    Var d2 = rowwise_sqnorm(t, t.sub(pos_j, pos_i));
                    h = t.sub(h, t.pow(d2, -0.5));
                }
            }
            return h;
        }
    }
    throw_config("unknown system");
}

namespace {

struct AnalyticEnergyField : ScalarField {
    AnalyticSystem sys;
    explicit AnalyticEnergyField(AnalyticSystem s) : sys(s) {}
    int dim() const override { return sys.dim(); }
    Var apply(Tape& t, const Binding&, Var X) const override { return sys.energy_on_tape(t, X); }
};

}  // namespace

std::shared_ptr<ScalarField> AnalyticSystem::energy_field() const {
    return std::make_shared<AnalyticEnergyField>(*this);
}

DecompModel AnalyticSystem::true_model() const {
    AnalyticSystem self = *this;
    AnalyticParts parts;
    parts.n = n_;
    parts.field = [self](Tape& t, Var X) { return self.field_on_tape(t, X); };
    parts.energy = energy_field();
    if (has_decomposition()) {
        SystemKind k = kind_;
        parts.r_grad_h = [k](Tape& t, Var X) -> Var {
            switch (k) {
                case SystemKind::Pendulum:
                case SystemKind::Duffing: {
                    Var x2 = t.slice_cols(X, 1, 2);
                    return t.concat(t.constant(Mat(t.rows(X), 1)), t.smul(x2, -AnalyticSystem::damping));
                }
                case SystemKind::Lorenz63: {
                    Var x1 = t.slice_cols(X, 0, 1), x2 = t.slice_cols(X, 1, 2), x3 = t.slice_cols(X, 2, 3);
                    // R grad H = (sigma^2/rho * (-rho/sigma x1), -x2, -beta x3)
                    Var f1 = t.smul(x1, -AnalyticSystem::lorenz_sigma);
                    return t.concat(t.concat(f1, t.neg(x2)), t.smul(x3, -AnalyticSystem::lorenz_beta));
                }
                default: throw_config("no analytic R grad H");
            }
        };
    }
    return DecompModel::analytic(std::move(parts));
}

std::vector<double> AnalyticSystem::sample_ic(Rng& rng) const {
    switch (kind_) {
        case SystemKind::Pendulum:
            // sub-separatrix box: H(2.2, +/-2) < 2g, so every trajectory
            // oscillates toward the origin instead of winding
            return {rng.uniform(-2.2, 2.2), rng.uniform(-2.0, 2.0)};
        case SystemKind::Duffing: return {rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)};
        case SystemKind::Lorenz63:
            return {rng.uniform(-15.0, 15.0), rng.uniform(-15.0, 15.0), rng.uniform(10.0, 40.0)};
        case SystemKind::NBody: {
            std::vector<double> x(static_cast<size_t>(n_), 0.0);
            for (int i = 0; i < particles_; ++i) {
                x[static_cast<size_t>(4 * i)] = rng.normal();
                x[static_cast<size_t>(4 * i + 1)] = rng.normal();
                // velocities stay zero
            }
            return x;
        }
    }
    return {};
}

// -- dataset ------------------------------------------------------------------

size_t TrajectoryDataset::total_samples() const {
    size_t s = 0;
    for (const auto& tr : trajectories) s += tr.times.size();
    return s;
}

std::string TrajectoryDataset::to_json() const {
    json j;
    j["schema_version"] = schema_version;
    j["system"] = system;
    j["n"] = n;
    j["noise_sigma"] = noise_sigma;
    j["seed"] = seed;
    j["freq"] = freq;
    json trajs = json::array();
    for (const auto& tr : trajectories) {
        json jt;
        jt["times"] = tr.times;
        json rows = json::array();
        for (int r = 0; r < tr.states.rows(); ++r) {
            json row = json::array();
            for (int c = 0; c < tr.states.cols(); ++c) row.push_back(tr.states(r, c));
            rows.push_back(std::move(row));
        }
        jt["states"] = std::move(rows);
        trajs.push_back(std::move(jt));
    }
    j["trajectories"] = std::move(trajs);
    return j.dump();
}

TrajectoryDataset TrajectoryDataset::from_json(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw_io("dataset: invalid JSON");
    TrajectoryDataset ds;
    try {
        ds.schema_version = j.at("schema_version").get<int>();
        ds.system = j.at("system").get<std::string>();
        ds.n = j.at("n").get<int>();
        ds.noise_sigma = j.at("noise_sigma").get<double>();
        ds.seed = j.at("seed").get<uint64_t>();
        ds.freq = j.value("freq", 0.0);
        for (const auto& jt : j.at("trajectories")) {
            Trajectory tr;
            tr.times = jt.at("times").get<std::vector<double>>();
            const auto& rows = jt.at("states");
            tr.states = Mat(static_cast<int>(rows.size()), ds.n);
            int r = 0;
            for (const auto& row : rows) {
                if (static_cast<int>(row.size()) != ds.n) throw_io("dataset: state row width mismatch");
                for (int c = 0; c < ds.n; ++c) tr.states(r, c) = row[static_cast<size_t>(c)].get<double>();
                ++r;
            }
            if (tr.times.size() != static_cast<size_t>(tr.states.rows()))
                throw_io("dataset: times/states length mismatch");
            ds.trajectories.push_back(std::move(tr));
        }
    } catch (const json::exception& e) {
        throw_io(std::string("dataset: malformed JSON: ") + e.what());
    }
    return ds;
}

void TrajectoryDataset::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw_io("cannot open for writing: " + path);
    f << to_json() << "\n";
    if (!f) throw_io("write failed: " + path);
}

TrajectoryDataset TrajectoryDataset::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw_io("cannot open dataset: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return from_json(ss.str());
}

void TrajectoryDataset::export_csv(const std::string& prefix) const {
    for (size_t i = 0; i < trajectories.size(); ++i) {
        char idx[8];
        std::snprintf(idx, sizeof(idx), "%03zu", i);
        const std::string path = prefix + "_" + idx + ".csv";
        std::ofstream f(path, std::ios::binary);
        if (!f) throw_io("cannot open for writing: " + path);
        f << "t";
        for (int c = 0; c < n; ++c) f << ",x" << (c + 1);
        f << "\n";
        f.precision(17);
        const auto& tr = trajectories[i];
        for (int r = 0; r < tr.states.rows(); ++r) {
            f << tr.times[static_cast<size_t>(r)];
            for (int c = 0; c < n; ++c) f << "," << tr.states(r, c);
            f << "\n";
        }
    }
}

std::vector<double> uniform_times(double duration, double freq) {
    const long T = std::lround(duration * freq);
    if (T < 2) throw_config("time grid needs freq*duration >= 2");
    std::vector<double> ts(static_cast<size_t>(T));
    for (long i = 0; i < T; ++i) ts[static_cast<size_t>(i)] = static_cast<double>(i) / freq;
    return ts;
}

TrajectoryDataset generate(const AnalyticSystem& sys, const std::vector<std::vector<double>>& ics,
                           double duration, double freq, double noise_sigma, uint64_t seed) {
    if (noise_sigma < 0.0) throw_config("generate: noise_sigma must be >= 0");
    TrajectoryDataset ds;
    ds.system = sys.name();
    ds.n = sys.dim();
    ds.noise_sigma = noise_sigma;
    ds.seed = seed;
    ds.freq = freq;

    const auto ts = uniform_times(duration, freq);
    const IntegrationConfig cfg = IntegrationConfig::paper_dopri();
    const OdeFn f = sys.ode();

    for (size_t i = 0; i < ics.size(); ++i) {
        IntegrateResult r = integrate(f, ics[i], ts, cfg);
        if (r.diverged)
            throw_numeric("generate: trajectory " + std::to_string(i) + " diverged at t=" +
                          std::to_string(r.t_reached) + " (" + r.message + ")");
        Trajectory tr;
        tr.times = ts;
        tr.states = std::move(r.states);
        if (noise_sigma > 0.0) {
            Rng rng = Rng::stream(seed, i);
            for (int rr = 0; rr < tr.states.rows(); ++rr)
                for (int c = 0; c < tr.states.cols(); ++c) tr.states(rr, c) += noise_sigma * rng.normal();
        }
        ds.trajectories.push_back(std::move(tr));
    }
    return ds;
}

}  // namespace ghnn
