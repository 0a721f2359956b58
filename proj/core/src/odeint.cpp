#include "ghnn/odeint.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ghnn {

namespace {

bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

// Dormand-Prince 5(4) tableau.
constexpr double C2 = 1.0 / 5, C3 = 3.0 / 10, C4 = 4.0 / 5, C5 = 8.0 / 9;
constexpr double A21 = 1.0 / 5;
constexpr double A31 = 3.0 / 40, A32 = 9.0 / 40;
constexpr double A41 = 44.0 / 45, A42 = -56.0 / 15, A43 = 32.0 / 9;
constexpr double A51 = 19372.0 / 6561, A52 = -25360.0 / 2187, A53 = 64448.0 / 6561, A54 = -212.0 / 729;
constexpr double A61 = 9017.0 / 3168, A62 = -355.0 / 33, A63 = 46732.0 / 5247, A64 = 49.0 / 176,
                 A65 = -5103.0 / 18656;
constexpr double A71 = 35.0 / 384, A73 = 500.0 / 1113, A74 = 125.0 / 192, A75 = -2187.0 / 6784,
                 A76 = 11.0 / 84;
constexpr double E1 = 71.0 / 57600, E3 = -71.0 / 16695, E4 = 71.0 / 1920, E5 = -17253.0 / 339200,
                 E6 = 22.0 / 525, E7 = -1.0 / 40;
// dense-output coefficients
constexpr double D1 = -12715105075.0 / 11282082432.0, D3 = 87487479700.0 / 32700410799.0,
                 D4 = -10690763975.0 / 1880347072.0, D5 = 701980252875.0 / 199316789632.0,
                 D6 = -1453857185.0 / 822651844.0, D7 = 69997945.0 / 29380423.0;

constexpr double SAFE = 0.9, BETA = 0.04, FAC1 = 0.2, FAC2 = 10.0;
constexpr double H_MIN = 1e-12;

struct Dopri {
    const OdeFn& f;
    int n;
    std::vector<double> k1, k2, k3, k4, k5, k6, k7, ytmp, y1;
    // dense output registers for the last accepted step
    std::vector<double> r1, r2, r3, r4, r5;
    double t0 = 0, h_last = 0;

    explicit Dopri(const OdeFn& fn, int dim) : f(fn), n(dim) {
        for (auto* v : {&k1, &k2, &k3, &k4, &k5, &k6, &k7, &ytmp, &y1, &r1, &r2, &r3, &r4, &r5})
            v->assign(static_cast<size_t>(n), 0.0);
    }

    // One trial step from (t, y) with stepsize h; k1 must hold f(y).
    // Returns the scaled error norm; fills y1 and k7 = f(y1).
    double step(const std::vector<double>& y, double h, double rtol, double atol) {
        auto stage = [&](std::vector<double>& out, auto&&... terms) {
            // out = y + h * sum(coef * k)
            for (int i = 0; i < n; ++i) {
                double acc = 0.0;
                ((acc += terms.first * terms.second[static_cast<size_t>(i)]), ...);
                out[static_cast<size_t>(i)] = y[static_cast<size_t>(i)] + h * acc;
            }
        };
        using P = std::pair<double, const std::vector<double>&>;
        stage(ytmp, P{A21, k1});
        f(ytmp, k2);
        stage(ytmp, P{A31, k1}, P{A32, k2});
        f(ytmp, k3);
        stage(ytmp, P{A41, k1}, P{A42, k2}, P{A43, k3});
        f(ytmp, k4);
        stage(ytmp, P{A51, k1}, P{A52, k2}, P{A53, k3}, P{A54, k4});
        f(ytmp, k5);
        stage(ytmp, P{A61, k1}, P{A62, k2}, P{A63, k3}, P{A64, k4}, P{A65, k5});
        f(ytmp, k6);
        stage(y1, P{A71, k1}, P{A73, k3}, P{A74, k4}, P{A75, k5}, P{A76, k6});
        f(y1, k7);

        double err = 0.0;
        for (int i = 0; i < n; ++i) {
            const size_t s = static_cast<size_t>(i);
            const double e = h * (E1 * k1[s] + E3 * k3[s] + E4 * k4[s] + E5 * k5[s] + E6 * k6[s] + E7 * k7[s]);
            const double sk = atol + rtol * std::max(std::fabs(y[s]), std::fabs(y1[s]));
            err += (e / sk) * (e / sk);
        }
        err = std::sqrt(err / n);
        if (!all_finite(y1) || !std::isfinite(err)) return std::numeric_limits<double>::infinity();
        return err;
    }

    void save_dense(const std::vector<double>& y, double t, double h) {
        t0 = t;
        h_last = h;
        for (int i = 0; i < n; ++i) {
            const size_t s = static_cast<size_t>(i);
            const double dy = y1[s] - y[s];
            r1[s] = y[s];
            r2[s] = dy;
            r3[s] = h * k1[s] - dy;
            r4[s] = dy - h * k7[s] - r3[s];
            r5[s] = h * (D1 * k1[s] + D3 * k3[s] + D4 * k4[s] + D5 * k5[s] + D6 * k6[s] + D7 * k7[s]);
        }
    }

    void interpolate(double t, double* out) const {
        const double th = (t - t0) / h_last;
        const double th1 = 1.0 - th;
        for (int i = 0; i < n; ++i) {
            const size_t s = static_cast<size_t>(i);
            out[i] = r1[s] + th * (r2[s] + th1 * (r3[s] + th * (r4[s] + th1 * r5[s])));
        }
    }

    double initial_step(const std::vector<double>& y, double rtol, double atol, double t_span) {
        // standard explicit-Euler based guess
        double dnf = 0.0, dny = 0.0;
        for (int i = 0; i < n; ++i) {
            const size_t s = static_cast<size_t>(i);
            const double sk = atol + rtol * std::fabs(y[s]);
            dnf += (k1[s] / sk) * (k1[s] / sk);
            dny += (y[s] / sk) * (y[s] / sk);
        }
        double h = (dnf <= 1e-10 || dny <= 1e-10) ? 1e-6 : std::sqrt(dny / dnf) * 0.01;
        h = std::min(h, t_span);
        for (int i = 0; i < n; ++i) ytmp[static_cast<size_t>(i)] = y[static_cast<size_t>(i)] + h * k1[static_cast<size_t>(i)];
        f(ytmp, k2);
        double der2 = 0.0;
        for (int i = 0; i < n; ++i) {
            const size_t s = static_cast<size_t>(i);
            const double sk = atol + rtol * std::fabs(y[s]);
            der2 += ((k2[s] - k1[s]) / sk) * ((k2[s] - k1[s]) / sk);
        }
        der2 = std::sqrt(der2) / h;
        const double der12 = std::max(der2, std::sqrt(dnf));
        const double h1 = der12 <= 1e-15 ? std::max(1e-6, h * 1e-3) : std::pow(0.01 / der12, 0.2);
        h = std::min({100.0 * h, h1, t_span});
        return std::isfinite(h) && h > 0 ? h : 1e-6;
    }
};

IntegrateResult integrate_dopri(const OdeFn& f, const std::vector<double>& x0, const std::vector<double>& ts,
                                const IntegrationConfig& cfg) {
    const int n = static_cast<int>(x0.size());
    const size_t T = ts.size();
    IntegrateResult res;
    res.states = Mat(static_cast<int>(T), n);
    for (int c = 0; c < n; ++c) res.states(0, c) = x0[static_cast<size_t>(c)];
    if (T <= 1) {
        res.t_reached = ts.empty() ? 0.0 : ts[0];
        return res;
    }

    Dopri dp(f, n);
    std::vector<double> y = x0;
    double t = ts[0];
    const double t_end = ts.back();
    f(y, dp.k1);
    if (!all_finite(dp.k1)) {
        res.diverged = true;
        res.t_reached = t;
        res.message = "vector field not finite at the initial condition";
        return res;
    }
    double h = dp.initial_step(y, cfg.rtol, cfg.atol, t_end - t);
    double facold = 1e-4;
    size_t next_out = 1;
    long attempts = 0;

    while (t < t_end) {
        if (attempts++ > cfg.max_steps) {
            res.diverged = true;
            res.t_reached = t;
            res.message = "max_steps exceeded";
            return res;
        }
        if (h < H_MIN) {
            res.diverged = true;
            res.t_reached = t;
            res.message = "step size underflow (dt < 1e-12)";
            return res;
        }
        bool last = false;
        if (t + 1.01 * h >= t_end) {
            h = t_end - t;
            last = true;
        }

        const double err = dp.step(y, h, cfg.rtol, cfg.atol);
        const double expo1 = 0.2 - BETA * 0.75;
        double fac11 = std::pow(std::max(err, 1e-32), expo1);
        if (err <= 1.0) {
            // accepted
            ++res.steps;
            facold = std::max(err, 1e-4);
            dp.save_dense(y, t, h);
            y = dp.y1;
            std::swap(dp.k1, dp.k7);  // FSAL
            const double t_new = t + h;
            while (next_out < T && ts[next_out] <= t_new + 1e-14 * std::max(1.0, std::fabs(t_new))) {
                dp.interpolate(std::min(ts[next_out], t_new), &res.states(static_cast<int>(next_out), 0));
                ++next_out;
            }
            t = t_new;
            if (last && next_out >= T) break;
            double fac = fac11 / std::pow(facold, BETA);
            fac = std::max(1.0 / FAC2, std::min(1.0 / FAC1, fac / SAFE));
            h = h / fac;
        } else {
            h = h / std::min(1.0 / FAC1, fac11 / SAFE);
        }
    }
    // exact endpoint
    if (next_out == T) {
        for (int c = 0; c < n; ++c) res.states(static_cast<int>(T) - 1, c) = y[static_cast<size_t>(c)];
    }
    res.t_reached = t_end;
    return res;
}

void rk4_step(const OdeFn& f, std::vector<double>& y, double h, std::vector<double>& k1, std::vector<double>& k2,
              std::vector<double>& k3, std::vector<double>& k4, std::vector<double>& tmp) {
    const size_t n = y.size();
    f(y, k1);
    for (size_t i = 0; i < n; ++i) tmp[i] = y[i] + 0.5 * h * k1[i];
    f(tmp, k2);
    for (size_t i = 0; i < n; ++i) tmp[i] = y[i] + 0.5 * h * k2[i];
    f(tmp, k3);
    for (size_t i = 0; i < n; ++i) tmp[i] = y[i] + h * k3[i];
    f(tmp, k4);
    for (size_t i = 0; i < n; ++i) y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
}

IntegrateResult integrate_rk4(const OdeFn& f, const std::vector<double>& x0, const std::vector<double>& ts,
                              const IntegrationConfig& cfg) {
    const int n = static_cast<int>(x0.size());
    const size_t T = ts.size();
    IntegrateResult res;
    res.states = Mat(static_cast<int>(T), n);
    for (int c = 0; c < n; ++c) res.states(0, c) = x0[static_cast<size_t>(c)];
    res.t_reached = ts.empty() ? 0.0 : ts[0];
    if (T <= 1) return res;

    std::vector<double> y = x0, k1(y.size()), k2(y.size()), k3(y.size()), k4(y.size()), tmp(y.size());
    for (size_t i = 0; i + 1 < T; ++i) {
        const double span = ts[i + 1] - ts[i];
        int nsub = cfg.substeps;
        if (cfg.dt > 0.0) nsub = std::max(1, static_cast<int>(std::llround(span / cfg.dt)));
        const double h = span / nsub;
        for (int s = 0; s < nsub; ++s) {
            rk4_step(f, y, h, k1, k2, k3, k4, tmp);
            if (++res.steps > cfg.max_steps) {
                res.diverged = true;
                res.message = "max_steps exceeded";
                return res;
            }
        }
        if (!all_finite(y)) {
            res.diverged = true;
            res.t_reached = ts[i];
            res.message = "state became non-finite";
            return res;
        }
        for (int c = 0; c < n; ++c) res.states(static_cast<int>(i) + 1, c) = y[static_cast<size_t>(c)];
        res.t_reached = ts[i + 1];
    }
    return res;
}

}  // namespace

IntegrateResult integrate(const OdeFn& f, const std::vector<double>& x0, const std::vector<double>& ts,
                          const IntegrationConfig& cfg) {
    for (size_t i = 0; i + 1 < ts.size(); ++i)
        if (!(ts[i + 1] > ts[i])) throw_numeric("integrate: time grid must be strictly increasing");
    if (cfg.method == OdeMethod::Rk4) return integrate_rk4(f, x0, ts, cfg);
    return integrate_dopri(f, x0, ts, cfg);
}

DiffIntegrateResult integrate_diff(Tape& t, const TapeOdeFn& f, Var X0, const std::vector<double>& ts,
                                   const IntegrationConfig& cfg) {
    if (cfg.method != OdeMethod::Rk4)
        throw_config("integrate_diff: only the fixed-step rk4 method is differentiable");
    for (size_t i = 0; i + 1 < ts.size(); ++i)
        if (!(ts[i + 1] > ts[i])) throw_numeric("integrate_diff: time grid must be strictly increasing");

    DiffIntegrateResult res;
    res.states.push_back(X0);
    res.t_reached = ts.empty() ? 0.0 : ts[0];
    Var X = X0;
    for (size_t i = 0; i + 1 < ts.size(); ++i) {
        const double span = ts[i + 1] - ts[i];
        int nsub = cfg.substeps;
        if (cfg.dt > 0.0) nsub = std::max(1, static_cast<int>(std::llround(span / cfg.dt)));
        const double h = span / nsub;
        for (int s = 0; s < nsub; ++s) {
            Var k1 = f(t, X);
            Var k2 = f(t, t.add(X, t.smul(k1, 0.5 * h)));
            Var k3 = f(t, t.add(X, t.smul(k2, 0.5 * h)));
            Var k4 = f(t, t.add(X, t.smul(k3, h)));
            Var incr = t.add(t.add(k1, k4), t.smul(t.add(k2, k3), 2.0));
            X = t.add(X, t.smul(incr, h / 6.0));
        }
        if (!t.val(X).all_finite()) {
            res.diverged = true;
            return res;
        }
        res.states.push_back(X);
        res.t_reached = ts[i + 1];
    }
    return res;
}

}  // namespace ghnn
