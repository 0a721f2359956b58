#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "ghnn/decomp.hpp"
#include "ghnn/odeint.hpp"

using namespace ghnn;

namespace {

const OdeFn circle = [](const std::vector<double>& x, std::vector<double>& dx) {
    dx.resize(2);
    dx[0] = x[1];
    dx[1] = -x[0];
};

std::vector<double> linspace(double a, double b, int count) {
    std::vector<double> ts(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) ts[static_cast<size_t>(i)] = a + (b - a) * i / (count - 1);
    return ts;
}

}  // namespace

TEST_CASE("harmonic oscillator returns home after one period") {
    const double two_pi = 6.283185307179586;
    IntegrateResult r = integrate(circle, {1.0, 0.0}, linspace(0, two_pi, 30), IntegrationConfig::paper_dopri());
    REQUIRE(!r.diverged);
    CHECK(std::fabs(r.states(29, 0) - 1.0) < 1e-6);
    CHECK(std::fabs(r.states(29, 1)) < 1e-6);
    // dense outputs track the analytic circle
    for (int i = 0; i < 30; ++i) {
        const double t = two_pi * i / 29;
        CHECK(std::fabs(r.states(i, 0) - std::cos(t)) < 1e-5);
        CHECK(std::fabs(r.states(i, 1) + std::sin(t)) < 1e-5);
    }
}

TEST_CASE("zero field and exponential growth") {
    OdeFn zero = [](const std::vector<double>& x, std::vector<double>& dx) { dx.assign(x.size(), 0.0); };
    IntegrateResult r = integrate(zero, {0.3, -0.7}, linspace(0, 5, 11), IntegrationConfig::paper_dopri());
    for (int i = 0; i < 11; ++i) {
        CHECK(r.states(i, 0) == 0.3);
        CHECK(r.states(i, 1) == -0.7);
    }

    OdeFn growth = [](const std::vector<double>& x, std::vector<double>& dx) { dx.assign(1, x[0]); };
    IntegrateResult re = integrate(growth, {1.0}, linspace(0, 1, 5), IntegrationConfig::paper_dopri());
    CHECK(std::fabs(re.states(4, 0) - 2.718281828459045) < 1e-6);
}

TEST_CASE("rk4 is globally fourth order") {
    auto endpoint_error = [&](double dt) {
        IntegrationConfig cfg = IntegrationConfig::rk4(dt);
        IntegrateResult r = integrate(circle, {1.0, 0.0}, {0.0, 1.0}, cfg);
        const double ex = std::cos(1.0), ev = -std::sin(1.0);
        return std::hypot(r.states(1, 0) - ex, r.states(1, 1) - ev);
    };
    const double e1 = endpoint_error(0.1);
    const double e2 = endpoint_error(0.05);
    const double ratio = e1 / e2;
    CHECK(ratio >= 12.0);
    CHECK(ratio <= 20.0);
}

TEST_CASE("dopri45 order from tolerance sweep") {
    const double period = 6.283185307179586;
    const double span = 4.0 * period;  // several periods so the startup transient is negligible
    std::vector<double> log_h, log_e;
    for (double tol : {1e-4, 1e-5, 1e-6, 1e-7, 1e-8, 1e-9}) {
        IntegrationConfig cfg;
        cfg.rtol = tol;
        cfg.atol = tol;
        IntegrateResult r = integrate(circle, {1.0, 0.0}, {0.0, span}, cfg);
        REQUIRE(!r.diverged);
        const double err = std::hypot(r.states(1, 0) - 1.0, r.states(1, 1));
        const double h_mean = span / static_cast<double>(r.steps);
        log_h.push_back(std::log(h_mean));
        log_e.push_back(std::log(std::max(err, 1e-300)));
    }
    // least-squares slope of log(err) vs log(mean step)
    double mx = 0, my = 0;
    for (size_t i = 0; i < log_h.size(); ++i) {
        mx += log_h[i];
        my += log_e[i];
    }
    mx /= static_cast<double>(log_h.size());
    my /= static_cast<double>(log_h.size());
    double num = 0, den = 0;
    for (size_t i = 0; i < log_h.size(); ++i) {
        num += (log_h[i] - mx) * (log_e[i] - my);
        den += (log_h[i] - mx) * (log_h[i] - mx);
    }
    const double slope = num / den;
    CHECK(slope >= 4.7);
    CHECK(slope <= 5.3);
}

TEST_CASE("divergence is reported as data with the last reached time") {
    // x' = x^2 from 1 blows up at t = 1
    OdeFn blowup = [](const std::vector<double>& x, std::vector<double>& dx) { dx.assign(1, x[0] * x[0]); };
    IntegrateResult r = integrate(blowup, {1.0}, linspace(0, 2, 21), IntegrationConfig::paper_dopri());
    CHECK(r.diverged);
    CHECK(r.t_reached > 0.8);
    CHECK(r.t_reached < 1.05);
    CHECK(!r.message.empty());
}

TEST_CASE("determinism: identical inputs give bit-identical trajectories") {
    auto run = [&]() {
        return integrate(circle, {0.6, 0.2}, linspace(0, 3, 17), IntegrationConfig::paper_dopri());
    };
    IntegrateResult a = run(), b = run();
    REQUIRE(a.states.size() == b.states.size());
    for (size_t i = 0; i < a.states.size(); ++i)
        CHECK(std::memcmp(&a.states[i], &b.states[i], sizeof(double)) == 0);
}

TEST_CASE("differentiable rk4: scalar parameter field") {
    // x' = theta * x with theta = 0: state unchanged; d x(t1) / d theta from the
    // tape matches finite differences of the integrator.
    auto run = [&](double theta, Tape& t, Var& theta_var, std::vector<Var>& states) {
        theta_var = t.leaf(Mat::scalar(theta));
        TapeOdeFn f = [&theta_var](Tape& tt, Var X) { return tt.mul(X, theta_var); };
        Var X0 = t.constant(Mat::row({2.0}));
        auto r = integrate_diff(t, f, X0, {0.0, 0.5}, IntegrationConfig::rk4(0.0, 1));
        states = r.states;
    };
    Tape t;
    Var theta;
    std::vector<Var> states;
    run(0.0, t, theta, states);
    CHECK(t.val(states[1])(0, 0) == 2.0);

    Var head = t.sum(states[1]);
    auto g = t.backward(head, {theta});

    const double h = 1e-6;
    auto endpoint = [&](double th) {
        Tape t2;
        Var tv;
        std::vector<Var> st;
        run(th, t2, tv, st);
        return t2.val(st[1])(0, 0);
    };
    const double fd = (endpoint(h) - endpoint(-h)) / (2.0 * h);
    CHECK(std::fabs(g[0][0] - fd) < 1e-8);
}

TEST_CASE("differentiable rk4: zero-length grid returns the initial state") {
    Tape t;
    TapeOdeFn f = [](Tape& tt, Var X) { return tt.smul(X, 1.0); };
    Var X0 = t.constant(Mat::row({1.0, 2.0}));
    auto r = integrate_diff(t, f, X0, {0.0}, IntegrationConfig::rk4());
    CHECK(r.states.size() == 1);
    CHECK(r.states[0].id == X0.id);
}

TEST_CASE("differentiable rk4 through a structured model") {
    ModelConfig cfg;
    cfg.variant = ModelVariant::GhnnGlobalStable;
    cfg.n = 2;
    cfg.hidden = {6};
    cfg.seed = 9;
    DecompModel m = DecompModel::build(cfg);

    std::vector<double> ts;
    for (int i = 0; i <= 5; ++i) ts.push_back(0.02 * i);
    Mat target = Mat::row({0.3, -0.5});

    auto loss_at = [&](const std::vector<double>& params) {
        DecompModel mm = m;
        mm.params().unflatten(params);
        Tape t;
        Binding bind = Binding::bind(t, mm.params());
        TapeOdeFn f = [&](Tape& tt, Var X) { return mm.field_on_tape(tt, bind, X); };
        auto r = integrate_diff(t, f, t.constant(Mat::row({0.8, 0.1})), ts, IntegrationConfig::rk4());
        Var diff = t.sub(r.states.back(), t.constant(target));
        return t.val(t.sum(t.square(diff)))[0];
    };

    // gradient via tape
    Tape t;
    Binding bind = Binding::bind(t, m.params());
    TapeOdeFn f = [&](Tape& tt, Var X) { return m.field_on_tape(tt, bind, X); };
    auto r = integrate_diff(t, f, t.constant(Mat::row({0.8, 0.1})), ts, IntegrationConfig::rk4());
    Var diff = t.sub(r.states.back(), t.constant(target));
    Var loss = t.sum(t.square(diff));
    auto grads = t.backward(loss, bind.vars);

    std::vector<double> flat = m.params().flatten();
    std::vector<double> flat_grad;
    for (const Mat& g : grads)
        for (size_t i = 0; i < g.size(); ++i) flat_grad.push_back(g[i]);

    Rng rng(123);
    const double h = 1e-5;
    for (int probe = 0; probe < 10; ++probe) {
        const size_t idx = rng.next_u64() % flat.size();
        std::vector<double> p = flat;
        p[idx] += h;
        const double fp = loss_at(p);
        p[idx] -= 2 * h;
        const double fm = loss_at(p);
        const double fd = (fp - fm) / (2 * h);
        REQUIRE(std::fabs(flat_grad[idx] - fd) / std::max(1e-3, std::fabs(fd)) < 1e-4);
    }
}
