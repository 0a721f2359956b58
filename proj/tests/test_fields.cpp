#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ghnn/fields.hpp"
#include "ghnn/tape.hpp"

using namespace ghnn;

namespace {

double rel_err(double got, double want) {
    return std::fabs(got - want) / std::max(1e-3, std::fabs(want));
}

Mat random_row(int n, Rng& rng, double lo = -2.0, double hi = 2.0) {
    Mat m(1, n);
    for (int i = 0; i < n; ++i) m(0, i) = rng.uniform(lo, hi);
    return m;
}

double rehu_value(double x, double delta) {
    Tape t;
    return t.val(rehu(t, t.constant_scalar(x), delta))[0];
}

}  // namespace

TEST_CASE("mlp forward basics") {
    {
        // zero weights and biases -> final affine output is exactly 0
        Rng rng(1);
        ParamStore ps;
        MlpField f({2, 8, 1}, "f", ps, rng);
        for (size_t i = 0; i < ps.count(); ++i) {
            Mat& v = ps.value(static_cast<int>(i));
            for (size_t k = 0; k < v.size(); ++k) v[k] = 0.0;
        }
        CHECK(f.value(ps, Mat::row({0.7, -0.3})) == 0.0);
    }
    {
        // single affine layer W=[2], b=1 at x=3 -> 7
        Rng rng(1);
        ParamStore ps;
        MlpField f({1, 1}, "f", ps, rng);
        ps.value(ps.index_of("f.W0"))[0] = 2.0;
        ps.value(ps.index_of("f.b0"))[0] = 1.0;
        CHECK(f.value(ps, Mat::row({3.0})) == doctest::Approx(7.0).epsilon(1e-15));
    }
}

TEST_CASE("mlp forward matches a straight-line reimplementation") {
    // fixed seed 2x8 net evaluated by an independent plain loop
    Rng rng(42);
    ParamStore ps;
    MlpField f({2, 8, 8, 1}, "net", ps, rng);
    const Mat x = Mat::row({0.5, -0.5});

    auto layer = [&](const std::vector<double>& in, const std::string& w, const std::string& b,
                     bool activate) {
        const Mat& W = ps.value(ps.index_of(w));
        const Mat& B = ps.value(ps.index_of(b));
        std::vector<double> out(static_cast<size_t>(W.cols()));
        for (int j = 0; j < W.cols(); ++j) {
            double acc = B(0, j);
            for (int i = 0; i < W.rows(); ++i) acc += in[static_cast<size_t>(i)] * W(i, j);
            out[static_cast<size_t>(j)] = activate ? std::log1p(std::exp(-std::fabs(acc))) + std::max(acc, 0.0)
                                                   : acc;
        }
        return out;
    };
    std::vector<double> h = {0.5, -0.5};
    h = layer(h, "net.W0", "net.b0", true);
    h = layer(h, "net.W1", "net.b1", true);
    h = layer(h, "net.W2", "net.b2", false);
    CHECK(f.value(ps, x) == doctest::Approx(h[0]).epsilon(1e-14));
}

TEST_CASE("rectified huber unit") {
    CHECK(rehu_value(-1.0, 1.0) == 0.0);
    CHECK(rehu_value(0.5, 1.0) == doctest::Approx(0.125).epsilon(1e-15));
    CHECK(rehu_value(2.0, 1.0) == doctest::Approx(1.5).epsilon(1e-15));
    // continuity and monotonicity across the kinks
    double prev = rehu_value(-0.5, 0.7);
    for (double x = -0.5; x <= 2.0; x += 0.01) {
        const double v = rehu_value(x, 0.7);
        CHECK(v >= prev - 1e-12);
        CHECK(v >= 0.0);
        prev = v;
    }
}

TEST_CASE("h parameterizations") {
    Rng rng(3);
    ParamStore ps;
    HParam hg(HVariant::GlobalStable, {2, 16, 16, 1}, "hg", ps, rng, 1e-3, 1.0);
    HParam hl(HVariant::LocalStable, {2, 16, 16, 1}, "hl", ps, rng, 1e-3);

    // exactly zero at the origin by construction
    CHECK(hg.value(ps, Mat(1, 2)) == 0.0);
    CHECK(hl.value(ps, Mat(1, 2)) == 0.0);

    // zero inner net: only the eps |x|^2 term remains
    ParamStore ps0;
    Rng rng0(4);
    HParam hz(HVariant::GlobalStable, {2, 4, 1}, "h", ps0, rng0, 1e-3, 1.0);
    for (size_t i = 0; i < ps0.count(); ++i) {
        Mat& v = ps0.value(static_cast<int>(i));
        for (size_t k = 0; k < v.size(); ++k) v[k] = 0.0;
    }
    CHECK(hz.value(ps0, Mat::row({1.0, 1.0})) == doctest::Approx(0.002).epsilon(1e-14));
}

TEST_CASE("h gradients match finite differences") {
    Rng rng(7);
    ParamStore ps;
    HParam hg(HVariant::GlobalStable, {3, 12, 1}, "hg", ps, rng, 1e-3, 1.0);
    HParam hl(HVariant::LocalStable, {3, 12, 1}, "hl", ps, rng, 1e-3);
    HParam hp(HVariant::Plain, {3, 12, 1}, "hp", ps, rng);

    const double h = 1e-6;
    for (const ScalarField* f : {static_cast<const ScalarField*>(&hg), static_cast<const ScalarField*>(&hl),
                                 static_cast<const ScalarField*>(&hp)}) {
        for (int rep = 0; rep < 50; ++rep) {
            Mat x = random_row(3, rng);
            Mat g = f->grad(ps, x);
            for (int c = 0; c < 3; ++c) {
                Mat xp = x, xm = x;
                xp(0, c) += h;
                xm(0, c) -= h;
                const double fd = (f->value(ps, xp) - f->value(ps, xm)) / (2.0 * h);
                REQUIRE(rel_err(g(0, c), fd) < 1e-5);
            }
        }
    }
}

TEST_CASE("concave field hessian is negative semidefinite") {
    Rng rng(11);
    ParamStore ps;
    ConcaveField nv({3, 24, 24, 1}, "nv", ps, rng);
    for (int rep = 0; rep < 200; ++rep) {
        Mat x = random_row(3, rng, -3.0, 3.0);
        Mat v = random_row(3, rng, -1.0, 1.0);
        Mat hv = field_hvp(nv, ps, x, v);
        double q = 0.0;
        for (int c = 0; c < 3; ++c) q += v(0, c) * hv(0, c);
        REQUIRE(q <= 1e-10);
    }
}

TEST_CASE("globally stable H is positive and coercive at random init") {
    Rng rng(13);
    ParamStore ps;
    const double eps = 1e-3, delta = 1.0;
    HParam hg(HVariant::GlobalStable, {2, 32, 1}, "hg", ps, rng, eps, delta);
    // inner net output range bound over the sampled box -> ReHU bound
    for (int rep = 0; rep < 1000; ++rep) {
        Mat x = random_row(2, rng, -4.0, 4.0);
        const double sq = x(0, 0) * x(0, 0) + x(0, 1) * x(0, 1);
        const double hv = hg.value(ps, x);
        REQUIRE(hv >= eps * sq - 1e-12);
        if (sq > 1e-12) REQUIRE(hv > 0.0);
    }
    // locally stable: softplus(N(x)) >= 0, so H(x) >= eps|x|^2 - softplus(N(0))
    ParamStore ps2;
    Rng rng2(14);
    HParam hl(HVariant::LocalStable, {2, 32, 1}, "hl", ps2, rng2, 1e-3);
    const double sp_n0 = softplus_stable(hl.inner().value(ps2, Mat(1, 2)));
    for (int rep = 0; rep < 200; ++rep) {
        Mat x = random_row(2, rng2, -4.0, 4.0);
        const double sq = x(0, 0) * x(0, 0) + x(0, 1) * x(0, 1);
        REQUIRE(hl.value(ps2, x) >= 1e-3 * sq - sp_n0 - 1e-12);
    }
}
