#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "ghnn/fields.hpp"
#include "ghnn/rng.hpp"
#include "ghnn/tape.hpp"

using namespace ghnn;

namespace {

double rel_err(double got, double want) {
    return std::fabs(got - want) / std::max(1e-3, std::fabs(want));
}

// Central finite differences of a scalar function of one leaf matrix.
Mat fd_grad(const std::function<double(const Mat&)>& f, const Mat& x0, double h) {
    Mat g(x0.rows(), x0.cols());
    Mat x = x0;
    for (size_t i = 0; i < x.size(); ++i) {
        const double xi = x[i];
        x[i] = xi + h;
        const double fp = f(x);
        x[i] = xi - h;
        const double fm = f(x);
        x[i] = xi;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

Mat random_mat(int r, int c, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Mat m(r, c);
    for (size_t i = 0; i < m.size(); ++i) m[i] = rng.uniform(lo, hi);
    return m;
}

}  // namespace

TEST_CASE("primitive forward values") {
    Tape t;
    Var sp = t.softplus(t.constant_scalar(0.0));
    CHECK(t.val(sp)[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Var d = t.dot(t.constant(Mat::col({1, 2})), t.constant(Mat::col({3, 4})));
    CHECK(t.val(d)[0] == doctest::Approx(11.0));

    Var v = t.constant(Mat::col({0.3, -1.2, 2.0}));
    Var mv = t.matvec(t.constant(Mat::identity(3)), v);
    for (int i = 0; i < 3; ++i) CHECK(t.val(mv)(i, 0) == t.val(v)(i, 0));
}

TEST_CASE("simple backward") {
    {
        Tape t;
        Var x = t.leaf(Mat::scalar(3.0));
        Var y = t.square(x);
        auto g = t.backward(y, {x});
        CHECK(g[0][0] == doctest::Approx(6.0).epsilon(1e-14));
    }
    {
        Tape t;
        Var x = t.leaf(Mat::scalar(0.0));
        Var y = t.sin(x);
        auto g = t.backward(y, {x});
        CHECK(g[0][0] == doctest::Approx(1.0).epsilon(1e-14));
    }
}

TEST_CASE("gradient-of-gradient-norm matches hand algebra") {
    // root = |grad(0.5 x^T A x)|^2 for symmetric A; d(root)/dx = 2 A^T A x.
    // At A = diag(2, 1), x = (1, 1): expect (8, 2).
    Tape t;
    Mat A(2, 2, {2, 0, 0, 1});
    Var x = t.leaf(Mat::row({1, 1}));
    Var q = t.smul(t.dot(t.matmul(x, t.constant(A)), x), 0.5);
    auto g = t.backward_graph(q, {x});
    Var r = t.dot(g[0], g[0]);
    auto gx = t.backward(r, {x});
    CHECK(gx[0](0, 0) == doctest::Approx(8.0).epsilon(1e-12));
    CHECK(gx[0](0, 1) == doctest::Approx(2.0).epsilon(1e-12));

    // cross-check against central differences on the gradient-norm map
    auto f = [&](const Mat& xv) {
        Tape t2;
        Var xx = t2.leaf(xv);
        Var qq = t2.smul(t2.dot(t2.matmul(xx, t2.constant(A)), xx), 0.5);
        auto gg = t2.backward(qq, {xx});
        return gg[0][0] * gg[0][0] + gg[0][1] * gg[0][1];
    };
    Mat fd = fd_grad(f, Mat::row({1, 1}), 1e-5);
    CHECK(rel_err(fd(0, 0), 8.0) < 1e-6);
    CHECK(rel_err(fd(0, 1), 2.0) < 1e-6);
}

namespace {

// One scalar head built around a single primitive, for FD testing. Inputs are
// two leaves; the head mixes the op output so every entry matters.
struct PrimCase {
    const char* name;
    int ra, ca, rb, cb;  // leaf shapes (rb=0: unary)
    double lo, hi;       // input range
    std::function<Var(Tape&, Var, Var)> build;
};

const std::vector<PrimCase>& prim_cases() {
    static const std::vector<PrimCase> cases = {
        {"add", 3, 2, 3, 2, -1, 1, [](Tape& t, Var a, Var b) { return t.add(a, b); }},
        {"add_bcast", 3, 2, 1, 1, -1, 1, [](Tape& t, Var a, Var b) { return t.add(a, b); }},
        {"sub", 3, 2, 3, 2, -1, 1, [](Tape& t, Var a, Var b) { return t.sub(a, b); }},
        {"neg", 3, 2, 0, 0, -1, 1, [](Tape& t, Var a, Var) { return t.neg(a); }},
        {"mul", 3, 2, 3, 2, -1, 1, [](Tape& t, Var a, Var b) { return t.mul(a, b); }},
        {"mul_bcast", 1, 1, 3, 2, -1, 1, [](Tape& t, Var a, Var b) { return t.mul(a, b); }},
        {"smul", 3, 2, 0, 0, -1, 1, [](Tape& t, Var a, Var) { return t.smul(a, 1.7); }},
        {"matmul", 3, 4, 4, 2, -1, 1, [](Tape& t, Var a, Var b) { return t.matmul(a, b); }},
        {"transpose", 3, 2, 0, 0, -1, 1, [](Tape& t, Var a, Var) { return t.transpose(a); }},
        {"dot", 3, 2, 3, 2, -1, 1, [](Tape& t, Var a, Var b) { return t.dot(a, b); }},
        {"sum", 3, 2, 0, 0, -1, 1, [](Tape& t, Var a, Var) { return t.sum(a); }},
        {"sum_rows", 3, 2, 0, 0, -1, 1, [](Tape& t, Var a, Var) { return t.sum_rows(a); }},
        {"add_row", 3, 2, 1, 2, -1, 1, [](Tape& t, Var a, Var b) { return t.add_row(a, b); }},
        {"repeat_rows", 1, 3, 0, 0, -1, 1, [](Tape& t, Var a, Var) { return t.repeat_rows(a, 4); }},
        {"sin", 3, 2, 0, 0, -2, 2, [](Tape& t, Var a, Var) { return t.sin(a); }},
        {"cos", 3, 2, 0, 0, -2, 2, [](Tape& t, Var a, Var) { return t.cos(a); }},
        {"exp", 3, 2, 0, 0, -1, 1, [](Tape& t, Var a, Var) { return t.exp(a); }},
        {"log", 3, 2, 0, 0, 0.5, 2, [](Tape& t, Var a, Var) { return t.log(a); }},
        {"tanh", 3, 2, 0, 0, -2, 2, [](Tape& t, Var a, Var) { return t.tanh(a); }},
        {"softplus", 3, 2, 0, 0, -2, 2, [](Tape& t, Var a, Var) { return t.softplus(a); }},
        {"sigmoid", 3, 2, 0, 0, -2, 2, [](Tape& t, Var a, Var) { return t.sigmoid(a); }},
        {"square", 3, 2, 0, 0, -1, 1, [](Tape& t, Var a, Var) { return t.square(a); }},
        {"pow", 3, 2, 0, 0, 0.5, 2, [](Tape& t, Var a, Var) { return t.pow(a, -1.5); }},
        {"maxe", 3, 2, 3, 2, -1, 1, [](Tape& t, Var a, Var b) { return t.maxe(a, b); }},
        {"maxc", 3, 2, 0, 0, -1, 1, [](Tape& t, Var a, Var) { return t.maxc(a, 0.1); }},
        {"minc", 3, 2, 0, 0, -1, 1, [](Tape& t, Var a, Var) { return t.minc(a, 0.1); }},
        {"concat", 3, 2, 3, 3, -1, 1, [](Tape& t, Var a, Var b) { return t.concat(a, b); }},
        {"slice_cols", 3, 4, 0, 0, -1, 1, [](Tape& t, Var a, Var) { return t.slice_cols(a, 1, 3); }},
        {"concat_rows", 2, 3, 4, 3, -1, 1, [](Tape& t, Var a, Var b) { return t.concat_rows(a, b); }},
        {"slice_rows", 4, 3, 0, 0, -1, 1, [](Tape& t, Var a, Var) { return t.slice_rows(a, 1, 3); }},
        {"row_matvec", 4, 9, 4, 3, -1, 1, [](Tape& t, Var a, Var b) { return t.row_matvec(a, b); }},
        {"row_matvec_t", 4, 9, 4, 3, -1, 1, [](Tape& t, Var a, Var b) { return t.row_matvec_t(a, b); }},
        {"row_outer", 4, 3, 4, 3, -1, 1, [](Tape& t, Var a, Var b) { return t.row_outer(a, b); }},
        {"row_transpose", 4, 9, 0, 0, -1, 1, [](Tape& t, Var a, Var) { return t.row_transpose(a, 3); }},
    };
    return cases;
}

// Head: dot the op output against a fixed random matrix so the scalar depends
// on every output entry.
double head_value(const PrimCase& pc, const Mat& av, const Mat& bv, const Mat& mix) {
    Tape t;
    Var a = t.leaf(av);
    Var b = pc.rb > 0 ? t.leaf(bv) : Var{};
    Var out = pc.build(t, a, b);
    return t.val(t.dot(out, t.constant(mix)))[0];
}

}  // namespace

TEST_CASE("every primitive matches central finite differences") {
    Rng rng(20240811);
    for (const auto& pc : prim_cases()) {
        CAPTURE(pc.name);
        for (int rep = 0; rep < 100; ++rep) {
            Mat av = random_mat(pc.ra, pc.ca, rng, pc.lo, pc.hi);
            Mat bv = pc.rb > 0 ? random_mat(pc.rb, pc.cb, rng, pc.lo, pc.hi) : Mat();

            Tape t;
            Var a = t.leaf(av);
            Var b = pc.rb > 0 ? t.leaf(bv) : Var{};
            Var out = pc.build(t, a, b);
            Mat mix = random_mat(t.rows(out), t.cols(out), rng);
            Var head = t.dot(out, t.constant(mix));
            std::vector<Var> wrt = {a};
            if (pc.rb > 0) wrt.push_back(b);
            auto grads = t.backward(head, wrt);

            Mat fda = fd_grad([&](const Mat& x) { return head_value(pc, x, bv, mix); }, av, 1e-5);
            double worst = 0.0;
            for (size_t i = 0; i < fda.size(); ++i) worst = std::max(worst, rel_err(grads[0][i], fda[i]));
            if (pc.rb > 0) {
                Mat fdb = fd_grad([&](const Mat& x) { return head_value(pc, av, x, mix); }, bv, 1e-5);
                for (size_t i = 0; i < fdb.size(); ++i) worst = std::max(worst, rel_err(grads[1][i], fdb[i]));
            }
            REQUIRE(worst < 1e-6);
        }
    }
}

TEST_CASE("nested backward matches finite differences of first-order gradients") {
    // Random smooth composite: y = sum(softplus(A * B) . sin(A)) + dot-based terms.
    Rng rng(7);
    for (int rep = 0; rep < 20; ++rep) {
        Mat av = random_mat(2, 3, rng);
        Mat bv = random_mat(3, 2, rng);

        auto first_grad = [&](const Mat& a_in) {
            Tape t;
            Var a = t.leaf(a_in);
            Var b = t.constant(bv);
            Var y = t.sum(t.mul(t.softplus(t.matmul(a, b)), t.tanh(t.matmul(a, b))));
            return t.backward(y, {a})[0];
        };

        // second-order via graph backward then numeric backward of a probe
        Tape t;
        Var a = t.leaf(av);
        Var b = t.constant(bv);
        Var y = t.sum(t.mul(t.softplus(t.matmul(a, b)), t.tanh(t.matmul(a, b))));
        auto g = t.backward_graph(y, {a});
        Mat probe = random_mat(2, 3, rng);
        Var s = t.dot(g[0], t.constant(probe));
        auto h_ad = t.backward(s, {a})[0];  // d/da <grad, probe>

        const double h = 1e-5;
        Mat h_fd(2, 3);
        Mat x = av;
        for (size_t i = 0; i < x.size(); ++i) {
            const double xi = x[i];
            x[i] = xi + h;
            Mat gp = first_grad(x);
            x[i] = xi - h;
            Mat gm = first_grad(x);
            x[i] = xi;
            double s_p = 0.0, s_m = 0.0;
            for (size_t k = 0; k < gp.size(); ++k) {
                s_p += gp[k] * probe[k];
                s_m += gm[k] * probe[k];
            }
            h_fd[i] = (s_p - s_m) / (2.0 * h);
        }
        for (size_t i = 0; i < h_fd.size(); ++i) REQUIRE(rel_err(h_ad[i], h_fd[i]) < 1e-4);
    }
}

namespace {

struct QuadField : ScalarField {
    int n;
    explicit QuadField(int n) : n(n) {}
    int dim() const override { return n; }
    Var apply(Tape& t, const Binding&, Var X) const override {
        return t.smul(rowwise_sqnorm(t, X), 0.5);
    }
};

struct CubicField : ScalarField {  // f(x) = x1^2 x2
    int dim() const override { return 2; }
    Var apply(Tape& t, const Binding&, Var X) const override {
        Var x1 = t.slice_cols(X, 0, 1);
        Var x2 = t.slice_cols(X, 1, 2);
        return t.mul(t.square(x1), x2);
    }
};

}  // namespace

TEST_CASE("hessian-vector products") {
    ParamStore empty;
    {
        QuadField f(3);
        Mat x = Mat::row({0.3, -0.7, 1.1});
        Mat v = Mat::row({1.0, 2.0, -0.5});
        Mat hv = field_hvp(f, empty, x, v);
        for (size_t i = 0; i < v.size(); ++i) CHECK(hv[i] == doctest::Approx(v[i]).epsilon(1e-12));
    }
    {
        CubicField f;
        Mat hv = field_hvp(f, empty, Mat::row({1, 1}), Mat::row({1, 0}));
        CHECK(hv[0] == doctest::Approx(2.0).epsilon(1e-12));
        CHECK(hv[1] == doctest::Approx(2.0).epsilon(1e-12));
    }
    {
        // random 2-layer softplus net vs central finite differences of the gradient
        Rng rng(99);
        ParamStore ps;
        MlpField f({3, 8, 8, 1}, "f", ps, rng);
        for (int rep = 0; rep < 10; ++rep) {
            Mat x = random_mat(1, 3, rng);
            Mat v = random_mat(1, 3, rng);
            Mat hv = field_hvp(f, ps, x, v);

            const double h = 1e-4;
            Mat xp = x, xm = x;
            for (int i = 0; i < 3; ++i) {
                xp(0, i) = x(0, i) + h * v(0, i);
                xm(0, i) = x(0, i) - h * v(0, i);
            }
            Mat gp = f.grad(ps, xp), gm = f.grad(ps, xm);
            for (int i = 0; i < 3; ++i) {
                const double fd = (gp[i] - gm[i]) / (2.0 * h);
                REQUIRE(rel_err(hv[i], fd) < 1e-5);
            }
        }
    }
}

TEST_CASE("replay is deterministic bit-for-bit") {
    Rng rng(5);
    Mat av = random_mat(4, 4, rng), bv = random_mat(4, 4, rng);
    auto run = [&]() {
        Tape t;
        Var a = t.leaf(av), b = t.leaf(bv);
        Var y = t.sum(t.softplus(t.matmul(t.sin(a), t.exp(b))));
        auto g = t.backward(y, {a, b});
        return std::make_pair(t.val(y)[0], g);
    };
    auto [y1, g1] = run();
    auto [y2, g2] = run();
    CHECK(std::memcmp(&y1, &y2, sizeof(double)) == 0);
    for (int k = 0; k < 2; ++k)
        for (size_t i = 0; i < g1[k].size(); ++i)
            CHECK(std::memcmp(&g1[k][i], &g2[k][i], sizeof(double)) == 0);
}

TEST_CASE("structured errors") {
    Tape t;
    Var a = t.constant(Mat(2, 3));
    Var b = t.constant(Mat(2, 3));
    CHECK_THROWS_WITH_AS(t.matmul(a, b), doctest::Contains("matmul"), Error);
    CHECK_THROWS_AS(t.add(a, t.constant(Mat(3, 3))), Error);

    Var big = t.constant(Mat(2, 2));
    CHECK_THROWS_WITH_AS(t.backward(big, {a}), doctest::Contains("scalar"), Error);

    Var s = t.sum(a);
    CHECK_THROWS_AS(t.backward(s, {Var{9999}}), Error);
}
