#include <benchmark/benchmark.h>

#include "ghnn/decomp.hpp"
#include "ghnn/fields.hpp"

using namespace ghnn;

namespace {

void MatMulKernel(benchmark::State& state) {
    const int m = static_cast<int>(state.range(0));
    Rng rng(1);
    Mat A(m, 64), B(64, 64), C(m, 64);
    for (size_t i = 0; i < A.size(); ++i) A[i] = rng.uniform(-1, 1);
    for (size_t i = 0; i < B.size(); ++i) B[i] = rng.uniform(-1, 1);
    for (auto _ : state) {
        kernels::matmul(A, B, C);
        benchmark::DoNotOptimize(C.data());
    }
    state.SetItemsProcessed(state.iterations() * 2 * int64_t(m) * 64 * 64);
}
BENCHMARK(MatMulKernel)->Arg(128)->Arg(1024)->Arg(6144);

void MlpForward(benchmark::State& state) {
    const int rows = static_cast<int>(state.range(0));
    Rng rng(2);
    ParamStore ps;
    Mlp net({2, 64, 64, 2}, "net", ps, rng);
    Mat X(rows, 2);
    for (size_t i = 0; i < X.size(); ++i) X[i] = rng.uniform(-2, 2);
    for (auto _ : state) {
        Tape t;
        Binding bind = Binding::bind(t, ps);
        Var y = net.apply(t, bind, t.constant(X));
        benchmark::DoNotOptimize(t.val(y).data());
    }
    state.SetItemsProcessed(state.iterations() * rows);
}
BENCHMARK(MlpForward)->Arg(128)->Arg(1024)->Arg(6144);

void MlpBackward(benchmark::State& state) {
    const int rows = static_cast<int>(state.range(0));
    Rng rng(3);
    ParamStore ps;
    Mlp net({2, 64, 64, 2}, "net", ps, rng);
    Mat X(rows, 2);
    for (size_t i = 0; i < X.size(); ++i) X[i] = rng.uniform(-2, 2);
    for (auto _ : state) {
        Tape t;
        Binding bind = Binding::bind(t, ps);
        Var y = t.sum(t.square(net.apply(t, bind, t.constant(X))));
        auto g = t.backward(y, bind.vars);
        benchmark::DoNotOptimize(g.data());
    }
    state.SetItemsProcessed(state.iterations() * rows);
}
BENCHMARK(MlpBackward)->Arg(128)->Arg(1024)->Arg(6144);

// nested differentiation: field assembly with grad H and the concave HVP
void StableFieldEval(benchmark::State& state) {
    const int rows = static_cast<int>(state.range(0));
    ModelConfig cfg;
    cfg.variant = ModelVariant::GhnnGlobalStable;
    cfg.n = 2;
    cfg.hidden = {64, 64};
    cfg.seed = 4;
    DecompModel m = DecompModel::build(cfg);
    Rng rng(5);
    Mat X(rows, 2);
    for (size_t i = 0; i < X.size(); ++i) X[i] = rng.uniform(-2, 2);
    for (auto _ : state) {
        Mat f = m.eval_field(X);
        benchmark::DoNotOptimize(f.data());
    }
    state.SetItemsProcessed(state.iterations() * rows);
}
BENCHMARK(StableFieldEval)->Arg(128)->Arg(1024);

}  // namespace
