#include <benchmark/benchmark.h>

#include "ghnn/losses.hpp"

using namespace ghnn;

namespace {

TrajectoryDataset bench_data() {
    auto sys = AnalyticSystem::make(SystemKind::Pendulum);
    Rng rng(11);
    static TrajectoryDataset ds =
        generate(sys, {sys.sample_ic(rng), sys.sample_ic(rng)}, 20.0, 50.0, 0.1, 11);
    return ds;
}

DecompModel bench_model(ModelVariant v) {
    ModelConfig cfg;
    cfg.variant = v;
    cfg.n = 2;
    cfg.hidden = {64, 64};
    cfg.seed = 12;
    return DecompModel::build(cfg);
}

std::vector<Window> bench_windows(const TrajectoryDataset& ds, int l) {
    BatchSpec spec;
    spec.batch_size = 120;
    spec.batch_steps = l;
    Rng rng(13);
    return sample_batch(ds, spec, rng);
}

void WeakLossGrad(benchmark::State& state) {
    TrajectoryDataset ds = bench_data();
    DecompModel m = bench_model(state.range(0) == 0 ? ModelVariant::Fcnn : ModelVariant::GhnnLocalStable);
    auto windows = bench_windows(ds, 50);
    LossOptions o;
    o.kind = LossKind::Weak;
    o.batch_steps = 50;
    for (auto _ : state) {
        LossResult r = loss_eval(m, ds, windows, o, true);
        benchmark::DoNotOptimize(r.grad.data());
    }
}
BENCHMARK(WeakLossGrad)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void StateLossGrad(benchmark::State& state) {
    TrajectoryDataset ds = bench_data();
    DecompModel m = bench_model(ModelVariant::Fcnn);
    auto windows = bench_windows(ds, 50);
    LossOptions o;
    o.kind = LossKind::State;
    o.batch_steps = 50;
    o.state_cfg = IntegrationConfig::rk4(0.0, 4);
    for (auto _ : state) {
        LossResult r = loss_eval(m, ds, windows, o, true);
        benchmark::DoNotOptimize(r.grad.data());
    }
}
BENCHMARK(StateLossGrad)->Unit(benchmark::kMillisecond);

void DerivLossGrad(benchmark::State& state) {
    TrajectoryDataset ds = bench_data();
    DecompModel m = bench_model(ModelVariant::Fcnn);
    auto windows = bench_windows(ds, 50);
    LossOptions o;
    o.kind = LossKind::Deriv;
    o.batch_steps = 50;
    for (auto _ : state) {
        LossResult r = loss_eval(m, ds, windows, o, true);
        benchmark::DoNotOptimize(r.grad.data());
    }
}
BENCHMARK(DerivLossGrad)->Unit(benchmark::kMillisecond);

}  // namespace
