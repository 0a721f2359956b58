#include <benchmark/benchmark.h>

#include "ghnn/odeint.hpp"
#include "ghnn/systems.hpp"

using namespace ghnn;

namespace {

void Dopri45Lorenz(benchmark::State& state) {
    auto sys = AnalyticSystem::make(SystemKind::Lorenz63);
    std::vector<double> ts;
    for (int i = 0; i <= 100; ++i) ts.push_back(0.1 * i);
    const std::vector<double> x0 = {1.0, 1.0, 20.0};
    const OdeFn f = sys.ode();
    for (auto _ : state) {
        IntegrateResult r = integrate(f, x0, ts, IntegrationConfig::paper_dopri());
        benchmark::DoNotOptimize(r.states.data());
    }
}
BENCHMARK(Dopri45Lorenz)->Unit(benchmark::kMillisecond);

void Rk4NBody(benchmark::State& state) {
    auto sys = AnalyticSystem::make(SystemKind::NBody, static_cast<int>(state.range(0)));
    Rng rng(7);
    std::vector<double> x0 = sys.sample_ic(rng);
    std::vector<double> ts = {0.0, 0.5};
    const OdeFn f = sys.ode();
    IntegrationConfig cfg = IntegrationConfig::rk4(1e-3);
    for (auto _ : state) {
        IntegrateResult r = integrate(f, x0, ts, cfg);
        benchmark::DoNotOptimize(r.states.data());
    }
}
BENCHMARK(Rk4NBody)->Arg(4)->Arg(12)->Unit(benchmark::kMillisecond);

}  // namespace
