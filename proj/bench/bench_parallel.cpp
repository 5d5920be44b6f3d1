#include <benchmark/benchmark.h>

#include "shortlong/core.hpp"
#include "shortlong/envs.hpp"
#include "shortlong/harness.hpp"
#include "shortlong/policygen.hpp"
#include "shortlong/slev.hpp"

using namespace shortlong;

namespace {

Exec mode(const benchmark::State& st) { return st.range(0) == 0 ? Exec::serial : Exec::parallel; }

void label(benchmark::State& st) { st.SetLabel(st.range(0) == 0 ? "serial" : "parallel"); }

void BM_CollectRecordsHiv(benchmark::State& st) {
    HivEnv env;
    ConstantPolicy pol("rti", hiv_actions()[1]);
    const auto starts = hiv_initial_states(16, 0.6, 1);
    for (auto _ : st)
        benchmark::DoNotOptimize(collect_records(env, pol, starts, 1, 50, 3, mode(st)));
    label(st);
}

PolicyDataset kidney_dataset() {
    KidneyEnv env;
    const auto starts = kidney_initial_states(10, 1);
    PolicyDataset d;
    d.env_id = "kidney";
    d.horizon = env.horizon();
    for (int i = 0; i < 40; ++i) {
        PolicySpec spec;
        spec.kind = PolicyKind::continuous_controller;
        spec.epsilon = 0.05 + 0.01 * i;
        auto pol = make_controller_policy("p" + std::to_string(i), spec);
        auto recs = collect_records(env, *pol, starts, 5, env.horizon(), static_cast<std::uint64_t>(i));
        d.records.insert(d.records.end(), recs.begin(), recs.end());
    }
    return d;
}

void BM_SlevFit(benchmark::State& st) {
    static const PolicyDataset data = kidney_dataset();
    MlpHyper h;
    h.layer_sizes = {0, 32, 16, 1};
    h.max_updates = 500;
    const std::vector<MlpHyper> grid{h};
    for (auto _ : st)
        benchmark::DoNotOptimize(slev_fit(data, 3, true, grid, 4, DensityRatio::unit(), 0, mode(st)));
    label(st);
}

void BM_BoundCoverage(benchmark::State& st) {
    BoundExperiment e;
    for (auto _ : st) benchmark::DoNotOptimize(verify_bound_empirically(e, 40, 0, mode(st)));
    label(st);
}

}  // namespace

BENCHMARK(BM_CollectRecordsHiv)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_SlevFit)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_BoundCoverage)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->UseRealTime();

BENCHMARK_MAIN();
