// Serial reference vs OpenMP kernels for the metrics.
//   ./bench_kernels --benchmark_filter=Si
// HANDIFF_WORKERS sets the thread count of the parallel variants.

#include "handiff/kernels.hpp"
#include "handiff/metrics.hpp"
#include "handiff/synth_hand.hpp"

#include <benchmark/benchmark.h>

using namespace handiff;

namespace {

const HandRig& rig() {
  static const HandRig r = build_template();
  return r;
}

std::vector<Mat> posed_meshes(int n, double noise) {
  Rng rng(7);
  std::vector<Mat> out;
  for (int i = 0; i < n; ++i)
    out.push_back(pose_hand(rig(), sample_pose(rng, rig()), false) + randn(rng, rig().vertex_count(), 3) * noise);
  return out;
}

void BM_SiSerial(benchmark::State& state) {
  const Mat v = posed_meshes(1, 1.0).front();
  for (auto _ : state) benchmark::DoNotOptimize(si(v, rig().topology));
  state.SetItemsProcessed(state.iterations() * rig().topology.face_count());
}

void BM_SiParallel(benchmark::State& state) {
  const Mat v = posed_meshes(1, 1.0).front();
  for (auto _ : state) benchmark::DoNotOptimize(par::si(v, rig().topology));
  state.SetItemsProcessed(state.iterations() * rig().topology.face_count());
}

void BM_ApdSerial(benchmark::State& state) {
  const std::vector<Mat> meshes = posed_meshes(static_cast<int>(state.range(0)), 0.0);
  for (auto _ : state) benchmark::DoNotOptimize(apd(meshes));
}

void BM_ApdParallel(benchmark::State& state) {
  const std::vector<Mat> meshes = posed_meshes(static_cast<int>(state.range(0)), 0.0);
  for (auto _ : state) benchmark::DoNotOptimize(par::apd(meshes));
}

}  // namespace

BENCHMARK(BM_SiSerial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_SiParallel)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ApdSerial)->Arg(16)->Arg(64)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_ApdParallel)->Arg(16)->Arg(64)->Unit(benchmark::kMicrosecond);

int main(int argc, char** argv) {
  par::apply_worker_env();
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
