#include <benchmark/benchmark.h>

#include <random>

#include "greskit/mask.hpp"

namespace {

greskit::BinaryMask blobby(int side, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  greskit::BinaryMask m(side, side);
  std::uniform_int_distribution<int> pos(0, side - 1);
  for (int k = 0; k < 6; ++k) {
    const int r0 = pos(rng), c0 = pos(rng), rad = side / 8;
    for (int r = std::max(0, r0 - rad); r < std::min(side, r0 + rad); ++r) {
      for (int c = std::max(0, c0 - rad); c < std::min(side, c0 + rad); ++c) m.set(r, c);
    }
  }
  return m;
}

void BM_EncodeRle(benchmark::State& state) {
  const auto m = blobby(static_cast<int>(state.range(0)), 1);
  for (auto _ : state) benchmark::DoNotOptimize(greskit::encode_rle(m));
  state.SetItemsProcessed(state.iterations() * m.size());
}
BENCHMARK(BM_EncodeRle)->Arg(64)->Arg(256)->Arg(1024);

void BM_DecodeRle(benchmark::State& state) {
  const auto rle = greskit::encode_rle(blobby(static_cast<int>(state.range(0)), 2));
  for (auto _ : state) benchmark::DoNotOptimize(greskit::decode_rle(rle));
  state.SetItemsProcessed(state.iterations() * rle.height * rle.width);
}
BENCHMARK(BM_DecodeRle)->Arg(64)->Arg(256)->Arg(1024);

void BM_Iou(benchmark::State& state) {
  const int side = static_cast<int>(state.range(0));
  const auto a = blobby(side, 3), b = blobby(side, 4);
  for (auto _ : state) benchmark::DoNotOptimize(greskit::iou(a, b));
  state.SetItemsProcessed(state.iterations() * a.size());
}
BENCHMARK(BM_Iou)->Arg(64)->Arg(256)->Arg(1024);

}  // namespace
