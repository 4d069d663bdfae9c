#include <benchmark/benchmark.h>

#include "greskit/metrics.hpp"
#include "greskit/synth.hpp"

namespace {

struct Fixture {
  greskit::Dataset dataset;
  std::vector<greskit::Prediction> predictions;
};

// Every val ref of a synthetic set, predicted by its ground truth shifted a
// little so scores are not trivially 1.
const Fixture& fixture() {
  static const Fixture f = [] {
    greskit::SynthConfig sc;
    sc.samples = 4000;
    sc.seed = 1;
    sc.val_fraction = 0.5;
    Fixture out{greskit::synth_generate(sc).dataset, {}};
    for (auto id : out.dataset.refs_in_split(greskit::Split::kVal)) {
      const auto gt = greskit::ground_truth_mask(out.dataset, id);
      greskit::Prediction p;
      p.ref_id = id;
      greskit::BinaryMask m(gt.height(), gt.width());
      for (int r = 0; r < gt.height(); ++r) {
        for (int c = 1; c < gt.width(); ++c) m.set(r, c, gt.at(r, c - 1));
      }
      if (greskit::positive_pixel_count(m) == 0) {
        p.decision = greskit::Decision::kRej;
      } else {
        p.mask = std::move(m);
      }
      out.predictions.push_back(std::move(p));
    }
    return out;
  }();
  return f;
}

void BM_EvaluateGres(benchmark::State& state) {
  const auto& f = fixture();
  const int jobs = static_cast<int>(state.range(0));
  for (auto _ : state) {
    benchmark::DoNotOptimize(greskit::evaluate_gres(f.predictions, f.dataset, greskit::Split::kVal,
                                                    greskit::EmptyPolicy::explicit_token(), jobs));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(f.predictions.size()));
}
BENCHMARK(BM_EvaluateGres)->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond);

void BM_EvaluateRec(benchmark::State& state) {
  const auto& f = fixture();
  for (auto _ : state) {
    benchmark::DoNotOptimize(greskit::evaluate_rec(f.predictions, f.dataset, greskit::Split::kVal));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(f.predictions.size()));
}
BENCHMARK(BM_EvaluateRec)->Unit(benchmark::kMillisecond);

}  // namespace
