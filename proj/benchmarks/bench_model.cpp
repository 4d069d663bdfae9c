#include <benchmark/benchmark.h>

#include "greskit/synth.hpp"
#include "greskit/train.hpp"

namespace {

struct Fixture {
  greskit::SynthOutput data;
  greskit::ToyModel model;
  std::vector<greskit::TrainingExample> batch;
};

Fixture& fixture() {
  static Fixture f = [] {
    greskit::SynthConfig sc;
    sc.samples = 40;
    sc.seed = 3;
    auto data = greskit::synth_generate(sc);
    greskit::ToyConfig mc;
    greskit::ToyModel model(mc, greskit::make_vocabulary(greskit::dataset_words(data.dataset)));
    return Fixture{std::move(data), std::move(model), {}};
  }();
  if (f.batch.empty()) {
    const std::vector<greskit::Split> splits{greskit::Split::kTrain};
    static const greskit::TrainingSet set(f.data.dataset, f.data.images, splits);
    f.batch = set.fixed(f.model.config().referents_per_prompt());
    f.batch.resize(4);
  }
  return f;
}

void BM_ForwardLogits(benchmark::State& state) {
  auto& f = fixture();
  const auto prompt = f.model.prompt_tokens({{"red circle", "blue square"}, greskit::QuestionForm::kWhat});
  const auto& image = f.data.images.begin()->second;
  for (auto _ : state) benchmark::DoNotOptimize(f.model.forward_logits(image, prompt));
}
BENCHMARK(BM_ForwardLogits)->Unit(benchmark::kMillisecond);

void BM_BatchLossAndGradient(benchmark::State& state) {
  auto& f = fixture();
  for (auto _ : state) {
    auto grads = f.model.params().zero_gradients();
    benchmark::DoNotOptimize(greskit::batch_loss(f.model, f.batch, {}, &grads));
  }
}
BENCHMARK(BM_BatchLossAndGradient)->Unit(benchmark::kMillisecond);

void BM_Generate(benchmark::State& state) {
  auto& f = fixture();
  const auto prompt = f.model.prompt_tokens({{"red circle", "blue square"}, greskit::QuestionForm::kWhat});
  const auto& image = f.data.images.begin()->second;
  for (auto _ : state) benchmark::DoNotOptimize(f.model.generate(image, prompt, 24));
}
BENCHMARK(BM_Generate)->Unit(benchmark::kMillisecond);

}  // namespace
