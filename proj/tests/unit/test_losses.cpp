#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "greskit/error.hpp"
#include "greskit/losses.hpp"

using namespace greskit;

TEST_CASE("uniform logits give ln V") {
  for (std::size_t v : {2u, 7u, 55u}) {
    std::vector<double> logits(3 * v, 0.25);
    const std::vector<std::int32_t> targets{0, 1, static_cast<std::int32_t>(v - 1)};
    const std::vector<std::uint8_t> ignore(3, 0);
    const double l = lm_cross_entropy(logits, v, targets, ignore);
    CHECK(std::abs(l - std::log(static_cast<double>(v))) <= 1e-12 * std::log(static_cast<double>(v)));
  }
}

TEST_CASE("cross entropy gradient is softmax minus one-hot over kept rows") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0, 2);
  const std::size_t v = 6;
  std::vector<double> logits(4 * v);
  for (auto& x : logits) x = n(rng);
  const std::vector<std::int32_t> targets{1, 5, 0, 2};
  const std::vector<std::uint8_t> ignore{0, 1, 0, 0};
  std::vector<double> grad(logits.size());
  const double l = lm_cross_entropy(logits, v, targets, ignore, grad);

  double expect = 0.0;
  for (std::size_t r = 0; r < 4; ++r) {
    double z = 0.0;
    for (std::size_t k = 0; k < v; ++k) z += std::exp(logits[r * v + k]);
    for (std::size_t k = 0; k < v; ++k) {
      const double p = std::exp(logits[r * v + k]) / z;
      const double want = ignore[r] ? 0.0 : (p - (static_cast<int>(k) == targets[r] ? 1.0 : 0.0)) / 3.0;
      CHECK(grad[r * v + k] == doctest::Approx(want).epsilon(1e-12));
    }
    if (!ignore[r]) expect += std::log(z) - logits[r * v + targets[r]];
  }
  CHECK(l == doctest::Approx(expect / 3.0).epsilon(1e-12));

  const std::vector<std::uint8_t> all(4, 1);
  CHECK_THROWS_AS(lm_cross_entropy(logits, v, targets, all), ValidationError);
  const std::vector<std::int32_t> bad{0, 1, 2, 6};
  CHECK_THROWS_AS(lm_cross_entropy(logits, v, bad, ignore), ValidationError);
}

TEST_CASE("bce at zero logits is ln 2 and stays finite for large logits") {
  const std::vector<double> zeros(16, 0.0);
  std::vector<double> y(16, 0.0);
  for (int i = 0; i < 8; ++i) y[i] = 1.0;
  CHECK(std::abs(bce_with_logits(zeros, y) - std::numbers::ln2) <= 1e-12 * std::numbers::ln2);

  const std::vector<double> big{800.0, -800.0, 800.0, -800.0};
  const std::vector<double> t{1.0, 0.0, 0.0, 1.0};
  const double l = bce_with_logits(big, t);
  CHECK(std::isfinite(l));
  CHECK(l == doctest::Approx(400.0));

  std::vector<double> g(4);
  bce_with_logits(std::vector<double>{0.3, -1.2, 2.0, 0.0}, t, g);
  const double x[4] = {0.3, -1.2, 2.0, 0.0};
  for (int i = 0; i < 4; ++i) CHECK(g[i] == doctest::Approx((1 / (1 + std::exp(-x[i])) - t[i]) / 4.0));
}

TEST_CASE("soft dice") {
  const std::vector<double> y{1, 1, 0, 0};
  // Confident and right: loss near 0. Confident and wrong: near 1.
  CHECK(dice_loss(std::vector<double>{40, 40, -40, -40}, y) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(dice_loss(std::vector<double>{-40, -40, 40, 40}, y) == doctest::Approx(1.0 - 1.0 / 5.0).epsilon(1e-9));
  // Zero logits: p = 0.5 everywhere -> 1 - (2*1 + 1) / (2 + 2 + 1).
  CHECK(dice_loss(std::vector<double>(4, 0.0), y) == doctest::Approx(1.0 - 3.0 / 5.0));
  // Empty target, zero logits: 1 - 1 / (2 + 1).
  CHECK(dice_loss(std::vector<double>(4, 0.0), std::vector<double>(4, 0.0)) == doctest::Approx(1.0 - 1.0 / 3.0));
}

TEST_CASE("total uses the default weights") {
  const LossWeights w;
  CHECK(w.lm == 1.0);
  CHECK(w.bce == 2.0);
  CHECK(w.dice == 0.5);
  const auto t = total_loss(0.7, 0.3, 0.9);
  CHECK(std::abs(t.total - (0.7 + 2.0 * 0.3 + 0.5 * 0.9)) <= 1e-12 * t.total);
  CHECK(mean_mask_loss({}) == 0.0);
  CHECK(mean_mask_loss(std::vector<double>{1.0, 2.0, 6.0}) == 3.0);
}

TEST_CASE("pairwise sum is order-fixed and accurate") {
  std::vector<double> v(1000, 0.1);
  CHECK(pairwise_sum(v) == doctest::Approx(100.0).epsilon(1e-14));
  CHECK(pairwise_sum({}) == 0.0);
  CHECK(pairwise_sum(std::vector<double>{3.0}) == 3.0);
}
