#include <doctest.h>

#include <cmath>
#include <random>

#include "greskit/autodiff.hpp"
#include "greskit/gradcheck.hpp"

using namespace greskit;
using namespace greskit::ad;

namespace {

Tensor random_tensor(std::vector<int> shape, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0, 1);
  for (auto& v : t.values()) v = n(rng);
  return t;
}

}  // namespace

TEST_CASE("every primitive agrees with finite differences") {
  const auto results = primitive_gradient_checks(3);
  CHECK(results.size() >= 20);
  for (const auto& [name, r] : results) {
    INFO(name, " worst ", r.worst);
    CHECK(r.checked > 0);
    CHECK(r.max_rel_error < 1e-6);
  }
}

TEST_CASE("linear and softmax sub-graphs") {
  CHECK(linear_gradient_check().max_rel_error < 1e-7);
  CHECK(softmax_ce_gradient_check().max_rel_error < 1e-6);
}

TEST_CASE("fan-out accumulates gradient") {
  // y = sum(x * x + x): x feeds three edges, dy/dx = 2x + 1.
  ParameterSet ps;
  ps.add("x", Tensor({3}, std::vector<double>{1, 2, 3}));
  Graph h;
  const Var p = h.parameter(ps, 0);
  CHECK(h.parameter(ps, 0).id == p.id);
  const Var y = sum(h, add(h, mul(h, p, p), p));
  std::vector<Tensor> grads = ps.zero_gradients();
  h.backward(y, &grads);
  CHECK(grads[0][0] == 3.0);
  CHECK(grads[0][1] == 5.0);
  CHECK(grads[0][2] == 7.0);
  CHECK_FALSE(h.requires_grad(h.constant(Tensor({1}, 0.0))));
}

TEST_CASE("graphs without gradients record no backward work") {
  ParameterSet ps;
  ps.add("w", Tensor({2, 2}, 1.0));
  Graph g(false);
  const Var w = g.parameter(ps, 0);
  const Var y = sum(g, matmul(g, w, w));
  CHECK(g.value(y)[0] == 8.0);
  CHECK_FALSE(g.needs_grad(y));
}

TEST_CASE("causal softmax rows are normalized and never look ahead") {
  std::mt19937_64 rng(4);
  Graph g(false);
  const Var s = g.constant(random_tensor({5, 5}, rng));
  const auto& p = g.value(causal_softmax(g, s));
  for (int r = 0; r < 5; ++r) {
    double total = 0.0;
    for (int c = 0; c < 5; ++c) {
      if (c > r) CHECK(p[r * 5 + c] == 0.0);
      total += p[r * 5 + c];
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-14));
  }
}

TEST_CASE("conv2d matches a direct loop") {
  std::mt19937_64 rng(8);
  const int h = 7, w = 6, cin = 3, cout = 4, k = 3;
  const auto in = random_tensor({h, w, cin}, rng);
  const auto wt = random_tensor({k * k * cin, cout}, rng);
  const auto b = random_tensor({cout}, rng);
  for (int stride : {1, 2}) {
    Graph g(false);
    const auto& out = g.value(conv2d(g, g.constant(in), g.constant(wt), g.constant(b), k, stride, 1));
    const int oh = (h + 2 - k) / stride + 1, ow = (w + 2 - k) / stride + 1;
    REQUIRE(out.shape() == std::vector<int>{oh, ow, cout});
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        for (int o = 0; o < cout; ++o) {
          double acc = b[o];
          for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
              const int iy = y * stride + ky - 1, ix = x * stride + kx - 1;
              if (iy < 0 || ix < 0 || iy >= h || ix >= w) continue;
              for (int c = 0; c < cin; ++c) {
                acc += in[(iy * w + ix) * cin + c] * wt[((ky * k + kx) * cin + c) * cout + o];
              }
            }
          }
          CHECK(out[(y * ow + x) * cout + o] == doctest::Approx(acc).epsilon(1e-12));
        }
      }
    }
  }
}

TEST_CASE("bilinear weights interpolate") {
  for (auto [in, out] : {std::pair{4, 16}, std::pair{16, 64}, std::pair{5, 5}, std::pair{3, 7}}) {
    const auto wts = bilinear_weights(in, out);
    REQUIRE(wts.size() == static_cast<std::size_t>(in * out));
    for (int o = 0; o < out; ++o) {
      double s = 0.0;
      for (int i = 0; i < in; ++i) {
        CHECK(wts[o * in + i] >= 0.0);
        s += wts[o * in + i];
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
    }
  }
  // Same size is the identity.
  const auto id = bilinear_weights(5, 5);
  for (int o = 0; o < 5; ++o) {
    for (int i = 0; i < 5; ++i) CHECK(id[o * 5 + i] == (o == i ? 1.0 : 0.0));
  }
}

TEST_CASE("shape errors") {
  Graph g(false);
  const Var a = g.constant(Tensor({2, 3}, 1.0));
  const Var b = g.constant(Tensor({2, 3}, 1.0));
  CHECK_THROWS(matmul(g, a, b));
  CHECK_THROWS(add(g, a, g.constant(Tensor({3, 2}, 1.0))));
  CHECK_THROWS(reshape(g, a, {4}));
  CHECK_THROWS(Tensor({2, 2}, std::vector<double>{1, 2, 3}));
  CHECK_NOTHROW(matmul(g, a, b, false, true));
}
