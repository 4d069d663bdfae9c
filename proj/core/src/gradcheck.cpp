#include "greskit/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "greskit/error.hpp"

namespace greskit {
namespace {

using ad::Graph;
using ad::Tensor;
using ad::Var;

Tensor random_tensor(std::vector<int> shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(shape), 0.0);
  std::normal_distribution<double> dist(0.0, scale);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

void note(GradCheckResult& r, double err, const std::string& where) {
  ++r.checked;
  if (r.worst.empty() || err > r.max_rel_error) {
    r.max_rel_error = err;
    r.worst = where;
  }
}

}  // namespace

nlohmann::json GradCheckResult::to_json() const {
  return {{"max_rel_error", max_rel_error}, {"checked", checked}, {"worst", worst}};
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult gradient_check(ToyModel& model, std::span<const TrainingExample> batch,
                               double epsilon, int samples, std::uint64_t seed,
                               const LossWeights& weights) {
  if (epsilon <= 0) throw ValidationError("gradient check epsilon must be positive");
  auto& params = model.params();
  auto grads = params.zero_gradients();
  batch_loss(model, batch, weights, &grads);

  std::mt19937_64 rng(seed);
  GradCheckResult r;
  for (int s = 0; s < samples; ++s) {
    const int ti = static_cast<int>(rng() % static_cast<std::uint64_t>(params.size()));
    auto& t = params.value(ti);
    const std::size_t ei = static_cast<std::size_t>(rng() % t.size());
    const double saved = t[ei];
    t[ei] = saved + epsilon;
    const double up = batch_loss(model, batch, weights, nullptr).total;
    t[ei] = saved - epsilon;
    const double down = batch_loss(model, batch, weights, nullptr).total;
    t[ei] = saved;
    const double numeric = (up - down) / (2 * epsilon);
    note(r, relative_error(grads[static_cast<std::size_t>(ti)][ei], numeric),
         params.name(ti) + "[" + std::to_string(ei) + "]");
  }
  return r;
}

GradCheckResult check_function(const GraphFunction& f, std::vector<Tensor> inputs, double epsilon,
                               std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x5eedULL);
  Tensor weights;
  auto scalar = [&](bool with_grad, std::vector<Tensor>* grads) {
    Graph g(with_grad);
    std::vector<Var> vars;
    ad::ParameterSet ps;
    for (std::size_t i = 0; i < inputs.size(); ++i) ps.add("x" + std::to_string(i), inputs[i]);
    for (int i = 0; i < ps.size(); ++i) vars.push_back(g.parameter(ps, i));
    const Var out = f(g, vars);
    if (weights.size() == 0) weights = random_tensor(g.value(out).shape(), rng);
    const Var loss = ad::sum(g, ad::mul(g, out, g.constant(weights)));
    if (grads) {
      *grads = ps.zero_gradients();
      g.backward(loss, grads);
    }
    return g.value(loss)[0];
  };
  std::vector<Tensor> grads;
  scalar(true, &grads);
  GradCheckResult r;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      const double saved = inputs[i][k];
      inputs[i][k] = saved + epsilon;
      const double up = scalar(false, nullptr);
      inputs[i][k] = saved - epsilon;
      const double down = scalar(false, nullptr);
      inputs[i][k] = saved;
      note(r, relative_error(grads[i][k], (up - down) / (2 * epsilon)),
           "x" + std::to_string(i) + "[" + std::to_string(k) + "]");
    }
  }
  return r;
}

GradCheckResult linear_gradient_check(double epsilon, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Tensor x = random_tensor({5, 4}, rng);
  const Tensor target = random_tensor({5, 3}, rng);
  std::vector<Tensor> inputs{random_tensor({4, 3}, rng), random_tensor({3}, rng)};
  std::vector<Tensor> grads;
  auto loss = [&](bool with_grad) {
    Graph g(with_grad);
    ad::ParameterSet ps;
    ps.add("weight", inputs[0]);
    ps.add("bias", inputs[1]);
    const Var y = ad::add_bias(g, ad::matmul(g, g.constant(x), g.parameter(ps, 0)), g.parameter(ps, 1));
    const Var diff = ad::sub(g, y, g.constant(target));
    const Var l = ad::scale(g, ad::sum(g, ad::mul(g, diff, diff)), 0.5);
    if (with_grad) {
      grads = ps.zero_gradients();
      g.backward(l, &grads);
    }
    return g.value(l)[0];
  };
  loss(true);
  GradCheckResult r;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      const double saved = inputs[i][k];
      inputs[i][k] = saved + epsilon;
      const double up = loss(false);
      inputs[i][k] = saved - epsilon;
      const double down = loss(false);
      inputs[i][k] = saved;
      note(r, relative_error(grads[i][k], (up - down) / (2 * epsilon)),
           (i == 0 ? "weight[" : "bias[") + std::to_string(k) + "]");
    }
  }
  return r;
}

GradCheckResult softmax_ce_gradient_check(double epsilon, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int rows = 4, vocab = 7;
  Tensor logits = random_tensor({rows, vocab}, rng, 2.0);
  std::vector<std::int32_t> targets;
  for (int i = 0; i < rows; ++i) targets.push_back(static_cast<std::int32_t>(rng() % vocab));

  auto loss = [&](std::vector<Tensor>* grads) {
    Graph g(grads != nullptr);
    ad::ParameterSet ps;
    ps.add("logits", logits);
    const Var l = ad::cross_entropy(g, g.parameter(ps, 0), targets);
    if (grads) {
      *grads = ps.zero_gradients();
      g.backward(l, grads);
    }
    return g.value(l)[0];
  };
  std::vector<Tensor> grads;
  loss(&grads);

  GradCheckResult r;
  for (int i = 0; i < rows; ++i) {
    double m = logits[static_cast<std::size_t>(i) * vocab];
    for (int k = 1; k < vocab; ++k) m = std::max(m, logits[static_cast<std::size_t>(i) * vocab + k]);
    double z = 0.0;
    for (int k = 0; k < vocab; ++k) z += std::exp(logits[static_cast<std::size_t>(i) * vocab + k] - m);
    for (int k = 0; k < vocab; ++k) {
      const std::size_t e = static_cast<std::size_t>(i) * vocab + k;
      // softmax minus one-hot, averaged over rows
      const double closed = (std::exp(logits[e] - m) / z - (targets[i] == k ? 1.0 : 0.0)) / rows;
      const double saved = logits[e];
      logits[e] = saved + epsilon;
      const double up = loss(nullptr);
      logits[e] = saved - epsilon;
      const double down = loss(nullptr);
      logits[e] = saved;
      const double numeric = (up - down) / (2 * epsilon);
      const std::string where = "logits[" + std::to_string(e) + "]";
      note(r, relative_error(grads[0][e], numeric), where);
      note(r, relative_error(grads[0][e], closed), where + " closed form");
    }
  }
  return r;
}

std::vector<std::pair<std::string, GradCheckResult>> primitive_gradient_checks(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto rt = [&](std::vector<int> shape, double scale = 1.0) { return random_tensor(std::move(shape), rng, scale); };
  constexpr double eps = 1e-5;
  std::vector<std::pair<std::string, GradCheckResult>> out;
  auto run = [&](const std::string& name, const GraphFunction& f, std::vector<Tensor> inputs) {
    out.emplace_back(name, check_function(f, std::move(inputs), eps, seed + out.size()));
  };

  for (int ta = 0; ta < 2; ++ta) {
    for (int tb = 0; tb < 2; ++tb) {
      std::vector<int> sa = ta ? std::vector<int>{4, 3} : std::vector<int>{3, 4};
      std::vector<int> sb = tb ? std::vector<int>{5, 4} : std::vector<int>{4, 5};
      run("matmul" + std::string(ta ? "_ta" : "") + (tb ? "_tb" : ""),
          [ta, tb](Graph& g, const std::vector<Var>& v) { return ad::matmul(g, v[0], v[1], ta, tb); },
          {rt(sa), rt(sb)});
    }
  }
  run("add", [](Graph& g, const std::vector<Var>& v) { return ad::add(g, v[0], v[1]); }, {rt({3, 4}), rt({3, 4})});
  run("sub", [](Graph& g, const std::vector<Var>& v) { return ad::sub(g, v[0], v[1]); }, {rt({3, 4}), rt({3, 4})});
  run("mul", [](Graph& g, const std::vector<Var>& v) { return ad::mul(g, v[0], v[1]); }, {rt({3, 4}), rt({3, 4})});
  run("scale", [](Graph& g, const std::vector<Var>& v) { return ad::scale(g, v[0], -1.7); }, {rt({2, 5})});
  run("add_bias", [](Graph& g, const std::vector<Var>& v) { return ad::add_bias(g, v[0], v[1]); },
      {rt({4, 3}), rt({3})});
  run("mul_scalar", [](Graph& g, const std::vector<Var>& v) { return ad::mul_scalar(g, v[0], v[1]); },
      {rt({3, 3}), rt({1})});
  run("gelu", [](Graph& g, const std::vector<Var>& v) { return ad::gelu(g, v[0]); }, {rt({4, 4}, 2.0)});
  run("tanh", [](Graph& g, const std::vector<Var>& v) { return ad::tanh(g, v[0]); }, {rt({4, 4})});
  run("layer_norm", [](Graph& g, const std::vector<Var>& v) { return ad::layer_norm(g, v[0], v[1], v[2]); },
      {rt({3, 6}), rt({6}), rt({6})});
  run("causal_softmax", [](Graph& g, const std::vector<Var>& v) { return ad::causal_softmax(g, v[0]); },
      {rt({5, 5}, 2.0)});
  run("slice_cols", [](Graph& g, const std::vector<Var>& v) { return ad::slice_cols(g, v[0], 1, 3); },
      {rt({3, 5})});
  run("concat_cols", [](Graph& g, const std::vector<Var>& v) { return ad::concat_cols(g, {v[0], v[1], v[0]}); },
      {rt({3, 2}), rt({3, 4})});
  run("concat_rows", [](Graph& g, const std::vector<Var>& v) { return ad::concat_rows(g, {v[0], v[1]}); },
      {rt({2, 3}), rt({4, 3})});
  run("gather_rows", [](Graph& g, const std::vector<Var>& v) { return ad::gather_rows(g, v[0], {2, 0, 2, 3}); },
      {rt({4, 3})});
  run("reshape", [](Graph& g, const std::vector<Var>& v) { return ad::reshape(g, v[0], {2, 6}); }, {rt({3, 4})});
  run("sum", [](Graph& g, const std::vector<Var>& v) { return ad::sum(g, v[0]); }, {rt({3, 4})});
  run("conv2d_stride2",
      [](Graph& g, const std::vector<Var>& v) { return ad::conv2d(g, v[0], v[1], v[2], 3, 2, 1); },
      {rt({6, 6, 2}), rt({18, 3}), rt({3})});
  run("conv2d_stride1",
      [](Graph& g, const std::vector<Var>& v) { return ad::conv2d(g, v[0], v[1], v[2], 3, 1, 1); },
      {rt({4, 5, 2}), rt({18, 2}), rt({2})});
  run("upsample_bilinear",
      [](Graph& g, const std::vector<Var>& v) { return ad::upsample_bilinear(g, v[0], 8, 6); },
      {rt({2, 4, 3})});
  run("cross_entropy",
      [](Graph& g, const std::vector<Var>& v) { return ad::cross_entropy(g, v[0], {1, 0, 4}); },
      {rt({3, 5}, 2.0)});
  run("bce_with_logits",
      [](Graph& g, const std::vector<Var>& v) {
        return ad::bce_with_logits(g, v[0], {1, 0, 0, 1, 1, 0});
      },
      {rt({2, 3}, 2.0)});
  run("dice_loss",
      [](Graph& g, const std::vector<Var>& v) { return ad::dice_loss(g, v[0], {1, 0, 0, 1, 1, 0}); },
      {rt({2, 3}, 2.0)});
  return out;
}

}  // namespace greskit
