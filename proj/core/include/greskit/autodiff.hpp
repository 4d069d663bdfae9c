#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace greskit::ad {

// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, double fill = 0.0);
  Tensor(std::vector<int> shape, std::vector<double> data);

  const std::vector<int>& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const noexcept { return data_.size(); }
  // Leading dimension and the product of the rest: the 2-D view used by matmul.
  int rows() const noexcept { return shape_.empty() ? 1 : shape_[0]; }
  int cols() const noexcept;

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  bool same_shape(const Tensor& o) const noexcept { return shape_ == o.shape_; }
  void fill(double v);
  void reshape(std::vector<int> shape);

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

std::string shape_string(const std::vector<int>& shape);

// Named trainable arrays plus a gradient buffer per array.
class ParameterSet {
 public:
  int add(std::string name, Tensor value);
  int size() const noexcept { return static_cast<int>(values_.size()); }
  int index(const std::string& name) const;  // throws if absent

  const std::string& name(int i) const { return names_.at(static_cast<std::size_t>(i)); }
  Tensor& value(int i) { return values_.at(static_cast<std::size_t>(i)); }
  const Tensor& value(int i) const { return values_.at(static_cast<std::size_t>(i)); }
  std::vector<Tensor>& values() noexcept { return values_; }
  const std::vector<Tensor>& values() const noexcept { return values_; }

  std::size_t element_count() const noexcept;
  // Zero-filled arrays shaped like the parameters.
  std::vector<Tensor> zero_gradients() const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
};

struct Var {
  int id = -1;
  bool valid() const noexcept { return id >= 0; }
};

// Tape of nodes in creation order, which is a topological order: a node
// only ever refers to earlier nodes. backward() walks it once in reverse.
class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  // Leaf bound to parameter `index`; the same leaf is returned on repeat calls.
  Var parameter(const ParameterSet& params, int index);

  const Tensor& value(Var v) const;
  const Tensor& grad(Var v) const;  // zero-shaped if no gradient reached v
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  bool grad_enabled() const noexcept { return grad_enabled_; }
  std::size_t node_count() const noexcept { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 for a single-element `loss` and accumulates
  // parameter gradients into `param_grads` (indexed like the ParameterSet).
  void backward(Var loss, std::vector<Tensor>* param_grads = nullptr);

  // Used by op implementations.
  using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;
  Var record(Tensor value, std::vector<Var> parents, BackwardFn backward);
  Tensor& grad_buffer(Var v);  // allocates zeros on first use
  bool needs_grad(Var v) const { return grad_enabled_ && nodes_[v.id].requires_grad; }

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;  // parameter leaves alias the ParameterSet
    Tensor grad;
    std::vector<Var> parents;
    BackwardFn backward;
    int param_index = -1;
    bool requires_grad = false;
  };

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::vector<int> param_leaf_;  // parameter index -> node id
  Tensor empty_;
};

// ---- primitives ---------------------------------------------------------

// op(a) * op(b) on the 2-D views of a and b.
Var matmul(Graph& g, Var a, Var b, bool trans_a = false, bool trans_b = false);
Var add(Graph& g, Var a, Var b);
Var sub(Graph& g, Var a, Var b);
Var mul(Graph& g, Var a, Var b);
Var scale(Graph& g, Var a, double c);
// a[m,n] + bias[n] broadcast over rows.
Var add_bias(Graph& g, Var a, Var bias);
// a * s for a single-element s.
Var mul_scalar(Graph& g, Var a, Var s);
Var gelu(Graph& g, Var a);
Var tanh(Graph& g, Var a);
Var layer_norm(Graph& g, Var x, Var gamma, Var beta, double eps = 1e-5);
// Row-wise softmax of a square score matrix restricted to columns <= row.
Var causal_softmax(Graph& g, Var scores);
Var slice_cols(Graph& g, Var a, int start, int count);
Var concat_cols(Graph& g, const std::vector<Var>& parts);
Var concat_rows(Graph& g, const std::vector<Var>& parts);
// rows of `table` picked by `indices` (embedding lookup / row selection).
Var gather_rows(Graph& g, Var table, std::vector<int> indices);
Var reshape(Graph& g, Var a, std::vector<int> shape);
Var sum(Graph& g, Var a);
// 2-D convolution on an [H, W, Cin] input with weight [k*k*Cin, Cout]
// laid out (ky, kx, cin) and bias [Cout]; zero padding.
Var conv2d(Graph& g, Var input, Var weight, Var bias, int kernel, int stride, int pad);
// [N, h, w] -> [N, out_h, out_w], half-pixel centers, edge clamped.
Var upsample_bilinear(Graph& g, Var maps, int out_h, int out_w);

// Scalar losses backed by greskit/losses.hpp.
Var cross_entropy(Graph& g, Var logits, std::vector<std::int32_t> targets);
Var bce_with_logits(Graph& g, Var logits, std::vector<double> targets);
Var dice_loss(Graph& g, Var logits, std::vector<double> targets);

// Interpolation matrix [out, in] used by upsample_bilinear.
std::vector<double> bilinear_weights(int in, int out);

}  // namespace greskit::ad
