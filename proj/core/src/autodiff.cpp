#include "greskit/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>

#include "greskit/error.hpp"
#include "greskit/losses.hpp"

namespace greskit::ad {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

ConstMatMap view(const Tensor& t) { return ConstMatMap(t.data(), t.rows(), t.cols()); }
MatMap view(Tensor& t) { return MatMap(t.data(), t.rows(), t.cols()); }
ConstMatMap view(const double* p, int r, int c) { return ConstMatMap(p, r, c); }
MatMap view(double* p, int r, int c) { return MatMap(p, r, c); }

std::size_t product(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw DimensionMismatch("negative tensor dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionMismatch(what);
}

void accumulate(Tensor& dst, const Tensor& src) {
  double* d = dst.data();
  const double* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

// ---- Tensor -------------------------------------------------------------

Tensor::Tensor(std::vector<int> shape, double fill_value)
    : shape_(std::move(shape)), data_(product(shape_), fill_value) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (product(shape_) != data_.size()) {
    throw DimensionMismatch("tensor data size does not match shape " + shape_string(shape_));
  }
}

int Tensor::cols() const noexcept {
  if (shape_.empty()) return 1;
  if (shape_[0] == 0) return 0;
  return static_cast<int>(data_.size() / static_cast<std::size_t>(shape_[0]));
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::reshape(std::vector<int> shape) {
  if (product(shape) != data_.size()) {
    throw DimensionMismatch("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  shape_ = std::move(shape);
}

std::string shape_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---- ParameterSet -------------------------------------------------------

int ParameterSet::add(std::string name, Tensor value) {
  if (std::find(names_.begin(), names_.end(), name) != names_.end()) {
    throw ValidationError("duplicate parameter name: " + name);
  }
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return static_cast<int>(values_.size()) - 1;
}

int ParameterSet::index(const std::string& name) const {
  const auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw ValidationError("unknown parameter: " + name);
  return static_cast<int>(it - names_.begin());
}

std::size_t ParameterSet::element_count() const noexcept {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

std::vector<Tensor> ParameterSet::zero_gradients() const {
  std::vector<Tensor> out;
  out.reserve(values_.size());
  for (const auto& v : values_) out.emplace_back(v.shape(), 0.0);
  return out;
}

// ---- Graph --------------------------------------------------------------

Var Graph::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Graph::parameter(const ParameterSet& params, int index) {
  if (index < 0 || index >= params.size()) throw ValidationError("parameter index out of range");
  if (param_leaf_.size() < static_cast<std::size_t>(params.size())) {
    param_leaf_.resize(static_cast<std::size_t>(params.size()), -1);
  }
  auto& slot = param_leaf_[static_cast<std::size_t>(index)];
  if (slot >= 0) return Var{slot};
  Node n;
  n.external = &params.value(index);
  n.param_index = index;
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  slot = static_cast<int>(nodes_.size()) - 1;
  return Var{slot};
}

const Tensor& Graph::value(Var v) const {
  const auto& n = nodes_.at(static_cast<std::size_t>(v.id));
  return n.external ? *n.external : n.value;
}

const Tensor& Graph::grad(Var v) const {
  const auto& n = nodes_.at(static_cast<std::size_t>(v.id));
  return n.grad.size() == 0 && value(v).size() != 0 ? empty_ : n.grad;
}

Var Graph::record(Tensor value, std::vector<Var> parents, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  if (grad_enabled_) {
    for (Var p : parents) n.requires_grad = n.requires_grad || nodes_[p.id].requires_grad;
    if (n.requires_grad) {
      n.parents = std::move(parents);
      n.backward = std::move(backward);
    }
  }
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Tensor& Graph::grad_buffer(Var v) {
  auto& n = nodes_[v.id];
  if (n.grad.size() == 0 && value(v).size() != 0) n.grad = Tensor(value(v).shape(), 0.0);
  return n.grad;
}

void Graph::backward(Var loss, std::vector<Tensor>* param_grads) {
  if (!grad_enabled_) throw ValidationError("backward() on a graph built without gradients");
  if (value(loss).size() != 1) throw DimensionMismatch("backward() needs a single-element loss");
  if (!nodes_[loss.id].requires_grad) return;
  grad_buffer(loss)[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backward) {
      // Callbacks only touch gradients of earlier nodes; nodes_ does not grow here.
      n.backward(*this, n.grad);
    } else if (n.param_index >= 0 && param_grads) {
      auto& dst = param_grads->at(static_cast<std::size_t>(n.param_index));
      require(dst.same_shape(n.grad), "parameter gradient buffer has the wrong shape");
      accumulate(dst, n.grad);
    }
  }
}

// ---- primitives ---------------------------------------------------------

Var matmul(Graph& g, Var a, Var b, bool trans_a, bool trans_b) {
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  const int ar = trans_a ? A.cols() : A.rows();
  const int ac = trans_a ? A.rows() : A.cols();
  const int br = trans_b ? B.cols() : B.rows();
  const int bc = trans_b ? B.rows() : B.cols();
  require(ac == br, "matmul: inner dimensions " + shape_string(A.shape()) + " x " +
                        shape_string(B.shape()));
  Tensor C({ar, bc}, 0.0);
  auto cm = view(C);
  if (!trans_a && !trans_b) cm.noalias() = view(A) * view(B);
  else if (trans_a && !trans_b) cm.noalias() = view(A).transpose() * view(B);
  else if (!trans_a && trans_b) cm.noalias() = view(A) * view(B).transpose();
  else cm.noalias() = view(A).transpose() * view(B).transpose();

  return g.record(std::move(C), {a, b}, [a, b, trans_a, trans_b](Graph& gr, const Tensor& dC) {
    const auto dc = view(dC);
    if (gr.needs_grad(a)) {
      const Tensor& Bv = gr.value(b);
      auto da = view(gr.grad_buffer(a));
      const auto bm = view(Bv);
      // dA(op) = dC * op(B)^T
      if (!trans_a) {
        if (!trans_b) da.noalias() += dc * bm.transpose();
        else da.noalias() += dc * bm;
      } else {
        if (!trans_b) da.noalias() += bm * dc.transpose();
        else da.noalias() += bm.transpose() * dc.transpose();
      }
    }
    if (gr.needs_grad(b)) {
      const Tensor& Av = gr.value(a);
      auto db = view(gr.grad_buffer(b));
      const auto am = view(Av);
      // dB(op) = op(A)^T * dC
      if (!trans_b) {
        if (!trans_a) db.noalias() += am.transpose() * dc;
        else db.noalias() += am * dc;
      } else {
        if (!trans_a) db.noalias() += dc.transpose() * am;
        else db.noalias() += dc.transpose() * am.transpose();
      }
    }
  });
}

Var add(Graph& g, Var a, Var b) {
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  require(A.same_shape(B), "add: " + shape_string(A.shape()) + " vs " + shape_string(B.shape()));
  Tensor C = A;
  accumulate(C, B);
  return g.record(std::move(C), {a, b}, [a, b](Graph& gr, const Tensor& d) {
    if (gr.needs_grad(a)) accumulate(gr.grad_buffer(a), d);
    if (gr.needs_grad(b)) accumulate(gr.grad_buffer(b), d);
  });
}

Var sub(Graph& g, Var a, Var b) {
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  require(A.same_shape(B), "sub: " + shape_string(A.shape()) + " vs " + shape_string(B.shape()));
  Tensor C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] -= B[i];
  return g.record(std::move(C), {a, b}, [a, b](Graph& gr, const Tensor& d) {
    if (gr.needs_grad(a)) accumulate(gr.grad_buffer(a), d);
    if (gr.needs_grad(b)) {
      auto& db = gr.grad_buffer(b);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] -= d[i];
    }
  });
}

Var mul(Graph& g, Var a, Var b) {
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  require(A.same_shape(B), "mul: " + shape_string(A.shape()) + " vs " + shape_string(B.shape()));
  Tensor C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] *= B[i];
  return g.record(std::move(C), {a, b}, [a, b](Graph& gr, const Tensor& d) {
    if (gr.needs_grad(a)) {
      auto& da = gr.grad_buffer(a);
      const auto& bv = gr.value(b);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += d[i] * bv[i];
    }
    if (gr.needs_grad(b)) {
      auto& db = gr.grad_buffer(b);
      const auto& av = gr.value(a);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += d[i] * av[i];
    }
  });
}

Var scale(Graph& g, Var a, double c) {
  Tensor C = g.value(a);
  for (auto& x : C.values()) x *= c;
  return g.record(std::move(C), {a}, [a, c](Graph& gr, const Tensor& d) {
    auto& da = gr.grad_buffer(a);
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += c * d[i];
  });
}

Var add_bias(Graph& g, Var a, Var bias) {
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(bias);
  const int n = A.cols();
  require(static_cast<int>(B.size()) == n,
          "add_bias: " + shape_string(A.shape()) + " + " + shape_string(B.shape()));
  Tensor C = A;
  view(C).rowwise() += view(B.data(), 1, n).row(0);
  return g.record(std::move(C), {a, bias}, [a, bias, n](Graph& gr, const Tensor& d) {
    if (gr.needs_grad(a)) accumulate(gr.grad_buffer(a), d);
    if (gr.needs_grad(bias)) {
      auto db = view(gr.grad_buffer(bias).data(), 1, n);
      db += view(d).colwise().sum();
    }
  });
}

Var mul_scalar(Graph& g, Var a, Var s) {
  const Tensor& S = g.value(s);
  require(S.size() == 1, "mul_scalar: scale must have one element");
  const double k = S[0];
  Tensor C = g.value(a);
  for (auto& x : C.values()) x *= k;
  return g.record(std::move(C), {a, s}, [a, s](Graph& gr, const Tensor& d) {
    const double kk = gr.value(s)[0];
    if (gr.needs_grad(a)) {
      auto& da = gr.grad_buffer(a);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += kk * d[i];
    }
    if (gr.needs_grad(s)) {
      const auto& av = gr.value(a);
      double acc = 0.0;
      for (std::size_t i = 0; i < av.size(); ++i) acc += av[i] * d[i];
      gr.grad_buffer(s)[0] += acc;
    }
  });
}

Var gelu(Graph& g, Var a) {
  Tensor C = g.value(a);
  for (auto& x : C.values()) {
    const double u = kGeluC * (x + kGeluA * x * x * x);
    x = 0.5 * x * (1.0 + std::tanh(u));
  }
  return g.record(std::move(C), {a}, [a](Graph& gr, const Tensor& d) {
    const auto& xv = gr.value(a);
    auto& da = gr.grad_buffer(a);
    for (std::size_t i = 0; i < da.size(); ++i) {
      const double x = xv[i];
      const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
      const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
      da[i] += d[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
    }
  });
}

Var tanh(Graph& g, Var a) {
  Tensor C = g.value(a);
  for (auto& x : C.values()) x = std::tanh(x);
  const Var out{static_cast<int>(g.node_count())};
  return g.record(std::move(C), {a}, [a, out](Graph& gr, const Tensor& d) {
    const auto& y = gr.value(out);
    auto& da = gr.grad_buffer(a);
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += d[i] * (1.0 - y[i] * y[i]);
  });
}

Var layer_norm(Graph& g, Var x, Var gamma, Var beta, double eps) {
  const Tensor& X = g.value(x);
  const int rows = X.rows();
  const int n = X.cols();
  require(static_cast<int>(g.value(gamma).size()) == n && static_cast<int>(g.value(beta).size()) == n,
          "layer_norm: gain/bias width");
  const double* gm = g.value(gamma).data();
  const double* bt = g.value(beta).data();
  Tensor Y(X.shape(), 0.0);
  auto xhat = std::make_shared<std::vector<double>>(X.size());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    const double* xr = X.data() + static_cast<std::size_t>(r) * n;
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += xr[j];
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= n;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(r)] = is;
    for (int j = 0; j < n; ++j) {
      const std::size_t k = static_cast<std::size_t>(r) * n + j;
      (*xhat)[k] = (xr[j] - mean) * is;
      Y[k] = gm[j] * (*xhat)[k] + bt[j];
    }
  }
  return g.record(std::move(Y), {x, gamma, beta},
                  [x, gamma, beta, rows, n, xhat, inv_std](Graph& gr, const Tensor& d) {
                    const double* gmv = gr.value(gamma).data();
                    if (gr.needs_grad(gamma)) {
                      auto& dg = gr.grad_buffer(gamma);
                      for (std::size_t k = 0; k < d.size(); ++k) dg[k % n] += d[k] * (*xhat)[k];
                    }
                    if (gr.needs_grad(beta)) {
                      auto& db = gr.grad_buffer(beta);
                      for (std::size_t k = 0; k < d.size(); ++k) db[k % n] += d[k];
                    }
                    if (!gr.needs_grad(x)) return;
                    auto& dx = gr.grad_buffer(x);
                    for (int r = 0; r < rows; ++r) {
                      const std::size_t off = static_cast<std::size_t>(r) * n;
                      double m1 = 0.0, m2 = 0.0;
                      for (int j = 0; j < n; ++j) {
                        const double dxh = d[off + j] * gmv[j];
                        m1 += dxh;
                        m2 += dxh * (*xhat)[off + j];
                      }
                      m1 /= n;
                      m2 /= n;
                      const double is = (*inv_std)[static_cast<std::size_t>(r)];
                      for (int j = 0; j < n; ++j) {
                        const double dxh = d[off + j] * gmv[j];
                        dx[off + j] += is * (dxh - m1 - (*xhat)[off + j] * m2);
                      }
                    }
                  });
}

Var causal_softmax(Graph& g, Var scores) {
  const Tensor& S = g.value(scores);
  const int n = S.rows();
  require(S.cols() == n, "causal_softmax: scores must be square");
  Tensor P(S.shape(), 0.0);
  for (int i = 0; i < n; ++i) {
    const double* s = S.data() + static_cast<std::size_t>(i) * n;
    double* p = P.data() + static_cast<std::size_t>(i) * n;
    double m = s[0];
    for (int j = 1; j <= i; ++j) m = std::max(m, s[j]);
    double z = 0.0;
    for (int j = 0; j <= i; ++j) {
      p[j] = std::exp(s[j] - m);
      z += p[j];
    }
    for (int j = 0; j <= i; ++j) p[j] /= z;
  }
  const Var out{static_cast<int>(g.node_count())};
  return g.record(std::move(P), {scores}, [scores, out, n](Graph& gr, const Tensor& d) {
    const auto& pv = gr.value(out);
    auto& ds = gr.grad_buffer(scores);
    for (int i = 0; i < n; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * n;
      double dot = 0.0;
      for (int j = 0; j <= i; ++j) dot += pv[off + j] * d[off + j];
      for (int j = 0; j <= i; ++j) ds[off + j] += pv[off + j] * (d[off + j] - dot);
    }
  });
}

Var slice_cols(Graph& g, Var a, int start, int count) {
  const Tensor& A = g.value(a);
  const int rows = A.rows();
  const int cols = A.cols();
  require(start >= 0 && count >= 0 && start + count <= cols, "slice_cols: range out of bounds");
  Tensor C({rows, count}, 0.0);
  view(C) = view(A).middleCols(start, count);
  return g.record(std::move(C), {a}, [a, start, count](Graph& gr, const Tensor& d) {
    view(gr.grad_buffer(a)).middleCols(start, count) += view(d);
  });
}

Var concat_cols(Graph& g, const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const int rows = g.value(parts[0]).rows();
  std::vector<int> widths;
  int total = 0;
  for (Var p : parts) {
    require(g.value(p).rows() == rows, "concat_cols: row count mismatch");
    widths.push_back(g.value(p).cols());
    total += widths.back();
  }
  Tensor C({rows, total}, 0.0);
  int at = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    view(C).middleCols(at, widths[i]) = view(g.value(parts[i]));
    at += widths[i];
  }
  return g.record(std::move(C), parts, [parts, widths](Graph& gr, const Tensor& d) {
    int off = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (gr.needs_grad(parts[i])) {
        view(gr.grad_buffer(parts[i])) += view(d).middleCols(off, widths[i]);
      }
      off += widths[i];
    }
  });
}

Var concat_rows(Graph& g, const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const int cols = g.value(parts[0]).cols();
  int total = 0;
  for (Var p : parts) {
    require(g.value(p).cols() == cols, "concat_rows: column count mismatch");
    total += g.value(p).rows();
  }
  Tensor C({total, cols}, 0.0);
  std::size_t at = 0;
  for (Var p : parts) {
    const auto& v = g.value(p);
    std::copy(v.data(), v.data() + v.size(), C.data() + at);
    at += v.size();
  }
  return g.record(std::move(C), parts, [parts](Graph& gr, const Tensor& d) {
    std::size_t off = 0;
    for (Var p : parts) {
      const std::size_t n = gr.value(p).size();
      if (gr.needs_grad(p)) {
        auto& dp = gr.grad_buffer(p);
        for (std::size_t i = 0; i < n; ++i) dp[i] += d[off + i];
      }
      off += n;
    }
  });
}

Var gather_rows(Graph& g, Var table, std::vector<int> indices) {
  const Tensor& T = g.value(table);
  const int rows = T.rows();
  const int cols = T.cols();
  Tensor C({static_cast<int>(indices.size()), cols}, 0.0);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int r = indices[i];
    require(r >= 0 && r < rows, "gather_rows: index " + std::to_string(r) + " out of range");
    std::copy_n(T.data() + static_cast<std::size_t>(r) * cols, cols,
                C.data() + i * static_cast<std::size_t>(cols));
  }
  return g.record(std::move(C), {table},
                  [table, idx = std::move(indices), cols](Graph& gr, const Tensor& d) {
                    auto& dt = gr.grad_buffer(table);
                    for (std::size_t i = 0; i < idx.size(); ++i) {
                      double* dst = dt.data() + static_cast<std::size_t>(idx[i]) * cols;
                      const double* src = d.data() + i * static_cast<std::size_t>(cols);
                      for (int j = 0; j < cols; ++j) dst[j] += src[j];
                    }
                  });
}

Var reshape(Graph& g, Var a, std::vector<int> shape) {
  Tensor C = g.value(a);
  C.reshape(std::move(shape));
  return g.record(std::move(C), {a},
                  [a](Graph& gr, const Tensor& d) { accumulate(gr.grad_buffer(a), d); });
}

Var sum(Graph& g, Var a) {
  const auto& A = g.value(a);
  Tensor C({1}, pairwise_sum(A.values()));
  return g.record(std::move(C), {a}, [a](Graph& gr, const Tensor& d) {
    auto& da = gr.grad_buffer(a);
    for (auto& x : da.values()) x += d[0];
  });
}

Var conv2d(Graph& g, Var input, Var weight, Var bias, int kernel, int stride, int pad) {
  const Tensor& X = g.value(input);
  const Tensor& W = g.value(weight);
  require(X.rank() == 3, "conv2d: input must be [H, W, C]");
  const int h = X.dim(0), w = X.dim(1), cin = X.dim(2);
  const int patch = kernel * kernel * cin;
  require(W.rows() == patch, "conv2d: weight rows must be kernel*kernel*cin");
  const int cout = W.cols();
  require(static_cast<int>(g.value(bias).size()) == cout, "conv2d: bias width");
  require(stride >= 1 && kernel >= 1 && pad >= 0, "conv2d: bad geometry");
  const int oh = (h + 2 * pad - kernel) / stride + 1;
  const int ow = (w + 2 * pad - kernel) / stride + 1;
  require(oh > 0 && ow > 0, "conv2d: output would be empty");

  // im2col: one row per output pixel.
  auto col = std::make_shared<std::vector<double>>(static_cast<std::size_t>(oh) * ow * patch, 0.0);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      double* row = col->data() + (static_cast<std::size_t>(oy) * ow + ox) * patch;
      for (int ky = 0; ky < kernel; ++ky) {
        const int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < kernel; ++kx) {
          const int ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= w) continue;
          std::copy_n(X.data() + (static_cast<std::size_t>(iy) * w + ix) * cin, cin,
                      row + (ky * kernel + kx) * cin);
        }
      }
    }
  }
  Tensor Y({oh, ow, cout}, 0.0);
  auto ym = view(Y.data(), oh * ow, cout);
  ym.noalias() = view(col->data(), oh * ow, patch) * view(W);
  ym.rowwise() += view(g.value(bias).data(), 1, cout).row(0);

  return g.record(
      std::move(Y), {input, weight, bias},
      [=](Graph& gr, const Tensor& d) {
        const auto dm = view(d.data(), oh * ow, cout);
        const auto cm = view(col->data(), oh * ow, patch);
        if (gr.needs_grad(weight)) view(gr.grad_buffer(weight)).noalias() += cm.transpose() * dm;
        if (gr.needs_grad(bias)) {
          view(gr.grad_buffer(bias).data(), 1, cout) += dm.colwise().sum();
        }
        if (!gr.needs_grad(input)) return;
        RowMat dcol = dm * view(gr.value(weight)).transpose();
        auto& dx = gr.grad_buffer(input);
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox) {
            const double* row = dcol.data() + (static_cast<std::size_t>(oy) * ow + ox) * patch;
            for (int ky = 0; ky < kernel; ++ky) {
              const int iy = oy * stride + ky - pad;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < kernel; ++kx) {
                const int ix = ox * stride + kx - pad;
                if (ix < 0 || ix >= w) continue;
                double* dst = dx.data() + (static_cast<std::size_t>(iy) * w + ix) * cin;
                const double* src = row + (ky * kernel + kx) * cin;
                for (int c = 0; c < cin; ++c) dst[c] += src[c];
              }
            }
          }
        }
      });
}

std::vector<double> bilinear_weights(int in, int out) {
  if (in <= 0 || out <= 0) throw DimensionMismatch("bilinear_weights: sizes must be positive");
  std::vector<double> m(static_cast<std::size_t>(out) * in, 0.0);
  const double ratio = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const int i0 = static_cast<int>(std::floor(src));
    const int i1 = std::min(i0 + 1, in - 1);
    const double f = src - i0;
    m[static_cast<std::size_t>(o) * in + i0] += 1.0 - f;
    m[static_cast<std::size_t>(o) * in + i1] += f;
  }
  return m;
}

Var upsample_bilinear(Graph& g, Var maps, int out_h, int out_w) {
  const Tensor& M = g.value(maps);
  require(M.rank() == 3, "upsample_bilinear: maps must be [N, h, w]");
  const int n = M.dim(0), h = M.dim(1), w = M.dim(2);
  auto uh = std::make_shared<RowMat>(view(bilinear_weights(h, out_h).data(), out_h, h));
  auto uw = std::make_shared<RowMat>(view(bilinear_weights(w, out_w).data(), out_w, w));
  Tensor Y({n, out_h, out_w}, 0.0);
  const std::size_t in_plane = static_cast<std::size_t>(h) * w;
  const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
  for (int k = 0; k < n; ++k) {
    view(Y.data() + k * out_plane, out_h, out_w).noalias() =
        (*uh) * view(M.data() + k * in_plane, h, w) * uw->transpose();
  }
  return g.record(std::move(Y), {maps}, [=](Graph& gr, const Tensor& d) {
    auto& dm = gr.grad_buffer(maps);
    for (int k = 0; k < n; ++k) {
      view(dm.data() + k * in_plane, h, w).noalias() +=
          uh->transpose() * view(d.data() + k * out_plane, out_h, out_w) * (*uw);
    }
  });
}

Var cross_entropy(Graph& g, Var logits, std::vector<std::int32_t> targets) {
  const Tensor& L = g.value(logits);
  const auto vocab = static_cast<std::size_t>(L.cols());
  require(static_cast<std::size_t>(L.rows()) == targets.size(), "cross_entropy: one target per row");
  auto grad = std::make_shared<std::vector<double>>(g.needs_grad(logits) ? L.size() : 0);
  const double v = lm_cross_entropy(L.values(), vocab, targets, {}, *grad);
  return g.record(Tensor({1}, v), {logits}, [logits, grad](Graph& gr, const Tensor& d) {
    auto& dl = gr.grad_buffer(logits);
    for (std::size_t i = 0; i < dl.size(); ++i) dl[i] += d[0] * (*grad)[i];
  });
}

Var bce_with_logits(Graph& g, Var logits, std::vector<double> targets) {
  const Tensor& L = g.value(logits);
  auto grad = std::make_shared<std::vector<double>>(g.needs_grad(logits) ? L.size() : 0);
  const double v = greskit::bce_with_logits(L.values(), targets, *grad);
  return g.record(Tensor({1}, v), {logits}, [logits, grad](Graph& gr, const Tensor& d) {
    auto& dl = gr.grad_buffer(logits);
    for (std::size_t i = 0; i < dl.size(); ++i) dl[i] += d[0] * (*grad)[i];
  });
}

Var dice_loss(Graph& g, Var logits, std::vector<double> targets) {
  const Tensor& L = g.value(logits);
  auto grad = std::make_shared<std::vector<double>>(g.needs_grad(logits) ? L.size() : 0);
  const double v = greskit::dice_loss(L.values(), targets, *grad);
  return g.record(Tensor({1}, v), {logits}, [logits, grad](Graph& gr, const Tensor& d) {
    auto& dl = gr.grad_buffer(logits);
    for (std::size_t i = 0; i < dl.size(); ++i) dl[i] += d[0] * (*grad)[i];
  });
}

}  // namespace greskit::ad
