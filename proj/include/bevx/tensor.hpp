#pragma once
// Dense float64 tensor with a reverse-mode tape and a multiply-accumulate
// counter. Row-major storage; every op validates shapes and rejects
// non-finite results.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

namespace bevx {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline Shape row_major_strides(const Shape& s) {
  Shape st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

/// Counts scalar multiply-accumulates executed by contraction ops
/// (matmul, linear, conv2d) in the forward direction. Padded conv taps
/// count as executed, so a convolution always costs N*O*Ho*Wo*C*k*k.
class MacCounter {
 public:
  void add(std::uint64_t n) { count_ += n; }
  std::uint64_t count() const { return count_; }
  void reset() { count_ = 0; }

 private:
  std::uint64_t count_ = 0;
};

inline MacCounter& mac_counter() {
  thread_local MacCounter counter;
  return counter;
}

namespace detail {

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Disables tape recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Tensor {
 public:
  Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (numel(shape) != data.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " holds " +
                       std::to_string(numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    }
    for (double v : data) {
      if (!std::isfinite(v)) throw NumericError("tensor: non-finite value in constructor");
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return Tensor(shape, std::vector<double>(numel(shape), 0.0), requires_grad);
  }
  static Tensor full(const Shape& shape, double v, bool requires_grad = false) {
    return Tensor(shape, std::vector<double>(numel(shape), v), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{}, {v}, requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  /// Mutable access for leaves (parameters, inputs). Editing a tensor that
  /// is already part of a recorded graph invalidates that graph.
  std::span<double> mutable_data() { return node_->data; }

  double item() const {
    if (size() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
    return node_->data[0];
  }
  double at(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) throw ShapeError("at: index rank mismatch for " + shape_str(shape()));
    std::size_t flat = 0;
    std::size_t i = 0;
    for (std::size_t v : idx) {
      if (v >= node_->shape[i]) throw ShapeError("at: index out of range for " + shape_str(shape()));
      flat = flat * node_->shape[i] + v;
      ++i;
    }
    return node_->data[flat];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Same storage values, no tape history.
  Tensor detach() const { return Tensor(shape(), node_->data); }

  const char* op_name() const { return node_->op; }

  /// Runs reverse-mode differentiation from this scalar.
  void backward() const;

  // Internal: used by op implementations.
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline void check_finite(const Node& n, const char* op) {
  for (double v : n.data) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite output");
  }
}

/// Creates the output node; wires tape state when any input records.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                          std::initializer_list<const Tensor*> inputs,
                          std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  check_finite(*n, op);
  bool record = false;
  if (grad_mode()) {
    for (const Tensor* t : inputs) record = record || t->requires_grad();
  }
  if (record) {
    n->requires_grad = true;
    for (const Tensor* t : inputs) n->parents.push_back(t->node());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

inline Tensor make_result_vec(const char* op, Shape shape, std::vector<double> data,
                              const std::vector<Tensor>& inputs,
                              std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  check_finite(*n, op);
  bool record = false;
  if (grad_mode()) {
    for (const Tensor& t : inputs) record = record || t.requires_grad();
  }
  if (record) {
    n->requires_grad = true;
    for (const Tensor& t : inputs) n->parents.push_back(t.node());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

inline Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

}  // namespace detail

inline void Tensor::backward() const {
  if (!node_->requires_grad) {
    throw UsageError("backward: tensor is not on the tape (no input requires grad)");
  }
  if (node_->data.size() != 1) {
    throw UsageError("backward: loss must be a scalar, got " + shape_str(node_->shape));
  }
  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  // Interior grads are transient; only leaves keep theirs.
  for (detail::Node* n : order) {
    if (n->backward) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise with broadcasting. Shapes are right-aligned; an axis of length
// 1 (or a missing leading axis) stretches to the other operand's length.

namespace detail {

inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                       shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

/// For each output flat index, the flat index into an operand of shape `in`.
inline std::vector<std::size_t> broadcast_index(const Shape& out, const Shape& in) {
  const std::size_t total = numel(out);
  std::vector<std::size_t> idx(total);
  if (in == out) {
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
  }
  const std::size_t r = out.size();
  const Shape in_st = row_major_strides(in);
  Shape eff(r, 0);
  for (std::size_t i = 0; i < in.size(); ++i) {
    const std::size_t ax = i + (r - in.size());
    eff[ax] = in[i] == 1 ? 0 : in_st[i];
  }
  Shape counter(r, 0);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < total; ++f) {
    idx[f] = pos;
    for (std::size_t ax = r; ax-- > 0;) {
      if (++counter[ax] < out[ax]) {
        pos += eff[ax];
        break;
      }
      pos -= eff[ax] * (out[ax] - 1);
      counter[ax] = 0;
    }
  }
  return idx;
}

enum class BinOp { Add, Sub, Mul };

inline Tensor binary(const char* op, BinOp kind, const Tensor& a, const Tensor& b) {
  Shape out = broadcast_shape(op, a.shape(), b.shape());
  const std::size_t n = numel(out);
  auto ia = std::make_shared<std::vector<std::size_t>>(broadcast_index(out, a.shape()));
  auto ib = std::make_shared<std::vector<std::size_t>>(broadcast_index(out, b.shape()));
  const auto da = a.data();
  const auto db = b.data();
  std::vector<double> r(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = da[(*ia)[i]];
    const double y = db[(*ib)[i]];
    r[i] = kind == BinOp::Add ? x + y : kind == BinOp::Sub ? x - y : x * y;
  }
  return make_result(op, out, std::move(r), {&a, &b}, [kind, ia, ib](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    const std::size_t m = self.grad.size();
    if (pa.requires_grad) {
      auto& ga = pa.ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        const double g = self.grad[i];
        ga[(*ia)[i]] += kind == BinOp::Mul ? g * pb.data[(*ib)[i]] : g;
      }
    }
    if (pb.requires_grad) {
      auto& gb = pb.ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        const double g = self.grad[i];
        gb[(*ib)[i]] += kind == BinOp::Add   ? g
                        : kind == BinOp::Sub ? -g
                                             : g * pa.data[(*ia)[i]];
      }
    }
  });
}

template <class F, class DF>
Tensor unary(const char* op, const Tensor& x, F f, DF df) {
  const auto d = x.data();
  std::vector<double> r(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) r[i] = f(d[i]);
  return make_result(op, x.shape(), std::move(r), {&x}, [df](Node& self) {
    Node& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(p.data[i], self.data[i]);
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary("add", detail::BinOp::Add, a, b);
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary("sub", detail::BinOp::Sub, a, b);
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary("mul", detail::BinOp::Mul, a, b);
}
inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

inline Tensor scale(const Tensor& x, double s) {
  return detail::unary(
      "scale", x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Tensor gelu(const Tensor& x) {
  // tanh approximation
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return detail::unary(
      "gelu", x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(k * (v + 0.044715 * v * v * v))); },
      [](double v, double) {
        const double u = k * (v + 0.044715 * v * v * v);
        const double t = std::tanh(u);
        const double du = k * (1.0 + 3.0 * 0.044715 * v * v);
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
      });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      "sigmoid", x,
      [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double y) { return y * (1.0 - y); });
}

// ---------------------------------------------------------------------------
// Shape manipulation.

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> d(x.data().begin(), x.data().end());
  return detail::make_result("reshape", std::move(shape), std::move(d), {&x}, [](detail::Node& self) {
    detail::Node& p = detail::parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// out.shape[i] = x.shape[perm[i]].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const Shape& in = x.shape();
  if (perm.size() != in.size()) {
    throw ShapeError("permute: permutation of length " + std::to_string(perm.size()) +
                     " for tensor " + shape_str(in));
  }
  std::vector<bool> used(in.size(), false);
  Shape out(in.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= in.size() || used[perm[i]]) throw ShapeError("permute: invalid permutation");
    used[perm[i]] = true;
    out[i] = in[perm[i]];
  }
  const Shape in_st = row_major_strides(in);
  Shape src_st(in.size());
  for (std::size_t i = 0; i < perm.size(); ++i) src_st[i] = in_st[perm[i]];
  const std::size_t n = x.size();
  auto map = std::make_shared<std::vector<std::size_t>>(n);
  Shape counter(out.size(), 0);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < n; ++f) {
    (*map)[f] = pos;
    for (std::size_t ax = out.size(); ax-- > 0;) {
      if (++counter[ax] < out[ax]) {
        pos += src_st[ax];
        break;
      }
      pos -= src_st[ax] * (out[ax] - 1);
      counter[ax] = 0;
    }
  }
  const auto d = x.data();
  std::vector<double> r(n);
  for (std::size_t f = 0; f < n; ++f) r[f] = d[(*map)[f]];
  return detail::make_result("permute", out, std::move(r), {&x}, [map](detail::Node& self) {
    detail::Node& p = detail::parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (std::size_t f = 0; f < self.grad.size(); ++f) g[(*map)[f]] += self.grad[f];
  });
}

inline Tensor concat(const std::vector<Tensor>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = xs[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range for " + shape_str(s0));
  Shape out = s0;
  out[axis] = 0;
  for (const Tensor& t : xs) {
    const Shape& s = t.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == s0[i];
    if (!ok) throw ShapeError("concat: " + shape_str(s0) + " vs " + shape_str(s));
    out[axis] += s[axis];
  }
  const std::size_t outer = numel(Shape(s0.begin(), s0.begin() + axis));
  const std::size_t inner = numel(Shape(s0.begin() + axis + 1, s0.end()));
  auto widths = std::make_shared<std::vector<std::size_t>>();
  for (const Tensor& t : xs) widths->push_back(t.shape()[axis] * inner);
  const std::size_t row = out[axis] * inner;
  std::vector<double> r(numel(out));
  std::size_t off = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const auto d = xs[k].data();
    const std::size_t w = (*widths)[k];
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(d.begin() + o * w, w, r.begin() + o * row + off);
    off += w;
  }
  return detail::make_result_vec("concat", out, std::move(r), xs, [widths, outer, row](detail::Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      detail::Node& p = *self.parents[k];
      const std::size_t w = (*widths)[k];
      if (p.requires_grad) {
        auto& g = p.ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < w; ++j) g[o * w + j] += self.grad[o * row + off + j];
      }
      off += w;
    }
  });
}

/// Contiguous range [begin, begin+count) along `axis`.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t count) {
  const Shape& s = x.shape();
  if (axis >= s.size() || begin + count > s[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                     ") on axis " + std::to_string(axis) + " of " + shape_str(s));
  }
  Shape out = s;
  out[axis] = count;
  const std::size_t outer = numel(Shape(s.begin(), s.begin() + axis));
  const std::size_t inner = numel(Shape(s.begin() + axis + 1, s.end()));
  const std::size_t src_row = s[axis] * inner;
  const std::size_t w = count * inner;
  const std::size_t off = begin * inner;
  const auto d = x.data();
  std::vector<double> r(numel(out));
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(d.begin() + o * src_row + off, w, r.begin() + o * w);
  return detail::make_result("slice", out, std::move(r), {&x}, [=](detail::Node& self) {
    detail::Node& p = detail::parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < w; ++j) g[o * src_row + off + j] += self.grad[o * w + j];
  });
}

// ---------------------------------------------------------------------------
// Contractions.

namespace detail {

// c[m,n] += a[m,k] * b[k,n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m,k] += g[m,n] * b[k,n]^T, via a transposed copy of b so the inner loop
// is a contiguous axpy.
inline void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t n,
                    std::size_t k) {
  std::vector<double> bt(n * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  gemm_nn(g, bt.data(), c, m, n, k);
}

// c[k,n] += a[m,k]^T * g[m,n]
inline void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * gi[j];
    }
  }
}

}  // namespace detail

/// Supported forms: [m,k]x[k,n]; [b,m,k]x[b,k,n]; [...,m,k]x[k,n] (leading
/// axes of the left operand flattened into rows).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto fail = [&] {
    throw ShapeError("matmul: incompatible shapes " + shape_str(sa) + " x " + shape_str(sb));
  };
  if (sa.size() < 2 || sb.size() < 2) fail();
  std::size_t batch = 1, m = 0, k = 0, n = 0;
  bool shared_rhs = false;
  Shape out;
  if (sb.size() == 2) {
    k = sa.back();
    if (sb[0] != k) fail();
    n = sb[1];
    m = a.size() / k;
    out = sa;
    out.back() = n;
    shared_rhs = true;
  } else if (sa.size() == 3 && sb.size() == 3) {
    if (sa[0] != sb[0] || sa[2] != sb[1]) fail();
    batch = sa[0];
    m = sa[1];
    k = sa[2];
    n = sb[2];
    out = {batch, m, n};
  } else {
    fail();
  }
  mac_counter().add(static_cast<std::uint64_t>(batch) * m * k * n);
  std::vector<double> r(batch * m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t t = 0; t < batch; ++t) {
    detail::gemm_nn(pa + t * m * k, pb + (shared_rhs ? 0 : t * k * n), r.data() + t * m * n, m, k, n);
  }
  return detail::make_result("matmul", out, std::move(r), {&a, &b},
                             [batch, m, k, n, shared_rhs](detail::Node& self) {
                               detail::Node& na = detail::parent(self, 0);
                               detail::Node& nb = detail::parent(self, 1);
                               for (std::size_t t = 0; t < batch; ++t) {
                                 const double* g = self.grad.data() + t * m * n;
                                 const std::size_t boff = shared_rhs ? 0 : t * k * n;
                                 if (na.requires_grad) {
                                   detail::gemm_nt(g, nb.data.data() + boff,
                                                   na.ensure_grad().data() + t * m * k, m, n, k);
                                 }
                                 if (nb.requires_grad) {
                                   detail::gemm_tn(na.data.data() + t * m * k, g,
                                                   nb.ensure_grad().data() + boff, m, k, n);
                                 }
                               }
                             });
}

/// x[N,C,H,W] (*) w[O,C,k,k] + bias[O]; zero padding.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
                     std::size_t pad) {
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sx.size() != 4 || sw.size() != 4 || sw[1] != sx[1] || sw[2] != sw[3] ||
      bias.shape() != Shape{sw[0]} || stride == 0) {
    throw ShapeError("conv2d: input " + shape_str(sx) + " weight " + shape_str(sw) + " bias " +
                     shape_str(bias.shape()));
  }
  const std::size_t N = sx[0], C = sx[1], H = sx[2], W = sx[3];
  const std::size_t O = sw[0], K = sw[2];
  if (H + 2 * pad < K || W + 2 * pad < K) {
    throw ShapeError("conv2d: kernel larger than padded input " + shape_str(sx));
  }
  const std::size_t Ho = (H + 2 * pad - K) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - K) / stride + 1;
  mac_counter().add(static_cast<std::uint64_t>(N) * O * Ho * Wo * C * K * K);
  const std::size_t rows = C * K * K, cols = Ho * Wo;
  // Column matrix [C*K*K, Ho*Wo] per image; `src` holds the input offset of
  // each entry or -1 where the tap falls in the zero padding.
  std::vector<std::ptrdiff_t> src(rows * cols);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < K; ++ky)
      for (std::size_t kx = 0; kx < K; ++kx) {
        std::ptrdiff_t* row = src.data() + ((c * K + ky) * K + kx) * cols;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            const bool inside = iy >= 0 && iy < static_cast<std::ptrdiff_t>(H) && ix >= 0 &&
                                ix < static_cast<std::ptrdiff_t>(W);
            row[oy * Wo + ox] =
                inside ? static_cast<std::ptrdiff_t>((c * H + static_cast<std::size_t>(iy)) * W +
                                                     static_cast<std::size_t>(ix))
                       : -1;
          }
        }
      }
  auto gather = [src, rows, cols, C, H, W](const double* x, std::size_t b, std::vector<double>& col) {
    col.resize(rows * cols);
    const double* xb = x + b * C * H * W;
    for (std::size_t i = 0; i < rows * cols; ++i) col[i] = src[i] < 0 ? 0.0 : xb[src[i]];
  };
  std::vector<double> r(N * O * cols);
  const auto dx = x.data();
  const auto dw = w.data();
  const auto db = bias.data();
  std::vector<double> col;
  for (std::size_t b = 0; b < N; ++b) {
    double* rb = r.data() + b * O * cols;
    for (std::size_t o = 0; o < O; ++o) std::fill_n(rb + o * cols, cols, db[o]);
    gather(dx.data(), b, col);
    detail::gemm_nn(dw.data(), col.data(), rb, O, rows, cols);
  }
  return detail::make_result("conv2d", {N, O, Ho, Wo}, std::move(r), {&x, &w, &bias},
                             [gather, src, N, O, rows, cols, C, H, W](detail::Node& self) {
                               detail::Node& nx = detail::parent(self, 0);
                               detail::Node& nw = detail::parent(self, 1);
                               detail::Node& nb = detail::parent(self, 2);
                               const auto& g = self.grad;
                               std::vector<double> col, gcol;
                               for (std::size_t b = 0; b < N; ++b) {
                                 const double* gb = g.data() + b * O * cols;
                                 if (nw.requires_grad) {
                                   gather(nx.data.data(), b, col);
                                   detail::gemm_nt(gb, col.data(), nw.ensure_grad().data(), O, cols, rows);
                                 }
                                 if (nx.requires_grad) {
                                   gcol.assign(rows * cols, 0.0);
                                   detail::gemm_tn(nw.data.data(), gb, gcol.data(), O, rows, cols);
                                   double* gx = nx.ensure_grad().data() + b * C * H * W;
                                   for (std::size_t i = 0; i < rows * cols; ++i)
                                     if (src[i] >= 0) gx[src[i]] += gcol[i];
                                 }
                               }
                               if (nb.requires_grad) {
                                 auto& gbias = nb.ensure_grad();
                                 for (std::size_t b = 0; b < N; ++b)
                                   for (std::size_t o = 0; o < O; ++o)
                                     for (std::size_t i = 0; i < cols; ++i) gbias[o] += g[(b * O + o) * cols + i];
                               }
                             });
}

/// Bilinear resize of x[N,C,H,W] to [N,C,oh,ow] with half-pixel sample
/// centers (align_corners = false) and edge clamping.
inline Tensor resize_bilinear(const Tensor& x, std::size_t oh, std::size_t ow) {
  const Shape& s = x.shape();
  if (s.size() != 4 || oh == 0 || ow == 0) {
    throw ShapeError("resize_bilinear: input " + shape_str(s) + " to " + std::to_string(oh) + "x" +
                     std::to_string(ow));
  }
  const std::size_t N = s[0], C = s[1], H = s[2], W = s[3];
  struct Tap {
    std::size_t i0, i1;
    double w0, w1;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double sc = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      double src = (static_cast<double>(o) + 0.5) * sc - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(src));
      const std::size_t i1 = std::min(i0 + 1, in - 1);
      const double f = src - static_cast<double>(i0);
      t[o] = {i0, i1, 1.0 - f, f};
    }
    return t;
  };
  auto ty = std::make_shared<std::vector<Tap>>(taps(H, oh));
  auto tx = std::make_shared<std::vector<Tap>>(taps(W, ow));
  const auto d = x.data();
  std::vector<double> r(N * C * oh * ow);
  for (std::size_t p = 0; p < N * C; ++p) {
    const double* src = d.data() + p * H * W;
    double* dst = r.data() + p * oh * ow;
    for (std::size_t y = 0; y < oh; ++y) {
      const Tap& a = (*ty)[y];
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const Tap& b = (*tx)[xx];
        dst[y * ow + xx] = a.w0 * (b.w0 * src[a.i0 * W + b.i0] + b.w1 * src[a.i0 * W + b.i1]) +
                           a.w1 * (b.w0 * src[a.i1 * W + b.i0] + b.w1 * src[a.i1 * W + b.i1]);
      }
    }
  }
  return detail::make_result("resize_bilinear", {N, C, oh, ow}, std::move(r), {&x},
                             [=](detail::Node& self) {
                               detail::Node& p = detail::parent(self, 0);
                               if (!p.requires_grad) return;
                               auto& g = p.ensure_grad();
                               for (std::size_t q = 0; q < N * C; ++q) {
                                 double* gs = g.data() + q * H * W;
                                 const double* go = self.grad.data() + q * oh * ow;
                                 for (std::size_t y = 0; y < oh; ++y) {
                                   const Tap& a = (*ty)[y];
                                   for (std::size_t xx = 0; xx < ow; ++xx) {
                                     const Tap& b = (*tx)[xx];
                                     const double v = go[y * ow + xx];
                                     gs[a.i0 * W + b.i0] += v * a.w0 * b.w0;
                                     gs[a.i0 * W + b.i1] += v * a.w0 * b.w1;
                                     gs[a.i1 * W + b.i0] += v * a.w1 * b.w0;
                                     gs[a.i1 * W + b.i1] += v * a.w1 * b.w1;
                                   }
                                 }
                               }
                             });
}

// ---------------------------------------------------------------------------
// Reductions.

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return detail::make_result("sum", {}, {s}, {&x}, [](detail::Node& self) {
    detail::Node& p = detail::parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (double& v : g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

namespace detail {

/// Splits a tensor into (outer, reduced, inner) index groups for a set of
/// axes. Reduced axes keep length 1 in `kept`.
struct Reduction {
  Shape kept;
  std::size_t extent = 1;
  std::vector<std::size_t> out_of;  // input flat index -> output flat index
};

inline Reduction plan_reduction(const char* op, const Shape& s, std::vector<std::size_t> axes) {
  if (axes.empty()) throw ShapeError(std::string(op) + ": empty axis set");
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  Reduction r;
  r.kept = s;
  for (std::size_t a : axes) {
    if (a >= s.size()) throw ShapeError(std::string(op) + ": axis out of range for " + shape_str(s));
    r.extent *= s[a];
    r.kept[a] = 1;
  }
  if (r.extent == 0) throw ShapeError(std::string(op) + ": empty reduction extent");
  const std::size_t n = numel(s);
  r.out_of.resize(n);
  const Shape kst = row_major_strides(r.kept);
  Shape counter(s.size(), 0);
  for (std::size_t f = 0; f < n; ++f) {
    std::size_t o = 0;
    for (std::size_t ax = 0; ax < s.size(); ++ax) o += (r.kept[ax] == 1 ? 0 : counter[ax]) * kst[ax];
    r.out_of[f] = o;
    for (std::size_t ax = s.size(); ax-- > 0;) {
      if (++counter[ax] < s[ax]) break;
      counter[ax] = 0;
    }
  }
  return r;
}

}  // namespace detail

/// Sum over `axes`, keeping them as length-1 axes.
inline Tensor sum_over(const Tensor& x, const std::vector<std::size_t>& axes) {
  auto plan = std::make_shared<detail::Reduction>(detail::plan_reduction("sum_over", x.shape(), axes));
  std::vector<double> r(numel(plan->kept), 0.0);
  const auto d = x.data();
  for (std::size_t f = 0; f < d.size(); ++f) r[plan->out_of[f]] += d[f];
  return detail::make_result("sum_over", plan->kept, std::move(r), {&x}, [plan](detail::Node& self) {
    detail::Node& p = detail::parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (std::size_t f = 0; f < g.size(); ++f) g[f] += self.grad[plan->out_of[f]];
  });
}

inline Tensor mean_over(const Tensor& x, const std::vector<std::size_t>& axes) {
  auto s = sum_over(x, axes);
  const Shape& xs = x.shape();
  return scale(s, static_cast<double>(numel(s.shape())) / static_cast<double>(numel(xs)));
}

/// Population variance over `axes` (kept as length-1).
inline Tensor variance_over(const Tensor& x, const std::vector<std::size_t>& axes) {
  auto m = mean_over(x, axes);
  auto c = sub(x, m);
  return mean_over(mul(c, c), axes);
}

/// Population standard deviation sqrt(var + eps) over `axes`, kept as
/// length-1 axes. Fused forward/backward: d sigma / d x_i = (x_i - mu)/(n sigma).
inline Tensor std_over(const Tensor& x, const std::vector<std::size_t>& axes, double eps = 1e-12) {
  if (!(eps > 0.0)) throw UsageError("std_over: epsilon must be positive");
  auto plan = std::make_shared<detail::Reduction>(detail::plan_reduction("std_over", x.shape(), axes));
  const std::size_t m = numel(plan->kept);
  const double n = static_cast<double>(plan->extent);
  const auto d = x.data();
  auto mu = std::make_shared<std::vector<double>>(m, 0.0);
  for (std::size_t f = 0; f < d.size(); ++f) (*mu)[plan->out_of[f]] += d[f];
  for (double& v : *mu) v /= n;
  std::vector<double> var(m, 0.0);
  for (std::size_t f = 0; f < d.size(); ++f) {
    const double c = d[f] - (*mu)[plan->out_of[f]];
    var[plan->out_of[f]] += c * c;
  }
  std::vector<double> r(m);
  for (std::size_t i = 0; i < m; ++i) r[i] = std::sqrt(var[i] / n + eps);
  return detail::make_result("std_over", plan->kept, std::move(r), {&x}, [plan, mu, n](detail::Node& self) {
    detail::Node& p = detail::parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (std::size_t f = 0; f < g.size(); ++f) {
      const std::size_t o = plan->out_of[f];
      g[f] += self.grad[o] * (p.data[f] - (*mu)[o]) / (n * self.data[o]);
    }
  });
}

/// Softmax over the last axis with max subtraction.
inline Tensor softmax_lastaxis(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.empty() || s.back() == 0) throw ShapeError("softmax_lastaxis: empty last axis in " + shape_str(s));
  const std::size_t L = s.back();
  const std::size_t rows = x.size() / L;
  const auto d = x.data();
  for (double v : d) {
    if (!std::isfinite(v)) throw NumericError("softmax_lastaxis: non-finite input");
  }
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < rows; ++i) {
    const double* in = d.data() + i * L;
    double* out = r.data() + i * L;
    const double mx = *std::max_element(in, in + L);
    double z = 0.0;
    for (std::size_t j = 0; j < L; ++j) z += (out[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < L; ++j) out[j] /= z;
  }
  return detail::make_result("softmax", s, std::move(r), {&x}, [rows, L](detail::Node& self) {
    detail::Node& p = detail::parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < rows; ++i) {
      const double* y = self.data.data() + i * L;
      const double* gy = self.grad.data() + i * L;
      double dot = 0.0;
      for (std::size_t j = 0; j < L; ++j) dot += y[j] * gy[j];
      for (std::size_t j = 0; j < L; ++j) g[i * L + j] += y[j] * (gy[j] - dot);
    }
  });
}

/// Normalizes over the last axis, then applies gain[C] and shift[C].
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift, double eps = 1e-5) {
  const Shape& s = x.shape();
  if (s.empty() || gain.shape() != Shape{s.back()} || shift.shape() != Shape{s.back()}) {
    throw ShapeError("layer_norm: input " + shape_str(s) + " gain " + shape_str(gain.shape()) +
                     " shift " + shape_str(shift.shape()));
  }
  const std::size_t C = s.back();
  const std::size_t rows = x.size() / C;
  const auto d = x.data();
  const auto gv = gain.data();
  const auto bv = shift.data();
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv = std::make_shared<std::vector<double>>(rows);
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < rows; ++i) {
    const double* in = d.data() + i * C;
    double mu = 0.0;
    for (std::size_t j = 0; j < C; ++j) mu += in[j];
    mu /= static_cast<double>(C);
    double var = 0.0;
    for (std::size_t j = 0; j < C; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(C);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv)[i] = is;
    for (std::size_t j = 0; j < C; ++j) {
      const double h = (in[j] - mu) * is;
      (*xhat)[i * C + j] = h;
      r[i * C + j] = h * gv[j] + bv[j];
    }
  }
  return detail::make_result("layer_norm", s, std::move(r), {&x, &gain, &shift},
                             [rows, C, xhat, inv](detail::Node& self) {
                               detail::Node& nx = detail::parent(self, 0);
                               detail::Node& ng = detail::parent(self, 1);
                               detail::Node& nb = detail::parent(self, 2);
                               const auto& gy = self.grad;
                               if (ng.requires_grad) {
                                 auto& gg = ng.ensure_grad();
                                 for (std::size_t f = 0; f < gy.size(); ++f) gg[f % C] += gy[f] * (*xhat)[f];
                               }
                               if (nb.requires_grad) {
                                 auto& gb = nb.ensure_grad();
                                 for (std::size_t f = 0; f < gy.size(); ++f) gb[f % C] += gy[f];
                               }
                               if (nx.requires_grad) {
                                 auto& gx = nx.ensure_grad();
                                 const double cn = static_cast<double>(C);
                                 for (std::size_t i = 0; i < rows; ++i) {
                                   double s1 = 0.0, s2 = 0.0;
                                   for (std::size_t j = 0; j < C; ++j) {
                                     const double gh = gy[i * C + j] * ng.data[j];
                                     s1 += gh;
                                     s2 += gh * (*xhat)[i * C + j];
                                   }
                                   for (std::size_t j = 0; j < C; ++j) {
                                     const double gh = gy[i * C + j] * ng.data[j];
                                     gx[i * C + j] += (*inv)[i] / cn *
                                                      (cn * gh - s1 - (*xhat)[i * C + j] * s2);
                                   }
                                 }
                               }
                             });
}

}  // namespace bevx
