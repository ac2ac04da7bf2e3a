#include "limo/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <utility>

namespace limo {

namespace {

thread_local Tape* g_active_tape = nullptr;

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

}  // namespace

std::string shape_to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct tape_access {
  static const NodePtr& node(const Tensor& t) { return t.node(); }
  static Tensor wrap(NodePtr n) { return Tensor(std::move(n)); }
  static void record(Tape& tape, std::function<void()> step, NodePtr out) {
    tape.record(std::move(step), std::move(out));
  }
};

}  // namespace detail

using detail::NodePtr;
using detail::tape_access;
using detail::TensorNode;

// ---------------------------------------------------------------------------
// Tensor

const NodePtr& Tensor::node() const {
  if (!node_) throw contract_error("use of an empty tensor");
  return node_;
}

Tensor Tensor::zeros(Shape shape) {
  auto n = std::make_shared<TensorNode>();
  n->data.assign(shape_numel(shape), 0.0);
  n->shape = std::move(shape);
  return Tensor(std::move(n));
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.node_->data.begin(), t.node_->data.end(), value);
  return t;
}

Tensor Tensor::scalar(double value) { return full(Shape{}, value); }

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size()) {
    throw dimension_error("tensor data length " + std::to_string(values.size()) +
                          " does not match shape " + shape_to_string(shape));
  }
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(values);
  return Tensor(std::move(n));
}

Tensor Tensor::row_matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw dimension_error("row_matrix rows have unequal lengths");
    data.insert(data.end(), row.begin(), row.end());
  }
  return from({r, c}, std::move(data));
}

Tensor Tensor::gaussian(Shape shape, Rng& rng, double stddev) {
  Tensor t = zeros(std::move(shape));
  for (double& v : t.node_->data) v = rng.next_gaussian(stddev);
  return t;
}

const Shape& Tensor::shape() const { return node()->shape; }

std::size_t Tensor::size() const { return node()->data.size(); }

bool Tensor::is_matrix() const { return node()->shape.size() == 2; }

std::size_t Tensor::rows() const {
  if (!is_matrix()) throw contract_error("rows() on non-matrix tensor " + shape_to_string(shape()));
  return node()->shape[0];
}

std::size_t Tensor::cols() const {
  if (!is_matrix()) throw contract_error("cols() on non-matrix tensor " + shape_to_string(shape()));
  return node()->shape[1];
}

double Tensor::value() const {
  if (size() != 1) throw contract_error("value() on non-scalar tensor " + shape_to_string(shape()));
  return node()->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return node()->data[r * cols() + c];
}

std::span<const double> Tensor::values() const { return node()->data; }

std::span<double> Tensor::values_mut() { return node()->data; }

bool Tensor::requires_grad() const { return node()->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!node()->leaf) throw contract_error("requires_grad may only be toggled on leaf tensors");
  node_->requires_grad = on;
  if (on) node_->ensure_grad();
  return *this;
}

bool Tensor::is_leaf() const { return node()->leaf; }

bool Tensor::has_grad() const { return defined() && node_->grad.size() == node_->data.size(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw contract_error("gradient not tracked for this tensor");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  auto n = std::make_shared<TensorNode>();
  n->shape = node()->shape;
  n->data = node()->data;
  return Tensor(std::move(n));
}

// ---------------------------------------------------------------------------
// Tape

Tape::Tape() : prev_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() noexcept { return g_active_tape; }

void Tape::record(std::function<void()> step, NodePtr out) {
  out->requires_grad = true;
  out->leaf = false;
  out->ensure_grad();
  interior_.push_back(std::move(out));
  steps_.push_back(std::move(step));
}

void Tape::backward(const Tensor& loss) {
  const NodePtr& root = tape_access::node(loss);
  if (root->data.size() != 1) {
    throw contract_error("backward requires a scalar loss, got shape " +
                         shape_to_string(root->shape));
  }
  if (!root->requires_grad) {
    throw contract_error("backward on a tensor that does not participate in gradients");
  }
  for (const NodePtr& n : interior_) std::fill(n->grad.begin(), n->grad.end(), 0.0);
  root->ensure_grad();
  root->grad[0] += 1.0;
  // the tape is a topological order by construction; reverse replay suffices
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
}

TapeSuspend::TapeSuspend() : saved_(g_active_tape) { g_active_tape = nullptr; }

TapeSuspend::~TapeSuspend() { g_active_tape = saved_; }

void backward(const Tensor& loss) {
  Tape* t = Tape::active();
  if (!t) throw contract_error("backward requires an active tape");
  t->backward(loss);
}

// ---------------------------------------------------------------------------
// Op kernels

namespace {

Tensor make_result(Shape shape, std::vector<double> data) {
  return tape_access::wrap([&] {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    return n;
  }());
}

// Active tape if any listed input wants gradients, else nullptr.
Tape* recording_for(std::initializer_list<const Tensor*> inputs) {
  Tape* t = Tape::active();
  if (!t) return nullptr;
  for (const Tensor* in : inputs) {
    if (in->requires_grad()) return t;
  }
  return nullptr;
}

void attach(Tape* tape, const Tensor& out, std::function<void()> step) {
  tape_access::record(*tape, std::move(step), tape_access::node(out));
}

void require_matrix(const Tensor& t, const char* op) {
  if (!t.is_matrix()) {
    throw dimension_error(std::string(op) + ": expected a matrix, got " +
                          shape_to_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw dimension_error(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                          " vs " + shape_to_string(b.shape()));
  }
}

// Shared skeleton for pointwise unary ops: y_i = fwd(x_i), dx_i += dy_i * dfn(x_i, y_i).
template <class Fwd, class Dfn>
Tensor pointwise_unary(const Tensor& a, Fwd fwd, Dfn dfn) {
  std::span<const double> x = a.values();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  Tensor out = make_result(a.shape(), std::move(y));
  if (Tape* tape = recording_for({&a})) {
    NodePtr an = tape_access::node(a);
    NodePtr on = tape_access::node(out);
    an->ensure_grad();
    attach(tape, out, [an, on, dfn] {
      for (std::size_t i = 0; i < an->data.size(); ++i) {
        an->grad[i] += on->grad[i] * dfn(an->data[i], on->data[i]);
      }
    });
  }
  return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw dimension_error("matmul: inner dimensions disagree: " + shape_to_string(a.shape()) +
                          " vs " + shape_to_string(b.shape()));
  }
  std::span<const double> av = a.values();
  std::span<const double> bv = b.values();
  std::vector<double> y(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = bv.data() + p * n;
      double* yrow = y.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) yrow[j] += aip * brow[j];
    }
  }
  Tensor out = make_result({m, n}, std::move(y));
  if (Tape* tape = recording_for({&a, &b})) {
    NodePtr an = tape_access::node(a);
    NodePtr bn = tape_access::node(b);
    NodePtr on = tape_access::node(out);
    if (an->requires_grad) an->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    attach(tape, out, [an, bn, on, m, k, n] {
      if (an->requires_grad) {
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            const double* grow = on->grad.data() + i * n;
            const double* brow = bn->data.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            an->grad[i * k + p] += acc;
          }
        }
      }
      if (bn->requires_grad) {
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = on->grad.data() + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = an->data[i * k + p];
            if (aip == 0.0) continue;
            double* brow = bn->grad.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) brow[j] += aip * grow[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::span<const double> av = a.values();
  std::vector<double> y(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) y[j * m + i] = av[i * n + j];
  }
  Tensor out = make_result({n, m}, std::move(y));
  if (Tape* tape = recording_for({&a})) {
    NodePtr an = tape_access::node(a);
    NodePtr on = tape_access::node(out);
    an->ensure_grad();
    attach(tape, out, [an, on, m, n] {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) an->grad[i * n + j] += on->grad[j * m + i];
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::span<const double> av = a.values(), bv = b.values();
  std::vector<double> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  Tensor out = make_result(a.shape(), std::move(y));
  if (Tape* tape = recording_for({&a, &b})) {
    NodePtr an = tape_access::node(a);
    NodePtr bn = tape_access::node(b);
    NodePtr on = tape_access::node(out);
    if (an->requires_grad) an->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    attach(tape, out, [an, bn, on] {
      if (an->requires_grad) {
        for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::span<const double> av = a.values(), bv = b.values();
  std::vector<double> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] - bv[i];
  Tensor out = make_result(a.shape(), std::move(y));
  if (Tape* tape = recording_for({&a, &b})) {
    NodePtr an = tape_access::node(a);
    NodePtr bn = tape_access::node(b);
    NodePtr on = tape_access::node(out);
    if (an->requires_grad) an->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    attach(tape, out, [an, bn, on] {
      if (an->requires_grad) {
        for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::span<const double> av = a.values(), bv = b.values();
  std::vector<double> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  Tensor out = make_result(a.shape(), std::move(y));
  if (Tape* tape = recording_for({&a, &b})) {
    NodePtr an = tape_access::node(a);
    NodePtr bn = tape_access::node(b);
    NodePtr on = tape_access::node(out);
    if (an->requires_grad) an->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    attach(tape, out, [an, bn, on] {
      if (an->requires_grad) {
        for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i] * an->data[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double factor) {
  return pointwise_unary(
      a, [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Tensor neg(const Tensor& a) {
  return pointwise_unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& a) {
  return pointwise_unary(a, [](double x) { return std::exp(x); },
                         [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  std::span<const double> x = a.values();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] < 0.0) {
      throw numeric_error("log: negative input " + std::to_string(x[i]) + " at index " +
                          std::to_string(i));
    }
  }
  // inputs in [0, kLogFloor] are clamped to the floor; their derivative is zero
  return pointwise_unary(
      a, [](double v) { return std::log(v < kLogFloor ? kLogFloor : v); },
      [](double v, double) { return v < kLogFloor ? 0.0 : 1.0 / v; });
}

Tensor relu(const Tensor& a) {
  return pointwise_unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                         [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& a) {
  std::span<const double> x = a.values();
  double s = 0.0;
  for (double v : x) s += v;
  Tensor out = make_result({}, {s});
  if (Tape* tape = recording_for({&a})) {
    NodePtr an = tape_access::node(a);
    NodePtr on = tape_access::node(out);
    an->ensure_grad();
    attach(tape, out, [an, on] {
      const double g = on->grad[0];
      for (double& gi : an->grad) gi += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& a) {
  std::span<const double> x = a.values();
  if (x.empty()) throw contract_error("mean of an empty tensor");
  double s = 0.0;
  for (double v : x) s += v;
  const double inv = 1.0 / static_cast<double>(x.size());
  Tensor out = make_result({}, {s * inv});
  if (Tape* tape = recording_for({&a})) {
    NodePtr an = tape_access::node(a);
    NodePtr on = tape_access::node(out);
    an->ensure_grad();
    attach(tape, out, [an, on, inv] {
      const double g = on->grad[0] * inv;
      for (double& gi : an->grad) gi += g;
    });
  }
  return out;
}

Tensor softmax_rows(const Tensor& a, double temperature) {
  require_matrix(a, "softmax_rows");
  if (!(temperature > 0.0)) {
    throw domain_error("softmax_rows: temperature must be positive, got " +
                       std::to_string(temperature));
  }
  const std::size_t n = a.rows(), k = a.cols();
  std::span<const double> x = a.values();
  std::vector<double> y(n * k);
  const double inv_t = 1.0 / temperature;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = x.data() + i * k;
    double mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    double* yrow = y.data() + i * k;
    for (std::size_t j = 0; j < k; ++j) {
      yrow[j] = std::exp((row[j] - mx) * inv_t);
      denom += yrow[j];
    }
    const double inv_d = 1.0 / denom;
    for (std::size_t j = 0; j < k; ++j) yrow[j] *= inv_d;
  }
  Tensor out = make_result({n, k}, std::move(y));
  if (Tape* tape = recording_for({&a})) {
    NodePtr an = tape_access::node(a);
    NodePtr on = tape_access::node(out);
    an->ensure_grad();
    attach(tape, out, [an, on, n, k, inv_t] {
      for (std::size_t i = 0; i < n; ++i) {
        const double* s = on->data.data() + i * k;
        const double* g = on->grad.data() + i * k;
        double dot = 0.0;
        for (std::size_t j = 0; j < k; ++j) dot += g[j] * s[j];
        double* dx = an->grad.data() + i * k;
        for (std::size_t j = 0; j < k; ++j) dx[j] += inv_t * s[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

Tensor l2_normalize_rows(const Tensor& a) {
  require_matrix(a, "l2_normalize_rows");
  const std::size_t n = a.rows(), d = a.cols();
  std::span<const double> x = a.values();
  std::vector<double> y(n * d);
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = x.data() + i * d;
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) sq += row[j] * row[j];
    const double r = std::sqrt(sq);
    if (r < 1e-12) {
      throw degenerate_embedding_error("l2_normalize_rows: row " + std::to_string(i) +
                                       " has norm " + std::to_string(r));
    }
    norms[i] = r;
    const double inv = 1.0 / r;
    for (std::size_t j = 0; j < d; ++j) y[i * d + j] = row[j] * inv;
  }
  Tensor out = make_result({n, d}, std::move(y));
  if (Tape* tape = recording_for({&a})) {
    NodePtr an = tape_access::node(a);
    NodePtr on = tape_access::node(out);
    an->ensure_grad();
    attach(tape, out, [an, on, n, d, norms = std::move(norms)] {
      for (std::size_t i = 0; i < n; ++i) {
        const double* u = on->data.data() + i * d;
        const double* g = on->grad.data() + i * d;
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += g[j] * u[j];
        const double inv = 1.0 / norms[i];
        double* dx = an->grad.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) dx[j] += (g[j] - u[j] * dot) * inv;
      }
    });
  }
  return out;
}

Tensor mean_rows(const Tensor& a) {
  require_matrix(a, "mean_rows");
  const std::size_t n = a.rows(), d = a.cols();
  if (n == 0) throw contract_error("mean_rows of an empty matrix");
  std::span<const double> x = a.values();
  std::vector<double> y(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) y[j] += x[i * d + j];
  }
  const double inv = 1.0 / static_cast<double>(n);
  for (double& v : y) v *= inv;
  Tensor out = make_result({1, d}, std::move(y));
  if (Tape* tape = recording_for({&a})) {
    NodePtr an = tape_access::node(a);
    NodePtr on = tape_access::node(out);
    an->ensure_grad();
    attach(tape, out, [an, on, n, d, inv] {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) an->grad[i * d + j] += on->grad[j] * inv;
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require_matrix(a, "slice_rows");
  const std::size_t n = a.rows(), d = a.cols();
  if (begin >= end || end > n) {
    throw contract_error("slice_rows: invalid range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") for " + std::to_string(n) + " rows");
  }
  std::span<const double> x = a.values();
  std::vector<double> y(x.begin() + static_cast<std::ptrdiff_t>(begin * d),
                        x.begin() + static_cast<std::ptrdiff_t>(end * d));
  Tensor out = make_result({end - begin, d}, std::move(y));
  if (Tape* tape = recording_for({&a})) {
    NodePtr an = tape_access::node(a);
    NodePtr on = tape_access::node(out);
    an->ensure_grad();
    attach(tape, out, [an, on, begin, d] {
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[begin * d + i] += on->grad[i];
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw contract_error("concat_rows of zero tensors");
  const std::size_t d = parts.front().cols();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.cols() != d) {
      throw dimension_error("concat_rows: column mismatch " + shape_to_string(p.shape()) +
                            " vs expected " + std::to_string(d) + " columns");
    }
    total += p.rows();
  }
  std::vector<double> y;
  y.reserve(total * d);
  for (const Tensor& p : parts) {
    std::span<const double> v = p.values();
    y.insert(y.end(), v.begin(), v.end());
  }
  Tensor out = make_result({total, d}, std::move(y));
  Tape* tape = Tape::active();
  bool any_grad = false;
  if (tape) {
    for (const Tensor& p : parts) any_grad = any_grad || p.requires_grad();
  }
  if (tape && any_grad) {
    std::vector<NodePtr> ins;
    ins.reserve(parts.size());
    for (const Tensor& p : parts) {
      NodePtr n = tape_access::node(p);
      if (n->requires_grad) n->ensure_grad();
      ins.push_back(std::move(n));
    }
    NodePtr on = tape_access::node(out);
    attach(tape, out, [ins = std::move(ins), on] {
      std::size_t offset = 0;
      for (const NodePtr& in : ins) {
        if (in->requires_grad) {
          for (std::size_t i = 0; i < in->data.size(); ++i) in->grad[i] += on->grad[offset + i];
        }
        offset += in->data.size();
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& a, double p, bool training, Rng& rng) {
  if (p < 0.0 || p >= 1.0) {
    throw domain_error("dropout: rate must lie in [0, 1), got " + std::to_string(p));
  }
  if (!training || p == 0.0) return a;
  const double keep_scale = 1.0 / (1.0 - p);
  std::span<const double> x = a.values();
  std::vector<double> mask(x.size());
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = rng.next_double() < p ? 0.0 : keep_scale;
    y[i] = x[i] * mask[i];
  }
  Tensor out = make_result(a.shape(), std::move(y));
  if (Tape* tape = recording_for({&a})) {
    NodePtr an = tape_access::node(a);
    NodePtr on = tape_access::node(out);
    an->ensure_grad();
    attach(tape, out, [an, on, mask = std::move(mask)] {
      for (std::size_t i = 0; i < mask.size(); ++i) an->grad[i] += on->grad[i] * mask[i];
    });
  }
  return out;
}

}  // namespace limo
