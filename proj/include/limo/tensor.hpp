#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "limo/error.hpp"
#include "limo/rng.hpp"

namespace limo {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& s);

class Tensor;
class Tape;

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated only when the node participates in gradients
  bool requires_grad = false;
  bool leaf = true;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

using NodePtr = std::shared_ptr<TensorNode>;

// Single gateway for the op kernels and the tape into Tensor internals.
struct tape_access;

}  // namespace detail

// Dense row-major tensor of 64-bit reals. Value-semantic handle: copies share
// the underlying node, detach() makes an independent one. A scalar is a
// rank-0 tensor (empty shape, one element).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor row_matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor gaussian(Shape shape, Rng& rng, double stddev = 1.0);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t size() const;
  std::size_t rows() const;  // matrices only
  std::size_t cols() const;
  bool is_matrix() const;

  double value() const;  // scalar tensors only
  double at(std::size_t r, std::size_t c) const;
  std::span<const double> values() const;
  std::span<double> values_mut();

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);  // leaves only
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  Tensor detach() const;  // value copy with no graph attachment

 private:
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}
  const detail::NodePtr& node() const;

  detail::NodePtr node_;
  friend struct detail::tape_access;
};

// Sequential record of differentiable operations for one forward pass.
// Constructing a Tape makes it the active recorder for the current thread;
// destruction restores the previous one. Distinct tapes on distinct threads
// never share state.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() noexcept;

  // Reverse sweep from a scalar loss. Interior gradients are reset on every
  // call; leaf gradients accumulate across calls.
  void backward(const Tensor& loss);

  std::size_t recorded() const { return steps_.size(); }

 private:
  friend struct detail::tape_access;
  void record(std::function<void()> step, detail::NodePtr out);

  std::vector<std::function<void()>> steps_;
  std::vector<detail::NodePtr> interior_;
  Tape* prev_ = nullptr;
};

// Pauses recording on the current thread; used for eval-mode forwards inside
// a training step (zero-shot snapshots, report-only terms).
class TapeSuspend {
 public:
  TapeSuspend();
  ~TapeSuspend();
  TapeSuspend(const TapeSuspend&) = delete;
  TapeSuspend& operator=(const TapeSuspend&) = delete;

 private:
  Tape* saved_;
};

// Inputs below this floor are clamped before taking the logarithm.
inline constexpr double kLogFloor = 1e-12;

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor softmax_rows(const Tensor& a, double temperature);
Tensor l2_normalize_rows(const Tensor& a);
Tensor mean_rows(const Tensor& a);  // [n x d] -> [1 x d]
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor dropout(const Tensor& a, double p, bool training, Rng& rng);

// Backward through the active tape.
void backward(const Tensor& loss);

}  // namespace limo
