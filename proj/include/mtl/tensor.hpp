#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mtl/errors.hpp"
#include "mtl/rng.hpp"

namespace mtl {

/// Extents of a tensor; rank 1 (vectors) and rank 2 (matrices) are supported.
/// Scalars are represented as shape {1}.
using Shape = std::vector<int>;

std::string shape_str(const Shape& s);

namespace detail {

/// One node of the define-by-run graph: the operation record holding the
/// produced value, the saved inputs needed for the backward pass, and the
/// closure that accumulates gradients into those inputs. Nodes are created
/// in execution order, so any walk that respects the `inputs` edges sees a
/// topologically ordered operation list.
struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> inputs;
  std::function<void(TensorNode&)> backward;

  std::size_t numel() const { return value.size(); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
  void accumulate(const std::vector<double>& g) {
    ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
  }
};

}  // namespace detail

/// Dense 64-bit float tensor with reverse-mode autodiff. A Tensor is a
/// cheap handle onto shared node storage; copying a Tensor aliases the same
/// data. Shapes are immutable after creation. Gradients accumulate across
/// backward() calls until zero_grad() is invoked.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data,
                     bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  int dim(int axis) const { return n_->shape[static_cast<std::size_t>(axis)]; }
  std::size_t numel() const { return n_->numel(); }

  const std::vector<double>& values() const { return n_->value; }
  /// Direct mutation is only meaningful for leaves (parameters updated by an
  /// optimizer); mutating an interior node would desynchronize saved values.
  std::vector<double>& mutable_values() { return n_->value; }

  double item() const;
  double at(int i) const { return n_->value[static_cast<std::size_t>(i)]; }
  double at(int r, int c) const;

  bool requires_grad() const { return n_->requires_grad; }
  /// Gradient buffer; zeros if backward has not reached this tensor.
  const std::vector<double>& grad() const {
    n_->ensure_grad();
    return n_->grad;
  }
  void set_grad(const std::vector<double>& g);
  void accumulate_grad(const std::vector<double>& g) { n_->accumulate(g); }
  void zero_grad() {
    if (!n_->grad.empty()) n_->grad.assign(n_->value.size(), 0.0);
  }

  /// Value copy detached from any graph.
  Tensor detach() const;
  /// Deep copy as a fresh leaf, preserving requires_grad.
  Tensor clone() const;

  std::shared_ptr<detail::TensorNode> node() const { return n_; }
  explicit Tensor(std::shared_ptr<detail::TensorNode> n) : n_(std::move(n)) {}

 private:
  std::shared_ptr<detail::TensorNode> n_;
};

// ---------------------------------------------------------------------------
// Differentiable operations (define-by-run; each call appends a graph node).
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// (r x c) matrix plus length-c row vector, broadcast over rows.
Tensor add_rowvec(const Tensor& m, const Tensor& v);
Tensor scale(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor softmax(const Tensor& a, int axis);
/// Normalizes over the last extent; gain/bias must match it.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps);
Tensor cross_entropy(const Tensor& logits, int label);
Tensor mse(const Tensor& pred, double target);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor slice_cols(const Tensor& a, int start, int len);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, int start, int len);
Tensor concat_rows(const std::vector<Tensor>& parts);
/// Inverted dropout; pass the training RNG. rate 0 is the identity.
Tensor dropout(const Tensor& a, double rate, Rng& rng);

/// Reverse-mode sweep from a scalar loss. Gradients of every reachable
/// tensor with requires_grad are accumulated (+=); call zero_grad between
/// optimizer steps. Throws ValueError if loss is not a scalar.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Flat parameter views (stable ordering = the order of the given list).
// ---------------------------------------------------------------------------

std::size_t param_count(const std::vector<Tensor>& params);
std::vector<double> flatten_values(const std::vector<Tensor>& params);
std::vector<double> flatten_grads(const std::vector<Tensor>& params);
/// Writes a flat vector back into the parameter values.
/// Throws ShapeError when the length does not match.
void unflatten_values(const std::vector<Tensor>& params,
                      const std::vector<double>& flat);
/// Overwrites the gradient buffers from a flat vector.
void install_grads(const std::vector<Tensor>& params,
                   const std::vector<double>& flat);

}  // namespace mtl
