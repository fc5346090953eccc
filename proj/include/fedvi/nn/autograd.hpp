#pragma once

// Define-by-run reverse-mode differentiation. A Tape is built fresh for every
// forward pass; Var is a lightweight handle to one recorded node.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "fedvi/nn/params.hpp"
#include "fedvi/nn/tensor.hpp"

namespace fedvi::nn {

class Tape;

class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Propagates the output gradient of node `self` into its parents.
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf bound to a parameter block; backward() writes the block's grad.
  Var param(ParamBlock& block);

  /// Appends an op node. `fn` is only invoked when some parent needs gradients.
  /// Throws NumericError if `value` has a non-finite entry.
  Var record(Tensor value, std::span<const Var> parents, BackwardFn fn, const char* op);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer of a parent, or nullptr when it does not need one.
  Tensor* grad_sink(std::size_t id);

  /// Reverse accumulation from a scalar root. Gradients are recomputed from
  /// scratch on every call and overwrite (not accumulate into) the grad of each
  /// parameter block bound to this tape, so calling twice gives identical results.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    ParamBlock* param = nullptr;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

// Published differentiable operations.
Var matmul(Var a, Var b);
/// a · bᵀ for a [n×k], b [m×k].
Var matmul_bt(Var a, Var b);
Var dense(Var x, Var w, Var b);
Var add_row(Var a, Var row);
Var relu(Var x);
Var exp(Var x);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var reshape(Var a, Shape shape);
/// Column means of a matrix, returned as a vector.
Var mean_rows(Var a);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
/// Contiguous slice [begin, end) of a vector.
Var slice(Var v, std::size_t begin, std::size_t end);
Var gather_rows(Var a, std::span<const std::size_t> rows);
Var sum(Var a);
/// Σ_i −log softmax(logits_i)[labels_i], via a log-sum-exp shift.
Var softmax_nll(Var logits, std::span<const int> labels);

/// Forward-only helpers on plain tensors (no tape).
Tensor dense_forward(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor relu(const Tensor& x);
double softmax_nll(const Tensor& logits, std::span<const int> labels);

}  // namespace fedvi::nn
