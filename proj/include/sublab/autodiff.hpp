// SPDX-License-Identifier: Apache-2.0
#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// A Tape owns every value computed in a forward pass. Ops append a node
// holding the output value and a closure that pushes the output gradient
// into the node's inputs. backward() walks the nodes once, in reverse
// insertion order, so gradients accumulate additively at fan-out.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "sublab/tensor.hpp"

namespace sublab::ad {

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Tensor value);
  /// Leaf whose gradient is collected by backward().
  Var variable(Tensor value);

  /// Appends an op node. `fn` is dropped when no input requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.id); }

  /// Accumulation buffer for node `id`, zero-initialised on first touch.
  Tensor& grad_buffer(std::size_t id);
  /// Gradient collected by backward(); zeros when the node was not reached.
  Tensor grad(Var v) const;

  /// Seeds d(loss)/d(loss) = 1 and propagates. Throws ContractError unless
  /// `loss` is a single-element node of this tape.
  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

enum class Activation { Gelu, Relu };
enum class KlOrder { StudentTeacher, TeacherStudent };

// Linear algebra.
Var matmul(Var a, Var b);
Var transpose(Var a);

// Elementwise, same shape.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
/// x[n x d] + bias[d] broadcast over rows.
Var add_row(Var x, Var bias);

Var gelu(Var x);
Var relu(Var x);
Var activation(Var x, Activation kind);

/// Per-row normalisation to zero mean and unit variance, then affine.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var softmax_rows(Var x);

/// Mean negative log-likelihood of `labels` under row softmax of `logits`.
Var softmax_cross_entropy(Var logits, std::span<const int> labels);

/// T^2 * mean_i KL(p_i || q_i) with p = softmax(student / T), q =
/// softmax(teacher / T) for StudentTeacher (arguments swapped for
/// TeacherStudent). The teacher side never receives a gradient.
Var kl_divergence(Var student_logits, Var teacher_logits, double temperature,
                  KlOrder order = KlOrder::StudentTeacher);

/// Identity forward; backward multiplies the incoming gradient by -lambda.
Var grad_reverse(Var x, double lambda);

/// Rows of `table` selected by `indices`; backward scatter-adds.
Var gather_rows(Var table, std::span<const std::size_t> indices);

/// Multi-head scaled dot-product attention without masking. q holds
/// batch * Sq rows, k and v batch * Sk rows; every row has `heads` slices.
Var attention(Var q, Var k, Var v, std::size_t batch, std::size_t heads);

Var sum(Var x);
Var mean(Var x);

Tensor one_hot(std::span<const int> labels, std::size_t classes);

}  // namespace sublab::ad
