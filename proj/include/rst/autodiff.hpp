#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rst/tensor.hpp"

namespace rst {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  [[nodiscard]] const Tensor& value() const;
  [[nodiscard]] const Shape& shape() const { return value().shape(); }
  [[nodiscard]] bool requires_grad() const;
  /// Gradient after Tape::backward; throws if the node received none.
  [[nodiscard]] const Tensor& grad() const;
};

/// Reverse-mode recorder. Nodes are appended in evaluation order, so every
/// node's inputs have smaller ids; backward walks the record in reverse.
/// A tape is single-use per forward/backward pass and confined to one thread.
class Tape {
 public:
  /// Receives the output gradient; accumulates into inputs' grad buffers.
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records a primitive. `requires_grad` is derived from the inputs; the
  /// backward closure is dropped when no input needs a gradient.
  Var record(std::string op, Tensor value, std::vector<Var> inputs, BackwardFn backward);

  /// Populates grads of every node reachable from a scalar `loss`.
  void backward(Var loss);

  [[nodiscard]] const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  [[nodiscard]] bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  [[nodiscard]] bool has_grad(std::size_t id) const { return nodes_.at(id).grad.has_value(); }
  [[nodiscard]] const Tensor& grad(std::size_t id) const;
  [[nodiscard]] const std::string& op(std::size_t id) const { return nodes_.at(id).op; }
  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

  /// Zero-initialized on first access. Used by backward closures.
  Tensor& grad_buffer(std::size_t id);

 private:
  struct Node {
    std::string op;
    Tensor value;
    bool requires_grad = false;
    std::optional<Tensor> grad;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// Output extent of a sliding window: floor((in + 2*pad - window) / stride) + 1.
std::size_t window_output_size(std::size_t in, std::size_t window, std::size_t stride, std::size_t padding);

/// Per-channel statistics for non-affine batch normalization.
struct NormStats {
  std::vector<Real> mean;
  std::vector<Real> var;

  static NormStats identity(std::size_t channels) {
    return {std::vector<Real>(channels, Real(0)), std::vector<Real>(channels, Real(1))};
  }
  friend bool operator==(const NormStats&, const NormStats&) = default;
};

inline constexpr Real kNormEpsilon = Real(1e-5);
inline constexpr Real kNormMomentum = Real(0.1);

/// running <- (1 - momentum) * running + momentum * batch, with unbiased batch variance.
void update_running_stats(NormStats& running, const NormStats& batch, std::size_t samples_per_channel);

namespace ops {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, Real factor);
/// Elementwise product with a constant tensor (no gradient into the constant).
Var mul_const(Var a, const Tensor& factor);
Var relu(Var a);
/// a[m,k] x b[k,n]
Var matmul(Var a, Var b);
/// x[n,in] x w[out,in]^T
Var linear(Var x, Var w);
/// x[N,C,H,W] (*) w[O,C,kh,kw]
Var conv2d(Var x, Var w, Conv2dOptions options = {});
Var max_pool2d(Var x, std::size_t window, std::size_t stride);
Var avg_pool2d(Var x, std::size_t window, std::size_t stride);
Var reshape(Var x, Shape shape);
Var flatten(Var x);
/// Non-affine batch norm over channels (axis 1 of rank-2 or rank-4 input).
/// With `batch_out`, normalizes by the current batch and reports its biased
/// statistics; otherwise normalizes by `running`.
Var batch_norm(Var x, const NormStats& running, NormStats* batch_out);
/// Row-wise softmax of x[n,c].
Var softmax(Var x);
/// Mean (or sum) over the batch of -log softmax(logits)[label].
Var cross_entropy(Var logits, std::span<const int> labels, bool sum_reduction = false);
/// -log of the label's probability under the mean of softmax(logits_i),
/// i.e. the cross-entropy of an averaged-probability ensemble. With one
/// member it is bit-identical to cross_entropy.
Var ensemble_cross_entropy(std::span<const Var> member_logits, std::span<const int> labels,
                           bool sum_reduction = false);
/// Mean (or sum) of -log p[label] for rows of probabilities.
Var nll_of_probs(Var probs, std::span<const int> labels, bool sum_reduction = false);
/// Sum of all elements, as a [1] tensor.
Var sum(Var x);

}  // namespace ops

}  // namespace rst
