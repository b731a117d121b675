#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "pncnn/tensor.hpp"

namespace pncnn {

/// Default epsilon added to denominators (divide, normalized convolution).
inline constexpr double kDefaultDivEps = 1e-8;

/// Reverse-mode tape.
///
/// Ops append nodes in execution order, so inputs always precede the node that
/// consumes them. Nodes are only recorded when at least one input requires a
/// gradient; pure-constant subgraphs cost nothing at backward time.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  struct Node {
    std::string op;
    std::vector<TensorPtr> inputs;
    std::vector<TensorPtr> outputs;
    BackwardFn backward;
  };

  /// Registers a node. Outputs are marked as requiring grad.
  void record(std::string op, std::vector<TensorPtr> inputs, std::vector<TensorPtr> outputs,
              BackwardFn backward);

  /// A disabled tape records nothing (inference mode); outputs then never
  /// require gradients.
  void set_enabled(bool enabled) { enabled_ = enabled; }
  bool enabled() const { return enabled_; }

  /// Zeroes every gradient reachable from the tape, seeds d(loss)=1 and replays
  /// the nodes in reverse order. May be called repeatedly; results are identical.
  /// Throws if `loss` is not a single element or a gradient becomes non-finite.
  void backward(const TensorPtr& loss);

  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  /// Number of nodes visited by the most recent backward().
  std::size_t last_backward_visits() const { return last_visits_; }
  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
  std::size_t last_visits_ = 0;
  bool enabled_ = true;
};

/// True when any input requires a gradient.
bool any_requires_grad(std::initializer_list<const TensorPtr*> inputs);

// ---------------------------------------------------------------------------
// Elementwise and structural ops. Binary elementwise ops require identical
// shapes. Every op returns a fresh tensor; gradients flow only into inputs
// flagged requires_grad.

TensorPtr add(Tape& tape, const TensorPtr& x, const TensorPtr& y);
TensorPtr sub(Tape& tape, const TensorPtr& x, const TensorPtr& y);
TensorPtr mul(Tape& tape, const TensorPtr& x, const TensorPtr& y);
/// x / (y + eps).
TensorPtr div(Tape& tape, const TensorPtr& x, const TensorPtr& y, double eps = kDefaultDivEps);
TensorPtr scale(Tape& tape, const TensorPtr& x, double k);
TensorPtr add_scalar(Tape& tape, const TensorPtr& x, double k);
/// Natural log; DomainError on non-positive input.
TensorPtr log(Tape& tape, const TensorPtr& x);
TensorPtr exp(Tape& tape, const TensorPtr& x);
TensorPtr square(Tape& tape, const TensorPtr& x);
TensorPtr abs(Tape& tape, const TensorPtr& x);
/// log(1 + exp(x)), evaluated without overflow.
TensorPtr softplus(Tape& tape, const TensorPtr& x);
TensorPtr relu(Tape& tape, const TensorPtr& x);
/// max(x, floor); gradient passes only where x > floor.
TensorPtr clamp_min(Tape& tape, const TensorPtr& x, double floor);

/// Concatenates rank-3 [C,H,W] tensors along C.
TensorPtr concat_channels(Tape& tape, const std::vector<TensorPtr>& parts);
/// Nearest-neighbour 2x upsampling of [C,H,W], cropped to [C,out_h,out_w]
/// (out_h, out_w in {2H-1, 2H}).
TensorPtr upsample2x(Tape& tape, const TensorPtr& x, std::size_t out_h, std::size_t out_w);
TensorPtr upsample2x(Tape& tape, const TensorPtr& x);

struct MaxPoolResult {
  TensorPtr out;
  std::vector<std::size_t> argmax;  // flat input index per output element
};
/// 2x2 max pooling of [C,H,W] (ceil mode; ties resolve to the first in row-major order).
MaxPoolResult maxpool2x(Tape& tape, const TensorPtr& x);

/// Sum of all elements, shape [1].
TensorPtr sum(Tape& tape, const TensorPtr& x);
/// Mean of all elements, shape [1].
TensorPtr mean(Tape& tape, const TensorPtr& x);

/// Cross-correlation of input [C_in,H,W] with kernel [C_out,C_in,k,k], optional
/// bias [C_out]. Output extent floor((H + 2p - k)/stride) + 1.
TensorPtr conv2d(Tape& tape, const TensorPtr& input, const TensorPtr& kernel,
                 const TensorPtr& bias, int stride, int padding);
inline TensorPtr conv2d(Tape& tape, const TensorPtr& input, const TensorPtr& kernel, int stride,
                        int padding) {
  return conv2d(tape, input, kernel, nullptr, stride, padding);
}

}  // namespace pncnn
