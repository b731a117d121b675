#pragma once

#include <string>

#include "pncnn/autodiff.hpp"

namespace pncnn {

enum class PlainNorm { L1, L2 };
enum class ProbLoss { Gauss, Exp, Laplace };

/// Training objective selector: the two plain norms plus the three
/// likelihood-based losses.
enum class LossKind { L1, L2, Gauss, Exp, Laplace };

std::string to_string(LossKind k);
LossKind parse_loss(const std::string& s);
bool is_probabilistic(LossKind k);

/// Tensors entering a loss. All share one shape; `gt` and `valid` are constants.
/// A pixel is valid where gt > 0.
struct LossInput {
  TensorPtr prediction;
  TensorPtr s;  // may be null for plain losses
  TensorPtr gt;
  double s_min = 1e-6;
};

/// Per-pixel loss terms summed over valid pixels (no normalization); used to
/// aggregate a batch before dividing by the total valid count.
TensorPtr loss_sum(Tape& tape, const LossInput& inp, LossKind kind);
std::size_t valid_count(const DiffTensor& gt);

/// Mean of |e| or e^2 over valid pixels, e = gt - prediction.
TensorPtr loss_plain(Tape& tape, const LossInput& inp, PlainNorm norm);

/// Mean over valid pixels of
///   gauss:   e^2 / s + log s
///   exp:     e^2 / exp(s) + s
///   laplace: |e| / s + log s
/// Throws if s is missing or below s_min.
TensorPtr loss_pncnn(Tape& tape, const LossInput& inp, ProbLoss variant);

TensorPtr loss(Tape& tape, const LossInput& inp, LossKind kind);

}  // namespace pncnn
