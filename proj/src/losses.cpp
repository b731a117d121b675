#include "pncnn/losses.hpp"

#include "pncnn/error.hpp"

namespace pncnn {

std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::L1: return "l1";
    case LossKind::L2: return "l2";
    case LossKind::Gauss: return "gauss";
    case LossKind::Exp: return "exp";
    case LossKind::Laplace: return "laplace";
  }
  return "?";
}

LossKind parse_loss(const std::string& s) {
  if (s == "l1") return LossKind::L1;
  if (s == "l2") return LossKind::L2;
  if (s == "gauss") return LossKind::Gauss;
  if (s == "exp") return LossKind::Exp;
  if (s == "laplace") return LossKind::Laplace;
  throw ConfigError("unknown loss '" + s + "'");
}

bool is_probabilistic(LossKind k) {
  return k == LossKind::Gauss || k == LossKind::Exp || k == LossKind::Laplace;
}

std::size_t valid_count(const DiffTensor& gt) {
  std::size_t n = 0;
  for (double v : gt.data()) n += v > 0.0 ? 1 : 0;
  return n;
}

namespace {

TensorPtr valid_mask(const DiffTensor& gt) {
  auto m = make_tensor(gt.shape());
  for (std::size_t i = 0; i < gt.size(); ++i) (*m)[i] = gt[i] > 0.0 ? 1.0 : 0.0;
  return m;
}

void check_s(const LossInput& inp) {
  if (!inp.s) throw Error("probabilistic loss requires an uncertainty map s");
  require_same_shape(*inp.s, *inp.prediction, "loss");
  for (double v : inp.s->data()) {
    if (!(v >= inp.s_min)) {
      throw DomainError("uncertainty " + std::to_string(v) + " below floor " +
                        std::to_string(inp.s_min));
    }
  }
}

}  // namespace

TensorPtr loss_sum(Tape& tape, const LossInput& inp, LossKind kind) {
  require_same_shape(*inp.prediction, *inp.gt, "loss");
  auto mask = valid_mask(*inp.gt);
  auto e = sub(tape, inp.gt, inp.prediction);
  TensorPtr term;
  switch (kind) {
    case LossKind::L1:
      term = abs(tape, e);
      break;
    case LossKind::L2:
      term = square(tape, e);
      break;
    case LossKind::Gauss:
      check_s(inp);
      term = add(tape, div(tape, square(tape, e), inp.s, 0.0), log(tape, inp.s));
      break;
    case LossKind::Exp:
      check_s(inp);
      term = add(tape, div(tape, square(tape, e), exp(tape, inp.s), 0.0), inp.s);
      break;
    case LossKind::Laplace:
      check_s(inp);
      term = add(tape, div(tape, abs(tape, e), inp.s, 0.0), log(tape, inp.s));
      break;
  }
  return sum(tape, mul(tape, term, mask));
}

TensorPtr loss(Tape& tape, const LossInput& inp, LossKind kind) {
  const std::size_t n = valid_count(*inp.gt);
  if (n == 0) throw Error("loss: no valid groundtruth pixels");
  return scale(tape, loss_sum(tape, inp, kind), 1.0 / static_cast<double>(n));
}

TensorPtr loss_plain(Tape& tape, const LossInput& inp, PlainNorm norm) {
  return loss(tape, inp, norm == PlainNorm::L1 ? LossKind::L1 : LossKind::L2);
}

TensorPtr loss_pncnn(Tape& tape, const LossInput& inp, ProbLoss variant) {
  switch (variant) {
    case ProbLoss::Gauss: return loss(tape, inp, LossKind::Gauss);
    case ProbLoss::Exp: return loss(tape, inp, LossKind::Exp);
    case ProbLoss::Laplace: return loss(tape, inp, LossKind::Laplace);
  }
  throw Error("unknown probabilistic loss");
}

}  // namespace pncnn
