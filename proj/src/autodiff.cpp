#include "pncnn/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "pncnn/error.hpp"

namespace pncnn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

bool needs(const TensorPtr& t) { return t && t->requires_grad(); }

TensorPtr like(const DiffTensor& x) { return make_tensor(x.shape()); }

void require_rank3(const DiffTensor& x, const char* op) {
  if (x.rank() != 3) {
    throw ShapeError(std::string(op) + ": expected [C,H,W], got " + shape_str(x.shape()));
  }
}

// Applies a unary op with a pointwise derivative expressed in terms of
// (input value, output value).
template <class Fwd, class Deriv>
TensorPtr unary(Tape& tape, const TensorPtr& x, const char* name, Fwd fwd, Deriv deriv) {
  auto out = like(*x);
  auto xs = x->data();
  auto os = out->data();
  for (std::size_t i = 0; i < xs.size(); ++i) os[i] = fwd(xs[i]);
  if (needs(x)) {
    tape.record(name, {x}, {out}, [x, out, deriv] {
      auto xg = x->grad();
      auto og = out->grad();
      auto xs = x->data();
      auto os = out->data();
      for (std::size_t i = 0; i < xg.size(); ++i) xg[i] += og[i] * deriv(xs[i], os[i]);
    });
  }
  return out;
}

double softplus_value(double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); }
double sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

void Tape::record(std::string op, std::vector<TensorPtr> inputs, std::vector<TensorPtr> outputs,
                  BackwardFn backward) {
  if (!enabled_) return;
  for (auto& o : outputs) o->set_requires_grad(true);
  nodes_.push_back(Node{std::move(op), std::move(inputs), std::move(outputs), std::move(backward)});
}

void Tape::backward(const TensorPtr& loss) {
  if (!loss || loss->size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " +
                     (loss ? shape_str(loss->shape()) : std::string("null")));
  }
  std::unordered_set<DiffTensor*> seen;
  auto reset = [&](const TensorPtr& t) {
    if (t && t->requires_grad() && seen.insert(t.get()).second) t->zero_grad();
  };
  for (auto& node : nodes_) {
    for (auto& t : node.inputs) reset(t);
    for (auto& t : node.outputs) reset(t);
  }
  loss->zero_grad();
  loss->grad()[0] = 1.0;
  last_visits_ = 0;
  for (std::size_t k = nodes_.size(); k-- > 0;) {
    auto& node = nodes_[k];
    node.backward();
    ++last_visits_;
    for (auto& in : node.inputs) {
      if (!needs(in)) continue;
      for (double g : in->grad()) {
        if (!std::isfinite(g)) {
          throw NumericError("non-finite gradient produced by op '" + node.op + "' (node " +
                             std::to_string(k) + ")");
        }
      }
    }
  }
}

bool any_requires_grad(std::initializer_list<const TensorPtr*> inputs) {
  for (auto* t : inputs) {
    if (needs(*t)) return true;
  }
  return false;
}

TensorPtr add(Tape& tape, const TensorPtr& x, const TensorPtr& y) {
  require_same_shape(*x, *y, "add");
  auto out = like(*x);
  for (std::size_t i = 0; i < out->size(); ++i) (*out)[i] = (*x)[i] + (*y)[i];
  if (needs(x) || needs(y)) {
    tape.record("add", {x, y}, {out}, [x, y, out] {
      auto og = out->grad();
      if (needs(x)) {
        auto g = x->grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += og[i];
      }
      if (needs(y)) {
        auto g = y->grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += og[i];
      }
    });
  }
  return out;
}

TensorPtr sub(Tape& tape, const TensorPtr& x, const TensorPtr& y) {
  require_same_shape(*x, *y, "sub");
  auto out = like(*x);
  for (std::size_t i = 0; i < out->size(); ++i) (*out)[i] = (*x)[i] - (*y)[i];
  if (needs(x) || needs(y)) {
    tape.record("sub", {x, y}, {out}, [x, y, out] {
      auto og = out->grad();
      if (needs(x)) {
        auto g = x->grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += og[i];
      }
      if (needs(y)) {
        auto g = y->grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= og[i];
      }
    });
  }
  return out;
}

TensorPtr mul(Tape& tape, const TensorPtr& x, const TensorPtr& y) {
  require_same_shape(*x, *y, "mul");
  auto out = like(*x);
  for (std::size_t i = 0; i < out->size(); ++i) (*out)[i] = (*x)[i] * (*y)[i];
  if (needs(x) || needs(y)) {
    tape.record("mul", {x, y}, {out}, [x, y, out] {
      auto og = out->grad();
      if (needs(x)) {
        auto g = x->grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += og[i] * (*y)[i];
      }
      if (needs(y)) {
        auto g = y->grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += og[i] * (*x)[i];
      }
    });
  }
  return out;
}

TensorPtr div(Tape& tape, const TensorPtr& x, const TensorPtr& y, double eps) {
  require_same_shape(*x, *y, "div");
  auto out = like(*x);
  for (std::size_t i = 0; i < out->size(); ++i) (*out)[i] = (*x)[i] / ((*y)[i] + eps);
  if (needs(x) || needs(y)) {
    tape.record("div", {x, y}, {out}, [x, y, out, eps] {
      auto og = out->grad();
      if (needs(x)) {
        auto g = x->grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += og[i] / ((*y)[i] + eps);
      }
      if (needs(y)) {
        auto g = y->grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double d = (*y)[i] + eps;
          g[i] -= og[i] * (*x)[i] / (d * d);
        }
      }
    });
  }
  return out;
}

TensorPtr scale(Tape& tape, const TensorPtr& x, double k) {
  return unary(tape, x, "scale", [k](double v) { return k * v; },
               [k](double, double) { return k; });
}

TensorPtr add_scalar(Tape& tape, const TensorPtr& x, double k) {
  return unary(tape, x, "add_scalar", [k](double v) { return v + k; },
               [](double, double) { return 1.0; });
}

TensorPtr log(Tape& tape, const TensorPtr& x) {
  for (double v : x->data()) {
    if (!(v > 0.0)) {
      throw DomainError("log: non-positive argument " + std::to_string(v));
    }
  }
  return unary(tape, x, "log", [](double v) { return std::log(v); },
               [](double v, double) { return 1.0 / v; });
}

TensorPtr exp(Tape& tape, const TensorPtr& x) {
  return unary(tape, x, "exp", [](double v) { return std::exp(v); },
               [](double, double o) { return o; });
}

TensorPtr square(Tape& tape, const TensorPtr& x) {
  return unary(tape, x, "square", [](double v) { return v * v; },
               [](double v, double) { return 2.0 * v; });
}

TensorPtr abs(Tape& tape, const TensorPtr& x) {
  return unary(tape, x, "abs", [](double v) { return std::abs(v); },
               [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

TensorPtr softplus(Tape& tape, const TensorPtr& x) {
  return unary(tape, x, "softplus", softplus_value, [](double v, double) { return sigmoid(v); });
}

TensorPtr relu(Tape& tape, const TensorPtr& x) {
  return unary(tape, x, "relu", [](double v) { return v <= 0 ? 0.0 : v; },
               [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

TensorPtr clamp_min(Tape& tape, const TensorPtr& x, double floor) {
  return unary(tape, x, "clamp_min", [floor](double v) { return v < floor ? floor : v; },
               [floor](double v, double) { return v > floor ? 1.0 : 0.0; });
}

TensorPtr concat_channels(Tape& tape, const std::vector<TensorPtr>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  require_rank3(*parts[0], "concat_channels");
  const std::size_t h = parts[0]->dim(1), w = parts[0]->dim(2);
  std::size_t channels = 0;
  bool grad = false;
  for (auto& p : parts) {
    require_rank3(*p, "concat_channels");
    if (p->dim(1) != h || p->dim(2) != w) {
      throw ShapeError("concat_channels: spatial mismatch " + shape_str(parts[0]->shape()) +
                       " vs " + shape_str(p->shape()));
    }
    channels += p->dim(0);
    grad = grad || needs(p);
  }
  auto out = make_tensor({channels, h, w});
  std::size_t offset = 0;
  for (auto& p : parts) {
    std::copy(p->data().begin(), p->data().end(), out->data().begin() + offset);
    offset += p->size();
  }
  if (grad) {
    tape.record("concat_channels", parts, {out}, [parts, out] {
      auto og = out->grad();
      std::size_t off = 0;
      for (auto& p : parts) {
        if (needs(p)) {
          auto g = p->grad();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += og[off + i];
        }
        off += p->size();
      }
    });
  }
  return out;
}

TensorPtr upsample2x(Tape& tape, const TensorPtr& x, std::size_t out_h, std::size_t out_w) {
  require_rank3(*x, "upsample2x");
  const std::size_t c = x->dim(0), h = x->dim(1), w = x->dim(2);
  if (out_h > 2 * h || out_w > 2 * w || out_h + 1 < 2 * h || out_w + 1 < 2 * w) {
    throw ShapeError("upsample2x: target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                     " incompatible with " + shape_str(x->shape()));
  }
  auto out = make_tensor({c, out_h, out_w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < out_h; ++i)
      for (std::size_t j = 0; j < out_w; ++j) out->at(ch, i, j) = x->at(ch, i / 2, j / 2);
  if (needs(x)) {
    tape.record("upsample2x", {x}, {out}, [x, out, c, out_h, out_w] {
      auto og = out->grad();
      auto xg = x->grad();
      const std::size_t h = x->dim(1), w = x->dim(2);
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < out_h; ++i)
          for (std::size_t j = 0; j < out_w; ++j)
            xg[(ch * h + i / 2) * w + j / 2] += og[(ch * out_h + i) * out_w + j];
    });
  }
  return out;
}

TensorPtr upsample2x(Tape& tape, const TensorPtr& x) {
  require_rank3(*x, "upsample2x");
  return upsample2x(tape, x, 2 * x->dim(1), 2 * x->dim(2));
}

MaxPoolResult maxpool2x(Tape& tape, const TensorPtr& x) {
  require_rank3(*x, "maxpool2x");
  const std::size_t c = x->dim(0), h = x->dim(1), w = x->dim(2);
  const std::size_t oh = (h + 1) / 2, ow = (w + 1) / 2;
  MaxPoolResult res{make_tensor({c, oh, ow}), std::vector<std::size_t>(c * oh * ow)};
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        // NaN wins so a corrupted input cannot be pooled away.
        for (std::size_t di = 0; di < 2 && !std::isnan(best); ++di)
          for (std::size_t dj = 0; dj < 2 && !std::isnan(best); ++dj) {
            const std::size_t r = 2 * i + di, q = 2 * j + dj;
            if (r >= h || q >= w) continue;
            const std::size_t idx = (ch * h + r) * w + q;
            if ((*x)[idx] > best || std::isnan((*x)[idx])) {
              best = (*x)[idx];
              best_idx = idx;
            }
          }
        const std::size_t o = (ch * oh + i) * ow + j;
        res.out->data()[o] = best;
        res.argmax[o] = best_idx;
      }
  if (needs(x)) {
    tape.record("maxpool2x", {x}, {res.out}, [x, out = res.out, argmax = res.argmax] {
      auto og = out->grad();
      auto xg = x->grad();
      for (std::size_t o = 0; o < og.size(); ++o) xg[argmax[o]] += og[o];
    });
  }
  return res;
}

TensorPtr sum(Tape& tape, const TensorPtr& x) {
  double total = 0.0;
  for (double v : x->data()) total += v;
  auto out = make_tensor({1}, total);
  if (needs(x)) {
    tape.record("sum", {x}, {out}, [x, out] {
      const double g = out->grad()[0];
      for (auto& v : x->grad()) v += g;
    });
  }
  return out;
}

TensorPtr mean(Tape& tape, const TensorPtr& x) {
  if (x->size() == 0) throw ShapeError("mean: empty tensor");
  return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x->size()));
}

namespace {

// Unfolds [C,H,W] into a (C*k*k) x (OH*OW) row-major matrix.
void im2col(const DiffTensor& in, std::size_t k, int stride, int pad, std::size_t oh,
            std::size_t ow, std::vector<double>& cols) {
  const std::size_t c = in.dim(0), h = in.dim(1), w = in.dim(2);
  const std::size_t n = oh * ow;
  cols.assign(c * k * k * n, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        double* row = cols.data() + ((ch * k + ki) * k + kj) * n;
        for (std::size_t i = 0; i < oh; ++i) {
          const long r = static_cast<long>(i) * stride + static_cast<long>(ki) - pad;
          if (r < 0 || r >= static_cast<long>(h)) continue;
          const double* src = in.data().data() + (ch * h + static_cast<std::size_t>(r)) * w;
          for (std::size_t j = 0; j < ow; ++j) {
            const long q = static_cast<long>(j) * stride + static_cast<long>(kj) - pad;
            if (q < 0 || q >= static_cast<long>(w)) continue;
            row[i * ow + j] = src[q];
          }
        }
      }
}

void col2im_add(const std::vector<double>& cols, std::size_t k, int stride, int pad,
                std::size_t oh, std::size_t ow, std::span<double> grad, std::size_t c,
                std::size_t h, std::size_t w) {
  const std::size_t n = oh * ow;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        const double* row = cols.data() + ((ch * k + ki) * k + kj) * n;
        for (std::size_t i = 0; i < oh; ++i) {
          const long r = static_cast<long>(i) * stride + static_cast<long>(ki) - pad;
          if (r < 0 || r >= static_cast<long>(h)) continue;
          double* dst = grad.data() + (ch * h + static_cast<std::size_t>(r)) * w;
          for (std::size_t j = 0; j < ow; ++j) {
            const long q = static_cast<long>(j) * stride + static_cast<long>(kj) - pad;
            if (q < 0 || q >= static_cast<long>(w)) continue;
            dst[q] += row[i * ow + j];
          }
        }
      }
}

}  // namespace

TensorPtr conv2d(Tape& tape, const TensorPtr& input, const TensorPtr& kernel,
                 const TensorPtr& bias, int stride, int padding) {
  require_rank3(*input, "conv2d");
  if (kernel->rank() != 4 || kernel->dim(2) != kernel->dim(3)) {
    throw ShapeError("conv2d: kernel must be [C_out,C_in,k,k], got " + shape_str(kernel->shape()));
  }
  if (kernel->dim(1) != input->dim(0)) {
    throw ShapeError("conv2d: channel mismatch, input " + shape_str(input->shape()) +
                     " vs kernel " + shape_str(kernel->shape()));
  }
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: invalid stride/padding");
  const std::size_t cout = kernel->dim(0), cin = kernel->dim(1), k = kernel->dim(2);
  if (bias && (bias->rank() != 1 || bias->dim(0) != cout)) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias->shape()) + " vs kernel " +
                     shape_str(kernel->shape()));
  }
  const long span_h = static_cast<long>(input->dim(1)) + 2 * padding - static_cast<long>(k);
  const long span_w = static_cast<long>(input->dim(2)) + 2 * padding - static_cast<long>(k);
  if (span_h < 0 || span_w < 0) throw ShapeError("conv2d: kernel larger than padded input");
  const std::size_t oh = static_cast<std::size_t>(span_h / stride + 1);
  const std::size_t ow = static_cast<std::size_t>(span_w / stride + 1);
  const std::size_t n = oh * ow, p = cin * k * k;

  auto cols = std::make_shared<std::vector<double>>();
  im2col(*input, k, stride, padding, oh, ow, *cols);
  auto out = make_tensor({cout, oh, ow});
  ConstMapMat kmat(kernel->data().data(), cout, p);
  ConstMapMat cmat(cols->data(), p, n);
  MapMat omat(out->data().data(), cout, n);
  omat.noalias() = kmat * cmat;
  if (bias) {
    for (std::size_t o = 0; o < cout; ++o) omat.row(o).array() += (*bias)[o];
  }

  if (needs(input) || needs(kernel) || needs(bias)) {
    std::vector<TensorPtr> ins{input, kernel};
    if (bias) ins.push_back(bias);
    tape.record("conv2d", std::move(ins), {out},
                [input, kernel, bias, out, cols, k, stride, padding, oh, ow, cout, cin, n, p] {
                  ConstMapMat g(out->grad().data(), cout, n);
                  if (needs(kernel)) {
                    MapMat kg(kernel->grad().data(), cout, p);
                    ConstMapMat cmat(cols->data(), p, n);
                    kg.noalias() += g * cmat.transpose();
                  }
                  if (needs(bias)) {
                    auto bg = bias->grad();
                    for (std::size_t o = 0; o < cout; ++o) bg[o] += g.row(o).sum();
                  }
                  if (needs(input)) {
                    ConstMapMat kmat(kernel->data().data(), cout, p);
                    std::vector<double> dcols(p * n);
                    MapMat dc(dcols.data(), p, n);
                    dc.noalias() = kmat.transpose() * g;
                    col2im_add(dcols, k, stride, padding, oh, ow, input->grad(), cin,
                               input->dim(1), input->dim(2));
                  }
                });
  }
  return out;
}

}  // namespace pncnn
