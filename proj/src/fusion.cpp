#include "pncnn/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <tuple>

#include "pncnn/error.hpp"

namespace pncnn {

std::string to_string(FusionScheme s) {
  switch (s) {
    case FusionScheme::Mean: return "mean";
    case FusionScheme::WeightedMean: return "wmean";
    case FusionScheme::MaxConf: return "maxconf";
    case FusionScheme::Mle: return "mle";
  }
  return "?";
}

FusionScheme parse_fusion_scheme(const std::string& s) {
  if (s == "mean") return FusionScheme::Mean;
  if (s == "wmean") return FusionScheme::WeightedMean;
  if (s == "maxconf") return FusionScheme::MaxConf;
  if (s == "mle") return FusionScheme::Mle;
  throw ConfigError("unknown fusion scheme '" + s + "'");
}

namespace {

double validate(const EnsembleSlice& slice) {
  if (slice.preds.empty()) throw Error("fusion: empty ensemble");
  if (slice.preds.size() != slice.confs.size()) throw ShapeError("fusion: preds/confs length mismatch");
  double total = 0.0;
  for (double c : slice.confs) {
    if (!(c >= 0.0) || !std::isfinite(c)) throw DomainError("fusion: confidences must be finite and >= 0");
    total += c;
  }
  if (!(total > 0.0)) throw DomainError("fusion: all confidences are zero");
  return total;
}

// log sum_k c_k exp(-(x - y_k)^2 / 2v2) and its derivative in x.
std::pair<double, double> log_mixture(const EnsembleSlice& s, double x, double v2) {
  double max_e = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < s.preds.size(); ++k) {
    if (s.confs[k] <= 0.0) continue;
    const double d = x - s.preds[k];
    max_e = std::max(max_e, -d * d / (2.0 * v2));
  }
  double z = 0.0, dz = 0.0;
  for (std::size_t k = 0; k < s.preds.size(); ++k) {
    if (s.confs[k] <= 0.0) continue;
    const double d = x - s.preds[k];
    const double w = s.confs[k] * std::exp(-d * d / (2.0 * v2) - max_e);
    z += w;
    dz += -w * d / v2;
  }
  return {std::log(z) + max_e, dz / z};
}

}  // namespace

double fuse_deterministic(const EnsembleSlice& slice, FusionScheme scheme) {
  validate(slice);
  const std::size_t n = slice.preds.size();
  switch (scheme) {
    case FusionScheme::Mean: {
      double s = 0.0;
      for (double p : slice.preds) s += p;
      return s / static_cast<double>(n);
    }
    case FusionScheme::WeightedMean: {
      // Weights relative to the largest, so equal confidences give exactly the mean.
      const double cmax = *std::max_element(slice.confs.begin(), slice.confs.end());
      double s = 0.0, w = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double r = slice.confs[k] / cmax;
        s += r * slice.preds[k];
        w += r;
      }
      return s / w;
    }
    case FusionScheme::MaxConf: {
      std::size_t best = 0;
      for (std::size_t k = 1; k < n; ++k) {
        if (slice.confs[k] > slice.confs[best]) best = k;
      }
      return slice.preds[best];
    }
    case FusionScheme::Mle:
      break;
  }
  throw Error("fuse_deterministic: scheme is not deterministic");
}

double mixture_likelihood(const EnsembleSlice& slice, double x, double v2) {
  const double total = validate(slice);
  double l = 0.0;
  for (std::size_t k = 0; k < slice.preds.size(); ++k) {
    const double d = x - slice.preds[k];
    l += slice.confs[k] * std::exp(-d * d / (2.0 * v2));
  }
  return l / (total * std::sqrt(2.0 * std::numbers::pi * v2));
}

double fuse_mle(const EnsembleSlice& slice, const MleOptions& opts) {
  validate(slice);
  if (!(opts.v2 > 0.0)) throw DomainError("fuse_mle: v2 must be positive");
  constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double best_x = slice.preds[0];
  double best_ll = -std::numeric_limits<double>::infinity();
  for (std::size_t start = 0; start < slice.preds.size(); ++start) {
    double x = slice.preds[start];
    auto [ll, grad] = log_mixture(slice, x, opts.v2);
    double run_x = x, run_ll = ll;
    double m = 0.0, v = 0.0;
    for (std::size_t t = 1; t <= opts.max_steps; ++t) {
      m = beta1 * m + (1.0 - beta1) * grad;
      v = beta2 * v + (1.0 - beta2) * grad * grad;
      const double mhat = m / (1.0 - std::pow(beta1, static_cast<double>(t)));
      const double vhat = v / (1.0 - std::pow(beta2, static_cast<double>(t)));
      const double step = opts.step_lr * mhat / (std::sqrt(vhat) + adam_eps);
      x += step;
      std::tie(ll, grad) = log_mixture(slice, x, opts.v2);
      if (ll > run_ll) {
        run_ll = ll;
        run_x = x;
      }
      if (std::abs(step) < opts.tol) break;
    }
    if (run_ll > best_ll) {
      best_ll = run_ll;
      best_x = run_x;
    }
  }
  return best_x;
}

double fuse(const EnsembleSlice& slice, FusionScheme scheme, const MleOptions& opts) {
  return scheme == FusionScheme::Mle ? fuse_mle(slice, opts) : fuse_deterministic(slice, scheme);
}

Grid fuse_grids(const std::vector<Grid>& preds, const std::vector<Grid>& confs,
                FusionScheme scheme, const MleOptions& opts) {
  if (preds.empty() || preds.size() != confs.size()) {
    throw ShapeError("fuse_grids: need matching, non-empty prediction and confidence lists");
  }
  for (std::size_t k = 0; k < preds.size(); ++k) {
    if (!preds[k].same_shape(preds[0]) || !confs[k].same_shape(preds[0])) {
      throw ShapeError("fuse_grids: member " + std::to_string(k) + " shape mismatch");
    }
  }
  const std::size_t n = preds.size();
  Grid out(preds[0].rows, preds[0].cols);
  std::vector<double> p(n), c(n);
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (std::size_t k = 0; k < n; ++k) {
      p[k] = preds[k].data[i];
      c[k] = confs[k].data[i];
    }
    out.data[i] = fuse({p, c}, scheme, opts);
  }
  return out;
}

}  // namespace pncnn
