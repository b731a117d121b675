#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "pncnn/grid.hpp"

namespace pncnn {

enum class FusionScheme { Mean, WeightedMean, MaxConf, Mle };

std::string to_string(FusionScheme s);
FusionScheme parse_fusion_scheme(const std::string& s);

/// Per-pixel ensemble predictions and their (non-negative) confidences.
struct EnsembleSlice {
  std::span<const double> preds;
  std::span<const double> confs;
};

struct MleOptions {
  double v2 = 0.1;            // shared component variance
  std::size_t max_steps = 500;
  double step_lr = 0.01;
  double tol = 1e-7;          // stop when |dx| falls below
};

/// mean, confidence-weighted mean, or most-confident member (lowest index on ties).
double fuse_deterministic(const EnsembleSlice& slice, FusionScheme scheme);

/// Mixture-likelihood value at x (weights = normalized confidences).
double mixture_likelihood(const EnsembleSlice& slice, double x, double v2);

/// Argmax of the confidence-weighted Gaussian mixture centred on the members'
/// predictions, found by Adam ascent on the log-likelihood restarted from each
/// prediction; the best restart wins (lowest index on ties).
double fuse_mle(const EnsembleSlice& slice, const MleOptions& opts = {});

double fuse(const EnsembleSlice& slice, FusionScheme scheme, const MleOptions& opts = {});

/// Pixelwise fusion of N same-shape prediction/confidence grids.
Grid fuse_grids(const std::vector<Grid>& preds, const std::vector<Grid>& confs,
                FusionScheme scheme, const MleOptions& opts = {});

}  // namespace pncnn
