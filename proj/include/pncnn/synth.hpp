#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pncnn/grid.hpp"

namespace pncnn {

/// Piecewise-smooth synthetic depth scene: a slanted ground plane, a few
/// fronto-parallel-ish object planes (step discontinuities) and smooth
/// ellipsoidal bumps.
struct SceneSpec {
  std::uint64_t seed = 0;
  std::size_t rows = 64;
  std::size_t cols = 64;
  double depth_min = 2.0;   // meters
  double depth_max = 60.0;  // meters
  std::size_t max_objects = 2;
  std::size_t max_bumps = 3;
};

enum class OutlierModel { Swap, Offset };

std::string to_string(OutlierModel m);
OutlierModel parse_outlier_model(const std::string& s);

struct DisturbSpec {
  double density = 0.05;      // fraction of pixels kept
  double outlier_frac = 0.1;  // fraction of kept pixels disturbed
  OutlierModel outlier_model = OutlierModel::Swap;
  double noise_sigma = 0.05;  // meters, on every kept pixel
  /// Minimum distance (pixels) of the source of a swapped value.
  double swap_min_dist = 8.0;
  double swap_max_dist = 16.0;
  /// Swap sources are redrawn until the depth changes by at least this much (meters).
  double swap_min_delta = 1.0;
  double offset_min = 1.0;    // meters
  double offset_max = 5.0;

  void validate() const;
};

struct Sample {
  std::string name;
  Grid sparse;    // meters, 0 = missing
  Grid gt;        // meters, dense (> 0)
  Grid outliers;  // 1 where a kept sample was disturbed; empty when unknown
};

using Dataset = std::vector<Sample>;

/// Dense depth for one scene (quantized to the 1/256 m PNG grid).
Grid synth_depth(const SceneSpec& scene, std::uint64_t image_seed);

/// Deterministic given scene.seed. Values are quantized to 1/256 m so a
/// save/load roundtrip is lossless.
Dataset synth_dataset(const SceneSpec& scene, const DisturbSpec& disturb, std::size_t n_images);

/// Layout: <dir>/sparse/<name>.png, <dir>/gt/<name>.png and, when known,
/// <dir>/outliers/<name>.cgrd (u16 mask).
void save_dataset(const std::filesystem::path& dir, const Dataset& data);
/// Loads every sparse/gt pair with matching file names, sorted by name.
/// Works on KITTI-style folders with the same convention.
Dataset load_dataset(const std::filesystem::path& dir);

/// Deterministic held-out split: the last max(1, round(frac * n)) samples.
std::pair<Dataset, Dataset> split_dataset(const Dataset& data, double val_frac = 0.1);

}  // namespace pncnn
