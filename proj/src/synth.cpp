#include "pncnn/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "pncnn/error.hpp"
#include "pncnn/io.hpp"
#include "pncnn/rng.hpp"

namespace pncnn {

std::string to_string(OutlierModel m) { return m == OutlierModel::Swap ? "swap" : "offset"; }

OutlierModel parse_outlier_model(const std::string& s) {
  if (s == "swap") return OutlierModel::Swap;
  if (s == "offset") return OutlierModel::Offset;
  throw ConfigError("unknown outlier model '" + s + "'");
}

void DisturbSpec::validate() const {
  if (!(density > 0.0 && density <= 1.0)) throw ConfigError("density must lie in (0, 1]");
  if (!(outlier_frac >= 0.0 && outlier_frac <= 1.0)) throw ConfigError("outlier_frac must lie in [0, 1]");
  if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
  if (!(swap_min_dist >= 0.0 && swap_max_dist >= swap_min_dist)) throw ConfigError("bad swap distances");
  if (!(swap_min_delta >= 0.0)) throw ConfigError("swap_min_delta must be non-negative");
  if (!(offset_min >= 0.0 && offset_max >= offset_min)) throw ConfigError("bad offset range");
}

namespace {

double quantize(double meters) { return std::round(meters * 256.0) / 256.0; }

}  // namespace

Grid synth_depth(const SceneSpec& scene, std::uint64_t image_seed) {
  if (scene.rows == 0 || scene.cols == 0) throw ConfigError("scene size must be positive");
  if (!(scene.depth_min > 0.0 && scene.depth_max > scene.depth_min) || scene.depth_max * 256.0 > 65535.0) {
    throw ConfigError("scene depth range must satisfy 0 < min < max <= 255 m");
  }
  SplitRng rng(image_seed);
  const double h = static_cast<double>(scene.rows), w = static_cast<double>(scene.cols);
  const double span = scene.depth_max - scene.depth_min;

  // Ground plane: far at the top row, near at the bottom, with a lateral tilt.
  const double far = scene.depth_min + span * rng.uniform(0.55, 0.9);
  const double near = scene.depth_min + span * rng.uniform(0.02, 0.12);
  const double tilt = span * rng.uniform(-0.15, 0.15);
  Grid d(scene.rows, scene.cols);
  for (std::size_t r = 0; r < scene.rows; ++r)
    for (std::size_t c = 0; c < scene.cols; ++c) {
      const double v = static_cast<double>(r) / (h - 1.0 + 1e-12);
      const double u = static_cast<double>(c) / (w - 1.0 + 1e-12);
      d(r, c) = far + (near - far) * v + tilt * (u - 0.5);
    }

  // Objects: rectangles or ellipses standing in front of the ground plane.
  const std::size_t n_obj = scene.max_objects ? rng.below(scene.max_objects + 1) : 0;
  for (std::size_t k = 0; k < n_obj; ++k) {
    const double cy = rng.uniform(0.15, 0.85) * h, cx = rng.uniform(0.1, 0.9) * w;
    const double ry = rng.uniform(0.08, 0.25) * h, rx = rng.uniform(0.08, 0.25) * w;
    const bool ellipse = rng.uniform() < 0.5;
    const double gy = rng.uniform(-0.05, 0.05) * span / h;
    const double gx = rng.uniform(-0.1, 0.1) * span / w;
    for (std::size_t r = 0; r < scene.rows; ++r)
      for (std::size_t c = 0; c < scene.cols; ++c) {
        const double dy = (static_cast<double>(r) - cy) / ry, dx = (static_cast<double>(c) - cx) / rx;
        const bool inside = ellipse ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
        if (!inside) continue;
        // Objects sit at a fraction of the ground depth behind them.
        const double base = d(std::min<std::size_t>(scene.rows - 1, static_cast<std::size_t>(cy + ry)),
                              static_cast<std::size_t>(std::clamp(cx, 0.0, w - 1.0)));
        const double depth = base * 0.6 + gy * (static_cast<double>(r) - cy) + gx * (static_cast<double>(c) - cx);
        d(r, c) = std::min(d(r, c), depth);
      }
  }

  // Smooth bumps.
  const std::size_t n_bump = scene.max_bumps ? rng.below(scene.max_bumps + 1) : 0;
  for (std::size_t k = 0; k < n_bump; ++k) {
    const double cy = rng.uniform(0.0, h), cx = rng.uniform(0.0, w);
    const double sy = rng.uniform(0.05, 0.2) * h, sx = rng.uniform(0.05, 0.2) * w;
    const double amp = rng.uniform(-0.05, 0.05) * span;
    for (std::size_t r = 0; r < scene.rows; ++r)
      for (std::size_t c = 0; c < scene.cols; ++c) {
        const double dy = (static_cast<double>(r) - cy) / sy, dx = (static_cast<double>(c) - cx) / sx;
        const double q = 1.0 - dx * dx - dy * dy;
        if (q > 0.0) d(r, c) += amp * std::sqrt(q);
      }
  }
  for (auto& v : d.data) v = quantize(std::clamp(v, scene.depth_min, scene.depth_max));
  return d;
}

namespace {

Sample disturb_one(const Grid& gt, const DisturbSpec& spec, SplitRng rng, const std::string& name) {
  const std::size_t rows = gt.rows, cols = gt.cols;
  for (int attempt = 0; attempt < 10; ++attempt) {
    SplitRng local = rng.split(static_cast<std::uint64_t>(attempt));
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (local.uniform() < spec.density) kept.push_back(i);
    }
    if (kept.empty()) continue;

    Sample s{name, Grid(rows, cols), gt, Grid(rows, cols)};
    for (std::size_t i : kept) s.sparse.data[i] = gt.data[i];

    // Choose exactly round(frac * kept) disturbed samples (partial shuffle).
    const auto n_out = static_cast<std::size_t>(std::llround(spec.outlier_frac * static_cast<double>(kept.size())));
    std::vector<std::size_t> order = kept;
    for (std::size_t k = 0; k < n_out; ++k) {
      std::swap(order[k], order[k + local.below(order.size() - k)]);
    }
    for (std::size_t k = 0; k < n_out; ++k) {
      const std::size_t i = order[k];
      const double r = static_cast<double>(i / cols), c = static_cast<double>(i % cols);
      double value = gt.data[i];
      if (spec.outlier_model == OutlierModel::Swap) {
        std::size_t src = i;
        double best_delta = -1.0;
        for (int tries = 0; tries < 64; ++tries) {
          const double ang = local.uniform(0.0, 2.0 * std::numbers::pi);
          const double rad = local.uniform(spec.swap_min_dist, spec.swap_max_dist);
          const double sr = std::round(r + rad * std::sin(ang)), sc = std::round(c + rad * std::cos(ang));
          if (sr < 0 || sc < 0 || sr >= static_cast<double>(rows) || sc >= static_cast<double>(cols)) continue;
          if (std::hypot(sr - r, sc - c) < spec.swap_min_dist) continue;
          const std::size_t cand = static_cast<std::size_t>(sr) * cols + static_cast<std::size_t>(sc);
          const double delta = std::abs(gt.data[cand] - gt.data[i]);
          if (delta > best_delta) {
            best_delta = delta;
            src = cand;
          }
          if (delta >= spec.swap_min_delta) break;
        }
        if (src == i) {
          // Tiny grid: fall back to the farthest corner.
          const std::size_t rr = r < static_cast<double>(rows) / 2 ? rows - 1 : 0;
          const std::size_t cc = c < static_cast<double>(cols) / 2 ? cols - 1 : 0;
          src = rr * cols + cc;
        }
        value = gt.data[src];
      } else {
        const double mag = local.uniform(spec.offset_min, spec.offset_max);
        const double sign = local.uniform() < 0.5 ? -1.0 : 1.0;
        value = gt.data[i] + sign * mag;
        if (value < 0.5) value = gt.data[i] + mag;
      }
      s.sparse.data[i] = value;
      s.outliers.data[i] = 1.0;
    }
    for (std::size_t i : kept) {
      const double noisy = s.sparse.data[i] + (spec.noise_sigma > 0 ? local.normal(0.0, spec.noise_sigma) : 0.0);
      // Stay strictly positive and on the 1/256 m grid so 0 keeps meaning "missing".
      s.sparse.data[i] = std::max(quantize(noisy), 1.0 / 256.0);
    }
    return s;
  }
  throw Error("synth: density too low, no samples after 10 attempts for '" + name + "'");
}

}  // namespace

Dataset synth_dataset(const SceneSpec& scene, const DisturbSpec& disturb, std::size_t n_images) {
  disturb.validate();
  SplitRng root(scene.seed);
  Dataset data;
  data.reserve(n_images);
  for (std::size_t k = 0; k < n_images; ++k) {
    SplitRng img = root.split(k);
    char name[32];
    std::snprintf(name, sizeof name, "%06zu", k);
    Grid gt = synth_depth(scene, img.split(0).next_u64());
    data.push_back(disturb_one(gt, disturb, img.split(1), name));
  }
  return data;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& data) {
  for (const auto& s : data) {
    write_depth_png(dir / "sparse" / (s.name + ".png"), s.sparse);
    write_depth_png(dir / "gt" / (s.name + ".png"), s.gt);
    if (s.outliers.size()) write_grid_file(dir / "outliers" / (s.name + ".cgrd"), s.outliers, GridDType::U16);
  }
}

Dataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir / "sparse") || !fs::is_directory(dir / "gt")) {
    throw Error("dataset '" + dir.string() + "' lacks sparse/ and gt/ folders");
  }
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir / "sparse")) {
    if (e.path().extension() == ".png") names.push_back(e.path().stem().string());
  }
  std::sort(names.begin(), names.end());
  Dataset data;
  for (const auto& n : names) {
    const auto gt_path = dir / "gt" / (n + ".png");
    if (!fs::exists(gt_path)) continue;
    Sample s{n, read_depth_png(dir / "sparse" / (n + ".png")), read_depth_png(gt_path), Grid()};
    if (!s.sparse.same_shape(s.gt)) throw FormatError("dataset sample '" + n + "': sparse/gt shape mismatch");
    const auto mask = dir / "outliers" / (n + ".cgrd");
    if (fs::exists(mask)) s.outliers = read_grid_file(mask);
    data.push_back(std::move(s));
  }
  if (data.empty()) throw Error("dataset '" + dir.string() + "' contains no sparse/gt pairs");
  return data;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& data, double val_frac) {
  if (data.size() < 2) throw Error("split_dataset: need at least 2 samples");
  auto n_val = static_cast<std::size_t>(std::llround(val_frac * static_cast<double>(data.size())));
  n_val = std::clamp<std::size_t>(n_val, 1, data.size() - 1);
  Dataset train(data.begin(), data.end() - static_cast<long>(n_val));
  Dataset val(data.end() - static_cast<long>(n_val), data.end());
  return {std::move(train), std::move(val)};
}

}  // namespace pncnn
