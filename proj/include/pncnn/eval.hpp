#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

namespace pncnn {

/// Default number of removal steps in a sparsification curve (1% each).
inline constexpr std::size_t kDefaultSparsificationBins = 100;
/// Predictions are clamped to this depth (meters) before inversion.
inline constexpr double kInverseDepthClamp = 1e-3;

struct ErrorMetrics {
  double rmse = 0.0;   // signal units
  double mae = 0.0;    // signal units
  double irmse = 0.0;  // 1/km for depth in meters
  double imae = 0.0;   // 1/km
  std::size_t count = 0;
};

/// Metrics over pixels where `valid` is non-zero (gt must be positive there).
ErrorMetrics compute_metrics(std::span<const double> pred, std::span<const double> gt,
                             std::span<const std::uint8_t> valid);
/// Same, with valid = gt > 0.
ErrorMetrics compute_metrics(std::span<const double> pred, std::span<const double> gt);

using Curve = std::vector<std::pair<double, double>>;  // (fraction removed, normalized RMSE)

struct Sparsification {
  Curve curve;
  Curve oracle;
  double ause = 0.0;
};

/// Removes pixels in order of decreasing `unc` (stable on ties) and records the
/// RMSE of the retained pixels at fractions 0, 1/bins, ..., (bins-1)/bins,
/// normalized by the full-set RMSE. The oracle removes by decreasing error.
/// `sq_err` holds per-pixel squared errors.
Sparsification sparsification_curve(std::span<const double> sq_err, std::span<const double> unc,
                                     std::size_t bins = kDefaultSparsificationBins);

/// AUSE of `unc` for the given prediction over pixels with gt > 0.
double ause(std::span<const double> pred, std::span<const double> gt, std::span<const double> unc,
            std::size_t bins = kDefaultSparsificationBins);

struct EvalReport {
  ErrorMetrics metrics;
  bool has_uncertainty = false;
  Sparsification sparsification;
};

/// Full report over pixels with gt > 0. `unc` may be empty.
EvalReport evaluate(std::span<const double> pred, std::span<const double> gt,
                    std::span<const double> unc, std::size_t bins = kDefaultSparsificationBins);

/// Writes <dir>/<prefix>report.txt (key=value) and, when uncertainty is present,
/// <dir>/<prefix>sparsification.csv and <dir>/<prefix>oracle.csv.
void write_report(const EvalReport& report, const std::filesystem::path& dir,
                  const std::string& prefix = "");
std::string format_report(const EvalReport& report);

}  // namespace pncnn
