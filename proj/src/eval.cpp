#include "pncnn/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "pncnn/error.hpp"
#include "pncnn/io.hpp"

namespace pncnn {

ErrorMetrics compute_metrics(std::span<const double> pred, std::span<const double> gt,
                             std::span<const std::uint8_t> valid) {
  if (pred.size() != gt.size() || valid.size() != gt.size()) {
    throw ShapeError("compute_metrics: length mismatch");
  }
  ErrorMetrics m;
  double se = 0.0, ae = 0.0, ise = 0.0, iae = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!valid[i]) continue;
    if (!(gt[i] > 0.0)) throw DomainError("compute_metrics: non-positive groundtruth on valid pixel");
    const double e = gt[i] - pred[i];
    const double ie = 1000.0 * (1.0 / gt[i] - 1.0 / std::max(pred[i], kInverseDepthClamp));
    se += e * e;
    ae += std::abs(e);
    ise += ie * ie;
    iae += std::abs(ie);
    ++m.count;
  }
  if (m.count == 0) throw Error("compute_metrics: no valid pixels");
  const double n = static_cast<double>(m.count);
  m.rmse = std::sqrt(se / n);
  m.mae = ae / n;
  m.irmse = std::sqrt(ise / n);
  m.imae = iae / n;
  return m;
}

ErrorMetrics compute_metrics(std::span<const double> pred, std::span<const double> gt) {
  std::vector<std::uint8_t> valid(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) valid[i] = gt[i] > 0.0;
  return compute_metrics(pred, gt, valid);
}

namespace {

// RMSE of the retained pixels after removing the first `removed` entries of
// `order`, for every fraction of the grid. Sums run in ascending-error order so
// two retained sets holding the same values produce bit-identical results.
std::vector<double> retained_rmse(std::span<const double> sq_err,
                                  const std::vector<std::size_t>& order,
                                  const std::vector<std::size_t>& ascending, std::size_t bins) {
  const std::size_t n = sq_err.size();
  std::vector<std::uint8_t> kept(n, 1);
  std::vector<double> out(bins);
  std::size_t removed = 0;
  for (std::size_t b = 0; b < bins; ++b) {
    const std::size_t target = (b * n) / bins;
    while (removed < target) kept[order[removed++]] = 0;
    double total = 0.0;
    for (std::size_t i : ascending) {
      if (kept[i]) total += sq_err[i];
    }
    out[b] = std::sqrt(total / static_cast<double>(n - removed));
  }
  return out;
}

std::vector<std::size_t> order_desc(std::span<const double> key) {
  std::vector<std::size_t> idx(key.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return key[a] > key[b]; });
  return idx;
}

}  // namespace

Sparsification sparsification_curve(std::span<const double> sq_err, std::span<const double> unc,
                                    std::size_t bins) {
  if (sq_err.size() != unc.size()) throw ShapeError("sparsification: err/unc length mismatch");
  if (bins < 2) throw Error("sparsification: bins must be >= 2");
  if (sq_err.empty()) throw Error("sparsification: no pixels");
  auto by_unc = order_desc(unc);
  auto by_err = order_desc(sq_err);
  std::vector<std::size_t> ascending(by_err.rbegin(), by_err.rend());

  auto curve = retained_rmse(sq_err, by_unc, ascending, bins);
  auto oracle = retained_rmse(sq_err, by_err, ascending, bins);
  Sparsification sp;
  const double full = curve[0];
  double area = 0.0;
  for (std::size_t b = 0; b < bins; ++b) {
    const double t = static_cast<double>(b) / static_cast<double>(bins);
    const double c = full > 0.0 ? curve[b] / full : 1.0;
    const double o = full > 0.0 ? oracle[b] / full : 1.0;
    sp.curve.emplace_back(t, c);
    sp.oracle.emplace_back(t, o);
    area += c - o;
  }
  sp.ause = area / static_cast<double>(bins);
  return sp;
}

double ause(std::span<const double> pred, std::span<const double> gt, std::span<const double> unc,
            std::size_t bins) {
  return evaluate(pred, gt, unc, bins).sparsification.ause;
}

EvalReport evaluate(std::span<const double> pred, std::span<const double> gt,
                    std::span<const double> unc, std::size_t bins) {
  EvalReport report;
  report.metrics = compute_metrics(pred, gt);
  if (!unc.empty()) {
    if (unc.size() != gt.size()) throw ShapeError("evaluate: uncertainty length mismatch");
    std::vector<double> sq, u;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (!(gt[i] > 0.0)) continue;
      const double e = gt[i] - pred[i];
      sq.push_back(e * e);
      u.push_back(unc[i]);
    }
    report.has_uncertainty = true;
    report.sparsification = sparsification_curve(sq, u, bins);
  }
  return report;
}

std::string format_report(const EvalReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "rmse=" << r.metrics.rmse << '\n'
     << "mae=" << r.metrics.mae << '\n'
     << "irmse=" << r.metrics.irmse << '\n'
     << "imae=" << r.metrics.imae << '\n'
     << "count=" << r.metrics.count << '\n';
  if (r.has_uncertainty) {
    os << "ause=" << r.sparsification.ause << '\n'
       << "bins=" << r.sparsification.curve.size() << '\n';
  }
  return os.str();
}

namespace {

std::string format_curve(const Curve& c) {
  std::ostringstream os;
  os.precision(17);
  os << "fraction,value\n";
  for (const auto& [t, v] : c) os << t << ',' << v << '\n';
  return os.str();
}

}  // namespace

void write_report(const EvalReport& report, const std::filesystem::path& dir,
                  const std::string& prefix) {
  std::filesystem::create_directories(dir);
  atomic_write_text(dir / (prefix + "report.txt"), format_report(report));
  if (report.has_uncertainty) {
    atomic_write_text(dir / (prefix + "sparsification.csv"), format_curve(report.sparsification.curve));
    atomic_write_text(dir / (prefix + "oracle.csv"), format_curve(report.sparsification.oracle));
  }
}

}  // namespace pncnn
