#pragma once

// Independent reference implementations used by the unit and acceptance tests.
// They share no code with the library beyond plain data types.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "pncnn/grid.hpp"
#include "pncnn/rng.hpp"
#include "pncnn/tensor.hpp"

namespace oracle {

using pncnn::Grid;

/// Direct-loop 2-D cross-correlation of a [Cin,H,W] input with [Cout,Cin,k,k].
inline std::vector<double> conv2d(const pncnn::DiffTensor& in, const pncnn::DiffTensor& kernel,
                                  const pncnn::DiffTensor* bias, std::size_t stride,
                                  std::size_t pad, std::size_t& out_h, std::size_t& out_w) {
  const std::size_t cin = in.dim(0), h = in.dim(1), w = in.dim(2);
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
  out_h = (h + 2 * pad - k) / stride + 1;
  out_w = (w + 2 * pad - k) / stride + 1;
  std::vector<double> out(cout * out_h * out_w, 0.0);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t x = 0; x < out_w; ++x) {
        double acc = bias ? (*bias)[o] : 0.0;
        for (std::size_t c = 0; c < cin; ++c)
          for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) {
              const long r = static_cast<long>(y * stride + i) - static_cast<long>(pad);
              const long q = static_cast<long>(x * stride + j) - static_cast<long>(pad);
              if (r < 0 || q < 0 || r >= static_cast<long>(h) || q >= static_cast<long>(w)) continue;
              acc += kernel[((o * cin + c) * k + i) * k + j] * in.at(c, r, q);
            }
        out[(o * out_h + y) * out_w + x] = acc;
      }
  return out;
}

struct NConvOut {
  Grid values, conf, ac_raw;
};

/// Normalized convolution with the constant basis, straight from its definition.
inline NConvOut nconv(const Grid& y, const Grid& c, const std::vector<double>& a, std::size_t k,
                      double eps) {
  const long half = static_cast<long>(k / 2);
  double asum = 0.0;
  for (double v : a) asum += v;
  NConvOut out{Grid(y.rows, y.cols), Grid(y.rows, y.cols), Grid(y.rows, y.cols)};
  for (long r = 0; r < static_cast<long>(y.rows); ++r)
    for (long q = 0; q < static_cast<long>(y.cols); ++q) {
      double num = 0.0, den = 0.0;
      for (long i = -half; i <= half; ++i)
        for (long j = -half; j <= half; ++j) {
          const long rr = r + i, qq = q + j;
          if (rr < 0 || qq < 0 || rr >= static_cast<long>(y.rows) || qq >= static_cast<long>(y.cols)) continue;
          const double w = a[static_cast<std::size_t>((i + half) * static_cast<long>(k) + (j + half))];
          num += w * c(rr, qq) * y(rr, qq);
          den += w * c(rr, qq);
        }
      out.values(r, q) = num / (den + eps);
      out.conf(r, q) = den / asum;
      out.ac_raw(r, q) = den;
    }
  return out;
}

/// Weighted normal equations solved with a pivoted QR.
inline Eigen::VectorXd gls_solve(const Eigen::MatrixXd& B, const Eigen::VectorXd& w,
                                 const Eigen::VectorXd& y) {
  const Eigen::MatrixXd N = B.transpose() * w.asDiagonal() * B;
  const Eigen::VectorXd rhs = B.transpose() * w.asDiagonal() * y;
  return N.colPivHouseholderQr().solve(rhs);
}

/// sigma2 * B (B^T W B)^-1 B^T via an explicit inverse.
inline Eigen::MatrixXd gls_cov(const Eigen::MatrixXd& B, const Eigen::VectorXd& w, double sigma2) {
  const Eigen::MatrixXd N = B.transpose() * w.asDiagonal() * B;
  return sigma2 * B * N.inverse() * B.transpose();
}

/// Confidence-weighted Gaussian mixture log-likelihood (up to a constant).
inline double mixture_log_likelihood(std::span<const double> p, std::span<const double> c,
                                     double x, double v2) {
  double l = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) l += c[k] * std::exp(-(x - p[k]) * (x - p[k]) / (2 * v2));
  return std::log(l);
}

/// 2000-point grid over [min - 3 sqrt(v2), max + 3 sqrt(v2)] followed by a
/// 2000-point refinement around the best coarse cell.
inline double mixture_mode_grid(std::span<const double> p, std::span<const double> c, double v2) {
  const double lo = *std::min_element(p.begin(), p.end()) - 3 * std::sqrt(v2);
  const double hi = *std::max_element(p.begin(), p.end()) + 3 * std::sqrt(v2);
  auto search = [&](double a, double b) {
    double best_x = a, best = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < 2000; ++i) {
      const double x = a + (b - a) * i / 1999.0;
      const double l = mixture_log_likelihood(p, c, x, v2);
      if (l > best) {
        best = l;
        best_x = x;
      }
    }
    return best_x;
  };
  const double coarse = search(lo, hi);
  const double step = (hi - lo) / 1999.0;
  return search(coarse - step, coarse + step);
}

inline Grid random_grid(pncnn::SplitRng& rng, std::size_t rows, std::size_t cols, double lo,
                        double hi) {
  Grid g(rows, cols);
  for (auto& v : g.data) v = rng.uniform(lo, hi);
  return g;
}

}  // namespace oracle
