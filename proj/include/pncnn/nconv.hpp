#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "pncnn/autodiff.hpp"
#include "pncnn/grid.hpp"

namespace pncnn {

/// Floor added to the softplus-realized applicability.
inline constexpr double kApplicabilityFloor = 1e-4;

/// A signal paired with a same-shape non-negative confidence.
struct ConfidencedGrid {
  Grid values;
  Grid conf;

  ConfidencedGrid() = default;
  ConfidencedGrid(Grid v, Grid c);  // validates shape and non-negativity

  std::size_t rows() const { return values.rows; }
  std::size_t cols() const { return values.cols; }
};

/// Learnable non-negative kernel, realized as softplus(raw) + a_min.
class Applicability {
 public:
  Applicability(std::size_t k, std::vector<double> raw, double a_min = kApplicabilityFloor);

  /// Raw weights chosen so the realized kernel is the given positive kernel.
  static Applicability from_realized(std::size_t k, std::span<const double> realized,
                                     double a_min = kApplicabilityFloor);
  /// Truncated Gaussian, sigma = k/4, normalized to unit sum.
  static Applicability gaussian(std::size_t k, double a_min = kApplicabilityFloor);
  /// Centre tap 1, every other tap at the floor.
  static Applicability delta(std::size_t k, double a_min = kApplicabilityFloor);

  std::size_t size() const { return k_; }
  double a_min() const { return a_min_; }
  const std::vector<double>& raw() const { return raw_; }
  std::vector<double>& raw() { return raw_; }
  std::vector<double> realized() const;
  /// d(realized)/d(raw) per tap (the logistic of raw).
  std::vector<double> realized_derivative() const;

 private:
  std::size_t k_;
  std::vector<double> raw_;
  double a_min_;
};

/// Raw weights realizing a truncated Gaussian (sigma = k/4) with unit sum.
std::vector<double> gaussian_applicability_raw(std::size_t k, double a_min = kApplicabilityFloor);
/// Inverse of softplus(raw) + a_min; requires realized > a_min.
double applicability_raw_from_realized(double realized, double a_min = kApplicabilityFloor);

struct NConvResult {
  ConfidencedGrid out;
  Grid ac_raw;  // <a|c> before normalization
};

struct NConvGrads {
  Grid d_values;
  Grid d_conf;
  std::vector<double> d_applicability;  // w.r.t. realized kernel
  std::vector<double> d_raw;            // chained through softplus
};

/// One normalized-convolution layer with the naive basis:
///   value = <a | y.c> / (<a|c> + eps),  conf = <a|c> / <1|a>.
/// Outside the grid both signal and confidence are zero.
NConvResult nconv_forward(const ConfidencedGrid& g, const Applicability& a, double eps);

/// Forward + cached state for the analytic backward pass.
class NConvLayer {
 public:
  NConvResult forward(const ConfidencedGrid& g, const Applicability& a, double eps);
  /// Throws Error when forward() has not been called.
  NConvGrads backward(const Grid& d_values, const Grid& d_conf, const Grid& d_ac_raw) const;

 private:
  struct Cache {
    ConfidencedGrid input;
    std::vector<double> realized;
    std::vector<double> realized_derivative;
    std::size_t k = 0;
    double eps = 0.0;
    Grid numerator;
    Grid ac_raw;
  };
  std::optional<Cache> cache_;
};

/// 2x2 pooling that keeps, per cell, the entry with the largest confidence
/// (first in row-major order on ties). Odd extents are padded with zero confidence.
ConfidencedGrid conf_pool(const ConfidencedGrid& g);
/// Nearest-neighbour unpooling to `rows` x `cols` (each at most twice the input extent).
ConfidencedGrid conf_unpool(const ConfidencedGrid& g, std::size_t rows, std::size_t cols);

// ---------------------------------------------------------------------------
// Tape ops used by the network stack. Tensors are [1,H,W]; the applicability
// is the realized [k,k] kernel (reparameterize with softplus + add_scalar).

struct NConvTensors {
  TensorPtr values;
  TensorPtr conf;
  TensorPtr ac_raw;
};

NConvTensors nconv2d(Tape& tape, const TensorPtr& values, const TensorPtr& conf,
                     const TensorPtr& applicability, double eps);

struct PooledPair {
  TensorPtr values;
  TensorPtr conf;
};

PooledPair conf_pool2x(Tape& tape, const TensorPtr& values, const TensorPtr& conf);
PooledPair conf_unpool2x(Tape& tape, const TensorPtr& values, const TensorPtr& conf,
                         std::size_t rows, std::size_t cols);

// ---------------------------------------------------------------------------
// General basis projection (weighted / generalized least squares).

/// n x m matrix whose columns are basis functions over an n-point neighbourhood.
struct BasisMatrix {
  std::size_t n = 0;
  std::size_t m = 0;
  std::vector<double> data;  // row-major n x m

  BasisMatrix(std::size_t n_, std::size_t m_, std::vector<double> values);
  static BasisMatrix naive(std::size_t n);
  double operator()(std::size_t i, std::size_t j) const { return data[i * m + j]; }
};

struct BasisSolution {
  std::vector<double> coords;         // r-hat, length m
  std::vector<double> reconstruction; // y-hat = B r-hat, length n
};

/// r-hat = (B* Wa Wc B)^-1 B* Wa Wc y. Throws RankError if the normal matrix is
/// singular or its condition number exceeds 1e12.
BasisSolution nc_basis_solve(std::span<const double> y, std::span<const double> c,
                             std::span<const double> a, const BasisMatrix& basis);

/// sigma2 * B (B* Wa Wc B)^-1 B*, row-major n x n.
std::vector<double> nc_basis_cov(const BasisMatrix& basis, std::span<const double> a,
                                 std::span<const double> c, double sigma2);

}  // namespace pncnn
