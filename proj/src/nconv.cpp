#include "pncnn/nconv.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "pncnn/error.hpp"

namespace pncnn {

namespace {

double softplus_value(double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); }
double logistic(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

void require_odd(std::size_t k) {
  if (k == 0 || k % 2 == 0) throw ShapeError("applicability size must be odd, got " + std::to_string(k));
}

void require_positive_kernel(std::span<const double> a) {
  for (double v : a) {
    if (!(v > 0.0)) {
      throw DomainError("realized applicability must be positive, got " + std::to_string(v));
    }
  }
}

// Raw normalized-convolution kernels shared by the Grid API and the tape op.
struct NConvKernel {
  std::size_t rows, cols, k;
  std::span<const double> y, c, a;
  double eps;

  double sum_a() const { return std::accumulate(a.begin(), a.end(), 0.0); }

  void forward(std::span<double> num, std::span<double> den, std::span<double> out_v,
               std::span<double> out_c) const {
    const long r = static_cast<long>(k / 2);
    const double norm = sum_a();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) {
        double nu = 0.0, de = 0.0;
        for (std::size_t ki = 0; ki < k; ++ki) {
          const long q = static_cast<long>(i) + static_cast<long>(ki) - r;
          if (q < 0 || q >= static_cast<long>(rows)) continue;
          for (std::size_t kj = 0; kj < k; ++kj) {
            const long p = static_cast<long>(j) + static_cast<long>(kj) - r;
            if (p < 0 || p >= static_cast<long>(cols)) continue;
            const std::size_t idx = static_cast<std::size_t>(q) * cols + static_cast<std::size_t>(p);
            const double w = a[ki * k + kj] * c[idx];
            nu += w * y[idx];
            de += w;
          }
        }
        const std::size_t o = i * cols + j;
        num[o] = nu;
        den[o] = de;
        out_v[o] = de + eps > 0.0 ? nu / (de + eps) : 0.0;
        out_c[o] = de / norm;
      }
  }

  // Accumulates into dy, dc, da (any may be empty to skip).
  void backward(std::span<const double> num, std::span<const double> den,
                std::span<const double> gv, std::span<const double> gc,
                std::span<const double> gac, std::span<double> dy, std::span<double> dc,
                std::span<double> da) const {
    const long r = static_cast<long>(k / 2);
    const double norm = sum_a();
    double d_norm = 0.0;
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) {
        const std::size_t o = i * cols + j;
        const double gvo = gv.empty() ? 0.0 : gv[o];
        const double gco = gc.empty() ? 0.0 : gc[o];
        const double gaco = gac.empty() ? 0.0 : gac[o];
        const double d = den[o] + eps;
        // With eps = 0 and nothing in reach the value is pinned to 0.
        const double d_num = d > 0.0 ? gvo / d : 0.0;
        const double d_den = (d > 0.0 ? -gvo * num[o] / (d * d) : 0.0) + gco / norm + gaco;
        d_norm -= gco * den[o] / (norm * norm);
        if (d_num == 0.0 && d_den == 0.0) continue;
        for (std::size_t ki = 0; ki < k; ++ki) {
          const long q = static_cast<long>(i) + static_cast<long>(ki) - r;
          if (q < 0 || q >= static_cast<long>(rows)) continue;
          for (std::size_t kj = 0; kj < k; ++kj) {
            const long p = static_cast<long>(j) + static_cast<long>(kj) - r;
            if (p < 0 || p >= static_cast<long>(cols)) continue;
            const std::size_t idx = static_cast<std::size_t>(q) * cols + static_cast<std::size_t>(p);
            const std::size_t t = ki * k + kj;
            if (!dy.empty()) dy[idx] += d_num * a[t] * c[idx];
            if (!dc.empty()) dc[idx] += a[t] * (d_num * y[idx] + d_den);
            if (!da.empty()) da[t] += c[idx] * (d_num * y[idx] + d_den);
          }
        }
      }
    if (!da.empty()) {
      for (auto& v : da) v += d_norm;
    }
  }
};

// Index of the max-confidence entry of each 2x2 cell (ceil mode).
std::vector<std::size_t> pool_argmax(std::span<const double> conf, std::size_t rows,
                                     std::size_t cols) {
  const std::size_t oh = (rows + 1) / 2, ow = (cols + 1) / 2;
  std::vector<std::size_t> idx(oh * ow);
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t j = 0; j < ow; ++j) {
      std::size_t best = (2 * i) * cols + 2 * j;
      for (std::size_t di = 0; di < 2; ++di)
        for (std::size_t dj = 0; dj < 2; ++dj) {
          const std::size_t r = 2 * i + di, q = 2 * j + dj;
          if (r >= rows || q >= cols) continue;
          const std::size_t cand = r * cols + q;
          if (conf[cand] > conf[best]) best = cand;
        }
      idx[i * ow + j] = best;
    }
  return idx;
}

void require_unpool_target(std::size_t rows, std::size_t cols, std::size_t tr, std::size_t tc) {
  if (tr > 2 * rows || tc > 2 * cols || tr + 1 < 2 * rows || tc + 1 < 2 * cols) {
    throw ShapeError("conf_unpool: target " + std::to_string(tr) + "x" + std::to_string(tc) +
                     " incompatible with " + std::to_string(rows) + "x" + std::to_string(cols));
  }
}

}  // namespace

ConfidencedGrid::ConfidencedGrid(Grid v, Grid c) : values(std::move(v)), conf(std::move(c)) {
  if (!values.same_shape(conf)) {
    throw ShapeError("ConfidencedGrid: values " + std::to_string(values.rows) + "x" +
                     std::to_string(values.cols) + " vs conf " + std::to_string(conf.rows) + "x" +
                     std::to_string(conf.cols));
  }
  for (double x : conf.data) {
    if (!(x >= 0.0)) throw DomainError("ConfidencedGrid: negative or NaN confidence");
  }
}

Applicability::Applicability(std::size_t k, std::vector<double> raw, double a_min)
    : k_(k), raw_(std::move(raw)), a_min_(a_min) {
  require_odd(k);
  if (raw_.size() != k * k) throw ShapeError("Applicability: raw size does not match k*k");
  if (!(a_min_ >= 0.0)) throw DomainError("Applicability: negative floor");
}

double applicability_raw_from_realized(double realized, double a_min) {
  const double t = realized - a_min;
  if (!(t > 0.0)) throw DomainError("applicability target must exceed the floor");
  // softplus^-1(t) = log(expm1(t)), rewritten for large t.
  return t > 30.0 ? t + std::log1p(-std::exp(-t)) : std::log(std::expm1(t));
}

std::vector<double> gaussian_applicability_raw(std::size_t k, double a_min) {
  require_odd(k);
  const double sigma = static_cast<double>(k) / 4.0;
  const double r = static_cast<double>(k / 2);
  std::vector<double> g(k * k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const double di = static_cast<double>(i) - r, dj = static_cast<double>(j) - r;
      g[i * k + j] = std::exp(-(di * di + dj * dj) / (2.0 * sigma * sigma));
    }
  const double total = std::accumulate(g.begin(), g.end(), 0.0);
  std::vector<double> raw(k * k);
  for (std::size_t t = 0; t < g.size(); ++t) {
    raw[t] = applicability_raw_from_realized(std::max(g[t] / total, 2.0 * a_min), a_min);
  }
  return raw;
}

Applicability Applicability::from_realized(std::size_t k, std::span<const double> realized,
                                           double a_min) {
  std::vector<double> raw(realized.size());
  for (std::size_t t = 0; t < raw.size(); ++t) {
    raw[t] = applicability_raw_from_realized(realized[t], a_min);
  }
  return Applicability(k, std::move(raw), a_min);
}

Applicability Applicability::gaussian(std::size_t k, double a_min) {
  return Applicability(k, gaussian_applicability_raw(k, a_min), a_min);
}

Applicability Applicability::delta(std::size_t k, double a_min) {
  require_odd(k);
  // Off-centre taps sit far below the floor; softplus(-40) is ~4e-18.
  std::vector<double> raw(k * k, -40.0);
  raw[(k / 2) * k + k / 2] = applicability_raw_from_realized(1.0, a_min);
  return Applicability(k, std::move(raw), a_min);
}

std::vector<double> Applicability::realized() const {
  std::vector<double> a(raw_.size());
  for (std::size_t t = 0; t < a.size(); ++t) a[t] = softplus_value(raw_[t]) + a_min_;
  return a;
}

std::vector<double> Applicability::realized_derivative() const {
  std::vector<double> d(raw_.size());
  for (std::size_t t = 0; t < d.size(); ++t) d[t] = logistic(raw_[t]);
  return d;
}

NConvResult nconv_forward(const ConfidencedGrid& g, const Applicability& a, double eps) {
  NConvLayer layer;
  return layer.forward(g, a, eps);
}

NConvResult NConvLayer::forward(const ConfidencedGrid& g, const Applicability& a, double eps) {
  if (!(eps >= 0.0)) throw DomainError("nconv: eps must be non-negative");
  Cache cache{g, a.realized(), a.realized_derivative(), a.size(), eps, Grid(g.rows(), g.cols()),
              Grid(g.rows(), g.cols())};
  require_positive_kernel(cache.realized);
  NConvKernel kern{g.rows(), g.cols(), a.size(), g.values.data, g.conf.data, cache.realized, eps};
  Grid out_v(g.rows(), g.cols()), out_c(g.rows(), g.cols());
  kern.forward(cache.numerator.data, cache.ac_raw.data, out_v.data, out_c.data);
  NConvResult result{ConfidencedGrid(std::move(out_v), std::move(out_c)), cache.ac_raw};
  cache_ = std::move(cache);
  return result;
}

NConvGrads NConvLayer::backward(const Grid& d_values, const Grid& d_conf,
                                const Grid& d_ac_raw) const {
  if (!cache_) throw Error("nconv backward called without a cached forward pass");
  const auto& c = *cache_;
  const std::size_t rows = c.input.rows(), cols = c.input.cols();
  for (const Grid* g : {&d_values, &d_conf, &d_ac_raw}) {
    if (g->size() != 0 && (g->rows != rows || g->cols != cols)) {
      throw ShapeError("nconv backward: upstream gradient shape mismatch");
    }
  }
  NConvKernel kern{rows, cols, c.k, c.input.values.data, c.input.conf.data, c.realized, c.eps};
  NConvGrads grads{Grid(rows, cols), Grid(rows, cols), std::vector<double>(c.k * c.k, 0.0), {}};
  kern.backward(c.numerator.data, c.ac_raw.data, d_values.data, d_conf.data, d_ac_raw.data,
                grads.d_values.data, grads.d_conf.data, grads.d_applicability);
  grads.d_raw.resize(grads.d_applicability.size());
  for (std::size_t t = 0; t < grads.d_raw.size(); ++t) {
    grads.d_raw[t] = grads.d_applicability[t] * c.realized_derivative[t];
  }
  return grads;
}

ConfidencedGrid conf_pool(const ConfidencedGrid& g) {
  const std::size_t oh = (g.rows() + 1) / 2, ow = (g.cols() + 1) / 2;
  const auto idx = pool_argmax(g.conf.data, g.rows(), g.cols());
  Grid v(oh, ow), c(oh, ow);
  for (std::size_t o = 0; o < idx.size(); ++o) {
    v.data[o] = g.values.data[idx[o]];
    c.data[o] = g.conf.data[idx[o]];
  }
  return ConfidencedGrid(std::move(v), std::move(c));
}

ConfidencedGrid conf_unpool(const ConfidencedGrid& g, std::size_t rows, std::size_t cols) {
  require_unpool_target(g.rows(), g.cols(), rows, cols);
  Grid v(rows, cols), c(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      v(i, j) = g.values(i / 2, j / 2);
      c(i, j) = g.conf(i / 2, j / 2);
    }
  return ConfidencedGrid(std::move(v), std::move(c));
}

NConvTensors nconv2d(Tape& tape, const TensorPtr& values, const TensorPtr& conf,
                     const TensorPtr& applicability, double eps) {
  require_same_shape(*values, *conf, "nconv2d");
  if (values->rank() != 3 || values->dim(0) != 1) {
    throw ShapeError("nconv2d: expected [1,H,W], got " + shape_str(values->shape()));
  }
  if (applicability->rank() != 2 || applicability->dim(0) != applicability->dim(1)) {
    throw ShapeError("nconv2d: applicability must be [k,k], got " +
                     shape_str(applicability->shape()));
  }
  require_odd(applicability->dim(0));
  require_positive_kernel(applicability->data());
  if (!(eps >= 0.0)) throw DomainError("nconv: eps must be non-negative");
  const std::size_t rows = values->dim(1), cols = values->dim(2), k = applicability->dim(0);
  NConvTensors out{make_tensor(values->shape()), make_tensor(values->shape()),
                   make_tensor(values->shape())};
  auto numerator = std::make_shared<std::vector<double>>(rows * cols);
  NConvKernel kern{rows, cols, k, values->data(), conf->data(), applicability->data(), eps};
  kern.forward(*numerator, out.ac_raw->data(), out.values->data(), out.conf->data());

  const bool grad = values->requires_grad() || conf->requires_grad() ||
                    applicability->requires_grad();
  if (grad) {
    tape.record("nconv2d", {values, conf, applicability}, {out.values, out.conf, out.ac_raw},
                [values, conf, applicability, out, numerator, rows, cols, k, eps] {
                  NConvKernel kern{rows, cols, k, values->data(), conf->data(),
                                   applicability->data(), eps};
                  std::span<double> none;
                  kern.backward(*numerator, out.ac_raw->data(), out.values->grad(),
                                out.conf->grad(), out.ac_raw->grad(),
                                values->requires_grad() ? values->grad() : none,
                                conf->requires_grad() ? conf->grad() : none,
                                applicability->requires_grad() ? applicability->grad() : none);
                });
  }
  return out;
}

PooledPair conf_pool2x(Tape& tape, const TensorPtr& values, const TensorPtr& conf) {
  require_same_shape(*values, *conf, "conf_pool2x");
  if (values->rank() != 3 || values->dim(0) != 1) {
    throw ShapeError("conf_pool2x: expected [1,H,W], got " + shape_str(values->shape()));
  }
  const std::size_t rows = values->dim(1), cols = values->dim(2);
  const std::size_t oh = (rows + 1) / 2, ow = (cols + 1) / 2;
  auto idx = pool_argmax(conf->data(), rows, cols);
  PooledPair out{make_tensor({1, oh, ow}), make_tensor({1, oh, ow})};
  for (std::size_t o = 0; o < idx.size(); ++o) {
    (*out.values)[o] = (*values)[idx[o]];
    (*out.conf)[o] = (*conf)[idx[o]];
  }
  if (values->requires_grad() || conf->requires_grad()) {
    tape.record("conf_pool2x", {values, conf}, {out.values, out.conf},
                [values, conf, out, idx = std::move(idx)] {
                  if (values->requires_grad()) {
                    auto g = values->grad();
                    auto og = out.values->grad();
                    for (std::size_t o = 0; o < idx.size(); ++o) g[idx[o]] += og[o];
                  }
                  if (conf->requires_grad()) {
                    auto g = conf->grad();
                    auto og = out.conf->grad();
                    for (std::size_t o = 0; o < idx.size(); ++o) g[idx[o]] += og[o];
                  }
                });
  }
  return out;
}

PooledPair conf_unpool2x(Tape& tape, const TensorPtr& values, const TensorPtr& conf,
                         std::size_t rows, std::size_t cols) {
  require_same_shape(*values, *conf, "conf_unpool2x");
  require_unpool_target(values->dim(1), values->dim(2), rows, cols);
  return {upsample2x(tape, values, rows, cols), upsample2x(tape, conf, rows, cols)};
}

BasisMatrix::BasisMatrix(std::size_t n_, std::size_t m_, std::vector<double> values)
    : n(n_), m(m_), data(std::move(values)) {
  if (data.size() != n * m) throw ShapeError("BasisMatrix: data length does not match n*m");
  if (m == 0 || m > n) throw ShapeError("BasisMatrix: need 0 < m <= n");
}

BasisMatrix BasisMatrix::naive(std::size_t n) { return BasisMatrix(n, 1, std::vector<double>(n, 1.0)); }

namespace {

// Cholesky factor (lower, row-major m x m) of B* diag(a.c) B.
std::vector<double> normal_cholesky(const BasisMatrix& basis, std::span<const double> a,
                                    std::span<const double> c) {
  const std::size_t n = basis.n, m = basis.m;
  if (a.size() != n || c.size() != n) {
    throw ShapeError("basis projection: a/c length does not match basis rows");
  }
  std::vector<double> normal(m * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double w = a[i] * c[i];
    if (w == 0.0) continue;
    for (std::size_t p = 0; p < m; ++p)
      for (std::size_t q = 0; q <= p; ++q) normal[p * m + q] += w * basis(i, p) * basis(i, q);
  }
  double max_diag = 0.0;
  for (std::size_t p = 0; p < m; ++p) max_diag = std::max(max_diag, normal[p * m + p]);
  if (!(max_diag > 0.0)) throw RankError("basis projection: normal matrix is zero");

  std::vector<double> l(m * m, 0.0);
  double min_pivot = std::numeric_limits<double>::infinity(), max_pivot = 0.0;
  for (std::size_t p = 0; p < m; ++p) {
    for (std::size_t q = 0; q <= p; ++q) {
      double s = normal[p * m + q];
      for (std::size_t t = 0; t < q; ++t) s -= l[p * m + t] * l[q * m + t];
      if (p == q) {
        if (!(s > 1e-14 * max_diag)) {
          throw RankError("basis projection: normal matrix is rank deficient (pivot " +
                          std::to_string(p) + ")");
        }
        l[p * m + p] = std::sqrt(s);
        min_pivot = std::min(min_pivot, s);
        max_pivot = std::max(max_pivot, s);
      } else {
        l[p * m + q] = s / l[q * m + q];
      }
    }
  }
  if (max_pivot / min_pivot > 1e12) {
    throw RankError("basis projection: normal matrix ill-conditioned");
  }
  return l;
}

// Solves L L^T x = b in place.
void cholesky_solve(const std::vector<double>& l, std::size_t m, std::span<double> b) {
  for (std::size_t p = 0; p < m; ++p) {
    double s = b[p];
    for (std::size_t t = 0; t < p; ++t) s -= l[p * m + t] * b[t];
    b[p] = s / l[p * m + p];
  }
  for (std::size_t p = m; p-- > 0;) {
    double s = b[p];
    for (std::size_t t = p + 1; t < m; ++t) s -= l[t * m + p] * b[t];
    b[p] = s / l[p * m + p];
  }
}

}  // namespace

BasisSolution nc_basis_solve(std::span<const double> y, std::span<const double> c,
                             std::span<const double> a, const BasisMatrix& basis) {
  if (y.size() != basis.n) throw ShapeError("nc_basis_solve: y length does not match basis rows");
  const auto l = normal_cholesky(basis, a, c);
  const std::size_t n = basis.n, m = basis.m;
  BasisSolution sol{std::vector<double>(m, 0.0), std::vector<double>(n, 0.0)};
  for (std::size_t i = 0; i < n; ++i) {
    const double w = a[i] * c[i] * y[i];
    for (std::size_t p = 0; p < m; ++p) sol.coords[p] += basis(i, p) * w;
  }
  cholesky_solve(l, m, sol.coords);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < m; ++p) sol.reconstruction[i] += basis(i, p) * sol.coords[p];
  return sol;
}

std::vector<double> nc_basis_cov(const BasisMatrix& basis, std::span<const double> a,
                                 std::span<const double> c, double sigma2) {
  if (!(sigma2 > 0.0)) throw DomainError("nc_basis_cov: sigma2 must be positive");
  const auto l = normal_cholesky(basis, a, c);
  const std::size_t n = basis.n, m = basis.m;
  // X = N^-1 B*, column by column; cov = sigma2 * B X.
  std::vector<double> x(m * n);
  std::vector<double> col(m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < m; ++p) col[p] = basis(i, p);
    cholesky_solve(l, m, col);
    for (std::size_t p = 0; p < m; ++p) x[p * n + i] = col[p];
  }
  std::vector<double> cov(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < m; ++p) s += basis(i, p) * x[p * n + j];
      cov[i * n + j] = sigma2 * s;
    }
  // Symmetrize away rounding asymmetry.
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double s = 0.5 * (cov[i * n + j] + cov[j * n + i]);
      cov[i * n + j] = cov[j * n + i] = s;
    }
  return cov;
}

}  // namespace pncnn
