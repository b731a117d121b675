#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "oracles.hpp"
#include "pncnn/error.hpp"
#include "pncnn/fusion.hpp"
#include "pncnn/rng.hpp"

using namespace pncnn;

namespace {

double run(std::vector<double> p, std::vector<double> c, FusionScheme s) {
  return fuse(EnsembleSlice{p, c}, s);
}

}  // namespace

TEST(Fusion, EqualConfidencesTieToFirst) {
  EXPECT_DOUBLE_EQ(run({1, 3}, {1, 1}, FusionScheme::Mean), 2.0);
  EXPECT_DOUBLE_EQ(run({1, 3}, {1, 1}, FusionScheme::WeightedMean), 2.0);
  EXPECT_DOUBLE_EQ(run({1, 3}, {1, 1}, FusionScheme::MaxConf), 1.0);
}

TEST(Fusion, WeightedExamples) {
  EXPECT_DOUBLE_EQ(run({1, 3}, {1, 3}, FusionScheme::WeightedMean), 2.5);
  EXPECT_DOUBLE_EQ(run({1, 3}, {1, 3}, FusionScheme::MaxConf), 3.0);
}

TEST(Fusion, SingletonReturnsItsPrediction) {
  for (auto s : {FusionScheme::Mean, FusionScheme::WeightedMean, FusionScheme::MaxConf, FusionScheme::Mle}) {
    EXPECT_DOUBLE_EQ(run({4.25}, {0.3}, s), 4.25) << to_string(s);
  }
}

TEST(Fusion, InvalidSlices) {
  EXPECT_THROW(run({1, 2}, {0, 0}, FusionScheme::WeightedMean), DomainError);
  EXPECT_THROW(run({1, 2}, {1, -1}, FusionScheme::Mean), DomainError);
  EXPECT_THROW(run({1, 2}, {1}, FusionScheme::Mean), ShapeError);
  EXPECT_THROW(run({}, {}, FusionScheme::Mean), Error);
  EXPECT_THROW(fuse_mle(EnsembleSlice{std::vector<double>{1.0}, std::vector<double>{1.0}}, MleOptions{0.0}),
               DomainError);
  EXPECT_THROW(parse_fusion_scheme("median"), ConfigError);
}

TEST(FusionMle, CoincidentComponents) { EXPECT_DOUBLE_EQ(run({2.5, 2.5, 2.5}, {1, 2, 3}, FusionScheme::Mle), 2.5); }

TEST(FusionMle, HeavierSeparatedModeWins) {
  const std::vector<double> p{0.0, 10.0}, c{1.0, 5.0};
  const double x = fuse_mle({p, c});
  EXPECT_NEAR(x, 10.0, 1e-3);
  EXPECT_NEAR(x, oracle::mixture_mode_grid(p, c, 0.1), 1e-3);
}

TEST(FusionMle, CloseComponentsMerge) {
  const std::vector<double> p{0.0, 0.1}, c{1.0, 1.0};
  EXPECT_NEAR(fuse_mle({p, c}), 0.05, 1e-3);
  EXPECT_NEAR(oracle::mixture_mode_grid(p, c, 0.1), 0.05, 1e-3);
}

TEST(FusionMle, LikelihoodNormalization) {
  // A single component is a normal density with variance v2.
  const std::vector<double> p{1.0}, c{7.0};
  const double v2 = 0.1;
  EXPECT_NEAR(mixture_likelihood({p, c}, 1.0, v2), 1.0 / std::sqrt(2.0 * std::numbers::pi * v2), 1e-12);
}

TEST(FusionProperties, RandomSlices) {
  SplitRng rng(21);
  for (int t = 0; t < 400; ++t) {
    const std::size_t n = 1 + rng.below(5);
    std::vector<double> p(n), c(n);
    for (std::size_t k = 0; k < n; ++k) {
      p[k] = rng.uniform(0.0, 6.0);
      c[k] = rng.uniform(0.05, 3.0);
    }
    const double lo = *std::min_element(p.begin(), p.end());
    const double hi = *std::max_element(p.begin(), p.end());
    const EnsembleSlice slice{p, c};
    for (auto s : {FusionScheme::Mean, FusionScheme::WeightedMean, FusionScheme::MaxConf, FusionScheme::Mle}) {
      const double x = fuse(slice, s);
      EXPECT_GE(x, lo - 1e-9) << to_string(s);
      EXPECT_LE(x, hi + 1e-9) << to_string(s);
    }

    const double x = fuse_mle(slice);
    const double lx = mixture_likelihood(slice, x, 0.1);
    for (double pk : p) EXPECT_GE(lx, mixture_likelihood(slice, pk, 0.1) - 1e-15);
    EXPECT_NEAR(x, oracle::mixture_mode_grid(p, c, 0.1), 1e-3) << "trial " << t;

    std::vector<double> equal(n, c[0]);
    EXPECT_EQ(fuse({p, equal}, FusionScheme::WeightedMean), fuse({p, equal}, FusionScheme::Mean));
  }
}

TEST(FusionGrids, IdenticalMembersAreIdempotent) {
  SplitRng rng(8);
  Grid pred = oracle::random_grid(rng, 6, 7, 1.0, 40.0);
  Grid conf = oracle::random_grid(rng, 6, 7, 0.1, 5.0);
  for (auto s : {FusionScheme::Mean, FusionScheme::WeightedMean, FusionScheme::MaxConf, FusionScheme::Mle}) {
    const Grid f = fuse_grids({pred, pred}, {conf, conf}, s);
    for (std::size_t i = 0; i < f.size(); ++i) EXPECT_NEAR(f.data[i], pred.data[i], s == FusionScheme::Mle ? 1e-9 : 0.0);
  }
  EXPECT_THROW(fuse_grids({pred}, {Grid(2, 2)}, FusionScheme::Mean), ShapeError);
}
