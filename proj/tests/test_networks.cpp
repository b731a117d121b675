#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "oracles.hpp"
#include "pncnn/error.hpp"
#include "pncnn/networks.hpp"

using namespace pncnn;

namespace {

PipelineConfig config(Variant v) {
  PipelineConfig c;
  c.variant = v;
  return c;
}

Grid sparse_input(SplitRng& rng, std::size_t rows, std::size_t cols, double density) {
  Grid g(rows, cols);
  for (auto& v : g.data) v = rng.uniform() < density ? rng.uniform(2.0, 60.0) : 0.0;
  g.data[0] = 10.0;  // never empty
  return g;
}

std::size_t conv_count(std::size_t cin, std::size_t cout, std::size_t k) { return cin * cout * k * k + cout; }

std::size_t unet_count(std::size_t in, std::size_t a, std::size_t b, std::size_t c) {
  return conv_count(in, a, 3) + conv_count(a, a, 3) + conv_count(a, b, 3) + conv_count(b, b, 3) +
         conv_count(b, c, 3) + conv_count(c, c, 3) + conv_count(c + b, b, 3) + conv_count(b, b, 3) +
         conv_count(b + a, a, 3) + conv_count(a, a, 3) + conv_count(a, 1, 1);
}

void copy_parameters(const Pipeline& from, Pipeline& to) {
  std::map<std::string, TensorPtr> src;
  for (const auto& p : from.parameters()) src[p.name] = p.tensor;
  for (const auto& p : to.parameters()) {
    auto it = src.find(p.name);
    if (it != src.end()) std::ranges::copy(it->second->data(), p.tensor->data().begin());
  }
}

}  // namespace

TEST(NcnnLayers, ParseAndFormat) {
  const auto layers = parse_ncnn_layers("5d,5,3u,3");
  ASSERT_EQ(layers.size(), 4u);
  EXPECT_EQ(layers[0].kernel, 5u);
  EXPECT_EQ(layers[0].rescale, NConvLayerSpec::Rescale::PoolAfter);
  EXPECT_EQ(layers[2].rescale, NConvLayerSpec::Rescale::UnpoolAfter);
  EXPECT_EQ(layers[3].rescale, NConvLayerSpec::Rescale::None);
  EXPECT_EQ(format_ncnn_layers(layers), "5d,5,3u,3");
  for (const char* bad : {"", "4", "5x", "0", "5,,3", "3u"}) {
    EXPECT_THROW(
        {
          PipelineConfig c;
          c.ncnn_layers = parse_ncnn_layers(bad);
          c.validate();
        },
        Error)
        << bad;
  }
}

TEST(PipelineConfigTest, KeyValueRoundTrip) {
  PipelineConfig c;
  c.variant = Variant::PncnnExp;
  c.unet_channels = {4, 6, 10};
  c.ncnn_layers = parse_ncnn_layers("3,5d,3u,3");
  c.eps = 1e-7;
  c.var_uses_prediction = true;
  const auto back = PipelineConfig::from_kv(c.to_kv());
  EXPECT_EQ(back.variant, c.variant);
  EXPECT_EQ(back.unet_channels, c.unet_channels);
  EXPECT_EQ(back.ncnn_layers, c.ncnn_layers);
  EXPECT_EQ(back.eps, c.eps);
  EXPECT_TRUE(back.var_uses_prediction);
  EXPECT_THROW(PipelineConfig::from_kv({{"variant", "bogus"}}), Error);
  EXPECT_THROW(PipelineConfig::from_kv({{"unet_channels", "8,16"}}), Error);
  EXPECT_THROW(PipelineConfig::from_kv({{"eps", "0"}}), Error);
}

TEST(PipelineBuild, VariantsOwnTheRightNetworks) {
  Pipeline bin(config(Variant::NcnnBinary), 0);
  EXPECT_FALSE(bin.confidence_net());
  EXPECT_FALSE(bin.variance_net());
  EXPECT_EQ(bin.parameter_count(), 25u + 25u + 9u + 9u);

  Pipeline conf(config(Variant::NcnnConf), 0);
  EXPECT_TRUE(conf.confidence_net());
  EXPECT_FALSE(conf.variance_net());

  for (Variant v : {Variant::Pncnn, Variant::PncnnExp}) {
    Pipeline p(config(v), 0);
    EXPECT_TRUE(p.confidence_net());
    EXPECT_TRUE(p.variance_net());
  }
}

TEST(PipelineBuild, DefaultParameterCount) {
  Pipeline p(config(Variant::Pncnn), 3);
  const std::size_t expected = 2 * unet_count(1, 8, 16, 32) + 68;
  EXPECT_EQ(p.parameter_count(), expected);
  EXPECT_LT(p.parameter_count(), 100000u);
  EXPECT_EQ(Pipeline(config(Variant::Pncnn), 9).parameter_count(), expected);
}

TEST(PipelineBuild, UniqueParameterNames) {
  Pipeline p(config(Variant::Pncnn), 0);
  std::map<std::string, int> seen;
  for (const auto& prm : p.parameters()) EXPECT_EQ(seen[prm.name]++, 0) << prm.name;
}

TEST(PipelineBuild, SeededInitialization) {
  Pipeline a(config(Variant::Pncnn), 42), b(config(Variant::Pncnn), 42), c(config(Variant::Pncnn), 43);
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].tensor->storage(), pb[i].tensor->storage()) << pa[i].name;
    any_diff |= pa[i].tensor->storage() != pc[i].tensor->storage();
  }
  EXPECT_TRUE(any_diff);
}

TEST(PipelineForward, BinaryDeltaStackIsIdentity) {
  PipelineConfig c = config(Variant::NcnnBinary);
  c.ncnn_layers = parse_ncnn_layers("3,5");
  Pipeline p(c, 0);
  p.ncnn().set_applicability(0, Applicability::delta(3));
  p.ncnn().set_applicability(1, Applicability::delta(5));
  SplitRng rng(1);
  const Grid x = oracle::random_grid(rng, 9, 11, 1.0, 2.0);
  const auto out = p.predict(x);
  // Each layer mixes in at most (k^2 - 1) * a_min of neighbouring values.
  const double tol = ((3 * 3 - 1) + (5 * 5 - 1)) * kApplicabilityFloor * (2.0 - 1.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_NEAR(out.prediction.data[i], x.data[i], tol);
    EXPECT_EQ(out.input_conf.data[i], 1.0);
  }
}

TEST(PipelineForward, BinaryConfidenceIsValidityMask) {
  Pipeline p(config(Variant::NcnnBinary), 0);
  SplitRng rng(2);
  const Grid x = sparse_input(rng, 16, 16, 0.1);
  const auto out = p.predict(x);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(out.input_conf.data[i], x.data[i] != 0.0 ? 1.0 : 0.0);
  EXPECT_FALSE(out.s);
}

TEST(PipelineForward, UncertaintyContract) {
  SplitRng rng(3);
  for (Variant v : {Variant::Pncnn, Variant::PncnnExp}) {
    Pipeline p(config(v), 7);
    const Grid x = sparse_input(rng, 20, 24, 0.05);
    const auto out = p.predict(x);
    ASSERT_TRUE(out.s && out.sigma2);
    for (std::size_t i = 0; i < x.size(); ++i) {
      EXPECT_GE(out.s->data[i], p.config().s_min);
      EXPECT_GT(out.sigma2->data[i], 0.0);
      EXPECT_GT(out.input_conf.data[i], 0.0);
      const double raw = out.sigma2->data[i] / (out.ac_raw.data[i] + p.config().eps);
      EXPECT_EQ(out.s->data[i], std::max(raw, p.config().s_min));
    }
  }
}

TEST(PipelineForward, ConfidenceScaleInvariance) {
  // eps negligible against every accumulated weight, so doubling kappa is exact.
  PipelineConfig cfg = config(Variant::NcnnBinary);
  cfg.eps = 1e-300;
  Pipeline p(cfg, 0);
  SplitRng rng(4);
  // Random positive applicabilities so the check is not tied to the Gaussian init.
  for (std::size_t i = 0; i < p.ncnn().parameters().size(); ++i) {
    auto& t = p.ncnn().parameters()[i].tensor;
    for (auto& w : t->data()) w = rng.uniform(-2.0, 2.0);
  }
  const Grid x = sparse_input(rng, 32, 32, 0.05);
  auto run = [&](double kappa) {
    Tape tape;
    tape.set_enabled(false);
    auto xt = grid_to_tensor(x);
    auto c = make_tensor(xt->shape());
    for (std::size_t i = 0; i < x.size(); ++i) (*c)[i] = kappa;
    return tensor_to_grid(*p.ncnn().forward(tape, xt, c).values);
  };
  const Grid a = run(0.37), b = run(0.74);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.data[i], b.data[i], 1e-10);
}

TEST(PipelineForward, AblationConsistency) {
  Pipeline conf(config(Variant::NcnnConf), 11), full(config(Variant::Pncnn), 5);
  copy_parameters(conf, full);
  SplitRng rng(5);
  const Grid x = sparse_input(rng, 24, 20, 0.06);
  const auto a = conf.predict(x), b = full.predict(x);
  EXPECT_EQ(a.prediction.data, b.prediction.data);
  EXPECT_EQ(a.out_conf.data, b.out_conf.data);
  EXPECT_EQ(a.input_conf.data, b.input_conf.data);
}

TEST(PipelineForward, DepthPredictionFlagWidensVarianceInput) {
  PipelineConfig c = config(Variant::Pncnn);
  c.var_uses_prediction = true;
  Pipeline p(c, 0);
  EXPECT_EQ(p.parameter_count(), unet_count(1, 8, 16, 32) + unet_count(2, 8, 16, 32) + 68);
  SplitRng rng(6);
  EXPECT_TRUE(p.predict(sparse_input(rng, 16, 16, 0.1)).s);
}

TEST(PipelineForward, RejectsBadInput) {
  Pipeline p(config(Variant::Pncnn), 0);
  Grid x(8, 8, 1.0);
  x.data[5] = std::numeric_limits<double>::quiet_NaN();
  try {
    p.predict(x);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("input"), std::string::npos);
  }
  Tape tape;
  EXPECT_THROW(p.forward(tape, make_tensor({2, 8, 8})), ShapeError);
}

TEST(PipelineForward, PredictMatchesTapeForward) {
  Pipeline p(config(Variant::Pncnn), 8);
  SplitRng rng(7);
  const Grid x = sparse_input(rng, 17, 13, 0.1);
  Tape tape;
  const auto t = p.forward(tape, grid_to_tensor(x));
  const auto o = p.predict(x);
  EXPECT_EQ(tensor_to_grid(*t.prediction).data, o.prediction.data);
  EXPECT_EQ(tensor_to_grid(*t.s).data, o.s->data);
}
