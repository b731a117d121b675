#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pncnn/autodiff.hpp"
#include "pncnn/grid.hpp"
#include "pncnn/nconv.hpp"
#include "pncnn/rng.hpp"

namespace pncnn {

enum class Variant {
  NcnnBinary,  // binary input mask, no UNets
  NcnnConf,    // learned input confidence
  Pncnn,       // learned input confidence + noise variance
  PncnnExp,    // as Pncnn, trained with the exponential data term
};

std::string to_string(Variant v);
Variant parse_variant(const std::string& s);
bool has_confidence_net(Variant v);
bool has_variance_net(Variant v);

/// One normalized-convolution layer of the stack and the rescaling that
/// follows it.
struct NConvLayerSpec {
  enum class Rescale { None, PoolAfter, UnpoolAfter };
  std::size_t kernel = 3;
  Rescale rescale = Rescale::None;

  friend bool operator==(const NConvLayerSpec&, const NConvLayerSpec&) = default;
};

/// Text form "5d,5,3u,3": d = conf_pool after the layer, u = conf_unpool after it.
std::vector<NConvLayerSpec> parse_ncnn_layers(const std::string& s);
std::string format_ncnn_layers(const std::vector<NConvLayerSpec>& layers);

struct PipelineConfig {
  Variant variant = Variant::Pncnn;
  std::vector<std::size_t> unet_channels{8, 16, 32};
  std::vector<NConvLayerSpec> ncnn_layers = parse_ncnn_layers("5d,5,3u,3");
  double eps = 1e-8;
  double s_min = 1e-6;
  double sigma2_floor = 1e-6;
  /// Multiplier applied to depth before it enters a UNet.
  double input_scale = 0.05;
  /// Feed the prediction to the variance net as a second channel.
  bool var_uses_prediction = false;

  void validate() const;
  std::map<std::string, std::string> to_kv() const;
  static PipelineConfig from_kv(const std::map<std::string, std::string>& kv);
};

struct Parameter {
  std::string name;
  TensorPtr tensor;
};

/// Compact 3-scale encoder-decoder with skip connections and a softplus head.
class UNet {
 public:
  UNet(std::string name, std::size_t in_channels, const std::vector<std::size_t>& channels,
       double head_floor, SplitRng rng);

  TensorPtr forward(Tape& tape, const TensorPtr& x) const;
  const std::vector<Parameter>& parameters() const { return params_; }

 private:
  struct Conv {
    TensorPtr kernel;
    TensorPtr bias;
  };
  Conv make_conv(const std::string& tag, std::size_t cin, std::size_t cout, std::size_t k,
                 SplitRng& rng, double gain);
  TensorPtr conv_relu(Tape& tape, const Conv& c, const TensorPtr& x) const;

  std::string name_;
  double head_floor_;
  std::vector<Conv> enc_, dec_;
  Conv head_;
  std::vector<Parameter> params_;
};

/// Stack of single-channel normalized-convolution layers with softplus-
/// reparameterized applicabilities.
class NConvStack {
 public:
  NConvStack(const std::vector<NConvLayerSpec>& layers, double eps);

  NConvTensors forward(Tape& tape, const TensorPtr& values, const TensorPtr& conf) const;
  const std::vector<Parameter>& parameters() const { return params_; }
  /// Overwrites layer `i` with the given applicability's raw weights.
  void set_applicability(std::size_t i, const Applicability& a);

 private:
  std::vector<NConvLayerSpec> layers_;
  double eps_;
  std::vector<Parameter> params_;
};

struct PipelineTensors {
  TensorPtr input_conf;  // c0
  TensorPtr prediction;
  TensorPtr out_conf;
  TensorPtr ac_raw;
  TensorPtr sigma2;  // null for non-probabilistic variants
  TensorPtr s;       // null for non-probabilistic variants
};

struct PipelineOutput {
  Grid input_conf;
  Grid prediction;
  Grid out_conf;
  Grid ac_raw;
  std::optional<Grid> sigma2;
  std::optional<Grid> s;
};

/// Confidence UNet h -> normalized-convolution stack f -> variance UNet g.
class Pipeline {
 public:
  Pipeline(PipelineConfig cfg, std::uint64_t seed);
  // Copies would alias the parameter tensors.
  Pipeline(const Pipeline&) = delete;
  Pipeline& operator=(const Pipeline&) = delete;
  Pipeline(Pipeline&&) = default;
  Pipeline& operator=(Pipeline&&) = default;

  const PipelineConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }

  /// Input is [1,H,W] depth with 0 marking missing samples.
  PipelineTensors forward(Tape& tape, const TensorPtr& x) const;
  PipelineOutput predict(const Grid& x) const;

  /// Every trainable tensor, in a stable order with unique names.
  std::vector<Parameter> parameters() const;
  std::size_t parameter_count() const;

  NConvStack& ncnn() { return ncnn_; }
  const std::optional<UNet>& confidence_net() const { return conf_net_; }
  const std::optional<UNet>& variance_net() const { return var_net_; }

 private:
  PipelineConfig cfg_;
  std::uint64_t seed_;
  std::optional<UNet> conf_net_;
  NConvStack ncnn_;
  std::optional<UNet> var_net_;
};

/// Grid <-> [1,H,W] tensor conversion.
TensorPtr grid_to_tensor(const Grid& g, bool requires_grad = false);
Grid tensor_to_grid(const DiffTensor& t);

}  // namespace pncnn
