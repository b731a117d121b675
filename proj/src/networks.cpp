#include "pncnn/networks.hpp"

#include <cmath>
#include <sstream>

#include "pncnn/error.hpp"

namespace pncnn {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::NcnnBinary: return "ncnn-binary";
    case Variant::NcnnConf: return "ncnn-conf";
    case Variant::Pncnn: return "pncnn";
    case Variant::PncnnExp: return "pncnn-exp";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  if (s == "ncnn-binary") return Variant::NcnnBinary;
  if (s == "ncnn-conf") return Variant::NcnnConf;
  if (s == "pncnn") return Variant::Pncnn;
  if (s == "pncnn-exp") return Variant::PncnnExp;
  throw ConfigError("unknown variant '" + s + "'");
}

bool has_confidence_net(Variant v) { return v != Variant::NcnnBinary; }
bool has_variance_net(Variant v) { return v == Variant::Pncnn || v == Variant::PncnnExp; }

std::vector<NConvLayerSpec> parse_ncnn_layers(const std::string& s) {
  std::vector<NConvLayerSpec> layers;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) throw ConfigError("ncnn_layers: empty entry in '" + s + "'");
    NConvLayerSpec spec;
    const char last = tok.back();
    if (last == 'd' || last == 'u') {
      spec.rescale = last == 'd' ? NConvLayerSpec::Rescale::PoolAfter
                                 : NConvLayerSpec::Rescale::UnpoolAfter;
      tok.pop_back();
    }
    try {
      std::size_t used = 0;
      const long k = std::stol(tok, &used);
      if (used != tok.size() || k <= 0) throw ConfigError("");
      spec.kernel = static_cast<std::size_t>(k);
    } catch (const std::exception&) {
      throw ConfigError("ncnn_layers: bad entry '" + tok + "' in '" + s + "'");
    }
    layers.push_back(spec);
  }
  return layers;
}

std::string format_ncnn_layers(const std::vector<NConvLayerSpec>& layers) {
  std::string out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(layers[i].kernel);
    if (layers[i].rescale == NConvLayerSpec::Rescale::PoolAfter) out += 'd';
    if (layers[i].rescale == NConvLayerSpec::Rescale::UnpoolAfter) out += 'u';
  }
  return out;
}

void PipelineConfig::validate() const {
  if (unet_channels.size() != 3) {
    throw ConfigError("unet_channels must list exactly 3 scales");
  }
  for (auto c : unet_channels) {
    if (c == 0) throw ConfigError("unet_channels entries must be positive");
  }
  if (ncnn_layers.empty()) throw ConfigError("ncnn_layers must not be empty");
  int depth = 0;
  for (std::size_t i = 0; i < ncnn_layers.size(); ++i) {
    const auto& l = ncnn_layers[i];
    if (l.kernel % 2 == 0) throw ConfigError("ncnn_layers: kernel sizes must be odd");
    if (l.rescale == NConvLayerSpec::Rescale::PoolAfter) ++depth;
    if (l.rescale == NConvLayerSpec::Rescale::UnpoolAfter && --depth < 0) {
      throw ConfigError("ncnn_layers: unpool without matching pool");
    }
  }
  if (depth != 0) throw ConfigError("ncnn_layers: pool/unpool not balanced");
  if (ncnn_layers.back().rescale != NConvLayerSpec::Rescale::None) {
    throw ConfigError("ncnn_layers: last layer must not rescale");
  }
  if (!(eps > 0.0) || !(s_min > 0.0) || !(sigma2_floor > 0.0) || !(input_scale > 0.0)) {
    throw ConfigError("eps, s_min, sigma2_floor and input_scale must be positive");
  }
}

namespace {

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("bad number for '" + key + "': '" + v + "'");
  }
}

}  // namespace

std::map<std::string, std::string> PipelineConfig::to_kv() const {
  std::string ch;
  for (std::size_t i = 0; i < unet_channels.size(); ++i) {
    if (i) ch += ',';
    ch += std::to_string(unet_channels[i]);
  }
  return {{"variant", to_string(variant)},
          {"unet_channels", ch},
          {"ncnn_layers", format_ncnn_layers(ncnn_layers)},
          {"eps", fmt_double(eps)},
          {"s_min", fmt_double(s_min)},
          {"sigma2_floor", fmt_double(sigma2_floor)},
          {"input_scale", fmt_double(input_scale)},
          {"var_uses_prediction", var_uses_prediction ? "1" : "0"}};
}

PipelineConfig PipelineConfig::from_kv(const std::map<std::string, std::string>& kv) {
  PipelineConfig cfg;
  for (const auto& [k, v] : kv) {
    if (k == "variant") {
      cfg.variant = parse_variant(v);
    } else if (k == "unet_channels") {
      cfg.unet_channels.clear();
      std::stringstream ss(v);
      std::string tok;
      while (std::getline(ss, tok, ',')) {
        const double c = parse_double(k, tok);
        if (c < 1 || c != std::floor(c)) throw ConfigError("bad unet_channels '" + v + "'");
        cfg.unet_channels.push_back(static_cast<std::size_t>(c));
      }
    } else if (k == "ncnn_layers") {
      cfg.ncnn_layers = parse_ncnn_layers(v);
    } else if (k == "eps") {
      cfg.eps = parse_double(k, v);
    } else if (k == "s_min") {
      cfg.s_min = parse_double(k, v);
    } else if (k == "sigma2_floor") {
      cfg.sigma2_floor = parse_double(k, v);
    } else if (k == "input_scale") {
      cfg.input_scale = parse_double(k, v);
    } else if (k == "var_uses_prediction") {
      cfg.var_uses_prediction = v == "1" || v == "true";
    }
  }
  cfg.validate();
  return cfg;
}

constexpr double kHiddenBiasInit = 0.01;

UNet::Conv UNet::make_conv(const std::string& tag, std::size_t cin, std::size_t cout,
                           std::size_t k, SplitRng& rng, double gain) {
  const double stddev = gain * std::sqrt(2.0 / static_cast<double>(cin * k * k));
  const double bias = tag == "head" ? 0.0 : kHiddenBiasInit;
  Conv c{make_tensor({cout, cin, k, k}, 0.0, true), make_tensor({cout}, bias, true)};
  for (auto& w : c.kernel->data()) w = rng.normal(0.0, stddev);
  params_.push_back({name_ + "." + tag + ".weight", c.kernel});
  params_.push_back({name_ + "." + tag + ".bias", c.bias});
  return c;
}

UNet::UNet(std::string name, std::size_t in_channels, const std::vector<std::size_t>& ch,
           double head_floor, SplitRng rng)
    : name_(std::move(name)), head_floor_(head_floor) {
  if (ch.size() != 3 || ch[0] == 0 || ch[1] == 0 || ch[2] == 0 || in_channels == 0) {
    throw ConfigError("UNet: need 3 positive channel counts");
  }
  enc_.push_back(make_conv("enc1a", in_channels, ch[0], 3, rng, 1.0));
  enc_.push_back(make_conv("enc1b", ch[0], ch[0], 3, rng, 1.0));
  enc_.push_back(make_conv("enc2a", ch[0], ch[1], 3, rng, 1.0));
  enc_.push_back(make_conv("enc2b", ch[1], ch[1], 3, rng, 1.0));
  enc_.push_back(make_conv("enc3a", ch[1], ch[2], 3, rng, 1.0));
  enc_.push_back(make_conv("enc3b", ch[2], ch[2], 3, rng, 1.0));
  dec_.push_back(make_conv("dec2a", ch[2] + ch[1], ch[1], 3, rng, 1.0));
  dec_.push_back(make_conv("dec2b", ch[1], ch[1], 3, rng, 1.0));
  dec_.push_back(make_conv("dec1a", ch[1] + ch[0], ch[0], 3, rng, 1.0));
  dec_.push_back(make_conv("dec1b", ch[0], ch[0], 3, rng, 1.0));
  head_ = make_conv("head", ch[0], 1, 1, rng, 0.5);
}

TensorPtr UNet::conv_relu(Tape& tape, const Conv& c, const TensorPtr& x) const {
  return relu(tape, conv2d(tape, x, c.kernel, c.bias, 1, 1));
}

TensorPtr UNet::forward(Tape& tape, const TensorPtr& x) const {
  auto s1 = conv_relu(tape, enc_[1], conv_relu(tape, enc_[0], x));
  auto p1 = maxpool2x(tape, s1).out;
  auto s2 = conv_relu(tape, enc_[3], conv_relu(tape, enc_[2], p1));
  auto p2 = maxpool2x(tape, s2).out;
  auto s3 = conv_relu(tape, enc_[5], conv_relu(tape, enc_[4], p2));
  auto u2 = upsample2x(tape, s3, s2->dim(1), s2->dim(2));
  auto d2 = conv_relu(tape, dec_[1], conv_relu(tape, dec_[0], concat_channels(tape, {u2, s2})));
  auto u1 = upsample2x(tape, d2, s1->dim(1), s1->dim(2));
  auto d1 = conv_relu(tape, dec_[3], conv_relu(tape, dec_[2], concat_channels(tape, {u1, s1})));
  auto head = conv2d(tape, d1, head_.kernel, head_.bias, 1, 0);
  auto out = softplus(tape, head);
  return head_floor_ > 0.0 ? add_scalar(tape, out, head_floor_) : out;
}

NConvStack::NConvStack(const std::vector<NConvLayerSpec>& layers, double eps)
    : layers_(layers), eps_(eps) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::size_t k = layers_[i].kernel;
    params_.push_back({"ncnn.layer" + std::to_string(i) + ".applicability",
                       make_tensor({k, k}, gaussian_applicability_raw(k), true)});
  }
}

void NConvStack::set_applicability(std::size_t i, const Applicability& a) {
  auto& t = params_.at(i).tensor;
  if (a.size() != t->dim(0)) throw ShapeError("set_applicability: kernel size mismatch");
  std::copy(a.raw().begin(), a.raw().end(), t->data().begin());
}

NConvTensors NConvStack::forward(Tape& tape, const TensorPtr& values, const TensorPtr& conf) const {
  std::vector<std::pair<std::size_t, std::size_t>> shapes;
  TensorPtr v = values, c = conf;
  NConvTensors out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    auto a = add_scalar(tape, softplus(tape, params_[i].tensor), kApplicabilityFloor);
    out = nconv2d(tape, v, c, a, eps_);
    v = out.values;
    c = out.conf;
    switch (layers_[i].rescale) {
      case NConvLayerSpec::Rescale::PoolAfter: {
        shapes.emplace_back(v->dim(1), v->dim(2));
        auto p = conf_pool2x(tape, v, c);
        v = p.values;
        c = p.conf;
        break;
      }
      case NConvLayerSpec::Rescale::UnpoolAfter: {
        if (shapes.empty()) throw ConfigError("ncnn stack: unpool without pool");
        auto [r, q] = shapes.back();
        shapes.pop_back();
        auto p = conf_unpool2x(tape, v, c, r, q);
        v = p.values;
        c = p.conf;
        break;
      }
      case NConvLayerSpec::Rescale::None:
        break;
    }
  }
  return out;
}

namespace {

void require_finite(const TensorPtr& t, const char* stage) {
  for (double v : t->data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value in pipeline stage '") + stage + "'");
    }
  }
}

}  // namespace

Pipeline::Pipeline(PipelineConfig cfg, std::uint64_t seed)
    : cfg_(std::move(cfg)), seed_(seed), ncnn_((cfg_.validate(), cfg_.ncnn_layers), cfg_.eps) {
  SplitRng rng(seed);
  if (has_confidence_net(cfg_.variant)) {
    conf_net_.emplace("conf", 1, cfg_.unet_channels, 0.0, rng.split(1));
  }
  if (has_variance_net(cfg_.variant)) {
    var_net_.emplace("var", cfg_.var_uses_prediction ? 2 : 1, cfg_.unet_channels,
                     cfg_.sigma2_floor, rng.split(2));
  }
}

PipelineTensors Pipeline::forward(Tape& tape, const TensorPtr& x) const {
  if (x->rank() != 3 || x->dim(0) != 1) {
    throw ShapeError("pipeline: input must be [1,H,W], got " + shape_str(x->shape()));
  }
  require_finite(x, "input");
  PipelineTensors out;
  if (conf_net_) {
    out.input_conf = conf_net_->forward(tape, scale(tape, x, cfg_.input_scale));
  } else {
    out.input_conf = make_tensor(x->shape());
    for (std::size_t i = 0; i < x->size(); ++i) (*out.input_conf)[i] = (*x)[i] != 0.0 ? 1.0 : 0.0;
  }
  require_finite(out.input_conf, "confidence");
  auto f = ncnn_.forward(tape, x, out.input_conf);
  out.prediction = f.values;
  out.out_conf = f.conf;
  out.ac_raw = f.ac_raw;
  require_finite(out.prediction, "ncnn");
  if (var_net_) {
    TensorPtr g_in = out.out_conf;
    if (cfg_.var_uses_prediction) {
      g_in = concat_channels(tape, {out.out_conf, scale(tape, out.prediction, cfg_.input_scale)});
    }
    out.sigma2 = var_net_->forward(tape, g_in);
    require_finite(out.sigma2, "variance");
    out.s = clamp_min(tape, div(tape, out.sigma2, out.ac_raw, cfg_.eps), cfg_.s_min);
    require_finite(out.s, "uncertainty");
  }
  return out;
}

TensorPtr grid_to_tensor(const Grid& g, bool requires_grad) {
  return make_tensor({1, g.rows, g.cols}, g.data, requires_grad);
}

Grid tensor_to_grid(const DiffTensor& t) {
  if (t.rank() != 3 || t.dim(0) != 1) throw ShapeError("tensor_to_grid: expected [1,H,W]");
  return Grid(t.dim(1), t.dim(2), t.storage());
}

PipelineOutput Pipeline::predict(const Grid& x) const {
  Tape tape;
  tape.set_enabled(false);
  auto t = forward(tape, grid_to_tensor(x));
  PipelineOutput out{tensor_to_grid(*t.input_conf), tensor_to_grid(*t.prediction),
                     tensor_to_grid(*t.out_conf), tensor_to_grid(*t.ac_raw), std::nullopt,
                     std::nullopt};
  if (t.s) {
    out.sigma2 = tensor_to_grid(*t.sigma2);
    out.s = tensor_to_grid(*t.s);
  }
  return out;
}

std::vector<Parameter> Pipeline::parameters() const {
  std::vector<Parameter> all;
  if (conf_net_) all.insert(all.end(), conf_net_->parameters().begin(), conf_net_->parameters().end());
  all.insert(all.end(), ncnn_.parameters().begin(), ncnn_.parameters().end());
  if (var_net_) all.insert(all.end(), var_net_->parameters().begin(), var_net_->parameters().end());
  return all;
}

std::size_t Pipeline::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor->size();
  return n;
}

}  // namespace pncnn
