#include "pncnn/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "pncnn/error.hpp"
#include "pncnn/rng.hpp"

namespace pncnn {

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

double num(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("bad number for '" + key + "': '" + v + "'");
  }
}

std::uint64_t whole(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const unsigned long long n = std::stoull(v, &used);
    if (used != v.size() || v.starts_with('-')) throw std::invalid_argument(v);
    return n;
  } catch (const std::exception&) {
    throw ConfigError("bad integer for '" + key + "': '" + v + "'");
  }
}

bool flag(const std::string& v) { return v == "1" || v == "true" || v == "yes"; }

Grid flipped(const Grid& g, bool horizontal, bool vertical) {
  Grid out(g.rows, g.cols);
  for (std::size_t r = 0; r < g.rows; ++r)
    for (std::size_t c = 0; c < g.cols; ++c)
      out(r, c) = g(vertical ? g.rows - 1 - r : r, horizontal ? g.cols - 1 - c : c);
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr0 > 0.0)) throw ConfigError("lr0 must be > 0");
  if (!(decay_factor > 0.0 && decay_factor <= 1.0)) throw ConfigError("decay_factor must lie in (0, 1]");
  if (decay_every < 1) throw ConfigError("decay_every must be >= 1");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adam betas must lie in [0, 1)");
  if (!(eps_adam > 0.0)) throw ConfigError("eps_adam must be > 0");
  if (!(val_frac > 0.0 && val_frac < 1.0)) throw ConfigError("val_frac must lie in (0, 1)");
  if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be >= 0");
  if (eval_bins < 1) throw ConfigError("eval_bins must be >= 1");
}

KeyValues TrainConfig::to_kv() const {
  return {{"lr0", fmt(lr0)},
          {"decay_every", std::to_string(decay_every)},
          {"decay_factor", fmt(decay_factor)},
          {"epochs", std::to_string(epochs)},
          {"batch", std::to_string(batch)},
          {"seed", std::to_string(seed)},
          {"beta1", fmt(beta1)},
          {"beta2", fmt(beta2)},
          {"eps_adam", fmt(eps_adam)},
          {"loss", to_string(loss)},
          {"val_frac", fmt(val_frac)},
          {"grad_clip", fmt(grad_clip)},
          {"keep_best", keep_best ? "1" : "0"},
          {"eval_bins", std::to_string(eval_bins)},
          {"augment", augment ? "1" : "0"}};
}

TrainConfig TrainConfig::from_kv(const KeyValues& kv, TrainConfig cfg) {
  for (const auto& [k, v] : kv) {
    if (k == "lr0") cfg.lr0 = num(k, v);
    else if (k == "decay_every") cfg.decay_every = static_cast<int>(whole(k, v));
    else if (k == "decay_factor") cfg.decay_factor = num(k, v);
    else if (k == "epochs") cfg.epochs = static_cast<int>(whole(k, v));
    else if (k == "batch") cfg.batch = whole(k, v);
    else if (k == "seed") cfg.seed = whole(k, v);
    else if (k == "beta1") cfg.beta1 = num(k, v);
    else if (k == "beta2") cfg.beta2 = num(k, v);
    else if (k == "eps_adam") cfg.eps_adam = num(k, v);
    else if (k == "loss") cfg.loss = parse_loss(v);
    else if (k == "val_frac") cfg.val_frac = num(k, v);
    else if (k == "grad_clip") cfg.grad_clip = num(k, v);
    else if (k == "keep_best") cfg.keep_best = flag(v);
    else if (k == "eval_bins") cfg.eval_bins = whole(k, v);
    else if (k == "augment") cfg.augment = flag(v);
  }
  cfg.validate();
  return cfg;
}

TrainConfig TrainConfig::from_kv(const KeyValues& kv) { return from_kv(kv, TrainConfig{}); }

LossKind default_loss(Variant v) {
  switch (v) {
    case Variant::NcnnBinary:
    case Variant::NcnnConf: return LossKind::L2;
    case Variant::Pncnn: return LossKind::Gauss;
    case Variant::PncnnExp: return LossKind::Exp;
  }
  return LossKind::L2;
}

double lr_schedule(const TrainConfig& cfg, int epoch) {
  if (epoch < 0) throw DomainError("lr_schedule: epoch must be >= 0");
  return cfg.lr0 * std::pow(cfg.decay_factor, static_cast<double>(epoch / cfg.decay_every));
}

void adam_step(const std::vector<Parameter>& params, AdamState& state, double lr, double beta1,
               double beta2, double eps) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor->size(), 0.0);
      state.v.emplace_back(p.tensor->size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw Error("adam_step: state does not match parameter list");
  ++state.t;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& t = *params[k].tensor;
    if (!t.has_grad()) continue;
    auto w = t.data();
    const auto g = t.grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != w.size()) throw Error("adam_step: state size mismatch for " + params[k].name);
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
      w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
    }
  }
}

Grid output_uncertainty(const PipelineOutput& out, double eps) {
  if (out.s) return *out.s;
  Grid u(out.out_conf.rows, out.out_conf.cols);
  for (std::size_t i = 0; i < u.size(); ++i) u.data[i] = 1.0 / (out.out_conf.data[i] + eps);
  return u;
}

double dataset_loss(const Pipeline& p, const Dataset& data, LossKind kind) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& s : data) {
    Tape tape;
    tape.set_enabled(false);
    const auto out = p.forward(tape, grid_to_tensor(s.sparse));
    const auto gt = grid_to_tensor(s.gt);
    total += (*loss_sum(tape, {out.prediction, out.s, gt, p.config().s_min}, kind))[0];
    count += valid_count(*gt);
  }
  if (count == 0) throw Error("dataset_loss: no valid groundtruth pixels");
  return total / static_cast<double>(count);
}

EvalReport evaluate_dataset(const Pipeline& p, const Dataset& data, std::size_t bins) {
  std::vector<double> pred, gt, unc;
  for (const auto& s : data) {
    const auto out = p.predict(s.sparse);
    const Grid u = output_uncertainty(out, p.config().eps);
    pred.insert(pred.end(), out.prediction.data.begin(), out.prediction.data.end());
    gt.insert(gt.end(), s.gt.data.begin(), s.gt.data.end());
    unc.insert(unc.end(), u.data.begin(), u.data.end());
  }
  return evaluate(pred, gt, unc, bins);
}

TrainResult train(Pipeline& pipeline, const Dataset& train_set, const Dataset& val_set,
                  const TrainConfig& cfg, const std::filesystem::path& checkpoint,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  if (train_set.empty() || val_set.empty()) throw Error("train: empty train or validation set");
  if (is_probabilistic(cfg.loss) && !has_variance_net(pipeline.config().variant)) {
    throw ConfigError("train: loss '" + to_string(cfg.loss) + "' needs a variant with a variance net");
  }
  const auto params = pipeline.parameters();
  AdamState adam;
  SplitRng shuffle_root = SplitRng(cfg.seed).split(0x5eed);
  std::vector<std::size_t> order(train_set.size());

  TrainResult result;
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> best_params;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_schedule(cfg, epoch);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    SplitRng rng = shuffle_root.split(static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    double epoch_sum = 0.0;
    std::size_t epoch_count = 0;
    for (std::size_t start = 0, b = 0; start < order.size(); start += cfg.batch, ++b) {
      const std::string where = "epoch " + std::to_string(epoch + 1) + " batch " + std::to_string(b + 1);
      Tape tape;
      TensorPtr total;
      std::size_t count = 0;
      try {
        for (std::size_t j = start; j < std::min(order.size(), start + cfg.batch); ++j) {
          const auto& s = train_set[order[j]];
          TensorPtr x, gt;
          if (cfg.augment) {
            const auto pick = rng.below(4);
            x = grid_to_tensor(flipped(s.sparse, pick & 1, pick & 2));
            gt = grid_to_tensor(flipped(s.gt, pick & 1, pick & 2));
          } else {
            x = grid_to_tensor(s.sparse);
            gt = grid_to_tensor(s.gt);
          }
          const auto out = pipeline.forward(tape, x);
          const auto part = loss_sum(tape, {out.prediction, out.s, gt, pipeline.config().s_min}, cfg.loss);
          total = total ? add(tape, total, part) : part;
          count += valid_count(*gt);
        }
      } catch (const Error& e) {
        throw NumericError(where + ": " + e.what());
      }
      if (count == 0) continue;
      const auto loss_t = scale(tape, total, 1.0 / static_cast<double>(count));
      const double value = (*loss_t)[0];
      if (!std::isfinite(value)) throw NumericError(where + ": non-finite loss");
      try {
        tape.backward(loss_t);
      } catch (const Error& e) {
        throw NumericError(where + ": " + e.what());
      }
      if (cfg.grad_clip > 0.0) {
        double sq = 0.0;
        for (const auto& p : params)
          if (p.tensor->has_grad())
            for (double g : p.tensor->grad()) sq += g * g;
        const double norm = std::sqrt(sq);
        if (norm > cfg.grad_clip) {
          for (const auto& p : params)
            if (p.tensor->has_grad())
              for (double& g : p.tensor->grad()) g *= cfg.grad_clip / norm;
        }
      }
      adam_step(params, adam, lr, cfg.beta1, cfg.beta2, cfg.eps_adam);
      epoch_sum += value * static_cast<double>(count);
      epoch_count += count;
    }

    EpochLog log;
    log.epoch = epoch + 1;
    log.lr = lr;
    log.train_loss = epoch_count ? epoch_sum / static_cast<double>(epoch_count) : 0.0;
    log.val_loss = dataset_loss(pipeline, val_set, cfg.loss);
    if (!std::isfinite(log.val_loss)) {
      throw NumericError("epoch " + std::to_string(epoch + 1) + ": non-finite held-out loss");
    }
    log.val_report = evaluate_dataset(pipeline, val_set, cfg.eval_bins);
    if (log.val_loss < best_val) {
      best_val = log.val_loss;
      result.best_epoch = log.epoch;
      if (cfg.keep_best) {
        best_params.clear();
        for (const auto& p : params) best_params.push_back(p.tensor->storage());
      }
    }
    if (on_epoch) on_epoch(log);
    result.epochs.push_back(std::move(log));
  }

  if (cfg.keep_best && !best_params.empty()) {
    for (std::size_t k = 0; k < params.size(); ++k) params[k].tensor->storage() = best_params[k];
  }
  for (const auto& p : params) p.tensor->drop_grad();

  if (!checkpoint.empty()) {
    KeyValues meta = cfg.to_kv();
    meta["best_epoch"] = std::to_string(result.best_epoch);
    meta["best_val_loss"] = fmt(best_val);
    save_checkpoint(checkpoint, pipeline, meta);
  }
  return result;
}

Dataset subset_dataset(const Dataset& data, double frac, std::uint64_t seed) {
  if (data.empty()) throw Error("subset_dataset: empty dataset");
  if (!(frac > 0.0 && frac <= 1.0)) throw ConfigError("subset fraction must lie in (0, 1]");
  auto n = static_cast<std::size_t>(std::llround(frac * static_cast<double>(data.size())));
  n = std::clamp<std::size_t>(n, 1, data.size());
  std::vector<std::size_t> idx(data.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  SplitRng rng = SplitRng(seed).split(0x5b5e7);
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  Dataset out;
  for (std::size_t i : idx) out.push_back(data[i]);
  return out;
}

}  // namespace pncnn
