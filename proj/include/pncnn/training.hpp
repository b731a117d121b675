#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "pncnn/eval.hpp"
#include "pncnn/io.hpp"
#include "pncnn/losses.hpp"
#include "pncnn/networks.hpp"
#include "pncnn/synth.hpp"

namespace pncnn {

struct TrainConfig {
  double lr0 = 0.01;
  int decay_every = 3;
  double decay_factor = 0.1;
  int epochs = 30;
  std::size_t batch = 4;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_adam = 1e-8;
  LossKind loss = LossKind::Gauss;
  double val_frac = 0.1;
  /// Global gradient-norm clip; 0 disables it.
  double grad_clip = 0.0;
  /// Restore the parameters of the epoch with the lowest held-out loss at the end.
  bool keep_best = true;
  std::size_t eval_bins = kDefaultSparsificationBins;
  /// Random horizontal/vertical flips of each training sample.
  bool augment = false;

  void validate() const;
  KeyValues to_kv() const;
  /// Unknown keys are ignored so one file can hold pipeline and training keys.
  static TrainConfig from_kv(const KeyValues& kv, TrainConfig base);
  static TrainConfig from_kv(const KeyValues& kv);
};

/// Loss a variant is trained with unless configured otherwise.
LossKind default_loss(Variant v);

/// lr0 * decay_factor ^ floor(epoch / decay_every).
double lr_schedule(const TrainConfig& cfg, int epoch);

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t t = 0;
};

/// One Adam update of every parameter from its current gradient.
void adam_step(const std::vector<Parameter>& params, AdamState& state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

/// Uncertainty used for evaluation: s for probabilistic variants, otherwise
/// the inverse output confidence.
Grid output_uncertainty(const PipelineOutput& out, double eps = 1e-8);

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  EvalReport val_report;
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  int best_epoch = 0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Mean loss over valid pixels of a whole dataset (no gradients).
double dataset_loss(const Pipeline& p, const Dataset& data, LossKind kind);

/// Pooled evaluation over every pixel with gt > 0.
EvalReport evaluate_dataset(const Pipeline& p, const Dataset& data,
                            std::size_t bins = kDefaultSparsificationBins);

/// Trains on `train_set` and evaluates on `val_set` after each epoch. Writes a
/// checkpoint to `checkpoint` when it is non-empty.
TrainResult train(Pipeline& pipeline, const Dataset& train_set, const Dataset& val_set,
                  const TrainConfig& cfg, const std::filesystem::path& checkpoint = {},
                  const EpochCallback& on_epoch = {});

/// Deterministic random subset of round(frac * n) samples (at least one), in
/// original order.
Dataset subset_dataset(const Dataset& data, double frac, std::uint64_t seed);

}  // namespace pncnn
