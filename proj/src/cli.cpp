#include "pncnn/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "pncnn/error.hpp"
#include "pncnn/eval.hpp"
#include "pncnn/fusion.hpp"
#include "pncnn/io.hpp"
#include "pncnn/synth.hpp"
#include "pncnn/training.hpp"

namespace pncnn {

namespace {

constexpr const char* kPipelineKeys[] = {"variant", "unet_channels", "ncnn_layers", "eps", "s_min",
                                         "sigma2_floor", "input_scale", "var_uses_prediction"};
constexpr const char* kTrainKeys[] = {"lr0", "decay_every", "decay_factor", "epochs", "batch",
                                      "beta1", "beta2", "eps_adam", "loss", "val_frac",
                                      "grad_clip", "keep_best", "eval_bins", "augment", "subset_frac"};
constexpr const char* kSynthKeys[] = {"n", "rows", "cols", "depth_min", "depth_max", "max_objects",
                                      "max_bumps", "density", "outlier_frac", "outlier_model",
                                      "noise_sigma", "swap_min_dist", "swap_max_dist", "swap_min_delta", "offset_min",
                                      "offset_max"};

/// Config file values overlaid by explicit flags. Each key `foo_bar` is
/// exposed as `--foo-bar`.
struct KvOptions {
  std::string config_path;
  std::map<std::string, std::string> flags;

  template <std::size_t N>
  void add(CLI::App* app, const char* const (&keys)[N]) {
    for (const char* key : keys) {
      std::string flag = key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      app->add_option_function<std::string>("--" + flag, [this, k = std::string(key)](const std::string& v) {
        flags[k] = v;
      }, std::string("overrides config key ") + key);
    }
  }

  KeyValues resolve(std::uint64_t seed) const {
    KeyValues kv;
    if (!config_path.empty()) kv = read_kv_file(config_path);
    for (const auto& [k, v] : flags) kv[k] = v;
    kv["seed"] = std::to_string(seed);
    return kv;
  }
};

double kv_double(const KeyValues& kv, const std::string& key, double fallback) {
  const auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    std::size_t used = 0;
    const double d = std::stod(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument(key);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("bad number for '" + key + "': '" + it->second + "'");
  }
}

std::size_t kv_size(const KeyValues& kv, const std::string& key, std::size_t fallback) {
  const double d = kv_double(kv, key, static_cast<double>(fallback));
  if (d < 0 || d != static_cast<double>(static_cast<std::size_t>(d))) {
    throw ConfigError("'" + key + "' must be a non-negative integer");
  }
  return static_cast<std::size_t>(d);
}

Grid clamp_for_png(const Grid& g) {
  Grid out = g;
  for (auto& v : out.data) v = std::clamp(v, 0.0, 65535.0 / 256.0);
  return out;
}

Dataset select_split(const Dataset& data, const std::string& split, double val_frac) {
  if (split == "all") return data;
  auto [train_part, val_part] = split_dataset(data, val_frac);
  if (split == "val") return val_part;
  if (split == "train") return train_part;
  throw ConfigError("unknown split '" + split + "' (expected all, train or val)");
}

/// Per-sample prediction and confidence of one ensemble member.
struct MemberOutput {
  std::vector<Grid> pred;
  std::vector<Grid> unc;
};

MemberOutput run_checkpoint(const fs::path& ckpt, const Dataset& data) {
  const Pipeline p = load_pipeline(ckpt);
  MemberOutput m;
  for (const auto& s : data) {
    const auto out = p.predict(s.sparse);
    m.unc.push_back(output_uncertainty(out, p.config().eps));
    m.pred.push_back(out.prediction);
  }
  return m;
}

MemberOutput read_prediction_dir(const fs::path& dir, const Dataset& data) {
  MemberOutput m;
  for (const auto& s : data) {
    const auto exact = dir / "pred" / (s.name + ".cgrd");
    m.pred.push_back(fs::exists(exact) ? read_grid_file(exact)
                                       : read_depth_png(dir / "pred" / (s.name + ".png")));
    const auto unc = dir / "unc" / (s.name + ".cgrd");
    m.unc.push_back(fs::exists(unc) ? read_grid_file(unc) : Grid());
    if (!m.pred.back().same_shape(s.gt)) {
      throw ShapeError("prediction for '" + s.name + "' in '" + dir.string() + "' has the wrong shape");
    }
  }
  return m;
}

void write_member(const fs::path& dir, const Dataset& data, const std::vector<Grid>& pred,
                  const std::vector<Grid>* unc) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    write_depth_png(dir / "pred" / (data[i].name + ".png"), clamp_for_png(pred[i]));
    write_grid_file(dir / "pred" / (data[i].name + ".cgrd"), pred[i]);
    if (unc) write_grid_file(dir / "unc" / (data[i].name + ".cgrd"), (*unc)[i]);
  }
}

EvalReport pooled_report(const Dataset& data, const std::vector<Grid>& pred,
                         const std::vector<Grid>* unc, std::size_t bins) {
  std::vector<double> p, g, u;
  for (std::size_t i = 0; i < data.size(); ++i) {
    p.insert(p.end(), pred[i].data.begin(), pred[i].data.end());
    g.insert(g.end(), data[i].gt.data.begin(), data[i].gt.data.end());
    if (unc) u.insert(u.end(), (*unc)[i].data.begin(), (*unc)[i].data.end());
  }
  return evaluate(p, g, u, bins);
}

int run_synth(const KvOptions& opts, const std::string& out, std::uint64_t seed) {
  const KeyValues kv = opts.resolve(seed);
  SceneSpec scene;
  scene.seed = seed;
  scene.rows = kv_size(kv, "rows", scene.rows);
  scene.cols = kv_size(kv, "cols", scene.cols);
  scene.depth_min = kv_double(kv, "depth_min", scene.depth_min);
  scene.depth_max = kv_double(kv, "depth_max", scene.depth_max);
  scene.max_objects = kv_size(kv, "max_objects", scene.max_objects);
  scene.max_bumps = kv_size(kv, "max_bumps", scene.max_bumps);
  DisturbSpec d;
  d.density = kv_double(kv, "density", d.density);
  d.outlier_frac = kv_double(kv, "outlier_frac", d.outlier_frac);
  if (kv.count("outlier_model")) d.outlier_model = parse_outlier_model(kv.at("outlier_model"));
  d.noise_sigma = kv_double(kv, "noise_sigma", d.noise_sigma);
  d.swap_min_dist = kv_double(kv, "swap_min_dist", d.swap_min_dist);
  d.swap_max_dist = kv_double(kv, "swap_max_dist", d.swap_max_dist);
  d.swap_min_delta = kv_double(kv, "swap_min_delta", d.swap_min_delta);
  d.offset_min = kv_double(kv, "offset_min", d.offset_min);
  d.offset_max = kv_double(kv, "offset_max", d.offset_max);
  const std::size_t n = kv_size(kv, "n", 64);
  save_dataset(out, synth_dataset(scene, d, n));
  std::cout << "wrote " << n << " samples to " << out << '\n';
  return 0;
}

int run_train(const KvOptions& opts, const std::string& data_dir, const std::string& out,
              const std::string& log_path, std::uint64_t seed) {
  KeyValues kv = opts.resolve(seed);
  const PipelineConfig pcfg = PipelineConfig::from_kv(kv);
  if (!kv.count("loss")) kv["loss"] = to_string(default_loss(pcfg.variant));
  const TrainConfig tcfg = TrainConfig::from_kv(kv);
  const double subset = kv_double(kv, "subset_frac", 1.0);

  const Dataset all = load_dataset(data_dir);
  auto [train_set, val_set] = split_dataset(all, tcfg.val_frac);
  if (subset < 1.0) train_set = subset_dataset(train_set, subset, seed);

  Pipeline pipeline(pcfg, seed);
  std::ostringstream csv;
  csv.precision(17);
  csv << "epoch,lr,train_loss,val_loss,val_rmse,val_mae,val_ause\n";
  train(pipeline, train_set, val_set, tcfg, out, [&](const EpochLog& e) {
    std::cerr << "epoch " << e.epoch << " lr=" << e.lr << " train_loss=" << e.train_loss
              << " val_loss=" << e.val_loss << " val_rmse=" << e.val_report.metrics.rmse << '\n';
    csv << e.epoch << ',' << e.lr << ',' << e.train_loss << ',' << e.val_loss << ','
        << e.val_report.metrics.rmse << ',' << e.val_report.metrics.mae << ','
        << e.val_report.sparsification.ause << '\n';
  });
  if (!log_path.empty()) atomic_write_text(log_path, csv.str());
  std::cout << "wrote checkpoint " << out << '\n';
  return 0;
}

int run_eval(const std::string& data_dir, const std::string& ckpt, const std::string& pred_dir,
             const std::string& out, const std::string& split, double val_frac, std::size_t bins,
             bool write_predictions) {
  if (ckpt.empty() == pred_dir.empty()) throw ConfigError("eval: give exactly one of --checkpoint or --pred-dir");
  const Dataset data = select_split(load_dataset(data_dir), split, val_frac);
  const MemberOutput m = ckpt.empty() ? read_prediction_dir(pred_dir, data) : run_checkpoint(ckpt, data);
  const bool has_unc = std::all_of(m.unc.begin(), m.unc.end(), [](const Grid& g) { return g.size() > 0; });
  const EvalReport report = pooled_report(data, m.pred, has_unc ? &m.unc : nullptr, bins);
  write_report(report, out);
  if (write_predictions) write_member(out, data, m.pred, has_unc ? &m.unc : nullptr);
  std::cout << format_report(report);
  return 0;
}

int run_fuse(const std::string& data_dir, const std::vector<std::string>& ckpts,
             const std::vector<std::string>& pred_dirs, const std::string& out,
             const std::string& scheme_name, const MleOptions& mle, const std::string& split,
             double val_frac, std::size_t bins) {
  if (ckpts.empty() == pred_dirs.empty()) throw ConfigError("fuse: give either --checkpoint or --pred-dir members");
  const FusionScheme scheme = parse_fusion_scheme(scheme_name);
  const Dataset data = select_split(load_dataset(data_dir), split, val_frac);
  std::vector<MemberOutput> members;
  for (const auto& c : ckpts) members.push_back(run_checkpoint(c, data));
  for (const auto& d : pred_dirs) members.push_back(read_prediction_dir(d, data));

  std::vector<Grid> fused;
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::vector<Grid> preds, confs;
    for (std::size_t k = 0; k < members.size(); ++k) {
      preds.push_back(members[k].pred[i]);
      const Grid& u = members[k].unc[i];
      Grid c(preds.back().rows, preds.back().cols, std::vector<double>(preds.back().size(), 1.0));
      if (u.size()) {
        if (!u.same_shape(c)) throw ShapeError("fuse: uncertainty shape mismatch for '" + data[i].name + "'");
        for (std::size_t j = 0; j < c.size(); ++j) c.data[j] = 1.0 / std::max(u.data[j], 1e-300);
      } else if (scheme != FusionScheme::Mean) {
        throw ConfigError("fuse: member " + std::to_string(k) + " has no uncertainty for '" + data[i].name + "'");
      }
      confs.push_back(std::move(c));
    }
    fused.push_back(fuse_grids(preds, confs, scheme, mle));
  }
  const EvalReport report = pooled_report(data, fused, nullptr, bins);
  write_report(report, out);
  write_member(out, data, fused, nullptr);
  std::cout << format_report(report);
  return 0;
}

int run_predict(const std::string& ckpt, const std::string& input, const std::string& out_pred,
                const std::string& out_conf, const std::string& out_unc) {
  const Pipeline p = load_pipeline(ckpt);
  const auto out = p.predict(read_depth_png(input));
  write_depth_png(out_pred, clamp_for_png(out.prediction));
  if (!out_conf.empty()) write_grid_file(out_conf, out.out_conf);
  if (!out_unc.empty()) write_grid_file(out_unc, output_uncertainty(out, p.config().eps));
  return 0;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  while (!s.empty() && s.back() == ' ') s.pop_back();
  return s;
}

}  // namespace

int cli_main(int argc, char** argv) {
  CLI::App app{"Sparse signal densification with probabilistic normalized convolution networks", "pncnn"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  KvOptions kv;
  std::string out, data_dir, log_path, ckpt, pred_dir, split = "val", scheme = "mle";
  std::string input, out_conf, out_unc;
  std::vector<std::string> ckpts, pred_dirs;
  double val_frac = 0.1;
  std::size_t bins = kDefaultSparsificationBins;
  bool write_predictions = false;
  MleOptions mle;

  auto* synth = app.add_subcommand("synth", "write a synthetic sparse-depth dataset");
  synth->add_option("--out", out, "output directory")->required();
  synth->add_option("--config", kv.config_path, "key=value config file")->check(CLI::ExistingFile);
  synth->add_option("--seed", seed, "random seed");
  kv.add(synth, kSynthKeys);

  auto* trn = app.add_subcommand("train", "train a pipeline variant and write a checkpoint");
  trn->add_option("--data", data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
  trn->add_option("--out", out, "checkpoint path")->required();
  trn->add_option("--config", kv.config_path, "key=value config file")->check(CLI::ExistingFile);
  trn->add_option("--log", log_path, "per-epoch CSV log");
  trn->add_option("--seed", seed, "random seed (initialization, shuffling, subsets)");
  kv.add(trn, kPipelineKeys);
  kv.add(trn, kTrainKeys);

  auto add_eval_common = [&](CLI::App* sub) {
    sub->add_option("--data", data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
    sub->add_option("--out", out, "output directory")->required();
    sub->add_option("--split", split, "all, train or val")->capture_default_str();
    sub->add_option("--val-frac", val_frac, "held-out fraction used by --split")->capture_default_str();
    sub->add_option("--bins", bins, "sparsification bins")->capture_default_str();
    sub->add_option("--seed", seed, "random seed (unused; accepted for uniformity)");
  };

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint or a prediction directory");
  add_eval_common(ev);
  ev->add_option("--checkpoint", ckpt, "checkpoint file")->check(CLI::ExistingFile);
  ev->add_option("--pred-dir", pred_dir, "directory with pred/<name>.png|.cgrd and unc/<name>.cgrd")
      ->check(CLI::ExistingDirectory);
  ev->add_flag("--write-predictions", write_predictions, "also write pred/ and unc/ grids");

  auto* fu = app.add_subcommand("fuse", "fuse an ensemble of checkpoints or prediction directories");
  add_eval_common(fu);
  fu->add_option("--checkpoint", ckpts, "member checkpoint (repeatable)")->check(CLI::ExistingFile);
  fu->add_option("--pred-dir", pred_dirs, "member prediction directory (repeatable)")
      ->check(CLI::ExistingDirectory);
  fu->add_option("--scheme", scheme, "mean, wmean, maxconf or mle")->capture_default_str();
  fu->add_option("--v2", mle.v2, "mixture component variance")->capture_default_str();
  fu->add_option("--mle-steps", mle.max_steps, "Adam steps per restart")->capture_default_str();
  fu->add_option("--mle-lr", mle.step_lr, "Adam step size")->capture_default_str();

  auto* pr = app.add_subcommand("predict", "densify one sparse depth PNG");
  pr->add_option("--checkpoint", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  pr->add_option("--input", input, "sparse 16-bit depth PNG")->required()->check(CLI::ExistingFile);
  pr->add_option("--out", out, "prediction PNG")->required();
  pr->add_option("--out-conf", out_conf, "output confidence grid file");
  pr->add_option("--out-unc", out_unc, "output uncertainty grid file");
  pr->add_option("--seed", seed, "random seed (unused; accepted for uniformity)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "pncnn: error: " << one_line(e.what()) << '\n';
    return 2;
  }

  try {
    if (*synth) return run_synth(kv, out, seed);
    if (*trn) return run_train(kv, data_dir, out, log_path, seed);
    if (*ev) return run_eval(data_dir, ckpt, pred_dir, out, split, val_frac, bins, write_predictions);
    if (*fu) return run_fuse(data_dir, ckpts, pred_dirs, out, scheme, mle, split, val_frac, bins);
    if (*pr) return run_predict(ckpt, input, out, out_conf, out_unc);
  } catch (const std::exception& e) {
    std::cerr << "pncnn: error: " << one_line(e.what()) << '\n';
    return 1;
  }
  return 1;
}

}  // namespace pncnn
