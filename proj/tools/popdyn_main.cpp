// Command-line front end: dataset generation, model fitting, rollout
// prediction, metric reports, and potential-surface export. Every command
// echoes its resolved configuration next to its outputs so a run can be
// reproduced from the echo plus the seed alone.
//
// Exit codes: 0 success, 2 configuration error, 3 data/shape error,
// 4 numeric failure.

#include "popdyn/checkpoint.hpp"
#include "popdyn/datagen.hpp"
#include "popdyn/dataset.hpp"
#include "popdyn/energy.hpp"
#include "popdyn/forward_model.hpp"
#include "popdyn/metrics.hpp"
#include "popdyn/trainer.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace popdyn;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const std::string& path, const std::string& text) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write file: " + path);
  out << text;
  if (!out) throw DataError("write failed: " + path);
}

void write_echo(const std::string& out_dir, const json& echo) {
  spit((fs::path(out_dir) / "run_config.json").string(), echo.dump(2) + "\n");
}

// Checkpoints do not record the model dimension separately; recover it from
// the first energy layer, whose rows match the input width.
Index model_dim(const ckpt::Checkpoint& c) { return c.xi.w.at(0).rows(); }

train::TrainConfig config_of(const ckpt::Checkpoint& c) {
  return train::train_config_from_json(c.config_json);
}

struct LoadedModel {
  ckpt::Checkpoint c;
  std::vector<Mat> roll(const Mat& mu0, int T, train::PredictMode mode,
                        const std::vector<Mat>& truths) const {
    if (c.kind == "forward") {
      fwd::ForwardModel m{c.xi, config_of(c), true};
      return fwd::predict_trajectory(m, mu0, T, mode, truths);
    }
    train::JkonetModel m{c.xi, config_of(c), true};
    return train::predict_trajectory(m, mu0, T, mode, truths);
  }
};

void write_loss_log(const std::string& path, const std::vector<train::TrainStepLog>& log) {
  std::ostringstream ss;
  ss << "step,epoch,trajectory,transition,loss,grad_norm,inner_iterations,inner_converged\n";
  char buf[64];
  for (std::size_t i = 0; i < log.size(); ++i) {
    const train::TrainStepLog& l = log[i];
    ss << (i + 1) << ',' << l.epoch << ',' << l.trajectory << ',' << l.transition << ',';
    std::snprintf(buf, sizeof buf, "%.17g", l.loss);
    ss << buf << ',';
    std::snprintf(buf, sizeof buf, "%.17g", l.grad_norm);
    ss << buf << ',' << l.inner_iterations << ',' << (l.inner_converged ? 1 : 0) << '\n';
  }
  spit(path, ss.str());
}

int cmd_generate(const std::string& kind, long n, std::uint64_t seed, const std::string& split,
                 double point_sd, long dim, double init_scale, std::vector<double> offset,
                 bool classical, double corrupt_fraction, double corrupt_scale,
                 std::uint64_t corrupt_seed, const std::string& out_dir) {
  data::SnapshotDataset ds;
  const bool potential = kind == "quadratic" || kind == "styblinski";
  if (potential) {
    data::PotentialOptions opt;
    opt.dim = dim;
    opt.init_scale = init_scale;
    opt.classical_styblinski = classical;
    if (!offset.empty()) {
      opt.offset = Vec::Zero((Index)offset.size());
      for (std::size_t i = 0; i < offset.size(); ++i) opt.offset((Index)i) = offset[i];
    }
    ds = data::make_potential_dataset(kind, n, seed, opt);
    ds.split = split;
  } else {
    ds = data::make_trajectory_dataset(kind, n, point_sd, seed, split);
  }
  if (corrupt_fraction > 0.0) ds = data::corrupt(ds, corrupt_fraction, corrupt_scale, corrupt_seed);
  data::save_dataset(ds, out_dir);

  json echo;
  echo["command"] = "generate";
  echo["kind"] = kind;
  echo["n"] = n;
  echo["seed"] = seed;
  echo["split"] = split;
  if (!potential) echo["point_sd"] = point_sd;
  if (potential) {
    echo["dim"] = dim;
    echo["init_scale"] = init_scale;
    echo["offset"] = offset;
    echo["classical"] = classical;
  }
  if (corrupt_fraction > 0.0) {
    echo["corrupt_fraction"] = corrupt_fraction;
    echo["corrupt_scale"] = corrupt_scale;
    echo["corrupt_seed"] = corrupt_seed;
  }
  echo["out"] = out_dir;
  write_echo(out_dir, echo);
  std::cout << "generated " << ds.snapshots.size() << " snapshots (" << kind << ", n=" << n
            << ") -> " << out_dir << "\n";
  return 0;
}

int cmd_train(const std::string& model_kind, const std::string& data_dir,
              const train::TrainConfig& cfg, const std::string& out_dir) {
  if (model_kind != "jkonet" && model_kind != "forward")
    throw ConfigError("train: unknown model kind '" + model_kind + "' (jkonet | forward)");
  data::SnapshotDataset ds = data::load_dataset(data_dir);

  fs::create_directories(out_dir);
  train::CheckpointSink sink = [&](const ckpt::Checkpoint& c) {
    ckpt::save_checkpoint(c, (fs::path(out_dir) / "checkpoint.bin").string());
    if (cfg.checkpoint_every > 0 && c.step % cfg.checkpoint_every == 0) {
      std::ostringstream name;
      name << "checkpoint_step" << c.step << ".bin";
      ckpt::save_checkpoint(c, (fs::path(out_dir) / name.str()).string());
    }
  };

  std::vector<train::TrainStepLog> log;
  double best_loss = 0.0;
  long best_step = 0;
  if (model_kind == "jkonet") {
    train::TrainResult res = train::train_jkonet({ds}, cfg, sink);
    log = std::move(res.log);
    best_loss = res.best_loss;
    best_step = res.best_step;
  } else {
    fwd::ForwardTrainResult res = fwd::train_forward({ds}, cfg, sink);
    log = std::move(res.log);
    best_loss = res.best_loss;
    best_step = res.best_step;
  }
  write_loss_log((fs::path(out_dir) / "loss_log.csv").string(), log);

  json echo;
  echo["command"] = "train";
  echo["model"] = model_kind;
  echo["data"] = data_dir;
  echo["out"] = out_dir;
  echo["train_config"] = json::parse(train::to_json(cfg));
  write_echo(out_dir, echo);
  std::cout << "trained " << model_kind << " for " << log.size() << " outer steps (best loss "
            << best_loss << " at step " << best_step << ") -> " << out_dir << "\n";
  return 0;
}

int cmd_predict(const std::string& ckpt_path, const std::string& data_dir,
                const std::string& mode_name, long steps, const std::string& out_dir) {
  LoadedModel m{ckpt::load_checkpoint(ckpt_path)};
  data::SnapshotDataset ds = data::load_dataset(data_dir);
  train::PredictMode mode = train::parse_predict_mode(mode_name);
  int T = steps > 0 ? (int)steps : (int)ds.transitions();
  std::vector<Mat> truths(ds.snapshots.begin() + 1, ds.snapshots.end());
  std::vector<Mat> out = m.roll(ds.snapshots[0], T, mode, truths);

  data::SnapshotDataset pred;
  pred.name = ds.name + "-pred";
  pred.dim = ds.dim;
  pred.snapshots = out;
  pred.timestamps.assign(ds.timestamps.begin(),
                         ds.timestamps.begin() + std::min<std::size_t>(out.size(),
                                                                       ds.timestamps.size()));
  while (pred.timestamps.size() < out.size())
    pred.timestamps.push_back(pred.timestamps.empty() ? 0.0 : pred.timestamps.back() + 1.0);
  pred.generator = "predict";
  json params;
  params["checkpoint"] = ckpt_path;
  params["mode"] = mode_name;
  params["steps"] = T;
  pred.params_json = params.dump();
  pred.seed = m.c.seed;
  pred.split = ds.split;
  data::save_dataset(pred, (fs::path(out_dir) / "predictions").string());

  json echo;
  echo["command"] = "predict";
  echo["checkpoint"] = ckpt_path;
  echo["data"] = data_dir;
  echo["mode"] = mode_name;
  echo["steps"] = T;
  echo["out"] = out_dir;
  write_echo(out_dir, echo);
  std::cout << "predicted " << T << " transitions (" << mode_name << ") -> " << out_dir << "\n";
  return 0;
}

int cmd_evaluate(const std::string& ckpt_path, const std::string& data_dir, double eps, long knn_k,
                 const std::string& out_dir) {
  LoadedModel m{ckpt::load_checkpoint(ckpt_path)};
  data::SnapshotDataset ds = data::load_dataset(data_dir);
  if (ds.transitions() < 1) throw DataError("evaluate: dataset has no transitions");
  const int T = (int)ds.transitions();
  std::vector<Mat> truths(ds.snapshots.begin() + 1, ds.snapshots.end());

  int k_classes = 0;
  if (ds.has_labels())
    for (const std::vector<int>& ls : ds.labels)
      for (int l : ls) k_classes = std::max(k_classes, l + 1);

  std::vector<metrics::MetricRow> rows;
  for (train::PredictMode mode : {train::PredictMode::one_step, train::PredictMode::all_steps}) {
    const std::string mode_name =
        mode == train::PredictMode::one_step ? "one-step" : "all-steps";
    std::vector<Mat> out = m.roll(ds.snapshots[0], T, mode, truths);
    std::vector<Mat> preds(out.begin() + 1, out.end());
    metrics::StepLossReport rep = metrics::prediction_loss_per_step(preds, truths, eps);
    for (int t = 0; t < T; ++t) {
      rows.push_back({"w_eps", mode_name, t + 1, rep.w_eps[(std::size_t)t], m.c.seed});
      rows.push_back({"w_debiased", mode_name, t + 1, rep.w_debiased[(std::size_t)t], m.c.seed});
    }
    rows.push_back({"w_eps_mean", mode_name, 0, rep.mean_w_eps(), m.c.seed});
    rows.push_back({"w_debiased_mean", mode_name, 0, rep.mean_w_debiased(), m.c.seed});

    if (k_classes > 0) {
      for (int t = 0; t < T; ++t) {
        const std::vector<int>& truth_labels = ds.labels[(std::size_t)t + 1];
        std::vector<int> pred_labels = metrics::knn_classify(
            truths[(std::size_t)t], truth_labels, preds[(std::size_t)t], (int)knn_k);
        metrics::ClassHistogram ph = metrics::class_histogram(pred_labels, k_classes);
        metrics::ClassHistogram th = metrics::class_histogram(truth_labels, k_classes);
        rows.push_back(
            {"hellinger", mode_name, t + 1, metrics::hellinger(ph, th), m.c.seed});
        rows.push_back(
            {"l1_histogram", mode_name, t + 1, metrics::l1_histogram(ph, th), m.c.seed});
      }
    }
  }
  if (k_classes == 0)
    std::cout << "note: dataset has no labels; class metrics skipped\n";

  fs::create_directories(out_dir);
  {
    std::ofstream os((fs::path(out_dir) / "metrics.csv").string(),
                     std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write metrics.csv in " + out_dir);
    metrics::write_metric_rows(os, rows);
  }

  json echo;
  echo["command"] = "evaluate";
  echo["checkpoint"] = ckpt_path;
  echo["data"] = data_dir;
  echo["eps"] = eps;
  echo["knn_k"] = knn_k;
  echo["out"] = out_dir;
  write_echo(out_dir, echo);
  std::cout << "evaluated " << T << " transitions in both modes -> " << out_dir << "\n";
  return 0;
}

int cmd_export_grid(const std::string& ckpt_path, std::vector<double> bounds, long resolution,
                    const std::string& out_path) {
  LoadedModel m{ckpt::load_checkpoint(ckpt_path)};
  if (model_dim(m.c) != 2)
    throw ConfigError("export-grid: only 2-dimensional models can be exported (model dim " +
                      std::to_string(model_dim(m.c)) + ")");
  if (bounds.size() != 2 || !(bounds[0] < bounds[1]))
    throw ConfigError("export-grid: bounds must be lo,hi with lo < hi");
  if (resolution < 2) throw ConfigError("export-grid: resolution must be at least 2");

  const double lo = bounds[0], hi = bounds[1];
  std::ostringstream ss;
  char buf[96];
  Mat p(1, 2);
  for (long i = 0; i < resolution; ++i) {
    const double x = lo + (hi - lo) * (double)i / (double)(resolution - 1);
    for (long j = 0; j < resolution; ++j) {
      const double y = lo + (hi - lo) * (double)j / (double)(resolution - 1);
      p(0, 0) = x;
      p(0, 1) = y;
      const double v = energy::values(m.c.xi, p)(0);
      std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", x, y, v);
      ss << buf;
    }
  }
  spit(out_path, ss.str());

  json echo;
  echo["command"] = "export-grid";
  echo["checkpoint"] = ckpt_path;
  echo["bounds"] = bounds;
  echo["resolution"] = resolution;
  echo["out"] = out_path;
  fs::path out(out_path);
  spit((out.has_parent_path() ? out.parent_path() / (out.stem().string() + "_run_config.json")
                              : fs::path(out.stem().string() + "_run_config.json"))
           .string(),
       echo.dump(2) + "\n");
  std::cout << "exported " << resolution * resolution << " grid values (" << m.c.kind << ") -> "
            << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"popdyn: learn free-energy functionals from population snapshots"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "Write a synthetic snapshot dataset");
  std::string g_kind, g_split = "train", g_out;
  long g_n = 200, g_dim = 2;
  std::uint64_t g_seed = 0;
  double g_point_sd = 0.5, g_init_scale = 1.5, g_cfrac = 0.0, g_cscale = 0.0;
  std::vector<double> g_offset;
  bool g_classical = false;
  bool g_cseed_given = false;
  std::uint64_t g_cseed = 0;
  gen->add_option("--kind", g_kind,
                  "quadratic | styblinski | semicircle | spiral | line")->required();
  gen->add_option("--n", g_n, "points per snapshot (default 200)");
  gen->add_option("--seed", g_seed, "generator seed (default 0)");
  gen->add_option("--split", g_split, "train | test (default train)");
  gen->add_option("--point-sd", g_point_sd,
                  "cloud standard deviation for trajectory kinds (default 0.5)");
  gen->add_option("--dim", g_dim, "dimension for potential kinds (default 2)");
  gen->add_option("--init-scale", g_init_scale,
                  "initial-cloud scale for potential kinds (default 1.5)");
  gen->add_option("--offset", g_offset, "initial-cloud center for potential kinds (d values)")
      ->delimiter(',');
  gen->add_flag("--classical", g_classical,
                "use the classical Styblinski-Tang potential instead of the printed form");
  gen->add_option("--corrupt-fraction", g_cfrac, "fraction of points to shift (default 0)");
  gen->add_option("--corrupt-scale", g_cscale, "uniform shift bound per coordinate");
  auto* cseed_opt = gen->add_option("--corrupt-seed", g_cseed, "corruption seed (default seed+1)");
  gen->add_option("--out", g_out, "output dataset directory")->required();

  // train
  auto* tr = app.add_subcommand("train", "Fit a model on a dataset directory");
  std::string t_model = "jkonet", t_data, t_out, t_config;
  std::uint64_t t_seed = 0;
  long t_epochs = 0, t_batch = 0, t_ckpt_every = 0, t_min_iters = 0, t_max_iters = 0;
  long t_fixed_iters = 0, t_hidden = 0, t_depth = 0;
  double t_lr_xi = 0, t_eps = 0, t_tau = 0, t_ell = 0, t_clip = 0, t_lr_theta = 0, t_alpha = 0;
  bool t_tf = true, t_warm = false;
  tr->add_option("--model", t_model, "jkonet | forward (default jkonet)");
  tr->add_option("--data", t_data, "dataset directory")->required();
  tr->add_option("--config", t_config, "JSON training-config file (flags override it)");
  tr->add_option("--seed", t_seed, "training seed");
  tr->add_option("--epochs", t_epochs, "passes over the dataset");
  tr->add_option("--lr-xi", t_lr_xi, "outer learning rate");
  tr->add_option("--batch-size", t_batch, "points subsampled per cloud");
  tr->add_option("--eps", t_eps, "Sinkhorn regularization of the outer loss");
  tr->add_option("--tau", t_tau, "proximal step weight");
  tr->add_option("--ell", t_ell, "strong-convexity augmentation of the inner map");
  tr->add_option("--teacher-forcing", t_tf, "condition each step on the true snapshot (0|1)");
  tr->add_option("--warm-start", t_warm, "reuse the previous inner solution (0|1)");
  tr->add_option("--clip-norm", t_clip, "global-norm bound on the outer gradient");
  tr->add_option("--checkpoint-every", t_ckpt_every, "also keep every k-th checkpoint");
  tr->add_option("--lr-theta", t_lr_theta, "inner learning rate");
  tr->add_option("--min-iters", t_min_iters, "inner iteration floor");
  tr->add_option("--max-iters", t_max_iters, "inner iteration ceiling");
  tr->add_option("--alpha", t_alpha, "inner stopping tolerance");
  tr->add_option("--fixed-iters", t_fixed_iters, "exact inner iteration count (0: stopping rule)");
  tr->add_option("--hidden-width", t_hidden, "inner map hidden width");
  tr->add_option("--icnn-depth", t_depth, "inner map depth");
  tr->add_option("--out", t_out, "output directory")->required();

  // predict
  auto* pr = app.add_subcommand("predict", "Roll a checkpoint forward from a dataset's start");
  std::string p_ckpt, p_data, p_mode = "all-steps", p_out;
  long p_steps = 0;
  pr->add_option("--checkpoint", p_ckpt, "model checkpoint file")->required();
  pr->add_option("--data", p_data, "dataset directory (initial cloud and truths)")->required();
  pr->add_option("--mode", p_mode, "one-step | all-steps (default all-steps)");
  pr->add_option("--steps", p_steps, "transitions to roll (default: dataset's)");
  pr->add_option("--out", p_out, "output directory")->required();

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Write metric reports for a checkpoint on a dataset");
  std::string e_ckpt, e_data, e_out;
  double e_eps = 1.0;
  long e_k = 5;
  ev->add_option("--checkpoint", e_ckpt, "model checkpoint file")->required();
  ev->add_option("--data", e_data, "dataset directory")->required();
  ev->add_option("--eps", e_eps, "Sinkhorn regularization of the reported losses (default 1.0)");
  ev->add_option("--knn-k", e_k, "neighbors for label transfer (default 5)");
  ev->add_option("--out", e_out, "output directory")->required();

  // export-grid
  auto* ex = app.add_subcommand("export-grid", "Evaluate the learned potential on a square grid");
  std::string x_ckpt, x_out;
  std::vector<double> x_bounds{-4.0, 4.0};
  long x_res = 100;
  ex->add_option("--checkpoint", x_ckpt, "model checkpoint file")->required();
  ex->add_option("--bounds", x_bounds, "lo,hi of the square domain (default -4,4)")
      ->delimiter(',')
      ->expected(2);
  ex->add_option("--resolution", x_res, "grid points per axis (default 100)");
  ex->add_option("--out", x_out, "output file (x,y,value rows)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) {
      if (!cseed_opt->count()) g_cseed = g_seed + 1;
      (void)g_cseed_given;
      return cmd_generate(g_kind, g_n, g_seed, g_split, g_point_sd, g_dim, g_init_scale, g_offset,
                          g_classical, g_cfrac, g_cscale, g_cseed, g_out);
    }
    if (tr->parsed()) {
      train::TrainConfig cfg;
      if (tr->count("--config")) cfg = train::train_config_from_json(slurp(t_config));
      if (tr->count("--seed")) cfg.seed = t_seed;
      if (tr->count("--epochs")) cfg.epochs = (int)t_epochs;
      if (tr->count("--lr-xi")) cfg.lr_xi = t_lr_xi;
      if (tr->count("--batch-size")) cfg.batch_size = t_batch;
      if (tr->count("--eps")) cfg.eps = t_eps;
      if (tr->count("--tau")) cfg.jko.tau = t_tau;
      if (tr->count("--ell")) cfg.jko.ell = t_ell;
      if (tr->count("--teacher-forcing")) cfg.teacher_forcing = t_tf;
      if (tr->count("--warm-start")) cfg.warm_start = t_warm;
      if (tr->count("--clip-norm")) cfg.clip_norm = t_clip;
      if (tr->count("--checkpoint-every")) cfg.checkpoint_every = (int)t_ckpt_every;
      if (tr->count("--lr-theta")) cfg.jko.lr_theta = t_lr_theta;
      if (tr->count("--min-iters")) cfg.jko.min_iters = (int)t_min_iters;
      if (tr->count("--max-iters")) cfg.jko.max_iters = (int)t_max_iters;
      if (tr->count("--alpha")) cfg.jko.alpha = t_alpha;
      if (tr->count("--fixed-iters")) cfg.jko.fixed_iters = (int)t_fixed_iters;
      if (tr->count("--hidden-width")) cfg.hidden_width = t_hidden;
      if (tr->count("--icnn-depth")) cfg.icnn_depth = t_depth;
      return cmd_train(t_model, t_data, cfg, t_out);
    }
    if (pr->parsed()) return cmd_predict(p_ckpt, p_data, p_mode, p_steps, p_out);
    if (ev->parsed()) return cmd_evaluate(e_ckpt, e_data, e_eps, e_k, e_out);
    if (ex->parsed()) return cmd_export_grid(x_ckpt, x_bounds, x_res, x_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
