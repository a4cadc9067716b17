#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "fwlstm/checkpoint.hpp"
#include "fwlstm/model.hpp"
#include "fwlstm/tasks.hpp"

namespace fwlstm {

enum class OptimizerKind { adam, sgd };

struct TaskConfig {
  TaskKind kind = TaskKind::art;
  int K = 8;
  SplitSizes sizes;
};

/// Every knob of a training run. JSON field names match the member names.
struct TrainConfig {
  double eta = 1.0;
  double lambda = 0.99;
  double learning_rate = 1e-4;
  int anneal_rate = 100;
  double grad_clip = 5.0;
  int batch_size = 128;
  int max_epochs = 150;
  int min_epochs = 1;
  std::uint64_t seed = 1;
  CellKind cell_kind = CellKind::fw_lstm;
  int hidden = 20;
  TaskConfig task;
  int inner_steps = 1;
  GateNorm gate_norm = GateNorm::joint;
  OptimizerKind optimizer = OptimizerKind::adam;
  double forget_bias = 0.0;

  [[nodiscard]] FwConfig fw_config() const {
    FwConfig f;
    f.eta = eta;
    f.lambda = lambda;
    f.inner_steps = inner_steps;
    f.gate_norm = gate_norm;
    f.fast_weights_enabled = uses_fast_weights(cell_kind);
    return f;
  }

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (anneal_rate < 1) throw ConfigError("anneal_rate must be >= 1");
    if (!(grad_clip > 0.0)) throw ConfigError("grad_clip must be > 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
    if (min_epochs < 1 || min_epochs > max_epochs) {
      throw ConfigError("min_epochs must be in [1, max_epochs]");
    }
    if (hidden < 2) throw ConfigError("hidden must be >= 2");
    check_difficulty(task.K);
    if (task.sizes.train == 0 || task.sizes.validation == 0 || task.sizes.test == 0) {
      throw ConfigError("task.sizes must be positive");
    }
    fw_config().validate();
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {
      {"eta", c.eta},
      {"lambda", c.lambda},
      {"learning_rate", c.learning_rate},
      {"anneal_rate", c.anneal_rate},
      {"grad_clip", c.grad_clip},
      {"batch_size", c.batch_size},
      {"max_epochs", c.max_epochs},
      {"min_epochs", c.min_epochs},
      {"seed", c.seed},
      {"cell_kind", cell_kind_name(c.cell_kind)},
      {"hidden", c.hidden},
      {"task",
       {{"kind", task_name(c.task.kind)},
        {"K", c.task.K},
        {"sizes", {c.task.sizes.train, c.task.sizes.validation, c.task.sizes.test}}}},
      {"inner_steps", c.inner_steps},
      {"gate_norm", gate_norm_name(c.gate_norm)},
      {"optimizer", c.optimizer == OptimizerKind::adam ? "adam" : "sgd"},
      {"forget_bias", c.forget_bias},
  };
}

/// Parses a TrainConfig; missing fields keep their defaults, unknown fields are errors.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known{
      "eta",        "lambda", "learning_rate", "anneal_rate", "grad_clip", "batch_size",
      "max_epochs", "min_epochs", "seed",      "cell_kind",   "hidden",    "task",
      "inner_steps", "gate_norm", "optimizer", "forget_bias"};
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  TrainConfig c;
  try {
    if (j.contains("eta")) c.eta = j.at("eta").get<double>();
    if (j.contains("lambda")) c.lambda = j.at("lambda").get<double>();
    if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
    if (j.contains("anneal_rate")) c.anneal_rate = j.at("anneal_rate").get<int>();
    if (j.contains("grad_clip")) c.grad_clip = j.at("grad_clip").get<double>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
    if (j.contains("max_epochs")) c.max_epochs = j.at("max_epochs").get<int>();
    if (j.contains("min_epochs")) c.min_epochs = j.at("min_epochs").get<int>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("cell_kind")) c.cell_kind = parse_cell_kind(j.at("cell_kind").get<std::string>());
    if (j.contains("hidden")) c.hidden = j.at("hidden").get<int>();
    if (j.contains("inner_steps")) c.inner_steps = j.at("inner_steps").get<int>();
    if (j.contains("gate_norm")) c.gate_norm = parse_gate_norm(j.at("gate_norm").get<std::string>());
    if (j.contains("forget_bias")) c.forget_bias = j.at("forget_bias").get<double>();
    if (j.contains("optimizer")) {
      const auto opt = j.at("optimizer").get<std::string>();
      if (opt == "adam") c.optimizer = OptimizerKind::adam;
      else if (opt == "sgd") c.optimizer = OptimizerKind::sgd;
      else throw ConfigError("unknown optimizer '" + opt + "' (expected adam or sgd)");
    }
    if (j.contains("task")) {
      const auto& t = j.at("task");
      for (const auto& [key, _] : t.items()) {
        if (key != "kind" && key != "K" && key != "sizes") {
          throw ConfigError("unknown config key 'task." + key + "'");
        }
      }
      if (t.contains("kind")) c.task.kind = parse_task(t.at("kind").get<std::string>());
      if (t.contains("K")) c.task.K = t.at("K").get<int>();
      if (t.contains("sizes")) {
        const auto s = t.at("sizes").get<std::vector<std::size_t>>();
        if (s.size() != 3) throw ConfigError("task.sizes must list train, val, test sizes");
        c.task.sizes = {s[0], s[1], s[2]};
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Optimizer pieces

/// Rescales all gradients jointly when their global L2 norm exceeds max_norm.
/// Returns the norm before clipping.
inline double clip_gradients(std::vector<Tensor>& grads, double max_norm,
                             const std::vector<std::string>& names = {}) {
  if (!(max_norm > 0.0)) throw ConfigError("clip_gradients: max_norm must be > 0");
  double sq = 0.0;
  for (std::size_t p = 0; p < grads.size(); ++p) {
    if (!grads[p].all_finite()) {
      const std::string which = p < names.size() ? names[p] : "#" + std::to_string(p);
      throw NonFiniteError("non-finite gradient in parameter " + which);
    }
    sq += grads[p].squared_norm();
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (Tensor& g : grads) g *= s;
  }
  return norm;
}

/// base_lr halved once every `anneal_rate` epochs (epoch counted from 0).
inline double anneal_lr(double base_lr, int epoch, int anneal_rate) {
  if (anneal_rate < 1) throw ConfigError("anneal_rate must be >= 1");
  if (epoch < 0) throw ConfigError("epoch must be >= 0");
  return std::ldexp(base_lr, -(epoch / anneal_rate));
}

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::int64_t step = 0;

  static OptimizerState for_params(const std::vector<Tensor*>& params) {
    OptimizerState s;
    for (const Tensor* p : params) {
      s.first_moment.emplace_back(p->rows(), p->cols());
      s.second_moment.emplace_back(p->rows(), p->cols());
    }
    return s;
  }
};

/// Bias-corrected Adam update applied in place.
inline void adam_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
                      OptimizerState& opt, double lr, const AdamHyper& hp = {}) {
  if (params.size() != grads.size() || params.size() != opt.first_moment.size()) {
    throw ShapeError("adam_step: parameter/gradient/state count mismatch");
  }
  opt.step += 1;
  const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(opt.step));
  const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(opt.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& w = *params[p];
    const Tensor& g = grads[p];
    Tensor& m = opt.first_moment[p];
    Tensor& v = opt.second_moment[p];
    if (g.shape() != w.shape() || m.shape() != w.shape()) {
      throw ShapeError("adam_step: shape mismatch at parameter " + std::to_string(p));
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
      v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
      const double update = lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + hp.eps);
      if (!std::isfinite(update)) {
        throw NonFiniteError("adam_step: non-finite update at parameter " + std::to_string(p));
      }
      w[i] -= update;
    }
  }
}

inline void sgd_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
                     double lr) {
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p]->size(); ++i) (*params[p])[i] -= lr * grads[p][i];
  }
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t n = 0;
};

/// Scores any logits producer: accuracy is argmax over all 37 symbols.
inline EvalResult evaluate_predictor(
    const std::function<Tensor(const EncodedExample&)>& logits_of,
    const std::vector<EncodedExample>& split) {
  if (split.empty()) throw ConfigError("evaluate: empty split");
  EvalResult r;
  std::size_t correct = 0;
  for (const EncodedExample& ex : split) {
    const Tensor z = logits_of(ex);
    double zmax = z[0];
    for (double v : z.data()) zmax = std::max(zmax, v);
    double denom = 0.0;
    for (double v : z.data()) denom += std::exp(v - zmax);
    r.loss += -(z[ex.target] - zmax - std::log(denom));
    if (argmax_index(z) == ex.target) ++correct;
  }
  r.n = split.size();
  r.loss /= static_cast<double>(r.n);
  r.accuracy = static_cast<double>(correct) / static_cast<double>(r.n);
  return r;
}

inline EvalResult evaluate(const ModelParams& params, const FwConfig& cfg,
                           const std::vector<EncodedExample>& split) {
  return evaluate_predictor(
      [&](const EncodedExample& ex) {
        Tape tape;
        return forward_sequence(params, cfg, ex.indices, ex.target, tape).prediction.logits;
      },
      split);
}

inline std::vector<EncodedExample> encode_all(const std::vector<Example>& examples) {
  std::vector<EncodedExample> out;
  out.reserve(examples.size());
  for (const Example& e : examples) out.push_back(encode(e));
  return out;
}

// ---------------------------------------------------------------------------
// Batch gradients

struct BatchGradients {
  std::vector<Tensor> grads;  // averaged over the batch
  double loss_sum = 0.0;
  std::size_t correct = 0;
};

/// Per-sequence backward passes, summed in batch order and divided by the
/// batch size. The summation order is fixed, so results do not depend on
/// `threads`.
inline BatchGradients batch_gradients(const ModelParams& params, const FwConfig& cfg,
                                      const std::vector<const EncodedExample*>& batch,
                                      int threads = 1) {
  BatchGradients out;
  if (batch.empty()) return out;
  auto accumulate = [&](SequenceGradients&& sg) {
    out.loss_sum += sg.loss;
    if (out.grads.empty()) {
      out.grads = std::move(sg.grads);
    } else {
      for (std::size_t p = 0; p < out.grads.size(); ++p) out.grads[p] += sg.grads[p];
    }
  };
  if (threads <= 1 || batch.size() == 1) {
    for (const EncodedExample* ex : batch) {
      SequenceGradients sg = sequence_gradients(params, cfg, *ex);
      if (sg.predicted == ex->target) ++out.correct;
      accumulate(std::move(sg));
    }
  } else {
    std::vector<SequenceGradients> per(batch.size());
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t k = static_cast<std::size_t>(w); k < batch.size();
               k += static_cast<std::size_t>(threads)) {
            per[k] = sequence_gradients(params, cfg, *batch[k]);
          }
        } catch (...) {
          errors[static_cast<std::size_t>(w)] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);
    for (std::size_t k = 0; k < batch.size(); ++k) {
      if (per[k].predicted == batch[k]->target) ++out.correct;
      accumulate(std::move(per[k]));
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (Tensor& g : out.grads) g *= inv;
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

struct MetricsRow {
  int epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  double lr = 0.0;
  double grad_norm_mean = 0.0;
  double wall_seconds = 0.0;
};

inline constexpr std::string_view kMetricsHeader =
    "epoch,train_loss,train_acc,val_loss,val_acc,lr,grad_norm_mean,wall_seconds";

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string format_metrics_row(const MetricsRow& r) {
  return std::to_string(r.epoch) + "," + format_double(r.train_loss) + "," +
         format_double(r.train_acc) + "," + format_double(r.val_loss) + "," +
         format_double(r.val_acc) + "," + format_double(r.lr) + "," +
         format_double(r.grad_norm_mean) + "," + format_double(r.wall_seconds);
}

/// Inverse of format_metrics_row.
inline MetricsRow parse_metrics_row(const std::string& line) {
  std::vector<double> f;
  std::stringstream ss(line);
  std::string cell;
  try {
    while (std::getline(ss, cell, ',')) f.push_back(std::stod(cell));
  } catch (const std::exception&) {
    f.clear();
  }
  if (f.size() != 8) throw ConfigError("malformed metrics row '" + line + "'");
  return {static_cast<int>(f[0]), f[1], f[2], f[3], f[4], f[5], f[6], f[7]};
}

class DivergenceError : public Error {
 public:
  using Error::Error;
};

struct TrainOptions {
  /// When set, metrics.csv, best.json and final.json are written here.
  std::optional<std::filesystem::path> out_dir;
  int threads = 1;
  /// Called after every epoch; returning true stops training once epoch >= min_epochs.
  std::function<bool(const MetricsRow&)> on_epoch;
};

struct TrainResult {
  ModelParams final_params;
  ModelParams best_params;
  std::vector<MetricsRow> metrics;
  int best_epoch = 0;
  double best_val_acc = -1.0;
  EvalResult test;  // best-validation parameters on the test split
};

/// Mini-batch BPTT with global-norm clipping and halving learning-rate schedule.
/// Throws DivergenceError on a non-finite loss or gradient; files written for
/// earlier epochs stay in place.
inline TrainResult train(const TrainConfig& cfg, const Dataset& data, const TrainOptions& options = {}) {
  cfg.validate();
  const FwConfig fw = cfg.fw_config();
  const auto train_set = encode_all(data.train);
  const auto val_set = encode_all(data.validation);
  const auto test_set = encode_all(data.test);
  if (train_set.empty() || val_set.empty()) throw ConfigError("train: empty train or validation split");

  TrainResult result;
  result.final_params = init_model(cfg.cell_kind, static_cast<std::size_t>(cfg.hidden),
                                   derive_seed(cfg.seed, "model"), cfg.forget_bias);
  result.best_params = result.final_params;
  ModelParams& params = result.final_params;
  const std::vector<std::string> names = params.names();
  std::vector<Tensor*> tensors = params.tensors();
  OptimizerState opt = OptimizerState::for_params(tensors);

  std::ofstream metrics_os;
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir);
    metrics_os.open(*options.out_dir / "metrics.csv", std::ios::binary | std::ios::trunc);
    if (!metrics_os) throw IoError("cannot open metrics.csv in '" + options.out_dir->string() + "'");
    metrics_os << kMetricsHeader << '\n' << std::flush;
  }

  std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, "shuffle"));
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto start = std::chrono::steady_clock::now();
  const auto batch = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const double lr = anneal_lr(cfg.learning_rate, epoch - 1, cfg.anneal_rate);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    double norm_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t first = 0; first < order.size(); first += batch) {
      const std::size_t last = std::min(order.size(), first + batch);
      std::vector<const EncodedExample*> members;
      members.reserve(last - first);
      for (std::size_t k = first; k < last; ++k) members.push_back(&train_set[order[k]]);
      BatchGradients bg = batch_gradients(params, fw, members, options.threads);
      if (!std::isfinite(bg.loss_sum)) {
        throw DivergenceError("non-finite training loss at epoch " + std::to_string(epoch));
      }
      double norm = 0.0;
      try {
        norm = clip_gradients(bg.grads, cfg.grad_clip, names);
        if (cfg.optimizer == OptimizerKind::adam) {
          adam_step(tensors, bg.grads, opt, lr);
        } else {
          sgd_step(tensors, bg.grads, lr);
        }
      } catch (const NonFiniteError& e) {
        throw DivergenceError(std::string(e.what()) + " at epoch " + std::to_string(epoch));
      }
      loss_sum += bg.loss_sum;
      correct += bg.correct;
      norm_sum += norm;
      ++batches;
    }

    const EvalResult val = evaluate(params, fw, val_set);
    if (!std::isfinite(val.loss)) {
      throw DivergenceError("non-finite validation loss at epoch " + std::to_string(epoch));
    }
    MetricsRow row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(train_set.size());
    row.train_acc = static_cast<double>(correct) / static_cast<double>(train_set.size());
    row.val_loss = val.loss;
    row.val_acc = val.accuracy;
    row.lr = lr;
    row.grad_norm_mean = norm_sum / static_cast<double>(batches);
    row.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.metrics.push_back(row);

    if (val.accuracy > result.best_val_acc) {
      result.best_val_acc = val.accuracy;
      result.best_epoch = epoch;
      result.best_params = params;
      if (options.out_dir) save_checkpoint(*options.out_dir / "best.json", params, fw);
    }
    if (options.out_dir) {
      save_checkpoint(*options.out_dir / "final.json", params, fw);
      metrics_os << format_metrics_row(row) << '\n' << std::flush;
    }
    if (options.on_epoch && options.on_epoch(row) && epoch >= cfg.min_epochs) break;
  }

  if (!test_set.empty()) result.test = evaluate(result.best_params, fw, test_set);
  return result;
}

// ---------------------------------------------------------------------------
// Grid search

struct GridPoint {
  double eta = 1.0;
  double lambda = 0.99;
  double grad_clip = 5.0;
  double learning_rate = 1e-4;
  int anneal_rate = 100;
};

/// The hyperparameter grid in enumeration order (eta outermost, anneal_rate
/// innermost). Cells without fast weights collapse eta to a single value,
/// leaving 16 combinations; their two lambda values differ only in trial seed.
inline std::vector<GridPoint> appendix_grid(CellKind kind) {
  std::vector<double> etas{1.0, 0.75, 0.5, 0.25, 0.1};
  const std::vector<double> lambdas{0.99, 0.9};
  if (!uses_fast_weights(kind)) etas.resize(1);
  std::vector<GridPoint> out;
  for (double eta : etas)
    for (double lambda : lambdas)
      for (double clip : {1.0, 5.0})
        for (double lr : {1e-4, 1e-5})
          for (int anneal : {100, 10}) out.push_back({eta, lambda, clip, lr, anneal});
  return out;
}

struct TrialResult {
  std::size_t index = 0;
  GridPoint point;
  std::uint64_t seed = 0;
  double best_val_acc = 0.0;
  int best_epoch = 0;
  double final_val_acc = 0.0;
  int epochs_run = 0;
  std::string status = "completed";
  std::string error;
};

inline TrainConfig trial_config(const TrainConfig& base, const GridPoint& pt, std::size_t index,
                                int budget) {
  TrainConfig c = base;
  c.eta = pt.eta;
  c.lambda = pt.lambda;
  c.grad_clip = pt.grad_clip;
  c.learning_rate = pt.learning_rate;
  c.anneal_rate = pt.anneal_rate;
  c.max_epochs = budget;
  c.min_epochs = std::min(base.min_epochs, budget);
  c.seed = derive_seed(base.seed, "trial:" + std::to_string(index));
  return c;
}

/// Sorts by best validation accuracy, descending; ties keep enumeration order.
inline void rank_trials(std::vector<TrialResult>& trials) {
  std::stable_sort(trials.begin(), trials.end(), [](const TrialResult& a, const TrialResult& b) {
    return a.best_val_acc > b.best_val_acc;
  });
}

/// Runs one trial per grid point; `run_trial` lets callers attach output
/// directories. A diverged trial is recorded, not rethrown.
inline std::vector<TrialResult> grid_search(
    const TrainConfig& base, int budget, const Dataset& data, int parallel = 1,
    const std::function<TrainResult(const TrainConfig&, std::size_t)>& run_trial = {}) {
  if (budget < 1) throw ConfigError("grid budget must be >= 1 epoch");
  const std::vector<GridPoint> grid = appendix_grid(base.cell_kind);
  std::vector<TrialResult> trials(grid.size());
  auto run = [&](std::size_t k) {
    TrialResult& t = trials[k];
    t.index = k;
    t.point = grid[k];
    const TrainConfig c = trial_config(base, grid[k], k, budget);
    t.seed = c.seed;
    try {
      const TrainResult r = run_trial ? run_trial(c, k) : train(c, data);
      t.best_val_acc = r.best_val_acc;
      t.best_epoch = r.best_epoch;
      t.final_val_acc = r.metrics.empty() ? 0.0 : r.metrics.back().val_acc;
      t.epochs_run = static_cast<int>(r.metrics.size());
    } catch (const DivergenceError& e) {
      t.status = "diverged";
      t.error = e.what();
    }
  };
  if (parallel <= 1) {
    for (std::size_t k = 0; k < grid.size(); ++k) run(k);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(parallel));
    for (int w = 0; w < parallel; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t k = static_cast<std::size_t>(w); k < grid.size();
               k += static_cast<std::size_t>(parallel)) {
            run(k);
          }
        } catch (...) {
          errors[static_cast<std::size_t>(w)] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  rank_trials(trials);
  return trials;
}

inline constexpr std::string_view kGridHeader =
    "rank,trial,eta,lambda,grad_clip,learning_rate,anneal_rate,seed,best_val_acc,best_epoch,"
    "final_val_acc,epochs_run,status";

inline std::string format_grid_table(const std::vector<TrialResult>& ranked) {
  std::string out(kGridHeader);
  out += '\n';
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    const TrialResult& t = ranked[r];
    out += std::to_string(r + 1) + "," + std::to_string(t.index) + "," + format_double(t.point.eta) +
           "," + format_double(t.point.lambda) + "," + format_double(t.point.grad_clip) + "," +
           format_double(t.point.learning_rate) + "," + std::to_string(t.point.anneal_rate) + "," +
           std::to_string(t.seed) + "," + format_double(t.best_val_acc) + "," +
           std::to_string(t.best_epoch) + "," + format_double(t.final_val_acc) + "," +
           std::to_string(t.epochs_run) + "," + t.status + "\n";
  }
  return out;
}

}  // namespace fwlstm
