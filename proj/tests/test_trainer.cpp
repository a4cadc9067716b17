#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "fwlstm/trainer.hpp"

namespace fwlstm {
namespace {

namespace fs = std::filesystem;

Tensor random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Tensor t(r, c);
  for (double& v : t.data()) v = d(rng);
  return t;
}

double global_norm(const std::vector<Tensor>& g) {
  double s = 0.0;
  for (const Tensor& t : g) s += t.squared_norm();
  return std::sqrt(s);
}

TEST(ClipGradients, ScalesDownAboveThreshold) {
  std::vector<Tensor> g{Tensor::column({6.0, 0.0}), Tensor::column({8.0})};
  EXPECT_DOUBLE_EQ(clip_gradients(g, 5.0), 10.0);
  EXPECT_EQ(g[0], Tensor::column({3.0, 0.0}));
  EXPECT_EQ(g[1], Tensor::column({4.0}));
  EXPECT_DOUBLE_EQ(global_norm(g), 5.0);
}

TEST(ClipGradients, LeavesSmallAndZeroGradients) {
  std::vector<Tensor> g{Tensor::column({3.0, 0.0})};
  clip_gradients(g, 5.0);
  EXPECT_EQ(g[0], Tensor::column({3.0, 0.0}));
  std::vector<Tensor> z{Tensor(3, 2)};
  EXPECT_EQ(clip_gradients(z, 5.0), 0.0);
  EXPECT_EQ(z[0], Tensor(3, 2));
}

TEST(ClipGradients, NonFiniteNamesParameter) {
  std::vector<Tensor> g{Tensor::column({1.0}), Tensor::column({INFINITY})};
  try {
    clip_gradients(g, 1.0, {"cell.W", "cell.C"});
    FAIL();
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("cell.C"), std::string::npos);
  }
  EXPECT_THROW(clip_gradients(g, 0.0), ConfigError);
}

TEST(ClipGradients, PostClipNormNeverExceedsMax) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Tensor> g{random_tensor(5, 4, rng, 0.1 + trial), random_tensor(7, 1, rng, 2.0)};
    const double max_norm = 0.5 + (trial % 10);
    clip_gradients(g, max_norm);
    EXPECT_LE(global_norm(g), max_norm + 1e-12);
  }
}

TEST(AnnealLr, Examples) {
  EXPECT_DOUBLE_EQ(anneal_lr(1e-4, 100, 100), 5e-5);
  EXPECT_DOUBLE_EQ(anneal_lr(1e-4, 0, 100), 1e-4);
  EXPECT_DOUBLE_EQ(anneal_lr(1e-4, 25, 10), 2.5e-5);
  EXPECT_THROW(anneal_lr(1e-4, 1, 0), ConfigError);
}

TEST(AnnealLr, NonIncreasingAndHalvesAtMultiples) {
  for (int rate : {1, 3, 10, 100}) {
    for (int e = 1; e < 500; ++e) {
      EXPECT_LE(anneal_lr(1e-3, e, rate), anneal_lr(1e-3, e - 1, rate));
      if (e % rate == 0) EXPECT_EQ(anneal_lr(1e-3, e, rate), anneal_lr(1e-3, e - 1, rate) / 2);
      else EXPECT_EQ(anneal_lr(1e-3, e, rate), anneal_lr(1e-3, e - 1, rate));
    }
  }
}

TEST(Adam, FirstStepMovesBySignTimesLr) {
  Tensor w = Tensor::column({1.0, -2.0, 0.5});
  std::vector<Tensor*> params{&w};
  OptimizerState opt = OptimizerState::for_params(params);
  adam_step(params, {Tensor::column({0.3, -7.0, 1e-3})}, opt, 1e-2);
  EXPECT_NEAR(w[0], 1.0 - 1e-2, 1e-9);
  EXPECT_NEAR(w[1], -2.0 + 1e-2, 1e-9);
  EXPECT_NEAR(w[2], 0.5 - 1e-2, 1e-7);
  EXPECT_EQ(opt.step, 1);
}

TEST(Adam, ZeroGradientFromFreshStateIsNoOp) {
  Tensor w = Tensor::column({1.0, -2.0});
  std::vector<Tensor*> params{&w};
  OptimizerState opt = OptimizerState::for_params(params);
  adam_step(params, {Tensor(2, 1)}, opt, 1e-2);
  EXPECT_EQ(w, Tensor::column({1.0, -2.0}));
}

// Straight-line Adam recurrence on flat arrays.
void reference_adam(std::vector<double>& w, std::vector<double>& m, std::vector<double>& v,
                    const std::vector<double>& g, int t, double lr) {
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (std::size_t i = 0; i < w.size(); ++i) {
    m[i] = b1 * m[i] + (1 - b1) * g[i];
    v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
    const double mh = m[i] / (1 - std::pow(b1, t));
    const double vh = v[i] / (1 - std::pow(b2, t));
    w[i] = w[i] - lr * mh / (std::sqrt(vh) + eps);
  }
}

TEST(Adam, MatchesReferenceTrajectory) {
  std::mt19937_64 rng(10);
  Tensor a = random_tensor(3, 2, rng);
  Tensor b = random_tensor(4, 1, rng);
  std::vector<double> ref(a.data().begin(), a.data().end());
  ref.insert(ref.end(), b.data().begin(), b.data().end());
  std::vector<double> m(ref.size(), 0.0), v(ref.size(), 0.0);
  std::vector<Tensor*> params{&a, &b};
  OptimizerState opt = OptimizerState::for_params(params);
  for (int t = 1; t <= 10; ++t) {
    const Tensor ga = random_tensor(3, 2, rng);
    const Tensor gb = random_tensor(4, 1, rng);
    adam_step(params, {ga, gb}, opt, 3e-3);
    std::vector<double> flat(ga.data().begin(), ga.data().end());
    flat.insert(flat.end(), gb.data().begin(), gb.data().end());
    reference_adam(ref, m, v, flat, t, 3e-3);
  }
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], ref[i], 1e-12);
  for (std::size_t i = 0; i < b.size(); ++i) EXPECT_NEAR(b[i], ref[a.size() + i], 1e-12);
}

TEST(Evaluate, OracleAndConstantAndUniformPredictors) {
  const auto split = encode_all(generate_split(TaskKind::mart, 8, 20000, 1, "test"));
  const EvalResult oracle = evaluate_predictor(
      [](const EncodedExample& ex) {
        Tensor z(37, 1);
        z[ex.target] = 1.0;
        return z;
      },
      split);
  EXPECT_EQ(oracle.accuracy, 1.0);
  EXPECT_EQ(oracle.n, split.size());
  const EvalResult constant = evaluate_predictor(
      [](const EncodedExample&) {
        Tensor z(37, 1);
        z[Vocabulary::index('4')] = 1.0;
        return z;
      },
      split);
  EXPECT_NEAR(constant.accuracy, 0.1, 0.01);
  const EvalResult uniform =
      evaluate_predictor([](const EncodedExample&) { return Tensor(37, 1); }, split);
  EXPECT_NEAR(uniform.loss, std::log(37.0), 1e-12);
  EXPECT_EQ(uniform.accuracy, 0.0);  // ties resolve to index 0, never a digit
  EXPECT_THROW(evaluate_predictor([](const EncodedExample&) { return Tensor(37, 1); }, {}), ConfigError);
}

TEST(BatchGradients, DuplicatingExamplesLeavesAverageUnchanged) {
  const ModelParams p = init_model(CellKind::fw_lstm, 6, 2);
  const auto ex = encode_all(generate_split(TaskKind::art, 8, 8, 2, "train"));
  std::vector<const EncodedExample*> once, twice;
  for (const auto& e : ex) {
    once.push_back(&e);
    twice.push_back(&e);
    twice.push_back(&e);
  }
  const BatchGradients a = batch_gradients(p, FwConfig{}, once);
  const BatchGradients b = batch_gradients(p, FwConfig{}, twice);
  for (std::size_t k = 0; k < a.grads.size(); ++k)
    for (std::size_t i = 0; i < a.grads[k].size(); ++i)
      EXPECT_NEAR(a.grads[k][i], b.grads[k][i], 1e-12 * std::max(1.0, std::abs(a.grads[k][i])));
}

TEST(BatchGradients, ThreadCountDoesNotChangeBits) {
  const ModelParams p = init_model(CellKind::fw_rnn, 5, 2);
  const auto ex = encode_all(generate_split(TaskKind::art, 8, 9, 2, "train"));
  std::vector<const EncodedExample*> batch;
  for (const auto& e : ex) batch.push_back(&e);
  const BatchGradients a = batch_gradients(p, FwConfig{}, batch, 1);
  const BatchGradients b = batch_gradients(p, FwConfig{}, batch, 3);
  EXPECT_EQ(a.loss_sum, b.loss_sum);
  EXPECT_EQ(a.correct, b.correct);
  for (std::size_t k = 0; k < a.grads.size(); ++k) EXPECT_EQ(a.grads[k], b.grads[k]);
}

TEST(Training, LossDecreasesOverFirstAdamSteps) {
  int decreasing = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ModelParams p = init_model(CellKind::fw_lstm, 20, seed);
    const auto ex = encode_all(generate_split(TaskKind::art, 8, 16, seed, "train"));
    std::vector<const EncodedExample*> batch;
    for (const auto& e : ex) batch.push_back(&e);
    std::vector<Tensor*> tensors = p.tensors();
    OptimizerState opt = OptimizerState::for_params(tensors);
    double prev = INFINITY;
    bool ok = true;
    for (int step = 0; step <= 5; ++step) {
      BatchGradients bg = batch_gradients(p, FwConfig{}, batch);
      if (bg.loss_sum >= prev) ok = false;
      prev = bg.loss_sum;
      clip_gradients(bg.grads, 5.0);
      adam_step(tensors, bg.grads, opt, 1e-4);
    }
    decreasing += ok ? 1 : 0;
  }
  EXPECT_GE(decreasing, 9);
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.hidden = 6;
  c.batch_size = 8;
  c.max_epochs = 2;
  c.learning_rate = 1e-3;
  c.task = {TaskKind::art, 4, {40, 10, 10}};
  c.seed = 5;
  return c;
}

TEST(Training, DeterministicAcrossRuns) {
  const TrainConfig c = tiny_config();
  const Dataset ds = build_dataset(c.task.kind, c.task.K, c.task.sizes, c.seed);
  const TrainResult a = train(c, ds);
  const TrainResult b = train(c, ds);
  ASSERT_EQ(a.metrics.size(), 2u);
  ASSERT_EQ(b.metrics.size(), 2u);
  for (std::size_t e = 0; e < 2; ++e) {
    EXPECT_EQ(a.metrics[e].train_loss, b.metrics[e].train_loss);
    EXPECT_EQ(a.metrics[e].val_loss, b.metrics[e].val_loss);
    EXPECT_EQ(a.metrics[e].val_acc, b.metrics[e].val_acc);
    EXPECT_EQ(a.metrics[e].grad_norm_mean, b.metrics[e].grad_norm_mean);
  }
  EXPECT_EQ(checkpoint_to_string(a.final_params, c.fw_config()),
            checkpoint_to_string(b.final_params, c.fw_config()));
}

TEST(Training, WritesMetricsAndCheckpoints) {
  const fs::path dir = fs::temp_directory_path() / "fwlstm_trainer_out";
  fs::remove_all(dir);
  TrainConfig c = tiny_config();
  c.max_epochs = 3;
  c.anneal_rate = 2;
  const Dataset ds = build_dataset(c.task.kind, c.task.K, c.task.sizes, c.seed);
  TrainOptions opt;
  opt.out_dir = dir;
  const TrainResult r = train(c, ds, opt);
  EXPECT_EQ(r.metrics.size(), 3u);
  for (std::size_t e = 0; e < r.metrics.size(); ++e) EXPECT_EQ(r.metrics[e].epoch, static_cast<int>(e + 1));
  EXPECT_EQ(r.metrics[2].lr, c.learning_rate / 2);
  const std::string csv = read_text_file(dir / "metrics.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), kMetricsHeader);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_TRUE(fs::exists(dir / "best.json"));
  EXPECT_TRUE(fs::exists(dir / "final.json"));
  const Checkpoint best = load_checkpoint(dir / "best.json");
  EXPECT_EQ(best.params.kind, CellKind::fw_lstm);
  std::istringstream rows(csv);
  std::string line;
  std::getline(rows, line);
  for (const MetricsRow& m : r.metrics) {
    ASSERT_TRUE(std::getline(rows, line));
    const MetricsRow back = parse_metrics_row(line);
    EXPECT_EQ(back.epoch, m.epoch);
    EXPECT_EQ(back.val_acc, m.val_acc);
    EXPECT_EQ(back.grad_norm_mean, m.grad_norm_mean);
  }
  EXPECT_THROW(parse_metrics_row("1,2,3"), ConfigError);
}

TEST(Training, EpochCallbackStopsAfterMinEpochs) {
  TrainConfig c = tiny_config();
  c.max_epochs = 6;
  c.min_epochs = 3;
  const Dataset ds = build_dataset(c.task.kind, c.task.K, c.task.sizes, c.seed);
  TrainOptions opt;
  opt.on_epoch = [](const MetricsRow&) { return true; };
  EXPECT_EQ(train(c, ds, opt).metrics.size(), 3u);
}

TEST(Training, OverfitsFiftyExamples) {
  TrainConfig c;
  c.cell_kind = CellKind::fw_lstm;
  c.hidden = 20;
  c.eta = 1.0;
  c.lambda = 0.99;
  c.grad_clip = 5.0;
  c.learning_rate = 1e-4;
  c.anneal_rate = 100;
  c.batch_size = 1;
  c.max_epochs = 200;
  c.task = {TaskKind::art, 8, {50, 10, 10}};
  c.seed = 1;
  const Dataset ds = build_dataset(c.task.kind, c.task.K, c.task.sizes, c.seed);
  TrainOptions opt;
  const auto train_set = encode_all(ds.train);
  opt.on_epoch = [](const MetricsRow& r) { return r.train_acc == 1.0; };
  const TrainResult r = train(c, ds, opt);
  EXPECT_EQ(evaluate(r.final_params, c.fw_config(), train_set).accuracy, 1.0)
      << "epochs run " << r.metrics.size();
}

TEST(Config, JsonRoundTripAndUnknownKeys) {
  TrainConfig c = tiny_config();
  c.cell_kind = CellKind::fw_rnn;
  c.gate_norm = GateNorm::per_gate;
  c.inner_steps = 2;
  const TrainConfig back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  nlohmann::json j = to_json(c);
  j["learning_rat"] = 1e-3;
  EXPECT_THROW(train_config_from_json(j), ConfigError);
  j = to_json(c);
  j["task"]["k"] = 8;
  EXPECT_THROW(train_config_from_json(j), ConfigError);
  j = to_json(c);
  j["min_epochs"] = 5;
  EXPECT_THROW(train_config_from_json(j), ConfigError);
  j = to_json(c);
  j["hidden"] = "twenty";
  EXPECT_THROW(train_config_from_json(j), ConfigError);
  EXPECT_THROW(train_config_from_json(nlohmann::json::array()), ConfigError);
}

TEST(Grid, CardinalityAndOrder) {
  const auto full = appendix_grid(CellKind::fw_lstm);
  EXPECT_EQ(full.size(), 80u);
  EXPECT_EQ(appendix_grid(CellKind::fw_rnn).size(), 80u);
  EXPECT_EQ(appendix_grid(CellKind::ln_lstm).size(), 16u);
  EXPECT_EQ(full.front().eta, 1.0);
  EXPECT_EQ(full.front().anneal_rate, 100);
  EXPECT_EQ(full[1].anneal_rate, 10);
  EXPECT_EQ(full.back().eta, 0.1);
  EXPECT_EQ(full.back().lambda, 0.9);
  std::set<std::tuple<double, double, double, double, int>> distinct;
  for (const GridPoint& g : full) distinct.insert({g.eta, g.lambda, g.grad_clip, g.learning_rate, g.anneal_rate});
  EXPECT_EQ(distinct.size(), 80u);
}

TEST(Grid, RankingBreaksTiesByEnumerationOrder) {
  std::vector<TrialResult> t(4);
  const double acc[] = {0.5, 0.9, 0.5, 0.9};
  for (std::size_t k = 0; k < 4; ++k) {
    t[k].index = k;
    t[k].best_val_acc = acc[k];
  }
  rank_trials(t);
  EXPECT_EQ(t[0].index, 1u);
  EXPECT_EQ(t[1].index, 3u);
  EXPECT_EQ(t[2].index, 0u);
  EXPECT_EQ(t[3].index, 2u);
}

TEST(Grid, SmokeRunOnLnLstm) {
  TrainConfig c = tiny_config();
  c.cell_kind = CellKind::ln_lstm;
  c.task.sizes = {16, 8, 8};
  const Dataset ds = build_dataset(c.task.kind, c.task.K, c.task.sizes, c.seed);
  const auto ranked = grid_search(c, 1, ds);
  ASSERT_EQ(ranked.size(), 16u);
  for (std::size_t k = 1; k < ranked.size(); ++k) {
    EXPECT_GE(ranked[k - 1].best_val_acc, ranked[k].best_val_acc);
    if (ranked[k - 1].best_val_acc == ranked[k].best_val_acc) {
      EXPECT_LT(ranked[k - 1].index, ranked[k].index);
    }
  }
  const std::string table = format_grid_table(ranked);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 17);
}

}  // namespace
}  // namespace fwlstm
