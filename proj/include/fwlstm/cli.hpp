#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fwlstm/trainer.hpp"

#ifndef FWLSTM_VERSION
#define FWLSTM_VERSION "0.1.0"
#endif

namespace fwlstm {

inline constexpr std::string_view kManifestFormat = "fwlstm-run/1";

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitFailure = 2 };

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Parses "a,b,c" into split sizes.
inline SplitSizes parse_sizes(const std::string& text) {
  std::vector<std::size_t> parts;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size() || v == 0) {
      throw ConfigError("--sizes expects three positive integers 'train,val,test', got '" + text + "'");
    }
    parts.push_back(static_cast<std::size_t>(v));
  }
  if (parts.size() != 3) {
    throw ConfigError("--sizes expects three positive integers 'train,val,test', got '" + text + "'");
  }
  return {parts[0], parts[1], parts[2]};
}

/// Identifies the exact data a run saw.
struct DatasetFingerprint {
  TaskKind kind = TaskKind::art;
  int K = 8;
  SplitSizes sizes;
  std::uint64_t seed = 0;
  std::uint64_t hash = 0;
  std::optional<std::filesystem::path> dir;

  static DatasetFingerprint of(const Dataset& ds, std::optional<std::filesystem::path> dir = {}) {
    return {ds.kind, ds.K, {ds.train.size(), ds.validation.size(), ds.test.size()}, ds.seed,
            dataset_hash(ds), std::move(dir)};
  }
};

inline nlohmann::json to_json(const DatasetFingerprint& f) {
  nlohmann::json j{{"task", task_name(f.kind)},
                   {"K", f.K},
                   {"sizes", {f.sizes.train, f.sizes.validation, f.sizes.test}},
                   {"seed", f.seed},
                   {"hash", hex64(f.hash)}};
  j["dir"] = f.dir ? nlohmann::json(f.dir->string()) : nlohmann::json(nullptr);
  return j;
}

inline DatasetFingerprint fingerprint_from_json(const nlohmann::json& j) {
  DatasetFingerprint f;
  f.kind = parse_task(j.at("task").get<std::string>());
  f.K = j.at("K").get<int>();
  const auto s = j.at("sizes").get<std::vector<std::size_t>>();
  if (s.size() != 3) throw ConfigError("manifest dataset.sizes must have three entries");
  f.sizes = {s[0], s[1], s[2]};
  f.seed = j.at("seed").get<std::uint64_t>();
  f.hash = std::stoull(j.at("hash").get<std::string>(), nullptr, 16);
  if (j.contains("dir") && !j.at("dir").is_null()) f.dir = j.at("dir").get<std::string>();
  return f;
}

/// Self-describing record of one training run, written before training and
/// finalized afterwards.
struct RunManifest {
  std::string kind = "train";
  TrainConfig config;
  DatasetFingerprint dataset;
  std::filesystem::path out_dir;
  std::string started_at;
  std::string finished_at;
  std::string status = "running";
  std::string error;
  std::optional<TrainResult> result;
  int threads = 1;
};

inline nlohmann::json to_json(const RunManifest& m) {
  nlohmann::json j{
      {"format", kManifestFormat},
      {"kind", m.kind},
      {"code_version", FWLSTM_VERSION},
      {"config", to_json(m.config)},
      {"dataset", to_json(m.dataset)},
      {"paths",
       {{"dir", m.out_dir.string()},
        {"metrics", (m.out_dir / "metrics.csv").string()},
        {"best_checkpoint", (m.out_dir / "best.json").string()},
        {"final_checkpoint", (m.out_dir / "final.json").string()}}},
      {"threads", m.threads},
      {"started_at", m.started_at},
      {"finished_at", m.finished_at.empty() ? nlohmann::json(nullptr) : nlohmann::json(m.finished_at)},
      {"status", m.status},
  };
  if (!m.error.empty()) j["error"] = m.error;
  if (m.result) {
    const TrainResult& r = *m.result;
    j["result"] = {{"epochs_run", r.metrics.size()},
                   {"best_epoch", r.best_epoch},
                   {"best_val_acc", r.best_val_acc},
                   {"final_val_acc", r.metrics.empty() ? 0.0 : r.metrics.back().val_acc},
                   {"test_loss", r.test.loss},
                   {"test_accuracy", r.test.accuracy},
                   {"test_n", r.test.n}};
  }
  return j;
}

inline void write_manifest(const RunManifest& m) {
  write_text_file(m.out_dir / "manifest.json", to_json(m).dump(2) + "\n");
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": malformed JSON: " + e.what());
  }
}

/// Trains with a manifest that brackets the run; failures are recorded before
/// being rethrown.
inline TrainResult run_with_manifest(RunManifest manifest, const Dataset& data,
                                     const TrainOptions& base_options = {}) {
  manifest.started_at = utc_timestamp();
  manifest.status = "running";
  std::filesystem::create_directories(manifest.out_dir);
  write_manifest(manifest);
  TrainOptions options = base_options;
  options.out_dir = manifest.out_dir;
  options.threads = manifest.threads;
  try {
    TrainResult r = train(manifest.config, data, options);
    manifest.result = r;
    manifest.status = "completed";
    manifest.finished_at = utc_timestamp();
    write_manifest(manifest);
    return r;
  } catch (const std::exception& e) {
    manifest.status = "failed";
    manifest.error = e.what();
    manifest.finished_at = utc_timestamp();
    write_manifest(manifest);
    throw;
  }
}

/// Loads `--data` when given, otherwise generates the split from the config.
inline Dataset dataset_for(const TrainConfig& cfg, const std::optional<std::filesystem::path>& dir) {
  if (!dir) return build_dataset(cfg.task.kind, cfg.task.K, cfg.task.sizes, cfg.seed);
  Dataset ds = load_dataset(*dir);
  if (ds.kind != cfg.task.kind || ds.K != cfg.task.K) {
    throw ConfigError("data in '" + dir->string() + "' is " + std::string(task_name(ds.kind)) +
                      " K=" + std::to_string(ds.K) + " but the config asks for " +
                      std::string(task_name(cfg.task.kind)) + " K=" + std::to_string(cfg.task.K));
  }
  return ds;
}

/// Rebuilds the exact dataset a manifest recorded, verifying its content hash.
inline Dataset dataset_from_manifest(const DatasetFingerprint& f) {
  Dataset ds = f.dir && std::filesystem::exists(*f.dir) ? load_dataset(*f.dir)
                                                        : build_dataset(f.kind, f.K, f.sizes, f.seed);
  if (dataset_hash(ds) != f.hash) {
    throw IoError("dataset does not match the manifest fingerprint " + hex64(f.hash));
  }
  return ds;
}

struct ReportCell {
  double best_val_acc = -1.0;
  double test_accuracy = 0.0;
};

/// Table-1-shaped summary over every completed manifest below `runs`: one row
/// per (cell kind, hidden size), one column per (task, K). Each cell holds the
/// test accuracy in percent of the run with the highest validation accuracy.
inline std::string build_report(const std::filesystem::path& runs) {
  if (!std::filesystem::is_directory(runs)) throw IoError("'" + runs.string() + "' is not a directory");
  using RowKey = std::pair<int, int>;
  using ColKey = std::pair<int, int>;
  std::map<RowKey, std::map<ColKey, ReportCell>> table;
  std::set<ColKey> columns;
  std::vector<std::filesystem::path> manifests;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(runs)) {
    if (entry.is_regular_file() && entry.path().filename() == "manifest.json") {
      manifests.push_back(entry.path());
    }
  }
  std::sort(manifests.begin(), manifests.end());
  for (const auto& path : manifests) {
    const nlohmann::json j = read_json_file(path);
    if (j.value("format", "") != kManifestFormat || j.value("status", "") != "completed" ||
        !j.contains("result")) {
      continue;
    }
    const TrainConfig c = train_config_from_json(j.at("config"));
    const auto order = [](CellKind k) {
      return k == CellKind::ln_lstm ? 0 : k == CellKind::fw_rnn ? 1 : 2;
    };
    const RowKey row{c.hidden, order(c.cell_kind)};
    const ColKey col{static_cast<int>(c.task.kind), c.task.K};
    columns.insert(col);
    ReportCell& cell = table[row][col];
    const double val = j.at("result").at("best_val_acc").get<double>();
    if (val > cell.best_val_acc) {
      cell.best_val_acc = val;
      cell.test_accuracy = j.at("result").at("test_accuracy").get<double>();
    }
  }
  static const CellKind kinds[] = {CellKind::ln_lstm, CellKind::fw_rnn, CellKind::fw_lstm};
  std::string out = "cell,hidden";
  for (const auto& [task, K] : columns) {
    out += "," + std::string(task_name(static_cast<TaskKind>(task))) + "_K" + std::to_string(K);
  }
  out += "\n";
  for (const auto& [row, cells] : table) {
    out += std::string(cell_kind_name(kinds[row.second])) + "," + std::to_string(row.first);
    for (const ColKey& col : columns) {
      out += ",";
      const auto it = cells.find(col);
      if (it != cells.end()) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "%.1f", 100.0 * it->second.test_accuracy);
        out += buf;
      }
    }
    out += "\n";
  }
  return out;
}

/// Entry point shared by the `fwlstm` tool and the tests. Exit codes: 0 on
/// success, 1 on usage or configuration errors, 2 on runtime failures.
inline int run_cli(std::vector<std::string> args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"Fast-weight LSTM experiments on associative retrieval tasks", "fwlstm"};
  app.require_subcommand(1);

  std::string task_text = "art", sizes_text = "100000,10000,20000";
  int K = 8;
  std::uint64_t seed = 1;
  std::string out_dir, config_path, manifest_path, data_dir, checkpoint_path, data_file, runs_dir,
      report_out;
  int threads = 1, parallel = 1, epochs = 0;

  auto* gen = app.add_subcommand("gen", "Write train/val/test split files");
  gen->add_option("--task", task_text, "art or mart")->required();
  gen->add_option("--k", K, "number of key/value symbols (even, 2..52)")->required();
  gen->add_option("--sizes", sizes_text, "train,val,test example counts");
  gen->add_option("--seed", seed, "dataset seed");
  gen->add_option("--out", out_dir, "output directory")->required();

  auto* trn = app.add_subcommand("train", "Train one model and write metrics, checkpoints and a manifest");
  auto* cfg_opt = trn->add_option("--config", config_path, "TrainConfig JSON file");
  auto* man_opt = trn->add_option("--manifest", manifest_path, "re-run the config and data of a manifest");
  cfg_opt->excludes(man_opt);
  trn->add_option("--data", data_dir, "directory written by gen (default: generate from config)");
  trn->add_option("--out", out_dir, "run directory")->required();
  trn->add_option("--threads", threads, "worker threads per batch")->check(CLI::PositiveNumber);

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a split file");
  ev->add_option("--checkpoint", checkpoint_path, "checkpoint JSON")->required();
  ev->add_option("--data", data_file, "split file written by gen")->required();

  auto* grid = app.add_subcommand("grid", "Run the hyperparameter grid and rank trials");
  grid->add_option("--config", config_path, "base TrainConfig JSON file")->required();
  grid->add_option("--data", data_dir, "directory written by gen");
  grid->add_option("--out", out_dir, "output directory")->required();
  grid->add_option("--parallel", parallel, "concurrent trials")->check(CLI::PositiveNumber);
  grid->add_option("--epochs", epochs, "epoch budget per trial (default: config max_epochs)")
      ->check(CLI::PositiveNumber);

  auto* rep = app.add_subcommand("report", "Summarize run manifests as a results table");
  rep->add_option("--runs", runs_dir, "directory searched recursively for manifests")->required();
  rep->add_option("--out", report_out, "CSV path (default: standard output)");

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "fwlstm: " << e.what() << "\n";
    return kExitUsage;
  }

  const auto optional_path = [](const std::string& s) {
    return s.empty() ? std::optional<std::filesystem::path>{} : std::filesystem::path(s);
  };

  try {
    if (*gen) {
      const Dataset ds = build_dataset(parse_task(task_text), K, parse_sizes(sizes_text), seed);
      save_dataset(out_dir, ds);
      out << "wrote " << out_dir << " hash " << hex64(dataset_hash(ds)) << "\n";
    } else if (*trn) {
      RunManifest m;
      m.out_dir = out_dir;
      m.threads = threads;
      Dataset ds;
      if (!manifest_path.empty()) {
        const nlohmann::json j = read_json_file(manifest_path);
        if (j.value("format", "") != kManifestFormat) {
          throw ConfigError(manifest_path + ": not a run manifest");
        }
        try {
          m.config = train_config_from_json(j.at("config"));
          m.dataset = fingerprint_from_json(j.at("dataset"));
        } catch (const nlohmann::json::exception& e) {
          throw ConfigError(manifest_path + ": malformed manifest: " + e.what());
        }
        if (!data_dir.empty()) m.dataset.dir = data_dir;
        ds = dataset_from_manifest(m.dataset);
      } else if (!config_path.empty()) {
        m.config = train_config_from_json(read_json_file(config_path));
        ds = dataset_for(m.config, optional_path(data_dir));
        m.dataset = DatasetFingerprint::of(ds, optional_path(data_dir));
      } else {
        throw ConfigError("train needs --config or --manifest");
      }
      const TrainResult r = run_with_manifest(m, ds);
      out << nlohmann::json{{"best_epoch", r.best_epoch},
                            {"best_val_acc", r.best_val_acc},
                            {"test_accuracy", r.test.accuracy},
                            {"epochs_run", r.metrics.size()}}
                 .dump()
          << "\n";
    } else if (*ev) {
      const Checkpoint ck = load_checkpoint(checkpoint_path);
      const SplitFile split = read_split(data_file);
      const EvalResult r = evaluate(ck.params, ck.config, encode_all(split.examples));
      out << nlohmann::json{{"loss", r.loss}, {"accuracy", r.accuracy}, {"n", r.n}}.dump() << "\n";
    } else if (*grid) {
      const TrainConfig base = train_config_from_json(read_json_file(config_path));
      const Dataset ds = dataset_for(base, optional_path(data_dir));
      const DatasetFingerprint fp = DatasetFingerprint::of(ds, optional_path(data_dir));
      const std::filesystem::path root = out_dir;
      std::filesystem::create_directories(root);
      const auto run_trial = [&](const TrainConfig& c, std::size_t k) {
        RunManifest m;
        m.kind = "grid-trial";
        m.config = c;
        m.dataset = fp;
        char name[32];
        std::snprintf(name, sizeof name, "trial_%02zu", k);
        m.out_dir = root / name;
        return run_with_manifest(m, ds);
      };
      const auto ranked = grid_search(base, epochs > 0 ? epochs : base.max_epochs, ds, parallel, run_trial);
      const std::string table = format_grid_table(ranked);
      write_text_file(root / "grid.csv", table);
      out << table;
    } else if (*rep) {
      const std::string table = build_report(runs_dir);
      if (report_out.empty()) out << table;
      else write_text_file(report_out, table);
    }
  } catch (const ConfigError& e) {
    err << "fwlstm: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "fwlstm: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace fwlstm
