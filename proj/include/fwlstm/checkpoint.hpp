#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "fwlstm/cells.hpp"
#include "fwlstm/model.hpp"
#include "fwlstm/tasks.hpp"

namespace fwlstm {

inline constexpr std::string_view kCheckpointFormat = "fwlstm-checkpoint/1";

inline nlohmann::json tensor_to_json(const Tensor& t) {
  return {{"shape", {t.rows(), t.cols()}}, {"data", t.values()}};
}

inline Tensor tensor_from_json(const nlohmann::json& j, const std::string& name) {
  try {
    const auto shape = j.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 2) throw IoError("checkpoint entry '" + name + "': shape must have 2 dims");
    return Tensor(shape[0], shape[1], j.at("data").get<std::vector<double>>());
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint entry '" + name + "': " + e.what());
  } catch (const ShapeError& e) {
    throw IoError("checkpoint entry '" + name + "': " + e.what());
  }
}

inline nlohmann::json fw_config_to_json(const FwConfig& cfg) {
  return {{"eta", cfg.eta},
          {"lambda", cfg.lambda},
          {"inner_steps", cfg.inner_steps},
          {"fast_weights_enabled", cfg.fast_weights_enabled},
          {"gate_norm", gate_norm_name(cfg.gate_norm)}};
}

inline FwConfig fw_config_from_json(const nlohmann::json& j) {
  FwConfig cfg;
  cfg.eta = j.at("eta").get<double>();
  cfg.lambda = j.at("lambda").get<double>();
  cfg.inner_steps = j.at("inner_steps").get<int>();
  cfg.fast_weights_enabled = j.at("fast_weights_enabled").get<bool>();
  cfg.gate_norm = parse_gate_norm(j.at("gate_norm").get<std::string>());
  cfg.validate();
  return cfg;
}

struct Checkpoint {
  ModelParams params;
  FwConfig config;
};

/// Serializes to a JSON document whose "params" object maps canonical names
/// (`embedding`, `cell.W_i`, ...) to shape plus row-major data. Keys are
/// sorted and doubles print in shortest round-trip form, so identical
/// parameters always produce identical bytes.
inline std::string checkpoint_to_string(const ModelParams& params, const FwConfig& cfg) {
  nlohmann::json j;
  j["format"] = kCheckpointFormat;
  j["cell_kind"] = cell_kind_name(params.kind);
  j["hidden"] = params.hidden();
  j["fw_config"] = fw_config_to_json(cfg);
  nlohmann::json entries = nlohmann::json::object();
  ModelParams::visit(params, [&](const std::string& name, const Tensor& t) {
    entries[name] = tensor_to_json(t);
  });
  j["params"] = std::move(entries);
  return j.dump() + "\n";
}

inline Checkpoint checkpoint_from_string(const std::string& text, const std::string& where) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(where + ": " + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != kCheckpointFormat) {
      throw IoError(where + ": unsupported checkpoint format");
    }
    const CellKind kind = parse_cell_kind(j.at("cell_kind").get<std::string>());
    const auto hidden = j.at("hidden").get<std::size_t>();
    Checkpoint ck;
    ck.config = fw_config_from_json(j.at("fw_config"));
    ck.params = init_model(kind, hidden, 0);
    const auto& entries = j.at("params");
    std::size_t seen = 0;
    ModelParams::visit(ck.params, [&](const std::string& name, Tensor& t) {
      if (!entries.contains(name)) throw IoError(where + ": missing parameter '" + name + "'");
      Tensor loaded = tensor_from_json(entries.at(name), name);
      if (loaded.shape() != t.shape()) {
        throw IoError(where + ": parameter '" + name + "' has shape " + loaded.shape().str() +
                      ", expected " + t.shape().str());
      }
      t = std::move(loaded);
      ++seen;
    });
    if (seen != entries.size()) throw IoError(where + ": checkpoint has unexpected parameters");
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(where + ": " + e.what());
  } catch (const ConfigError& e) {
    throw IoError(where + ": " + e.what());
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                            const FwConfig& cfg) {
  write_text_file(path, checkpoint_to_string(params, cfg));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_string(read_text_file(path), path.string());
}

}  // namespace fwlstm
