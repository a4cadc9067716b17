#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fwlstm/tensor.hpp"

namespace fwlstm {

/// 37 symbols: 'a'..'z' -> 0..25, '0'..'9' -> 26..35, '?' -> 36.
struct Vocabulary {
  static constexpr std::size_t kSize = 37;
  static constexpr std::size_t kSeparator = 36;
  static constexpr std::size_t kFirstDigit = 26;

  static constexpr bool contains(char ch) {
    return (ch >= 'a' && ch <= 'z') || (ch >= '0' && ch <= '9') || ch == '?';
  }

  static std::size_t index(char ch) {
    if (ch >= 'a' && ch <= 'z') return static_cast<std::size_t>(ch - 'a');
    if (ch >= '0' && ch <= '9') return kFirstDigit + static_cast<std::size_t>(ch - '0');
    if (ch == '?') return kSeparator;
    throw ConfigError(std::string("symbol '") + ch + "' is not in the vocabulary");
  }

  static char symbol(std::size_t idx) {
    if (idx < 26) return static_cast<char>('a' + idx);
    if (idx < kSeparator) return static_cast<char>('0' + (idx - kFirstDigit));
    if (idx == kSeparator) return '?';
    throw ConfigError("index " + std::to_string(idx) + " is outside the vocabulary");
  }
};

enum class TaskKind { art, mart };

inline std::string_view task_name(TaskKind k) { return k == TaskKind::art ? "art" : "mart"; }

inline TaskKind parse_task(std::string_view s) {
  if (s == "art") return TaskKind::art;
  if (s == "mart") return TaskKind::mart;
  throw ConfigError("unknown task '" + std::string(s) + "' (expected art or mart)");
}

struct Example {
  std::string input;
  char target = '0';
  friend bool operator==(const Example&, const Example&) = default;
};

struct EncodedExample {
  std::vector<std::size_t> indices;
  std::size_t target = 0;
};

inline void check_difficulty(int K) {
  if (K < 2 || K > 52 || K % 2 != 0) {
    throw ConfigError("K must be even and in [2, 52], got " + std::to_string(K));
  }
}

/// Lays out K/2 key/value pairs followed by "??" and the query key.
/// ART interleaves k1 v1 k2 v2 ...; mART lists all keys then all values.
inline Example make_example(TaskKind kind, std::string_view keys, std::string_view values,
                            std::size_t query) {
  if (keys.size() != values.size() || keys.empty() || query >= keys.size()) {
    throw ConfigError("make_example: inconsistent keys/values/query");
  }
  Example e;
  e.input.reserve(2 * keys.size() + 3);
  if (kind == TaskKind::art) {
    for (std::size_t j = 0; j < keys.size(); ++j) {
      e.input.push_back(keys[j]);
      e.input.push_back(values[j]);
    }
  } else {
    e.input.append(keys);
    e.input.append(values);
  }
  e.input.append("??");
  e.input.push_back(keys[query]);
  e.target = values[query];
  return e;
}

/// Keys are drawn without replacement, values with replacement, the query
/// uniformly among the keys.
inline Example generate_example(TaskKind kind, int K, std::mt19937_64& rng) {
  check_difficulty(K);
  const auto pairs = static_cast<std::size_t>(K / 2);
  std::array<char, 26> letters{};
  for (std::size_t j = 0; j < 26; ++j) letters[j] = static_cast<char>('a' + j);
  for (std::size_t j = 0; j < pairs; ++j) {
    std::uniform_int_distribution<std::size_t> pick(j, 25);
    std::swap(letters[j], letters[pick(rng)]);
  }
  std::string values(pairs, '0');
  std::uniform_int_distribution<int> digit(0, 9);
  for (char& v : values) v = static_cast<char>('0' + digit(rng));
  std::uniform_int_distribution<std::size_t> query(0, pairs - 1);
  const std::size_t q = query(rng);
  return make_example(kind, std::string_view(letters.data(), pairs), values, q);
}

inline EncodedExample encode(const Example& e) {
  EncodedExample out;
  out.indices.reserve(e.input.size());
  for (std::size_t pos = 0; pos < e.input.size(); ++pos) {
    const char ch = e.input[pos];
    if (!Vocabulary::contains(ch)) {
      throw ConfigError(std::string("encode: unknown symbol '") + ch + "' at position " +
                        std::to_string(pos));
    }
    out.indices.push_back(Vocabulary::index(ch));
  }
  if (!Vocabulary::contains(e.target)) {
    throw ConfigError(std::string("encode: unknown target symbol '") + e.target + "'");
  }
  out.target = Vocabulary::index(e.target);
  return out;
}

inline Example decode(const EncodedExample& e) {
  Example out;
  out.input.reserve(e.indices.size());
  for (std::size_t idx : e.indices) out.input.push_back(Vocabulary::symbol(idx));
  out.target = Vocabulary::symbol(e.target);
  return out;
}

// ---------------------------------------------------------------------------
// Seeds

/// Mixes a base seed with a role label: splitmix64(seed ^ fnv1a64(label)).
inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
  return splitmix64(seed ^ fnv1a64(label));
}

// ---------------------------------------------------------------------------
// Datasets

struct SplitSizes {
  std::size_t train = 100000;
  std::size_t validation = 10000;
  std::size_t test = 20000;
};

/// Reduced split used for desk-scale runs.
inline constexpr SplitSizes kDeskSplit{20000, 2000, 2000};

inline constexpr std::array<std::string_view, 3> kSplitNames{"train", "val", "test"};

struct Dataset {
  TaskKind kind = TaskKind::art;
  int K = 8;
  std::uint64_t seed = 0;
  std::vector<Example> train;
  std::vector<Example> validation;
  std::vector<Example> test;

  [[nodiscard]] const std::vector<Example>& split(std::string_view name) const {
    if (name == "train") return train;
    if (name == "val") return validation;
    if (name == "test") return test;
    throw ConfigError("unknown split '" + std::string(name) + "'");
  }
};

/// Each split draws from its own stream derived from (seed, split name), so a
/// split can be regenerated without the others.
inline std::vector<Example> generate_split(TaskKind kind, int K, std::size_t n,
                                           std::uint64_t seed, std::string_view split) {
  check_difficulty(K);
  std::mt19937_64 rng(derive_seed(seed, "split:" + std::string(split)));
  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t j = 0; j < n; ++j) out.push_back(generate_example(kind, K, rng));
  return out;
}

inline Dataset build_dataset(TaskKind kind, int K, const SplitSizes& sizes, std::uint64_t seed) {
  if (sizes.train == 0 || sizes.validation == 0 || sizes.test == 0) {
    throw ConfigError("split sizes must be positive");
  }
  Dataset ds;
  ds.kind = kind;
  ds.K = K;
  ds.seed = seed;
  ds.train = generate_split(kind, K, sizes.train, seed, "train");
  ds.validation = generate_split(kind, K, sizes.validation, seed, "val");
  ds.test = generate_split(kind, K, sizes.test, seed, "test");
  return ds;
}

struct SplitHeader {
  TaskKind kind = TaskKind::art;
  int K = 0;
  std::uint64_t seed = 0;
  std::string split;
};

struct SplitFile {
  SplitHeader header;
  std::vector<Example> examples;
};

inline std::string format_split(const SplitHeader& h, const std::vector<Example>& examples) {
  std::string out = "#task=" + std::string(task_name(h.kind)) + " k=" + std::to_string(h.K) +
                    " seed=" + std::to_string(h.seed) + " split=" + h.split + "\n";
  out.reserve(out.size() + examples.size() * (static_cast<std::size_t>(h.K) + 6));
  for (const Example& e : examples) {
    out += e.input;
    out += '\t';
    out += e.target;
    out += '\n';
  }
  return out;
}

inline void write_text_file(const std::filesystem::path& path, std::string_view text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline SplitHeader parse_split_header(std::string_view line, const std::string& where) {
  SplitHeader h;
  if (line.empty() || line.front() != '#') throw IoError(where + ": missing '#task=' header");
  std::istringstream ss{std::string(line.substr(1))};
  std::string field;
  bool has_task = false, has_k = false, has_seed = false, has_split = false;
  while (ss >> field) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw IoError(where + ": malformed header field '" + field + "'");
    const std::string key = field.substr(0, eq);
    const std::string value = field.substr(eq + 1);
    try {
      if (key == "task") {
        h.kind = parse_task(value);
        has_task = true;
      } else if (key == "k") {
        h.K = std::stoi(value);
        has_k = true;
      } else if (key == "seed") {
        h.seed = std::stoull(value);
        has_seed = true;
      } else if (key == "split") {
        h.split = value;
        has_split = true;
      } else {
        throw IoError(where + ": unknown header field '" + key + "'");
      }
    } catch (const std::logic_error&) {
      throw IoError(where + ": bad value in header field '" + field + "'");
    } catch (const ConfigError& e) {
      throw IoError(where + ": " + e.what());
    }
  }
  if (!(has_task && has_k && has_seed && has_split)) {
    throw IoError(where + ": header must carry task, k, seed and split");
  }
  return h;
}

inline SplitFile parse_split(std::string_view text, const std::string& where = "<memory>") {
  SplitFile out;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < text.size()) {
    const std::size_t end = text.find('\n', pos);
    const std::string_view line =
        text.substr(pos, end == std::string_view::npos ? std::string_view::npos : end - pos);
    pos = end == std::string_view::npos ? text.size() : end + 1;
    ++line_no;
    const std::string at = where + ":" + std::to_string(line_no);
    if (line_no == 1) {
      out.header = parse_split_header(line, at);
      continue;
    }
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos || tab + 2 != line.size()) {
      throw IoError(at + ": expected '<input>\\t<target>'");
    }
    Example e{std::string(line.substr(0, tab)), line[tab + 1]};
    for (char ch : e.input) {
      if (!Vocabulary::contains(ch)) throw IoError(at + ": symbol '" + std::string(1, ch) + "' not in vocabulary");
    }
    if (e.target < '0' || e.target > '9') throw IoError(at + ": target must be a digit");
    out.examples.push_back(std::move(e));
  }
  if (line_no == 0) throw IoError(where + ": empty split file");
  return out;
}

inline SplitFile read_split(const std::filesystem::path& path) {
  return parse_split(read_text_file(path), path.string());
}

inline std::filesystem::path split_path(const std::filesystem::path& dir, std::string_view split) {
  return dir / (std::string(split) + ".txt");
}

inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
  for (std::string_view name : kSplitNames) {
    const SplitHeader h{ds.kind, ds.K, ds.seed, std::string(name)};
    write_text_file(split_path(dir, name), format_split(h, ds.split(name)));
  }
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  bool first = true;
  for (std::string_view name : kSplitNames) {
    SplitFile f = read_split(split_path(dir, name));
    if (first) {
      ds.kind = f.header.kind;
      ds.K = f.header.K;
      ds.seed = f.header.seed;
      first = false;
    } else if (f.header.kind != ds.kind || f.header.K != ds.K || f.header.seed != ds.seed) {
      throw IoError("split headers in '" + dir.string() + "' disagree on task/k/seed");
    }
    if (name == "train") ds.train = std::move(f.examples);
    else if (name == "val") ds.validation = std::move(f.examples);
    else ds.test = std::move(f.examples);
  }
  return ds;
}

/// FNV-1a over the three split files as written by save_dataset.
inline std::uint64_t dataset_hash(const Dataset& ds) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::string_view name : kSplitNames) {
    const SplitHeader sh{ds.kind, ds.K, ds.seed, std::string(name)};
    h = fnv1a64(format_split(sh, ds.split(name)), h);
  }
  return h;
}

}  // namespace fwlstm
