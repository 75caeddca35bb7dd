#pragma once

// Flat `key = value` run configuration.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lr2flow/checkpoint.hpp"
#include "lr2flow/dataset.hpp"
#include "lr2flow/train.hpp"

namespace lr2flow {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  Task task = Task::Rescale;
  BankKind bank = BankKind::LinearBspline;
  Shape patch{16, 16};
  std::size_t levels = 1;
  std::size_t blocks = 4;
  BlockKind block_kind = BlockKind::Coupling;
  std::size_t width = 64;
  std::size_t hidden_layers = 2;
  double lipschitz = 0.9;
  double alpha = 2.0;
  RescaleLossWeights rescale;
  DenoiseLossWeights denoise;
  double lr = 2e-4;
  std::vector<std::size_t> milestones;
  double weight_decay = 0.0;
  std::size_t steps = 2000;
  std::size_t batch = 16;
  std::uint64_t seed = 0;
  DatasetKind dataset = DatasetKind::SyntheticBandlimited;
  std::string dataset_path;
  std::size_t train_count = 4096;
  std::size_t val_count = 64;
  std::vector<int> qualities{50, 55, 60, 65, 70, 75, 80, 85, 90};
  int eval_quality = 75;
  RoundingMode rounding = RoundingMode::AdditiveNoise;
  double noise_sigma = 25.0 / 255.0;
  std::size_t val_every = 100;
  std::size_t checkpoint_every = 0;
  std::size_t head_width = 64;
  std::size_t head_hidden = 2;
  std::string input;
  std::string checkpoint;
  double temperature = 0.0;
  std::size_t samples = 1;
  std::string out;
};

namespace config_detail {

template <class T>
std::vector<T> parse_list(const std::string& v) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    const auto a = tok.find_first_not_of(" \t"), b = tok.find_last_not_of(" \t");
    if (a == std::string::npos) continue;
    std::istringstream is(tok.substr(a, b - a + 1));
    T x{};
    if (!(is >> x) || !is.eof()) throw std::invalid_argument("bad list element '" + tok + "'");
    out.push_back(x);
  }
  return out;
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

inline std::size_t to_size(const std::string& v) {
  if (v.empty() || v[0] == '-') throw std::invalid_argument("expected a nonnegative integer, got '" + v + "'");
  std::size_t pos = 0;
  const unsigned long long x = std::stoull(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("expected an integer, got '" + v + "'");
  return static_cast<std::size_t>(x);
}

inline double to_double(const std::string& v) {
  std::size_t pos = 0;
  const double x = std::stod(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("expected a number, got '" + v + "'");
  return x;
}

inline const char* rounding_name(RoundingMode r) { return r == RoundingMode::AdditiveNoise ? "noise" : "ste"; }

inline RoundingMode parse_rounding(const std::string& v) {
  if (v == "noise") return RoundingMode::AdditiveNoise;
  if (v == "ste") return RoundingMode::StraightThrough;
  throw std::invalid_argument("unknown rounding '" + v + "' (noise|ste)");
}

inline const char* dataset_name(DatasetKind k) { return k == DatasetKind::SyntheticBandlimited ? "synthetic" : "image"; }

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<std::pair<std::string, Field>>& fields() {
  using C = RunConfig;
  using S = const std::string&;
  static const std::vector<std::pair<std::string, Field>> table = {
      {"task", {[](C& c, S v) { c.task = parse_task(v); }, [](const C& c) { return std::string(task_name(c.task)); }}},
      {"bank", {[](C& c, S v) { c.bank = parse_bank_kind(v); }, [](const C& c) { return make_bank(c.bank).name; }}},
      {"patch", {[](C& c, S v) { c.patch = parse_shape_list(v); }, [](const C& c) { return format_shape_list(c.patch); }}},
      {"levels", {[](C& c, S v) { c.levels = to_size(v); }, [](const C& c) { return std::to_string(c.levels); }}},
      {"blocks", {[](C& c, S v) { c.blocks = to_size(v); }, [](const C& c) { return std::to_string(c.blocks); }}},
      {"block_kind",
       {[](C& c, S v) { c.block_kind = parse_block_kind(v); }, [](const C& c) { return std::string(block_kind_name(c.block_kind)); }}},
      {"width", {[](C& c, S v) { c.width = to_size(v); }, [](const C& c) { return std::to_string(c.width); }}},
      {"hidden_layers",
       {[](C& c, S v) { c.hidden_layers = to_size(v); }, [](const C& c) { return std::to_string(c.hidden_layers); }}},
      {"lipschitz", {[](C& c, S v) { c.lipschitz = to_double(v); }, [](const C& c) { return double_str(c.lipschitz); }}},
      {"alpha", {[](C& c, S v) { c.alpha = to_double(v); }, [](const C& c) { return double_str(c.alpha); }}},
      {"lambda_hr", {[](C& c, S v) { c.rescale.hr = to_double(v); }, [](const C& c) { return double_str(c.rescale.hr); }}},
      {"lambda_lr", {[](C& c, S v) { c.rescale.lr = to_double(v); }, [](const C& c) { return double_str(c.rescale.lr); }}},
      {"lambda_dist", {[](C& c, S v) { c.rescale.dist = to_double(v); }, [](const C& c) { return double_str(c.rescale.dist); }}},
      {"lambda_img", {[](C& c, S v) { c.denoise.img = to_double(v); }, [](const C& c) { return double_str(c.denoise.img); }}},
      {"lambda_lf", {[](C& c, S v) { c.denoise.lf = to_double(v); }, [](const C& c) { return double_str(c.denoise.lf); }}},
      {"lambda_hf", {[](C& c, S v) { c.denoise.hf = to_double(v); }, [](const C& c) { return double_str(c.denoise.hf); }}},
      {"lr", {[](C& c, S v) { c.lr = to_double(v); }, [](const C& c) { return double_str(c.lr); }}},
      {"milestones",
       {[](C& c, S v) { c.milestones = parse_list<std::size_t>(v); }, [](const C& c) { return join(c.milestones); }}},
      {"weight_decay", {[](C& c, S v) { c.weight_decay = to_double(v); }, [](const C& c) { return double_str(c.weight_decay); }}},
      {"steps", {[](C& c, S v) { c.steps = to_size(v); }, [](const C& c) { return std::to_string(c.steps); }}},
      {"batch", {[](C& c, S v) { c.batch = to_size(v); }, [](const C& c) { return std::to_string(c.batch); }}},
      {"seed", {[](C& c, S v) { c.seed = to_size(v); }, [](const C& c) { return std::to_string(c.seed); }}},
      {"dataset",
       {[](C& c, S v) { c.dataset = parse_dataset_kind(v); }, [](const C& c) { return std::string(dataset_name(c.dataset)); }}},
      {"dataset_path", {[](C& c, S v) { c.dataset_path = v; }, [](const C& c) { return c.dataset_path; }}},
      {"train_count", {[](C& c, S v) { c.train_count = to_size(v); }, [](const C& c) { return std::to_string(c.train_count); }}},
      {"val_count", {[](C& c, S v) { c.val_count = to_size(v); }, [](const C& c) { return std::to_string(c.val_count); }}},
      {"qualities", {[](C& c, S v) { c.qualities = parse_list<int>(v); }, [](const C& c) { return join(c.qualities); }}},
      {"eval_quality",
       {[](C& c, S v) { c.eval_quality = static_cast<int>(to_size(v)); }, [](const C& c) { return std::to_string(c.eval_quality); }}},
      {"rounding",
       {[](C& c, S v) { c.rounding = parse_rounding(v); }, [](const C& c) { return std::string(rounding_name(c.rounding)); }}},
      {"noise_sigma", {[](C& c, S v) { c.noise_sigma = to_double(v); }, [](const C& c) { return double_str(c.noise_sigma); }}},
      {"val_every", {[](C& c, S v) { c.val_every = to_size(v); }, [](const C& c) { return std::to_string(c.val_every); }}},
      {"checkpoint_every",
       {[](C& c, S v) { c.checkpoint_every = to_size(v); }, [](const C& c) { return std::to_string(c.checkpoint_every); }}},
      {"head_width", {[](C& c, S v) { c.head_width = to_size(v); }, [](const C& c) { return std::to_string(c.head_width); }}},
      {"head_hidden", {[](C& c, S v) { c.head_hidden = to_size(v); }, [](const C& c) { return std::to_string(c.head_hidden); }}},
      {"input", {[](C& c, S v) { c.input = v; }, [](const C& c) { return c.input; }}},
      {"checkpoint", {[](C& c, S v) { c.checkpoint = v; }, [](const C& c) { return c.checkpoint; }}},
      {"temperature", {[](C& c, S v) { c.temperature = to_double(v); }, [](const C& c) { return double_str(c.temperature); }}},
      {"samples", {[](C& c, S v) { c.samples = to_size(v); }, [](const C& c) { return std::to_string(c.samples); }}},
      {"out", {[](C& c, S v) { c.out = v; }, [](const C& c) { return c.out; }}},
  };
  return table;
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r"), b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
}

}  // namespace config_detail

/// Sets one field by name; unknown keys and bad values throw ConfigError.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  for (const auto& [name, field] : config_detail::fields()) {
    if (name != key) continue;
    try {
      field.set(c, value);
    } catch (const std::exception& e) {
      throw ConfigError("invalid value for '" + key + "': " + e.what());
    }
    return;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

/// `key = value` lines; '#' starts a comment. Duplicate keys are rejected.
inline RunConfig parse_config(const std::string& text) {
  RunConfig c;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = config_detail::trim(line.substr(0, eq));
    const std::string value = config_detail::trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError("duplicate config key '" + key + "' on line " + std::to_string(lineno));
    set_config_value(c, key, value);
  }
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

/// Every field in table order; parse_config(serialize_config(c)) reproduces c.
inline std::string serialize_config(const RunConfig& c) {
  std::string out;
  for (const auto& [name, field] : config_detail::fields()) out += name + " = " + field.get(c) + "\n";
  return out;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

/// FNV-1a over the serialized config; the output directory is not hashed.
inline std::string config_hash(RunConfig c) {
  c.out.clear();
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(serialize_config(c))));
  return buf;
}

inline FlowConfig flow_config(const RunConfig& c) {
  FlowConfig f;
  f.bank = c.bank;
  f.dims = 2;
  f.spatial = c.patch;
  f.levels = c.levels;
  f.blocks = c.blocks;
  f.kind = c.block_kind;
  f.width = c.width;
  f.hidden_layers = c.hidden_layers;
  f.lipschitz = c.lipschitz;
  f.alpha = c.alpha;
  f.seed = c.seed;
  return f;
}

inline TrainConfig train_config(const RunConfig& c) {
  TrainConfig t;
  t.task = c.task;
  t.steps = c.steps;
  t.batch = c.batch;
  t.lr = c.lr;
  t.milestones = c.milestones;
  t.weight_decay = c.weight_decay;
  t.seed = c.seed;
  t.rescale = c.rescale;
  t.denoise = c.denoise;
  t.qualities = c.qualities;
  t.rounding = c.rounding;
  t.eval_quality = c.eval_quality;
  t.noise_sigma = c.noise_sigma;
  t.val_every = c.val_every;
  t.checkpoint_every = c.checkpoint_every;
  return t;
}

}  // namespace lr2flow
