#pragma once

// Flow checkpoints: a directory with one LRTF tensor per parameter and a
// plain-text manifest of the model configuration.

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

#include "lr2flow/flow.hpp"
#include "lr2flow/lrtf.hpp"

namespace lr2flow {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string format_shape_list(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

inline Shape parse_shape_list(const std::string& s) {
  Shape out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, 'x')) out.push_back(std::stoull(tok));
  return out;
}

inline std::string double_str(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline void save_checkpoint(const std::filesystem::path& dir, const FlowModel& model) {
  std::filesystem::create_directories(dir);
  const FlowConfig& c = model.config;
  std::ofstream mf(dir / "manifest.txt");
  if (!mf) throw CheckpointError("cannot write checkpoint manifest in " + dir.string());
  mf << "bank = " << model.bank.name << "\n"
     << "dims = " << c.dims << "\n"
     << "spatial = " << format_shape_list(c.spatial) << "\n"
     << "levels = " << c.levels << "\n"
     << "blocks = " << c.blocks << "\n"
     << "block_kind = " << block_kind_name(c.kind) << "\n"
     << "width = " << c.width << "\n"
     << "hidden_layers = " << c.hidden_layers << "\n"
     << "lipschitz = " << double_str(c.lipschitz) << "\n"
     << "alpha = " << double_str(c.alpha) << "\n"
     << "seed = " << c.seed << "\n"
     << "step = " << model.step << "\n";
  bool init = true;
  for (const auto& level : model.levels)
    for (const Block& b : level) init = init && b.actnorm.initialized;
  mf << "actnorm_initialized = " << (init ? 1 : 0) << "\n";
  for_each_parameter(model, [&](const std::string& name, const Tensor& t) { save_lrtf((dir / (name + ".lrtf")).string(), t); });
  if (c.kind == BlockKind::IRes) {
    for (std::size_t l = 0; l < model.levels.size(); ++l)
      for (std::size_t k = 0; k < model.levels[l].size(); ++k) {
        const auto& u = model.levels[l][k].ires.u;
        for (std::size_t i = 0; i < u.size(); ++i) {
          const std::string name = "l" + std::to_string(l + 1) + ".b" + std::to_string(k + 1) + ".phi.u" + std::to_string(i);
          save_lrtf((dir / (name + ".lrtf")).string(), u[i]);
        }
      }
  }
}

/// Loads and validates: parameter shapes, finiteness, orthogonality of every
/// derived K, and the iResBlock Lipschitz budget.
inline FlowModel load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.txt");
  if (!mf) throw CheckpointError("missing checkpoint manifest in " + dir.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(mf, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  auto get = [&](const std::string& k) {
    auto it = kv.find(k);
    if (it == kv.end()) throw CheckpointError("checkpoint manifest lacks '" + k + "'");
    return it->second;
  };
  FlowConfig c;
  c.bank = parse_bank_kind(get("bank"));
  c.dims = std::stoull(get("dims"));
  c.spatial = parse_shape_list(get("spatial"));
  c.levels = std::stoull(get("levels"));
  c.blocks = std::stoull(get("blocks"));
  c.kind = parse_block_kind(get("block_kind"));
  c.width = std::stoull(get("width"));
  c.hidden_layers = std::stoull(get("hidden_layers"));
  c.lipschitz = std::stod(get("lipschitz"));
  c.alpha = std::stod(get("alpha"));
  c.seed = std::stoull(get("seed"));
  FlowModel m = make_flow_model(c);
  m.step = std::stoull(get("step"));
  for_each_parameter(m, [&](const std::string& name, Tensor& t) {
    Tensor v = load_lrtf((dir / (name + ".lrtf")).string());
    if (v.shape() != t.shape()) {
      throw CheckpointError("checkpoint tensor " + name + " has shape " + shape_str(v.shape()) + ", expected " +
                            shape_str(t.shape()));
    }
    if (!v.all_finite()) throw CheckpointError("checkpoint tensor " + name + " contains non-finite values");
    t = std::move(v);
  });
  const bool init = get("actnorm_initialized") == "1";
  for (auto& level : m.levels)
    for (Block& b : level) b.actnorm.initialized = init;
  if (c.kind == BlockKind::IRes) {
    for (std::size_t l = 0; l < m.levels.size(); ++l)
      for (std::size_t k = 0; k < m.levels[l].size(); ++k) {
        auto& u = m.levels[l][k].ires.u;
        for (std::size_t i = 0; i < u.size(); ++i) {
          const std::string name = "l" + std::to_string(l + 1) + ".b" + std::to_string(k + 1) + ".phi.u" + std::to_string(i);
          u[i] = load_lrtf((dir / (name + ".lrtf")).string());
        }
      }
    if (lipschitz_estimate(m) > c.lipschitz + 1e-3) throw CheckpointError("checkpoint violates the iResBlock Lipschitz budget");
  }
  if (orthogonality_defect(m) > 1e-10) throw CheckpointError("checkpoint has a non-orthogonal 1x1 mixing matrix");
  return m;
}

}  // namespace lr2flow
