#pragma once

// Model configuration and the trainable parameter store.
//
// Parameters are named leaf tensors, each tagged with one GroupId. A Model is
// a value type: copying it deep-copies every tensor, so a fine-tuned copy never
// aliases the pretrained original.

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "geostars/error.hpp"
#include "geostars/numerics/adam.hpp"
#include "geostars/numerics/tensor.hpp"

namespace geostars {

/// Component switches for ablation variants; all on is the full model.
struct AblationConfig {
  bool use_z = true;
  bool use_c_in_gate = true;
  bool use_A_prime = true;
  bool use_A = true;
  bool unified_preprocessing = true;

  bool plain_head() const { return !use_A && !use_A_prime; }
  bool operator==(const AblationConfig&) const = default;
};

enum class GateGain : std::uint8_t { scalar, per_edge };
enum class Activation : std::uint8_t { relu, linear };

struct ModelConfig {
  std::size_t F = 7;
  std::size_t K = 65;
  std::size_t H = 128;        // LSTM hidden size
  std::size_t Hc = 128;       // characteristics embedding size
  std::size_t head_hidden = 64;
  std::size_t char_layers = 2;
  Activation char_activation = Activation::relu;
  bool conv_weight = true;
  bool share_encoder = false;
  GateGain gate_gain = GateGain::scalar;
  std::size_t per_edge_nodes = 0;  // graph size when gate_gain == per_edge
  int max_hops = 0;                // 0 = unlimited upstream neighborhood
  AblationConfig ablation;
  double y_mean = 0.0;             // output de-standardization
  double y_std = 1.0;
  std::uint64_t init_seed = 0;

  std::size_t Hz() const { return H + Hc; }
  std::size_t head_inputs() const {
    std::size_t d = H;
    if (!ablation.plain_head() && ablation.use_A_prime) d += H;
    if (ablation.use_z) d += Hz();
    return d;
  }
};

inline void to_json(nlohmann::json& j, const AblationConfig& a) {
  j = {{"use_z", a.use_z},
       {"use_c_in_gate", a.use_c_in_gate},
       {"use_A_prime", a.use_A_prime},
       {"use_A", a.use_A},
       {"unified_preprocessing", a.unified_preprocessing}};
}

inline void from_json(const nlohmann::json& j, AblationConfig& a) {
  a.use_z = j.value("use_z", true);
  a.use_c_in_gate = j.value("use_c_in_gate", true);
  a.use_A_prime = j.value("use_A_prime", true);
  a.use_A = j.value("use_A", true);
  a.unified_preprocessing = j.value("unified_preprocessing", true);
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"F", c.F},
       {"K", c.K},
       {"H", c.H},
       {"Hc", c.Hc},
       {"head_hidden", c.head_hidden},
       {"char_layers", c.char_layers},
       {"char_activation", c.char_activation == Activation::relu ? "relu" : "linear"},
       {"conv_weight", c.conv_weight},
       {"share_encoder", c.share_encoder},
       {"gate_gain", c.gate_gain == GateGain::scalar ? "scalar" : "per_edge"},
       {"per_edge_nodes", c.per_edge_nodes},
       {"max_hops", c.max_hops},
       {"ablation", c.ablation},
       {"y_mean", c.y_mean},
       {"y_std", c.y_std},
       {"init_seed", c.init_seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.F = j.value("F", d.F);
  c.K = j.value("K", d.K);
  c.H = j.value("H", d.H);
  c.Hc = j.value("Hc", d.Hc);
  c.head_hidden = j.value("head_hidden", d.head_hidden);
  c.char_layers = j.value("char_layers", d.char_layers);
  c.char_activation = j.value("char_activation", std::string("relu")) == "linear" ? Activation::linear : Activation::relu;
  c.conv_weight = j.value("conv_weight", d.conv_weight);
  c.share_encoder = j.value("share_encoder", d.share_encoder);
  const std::string gain = j.value("gate_gain", std::string("scalar"));
  if (gain != "scalar" && gain != "per_edge") throw DataError("gate_gain must be 'scalar' or 'per_edge'");
  c.gate_gain = gain == "scalar" ? GateGain::scalar : GateGain::per_edge;
  c.per_edge_nodes = j.value("per_edge_nodes", d.per_edge_nodes);
  c.max_hops = j.value("max_hops", d.max_hops);
  c.ablation = j.value("ablation", d.ablation);
  c.y_mean = j.value("y_mean", d.y_mean);
  c.y_std = j.value("y_std", d.y_std);
  c.init_seed = j.value("init_seed", d.init_seed);
}

class Model {
 public:
  struct Entry {
    std::string name;
    GroupId group;
    Tensor tensor;
  };

  Model() = default;
  explicit Model(const ModelConfig& cfg) : cfg_(cfg) { build(); }

  Model(const Model& o) : cfg_(o.cfg_) {
    for (const Entry& e : o.entries_) {
      add(e.name, e.group, e.tensor.rows(), e.tensor.cols(),
          std::vector<double>(e.tensor.data().begin(), e.tensor.data().end()));
    }
  }
  Model& operator=(const Model& o) {
    if (this != &o) {
      Model tmp(o);
      *this = std::move(tmp);
    }
    return *this;
  }
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& mutable_config() { return cfg_; }

  const Tensor& param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
    return entries_[it->second].tensor;
  }
  bool has(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  /// Handles onto the live tensors, one group per GroupId present.
  std::vector<ParamGroup> groups() const {
    std::vector<ParamGroup> out;
    for (GroupId g : kAllGroups) {
      ParamGroup pg{g, {}, false};
      for (const Entry& e : entries_) {
        if (e.group == g) pg.tensors.push_back(e.tensor);
      }
      if (!pg.tensors.empty()) out.push_back(std::move(pg));
    }
    return out;
  }

  /// Deterministic re-initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  void reset(std::uint64_t seed) {
    cfg_.init_seed = seed;
    entries_.clear();
    index_.clear();
    build();
  }

  void set_all(double v) {
    for (Entry& e : entries_) {
      for (double& x : e.tensor.mutable_data()) x = v;
    }
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Entry& e : entries_) n += e.tensor.size();
    return n;
  }

 private:
  void add(const std::string& name, GroupId g, std::size_t r, std::size_t c, std::vector<double> v) {
    index_[name] = entries_.size();
    entries_.push_back({name, g, Tensor::parameter(name, r, c, std::move(v))});
  }

  void add_uniform(std::mt19937_64& rng, const std::string& name, GroupId g, std::size_t r, std::size_t c,
                   std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<double> v(r * c);
    for (double& x : v) x = u(rng);
    add(name, g, r, c, std::move(v));
  }

  void add_lstm(std::mt19937_64& rng, const std::string& prefix) {
    add_uniform(rng, prefix + ".W_x", GroupId::encoder, cfg_.F, 4 * cfg_.H, cfg_.H);
    add_uniform(rng, prefix + ".W_h", GroupId::encoder, cfg_.H, 4 * cfg_.H, cfg_.H);
    add_uniform(rng, prefix + ".b", GroupId::encoder, 1, 4 * cfg_.H, cfg_.H);
  }

  void build() {
    require(cfg_.F > 0 && cfg_.K > 0 && cfg_.H > 0 && cfg_.Hc > 0 && cfg_.head_hidden > 0,
            "ModelConfig: dimensions must be positive");
    require(cfg_.char_layers >= 1, "ModelConfig: characteristics MLP needs at least one layer");
    require(cfg_.gate_gain == GateGain::scalar || cfg_.per_edge_nodes > 0,
            "ModelConfig: per-edge gate gain needs per_edge_nodes");
    std::mt19937_64 rng(cfg_.init_seed);
    add_lstm(rng, "embed_lstm");
    if (!cfg_.share_encoder) add_lstm(rng, "pred_lstm");
    add_uniform(rng, "q_h", GroupId::pooling, cfg_.H, 1, cfg_.H);
    std::size_t in = cfg_.K;
    for (std::size_t l = 0; l < cfg_.char_layers; ++l) {
      const std::string p = "char_mlp." + std::to_string(l);
      add_uniform(rng, p + ".W", GroupId::characteristics_mlp, in, cfg_.Hc, in);
      add_uniform(rng, p + ".b", GroupId::characteristics_mlp, 1, cfg_.Hc, in);
      in = cfg_.Hc;
    }
    const std::size_t hz = cfg_.Hz();
    if (cfg_.conv_weight) add_uniform(rng, "W_g", GroupId::pooling, hz, hz, hz);
    add_uniform(rng, "q_g", GroupId::pooling, hz, 1, hz);
    add_uniform(rng, "z_proj", GroupId::gate, hz, cfg_.Hc, hz);
    const std::size_t gn = cfg_.gate_gain == GateGain::scalar ? 1 : cfg_.per_edge_nodes;
    add("gain_spatial", GroupId::gate, gn, gn, std::vector<double>(gn * gn, 1.0));
    add("gain_temporal", GroupId::gate, gn, gn, std::vector<double>(gn * gn, 1.0));
    const std::size_t hin = cfg_.head_inputs();
    add_uniform(rng, "head.0.W", GroupId::head, hin, cfg_.head_hidden, hin);
    add_uniform(rng, "head.0.b", GroupId::head, 1, cfg_.head_hidden, hin);
    add_uniform(rng, "head.1.W", GroupId::head, cfg_.head_hidden, 1, cfg_.head_hidden);
    add_uniform(rng, "head.1.b", GroupId::head, 1, 1, cfg_.head_hidden);
  }

  ModelConfig cfg_;
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Checkpoints: manifest JSON + flat little-endian float64 payload.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const Model& model, const std::filesystem::path& manifest_path,
                            const std::string& fingerprint = {}) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  std::filesystem::path bin_path = manifest_path;
  bin_path.replace_extension(".bin");
  nlohmann::json m;
  m["format"] = "geostars-checkpoint-1";
  m["fingerprint"] = fingerprint;
  m["config"] = model.config();
  m["payload"] = bin_path.filename().string();
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin) throw DataError("cannot write " + bin_path.string());
  for (const auto& e : model.entries()) {
    tensors.push_back({{"name", e.name},
                       {"group", std::string(to_string(e.group))},
                       {"shape", {e.tensor.rows(), e.tensor.cols()}},
                       {"offset", offset}});
    bin.write(reinterpret_cast<const char*>(e.tensor.data().data()),
              static_cast<std::streamsize>(e.tensor.size() * sizeof(double)));
    offset += e.tensor.size();
  }
  m["tensors"] = tensors;
  m["count"] = offset;
  std::ofstream out(manifest_path);
  if (!out) throw DataError("cannot write " + manifest_path.string());
  out << m.dump(2) << '\n';
}

inline Model load_checkpoint(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw DataError("missing checkpoint " + manifest_path.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  Model model(m.at("config").get<ModelConfig>());
  const auto bin_path = manifest_path.parent_path() / m.at("payload").get<std::string>();
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw DataError("missing checkpoint payload " + bin_path.string());
  std::vector<double> flat(m.at("count").get<std::size_t>());
  bin.read(reinterpret_cast<char*>(flat.data()), static_cast<std::streamsize>(flat.size() * sizeof(double)));
  if (!bin) throw DataError("truncated checkpoint payload " + bin_path.string());
  for (const auto& t : m.at("tensors")) {
    const std::string name = t.at("name");
    if (!model.has(name)) throw DataError("checkpoint tensor '" + name + "' not in model");
    for (auto& e : model.entries()) {
      if (e.name != name) continue;
      if (t.at("shape")[0].get<std::size_t>() != e.tensor.rows() || t.at("shape")[1].get<std::size_t>() != e.tensor.cols()) {
        throw DataError("checkpoint tensor '" + name + "' has the wrong shape");
      }
      const std::size_t off = t.at("offset");
      auto dst = e.tensor.mutable_data();
      std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
                flat.begin() + static_cast<std::ptrdiff_t>(off + dst.size()), dst.begin());
    }
  }
  return model;
}

}  // namespace geostars
