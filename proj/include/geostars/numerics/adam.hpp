#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "geostars/error.hpp"
#include "geostars/numerics/tensor.hpp"

namespace geostars {

/// Fixed parameter-group names; freezing strategies act on whole groups.
enum class GroupId : std::uint8_t { encoder, characteristics_mlp, gate, pooling, head, embedding_z };

inline constexpr GroupId kAllGroups[] = {GroupId::encoder, GroupId::characteristics_mlp, GroupId::gate,
                                         GroupId::pooling, GroupId::head,  GroupId::embedding_z};

inline std::string_view to_string(GroupId g) {
  switch (g) {
    case GroupId::encoder: return "encoder";
    case GroupId::characteristics_mlp: return "characteristics_mlp";
    case GroupId::gate: return "gate";
    case GroupId::pooling: return "pooling";
    case GroupId::head: return "head";
    case GroupId::embedding_z: return "embedding_z";
  }
  return "?";
}

inline GroupId group_from_string(std::string_view s) {
  for (GroupId g : kAllGroups) {
    if (to_string(g) == s) return g;
  }
  throw DataError("unknown parameter group '" + std::string(s) + "'");
}

struct ParamGroup {
  GroupId id = GroupId::encoder;
  std::vector<Tensor> tensors;
  bool frozen = false;
};

struct AdamConfig {
  double lr = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // 0 disables global-norm clipping
};

struct AdamState {
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  AdamConfig config;
  std::uint64_t step = 0;
  std::map<std::string, Moments> moments;
};

/// One Adam update over every non-frozen group. Tensors without an entry in
/// `grads` are treated as having zero gradient. Frozen tensors are untouched.
inline void adam_step(std::span<ParamGroup* const> groups, const GradMap& grads, AdamState& state) {
  const AdamConfig& cfg = state.config;
  state.step += 1;

  double clip = 1.0;
  if (cfg.clip_norm > 0) {
    double sq = 0.0;
    for (const ParamGroup* g : groups) {
      if (g->frozen) continue;
      for (const Tensor& t : g->tensors) {
        auto it = grads.find(t.name());
        if (it == grads.end()) continue;
        for (double x : it->second.data()) sq += x * x;
      }
    }
    const double norm = std::sqrt(sq);
    if (norm > cfg.clip_norm) clip = cfg.clip_norm / norm;
  }

  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (ParamGroup* g : groups) {
    if (g->frozen) continue;
    for (Tensor& p : g->tensors) {
      auto it = grads.find(p.name());
      std::span<const double> grad;
      if (it != grads.end()) {
        if (it->second.rows() != p.rows() || it->second.cols() != p.cols()) {
          throw ContractError("adam_step: gradient shape mismatch for '" + p.name() + "'");
        }
        grad = it->second.data();
      }
      auto& mom = state.moments[p.name()];
      if (mom.m.size() != p.size()) {
        mom.m.assign(p.size(), 0.0);
        mom.v.assign(p.size(), 0.0);
      }
      auto w = p.mutable_data();
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = grad.empty() ? 0.0 : grad[k] * clip;
        mom.m[k] = cfg.beta1 * mom.m[k] + (1.0 - cfg.beta1) * gk;
        mom.v[k] = cfg.beta2 * mom.v[k] + (1.0 - cfg.beta2) * gk * gk;
        const double mhat = mom.m[k] / bc1;
        const double vhat = mom.v[k] / bc2;
        w[k] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
      }
    }
  }
}

}  // namespace geostars
