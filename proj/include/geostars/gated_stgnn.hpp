#pragma once

// Gated spatio-temporal prediction network.
//
// Influence filters s_ij = gain * <h_c_i (.) z', h_c_j (.) z'> (z' is z
// projected to the characteristics width) re-weight the raw adjacency; a
// masked row softmax turns A (.) S into the gated adjacency. Two gates with
// separate gains are built: one mixes neighbors at t, one at t-1. Both are
// time-invariant, so they are computed once per forward pass.

#include <span>
#include <vector>

#include "geostars/encoders.hpp"
#include "geostars/geo_embedding.hpp"
#include "geostars/model.hpp"

namespace geostars {

enum class GateKind { spatial, temporal };

struct GatedAdjacency {
  Tensor current;   // n x n, mixes neighbors at step t
  Tensor previous;  // n x n, mixes neighbors at step t-1
};

/// z projected onto the characteristics width, or all-ones without z.
inline Tensor gate_query(const Tensor& z, const Model& model) {
  const ModelConfig& cfg = model.config();
  if (!cfg.ablation.use_z) return Tensor::full(1, cfg.Hc, 1.0);
  return matmul(z, model.param("z_proj"));
}

inline Tensor influence_filter(const Tensor& h_c, const Tensor& z, const Model& model, GateKind kind) {
  const ModelConfig& cfg = model.config();
  const std::size_t n = h_c.rows();
  require(h_c.cols() == cfg.Hc, "influence_filter: h_c width differs from Hc");
  const Tensor zq = gate_query(z, model);
  require(zq.cols() == h_c.cols(), "influence_filter: projected z width differs from h_c");
  const Tensor base = cfg.ablation.use_c_in_gate ? h_c : Tensor::full(n, cfg.Hc, 1.0);
  const Tensor u = mul_row(base, zq);
  const Tensor gram = matmul(u, transpose(u));
  const Tensor& gain = model.param(kind == GateKind::spatial ? "gain_spatial" : "gain_temporal");
  if (cfg.gate_gain == GateGain::scalar) return mul_scalar(gram, gain);
  if (gain.rows() != n) throw ContractError("influence_filter: per-edge gain was built for a different graph size");
  return mul(gram, gain);
}

/// Row-wise masked softmax of A (.) S over the adjacency support.
inline Tensor gate_adjacency(const Tensor& adj, std::span<const std::uint8_t> support, const Tensor& s) {
  return softmax_rows(mul(adj, s), support);
}

inline GatedAdjacency gate(const TaskInputs& in, const Tensor& h_c, const Tensor& z, const Model& model) {
  GatedAdjacency out;
  const AblationConfig& ab = model.config().ablation;
  if (ab.use_A) out.current = gate_adjacency(in.adj, in.support, influence_filter(h_c, z, model, GateKind::spatial));
  if (ab.use_A_prime) {
    out.previous = gate_adjacency(in.adj, in.support, influence_filter(h_c, z, model, GateKind::temporal));
  }
  return out;
}

struct Aggregated {
  Tensor current;   // n x H
  Tensor previous;  // n x H, undefined when the t-1 path is ablated
};

inline Aggregated aggregate_neighbors(const GatedAdjacency& gated, const Tensor& h_t, const Tensor& h_tm1,
                                      const AblationConfig& ab) {
  Aggregated out;
  out.current = ab.use_A ? matmul(gated.current, h_t) : h_t;
  if (!ab.plain_head() && ab.use_A_prime) out.previous = matmul(gated.previous, h_tm1);
  return out;
}

/// Output MLP on [h_hat_t, h_hat_{t-1}, z] for every row; rows of `current`
/// and `previous` are (step, segment) pairs. Returns rows x 1 in degrees C.
inline Tensor predict(const Tensor& current, const Tensor& previous, const Tensor& z, const Model& model) {
  const ModelConfig& cfg = model.config();
  const Tensor& w1 = model.param("head.0.W");
  std::size_t off = cfg.H;
  Tensor pre = matmul(current, slice_rows(w1, 0, cfg.H));
  if (!cfg.ablation.plain_head() && cfg.ablation.use_A_prime) {
    require(previous.defined(), "predict: missing t-1 aggregation");
    pre = add(pre, matmul(previous, slice_rows(w1, off, off + cfg.H)));
    off += cfg.H;
  }
  Tensor bias = model.param("head.0.b");
  if (cfg.ablation.use_z) bias = add(bias, matmul(z, slice_rows(w1, off, off + cfg.Hz())));
  const Tensor hidden = relu(add_row(pre, bias));
  const Tensor out = add_row(matmul(hidden, model.param("head.1.W")), model.param("head.1.b"));
  return add_scalar(scale(out, cfg.y_std), cfg.y_mean);
}

/// Full prediction pass over one window: n x length temperatures. Step 0 has
/// no t-1 state; its previous-step aggregation is zero and callers mask it.
inline Tensor forward(const TaskInputs& in, const GeoEmbedding& emb, const Model& model) {
  const ModelConfig& cfg = model.config();
  const AblationConfig& ab = cfg.ablation;
  const std::size_t n = in.n, L = in.length;
  const auto hs = lstm_forward(prediction_lstm(model), in.x_all, n);

  GatedAdjacency gated;
  if (!ab.plain_head()) gated = gate(in, emb.h_c, emb.z, model);

  std::vector<Tensor> cur, prev;
  cur.reserve(L);
  const bool with_prev = !ab.plain_head() && ab.use_A_prime;
  for (std::size_t t = 0; t < L; ++t) {
    cur.push_back(ab.use_A && !ab.plain_head() ? matmul(gated.current, hs[t]) : hs[t]);
    if (with_prev) prev.push_back(t == 0 ? Tensor::zeros(n, cfg.H) : matmul(gated.previous, hs[t - 1]));
  }
  const Tensor out = predict(concat_rows(cur), with_prev ? concat_rows(prev) : Tensor{}, emb.z, model);
  return transpose(reshape(out, L, n));
}

}  // namespace geostars
