#pragma once

// Sequence encoder (LSTM), temporal attention pooling and the
// characteristics MLP.

#include <string>
#include <vector>

#include "geostars/model.hpp"
#include "geostars/numerics/tensor.hpp"

namespace geostars {

/// Weights of one LSTM; gate blocks are laid out [input | forget | cell | output].
struct LstmParams {
  Tensor W_x;  // F x 4H
  Tensor W_h;  // H x 4H
  Tensor b;    // 1 x 4H
  std::size_t H = 0;
};

inline LstmParams lstm_params(const Model& model, const std::string& prefix) {
  return {model.param(prefix + ".W_x"), model.param(prefix + ".W_h"), model.param(prefix + ".b"), model.config().H};
}

inline LstmParams embedding_lstm(const Model& model) { return lstm_params(model, "embed_lstm"); }

inline LstmParams prediction_lstm(const Model& model) {
  return lstm_params(model, model.config().share_encoder ? "embed_lstm" : "pred_lstm");
}

/// Runs n independent sequences in lock-step from a zero initial state.
/// `x_all` stacks the inputs time-major: rows [t*n, (t+1)*n) hold step t.
/// Returns one n x H hidden-state tensor per step.
inline std::vector<Tensor> lstm_forward(const LstmParams& p, const Tensor& x_all, std::size_t n) {
  require(n > 0 && x_all.rows() % n == 0, "lstm_forward: rows must be a multiple of n");
  require(x_all.cols() == p.W_x.rows(), "lstm_forward: feature width mismatch");
  const std::size_t T = x_all.rows() / n;
  require(T >= 1, "lstm_forward: empty sequence");
  const std::size_t H = p.H;
  const Tensor xw = add_row(matmul(x_all, p.W_x), p.b);
  std::vector<Tensor> hs;
  hs.reserve(T);
  Tensor h, c;
  for (std::size_t t = 0; t < T; ++t) {
    Tensor pre = T == 1 ? xw : slice_rows(xw, t * n, (t + 1) * n);
    if (t > 0) pre = add(pre, matmul(h, p.W_h));
    const Tensor hc = lstm_cell(pre, c);
    h = slice_cols(hc, 0, H);
    c = slice_cols(hc, H, 2 * H);
    hs.push_back(h);
  }
  return hs;
}

/// Single-segment form: x_i is T x F, result is T x H.
inline Tensor lstm_forward(const LstmParams& p, const Tensor& x_i) {
  auto hs = lstm_forward(p, x_i, 1);
  return hs.size() == 1 ? hs[0] : concat_rows(hs);
}

struct AttentionPool {
  Tensor pooled;   // n x H (or 1 x H)
  Tensor weights;  // n x T (or 1 x T); rows sum to one
};

/// Batched temporal attention: alpha_{i,t} = softmax_t(h_{i,t} . q),
/// pooled_i = sum_t alpha_{i,t} h_{i,t}.
inline AttentionPool temporal_attention_pool(const std::vector<Tensor>& steps, const Tensor& q) {
  require(!steps.empty(), "temporal_attention_pool: no steps");
  std::vector<Tensor> scores;
  scores.reserve(steps.size());
  for (const Tensor& h : steps) scores.push_back(matmul(h, q));
  const Tensor alpha = softmax_rows(concat_cols(scores));
  Tensor pooled;
  for (std::size_t t = 0; t < steps.size(); ++t) {
    const Tensor term = mul_col(steps[t], slice_cols(alpha, t, t + 1));
    pooled = t == 0 ? term : add(pooled, term);
  }
  return {pooled, alpha};
}

/// Single-segment form over h_i (T x H).
inline AttentionPool temporal_attention_pool(const Tensor& h_i, const Tensor& q) {
  const Tensor alpha = softmax_rows(transpose(matmul(h_i, q)));
  return {matmul(alpha, h_i), alpha};
}

/// h_c = MLP(c), activation applied after every layer.
inline Tensor characteristics_embed(const Tensor& c, const Model& model) {
  const ModelConfig& cfg = model.config();
  Tensor h = c;
  for (std::size_t l = 0; l < cfg.char_layers; ++l) {
    const std::string p = "char_mlp." + std::to_string(l);
    h = add_row(matmul(h, model.param(p + ".W")), model.param(p + ".b"));
    if (cfg.char_activation == Activation::relu) h = relu(h);
  }
  return h;
}

}  // namespace geostars
