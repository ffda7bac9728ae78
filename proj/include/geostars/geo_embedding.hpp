#pragma once

// Task-level geo-aware embedding: per-segment weather and characteristics
// embeddings, one distance-weighted graph convolution, then attention pooling
// over segments. Uses no labels.

#include <string>
#include <vector>

#include "geostars/dataset.hpp"
#include "geostars/encoders.hpp"
#include "geostars/model.hpp"
#include "geostars/stream_graph.hpp"

namespace geostars {

/// Constant model inputs for days [begin, begin + length) of one task.
struct TaskInputs {
  std::string task_id;
  std::size_t n = 0;
  std::size_t begin = 0;
  std::size_t length = 0;
  Tensor x_all;  // (length * n) x F, time-major
  Tensor c;      // n x K
  Tensor adj;    // n x n raw adjacency values
  std::vector<std::uint8_t> support;
};

inline TaskInputs make_inputs(const TaskDataset& task, const AdjacencyMatrix& adj, std::size_t begin,
                              std::size_t length) {
  require(task.normalized, "make_inputs: task must be normalized");
  require(adj.n == task.n(), "make_inputs: adjacency does not match the network");
  require(length >= 1 && begin + length <= task.T, "make_inputs: day range outside the task");
  const std::size_t n = task.n(), F = task.F;
  std::vector<double> x(length * n * F);
  for (std::size_t t = 0; t < length; ++t)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t f = 0; f < F; ++f) x[(t * n + i) * F + f] = task.x_at(i, begin + t, f);
  TaskInputs in;
  in.task_id = task.id;
  in.n = n;
  in.begin = begin;
  in.length = length;
  in.x_all = Tensor::from_data(length * n, F, std::move(x));
  in.c = Tensor::from_data(n, task.K, task.c);
  in.adj = Tensor::from_data(n, n, adj.values);
  in.support = adj.support;
  return in;
}

struct GeoEmbedding {
  Tensor z;         // 1 x Hz
  Tensor g;         // n x Hz, graph-convolved node embeddings
  Tensor h_c;       // n x Hc
  Tensor beta;      // 1 x n pooling weights
  Tensor alpha;     // n x T temporal attention weights
  std::string task_id;
};

/// g_i = ReLU(sum_{j in N(i)} A_ij W_g h_j); without a conv weight the literal
/// weighted sum is used.
inline Tensor graph_conv(const Tensor& adj, const Tensor& h_dc, const Model& model) {
  require(adj.rows() == h_dc.rows() && adj.cols() == h_dc.rows(), "graph_conv: adjacency/embedding size mismatch");
  const Tensor msg = model.config().conv_weight ? matmul(h_dc, model.param("W_g")) : h_dc;
  return relu(matmul(adj, msg));
}

inline Tensor graph_conv(const AdjacencyMatrix& a, const Tensor& h_dc, const Model& model) {
  return graph_conv(Tensor::from_data(a.n, a.n, a.values), h_dc, model);
}

/// beta = softmax_i(g_i . q), z = sum_i beta_i g_i.
inline AttentionPool node_attention_pool(const Tensor& g, const Tensor& q) {
  require(g.rows() >= 1, "node_attention_pool: empty graph");
  const Tensor beta = softmax_rows(transpose(matmul(g, q)));
  return {matmul(beta, g), beta};
}

inline GeoEmbedding compute_geo_embedding(const TaskInputs& in, const Model& model) {
  const auto steps = lstm_forward(embedding_lstm(model), in.x_all, in.n);
  const AttentionPool temporal = temporal_attention_pool(steps, model.param("q_h"));
  GeoEmbedding out;
  out.task_id = in.task_id;
  out.alpha = temporal.weights;
  out.h_c = characteristics_embed(in.c, model);
  out.g = graph_conv(in.adj, concat_cols({temporal.pooled, out.h_c}), model);
  const AttentionPool nodes = node_attention_pool(out.g, model.param("q_g"));
  out.z = nodes.pooled;
  out.beta = nodes.weights;
  return out;
}

}  // namespace geostars
