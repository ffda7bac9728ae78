#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "geostars/gated_stgnn.hpp"
#include "support.hpp"

using namespace geostars;
using namespace geostars::testing;
namespace fs = std::filesystem;

namespace {

double sigm(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Textbook LSTM over one sequence, written with plain loops.
std::vector<std::vector<double>> reference_lstm(const Model& m, const std::string& prefix,
                                                const std::vector<std::vector<double>>& x) {
  const std::size_t H = m.config().H, F = x[0].size();
  const Tensor& Wx = m.param(prefix + ".W_x");
  const Tensor& Wh = m.param(prefix + ".W_h");
  const Tensor& b = m.param(prefix + ".b");
  std::vector<double> h(H, 0.0), c(H, 0.0);
  std::vector<std::vector<double>> out;
  for (const auto& xt : x) {
    std::vector<double> pre(4 * H);
    for (std::size_t k = 0; k < 4 * H; ++k) {
      double s = b.at(0, k);
      for (std::size_t f = 0; f < F; ++f) s += xt[f] * Wx.at(f, k);
      for (std::size_t j = 0; j < H; ++j) s += h[j] * Wh.at(j, k);
      pre[k] = s;
    }
    for (std::size_t j = 0; j < H; ++j) {
      const double i = sigm(pre[j]), fg = sigm(pre[H + j]), g = std::tanh(pre[2 * H + j]), o = sigm(pre[3 * H + j]);
      c[j] = fg * c[j] + i * g;
      h[j] = o * std::tanh(c[j]);
    }
    out.push_back(h);
  }
  return out;
}

struct Fixture {
  SynthFamily fam = tiny_family(4, 40);
  PreparedTask prep = prepare_alone(fam.tasks[0].task);
  Model model{tiny_model()};
  TaskInputs in = make_inputs(prep.data, prep.adj, 3, 12);
};

// Reorders segments of a window's inputs by `perm` (new index k holds old perm[k]).
TaskInputs permute(const TaskInputs& in, const std::vector<std::size_t>& perm) {
  const std::size_t n = in.n, F = in.x_all.cols(), K = in.c.cols();
  std::vector<double> x(in.x_all.size()), c(in.c.size()), a(n * n);
  std::vector<std::uint8_t> sup(n * n);
  for (std::size_t t = 0; t < in.length; ++t)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t f = 0; f < F; ++f) x[(t * n + k) * F + f] = in.x_all.at(t * n + perm[k], f);
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t j = 0; j < K; ++j) c[k * K + j] = in.c.at(perm[k], j);
    for (std::size_t l = 0; l < n; ++l) {
      a[k * n + l] = in.adj.at(perm[k], perm[l]);
      sup[k * n + l] = in.support[perm[k] * n + perm[l]];
    }
  }
  TaskInputs out = in;
  out.x_all = Tensor::from_data(in.x_all.rows(), F, std::move(x));
  out.c = Tensor::from_data(n, K, std::move(c));
  out.adj = Tensor::from_data(n, n, std::move(a));
  out.support = std::move(sup);
  return out;
}

}  // namespace

TEST(Lstm, BatchedRecurrenceMatchesReferenceLoop) {
  Fixture fx;
  const auto hs = lstm_forward(embedding_lstm(fx.model), fx.in.x_all, fx.in.n);
  for (std::size_t i = 0; i < fx.in.n; ++i) {
    std::vector<std::vector<double>> seq;
    for (std::size_t t = 0; t < fx.in.length; ++t) {
      std::vector<double> row(fx.in.x_all.cols());
      for (std::size_t f = 0; f < row.size(); ++f) row[f] = fx.in.x_all.at(t * fx.in.n + i, f);
      seq.push_back(row);
    }
    const auto ref = reference_lstm(fx.model, "embed_lstm", seq);
    for (std::size_t t = 0; t < fx.in.length; ++t)
      for (std::size_t j = 0; j < fx.model.config().H; ++j) EXPECT_NEAR(hs[t].at(i, j), ref[t][j], 1e-12);
  }
}

TEST(Lstm, SingleSequenceFormAgreesWithBatch) {
  Fixture fx;
  const auto hs = lstm_forward(embedding_lstm(fx.model), fx.in.x_all, fx.in.n);
  std::vector<double> x;
  for (std::size_t t = 0; t < fx.in.length; ++t)
    for (std::size_t f = 0; f < fx.in.x_all.cols(); ++f) x.push_back(fx.in.x_all.at(t * fx.in.n + 2, f));
  const Tensor h2 = lstm_forward(embedding_lstm(fx.model), Tensor::from_data(fx.in.length, fx.in.x_all.cols(), x));
  for (std::size_t t = 0; t < fx.in.length; ++t)
    for (std::size_t j = 0; j < h2.cols(); ++j) EXPECT_NEAR(h2.at(t, j), hs[t].at(2, j), 1e-14);
}

TEST(Attention, WeightsSumToOneAndPoolIsConvexCombination) {
  Fixture fx;
  const auto hs = lstm_forward(embedding_lstm(fx.model), fx.in.x_all, fx.in.n);
  const AttentionPool p = temporal_attention_pool(hs, fx.model.param("q_h"));
  for (std::size_t i = 0; i < fx.in.n; ++i) {
    double s = 0;
    for (std::size_t t = 0; t < fx.in.length; ++t) {
      EXPECT_GT(p.weights.at(i, t), 0.0);
      s += p.weights.at(i, t);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
    for (std::size_t j = 0; j < fx.model.config().H; ++j) {
      double v = 0;
      for (std::size_t t = 0; t < fx.in.length; ++t) v += p.weights.at(i, t) * hs[t].at(i, j);
      EXPECT_NEAR(p.pooled.at(i, j), v, 1e-12);
    }
  }
}

TEST(GeoEmbedding, InvariantToSegmentOrdering) {
  Fixture fx;
  const Tensor z0 = compute_geo_embedding(fx.in, fx.model).z;
  std::vector<std::size_t> perm(fx.in.n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(9);
  for (int r = 0; r < 20; ++r) {
    std::shuffle(perm.begin(), perm.end(), rng);
    const Tensor z = compute_geo_embedding(permute(fx.in, perm), fx.model).z;
    ASSERT_EQ(z.cols(), fx.model.config().Hz());
    for (std::size_t k = 0; k < z.cols(); ++k) EXPECT_NEAR(z.at(0, k), z0.at(0, k), 1e-9);
  }
}

TEST(GeoEmbedding, NodePoolingWeightsFormDistribution) {
  Fixture fx;
  const GeoEmbedding e = compute_geo_embedding(fx.in, fx.model);
  double s = 0;
  for (std::size_t i = 0; i < fx.in.n; ++i) s += e.beta.at(0, i);
  EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST(Gate, RowStochasticOnSupportAndZeroOff) {
  Fixture fx;
  const GeoEmbedding e = compute_geo_embedding(fx.in, fx.model);
  const GatedAdjacency g = gate(fx.in, e.h_c, e.z, fx.model);
  for (const Tensor* m : {&g.current, &g.previous}) {
    for (std::size_t i = 0; i < fx.in.n; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < fx.in.n; ++j) {
        if (fx.in.support[i * fx.in.n + j]) {
          EXPECT_GE(m->at(i, j), 0.0);
        } else {
          EXPECT_EQ(m->at(i, j), 0.0);
        }
        s += m->at(i, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Gate, PerEdgeGainSizedForAnotherGraphIsRejected) {
  Fixture fx;
  ModelConfig cfg = tiny_model();
  cfg.gate_gain = GateGain::per_edge;
  cfg.per_edge_nodes = fx.in.n + 1;
  const Model m(cfg);
  const GeoEmbedding e = compute_geo_embedding(fx.in, m);
  EXPECT_THROW(gate(fx.in, e.h_c, e.z, m), ContractError);
  cfg.per_edge_nodes = fx.in.n;
  const Model ok(cfg);
  EXPECT_NO_THROW(forward(fx.in, compute_geo_embedding(fx.in, ok), ok));
}

TEST(Forward, ShapeIsSegmentsByDays) {
  Fixture fx;
  const Tensor y = forward(fx.in, compute_geo_embedding(fx.in, fx.model), fx.model);
  EXPECT_EQ(y.rows(), fx.in.n);
  EXPECT_EQ(y.cols(), fx.in.length);
}

TEST(Forward, HeadInputWidthPerAblation) {
  ModelConfig c = tiny_model(5, 3);
  EXPECT_EQ(c.head_inputs(), 5u + 5u + 8u);
  c.ablation.use_z = false;
  EXPECT_EQ(c.head_inputs(), 10u);
  c.ablation = {};
  c.ablation.use_A_prime = false;
  EXPECT_EQ(c.head_inputs(), 13u);
  c.ablation.use_A = false;
  EXPECT_EQ(c.head_inputs(), 13u);
  for (const auto& ab : {AblationConfig{false, true, true, true, true}, AblationConfig{true, false, true, true, true},
                         AblationConfig{true, true, false, true, true}, AblationConfig{true, true, true, false, true},
                         AblationConfig{true, true, false, false, true}}) {
    Fixture fx;
    ModelConfig mc = tiny_model();
    mc.ablation = ab;
    const Model m(mc);
    const Tensor y = forward(fx.in, compute_geo_embedding(fx.in, m), m);
    EXPECT_EQ(y.rows(), fx.in.n);
    EXPECT_EQ(m.param("head.0.W").rows(), mc.head_inputs());
  }
}

TEST(Forward, WithoutZPredictionsIgnoreTheEmbedding) {
  Fixture fx;
  ModelConfig mc = tiny_model();
  mc.ablation.use_z = false;
  const Model m(mc);
  GeoEmbedding e = compute_geo_embedding(fx.in, m);
  const Tensor y0 = forward(fx.in, e, m);
  std::mt19937_64 rng(2);
  e.z = random_tensor(rng, 1, mc.Hz(), 3.0);
  const Tensor y1 = forward(fx.in, e, m);
  for (std::size_t k = 0; k < y0.size(); ++k) EXPECT_EQ(y0.data()[k], y1.data()[k]);
}

TEST(Checkpoint, RoundTripReproducesPredictions) {
  Fixture fx;
  fx.model.mutable_config().y_mean = 9.5;
  fx.model.mutable_config().y_std = 2.25;
  const fs::path dir = fs::temp_directory_path() / "geostars_ckpt";
  fs::remove_all(dir);
  fs::create_directories(dir);
  save_checkpoint(fx.model, dir / "model.json", "abc");
  const Model back = load_checkpoint(dir / "model.json");
  EXPECT_EQ(back.config().y_mean, 9.5);
  ASSERT_EQ(back.entries().size(), fx.model.entries().size());
  const Tensor y0 = forward(fx.in, compute_geo_embedding(fx.in, fx.model), fx.model);
  const Tensor y1 = forward(fx.in, compute_geo_embedding(fx.in, back), back);
  for (std::size_t k = 0; k < y0.size(); ++k) EXPECT_EQ(y0.data()[k], y1.data()[k]);
  EXPECT_THROW(load_checkpoint(dir / "absent.json"), DataError);
}

TEST(Model, InitializationIsSeeded) {
  const Model a(tiny_model(4, 4, 3)), b(tiny_model(4, 4, 3)), c(tiny_model(4, 4, 4));
  bool differs = false;
  for (std::size_t e = 0; e < a.entries().size(); ++e) {
    const auto da = a.entries()[e].tensor.data(), db = b.entries()[e].tensor.data(), dc = c.entries()[e].tensor.data();
    EXPECT_TRUE(std::equal(da.begin(), da.end(), db.begin()));
    differs = differs || !std::equal(da.begin(), da.end(), dc.begin());
  }
  EXPECT_TRUE(differs);
}
