#pragma once

// Multi-task pretraining, fine-tuning strategies, zero-shot evaluation and
// the climatology reference predictor.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "geostars/dataset.hpp"
#include "geostars/error.hpp"
#include "geostars/gated_stgnn.hpp"
#include "geostars/geo_embedding.hpp"
#include "geostars/io/dates.hpp"
#include "geostars/model.hpp"
#include "geostars/numerics/adam.hpp"
#include "geostars/stream_graph.hpp"

namespace geostars {

struct TrainConfig {
  std::size_t window = 120;
  std::size_t stride = 90;
  std::size_t burn_in = 15;        // leading steps of every window excluded from the loss
  std::size_t epochs = 200;
  std::size_t finetune_epochs = 50;
  std::size_t patience = 20;       // early stop after this many epochs without min_delta gain
  double min_delta = 1e-3;
  AdamConfig pretrain_adam{0.1, 0.9, 0.999, 1e-8, 0.0};
  AdamConfig finetune_adam{0.01, 0.9, 0.999, 1e-8, 0.0};
  double sparsity = 0.001;
};

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

/// sqrt(mean over masked entries of (pred - y)^2).
inline double masked_rmse(std::span<const double> pred, std::span<const double> y, std::span<const std::uint8_t> mask) {
  require(pred.size() == y.size() && y.size() == mask.size(), "masked_rmse: size mismatch");
  double ss = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < mask.size(); ++k) {
    if (!mask[k]) continue;
    const double d = pred[k] - y[k];
    ss += d * d;
    ++n;
  }
  require(n > 0, "masked_rmse: empty mask");
  return std::sqrt(ss / static_cast<double>(n));
}

/// Differentiable masked RMSE; `labels` holds 0 where `mask` is 0.
inline Tensor masked_rmse_loss(const Tensor& pred, const Tensor& labels, const Tensor& mask, double count) {
  require(count > 0, "masked_rmse_loss: empty mask");
  const Tensor d = sub(pred, labels);
  const Tensor ss = sum(mul(mul(d, d), mask));
  return sqrt(add_scalar(scale(ss, 1.0 / count), 1e-12));
}

struct EvalReport {
  std::string task_id;
  double rmse = 0.0;
  std::size_t n_obs = 0;
  std::vector<std::string> segment_ids;
  std::vector<std::optional<double>> segment_rmse;  // absent when a segment has no scored observation
  std::vector<double> prediction;                   // n x T
  std::string fingerprint;
  std::uint64_t seed = 0;
};

/// Scores an n x T prediction against a task's labels on the given day ranges.
inline EvalReport score(const TaskDataset& task, const std::vector<double>& pred, std::span<const DayRange> ranges) {
  EvalReport r;
  r.task_id = task.id;
  r.segment_ids = task.network.segment_ids;
  r.prediction = pred;
  const std::size_t n = task.n(), T = task.T;
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double si = 0.0;
    std::size_t ni = 0;
    for (const DayRange& rg : ranges) {
      for (std::size_t t = rg.begin; t < rg.end; ++t) {
        if (!task.observed(i, t)) continue;
        const double d = pred[i * T + t] - task.y[i * T + t];
        si += d * d;
        ++ni;
      }
    }
    ss += si;
    r.n_obs += ni;
    r.segment_rmse.push_back(ni ? std::optional<double>(std::sqrt(si / static_cast<double>(ni))) : std::nullopt);
  }
  require(r.n_obs > 0, "score: no observations in the scored ranges of " + task.id);
  r.rmse = std::sqrt(ss / static_cast<double>(r.n_obs));
  return r;
}

// ---------------------------------------------------------------------------
// Preprocessing frozen on source tasks
// ---------------------------------------------------------------------------

struct PreparedTask {
  TaskDataset data;  // normalized
  AdjacencyMatrix adj;
};

struct Preprocessor {
  NormStats norm;
  DistanceStats distance;
  bool unified = true;
  int max_hops = 0;

  static Preprocessor fit(std::span<const TaskDataset* const> sources, bool unified, int max_hops) {
    require(!sources.empty(), "Preprocessor::fit: no source tasks");
    Preprocessor p;
    p.norm = compute_norm_stats(sources);
    std::vector<const SegmentNetwork*> nets;
    for (const TaskDataset* t : sources) nets.push_back(&t->network);
    p.distance = build_distance_stats(nets);
    p.unified = unified;
    p.max_hops = max_hops;
    return p;
  }

  /// Without unified preprocessing each network is standardized by its own distances.
  PreparedTask prepare(const TaskDataset& raw) const {
    PreparedTask out{normalize(raw, norm), {}};
    const DistanceStats ds = unified ? distance : build_distance_stats(raw.network);
    out.adj = adjacency_from_distances(raw.network, ds, max_hops);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Windows with loss targets
// ---------------------------------------------------------------------------

struct TrainWindow {
  TaskInputs inputs;
  Tensor labels;  // n x L
  Tensor mask;    // n x L
  double count = 0.0;
  std::size_t task_index = 0;
};

inline TrainWindow make_train_window(const PreparedTask& p, std::size_t begin, std::size_t length,
                                     std::size_t burn_in, std::size_t task_index) {
  TrainWindow w;
  w.inputs = make_inputs(p.data, p.adj, begin, length);
  w.task_index = task_index;
  const std::size_t n = p.data.n();
  std::vector<double> y(n * length, 0.0), m(n * length, 0.0);
  const std::size_t skip = std::max<std::size_t>(burn_in, 1);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = skip; t < length; ++t) {
      if (!p.data.observed(i, begin + t)) continue;
      y[i * length + t] = p.data.y[i * p.data.T + begin + t];
      m[i * length + t] = 1.0;
      w.count += 1.0;
    }
  }
  w.labels = Tensor::from_data(n, length, std::move(y));
  w.mask = Tensor::from_data(n, length, std::move(m));
  return w;
}

/// Grid windows over every training range, plus one extra window for each
/// observation the grid leaves inside a burn-in prefix. Windows without any
/// loss observation are dropped.
inline std::vector<TrainWindow> training_windows(const PreparedTask& p, const TrainConfig& cfg,
                                                 std::size_t task_index) {
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // (begin, length)
  const std::size_t skip = std::max<std::size_t>(cfg.burn_in, 1);
  for (const DayRange& r : p.data.train) {
    const std::size_t L = std::min(cfg.window, r.size());
    if (L < 2 || L <= skip) continue;
    for (const TaskWindow& tw : window(p.data, L, cfg.stride, r)) spans.emplace_back(tw.begin, L);
    std::vector<std::uint8_t> covered(r.size(), 0);
    for (const auto& [b, len] : spans) {
      for (std::size_t t = b + skip; t < b + len; ++t) {
        if (r.contains(t)) covered[t - r.begin] = 1;
      }
    }
    for (std::size_t t = r.begin; t < r.end; ++t) {
      if (covered[t - r.begin]) continue;
      bool any = false;
      for (std::size_t i = 0; i < p.data.n() && !any; ++i) any = p.data.observed(i, t);
      if (!any) continue;
      std::size_t b = t >= L / 2 ? t - L / 2 : 0;
      b = std::clamp(b, r.begin, r.end - L);
      if (t < b + skip) continue;
      spans.emplace_back(b, L);
      for (std::size_t u = b + skip; u < b + L; ++u) covered[u - r.begin] = 1;
    }
  }
  std::vector<TrainWindow> out;
  for (const auto& [b, len] : spans) {
    TrainWindow w = make_train_window(p, b, len, cfg.burn_in, task_index);
    if (w.count > 0) out.push_back(std::move(w));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward helpers
// ---------------------------------------------------------------------------

/// Embedding for one window. A fixed z (Geo-Focus prompt) replaces the computed one.
inline GeoEmbedding embed(const Model& model, const TaskInputs& in, const Tensor* z_override = nullptr) {
  if (z_override == nullptr && model.config().ablation.use_z) return compute_geo_embedding(in, model);
  GeoEmbedding e;
  e.task_id = in.task_id;
  e.h_c = characteristics_embed(in.c, model);
  if (z_override != nullptr) e.z = *z_override;
  return e;
}

inline Tensor window_loss(const Model& model, const TrainWindow& w, const Tensor* z_override = nullptr) {
  const GeoEmbedding e = embed(model, w.inputs, z_override);
  return masked_rmse_loss(forward(w.inputs, e, model), w.labels, w.mask, w.count);
}

/// Predictions for every day of a task, tiling windows so that each kept step
/// has at least `burn_in` days of context (except at the start of the record).
inline std::vector<double> predict_days(const Model& model, const PreparedTask& p, const TrainConfig& cfg,
                                        const Tensor* z_override = nullptr) {
  NoGradGuard no_grad;
  const std::size_t n = p.data.n(), T = p.data.T;
  const std::size_t L = std::min(cfg.window, T);
  require(L >= 2, "predict_days: task too short");
  const std::size_t burn = std::min(cfg.burn_in, L - 1);
  const std::size_t step = L - burn;
  std::vector<double> out(n * T, kMissing);
  std::size_t s = 0;
  while (true) {
    const TaskInputs in = make_inputs(p.data, p.adj, s, L);
    const GeoEmbedding e = embed(model, in, z_override);
    const Tensor pred = forward(in, e, model);
    const std::size_t from = s == 0 ? 0 : burn;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = from; t < L; ++t) out[i * T + s + t] = pred.at(i, t);
    if (s + L >= T) break;
    s = std::min(s + step, T - L);
  }
  return out;
}

/// Mean geo-aware embedding over the windows tiling the training ranges.
inline Tensor mean_embedding(const Model& model, const PreparedTask& p, const TrainConfig& cfg) {
  NoGradGuard no_grad;
  const std::size_t hz = model.config().Hz();
  std::vector<double> acc(hz, 0.0);
  std::size_t count = 0;
  for (const DayRange& r : p.data.train) {
    const std::size_t L = std::min(cfg.window, r.size());
    if (L < 2) continue;
    for (const TaskWindow& tw : window(p.data, L, std::max<std::size_t>(1, L), r)) {
      const GeoEmbedding e = compute_geo_embedding(make_inputs(p.data, p.adj, tw.begin, L), model);
      for (std::size_t k = 0; k < hz; ++k) acc[k] += e.z.data()[k];
      ++count;
    }
  }
  require(count > 0, "mean_embedding: no training window available");
  for (double& v : acc) v /= static_cast<double>(count);
  return Tensor::from_data(1, hz, std::move(acc));
}

// ---------------------------------------------------------------------------
// Optimization loop
// ---------------------------------------------------------------------------

struct TrainLog {
  std::vector<double> epoch_loss;  // [0] = before any update
  std::size_t epochs_run = 0;
  bool early_stopped = false;
};

inline double mean_loss(const Model& model, const std::vector<TrainWindow>& windows, const Tensor* z = nullptr) {
  NoGradGuard no_grad;
  double s = 0.0;
  for (const TrainWindow& w : windows) s += window_loss(model, w, z).item();
  return windows.empty() ? 0.0 : s / static_cast<double>(windows.size());
}

/// Runs epochs of Adam over `windows` (one window per step, tasks interleaved
/// round-robin in a per-epoch shuffled order). Only non-frozen groups move.
inline TrainLog optimize(const Model& model, std::vector<ParamGroup>& groups, const std::vector<TrainWindow>& windows,
                         std::size_t n_tasks, std::size_t epochs, const AdamConfig& adam, const TrainConfig& cfg,
                         std::uint64_t seed, const Tensor* z = nullptr) {
  TrainLog log;
  log.epoch_loss.push_back(mean_loss(model, windows, z));
  if (epochs == 0 || windows.empty()) return log;
  AdamState state;
  state.config = adam;
  std::vector<ParamGroup*> gptr;
  for (ParamGroup& g : groups) gptr.push_back(&g);
  std::vector<std::vector<std::size_t>> by_task(n_tasks);
  for (std::size_t k = 0; k < windows.size(); ++k) by_task[windows[k].task_index].push_back(k);
  std::mt19937_64 rng(seed);
  double best = log.epoch_loss[0];
  std::size_t stale = 0;
  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    std::vector<std::size_t> task_order(n_tasks);
    std::iota(task_order.begin(), task_order.end(), std::size_t{0});
    std::shuffle(task_order.begin(), task_order.end(), rng);
    std::size_t rounds = 0;
    for (auto& v : by_task) {
      std::shuffle(v.begin(), v.end(), rng);
      rounds = std::max(rounds, v.size());
    }
    double total = 0.0;
    std::size_t steps = 0;
    for (std::size_t r = 0; r < rounds; ++r) {
      for (std::size_t ti : task_order) {
        if (r >= by_task[ti].size()) continue;
        const TrainWindow& w = windows[by_task[ti][r]];
        Tensor loss;
        GradMap grads;
        try {
          loss = window_loss(model, w, z);
          grads = backward(loss);
        } catch (const NumericError& e) {
          throw NumericError(e.op(), std::string("training diverged at epoch ") + std::to_string(epoch) + " on task " +
                                         w.inputs.task_id + " (" + e.what() + ")");
        }
        if (!std::isfinite(loss.item())) throw NumericError("loss", "non-finite training loss");
        adam_step(gptr, grads, state);
        total += loss.item();
        ++steps;
      }
    }
    const double epoch_loss = total / static_cast<double>(std::max<std::size_t>(steps, 1));
    log.epoch_loss.push_back(epoch_loss);
    log.epochs_run = epoch;
    if (best - epoch_loss > cfg.min_delta) {
      best = epoch_loss;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      log.early_stopped = true;
      break;
    }
  }
  return log;
}

struct PretrainResult {
  Model model;
  Preprocessor prep;
  TrainLog log;
};

/// Multi-task pretraining on source tasks (raw, unnormalized).
inline PretrainResult pretrain(std::span<const TaskDataset* const> sources, ModelConfig mcfg, const TrainConfig& cfg,
                               std::uint64_t seed) {
  require(!sources.empty(), "pretrain: no source tasks");
  std::size_t total_obs = 0;
  for (const TaskDataset* t : sources) total_obs += t->observed_count();
  if (total_obs == 0) throw DataError("pretrain: source tasks carry no observations");
  PretrainResult out;
  out.prep = Preprocessor::fit(sources, mcfg.ablation.unified_preprocessing, mcfg.max_hops);
  mcfg.y_mean = out.prep.norm.y_mean;
  mcfg.y_std = out.prep.norm.y_std;
  mcfg.init_seed = seed;
  out.model = Model(mcfg);
  std::vector<TrainWindow> windows;
  for (std::size_t k = 0; k < sources.size(); ++k) {
    const PreparedTask p = out.prep.prepare(*sources[k]);
    auto w = training_windows(p, cfg, k);
    std::move(w.begin(), w.end(), std::back_inserter(windows));
  }
  auto groups = out.model.groups();
  out.log = optimize(out.model, groups, windows, sources.size(), cfg.epochs, cfg.pretrain_adam, cfg, seed);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation and fine-tuning
// ---------------------------------------------------------------------------

/// Scores on the task's test ranges. The model only ever sees the
/// label-stripped copy of the task.
inline EvalReport evaluate(const Model& model, const Preprocessor& prep, const TaskDataset& raw,
                           const TrainConfig& cfg, const Tensor* z_override = nullptr) {
  const PreparedTask p = prep.prepare(strip_labels(raw));
  return score(raw, predict_days(model, p, cfg, z_override), raw.test);
}

inline EvalReport zero_shot_eval(const Model& model, const Preprocessor& prep, const TaskDataset& raw,
                                 const TrainConfig& cfg) {
  return evaluate(model, prep, raw, cfg);
}

enum class FinetuneStrategy : std::uint8_t { complete, geo_related, geo_focus };

inline std::string to_string(FinetuneStrategy s) {
  switch (s) {
    case FinetuneStrategy::complete: return "complete";
    case FinetuneStrategy::geo_related: return "geo-related";
    case FinetuneStrategy::geo_focus: return "geo-focus";
  }
  return "?";
}

inline FinetuneStrategy strategy_from_string(const std::string& s) {
  if (s == "complete") return FinetuneStrategy::complete;
  if (s == "geo-related" || s == "geo_related") return FinetuneStrategy::geo_related;
  if (s == "geo-focus" || s == "geo_focus") return FinetuneStrategy::geo_focus;
  throw DataError("unknown fine-tuning strategy '" + s + "'");
}

/// Groups a strategy may update.
inline std::vector<GroupId> trainable_groups(FinetuneStrategy s) {
  switch (s) {
    case FinetuneStrategy::complete:
      return {GroupId::encoder, GroupId::characteristics_mlp, GroupId::gate, GroupId::pooling, GroupId::head};
    case FinetuneStrategy::geo_related: return {GroupId::characteristics_mlp};
    case FinetuneStrategy::geo_focus: return {GroupId::embedding_z};
  }
  return {};
}

struct FinetuneResult {
  Model model;
  std::optional<Tensor> z;  // the tuned prompt under Geo-Focus
  EvalReport report;
  TrainLog log;
};

/// Fine-tunes a copy of `base` on a sparse subsample of the target's
/// training-range observations, then scores the test ranges.
inline FinetuneResult finetune(const Model& base, const Preprocessor& prep, const TaskDataset& raw_target,
                               FinetuneStrategy strategy, double sparsity, std::uint64_t seed, const TrainConfig& cfg) {
  const TaskDataset tuning =
      subsample_observations(restrict_observations(raw_target, raw_target.train), sparsity, seed);
  if (tuning.observed_count() == 0) throw DataError(raw_target.id + ": no observations left after subsampling");
  const PreparedTask p = prep.prepare(tuning);
  const std::vector<TrainWindow> windows = training_windows(p, cfg, 0);

  FinetuneResult out{base, std::nullopt, {}, {}};
  auto groups = out.model.groups();
  const auto allowed = trainable_groups(strategy);
  for (ParamGroup& g : groups) g.frozen = std::find(allowed.begin(), allowed.end(), g.id) == allowed.end();

  if (strategy == FinetuneStrategy::geo_focus) {
    require(base.config().ablation.use_z, "finetune: Geo-Focus needs a model that uses z");
    const Tensor init = mean_embedding(out.model, p, cfg);
    Tensor z = Tensor::parameter("z", 1, init.cols(), std::vector<double>(init.data().begin(), init.data().end()));
    groups.push_back(ParamGroup{GroupId::embedding_z, {z}, false});
    out.log = optimize(out.model, groups, windows, 1, cfg.finetune_epochs, cfg.finetune_adam, cfg, seed, &z);
    out.z = z;
    out.report = evaluate(out.model, prep, raw_target, cfg, &z);
  } else {
    out.log = optimize(out.model, groups, windows, 1, cfg.finetune_epochs, cfg.finetune_adam, cfg, seed);
    out.report = evaluate(out.model, prep, raw_target, cfg);
  }
  out.report.seed = seed;
  return out;
}

// ---------------------------------------------------------------------------
// Climatology reference
// ---------------------------------------------------------------------------

namespace climatology_detail {

/// Segments in `a` and `b` are related when one id extends the other with "_f".
inline bool related(const std::string& a, const std::string& b) {
  auto extends = [](const std::string& fine, const std::string& coarse) {
    return fine.size() > coarse.size() + 2 && fine.compare(0, coarse.size(), coarse) == 0 &&
           fine.compare(coarse.size(), 2, "_f") == 0;
  };
  return a == b || extends(a, b) || extends(b, a);
}

}  // namespace climatology_detail

/// Per-segment day-of-year mean temperature borrowed from a sibling task (same
/// watershed, other scale) among the sources, smoothed over +-15 days. Days
/// without sibling data, or targets without a sibling, fall back to a linear
/// regression on air temperature fitted to all source training observations.
inline std::vector<double> climatology_predict(const TaskDataset& target, std::span<const TaskDataset* const> sources,
                                               std::size_t half_width = 15) {
  require(!sources.empty(), "climatology_predict: no source tasks");
  // Air-temperature regression.
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  std::size_t m = 0;
  for (const TaskDataset* s : sources) {
    for (std::size_t i = 0; i < s->n(); ++i)
      for (const DayRange& r : s->train)
        for (std::size_t t = r.begin; t < r.end; ++t) {
          if (!s->observed(i, t)) continue;
          const double a = s->x_at(i, t, 0), y = s->y[i * s->T + t];
          if (!std::isfinite(a)) continue;
          sx += a;
          sy += y;
          sxx += a * a;
          sxy += a * y;
          ++m;
        }
  }
  require(m >= 2, "climatology_predict: too few source observations");
  const double md = static_cast<double>(m);
  const double var = sxx / md - (sx / md) * (sx / md);
  const double slope = var > 0 ? (sxy / md - (sx / md) * (sy / md)) / var : 0.0;
  const double icpt = sy / md - slope * sx / md;

  const TaskDataset* sibling = nullptr;
  for (const TaskDataset* s : sources) {
    if (s->network.watershed == target.network.watershed && s->network.scale != target.network.scale) sibling = s;
  }
  const std::size_t n = target.n(), T = target.T;
  std::vector<double> out(n * T);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> doy_sum(366, 0.0), doy_cnt(366, 0.0);
    if (sibling != nullptr) {
      for (std::size_t j = 0; j < sibling->n(); ++j) {
        if (!climatology_detail::related(target.network.segment_ids[i], sibling->network.segment_ids[j])) continue;
        for (const DayRange& r : sibling->train)
          for (std::size_t t = r.begin; t < r.end; ++t) {
            if (!sibling->observed(j, t)) continue;
            const int d = day_of_year(sibling->start + std::chrono::days(t));
            doy_sum[static_cast<std::size_t>(d)] += sibling->y[j * sibling->T + t];
            doy_cnt[static_cast<std::size_t>(d)] += 1.0;
          }
      }
    }
    for (std::size_t t = 0; t < T; ++t) {
      const int d = day_of_year(target.start + std::chrono::days(t));
      double s = 0.0, c = 0.0;
      for (long o = -static_cast<long>(half_width); o <= static_cast<long>(half_width); ++o) {
        const auto k = static_cast<std::size_t>(((d + o) % 366 + 366) % 366);
        s += doy_sum[k];
        c += doy_cnt[k];
      }
      const double air = target.x_at(i, t, 0);
      out[i * T + t] = c > 0 ? s / c : icpt + slope * (std::isfinite(air) ? air : sx / md);
    }
  }
  return out;
}

inline EvalReport climatology_eval(const TaskDataset& target, std::span<const TaskDataset* const> sources) {
  return score(target, climatology_predict(target, sources), target.test);
}

}  // namespace geostars
