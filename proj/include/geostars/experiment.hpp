#pragma once

// Experiment plans, run configuration, checkpoint directories and the
// report bundle written for each (plan, protocol).

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "geostars/dataset.hpp"
#include "geostars/io/dates.hpp"
#include "geostars/model.hpp"
#include "geostars/report.hpp"
#include "geostars/synth_watershed.hpp"
#include "geostars/training.hpp"

namespace geostars {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// JSON for configs
// ---------------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const AdamConfig& a) {
  j = {{"lr", a.lr}, {"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}, {"clip_norm", a.clip_norm}};
}

inline void from_json(const nlohmann::json& j, AdamConfig& a) {
  const AdamConfig d;
  a.lr = j.value("lr", d.lr);
  a.beta1 = j.value("beta1", d.beta1);
  a.beta2 = j.value("beta2", d.beta2);
  a.eps = j.value("eps", d.eps);
  a.clip_norm = j.value("clip_norm", d.clip_norm);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"window", c.window},
       {"stride", c.stride},
       {"burn_in", c.burn_in},
       {"epochs", c.epochs},
       {"finetune_epochs", c.finetune_epochs},
       {"patience", c.patience},
       {"min_delta", c.min_delta},
       {"pretrain_adam", c.pretrain_adam},
       {"finetune_adam", c.finetune_adam},
       {"sparsity", c.sparsity}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.window = j.value("window", d.window);
  c.stride = j.value("stride", d.stride);
  c.burn_in = j.value("burn_in", d.burn_in);
  c.epochs = j.value("epochs", d.epochs);
  c.finetune_epochs = j.value("finetune_epochs", d.finetune_epochs);
  c.patience = j.value("patience", d.patience);
  c.min_delta = j.value("min_delta", d.min_delta);
  c.pretrain_adam = j.value("pretrain_adam", d.pretrain_adam);
  c.finetune_adam = j.value("finetune_adam", d.finetune_adam);
  c.sparsity = j.value("sparsity", d.sparsity);
  if (c.window < 2) throw DataError("train.window must be at least 2");
  if (c.stride < 1) throw DataError("train.stride must be positive");
  if (!(c.sparsity > 0 && c.sparsity <= 1)) throw DataError("train.sparsity must be in (0, 1]");
}

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"n_watersheds", c.n_watersheds},
       {"coarse_min", c.coarse_min},
       {"coarse_max", c.coarse_max},
       {"split_factor", c.split_factor},
       {"coarse_length_km", c.coarse_length_km},
       {"days", c.days},
       {"F", c.F},
       {"K", c.K},
       {"informative", c.informative},
       {"coarse_sparsity", c.coarse_sparsity},
       {"fine_sparsity", c.fine_sparsity},
       {"fine_unobserved", c.fine_unobserved},
       {"noise_std", c.noise_std},
       {"air_ar_rho", c.air_ar_rho},
       {"air_ar_std", c.air_ar_std},
       {"segment_noise_std", c.segment_noise_std},
       {"advection_fraction", c.advection_fraction},
       {"advection_lag", c.advection_lag},
       {"seed", c.seed},
       {"start_date", c.start_date}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  const SynthConfig d;
  c.n_watersheds = j.value("n_watersheds", d.n_watersheds);
  c.coarse_min = j.value("coarse_min", d.coarse_min);
  c.coarse_max = j.value("coarse_max", d.coarse_max);
  c.split_factor = j.value("split_factor", d.split_factor);
  c.coarse_length_km = j.value("coarse_length_km", d.coarse_length_km);
  c.days = j.value("days", d.days);
  c.F = j.value("F", d.F);
  c.K = j.value("K", d.K);
  c.informative = j.value("informative", d.informative);
  c.coarse_sparsity = j.value("coarse_sparsity", d.coarse_sparsity);
  c.fine_sparsity = j.value("fine_sparsity", d.fine_sparsity);
  c.fine_unobserved = j.value("fine_unobserved", d.fine_unobserved);
  c.noise_std = j.value("noise_std", d.noise_std);
  c.air_ar_rho = j.value("air_ar_rho", d.air_ar_rho);
  c.air_ar_std = j.value("air_ar_std", d.air_ar_std);
  c.segment_noise_std = j.value("segment_noise_std", d.segment_noise_std);
  c.advection_fraction = j.value("advection_fraction", d.advection_fraction);
  c.advection_lag = j.value("advection_lag", d.advection_lag);
  c.seed = j.value("seed", d.seed);
  c.start_date = j.value("start_date", d.start_date);
}

inline void to_json(nlohmann::json& j, const Preprocessor& p) {
  j = {{"x_mean", p.norm.x_mean}, {"x_std", p.norm.x_std},       {"c_mean", p.norm.c_mean},
       {"c_std", p.norm.c_std},   {"y_mean", p.norm.y_mean},     {"y_std", p.norm.y_std},
       {"distance_mean", p.distance.mean}, {"distance_std", p.distance.std}, {"distance_pairs", p.distance.n_pairs},
       {"unified", p.unified},    {"max_hops", p.max_hops}};
}

inline void from_json(const nlohmann::json& j, Preprocessor& p) {
  j.at("x_mean").get_to(p.norm.x_mean);
  j.at("x_std").get_to(p.norm.x_std);
  j.at("c_mean").get_to(p.norm.c_mean);
  j.at("c_std").get_to(p.norm.c_std);
  j.at("y_mean").get_to(p.norm.y_mean);
  j.at("y_std").get_to(p.norm.y_std);
  j.at("distance_mean").get_to(p.distance.mean);
  j.at("distance_std").get_to(p.distance.std);
  j.at("distance_pairs").get_to(p.distance.n_pairs);
  j.at("unified").get_to(p.unified);
  j.at("max_hops").get_to(p.max_hops);
}

// ---------------------------------------------------------------------------
// Plans and run configuration
// ---------------------------------------------------------------------------

struct ExperimentPlan {
  std::string name;
  std::vector<std::string> sources;
  std::vector<std::string> targets;
  std::vector<std::string> protocols;
  std::vector<std::uint64_t> seeds;

  void validate() const {
    if (name.empty()) throw DataError("plan: missing name");
    if (sources.empty()) throw DataError("plan " + name + ": no source tasks");
    for (const auto& t : targets) {
      if (std::find(sources.begin(), sources.end(), t) != sources.end()) {
        throw DataError("plan " + name + ": task '" + t + "' is both source and target");
      }
    }
  }
};

inline void from_json(const nlohmann::json& j, ExperimentPlan& p) {
  p.name = j.value("name", std::string{});
  p.sources = j.value("sources", std::vector<std::string>{});
  p.targets = j.value("targets", std::vector<std::string>{});
  p.protocols = j.value("protocols", std::vector<std::string>{});
  p.seeds = j.value("seeds", std::vector<std::uint64_t>{});
}

inline void to_json(nlohmann::json& j, const ExperimentPlan& p) {
  j = {{"name", p.name}, {"sources", p.sources}, {"targets", p.targets}, {"protocols", p.protocols}, {"seeds", p.seeds}};
}

struct RunConfig {
  std::string data_dir = "data";
  std::string out_dir = "out";
  ModelConfig model;
  TrainConfig train;
  SynthConfig synth;
  std::vector<std::uint64_t> seeds{0};
  std::size_t mask_keep = 10;  // characteristics kept under the missing-characteristics protocol

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["data_dir"] = data_dir;
    j["out_dir"] = out_dir;
    j["model"] = model;
    j["train"] = train;
    j["synth"] = synth;
    j["seeds"] = seeds;
    j["mask_keep"] = mask_keep;
    return j;
  }
};

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  c.data_dir = j.value("data_dir", c.data_dir);
  c.out_dir = j.value("out_dir", c.out_dir);
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
  if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
  if (j.contains("synth")) c.synth = j.at("synth").get<SynthConfig>();
  c.seeds = j.value("seeds", c.seeds);
  c.mask_keep = j.value("mask_keep", c.mask_keep);
  if (c.model.F < 1 || c.model.K < 1 || c.model.H < 1 || c.model.Hc < 1) throw DataError("model dimensions must be positive");
  return c;
}

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Task store and synthetic export
// ---------------------------------------------------------------------------

/// Lazily loads task directories <root>/<task id>/.
class TaskStore {
 public:
  explicit TaskStore(fs::path root) : root_(std::move(root)) {}

  void put(TaskDataset task) {
    const std::string id = task.id;
    tasks_.insert_or_assign(id, std::move(task));
  }

  const TaskDataset& get(const std::string& id) {
    auto it = tasks_.find(id);
    if (it != tasks_.end()) return it->second;
    const fs::path dir = root_ / id;
    if (!fs::is_directory(dir)) throw DataError("task '" + id + "' not found under " + root_.string());
    return tasks_.emplace(id, load_task(dir, id)).first->second;
  }

  std::vector<const TaskDataset*> get_all(const std::vector<std::string>& ids) {
    std::vector<const TaskDataset*> out;
    for (const auto& id : ids) out.push_back(&get(id));
    return out;
  }

 private:
  fs::path root_;
  std::map<std::string, TaskDataset> tasks_;
};

/// Writes every task of a family plus manifest.json listing them.
inline void export_family(const SynthFamily& fam, const fs::path& dir, const std::string& fp) {
  const std::string st = stamp(fp, fam.config.seed);
  nlohmann::json manifest;
  manifest["fingerprint"] = fp;
  manifest["seed"] = fam.config.seed;
  manifest["config"] = fam.config;
  manifest["tasks"] = nlohmann::json::array();
  for (const SynthTask& t : fam.tasks) {
    write_task(t.task, dir / t.task.id, st);
    manifest["tasks"].push_back({{"id", t.task.id},
                                 {"dir", t.task.id},
                                 {"watershed", t.task.network.watershed},
                                 {"scale", std::string(to_string(t.task.network.scale))},
                                 {"segments", t.task.n()},
                                 {"observations", t.task.observed_count()}});
  }
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Pretrained model directories
// ---------------------------------------------------------------------------

inline fs::path model_dir(const fs::path& out, const std::string& plan, std::uint64_t seed,
                          const std::string& variant = "full") {
  return out / "models" / plan / variant / ("seed" + std::to_string(seed));
}

inline void save_pretrained(const PretrainResult& r, const fs::path& dir, const std::string& fp) {
  fs::create_directories(dir);
  save_checkpoint(r.model, dir / "model.json", fp);
  nlohmann::json p = r.prep;
  p["fingerprint"] = fp;
  write_text(dir / "preprocessor.json", p.dump(2) + "\n");
}

inline PretrainResult load_pretrained(const fs::path& dir) {
  if (!fs::exists(dir / "model.json")) throw DataError("missing model checkpoint in " + dir.string());
  PretrainResult r;
  r.model = load_checkpoint(dir / "model.json");
  r.prep = read_json(dir / "preprocessor.json").get<Preprocessor>();
  return r;
}

// ---------------------------------------------------------------------------
// Protocols
// ---------------------------------------------------------------------------

enum class ProtocolKind : std::uint8_t { zero_shot, few_shot, missing_chars, ablation };

struct Protocol {
  ProtocolKind kind = ProtocolKind::zero_shot;
  FinetuneStrategy strategy = FinetuneStrategy::complete;

  std::string dir_name() const {
    switch (kind) {
      case ProtocolKind::zero_shot: return "zero_shot";
      case ProtocolKind::few_shot: return "few_shot_" + to_string(strategy);
      case ProtocolKind::missing_chars: return "missing_chars";
      case ProtocolKind::ablation: return "ablation";
    }
    return "?";
  }
};

/// "zero_shot", "few_shot:<strategy>", "missing_chars" or "ablation".
inline Protocol protocol_from_string(const std::string& s) {
  Protocol p;
  if (s == "zero_shot") return p;
  if (s == "missing_chars") return {ProtocolKind::missing_chars, FinetuneStrategy::geo_focus};
  if (s == "ablation") return {ProtocolKind::ablation, FinetuneStrategy::complete};
  const std::string pre = "few_shot";
  if (s.rfind(pre, 0) == 0) {
    p.kind = ProtocolKind::few_shot;
    if (s.size() > pre.size()) {
      if (s[pre.size()] != ':') throw DataError("unknown protocol '" + s + "'");
      p.strategy = strategy_from_string(s.substr(pre.size() + 1));
    }
    return p;
  }
  throw DataError("unknown protocol '" + s + "'");
}

struct AblationVariant {
  std::string name;
  AblationConfig ablation;
};

/// Full model plus one variant per removed component.
inline std::vector<AblationVariant> ablation_variants() {
  std::vector<AblationVariant> v(6);
  v[0].name = "full";
  v[1].name = "no_z";
  v[1].ablation.use_z = false;
  v[2].name = "no_c";
  v[2].ablation.use_c_in_gate = false;
  v[3].name = "no_a_prime";
  v[3].ablation.use_A_prime = false;
  v[4].name = "no_a";
  v[4].ablation.use_A = false;
  v[5].name = "no_u";
  v[5].ablation.unified_preprocessing = false;
  return v;
}

/// One evaluated column of the results table.
struct MethodRun {
  std::string method;
  std::optional<std::uint64_t> seed;  // absent for seed-free references
  std::map<std::string, EvalReport> by_target;
};

struct CurvePoint {
  std::uint64_t seed = 0;
  std::string phase;
  std::size_t epoch = 0;
  double loss = 0.0;
};

struct ExperimentResult {
  std::string plan;
  std::string protocol;
  std::vector<std::string> targets;
  std::vector<MethodRun> runs;
  std::vector<CurvePoint> curves;
  std::vector<std::string> failures;  // "<target>: <reason>"

  std::string column(const MethodRun& r) const {
    return r.seed ? r.method + "/s" + std::to_string(*r.seed) : r.method;
  }

  /// Median over seeds of a method's task RMSE, per target.
  std::optional<double> median(const std::string& method, const std::string& target) const {
    std::vector<double> v;
    for (const auto& r : runs) {
      if (r.method != method) continue;
      auto it = r.by_target.find(target);
      if (it != r.by_target.end()) v.push_back(it->second.rmse);
    }
    if (v.empty()) return std::nullopt;
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
  }

  std::vector<std::string> methods() const {
    std::vector<std::string> out;
    for (const auto& r : runs)
      if (std::find(out.begin(), out.end(), r.method) == out.end()) out.push_back(r.method);
    return out;
  }
};

inline void append_curve(ExperimentResult& res, std::uint64_t seed, const std::string& phase, const TrainLog& log) {
  for (std::size_t e = 0; e < log.epoch_loss.size(); ++e) res.curves.push_back({seed, phase, e, log.epoch_loss[e]});
}

/// Supplies the pretrained model for a seed and ablation variant.
using PretrainedProvider = std::function<PretrainResult(std::uint64_t seed, const AblationVariant& variant)>;

/// Pretrains from scratch on the plan's sources.
inline PretrainedProvider train_provider(const ExperimentPlan& plan, TaskStore& store, const RunConfig& cfg) {
  return [&plan, &store, &cfg](std::uint64_t seed, const AblationVariant& variant) {
    ModelConfig mc = cfg.model;
    mc.ablation = variant.ablation;
    const auto sources = store.get_all(plan.sources);
    return pretrain(sources, mc, cfg.train, seed);
  };
}

/// Loads checkpoints written by a previous pretraining run.
inline PretrainedProvider checkpoint_provider(const ExperimentPlan& plan, const RunConfig& cfg) {
  return [&plan, &cfg](std::uint64_t seed, const AblationVariant& variant) {
    return load_pretrained(model_dir(cfg.out_dir, plan.name, seed, variant.name));
  };
}

/// Runs one protocol for every seed of the plan and returns the collected
/// reports; failures on individual targets are recorded, not thrown.
inline ExperimentResult run_protocol(const ExperimentPlan& plan, const Protocol& protocol, TaskStore& store,
                                     const RunConfig& cfg, const std::vector<std::uint64_t>& seeds,
                                     const PretrainedProvider& provider) {
  plan.validate();
  ExperimentResult res;
  res.plan = plan.name;
  res.protocol = protocol.dir_name();
  res.targets = plan.targets;
  if (plan.targets.empty()) return res;
  const auto sources = store.get_all(plan.sources);

  auto guarded = [&res](const std::string& target, auto&& fn) {
    try {
      fn();
    } catch (const DataError& e) {
      res.failures.push_back(target + ": " + e.what());
    } catch (const NumericError& e) {
      res.failures.push_back(target + ": numeric failure in " + e.op() + ": " + e.what());
    }
  };

  if (protocol.kind != ProtocolKind::ablation) {
    MethodRun clim{"climatology", std::nullopt, {}};
    for (const auto& t : plan.targets) guarded(t, [&] { clim.by_target[t] = climatology_eval(store.get(t), sources); });
    res.runs.push_back(std::move(clim));
  }

  const auto variants = protocol.kind == ProtocolKind::ablation ? ablation_variants()
                                                                : std::vector<AblationVariant>{ablation_variants()[0]};
  for (std::uint64_t seed : seeds) {
    for (const AblationVariant& variant : variants) {
      PretrainResult pre = provider(seed, variant);
      append_curve(res, seed, "pretrain/" + variant.name, pre.log);
      const std::string fp = fingerprint(cfg.to_json());
      switch (protocol.kind) {
        case ProtocolKind::zero_shot:
        case ProtocolKind::ablation: {
          MethodRun run{protocol.kind == ProtocolKind::zero_shot ? "zero-shot" : variant.name, seed, {}};
          for (const auto& t : plan.targets) {
            guarded(t, [&] {
              EvalReport r = zero_shot_eval(pre.model, pre.prep, store.get(t), cfg.train);
              r.seed = seed;
              r.fingerprint = fp;
              run.by_target[t] = std::move(r);
            });
          }
          res.runs.push_back(std::move(run));
          break;
        }
        case ProtocolKind::few_shot: {
          MethodRun run{to_string(protocol.strategy), seed, {}};
          for (const auto& t : plan.targets) {
            guarded(t, [&] {
              FinetuneResult f = finetune(pre.model, pre.prep, store.get(t), protocol.strategy, cfg.train.sparsity,
                                          seed, cfg.train);
              f.report.fingerprint = fp;
              append_curve(res, seed, "finetune/" + t, f.log);
              run.by_target[t] = std::move(f.report);
            });
          }
          res.runs.push_back(std::move(run));
          break;
        }
        case ProtocolKind::missing_chars: {
          MethodRun full{"geo-focus", seed, {}}, masked{"geo-focus/masked", seed, {}};
          for (const auto& t : plan.targets) {
            guarded(t, [&] {
              const TaskDataset& raw = store.get(t);
              FinetuneResult a = finetune(pre.model, pre.prep, raw, FinetuneStrategy::geo_focus, cfg.train.sparsity,
                                          seed, cfg.train);
              FinetuneResult b = finetune(pre.model, pre.prep, mask_characteristics(raw, cfg.mask_keep, seed),
                                          FinetuneStrategy::geo_focus, cfg.train.sparsity, seed, cfg.train);
              a.report.fingerprint = b.report.fingerprint = fp;
              full.by_target[t] = std::move(a.report);
              masked.by_target[t] = std::move(b.report);
            });
          }
          res.runs.push_back(std::move(full));
          res.runs.push_back(std::move(masked));
          break;
        }
      }
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Report bundle
// ---------------------------------------------------------------------------

/// rmse.csv has one row per target; columns are method/seed runs followed by
/// per-method medians over seeds.
inline std::string rmse_csv(const ExperimentResult& res, const std::string& stamp_line) {
  std::vector<std::string> header{"target", "n_obs"};
  for (const auto& r : res.runs) header.push_back(res.column(r));
  const auto methods = res.methods();
  for (const auto& m : methods) {
    bool seeded = false;
    for (const auto& r : res.runs) seeded = seeded || (r.method == m && r.seed);
    if (seeded) header.push_back(m + "/median");
  }
  std::vector<std::vector<std::string>> rows;
  for (const auto& t : res.targets) {
    std::vector<std::string> row{t};
    std::size_t n_obs = 0;
    for (const auto& r : res.runs) {
      auto it = r.by_target.find(t);
      if (it != r.by_target.end()) n_obs = std::max(n_obs, it->second.n_obs);
    }
    row.push_back(std::to_string(n_obs));
    for (const auto& r : res.runs) {
      auto it = r.by_target.find(t);
      row.push_back(it == r.by_target.end() ? std::string{} : fmt_value(it->second.rmse));
    }
    for (const auto& m : methods) {
      bool seeded = false;
      for (const auto& r : res.runs) seeded = seeded || (r.method == m && r.seed);
      if (seeded) row.push_back(fmt_value(res.median(m, t)));
    }
    rows.push_back(std::move(row));
  }
  return csv_text(stamp_line, header, rows);
}

inline std::string segments_csv(const ExperimentResult& res, const std::string& stamp_line) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : res.runs) {
    for (const auto& t : res.targets) {
      auto it = r.by_target.find(t);
      if (it == r.by_target.end()) continue;
      const EvalReport& e = it->second;
      for (std::size_t i = 0; i < e.segment_ids.size(); ++i) {
        rows.push_back({t, e.segment_ids[i], res.column(r), fmt_value(e.segment_rmse[i])});
      }
    }
  }
  return csv_text(stamp_line, {"target", "segment_id", "run", "rmse"}, rows);
}

inline std::string curves_csv(const ExperimentResult& res, const std::string& stamp_line) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& c : res.curves) {
    rows.push_back({std::to_string(c.seed), c.phase, std::to_string(c.epoch), csv::format_fixed(c.loss, 6)});
  }
  return csv_text(stamp_line, {"seed", "phase", "epoch", "loss"}, rows);
}

/// Daily predictions of one run next to the raw observations (empty when unobserved).
inline std::string predictions_csv(const ExperimentResult& res, const MethodRun& run, TaskStore& store,
                                   const std::string& stamp_line) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& t : res.targets) {
    auto it = run.by_target.find(t);
    if (it == run.by_target.end() || it->second.prediction.empty()) continue;
    const TaskDataset& task = store.get(t);
    const auto& pred = it->second.prediction;
    for (std::size_t i = 0; i < task.n(); ++i) {
      for (std::size_t d = 0; d < task.T; ++d) {
        const std::size_t k = i * task.T + d;
        rows.push_back({t, task.network.segment_ids[i], format_date(task.start + std::chrono::days(d)),
                        csv::format_fixed(pred[k], 4), task.observed(i, d) ? csv::format_fixed(task.y[k], 4) : ""});
      }
    }
  }
  return csv_text(stamp_line, {"target", "segment_id", "date", "prediction", "observation"}, rows);
}

/// Bar chart of the per-target medians (or single values) of every method.
inline std::string rmse_svg(const ExperimentResult& res, const std::string& stamp_line) {
  std::vector<BarGroup> groups;
  for (const auto& m : res.methods()) {
    BarGroup g{m, {}};
    for (const auto& t : res.targets) g.values.push_back(res.median(m, t));
    groups.push_back(std::move(g));
  }
  return bar_chart(res.plan + " " + res.protocol + " RMSE", "RMSE (C)", res.targets, groups, stamp_line);
}

inline std::string curves_svg(const ExperimentResult& res, const std::string& stamp_line) {
  std::map<std::string, LineSeries> by;
  for (const auto& c : res.curves) {
    const std::string key = c.phase + " s" + std::to_string(c.seed);
    auto& s = by[key];
    s.label = key;
    s.x.push_back(static_cast<double>(c.epoch));
    s.y.push_back(c.loss);
  }
  std::vector<LineSeries> series;
  for (auto& [k, s] : by) series.push_back(std::move(s));
  return line_chart(res.plan + " training curves", "epoch", "loss (C)", series, stamp_line);
}

struct TimeSeriesRequest {
  std::string target;
  std::string segment_id;
  std::string from;   // YYYY-MM-DD, empty = first day of the record
  std::size_t days = 0;  // 0 = to the end of the record
};

/// Prediction line and observation markers for one segment, read back from
/// predictions.csv.
inline std::string timeseries_svg(const csv::Table& predictions, const TimeSeriesRequest& req,
                                  const std::string& stamp_line) {
  const std::size_t c_target = predictions.column("target"), c_seg = predictions.column("segment_id"),
                    c_date = predictions.column("date"), c_pred = predictions.column("prediction"),
                    c_obs = predictions.column("observation");
  std::vector<std::pair<Day, std::pair<double, double>>> pts;
  bool found = false;
  for (const auto& row : predictions.rows) {
    if (row[c_target] != req.target || row[c_seg] != req.segment_id) continue;
    found = true;
    const double obs = row[c_obs].empty() ? kMissing : csv::to_double(row[c_obs], "observation");
    pts.push_back({parse_date(row[c_date]), {csv::to_double(row[c_pred], "prediction"), obs}});
  }
  if (!found) throw DataError("unknown segment id '" + req.segment_id + "' in target '" + req.target + "'");
  std::sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  const Day first = req.from.empty() ? pts.front().first : parse_date(req.from);
  const std::size_t span =
      req.days ? req.days : static_cast<std::size_t>(std::max<long>(days_between(first, pts.back().first) + 1, 0));
  LineSeries pred{"prediction", {}, {}, false}, obs{"observation", {}, {}, true};
  for (const auto& [d, v] : pts) {
    const long off = days_between(first, d);
    if (off < 0 || static_cast<std::size_t>(off) >= span) continue;
    pred.x.push_back(static_cast<double>(off));
    pred.y.push_back(v.first);
    if (std::isfinite(v.second)) {
      obs.x.push_back(static_cast<double>(off));
      obs.y.push_back(v.second);
    }
  }
  std::vector<LineSeries> series{pred};
  if (!obs.x.empty()) series.push_back(obs);
  return line_chart(req.target + " " + req.segment_id + " from " + format_date(first), "day", "water temperature (C)",
                    series, stamp_line, span);
}

/// Segment with the most scored observations in the first target of `run`.
inline std::optional<std::pair<std::string, std::string>> busiest_segment(const ExperimentResult& res,
                                                                           const MethodRun& run, TaskStore& store) {
  for (const auto& t : res.targets) {
    if (!run.by_target.count(t)) continue;
    const TaskDataset& task = store.get(t);
    std::size_t best = 0, best_i = 0;
    for (std::size_t i = 0; i < task.n(); ++i) {
      std::size_t c = 0;
      for (const DayRange& r : task.test)
        for (std::size_t d = r.begin; d < r.end; ++d) c += task.observed(i, d);
      if (c > best) best = c, best_i = i;
    }
    if (best > 0) return std::make_pair(t, task.network.segment_ids[best_i]);
  }
  return std::nullopt;
}

/// Writes report/<plan>/<protocol>/{rmse,segments,curves,predictions}.csv and SVGs.
inline fs::path write_bundle(const ExperimentResult& res, TaskStore& store, const fs::path& out_dir,
                             const std::string& fp, std::uint64_t seed) {
  const fs::path dir = out_dir / "report" / res.plan / res.protocol;
  fs::create_directories(dir);
  const std::string st = stamp(fp, seed);
  write_text(dir / "rmse.csv", rmse_csv(res, st));
  write_text(dir / "segments.csv", segments_csv(res, st));
  write_text(dir / "curves.csv", curves_csv(res, st));
  write_text(dir / "rmse.svg", rmse_svg(res, st));
  write_text(dir / "curves.svg", curves_svg(res, st));
  const MethodRun* main_run = nullptr;
  for (const auto& r : res.runs)
    if (r.seed && !main_run) main_run = &r;
  if (main_run != nullptr) {
    const std::string text = predictions_csv(res, *main_run, store, st);
    write_text(dir / "predictions.csv", text);
    if (auto seg = busiest_segment(res, *main_run, store)) {
      std::istringstream in(text);
      const csv::Table table = csv::parse(in, "predictions.csv");
      const TaskDataset& task = store.get(seg->first);
      const std::string from = task.test.empty() ? "" : format_date(task.start + std::chrono::days(task.test[0].begin));
      const std::size_t days = task.test.empty() ? 0 : task.test[0].size();
      write_text(dir / "timeseries.svg", timeseries_svg(table, {seg->first, seg->second, from, days}, st));
    }
  }
  return dir;
}

}  // namespace geostars
