// geostars command-line tool: synthetic data, pretraining, fine-tuning,
// evaluation, ablation sweeps and plots.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "geostars/experiment.hpp"

namespace fs = std::filesystem;
using namespace geostars;

namespace {

struct Options {
  std::string config, plan, out, strategy = "complete";
  std::optional<std::uint64_t> seed;
  std::optional<double> sparsity;
  std::optional<std::size_t> mask_chars;
  bool zero_shot = false, force = false;
  bool no_z = false, no_c_gate = false, no_a_prime = false, no_a = false, no_unified = false;
  std::vector<std::string> segments;
  std::string from;
  std::size_t days = 0;
};

void log(const std::string& msg) { std::cerr << "[geostars] " << msg << '\n'; }

RunConfig load_config(const Options& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : run_config_from_json(read_json(o.config));
  if (!o.out.empty()) cfg.out_dir = o.out;
  if (o.sparsity) {
    if (!(*o.sparsity > 0 && *o.sparsity <= 1)) throw DataError("--sparsity must be in (0, 1]");
    cfg.train.sparsity = *o.sparsity;
  }
  if (o.mask_chars) cfg.mask_keep = *o.mask_chars;
  AblationConfig& ab = cfg.model.ablation;
  if (o.no_z) ab.use_z = false;
  if (o.no_c_gate) ab.use_c_in_gate = false;
  if (o.no_a_prime) ab.use_A_prime = false;
  if (o.no_a) ab.use_A = false;
  if (o.no_unified) ab.unified_preprocessing = false;
  return cfg;
}

ExperimentPlan load_plan(const Options& o) {
  if (o.plan.empty()) throw CLI::RequiredError("--plan");
  ExperimentPlan plan = read_json(o.plan).get<ExperimentPlan>();
  plan.validate();
  return plan;
}

std::vector<std::uint64_t> seeds_for(const Options& o, const ExperimentPlan& plan, const RunConfig& cfg) {
  if (o.seed) return {*o.seed};
  return plan.seeds.empty() ? cfg.seeds : plan.seeds;
}

/// Model-directory name for the ablation switches in effect.
AblationVariant variant_for(const AblationConfig& ab) {
  std::string name;
  auto add = [&name](bool off, const char* tag) {
    if (!off) return;
    if (!name.empty()) name += "+";
    name += tag;
  };
  add(!ab.use_z, "no_z");
  add(!ab.use_c_in_gate, "no_c");
  add(!ab.use_A_prime, "no_a_prime");
  add(!ab.use_A, "no_a");
  add(!ab.unified_preprocessing, "no_u");
  return {name.empty() ? "full" : name, ab};
}

int finish(const ExperimentResult& res, const fs::path& dir) {
  log("wrote " + dir.string());
  if (res.failures.empty()) return 0;
  for (const auto& f : res.failures) std::cerr << "failed: " << f << '\n';
  return 2;
}

int cmd_synth(const Options& o) {
  RunConfig cfg = load_config(o);
  if (o.seed) cfg.synth.seed = *o.seed;
  cfg.synth.validate();
  const fs::path dir = o.out.empty() ? fs::path(cfg.data_dir) : fs::path(o.out);
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!o.force) throw DataError("output directory " + dir.string() + " exists (use --force to overwrite)");
    fs::remove_all(dir);
  }
  const SynthFamily fam = generate_family(cfg.synth);
  nlohmann::json fp_src = cfg.synth;
  export_family(fam, dir, fingerprint(fp_src));
  log("wrote " + std::to_string(fam.tasks.size()) + " tasks to " + dir.string());
  return 0;
}

int cmd_pretrain(const Options& o) {
  const RunConfig cfg = load_config(o);
  const ExperimentPlan plan = load_plan(o);
  TaskStore store(cfg.data_dir);
  const std::string fp = fingerprint(cfg.to_json());
  const AblationVariant variant = variant_for(cfg.model.ablation);
  ExperimentResult res;
  res.plan = plan.name;
  res.protocol = "pretrain";
  const auto seeds = seeds_for(o, plan, cfg);
  for (std::uint64_t seed : seeds) {
    log("pretraining " + plan.name + " (" + variant.name + ") seed " + std::to_string(seed));
    const PretrainResult r = train_provider(plan, store, cfg)(seed, variant);
    save_pretrained(r, model_dir(cfg.out_dir, plan.name, seed, variant.name), fp);
    append_curve(res, seed, "pretrain/" + variant.name, r.log);
  }
  const fs::path dir = fs::path(cfg.out_dir) / "report" / plan.name / "pretrain";
  const std::string st = stamp(fp, seeds.front());
  write_text(dir / "curves.csv", curves_csv(res, st));
  write_text(dir / "curves.svg", curves_svg(res, st));
  return finish(res, dir);
}

int run_with_checkpoints(const Options& o, const Protocol& protocol) {
  RunConfig cfg = load_config(o);
  const ExperimentPlan plan = load_plan(o);
  TaskStore store(cfg.data_dir);
  const std::string fp = fingerprint(cfg.to_json());
  const AblationVariant variant = variant_for(cfg.model.ablation);
  const auto seeds = seeds_for(o, plan, cfg);
  PretrainedProvider provider = [&](std::uint64_t seed, const AblationVariant&) {
    return load_pretrained(model_dir(cfg.out_dir, plan.name, seed, variant.name));
  };
  for (std::uint64_t seed : seeds) provider(seed, variant);  // fail before any work if a checkpoint is missing
  log("running " + protocol.dir_name() + " on " + plan.name);
  const ExperimentResult res = run_protocol(plan, protocol, store, cfg, seeds, provider);
  return finish(res, write_bundle(res, store, cfg.out_dir, fp, seeds.front()));
}

int cmd_finetune(const Options& o) {
  Protocol p;
  if (o.mask_chars) {
    p = {ProtocolKind::missing_chars, FinetuneStrategy::geo_focus};
  } else {
    p = {ProtocolKind::few_shot, strategy_from_string(o.strategy)};
  }
  return run_with_checkpoints(o, p);
}

int cmd_eval(const Options& o) {
  if (o.zero_shot) return run_with_checkpoints(o, {ProtocolKind::zero_shot, FinetuneStrategy::complete});
  const ExperimentPlan plan = load_plan(o);
  int rc = 0;
  const std::vector<std::string> protocols = plan.protocols.empty() ? std::vector<std::string>{"zero_shot"} : plan.protocols;
  for (const auto& name : protocols) {
    const Protocol p = protocol_from_string(name);
    if (p.kind == ProtocolKind::ablation) throw DataError("use the ablate command for the ablation protocol");
    rc = std::max(rc, run_with_checkpoints(o, p));
  }
  return rc;
}

int cmd_ablate(const Options& o) {
  const RunConfig cfg = load_config(o);
  const ExperimentPlan plan = load_plan(o);
  TaskStore store(cfg.data_dir);
  const std::string fp = fingerprint(cfg.to_json());
  const auto seeds = seeds_for(o, plan, cfg);
  log("ablation sweep on " + plan.name);
  const ExperimentResult res =
      run_protocol(plan, {ProtocolKind::ablation, FinetuneStrategy::complete}, store, cfg, seeds, train_provider(plan, store, cfg));
  return finish(res, write_bundle(res, store, cfg.out_dir, fp, seeds.front()));
}

/// Redraws charts from an existing report directory.
int cmd_plot(const Options& o) {
  if (o.out.empty()) throw CLI::RequiredError("--out (report directory)");
  const fs::path dir = o.out;
  const csv::Table rmse = csv::read((dir / "rmse.csv").string());
  std::string stamp_line;
  {
    std::istringstream first(read_text(dir / "rmse.csv"));
    std::getline(first, stamp_line);
    if (stamp_line.rfind("# ", 0) == 0) stamp_line = stamp_line.substr(2);
  }
  std::vector<std::string> targets;
  for (const auto& row : rmse.rows) targets.push_back(row[0]);
  std::vector<BarGroup> groups;
  for (std::size_t c = 2; c < rmse.header.size(); ++c) {
    const std::string& h = rmse.header[c];
    const std::size_t slash = h.rfind('/');
    const std::string tail = slash == std::string::npos ? "" : h.substr(slash + 1);
    const bool per_seed = tail.size() > 1 && tail[0] == 's' &&
                          tail.find_first_not_of("0123456789", 1) == std::string::npos;
    if (per_seed) continue;
    BarGroup g{h, {}};
    for (const auto& row : rmse.rows) {
      g.values.push_back(row[c].empty() ? std::nullopt : std::optional<double>(csv::to_double(row[c], h)));
    }
    groups.push_back(std::move(g));
  }
  write_text(dir / "rmse.svg", bar_chart("RMSE", "RMSE (C)", targets, groups, stamp_line));
  if (!o.segments.empty()) {
    const csv::Table pred = csv::read((dir / "predictions.csv").string());
    const std::size_t c_t = pred.column("target"), c_s = pred.column("segment_id");
    for (const auto& seg : o.segments) {
      std::string target;
      for (const auto& row : pred.rows) {
        if (row[c_s] == seg) {
          target = row[c_t];
          break;
        }
      }
      if (target.empty()) throw DataError("unknown segment id '" + seg + "'");
      write_text(dir / ("timeseries_" + seg + ".svg"), timeseries_svg(pred, {target, seg, o.from, o.days}, stamp_line));
    }
  }
  log("wrote plots to " + dir.string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"geostars: geo-aware spatio-temporal transfer for stream temperature"};
  app.require_subcommand(1);
  Options o;

  auto common = [&o](CLI::App* c, bool plan_needed) {
    c->add_option("--config", o.config, "run configuration JSON");
    if (plan_needed) c->add_option("--plan", o.plan, "experiment plan JSON")->required();
    c->add_option("--seed", o.seed, "single seed overriding the plan's seed list");
    c->add_option("--out", o.out, "output directory");
  };
  auto ablation = [&o](CLI::App* c) {
    c->add_flag("--no-z", o.no_z, "drop the geo-aware embedding");
    c->add_flag("--no-c-gate", o.no_c_gate, "drop characteristics from the influence filters");
    c->add_flag("--no-a-prime", o.no_a_prime, "drop the previous-step gated adjacency");
    c->add_flag("--no-a", o.no_a, "drop the current-step gated adjacency");
    c->add_flag("--no-unified", o.no_unified, "standardize distances per network");
  };

  auto* synth = app.add_subcommand("synth", "generate a synthetic watershed family");
  common(synth, false);
  synth->add_flag("--force", o.force, "overwrite an existing output directory");

  auto* pre = app.add_subcommand("pretrain", "multi-task pretraining on the plan's sources");
  common(pre, true);
  ablation(pre);

  auto* ft = app.add_subcommand("finetune", "fine-tune checkpoints on the plan's targets");
  common(ft, true);
  ablation(ft);
  ft->add_option("--strategy", o.strategy, "complete, geo-related or geo-focus")
      ->check(CLI::IsMember({"complete", "geo-related", "geo-focus"}));
  ft->add_option("--sparsity", o.sparsity, "fraction of target observations used (default 0.001)");
  ft->add_option("--mask-chars", o.mask_chars, "keep only this many characteristics on targets (Geo-Focus)");

  auto* ev = app.add_subcommand("eval", "evaluate checkpoints on the plan's targets");
  common(ev, true);
  ablation(ev);
  ev->add_flag("--zero-shot", o.zero_shot, "zero-shot evaluation only");
  ev->add_option("--sparsity", o.sparsity, "fraction of target observations for few-shot protocols");
  ev->add_option("--mask-chars", o.mask_chars, "characteristics kept under the missing-characteristics protocol");

  auto* ab = app.add_subcommand("ablate", "pretrain and evaluate the full model and five ablation variants");
  common(ab, true);

  auto* plot = app.add_subcommand("plot", "redraw charts from a report directory");
  plot->add_option("--out", o.out, "report directory holding rmse.csv")->required();
  plot->add_option("--segment", o.segments, "segment id for a time-series chart (repeatable)");
  plot->add_option("--from", o.from, "first day of the time-series window (YYYY-MM-DD)");
  plot->add_option("--days", o.days, "length of the time-series window in days");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*synth) return cmd_synth(o);
    if (*pre) return cmd_pretrain(o);
    if (*ft) return cmd_finetune(o);
    if (*ev) return cmd_eval(o);
    if (*ab) return cmd_ablate(o);
    if (*plot) return cmd_plot(o);
  } catch (const CLI::Error& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const ContractError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure in " << e.op() << ": " << e.what() << '\n';
    return 3;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
