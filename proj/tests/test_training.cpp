#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "support.hpp"

using namespace geostars;
using namespace geostars::testing;

namespace {

TrainConfig quick(std::size_t epochs = 3) {
  TrainConfig c;
  c.window = 30;
  c.stride = 20;
  c.burn_in = 5;
  c.epochs = epochs;
  c.finetune_epochs = epochs;
  c.pretrain_adam.lr = 0.01;
  return c;
}

std::vector<const TaskDataset*> sources_of(const SynthFamily& fam) {
  std::vector<const TaskDataset*> v;
  for (const auto& t : fam.tasks) v.push_back(&t.task);
  return v;
}

bool same_tensor(const Tensor& a, const Tensor& b) {
  return std::equal(a.data().begin(), a.data().end(), b.data().begin(), b.data().end());
}

}  // namespace

TEST(MaskedRmse, MatchesFlatLoop) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g;
  std::vector<double> p(25), y(25);
  std::vector<std::uint8_t> m(25);
  double ss = 0;
  int cnt = 0;
  for (int k = 0; k < 25; ++k) {
    p[k] = g(rng);
    y[k] = g(rng);
    m[k] = (k * 7) % 3 != 0;
    if (m[k]) ss += (p[k] - y[k]) * (p[k] - y[k]), ++cnt;
  }
  EXPECT_NEAR(masked_rmse(p, y, m), std::sqrt(ss / cnt), 1e-14);
  std::vector<double> mf(m.begin(), m.end()), yz(25);
  for (int k = 0; k < 25; ++k) yz[k] = m[k] ? y[k] : 0.0;
  const Tensor loss = masked_rmse_loss(Tensor::from_data(5, 5, p), Tensor::from_data(5, 5, yz),
                                       Tensor::from_data(5, 5, mf), cnt);
  EXPECT_NEAR(loss.item(), std::sqrt(ss / cnt + 1e-12), 1e-14);
}

TEST(Score, ConstantPredictionHasClosedForm) {
  const auto fam = tiny_family(3, 300);
  const TaskDataset& t = fam.tasks[0].task;
  const double c = 10.0;
  double s = 0, ss = 0, n = 0;
  for (std::size_t i = 0; i < t.n(); ++i)
    for (const auto& r : t.test)
      for (std::size_t d = r.begin; d < r.end; ++d)
        if (t.observed(i, d)) {
          const double y = t.y[i * t.T + d];
          s += y, ss += y * y, n += 1;
        }
  const double mean = s / n, var = ss / n - mean * mean;
  const EvalReport r = score(t, std::vector<double>(t.n() * t.T, c), t.test);
  EXPECT_EQ(r.n_obs, static_cast<std::size_t>(n));
  EXPECT_NEAR(r.rmse, std::sqrt(var + (mean - c) * (mean - c)), 1e-9);
}

TEST(Windows, EveryTrainObservationPastBurnInIsScored) {
  const auto fam = tiny_family(3, 400);
  const PreparedTask p = prepare_alone(fam.tasks[1].task);
  const TrainConfig cfg = quick();
  const auto ws = training_windows(p, cfg, 0);
  std::set<std::pair<std::size_t, std::size_t>> scored;
  for (const auto& w : ws) {
    EXPECT_GT(w.count, 0.0);
    for (std::size_t i = 0; i < p.data.n(); ++i)
      for (std::size_t t = 0; t < w.inputs.length; ++t) {
        if (w.mask.at(i, t) == 0.0) continue;
        const std::size_t d = w.inputs.begin + t;
        scored.insert({i, d});
        EXPECT_TRUE(std::any_of(p.data.train.begin(), p.data.train.end(), [d](auto& r) { return r.contains(d); }));
        EXPECT_GE(t, cfg.burn_in);
      }
  }
  for (std::size_t i = 0; i < p.data.n(); ++i)
    for (const auto& r : p.data.train)
      for (std::size_t d = r.begin + cfg.burn_in; d < r.end; ++d)
        if (p.data.observed(i, d)) {
          EXPECT_TRUE(scored.count({i, d})) << i << " " << d;
        }
}

TEST(Pretrain, ZeroEpochsLeavesInitialWeights) {
  const auto fam = tiny_family(3, 200);
  const auto src = sources_of(fam);
  const PretrainResult r = pretrain(src, tiny_model(), quick(0), 21);
  ModelConfig mc = tiny_model();
  mc.init_seed = 21;
  const Model fresh(mc);
  ASSERT_EQ(r.log.epoch_loss.size(), 1u);
  for (std::size_t e = 0; e < fresh.entries().size(); ++e)
    EXPECT_TRUE(same_tensor(fresh.entries()[e].tensor, r.model.entries()[e].tensor)) << fresh.entries()[e].name;
}

TEST(Pretrain, SameSeedSameWeights) {
  const auto fam = tiny_family(3, 200);
  const auto src = sources_of(fam);
  const PretrainResult a = pretrain(src, tiny_model(), quick(2), 5);
  const PretrainResult b = pretrain(src, tiny_model(), quick(2), 5);
  for (std::size_t e = 0; e < a.model.entries().size(); ++e)
    EXPECT_TRUE(same_tensor(a.model.entries()[e].tensor, b.model.entries()[e].tensor));
  EXPECT_EQ(a.log.epoch_loss, b.log.epoch_loss);
}

TEST(Pretrain, LossDecreases) {
  const auto fam = tiny_family(3, 300);
  const auto src = sources_of(fam);
  const PretrainResult r = pretrain(src, tiny_model(8, 8), quick(8), 3);
  ASSERT_GE(r.log.epoch_loss.size(), 2u);
  EXPECT_LT(r.log.epoch_loss.back(), r.log.epoch_loss.front());
}

TEST(Pretrain, NoObservationsIsADataError) {
  const auto fam = tiny_family(3, 100);
  const TaskDataset bare = strip_labels(fam.tasks[0].task);
  const TaskDataset* p = &bare;
  EXPECT_THROW(pretrain(std::span<const TaskDataset* const>(&p, 1), tiny_model(), quick(1), 1), DataError);
}

TEST(Evaluate, TestLabelsNeverReachTheModel) {
  const auto fam = tiny_family(3, 200);
  const auto src = sources_of(fam);
  const PretrainResult r = pretrain(src, tiny_model(), quick(1), 2);
  TaskDataset t = fam.tasks[0].task;
  const EvalReport a = evaluate(r.model, r.prep, t, quick());
  for (auto& v : t.y) v += 5.0;
  const EvalReport b = evaluate(r.model, r.prep, t, quick());
  EXPECT_EQ(a.prediction, b.prediction);
  for (double v : a.prediction) EXPECT_TRUE(std::isfinite(v));
}

TEST(Finetune, StrategiesTouchOnlyTheirGroups) {
  const auto fam = tiny_family(3, 200);
  const auto src = sources_of(fam);
  const PretrainResult base = pretrain(src, tiny_model(), quick(1), 2);
  const TaskDataset& target = fam.tasks[1].task;
  for (auto s : {FinetuneStrategy::complete, FinetuneStrategy::geo_related, FinetuneStrategy::geo_focus}) {
    const FinetuneResult f = finetune(base.model, base.prep, target, s, 0.5, 7, quick(2));
    const auto allowed = trainable_groups(s);
    bool any_changed = false;
    for (std::size_t e = 0; e < base.model.entries().size(); ++e) {
      const auto& be = base.model.entries()[e];
      const bool changed = !same_tensor(be.tensor, f.model.entries()[e].tensor);
      const bool may = std::find(allowed.begin(), allowed.end(), be.group) != allowed.end();
      if (!may) {
        EXPECT_FALSE(changed) << to_string(s) << " " << be.name;
      }
      any_changed = any_changed || changed;
    }
    EXPECT_EQ(f.z.has_value(), s == FinetuneStrategy::geo_focus);
    EXPECT_EQ(any_changed, s != FinetuneStrategy::geo_focus) << to_string(s);
    EXPECT_EQ(strategy_from_string(to_string(s)), s);
  }
}

TEST(Finetune, ZeroEpochsMatchesZeroShot) {
  const auto fam = tiny_family(3, 200);
  const auto src = sources_of(fam);
  const PretrainResult base = pretrain(src, tiny_model(), quick(1), 2);
  const TaskDataset& target = fam.tasks[1].task;
  const FinetuneResult f = finetune(base.model, base.prep, target, FinetuneStrategy::complete, 0.5, 7, quick(0));
  EXPECT_EQ(f.report.prediction, zero_shot_eval(base.model, base.prep, target, quick()).prediction);
}

TEST(Climatology, SiblingDayOfYearMeanOrAirRegression) {
  const auto fam = tiny_family(3, 800);
  const TaskDataset& coarse = fam.tasks[0].task;
  const TaskDataset& fine = fam.tasks[1].task;
  const TaskDataset* sib = &coarse;
  const auto pred = climatology_predict(fine, std::span<const TaskDataset* const>(&sib, 1));
  for (double v : pred) EXPECT_TRUE(std::isfinite(v));
  // Without a sibling every value lies on one air-temperature line.
  TaskDataset other = coarse;
  other.network.watershed = "elsewhere";
  const TaskDataset* o = &other;
  const auto line = climatology_predict(fine, std::span<const TaskDataset* const>(&o, 1));
  const double a0 = fine.x_at(0, 0, 0), a1 = fine.x_at(0, 1, 0);
  const double slope = (line[1] - line[0]) / (a1 - a0);
  for (std::size_t t = 2; t < 50; ++t)
    EXPECT_NEAR(line[t], line[0] + slope * (fine.x_at(0, t, 0) - a0), 1e-9);
}
