#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "geostars/synth_watershed.hpp"
#include "support.hpp"

using namespace geostars;
using geostars::testing::tiny_family;

namespace {

SynthConfig small(std::uint64_t seed, std::size_t days = 400) {
  SynthConfig c;
  c.n_watersheds = 2;
  c.split_factor = 3;
  c.days = days;
  c.seed = seed;
  return c;
}

double corr(const double* a, const double* b, std::size_t n) {
  double ma = 0, mb = 0;
  for (std::size_t k = 0; k < n; ++k) ma += a[k] / n, mb += b[k] / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t k = 0; k < n; ++k) {
    sab += (a[k] - ma) * (b[k] - mb);
    saa += (a[k] - ma) * (a[k] - ma);
    sbb += (b[k] - mb) * (b[k] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST(Simulation, MatchesIndependentRecurrence) {
  const auto fam = generate_family(small(3, 200));
  const SynthTask& st = fam.tasks[1];
  ProcessParams p = st.process;
  p.noise_std = 0.0;
  const std::size_t n = st.task.n(), T = st.task.T, F = st.task.F;
  const auto y = simulate_temperature(st.task.x, n, T, F, p, 1);
  // Two-buffer day-by-day recurrence over upstream lists rebuilt from distances.
  std::vector<std::vector<std::size_t>> up(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j && std::isfinite(st.task.network.dist[j * n + i])) {
        bool direct = true;
        for (std::size_t m = 0; m < n; ++m)
          if (m != i && m != j && std::isfinite(st.task.network.dist[j * n + m]) &&
              std::isfinite(st.task.network.dist[m * n + i]))
            direct = false;
        if (direct) up[i].push_back(j);
      }
  std::vector<double> prev(n), cur(n);
  for (std::size_t i = 0; i < n; ++i) prev[i] = std::max(0.0, 0.8 * st.task.x[i * T * F] + 2.0);
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      const double air = st.task.x[(i * T + t) * F];
      double inflow = 0;
      for (std::size_t j : up[i]) inflow += prev[j] / up[i].size();
      const double a = up[i].empty() ? 0.0 : p.a[i];
      cur[i] = std::max(0.0, (1 - p.k[i] - a) * prev[i] + p.k[i] * std::max(0.0, 0.8 * air + 2.0) + a * inflow);
    }
    prev = cur;
    for (std::size_t i = 0; i < n; ++i) ASSERT_NEAR(y[i * T + t], cur[i], 1e-12) << i << " " << t;
  }
}

TEST(Simulation, ConstantForcingConvergesToResponse) {
  const auto fam = generate_family(small(4, 10));
  const SynthTask& st = fam.tasks[0];
  const std::size_t n = st.task.n(), T = 3000, F = st.task.F;
  std::vector<double> x(n * T * F, 10.0);
  ProcessParams p = st.process;
  p.noise_std = 0.0;
  const auto y = simulate_temperature(x, n, T, F, p, 1);
  for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(y[i * T + T - 1], water_response(10.0), 1e-9);
}

TEST(Simulation, UnstableParametersRejected) {
  ProcessParams p;
  p.k = {0.7};
  p.a = {0.3};
  p.up = {{}};
  EXPECT_THROW(simulate_temperature(std::vector<double>(7 * 5, 1.0), 1, 5, 7, p, 0), DataError);
}

TEST(Simulation, RelaxationRateStaysInsideUnitInterval) {
  std::vector<double> c(65);
  for (double s : {-50.0, -3.0, 0.0, 3.0, 50.0}) {
    for (std::size_t m = 0; m < c.size(); ++m) c[m] = (m % 2 == 0 ? s : -s);
    const double k = relaxation_rate(c, 10);
    EXPECT_GE(k, 0.05 - 1e-12);
    EXPECT_LE(k, 0.95 + 1e-12);
  }
}

TEST(Network, FineOutletDistancesSumToCoarseDistances) {
  const auto fam = generate_family(small(8, 10));
  for (const auto& ws : fam.watersheds) {
    const std::size_t nc = ws.coarse.size(), nf = ws.fine.size(), s = nf / nc;
    for (std::size_t i = 0; i < nc; ++i) {
      double len = 0;
      for (std::size_t k = 0; k < s; ++k) len += ws.fine_length[i * s + k];
      EXPECT_NEAR(len, ws.coarse_length[i], 1e-12);
      for (std::size_t j = 0; j < nc; ++j) {
        const double dc = ws.coarse.dist[i * nc + j];
        const double df = ws.fine.dist[(i * s + s - 1) * nf + (j * s + s - 1)];
        if (std::isfinite(dc)) {
          EXPECT_NEAR(df, dc, 1e-9);
        } else {
          EXPECT_FALSE(std::isfinite(df));
        }
      }
    }
    EXPECT_NO_THROW(ws.fine.validate());
  }
}

TEST(Network, CoarseLengthsAverageNearTarget) {
  double total = 0;
  std::size_t count = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto fam = generate_family(small(seed, 10));
    for (const auto& ws : fam.watersheds)
      for (double l : ws.coarse_length) total += l, ++count;
  }
  EXPECT_NEAR(total / count, 10.5, 0.2 * 10.5);
}

TEST(Sparsify, KeepsRoundedCountAndDarkSegments) {
  const std::size_t n = 10, T = 50;
  const auto mask = sparsify(n, T, 0.1, 0.4, 17);
  std::size_t dark = 0, kept = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t row = 0;
    for (std::size_t t = 0; t < T; ++t) row += mask[i * T + t];
    kept += row;
    dark += row == 0;
  }
  EXPECT_EQ(kept, static_cast<std::size_t>(std::llround(0.1 * 6 * T)));
  EXPECT_GE(dark, 4u);
  EXPECT_EQ(sparsify(n, T, 0.1, 0.4, 17), mask);
}

TEST(Family, DeterministicPerSeed) {
  const auto a = generate_family(small(5, 100)), b = generate_family(small(5, 100)), c = generate_family(small(6, 100));
  ASSERT_EQ(a.tasks.size(), 4u);
  EXPECT_EQ(a.tasks[0].task.id, "W0_c");
  EXPECT_EQ(a.tasks[3].task.id, "W1_f");
  for (std::size_t k = 0; k < a.tasks.size(); ++k) {
    EXPECT_EQ(a.tasks[k].truth, b.tasks[k].truth);
    EXPECT_EQ(a.tasks[k].task.y_mask, b.tasks[k].task.y_mask);
  }
  EXPECT_NE(a.tasks[0].truth, c.tasks[0].truth);
}

TEST(Family, TemperaturesArePhysical) {
  const auto fam = generate_family(small(2, 1460));
  for (const auto& st : fam.tasks)
    for (double v : st.truth) {
      EXPECT_GE(v, 0.0);
      EXPECT_LT(v, 40.0);
    }
}

TEST(Family, FinePiecesTrackTheirCoarseParent) {
  const auto fam = generate_family(small(9, 730));
  const SynthTask& c = fam.tasks[0];
  const SynthTask& f = fam.tasks[1];
  const auto& ws = fam.watersheds[0];
  const std::size_t T = c.task.T;
  for (std::size_t k = 0; k < f.task.n(); ++k) {
    const std::size_t p = ws.coarse_parent[k];
    EXPECT_GT(corr(&f.truth[k * T], &c.truth[p * T], T), 0.9) << k;
  }
}

TEST(Family, SplitFactorOneRejected) {
  SynthConfig c = small(1);
  c.split_factor = 1;
  EXPECT_THROW(generate_family(c), DataError);
}

TEST(Climate, AnomalyHasConfiguredAutocorrelation) {
  SynthConfig c = small(12, 4000);
  const Climate cl = generate_climate(c, 0, c.seed);
  const double* a = cl.anomaly.data();
  EXPECT_NEAR(corr(a, a + 1, 3999), c.air_ar_rho, 0.05);
  double ss = 0;
  for (double v : cl.anomaly) ss += v * v;
  EXPECT_NEAR(std::sqrt(ss / 4000), c.air_ar_std, 0.15 * c.air_ar_std);
}

TEST(Family, FineIdsExtendCoarseIds) {
  const auto fam = tiny_family(3, 40);
  EXPECT_EQ(fam.tasks[1].task.network.segment_ids[0], "W0_c00_f0");
}
