#pragma once

// Synthetic coarse/fine watershed families with a known temperature process.
//
// Every watershed is a random in-tree of coarse segments; its fine network
// splits each coarse segment into a chain of shorter pieces. Water temperature
// relaxes toward a response of air temperature at a characteristics-driven rate
// and mixes in yesterday's upstream temperature. The mapping from
// characteristics to process rates is identical across watersheds and scales,
// which is the cross-task consistency a transferable model can learn.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "geostars/dataset.hpp"
#include "geostars/error.hpp"
#include "geostars/stream_graph.hpp"

namespace geostars {

struct SynthConfig {
  std::size_t n_watersheds = 4;
  std::size_t coarse_min = 5;
  std::size_t coarse_max = 8;
  std::size_t split_factor = 8;
  double coarse_length_km = 10.5;
  std::size_t days = 1460;
  std::size_t F = 7;
  std::size_t K = 65;
  std::size_t informative = 10;      // leading characteristics that drive the process
  double coarse_sparsity = 0.22;     // kept fraction of (segment, day) pairs
  double fine_sparsity = 0.10;       // kept fraction on observed fine segments
  double fine_unobserved = 0.4;      // fraction of fine segments without any observation
  double noise_std = 0.3;            // process noise, degrees C
  double air_ar_rho = 0.8;
  double air_ar_std = 2.5;           // stationary std of the shared air anomaly
  double segment_noise_std = 0.5;    // per-segment air noise
  double advection_fraction = 0.5;   // a_i = fraction * (1 - k_i) below confluences
  std::size_t advection_lag = 1;
  std::uint64_t seed = 0;
  std::string start_date = "1979-10-01";

  void validate() const {
    if (n_watersheds < 1) throw DataError("synth: n_watersheds must be at least 1");
    if (coarse_min < 2 || coarse_max < coarse_min) throw DataError("synth: bad coarse segment range");
    if (split_factor < 2) throw DataError("synth: split factor must be at least 2");
    if (!(coarse_length_km > 0)) throw DataError("synth: segment lengths must be positive");
    if (days < 2) throw DataError("synth: days must be at least 2");
    if (F < 4) throw DataError("synth: at least 4 meteorological channels are generated");
    if (informative > K) throw DataError("synth: informative characteristics exceed K");
    if (!(coarse_sparsity > 0 && coarse_sparsity <= 1 && fine_sparsity > 0 && fine_sparsity <= 1)) {
      throw DataError("synth: sparsity must be in (0, 1]");
    }
    if (fine_unobserved < 0 || fine_unobserved >= 1) throw DataError("synth: fine_unobserved must be in [0, 1)");
    if (advection_fraction < 0 || advection_fraction >= 1) throw DataError("synth: advection fraction in [0, 1)");
    if (advection_lag < 1) throw DataError("synth: advection lag must be at least 1 day");
  }
};

/// One watershed at both scales. `downstream` holds the receiving segment
/// index (-1 at the outlet); `coarse_parent` maps fine segments to coarse ones.
struct SynthWatershed {
  SegmentNetwork coarse;
  SegmentNetwork fine;
  std::vector<int> coarse_downstream;
  std::vector<int> fine_downstream;
  std::vector<double> coarse_length;
  std::vector<double> fine_length;
  std::vector<std::size_t> coarse_parent;
  std::vector<double> coarse_chars;  // n_c x K
  std::vector<double> fine_chars;    // n_f x K
};

namespace synth_detail {

inline std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t h = a ^ (b + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2));
  h ^= h >> 33;
  h *= 0xff51afd7ed558ccdULL;
  h ^= h >> 33;
  return h;
}

/// Distances between outlets of a tree given each segment's receiving segment.
inline std::vector<double> tree_distances(const std::vector<int>& downstream, const std::vector<double>& length) {
  const std::size_t n = downstream.size();
  std::vector<double> d(n * n, kUnconnected);
  for (std::size_t i = 0; i < n; ++i) {
    d[i * n + i] = 0.0;
    double acc = 0.0;
    for (int j = downstream[i]; j >= 0; j = downstream[static_cast<std::size_t>(j)]) {
      acc += length[static_cast<std::size_t>(j)];
      d[i * n + static_cast<std::size_t>(j)] = acc;
    }
  }
  return d;
}

inline std::string two_digits(std::size_t v) {
  std::string s = std::to_string(v);
  return s.size() < 2 ? "0" + s : s;
}

}  // namespace synth_detail

inline std::string watershed_name(std::size_t w) { return "W" + std::to_string(w); }
inline std::string task_id(const std::string& watershed, Scale s) {
  return watershed + (s == Scale::coarse ? "_c" : "_f");
}

/// Random in-tree of coarse segments plus its refinement.
inline SynthWatershed generate_network(const SynthConfig& cfg, std::size_t w, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(synth_detail::mix(seed, 1000 + w));
  std::uniform_int_distribution<std::size_t> count(cfg.coarse_min, cfg.coarse_max);
  const std::size_t nc = count(rng);
  SynthWatershed ws;
  const std::string name = watershed_name(w);

  ws.coarse_downstream.assign(nc, -1);
  std::vector<int> tributaries(nc, 0);
  for (std::size_t i = 1; i < nc; ++i) {
    std::vector<std::size_t> open;
    for (std::size_t j = 0; j < i; ++j) {
      if (tributaries[j] < 2) open.push_back(j);
    }
    std::uniform_int_distribution<std::size_t> pick(0, open.size() - 1);
    const std::size_t p = open[pick(rng)];
    ws.coarse_downstream[i] = static_cast<int>(p);
    ++tributaries[p];
  }
  std::uniform_real_distribution<double> jitter(0.6, 1.4);
  ws.coarse_length.resize(nc);
  for (double& l : ws.coarse_length) l = cfg.coarse_length_km * jitter(rng);

  ws.coarse.watershed = name;
  ws.coarse.scale = Scale::coarse;
  for (std::size_t i = 0; i < nc; ++i) ws.coarse.segment_ids.push_back(name + "_c" + synth_detail::two_digits(i));
  ws.coarse.dist = synth_detail::tree_distances(ws.coarse_downstream, ws.coarse_length);

  // Fine pieces of coarse segment c are c*s .. c*s+s-1, ordered upstream to downstream.
  const std::size_t s = cfg.split_factor;
  const std::size_t nf = nc * s;
  ws.fine_downstream.assign(nf, -1);
  ws.fine_length.assign(nf, 0.0);
  ws.coarse_parent.assign(nf, 0);
  std::uniform_real_distribution<double> piece(0.5, 1.5);
  for (std::size_t c = 0; c < nc; ++c) {
    std::vector<double> share(s);
    double tot = 0.0;
    for (double& v : share) tot += (v = piece(rng));
    for (std::size_t k = 0; k < s; ++k) {
      const std::size_t f = c * s + k;
      ws.fine_length[f] = ws.coarse_length[c] * share[k] / tot;
      ws.coarse_parent[f] = c;
      if (k + 1 < s) {
        ws.fine_downstream[f] = static_cast<int>(f + 1);
      } else if (ws.coarse_downstream[c] >= 0) {
        ws.fine_downstream[f] = static_cast<int>(static_cast<std::size_t>(ws.coarse_downstream[c]) * s);
      }
    }
  }
  ws.fine.watershed = name;
  ws.fine.scale = Scale::fine;
  for (std::size_t f = 0; f < nf; ++f) {
    ws.fine.segment_ids.push_back(ws.coarse.segment_ids[ws.coarse_parent[f]] + "_f" + std::to_string(f % s));
  }
  ws.fine.dist = synth_detail::tree_distances(ws.fine_downstream, ws.fine_length);

  // Characteristics: watershed-level means plus segment noise; fine pieces
  // perturb their coarse parent.
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> ws_mean(cfg.K);
  for (double& m : ws_mean) m = 0.5 * gauss(rng);
  ws.coarse_chars.resize(nc * cfg.K);
  for (std::size_t i = 0; i < nc; ++i)
    for (std::size_t k = 0; k < cfg.K; ++k) ws.coarse_chars[i * cfg.K + k] = ws_mean[k] + gauss(rng);
  ws.fine_chars.resize(nf * cfg.K);
  for (std::size_t f = 0; f < nf; ++f)
    for (std::size_t k = 0; k < cfg.K; ++k) {
      ws.fine_chars[f * cfg.K + k] = ws.coarse_chars[ws.coarse_parent[f] * cfg.K + k] + 0.3 * gauss(rng);
    }
  return ws;
}

/// Watershed-wide climate shared by both scales.
struct Climate {
  double mean = 10.0;
  double amplitude = 10.0;
  double phase_days = 0.0;
  std::vector<double> anomaly;  // AR(1), length T
  std::vector<double> radiation_noise;
  std::vector<double> rain;
};

inline Climate generate_climate(const SynthConfig& cfg, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(synth_detail::mix(seed, 2000 + w));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Climate cl;
  cl.mean = 7.0 + 7.0 * u(rng);
  cl.amplitude = 8.0 + 4.0 * u(rng);
  // Start date is Oct 1: coldest around mid-January, ~105 days in.
  cl.phase_days = 105.0 + 91.25;
  const double innov = cfg.air_ar_std * std::sqrt(1.0 - cfg.air_ar_rho * cfg.air_ar_rho);
  cl.anomaly.resize(cfg.days);
  cl.radiation_noise.resize(cfg.days);
  cl.rain.resize(cfg.days);
  double a = cfg.air_ar_std * gauss(rng);
  for (std::size_t t = 0; t < cfg.days; ++t) {
    if (t > 0) a = cfg.air_ar_rho * a + innov * gauss(rng);
    cl.anomaly[t] = a;
    cl.radiation_noise[t] = gauss(rng);
    cl.rain[t] = u(rng) < 0.3 ? -std::log(1.0 - u(rng)) * 6.0 : 0.0;
  }
  return cl;
}

inline double seasonal_air(const Climate& cl, std::size_t t) {
  return cl.mean + cl.amplitude * std::sin(2.0 * std::numbers::pi * (static_cast<double>(t) - cl.phase_days) / 365.0);
}

/// Features n x days x F. Channel 0 air temperature (annual sinusoid plus the
/// watershed AR(1) anomaly plus segment noise), 1 radiation, 2 rain, 3 PET,
/// 4.. nuisance noise.
inline std::vector<double> generate_weather(const SegmentNetwork& net, const Climate& cl, const SynthConfig& cfg,
                                            std::uint64_t seed) {
  require(cfg.days >= 2, "generate_weather: days must be at least 2");
  const std::size_t n = net.size(), T = cfg.days, F = cfg.F;
  std::vector<double> x(n * T * F);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::mt19937_64 rng(synth_detail::mix(seed, fnv1a(net.segment_ids[i])));
    const double offset = cfg.segment_noise_std > 0 ? 0.5 * gauss(rng) : 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      const double season = seasonal_air(cl, t);
      const double air = season + cl.anomaly[t] + offset + cfg.segment_noise_std * gauss(rng);
      const double rad = 180.0 + 120.0 * std::sin(2.0 * std::numbers::pi * (static_cast<double>(t) - cl.phase_days) / 365.0) +
                         25.0 * cl.radiation_noise[t];
      const double rain = cl.rain[t];
      const double pet = std::max(0.0, 0.1 * air + 0.01 * rad);
      double* row = &x[(i * T + t) * F];
      row[0] = air;
      row[1] = rad;
      row[2] = rain;
      row[3] = pet;
      for (std::size_t f = 4; f < F; ++f) row[f] = gauss(rng);
    }
  }
  return x;
}

inline double water_response(double air) { return std::max(0.0, 0.8 * air + 2.0); }

struct ProcessParams {
  std::vector<double> k;                     // relaxation rate per segment
  std::vector<double> a;                     // total advection weight per segment
  std::vector<std::vector<std::size_t>> up;  // immediate upstream segments
  double noise_std = 0.0;
  std::size_t lag = 1;
};

/// Relaxation rate from the informative characteristics; the same fixed
/// weights apply to every watershed and scale.
inline double relaxation_rate(std::span<const double> chars, std::size_t informative) {
  double s = 0.0;
  for (std::size_t m = 0; m < informative; ++m) s += (m % 2 == 0 ? 1.0 : -1.0) * chars[m];
  if (informative > 0) s /= std::sqrt(static_cast<double>(informative));
  return 0.05 + 0.9 / (1.0 + std::exp(-(-1.0 + 0.8 * s)));
}

inline ProcessParams derive_process_params(const std::vector<int>& downstream, const std::vector<double>& chars,
                                           const SynthConfig& cfg) {
  const std::size_t n = downstream.size();
  ProcessParams p;
  p.k.resize(n);
  p.a.assign(n, 0.0);
  p.up.assign(n, {});
  p.noise_std = cfg.noise_std;
  p.lag = cfg.advection_lag;
  for (std::size_t i = 0; i < n; ++i) {
    if (downstream[i] >= 0) p.up[static_cast<std::size_t>(downstream[i])].push_back(i);
  }
  for (std::size_t i = 0; i < n; ++i) {
    p.k[i] = relaxation_rate(std::span<const double>(chars).subspan(i * cfg.K, cfg.K), cfg.informative);
    if (!p.up[i].empty()) p.a[i] = cfg.advection_fraction * (1.0 - p.k[i]);
  }
  return p;
}

/// T_{i,t} = max(0, (1-k-a) T_{i,t-1} + k phi(air_{i,t}) + a mean_up T_{j,t-lag} + eps).
inline std::vector<double> simulate_temperature(const std::vector<double>& x, std::size_t n, std::size_t T,
                                                std::size_t F, const ProcessParams& p, std::uint64_t seed) {
  for (std::size_t i = 0; i < n; ++i) {
    if (p.k[i] + p.a[i] >= 1.0 || p.k[i] <= 0.0 || p.a[i] < 0.0) {
      throw DataError("simulate_temperature: unstable process parameters for segment " + std::to_string(i));
    }
  }
  std::mt19937_64 rng(synth_detail::mix(seed, 3000));
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> y(n * T);
  for (std::size_t i = 0; i < n; ++i) y[i * T] = water_response(x[(i * T) * F]);
  for (std::size_t t = 1; t < T; ++t) {
    const std::size_t src = t >= p.lag ? t - p.lag : 0;
    for (std::size_t i = 0; i < n; ++i) {
      double v = (1.0 - p.k[i] - p.a[i]) * y[i * T + t - 1] + p.k[i] * water_response(x[(i * T + t) * F]);
      if (!p.up[i].empty()) {
        double m = 0.0;
        for (std::size_t j : p.up[i]) m += y[j * T + src];
        v += p.a[i] * m / static_cast<double>(p.up[i].size());
      }
      if (p.noise_std > 0) v += p.noise_std * gauss(rng);
      y[i * T + t] = std::max(0.0, v);
    }
  }
  return y;
}

/// Keeps round(sparsity * eligible pairs) (segment, day) pairs, where eligible
/// segments exclude a random `unobserved_fraction` of the network.
inline std::vector<std::uint8_t> sparsify(std::size_t n, std::size_t T, double sparsity, double unobserved_fraction,
                                          std::uint64_t seed) {
  require(sparsity > 0 && sparsity <= 1, "sparsify: sparsity must be in (0, 1]");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> segs(n);
  std::iota(segs.begin(), segs.end(), std::size_t{0});
  std::shuffle(segs.begin(), segs.end(), rng);
  auto n_dark = static_cast<std::size_t>(std::floor(unobserved_fraction * static_cast<double>(n)));
  n_dark = std::min(n_dark, n - 1);
  std::vector<std::size_t> pairs;
  for (std::size_t r = n_dark; r < n; ++r)
    for (std::size_t t = 0; t < T; ++t) pairs.push_back(segs[r] * T + t);
  std::sort(pairs.begin(), pairs.end());
  std::shuffle(pairs.begin(), pairs.end(), rng);
  const auto keep = static_cast<std::size_t>(std::llround(sparsity * static_cast<double>(pairs.size())));
  std::vector<std::uint8_t> mask(n * T, 0);
  for (std::size_t r = 0; r < keep; ++r) mask[pairs[r]] = 1;
  return mask;
}

/// A generated task with its noiseless-label ground truth.
struct SynthTask {
  TaskDataset task;
  std::vector<double> truth;  // n x T, every day
  ProcessParams process;
};

struct SynthFamily {
  SynthConfig config;
  std::vector<SynthWatershed> watersheds;
  std::vector<SynthTask> tasks;  // ordered W0_c, W0_f, W1_c, ...

  const SynthTask& find(const std::string& id) const {
    for (const auto& t : tasks) {
      if (t.task.id == id) return t;
    }
    throw DataError("unknown synthetic task '" + id + "'");
  }
};

inline SynthTask build_task(const SynthConfig& cfg, const SynthWatershed& ws, const Climate& cl, Scale scale,
                            std::uint64_t seed) {
  const SegmentNetwork& net = scale == Scale::coarse ? ws.coarse : ws.fine;
  const auto& chars = scale == Scale::coarse ? ws.coarse_chars : ws.fine_chars;
  const auto& down = scale == Scale::coarse ? ws.coarse_downstream : ws.fine_downstream;
  SynthTask st;
  TaskDataset& t = st.task;
  t.id = task_id(net.watershed, scale);
  t.network = net;
  t.T = cfg.days;
  t.F = cfg.F;
  t.K = cfg.K;
  t.start = parse_date(cfg.start_date);
  const std::uint64_t tseed = synth_detail::mix(seed, fnv1a(t.id));
  t.x = generate_weather(net, cl, cfg, synth_detail::mix(seed, fnv1a(net.watershed)));
  t.c = chars;
  t.c_avail.assign(chars.size(), 1);
  st.process = derive_process_params(down, chars, cfg);
  st.truth = simulate_temperature(t.x, net.size(), t.T, t.F, st.process, tseed);
  const bool coarse = scale == Scale::coarse;
  t.y_mask = sparsify(net.size(), t.T, coarse ? cfg.coarse_sparsity : cfg.fine_sparsity,
                      coarse ? 0.0 : cfg.fine_unobserved, synth_detail::mix(tseed, 7));
  t.y.assign(t.y_mask.size(), kMissing);
  for (std::size_t k = 0; k < t.y.size(); ++k) {
    if (t.y_mask[k]) t.y[k] = st.truth[k];
  }
  const DateSplit split = proportional_split(t.T);
  t.train = split.train;
  t.test = split.test;
  t.validate();
  return st;
}

inline SynthFamily generate_family(const SynthConfig& cfg) {
  cfg.validate();
  SynthFamily fam;
  fam.config = cfg;
  for (std::size_t w = 0; w < cfg.n_watersheds; ++w) {
    fam.watersheds.push_back(generate_network(cfg, w, cfg.seed));
    const Climate cl = generate_climate(cfg, w, cfg.seed);
    fam.tasks.push_back(build_task(cfg, fam.watersheds.back(), cl, Scale::coarse, cfg.seed));
    fam.tasks.push_back(build_task(cfg, fam.watersheds.back(), cl, Scale::fine, cfg.seed));
  }
  return fam;
}

}  // namespace geostars
