#pragma once

// One modeling task (watershed x scale): meteorological drivers, static
// characteristics, sparse temperature labels, and the train/test day split.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "geostars/error.hpp"
#include "geostars/io/csv.hpp"
#include "geostars/io/dates.hpp"
#include "geostars/stream_graph.hpp"

namespace geostars {

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

/// Half-open day-offset range [begin, end).
struct DayRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool contains(std::size_t t) const { return t >= begin && t < end; }
  bool operator==(const DayRange&) const = default;
};

struct TaskDataset {
  std::string id;
  SegmentNetwork network;
  std::size_t T = 0;
  std::size_t F = 7;
  std::size_t K = 65;
  Day start{};
  std::vector<double> x;             // n x T x F, NaN = missing
  std::vector<double> c;             // n x K
  std::vector<std::uint8_t> c_avail; // n x K
  std::vector<double> y;             // n x T, NaN where unobserved
  std::vector<std::uint8_t> y_mask;  // n x T
  std::vector<DayRange> train;
  std::vector<DayRange> test;
  bool normalized = false;

  std::size_t n() const { return network.size(); }
  double x_at(std::size_t i, std::size_t t, std::size_t f) const { return x[(i * T + t) * F + f]; }
  double& x_at(std::size_t i, std::size_t t, std::size_t f) { return x[(i * T + t) * F + f]; }
  bool observed(std::size_t i, std::size_t t) const { return y_mask[i * T + t] != 0; }
  std::size_t observed_count() const {
    return static_cast<std::size_t>(std::count(y_mask.begin(), y_mask.end(), std::uint8_t{1}));
  }

  void validate() const {
    const std::size_t nn = n();
    if (x.size() != nn * T * F) throw DataError(id + ": feature array shape mismatch");
    if (c.size() != nn * K || c_avail.size() != nn * K) throw DataError(id + ": characteristics shape mismatch");
    if (y.size() != nn * T || y_mask.size() != nn * T) throw DataError(id + ": label array shape mismatch");
    for (std::size_t k = 0; k < y.size(); ++k) {
      if (y_mask[k] && !std::isfinite(y[k])) throw DataError(id + ": observed label is not finite");
    }
    for (const auto* ranges : {&train, &test}) {
      for (const DayRange& r : *ranges) {
        if (r.begin >= r.end || r.end > T) throw DataError(id + ": split range outside the date axis");
      }
    }
  }
};

/// Same task with labels removed; what the model sees in zero-shot evaluation.
inline TaskDataset strip_labels(const TaskDataset& task) {
  TaskDataset out = task;
  std::fill(out.y.begin(), out.y.end(), kMissing);
  std::fill(out.y_mask.begin(), out.y_mask.end(), std::uint8_t{0});
  return out;
}

/// Keeps only observations whose day falls in one of `ranges`.
inline TaskDataset restrict_observations(const TaskDataset& task, std::span<const DayRange> ranges) {
  TaskDataset out = task;
  for (std::size_t i = 0; i < out.n(); ++i) {
    for (std::size_t t = 0; t < out.T; ++t) {
      const bool keep = std::any_of(ranges.begin(), ranges.end(), [t](const DayRange& r) { return r.contains(t); });
      if (!keep) {
        out.y_mask[i * out.T + t] = 0;
        out.y[i * out.T + t] = kMissing;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Train/test split
// ---------------------------------------------------------------------------

struct DateSplit {
  std::vector<DayRange> train;
  std::vector<DayRange> test;
};

/// The 1979-10-01..2021-09-30 record layout (train 1984-10..2005-09; test
/// 1979-10..1984-09, 2010-10..2015-09, 2020-10..2021-09) rescaled onto T days.
inline DateSplit proportional_split(std::size_t T) {
  const Day origin = parse_date("1979-10-01");
  const double total = static_cast<double>(days_between(origin, parse_date("2021-10-01")));
  auto at = [&](const char* iso) {
    const double off = static_cast<double>(days_between(origin, parse_date(iso)));
    return static_cast<std::size_t>(std::llround(off / total * static_cast<double>(T)));
  };
  DateSplit s;
  s.train.push_back({at("1984-10-01"), at("2005-10-01")});
  s.test.push_back({0, at("1984-10-01")});
  s.test.push_back({at("2010-10-01"), at("2015-10-01")});
  s.test.push_back({at("2020-10-01"), T});
  auto drop_empty = [](std::vector<DayRange>& v) {
    std::erase_if(v, [](const DayRange& r) { return r.begin >= r.end; });
  };
  drop_empty(s.train);
  drop_empty(s.test);
  return s;
}

/// Calendar split: converts ISO date ranges (inclusive end) into day offsets for a task.
inline std::vector<DayRange> ranges_from_dates(const TaskDataset& task,
                                               const std::vector<std::pair<std::string, std::string>>& spans) {
  std::vector<DayRange> out;
  for (const auto& [a, b] : spans) {
    const long lo = std::max(0L, days_between(task.start, parse_date(a)));
    const long hi = std::min(static_cast<long>(task.T), days_between(task.start, parse_date(b)) + 1);
    if (lo < hi) out.push_back({static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

struct NormStats {
  std::vector<double> x_mean, x_std;
  std::vector<double> c_mean, c_std;
  double y_mean = 0.0;
  double y_std = 1.0;
};

inline constexpr double kStdFloor = 1e-6;

/// Per-feature statistics pooled over the given (raw) source tasks. Label
/// statistics use training-range observations only.
inline NormStats compute_norm_stats(std::span<const TaskDataset* const> sources) {
  require(!sources.empty(), "compute_norm_stats: no source tasks");
  const std::size_t F = sources[0]->F, K = sources[0]->K;
  std::vector<double> xs(F, 0.0), xss(F, 0.0), cs(K, 0.0), css(K, 0.0);
  std::vector<std::size_t> xn(F, 0), cn(K, 0);
  double ys = 0.0, yss = 0.0;
  std::size_t yn = 0;
  for (const TaskDataset* task : sources) {
    require(!task->normalized, "compute_norm_stats: tasks must be raw");
    require(task->F == F && task->K == K, "compute_norm_stats: feature dimensions differ across tasks");
    for (std::size_t k = 0; k < task->x.size(); ++k) {
      const double v = task->x[k];
      if (!std::isfinite(v)) continue;
      xs[k % F] += v;
      xss[k % F] += v * v;
      ++xn[k % F];
    }
    for (std::size_t k = 0; k < task->c.size(); ++k) {
      if (!task->c_avail[k]) continue;
      cs[k % K] += task->c[k];
      css[k % K] += task->c[k] * task->c[k];
      ++cn[k % K];
    }
    for (std::size_t i = 0; i < task->n(); ++i) {
      for (const DayRange& r : task->train) {
        for (std::size_t t = r.begin; t < r.end; ++t) {
          if (!task->observed(i, t)) continue;
          const double v = task->y[i * task->T + t];
          ys += v;
          yss += v * v;
          ++yn;
        }
      }
    }
  }
  NormStats st;
  auto finish = [](double s, double ss, std::size_t n, double& mu, double& sd) {
    if (n == 0) {
      mu = 0.0;
      sd = 1.0;
      return;
    }
    mu = s / static_cast<double>(n);
    sd = std::sqrt(std::max(0.0, ss / static_cast<double>(n) - mu * mu));
    sd = std::max(sd, kStdFloor);
  };
  st.x_mean.resize(F);
  st.x_std.resize(F);
  st.c_mean.resize(K);
  st.c_std.resize(K);
  for (std::size_t f = 0; f < F; ++f) finish(xs[f], xss[f], xn[f], st.x_mean[f], st.x_std[f]);
  for (std::size_t k = 0; k < K; ++k) finish(cs[k], css[k], cn[k], st.c_mean[k], st.c_std[k]);
  finish(ys, yss, yn, st.y_mean, st.y_std);
  return st;
}

/// z-scores features and characteristics with frozen statistics. Missing
/// features and unavailable characteristics become exactly 0. Labels untouched.
inline TaskDataset normalize(const TaskDataset& task, const NormStats& stats) {
  require(!task.normalized, "normalize: task is already normalized");
  require(stats.x_mean.size() == task.F && stats.c_mean.size() == task.K, "normalize: stats dimension mismatch");
  TaskDataset out = task;
  for (std::size_t k = 0; k < out.x.size(); ++k) {
    const std::size_t f = k % out.F;
    const double v = out.x[k];
    out.x[k] = std::isfinite(v) ? (v - stats.x_mean[f]) / stats.x_std[f] : 0.0;
  }
  for (std::size_t k = 0; k < out.c.size(); ++k) {
    const std::size_t j = k % out.K;
    out.c[k] = out.c_avail[k] ? (out.c[k] - stats.c_mean[j]) / stats.c_std[j] : 0.0;
  }
  out.normalized = true;
  return out;
}

// ---------------------------------------------------------------------------
// Windowing and subsampling
// ---------------------------------------------------------------------------

struct TaskWindow {
  const TaskDataset* task = nullptr;
  std::size_t begin = 0;   // day offset of the first step
  std::size_t length = 0;

  bool observed(std::size_t i, std::size_t t) const { return task->observed(i, begin + t); }
  double label(std::size_t i, std::size_t t) const { return task->y[i * task->T + begin + t]; }
};

/// Windows of `length` days every `stride` days within `range`:
/// floor((|range| - length) / stride) + 1 of them.
inline std::vector<TaskWindow> window(const TaskDataset& task, std::size_t length, std::size_t stride,
                                      DayRange range) {
  require(length >= 2, "window: length must be at least 2");
  require(stride >= 1, "window: stride must be positive");
  require(range.end <= task.T && range.begin < range.end, "window: range outside the date axis");
  require(length <= range.size(), "window: length exceeds the available days");
  std::vector<TaskWindow> out;
  for (std::size_t s = range.begin; s + length <= range.end; s += stride) out.push_back({&task, s, length});
  return out;
}

inline std::vector<TaskWindow> window(const TaskDataset& task, std::size_t length, std::size_t stride) {
  return window(task, length, stride, DayRange{0, task.T});
}

/// Keeps exactly round(sparsity * observed) observations, drawn uniformly without replacement.
inline TaskDataset subsample_observations(const TaskDataset& task, double sparsity, std::uint64_t seed) {
  require(sparsity > 0 && sparsity <= 1, "subsample_observations: sparsity must be in (0, 1]");
  std::vector<std::size_t> obs;
  for (std::size_t k = 0; k < task.y_mask.size(); ++k) {
    if (task.y_mask[k]) obs.push_back(k);
  }
  if (obs.empty()) throw DataError(task.id + ": no observations available to subsample");
  const auto keep = static_cast<std::size_t>(std::llround(sparsity * static_cast<double>(obs.size())));
  std::mt19937_64 rng(seed);
  std::shuffle(obs.begin(), obs.end(), rng);
  TaskDataset out = task;
  for (std::size_t r = keep; r < obs.size(); ++r) {
    out.y_mask[obs[r]] = 0;
    out.y[obs[r]] = kMissing;
  }
  return out;
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

/// Marks K - n_keep characteristic columns unavailable. The draw mixes the
/// task id into the seed, so each task gets its own pattern.
inline TaskDataset mask_characteristics(const TaskDataset& task, std::size_t n_keep, std::uint64_t seed) {
  require(n_keep <= task.K, "mask_characteristics: n_keep exceeds K");
  std::vector<std::size_t> cols(task.K);
  std::iota(cols.begin(), cols.end(), std::size_t{0});
  std::mt19937_64 rng(seed ^ fnv1a(task.id));
  std::shuffle(cols.begin(), cols.end(), rng);
  TaskDataset out = task;
  for (std::size_t r = n_keep; r < task.K; ++r) {
    for (std::size_t i = 0; i < out.n(); ++i) {
      out.c_avail[i * out.K + cols[r]] = 0;
      if (out.normalized) out.c[i * out.K + cols[r]] = 0.0;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV exchange
// ---------------------------------------------------------------------------

inline void write_task(const TaskDataset& task, const std::filesystem::path& dir, const std::string& stamp = {}) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream out(dir / name);
    if (!out) throw DataError("cannot write " + (dir / name).string());
    if (!stamp.empty()) out << "# " << stamp << '\n';
    return out;
  };
  const std::size_t n = task.n();
  {
    auto out = open("segments.csv");
    out << "segment_id,watershed,scale\n";
    for (const auto& id : task.network.segment_ids) {
      out << id << ',' << task.network.watershed << ',' << to_string(task.network.scale) << '\n';
    }
  }
  write_distances(task.network, (dir / "distances.csv").string(), stamp);
  {
    auto out = open("features.csv");
    out << "segment_id,date";
    for (std::size_t f = 0; f < task.F; ++f) out << ",f" << f + 1;
    out << '\n';
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t t = 0; t < task.T; ++t) {
        out << task.network.segment_ids[i] << ',' << format_date(task.start + std::chrono::days(t));
        for (std::size_t f = 0; f < task.F; ++f) {
          const double v = task.x_at(i, t, f);
          out << ',';
          if (std::isfinite(v)) out << csv::format(v);
        }
        out << '\n';
      }
    }
  }
  {
    auto out = open("characteristics.csv");
    out << "segment_id";
    for (std::size_t k = 0; k < task.K; ++k) out << ",c" << k + 1;
    out << '\n';
    for (std::size_t i = 0; i < n; ++i) {
      out << task.network.segment_ids[i];
      for (std::size_t k = 0; k < task.K; ++k) {
        out << ',';
        if (task.c_avail[i * task.K + k]) out << csv::format(task.c[i * task.K + k]);
      }
      out << '\n';
    }
  }
  {
    auto out = open("observations.csv");
    out << "segment_id,date,temp_c\n";
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t t = 0; t < task.T; ++t) {
        if (!task.observed(i, t)) continue;
        out << task.network.segment_ids[i] << ',' << format_date(task.start + std::chrono::days(t)) << ','
            << csv::format(task.y[i * task.T + t]) << '\n';
      }
    }
  }
}

/// Reads a task directory. The date axis spans the first to last feature date;
/// absent (segment, date) feature rows and empty cells are missing values.
inline TaskDataset load_task(const std::filesystem::path& dir, const std::string& id = {}) {
  TaskDataset task;
  task.id = id.empty() ? dir.filename().string() : id;
  task.network = load_network((dir / "segments.csv").string(), (dir / "distances.csv").string());
  const std::size_t n = task.n();

  const csv::Table ft = csv::read((dir / "features.csv").string());
  const std::size_t c_seg = ft.column("segment_id"), c_date = ft.column("date");
  std::vector<std::size_t> fcols;
  for (std::size_t f = 1;; ++f) {
    auto it = std::find(ft.header.begin(), ft.header.end(), "f" + std::to_string(f));
    if (it == ft.header.end()) break;
    fcols.push_back(static_cast<std::size_t>(it - ft.header.begin()));
  }
  if (fcols.empty()) throw DataError(task.id + ": features.csv has no feature columns");
  task.F = fcols.size();
  if (ft.rows.empty()) throw DataError(task.id + ": features.csv is empty");
  std::vector<Day> days;
  days.reserve(ft.rows.size());
  Day lo = Day::max(), hi = Day::min();
  for (const auto& row : ft.rows) {
    days.push_back(parse_date(row[c_date]));
    lo = std::min(lo, days.back());
    hi = std::max(hi, days.back());
  }
  task.start = lo;
  task.T = static_cast<std::size_t>(days_between(lo, hi) + 1);
  task.x.assign(n * task.T * task.F, kMissing);
  std::vector<std::uint8_t> seen(n * task.T, 0);
  for (std::size_t r = 0; r < ft.rows.size(); ++r) {
    const auto& row = ft.rows[r];
    const std::size_t i = task.network.index_of(row[c_seg]);
    const auto t = static_cast<std::size_t>(days_between(lo, days[r]));
    if (seen[i * task.T + t]++) throw DataError(task.id + ": duplicate feature row " + row[c_seg] + " " + row[c_date]);
    for (std::size_t f = 0; f < task.F; ++f) {
      const std::string& cell = row[fcols[f]];
      if (!cell.empty()) task.x_at(i, t, f) = csv::to_double(cell, "features.csv");
    }
  }

  const csv::Table ct = csv::read((dir / "characteristics.csv").string());
  const std::size_t cc_seg = ct.column("segment_id");
  task.K = ct.header.size() - 1;
  task.c.assign(n * task.K, 0.0);
  task.c_avail.assign(n * task.K, 0);
  for (const auto& row : ct.rows) {
    const std::size_t i = task.network.index_of(row[cc_seg]);
    std::size_t k = 0;
    for (std::size_t col = 0; col < row.size(); ++col) {
      if (col == cc_seg) continue;
      if (!row[col].empty()) {
        task.c[i * task.K + k] = csv::to_double(row[col], "characteristics.csv");
        task.c_avail[i * task.K + k] = 1;
      }
      ++k;
    }
  }

  task.y.assign(n * task.T, kMissing);
  task.y_mask.assign(n * task.T, 0);
  const csv::Table ot = csv::read((dir / "observations.csv").string());
  const std::size_t o_seg = ot.column("segment_id"), o_date = ot.column("date"), o_val = ot.column("temp_c");
  for (const auto& row : ot.rows) {
    const std::size_t i = task.network.index_of(row[o_seg]);
    const long t = days_between(lo, parse_date(row[o_date]));
    if (t < 0 || t >= static_cast<long>(task.T)) {
      throw DataError(task.id + ": observation date outside the feature date axis: " + row[o_date]);
    }
    task.y[i * task.T + static_cast<std::size_t>(t)] = csv::to_double(row[o_val], "observations.csv");
    task.y_mask[i * task.T + static_cast<std::size_t>(t)] = 1;
  }
  auto split = proportional_split(task.T);
  task.train = split.train;
  task.test = split.test;
  task.validate();
  return task;
}

}  // namespace geostars
