#pragma once

// River segment networks and the distance-derived adjacency.
//
// Distances are directed: dist(i, j) is the along-stream distance from the
// outlet of segment i down to the outlet of segment j, finite only when j is
// reachable downstream of i. Row i of the adjacency collects the segments
// upstream of i plus i itself.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "geostars/error.hpp"
#include "geostars/io/csv.hpp"

namespace geostars {

inline constexpr double kUnconnected = std::numeric_limits<double>::infinity();

enum class Scale : std::uint8_t { coarse, fine };

inline std::string to_string(Scale s) { return s == Scale::coarse ? "coarse" : "fine"; }

inline Scale scale_from_string(const std::string& s) {
  if (s == "coarse" || s == "c") return Scale::coarse;
  if (s == "fine" || s == "f") return Scale::fine;
  throw DataError("unknown scale '" + s + "'");
}

struct SegmentNetwork {
  std::string watershed;
  Scale scale = Scale::coarse;
  std::vector<std::string> segment_ids;
  std::vector<double> dist;  // n x n, row-major, kUnconnected where unreachable

  std::size_t size() const { return segment_ids.size(); }
  double distance(std::size_t from, std::size_t to) const { return dist[from * size() + to]; }
  bool connected(std::size_t from, std::size_t to) const { return std::isfinite(distance(from, to)); }

  std::size_t index_of(const std::string& id) const {
    auto it = std::find(segment_ids.begin(), segment_ids.end(), id);
    if (it == segment_ids.end()) throw DataError("unknown segment id '" + id + "'");
    return static_cast<std::size_t>(it - segment_ids.begin());
  }

  void validate() const {
    const std::size_t n = size();
    if (dist.size() != n * n) throw DataError("network " + watershed + ": distance matrix shape mismatch");
    std::map<std::string, int> seen;
    for (const auto& id : segment_ids) {
      if (++seen[id] > 1) throw DataError("duplicate segment id '" + id + "'");
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (distance(i, i) != 0.0) throw DataError("nonzero self-distance for segment '" + segment_ids[i] + "'");
      for (std::size_t j = 0; j < n; ++j) {
        const double d = distance(i, j);
        if (std::isnan(d) || d < 0) throw DataError("negative or NaN distance in network " + watershed);
      }
    }
  }
};

/// Number of downstream hops from i to j along immediate edges (0 on the
/// diagonal, -1 when unreachable). An ordered pair is an immediate edge when no
/// third segment lies between its endpoints.
inline std::vector<int> hop_counts(const SegmentNetwork& net) {
  const std::size_t n = net.size();
  std::vector<int> hops(n * n, -1);
  for (std::size_t i = 0; i < n; ++i) hops[i * n + i] = 0;
  std::vector<std::vector<std::size_t>> next(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j || !net.connected(i, j)) continue;
      bool immediate = true;
      for (std::size_t k = 0; k < n && immediate; ++k) {
        if (k != i && k != j && net.connected(i, k) && net.connected(k, j)) immediate = false;
      }
      if (immediate) next[i].push_back(j);
    }
  }
  for (std::size_t s = 0; s < n; ++s) {
    std::vector<std::size_t> frontier{s};
    while (!frontier.empty()) {
      std::vector<std::size_t> nf;
      for (std::size_t u : frontier) {
        for (std::size_t v : next[u]) {
          if (hops[s * n + v] < 0) {
            hops[s * n + v] = hops[s * n + u] + 1;
            nf.push_back(v);
          }
        }
      }
      frontier = std::move(nf);
    }
  }
  return hops;
}

struct DistanceStats {
  double mean = 0.0;
  double std = 1.0;  // population standard deviation
  std::size_t n_pairs = 0;
};

/// Pooled mean / population std over every finite (i, j) pair, self-pairs
/// included, across all given networks.
inline DistanceStats build_distance_stats(std::span<const SegmentNetwork* const> networks) {
  require(!networks.empty(), "build_distance_stats: no networks");
  double s = 0.0;
  std::size_t count = 0;
  for (const SegmentNetwork* net : networks) {
    for (double d : net->dist) {
      if (std::isfinite(d)) {
        s += d;
        ++count;
      }
    }
  }
  require(count >= 2, "build_distance_stats: fewer than two finite distance pairs");
  const double mu = s / static_cast<double>(count);
  double ss = 0.0;
  for (const SegmentNetwork* net : networks) {
    for (double d : net->dist) {
      if (std::isfinite(d)) ss += (d - mu) * (d - mu);
    }
  }
  const double sd = std::sqrt(ss / static_cast<double>(count));
  if (!(sd > 0)) throw DataError("build_distance_stats: zero pooled variance");
  return {mu, sd, count};
}

inline DistanceStats build_distance_stats(const SegmentNetwork& net) {
  const SegmentNetwork* p = &net;
  return build_distance_stats(std::span<const SegmentNetwork* const>(&p, 1));
}

struct AdjacencyMatrix {
  std::size_t n = 0;
  std::vector<double> values;         // n x n
  std::vector<std::uint8_t> support;  // n x n

  double at(std::size_t i, std::size_t j) const { return values[i * n + j]; }
  bool on_support(std::size_t i, std::size_t j) const { return support[i * n + j] != 0; }
};

/// A_ij = 1 / (1 + exp((dist(j -> i) - mean) / std)) where j is i itself or
/// upstream of i; exactly 0 elsewhere. `max_hops` > 0 truncates the upstream
/// neighborhood to that many immediate edges.
inline AdjacencyMatrix adjacency_from_distances(const SegmentNetwork& net, const DistanceStats& stats,
                                                int max_hops = 0) {
  require(stats.std > 0, "adjacency_from_distances: non-positive std");
  const std::size_t n = net.size();
  std::vector<int> hops;
  if (max_hops > 0) hops = hop_counts(net);
  AdjacencyMatrix a;
  a.n = n;
  a.values.assign(n * n, 0.0);
  a.support.assign(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double d = net.distance(j, i);
      if (!std::isfinite(d)) continue;
      if (max_hops > 0 && hops[j * n + i] > max_hops) continue;
      a.support[i * n + j] = 1;
      a.values[i * n + j] = 1.0 / (1.0 + std::exp((d - stats.mean) / stats.std));
    }
  }
  return a;
}

/// Reads `segment_id,watershed,scale,...` and `from_id,to_id,distance_km`.
/// Self-distances default to 0 and unlisted pairs to the unconnected sentinel.
inline SegmentNetwork load_network(const std::string& segments_csv, const std::string& distances_csv) {
  const csv::Table seg = csv::read(segments_csv);
  const std::size_t c_id = seg.column("segment_id");
  const std::size_t c_ws = seg.column("watershed");
  const std::size_t c_sc = seg.column("scale");
  SegmentNetwork net;
  std::map<std::string, std::size_t> index;
  for (const auto& row : seg.rows) {
    if (!index.emplace(row[c_id], net.segment_ids.size()).second) {
      throw DataError("duplicate segment id '" + row[c_id] + "'");
    }
    net.segment_ids.push_back(row[c_id]);
    if (net.segment_ids.size() == 1) {
      net.watershed = row[c_ws];
      net.scale = scale_from_string(row[c_sc]);
    }
  }
  const std::size_t n = net.size();
  net.dist.assign(n * n, kUnconnected);
  for (std::size_t i = 0; i < n; ++i) net.dist[i * n + i] = 0.0;

  const csv::Table dt = csv::read(distances_csv);
  const std::size_t c_from = dt.column("from_id");
  const std::size_t c_to = dt.column("to_id");
  const std::size_t c_d = dt.column("distance_km");
  for (const auto& row : dt.rows) {
    auto fi = index.find(row[c_from]);
    auto ti = index.find(row[c_to]);
    if (fi == index.end() || ti == index.end()) {
      throw DataError(distances_csv + ": unknown segment in pair " + row[c_from] + "->" + row[c_to]);
    }
    const double d = csv::to_double(row[c_d], distances_csv);
    if (d < 0) throw DataError(distances_csv + ": negative distance " + row[c_d]);
    if (fi->second == ti->second && d != 0.0) {
      throw DataError(distances_csv + ": nonzero self-distance for '" + row[c_from] + "'");
    }
    net.dist[fi->second * n + ti->second] = d;
  }
  net.validate();
  return net;
}

/// Writes the distance list (finite off-diagonal pairs only).
inline void write_distances(const SegmentNetwork& net, const std::string& path, const std::string& stamp = {}) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  if (!stamp.empty()) out << "# " << stamp << '\n';
  out << "from_id,to_id,distance_km\n";
  const std::size_t n = net.size();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j && net.connected(i, j)) {
        out << net.segment_ids[i] << ',' << net.segment_ids[j] << ',' << csv::format(net.distance(i, j)) << '\n';
      }
    }
  }
}

}  // namespace geostars
