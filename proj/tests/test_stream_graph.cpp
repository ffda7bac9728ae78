#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "geostars/stream_graph.hpp"
#include "support.hpp"

using namespace geostars;
namespace fs = std::filesystem;

namespace {

// Chain a -> b -> c with 4 km and 6 km reaches.
SegmentNetwork chain() {
  SegmentNetwork net;
  net.watershed = "X";
  net.segment_ids = {"a", "b", "c"};
  const double U = kUnconnected;
  net.dist = {0, 4, 10, U, 0, 6, U, U, 0};
  return net;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("geostars_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(DistanceStats, PopulationStatisticsIncludeSelfPairs) {
  const SegmentNetwork net = chain();
  const DistanceStats s = build_distance_stats(net);
  // Finite pairs: 0,4,10,0,6,0.
  const double vals[] = {0, 4, 10, 0, 6, 0};
  double mu = 0;
  for (double v : vals) mu += v / 6;
  double var = 0;
  for (double v : vals) var += (v - mu) * (v - mu) / 6;
  EXPECT_EQ(s.n_pairs, 6u);
  EXPECT_NEAR(s.mean, mu, 1e-12);
  EXPECT_NEAR(s.std, std::sqrt(var), 1e-12);
}

TEST(DistanceStats, PooledAcrossNetworksAndZeroVarianceRejected) {
  SegmentNetwork a = chain(), b = chain();
  const SegmentNetwork* both[] = {&a, &b};
  const DistanceStats s = build_distance_stats(both);
  EXPECT_EQ(s.n_pairs, 12u);
  EXPECT_NEAR(s.mean, build_distance_stats(a).mean, 1e-12);
  SegmentNetwork flat;
  flat.segment_ids = {"p", "q"};
  flat.dist = {0, kUnconnected, kUnconnected, 0};
  EXPECT_THROW(build_distance_stats(flat), DataError);
}

TEST(Adjacency, LogisticOfStandardizedDistance) {
  const SegmentNetwork net = chain();
  const DistanceStats st{10.5, 5.0, 6};
  const AdjacencyMatrix A = adjacency_from_distances(net, st);
  // Self pair: distance 0 -> 1 / (1 + exp(-2.1)).
  EXPECT_NEAR(A.at(0, 0), 0.8909031788043871, 1e-15);
  // Row c (index 2) sees a (10 km upstream) and b (6 km upstream).
  EXPECT_NEAR(A.at(2, 0), 1.0 / (1.0 + std::exp((10 - 10.5) / 5.0)), 1e-15);
  EXPECT_NEAR(A.at(2, 1), 1.0 / (1.0 + std::exp((6 - 10.5) / 5.0)), 1e-15);
  // Downstream segments are not neighbors of upstream ones.
  EXPECT_FALSE(A.on_support(0, 2));
  EXPECT_EQ(A.at(0, 2), 0.0);
  EXPECT_TRUE(A.on_support(1, 0));
}

TEST(Adjacency, DistanceAtMeanGivesOneHalf) {
  SegmentNetwork net = chain();
  const DistanceStats st{4.0, 2.5, 6};
  EXPECT_EQ(adjacency_from_distances(net, st).at(1, 0), 0.5);
}

TEST(Adjacency, HopLimitTruncatesNeighborhood) {
  const SegmentNetwork net = chain();
  const auto hops = hop_counts(net);
  EXPECT_EQ(hops[0 * 3 + 2], 2);
  EXPECT_EQ(hops[2 * 3 + 0], -1);
  const AdjacencyMatrix A = adjacency_from_distances(net, build_distance_stats(net), 1);
  EXPECT_TRUE(A.on_support(2, 1));
  EXPECT_FALSE(A.on_support(2, 0));
}

TEST(Network, ValidationRejectsBadInput) {
  SegmentNetwork net = chain();
  net.dist[0] = 1.0;
  EXPECT_THROW(net.validate(), DataError);
  net = chain();
  net.dist[1] = -3.0;
  EXPECT_THROW(net.validate(), DataError);
  net = chain();
  net.segment_ids[2] = "a";
  EXPECT_THROW(net.validate(), DataError);
}

TEST(Network, CsvRoundTripPreservesDistances) {
  const fs::path dir = temp_dir("net_roundtrip");
  const SegmentNetwork net = chain();
  {
    std::ofstream s(dir / "segments.csv");
    s << "segment_id,watershed,scale\na,X,coarse\nb,X,coarse\nc,X,coarse\n";
  }
  write_distances(net, (dir / "distances.csv").string(), "stamp");
  const SegmentNetwork back = load_network((dir / "segments.csv").string(), (dir / "distances.csv").string());
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t k = 0; k < 9; ++k) {
    if (std::isfinite(net.dist[k])) {
      EXPECT_EQ(back.dist[k], net.dist[k]);
    } else {
      EXPECT_FALSE(std::isfinite(back.dist[k]));
    }
  }
}

TEST(Network, LoaderRejectsUnknownSegmentsAndNegativeDistances) {
  const fs::path dir = temp_dir("net_bad");
  {
    std::ofstream s(dir / "segments.csv");
    s << "segment_id,watershed,scale\na,X,fine\nb,X,fine\n";
    std::ofstream d(dir / "distances.csv");
    d << "from_id,to_id,distance_km\na,z,1.0\n";
  }
  EXPECT_THROW(load_network((dir / "segments.csv").string(), (dir / "distances.csv").string()), DataError);
  {
    std::ofstream d(dir / "distances.csv");
    d << "from_id,to_id,distance_km\na,b,-1.0\n";
  }
  EXPECT_THROW(load_network((dir / "segments.csv").string(), (dir / "distances.csv").string()), DataError);
}
