#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "dpgba/graph.hpp"
#include "dpgba/io.hpp"
#include "testing_util.hpp"

using namespace dpgba;

namespace {

Graph tiny_graph(int n, std::vector<std::pair<int, int>> edges, int d = 3) {
  Graph g;
  Rng rng(42);
  g.features = gaussian(n, d, 1.0, rng);
  g.labels.assign(n, 0);
  g.node_ids.resize(n);
  for (int i = 0; i < n; ++i) g.node_ids[i] = i;
  g.edges = std::move(edges);
  canonicalize_edges(g.edges);
  g.label_names = {"0", "1"};
  return g;
}

Mat dense_normalized(int n, const std::vector<std::pair<int, int>>& edges) {
  Mat a = Mat::Identity(n, n);
  for (auto& [u, v] : edges) a(u, v) = a(v, u) = 1.0;
  Eigen::VectorXd dinv = a.rowwise().sum().array().rsqrt();
  return dinv.asDiagonal() * a * dinv.asDiagonal();
}

}  // namespace

TEST(Normalize, FrozenSmallCases) {
  // isolated node
  Mat one = normalize_adjacency(tiny_graph(1, {})).to_dense();
  EXPECT_DOUBLE_EQ(1.0, one(0, 0));
  // single undirected edge: all four entries 0.5
  Mat pair = normalize_adjacency(tiny_graph(2, {{0, 1}})).to_dense();
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) EXPECT_DOUBLE_EQ(0.5, pair(i, j));
  // path 0-1-2: corner self weights 1/2, middle 1/3, off-diagonals 1/sqrt(6)
  Mat path = normalize_adjacency(tiny_graph(3, {{0, 1}, {1, 2}})).to_dense();
  EXPECT_DOUBLE_EQ(0.5, path(0, 0));
  EXPECT_DOUBLE_EQ(0.5, path(2, 2));
  EXPECT_NEAR(1.0 / 3.0, path(1, 1), 1e-15);
  EXPECT_NEAR(1.0 / std::sqrt(6.0), path(0, 1), 1e-15);
  EXPECT_NEAR(1.0 / std::sqrt(6.0), path(1, 2), 1e-15);
  EXPECT_DOUBLE_EQ(0.0, path(0, 2));
}

TEST(Normalize, MatchesDenseOracleExhaustivelyUpToFiveNodes) {
  for (int n = 1; n <= 5; ++n) {
    int pairs = n * (n - 1) / 2;
    for (uint32_t mask = 0; mask < (1u << pairs); ++mask) {
      std::vector<std::pair<int, int>> edges;
      int k = 0;
      for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j, ++k)
          if (mask & (1u << k)) edges.emplace_back(i, j);
      Mat got = normalize_adjacency(tiny_graph(n, edges)).to_dense();
      Mat ref = dense_normalized(n, edges);
      ASSERT_LT((got - ref).cwiseAbs().maxCoeff(), 1e-14)
          << "n=" << n << " mask=" << mask;
    }
  }
}

TEST(Normalize, MatchesDenseOracleOnRandomSixToEightNodeGraphs) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (uint64_t seed = 1; seed <= 300; ++seed) {
    Rng rng(mix_seed(seed, 9));
    int n = 6 + static_cast<int>(seed % 3);
    std::vector<std::pair<int, int>> edges;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j)
        if (u(rng) < 0.4) edges.emplace_back(i, j);
    Mat got = normalize_adjacency(tiny_graph(n, edges)).to_dense();
    Mat ref = dense_normalized(n, edges);
    ASSERT_LT((got - ref).cwiseAbs().maxCoeff(), 1e-14) << "seed " << seed;
  }
}

TEST(Split, HundredNodeSizes) {
  Graph g = synth_sbm(2, 50, 0.1, 0.01, 4, 1.0, 3);
  SplitSpec s = inductive_split(g, 7);
  EXPECT_EQ(10u, s.attack_targets.size());
  EXPECT_EQ(10u, s.clean_test.size());
  EXPECT_EQ(10u, s.labeled.size());
  EXPECT_EQ(10u, s.validation.size());
  EXPECT_EQ(60u, s.unlabeled.size());
}

TEST(Split, DisjointAndCoveringOverHundredSeeds) {
  Graph g = synth_sbm(3, 37, 0.05, 0.01, 5, 1.0, 11);  // 111 nodes
  for (uint64_t seed = 0; seed < 100; ++seed) {
    SplitSpec s = inductive_split(g, seed);
    std::vector<int> all;
    for (auto* v : {&s.attack_targets, &s.clean_test, &s.labeled,
                    &s.validation, &s.unlabeled})
      all.insert(all.end(), v->begin(), v->end());
    ASSERT_EQ(static_cast<size_t>(g.num_nodes()), all.size());
    std::sort(all.begin(), all.end());
    for (int i = 0; i < g.num_nodes(); ++i) ASSERT_EQ(i, all[i]);
  }
}

TEST(Split, DeterministicPerSeedAndSeedSensitive) {
  Graph g = synth_sbm(2, 30, 0.1, 0.01, 4, 1.0, 5);
  SplitSpec a = inductive_split(g, 123), b = inductive_split(g, 123);
  EXPECT_EQ(a.labeled, b.labeled);
  EXPECT_EQ(a.attack_targets, b.attack_targets);
  SplitSpec c = inductive_split(g, 124);
  EXPECT_NE(a.labeled, c.labeled);
}

TEST(Split, TooSmallGraphThrows) {
  Graph g = tiny_graph(6, {{0, 1}});
  EXPECT_THROW(inductive_split(g, 1), std::invalid_argument);
}

namespace {

Trigger path_trigger(int s, int d, uint64_t seed) {
  Rng rng(seed);
  Trigger t;
  t.features = gaussian(s, d, 1.0, rng);
  t.intra_adj = Mat::Zero(s, s);
  for (int i = 0; i + 1 < s; ++i) t.intra_adj(i, i + 1) = t.intra_adj(i + 1, i) = 1.0;
  return t;
}

}  // namespace

TEST(Attach, PathTriggerAddsThreeEdgesAndRelabels) {
  Graph g = tiny_graph(5, {{0, 1}, {2, 3}});
  g.labels = {0, 1, 0, 1, 0};
  PoisonPlan plan = make_poison_plan(1, {2}, {path_trigger(3, 3, 1)});
  Graph p = attach_triggers(g, plan);
  EXPECT_EQ(8, p.num_nodes());
  EXPECT_EQ(g.num_edges() + 3, p.num_edges());  // two intra + one attachment
  EXPECT_EQ(1, p.labels[2]);
  for (int t = 5; t < 8; ++t) EXPECT_EQ(-1, p.labels[t]);
  // anchor 0 of the trigger hangs off node 2
  EXPECT_TRUE(std::count(p.edges.begin(), p.edges.end(),
                         std::make_pair(2, 5)) == 1);
}

TEST(Attach, TwoTriangleTriggersAddEightEdges) {
  Graph g = tiny_graph(5, {{0, 1}});
  Trigger tri = path_trigger(3, 3, 2);
  tri.intra_adj.setOnes();
  tri.intra_adj.diagonal().setZero();
  PoisonPlan plan = make_poison_plan(0, {1, 4}, {tri, tri});
  Graph p = attach_triggers(g, plan);
  EXPECT_EQ(11, p.num_nodes());
  EXPECT_EQ(g.num_edges() + 8, p.num_edges());
}

TEST(Attach, IsPureAndDeterministic) {
  Graph g = tiny_graph(6, {{0, 1}, {1, 2}, {4, 5}});
  Graph before = g;
  PoisonPlan plan = make_poison_plan(1, {0, 3}, {path_trigger(2, 3, 3),
                                                 path_trigger(2, 3, 4)});
  Graph p1 = attach_triggers(g, plan);
  Graph p2 = attach_triggers(g, plan);
  EXPECT_EQ(before.edges, g.edges);
  EXPECT_EQ(0, std::memcmp(before.features.data(), g.features.data(),
                           sizeof(double) * g.features.size()));
  EXPECT_EQ(p1.edges, p2.edges);
  EXPECT_EQ(0, std::memcmp(p1.features.data(), p2.features.data(),
                           sizeof(double) * p1.features.size()));
}

TEST(Attach, DisjointPlansComposeOrderIndependently) {
  Graph g = tiny_graph(6, {{0, 1}, {2, 3}});
  PoisonPlan p1 = make_poison_plan(1, {1}, {path_trigger(2, 3, 5)});
  PoisonPlan p2 = make_poison_plan(1, {4}, {path_trigger(2, 3, 6)});
  Graph ab = attach_triggers(attach_triggers(g, p1), p2);
  Graph ba = attach_triggers(attach_triggers(g, p2), p1);
  int n = 6, s = 2;
  auto key = [&](const Graph&, int pos, bool first_plan_is_p1) {
    if (pos < n) return "o" + std::to_string(pos);
    int block = (pos - n) / s, t = (pos - n) % s;
    bool from_p1 = first_plan_is_p1 ? block == 0 : block == 1;
    return (from_p1 ? "p1_" : "p2_") + std::to_string(t);
  };
  auto canon = [&](const Graph& h, bool p1_first) {
    std::set<std::pair<std::string, std::string>> es;
    for (auto& [u, v] : h.edges) {
      auto a = key(h, u, p1_first), b = key(h, v, p1_first);
      es.emplace(std::min(a, b), std::max(a, b));
    }
    return es;
  };
  EXPECT_EQ(canon(ab, true), canon(ba, false));
  // features agree under the same keying
  for (int t = 0; t < s; ++t) {
    EXPECT_EQ(0.0, (ab.features.row(n + t) - ba.features.row(n + s + t))
                       .cwiseAbs()
                       .maxCoeff());
  }
}

TEST(Attach, RejectsBadPlans) {
  Graph g = tiny_graph(4, {{0, 1}});
  EXPECT_THROW(attach_triggers(g, make_poison_plan(0, {7},
                                                   {path_trigger(2, 3, 1)})),
               std::invalid_argument);
  EXPECT_THROW(attach_triggers(g, make_poison_plan(0, {1},
                                                   {path_trigger(2, 5, 1)})),
               std::invalid_argument);
  Trigger bad = path_trigger(2, 3, 1);
  bad.intra_adj(0, 1) = 0.5;
  EXPECT_THROW(attach_triggers(g, make_poison_plan(0, {1}, {bad})),
               std::invalid_argument);
  Trigger asym = path_trigger(3, 3, 1);
  asym.intra_adj(0, 1) = 0.0;
  EXPECT_THROW(attach_triggers(g, make_poison_plan(0, {1}, {asym})),
               std::invalid_argument);
}

TEST(Sbm, DeterministicShapesAndBalancedLabels) {
  Graph a = synth_sbm(3, 20, 0.2, 0.02, 8, 1.0, 99);
  Graph b = synth_sbm(3, 20, 0.2, 0.02, 8, 1.0, 99);
  EXPECT_EQ(60, a.num_nodes());
  EXPECT_EQ(8, a.num_features());
  EXPECT_EQ(3, a.num_classes());
  EXPECT_EQ(a.edges, b.edges);
  EXPECT_EQ(0, std::memcmp(a.features.data(), b.features.data(),
                           sizeof(double) * a.features.size()));
  for (int c = 0; c < 3; ++c)
    EXPECT_EQ(20, std::count(a.labels.begin(), a.labels.end(), c));
  Graph c = synth_sbm(3, 20, 0.2, 0.02, 8, 1.0, 100);
  EXPECT_NE(a.edges, c.edges);
}

TEST(Sbm, EdgeDensitiesTrackProbabilities) {
  Graph g = synth_sbm(2, 150, 0.08, 0.01, 4, 1.0, 7);
  int intra = 0, inter = 0;
  for (auto& [u, v] : g.edges)
    (g.labels[u] == g.labels[v] ? intra : inter)++;
  double intra_pairs = 2.0 * (150.0 * 149.0 / 2.0);
  double inter_pairs = 150.0 * 150.0;
  EXPECT_NEAR(0.08, intra / intra_pairs, 0.02);
  EXPECT_NEAR(0.01, inter / inter_pairs, 0.005);
}

TEST(Sbm, FeatureShiftSeparatesClassMeans) {
  Graph far = synth_sbm(2, 200, 0.05, 0.01, 6, 4.0, 13);
  Graph none = synth_sbm(2, 200, 0.05, 0.01, 6, 0.0, 13);
  auto mean_gap = [](const Graph& g) {
    Mat m0 = Mat::Zero(1, g.num_features()), m1 = m0;
    for (int i = 0; i < g.num_nodes(); ++i)
      (g.labels[i] == 0 ? m0 : m1) += g.features.row(i);
    return ((m0 - m1) / 200.0).norm();
  };
  EXPECT_GT(mean_gap(far), 3.5);
  EXPECT_LT(mean_gap(none), 0.5);
}

TEST(Subgraph, KeepsIdsFeaturesAndFiltersEdges) {
  Graph g = tiny_graph(6, {{0, 1}, {1, 2}, {2, 3}, {4, 5}});
  g.labels = {0, 1, 0, 1, 0, 1};
  Subgraph s = induced_subgraph(g, {1, 2, 4, 5});
  EXPECT_EQ(4, s.graph.num_nodes());
  EXPECT_EQ(std::vector<int64_t>({1, 2, 4, 5}), s.graph.node_ids);
  EXPECT_EQ((std::vector<std::pair<int, int>>{{0, 1}, {2, 3}}), s.graph.edges);
  EXPECT_EQ(std::vector<int>({1, 0, 0, 1}), s.graph.labels);
  EXPECT_EQ(std::vector<int>({0, 1}), remap_into({1, 2, 3}, s.orig));
}

// ---------------------------------------------------------------------------
// file formats

TEST(Io, JsonlRoundTripIncludingUnlabeledNodes) {
  Graph g = synth_sbm(3, 8, 0.3, 0.05, 4, 1.0, 21);
  g.labels[3] = -1;
  g.labels[17] = -1;
  std::string path = ::testing::TempDir() + "rt.jsonl";
  save_jsonl(g, path);
  Graph h = load_jsonl(path);
  EXPECT_EQ(g.labels, h.labels);
  EXPECT_EQ(g.node_ids, h.node_ids);
  EXPECT_EQ(g.edges, h.edges);
  EXPECT_EQ(g.label_names, h.label_names);
  ASSERT_EQ(g.features.size(), h.features.size());
  EXPECT_EQ(0, std::memcmp(g.features.data(), h.features.data(),
                           sizeof(double) * g.features.size()));
}

TEST(Io, PlanetoidRoundTripIncludingUnlabeledNodes) {
  Graph g = synth_sbm(2, 10, 0.3, 0.05, 3, 1.0, 22);
  g.label_names = {"alpha", "beta"};
  g.labels[5] = -1;
  std::string stem = ::testing::TempDir() + "rtp";
  save_planetoid(g, stem);
  Graph h = load_planetoid(stem);
  EXPECT_EQ(g.labels, h.labels);
  EXPECT_EQ(g.node_ids, h.node_ids);
  EXPECT_EQ(g.edges, h.edges);
  EXPECT_EQ(g.label_names, h.label_names);
  EXPECT_EQ(0, std::memcmp(g.features.data(), h.features.data(),
                           sizeof(double) * g.features.size()));
}

TEST(Io, PlanetoidLabelIndicesAreLexicographic) {
  std::string stem = ::testing::TempDir() + "lex";
  {
    std::ofstream c(stem + ".content");
    c << "n1\t1\t0\tzeta\n";
    c << "n2\t0\t1\talpha\n";
    std::ofstream e(stem + ".cites");
    e << "n1\tn2\n";
  }
  Graph g = load_planetoid(stem);
  EXPECT_EQ(std::vector<std::string>({"alpha", "zeta"}), g.label_names);
  EXPECT_EQ(1, g.labels[0]);
  EXPECT_EQ(0, g.labels[1]);
}

TEST(Io, PlanetoidDropsUnknownCitationsWithCount) {
  std::string stem = ::testing::TempDir() + "unk";
  {
    std::ofstream c(stem + ".content");
    c << "a\t1\tx\n";
    c << "b\t0\ty\n";
    std::ofstream e(stem + ".cites");
    e << "a\tb\n";
    e << "a\tmissing\n";
    e << "ghost\tb\n";
  }
  LoadStats st;
  Graph g = load_planetoid(stem, &st);
  EXPECT_EQ(1, g.num_edges());
  EXPECT_EQ(2, st.dropped_unknown_refs);
}

TEST(Io, SelfLoopsAndDuplicateEdgesAreDroppedWithCounts) {
  std::string path = ::testing::TempDir() + "drops.jsonl";
  {
    std::ofstream f(path);
    f << R"({"node": 0, "x": [1], "y": 0})" << "\n";
    f << R"({"node": 1, "x": [2], "y": 1})" << "\n";
    f << R"({"edge": [0, 1]})" << "\n";
    f << R"({"edge": [1, 0]})" << "\n";
    f << R"({"edge": [0, 0]})" << "\n";
  }
  LoadStats st;
  Graph g = load_jsonl(path, &st);
  EXPECT_EQ(1, g.num_edges());
  EXPECT_EQ(1, st.dropped_self_loops);
  EXPECT_EQ(1, st.dropped_duplicate_edges);
}

TEST(Io, MalformedLineReportsLineNumber) {
  std::string path = ::testing::TempDir() + "bad.jsonl";
  {
    std::ofstream f(path);
    f << R"({"node": 0, "x": [1], "y": 0})" << "\n";
    f << "{oops\n";
  }
  try {
    load_jsonl(path);
    FAIL() << "expected parse error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(nullptr, std::strstr(e.what(), ":2:"));
  }
}

TEST(Io, DuplicateNodeIdIsRejected) {
  std::string path = ::testing::TempDir() + "dup.jsonl";
  {
    std::ofstream f(path);
    f << R"({"node": 5, "x": [1], "y": 0})" << "\n";
    f << R"({"node": 5, "x": [2], "y": 1})" << "\n";
  }
  EXPECT_THROW(load_jsonl(path), std::runtime_error);
}

TEST(Io, EdgeToUnknownNodeIsAParseError) {
  std::string path = ::testing::TempDir() + "unknown_edge.jsonl";
  {
    std::ofstream f(path);
    f << R"({"node": 0, "x": [1], "y": 0})" << "\n";
    f << R"({"edge": [0, 3]})" << "\n";
  }
  EXPECT_THROW(load_jsonl(path), std::runtime_error);
}

TEST(Io, CheckpointRoundTripAndShapeMismatch) {
  Rng rng(5);
  ParamSet a;
  a.add("w1", gaussian(3, 4, 1.0, rng));
  a.add("w2", gaussian(4, 2, 1.0, rng));
  std::string path = ::testing::TempDir() + "ckpt.jsonl";
  save_params(a, path);
  ParamSet b;
  b.add("w1", Mat::Zero(3, 4));
  b.add("w2", Mat::Zero(4, 2));
  load_params(b, path);
  EXPECT_EQ(0, std::memcmp(a.at("w1").value.data(), b.at("w1").value.data(),
                           sizeof(double) * 12));
  ParamSet c;
  c.add("w1", Mat::Zero(3, 3));
  c.add("w2", Mat::Zero(4, 2));
  EXPECT_THROW(load_params(c, path), std::runtime_error);
}

int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  return RUN_ALL_TESTS();
}
