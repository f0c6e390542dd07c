#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dpgba/matrix.hpp"

namespace dpgba {

// Undirected attributed graph. Edges are stored once with u < v; positions
// index rows of features. node_ids are stable identifiers that survive
// subgraphing, so artifacts fitted on one graph can be looked up on another.
struct Graph {
  Mat features;                       // n x d
  std::vector<int> labels;            // -1 = unlabeled
  std::vector<int64_t> node_ids;
  std::vector<std::pair<int, int>> edges;  // u < v, sorted, unique
  std::vector<std::string> label_names;    // optional, indexed by class

  int num_nodes() const { return static_cast<int>(features.rows()); }
  int num_features() const { return static_cast<int>(features.cols()); }
  int num_edges() const { return static_cast<int>(edges.size()); }
  int num_classes() const {
    if (!label_names.empty()) return static_cast<int>(label_names.size());
    int c = 0;
    for (int y : labels) c = std::max(c, y + 1);
    return c;
  }

  void check_consistent() const {
    DPGBA_CHECK(labels.size() == static_cast<size_t>(num_nodes()) &&
                    node_ids.size() == static_cast<size_t>(num_nodes()),
                "graph: per-node arrays out of sync");
    for (auto& [u, v] : edges)
      DPGBA_CHECK(u >= 0 && u < v && v < num_nodes(), "graph: bad edge");
  }
};

inline void canonicalize_edges(std::vector<std::pair<int, int>>& edges) {
  for (auto& e : edges)
    if (e.first > e.second) std::swap(e.first, e.second);
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
}

// A (both directions), no self loops, values 1.
inline SparseMat binary_adjacency(const Graph& g) {
  std::vector<std::tuple<int, int, double>> tr;
  tr.reserve(g.edges.size() * 2);
  for (auto& [u, v] : g.edges) {
    tr.emplace_back(u, v, 1.0);
    tr.emplace_back(v, u, 1.0);
  }
  return SparseMat::from_triplets(g.num_nodes(), g.num_nodes(), tr);
}

// D^{-1/2} (A + I) D^{-1/2} with degrees taken after adding self loops.
inline SparseMat normalize_adjacency(const Graph& g) {
  int n = g.num_nodes();
  std::vector<double> deg(n, 1.0);
  for (auto& [u, v] : g.edges) {
    deg[u] += 1.0;
    deg[v] += 1.0;
  }
  std::vector<std::tuple<int, int, double>> tr;
  tr.reserve(g.edges.size() * 2 + n);
  for (int i = 0; i < n; ++i) tr.emplace_back(i, i, 1.0 / deg[i]);
  for (auto& [u, v] : g.edges) {
    double w = 1.0 / std::sqrt(deg[u] * deg[v]);
    tr.emplace_back(u, v, w);
    tr.emplace_back(v, u, w);
  }
  return SparseMat::from_triplets(n, n, tr);
}

// Row-stochastic neighbor averaging (no self loops); isolated rows stay zero.
inline SparseMat neighbor_mean_adjacency(const Graph& g) {
  int n = g.num_nodes();
  std::vector<double> deg(n, 0.0);
  for (auto& [u, v] : g.edges) {
    deg[u] += 1.0;
    deg[v] += 1.0;
  }
  std::vector<std::tuple<int, int, double>> tr;
  for (auto& [u, v] : g.edges) {
    tr.emplace_back(u, v, 1.0 / deg[u]);
    tr.emplace_back(v, u, 1.0 / deg[v]);
  }
  return SparseMat::from_triplets(n, n, tr);
}

// ---------------------------------------------------------------------------
// splits

struct SplitSpec {
  std::vector<int> labeled;
  std::vector<int> unlabeled;
  std::vector<int> attack_targets;
  std::vector<int> clean_test;
  std::vector<int> validation;
};

// 20% held out (floor), split into targets (round up) and clean test; 10%
// labeled, 10% validation, remainder unlabeled. All sets sorted.
inline SplitSpec inductive_split(const Graph& g, uint64_t seed) {
  int n = g.num_nodes();
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(seed, 3));
  std::shuffle(order.begin(), order.end(), rng);

  int held = n / 5;
  int lab = n / 10;
  int val = n / 10;
  SplitSpec s;
  int at = (held + 1) / 2;
  auto take = [&](int from, int count) {
    return std::vector<int>(order.begin() + from, order.begin() + from + count);
  };
  s.attack_targets = take(0, at);
  s.clean_test = take(at, held - at);
  s.labeled = take(held, lab);
  s.validation = take(held + lab, val);
  s.unlabeled = take(held + lab + val, n - held - lab - val);
  for (auto* v : {&s.attack_targets, &s.clean_test, &s.labeled, &s.validation,
                  &s.unlabeled})
    std::sort(v->begin(), v->end());
  DPGBA_CHECK(!s.attack_targets.empty() && !s.clean_test.empty() &&
                  !s.labeled.empty() && !s.validation.empty() &&
                  !s.unlabeled.empty(),
              "inductive_split: graph too small, a split set came out empty");
  return s;
}

struct Subgraph {
  Graph graph;
  std::vector<int> orig;  // new position -> old position
};

inline Subgraph induced_subgraph(const Graph& g, std::vector<int> keep) {
  std::sort(keep.begin(), keep.end());
  keep.erase(std::unique(keep.begin(), keep.end()), keep.end());
  for (int p : keep)
    DPGBA_CHECK(p >= 0 && p < g.num_nodes(), "induced_subgraph: bad position");
  std::vector<int> newpos(g.num_nodes(), -1);
  for (size_t i = 0; i < keep.size(); ++i) newpos[keep[i]] = static_cast<int>(i);
  Subgraph out;
  out.orig = keep;
  Graph& h = out.graph;
  h.features = Mat(keep.size(), g.num_features());
  h.labels.resize(keep.size());
  h.node_ids.resize(keep.size());
  for (size_t i = 0; i < keep.size(); ++i) {
    h.features.row(i) = g.features.row(keep[i]);
    h.labels[i] = g.labels[keep[i]];
    h.node_ids[i] = g.node_ids[keep[i]];
  }
  h.label_names = g.label_names;
  for (auto& [u, v] : g.edges)
    if (newpos[u] >= 0 && newpos[v] >= 0)
      h.edges.emplace_back(newpos[u], newpos[v]);
  canonicalize_edges(h.edges);
  return out;
}

// Remaps positions in `sets` (old graph) through a Subgraph's orig vector;
// positions that were dropped disappear.
inline std::vector<int> remap_into(const std::vector<int>& set,
                                   const std::vector<int>& orig) {
  std::vector<int> newpos;
  std::unordered_map<int, int> inv;
  inv.reserve(orig.size());
  for (size_t i = 0; i < orig.size(); ++i) inv[orig[i]] = static_cast<int>(i);
  for (int p : set) {
    auto it = inv.find(p);
    if (it != inv.end()) newpos.push_back(it->second);
  }
  std::sort(newpos.begin(), newpos.end());
  return newpos;
}

// ---------------------------------------------------------------------------
// triggers

struct Trigger {
  Mat features;   // s x d
  Mat intra_adj;  // s x s, symmetric 0/1, zero diagonal
  int anchor = 0;

  int size() const { return static_cast<int>(features.rows()); }

  void check_valid(int feat_dim) const {
    int s = size();
    DPGBA_CHECK(features.cols() == feat_dim, "trigger: feature dim mismatch");
    DPGBA_CHECK(intra_adj.rows() == s && intra_adj.cols() == s,
                "trigger: adjacency size mismatch");
    DPGBA_CHECK(anchor >= 0 && anchor < s, "trigger: bad anchor");
    for (int i = 0; i < s; ++i)
      for (int j = 0; j < s; ++j) {
        double a = intra_adj(i, j);
        DPGBA_CHECK(a == 0.0 || a == 1.0, "trigger: adjacency not binary");
        DPGBA_CHECK(a == intra_adj(j, i), "trigger: adjacency not symmetric");
        if (i == j) DPGBA_CHECK(a == 0.0, "trigger: self loop");
      }
  }
};

struct PoisonPlan {
  int target_class = 0;
  std::vector<int> poisoned_nodes;  // positions in the graph being poisoned
  std::vector<Trigger> triggers;    // parallel to poisoned_nodes
  // (poisoned node, trigger row); the edge lands on that trigger's anchor
  std::vector<std::pair<int, int>> attachment_edges;
};

inline PoisonPlan make_poison_plan(int target_class,
                                   std::vector<int> poisoned_nodes,
                                   std::vector<Trigger> triggers) {
  DPGBA_CHECK(poisoned_nodes.size() == triggers.size(),
              "poison plan: node/trigger count mismatch");
  PoisonPlan p;
  p.target_class = target_class;
  p.poisoned_nodes = std::move(poisoned_nodes);
  p.triggers = std::move(triggers);
  for (size_t i = 0; i < p.poisoned_nodes.size(); ++i)
    p.attachment_edges.emplace_back(p.poisoned_nodes[i], static_cast<int>(i));
  return p;
}

// Pure: returns a new graph with s*k trigger nodes appended in plan order,
// one attachment edge per poisoned node, and poisoned nodes relabeled to the
// target class. Trigger nodes are unlabeled and get fresh node_ids.
// id_base < 0 numbers trigger nodes from max(node_ids)+1; callers juggling
// several poisoned views of one graph pass an explicit base so ids never
// collide across views.
inline Graph attach_triggers(const Graph& g, const PoisonPlan& plan,
                             int64_t id_base = -1) {
  int n = g.num_nodes();
  int d = g.num_features();
  DPGBA_CHECK(plan.poisoned_nodes.size() == plan.triggers.size() &&
                  plan.attachment_edges.size() == plan.triggers.size(),
              "attach_triggers: inconsistent plan");
  int k = static_cast<int>(plan.triggers.size());
  DPGBA_CHECK(k > 0, "attach_triggers: empty plan");
  int s = plan.triggers[0].size();
  int64_t next_id = 0;
  for (int64_t id : g.node_ids) next_id = std::max(next_id, id + 1);
  if (id_base >= 0) {
    DPGBA_CHECK(id_base >= next_id, "attach_triggers: id_base collides");
    next_id = id_base;
  }
  for (int i = 0; i < k; ++i) {
    int v = plan.poisoned_nodes[i];
    DPGBA_CHECK(v >= 0 && v < n, "attach_triggers: node outside graph");
    DPGBA_CHECK(plan.triggers[i].size() == s,
                "attach_triggers: trigger size mismatch");
    plan.triggers[i].check_valid(d);
    DPGBA_CHECK(plan.attachment_edges[i].first == v &&
                    plan.attachment_edges[i].second == i,
                "attach_triggers: attachment edge list out of order");
  }
  DPGBA_CHECK(plan.target_class >= 0 && plan.target_class < g.num_classes(),
              "attach_triggers: target class out of range");

  Graph out;
  out.features = Mat(n + s * k, d);
  out.features.topRows(n) = g.features;
  out.labels = g.labels;
  out.node_ids = g.node_ids;
  out.label_names = g.label_names;
  out.edges = g.edges;
  for (int i = 0; i < k; ++i) {
    const Trigger& tr = plan.triggers[i];
    int base = n + i * s;
    out.features.middleRows(base, s) = tr.features;
    for (int t = 0; t < s; ++t) {
      out.labels.push_back(-1);
      out.node_ids.push_back(next_id + static_cast<int64_t>(i) * s + t);
    }
    for (int p = 0; p < s; ++p)
      for (int q = p + 1; q < s; ++q)
        if (tr.intra_adj(p, q) == 1.0)
          out.edges.emplace_back(base + p, base + q);
    out.edges.emplace_back(plan.poisoned_nodes[i], base + tr.anchor);
    out.labels[plan.poisoned_nodes[i]] = plan.target_class;
  }
  canonicalize_edges(out.edges);
  out.check_consistent();
  return out;
}

// ---------------------------------------------------------------------------
// synthetic data

// Equal-size communities; within/between edge probabilities p_in/p_out;
// features are isotropic unit-variance Gaussians whose class means are
// feature_shift apart for every class pair.
inline Graph synth_sbm(int classes, int nodes_per_class, double p_in,
                       double p_out, int feature_dim, double feature_shift,
                       uint64_t seed) {
  DPGBA_CHECK(classes >= 2 && nodes_per_class >= 1, "synth_sbm: too small");
  DPGBA_CHECK(feature_dim >= classes,
              "synth_sbm: feature_dim must be >= classes");
  DPGBA_CHECK(p_in >= 0 && p_in <= 1 && p_out >= 0 && p_out <= 1,
              "synth_sbm: bad probability");
  int n = classes * nodes_per_class;
  Graph g;
  g.labels.resize(n);
  g.node_ids.resize(n);
  for (int i = 0; i < n; ++i) {
    g.labels[i] = i / nodes_per_class;
    g.node_ids[i] = i;
  }
  for (int c = 0; c < classes; ++c)
    g.label_names.push_back(std::to_string(c));

  Rng erng(mix_seed(seed, 1));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      double p = g.labels[i] == g.labels[j] ? p_in : p_out;
      if (u(erng) < p) g.edges.emplace_back(i, j);
    }

  Rng frng(mix_seed(seed, 2));
  double off = feature_shift / std::sqrt(2.0);
  g.features = Mat(n, feature_dim);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < feature_dim; ++j)
      g.features(i, j) = std::normal_distribution<double>(0.0, 1.0)(frng);
    g.features(i, g.labels[i]) += off;
  }
  g.check_consistent();
  return g;
}

}  // namespace dpgba
