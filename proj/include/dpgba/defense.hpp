#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dpgba/graph.hpp"
#include "dpgba/io.hpp"
#include "dpgba/models.hpp"

namespace dpgba {

struct OdParams {
  int hidden = 64;
  int embed = 32;
  int epochs = 100;
  double lr = 0.01;
};

// Frozen outlier detector: reconstruction autoencoder plus the threshold and
// score statistics taken on the graph it was fitted to. Fit-time scores are
// cached by node_id; graphs made only of fitted nodes reuse them, graphs with
// unseen nodes (inference-time targets and triggers) are rescored whole with
// the frozen weights.
struct OdModel {
  ReconAutoencoder ae;
  double threshold = 0.0;
  double prune_fraction = 0.03;
  double mu = 0.0;
  double delta = 0.0;
  Graph fit_graph;
  std::vector<int64_t> fit_ids;
  std::vector<double> fit_scores;

  // Scores one inference-time attachment inside the graph the detector was
  // fitted on: the query row plus its trigger are appended to that graph and
  // only the appended rows are read back. Scoring in the fit context keeps
  // fresh scores on the same scale as the frozen threshold; context edges
  // whose endpoints never existed at fit time are dropped.
  std::vector<double> score_attachment(const Mat& query_row,
                                       const std::vector<int64_t>& nbr_ids,
                                       const Trigger& trig) const {
    DPGBA_CHECK(fit_graph.num_nodes() > 0, "od: model not fitted");
    DPGBA_CHECK(query_row.rows() == 1 &&
                    query_row.cols() == fit_graph.num_features(),
                "od: query row shape mismatch");
    std::unordered_map<int64_t, int> pos;
    pos.reserve(fit_ids.size());
    for (size_t i = 0; i < fit_ids.size(); ++i)
      pos[fit_ids[i]] = static_cast<int>(i);
    Graph g = fit_graph;
    const int q = g.num_nodes();
    const int s = static_cast<int>(trig.features.rows());
    Mat feats(q + 1 + s, g.num_features());
    feats.topRows(q) = g.features;
    feats.row(q) = query_row.row(0);
    feats.bottomRows(s) = trig.features;
    g.features = std::move(feats);
    int64_t next_id = 0;
    for (int64_t id : g.node_ids) next_id = std::max(next_id, id + 1);
    g.node_ids.push_back(next_id);
    for (int k = 0; k < s; ++k) g.node_ids.push_back(next_id + 1 + k);
    g.labels.resize(static_cast<size_t>(q + 1 + s), -1);
    for (int64_t id : nbr_ids) {
      auto it = pos.find(id);
      if (it != pos.end()) g.edges.emplace_back(q, it->second);
    }
    for (int a = 0; a < s; ++a)
      for (int b = a + 1; b < s; ++b)
        if (trig.intra_adj(a, b) != 0.0) g.edges.emplace_back(q + 1 + a, q + 1 + b);
    g.edges.emplace_back(q, q + 1 + trig.anchor);
    Mat sc = ae.scores(g);
    std::vector<double> out(static_cast<size_t>(s));
    for (int k = 0; k < s; ++k) out[static_cast<size_t>(k)] = sc(q + 1 + k, 0);
    return out;
  }

  // Nodes screened at fit time keep their fit-time verdict (keyed by node
  // id); only unseen nodes are scored fresh, inside the graph they arrive in.
  std::vector<double> scores_for(const Graph& g) const {
    DPGBA_CHECK(!fit_ids.empty(), "od: model not fitted");
    std::unordered_map<int64_t, double> cache;
    cache.reserve(fit_ids.size());
    for (size_t i = 0; i < fit_ids.size(); ++i) cache[fit_ids[i]] = fit_scores[i];
    std::vector<double> out(static_cast<size_t>(g.num_nodes()));
    std::vector<int> fresh;
    for (int v = 0; v < g.num_nodes(); ++v) {
      auto it = cache.find(g.node_ids[v]);
      if (it == cache.end())
        fresh.push_back(v);
      else
        out[v] = it->second;
    }
    if (!fresh.empty()) {
      Mat s = ae.scores(g);
      for (int v : fresh) out[static_cast<size_t>(v)] = s(v, 0);
    }
    return out;
  }
};

// (1-q) empirical quantile: the k-th smallest score with k = ceil((1-q)N),
// so at most a q fraction sits strictly above it.
inline double od_threshold(std::vector<double> scores, double q) {
  DPGBA_CHECK(q >= 0.0 && q < 1.0, "od_threshold: q must lie in [0,1)");
  DPGBA_CHECK(!scores.empty(), "od_threshold: no scores");
  const int n = static_cast<int>(scores.size());
  std::sort(scores.begin(), scores.end());
  int k = static_cast<int>(std::ceil((1.0 - q) * n - 1e-9));
  k = std::min(std::max(k, 1), n);
  return scores[static_cast<size_t>(k - 1)];
}

// The autoencoder trains on the whole (possibly poisoned) graph. Tau is the
// (1-q) quantile of the scores of nodes that arrived with labels: those are
// the rows the defender can vouch for, and injected trigger rows (always
// unlabeled) cannot drag the threshold into their own range. On a fully
// labeled graph this is simply the (1-q) quantile of every node's score.
// mu/delta describe the same reference rows, giving an uncontaminated
// in-distribution band.
inline OdModel fit_od(const Graph& poisoned, double q, uint64_t seed,
                      const OdParams& params = {}) {
  DPGBA_CHECK(q >= 0.0 && q < 1.0, "fit_od: q must lie in [0,1)");
  const int n = poisoned.num_nodes();
  DPGBA_CHECK(n > 0, "fit_od: empty graph");
  OdModel od;
  od.prune_fraction = q;
  od.ae = ReconAutoencoder::init(poisoned.num_features(), params.hidden,
                                 params.embed, mix_seed(seed, 22));
  od.ae.fit(poisoned, params.epochs, params.lr);
  Mat s = od.ae.scores(poisoned);
  od.fit_graph = poisoned;
  od.fit_ids = poisoned.node_ids;
  od.fit_scores.resize(static_cast<size_t>(n));
  for (int v = 0; v < n; ++v) od.fit_scores[v] = s(v, 0);

  std::vector<double> ref;
  ref.reserve(od.fit_scores.size());
  for (int v = 0; v < n; ++v)
    if (poisoned.labels[static_cast<size_t>(v)] >= 0)
      ref.push_back(od.fit_scores[static_cast<size_t>(v)]);
  if (ref.empty()) ref = od.fit_scores;
  od.threshold = od_threshold(ref, q);

  od.mu = 0.0;
  for (double x : ref) od.mu += x;
  od.mu /= static_cast<double>(ref.size());
  double var = 0.0;
  for (double x : ref) var += (x - od.mu) * (x - od.mu);
  od.delta = std::sqrt(var / static_cast<double>(ref.size()));
  return od;
}

struct PruneResult {
  Graph graph;
  std::vector<int> kept;     // old positions, ascending
  std::vector<int> removed;  // old positions, ascending
};

inline PruneResult prune_outliers(const Graph& g, const OdModel& od) {
  std::vector<double> scores = od.scores_for(g);
  std::vector<int> keep, removed;
  for (int v = 0; v < g.num_nodes(); ++v)
    (scores[v] > od.threshold ? removed : keep).push_back(v);
  DPGBA_CHECK(!keep.empty(), "prune_outliers: every node pruned");
  Subgraph sub = induced_subgraph(g, keep);
  PruneResult out;
  out.graph = std::move(sub.graph);
  out.kept = std::move(sub.orig);
  out.removed = std::move(removed);
  return out;
}

// Drops the floor(drop_fraction * |E|) edges whose endpoint features have the
// lowest cosine similarity; ties keep input edge order.
inline Graph prune_dissimilar_edges(const Graph& g, double drop_fraction) {
  DPGBA_CHECK(drop_fraction >= 0.0 && drop_fraction < 1.0,
              "prune_dissimilar_edges: fraction must lie in [0,1)");
  const int m = g.num_edges();
  const int drop = static_cast<int>(std::floor(drop_fraction * m + 1e-9));
  if (drop == 0) return g;

  std::vector<double> sim(static_cast<size_t>(m));
  for (int e = 0; e < m; ++e) {
    auto [u, v] = g.edges[static_cast<size_t>(e)];
    double nu = g.features.row(u).norm();
    double nv = g.features.row(v).norm();
    sim[static_cast<size_t>(e)] =
        nu == 0.0 || nv == 0.0
            ? 0.0
            : g.features.row(u).dot(g.features.row(v)) / (nu * nv);
  }
  std::vector<int> order(static_cast<size_t>(m));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return sim[a] < sim[b]; });
  std::vector<char> dead(static_cast<size_t>(m), 0);
  for (int i = 0; i < drop; ++i) dead[static_cast<size_t>(order[i])] = 1;

  Graph out = g;
  out.edges.clear();
  for (int e = 0; e < m; ++e)
    if (!dead[static_cast<size_t>(e)]) out.edges.push_back(g.edges[e]);
  out.check_consistent();
  return out;
}

struct ScoreReport {
  std::vector<int64_t> node_id;
  std::vector<double> score;
  std::vector<char> is_trigger;
  double clean_mu = 0.0;
  double clean_delta = 0.0;
  double trigger_mean = std::numeric_limits<double>::quiet_NaN();
  double threshold = 0.0;
};

// Scores every node of the poisoned graph and tags the trigger rows the plan
// appended (they sit after the original nodes, in plan order).
inline ScoreReport trigger_score_report(const OdModel& od,
                                        const Graph& poisoned,
                                        const PoisonPlan& plan) {
  const int n = poisoned.num_nodes();
  int trig_rows = 0;
  for (const Trigger& t : plan.triggers) trig_rows += t.size();
  DPGBA_CHECK(trig_rows < n, "trigger_score_report: plan larger than graph");
  const int n_clean = n - trig_rows;

  ScoreReport rep;
  rep.threshold = od.threshold;
  rep.node_id = poisoned.node_ids;
  rep.score = od.scores_for(poisoned);
  rep.is_trigger.assign(static_cast<size_t>(n), 0);
  for (int v = n_clean; v < n; ++v) rep.is_trigger[static_cast<size_t>(v)] = 1;

  double cm = 0.0;
  for (int v = 0; v < n_clean; ++v) cm += rep.score[static_cast<size_t>(v)];
  rep.clean_mu = cm / n_clean;
  double var = 0.0;
  for (int v = 0; v < n_clean; ++v) {
    double d = rep.score[static_cast<size_t>(v)] - rep.clean_mu;
    var += d * d;
  }
  rep.clean_delta = std::sqrt(var / n_clean);
  if (trig_rows > 0) {
    double tm = 0.0;
    for (int v = n_clean; v < n; ++v) tm += rep.score[static_cast<size_t>(v)];
    rep.trigger_mean = tm / trig_rows;
  }
  return rep;
}

inline void write_score_csv(const std::string& path, const ScoreReport& rep) {
  std::vector<std::vector<std::string>> rows;
  rows.reserve(rep.node_id.size());
  for (size_t i = 0; i < rep.node_id.size(); ++i)
    rows.push_back({std::to_string(rep.node_id[i]), format_double(rep.score[i]),
                    rep.is_trigger[i] ? "1" : "0"});
  write_csv(path, {"node_id", "score", "is_trigger"}, rows);
}

}  // namespace dpgba
