#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "dpgba/baselines.hpp"
#include "dpgba/defense.hpp"

namespace dpgba {

enum class VictimArch { gcn, sage };

inline const char* to_string(VictimArch a) {
  return a == VictimArch::gcn ? "gcn" : "sage";
}

inline VictimArch victim_arch_from_string(const std::string& name) {
  if (name == "gcn") return VictimArch::gcn;
  if (name == "sage") return VictimArch::sage;
  throw std::invalid_argument("victim_arch_from_string: unknown arch '" +
                              name + "'");
}

struct VictimConfig {
  int hidden = 32;
  double lr = 0.01;
  double weight_decay = 5e-4;
  double dropout = 0.5;
  int epochs = 300;
  int patience = 30;
};

struct Victim {
  VictimArch arch = VictimArch::gcn;
  Gcn gcn;
  SageClassifier sage;
  std::vector<double> val_trace;

  Mat logits(const Graph& g) const {
    if (arch == VictimArch::gcn)
      return gcn.logits_plain(normalize_adjacency(g), g.features);
    return sage.logits_plain(neighbor_mean_adjacency(g), g.features);
  }

  std::vector<int> predict(const Graph& g) const {
    Mat l = logits(g);
    std::vector<int> y(static_cast<size_t>(l.rows()));
    for (int i = 0; i < l.rows(); ++i) y[static_cast<size_t>(i)] = argmax_row(l, i);
    return y;
  }
};

namespace detail {

inline std::vector<Mat> snapshot_values(const ParamSet& ps) {
  std::vector<Mat> out;
  for (const Param* p : ps.all()) out.push_back(p->value);
  return out;
}

inline void restore_values(ParamSet& ps, const std::vector<Mat>& vals) {
  std::vector<Param*> all = ps.all();
  DPGBA_CHECK(all.size() == vals.size(), "restore_values: size mismatch");
  for (size_t i = 0; i < all.size(); ++i) all[i]->value = vals[i];
}

inline double accuracy_at(const std::vector<int>& pred,
                          const std::vector<int>& labels,
                          const std::vector<int>& nodes) {
  int hit = 0;
  for (int v : nodes) hit += pred[static_cast<size_t>(v)] == labels[static_cast<size_t>(v)];
  return static_cast<double>(hit) / nodes.size();
}

}  // namespace detail

// Supervised training on the given rows with the standard recipe: L2 weight
// decay, dropout on the hidden layer, 300-epoch budget with early stop on a
// validation-accuracy plateau, best weights restored at the end.
inline Victim train_victim(const Graph& g, const std::vector<int>& train_nodes,
                           const std::vector<int>& val_nodes, VictimArch arch,
                           uint64_t seed, const VictimConfig& cfg = {}) {
  DPGBA_CHECK(!train_nodes.empty(), "train_victim: no training nodes");
  DPGBA_CHECK(cfg.epochs >= 0 && cfg.hidden > 0 && cfg.weight_decay >= 0,
              "train_victim: bad config");
  DPGBA_CHECK(cfg.dropout >= 0 && cfg.dropout < 1, "train_victim: bad dropout");
  for (int v : train_nodes) {
    DPGBA_CHECK(v >= 0 && v < g.num_nodes(), "train_victim: node out of range");
    DPGBA_CHECK(g.labels[static_cast<size_t>(v)] >= 0,
                "train_victim: unlabeled training node");
  }
  const int classes = g.num_classes();
  DPGBA_CHECK(classes >= 2, "train_victim: need at least two classes");

  Victim victim;
  victim.arch = arch;
  SparseMat adj;
  ParamSet* params = nullptr;
  Mat drop_mask = Mat::Ones(g.num_nodes(), cfg.hidden);
  std::function<Expr(Tape&)> forward;
  if (arch == VictimArch::gcn) {
    adj = normalize_adjacency(g);
    victim.gcn = Gcn::init(g.num_features(), cfg.hidden, classes, seed);
    params = &victim.gcn.params;
    forward = [&](Tape& t) {
      Expr x = t.constant(g.features);
      Expr h = relu(spmm(adj, matmul(x, victim.gcn.weight1(t, false))));
      Expr hd = hadamard_const(h, drop_mask);
      return spmm(adj, matmul(hd, victim.gcn.weight2(t, false)));
    };
  } else {
    adj = neighbor_mean_adjacency(g);
    victim.sage =
        SageClassifier::init(g.num_features(), cfg.hidden, classes, seed);
    params = &victim.sage.params;
    forward = [&](Tape& t) {
      Expr x = t.constant(g.features);
      Expr h0 = hconcat(x, spmm(adj, x));
      Expr w1 = detail::leaf(t, victim.sage.params, "w1", false);
      Expr h1 = hadamard_const(relu(matmul(h0, w1)), drop_mask);
      Expr h2 = hconcat(h1, spmm(adj, h1));
      Expr w2 = detail::leaf(t, victim.sage.params, "w2", false);
      return matmul(h2, w2);
    };
  }

  Rng drop_rng(mix_seed(seed, 23));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double keep = 1.0 - cfg.dropout;
  AdamConfig adam;
  adam.lr = cfg.lr;
  std::vector<Mat> best = detail::snapshot_values(*params);
  double best_acc = -1.0;
  int stale = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.dropout > 0)
      for (int i = 0; i < drop_mask.rows(); ++i)
        for (int j = 0; j < drop_mask.cols(); ++j)
          drop_mask(i, j) = unit(drop_rng) < keep ? 1.0 / keep : 0.0;
    Tape t;
    Expr loss = loss_surrogate(forward(t), train_nodes, g.labels, {}, 0);
    double lv = loss.val()(0, 0);
    if (!std::isfinite(lv))
      throw std::runtime_error("train_victim: non-finite loss at epoch " +
                               std::to_string(epoch));
    params->zero_grad();
    t.backward(loss);
    if (cfg.weight_decay > 0)
      for (Param* p : params->all()) p->grad += cfg.weight_decay * p->value;
    adam_step(*params, adam);

    if (val_nodes.empty()) continue;
    double acc = detail::accuracy_at(victim.predict(g), g.labels, val_nodes);
    victim.val_trace.push_back(acc);
    if (acc > best_acc + 1e-12) {
      best_acc = acc;
      best = detail::snapshot_values(*params);
      stale = 0;
    } else if (++stale > cfg.patience) {
      break;
    }
  }
  if (!val_nodes.empty()) detail::restore_values(*params, best);
  return victim;
}

struct DefenseSpec {
  enum class Kind { none, od, prune };
  Kind kind = Kind::none;
  double q = 0.03;
  double drop_fraction = 0.10;
};

inline const char* to_string(DefenseSpec::Kind k) {
  switch (k) {
    case DefenseSpec::Kind::none: return "none";
    case DefenseSpec::Kind::od: return "od";
    case DefenseSpec::Kind::prune: return "prune";
  }
  throw std::invalid_argument("to_string: bad defense kind");
}

inline DefenseSpec::Kind defense_kind_from_string(const std::string& name) {
  for (auto k : {DefenseSpec::Kind::none, DefenseSpec::Kind::od,
                 DefenseSpec::Kind::prune})
    if (name == to_string(k)) return k;
  throw std::invalid_argument("defense_kind_from_string: unknown defense '" +
                              name + "'");
}

// The graph the victim answers queries on: every node of the original graph
// (training portion plus held-out nodes), the training-time triggers at their
// owners' positions, and one fresh trigger per attack target. Original nodes
// keep their positions; trigger blocks are appended in plan order.
struct ServingGraph {
  // One trigger block appended to the serving graph: which node it hangs on,
  // where its rows landed, and whether it is a training trigger restaged at
  // serve time (from_fit) or a fresh one generated for a query node.
  struct Attachment {
    int owner_pos = -1;
    int first_row = -1;
    int rows = 0;
    bool from_fit = false;
    int fit_offset = 0;  // flattened row offset within the training plan
    Trigger trigger;
  };

  Graph g;
  std::vector<int> protected_nodes;  // query nodes, exempt from node pruning
  std::vector<Attachment> attachments;
  int original_rows = 0;  // rows below this index are nodes of the full graph
};

inline ServingGraph build_serving_graph(const Graph& full,
                                        const AttackArtifacts& art,
                                        const std::vector<int>& owners_full,
                                        const std::vector<int>& targets,
                                        const std::vector<int>& clean_test,
                                        int target_class) {
  DPGBA_CHECK(owners_full.size() == art.plan.triggers.size(),
              "build_serving_graph: owner/trigger count mismatch");
  std::vector<int> nodes = owners_full;
  std::vector<Trigger> triggers = art.plan.triggers;
  int64_t fit_rows = 0;
  for (const Trigger& tr : art.plan.triggers) fit_rows += tr.size();
  for (int v : targets) {
    DPGBA_CHECK(v >= 0 && v < full.num_nodes(),
                "build_serving_graph: target out of range");
    nodes.push_back(v);
    triggers.push_back(art.make_triggers(full.features.row(v))[0]);
  }
  // Ids are only required to be unique; starting past max(full)+fit_rows
  // keeps serving trigger ids distinct from every id seen at fit time.
  int64_t id_base = fit_rows;
  for (int64_t id : full.node_ids) id_base = std::max(id_base, id + fit_rows + 1);
  ServingGraph sg;
  sg.original_rows = full.num_nodes();
  int row = full.num_nodes();
  int fit_offset = 0;
  for (size_t i = 0; i < nodes.size(); ++i) {
    ServingGraph::Attachment at;
    at.owner_pos = nodes[i];
    at.first_row = row;
    at.rows = static_cast<int>(triggers[i].features.rows());
    at.from_fit = i < owners_full.size();
    at.fit_offset = at.from_fit ? fit_offset : 0;
    at.trigger = triggers[i];
    if (at.from_fit) fit_offset += at.rows;
    row += at.rows;
    sg.attachments.push_back(std::move(at));
  }
  sg.g = attach_triggers(
      full, make_poison_plan(target_class, std::move(nodes), std::move(triggers)),
      id_base);
  sg.protected_nodes = detail::sorted_union(targets, clean_test);
  return sg;
}

// Serving graph after the frozen defense screens it. pos_of maps serving
// positions to defended positions, -1 for pruned nodes. Query nodes are never
// pruned: the classifier owes an answer for every query, so the defense can
// only sanitize their context.
struct DefendedGraph {
  Graph g;
  std::vector<int> pos_of;
};

inline DefendedGraph apply_serving_defense(const ServingGraph& sg,
                                           const DefenseSpec& ds,
                                           const OdModel* od) {
  DefendedGraph dg;
  dg.pos_of.resize(static_cast<size_t>(sg.g.num_nodes()));
  std::iota(dg.pos_of.begin(), dg.pos_of.end(), 0);
  switch (ds.kind) {
    case DefenseSpec::Kind::none:
      dg.g = sg.g;
      return dg;
    case DefenseSpec::Kind::prune:
      dg.g = prune_dissimilar_edges(sg.g, ds.drop_fraction);
      return dg;
    case DefenseSpec::Kind::od: {
      DPGBA_CHECK(od != nullptr, "apply_serving_defense: od model required");
      const int n = sg.g.num_nodes();
      const double keep_score = -std::numeric_limits<double>::infinity();
      std::vector<double> scores(static_cast<size_t>(n), keep_score);
      // Original nodes keep their fit-time verdict; nodes the detector never
      // saw at fit time are all protected queries and stay regardless.
      std::unordered_map<int64_t, double> cache;
      cache.reserve(od->fit_ids.size());
      for (size_t i = 0; i < od->fit_ids.size(); ++i)
        cache[od->fit_ids[i]] = od->fit_scores[i];
      for (int v = 0; v < sg.original_rows; ++v) {
        auto it = cache.find(sg.g.node_ids[static_cast<size_t>(v)]);
        if (it != cache.end()) scores[static_cast<size_t>(v)] = it->second;
      }
      // Training triggers restaged at serve time keep their fit scores (they
      // sit at known positions of the fit graph); fresh triggers are scored
      // inside the fit context so the frozen threshold stays meaningful.
      int fit_rows_total = 0;
      for (const auto& at : sg.attachments)
        if (at.from_fit) fit_rows_total += at.rows;
      const int fit_base = od->fit_graph.num_nodes() - fit_rows_total;
      DPGBA_CHECK(fit_base >= 0, "apply_serving_defense: fit graph too small");
      std::vector<std::vector<int64_t>> nbr_ids(static_cast<size_t>(n));
      std::vector<char> fresh_owner(static_cast<size_t>(n), 0);
      for (const auto& at : sg.attachments)
        if (!at.from_fit) fresh_owner[static_cast<size_t>(at.owner_pos)] = 1;
      for (const auto& e : sg.g.edges) {
        if (e.first < sg.original_rows && fresh_owner[static_cast<size_t>(e.second)])
          nbr_ids[static_cast<size_t>(e.second)].push_back(
              sg.g.node_ids[static_cast<size_t>(e.first)]);
        if (e.second < sg.original_rows && fresh_owner[static_cast<size_t>(e.first)])
          nbr_ids[static_cast<size_t>(e.first)].push_back(
              sg.g.node_ids[static_cast<size_t>(e.second)]);
      }
      for (const auto& at : sg.attachments) {
        if (at.from_fit) {
          for (int j = 0; j < at.rows; ++j)
            scores[static_cast<size_t>(at.first_row + j)] =
                od->fit_scores[static_cast<size_t>(fit_base + at.fit_offset + j)];
        } else {
          std::vector<double> sc = od->score_attachment(
              sg.g.features.row(at.owner_pos),
              nbr_ids[static_cast<size_t>(at.owner_pos)], at.trigger);
          for (int j = 0; j < at.rows; ++j)
            scores[static_cast<size_t>(at.first_row + j)] = sc[static_cast<size_t>(j)];
        }
      }
      std::vector<int> keep;
      for (int v = 0; v < sg.g.num_nodes(); ++v)
        if (scores[static_cast<size_t>(v)] <= od->threshold ||
            std::binary_search(sg.protected_nodes.begin(),
                               sg.protected_nodes.end(), v))
          keep.push_back(v);
      Subgraph sub = induced_subgraph(sg.g, keep);
      std::fill(dg.pos_of.begin(), dg.pos_of.end(), -1);
      for (size_t i = 0; i < keep.size(); ++i)
        dg.pos_of[static_cast<size_t>(keep[i])] = static_cast<int>(i);
      dg.g = std::move(sub.graph);
      return dg;
    }
  }
  throw std::invalid_argument("apply_serving_defense: bad defense kind");
}

struct AsrResult {
  double asr = std::numeric_limits<double>::quiet_NaN();
  bool defined = false;
  int hits = 0;
  int evaluated = 0;
  int excluded = 0;
};

struct CleanAccResult {
  double acc = 0.0;
  int correct = 0;
  int evaluated = 0;
};

struct EvalReport {
  AsrResult asr;
  CleanAccResult clean;
};

// One defended forward pass over the serving graph scores both metrics: ASR
// over targets (those already of the target class leave the denominator) and
// accuracy over the clean test nodes, read against the original labels.
inline EvalReport evaluate_attack(const Victim& victim,
                                  const AttackArtifacts& art,
                                  const Graph& full,
                                  const std::vector<int>& owners_full,
                                  const std::vector<int>& targets,
                                  const std::vector<int>& clean_test,
                                  int target_class, const DefenseSpec& ds,
                                  const OdModel* od = nullptr) {
  DPGBA_CHECK(!targets.empty() || !clean_test.empty(),
              "evaluate_attack: nothing to evaluate");
  ServingGraph sg =
      build_serving_graph(full, art, owners_full, targets, clean_test,
                          target_class);
  DefendedGraph dg = apply_serving_defense(sg, ds, od);
  std::vector<int> pred = victim.predict(dg.g);
  auto pred_at = [&](int v) {
    int p = dg.pos_of[static_cast<size_t>(v)];
    DPGBA_CHECK(p >= 0, "evaluate_attack: query node pruned");
    return pred[static_cast<size_t>(p)];
  };

  EvalReport rep;
  for (int v : targets) {
    if (full.labels[static_cast<size_t>(v)] == target_class) {
      ++rep.asr.excluded;
      continue;
    }
    ++rep.asr.evaluated;
    rep.asr.hits += pred_at(v) == target_class;
  }
  if (rep.asr.evaluated > 0) {
    rep.asr.defined = true;
    rep.asr.asr = static_cast<double>(rep.asr.hits) / rep.asr.evaluated;
  }
  for (int v : clean_test) {
    ++rep.clean.evaluated;
    rep.clean.correct += pred_at(v) == full.labels[static_cast<size_t>(v)];
  }
  if (rep.clean.evaluated > 0)
    rep.clean.acc =
        static_cast<double>(rep.clean.correct) / rep.clean.evaluated;
  return rep;
}

inline AsrResult compute_asr(const Victim& victim, const AttackArtifacts& art,
                             const Graph& full,
                             const std::vector<int>& owners_full,
                             const std::vector<int>& targets, int target_class,
                             const DefenseSpec& ds,
                             const OdModel* od = nullptr) {
  DPGBA_CHECK(!targets.empty(), "compute_asr: empty target set");
  return evaluate_attack(victim, art, full, owners_full, targets, {},
                         target_class, ds, od)
      .asr;
}

// Accuracy on clean test nodes over a trigger-free serving graph (the clean
// baseline; attacked runs read clean accuracy off evaluate_attack instead).
inline CleanAccResult compute_clean_accuracy(const Victim& victim,
                                             const Graph& full,
                                             const std::vector<int>& clean_test,
                                             const DefenseSpec& ds,
                                             const OdModel* od = nullptr) {
  DPGBA_CHECK(!clean_test.empty(), "compute_clean_accuracy: empty test set");
  ServingGraph sg;
  sg.g = full;
  std::vector<int> sorted = clean_test;
  std::sort(sorted.begin(), sorted.end());
  sg.protected_nodes = std::move(sorted);
  DefendedGraph dg = apply_serving_defense(sg, ds, od);
  std::vector<int> pred = victim.predict(dg.g);
  CleanAccResult r;
  for (int v : clean_test) {
    int p = dg.pos_of[static_cast<size_t>(v)];
    DPGBA_CHECK(p >= 0, "compute_clean_accuracy: query node pruned");
    ++r.evaluated;
    r.correct += pred[static_cast<size_t>(p)] ==
                 full.labels[static_cast<size_t>(v)];
  }
  r.acc = static_cast<double>(r.correct) / r.evaluated;
  return r;
}

struct ExperimentConfig {
  AttackConfig attack;
  AttackKind kind = AttackKind::dpgba;
  SbaConfig sba;
  DefenseSpec defense;
  VictimArch arch = VictimArch::gcn;
  VictimConfig victim;
  OdParams od_params;
};

struct CellResult {
  uint64_t seed = 0;
  AsrResult asr;
  CleanAccResult clean;
  double trigger_mean_score = std::numeric_limits<double>::quiet_NaN();
  double od_clean_mu = std::numeric_limits<double>::quiet_NaN();
  double od_clean_delta = std::numeric_limits<double>::quiet_NaN();
  double od_threshold = std::numeric_limits<double>::quiet_NaN();
};

// The inductive training graph: the full graph minus every held-out node
// (attack targets and clean test), with the supervision sets remapped.
struct InductiveSetup {
  Subgraph train;
  SplitSpec train_split;
};

inline InductiveSetup make_inductive_setup(const Graph& full,
                                           const SplitSpec& split) {
  DPGBA_CHECK(!split.attack_targets.empty() && !split.clean_test.empty(),
              "make_inductive_setup: split lacks held-out nodes");
  std::vector<int> held =
      detail::sorted_union(split.attack_targets, split.clean_test);
  std::vector<int> keep;
  keep.reserve(static_cast<size_t>(full.num_nodes()) - held.size());
  size_t hi = 0;
  for (int v = 0; v < full.num_nodes(); ++v) {
    if (hi < held.size() && held[hi] == v)
      ++hi;
    else
      keep.push_back(v);
  }
  InductiveSetup s;
  s.train = induced_subgraph(full, keep);
  s.train_split.labeled = remap_into(split.labeled, s.train.orig);
  s.train_split.unlabeled = remap_into(split.unlabeled, s.train.orig);
  s.train_split.validation = remap_into(split.validation, s.train.orig);
  return s;
}

// One (attack, defense, architecture, seed) cell of the experiment matrix:
// train the attack on the inductive training graph, poison it, fit and apply
// the defense, train the victim, then answer every held-out query in one
// defended pass over the serving graph. `shared` short-circuits attack
// training when the caller already ran it for this (kind, seed).
inline CellResult run_single_experiment(const Graph& full,
                                        const SplitSpec& split,
                                        const ExperimentConfig& ec,
                                        uint64_t seed,
                                        const AttackArtifacts* shared = nullptr) {
  InductiveSetup setup = make_inductive_setup(full, split);
  Subgraph& tr = setup.train;

  AttackConfig acfg = ec.attack;
  acfg.seed = seed;
  AttackArtifacts local;
  const AttackArtifacts* art = shared;
  if (art == nullptr) {
    local = run_attack(tr.graph, setup.train_split, acfg, ec.kind, ec.sba);
    art = &local;
  }

  Graph poisoned = attach_triggers(tr.graph, art->plan);
  Graph victim_graph;
  std::vector<int> poisoned_to_victim(
      static_cast<size_t>(poisoned.num_nodes()));
  CellResult cell;
  cell.seed = seed;
  OdModel od;
  bool have_od = ec.defense.kind == DefenseSpec::Kind::od;
  if (have_od) {
    od = fit_od(poisoned, ec.defense.q, seed, ec.od_params);
    ScoreReport rep = trigger_score_report(od, poisoned, art->plan);
    cell.trigger_mean_score = rep.trigger_mean;
    cell.od_clean_mu = rep.clean_mu;
    cell.od_clean_delta = rep.clean_delta;
    cell.od_threshold = rep.threshold;
    PruneResult pr = prune_outliers(poisoned, od);
    victim_graph = std::move(pr.graph);
    std::fill(poisoned_to_victim.begin(), poisoned_to_victim.end(), -1);
    for (size_t i = 0; i < pr.kept.size(); ++i)
      poisoned_to_victim[static_cast<size_t>(pr.kept[i])] =
          static_cast<int>(i);
  } else {
    victim_graph = ec.defense.kind == DefenseSpec::Kind::prune
                       ? prune_dissimilar_edges(poisoned, ec.defense.drop_fraction)
                       : poisoned;
    std::iota(poisoned_to_victim.begin(), poisoned_to_victim.end(), 0);
  }

  auto map_positions = [&](const std::vector<int>& src) {
    std::vector<int> out;
    for (int v : src) {
      int p = poisoned_to_victim[static_cast<size_t>(v)];
      if (p >= 0) out.push_back(p);
    }
    std::sort(out.begin(), out.end());
    return out;
  };
  std::vector<int> train_nodes = map_positions(
      detail::sorted_union(setup.train_split.labeled, art->plan.poisoned_nodes));
  std::vector<int> val_nodes = map_positions(setup.train_split.validation);
  Victim victim =
      train_victim(victim_graph, train_nodes, val_nodes, ec.arch, seed,
                   ec.victim);

  std::vector<int> owners_full;
  owners_full.reserve(art->plan.poisoned_nodes.size());
  for (int v : art->plan.poisoned_nodes)
    owners_full.push_back(tr.orig[static_cast<size_t>(v)]);
  EvalReport rep = evaluate_attack(victim, *art, full, owners_full,
                                   split.attack_targets, split.clean_test,
                                   acfg.target_class, ec.defense,
                                   have_od ? &od : nullptr);
  cell.clean = rep.clean;
  cell.asr = rep.asr;
  return cell;
}

}  // namespace dpgba
