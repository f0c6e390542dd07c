#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dpgba/attack.hpp"

namespace dpgba {

enum class SbaMode { sample_features, gaussian_features };

struct SbaConfig {
  int trigger_size = 3;
  double er_edge_prob = 0.5;
  SbaMode mode = SbaMode::sample_features;
  uint64_t seed = 0;
};

// One static trigger shared by every poisoned node: Erdos-Renyi internal
// edges, features either copied from random graph rows or drawn per
// dimension from a Gaussian matching the graph's column mean and std.
inline Trigger sba_trigger(const Graph& g, const SbaConfig& cfg) {
  DPGBA_CHECK(cfg.trigger_size >= 1, "sba_trigger: trigger_size must be >= 1");
  DPGBA_CHECK(cfg.er_edge_prob >= 0.0 && cfg.er_edge_prob <= 1.0,
              "sba_trigger: er_edge_prob must lie in [0,1]");
  DPGBA_CHECK(g.num_nodes() > 0, "sba_trigger: empty graph");
  const int s = cfg.trigger_size;
  const int d = g.num_features();
  Rng rng(mix_seed(cfg.seed, 21));

  Trigger tr;
  tr.features = Mat(s, d);
  if (cfg.mode == SbaMode::sample_features) {
    std::uniform_int_distribution<int> pick(0, g.num_nodes() - 1);
    for (int i = 0; i < s; ++i) tr.features.row(i) = g.features.row(pick(rng));
  } else {
    const double n = static_cast<double>(g.num_nodes());
    Eigen::RowVectorXd mean = g.features.colwise().mean();
    Eigen::RowVectorXd var =
        (g.features.rowwise() - mean).array().square().colwise().sum() / n;
    std::normal_distribution<double> unit(0.0, 1.0);
    for (int i = 0; i < s; ++i)
      for (int j = 0; j < d; ++j)
        tr.features(i, j) = mean(j) + std::sqrt(var(j)) * unit(rng);
  }

  tr.intra_adj = Mat::Zero(s, s);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int p = 0; p < s; ++p)
    for (int q = p + 1; q < s; ++q)
      if (u(rng) < cfg.er_edge_prob) {
        tr.intra_adj(p, q) = 1.0;
        tr.intra_adj(q, p) = 1.0;
      }
  tr.anchor = 0;
  tr.check_valid(d);
  return tr;
}

inline PoisonPlan make_static_plan(int target_class,
                                   const std::vector<int>& nodes,
                                   const Trigger& trigger) {
  std::vector<Trigger> triggers(nodes.size(), trigger);
  return make_poison_plan(target_class, nodes, std::move(triggers));
}

enum class AttackKind { sba_samp, sba_gen, gta_style, ugba_style, dpgba };

inline const char* to_string(AttackKind k) {
  switch (k) {
    case AttackKind::sba_samp: return "sba_samp";
    case AttackKind::sba_gen: return "sba_gen";
    case AttackKind::gta_style: return "gta_style";
    case AttackKind::ugba_style: return "ugba_style";
    case AttackKind::dpgba: return "dpgba";
  }
  throw std::invalid_argument("to_string: bad AttackKind");
}

inline AttackKind attack_kind_from_string(const std::string& name) {
  for (AttackKind k : {AttackKind::sba_samp, AttackKind::sba_gen,
                       AttackKind::gta_style, AttackKind::ugba_style,
                       AttackKind::dpgba})
    if (name == to_string(k)) return k;
  throw std::invalid_argument("attack_kind_from_string: unknown kind '" +
                              name + "'");
}

// Degenerate configurations of the shared trainer. gta_style keeps only the
// backdoor term with uniform node weights; ugba_style swaps the distribution
// term for the anchor-cosine constraint.
inline AttackConfig apply_attack_kind(AttackConfig cfg, AttackKind kind) {
  switch (kind) {
    case AttackKind::gta_style:
      cfg.alpha = 0.0;
      cfg.beta = 0.0;
      cfg.uniform_weights = true;
      cfg.cosine_constraint = 0.0;
      break;
    case AttackKind::ugba_style:
      cfg.alpha = 0.0;
      cfg.beta = 0.0;
      cfg.uniform_weights = true;
      if (cfg.cosine_constraint <= 0.0) cfg.cosine_constraint = 1.0;
      break;
    default:
      break;
  }
  return cfg;
}

// Everything downstream evaluation needs from a trained attack: the training
// poison plan plus a way to build inference-time triggers for unseen nodes.
struct AttackArtifacts {
  AttackKind kind = AttackKind::dpgba;
  PoisonPlan plan;
  TrainTrace trace;
  std::shared_ptr<const TriggerGenerator> generator;
  Trigger static_trigger;
  std::vector<int> representative;

  std::vector<Trigger> make_triggers(const Mat& x) const {
    if (generator) return generator->generate(x);
    DPGBA_CHECK(static_trigger.features.size() > 0,
                "make_triggers: artifacts carry no trigger source");
    return std::vector<Trigger>(static_cast<size_t>(x.rows()),
                                static_trigger);
  }
};

inline AttackArtifacts run_attack(const Graph& g, const SplitSpec& split,
                                  const AttackConfig& base, AttackKind kind,
                                  const SbaConfig& sba = {}) {
  AttackArtifacts out;
  out.kind = kind;
  if (kind == AttackKind::sba_samp || kind == AttackKind::sba_gen) {
    SbaConfig sc = sba;
    sc.trigger_size = base.trigger_size;
    sc.seed = base.seed;
    sc.mode = kind == AttackKind::sba_samp ? SbaMode::sample_features
                                           : SbaMode::gaussian_features;
    out.static_trigger = sba_trigger(g, sc);
    std::vector<int> nodes =
        select_poisoned_nodes(split, base.poison_budget, base.seed);
    out.plan = make_static_plan(base.target_class, nodes, out.static_trigger);
    return out;
  }
  AttackResult res = train_dpgba(g, split, apply_attack_kind(base, kind));
  out.plan = std::move(res.plan);
  out.trace = std::move(res.trace);
  out.representative = std::move(res.representative);
  out.generator =
      std::make_shared<const TriggerGenerator>(std::move(res.generator));
  return out;
}

}  // namespace dpgba
