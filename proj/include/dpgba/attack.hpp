#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpgba/graph.hpp"
#include "dpgba/io.hpp"
#include "dpgba/models.hpp"
#include "dpgba/tape.hpp"

namespace dpgba {

struct AttackConfig {
  int target_class = 0;
  int trigger_size = 3;
  int poison_budget = 0;
  double alpha = 1.0;  // distribution constraint weight
  double beta = 1.0;   // attack enhancement weight
  int inner_surrogate_steps = 1;
  int inner_detector_steps = 20;
  int outer_epochs = 200;
  int batch_size = 0;  // 0 -> min(4096, |unlabeled|)
  double gamma = 1.0;  // representative-node margin
  double lr_surrogate = 0.01;
  double lr_detector = 0.01;
  double lr_generator = 0.01;
  uint64_t seed = 0;

  int surrogate_hidden = 256;
  int detector_hidden = 256;
  int generator_hidden = 256;

  // representative-node autoencoder (pretrained on the clean graph)
  int ae_hidden = 64;
  int ae_embed = 32;
  int ae_epochs = 100;
  double ae_lr = 0.01;

  double temperature = 0.5;  // contrastive temperature in the enhance loss

  // early stop when the attack loss improves by less than tol over patience
  // consecutive epochs; patience 0 disables
  int early_stop_patience = 20;
  double early_stop_tol = 1e-4;

  // variant switches: uniform_weights drops the exp(-p_t) difficulty
  // weighting; cosine_constraint > 0 adds a trigger/owner feature-similarity
  // penalty with that weight (used by the constraint-based baseline)
  bool uniform_weights = false;
  double cosine_constraint = 0.0;

  void validate(int num_classes, int unlabeled_count) const {
    DPGBA_CHECK(target_class >= 0 && target_class < num_classes,
                "attack config: target class out of range");
    DPGBA_CHECK(trigger_size >= 2, "attack config: trigger_size must be >= 2");
    DPGBA_CHECK(poison_budget > 0 && poison_budget <= unlabeled_count,
                "attack config: poison budget outside the unlabeled pool");
    DPGBA_CHECK(alpha >= 0.0 && beta >= 0.0,
                "attack config: loss weights must be nonnegative");
    DPGBA_CHECK(inner_surrogate_steps > 0 && inner_detector_steps > 0 &&
                    outer_epochs > 0,
                "attack config: step counts must be positive");
    DPGBA_CHECK(batch_size >= 0, "attack config: bad batch size");
    DPGBA_CHECK(cosine_constraint >= 0.0,
                "attack config: cosine constraint weight must be nonnegative");
  }
};

struct TrainTrace {
  std::vector<double> l_s, l_t, l_d, l_e, total;
  std::vector<double> mean_p_t;  // over the poisoned nodes, per epoch
  Mat final_p_t;                 // per poisoned node after the last epoch

  size_t epochs() const { return total.size(); }
};

struct TrainAborted : std::runtime_error {
  TrainTrace trace;
  TrainAborted(const std::string& what, TrainTrace tr)
      : std::runtime_error(what), trace(std::move(tr)) {}
};

inline void write_trace_csv(const TrainTrace& tr, const std::string& path) {
  std::vector<std::vector<std::string>> rows;
  for (size_t e = 0; e < tr.epochs(); ++e)
    rows.push_back({std::to_string(e), format_double(tr.l_s[e]),
                    format_double(tr.l_t[e]), format_double(tr.l_d[e]),
                    format_double(tr.l_e[e]), format_double(tr.total[e])});
  write_csv(path, {"epoch", "L_s", "L_T", "L_D", "L_E", "L"}, rows);
}

// ---------------------------------------------------------------------------
// node selection

inline std::vector<int> select_poisoned_nodes(const SplitSpec& split,
                                              int budget, uint64_t seed) {
  DPGBA_CHECK(budget > 0, "select_poisoned_nodes: empty budget");
  DPGBA_CHECK(budget <= static_cast<int>(split.unlabeled.size()),
              "select_poisoned_nodes: budget exceeds the unlabeled pool");
  std::vector<int> pool = split.unlabeled;
  Rng rng(mix_seed(seed, 4));
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(budget);
  std::sort(pool.begin(), pool.end());
  return pool;
}

// Nodes whose outlier score stays under mean + gamma * std (population std).
inline std::vector<int> select_representative_nodes(const Mat& scores,
                                                    double gamma) {
  DPGBA_CHECK(scores.cols() == 1 && scores.rows() > 0,
              "select_representative_nodes: bad score vector");
  int n = static_cast<int>(scores.rows());
  double mu = scores.col(0).mean();
  double var = (scores.col(0).array() - mu).square().sum() / n;
  double thresh = mu + gamma * std::sqrt(var);
  std::vector<int> out;
  for (int i = 0; i < n; ++i)
    if (scores(i, 0) < thresh) out.push_back(i);
  DPGBA_CHECK(!out.empty(),
              "select_representative_nodes: no node under the threshold, "
              "increase gamma");
  return out;
}

inline std::vector<int> select_representative_nodes(
    const Graph& g, const ReconAutoencoder& ae, double gamma) {
  return select_representative_nodes(ae.scores(g), gamma);
}

// ---------------------------------------------------------------------------
// losses; each takes logits already produced by a model forward so the same
// code runs on materialized graphs and on the differentiable attachment path

inline std::vector<int> labels_of(const std::vector<int>& rows,
                                  const std::vector<int>& labels) {
  std::vector<int> out(rows.size());
  for (size_t i = 0; i < rows.size(); ++i) out[i] = labels[rows[i]];
  return out;
}

// supervised loss on labeled nodes plus target-class loss on poisoned nodes
inline Expr loss_surrogate(Expr logits, const std::vector<int>& labeled,
                           const std::vector<int>& node_labels,
                           const std::vector<int>& poisoned, int target_class) {
  Expr clean = softmax_cross_entropy(row_gather(logits, labeled),
                                     labels_of(labeled, node_labels));
  if (poisoned.empty()) return clean;
  Expr bd = softmax_cross_entropy(
      row_gather(logits, poisoned),
      std::vector<int>(poisoned.size(), target_class));
  return add(clean, bd);
}

// exp(-p_t) difficulty weights and the target-class probabilities they come
// from; computed outside the tape so no gradient flows through the weights
struct AttackWeights {
  Mat w;    // b x 1
  Mat p_t;  // b x 1
};

inline AttackWeights attack_weights(const Mat& logit_values,
                                    const std::vector<int>& rows,
                                    int target_class) {
  Mat sub(rows.size(), logit_values.cols());
  for (size_t i = 0; i < rows.size(); ++i) sub.row(i) = logit_values.row(rows[i]);
  Mat probs = softmax_rows(sub);
  AttackWeights aw;
  aw.p_t = probs.col(target_class);
  aw.w = (-aw.p_t.array()).exp().matrix();
  return aw;
}

inline Expr loss_attack_weighted(Expr logits, const std::vector<int>& batch,
                                 int target_class, const Mat& weights) {
  DPGBA_CHECK(weights.rows() == static_cast<int>(batch.size()) &&
                  weights.cols() == 1,
              "loss_attack_weighted: weight shape mismatch");
  Expr ce = softmax_cross_entropy_rows(
      row_gather(logits, batch),
      std::vector<int>(batch.size(), target_class));
  return mean_all(hadamard_const(ce, weights));
}

// sum log f_d over representative nodes plus sum log(1 - f_d) over trigger
// nodes; the detector ascends this, the generator descends it
inline Expr loss_distribution(Expr detector_logits,
                              const std::vector<int>& representative,
                              const std::vector<int>& trigger_rows) {
  DPGBA_CHECK(!representative.empty() && !trigger_rows.empty(),
              "loss_distribution: empty node set");
  Expr real = sum(logsigmoid(row_gather(detector_logits, representative)));
  Expr fake = sum(logsigmoid(neg(row_gather(detector_logits, trigger_rows))));
  return add(real, fake);
}

// term 1: negated mean cosine similarity over ordered distinct pairs of
// poisoned-node embeddings. term 2: contrastive pull toward target-class
// embeddings against the rest of the labeled set, kappa = exp(S / tau).
inline Expr loss_enhance(Expr embeddings, const std::vector<int>& batch,
                         const std::vector<int>& target_rows,
                         const std::vector<int>& other_labeled_rows,
                         double tau) {
  Tape& t = *embeddings.tape;
  DPGBA_CHECK(!target_rows.empty(),
              "loss_enhance: no labeled node carries the target class");
  DPGBA_CHECK(!other_labeled_rows.empty(),
              "loss_enhance: no labeled node outside the target class");
  int b = static_cast<int>(batch.size());
  Expr zb = row_gather(embeddings, batch);

  Expr term1 = t.constant(Mat::Zero(1, 1));
  if (b >= 2) {
    Mat mask = Mat::Ones(b, b);
    mask.diagonal().setZero();
    Expr sims = hadamard_const(pairwise_cosine(zb, zb), mask);
    term1 = scale(sum(sims), -1.0 / (static_cast<double>(b) * (b - 1)));
  }

  Expr kt = exp(scale(pairwise_cosine(zb, row_gather(embeddings, target_rows)),
                      1.0 / tau));
  Expr kn = exp(
      scale(pairwise_cosine(zb, row_gather(embeddings, other_labeled_rows)),
            1.0 / tau));
  Expr denom = row_sum(kn);
  Expr term2 = mean_all(sub(log(add_colvec(kt, denom)), log(kt)));
  return add(term1, term2);
}

// mean over poisoned nodes of (1 - cos) between the generated trigger's
// anchor feature row and the features of the node it hangs off
inline Expr cosine_constraint_loss(Expr trigger_features,
                                   const Mat& owner_features,
                                   int trigger_size) {
  Tape& t = *trigger_features.tape;
  int b = static_cast<int>(owner_features.rows());
  int s = trigger_size;
  DPGBA_CHECK(trigger_features.rows() == b * s,
              "cosine_constraint_loss: row mismatch");
  Expr sims =
      pairwise_cosine(trigger_features, t.constant(owner_features));
  Mat mask = Mat::Zero(b * s, b);
  for (int i = 0; i < b; ++i) mask(i * s, i) = 1.0;  // anchor is local row 0
  Expr mean_sim = scale(sum(hadamard_const(sims, mask)), 1.0 / b);
  return sub(t.constant(Mat::Ones(1, 1)), mean_sim);
}

// ---------------------------------------------------------------------------
// inner loops

// K ascent steps on the distribution loss over a fixed poisoned graph;
// returns the loss value observed at the last step's forward.
inline double detector_ascent(OodDetector& det, const SparseMat& adj,
                              const SparseMat& x_csr,
                              const std::vector<int>& representative,
                              const std::vector<int>& trigger_rows, int steps,
                              double lr) {
  AdamConfig cfg;
  cfg.lr = lr;
  double last = 0.0;
  for (int k = 0; k < steps; ++k) {
    Tape t;
    Expr xw1 = spmm(x_csr, det.core.weight1(t, false));
    Expr logits = det.logit_from_xw1(t, adj, xw1, false);
    Expr ld = loss_distribution(logits, representative, trigger_rows);
    Expr obj = neg(ld);  // ascend L_D
    det.core.params.zero_grad();
    t.backward(obj);
    adam_step(det.core.params, cfg);
    last = ld.val()(0, 0);
  }
  return last;
}

// ---------------------------------------------------------------------------
// the bi-level loop

struct AttackResult {
  PoisonPlan plan;
  TriggerGenerator generator;
  Gcn surrogate;
  OodDetector detector;
  std::vector<int> representative;
  TrainTrace trace;
};

namespace detail {

inline Mat rows_of(const Mat& x, const std::vector<int>& rows) {
  Mat out(rows.size(), x.cols());
  for (size_t i = 0; i < rows.size(); ++i) out.row(i) = x.row(rows[i]);
  return out;
}

inline std::vector<int> sample_without_replacement(const std::vector<int>& pool,
                                                   int count, Rng& rng) {
  std::vector<int> p = pool;
  std::shuffle(p.begin(), p.end(), rng);
  p.resize(std::min<size_t>(count, p.size()));
  std::sort(p.begin(), p.end());
  return p;
}

inline std::vector<int> sorted_union(const std::vector<int>& a,
                                     const std::vector<int>& b) {
  std::vector<int> u;
  u.reserve(a.size() + b.size());
  std::set_union(a.begin(), a.end(), b.begin(), b.end(),
                 std::back_inserter(u));
  return u;
}

}  // namespace detail

inline AttackResult train_dpgba(const Graph& g, const SplitSpec& split,
                                const AttackConfig& cfg) {
  g.check_consistent();
  int n = g.num_nodes();
  int d = g.num_features();
  int c = g.num_classes();
  int s = cfg.trigger_size;
  cfg.validate(c, static_cast<int>(split.unlabeled.size()));

  std::vector<int> target_rows, other_labeled_rows;
  for (int v : split.labeled)
    (g.labels[v] == cfg.target_class ? target_rows : other_labeled_rows)
        .push_back(v);
  if (cfg.beta > 0.0) {
    DPGBA_CHECK(!target_rows.empty(),
                "train_dpgba: enhance loss needs labeled target-class nodes");
    DPGBA_CHECK(!other_labeled_rows.empty(),
                "train_dpgba: enhance loss needs labeled non-target nodes");
  }

  AttackResult res;
  res.generator = TriggerGenerator::init(d, cfg.generator_hidden, s,
                                         mix_seed(cfg.seed, 31));
  res.surrogate =
      Gcn::init(d, cfg.surrogate_hidden, c, mix_seed(cfg.seed, 32));
  res.detector =
      OodDetector::init(d, cfg.detector_hidden, mix_seed(cfg.seed, 33));

  if (cfg.alpha > 0.0) {
    ReconAutoencoder ae = ReconAutoencoder::init(d, cfg.ae_hidden, cfg.ae_embed,
                                                 mix_seed(cfg.seed, 34));
    ae.fit(g, cfg.ae_epochs, cfg.ae_lr);
    res.representative = select_representative_nodes(g, ae, cfg.gamma);
  }

  std::vector<int> poisoned =
      select_poisoned_nodes(split, cfg.poison_budget, cfg.seed);

  SparseMat x_csr = SparseMat::from_dense(g.features);
  AdamConfig sur_cfg, gen_cfg;
  sur_cfg.lr = cfg.lr_surrogate;
  gen_cfg.lr = cfg.lr_generator;

  int batch = cfg.batch_size > 0 ? cfg.batch_size : 4096;
  batch = std::min<int>(batch, static_cast<int>(split.unlabeled.size()));

  TrainTrace& tr = res.trace;
  double best_lt = std::numeric_limits<double>::infinity();
  int stale = 0;

  for (int epoch = 0; epoch < cfg.outer_epochs; ++epoch) {
    Rng erng(mix_seed(cfg.seed, 1000 + static_cast<uint64_t>(epoch)));
    std::vector<int> working = detail::sorted_union(
        poisoned,
        detail::sample_without_replacement(split.unlabeled, batch, erng));

    // (a) surrogate descent on the graph poisoned at the current generator
    double l_s = 0.0;
    {
      PoisonPlan plan = make_poison_plan(
          cfg.target_class, poisoned,
          res.generator.generate(detail::rows_of(g.features, poisoned)));
      Graph pois = attach_triggers(g, plan);
      SparseMat adj = normalize_adjacency(pois);
      SparseMat px_csr = SparseMat::from_dense(pois.features);
      for (int i = 0; i < cfg.inner_surrogate_steps; ++i) {
        Tape t;
        Expr xw1 = spmm(px_csr, res.surrogate.weight1(t, false));
        Expr logits = res.surrogate.logits_from_xw1(t, adj, xw1, false);
        Expr ls = loss_surrogate(logits, split.labeled, g.labels, poisoned,
                                 cfg.target_class);
        res.surrogate.params.zero_grad();
        t.backward(ls);
        adam_step(res.surrogate.params, sur_cfg);
        l_s = ls.val()(0, 0);
      }
    }

    // (b) detector ascent against the current triggers on the working set
    std::vector<int> trigger_rows(working.size() * s);
    for (size_t i = 0; i < trigger_rows.size(); ++i)
      trigger_rows[i] = n + static_cast<int>(i);
    if (cfg.alpha > 0.0) {
      PoisonPlan plan = make_poison_plan(
          cfg.target_class, working,
          res.generator.generate(detail::rows_of(g.features, working)));
      Graph pois = attach_triggers(g, plan);
      detector_ascent(res.detector, normalize_adjacency(pois),
                      SparseMat::from_dense(pois.features),
                      res.representative, trigger_rows,
                      cfg.inner_detector_steps, cfg.lr_detector);
    }

    // (c) one generator step through the differentiable attachment
    Mat x_working = detail::rows_of(g.features, working);
    auto pg = attach_prop_graph(g, working, s);
    Tape t;
    auto gen_out = res.generator.forward(t, t.constant(x_working),
                                         /*hard=*/true, /*frozen=*/false);
    Expr sur_w1 = res.surrogate.weight1(t, true);
    Expr xw1 =
        vconcat({spmm(x_csr, sur_w1), matmul(gen_out.features, sur_w1)});
    Expr logits = res.surrogate.logits_from_xw1(t, pg, gen_out.edge_weights,
                                                xw1, true);

    AttackWeights aw =
        attack_weights(logits.val(), working, cfg.target_class);
    Mat weights =
        cfg.uniform_weights ? Mat::Ones(working.size(), 1) : aw.w;
    Expr l_t =
        loss_attack_weighted(logits, working, cfg.target_class, weights);

    Expr total = l_t;
    double l_d_val = 0.0, l_e_val = 0.0;
    if (cfg.alpha > 0.0) {
      Expr det_w1 = res.detector.core.weight1(t, true);
      Expr xw1_d =
          vconcat({spmm(x_csr, det_w1), matmul(gen_out.features, det_w1)});
      Expr det_logits = res.detector.logit_from_xw1(
          t, pg, gen_out.edge_weights, xw1_d, true);
      Expr l_d = loss_distribution(det_logits, res.representative,
                                   trigger_rows);
      total = add(total, scale(l_d, cfg.alpha));
      l_d_val = l_d.val()(0, 0);
    }
    if (cfg.beta > 0.0) {
      Expr l_e = loss_enhance(logits, working, target_rows,
                              other_labeled_rows, cfg.temperature);
      total = add(total, scale(l_e, cfg.beta));
      l_e_val = l_e.val()(0, 0);
    }
    if (cfg.cosine_constraint > 0.0) {
      Expr l_c = cosine_constraint_loss(gen_out.features, x_working, s);
      total = add(total, scale(l_c, cfg.cosine_constraint));
    }
    res.generator.params.zero_grad();
    t.backward(total);
    adam_step(res.generator.params, gen_cfg);

    double l_t_val = l_t.val()(0, 0);
    double total_val = total.val()(0, 0);
    double mean_pt = 0.0;
    {
      size_t j = 0;
      for (int v : poisoned) {
        while (working[j] != v) ++j;  // poisoned is a subset of working
        mean_pt += aw.p_t(static_cast<int>(j), 0);
      }
      mean_pt /= static_cast<double>(poisoned.size());
    }
    tr.l_s.push_back(l_s);
    tr.l_t.push_back(l_t_val);
    tr.l_d.push_back(l_d_val);
    tr.l_e.push_back(l_e_val);
    tr.total.push_back(total_val);
    tr.mean_p_t.push_back(mean_pt);
    if (!std::isfinite(l_s) || !std::isfinite(total_val) ||
        !std::isfinite(l_t_val) || !std::isfinite(l_d_val) ||
        !std::isfinite(l_e_val))
      throw TrainAborted("train_dpgba: non-finite loss at epoch " +
                             std::to_string(epoch),
                         std::move(tr));

    if (cfg.early_stop_patience > 0) {
      if (l_t_val < best_lt - cfg.early_stop_tol) {
        best_lt = l_t_val;
        stale = 0;
      } else if (++stale >= cfg.early_stop_patience) {
        break;
      }
    }
  }

  res.plan = make_poison_plan(
      cfg.target_class, poisoned,
      res.generator.generate(detail::rows_of(g.features, poisoned)));
  {
    PoisonPlan probe = res.plan;
    Graph pois = attach_triggers(g, probe);
    Mat logits = res.surrogate.logits_plain(normalize_adjacency(pois),
                                            pois.features);
    res.trace.final_p_t =
        attack_weights(logits, poisoned, cfg.target_class).p_t;
  }
  return res;
}

}  // namespace dpgba
