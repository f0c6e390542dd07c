#pragma once

#include <memory>
#include <string>
#include <vector>

#include "dpgba/graph.hpp"
#include "dpgba/tape.hpp"

namespace dpgba {

inline Mat init_weight(int rows, int cols, Rng& rng) {
  return gaussian(rows, cols, 0.1, rng);
}

namespace detail {

// One leaf helper shared by every model: trainable when the caller is
// updating this model, frozen (no grad, value snapshot) when the model sits
// inside someone else's objective.
inline Expr leaf(Tape& t, ParamSet& ps, const std::string& name, bool frozen) {
  if (frozen) return t.frozen(static_cast<const ParamSet&>(ps).at(name));
  return t.param(ps.at(name));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// 2-layer graph convolution: P relu(P X W1) W2 where P is a normalized
// propagation operator. The operator is supplied per call, so the same
// weights run on a fixed graph (SparseMat) or through a differentiable
// attachment (PropGraph + edge weights).

struct Gcn {
  int in_dim = 0;
  int hidden_dim = 0;
  int out_dim = 0;
  ParamSet params;

  static Gcn init(int in_dim, int hidden_dim, int out_dim, uint64_t seed) {
    Gcn m;
    m.in_dim = in_dim;
    m.hidden_dim = hidden_dim;
    m.out_dim = out_dim;
    Rng rng(mix_seed(seed, 11));
    m.params.add("w1", init_weight(in_dim, hidden_dim, rng));
    m.params.add("w2", init_weight(hidden_dim, out_dim, rng));
    return m;
  }

  Expr weight1(Tape& t, bool frozen) {
    return detail::leaf(t, params, "w1", frozen);
  }
  Expr weight2(Tape& t, bool frozen) {
    return detail::leaf(t, params, "w2", frozen);
  }

  // xw1 = X W1 assembled by the caller; splitting it out keeps sparse node
  // features and generated trigger rows cheap on large graphs.
  Expr logits_from_xw1(Tape& t, const SparseMat& adj, Expr xw1, bool frozen) {
    Expr h = relu(spmm(adj, xw1));
    return spmm(adj, matmul(h, weight2(t, frozen)));
  }

  Expr logits_from_xw1(Tape& t, std::shared_ptr<const PropGraph> pg, Expr w,
                       Expr xw1, bool frozen) {
    Expr h = relu(graph_propagate(pg, w, xw1));
    return graph_propagate(pg, w, matmul(h, weight2(t, frozen)));
  }

  Expr logits(Tape& t, const SparseMat& adj, Expr x, bool frozen = false) {
    return logits_from_xw1(t, adj, matmul(x, weight1(t, frozen)), frozen);
  }

  Mat logits_plain(const SparseMat& adj, const Mat& x) const {
    Mat h = adj.apply(x * params.at("w1").value).cwiseMax(0.0);
    return adj.apply(h * params.at("w2").value);
  }

  Mat predict_probs(const SparseMat& adj, const Mat& x) const {
    return softmax_rows(logits_plain(adj, x));
  }

  std::vector<int> predict_labels(const SparseMat& adj, const Mat& x) const {
    Mat l = logits_plain(adj, x);
    std::vector<int> y(l.rows());
    for (int i = 0; i < l.rows(); ++i) y[i] = argmax_row(l, i);
    return y;
  }
};

// Binary in-distribution head: same body as Gcn with a single output column.
// Scores are sigmoid probabilities of being in-distribution.
struct OodDetector {
  Gcn core;

  static OodDetector init(int in_dim, int hidden_dim, uint64_t seed) {
    OodDetector d;
    d.core = Gcn::init(in_dim, hidden_dim, 1, mix_seed(seed, 12));
    return d;
  }

  Expr logit_from_xw1(Tape& t, std::shared_ptr<const PropGraph> pg, Expr w,
                      Expr xw1, bool frozen) {
    return core.logits_from_xw1(t, pg, w, xw1, frozen);
  }
  Expr logit_from_xw1(Tape& t, const SparseMat& adj, Expr xw1, bool frozen) {
    return core.logits_from_xw1(t, adj, xw1, frozen);
  }

  Mat scores_plain(const SparseMat& adj, const Mat& x) const {
    return sigmoid_val(core.logits_plain(adj, x));
  }
};

// ---------------------------------------------------------------------------
// trigger generator: shared MLP trunk, one head emitting the s node feature
// rows and one emitting intra-trigger edge logits.

struct TriggerGenerator {
  int in_dim = 0;
  int hidden_dim = 0;
  int trigger_size = 0;
  ParamSet params;

  static TriggerGenerator init(int in_dim, int hidden_dim, int trigger_size,
                               uint64_t seed) {
    DPGBA_CHECK(trigger_size >= 2, "trigger generator: size must be >= 2");
    TriggerGenerator g;
    g.in_dim = in_dim;
    g.hidden_dim = hidden_dim;
    g.trigger_size = trigger_size;
    Rng rng(mix_seed(seed, 13));
    g.params.add("m1", init_weight(in_dim, hidden_dim, rng));
    g.params.add("b1", Mat::Zero(1, hidden_dim));
    g.params.add("m2", init_weight(hidden_dim, hidden_dim, rng));
    g.params.add("b2", Mat::Zero(1, hidden_dim));
    g.params.add("wf", init_weight(hidden_dim, trigger_size * in_dim, rng));
    g.params.add("wa", init_weight(hidden_dim, trigger_size * trigger_size, rng));
    return g;
  }

  int num_pairs() const { return trigger_size * (trigger_size - 1) / 2; }

  struct Out {
    Expr features;      // (b*s) x d, rows of input i at [i*s, (i+1)*s)
    Expr edge_weights;  // (b * s(s-1)/2) x 1, grouped by input, pairs (p,q)
                        // with p < q in lexicographic order
  };

  // x: b x d rows of the nodes being poisoned. hard=true binarizes edge
  // weights with a straight-through backward; hard=false keeps the sigmoid
  // relaxation (used by gradient checks).
  Out forward(Tape& t, Expr x, bool hard, bool frozen = false) {
    auto L = [&](const char* n) { return detail::leaf(t, params, n, frozen); };
    Expr h1 = relu(add_rowvec(matmul(x, L("m1")), L("b1")));
    Expr h2 = relu(add_rowvec(matmul(h1, L("m2")), L("b2")));
    int b = x.rows();
    Expr feats =
        reshape_rowmajor(matmul(h2, L("wf")), b * trigger_size, in_dim);
    Expr ew = trigger_edge_weights(matmul(h2, L("wa")), trigger_size, hard);
    return {feats, ew};
  }

  // Hard forward without gradients, materialized as attachable triggers.
  std::vector<Trigger> generate(const Mat& x) const {
    Tape t;
    Out o = const_cast<TriggerGenerator*>(this)->forward(
        t, t.constant(x), /*hard=*/true, /*frozen=*/true);
    const Mat& f = o.features.val();
    const Mat& w = o.edge_weights.val();
    int s = trigger_size;
    int e = num_pairs();
    std::vector<Trigger> out(x.rows());
    for (int i = 0; i < x.rows(); ++i) {
      Trigger& tr = out[i];
      tr.features = f.middleRows(i * s, s);
      tr.intra_adj = Mat::Zero(s, s);
      int k = 0;
      for (int p = 0; p < s; ++p)
        for (int q = p + 1; q < s; ++q, ++k)
          tr.intra_adj(p, q) = tr.intra_adj(q, p) = w(i * e + k, 0);
      tr.anchor = 0;
    }
    return out;
  }
};

// Propagation structure for a graph with one generated trigger appended per
// poisoned node: trigger i occupies rows [n + i*s, n + (i+1)*s). Attachment
// edges (poisoned node -> trigger node 0) are constant; intra-trigger pairs
// are variable, ordered to match TriggerGenerator edge weights.
inline std::shared_ptr<const PropGraph> attach_prop_graph(
    const Graph& g, const std::vector<int>& poisoned, int trigger_size) {
  int n = g.num_nodes();
  int s = trigger_size;
  std::vector<std::pair<int, int>> ce = g.edges;
  std::vector<std::pair<int, int>> ve;
  for (size_t i = 0; i < poisoned.size(); ++i) {
    int base = n + static_cast<int>(i) * s;
    DPGBA_CHECK(poisoned[i] >= 0 && poisoned[i] < n,
                "attach_prop_graph: node outside graph");
    ce.emplace_back(poisoned[i], base);
    for (int p = 0; p < s; ++p)
      for (int q = p + 1; q < s; ++q) ve.emplace_back(base + p, base + q);
  }
  int total = n + static_cast<int>(poisoned.size()) * s;
  return std::make_shared<PropGraph>(PropGraph::build(total, ce, ve));
}

// ---------------------------------------------------------------------------
// reconstruction autoencoder for outlier scoring: GCN encoder, attribute
// decoder relu(Z Wd), structure decoder sigmoid(Z Z^T). A node's score is
// lambda * ||x_i - xhat_i|| + (1 - lambda) * ||a_i - ahat_i||.

struct ReconAutoencoder {
  int in_dim = 0;
  int hidden_dim = 0;
  int embed_dim = 0;
  double lambda = 0.5;
  ParamSet params;

  static ReconAutoencoder init(int in_dim, int hidden_dim, int embed_dim,
                               uint64_t seed) {
    ReconAutoencoder m;
    m.in_dim = in_dim;
    m.hidden_dim = hidden_dim;
    m.embed_dim = embed_dim;
    Rng rng(mix_seed(seed, 14));
    m.params.add("e1", init_weight(in_dim, hidden_dim, rng));
    m.params.add("e2", init_weight(hidden_dim, embed_dim, rng));
    m.params.add("dec", init_weight(embed_dim, in_dim, rng));
    return m;
  }

  Expr node_scores(Tape& t, const SparseMat& norm_adj, const SparseMat& bin_adj,
                   const Mat& x, bool frozen = false) {
    Expr xc = t.constant(x);
    Expr h = relu(spmm(norm_adj, matmul(xc, detail::leaf(t, params, "e1", frozen))));
    Expr z = spmm(norm_adj, matmul(h, detail::leaf(t, params, "e2", frozen)));
    Expr attr = attr_recon_rownorm(z, detail::leaf(t, params, "dec", frozen), x);
    Expr str = struct_recon_rownorm(z, bin_adj);
    return add(scale(attr, lambda), scale(str, 1.0 - lambda));
  }

  // Full-batch Adam on the mean score. Returns the loss trace.
  std::vector<double> fit(const Graph& g, int epochs, double lr) {
    SparseMat norm_adj = normalize_adjacency(g);
    SparseMat bin_adj = binary_adjacency(g);
    AdamConfig cfg;
    cfg.lr = lr;
    std::vector<double> trace;
    trace.reserve(epochs);
    for (int e = 0; e < epochs; ++e) {
      Tape t;
      Expr loss = mean_all(node_scores(t, norm_adj, bin_adj, g.features));
      trace.push_back(loss.val()(0, 0));
      params.zero_grad();
      t.backward(loss);
      adam_step(params, cfg);
    }
    return trace;
  }

  Mat scores(const Graph& g) const {
    SparseMat norm_adj = normalize_adjacency(g);
    SparseMat bin_adj = binary_adjacency(g);
    Tape t;
    auto* self = const_cast<ReconAutoencoder*>(this);
    return self->node_scores(t, norm_adj, bin_adj, g.features, /*frozen=*/true)
        .val();
  }
};

// ---------------------------------------------------------------------------
// mean-aggregation classifier: each layer concatenates a node's own
// representation with the mean of its neighbors. Used as a transfer victim.

struct SageClassifier {
  int in_dim = 0;
  int hidden_dim = 0;
  int out_dim = 0;
  ParamSet params;

  static SageClassifier init(int in_dim, int hidden_dim, int out_dim,
                             uint64_t seed) {
    SageClassifier m;
    m.in_dim = in_dim;
    m.hidden_dim = hidden_dim;
    m.out_dim = out_dim;
    Rng rng(mix_seed(seed, 15));
    m.params.add("w1", init_weight(2 * in_dim, hidden_dim, rng));
    m.params.add("w2", init_weight(2 * hidden_dim, out_dim, rng));
    return m;
  }

  Expr logits(Tape& t, const SparseMat& mean_adj, Expr x, bool frozen = false) {
    Expr h0 = hconcat(x, spmm(mean_adj, x));
    Expr h1 = relu(matmul(h0, detail::leaf(t, params, "w1", frozen)));
    Expr h2 = hconcat(h1, spmm(mean_adj, h1));
    return matmul(h2, detail::leaf(t, params, "w2", frozen));
  }

  Mat logits_plain(const SparseMat& mean_adj, const Mat& x) const {
    Mat h0(x.rows(), 2 * x.cols());
    h0 << x, mean_adj.apply(x);
    Mat h1 = (h0 * params.at("w1").value).cwiseMax(0.0);
    Mat h2(h1.rows(), 2 * h1.cols());
    h2 << h1, mean_adj.apply(h1);
    return h2 * params.at("w2").value;
  }

  std::vector<int> predict_labels(const SparseMat& mean_adj,
                                  const Mat& x) const {
    Mat l = logits_plain(mean_adj, x);
    std::vector<int> y(l.rows());
    for (int i = 0; i < l.rows(); ++i) y[i] = argmax_row(l, i);
    return y;
  }
};

}  // namespace dpgba
