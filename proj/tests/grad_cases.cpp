#include "dpgba/attack.hpp"
#include "testing_util.hpp"

// One finite-difference case per differentiable op, plus one per composed
// training loss. Each case builds a small random instance from its seed,
// reduces the output to a scalar through a fixed random weighting where
// needed, and compares reverse-mode gradients with central differences over
// every parameter entry.

namespace dpgba::testing {
namespace {

Rng rng_for(uint64_t seed, uint64_t tag) { return Rng(mix_seed(seed, tag)); }

Expr weighted_sum(Tape& t, Expr e, Mat c) {
  return sum(hadamard_const(e, std::move(c)));
}

// keeps relu/kink inputs away from the nondifferentiable point
Mat gaussian_away_from(double gap, int r, int c, double stddev, Rng& rng) {
  Mat m = gaussian(r, c, stddev, rng);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      if (std::abs(m(i, j)) < gap) m(i, j) += m(i, j) >= 0.0 ? gap : -gap;
  return m;
}

SparseMat random_symmetric01(int n, double p, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::tuple<int, int, double>> tr;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (u(rng) < p) {
        tr.emplace_back(i, j, 1.0);
        tr.emplace_back(j, i, 1.0);
      }
  return SparseMat::from_triplets(n, n, tr);
}

// Finite differences are only meaningful away from relu kinks, so the
// composed-loss cases check the chain rule at a well-conditioned parameter
// point: weights scaled up so preactivations have healthy magnitude, biases
// moved off their zero init.
void scale_params(ParamSet& ps, double k) {
  for (Param* p : ps.all()) p->value *= k;
}

void condition_generator(TriggerGenerator& gen, Rng& rng) {
  scale_params(gen.params, 3.0);
  Mat& b1 = gen.params.at("b1").value;
  b1 = gaussian_away_from(0.05, b1.rows(), b1.cols(), 0.3, rng);
  Mat& b2 = gen.params.at("b2").value;
  b2 = gaussian(b2.rows(), b2.cols(), 0.3, rng).cwiseAbs().array() + 0.1;
}

double run_binary_elementwise(uint64_t seed, int kind) {
  Rng rng = rng_for(seed, 10 + kind);
  ParamSet ps;
  Param& a = ps.add("a", gaussian(4, 5, 1.0, rng));
  Param& b = ps.add("b", gaussian(4, 5, 1.0, rng));
  Mat c = gaussian(4, 5, 1.0, rng);
  auto build = [&](Tape& t) {
    Expr ea = t.param(a), eb = t.param(b);
    Expr out = kind == 0   ? add(ea, eb)
               : kind == 1 ? sub(ea, eb)
                           : hadamard(ea, eb);
    return weighted_sum(t, out, c);
  };
  return fd_check(ps, build).max_rel_err;
}

}  // namespace

std::vector<GradCase> op_grad_cases() {
  std::vector<GradCase> cases;
  auto put = [&](std::string name, std::function<double(uint64_t)> fn) {
    cases.push_back({std::move(name), std::move(fn)});
  };

  put("add", [](uint64_t s) { return run_binary_elementwise(s, 0); });
  put("sub", [](uint64_t s) { return run_binary_elementwise(s, 1); });
  put("hadamard", [](uint64_t s) { return run_binary_elementwise(s, 2); });

  put("neg_scale", [](uint64_t seed) {
    Rng rng = rng_for(seed, 20);
    ParamSet ps;
    Param& a = ps.add("a", gaussian(3, 4, 1.0, rng));
    Mat c = gaussian(3, 4, 1.0, rng);
    auto build = [&](Tape& t) {
      return weighted_sum(t, scale(neg(t.param(a)), 1.7), c);
    };
    return fd_check(ps, build).max_rel_err;
  });

  put("hadamard_const", [](uint64_t seed) {
    Rng rng = rng_for(seed, 21);
    ParamSet ps;
    Param& a = ps.add("a", gaussian(3, 4, 1.0, rng));
    Mat m = gaussian(3, 4, 1.0, rng);
    auto build = [&](Tape& t) { return sum(hadamard_const(t.param(a), m)); };
    return fd_check(ps, build).max_rel_err;
  });

  put("matmul", [](uint64_t seed) {
    Rng rng = rng_for(seed, 22);
    ParamSet ps;
    Param& a = ps.add("a", gaussian(3, 5, 1.0, rng));
    Param& b = ps.add("b", gaussian(5, 4, 1.0, rng));
    Mat c = gaussian(3, 4, 1.0, rng);
    auto build = [&](Tape& t) {
      return weighted_sum(t, matmul(t.param(a), t.param(b)), c);
    };
    return fd_check(ps, build).max_rel_err;
  });

  put("matmul_nt", [](uint64_t seed) {
    Rng rng = rng_for(seed, 23);
    ParamSet ps;
    Param& a = ps.add("a", gaussian(3, 5, 1.0, rng));
    Param& b = ps.add("b", gaussian(4, 5, 1.0, rng));
    Mat c = gaussian(3, 4, 1.0, rng);
    auto build = [&](Tape& t) {
      return weighted_sum(t, matmul_nt(t.param(a), t.param(b)), c);
    };
    return fd_check(ps, build).max_rel_err;
  });

  put("spmm", [](uint64_t seed) {
    Rng rng = rng_for(seed, 24);
    ParamSet ps;
    SparseMat s = random_symmetric01(6, 0.5, rng);
    Param& a = ps.add("a", gaussian(6, 3, 1.0, rng));
    Mat c = gaussian(6, 3, 1.0, rng);
    auto build = [&](Tape& t) {
      return weighted_sum(t, spmm(s, t.param(a)), c);
    };
    return fd_check(ps, build).max_rel_err;
  });

  put("transpose", [](uint64_t seed) {
    Rng rng = rng_for(seed, 25);
    ParamSet ps;
    Param& a = ps.add("a", gaussian(3, 5, 1.0, rng));
    Mat c = gaussian(5, 3, 1.0, rng);
    auto build = [&](Tape& t) {
      return weighted_sum(t, transpose(t.param(a)), c);
    };
    return fd_check(ps, build).max_rel_err;
  });

  put("relu", [](uint64_t seed) {
    Rng rng = rng_for(seed, 26);
    ParamSet ps;
    Param& a = ps.add("a", gaussian_away_from(0.05, 4, 4, 1.0, rng));
    Mat c = gaussian(4, 4, 1.0, rng);
    auto build = [&](Tape& t) { return weighted_sum(t, relu(t.param(a)), c); };
    return fd_check(ps, build).max_rel_err;
  });

  put("sigmoid", [](uint64_t seed) {
    Rng rng = rng_for(seed, 27);
    ParamSet ps;
    Param& a = ps.add("a", gaussian(4, 4, 2.0, rng));
    Mat c = gaussian(4, 4, 1.0, rng);
    auto build = [&](Tape& t) {
      return weighted_sum(t, sigmoid(t.param(a)), c);
    };
    return fd_check(ps, build).max_rel_err;
  });

  put("exp", [](uint64_t seed) {
    Rng rng = rng_for(seed, 28);
    ParamSet ps;
    Param& a = ps.add("a", gaussian(4, 4, 0.7, rng));
    Mat c = gaussian(4, 4, 1.0, rng);
    auto build = [&](Tape& t) { return weighted_sum(t, exp(t.param(a)), c); };
    return fd_check(ps, build).max_rel_err;
  });

  put("log", [](uint64_t seed) {
    Rng rng = rng_for(seed, 29);
    Rng rng2 = rng_for(seed, 290);
    ParamSet ps;
    Mat base = gaussian(4, 4, 1.0, rng).cwiseAbs();
    Param& a = ps.add("a", base.array() + 0.5);
    Mat c = gaussian(4, 4, 1.0, rng2);
    auto build = [&](Tape& t) { return weighted_sum(t, log(t.param(a)), c); };
    return fd_check(ps, build).max_rel_err;
  });

  put("logsigmoid", [](uint64_t seed) {
    Rng rng = rng_for(seed, 30);
    ParamSet ps;
    Param& a = ps.add("a", gaussian(4, 4, 3.0, rng));
    Mat c = gaussian(4, 4, 1.0, rng);
    auto build = [&](Tape& t) {
      return weighted_sum(t, logsigmoid(t.param(a)), c);
    };
    return fd_check(ps, build).max_rel_err;
  });

  put("row_gather", [](uint64_t seed) {
    Rng rng = rng_for(seed, 31);
    ParamSet ps;
    Param& a = ps.add("a", gaussian(6, 3, 1.0, rng));
    std::vector<int> idx = {4, 0, 4, 2};  // repeats accumulate
    Mat c = gaussian(4, 3, 1.0, rng);
    auto build = [&](Tape& t) {
      return weighted_sum(t, row_gather(t.param(a), idx), c);
    };
    return fd_check(ps, build).max_rel_err;
  });

  put("vconcat", [](uint64_t seed) {
    Rng rng = rng_for(seed, 32);
    ParamSet ps;
    Param& a = ps.add("a", gaussian(2, 3, 1.0, rng));
    Param& b = ps.add("b", gaussian(4, 3, 1.0, rng));
    Mat c = gaussian(6, 3, 1.0, rng);
    auto build = [&](Tape& t) {
      return weighted_sum(t, vconcat({t.param(a), t.param(b)}), c);
    };
    return fd_check(ps, build).max_rel_err;
  });

  put("hconcat", [](uint64_t seed) {
    Rng rng = rng_for(seed, 33);
    ParamSet ps;
    Param& a = ps.add("a", gaussian(3, 2, 1.0, rng));
    Param& b = ps.add("b", gaussian(3, 4, 1.0, rng));
    Mat c = gaussian(3, 6, 1.0, rng);
    auto build = [&](Tape& t) {
      return weighted_sum(t, hconcat(t.param(a), t.param(b)), c);
    };
    return fd_check(ps, build).max_rel_err;
  });

  put("reshape_rowmajor", [](uint64_t seed) {
    Rng rng = rng_for(seed, 34);
    ParamSet ps;
    Param& a = ps.add("a", gaussian(3, 8, 1.0, rng));
    Mat c = gaussian(6, 4, 1.0, rng);
    auto build = [&](Tape& t) {
      return weighted_sum(t, reshape_rowmajor(t.param(a), 6, 4), c);
    };
    return fd_check(ps, build).max_rel_err;
  });

  put("sum_mean", [](uint64_t seed) {
    Rng rng = rng_for(seed, 35);
    ParamSet ps;
    Param& a = ps.add("a", gaussian(4, 3, 1.0, rng));
    auto build = [&](Tape& t) {
      Expr e = t.param(a);
      return add(sum(e), scale(mean_all(e), 2.5));
    };
    return fd_check(ps, build).max_rel_err;
  });

  put("row_sum", [](uint64_t seed) {
    Rng rng = rng_for(seed, 36);
    ParamSet ps;
    Param& a = ps.add("a", gaussian(4, 3, 1.0, rng));
    Mat c = gaussian(4, 1, 1.0, rng);
    auto build = [&](Tape& t) {
      return weighted_sum(t, row_sum(t.param(a)), c);
    };
    return fd_check(ps, build).max_rel_err;
  });

  put("add_colvec", [](uint64_t seed) {
    Rng rng = rng_for(seed, 37);
    ParamSet ps;
    Param& a = ps.add("a", gaussian(4, 3, 1.0, rng));
    Param& b = ps.add("b", gaussian(4, 1, 1.0, rng));
    Mat c = gaussian(4, 3, 1.0, rng);
    auto build = [&](Tape& t) {
      return weighted_sum(t, add_colvec(t.param(a), t.param(b)), c);
    };
    return fd_check(ps, build).max_rel_err;
  });

  put("add_rowvec", [](uint64_t seed) {
    Rng rng = rng_for(seed, 49);
    ParamSet ps;
    Param& a = ps.add("a", gaussian(4, 3, 1.0, rng));
    Param& b = ps.add("b", gaussian(1, 3, 1.0, rng));
    Mat c = gaussian(4, 3, 1.0, rng);
    auto build = [&](Tape& t) {
      return weighted_sum(t, add_rowvec(t.param(a), t.param(b)), c);
    };
    return fd_check(ps, build).max_rel_err;
  });

  put("row_l2norm", [](uint64_t seed) {
    Rng rng = rng_for(seed, 38);
    ParamSet ps;
    Param& a = ps.add("a", gaussian(5, 4, 1.0, rng));
    Mat c = gaussian(5, 1, 1.0, rng);
    auto build = [&](Tape& t) {
      return weighted_sum(t, row_l2norm(t.param(a)), c);
    };
    return fd_check(ps, build).max_rel_err;
  });

  put("softmax_cross_entropy", [](uint64_t seed) {
    Rng rng = rng_for(seed, 39);
    ParamSet ps;
    Param& a = ps.add("logits", gaussian(6, 4, 2.0, rng));
    std::uniform_int_distribution<int> lab(0, 3);
    std::vector<int> labels(6);
    for (int& y : labels) y = lab(rng);
    auto build = [&](Tape& t) {
      return softmax_cross_entropy(t.param(a), labels);
    };
    return fd_check(ps, build).max_rel_err;
  });

  put("bce_from_logit", [](uint64_t seed) {
    Rng rng = rng_for(seed, 40);
    ParamSet ps;
    Param& a = ps.add("logit", gaussian(5, 1, 2.0, rng));
    double target = seed % 2 == 0 ? 1.0 : 0.0;
    auto build = [&](Tape& t) { return bce_from_logit(t.param(a), target); };
    return fd_check(ps, build).max_rel_err;
  });

  put("cosine_sim", [](uint64_t seed) {
    Rng rng = rng_for(seed, 41);
    ParamSet ps;
    Param& a = ps.add("u", gaussian(1, 6, 1.0, rng));
    Param& b = ps.add("v", gaussian(1, 6, 1.0, rng));
    auto build = [&](Tape& t) { return cosine_sim(t.param(a), t.param(b)); };
    return fd_check(ps, build).max_rel_err;
  });

  put("pairwise_cosine", [](uint64_t seed) {
    Rng rng = rng_for(seed, 42);
    ParamSet ps;
    Param& a = ps.add("a", gaussian(4, 5, 1.0, rng));
    Param& b = ps.add("b", gaussian(3, 5, 1.0, rng));
    Mat c = gaussian(4, 3, 1.0, rng);
    auto build = [&](Tape& t) {
      return weighted_sum(t, pairwise_cosine(t.param(a), t.param(b)), c);
    };
    return fd_check(ps, build).max_rel_err;
  });

  put("pairwise_cosine_shared", [](uint64_t seed) {
    Rng rng = rng_for(seed, 43);
    ParamSet ps;
    Param& a = ps.add("a", gaussian(4, 5, 1.0, rng));
    Mat c = gaussian(4, 4, 1.0, rng);
    auto build = [&](Tape& t) {
      Expr e = t.param(a);
      return weighted_sum(t, pairwise_cosine(e, e), c);
    };
    return fd_check(ps, build).max_rel_err;
  });

  put("trigger_edge_weights_relaxed", [](uint64_t seed) {
    Rng rng = rng_for(seed, 44);
    ParamSet ps;
    int s = 3, n = 4;
    Param& a = ps.add("logits", gaussian(n, s * s, 1.5, rng));
    Mat c = gaussian(n * s * (s - 1) / 2, 1, 1.0, rng);
    auto build = [&](Tape& t) {
      return weighted_sum(t, trigger_edge_weights(t.param(a), s, false), c);
    };
    return fd_check(ps, build).max_rel_err;
  });

  put("graph_propagate", [](uint64_t seed) {
    Rng rng = rng_for(seed, 45);
    int n = 7;
    std::vector<std::pair<int, int>> ce = {{0, 1}, {1, 2}, {3, 4}};
    std::vector<std::pair<int, int>> ve = {{2, 3}, {4, 5}, {5, 6}, {0, 6}};
    auto pg = std::make_shared<PropGraph>(
        PropGraph::build(n, ce, ve));
    ParamSet ps;
    Mat w0 = gaussian(4, 1, 0.2, rng).cwiseAbs();
    Param& w = ps.add("w", w0.array() + 0.2);
    Param& h = ps.add("h", gaussian(n, 3, 1.0, rng));
    Mat c = gaussian(n, 3, 1.0, rng);
    auto build = [&](Tape& t) {
      return weighted_sum(t, graph_propagate(pg, t.param(w), t.param(h)), c);
    };
    return fd_check(ps, build).max_rel_err;
  });

  put("graph_propagate_from_logits", [](uint64_t seed) {
    Rng rng = rng_for(seed, 46);
    int s = 3;  // one trigger block feeding a 5-node propagation
    std::vector<std::pair<int, int>> ce = {{0, 1}, {1, 2}};
    std::vector<std::pair<int, int>> ve = {{2, 3}, {3, 4}, {2, 4}};
    auto pg = std::make_shared<PropGraph>(PropGraph::build(5, ce, ve));
    ParamSet ps;
    Param& lg = ps.add("logits", gaussian(1, s * s, 1.0, rng));
    Param& h = ps.add("h", gaussian(5, 2, 1.0, rng));
    Mat c = gaussian(5, 2, 1.0, rng);
    auto build = [&](Tape& t) {
      Expr w = trigger_edge_weights(t.param(lg), s, false);
      return weighted_sum(t, graph_propagate(pg, w, t.param(h)), c);
    };
    return fd_check(ps, build).max_rel_err;
  });

  put("attr_recon_rownorm", [](uint64_t seed) {
    Rng rng = rng_for(seed, 47);
    ParamSet ps;
    Param& z = ps.add("z", gaussian(5, 3, 1.2, rng));
    Param& w = ps.add("w", gaussian(3, 4, 1.2, rng));
    Mat x = gaussian(5, 4, 1.0, rng);
    Mat c = gaussian(5, 1, 1.0, rng);
    auto build = [&](Tape& t) {
      return weighted_sum(t, attr_recon_rownorm(t.param(z), t.param(w), x), c);
    };
    return fd_check(ps, build).max_rel_err;
  });

  put("struct_recon_rownorm", [](uint64_t seed) {
    Rng rng = rng_for(seed, 48);
    ParamSet ps;
    int n = 6;
    SparseMat a = random_symmetric01(n, 0.4, rng);
    Param& z = ps.add("z", gaussian(n, 3, 1.0, rng));
    Mat c = gaussian(n, 1, 1.0, rng);
    auto build = [&](Tape& t) {
      return weighted_sum(t, struct_recon_rownorm(t.param(z), a, 2), c);
    };
    return fd_check(ps, build).max_rel_err;
  });

  put("softmax_cross_entropy_rows", [](uint64_t seed) {
    Rng rng = rng_for(seed, 50);
    ParamSet ps;
    Param& a = ps.add("logits", gaussian(5, 4, 1.5, rng));
    std::vector<int> labels;
    std::uniform_int_distribution<int> u(0, 3);
    for (int i = 0; i < 5; ++i) labels.push_back(u(rng));
    Mat c = gaussian(5, 1, 1.0, rng);
    auto build = [&](Tape& t) {
      return weighted_sum(t, softmax_cross_entropy_rows(t.param(a), labels),
                          c);
    };
    return fd_check(ps, build).max_rel_err;
  });

  // composed training losses, checked through the models they drive

  put("loss_surrogate", [](uint64_t seed) {
    Graph g = synth_sbm(2, 6, 0.4, 0.1, 4, 1.5, 2000 + seed);
    Gcn sur = Gcn::init(4, 4, 2, seed);
    scale_params(sur.params, 5.0);
    std::vector<int> labeled = {0, 2, 5, 8}, poisoned = {3, 9};
    SparseMat adj = normalize_adjacency(g);
    auto build = [&](Tape& t) {
      Expr logits = sur.logits(t, adj, t.constant(g.features));
      return loss_surrogate(logits, labeled, g.labels, poisoned, 1);
    };
    return fd_check(sur.params, build, 1e-5).max_rel_err;
  });

  put("loss_attack_weighted", [](uint64_t seed) {
    Graph g = synth_sbm(2, 6, 0.4, 0.1, 4, 1.5, 3000 + seed);
    Gcn sur = Gcn::init(4, 4, 2, seed);
    scale_params(sur.params, 5.0);
    std::vector<int> batch = {1, 4, 7, 10};
    SparseMat adj = normalize_adjacency(g);
    Rng rng = rng_for(seed, 51);
    Mat w = gaussian(4, 1, 0.3, rng).cwiseAbs();
    auto build = [&](Tape& t) {
      Expr logits = sur.logits(t, adj, t.constant(g.features));
      return loss_attack_weighted(logits, batch, 1, w);
    };
    return fd_check(sur.params, build, 1e-5).max_rel_err;
  });

  put("loss_distribution", [](uint64_t seed) {
    Graph g = synth_sbm(2, 6, 0.4, 0.1, 4, 1.5, 4000 + seed);
    std::vector<int> working = {2, 7};
    TriggerGenerator gen = TriggerGenerator::init(4, 5, 2, seed);
    PoisonPlan plan = make_poison_plan(
        1, working, gen.generate(detail::rows_of(g.features, working)));
    Graph pois = attach_triggers(g, plan);
    SparseMat adj = normalize_adjacency(pois);
    OodDetector det = OodDetector::init(4, 4, seed + 1);
    scale_params(det.core.params, 5.0);
    std::vector<int> vs = {0, 1, 4, 9};
    std::vector<int> trig = {12, 13, 14, 15};
    auto build = [&](Tape& t) {
      Expr xw1 = matmul(t.constant(pois.features), det.core.weight1(t, false));
      Expr logits = det.logit_from_xw1(t, adj, xw1, false);
      return loss_distribution(logits, vs, trig);
    };
    return fd_check(det.core.params, build, 1e-5).max_rel_err;
  });

  put("loss_enhance", [](uint64_t seed) {
    Graph g = synth_sbm(2, 6, 0.4, 0.1, 4, 1.5, 5000 + seed);
    Gcn sur = Gcn::init(4, 4, 2, seed);
    scale_params(sur.params, 5.0);
    std::vector<int> batch = {1, 4, 7};
    std::vector<int> vt = {2, 3}, vnt = {0, 5, 8};
    SparseMat adj = normalize_adjacency(g);
    auto build = [&](Tape& t) {
      Expr z = sur.logits(t, adj, t.constant(g.features));
      return loss_enhance(z, batch, vt, vnt, 0.5);
    };
    return fd_check(sur.params, build, 1e-5).max_rel_err;
  });

  put("cosine_constraint_loss", [](uint64_t seed) {
    TriggerGenerator gen = TriggerGenerator::init(4, 8, 3, seed);
    Rng rng = rng_for(seed, 52);
    condition_generator(gen, rng);
    Mat owners = gaussian(3, 4, 1.0, rng);
    auto build = [&](Tape& t) {
      auto o = gen.forward(t, t.constant(owners), false, false);
      return cosine_constraint_loss(o.features, owners, 3);
    };
    return fd_check(gen.params, build, 1e-5).max_rel_err;
  });

  // full objective: generator parameters through the relaxed attachment,
  // frozen surrogate and detector, difficulty weights held fixed
  put("loss_full_objective", [](uint64_t seed) {
    Graph g = synth_sbm(2, 6, 0.4, 0.1, 4, 1.5, 6000 + seed);
    int s = 2;
    std::vector<int> working = {1, 4, 9};
    std::vector<int> vs = {0, 2, 3, 5, 6};
    std::vector<int> vt = {2, 3}, vnt = {0, 5, 8};
    TriggerGenerator gen = TriggerGenerator::init(4, 8, s, seed);
    Rng crng = rng_for(seed, 53);
    condition_generator(gen, crng);
    Gcn sur = Gcn::init(4, 4, 2, seed + 1);
    scale_params(sur.params, 5.0);
    OodDetector det = OodDetector::init(4, 4, seed + 2);
    scale_params(det.core.params, 5.0);
    auto pg = attach_prop_graph(g, working, s);
    SparseMat x_csr = SparseMat::from_dense(g.features);
    Mat x_working = detail::rows_of(g.features, working);
    std::vector<int> trig;
    for (int i = 0; i < static_cast<int>(working.size()) * s; ++i)
      trig.push_back(g.num_nodes() + i);
    Mat weights;
    {
      Tape t;
      auto o = gen.forward(t, t.constant(x_working), false, true);
      Expr w1 = sur.weight1(t, true);
      Expr xw1 = vconcat({spmm(x_csr, w1), matmul(o.features, w1)});
      Expr logits = sur.logits_from_xw1(t, pg, o.edge_weights, xw1, true);
      weights = attack_weights(logits.val(), working, 1).w;
    }
    auto build = [&](Tape& t) {
      auto o = gen.forward(t, t.constant(x_working), false, false);
      Expr w1 = sur.weight1(t, true);
      Expr xw1 = vconcat({spmm(x_csr, w1), matmul(o.features, w1)});
      Expr logits = sur.logits_from_xw1(t, pg, o.edge_weights, xw1, true);
      Expr l_t = loss_attack_weighted(logits, working, 1, weights);
      Expr dw1 = det.core.weight1(t, true);
      Expr xw1d = vconcat({spmm(x_csr, dw1), matmul(o.features, dw1)});
      Expr dlogits = det.logit_from_xw1(t, pg, o.edge_weights, xw1d, true);
      Expr l_d = loss_distribution(dlogits, vs, trig);
      Expr l_e = loss_enhance(logits, working, vt, vnt, 0.5);
      return add(add(l_t, scale(l_d, 0.7)), scale(l_e, 0.3));
    };
    return fd_check(gen.params, build, 1e-5).max_rel_err;
  });

  return cases;
}

}  // namespace dpgba::testing
