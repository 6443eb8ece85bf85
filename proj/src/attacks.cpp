#include "flipguard/attacks.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#include "flipguard/rng.hpp"

namespace flipguard {

namespace {

std::atomic<std::uint64_t> g_outcomes{0};
std::atomic<std::uint64_t> g_violations{0};
std::atomic<std::uint64_t> g_dlr_fallbacks{0};

// Feasibility gate every emitted point passes through.
AttackOutcome make_outcome(Tensor adv, bool success, double loss,
                           const Tensor& center,
                           const PerturbationDomain& domain) {
  g_outcomes.fetch_add(1, std::memory_order_relaxed);
  constexpr double slack = 1e-9;
  for (std::size_t i = 0; i < adv.size(); ++i) {
    const double d = std::abs(adv.data[i] - center.data[i]);
    if (d > domain.epsilon + slack || adv.data[i] < domain.box_lo - slack ||
        adv.data[i] > domain.box_hi + slack) {
      g_violations.fetch_add(1, std::memory_order_relaxed);
      throw NumericalError("attack emitted an infeasible point (coordinate " +
                           std::to_string(i) + ")");
    }
  }
  return AttackOutcome{std::move(adv), success, loss};
}

struct PointEval {
  double loss;
  int label;
  Tensor grad;  // w.r.t. the point; empty when not requested
};

// Loss, label and (optionally) input gradient at a point.
PointEval eval_point(const Model& m, const Tensor& x, int y,
                     AttackLoss loss, bool want_grad) {
  Tape tape;
  Tensor x0({1, x.shape[0]}, x.data);
  x0.requires_grad = want_grad;
  const Tape::NodeId xn = tape.leaf(std::move(x0));
  const Tape::NodeId logits = forward_taped(tape, m, xn);
  const Tensor& z = tape.value(logits);
  PointEval out;
  out.label = argmax_lowest(z.data.data(), z.size());
  const Tape::NodeId l = attack_loss_node(tape, logits, y, loss);
  out.loss = tape.value(l).item();
  if (want_grad) {
    tape.backward(l);
    Tensor g = tape.grad(xn);
    out.grad = Tensor({x.shape[0]}, std::move(g.data));
  }
  return out;
}

bool all_zero(const Tensor& g) {
  for (double v : g.data)
    if (v != 0.0) return false;
  return true;
}

Tensor signed_step(const Tensor& x, const Tensor& g, double step) {
  Tensor out = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double s = g.data[i] > 0.0 ? 1.0 : (g.data[i] < 0.0 ? -1.0 : 0.0);
    out.data[i] = x.data[i] + step * s;
  }
  return out;
}

Tensor uniform_ball_point(const Tensor& x, const PerturbationDomain& domain,
                          Xoshiro256& rng) {
  Tensor out = x;
  for (double& v : out.data) v += rng.uniform(-domain.epsilon, domain.epsilon);
  return project(out, x, domain);
}

}  // namespace

void AttackConfig::validate(std::size_t num_classes) const {
  if (iterations < 1) throw ConfigError("attack: iterations must be >= 1");
  if (restarts < 1) throw ConfigError("attack: restarts must be >= 1");
  if (kind == AttackKind::Fgsm && iterations != 1)
    throw ConfigError("attack: fgsm is single-step (iterations must be 1)");
  if (loss == AttackLoss::Dlr && num_classes < 4)
    throw ConfigError("attack: dlr loss needs at least 4 classes");
}

AttackConfig AttackConfig::evaluation(std::size_t num_classes,
                                      std::uint64_t seed, int iterations) {
  AttackConfig cfg;
  cfg.kind = AttackKind::Pgd;
  cfg.iterations = iterations;
  cfg.restarts = 2;
  cfg.loss = num_classes >= 4 ? AttackLoss::Dlr : AttackLoss::CrossEntropy;
  cfg.seed = seed;
  return cfg;
}

Tensor project(const Tensor& cand, const Tensor& center,
               const PerturbationDomain& domain) {
  if (!same_shape(cand, center))
    throw ShapeError("project: shapes " + cand.shape_str() + " vs " +
                     center.shape_str());
  Tensor out = cand;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double lo = std::max(center.data[i] - domain.epsilon, domain.box_lo);
    const double hi = std::min(center.data[i] + domain.epsilon, domain.box_hi);
    out.data[i] = std::min(hi, std::max(lo, out.data[i]));
  }
  return out;
}

std::uint64_t attack_audit_outcomes() { return g_outcomes.load(); }
std::uint64_t attack_audit_violations() { return g_violations.load(); }
void attack_audit_reset() {
  g_outcomes.store(0);
  g_violations.store(0);
}

std::uint64_t dlr_fallback_count() { return g_dlr_fallbacks.load(); }

double dlr_loss(const Tensor& logits, int y) {
  Tape t;
  return t.value(attack_loss_node(t, t.constant(logits), y, AttackLoss::Dlr))
      .item();
}

Tape::NodeId attack_loss_node(Tape& t, Tape::NodeId logits, int y,
                              AttackLoss loss) {
  const Tensor& z = t.value(logits);
  if (loss == AttackLoss::Dlr) {
    if (z.size() < 4)
      throw ShapeError("dlr loss: needs >= 4 classes, got " + z.shape_str());
    // Degenerate denominator z_(1) - z_(3): fall back to cross-entropy.
    std::vector<double> v(z.data);
    std::nth_element(v.begin(), v.begin() + 2, v.end(),
                     std::greater<double>());
    const double z1 = *std::max_element(z.data.begin(), z.data.end());
    if (std::abs(z1 - v[2]) >= 1e-12) return t.dlr(logits, y);
    g_dlr_fallbacks.fetch_add(1, std::memory_order_relaxed);
  }
  if (z.rank() == 2) {
    const int ys[1] = {y};
    return t.mean(batch_ce_node(t, logits, std::span<const int>(ys, 1)));
  }
  return cross_entropy_node(t, logits, y);
}

AttackOutcome fgsm(const Model& m, const Tensor& x, int y,
                   const PerturbationDomain& domain, AttackLoss loss) {
  domain.validate();
  const PointEval e = eval_point(m, x, y, loss, true);
  const Tensor adv = project(signed_step(x, e.grad, domain.epsilon), x, domain);
  const PointEval at_adv = eval_point(m, adv, y, loss, false);
  return make_outcome(adv, at_adv.label != y, at_adv.loss, x, domain);
}

Tensor fat_step_point(const PointObjective& objective, const Tensor& x,
                      const PerturbationDomain& domain, std::uint64_t seed) {
  domain.validate();
  Xoshiro256 rng(seed);
  const Tensor x0 = uniform_ball_point(x, domain, rng);

  Tape tape;
  Tensor xt({1, x.shape[0]}, x0.data);
  xt.requires_grad = true;
  const Tape::NodeId xn = tape.leaf(std::move(xt));
  const Tape::NodeId obj = objective(tape, xn);
  tape.backward(obj);
  Tensor g = tape.grad(xn);
  const Tensor grad({x.shape[0]}, std::move(g.data));
  return project(signed_step(x0, grad, domain.epsilon), x, domain);
}

AttackOutcome fat_step(const Model& m, const Tensor& x, int y,
                       const PerturbationDomain& domain, std::uint64_t seed) {
  const auto objective = [&](Tape& t, Tape::NodeId xn) {
    return attack_loss_node(t, forward_taped(t, m, xn), y,
                            AttackLoss::CrossEntropy);
  };
  const Tensor adv = fat_step_point(objective, x, domain, seed);
  const PointEval at_adv = eval_point(m, adv, y, AttackLoss::CrossEntropy,
                                      false);
  return make_outcome(adv, at_adv.label != y, at_adv.loss, x, domain);
}

AttackOutcome pgd(const Model& m, const Tensor& x, int y,
                  const PerturbationDomain& domain, const AttackConfig& cfg,
                  std::span<const Tensor> extra_starts) {
  domain.validate();
  cfg.validate(m.spec.num_classes);
  const double step =
      cfg.step_size > 0.0 ? cfg.step_size : domain.epsilon / 4.0;

  // The clean point is in B(x); if it is already misclassified the
  // maximization is solved by x itself.
  const PointEval clean = eval_point(m, x, y, cfg.loss, false);
  if (clean.label != y) return make_outcome(x, true, clean.loss, x, domain);

  Tensor best_point = x;
  double best_loss = clean.loss;
  const auto consider = [&](const Tensor& p,
                            const PointEval& e) -> bool {
    if (e.loss > best_loss) {
      best_loss = e.loss;
      best_point = p;
    }
    return e.label != y;
  };

  for (const Tensor& s : extra_starts) {
    const Tensor p = project(s, x, domain);
    const PointEval e = eval_point(m, p, y, cfg.loss, false);
    if (consider(p, e)) return make_outcome(p, true, e.loss, x, domain);
  }

  for (int r = 0; r < cfg.restarts; ++r) {
    Xoshiro256 rng(mix_seed({cfg.seed, 0xA77ACCULL, (std::uint64_t)r}));
    Tensor cur = uniform_ball_point(x, domain, rng);
    bool rerandomized = false;
    for (int it = 0; it < cfg.iterations; ++it) {
      const PointEval e = eval_point(m, cur, y, cfg.loss, true);
      if (consider(cur, e)) return make_outcome(cur, true, e.loss, x, domain);
      if (all_zero(e.grad)) {
        // Flat region; one fresh random point per restart, then give up.
        if (rerandomized) break;
        cur = uniform_ball_point(x, domain, rng);
        rerandomized = true;
        continue;
      }
      cur = project(signed_step(cur, e.grad, step), x, domain);
    }
    const PointEval e = eval_point(m, cur, y, cfg.loss, false);
    if (consider(cur, e)) return make_outcome(cur, true, e.loss, x, domain);
  }
  return make_outcome(best_point, false, best_loss, x, domain);
}

bool is_robust(const Model& m, const Tensor& x, int y,
               const PerturbationDomain& domain, const AttackConfig& cfg) {
  if (predict_label(m, x) != y) return false;
  return !pgd(m, x, y, domain, cfg).success;
}

}  // namespace flipguard
