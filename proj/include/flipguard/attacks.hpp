#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include "flipguard/losses.hpp"
#include "flipguard/model.hpp"

namespace flipguard {

// l_inf ball of radius epsilon around a sample, intersected with the
// feature box (default [0,1]^d).
struct PerturbationDomain {
  double epsilon = 0.0;
  double box_lo = 0.0;
  double box_hi = 1.0;

  void validate() const {
    if (epsilon < 0) throw ConfigError("perturbation: epsilon must be >= 0");
    if (!(box_lo < box_hi))
      throw ConfigError("perturbation: box_lo must be < box_hi");
  }
};

enum class AttackKind : std::uint8_t { Fgsm, Fat, Pgd };
enum class AttackLoss : std::uint8_t { CrossEntropy, Dlr };

struct AttackConfig {
  AttackKind kind = AttackKind::Pgd;
  int iterations = 50;
  double step_size = 0.0;  // <= 0 selects the default epsilon / 4
  int restarts = 2;
  AttackLoss loss = AttackLoss::CrossEntropy;
  std::uint64_t seed = 0;

  void validate(std::size_t num_classes) const;

  // Evaluation protocol: 50-step PGD, 2 restarts, DLR loss when the
  // model has at least 4 classes, cross-entropy otherwise.
  static AttackConfig evaluation(std::size_t num_classes, std::uint64_t seed,
                                 int iterations = 50);
};

struct AttackOutcome {
  Tensor adv_point;
  bool success = false;   // model label at adv_point differs from y
  double achieved_loss = 0.0;
};

// Elementwise clamp of cand into [center - eps, center + eps] and the
// feature box. Idempotent.
Tensor project(const Tensor& cand, const Tensor& center,
               const PerturbationDomain& domain);

// Running audit of emitted adversarial points. Every outcome is checked
// for ball and box containment (slack 1e-9); a violation throws after
// being counted.
std::uint64_t attack_audit_outcomes();
std::uint64_t attack_audit_violations();
void attack_audit_reset();

// DLR objective value: -(z_y - max_{i != y} z_i) / (z_(1) - z_(3)).
// Needs >= 4 classes; a degenerate denominator (< 1e-12) falls back to
// cross-entropy for that sample and bumps dlr_fallback_count().
double dlr_loss(const Tensor& logits, int y);
std::uint64_t dlr_fallback_count();

// Attach the attack objective for one sample's logits row ({1,c} or
// {c}) to the tape. Handles the DLR degenerate-denominator fallback.
Tape::NodeId attack_loss_node(Tape& t, Tape::NodeId logits, int y,
                              AttackLoss loss);

// Single full-budget FGSM step from x.
AttackOutcome fgsm(const Model& m, const Tensor& x, int y,
                   const PerturbationDomain& domain,
                   AttackLoss loss = AttackLoss::CrossEntropy);

// Fast adversarial-training step: uniform random start in the ball,
// then one full-budget FGSM step, both projected. Deterministic per
// seed. Ascends cross-entropy.
AttackOutcome fat_step(const Model& m, const Tensor& x, int y,
                       const PerturbationDomain& domain, std::uint64_t seed);

// Generic FAT step against an arbitrary differentiable objective of the
// input point ({1,d} node in, scalar node out). Training loops pass the
// composite update objective here. Returns the adversarial point only.
using PointObjective =
    std::function<Tape::NodeId(Tape& t, Tape::NodeId x_node)>;
Tensor fat_step_point(const PointObjective& objective, const Tensor& x,
                      const PerturbationDomain& domain, std::uint64_t seed);

// Projected gradient ascent with random starts, best-loss iterate
// tracking and per-restart stall re-randomization. A restart ends as
// soon as a misclassified iterate is seen; an already-misclassified
// clean x is returned unchanged. extra_starts are projected into the
// ball and tried as candidate points before the random restarts.
AttackOutcome pgd(const Model& m, const Tensor& x, int y,
                  const PerturbationDomain& domain, const AttackConfig& cfg,
                  std::span<const Tensor> extra_starts = {});

// Empirical robustness: clean-correct and the evaluation attack failed.
bool is_robust(const Model& m, const Tensor& x, int y,
               const PerturbationDomain& domain, const AttackConfig& cfg);

}  // namespace flipguard
