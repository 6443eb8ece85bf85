#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "flipguard/data.hpp"

namespace flipguard {

// Binary linear classifier on the plane: predicts 1 when w.x - b > 0.
// Grid classifiers carry a unit-norm w = (cos a, sin a).
struct LinearClassifier {
  double wx = 1.0, wy = 0.0, b = 0.0;

  int predict(double x, double y) const {
    return wx * x + wy * y - b > 0.0 ? 1 : 0;
  }
  double margin(double x, double y) const { return wx * x + wy * y - b; }
  double l1_norm() const { return std::abs(wx) + std::abs(wy); }
  double l2_norm() const { return std::sqrt(wx * wx + wy * wy); }
};

// Two-class isotropic Gaussian mixture in 2-D with equal priors.
struct GaussianMixture {
  double mu0x = -1.0, mu0y = 0.0;
  double mu1x = 1.0, mu1y = 0.0;
  double sigma = 1.0;
};

LabeledSet sample_mixture(const GaussianMixture& mix, std::size_t n,
                          std::uint64_t seed);

enum class TheoryLoss : std::uint8_t { ZeroOne, RobustZeroOne };

// Finite hypothesis class: n_angles unit directions over [0, 2pi) by
// n_offsets thresholds over [offset_lo, offset_hi]. Finite so argmins
// are exact and the zero-one losses are optimized directly.
struct ClassifierGrid {
  std::size_t n_angles = 192;
  std::size_t n_offsets = 161;
  double offset_lo = -2.0, offset_hi = 2.0;

  std::size_t size() const { return n_angles * n_offsets; }
  LinearClassifier at(std::size_t index) const;
};

// One consistency experiment: known mixture, finite grid class, a
// fixed old model, and the non-regression constraint level. The same
// level bounds both the empirical constraint and the population
// constraint defining the target optimum.
struct ConsistencyProblem {
  GaussianMixture dist;
  TheoryLoss loss = TheoryLoss::ZeroOne;
  double attack_epsilon = 0.0;  // robust variant: linf budget
  LinearClassifier f_old;
  double epsilon_hat = 1e9;  // constraint level; >= 1 is never binding
  bool constrained = false;
  // Rate experiments tighten the empirical level to
  // max(epsilon_hat/2, epsilon_hat - shrink/sqrt(n)) so the estimator
  // stays population-feasible and its excess risk stays non-negative
  // while the boundary converges at the 1/sqrt(n) order.
  double epsilon_hat_shrink = 0.0;
  ClassifierGrid grid;

  static ConsistencyProblem zero_one(bool constrained);
  static ConsistencyProblem robust_zero_one(bool constrained);
};

// Sample-wise losses. The robust zero-one inner maximum is exact for
// linear classifiers: the worst-case linf perturbation shrinks the
// margin by epsilon * ||w||_1.
bool sample_loss(const ConsistencyProblem& p, const LinearClassifier& f,
                 double x, double y, int label);

struct ErmSolution {
  LinearClassifier f;
  std::size_t grid_index = 0;
  double emp_risk = 0.0;        // mean loss on the sample
  double emp_constraint = 0.0;  // mean loss on the old-correct subset
  bool feasible = true;
};

// Exact grid argmin of empirical risk subject to the non-regression
// constraint. Infeasible problems return the minimal-violation point,
// flagged. Ties break lexicographically (risk, constraint, index); the
// penalized solver uses (objective, constraint, index), which makes
// every penalized solution constrained-optimal at its own constraint
// level.
ErmSolution solve_constrained_erm(const LabeledSet& sample,
                                  const ConsistencyProblem& p);
ErmSolution solve_penalized_erm(const LabeledSet& sample,
                                const ConsistencyProblem& p, double mu);

// Population quantities by closed-form Gaussian integrals (risk) and
// one-dimensional quadrature of the bivariate normal orthant
// probability (constraint), accurate to well below 1e-6.
double population_risk(const ConsistencyProblem& p,
                       const LinearClassifier& f);
double population_constraint(const ConsistencyProblem& p,
                             const LinearClassifier& f);

// Risk-minimizing grid point honoring the population constraint when
// the problem is constrained.
struct PopulationOptimum {
  LinearClassifier f;
  std::size_t grid_index = 0;
  double risk = 0.0;
  double constraint = 0.0;
};
PopulationOptimum population_optimum(const ConsistencyProblem& p);

struct RateFit {
  std::vector<std::size_t> n_list;
  std::vector<double> mean_excess;          // population excess risk per n
  std::vector<double> std_excess;
  std::vector<double> mean_emp_constraint;  // mean empirical constraint of f-hat
  std::vector<double> std_pop_constraint;   // across-trial std of L(f-hat, Z0)
  double slope = 0.0, intercept = 0.0;      // log mean excess vs log n
  bool saturated = false;  // every mean excess below the noise floor
};

// Draws `trials` samples per n, solves the (un)constrained grid ERM,
// and fits the log-log convergence slope of the mean excess risk.
RateFit measure_rate(const ConsistencyProblem& p,
                     std::span<const std::size_t> n_list, int trials,
                     std::uint64_t seed);

}  // namespace flipguard
