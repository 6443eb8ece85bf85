#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "flipguard/attacks.hpp"
#include "flipguard/data.hpp"

namespace flipguard {

// Per-sample outcome of comparing an old and a new classifier. The
// robustness bits come from the evaluation attack, re-run per model;
// -1 means not populated. A set robust bit implies clean correctness.
struct EvalRecord {
  int y = 0;
  int old_label = 0;
  int new_label = 0;
  signed char old_robust = -1;
  signed char new_robust = -1;

  bool nf() const { return old_label == y && new_label != y; }
  bool pf() const { return old_label != y && new_label == y; }
  bool rnf() const { return old_robust == 1 && new_robust == 0; }
  bool rpf() const { return old_robust == 0 && new_robust == 1; }
};

// All rates in percent of the record count. Empty input is an error;
// rnf/joint also require populated robustness bits.
double nf_rate(std::span<const EvalRecord> r);
double pf_rate(std::span<const EvalRecord> r);
double rnf_rate(std::span<const EvalRecord> r);
double rpf_rate(std::span<const EvalRecord> r);
double joint_flip_rate(std::span<const EvalRecord> r);

struct ErrorRates {
  double test_error_old = 0, test_error_new = 0;
  double robust_error_old = 0, robust_error_new = 0;
};
ErrorRates error_rates(std::span<const EvalRecord> r);

// Bootstrap standard deviation of a metric over B resamples drawn with
// replacement. Deterministic per seed.
using RecordMetric = std::function<double(std::span<const EvalRecord>)>;
double bootstrap_std(std::span<const EvalRecord> r, const RecordMetric& metric,
                     int B, std::uint64_t seed);

struct BootstrapStds {
  double test_error = 0, nf = 0, robust_error = 0, rnf = 0;
};

// One row of an update experiment: errors, flip rates, improvement
// deltas against the naive replacement, bootstrap deviations, and
// identity of what was compared.
struct FlipReport {
  std::string method;
  double test_error_old = 0, test_error_new = 0;
  double robust_error_old = 0, robust_error_new = 0;
  double nf = 0, pf = 0, rnf = 0, rpf = 0, joint_nf_rnf = 0;
  bool has_deltas = false;
  double delta_test_error = 0, delta_nfs = 0;
  double delta_robust_error = 0, delta_rnfs = 0;
  BootstrapStds bootstrap;
  std::uint64_t test_set_hash = 0;
  std::uint64_t old_model_hash = 0, new_model_hash = 0;
  int step_index = 0;
  std::string lineage;
};

FlipReport make_flip_report(std::span<const EvalRecord> records,
                            const std::string& method,
                            std::uint64_t test_set_hash,
                            std::uint64_t old_model_hash,
                            std::uint64_t new_model_hash,
                            std::uint64_t bootstrap_seed,
                            int bootstrap_B = 1000);

struct Deltas {
  double test_error = 0, nfs = 0, robust_error = 0, rnfs = 0;
};

// naive minus method for test error, NFs, robust error and RNFs;
// positive values are improvements. Both reports must target the same
// test set and old model.
Deltas delta_metrics(const FlipReport& method_report,
                     const FlipReport& naive_report);
void apply_deltas(FlipReport& method_report, const FlipReport& naive_report);

// ---------------------------------------------------------------------
//  Pair evaluation with per-model caching. Labels and robustness bits
//  are computed once per (model, sample); attack streams are keyed by
//  (attack seed, model hash, sample index) so any pair built from the
//  same caches is internally consistent and self-comparison flips are
//  exactly zero.
// ---------------------------------------------------------------------

class PairEvaluator {
 public:
  PairEvaluator(const LabeledSet& set, PerturbationDomain domain,
                AttackConfig eval_cfg);

  struct ModelEval {
    std::vector<int> labels;
    std::vector<signed char> robust;
    double test_error = 0, robust_error = 0;
  };

  const ModelEval& eval_model(const Model& m);
  std::vector<EvalRecord> records(const Model& old_m, const Model& new_m);
  std::uint64_t test_set_hash() const { return set_hash_; }
  const LabeledSet& set() const { return set_; }

 private:
  LabeledSet set_;
  PerturbationDomain domain_;
  AttackConfig cfg_;
  std::uint64_t set_hash_;
  std::map<std::uint64_t, ModelEval> cache_;
};

}  // namespace flipguard
