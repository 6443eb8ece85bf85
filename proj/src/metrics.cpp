#include "flipguard/metrics.hpp"

#include <cmath>

#include "flipguard/rng.hpp"

namespace flipguard {

namespace {

void require_nonempty(std::span<const EvalRecord> r) {
  if (r.empty()) throw ConfigError("metrics: empty record set");
}

void require_bits(std::span<const EvalRecord> r) {
  require_nonempty(r);
  for (const EvalRecord& e : r)
    if (e.old_robust < 0 || e.new_robust < 0)
      throw ConfigError("metrics: robustness bits not populated");
}

double pct_of(std::span<const EvalRecord> r,
              const std::function<bool(const EvalRecord&)>& pred) {
  std::size_t k = 0;
  for (const EvalRecord& e : r) k += pred(e) ? 1 : 0;
  return 100.0 * static_cast<double>(k) / static_cast<double>(r.size());
}

}  // namespace

double nf_rate(std::span<const EvalRecord> r) {
  require_nonempty(r);
  return pct_of(r, [](const EvalRecord& e) { return e.nf(); });
}

double pf_rate(std::span<const EvalRecord> r) {
  require_nonempty(r);
  return pct_of(r, [](const EvalRecord& e) { return e.pf(); });
}

double rnf_rate(std::span<const EvalRecord> r) {
  require_bits(r);
  return pct_of(r, [](const EvalRecord& e) { return e.rnf(); });
}

double rpf_rate(std::span<const EvalRecord> r) {
  require_bits(r);
  return pct_of(r, [](const EvalRecord& e) { return e.rpf(); });
}

double joint_flip_rate(std::span<const EvalRecord> r) {
  require_bits(r);
  return pct_of(r, [](const EvalRecord& e) { return e.nf() && e.rnf(); });
}

ErrorRates error_rates(std::span<const EvalRecord> r) {
  require_bits(r);
  ErrorRates out;
  out.test_error_old =
      pct_of(r, [](const EvalRecord& e) { return e.old_label != e.y; });
  out.test_error_new =
      pct_of(r, [](const EvalRecord& e) { return e.new_label != e.y; });
  out.robust_error_old =
      pct_of(r, [](const EvalRecord& e) { return e.old_robust == 0; });
  out.robust_error_new =
      pct_of(r, [](const EvalRecord& e) { return e.new_robust == 0; });
  // Robust implies clean-correct, so robust error bounds test error.
  if (out.robust_error_old < out.test_error_old ||
      out.robust_error_new < out.test_error_new)
    throw NumericalError("metrics: robust error below test error");
  return out;
}

double bootstrap_std(std::span<const EvalRecord> r, const RecordMetric& metric,
                     int B, std::uint64_t seed) {
  if (r.size() < 2)
    throw ConfigError("bootstrap: need at least 2 records");
  if (B < 2) throw ConfigError("bootstrap: need at least 2 resamples");
  Xoshiro256 rng(mix_seed({seed, 0xB007ULL}));
  const std::size_t m = r.size();
  std::vector<EvalRecord> resample(m);
  std::vector<double> vals(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < m; ++i)
      resample[i] = r[static_cast<std::size_t>(rng.below(m))];
    vals[static_cast<std::size_t>(b)] = metric(resample);
  }
  double mean = 0;
  for (double v : vals) mean += v;
  mean /= static_cast<double>(B);
  double ss = 0;
  for (double v : vals) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(B - 1));
}

FlipReport make_flip_report(std::span<const EvalRecord> records,
                            const std::string& method,
                            std::uint64_t test_set_hash,
                            std::uint64_t old_model_hash,
                            std::uint64_t new_model_hash,
                            std::uint64_t bootstrap_seed, int bootstrap_B) {
  FlipReport rep;
  rep.method = method;
  const ErrorRates er = error_rates(records);
  rep.test_error_old = er.test_error_old;
  rep.test_error_new = er.test_error_new;
  rep.robust_error_old = er.robust_error_old;
  rep.robust_error_new = er.robust_error_new;
  rep.nf = nf_rate(records);
  rep.pf = pf_rate(records);
  rep.rnf = rnf_rate(records);
  rep.rpf = rpf_rate(records);
  rep.joint_nf_rnf = joint_flip_rate(records);
  rep.test_set_hash = test_set_hash;
  rep.old_model_hash = old_model_hash;
  rep.new_model_hash = new_model_hash;
  rep.bootstrap.test_error = bootstrap_std(
      records,
      [](std::span<const EvalRecord> r) {
        return error_rates(r).test_error_new;
      },
      bootstrap_B, mix_seed({bootstrap_seed, 1}));
  rep.bootstrap.nf =
      bootstrap_std(records, nf_rate, bootstrap_B, mix_seed({bootstrap_seed, 2}));
  rep.bootstrap.robust_error = bootstrap_std(
      records,
      [](std::span<const EvalRecord> r) {
        return error_rates(r).robust_error_new;
      },
      bootstrap_B, mix_seed({bootstrap_seed, 3}));
  rep.bootstrap.rnf = bootstrap_std(records, rnf_rate, bootstrap_B,
                                    mix_seed({bootstrap_seed, 4}));
  return rep;
}

Deltas delta_metrics(const FlipReport& method_report,
                     const FlipReport& naive_report) {
  if (method_report.test_set_hash != naive_report.test_set_hash)
    throw ConfigError("delta metrics: reports target different test sets");
  if (method_report.old_model_hash != naive_report.old_model_hash)
    throw ConfigError("delta metrics: reports target different old models");
  Deltas d;
  d.test_error = naive_report.test_error_new - method_report.test_error_new;
  d.nfs = naive_report.nf - method_report.nf;
  d.robust_error =
      naive_report.robust_error_new - method_report.robust_error_new;
  d.rnfs = naive_report.rnf - method_report.rnf;
  return d;
}

void apply_deltas(FlipReport& method_report, const FlipReport& naive_report) {
  const Deltas d = delta_metrics(method_report, naive_report);
  method_report.has_deltas = true;
  method_report.delta_test_error = d.test_error;
  method_report.delta_nfs = d.nfs;
  method_report.delta_robust_error = d.robust_error;
  method_report.delta_rnfs = d.rnfs;
}

// ---------------------------------------------------------------------
//  PairEvaluator
// ---------------------------------------------------------------------

PairEvaluator::PairEvaluator(const LabeledSet& set, PerturbationDomain domain,
                             AttackConfig eval_cfg)
    : set_(set), domain_(domain), cfg_(eval_cfg), set_hash_(set_hash(set)) {
  domain_.validate();
}

const PairEvaluator::ModelEval& PairEvaluator::eval_model(const Model& m) {
  const std::uint64_t h = model_hash(m);
  const auto it = cache_.find(h);
  if (it != cache_.end()) return it->second;

  ModelEval ev;
  const std::size_t n = set_.size();
  const Tensor Z = predict_logits_batch(m, set_.x);
  ev.labels.resize(n);
  ev.robust.resize(n);
  std::size_t errs = 0, broken = 0;
  for (std::size_t j = 0; j < n; ++j) {
    ev.labels[j] =
        argmax_lowest(Z.data.data() + j * Z.shape[1], Z.shape[1]);
    AttackConfig cfg = cfg_;
    cfg.seed = mix_seed({cfg_.seed, h, j});
    const bool rob = is_robust(m, set_.row(j), set_.y[j], domain_, cfg);
    ev.robust[j] = rob ? 1 : 0;
    errs += ev.labels[j] != set_.y[j] ? 1 : 0;
    broken += rob ? 0 : 1;
  }
  ev.test_error = 100.0 * static_cast<double>(errs) / static_cast<double>(n);
  ev.robust_error =
      100.0 * static_cast<double>(broken) / static_cast<double>(n);
  return cache_.emplace(h, std::move(ev)).first->second;
}

std::vector<EvalRecord> PairEvaluator::records(const Model& old_m,
                                               const Model& new_m) {
  const ModelEval& o = eval_model(old_m);
  const ModelEval& nw = eval_model(new_m);
  std::vector<EvalRecord> out(set_.size());
  for (std::size_t j = 0; j < set_.size(); ++j) {
    out[j].y = set_.y[j];
    out[j].old_label = o.labels[j];
    out[j].new_label = nw.labels[j];
    out[j].old_robust = o.robust[j];
    out[j].new_robust = nw.robust[j];
  }
  return out;
}

}  // namespace flipguard
