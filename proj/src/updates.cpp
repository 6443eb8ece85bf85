#include "flipguard/updates.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "flipguard/rng.hpp"

namespace flipguard {

void UpdateSpec::validate() const {
  if (epochs < 0) throw ConfigError("update: epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("update: batch_size must be >= 1");
  if (!(learning_rate >= 0) || !std::isfinite(learning_rate))
    throw ConfigError("update: bad learning rate");
  const bool needs_old = method == UpdateMethod::Pct ||
                         method == UpdateMethod::Pcat ||
                         method == UpdateMethod::Rcat;
  if (needs_old && !old_model)
    throw ConfigError("update: method needs an old model");
  if (method == UpdateMethod::Rcat && !src_model)
    throw ConfigError("update: rcat needs a src model");
  if (method == UpdateMethod::Naive && !src_model)
    throw ConfigError("update: naive replacement needs the src model");
  if (!src_model && !fresh_spec && !old_model)
    throw ConfigError("update: no initialization (src, fresh spec or old)");
  if (needs_old) {
    if (hyperparams.method != method)
      throw ConfigError("update: hyperparameter block is for a different "
                        "method");
    hyperparams.validate();
  }
  if (method == UpdateMethod::At || method == UpdateMethod::Pcat ||
      method == UpdateMethod::Rcat)
    train_domain.validate();
}

void sgd_step(Model& m, const std::vector<Tensor>& grads, double eta) {
  if (grads.size() != m.params.size())
    throw ConfigError("sgd_step: gradient count does not match parameters");
  for (std::size_t p = 0; p < grads.size(); ++p) {
    const Tensor& g = grads[p];
    Tensor& w = m.params[p];
    if (!same_shape(g, w))
      throw ShapeError("sgd_step: gradient shape mismatch at " +
                       param_name(p));
    for (double v : g.data)
      if (!std::isfinite(v))
        throw NumericalError("sgd_step: non-finite gradient in " +
                             param_name(p));
    for (std::size_t i = 0; i < w.data.size(); ++i)
      w.data[i] -= eta * g.data[i];
  }
}

namespace {

struct MethodPlan {
  bool uses_attack = false;  // inner maximization per sample
  bool uses_old = false;     // distillation / indicator target
  bool uses_src = false;     // rcat whole-space distillation target
};

MethodPlan plan_for(UpdateMethod m) {
  switch (m) {
    case UpdateMethod::Standard: return {false, false, false};
    case UpdateMethod::At: return {true, false, false};
    case UpdateMethod::Pct: return {false, true, false};
    case UpdateMethod::Pcat: return {true, true, false};
    case UpdateMethod::Rcat: return {true, true, true};
    case UpdateMethod::Naive: return {false, false, false};
  }
  return {};
}

int effective_batch(std::size_t n, int configured) {
  if (n >= static_cast<std::size_t>(configured) * 10) return configured;
  const int scaled = static_cast<int>(n / 10);
  return std::min<int>(static_cast<int>(n), std::max(16, scaled));
}

Tensor gather_rows(const LabeledSet& data,
                   std::span<const std::size_t> idx) {
  const std::size_t d = data.dim();
  Tensor X({idx.size(), d});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(
        data.x.data.begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d,
        X.data.begin() + static_cast<std::ptrdiff_t>(i * d));
  return X;
}

// Attack objective for one sample: the same composite the parameter
// update minimizes, as a function of the input point. The old-correct
// indicator is piecewise constant, so the ascent reads it off the
// logits at the point where the gradient is taken (or uses the frozen
// clean-sample value).
Tape::NodeId attack_objective(Tape& t, Tape::NodeId xn, const Model& f,
                              const UpdateSpec& spec, int y,
                              unsigned char frozen_old_correct) {
  const int ys[1] = {y};
  const std::span<const int> yspan(ys, 1);
  const Tape::NodeId Z = forward_taped(t, f, xn);
  if (!spec.attack_full_composite || spec.method == UpdateMethod::At)
    return t.mean(batch_ce_node(t, Z, yspan));

  const Tape::NodeId O = forward_taped(t, *spec.old_model, xn);
  unsigned char oc = frozen_old_correct;
  if (spec.indicator == IndicatorMode::AtAdversarialPoint) {
    const Tensor& ov = t.value(O);
    oc = argmax_lowest(ov.data.data(), ov.size()) == y ? 1 : 0;
  }
  const std::span<const unsigned char> ocs(&oc, 1);
  if (spec.method == UpdateMethod::Pcat)
    return t.mean(batch_pct_node(t, Z, O, yspan, ocs, spec.hyperparams));
  const Tape::NodeId S = forward_taped(t, *spec.src_model, xn);
  return t.mean(batch_rcat_node(t, Z, S, O, yspan, ocs, spec.hyperparams));
}

void append_trace_validation(TrainTrace& trace, const Model& f,
                             const TraceValidation& tv,
                             std::vector<signed char>& old_proxy) {
  const LabeledSet& v = tv.val;
  const auto proxy_robust = [&](const Model& m, std::size_t j) {
    const Tensor x = v.row(j);
    if (predict_label(m, x) != v.y[j]) return false;
    return !fgsm(m, x, v.y[j], tv.domain).success;
  };
  if (old_proxy.empty()) {
    old_proxy.resize(v.size());
    for (std::size_t j = 0; j < v.size(); ++j)
      old_proxy[j] = proxy_robust(tv.old_model, j) ? 1 : 0;
  }
  const std::vector<int> old_labels =
      predict_labels_batch(tv.old_model, v.x);
  const std::vector<int> new_labels = predict_labels_batch(f, v.x);
  std::size_t nf = 0, rnf = 0;
  for (std::size_t j = 0; j < v.size(); ++j) {
    if (old_labels[j] == v.y[j] && new_labels[j] != v.y[j]) ++nf;
    if (old_proxy[j] == 1 && !proxy_robust(f, j)) ++rnf;
  }
  const double m = static_cast<double>(v.size());
  trace.val_nf.push_back(100.0 * static_cast<double>(nf) / m);
  trace.val_rnf.push_back(100.0 * static_cast<double>(rnf) / m);
}

TrainTrace train_core(const LabeledSet& data, const UpdateSpec& spec) {
  spec.validate();
  if (data.size() == 0) throw ConfigError("train: empty dataset");
  const MethodPlan plan = plan_for(spec.method);

  TrainTrace trace;
  trace.final_model =
      spec.src_model
          ? *spec.src_model
          : init_model(spec.fresh_spec ? *spec.fresh_spec
                                       : spec.old_model->spec,
                       spec.seed);
  Model& f = trace.final_model;
  f.meta.method = update_method_name(spec.method);

  const std::size_t n = data.size();
  const int B = effective_batch(n, spec.batch_size);
  std::vector<signed char> old_proxy;

  for (int e = 0; e < spec.epochs; ++e) {
    const auto perm = seeded_permutation(
        n, mix_seed({spec.seed, 0x5F1EULL, static_cast<std::uint64_t>(e)}));
    double loss_sum = 0.0;

    for (std::size_t start = 0; start < n;
         start += static_cast<std::size_t>(B)) {
      const std::size_t stop = std::min(n, start + static_cast<std::size_t>(B));
      const std::span<const std::size_t> idx(perm.data() + start,
                                             stop - start);
      const std::size_t mb = idx.size();
      Tensor Xb = gather_rows(data, idx);
      std::vector<int> yb(mb);
      for (std::size_t i = 0; i < mb; ++i) yb[i] = data.y[idx[i]];

      // Frozen-clean indicator bits, when a method wants them.
      std::vector<unsigned char> oc_clean(mb, 0);
      if (plan.uses_old) {
        const std::vector<int> ol =
            predict_labels_batch(*spec.old_model, Xb);
        for (std::size_t i = 0; i < mb; ++i)
          oc_clean[i] = ol[i] == yb[i] ? 1 : 0;
      }

      // Inner maximization: one FAT step per sample against the
      // current parameters, streams keyed by (seed, epoch, sample).
      Tensor Xt = Xb;
      std::vector<unsigned char> oc(mb, 0);
      if (plan.uses_attack) {
        const std::size_t d = data.dim();
        for (std::size_t i = 0; i < mb; ++i) {
          Tensor xi({d});
          std::copy_n(Xb.data.begin() + static_cast<std::ptrdiff_t>(i * d),
                      d, xi.data.begin());
          const auto obj = [&](Tape& t, Tape::NodeId xn) {
            return attack_objective(t, xn, f, spec, yb[i], oc_clean[i]);
          };
          const Tensor adv = fat_step_point(
              obj, xi, spec.train_domain,
              mix_seed({spec.seed, 0xFA7ULL, static_cast<std::uint64_t>(e),
                        static_cast<std::uint64_t>(idx[i])}));
          std::copy_n(adv.data.begin(), d,
                      Xt.data.begin() + static_cast<std::ptrdiff_t>(i * d));
        }
      }
      if (plan.uses_old) {
        if (spec.indicator == IndicatorMode::AtAdversarialPoint &&
            plan.uses_attack) {
          const std::vector<int> ol =
              predict_labels_batch(*spec.old_model, Xt);
          for (std::size_t i = 0; i < mb; ++i)
            oc[i] = ol[i] == yb[i] ? 1 : 0;
        } else {
          oc = oc_clean;
        }
      }

      // Parameter update on the mean batch loss; reference logits are
      // constants at the (possibly adversarial) training points.
      Tape t;
      const Tape::NodeId Xn = t.constant(Xt);
      std::vector<Tape::NodeId> pnodes;
      const Tape::NodeId Z = forward_taped(t, f, Xn, &pnodes);
      Tape::NodeId per_sample = Z;
      switch (spec.method) {
        case UpdateMethod::Standard:
        case UpdateMethod::At:
          per_sample = batch_ce_node(t, Z, yb);
          break;
        case UpdateMethod::Pct:
        case UpdateMethod::Pcat: {
          const Tape::NodeId O =
              t.constant(predict_logits_batch(*spec.old_model, Xt));
          per_sample = batch_pct_node(t, Z, O, yb, oc, spec.hyperparams);
          break;
        }
        case UpdateMethod::Rcat: {
          const Tape::NodeId S =
              t.constant(predict_logits_batch(*spec.src_model, Xt));
          const Tape::NodeId O =
              t.constant(predict_logits_batch(*spec.old_model, Xt));
          per_sample =
              batch_rcat_node(t, Z, S, O, yb, oc, spec.hyperparams);
          break;
        }
        case UpdateMethod::Naive:
          throw ConfigError("train: naive replacement trains nothing");
      }
      const Tape::NodeId loss = t.mean(per_sample);
      const double batch_loss = t.value(loss).item();
      if (!std::isfinite(batch_loss))
        throw NumericalError("train: non-finite batch loss at epoch " +
                             std::to_string(e));
      t.backward(loss);
      std::vector<Tensor> grads;
      grads.reserve(pnodes.size());
      for (const Tape::NodeId p : pnodes) grads.push_back(t.grad(p));
      sgd_step(f, grads, spec.learning_rate);
      loss_sum += batch_loss * static_cast<double>(mb);
    }

    trace.epoch_mean_loss.push_back(loss_sum / static_cast<double>(n));
    if (spec.trace_validation)
      append_trace_validation(trace, f, *spec.trace_validation, old_proxy);
  }
  return trace;
}

UpdateSpec with_method(const UpdateSpec& base, UpdateMethod m) {
  UpdateSpec s = base;
  s.method = m;
  return s;
}

}  // namespace

TrainTrace train(const LabeledSet& data, const UpdateSpec& spec) {
  if (spec.method == UpdateMethod::Naive) {
    // Pure replacement: hand back the src model untouched.
    spec.validate();
    TrainTrace tr;
    tr.final_model = *spec.src_model;
    tr.final_model.meta.method = "naive";
    return tr;
  }
  return train_core(data, spec);
}

TrainTrace train_standard(const LabeledSet& data, const UpdateSpec& spec) {
  return train_core(data, with_method(spec, UpdateMethod::Standard));
}

TrainTrace train_at(const LabeledSet& data, const UpdateSpec& spec) {
  return train_core(data, with_method(spec, UpdateMethod::At));
}

TrainTrace train_pct(const LabeledSet& data, const UpdateSpec& spec) {
  return train_core(data, with_method(spec, UpdateMethod::Pct));
}

TrainTrace train_pcat(const LabeledSet& data, const UpdateSpec& spec) {
  return train_core(data, with_method(spec, UpdateMethod::Pcat));
}

TrainTrace train_rcat(const LabeledSet& data, const UpdateSpec& spec) {
  return train_core(data, with_method(spec, UpdateMethod::Rcat));
}

GridSearchResult grid_search(const LabeledSet& train_set,
                             const LabeledSet& val_set,
                             const UpdateSpec& base,
                             std::span<const UpdateHyperparams> grid,
                             const AttackConfig& eval_cfg,
                             const PerturbationDomain& eval_domain) {
  if (grid.empty()) throw ConfigError("grid_search: empty grid");
  if (!base.old_model)
    throw ConfigError("grid_search: needs the old model for scoring");

  // Leakage guard: identical samples must not appear in both sets.
  {
    const auto th = sample_hashes(train_set);
    const std::set<std::uint64_t> train_ids(th.begin(), th.end());
    for (std::uint64_t h : sample_hashes(val_set))
      if (train_ids.count(h))
        throw ConfigError("grid_search: validation sample also in training "
                          "set");
  }

  PairEvaluator evaluator(val_set, eval_domain, eval_cfg);
  GridSearchResult out;
  double best_sum = 0, best_rnf = 0;
  bool have_best = false;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    UpdateSpec spec = base;
    spec.method = grid[i].method;
    spec.hyperparams = grid[i];
    spec.validate();
    TrainTrace tr = train(train_set, spec);
    const auto records =
        evaluator.records(*base.old_model, tr.final_model);
    FlipReport rep = make_flip_report(
        records, update_method_name(spec.method), evaluator.test_set_hash(),
        model_hash(*base.old_model), model_hash(tr.final_model),
        mix_seed({base.seed, 0x912DULL, i}));
    const double sum = rep.nf + rep.rnf;
    if (!have_best || sum < best_sum ||
        (sum == best_sum && rep.rnf < best_rnf)) {
      have_best = true;
      best_sum = sum;
      best_rnf = rep.rnf;
      out.best = grid[i];
      out.best_index = i;
    }
    out.reports.push_back(std::move(rep));
    out.models.push_back(std::move(tr.final_model));
  }
  return out;
}

}  // namespace flipguard
