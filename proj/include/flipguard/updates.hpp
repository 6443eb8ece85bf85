#pragma once

#include <optional>
#include <span>

#include "flipguard/metrics.hpp"

namespace flipguard {

struct TrainTrace {
  std::vector<double> epoch_mean_loss;  // one entry per epoch
  std::vector<double> val_nf, val_rnf;  // per-epoch estimates, if requested
  Model final_model;
};

// Optional per-epoch validation flip estimates written into the trace.
// Robustness is proxied with a single FGSM step to keep epochs cheap.
struct TraceValidation {
  LabeledSet val;
  Model old_model;
  PerturbationDomain domain;
};

// One update run: which objective, against which frozen models, with
// which budget. Training always starts from src_model when present,
// otherwise from a fresh init of fresh_spec (or of the old model's
// architecture).
struct UpdateSpec {
  UpdateMethod method = UpdateMethod::Standard;
  std::optional<Model> old_model;  // distillation / indicator target
  std::optional<Model> src_model;  // initialization and rcat src target
  std::optional<ModelSpec> fresh_spec;
  UpdateHyperparams hyperparams;
  int epochs = 12;
  int batch_size = 500;
  double learning_rate = 1e-3;
  PerturbationDomain train_domain;  // FAT budget for at/pcat/rcat
  std::uint64_t seed = 0;
  IndicatorMode indicator = IndicatorMode::AtAdversarialPoint;
  // Inner maximization ascends the full composite objective; set false
  // to ascend cross-entropy only, as classic fast adversarial training
  // recipes do.
  bool attack_full_composite = true;
  std::optional<TraceValidation> trace_validation;

  void validate() const;
};

// Plain gradient step w <- w - eta * grad, one tensor per parameter.
// Aborts with the parameter name on a non-finite gradient.
void sgd_step(Model& m, const std::vector<Tensor>& grads, double eta);

// Epoch loop shared by every method: seeded shuffle, fixed batch
// slices, optional per-sample FAT inner maximization, one gradient
// step per batch on the mean batch loss. Batches shrink to n/10
// (minimum 16) on datasets smaller than 10x the configured size.
TrainTrace train(const LabeledSet& data, const UpdateSpec& spec);

TrainTrace train_standard(const LabeledSet& data, const UpdateSpec& spec);
TrainTrace train_at(const LabeledSet& data, const UpdateSpec& spec);
TrainTrace train_pct(const LabeledSet& data, const UpdateSpec& spec);
TrainTrace train_pcat(const LabeledSet& data, const UpdateSpec& spec);
TrainTrace train_rcat(const LabeledSet& data, const UpdateSpec& spec);

struct GridSearchResult {
  UpdateHyperparams best;
  std::size_t best_index = 0;
  std::vector<FlipReport> reports;  // one per grid point, grid order
  std::vector<Model> models;        // trained model per grid point
};

// Trains one model per grid point (each from the same initialization),
// scores NF+RNF on the validation set against the old model, returns
// the argmin. Ties break toward lower RNF, then lower grid index.
// Training and validation sets must not share samples.
GridSearchResult grid_search(const LabeledSet& train_set,
                             const LabeledSet& val_set,
                             const UpdateSpec& base,
                             std::span<const UpdateHyperparams> grid,
                             const AttackConfig& eval_cfg,
                             const PerturbationDomain& eval_domain);

}  // namespace flipguard
