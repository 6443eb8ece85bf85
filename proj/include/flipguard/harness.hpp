#pragma once

#include <optional>
#include <string>
#include <vector>

#include "flipguard/theory.hpp"
#include "flipguard/updates.hpp"

namespace flipguard {

// =====================================================================
//  Experiment orchestration: datasets, model zoos, update matrices,
//  single and sequential updates, the consistency experiment, and
//  report files. Everything is a pure function of (config, seed);
//  reports embed no clocks, so identical runs are byte-identical.
// =====================================================================

struct DatasetConfig {
  std::string kind = "benchmark";  // benchmark|gaussians|moons|rings|csv|idx
  std::size_t n = 3000;
  std::size_t dim = 2;
  std::size_t classes = 4;
  double margin = 4.0;
  double noise = 0.1;
  std::string path;  // csv/idx only
};

struct ZooEntryConfig {
  std::string name;
  std::vector<std::size_t> hidden;
  UpdateMethod train_method = UpdateMethod::Standard;  // standard or at
  std::uint64_t seed = 1;
  int epochs = 0;         // 0: use the experiment-wide zoo budget
  double lr = 0.0;        // 0: use the experiment-wide zoo rate
  double train_eps = 0.0; // 0: adversarial entries train at cfg.eps
};

struct ExperimentConfig {
  DatasetConfig dataset;
  std::vector<ZooEntryConfig> zoo;
  double eps = 0.05;  // shared training/evaluation linf budget
  int eval_iters = 50;
  int eval_restarts = 2;
  int zoo_epochs = 500;
  double zoo_lr = 1.0;
  int zoo_batch = 500;
  int update_epochs = 24;
  int update_batch = 500;
  double update_lr = 0.01;
  std::vector<UpdateHyperparams> pct_grid, pcat_grid, rcat_grid;
  UpdateHyperparams seq_pct, seq_pcat, seq_rcat;  // fixed across chain steps
  std::string out_dir = "out";
  std::uint64_t master_seed = 42;

  // Desk benchmark defaults: the rings+blobs mixture, a five-model zoo
  // (two widths each of standard and adversarial training plus a wide
  // robust model), eps = 0.03, and the standard hyperparameter grids.
  static ExperimentConfig defaults();

  PerturbationDomain domain() const { return {eps, 0.0, 1.0}; }
  const std::vector<UpdateHyperparams>& grid_for(UpdateMethod m) const;
};

// Key-value experiment file; see the README for the schema. Unknown
// keys are configuration errors.
ExperimentConfig load_config(const std::string& path);

struct ZooModel {
  Model model;
  double test_error = 0.0;
  double robust_error = 0.0;
};

struct Zoo {
  std::vector<ZooModel> entries;  // sorted by robust error, descending

  std::size_t index_of(const std::string& name) const;
};

// Trains every zoo entry from scratch (standard or adversarial per
// entry), measures test and robust error on the test split, sorts by
// robust error descending and persists checkpoints under out_dir.
Zoo build_model_zoo(const ExperimentConfig& cfg, const DatasetSplit& split);

DatasetSplit make_dataset(const ExperimentConfig& cfg);

struct MatrixResult {
  std::vector<std::string> names;  // zoo order
  std::vector<double> test_error, robust_error;
  std::vector<double> nf, rnf;  // row-major old x new
  std::size_t k = 0;

  double nf_at(std::size_t o, std::size_t n2) const { return nf[o * k + n2]; }
  double rnf_at(std::size_t o, std::size_t n2) const {
    return rnf[o * k + n2];
  }
};

// Naive-replacement NF/RNF rates for every ordered zoo pair, built
// from one shared robustness-bit cache. Diagonal entries are exact
// zeros.
MatrixResult run_update_matrix(const Zoo& zoo, const ExperimentConfig& cfg,
                               const DatasetSplit& split);

struct UpdateOutcome {
  FlipReport naive_report;
  FlipReport method_report;  // == naive_report when method is naive
  std::optional<GridSearchResult> grid;
  Model new_model;
};

// Full single-update pipeline: grid search on the validation split for
// the trainable methods, final training, test-set evaluation, deltas
// against the naive replacement of the same pair.
UpdateOutcome run_single_update(const Zoo& zoo, std::size_t old_index,
                                std::size_t new_index, UpdateMethod method,
                                const ExperimentConfig& cfg,
                                const DatasetSplit& split);

// The default update pair: among improving replacements (new model with
// strictly lower robust error), the one with the highest naive RNF rate
// on the validation split. Ties break toward the lower index pair.
std::pair<std::size_t, std::size_t> select_default_update(
    const Zoo& zoo, const ExperimentConfig& cfg, const DatasetSplit& split);

// Sequential updates along a zoo chain with fixed hyperparameters;
// step k updates the previous step's output toward zoo chain[k].
std::vector<FlipReport> run_sequential(const Zoo& zoo,
                                       std::span<const std::size_t> chain,
                                       UpdateMethod method,
                                       const ExperimentConfig& cfg,
                                       const DatasetSplit& split);

// Default chain: the adversarially-trained zoo members, worst robust
// error first (the zoo order), so every step replaces a robust model
// with a more robust one. Falls back to the whole zoo if fewer than
// two robust members exist.
std::vector<std::size_t> default_chain(const Zoo& zoo);

struct ConsistencyOutcome {
  RateFit zero_one_free, zero_one_constrained;
  RateFit robust_free, robust_constrained;
};

ConsistencyOutcome run_consistency(std::span<const std::size_t> n_list,
                                   int trials, std::uint64_t seed);

// ---------------------------------------------------------------------
//  Reports ("report_v1"): one machine-readable JSON file and one
//  human-readable table per experiment; percentages with two decimals,
//  improvements printed with a leading '+'.
// ---------------------------------------------------------------------

std::string flip_reports_json(const std::string& experiment_id,
                              const std::string& config_echo,
                              std::uint64_t master_seed,
                              std::span<const FlipReport> reports);
std::vector<FlipReport> parse_flip_reports(const std::string& json_text);
std::string render_table(std::span<const FlipReport> reports);

std::string matrix_json(const std::string& experiment_id,
                        const std::string& config_echo,
                        std::uint64_t master_seed, const MatrixResult& m);
std::string render_matrix(const MatrixResult& m);

std::string consistency_json(const std::string& experiment_id,
                             std::uint64_t seed,
                             const ConsistencyOutcome& c);
std::string render_consistency(const ConsistencyOutcome& c);

// Writes text to dir/name, creating dir if needed.
void emit_file(const std::string& dir, const std::string& name,
               const std::string& text);

std::string config_echo(const ExperimentConfig& cfg);

}  // namespace flipguard
