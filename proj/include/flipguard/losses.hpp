#pragma once

#include <span>
#include <vector>

#include "flipguard/tensor.hpp"

namespace flipguard {

enum class UpdateMethod : std::uint8_t { Naive, Standard, At, Pct, Pcat, Rcat };

const char* update_method_name(UpdateMethod m);
UpdateMethod update_method_from_name(const std::string& s);

// Where the "old model was correct" indicator inside the adversarial
// objectives is evaluated: at the current adversarial candidate (the
// literal objective) or frozen on the clean sample.
enum class IndicatorMode : std::uint8_t { AtAdversarialPoint, FrozenClean };

// Trade-off weights of the composite objectives.
//   pct/pcat: loss = CE + lambda * (alpha + beta*[old correct]) * L_D
//   rcat:     loss = gamma*CE + alpha*L_D(f,src) + beta*[old correct]*L_D(f,old)
// with gamma = 1 - alpha - beta for rcat (the three weights sum to 1).
struct UpdateHyperparams {
  UpdateMethod method = UpdateMethod::Pct;
  double lambda = 1.0;
  double alpha = 1.0;
  double beta = 0.0;
  double gamma = 0.0;  // rcat only; must equal 1 - alpha - beta exactly

  static UpdateHyperparams pct(double lambda, double alpha, double beta);
  static UpdateHyperparams pcat(double lambda, double alpha, double beta);
  static UpdateHyperparams rcat(double alpha, double beta);

  void validate() const;
  // Penalty weight of the equivalent penalized objective
  // (lambda*beta for pct/pcat, beta for rcat).
  double mu() const;
};

// ---------------------------------------------------------------------
//  Scalar losses. Each has a tape builder (for gradients) and a plain
//  value wrapper that evaluates the builder on a scratch tape.
// ---------------------------------------------------------------------

// -log softmax(logits)[y], computed through logsumexp.
Tape::NodeId cross_entropy_node(Tape& t, Tape::NodeId logits, int y);
double cross_entropy(const Tensor& logits, int y);

// 0.5 * ||f - ref||_2^2 over logits.
Tape::NodeId logit_distill_node(Tape& t, Tape::NodeId f, Tape::NodeId ref);
double logit_distill(const Tensor& f, const Tensor& ref);

// (alpha + beta*[old_correct]) * logit_distill(f, old).
Tape::NodeId focal_distill_node(Tape& t, Tape::NodeId f, Tape::NodeId old,
                                bool old_correct, double alpha, double beta);
double focal_distill(const Tensor& f, const Tensor& old, bool old_correct,
                     double alpha, double beta);

// Composite per-sample objectives. For pct the indicator comes from the
// clean-sample old logits passed in; for pcat/rcat the caller supplies
// it (evaluated wherever the training loop decided).
Tape::NodeId pct_sample_loss_node(Tape& t, Tape::NodeId f_logits,
                                  Tape::NodeId old_logits, int y,
                                  const UpdateHyperparams& hp);
double pct_sample_loss(const Tensor& f_logits, const Tensor& old_logits,
                       int y, const UpdateHyperparams& hp);

Tape::NodeId pcat_sample_loss_node(Tape& t, Tape::NodeId f_logits_adv,
                                   Tape::NodeId old_logits_adv, int y,
                                   bool old_correct_adv,
                                   const UpdateHyperparams& hp);
double pcat_sample_loss(const Tensor& f_logits_adv,
                        const Tensor& old_logits_adv, int y,
                        bool old_correct_adv, const UpdateHyperparams& hp);

Tape::NodeId rcat_sample_loss_node(Tape& t, Tape::NodeId f_logits_adv,
                                   Tape::NodeId src_logits_adv,
                                   Tape::NodeId old_logits_adv, int y,
                                   bool old_correct_adv,
                                   const UpdateHyperparams& hp);
double rcat_sample_loss(const Tensor& f_logits_adv,
                        const Tensor& src_logits_adv,
                        const Tensor& old_logits_adv, int y,
                        bool old_correct_adv, const UpdateHyperparams& hp);

// ---------------------------------------------------------------------
//  Batch builders used by the training loops. Z is a {m, c} logit node;
//  reference logits enter as constants. All return {m} vectors of
//  per-sample losses; the loop takes their mean.
// ---------------------------------------------------------------------

// Per-row cross-entropy.
Tape::NodeId batch_ce_node(Tape& t, Tape::NodeId Z, std::span<const int> y);

// Per-row 0.5*||Z_i - R_i||^2.
Tape::NodeId batch_distill_node(Tape& t, Tape::NodeId Z, Tape::NodeId R);

Tape::NodeId batch_pct_node(Tape& t, Tape::NodeId Z, Tape::NodeId old_Z,
                            std::span<const int> y,
                            std::span<const unsigned char> old_correct,
                            const UpdateHyperparams& hp);

Tape::NodeId batch_rcat_node(Tape& t, Tape::NodeId Z, Tape::NodeId src_Z,
                             Tape::NodeId old_Z, std::span<const int> y,
                             std::span<const unsigned char> old_correct,
                             const UpdateHyperparams& hp);

}  // namespace flipguard
