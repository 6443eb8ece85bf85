#include "flipguard/losses.hpp"

#include <cmath>

#include "flipguard/model.hpp"

namespace flipguard {

const char* update_method_name(UpdateMethod m) {
  switch (m) {
    case UpdateMethod::Naive: return "naive";
    case UpdateMethod::Standard: return "standard";
    case UpdateMethod::At: return "at";
    case UpdateMethod::Pct: return "pct";
    case UpdateMethod::Pcat: return "pcat";
    case UpdateMethod::Rcat: return "rcat";
  }
  return "?";
}

UpdateMethod update_method_from_name(const std::string& s) {
  if (s == "naive") return UpdateMethod::Naive;
  if (s == "standard") return UpdateMethod::Standard;
  if (s == "at") return UpdateMethod::At;
  if (s == "pct") return UpdateMethod::Pct;
  if (s == "pcat") return UpdateMethod::Pcat;
  if (s == "rcat") return UpdateMethod::Rcat;
  throw ConfigError("unknown update method '" + s + "'");
}

UpdateHyperparams UpdateHyperparams::pct(double lambda, double alpha,
                                         double beta) {
  UpdateHyperparams hp;
  hp.method = UpdateMethod::Pct;
  hp.lambda = lambda;
  hp.alpha = alpha;
  hp.beta = beta;
  hp.validate();
  return hp;
}

UpdateHyperparams UpdateHyperparams::pcat(double lambda, double alpha,
                                          double beta) {
  UpdateHyperparams hp = pct(lambda, alpha, beta);
  hp.method = UpdateMethod::Pcat;
  return hp;
}

UpdateHyperparams UpdateHyperparams::rcat(double alpha, double beta) {
  UpdateHyperparams hp;
  hp.method = UpdateMethod::Rcat;
  hp.lambda = 0.0;
  hp.alpha = alpha;
  hp.beta = beta;
  hp.gamma = 1.0 - alpha - beta;
  hp.validate();
  return hp;
}

void UpdateHyperparams::validate() const {
  switch (method) {
    case UpdateMethod::Pct:
    case UpdateMethod::Pcat:
      if (lambda < 0 || alpha < 0 || beta < 0)
        throw ConfigError("pct/pcat hyperparameters must be non-negative");
      return;
    case UpdateMethod::Rcat:
      if (alpha < 0 || alpha > 1 || beta < 0 || beta > 1)
        throw ConfigError("rcat: alpha and beta must lie in [0,1]");
      if (gamma != 1.0 - alpha - beta)
        throw ConfigError("rcat: gamma must equal 1 - alpha - beta exactly");
      if (gamma < 0)
        throw ConfigError("rcat: alpha + beta must not exceed 1");
      return;
    default:
      return;  // naive/standard/at carry no weights
  }
}

double UpdateHyperparams::mu() const {
  return method == UpdateMethod::Rcat ? beta : lambda * beta;
}

// ---------------------------------------------------------------------
//  Scalar losses
// ---------------------------------------------------------------------

namespace {

Tensor onehot(std::size_t c, int y) {
  Tensor t({c});
  if (y < 0 || static_cast<std::size_t>(y) >= c)
    throw DomainError("label " + std::to_string(y) + " out of range for " +
                      std::to_string(c) + " classes");
  t.data[static_cast<std::size_t>(y)] = 1.0;
  return t;
}

}  // namespace

Tape::NodeId cross_entropy_node(Tape& t, Tape::NodeId logits, int y) {
  const Tensor& z = t.value(logits);
  if (z.rank() != 1)
    throw ShapeError("cross_entropy: logits must be a vector, got " +
                     z.shape_str());
  const Tape::NodeId lse = t.logsumexp_rows(logits);
  const Tape::NodeId zy =
      t.sum(t.mul(logits, t.constant(onehot(z.shape[0], y))));
  return t.sub(lse, zy);
}

double cross_entropy(const Tensor& logits, int y) {
  Tape t;
  return t.value(cross_entropy_node(t, t.constant(logits), y)).item();
}

Tape::NodeId logit_distill_node(Tape& t, Tape::NodeId f, Tape::NodeId ref) {
  if (!same_shape(t.value(f), t.value(ref)))
    throw ShapeError("logit_distill: shapes " + t.value(f).shape_str() +
                     " vs " + t.value(ref).shape_str());
  return t.scale(t.squared_l2(t.sub(f, ref)), 0.5);
}

double logit_distill(const Tensor& f, const Tensor& ref) {
  Tape t;
  return t.value(logit_distill_node(t, t.constant(f), t.constant(ref)))
      .item();
}

Tape::NodeId focal_distill_node(Tape& t, Tape::NodeId f, Tape::NodeId old,
                                bool old_correct, double alpha, double beta) {
  const double w = alpha + beta * (old_correct ? 1.0 : 0.0);
  return t.scale(logit_distill_node(t, f, old), w);
}

double focal_distill(const Tensor& f, const Tensor& old, bool old_correct,
                     double alpha, double beta) {
  Tape t;
  return t
      .value(focal_distill_node(t, t.constant(f), t.constant(old),
                                old_correct, alpha, beta))
      .item();
}

Tape::NodeId pct_sample_loss_node(Tape& t, Tape::NodeId f_logits,
                                  Tape::NodeId old_logits, int y,
                                  const UpdateHyperparams& hp) {
  const Tensor& oz = t.value(old_logits);
  const bool old_correct =
      argmax_lowest(oz.data.data(), oz.size()) == y;  // clean-sample test
  const Tape::NodeId ce = cross_entropy_node(t, f_logits, y);
  const Tape::NodeId fd = focal_distill_node(t, f_logits, old_logits,
                                             old_correct, hp.alpha, hp.beta);
  return t.add(ce, t.scale(fd, hp.lambda));
}

double pct_sample_loss(const Tensor& f_logits, const Tensor& old_logits,
                       int y, const UpdateHyperparams& hp) {
  Tape t;
  return t
      .value(pct_sample_loss_node(t, t.constant(f_logits),
                                  t.constant(old_logits), y, hp))
      .item();
}

Tape::NodeId pcat_sample_loss_node(Tape& t, Tape::NodeId f_logits_adv,
                                   Tape::NodeId old_logits_adv, int y,
                                   bool old_correct_adv,
                                   const UpdateHyperparams& hp) {
  const Tape::NodeId ce = cross_entropy_node(t, f_logits_adv, y);
  const Tape::NodeId fd =
      focal_distill_node(t, f_logits_adv, old_logits_adv, old_correct_adv,
                         hp.alpha, hp.beta);
  return t.add(ce, t.scale(fd, hp.lambda));
}

double pcat_sample_loss(const Tensor& f_logits_adv,
                        const Tensor& old_logits_adv, int y,
                        bool old_correct_adv, const UpdateHyperparams& hp) {
  Tape t;
  return t
      .value(pcat_sample_loss_node(t, t.constant(f_logits_adv),
                                   t.constant(old_logits_adv), y,
                                   old_correct_adv, hp))
      .item();
}

Tape::NodeId rcat_sample_loss_node(Tape& t, Tape::NodeId f_logits_adv,
                                   Tape::NodeId src_logits_adv,
                                   Tape::NodeId old_logits_adv, int y,
                                   bool old_correct_adv,
                                   const UpdateHyperparams& hp) {
  const Tape::NodeId ce =
      t.scale(cross_entropy_node(t, f_logits_adv, y), hp.gamma);
  const Tape::NodeId src_term =
      t.scale(logit_distill_node(t, f_logits_adv, src_logits_adv), hp.alpha);
  const double bw = hp.beta * (old_correct_adv ? 1.0 : 0.0);
  const Tape::NodeId old_term =
      t.scale(logit_distill_node(t, f_logits_adv, old_logits_adv), bw);
  return t.add(t.add(ce, src_term), old_term);
}

double rcat_sample_loss(const Tensor& f_logits_adv,
                        const Tensor& src_logits_adv,
                        const Tensor& old_logits_adv, int y,
                        bool old_correct_adv, const UpdateHyperparams& hp) {
  Tape t;
  return t
      .value(rcat_sample_loss_node(t, t.constant(f_logits_adv),
                                   t.constant(src_logits_adv),
                                   t.constant(old_logits_adv), y,
                                   old_correct_adv, hp))
      .item();
}

// ---------------------------------------------------------------------
//  Batch builders
// ---------------------------------------------------------------------

namespace {

Tensor onehot_rows(std::size_t m, std::size_t c, std::span<const int> y) {
  Tensor t({m, c});
  for (std::size_t i = 0; i < m; ++i) {
    if (y[i] < 0 || static_cast<std::size_t>(y[i]) >= c)
      throw DomainError("label out of range in batch");
    t.at(i, static_cast<std::size_t>(y[i])) = 1.0;
  }
  return t;
}

}  // namespace

Tape::NodeId batch_ce_node(Tape& t, Tape::NodeId Z, std::span<const int> y) {
  const Tensor& z = t.value(Z);
  if (z.rank() != 2 || z.shape[0] != y.size())
    throw ShapeError("batch cross_entropy: logits " + z.shape_str() +
                     " vs " + std::to_string(y.size()) + " labels");
  const Tape::NodeId lse = t.logsumexp_rows(Z);
  const Tape::NodeId zy = t.sum_rows(
      t.mul(Z, t.constant(onehot_rows(z.shape[0], z.shape[1], y))));
  return t.sub(lse, zy);
}

Tape::NodeId batch_distill_node(Tape& t, Tape::NodeId Z, Tape::NodeId R) {
  if (!same_shape(t.value(Z), t.value(R)))
    throw ShapeError("batch distill: shapes " + t.value(Z).shape_str() +
                     " vs " + t.value(R).shape_str());
  const Tape::NodeId d = t.sub(Z, R);
  return t.scale(t.sum_rows(t.mul(d, d)), 0.5);
}

Tape::NodeId batch_pct_node(Tape& t, Tape::NodeId Z, Tape::NodeId old_Z,
                            std::span<const int> y,
                            std::span<const unsigned char> old_correct,
                            const UpdateHyperparams& hp) {
  const std::size_t m = t.value(Z).shape[0];
  const Tape::NodeId ce = batch_ce_node(t, Z, y);
  Tensor w({m});
  for (std::size_t i = 0; i < m; ++i)
    w.data[i] = hp.lambda * (hp.alpha + hp.beta * (old_correct[i] ? 1.0 : 0.0));
  const Tape::NodeId fd = t.mul(batch_distill_node(t, Z, old_Z),
                                t.constant(std::move(w)));
  return t.add(ce, fd);
}

Tape::NodeId batch_rcat_node(Tape& t, Tape::NodeId Z, Tape::NodeId src_Z,
                             Tape::NodeId old_Z, std::span<const int> y,
                             std::span<const unsigned char> old_correct,
                             const UpdateHyperparams& hp) {
  const std::size_t m = t.value(Z).shape[0];
  const Tape::NodeId ce = t.scale(batch_ce_node(t, Z, y), hp.gamma);
  const Tape::NodeId src_term =
      t.scale(batch_distill_node(t, Z, src_Z), hp.alpha);
  Tensor w({m});
  for (std::size_t i = 0; i < m; ++i)
    w.data[i] = hp.beta * (old_correct[i] ? 1.0 : 0.0);
  const Tape::NodeId old_term =
      t.mul(batch_distill_node(t, Z, old_Z), t.constant(std::move(w)));
  return t.add(t.add(ce, src_term), old_term);
}

}  // namespace flipguard
