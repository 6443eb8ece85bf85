#include <cmath>

#include "doctest.h"
#include "flipguard/losses.hpp"
#include "flipguard/model.hpp"
#include "test_util.hpp"

using namespace flipguard;
using fgtest::random_tensor;

TEST_CASE("cross-entropy: uniform logits, stability, naive-formula oracle") {
  CHECK(cross_entropy(Tensor::vector({0.4, 0.4}), 0) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // Huge logits must not overflow.
  const double big = cross_entropy(Tensor::vector({1000.0, 0.0}), 0);
  CHECK(std::isfinite(big));
  CHECK(big == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(cross_entropy(Tensor::vector({1000.0, 0.0}), 1) ==
        doctest::Approx(1000.0));

  // Extended-precision naive formula in a safe range.
  Xoshiro256 rng(41);
  for (int it = 0; it < 200; ++it) {
    Tensor z = random_tensor({5}, rng, -6.0, 6.0);
    const int y = static_cast<int>(rng.below(5));
    long double denom = 0.0L;
    for (double v : z.data) denom += std::exp(static_cast<long double>(v));
    const long double want =
        -std::log(std::exp(static_cast<long double>(z.data[y])) / denom);
    CHECK(fgtest::rel_err(cross_entropy(z, y),
                          static_cast<double>(want)) < 1e-10);
  }
}

TEST_CASE("logit distillation: squared euclidean halved") {
  const Tensor a = Tensor::vector({1.0, 0.0});
  const Tensor b = Tensor::vector({0.0, 1.0});
  CHECK(logit_distill(a, a) == 0.0);
  CHECK(logit_distill(a, b) == doctest::Approx(1.0));
  Xoshiro256 rng(47);
  for (int it = 0; it < 50; ++it) {
    const Tensor p = random_tensor({4}, rng);
    const Tensor q = random_tensor({4}, rng);
    CHECK(logit_distill(p, q) == logit_distill(q, p));
    CHECK(logit_distill(p, q) >= 0.0);
  }
  CHECK_THROWS_AS(logit_distill(a, Tensor::vector({1.0, 2.0, 3.0})),
                  ShapeError);
}

TEST_CASE("focal distillation weights") {
  Xoshiro256 rng(53);
  const Tensor f = random_tensor({4}, rng);
  const Tensor o = random_tensor({4}, rng);
  const double ld = logit_distill(f, o);
  // beta = 0: indicator is irrelevant.
  CHECK(focal_distill(f, o, true, 0.7, 0.0) ==
        focal_distill(f, o, false, 0.7, 0.0));
  // alpha=1, beta=2, old correct, L_D = 0.5 -> 1.5.
  Tensor u = Tensor::vector({1.0, 0.0});
  Tensor v = Tensor::vector({0.0, 0.0});  // L_D = 0.5
  CHECK(focal_distill(u, v, true, 1.0, 2.0) == doctest::Approx(1.5));
  // Indicator off: exactly alpha * L_D.
  CHECK(focal_distill(f, o, false, 0.7, 2.0) ==
        doctest::Approx(0.7 * ld).epsilon(1e-15));
}

TEST_CASE("pct sample loss") {
  Xoshiro256 rng(59);
  const Tensor f = random_tensor({4}, rng);
  const Tensor o = random_tensor({4}, rng);
  const int y = 2;
  // lambda = 0 reduces to plain cross-entropy.
  CHECK(pct_sample_loss(f, o, y, UpdateHyperparams::pct(0.0, 1.0, 2.0)) ==
        doctest::Approx(cross_entropy(f, y)).epsilon(1e-15));
  // f == old and old correct: distillation vanishes.
  Tensor correct = Tensor::vector({0.0, 0.0, 3.0, 0.0});
  CHECK(pct_sample_loss(correct, correct, y,
                        UpdateHyperparams::pct(1.0, 1.0, 1.0)) ==
        doctest::Approx(cross_entropy(correct, y)).epsilon(1e-15));
  // Hand chain at lambda = alpha = beta = 1.
  const Tensor fz = Tensor::vector({1.0, 0.0, 2.0, -1.0});
  const Tensor oz = Tensor::vector({0.0, 0.0, 1.0, 0.0});  // argmax 2 == y
  const double ld = 0.5 * (1 + 0 + 1 + 1);
  CHECK(pct_sample_loss(fz, oz, y, UpdateHyperparams::pct(1.0, 1.0, 1.0)) ==
        doctest::Approx(cross_entropy(fz, y) + (1.0 + 1.0) * ld));
}

TEST_CASE("pcat sample loss") {
  Xoshiro256 rng(61);
  const Tensor f = random_tensor({4}, rng);
  const Tensor o = random_tensor({4}, rng);
  // lambda = 0: plain adversarial cross-entropy.
  CHECK(pcat_sample_loss(f, o, 1, true,
                         UpdateHyperparams::pcat(0.0, 1.0, 2.0)) ==
        doctest::Approx(cross_entropy(f, 1)).epsilon(1e-15));
  // Zero budget: equals pct with the indicator taken on the clean
  // sample (the same logits here).
  const int y = 0;
  const bool oc = argmax_lowest(o.data.data(), o.size()) == y;
  CHECK(pcat_sample_loss(f, o, y, oc, UpdateHyperparams::pcat(1.0, 1.0, 2.0)) ==
        pct_sample_loss(f, o, y, UpdateHyperparams::pct(1.0, 1.0, 2.0)));
  // Hand-set two-class-style logits (4 entries, two active).
  const Tensor fz = Tensor::vector({2.0, -2.0, 0.0, 0.0});
  const Tensor oz = Tensor::vector({1.0, -1.0, 0.0, 0.0});
  const double ld = 0.5 * (1.0 + 1.0);
  CHECK(pcat_sample_loss(fz, oz, 0, true,
                         UpdateHyperparams::pcat(1.0, 1.0, 2.0)) ==
        doctest::Approx(cross_entropy(fz, 0) + 1.0 * (1.0 + 2.0) * ld));
}

TEST_CASE("rcat sample loss") {
  Xoshiro256 rng(67);
  const Tensor f = random_tensor({4}, rng);
  const Tensor s = random_tensor({4}, rng);
  const Tensor o = random_tensor({4}, rng);
  // alpha = beta = 0 (gamma 1): the plain adversarial-training term.
  CHECK(rcat_sample_loss(f, s, o, 2, true, UpdateHyperparams::rcat(0, 0)) ==
        doctest::Approx(cross_entropy(f, 2)).epsilon(1e-15));
  // Grid point (0.5, 0.4) forces gamma = 0.1 exactly.
  const UpdateHyperparams hp = UpdateHyperparams::rcat(0.5, 0.4);
  CHECK(hp.gamma == 1.0 - 0.5 - 0.4);
  // All three models equal and old correct: only gamma * CE remains.
  Tensor eq = Tensor::vector({0.0, 0.0, 5.0, 0.0});
  CHECK(rcat_sample_loss(eq, eq, eq, 2, true, hp) ==
        doctest::Approx(hp.gamma * cross_entropy(eq, 2)).epsilon(1e-14));

  UpdateHyperparams bad = hp;
  bad.gamma = 0.2;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(UpdateHyperparams::rcat(0.8, 0.5), ConfigError);
}

TEST_CASE("losses are non-negative on random inputs") {
  Xoshiro256 rng(71);
  for (int it = 0; it < 100; ++it) {
    const Tensor f = random_tensor({4}, rng);
    const Tensor s = random_tensor({4}, rng);
    const Tensor o = random_tensor({4}, rng);
    const int y = static_cast<int>(rng.below(4));
    const bool oc = rng.below(2) == 1;
    CHECK(cross_entropy(f, y) >= 0.0);
    CHECK(pct_sample_loss(f, o, y, UpdateHyperparams::pct(1, 1, 2)) >= 0.0);
    CHECK(pcat_sample_loss(f, o, y, oc,
                           UpdateHyperparams::pcat(1, 1, 5)) >= 0.0);
    CHECK(rcat_sample_loss(f, s, o, y, oc,
                           UpdateHyperparams::rcat(0.3, 0.6)) >= 0.0);
  }
}

TEST_CASE("composite loss gradients match finite differences") {
  const auto cases = fgtest::loss_grad_cases(0xFEED);
  const auto res = fgtest::run_gradcheck_battery(cases, 100, 0xFACE);
  INFO("worst case: ", res.worst_case);
  CHECK(res.worst < 1e-5);
}

TEST_CASE("flipping the indicator changes the loss by beta * L_D") {
  Xoshiro256 rng(73);
  for (int it = 0; it < 50; ++it) {
    const Tensor f = random_tensor({4}, rng);
    const Tensor s = random_tensor({4}, rng);
    const Tensor o = random_tensor({4}, rng);
    const int y = static_cast<int>(rng.below(4));
    const double ld = logit_distill(f, o);

    const UpdateHyperparams rc = UpdateHyperparams::rcat(0.3, 0.5);
    const double d_rcat = rcat_sample_loss(f, s, o, y, true, rc) -
                          rcat_sample_loss(f, s, o, y, false, rc);
    CHECK(fgtest::rel_err(d_rcat, rc.beta * ld, 1e-12) < 1e-12);

    const UpdateHyperparams pc = UpdateHyperparams::pcat(2.0, 1.0, 5.0);
    const double d_pcat = pcat_sample_loss(f, o, y, true, pc) -
                          pcat_sample_loss(f, o, y, false, pc);
    CHECK(fgtest::rel_err(d_pcat, pc.lambda * pc.beta * ld, 1e-12) < 1e-12);
  }
}

TEST_CASE("rcat batch loss equals the penalized two-term regrouping") {
  // Sum of per-sample rcat losses == sum over all samples of
  // (gamma*CE + alpha*L_D(f,src)) + mu * sum over the old-correct
  // subset of L_D(f,old), with mu = beta.
  Xoshiro256 rng(79);
  const UpdateHyperparams hp = UpdateHyperparams::rcat(0.5, 0.4);
  CHECK(hp.mu() == hp.beta);
  CHECK(UpdateHyperparams::pcat(2.0, 1.0, 5.0).mu() == 10.0);
  for (int it = 0; it < 20; ++it) {
    double total = 0.0, risk_term = 0.0, penalty_term = 0.0;
    for (int i = 0; i < 16; ++i) {
      const Tensor f = random_tensor({4}, rng);
      const Tensor s = random_tensor({4}, rng);
      const Tensor o = random_tensor({4}, rng);
      const int y = static_cast<int>(rng.below(4));
      const bool oc = rng.below(2) == 1;
      total += rcat_sample_loss(f, s, o, y, oc, hp);
      risk_term += hp.gamma * cross_entropy(f, y) +
                   hp.alpha * logit_distill(f, s);
      if (oc) penalty_term += logit_distill(f, o);
    }
    CHECK(fgtest::rel_err(total, risk_term + hp.mu() * penalty_term,
                          1e-12) < 1e-12);
  }
}

TEST_CASE("batch builders agree with the per-sample losses") {
  Xoshiro256 rng(83);
  const std::size_t m = 7, c = 4;
  const Tensor Z = random_tensor({m, c}, rng);
  const Tensor O = random_tensor({m, c}, rng);
  const Tensor S = random_tensor({m, c}, rng);
  std::vector<int> y(m);
  std::vector<unsigned char> oc(m);
  for (std::size_t i = 0; i < m; ++i) {
    y[i] = static_cast<int>(rng.below(c));
    oc[i] = static_cast<unsigned char>(rng.below(2));
  }
  const auto row = [&](const Tensor& M, std::size_t i) {
    Tensor r({c});
    for (std::size_t j = 0; j < c; ++j) r.data[j] = M.at(i, j);
    return r;
  };

  Tape t;
  const auto zr = t.constant(Z), onode = t.constant(O), sn = t.constant(S);
  const UpdateHyperparams hp = UpdateHyperparams::rcat(0.3, 0.6);
  const Tensor& rc = t.value(batch_rcat_node(t, zr, sn, onode, y, oc, hp));
  const Tensor& ce = t.value(batch_ce_node(t, zr, y));
  for (std::size_t i = 0; i < m; ++i) {
    CHECK(fgtest::rel_err(ce.data[i], cross_entropy(row(Z, i), y[i])) <
          1e-12);
    CHECK(fgtest::rel_err(rc.data[i],
                          rcat_sample_loss(row(Z, i), row(S, i), row(O, i),
                                           y[i], oc[i] != 0, hp)) < 1e-12);
  }
}
