#include <cstring>

#include "doctest.h"
#include "flipguard/tensor.hpp"
#include "test_util.hpp"

using namespace flipguard;
using fgtest::gradcheck_rel_err;
using fgtest::random_tensor;

TEST_CASE("primitive forward examples") {
  Tape t;
  const auto relu_out =
      t.value(t.relu(t.constant(Tensor::vector({-1, 0, 2}))));
  CHECK(relu_out.data == std::vector<double>{0, 0, 2});

  const auto clamp_out = t.value(
      t.clamp(t.constant(Tensor::vector({1.3, -0.2, 0.5})), 0.0, 1.0));
  CHECK(clamp_out.data == std::vector<double>{1, 0, 0.5});

  const auto mm = t.value(t.matmul(
      t.constant(Tensor::matrix(2, 2, {1, 2, 3, 4})),
      t.constant(Tensor::matrix(2, 1, {1, 1}))));
  CHECK(mm.shape == std::vector<std::size_t>{2, 1});
  CHECK(mm.data == std::vector<double>{3, 7});

  const auto sg = t.value(t.sign(t.constant(Tensor::vector({-3, 0, 5}))));
  CHECK(sg.data == std::vector<double>{-1, 0, 1});
}

TEST_CASE("primitive dispatch covers the documented kinds") {
  Tape t;
  const auto a = t.constant(Tensor::vector({0.5, 1.5}));
  const auto b = t.constant(Tensor::vector({2.0, -1.0}));
  CHECK(t.value(t.apply(Primitive::Add, {a, b})).data ==
        std::vector<double>{2.5, 0.5});
  CHECK(t.value(t.apply(Primitive::Clamp, {a}, 0.0, 1.0)).data ==
        std::vector<double>{0.5, 1.0});
  CHECK(t.value(t.apply(Primitive::Scale, {a}, 2.0)).data ==
        std::vector<double>{1.0, 3.0});
  CHECK(t.value(t.apply(Primitive::Sum, {a})).item() == 2.0);
  CHECK_THROWS_AS(t.apply(Primitive::Leaf, {a}), DomainError);
}

TEST_CASE("shape errors name the primitive and both shapes") {
  Tape t;
  const auto a = t.constant(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  const auto b = t.constant(Tensor::vector({1, 2, 3, 4}));
  try {
    t.add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("add") != std::string::npos);
    CHECK(msg.find("{2,3}") != std::string::npos);
    CHECK(msg.find("{4}") != std::string::npos);
  }
  CHECK_THROWS_AS(t.matmul(a, a), ShapeError);
}

TEST_CASE("log rejects non-positive input") {
  Tape t;
  CHECK_THROWS_AS(t.log(t.constant(Tensor::vector({1.0, 0.0}))),
                  DomainError);
  CHECK_THROWS_AS(t.log(t.constant(Tensor::vector({-2.0}))), DomainError);
}

TEST_CASE("backward: y = x*x at x = 3") {
  Tape t;
  Tensor x = Tensor::scalar(3.0);
  x.requires_grad = true;
  const auto xn = t.leaf(x);
  t.backward(t.mul(xn, xn));  // fan-out accumulates
  CHECK(t.grad(xn).item() == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("backward: relu subgradient routes zero at the kink") {
  Tape t;
  Tensor x = Tensor::vector({-1.0, 2.0});
  x.requires_grad = true;
  const auto xn = t.leaf(x);
  t.backward(t.sum(t.relu(xn)));
  CHECK(t.grad(xn).data == std::vector<double>{0.0, 1.0});

  Tape t2;
  Tensor z = Tensor::vector({0.0});
  z.requires_grad = true;
  const auto zn = t2.leaf(z);
  t2.backward(t2.sum(t2.relu(zn)));
  CHECK(t2.grad(zn).data[0] == 0.0);  // relu'(0) = 0
}

TEST_CASE("backward requires a scalar output") {
  Tape t;
  Tensor x = Tensor::vector({1.0, 2.0});
  x.requires_grad = true;
  const auto xn = t.leaf(x);
  const auto y = t.relu(xn);
  CHECK_THROWS_AS(t.backward(y), ShapeError);
}

TEST_CASE("leaf off the output path keeps a zero gradient") {
  Tape t;
  Tensor x = Tensor::scalar(1.0);
  x.requires_grad = true;
  Tensor u = Tensor::scalar(5.0);
  u.requires_grad = true;
  const auto xn = t.leaf(x);
  const auto un = t.leaf(u);
  t.backward(t.mul(xn, xn));
  CHECK(t.grad(un).item() == 0.0);
}

TEST_CASE("finite differences: analytic cases") {
  const auto square = [](const Tensor& p) {
    return p.data[0] * p.data[0];
  };
  const Tensor g =
      finite_difference_grad(square, Tensor::scalar(3.0), 1e-5);
  CHECK(std::abs(g.item() - 6.0) < 1e-8);

  const auto total = [](const Tensor& p) {
    double s = 0;
    for (double v : p.data) s += v;
    return s;
  };
  Xoshiro256 rng(11);
  const Tensor point = random_tensor({5}, rng);
  const Tensor g2 = finite_difference_grad(total, point, 1e-6);
  for (double v : g2.data) CHECK(v == doctest::Approx(1.0).epsilon(1e-7));

  CHECK_THROWS_AS(
      finite_difference_grad(square, Tensor::scalar(1.0), 0.0),
      DomainError);
  const auto blows_up = [](const Tensor& p) {
    return 1.0 / (p.data[0] - p.data[0]);
  };
  CHECK_THROWS_AS(
      finite_difference_grad(blows_up, Tensor::scalar(1.0), 1e-6),
      NumericalError);
}

TEST_CASE("cross-entropy gradient matches finite differences") {
  const auto ce = [](Tape& t, Tape::NodeId x) {
    return cross_entropy_node(t, x, 0);
  };
  CHECK(gradcheck_rel_err(ce, Tensor::vector({0.0, 0.0}), 1e-6) < 1e-6);
}

TEST_CASE("every primitive matches finite differences at random points") {
  const auto cases = fgtest::primitive_grad_cases(0xC0FFEE);
  const auto res = fgtest::run_gradcheck_battery(cases, 100, 0x5EED);
  INFO("worst case: ", res.worst_case);
  CHECK(res.worst < 1e-5);
  CHECK(res.checks >= cases.size() * 100);
}

TEST_CASE("softmax rows are non-negative and normalized") {
  Xoshiro256 rng(21);
  for (int it = 0; it < 50; ++it) {
    Tape t;
    const Tensor z = random_tensor({4, 6}, rng, -30.0, 30.0);
    const Tensor& p = t.value(t.softmax(t.constant(z)));
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 6; ++j) {
        CHECK(p.at(r, j) >= 0.0);
        s += p.at(r, j);
      }
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("forward+backward is bit-deterministic and the tape replays") {
  const auto run = [](std::uint64_t seed) {
    Xoshiro256 rng(seed);
    Tape t;
    Tensor x = random_tensor({4, 3}, rng);
    x.requires_grad = true;
    const auto xn = t.leaf(x);
    const auto w = t.constant(random_tensor({3, 5}, rng));
    const auto h = t.relu(t.matmul(xn, w));
    const auto out = t.mean(t.add(t.logsumexp_rows(h), t.sum_rows(h)));
    t.backward(out);
    std::pair<Tensor, Tensor> r{t.value(out), t.grad(xn)};
    return r;
  };
  const auto a = run(77);
  const auto b = run(77);
  CHECK(std::memcmp(a.first.data.data(), b.first.data.data(),
                    sizeof(double)) == 0);
  CHECK(std::memcmp(a.second.data.data(), b.second.data.data(),
                    a.second.size() * sizeof(double)) == 0);

  // Replay reproduces the recorded forward values bit for bit.
  Xoshiro256 rng(99);
  Tape t;
  const auto xn = t.constant(random_tensor({3, 4}, rng));
  const auto out = t.logsumexp_rows(t.relu(xn));
  const Tensor before = t.value(out);
  t.replay();
  CHECK(std::memcmp(before.data.data(), t.value(out).data.data(),
                    before.size() * sizeof(double)) == 0);
}

TEST_CASE("tensor invariants: shape/data coherence") {
  CHECK_THROWS_AS(Tensor({2, 3}, {1.0, 2.0}), ShapeError);
  CHECK(Tensor::vector({1.0}).item() == 1.0);
  CHECK_THROWS_AS(Tensor::matrix(1, 2, {1, 2}).item(), ShapeError);
  const Tensor t({2, 2});
  CHECK(t.size() == 4);
  for (double v : t.data) CHECK(v == 0.0);
}
