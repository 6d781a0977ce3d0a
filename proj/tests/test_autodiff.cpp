#include <cmath>

#include "doctest.h"
#include "gradcheck.hpp"
#include "rst/autodiff.hpp"

using namespace rst;

TEST_CASE("finite-difference agreement, reduced case count") {
  for (const auto& r : testing::run_gradchecks(8, 2024)) {
    INFO(r.primitive);
    CHECK(r.worst < 1e-4);
  }
}

TEST_CASE("backward needs a scalar loss") {
  Tape tape;
  const Var x = tape.leaf(Tensor(Shape{2}, Real(1)), true);
  CHECK_THROWS_AS(tape.backward(ops::scale(x, 2)), ShapeError);
}

TEST_CASE("gradients accumulate over fan-out") {
  Tape tape;
  const Var x = tape.leaf(Tensor(Shape{3}, std::vector<Real>{1, 2, 3}), true);
  tape.backward(ops::sum(ops::add(x, ops::mul(x, x))));
  CHECK(x.grad() == Tensor(Shape{3}, std::vector<Real>{3, 5, 7}));
}

TEST_CASE("conv2d on a hand example") {
  Tape tape;
  const Var x = tape.constant(Tensor(Shape{1, 1, 3, 3}, std::vector<Real>{1, 2, 3, 4, 5, 6, 7, 8, 9}));
  const Var w = tape.constant(Tensor(Shape{1, 1, 2, 2}, std::vector<Real>{1, 0, 0, 1}));
  const Var y = ops::conv2d(x, w);
  CHECK(y.value() == Tensor(Shape{1, 1, 2, 2}, std::vector<Real>{6, 8, 12, 14}));
  const Var p = ops::conv2d(x, w, {2, 1});
  CHECK(p.shape() == Shape{1, 1, 2, 2});
  CHECK(p.value()[0] == Real(1));
  CHECK_THROWS_AS(ops::conv2d(x, tape.constant(Tensor(Shape{1, 2, 2, 2}))), ShapeError);
}

TEST_CASE("max pool routes the gradient to the first maximum") {
  Tape tape;
  const Var x = tape.leaf(Tensor(Shape{1, 1, 2, 2}, std::vector<Real>{5, 5, 1, 5}), true);
  tape.backward(ops::sum(ops::max_pool2d(x, 2, 2)));
  CHECK(x.grad() == Tensor(Shape{1, 1, 2, 2}, std::vector<Real>{1, 0, 0, 0}));
}

TEST_CASE("batch norm reports biased batch statistics") {
  Tape tape;
  const Var x = tape.constant(Tensor(Shape{4, 1}, std::vector<Real>{1, 2, 3, 4}));
  NormStats batch;
  const Var y = ops::batch_norm(x, NormStats::identity(1), &batch);
  CHECK(batch.mean[0] == doctest::Approx(2.5));
  CHECK(batch.var[0] == doctest::Approx(1.25));
  CHECK(y.value()[0] == doctest::Approx(-1.5 / std::sqrt(1.25 + kNormEpsilon)));
  NormStats running = NormStats::identity(1);
  update_running_stats(running, batch, 4);
  CHECK(running.mean[0] == doctest::Approx(0.25));
  CHECK(running.var[0] == doctest::Approx(0.9 + 0.1 * 1.25 * 4.0 / 3.0));
}

TEST_CASE("single-member ensemble cross-entropy equals cross-entropy bit for bit") {
  Tape tape;
  const Var logits = tape.leaf(Tensor(Shape{2, 3}, std::vector<Real>{0.3, -1.2, 2.0, 0.1, 0.1, -0.5}), true);
  const std::vector<int> y{2, 0};
  const Var a = ops::cross_entropy(logits, y, true);
  const std::vector<Var> members{logits};
  const Var b = ops::ensemble_cross_entropy(members, y, true);
  CHECK(a.value().item() == b.value().item());
}

TEST_CASE("labels outside the class range are rejected") {
  Tape tape;
  const Var logits = tape.constant(Tensor(Shape{1, 3}));
  CHECK_THROWS_AS(ops::cross_entropy(logits, std::vector<int>{3}), std::out_of_range);
  CHECK_THROWS_AS(ops::cross_entropy(logits, std::vector<int>{-1}), std::out_of_range);
}

TEST_CASE("cross entropy of uniform logits is log of the class count") {
  Tape tape;
  const Var logits = tape.constant(Tensor(Shape{2, 4}));
  CHECK(ops::cross_entropy(logits, std::vector<int>{0, 3}).value().item() == doctest::Approx(std::log(4.0)));
}
