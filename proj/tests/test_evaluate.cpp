#include <cmath>

#include "doctest.h"
#include "rst/evaluate.hpp"

using namespace rst;

namespace {

DataSplit random_split(std::size_t n, std::uint64_t seed) {
  Prng prng(seed);
  DataSplit s{Tensor({n, 1, 8, 8}), std::vector<int>(n)};
  for (auto& v : s.x.data()) v = static_cast<Real>(prng.uniform());
  for (auto& y : s.y) y = static_cast<int>(prng.below(3));
  return s;
}

Network ticket(std::uint64_t score_seed, double ratio = 0.5) {
  Network net(NetworkSpec::desk_cnn({1, 8, 8}, 3, 4), {InitMethod::SignedKaimingConstant, 1}, SparsityPattern::Element,
              ratio);
  Prng prng(score_seed);
  for (auto& p : net.params()) {
    for (auto& s : p.mutable_scores().data()) s = static_cast<Real>(prng.normal());
  }
  net.rebinarize();
  return net;
}

}  // namespace

TEST_CASE("zero-epsilon robust accuracy equals natural accuracy") {
  const DataSplit split = random_split(40, 1);
  const Network net = ticket(2);
  const AttackConfig attacks[] = {AttackConfig::pgd(0.0, 3)};
  const auto report = evaluate(net, split, attacks, Prng(0), "t");
  CHECK(report.samples == 40);
  CHECK(report.robust[0].accuracy == report.natural_acc);
  CHECK(report.natural_acc == mean_of(correctness(net, split.x, split.y)));
}

TEST_CASE("adversarial examples do not depend on the evaluation batch size") {
  Prng prng(3);
  DataSplit split{Tensor({10, 12}), std::vector<int>(10)};
  for (auto& v : split.x.data()) v = static_cast<Real>(prng.uniform());
  for (auto& y : split.y) y = static_cast<int>(prng.below(3));
  const Network net(NetworkSpec::linear(12, 3), {InitMethod::KaimingNormal, 4}, SparsityPattern::Element, 1.0);
  const auto cfg = AttackConfig::pgd(0.1, 3, -1.0, true);
  const Tensor a = adversarial_examples(net, split, cfg, Prng(5), 256);
  const Tensor b = adversarial_examples(net, split, cfg, Prng(5), 3);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-9));
}

TEST_CASE("transfer matrix diagonal is white-box robust accuracy") {
  const DataSplit split = random_split(24, 6);
  const Network a = ticket(7), b = ticket(8);
  const Classifier* tickets[] = {&a, &b};
  const auto cfg = AttackConfig::pgd(0.1, 3);
  const auto grid = transfer_matrix(tickets, split, cfg, Prng(1));
  REQUIRE(grid.accuracy.size() == 2);
  const AttackConfig attacks[] = {cfg};
  CHECK(grid.accuracy[0][0] == evaluate(a, split, attacks, Prng(1)).robust[0].accuracy);
  CHECK(grid.accuracy[1][1] == evaluate(b, split, attacks, Prng(1)).robust[0].accuracy);
  CHECK(grid.accuracy[0][1] == mean_of(grid.correct[0][1]));
  const Classifier* single[] = {&a};
  CHECK_THROWS(transfer_matrix(single, split, cfg, Prng(1)));
}

TEST_CASE("expected transfer accuracy is the weighted grid sum") {
  TransferResult grid;
  grid.accuracy = {{0.1, 0.8}, {0.6, 0.2}};
  const double w[] = {0.25, 0.75};
  CHECK(expected_transfer_accuracy(grid, w) ==
        doctest::Approx(0.0625 * 0.1 + 0.1875 * 0.8 + 0.1875 * 0.6 + 0.5625 * 0.2));
}

TEST_CASE("R2S draws follow the policy weights") {
  auto policy = R2SPolicy::uniform({ticket(1), ticket(2), ticket(3)});
  policy.weights = {0.5, 0.5, 0.0};
  std::size_t counts[3] = {};
  for (std::size_t id = 0; id < 4000; ++id) ++counts[r2s_draw(policy, Prng(9), id)];
  CHECK(counts[2] == 0);
  CHECK(std::abs(static_cast<double>(counts[0]) / 4000.0 - 0.5) < 0.04);
  CHECK(r2s_draw(policy, Prng(9), 17) == r2s_draw(policy, Prng(9), 17));
}

TEST_CASE("R2S policies are validated") {
  auto policy = R2SPolicy::uniform({ticket(1), ticket(2)});
  CHECK_NOTHROW(policy.validate());
  policy.weights = {0.7, 0.7};
  CHECK_THROWS(policy.validate());
  CHECK_THROWS(R2SPolicy::uniform({}).validate());
  R2SPolicy mixed = R2SPolicy::uniform({ticket(1)});
  mixed.candidates.emplace_back(NetworkSpec::desk_cnn({1, 8, 8}, 3, 4), InitSpec{InitMethod::SignedKaimingConstant, 2},
                                SparsityPattern::Element, 0.5);
  mixed.weights = {0.5, 0.5};
  CHECK_THROWS(mixed.validate());
}

TEST_CASE("single-candidate R2S reduces to the ticket") {
  const DataSplit split = random_split(20, 11);
  const auto policy = R2SPolicy::uniform({ticket(5)});
  const auto cfg = AttackConfig::pgd(0.1, 3);
  const AttackConfig attacks[] = {cfg};
  const auto plain = evaluate(policy.candidates[0], split, attacks, Prng(2));
  for (auto adaptive : {Adaptive::Eot, Adaptive::Ensemble}) {
    const auto r = r2s_evaluate(policy, split, cfg, {adaptive, R2SMode::Exact, 1, 256}, Prng(2));
    CHECK(r.natural_acc == plain.natural_acc);
    CHECK(r.robust[0].accuracy == plain.robust[0].accuracy);
  }
  const auto predictions = r2s_predict(policy, split.x, Prng(3));
  CHECK(predictions == predict(policy.candidates[0], split.x));
}

TEST_CASE("overhead counts packed mask bytes against dense weight bytes") {
  const auto policy = R2SPolicy::uniform({ticket(1), ticket(2)});
  std::size_t bytes = 0;
  for (const auto& p : policy.candidates[0].params()) bytes += (p.group_count() + 7) / 8;
  const double dense = static_cast<double>(policy.candidates[0].weight_count() * sizeof(Real));
  CHECK(r2s_overhead(policy) == doctest::Approx(2.0 * static_cast<double>(bytes) / dense));
}

TEST_CASE("feature distance is zero without noise and grows with it") {
  const DataSplit split = random_split(16, 12);
  const Network net = ticket(6);
  CHECK(feature_distance(net, split, 0.0, Prng(1)) == 0.0);
  const double small = feature_distance(net, split, 0.02, Prng(1));
  const double large = feature_distance(net, split, 0.2, Prng(1));
  CHECK(small > 0.0);
  CHECK(large > small);
}
