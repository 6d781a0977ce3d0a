#include <cmath>

#include "doctest.h"
#include "rst/adversary.hpp"

using namespace rst;

namespace {

Network linear_net(std::vector<Real> w) {
  Network net(NetworkSpec::linear(2, 2), {InitMethod::KaimingNormal, 1}, SparsityPattern::Element, 1.0);
  net.params()[0].replace_theta(Tensor({2, 2}, std::move(w)));
  return net;
}

Tensor random_inputs(std::size_t n, std::size_t d, std::uint64_t seed) {
  Prng prng(seed);
  Tensor x({n, d});
  for (auto& v : x.data()) v = static_cast<Real>(prng.uniform());
  return x;
}

}  // namespace

TEST_CASE("L-inf PGD stays inside the ball and the box") {
  const Network net = Network(NetworkSpec::mlp(6, 5, 3), {InitMethod::KaimingNormal, 2}, SparsityPattern::Element, 1.0);
  const Tensor x = random_inputs(16, 6, 9);
  std::vector<int> y(16);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<int>(i % 3);
  for (bool rs : {false, true}) {
    const auto cfg = AttackConfig::pgd(0.3, 10, 0.1, rs);
    const Tensor adv = perturb(net, x, y, cfg, Prng(4));
    for (std::size_t i = 0; i < x.size(); ++i) {
      CHECK(std::abs(adv[i] - x[i]) <= 0.3 + 1e-12);
      CHECK(adv[i] >= 0.0);
      CHECK(adv[i] <= 1.0);
    }
  }
}

TEST_CASE("PGD reaches the corner optimum of a linear binary model") {
  // CE loss grows with (w_other - w_label) . x, so the optimum is eps * sign of that difference.
  const Network net = linear_net({1.0, -2.0, -0.5, 0.75});
  Tensor x({2, 2}, {0.5, 0.5, 0.4, 0.6});
  const std::vector<int> y{0, 1};
  auto cfg = AttackConfig::pgd(0.1, 8);
  cfg.lower = -10;
  cfg.upper = 10;
  const Tensor adv = perturb(net, x, y, cfg, Prng(1));
  const Real diff[2] = {-1.5, 2.75};
  for (std::size_t n = 0; n < 2; ++n) {
    const Real s = n == 0 ? 1 : -1;
    for (std::size_t j = 0; j < 2; ++j) CHECK(adv[n * 2 + j] == doctest::Approx(x[n * 2 + j] + 0.1 * s * sign_of(diff[j])));
  }
}

TEST_CASE("FGSM is one signed step of size epsilon") {
  const Network net = linear_net({1.0, -2.0, -0.5, 0.75});
  Tensor x({1, 2}, {0.5, 0.5});
  const std::vector<int> y{0};
  const Tensor adv = perturb(net, x, y, AttackConfig::fgsm(0.2), Prng(0));
  CHECK(adv[0] == doctest::Approx(0.3));
  CHECK(adv[1] == doctest::Approx(0.7));
}

TEST_CASE("zero epsilon returns the input unchanged") {
  const Network net = linear_net({1.0, -2.0, -0.5, 0.75});
  const Tensor x = random_inputs(4, 2, 2);
  const std::vector<int> y{0, 1, 0, 1};
  for (const auto& cfg : {AttackConfig::fgsm(0.0), AttackConfig::pgd(0.0, 5, -1.0, true)}) {
    CHECK(perturb(net, x, y, cfg, Prng(3)) == x);
  }
}

TEST_CASE("L2 PGD respects the radius") {
  const Network net = Network(NetworkSpec::mlp(8, 6, 4), {InitMethod::KaimingNormal, 5}, SparsityPattern::Element, 1.0);
  const Tensor x = random_inputs(10, 8, 11);
  std::vector<int> y(10, 2);
  const Tensor adv = perturb(net, x, y, AttackConfig::l2_pgd(0.5, 10), Prng(6));
  for (std::size_t n = 0; n < 10; ++n) {
    double sq = 0;
    for (std::size_t j = 0; j < 8; ++j) sq += std::pow(adv[n * 8 + j] - x[n * 8 + j], 2);
    CHECK(std::sqrt(sq) <= 0.5 + 1e-9);
  }
}

TEST_CASE("random starts depend on sample ids, not on batch composition") {
  const Network net = Network(NetworkSpec::mlp(4, 5, 2), {InitMethod::KaimingNormal, 8}, SparsityPattern::Element, 1.0);
  const Tensor x = random_inputs(6, 4, 12);
  const std::vector<int> y{0, 1, 0, 1, 0, 1};
  const auto cfg = AttackConfig::fgsm_rs(0.2, 0.25);
  const std::vector<std::size_t> ids{10, 11, 12, 13, 14, 15};
  const Tensor whole = perturb(net, x, y, cfg, Prng(7), ids);
  const std::vector<std::size_t> tail_ids{13, 14, 15};
  const std::vector<int> tail_y{1, 0, 1};
  const Tensor tail = perturb(net, x.slice_rows(3, 6), tail_y, cfg, Prng(7), tail_ids);
  for (std::size_t i = 0; i < tail.size(); ++i) CHECK(tail[i] == whole[12 + i]);
}

TEST_CASE("single-ticket EOT and ensemble attacks equal plain PGD") {
  const Network net = Network(NetworkSpec::mlp(4, 5, 3), {InitMethod::KaimingNormal, 8}, SparsityPattern::Element, 1.0);
  const Tensor x = random_inputs(5, 4, 13);
  const std::vector<int> y{0, 1, 2, 0, 1};
  const auto cfg = AttackConfig::pgd(0.2, 5);
  const Classifier* one[] = {&net};
  const Tensor plain = perturb(net, x, y, cfg, Prng(2));
  CHECK(eot_perturb(one, x, y, cfg, Prng(2)) == plain);
  CHECK(ensemble_perturb(one, x, y, cfg, Prng(2)) == plain);
  CHECK_THROWS(eot_perturb(std::span<const Classifier* const>{}, x, y, cfg, Prng(2)));
}

TEST_CASE("attack configs validate") {
  CHECK_THROWS(AttackConfig::pgd(-0.1, 5).validate());
  CHECK_THROWS(AttackConfig::pgd(0.1, 0).validate());
  CHECK_NOTHROW(AttackConfig::pgd(0.1, 5).validate());
  CHECK(AttackConfig::pgd(0.2, 5).alpha == doctest::Approx(0.05));
  CHECK(parse_norm(to_string(AttackNorm::L2)) == AttackNorm::L2);
}
