#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rst/adversary.hpp"
#include "rst/evaluate.hpp"
#include "rst/nets.hpp"
#include "rst/search.hpp"

namespace rst {

/// One experiment, read from an INI file. Every key is optional; unknown
/// sections or keys are rejected. Schema (defaults in brackets):
///
///   [run]      name [run], seed [0], output [runs], dataset [mnist|fashion|cifar10],
///              data [$RST_DATA_DIR or ./data], train_limit [0 = all], test_limit [0 = all],
///              stages [search, eval]  (used by `rst run`)
///   [network]  preset [DeskCNN|DeskResNet8], width [16], init [SignedKaimingConstant],
///              weight_seed [1]
///   [search]   ratios [0.2], pattern [element], attack [pgd|fgsm|fgsm_rs|l2_pgd],
///              epsilon [0.1], alpha [epsilon/4], steps [7], random_start [false],
///              source [] (trained checkpoint: RTT search), reinit_last_layer [false],
///              random_baseline [false]
///   [schedule] epochs [30], learning_rate [0.1], momentum [0.9], milestones [15, 23],
///              decay [0.1], batch_size [128]
///   [train]    mode [adversarial|natural], init [KaimingNormal], learning_rate [0.1]
///   [finetune] mode [inherit|reinit], reinit_seed [1]
///   [eval]     attack [pgd], epsilon [0.1] (list), alpha [epsilon/4], steps [20],
///              random_start [false], batch [256]
///   [r2s]      adaptive [none] (list of none|eot|ensemble), mode [exact|sampled], repeats [1],
///              per_batch [false]
///   [distance] epsilons [0.05, 0.1, 0.2]
///   [plot]     kinds [ratio_curve] (list of ratio_curve|transfer_heatmap|distance_bars)
///
/// Lists are comma separated.
struct RunConfig {
  std::string name = "run";
  std::uint64_t seed = 0;
  std::filesystem::path output = "runs";
  std::string dataset = "mnist";
  std::filesystem::path data_dir;
  std::size_t train_limit = 0;
  std::size_t test_limit = 0;
  std::vector<std::string> stages{"search", "eval"};

  std::string preset = "DeskCNN";
  std::size_t width = 16;
  InitMethod init = InitMethod::SignedKaimingConstant;
  std::uint64_t weight_seed = 1;

  std::vector<double> ratios{0.2};
  SparsityPattern pattern = SparsityPattern::Element;
  AttackConfig search_attack = AttackConfig::pgd(0.1, 7);
  std::filesystem::path rtt_source;
  bool reinit_last_layer = false;
  bool random_baseline = false;

  SearchSchedule schedule;

  TrainMode train_mode = TrainMode::Adversarial;
  InitMethod train_init = InitMethod::KaimingNormal;
  double train_learning_rate = 0.1;

  FinetuneMode finetune_mode = FinetuneMode::Inherit;
  std::uint64_t reinit_seed = 1;

  std::vector<AttackConfig> eval_attacks{AttackConfig::pgd(0.1, 20)};
  std::size_t eval_batch = 256;

  std::vector<Adaptive> r2s_adaptive{Adaptive::None};
  R2SMode r2s_mode = R2SMode::Exact;
  std::size_t r2s_repeats = 1;
  bool r2s_per_batch = false;

  std::vector<double> distance_epsilons{0.05, 0.1, 0.2};

  std::vector<std::string> plot_kinds{"ratio_curve"};

  /// Every field, one `section.key = value` line each, in schema order.
  [[nodiscard]] std::string canonical() const;
  /// 16 hex digits of FNV-1a over canonical().
  [[nodiscard]] std::string hash() const;
  [[nodiscard]] std::filesystem::path run_dir() const;
  void validate() const;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

RunConfig parse_config(const std::string& text, const std::string& origin = "<config>");
RunConfig load_config(const std::filesystem::path& path);

/// Builds an attack from a kind name (pgd, fgsm, fgsm_rs, l2_pgd).
AttackConfig make_attack(std::string_view kind, double epsilon, std::optional<double> alpha, int steps,
                         bool random_start);
std::string attack_kind(const AttackConfig& attack);

std::uint64_t fnv1a(std::string_view text);

}  // namespace rst
