#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tapt/apt.hpp"
#include "tapt/attacks.hpp"
#include "tapt/bench/dataset.hpp"
#include "tapt/defense.hpp"
#include "tapt/pretrain.hpp"

namespace tapt::bench {

/// SHA-256 over the canonical serialization (sorted keys, no whitespace).
std::string canonical_digest(const nlohmann::json& j);

/// Seed for a named job, mixed from the global seed and the job digest.
std::uint64_t job_seed(std::uint64_t global_seed, const std::string& digest);

enum class DefenseKind { kHandcrafted, kAptFixed, kTapt };

std::string to_string(DefenseKind k);
/// Throws UsageError on an unknown name.
DefenseKind parse_defense(const std::string& s);

/// The declarative experiment description. Every field has a default, so a
/// config file only needs the keys it changes.
struct BenchConfig {
  std::filesystem::path run_dir = "runs";
  std::uint64_t seed = 0;
  SyntheticDatasetSpec data;
  dualenc::PretrainConfig pretrain;
  /// Base tuning config; the design is set per matrix row.
  apt::TuneConfig apt;
  /// Attack used on the public split when estimating adversarial statistics.
  attacks::AttackSpec stats_attack = default_stats_attack();
  std::vector<std::string> datasets = {"source", "zeroshot0", "zeroshot1"};
  std::vector<attacks::AttackSpec> attacks = default_attacks();
  std::vector<dualenc::PromptDesign> designs = {dualenc::PromptDesign::kVisualOnly,
                                                dualenc::PromptDesign::kVLJoint,
                                                dualenc::PromptDesign::kVLIndependent};
  std::vector<DefenseKind> defenses = {DefenseKind::kHandcrafted, DefenseKind::kAptFixed, DefenseKind::kTapt};
  defense::TAPTConfig tapt;
  /// Attack each TAPT sample through its post-update prompts instead of the
  /// fixed initial prompts (a study mode; off in the reference matrix).
  bool adaptive_attack = false;
  /// Leading test-split samples evaluated per dataset (0 = whole split).
  std::size_t eval_samples = 64;
  /// Toy epsilon = nominal epsilon x multiplier (the toy images have a
  /// smaller effective dynamic range than natural photos).
  double epsilon_multiplier = 2.0;
  /// Concurrent matrix cells.
  std::size_t jobs = 1;
  /// Build missing upstream artifacts instead of failing.
  bool build = true;

  static attacks::AttackSpec default_stats_attack();
  static std::vector<attacks::AttackSpec> default_attacks();

  void validate() const;
  std::string digest() const;
};

void to_json(nlohmann::json& j, const BenchConfig& c);
void from_json(const nlohmann::json& j, BenchConfig& c);

/// Reads a JSON config file; relative run_dir paths resolve against the
/// file's directory. Throws MissingArtifactError / ConfigError.
BenchConfig load_config(const std::filesystem::path& path);

}  // namespace tapt::bench
