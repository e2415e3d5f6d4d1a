#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace tapt::bench {

/// One benchmark cell: dataset x attack x defense.
struct EvalRecord {
  std::string cell;            // digest of the full cell description
  std::string dataset_id;
  std::string attack;          // AttackSpec digest
  std::string attack_family;
  double epsilon = 0.0;
  std::string defense;         // defense config digest
  std::string defense_kind;    // handcrafted | apt | tapt
  std::string design;          // prompt design, "none" for hand-crafted
  double clean_accuracy = 0.0;
  /// TAPT only: clean accuracy under the other final-view mode.
  double clean_accuracy_alt = 0.0;
  double robust_accuracy = 0.0;
  std::size_t num_samples = 0;
  double wall_time = 0.0;
  std::uint64_t seed = 0;

  /// Throws ConfigError when an accuracy leaves [0, 100].
  void validate() const;
  /// Equality of everything except wall time.
  bool same_result(const EvalRecord& o) const;
};

void to_json(nlohmann::json& j, const EvalRecord& r);
void from_json(const nlohmann::json& j, EvalRecord& r);

std::string records_to_csv(const std::vector<EvalRecord>& records);
/// Inverse of records_to_csv; doubles round-trip exactly. Throws IoError.
std::vector<EvalRecord> records_from_csv(const std::string& text);
std::vector<EvalRecord> load_records_csv(const std::filesystem::path& path);

}  // namespace tapt::bench
