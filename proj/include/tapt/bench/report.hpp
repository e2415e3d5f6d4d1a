#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tapt/bench/record.hpp"

namespace tapt::bench {

struct ReportRow {
  std::string defense_kind;
  std::string defense;                       // digest shared by every cell of the row
  std::vector<std::optional<double>> robust;  // one per grid column
  std::vector<std::optional<double>> clean;
  double robust_average = 0.0;
  double clean_average = 0.0;
  /// Average robust accuracy minus the matched baseline row's (apt vs
  /// hand-crafted, tapt vs apt); empty for the baseline itself.
  std::optional<double> delta;
};

/// Defense rows x dataset columns for one attack and one prompt design.
struct ReportGrid {
  std::string attack;  // AttackSpec digest
  std::string attack_family;
  double epsilon = 0.0;
  std::string design;
  std::vector<std::string> datasets;
  std::vector<ReportRow> rows;
};

/// Groups records by (attack, design); hand-crafted rows join every design
/// grid of their attack. Throws ReportError when two records claim the same
/// cell or one row mixes defense configs.
std::vector<ReportGrid> build_report(const std::vector<EvalRecord>& records);

std::string render_text(const std::vector<ReportGrid>& grids);
/// attack_family,epsilon,design,defense_kind,dataset,robust,clean rows plus
/// an "average" pseudo-dataset per row.
std::string render_csv(const std::vector<ReportGrid>& grids);

}  // namespace tapt::bench
