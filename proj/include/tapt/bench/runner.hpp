#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tapt/bench/config.hpp"
#include "tapt/bench/pipeline.hpp"
#include "tapt/bench/record.hpp"

namespace tapt::bench {

/// Everything that determines one cell's numbers.
struct CellSpec {
  std::string dataset;
  attacks::AttackSpec attack;  // as configured; the effective seed is derived
  DefenseKind kind = DefenseKind::kHandcrafted;
  dualenc::PromptDesign design = dualenc::PromptDesign::kVisualOnly;  // unused for hand-crafted
  defense::TAPTConfig tapt;                                          // used for TAPT only
  bool adaptive = false;                                             // TAPT only: attack post-update prompts
  std::size_t samples = 0;
  std::uint64_t seed = 0;

  /// Defense description: kind, design, prompt and stats artifacts, TAPT config.
  nlohmann::json defense_json(const Pipeline& p) const;
  nlohmann::json to_json(const Pipeline& p) const;
  std::string digest(const Pipeline& p) const;
  static CellSpec from_json(const nlohmann::json& j);
};

/// The cells of a config: dataset x attack x (hand-crafted + design x {apt, tapt}).
std::vector<CellSpec> enumerate_cells(const BenchConfig& config);

struct RunOptions {
  /// Ignore stored records and adversarial caches (used for reproduction).
  bool force = false;
  /// Overrides config.jobs when non-zero.
  std::size_t jobs = 0;
  /// Parallel per-sample TAPT within a cell (reset interval 1 only).
  bool parallel_samples = true;
  /// Directory for per-sample TAPT diagnostics, one JSONL file per cell.
  std::string diagnostics_dir;
};

struct MatrixResult {
  std::vector<EvalRecord> records;  // in enumeration order
  std::size_t computed = 0;
  std::size_t cached = 0;
};

/// Evaluates one cell from scratch (or from the adversarial cache).
EvalRecord evaluate_cell(Pipeline& pipeline, const CellSpec& cell, const RunOptions& options = {});

/// Runs every cell with bounded parallelism; completed cells found on disk are
/// reused. Records are written atomically to <run_dir>/records/<cell>.json and
/// the table to <run_dir>/tables/<config digest>.{csv,json}.
MatrixResult run_matrix(Pipeline& pipeline, const RunOptions& options = {});
MatrixResult run_cells(Pipeline& pipeline, const std::vector<CellSpec>& cells, const RunOptions& options);

/// Recomputes a stored record from its cell digest alone.
EvalRecord reproduce(Pipeline& pipeline, const std::string& cell_digest, const RunOptions& options = {});

/// Axes accepted by ablate.
const std::vector<std::string>& ablation_axes();

/// Returns a copy of `base` with one axis set. Epsilon values are nominal
/// x/255 labels and scale by base.epsilon_multiplier; the step size keeps its
/// ratio to epsilon. Throws UsageError on an unknown axis or bad value.
BenchConfig with_axis(const BenchConfig& base, const std::string& axis, const std::string& value);

struct AblationPoint {
  std::string value;
  std::vector<EvalRecord> records;
  double robust_mean = 0.0;
  double clean_mean = 0.0;
};

struct AblationResult {
  std::string axis;
  std::vector<AblationPoint> points;

  /// value,robust_accuracy,clean_accuracy rows.
  std::string series_csv() const;
};

/// Sweeps one axis over TAPT cells of the base config, sharing the store.
/// The series is written to <run_dir>/ablations/<axis>-<digest>.csv.
AblationResult ablate(const BenchConfig& base, std::shared_ptr<ArtifactStore> store, const std::string& axis,
                      const std::vector<std::string>& values, const RunOptions& options = {},
                      const std::function<void(const std::string&)>& log = {});

}  // namespace tapt::bench
