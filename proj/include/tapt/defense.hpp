#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tapt/dualenc.hpp"
#include "tapt/matrix.hpp"
#include "tapt/optim.hpp"
#include "tapt/stats.hpp"

// Test-time adversarial prompt tuning: per-sample augmentation, low-entropy
// view selection, entropy + adversarial/clean alignment objective, a short
// prompt update, and the reset policy across a stream.

namespace tapt::defense {

/// reset_interval value meaning "never reset".
constexpr std::size_t kResetAll = 0;

struct TAPTConfig {
  std::size_t num_views = 64;
  double select_fraction = 0.1;
  double alpha = 0.5;
  double lr = 5e-4;
  std::size_t steps = 1;
  std::size_t reset_interval = 1;  // kResetAll = never
  /// Predict from the original view only instead of the selected-view average.
  bool predict_original = false;
  std::uint64_t seed = 0;

  void validate() const;
  std::string digest() const;
  friend bool operator==(const TAPTConfig&, const TAPTConfig&) = default;
};

void to_json(nlohmann::json& j, const TAPTConfig& c);
void from_json(const nlohmann::json& j, TAPTConfig& c);
std::string reset_to_string(std::size_t interval);
std::size_t parse_reset(const std::string& s);

struct ViewBatch {
  Matrix views;  // M x pixels, row 0 is the original image
  std::vector<double> entropies;
  std::vector<bool> selected;

  std::size_t size() const { return views.rows(); }
  std::vector<std::size_t> selected_indices() const;
  Matrix selected_views() const;
};

/// k = max(1, floor(tau * M)).
std::size_t select_count(std::size_t num_views, double tau);
/// Indices of the k smallest entries, ties broken by lower index, ascending order.
std::vector<std::size_t> lowest_k(std::span<const double> values, std::size_t k);

ViewBatch augment(std::span<const double> image, std::size_t channels, std::size_t side,
                  std::size_t num_views, std::uint64_t seed);

/// Fills entropies (from classify under `prompts`) and the selection mask.
void select_views(ViewBatch& batch, const dualenc::DualEncoder& model, const dualenc::PromptSet& prompts,
                  const Matrix& text, double tau);

/// Shannon entropy of the average of the probability rows.
double mean_entropy(const Matrix& probs);

struct Alignment {
  double adv = 0.0;
  double clean = 0.0;
  double combined = 0.0;  // alpha * adv + (1 - alpha) * clean
};

/// L1 alignment of the given per-layer moments (L x D) to the bundle.
Alignment alignment_from_moments(const stats::Moments& current, const stats::LayerStatsBundle& bundle,
                                 double alpha);

/// All terms of the test-time objective on a fixed set of views.
struct Objective {
  double entropy = 0.0;
  double align_adv = 0.0;
  double align_clean = 0.0;
  double total = 0.0;
  Matrix mean_probs;                   // 1 x K average over views
  std::vector<Matrix> prompt_grads;    // one per prompt block (empty unless requested)
};

/// total = entropy + alpha * align_adv + (1 - alpha) * align_clean.
Objective evaluate_objective(const dualenc::DualEncoder& model, const Matrix& views,
                             const dualenc::PromptSet& prompts, const dualenc::TokenizedCatalog& tokens,
                             const Matrix* fixed_text, const stats::LayerStatsBundle& bundle, double alpha,
                             bool with_grad);

struct StepDiagnostics {
  Objective before;
  Objective after;
  std::size_t steps_applied = 0;
  bool fallback = false;
  std::string error;
};

/// Per-stream state carried between samples when prompts are not reset.
struct PromptState {
  dualenc::PromptSet prompts;
  optim::AdamW optimizer;
};

struct SampleResult {
  std::vector<double> probabilities;
  int prediction = -1;
  /// Prediction under the other final-view mode (see predict_original).
  int alternate_prediction = -1;
  std::vector<std::size_t> selected;
  StepDiagnostics diagnostics;
};

/// Defends one sample: augment, select, `steps` AdamW updates of `state`,
/// then predict. With steps = 0 this is plain inference on the original image.
SampleResult defend_sample(const dualenc::DualEncoder& model, std::span<const double> image,
                           PromptState& state, const dualenc::ClassCatalog& catalog,
                           const stats::LayerStatsBundle& bundle, const TAPTConfig& config,
                           std::uint64_t sample_id);

struct StreamOutput {
  std::vector<int> predictions;
  std::vector<int> alternate_predictions;
  std::vector<SampleResult> samples;
  std::size_t fallbacks = 0;
};

struct StreamOptions {
  /// One JSON line per sample.
  std::ostream* log = nullptr;
  /// With reset_interval = 1, defend samples in parallel.
  bool parallel = true;
};

StreamOutput defend_stream(const dualenc::DualEncoder& model, const Matrix& images,
                           std::span<const std::uint64_t> sample_ids, const dualenc::PromptSet& prompts_init,
                           const dualenc::ClassCatalog& catalog, const stats::LayerStatsBundle& bundle,
                           const TAPTConfig& config, const StreamOptions& options = {});

}  // namespace tapt::defense
