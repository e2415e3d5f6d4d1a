#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <nlohmann/json.hpp>

#include "tapt/data.hpp"
#include "tapt/dualenc.hpp"

// Training-time prompt tuning with frozen encoder weights: adversarial
// (min-max with an inner PGD) or standard (clean cross-entropy).

namespace tapt::apt {

struct TuneConfig {
  dualenc::PromptDesign design = dualenc::PromptDesign::kVisualOnly;
  std::size_t prompt_len = 4;
  double epsilon = 8.0 / 255.0;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 0.035;
  double momentum = 0.9;
  double init_std = 0.02;
  std::size_t inner_steps = 2;
  /// Inner PGD step; 0 means epsilon / inner_steps * 2 (i.e. epsilon for PGD-2).
  double inner_step_size = 0.0;
  /// Training samples kept per class (the shot count); 0 keeps the full split.
  std::size_t shots = 0;
  /// Asks for gradients on textual tokens; invalid for a visual-only design.
  bool train_textual = false;
  std::uint64_t seed = 11;

  void validate() const;
  double effective_inner_step() const;
};

void to_json(nlohmann::json& j, const TuneConfig& c);
void from_json(const nlohmann::json& j, TuneConfig& c);

struct TuneResult {
  dualenc::PromptSet prompts = dualenc::PromptSet::handcrafted(0);
  std::vector<double> curve;  // mean training loss per epoch
  nlohmann::json manifest;
};

using EpochCallback = std::function<void(std::size_t epoch, double loss)>;

/// Adversarial prompt tuning: each minibatch is replaced by PGD examples
/// crafted against the current prompts, then the prompts take one SGD step.
TuneResult tune(const dualenc::DualEncoder& model, const Dataset& dataset, const TuneConfig& config,
                const EpochCallback& on_epoch = {});

/// The same loop on clean images.
TuneResult standard_tune(const dualenc::DualEncoder& model, const Dataset& dataset,
                         const TuneConfig& config, const EpochCallback& on_epoch = {});

}  // namespace tapt::apt
