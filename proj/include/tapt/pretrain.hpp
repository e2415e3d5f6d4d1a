#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tapt/data.hpp"
#include "tapt/dualenc.hpp"

namespace tapt::dualenc {

struct PretrainConfig {
  ToyEncoderConfig model;
  std::size_t steps = 1200;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::size_t warmup = 60;
  double weight_decay = 0.05;
  /// Fraction of training images replaced by a random resized crop + flip.
  double crop_probability = 0.5;
  double crop_scale_lo = 0.5;
  /// Caption templates sampled per step; each must word-split to the same
  /// length for every class name.
  std::vector<std::string> templates = {"a photo of a {}", "a drawing of a {} shape",
                                        "a rendering of a {} symbol", "a picture of the {} icon"};
  std::uint64_t seed = 7;
};

void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

struct PretrainResult {
  ModelWeights weights;
  /// steps, final loss, held-out accuracy, data hash, weight hash.
  nlohmann::json manifest;
};

/// Cross-entropy of each image against the caption embeddings of every class
/// in the dataset catalog (CLIP's image-to-text loss restricted to the class
/// set). Throws TrainingError on a non-finite loss.
PretrainResult pretrain_toy(const Dataset& dataset, const PretrainConfig& config,
                            const std::function<void(std::size_t, double)>& on_step = {});

/// Top-1 accuracy in percent of `prompts` on the listed samples.
double clean_accuracy(const DualEncoder& model, const Dataset& dataset,
                      std::span<const std::size_t> indices, const PromptSet& prompts);

/// Argmax of each probability row.
std::vector<int> argmax_rows(const Matrix& probs);

}  // namespace tapt::dualenc
