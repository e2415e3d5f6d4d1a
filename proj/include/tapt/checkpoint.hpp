#pragma once

#include <filesystem>

#include <nlohmann/json.hpp>

#include "tapt/dualenc.hpp"

namespace tapt {

struct WeightCheckpoint {
  dualenc::ModelWeights weights;
  nlohmann::json manifest = nlohmann::json::object();
};

struct PromptCheckpoint {
  dualenc::PromptSet prompts = dualenc::PromptSet::handcrafted(0);
  nlohmann::json manifest = nlohmann::json::object();
};

/// Model weights plus config and manifest; reloading is bit-exact.
void save_weights(const std::filesystem::path& path, const WeightCheckpoint& ckpt);
WeightCheckpoint load_weights(const std::filesystem::path& path);

/// Prompt tokens with design tag and training manifest; reloading is bit-exact.
void save_prompts(const std::filesystem::path& path, const PromptCheckpoint& ckpt);
PromptCheckpoint load_prompts(const std::filesystem::path& path);

}  // namespace tapt
