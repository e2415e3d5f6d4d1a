#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tapt/attacks.hpp"
#include "tapt/data.hpp"
#include "tapt/dualenc.hpp"
#include "tapt/matrix.hpp"

namespace tapt::stats {

/// Per-layer elementwise mean and unbiased variance; each is L x D.
struct Moments {
  Matrix mu;
  Matrix var;
};

/// layers[l] holds one row per sample. Variance uses n-1 and is 0 for n = 1.
/// Each column is reduced in sorted order, so the result is bit-identical
/// under any permutation of the samples.
Moments batch_moments(std::span<const Matrix> layers);
Moments batch_moments(std::span<const dualenc::EmbeddingTrace> traces);

struct LayerStatsBundle {
  Matrix mu_adv, var_adv, mu_clean, var_clean;  // L x D each
  nlohmann::json source_manifest = nlohmann::json::object();

  std::size_t num_layers() const { return mu_adv.rows(); }
  std::size_t dim() const { return mu_adv.cols(); }
  /// Throws ConfigError unless all four arrays are num_layers x embed_dim,
  /// finite, with non-negative variances.
  void validate(std::size_t num_layers, std::size_t embed_dim) const;
  std::string hash() const;
};

/// Per-layer embeddings of a batch of images: L matrices of batch x D.
std::vector<Matrix> encode_layers(const dualenc::DualEncoder& model, const Matrix& images,
                                  const dualenc::PromptSet& prompts);

/// Adversarial statistics from `attack` examples crafted against and encoded
/// with robust_prompts; clean statistics from clean images under clean_prompts.
LayerStatsBundle compute_public_stats(const dualenc::DualEncoder& model, const Dataset& public_data,
                                      std::span<const std::size_t> indices,
                                      const dualenc::PromptSet& robust_prompts,
                                      const dualenc::PromptSet& clean_prompts,
                                      const attacks::AttackSpec& attack);

void save_stats(const std::filesystem::path& path, const LayerStatsBundle& bundle);
/// Validates shapes against the model config; throws ConfigError on mismatch.
LayerStatsBundle load_stats(const std::filesystem::path& path, const dualenc::ToyEncoderConfig& config);

}  // namespace tapt::stats
