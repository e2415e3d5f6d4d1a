#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tapt/data.hpp"
#include "tapt/dualenc.hpp"
#include "tapt/matrix.hpp"

namespace tapt::bench {

using tapt::Dataset;

/// Generator knobs for one rendered dataset.
struct RenderParams {
  double radius_lo = 9.0;  // shape radius in pixels
  double radius_hi = 12.0;
  double center_jitter = 3.0;
  double background_lo = 0.05;
  double background_hi = 0.35;
  double noise_std = 0.04;
  double color_jitter = 0.08;

  friend bool operator==(const RenderParams&, const RenderParams&) = default;
};

void to_json(nlohmann::json& j, const RenderParams& p);
void from_json(const nlohmann::json& j, RenderParams& p);

struct SyntheticDatasetSpec {
  std::size_t num_classes = 8;
  std::size_t samples_per_class = 100;
  std::size_t image_size = 32;
  std::size_t num_zero_shot = 2;
  std::size_t pretrain_samples_per_class = 60;
  double train_fraction = 0.75;
  RenderParams render;
  std::uint64_t seed = 2024;

  void validate() const;
};

void to_json(nlohmann::json& j, const SyntheticDatasetSpec& s);
void from_json(const nlohmann::json& j, SyntheticDatasetSpec& s);

/// Shape x color class vocabulary; combos are split disjointly across datasets.
const std::vector<std::string>& shape_words();
const std::vector<std::string>& color_words();

/// Renders one image of the given (shape, color) class.
std::vector<double> render_image(std::size_t shape, std::size_t color, std::size_t image_size,
                                 const RenderParams& params, std::uint64_t seed);

struct DatasetFamily {
  Dataset pretrain;                 // every shape x color combo (web-scale corpus stand-in)
  Dataset source;                   // the public proxy dataset
  std::vector<Dataset> zero_shot;   // disjoint class vocabularies, shifted rendering
};

DatasetFamily build_family(const SyntheticDatasetSpec& spec);

/// Writes <dir>/family.json and one subdirectory per dataset.
void write_family(const DatasetFamily& family, const SyntheticDatasetSpec& spec,
                  const std::filesystem::path& dir);
void write_dataset(const Dataset& d, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);
/// Loads source and zero-shot datasets listed in family.json.
std::vector<std::string> family_members(const std::filesystem::path& dir);

}  // namespace tapt::bench
