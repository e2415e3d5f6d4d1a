#pragma once

#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tapt/dualenc.hpp"
#include "tapt/matrix.hpp"

namespace tapt {

/// Labeled images with a class catalog and a train/test split. Images are
/// channel-major rows with values in [0,1].
struct Dataset {
  std::string name;
  dualenc::ClassCatalog catalog;
  std::size_t image_size = 0;
  std::size_t channels = 3;
  Matrix images;
  std::vector<int> labels;
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;

  std::size_t size() const { return labels.size(); }
  std::span<const double> image(std::size_t i) const { return images.row(i); }
  std::string hash() const;
};

nlohmann::json manifest_of(const Dataset& d);
Matrix gather_images(const Dataset& d, std::span<const std::size_t> indices);
std::vector<int> gather_labels(const Dataset& d, std::span<const std::size_t> indices);

}  // namespace tapt
