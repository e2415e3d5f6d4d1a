#include "tapt/data.hpp"

#include "tapt/hash.hpp"

namespace tapt {

nlohmann::json manifest_of(const Dataset& d) {
  return {{"name", d.name},
          {"class_names", d.catalog.class_names},
          {"template", d.catalog.prompt_template},
          {"image_size", d.image_size},
          {"channels", d.channels},
          {"count", d.size()},
          {"labels", d.labels},
          {"train", d.train},
          {"test", d.test}};
}

std::string Dataset::hash() const {
  Hasher h;
  h.update(manifest_of(*this).dump());
  h.update(images);
  return h.hex();
}

Matrix gather_images(const Dataset& d, std::span<const std::size_t> indices) {
  Matrix m(indices.size(), d.images.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto src = d.image(indices[i]);
    std::copy(src.begin(), src.end(), m.row(i).begin());
  }
  return m;
}

std::vector<int> gather_labels(const Dataset& d, std::span<const std::size_t> indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(d.labels[i]);
  return out;
}

}  // namespace tapt
