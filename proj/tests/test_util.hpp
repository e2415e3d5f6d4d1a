#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "tapt/bench/dataset.hpp"
#include "tapt/dualenc.hpp"
#include "tapt/matrix.hpp"
#include "tapt/rng.hpp"

namespace tapt::testing {

// Small enough that finite-difference checks over every prompt entry are cheap.
inline dualenc::ToyEncoderConfig tiny_config() {
  dualenc::ToyEncoderConfig c;
  c.image_size = 16;
  c.patch_size = 8;
  c.embed_dim = 16;
  c.num_layers = 2;
  c.num_heads = 2;
  c.mlp_ratio = 2;
  c.temperature = 10.0;
  return c;
}

inline dualenc::ClassCatalog tiny_catalog() {
  return {{"red circle", "blue square", "green triangle"}, "a photo of a {}"};
}

/// Three-class rendered family at the tiny image size.
inline bench::DatasetFamily tiny_family(std::size_t per_class = 8) {
  bench::SyntheticDatasetSpec spec;
  spec.num_classes = 3;
  spec.samples_per_class = per_class;
  spec.image_size = 16;
  spec.num_zero_shot = 1;
  spec.pretrain_samples_per_class = 2;
  spec.seed = 99;
  return bench::build_family(spec);
}

inline Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double lo = -1.0,
                            double hi = 1.0) {
  Rng rng(seed);
  Matrix m(r, c);
  for (double& v : m.storage()) v = rng.uniform(lo, hi);
  return m;
}

inline std::vector<double> random_image(const dualenc::ToyEncoderConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> img(c.pixels());
  for (double& v : img) v = rng.uniform(0.1, 0.9);
  return img;
}

/// Central difference of f with respect to every entry of m.
inline Matrix numeric_grad(Matrix& m, const std::function<double()>& f, double h = 1e-6) {
  Matrix g(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double keep = m[i];
    m[i] = keep + h;
    const double up = f();
    m[i] = keep - h;
    const double down = f();
    m[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// max |a - b| / max(|b|_inf, floor)
inline double rel_error(const Matrix& a, const Matrix& b, double floor = 1e-3) {
  double diff = 0.0, scale = floor;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max(scale, std::abs(b[i]));
  }
  return diff / scale;
}

}  // namespace tapt::testing
