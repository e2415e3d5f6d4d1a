#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "tapt/autodiff.hpp"
#include "tapt/rng.hpp"

// Geometric image transforms expressed as sparse linear maps over
// channel-major pixel rows, so they compose with the autodiff tape.

namespace tapt::imageops {

struct CropBox {
  double x0 = 0.0;
  double y0 = 0.0;
  double width = 0.0;
  double height = 0.0;
  bool flip = false;
};

/// Bilinear resample of `box` (in source pixel units) to out_side x out_side,
/// optionally mirrored horizontally.
ad::SparseMap resized_crop(std::size_t channels, std::size_t side, const CropBox& box,
                           std::size_t out_side);

/// Bilinear resize of the full image to inner x inner, placed at (off_x,
/// off_y) on a zero canvas of size side x side.
ad::SparseMap resize_and_pad(std::size_t channels, std::size_t side, std::size_t inner,
                             std::size_t off_x, std::size_t off_y);

/// Crop covering a random area fraction in [scale_lo, scale_hi] with aspect
/// ratio log-uniform in [3/4, 4/3], plus a fair-coin horizontal flip.
CropBox random_resized_crop(Rng& rng, std::size_t side, double scale_lo, double scale_hi,
                            bool allow_flip);

std::vector<double> apply(const ad::SparseMap& map, std::span<const double> image);

}  // namespace tapt::imageops
