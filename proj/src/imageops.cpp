#include "tapt/imageops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tapt::imageops {
namespace {

struct Tap {
  std::size_t index;
  double weight;
};

// Two-tap linear interpolation at continuous coordinate `pos` on [0, n-1].
void linear_taps(double pos, std::size_t n, Tap out[2]) {
  pos = std::clamp(pos, 0.0, static_cast<double>(n - 1));
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, n - 1);
  const double t = pos - static_cast<double>(lo);
  out[0] = {lo, 1.0 - t};
  out[1] = {hi, t};
}

void emit(ad::SparseMap& m, std::size_t channels, std::size_t in_side, std::size_t out_side,
          std::size_t dst_pixel, const Tap ty[2], const Tap tx[2]) {
  const std::size_t in_plane = in_side * in_side;
  const std::size_t out_plane = out_side * out_side;
  for (std::size_t c = 0; c < channels; ++c)
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b) {
        const double w = ty[a].weight * tx[b].weight;
        if (w == 0.0) continue;
        m.dst.push_back(c * out_plane + dst_pixel);
        m.src.push_back(c * in_plane + ty[a].index * in_side + tx[b].index);
        m.weight.push_back(w);
      }
}

}  // namespace

ad::SparseMap resized_crop(std::size_t channels, std::size_t side, const CropBox& box,
                           std::size_t out_side) {
  if (box.width <= 0.0 || box.height <= 0.0) throw std::invalid_argument("resized_crop: empty box");
  ad::SparseMap m;
  m.in_dim = channels * side * side;
  m.out_dim = channels * out_side * out_side;
  const double sx = box.width / static_cast<double>(out_side);
  const double sy = box.height / static_cast<double>(out_side);
  for (std::size_t oy = 0; oy < out_side; ++oy)
    for (std::size_t ox = 0; ox < out_side; ++ox) {
      const std::size_t col = box.flip ? out_side - 1 - ox : ox;
      Tap ty[2], tx[2];
      linear_taps(box.y0 + (static_cast<double>(oy) + 0.5) * sy - 0.5, side, ty);
      linear_taps(box.x0 + (static_cast<double>(col) + 0.5) * sx - 0.5, side, tx);
      emit(m, channels, side, out_side, oy * out_side + ox, ty, tx);
    }
  return m;
}

ad::SparseMap resize_and_pad(std::size_t channels, std::size_t side, std::size_t inner,
                             std::size_t off_x, std::size_t off_y) {
  if (inner == 0 || off_x + inner > side || off_y + inner > side)
    throw std::invalid_argument("resize_and_pad: inner image does not fit");
  ad::SparseMap m;
  m.in_dim = channels * side * side;
  m.out_dim = channels * side * side;
  const double s = static_cast<double>(side) / static_cast<double>(inner);
  for (std::size_t oy = 0; oy < inner; ++oy)
    for (std::size_t ox = 0; ox < inner; ++ox) {
      Tap ty[2], tx[2];
      linear_taps((static_cast<double>(oy) + 0.5) * s - 0.5, side, ty);
      linear_taps((static_cast<double>(ox) + 0.5) * s - 0.5, side, tx);
      emit(m, channels, side, side, (oy + off_y) * side + ox + off_x, ty, tx);
    }
  return m;
}

CropBox random_resized_crop(Rng& rng, std::size_t side, double scale_lo, double scale_hi,
                            bool allow_flip) {
  const double s = static_cast<double>(side);
  const double area = s * s * rng.uniform(scale_lo, scale_hi);
  const double log_ratio = rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0));
  const double ratio = std::exp(log_ratio);
  CropBox b;
  b.width = std::min(s, std::sqrt(area * ratio));
  b.height = std::min(s, std::sqrt(area / ratio));
  b.x0 = rng.uniform(0.0, s - b.width);
  b.y0 = rng.uniform(0.0, s - b.height);
  b.flip = allow_flip && rng.bernoulli(0.5);
  return b;
}

std::vector<double> apply(const ad::SparseMap& map, std::span<const double> image) {
  if (image.size() != map.in_dim) throw std::invalid_argument("imageops::apply: size mismatch");
  std::vector<double> out(map.out_dim);
  map.apply(image, out);
  return out;
}

}  // namespace tapt::imageops
