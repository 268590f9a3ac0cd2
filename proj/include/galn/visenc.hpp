#pragma once

// Patch encoder producing the local feature grid (D x M) and the global
// feature (D x 1) of an image.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "galn/diffmath.hpp"
#include "galn/image.hpp"
#include "galn/random.hpp"
#include "galn/textenc.hpp"

namespace galn {

/// Shared per-patch map (w1, b1, w2, b2) and the global projection (wg, bg)
/// applied to the mean of the hidden patch features.
template <typename T>
struct ImageEncoderWeights {
  T w1, b1, w2, b2, wg, bg;

  template <typename F>
  void for_each(F&& f) { visit(*this, f); }
  template <typename F>
  void for_each(F&& f) const { visit(*this, f); }

 private:
  template <typename Self, typename F>
  static void visit(Self& s, F& f) {
    f("image.w1", s.w1);
    f("image.b1", s.b1);
    f("image.w2", s.w2);
    f("image.b2", s.b2);
    f("image.wg", s.wg);
    f("image.bg", s.bg);
  }
};

using ImageEncoderParams = ImageEncoderWeights<Tensor>;
using ImageEncoderNodes = ImageEncoderWeights<Node>;

/// Glorot-uniform weights, zero biases. Deterministic in `seed`.
inline ImageEncoderParams init_image_params(std::uint64_t seed, std::size_t dim, std::size_t patch_size,
                                            std::size_t hidden) {
  if (dim == 0 || hidden == 0 || patch_size == 0) throw ConfigError("image encoder: dimensions must be >= 1");
  Rng rng(derive_seed(seed, 0x1a6e));
  const std::size_t in = patch_size * patch_size;
  ImageEncoderParams p;
  p.w1 = glorot_uniform(rng, hidden, in, in, hidden);
  p.b1 = Tensor::zeros({hidden, 1});
  p.w2 = glorot_uniform(rng, dim, hidden, hidden, dim);
  p.b2 = Tensor::zeros({dim, 1});
  p.wg = glorot_uniform(rng, dim, hidden, hidden, dim);
  p.bg = Tensor::zeros({dim, 1});
  return p;
}

struct FeatureGrid {
  Node features;  // D x M, column j is cell (j / grid_w, j % grid_w)
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t patch_size = 0;

  std::size_t cells() const { return grid_h * grid_w; }
};

struct GlobalFeature {
  Node feature;  // D x 1
};

struct EncodedImage {
  FeatureGrid local;
  GlobalFeature global;
};

inline void check_geometry(const ImageSample& img, std::size_t patch_size) {
  if (patch_size == 0) throw GeometryError("patch size must be >= 1");
  if (img.pixels.size() != img.width * img.height) {
    throw GeometryError("image has " + std::to_string(img.pixels.size()) + " pixels for " +
                        std::to_string(img.width) + "x" + std::to_string(img.height));
  }
  if (img.width % patch_size != 0 || img.height % patch_size != 0 || img.width < patch_size ||
      img.height < patch_size) {
    throw GeometryError("image " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                        " is not divisible into patches of size " + std::to_string(patch_size));
  }
}

/// Flattened non-overlapping patches as columns: (patch_size^2) x M, with
/// pixels rescaled from [0, 1] to [-1, 1].
inline Node patch_matrix(const ImageSample& img, std::size_t patch_size) {
  check_geometry(img, patch_size);
  const std::size_t gw = img.width / patch_size, gh = img.height / patch_size;
  const std::size_t m = gw * gh, k = patch_size * patch_size;
  std::vector<double> x(k * m);
  for (std::size_t cy = 0; cy < gh; ++cy)
    for (std::size_t cx = 0; cx < gw; ++cx) {
      const std::size_t col = cy * gw + cx;
      for (std::size_t py = 0; py < patch_size; ++py)
        for (std::size_t px = 0; px < patch_size; ++px)
          x[(py * patch_size + px) * m + col] = 2.0 * img.at(cx * patch_size + px, cy * patch_size + py) - 1.0;
    }
  return Node::constant({k, m}, std::move(x));
}

inline EncodedImage encode_image(const ImageSample& img, const ImageEncoderNodes& w, std::size_t patch_size) {
  const Node x = patch_matrix(img, patch_size);
  if (w.w1.cols() != x.rows()) {
    throw GeometryError("encoder expects patches of " + std::to_string(w.w1.cols()) + " pixels, image patches have " +
                        std::to_string(x.rows()));
  }
  const Node hidden = relu(add(matmul(w.w1, x), w.b1));
  EncodedImage out;
  out.local.features = add(matmul(w.w2, hidden), w.b2);
  out.local.grid_w = img.width / patch_size;
  out.local.grid_h = img.height / patch_size;
  out.local.patch_size = patch_size;
  out.global.feature = add(matmul(w.wg, mean_axis(hidden, 1)), w.bg);
  return out;
}

}  // namespace galn
