#pragma once

// The full set of trainable weights (text + image encoders) plus the
// vocabulary and geometry they were built for.

#include <cstdint>
#include <string>
#include <vector>

#include "galn/diffmath.hpp"
#include "galn/textenc.hpp"
#include "galn/visenc.hpp"

namespace galn {

struct ModelConfig {
  std::size_t dim = 32;  // shared embedding width D
  std::size_t hidden = 256;
  std::size_t patch_size = 8;

  void validate() const {
    if (dim == 0) throw ConfigError("model.dim must be >= 1");
    if (hidden == 0) throw ConfigError("model.hidden must be >= 1");
    if (patch_size == 0) throw ConfigError("model.patch_size must be >= 1");
  }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct ModelWeights {
  TextEncoderWeights<T> text;
  ImageEncoderWeights<T> image;

  template <typename F>
  void for_each(F&& f) {
    text.for_each(f);
    image.for_each(f);
  }
  template <typename F>
  void for_each(F&& f) const {
    text.for_each(f);
    image.for_each(f);
  }
};

using ModelParams = ModelWeights<Tensor>;
using ModelNodes = ModelWeights<Node>;

/// Fresh leaf nodes for every parameter.
inline ModelNodes make_nodes(const ModelParams& p, bool requires_grad = true) {
  ModelNodes n;
  std::vector<const Tensor*> tensors;
  p.for_each([&](const char*, const Tensor& t) { tensors.push_back(&t); });
  std::size_t i = 0;
  n.for_each([&](const char*, Node& node) { node = Node::leaf(*tensors[i++], requires_grad); });
  return n;
}

struct Model {
  ModelConfig config;
  Vocab vocab;
  ModelParams params;
};

inline Model init_model(std::uint64_t seed, Vocab vocab, const ModelConfig& cfg) {
  cfg.validate();
  Model m{cfg, std::move(vocab), {}};
  m.params.text = init_text_params(seed, m.vocab.size(), cfg.dim, cfg.hidden);
  m.params.image = init_image_params(seed, cfg.dim, cfg.patch_size, cfg.hidden);
  return m;
}

}  // namespace galn
