#pragma once

// Synthetic grounding benchmark: grey images with bright lesions on a dark
// background, one templated sentence per lesion ("large ring lower left.")
// and a pixel-exact mask per sentence.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "galn/errors.hpp"
#include "galn/image.hpp"
#include "galn/random.hpp"
#include "galn/textenc.hpp"

namespace galn {

inline const std::vector<std::string> kAllShapes = {"blob", "ring", "bar", "cross"};
inline const std::vector<std::string> kAllSizes = {"small", "large"};
inline const std::vector<std::string> kVertical = {"upper", "middle", "lower"};
inline const std::vector<std::string> kHorizontal = {"left", "center", "right"};

inline std::vector<std::string> all_positions() {
  std::vector<std::string> out;
  for (const auto& v : kVertical)
    for (const auto& h : kHorizontal) out.push_back(v + " " + h);
  return out;
}

struct SynthSpec {
  std::size_t image_size = 64;
  std::vector<std::string> shapes = kAllShapes;
  std::vector<std::string> positions = all_positions();
  std::vector<std::string> sizes = kAllSizes;
  std::size_t min_lesions = 1;
  std::size_t max_lesions = 3;
  double noise = 0.05;  // background Gaussian sigma, clipped to [0, 1]
  std::size_t train_count = 400;
  std::size_t test_count = 100;
  std::uint64_t seed = 0;

  double background = 0.1;
  double foreground = 0.9;

  /// Lesion radius in pixels for a size word.
  std::size_t radius(const std::string& size) const {
    const double cell = static_cast<double>(image_size) / 3.0;
    return static_cast<std::size_t>(std::lround(cell * (size == "large" ? 0.4 : 0.2)));
  }

  void validate() const;
  friend bool operator==(const SynthSpec&, const SynthSpec&) = default;
};

struct Lesion {
  std::string shape;
  std::string size;
  std::size_t row = 0;  // coarse cell, 0..2 top to bottom
  std::size_t col = 0;  // coarse cell, 0..2 left to right
  std::size_t cx = 0;   // centre pixel
  std::size_t cy = 0;
  std::size_t radius = 0;

  std::string position() const { return kVertical[row] + " " + kHorizontal[col]; }
  std::string sentence() const { return size + " " + shape + " " + position() + "."; }
  friend bool operator==(const Lesion&, const Lesion&) = default;
};

struct SynthSample {
  std::size_t id = 0;
  ImageSample image;
  std::string report;
  std::vector<BinaryMask> masks;  // one per sentence
  std::string category;           // shape of the first lesion
  std::vector<Lesion> lesions;
};

struct SynthDataset {
  SynthSpec spec;
  std::vector<SynthSample> train;
  std::vector<SynthSample> test;
  Vocab vocab;
};

namespace detail {

inline bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

/// [begin, end) pixel span of coarse cell `i` along an axis of length n.
inline std::pair<std::size_t, std::size_t> cell_span(std::size_t i, std::size_t n) {
  return {i * n / 3, (i + 1) * n / 3};
}

inline std::pair<std::size_t, std::size_t> parse_position(const std::string& pos) {
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 3; ++c)
      if (pos == kVertical[r] + " " + kHorizontal[c]) return {r, c};
  throw ConfigError("unknown position '" + pos + "'");
}

}  // namespace detail

inline void SynthSpec::validate() const {
  if (shapes.empty() || positions.empty() || sizes.empty()) {
    throw ConfigError("synth spec needs at least one shape, position and size");
  }
  for (const auto& s : shapes)
    if (!detail::contains(kAllShapes, s)) throw ConfigError("unknown shape '" + s + "'");
  for (const auto& s : sizes)
    if (!detail::contains(kAllSizes, s)) throw ConfigError("unknown size '" + s + "'");
  for (const auto& p : positions) detail::parse_position(p);
  if (min_lesions < 1 || min_lesions > max_lesions) throw ConfigError("lesions_per_image range must satisfy 1 <= min <= max");
  if (max_lesions > positions.size()) {
    throw ConfigError("lesions_per_image max " + std::to_string(max_lesions) + " exceeds the " +
                      std::to_string(positions.size()) + " non-overlapping positions");
  }
  if (image_size < 12) throw ConfigError("image_size must be >= 12");
  if (2 * radius("large") + 1 > image_size / 3) throw ConfigError("image_size too small for large lesions");
  if (!(noise >= 0.0) || !std::isfinite(noise)) throw ConfigError("noise must be finite and >= 0");
  if (train_count == 0 && test_count == 0) throw ConfigError("synth spec generates no samples");
}

/// Whether pixel offset (dx, dy) from the centre belongs to the lesion support.
inline bool lesion_covers(const std::string& shape, std::size_t radius, long dx, long dy) {
  const double r = static_cast<double>(radius);
  const double d2 = static_cast<double>(dx * dx + dy * dy);
  const long adx = std::labs(dx), ady = std::labs(dy);
  const long rr = static_cast<long>(radius);
  if (shape == "blob") return d2 <= r * r;
  if (shape == "ring") return d2 <= r * r && d2 >= 0.3025 * r * r;  // inner radius 0.55 r
  if (shape == "bar") return adx <= rr && ady <= std::max(1L, rr / 3);
  if (shape == "cross") {
    const long t = std::max(1L, rr / 4);
    return (adx <= rr && ady <= t) || (ady <= rr && adx <= t);
  }
  throw ConfigError("unknown shape '" + shape + "'");
}

inline BinaryMask render_mask(const Lesion& l, std::size_t image_size) {
  BinaryMask m = BinaryMask::empty(image_size, image_size);
  const long r = static_cast<long>(l.radius);
  for (long dy = -r; dy <= r; ++dy)
    for (long dx = -r; dx <= r; ++dx) {
      const long x = static_cast<long>(l.cx) + dx, y = static_cast<long>(l.cy) + dy;
      if (x < 0 || y < 0 || x >= static_cast<long>(image_size) || y >= static_cast<long>(image_size)) continue;
      if (lesion_covers(l.shape, l.radius, dx, dy)) m.set(static_cast<std::size_t>(x), static_cast<std::size_t>(y));
    }
  return m;
}

/// Inverse of Lesion::sentence for (shape, size, coarse cell).
inline Lesion parse_sentence(const std::string& sentence) {
  const auto words = normalize_words(sentence);
  if (words.size() != 4) throw DataError("not a benchmark sentence: '" + sentence + "'");
  Lesion l;
  l.size = words[0];
  l.shape = words[1];
  if (!detail::contains(kAllSizes, l.size) || !detail::contains(kAllShapes, l.shape)) {
    throw DataError("not a benchmark sentence: '" + sentence + "'");
  }
  try {
    std::tie(l.row, l.col) = detail::parse_position(words[2] + " " + words[3]);
  } catch (const ConfigError&) {
    throw DataError("not a benchmark sentence: '" + sentence + "'");
  }
  return l;
}

/// Every word the sentence templates can emit for this spec.
inline Vocab benchmark_vocab(const SynthSpec& spec) {
  std::vector<std::string> words(spec.sizes);
  words.insert(words.end(), spec.shapes.begin(), spec.shapes.end());
  for (const auto& p : spec.positions) {
    const auto [r, c] = detail::parse_position(p);
    words.push_back(kVertical[r]);
    words.push_back(kHorizontal[c]);
  }
  return Vocab::from_words(words);
}

inline SynthSample generate_sample(const SynthSpec& spec, std::uint64_t stream, std::size_t id) {
  Rng rng(derive_seed(spec.seed, stream, id));
  const std::size_t n = spec.image_size;
  SynthSample s;
  s.id = id;

  const std::size_t count = spec.min_lesions + rng.below(spec.max_lesions - spec.min_lesions + 1);
  std::vector<std::string> cells = spec.positions;
  rng.shuffle(cells);
  for (std::size_t k = 0; k < count; ++k) {
    Lesion l;
    l.shape = spec.shapes[rng.below(spec.shapes.size())];
    l.size = spec.sizes[rng.below(spec.sizes.size())];
    std::tie(l.row, l.col) = detail::parse_position(cells[k]);
    l.radius = spec.radius(l.size);
    // Centre jittered so the whole support stays inside the coarse cell.
    const auto [x0, x1] = detail::cell_span(l.col, n);
    const auto [y0, y1] = detail::cell_span(l.row, n);
    l.cx = x0 + l.radius + rng.below(x1 - x0 - 2 * l.radius);
    l.cy = y0 + l.radius + rng.below(y1 - y0 - 2 * l.radius);
    s.lesions.push_back(l);
  }

  s.image = ImageSample{n, n, std::vector<double>(n * n, spec.background)};
  for (const auto& l : s.lesions) {
    s.masks.push_back(render_mask(l, n));
    for (std::size_t i = 0; i < n * n; ++i)
      if (s.masks.back().bits[i]) s.image.pixels[i] = spec.foreground;
  }
  for (auto& p : s.image.pixels) {
    const double v = std::clamp(p + spec.noise * rng.normal(), 0.0, 1.0);
    p = std::lround(v * 255.0) / 255.0;  // exactly representable in 8-bit PGM
  }

  for (std::size_t k = 0; k < s.lesions.size(); ++k) {
    if (k) s.report += ' ';
    s.report += s.lesions[k].sentence();
  }
  s.category = s.lesions.front().shape;
  return s;
}

/// Train and test draws use separate rng streams derived from the seed.
inline SynthDataset generate(const SynthSpec& spec) {
  spec.validate();
  SynthDataset ds{spec, {}, {}, benchmark_vocab(spec)};
  for (std::size_t i = 0; i < spec.train_count; ++i) ds.train.push_back(generate_sample(spec, 1, i));
  for (std::size_t i = 0; i < spec.test_count; ++i) ds.test.push_back(generate_sample(spec, 2, spec.train_count + i));
  return ds;
}

// --------------------------------------------------------------------------
// On-disk layout

inline nlohmann::json to_json(const SynthSpec& s) {
  return {{"image_size", s.image_size}, {"shapes", s.shapes},     {"positions", s.positions},
          {"sizes", s.sizes},           {"lesions_per_image", {s.min_lesions, s.max_lesions}},
          {"noise", s.noise},           {"train", s.train_count}, {"test", s.test_count},
          {"seed", s.seed}};
}

/// Missing keys keep the defaults.
inline SynthSpec synth_spec_from_json(const nlohmann::json& j, SynthSpec s = {}) {
  try {
    if (j.contains("image_size")) s.image_size = j.at("image_size").get<std::size_t>();
    if (j.contains("shapes")) s.shapes = j.at("shapes").get<std::vector<std::string>>();
    if (j.contains("positions")) s.positions = j.at("positions").get<std::vector<std::string>>();
    if (j.contains("sizes")) s.sizes = j.at("sizes").get<std::vector<std::string>>();
    if (j.contains("lesions_per_image")) {
      const auto r = j.at("lesions_per_image").get<std::vector<std::size_t>>();
      if (r.size() != 2) throw ConfigError("lesions_per_image must be [min, max]");
      s.min_lesions = r[0];
      s.max_lesions = r[1];
    }
    if (j.contains("noise")) s.noise = j.at("noise").get<double>();
    if (j.contains("train")) s.train_count = j.at("train").get<std::size_t>();
    if (j.contains("test")) s.test_count = j.at("test").get<std::size_t>();
    if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synth spec: ") + e.what());
  }
  return s;
}

namespace detail {

inline std::string numbered(const char* prefix, std::size_t id, const char* suffix) {
  std::ostringstream os;
  os << prefix << std::setw(5) << std::setfill('0') << id << suffix;
  return os.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + p.string());
  out << text;
  if (!out) throw IoError("write failed: " + p.string());
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open: " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace detail

/// Writes `manifest.json`, `vocab.txt` and per split `img_#####.pgm`,
/// `report_#####.txt` (one sentence per line) and `mask_#####_s.pgm`.
inline void save_dataset(const std::filesystem::path& dir, const SynthDataset& ds) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json manifest = {{"format", "galn-synth/1"}, {"spec", to_json(ds.spec)}, {"vocab", "vocab.txt"}};
  ds.vocab.save(dir / "vocab.txt");
  for (const auto* split : {"train", "test"}) {
    const auto& samples = std::string(split) == "train" ? ds.train : ds.test;
    fs::create_directories(dir / split, ec);
    if (ec) throw IoError("cannot create " + (dir / split).string() + ": " + ec.message());
    nlohmann::json list = nlohmann::json::array();
    for (const auto& s : samples) {
      const fs::path rel(split);
      const auto img = rel / detail::numbered("img_", s.id, ".pgm");
      const auto rep = rel / detail::numbered("report_", s.id, ".txt");
      save_image(dir / img, s.image);
      std::string lines;
      for (const auto& sentence : split_sentences(s.report)) lines += sentence + ".\n";
      detail::write_text(dir / rep, lines);
      nlohmann::json masks = nlohmann::json::array();
      for (std::size_t k = 0; k < s.masks.size(); ++k) {
        const auto mp = rel / detail::numbered("mask_", s.id, ("_" + std::to_string(k) + ".pgm").c_str());
        save_mask(dir / mp, s.masks[k]);
        masks.push_back(mp.generic_string());
      }
      nlohmann::json lesions = nlohmann::json::array();
      for (const auto& l : s.lesions) {
        lesions.push_back({{"shape", l.shape}, {"size", l.size}, {"position", l.position()},
                           {"cx", l.cx},       {"cy", l.cy},     {"radius", l.radius}});
      }
      list.push_back({{"id", s.id},
                      {"image", img.generic_string()},
                      {"report", rep.generic_string()},
                      {"masks", masks},
                      {"category", s.category},
                      {"lesions", lesions}});
    }
    manifest["splits"][split] = list;
  }
  detail::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

struct LoadedDataset {
  SynthSpec spec;
  Vocab vocab;
  std::vector<SynthSample> train;
  std::vector<SynthSample> test;
};

/// Reads a dataset directory. With `require_masks`, a sample without a mask
/// per sentence is a DataError naming the sample id.
inline LoadedDataset load_dataset(const std::filesystem::path& dir, bool require_masks = true) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(detail::read_text(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  LoadedDataset out;
  try {
    if (manifest.contains("spec")) out.spec = synth_spec_from_json(manifest.at("spec"));
    out.vocab = Vocab::load(dir / manifest.value("vocab", std::string("vocab.txt")));
    for (const auto* split : {"train", "test"}) {
      auto& target = std::string(split) == "train" ? out.train : out.test;
      if (!manifest["splits"].contains(split)) continue;
      for (const auto& e : manifest["splits"][split]) {
        SynthSample s;
        s.id = e.at("id").get<std::size_t>();
        s.image = load_image(dir / e.at("image").get<std::string>());
        std::string report;
        std::istringstream lines(detail::read_text(dir / e.at("report").get<std::string>()));
        for (std::string line; std::getline(lines, line);) {
          line = detail::trim(line);
          if (line.empty()) continue;
          if (!report.empty()) report += ' ';
          report += line;
        }
        s.report = report;
        s.category = e.value("category", std::string("unknown"));
        if (e.contains("masks"))
          for (const auto& m : e.at("masks")) s.masks.push_back(load_mask(dir / m.get<std::string>()));
        if (e.contains("lesions"))
          for (const auto& l : e.at("lesions")) {
            Lesion les;
            les.shape = l.at("shape").get<std::string>();
            les.size = l.at("size").get<std::string>();
            std::tie(les.row, les.col) = detail::parse_position(l.at("position").get<std::string>());
            les.cx = l.at("cx").get<std::size_t>();
            les.cy = l.at("cy").get<std::size_t>();
            les.radius = l.at("radius").get<std::size_t>();
            s.lesions.push_back(les);
          }
        if (require_masks) {
          const std::size_t sentences = split_sentences(s.report).size();
          if (s.masks.size() != sentences) {
            throw DataError("sample " + std::to_string(s.id) + ": " + std::to_string(s.masks.size()) +
                            " masks for " + std::to_string(sentences) + " sentences");
          }
        }
        target.push_back(std::move(s));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest in " + dir.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("malformed manifest: ") + e.what());
  }
  return out;
}

}  // namespace galn
