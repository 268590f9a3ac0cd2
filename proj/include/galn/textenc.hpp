#pragma once

// Report text -> piece / word / sentence / report embedding hierarchy.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "galn/diffmath.hpp"
#include "galn/errors.hpp"
#include "galn/random.hpp"

namespace galn {

/// Characters the tokenizer can always spell with single-character pieces.
inline constexpr std::string_view kAlphabet = "abcdefghijklmnopqrstuvwxyz0123456789";

class Vocab {
 public:
  static constexpr std::string_view kUnk = "<unk>";

  Vocab() : Vocab(std::vector<std::string>{}) {}

  /// Pieces in id order. `<unk>` and every alphabet character are appended
  /// when missing; duplicates are an error.
  explicit Vocab(std::vector<std::string> pieces) : pieces_(std::move(pieces)) {
    auto ensure = [&](const std::string& p) {
      if (std::find(pieces_.begin(), pieces_.end(), p) == pieces_.end()) pieces_.push_back(p);
    };
    ensure(std::string(kUnk));
    for (char c : kAlphabet) ensure(std::string(1, c));
    for (std::size_t i = 0; i < pieces_.size(); ++i) {
      if (pieces_[i].empty()) throw DataError("vocab: empty piece at line " + std::to_string(i));
      if (!ids_.emplace(pieces_[i], i).second) throw DataError("vocab: duplicate piece '" + pieces_[i] + "'");
      max_len_ = std::max(max_len_, pieces_[i].size());
    }
  }

  /// `<unk>`, the alphabet, then `words` in first-seen order.
  static Vocab from_words(const std::vector<std::string>& words) {
    std::vector<std::string> p{std::string(kUnk)};
    for (char c : kAlphabet) p.emplace_back(1, c);
    for (const auto& w : words)
      if (std::find(p.begin(), p.end(), w) == p.end()) p.push_back(w);
    return Vocab(std::move(p));
  }

  std::size_t size() const { return pieces_.size(); }
  const std::string& piece(std::size_t id) const { return pieces_.at(id); }
  const std::vector<std::string>& pieces() const { return pieces_; }
  std::size_t unk_id() const { return ids_.at(std::string(kUnk)); }
  std::size_t max_piece_length() const { return max_len_; }

  std::optional<std::size_t> id(std::string_view piece) const {
    auto it = ids_.find(std::string(piece));
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    for (const auto& p : pieces_) out << p << '\n';
    if (!out) throw IoError("write failed: " + path.string());
  }

  /// One piece per line; the line number is the id.
  static Vocab load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocab: " + path.string());
    std::vector<std::string> p;
    for (std::string line; std::getline(in, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      p.push_back(line);
    }
    return Vocab(std::move(p));
  }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.pieces_ == b.pieces_; }

 private:
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, std::size_t> ids_;
  std::size_t max_len_ = 0;
};

struct TokenizedReport {
  std::vector<std::size_t> piece_ids;
  std::vector<std::size_t> word_boundaries;      // pieces per word
  std::vector<std::size_t> sentence_boundaries;  // words per sentence

  std::size_t num_pieces() const { return piece_ids.size(); }
  std::size_t num_words() const { return word_boundaries.size(); }
  std::size_t num_sentences() const { return sentence_boundaries.size(); }

  void validate() const {
    std::size_t n = 0, q = 0;
    for (auto c : word_boundaries) {
      if (c == 0) throw DataError("tokenized report: word with zero pieces");
      n += c;
    }
    for (auto c : sentence_boundaries) {
      if (c == 0) throw DataError("tokenized report: sentence with zero words");
      q += c;
    }
    if (sentence_boundaries.empty()) throw DataError("tokenized report: no sentences");
    if (n != piece_ids.size() || q != word_boundaries.size()) {
      throw DataError("tokenized report: boundary counts do not add up");
    }
  }
};

namespace detail {

inline bool has_alnum(std::string_view s) {
  return std::any_of(s.begin(), s.end(), [](unsigned char c) { return std::isalnum(c) != 0; });
}

inline std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n\f\v");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n\f\v");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace detail

/// Split on '.', '!' or '?' followed by whitespace or end of text.
/// Fragments without alphanumeric content are dropped.
inline std::vector<std::string> split_sentences(std::string_view report) {
  std::vector<std::string> out;
  std::size_t start = 0;
  auto flush = [&](std::size_t end) {
    auto frag = detail::trim(report.substr(start, end - start));
    if (detail::has_alnum(frag)) out.push_back(std::move(frag));
  };
  for (std::size_t i = 0; i < report.size(); ++i) {
    const char c = report[i];
    if ((c == '.' || c == '!' || c == '?') &&
        (i + 1 == report.size() || std::isspace(static_cast<unsigned char>(report[i + 1])))) {
      flush(i);
      start = i + 1;
    }
  }
  if (start < report.size()) flush(report.size());
  if (out.empty()) throw DataError("empty report: no alphabetic content");
  return out;
}

/// Lowercase, drop punctuation, and split on whitespace.
inline std::vector<std::string> normalize_words(std::string_view sentence) {
  std::vector<std::string> words;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) words.push_back(std::move(cur));
    cur.clear();
  };
  for (unsigned char c : sentence) {
    if (std::isspace(c)) {
      flush();
    } else if (!std::ispunct(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return words;
}

/// Greedy longest-match word pieces, one id list per word.
inline std::vector<std::vector<std::size_t>> tokenize(std::string_view sentence, const Vocab& vocab) {
  std::vector<std::vector<std::size_t>> out;
  for (const auto& w : normalize_words(sentence)) {
    std::vector<std::size_t> ids;
    std::size_t pos = 0;
    while (pos < w.size()) {
      std::size_t len = std::min(vocab.max_piece_length(), w.size() - pos);
      std::optional<std::size_t> hit;
      for (; len > 0; --len) {
        if ((hit = vocab.id(std::string_view(w).substr(pos, len)))) break;
      }
      if (hit) {
        ids.push_back(*hit);
        pos += len;
      } else {
        ids.push_back(vocab.unk_id());
        pos += 1;
      }
    }
    out.push_back(std::move(ids));
  }
  return out;
}

inline TokenizedReport tokenize_report(std::string_view report, const Vocab& vocab) {
  TokenizedReport tok;
  for (const auto& s : split_sentences(report)) {
    const auto words = tokenize(s, vocab);
    if (words.empty()) continue;
    for (const auto& w : words) {
      tok.piece_ids.insert(tok.piece_ids.end(), w.begin(), w.end());
      tok.word_boundaries.push_back(w.size());
    }
    tok.sentence_boundaries.push_back(words.size());
  }
  tok.validate();
  return tok;
}

// --------------------------------------------------------------------------
// Encoder

/// Trainable text-side weights: lookup table (D x |vocab|) and a shared
/// per-piece linear -> ReLU -> linear map.
template <typename T>
struct TextEncoderWeights {
  T table, w1, b1, w2, b2;

  template <typename F>
  void for_each(F&& f) { visit(*this, f); }
  template <typename F>
  void for_each(F&& f) const { visit(*this, f); }

 private:
  template <typename Self, typename F>
  static void visit(Self& s, F& f) {
    f("text.table", s.table);
    f("text.w1", s.w1);
    f("text.b1", s.b1);
    f("text.w2", s.w2);
    f("text.b2", s.b2);
  }
};

using TextEncoderParams = TextEncoderWeights<Tensor>;
using TextEncoderNodes = TextEncoderWeights<Node>;

inline Tensor glorot_uniform(Rng& rng, std::size_t rows, std::size_t cols, std::size_t fan_in, std::size_t fan_out) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t = Tensor::zeros({rows, cols});
  for (auto& v : t.values) v = rng.uniform(-a, a);
  return t;
}

inline TextEncoderParams init_text_params(std::uint64_t seed, std::size_t vocab_size, std::size_t dim,
                                          std::size_t hidden) {
  if (dim == 0 || hidden == 0 || vocab_size == 0) throw ConfigError("text encoder: dimensions must be >= 1");
  Rng rng(derive_seed(seed, 0x7e47));
  TextEncoderParams p;
  p.table = glorot_uniform(rng, dim, vocab_size, vocab_size, dim);
  p.w1 = glorot_uniform(rng, hidden, dim, dim, hidden);
  p.b1 = Tensor::zeros({hidden, 1});
  p.w2 = glorot_uniform(rng, dim, hidden, hidden, dim);
  p.b2 = Tensor::zeros({dim, 1});
  return p;
}

struct TextEmbeddings {
  Node pieces;     // D x N
  Node words;      // D x Q
  Node sentences;  // D x P
  Node report;     // D x 1
};

/// Sum piece columns into words, words into sentences; report is the mean of sentences.
inline TextEmbeddings aggregate(const Node& pieces, const TokenizedReport& tok) {
  tok.validate();
  if (pieces.cols() != tok.num_pieces()) {
    throw DimensionError("aggregate: " + std::to_string(pieces.cols()) + " piece columns for " +
                         std::to_string(tok.num_pieces()) + " pieces");
  }
  auto segment_matrix = [](const std::vector<std::size_t>& counts, std::size_t total) {
    std::vector<double> m(total * counts.size(), 0.0);
    std::size_t row = 0;
    for (std::size_t g = 0; g < counts.size(); ++g)
      for (std::size_t k = 0; k < counts[g]; ++k) m[(row++) * counts.size() + g] = 1.0;
    return Node::constant({total, counts.size()}, std::move(m));
  };
  TextEmbeddings e;
  e.pieces = pieces;
  e.words = matmul(pieces, segment_matrix(tok.word_boundaries, tok.num_pieces()));
  e.sentences = matmul(e.words, segment_matrix(tok.sentence_boundaries, tok.num_words()));
  e.report = mean_axis(e.sentences, 1);
  return e;
}

inline Node encode_pieces(std::span<const std::size_t> piece_ids, const TextEncoderNodes& w) {
  for (auto id : piece_ids)
    if (id >= w.table.cols()) {
      throw IndexError("embed_report: piece id " + std::to_string(id) + " out of range for vocab of " +
                       std::to_string(w.table.cols()));
    }
  const Node gathered = transpose(gather_rows(transpose(w.table), piece_ids));
  const Node hidden = relu(add(matmul(w.w1, gathered), w.b1));
  return add(matmul(w.w2, hidden), w.b2);
}

inline TextEmbeddings embed_report(const TokenizedReport& tok, const TextEncoderNodes& w) {
  tok.validate();
  return aggregate(encode_pieces(tok.piece_ids, w), tok);
}

}  // namespace galn
