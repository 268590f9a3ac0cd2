#pragma once

// Adam training of every model parameter against the joint contrastive
// loss, with per-epoch exponential learning-rate decay, seeded batching and
// a resumable binary checkpoint.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "galn/diffmath.hpp"
#include "galn/errors.hpp"
#include "galn/image.hpp"
#include "galn/losses.hpp"
#include "galn/model.hpp"
#include "galn/random.hpp"
#include "galn/textenc.hpp"
#include "galn/visenc.hpp"

namespace galn {

struct TrainConfig {
  double lr0 = 0.00002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double decay = 0.9;  // lr multiplier applied after every epoch
  std::size_t batch_size = 32;
  std::size_t epochs = 4;
  std::uint64_t seed = 0;
  LossConfig loss;

  void validate() const {
    if (!(lr0 > 0.0) || !std::isfinite(lr0)) throw ConfigError("train.lr0 must be positive");
    if (!(decay > 0.0 && decay <= 1.0)) throw ConfigError("train.decay must be in (0, 1]");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.beta1/beta2 must be in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("train.eps must be positive");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    loss.validate();
  }
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline double lr_at_epoch(const TrainConfig& cfg, std::size_t epoch) {
  return cfg.lr0 * std::pow(cfg.decay, static_cast<double>(epoch));
}

struct AdamState {
  ModelParams m;
  ModelParams v;
  std::uint64_t step = 0;

  static AdamState zeros_like(const ModelParams& p) {
    AdamState s;
    std::vector<Shape> shapes;
    p.for_each([&](const char*, const Tensor& t) { shapes.push_back(t.shape); });
    std::size_t i = 0, j = 0;
    s.m.for_each([&](const char*, Tensor& t) { t = Tensor::zeros(shapes[i++]); });
    s.v.for_each([&](const char*, Tensor& t) { t = Tensor::zeros(shapes[j++]); });
    return s;
  }
};

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update of a single tensor; `step` is 1-based.
inline void adam_update(Tensor& p, std::span<const double> g, Tensor& m, Tensor& v, std::uint64_t step, double lr,
                        const AdamHyper& h) {
  if (g.size() != p.values.size() || m.values.size() != p.values.size() || v.values.size() != p.values.size()) {
    throw DimensionError("adam_update: parameter, gradient and moment sizes differ");
  }
  if (step < 1) throw ContractError("adam_update: step counter must be >= 1");
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < g.size(); ++i) {
    m.values[i] = h.beta1 * m.values[i] + (1.0 - h.beta1) * g[i];
    v.values[i] = h.beta2 * v.values[i] + (1.0 - h.beta2) * g[i] * g[i];
    const double m_hat = m.values[i] / c1;
    const double v_hat = v.values[i] / c2;
    p.values[i] -= lr * m_hat / (std::sqrt(v_hat) + h.eps);
  }
}

/// Adam step over every model parameter using the gradients held by `grads`.
/// Non-finite gradients abort before any parameter is touched.
inline void adam_step(ModelParams& params, const ModelNodes& grads, AdamState& state, double lr, const AdamHyper& h) {
  std::vector<std::pair<std::string, std::span<const double>>> g;
  grads.for_each([&](const char* name, const Node& n) { g.emplace_back(name, n.grad()); });
  for (const auto& [name, values] : g)
    for (double x : values)
      if (!std::isfinite(x)) throw DomainError("adam_step: non-finite gradient in " + name);
  ++state.step;
  std::vector<Tensor*> ps, ms, vs;
  params.for_each([&](const char*, Tensor& t) { ps.push_back(&t); });
  state.m.for_each([&](const char*, Tensor& t) { ms.push_back(&t); });
  state.v.for_each([&](const char*, Tensor& t) { vs.push_back(&t); });
  for (std::size_t i = 0; i < ps.size(); ++i) adam_update(*ps[i], g[i].second, *ms[i], *vs[i], state.step, lr, h);
}

/// One training / evaluation pair as seen by the model.
struct PairedExample {
  TokenizedReport text;
  ImageSample image;
};

/// Forward pass of the encoders for a set of examples.
inline PairedBatch build_batch(std::span<const PairedExample* const> examples, const ModelNodes& nodes,
                               std::size_t patch_size) {
  PairedBatch batch;
  for (const auto* ex : examples) {
    auto img = encode_image(ex->image, nodes.image, patch_size);
    batch.items.push_back({embed_report(ex->text, nodes.text), std::move(img.local), std::move(img.global)});
  }
  return batch;
}

struct Checkpoint {
  Model model;
  AdamState adam;
  TrainConfig train;
  std::size_t epoch = 0;  // completed epochs
  std::string rng_state;
};

inline Checkpoint initial_checkpoint(Vocab vocab, const ModelConfig& model_cfg, const TrainConfig& cfg) {
  Checkpoint c;
  c.model = init_model(cfg.seed, std::move(vocab), model_cfg);
  c.adam = AdamState::zeros_like(c.model.params);
  c.train = cfg;
  c.rng_state = Rng(derive_seed(cfg.seed, 0x5bf1e)).state();
  return c;
}

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;
  double g_vt = 0.0, g_tv = 0.0, l_vt = 0.0, l_tv = 0.0, total = 0.0;
  friend bool operator==(const EpochLog&, const EpochLog&) = default;
};

inline nlohmann::json to_json(const EpochLog& e) {
  return {{"epoch", e.epoch}, {"lr", e.lr},     {"g_vt", e.g_vt},  {"g_tv", e.g_tv},
          {"l_vt", e.l_vt},   {"l_tv", e.l_tv}, {"total", e.total}};
}

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochLog> log;
};

/// Continue training `start` until `start.train.epochs` epochs are complete.
/// Each epoch shuffles the data with the checkpointed rng and drops the
/// remainder after the last full batch.
inline TrainResult train(std::span<const PairedExample> data, Checkpoint start,
                         const std::function<void(const EpochLog&)>& on_epoch = {}) {
  const TrainConfig& cfg = start.train;
  cfg.validate();
  if (data.size() < cfg.batch_size) {
    throw ConfigError("dataset of " + std::to_string(data.size()) + " samples is smaller than one batch of " +
                      std::to_string(cfg.batch_size));
  }
  TrainResult out{std::move(start), {}};
  Checkpoint& ck = out.checkpoint;
  Rng rng;
  rng.set_state(ck.rng_state);
  const AdamHyper hyper{cfg.beta1, cfg.beta2, cfg.eps};
  const std::size_t batches = data.size() / cfg.batch_size;

  for (std::size_t epoch = ck.epoch; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    const double lr = lr_at_epoch(cfg, epoch);
    EpochLog log{epoch + 1, lr};
    for (std::size_t b = 0; b < batches; ++b) {
      std::vector<const PairedExample*> members;
      for (std::size_t k = 0; k < cfg.batch_size; ++k) members.push_back(&data[order[b * cfg.batch_size + k]]);
      const ModelNodes nodes = make_nodes(ck.model.params);
      const PairedBatch batch = build_batch(members, nodes, ck.model.config.patch_size);
      const LossBreakdown loss = total_loss(batch, cfg.loss);
      backward(loss.total);
      adam_step(ck.model.params, nodes, ck.adam, lr, hyper);
      log.g_vt += loss.g_v_given_t.item();
      log.g_tv += loss.g_t_given_v.item();
      log.l_vt += loss.l_v_given_t.item();
      log.l_tv += loss.l_t_given_v.item();
      log.total += loss.total.item();
    }
    const double n = static_cast<double>(batches);
    log.g_vt /= n;
    log.g_tv /= n;
    log.l_vt /= n;
    log.l_tv /= n;
    log.total /= n;
    ck.epoch = epoch + 1;
    ck.rng_state = rng.state();
    out.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return out;
}

inline TrainResult train(std::span<const PairedExample> data, Vocab vocab, const ModelConfig& model_cfg,
                         const TrainConfig& cfg, const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  return train(data, initial_checkpoint(std::move(vocab), model_cfg, cfg), on_epoch);
}

// --------------------------------------------------------------------------
// Config (de)serialization

inline nlohmann::json to_json(const LossConfig& c) {
  return {{"tau1", c.tau1}, {"tau2", c.tau2}, {"tau3", c.tau3}, {"strict_eq4_log", c.strict_eq4_log}};
}

inline LossConfig loss_config_from_json(const nlohmann::json& j, LossConfig c = {}) {
  c.tau1 = j.value("tau1", c.tau1);
  c.tau2 = j.value("tau2", c.tau2);
  c.tau3 = j.value("tau3", c.tau3);
  c.strict_eq4_log = j.value("strict_eq4_log", c.strict_eq4_log);
  return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr0", c.lr0},   {"beta1", c.beta1},           {"beta2", c.beta2},   {"eps", c.eps},
          {"decay", c.decay}, {"batch_size", c.batch_size}, {"epochs", c.epochs}, {"seed", c.seed},
          {"loss", to_json(c.loss)}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  c.lr0 = j.value("lr0", c.lr0);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.decay = j.value("decay", c.decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  if (j.contains("loss")) c.loss = loss_config_from_json(j.at("loss"), c.loss);
  return c;
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"dim", c.dim}, {"hidden", c.hidden}, {"patch_size", c.patch_size}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c = {}) {
  c.dim = j.value("dim", c.dim);
  c.hidden = j.value("hidden", c.hidden);
  c.patch_size = j.value("patch_size", c.patch_size);
  return c;
}

// --------------------------------------------------------------------------
// Checkpoint container
//
//   "GALN" | u32 version | u32 tensor count |
//   per tensor: u32 name length, name bytes, u32 rows, u32 cols, rows*cols f64 |
//   u32 json length | UTF-8 JSON snapshot (configs, vocab, counters, rng state)
//
// All integers and floats little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double d) {
    const auto v = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void bytes(std::string_view s) { buf_.append(s); }
  const std::string& str() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string data) : data_(std::move(data)) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_++])) << (8 * i);
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_++])) << (8 * i);
    return std::bit_cast<double>(v);
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw DataError("checkpoint truncated");
  }
  std::string data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  std::vector<std::pair<std::string, const Tensor*>> tensors;
  c.model.params.for_each([&](const char* n, const Tensor& t) { tensors.emplace_back(n, &t); });
  c.adam.m.for_each([&](const char* n, const Tensor& t) { tensors.emplace_back(std::string("adam.m.") + n, &t); });
  c.adam.v.for_each([&](const char* n, const Tensor& t) { tensors.emplace_back(std::string("adam.v.") + n, &t); });

  detail::ByteWriter w;
  w.bytes("GALN");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(t->shape.rows));
    w.u32(static_cast<std::uint32_t>(t->shape.cols));
    for (double v : t->values) w.f64(v);
  }
  const nlohmann::json snapshot = {{"model", to_json(c.model.config)},
                                   {"train", to_json(c.train)},
                                   {"vocab", c.model.vocab.pieces()},
                                   {"epoch", c.epoch},
                                   {"adam_step", c.adam.step},
                                   {"rng_state", c.rng_state}};
  const std::string js = snapshot.dump();
  w.u32(static_cast<std::uint32_t>(js.size()));
  w.bytes(js);
  return w.str();
}

inline Checkpoint deserialize_checkpoint(std::string bytes) {
  detail::ByteReader r(std::move(bytes));
  if (r.bytes(4) != "GALN") throw DataError("not a checkpoint (bad magic)");
  const auto version = r.u32();
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  std::vector<std::pair<std::string, Tensor>> tensors(r.u32());
  for (auto& [name, t] : tensors) {
    name = r.bytes(r.u32());
    t.shape.rows = r.u32();
    t.shape.cols = r.u32();
    t.values.resize(t.shape.size());
    for (auto& v : t.values) v = r.f64();
  }
  nlohmann::json snap;
  try {
    snap = nlohmann::json::parse(r.bytes(r.u32()));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint config snapshot: ") + e.what());
  }

  Checkpoint c;
  try {
    c.model.config = model_config_from_json(snap.at("model"));
    c.train = train_config_from_json(snap.at("train"));
    c.model.vocab = Vocab(snap.at("vocab").get<std::vector<std::string>>());
    c.epoch = snap.at("epoch").get<std::size_t>();
    c.adam.step = snap.at("adam_step").get<std::uint64_t>();
    c.rng_state = snap.at("rng_state").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint config snapshot: ") + e.what());
  }
  auto take = [&](const std::string& name) -> Tensor {
    for (auto& [n, t] : tensors)
      if (n == name) return std::move(t);
    throw DataError("checkpoint is missing tensor " + name);
  };
  c.model.params.for_each([&](const char* n, Tensor& t) { t = take(n); });
  c.adam.m.for_each([&](const char* n, Tensor& t) { t = take(std::string("adam.m.") + n); });
  c.adam.v.for_each([&](const char* n, Tensor& t) { t = take(std::string("adam.v.") + n); });
  if (c.model.params.text.table.shape != Shape{c.model.config.dim, c.model.vocab.size()}) {
    throw DataError("checkpoint embedding table does not match its vocabulary");
  }
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  const auto bytes = serialize_checkpoint(c);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return deserialize_checkpoint(os.str());
}

}  // namespace galn
