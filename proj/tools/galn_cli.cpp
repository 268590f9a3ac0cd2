// galn: generate synthetic data, train, ground and evaluate.
//
//   galn gen-data --out DIR [--config PATH] [--seed N]
//   galn train    --data DIR --out DIR [--epochs N --batch N --lr X --decay X --tau1/2/3 X]
//   galn ground   --ckpt FILE --image FILE --sentence TEXT --out DIR [--thresholds 0.1,0.2,...]
//   galn eval     --ckpt FILE --data DIR --out DIR [--thresholds ...]
//
// Exit codes: 0 ok, 2 config or input, 3 io, 4 data.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "galn/grounding.hpp"
#include "galn/synthbench.hpp"
#include "galn/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum class Level { error = 0, info = 1, debug = 2 };

Level g_level = Level::info;

void log(Level l, const std::string& msg) {
  if (static_cast<int>(l) <= static_cast<int>(g_level)) std::cerr << "galn: " << msg << "\n";
}

Level level_from_env() {
  const char* v = std::getenv("GALN_LOG");
  if (!v || !*v) return Level::info;
  const std::string s(v);
  if (s == "error") return Level::error;
  if (s == "info") return Level::info;
  if (s == "debug") return Level::debug;
  throw galn::ConfigError("GALN_LOG must be one of error, info, debug; got '" + s + "'");
}

struct RunConfig {
  std::uint64_t seed = 0;
  galn::SynthSpec synth;
  galn::ModelConfig model;
  galn::TrainConfig train;
  std::vector<double> thresholds = galn::kDefaultThresholds;
  galn::Upsample upsample = galn::Upsample::bilinear;
  std::string split = "test";

  json to_json() const {
    return {{"seed", seed},
            {"synth", galn::to_json(synth)},
            {"model", galn::to_json(model)},
            {"train", galn::to_json(train)},
            {"eval",
             {{"thresholds", thresholds},
              {"upsample", upsample == galn::Upsample::bilinear ? "bilinear" : "nearest"},
              {"split", split}}}};
  }
};

struct Overrides {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs, batch;
  std::optional<double> lr, decay, tau1, tau2, tau3;
  std::string thresholds;
  std::string upsample;
};

std::vector<double> parse_thresholds(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      throw galn::ConfigError("bad threshold '" + item + "'");
    }
    if (used != item.size() || !std::isfinite(v)) throw galn::ConfigError("bad threshold '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw galn::ConfigError("threshold list is empty");
  return out;
}

galn::Upsample parse_upsample(const std::string& s) {
  if (s == "bilinear") return galn::Upsample::bilinear;
  if (s == "nearest") return galn::Upsample::nearest;
  throw galn::ConfigError("upsample must be bilinear or nearest, got '" + s + "'");
}

/// File values first, then flags; the single seed drives every rng.
RunConfig resolve(const Overrides& o) {
  RunConfig rc;
  if (!o.config_path.empty()) {
    std::ifstream in(o.config_path);
    if (!in) throw galn::ConfigError("cannot read config file " + o.config_path);
    json j;
    try {
      j = json::parse(in);
      if (j.contains("seed")) rc.seed = j.at("seed").get<std::uint64_t>();
      if (j.contains("synth")) rc.synth = galn::synth_spec_from_json(j.at("synth"));
      if (j.contains("model")) rc.model = galn::model_config_from_json(j.at("model"));
      if (j.contains("train")) rc.train = galn::train_config_from_json(j.at("train"));
      if (j.contains("eval")) {
        const auto& e = j.at("eval");
        if (e.contains("thresholds")) rc.thresholds = e.at("thresholds").get<std::vector<double>>();
        if (e.contains("upsample")) rc.upsample = parse_upsample(e.at("upsample").get<std::string>());
        if (e.contains("split")) rc.split = e.at("split").get<std::string>();
      }
    } catch (const json::exception& e) {
      throw galn::ConfigError("config " + o.config_path + ": " + e.what());
    }
  }
  if (o.seed) rc.seed = *o.seed;
  if (o.epochs) rc.train.epochs = *o.epochs;
  if (o.batch) rc.train.batch_size = *o.batch;
  if (o.lr) rc.train.lr0 = *o.lr;
  if (o.decay) rc.train.decay = *o.decay;
  if (o.tau1) rc.train.loss.tau1 = *o.tau1;
  if (o.tau2) rc.train.loss.tau2 = *o.tau2;
  if (o.tau3) rc.train.loss.tau3 = *o.tau3;
  if (!o.thresholds.empty()) rc.thresholds = parse_thresholds(o.thresholds);
  if (!o.upsample.empty()) rc.upsample = parse_upsample(o.upsample);
  rc.synth.seed = rc.seed;
  rc.train.seed = rc.seed;

  rc.synth.validate();
  rc.model.validate();
  rc.train.validate();
  if (rc.thresholds.empty()) throw galn::ConfigError("threshold list is empty");
  for (double t : rc.thresholds)
    if (!std::isfinite(t)) throw galn::ConfigError("thresholds must be finite");
  if (rc.split != "train" && rc.split != "test") throw galn::ConfigError("eval.split must be train or test");
  return rc;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw galn::IoError("cannot open for writing: " + p.string());
  out << text;
  if (!out) throw galn::IoError("write failed: " + p.string());
}

void prepare_out(const fs::path& dir, const RunConfig& rc, const std::string& command) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw galn::IoError("cannot create output directory " + dir.string() + (ec ? ": " + ec.message() : ""));
  }
  json j = rc.to_json();
  j["command"] = command;
  write_file(dir / "config.json", j.dump(2) + "\n");
}

std::vector<galn::PairedExample> to_examples(const std::vector<galn::SynthSample>& samples, const galn::Vocab& vocab) {
  std::vector<galn::PairedExample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({galn::tokenize_report(s.report, vocab), s.image});
  return out;
}

std::string threshold_label(double t) {
  std::ostringstream os;
  os << t;
  return os.str();
}

int cmd_gen_data(const RunConfig& rc, const fs::path& out) {
  prepare_out(out, rc, "gen-data");
  const galn::SynthDataset ds = galn::generate(rc.synth);
  galn::save_dataset(out, ds);
  log(Level::info, "wrote " + std::to_string(ds.train.size()) + " train / " + std::to_string(ds.test.size()) +
                       " test samples to " + out.string());
  return 0;
}

int cmd_train(const RunConfig& rc, const fs::path& data, const fs::path& out, const std::string& resume) {
  const galn::LoadedDataset ds = galn::load_dataset(data, false);
  const auto examples = to_examples(ds.train, ds.vocab);
  galn::Checkpoint start;
  if (resume.empty()) {
    start = galn::initial_checkpoint(ds.vocab, rc.model, rc.train);
  } else {
    start = galn::load_checkpoint(resume);
    if (!(start.model.vocab == ds.vocab)) throw galn::DataError("checkpoint vocabulary does not match dataset");
    start.train.epochs = rc.train.epochs;
  }
  prepare_out(out, rc, "train");
  std::string lines;
  const auto result = galn::train(examples, std::move(start), [&](const galn::EpochLog& e) {
    lines += galn::to_json(e).dump() + "\n";
    std::ostringstream os;
    os << "epoch " << e.epoch << " lr " << e.lr << " total " << e.total;
    log(Level::info, os.str());
    log(Level::debug, galn::to_json(e).dump());
  });
  galn::save_checkpoint(out / "ckpt.bin", result.checkpoint);
  write_file(out / "losses.jsonl", lines);
  log(Level::info, "checkpoint written to " + (out / "ckpt.bin").string());
  return 0;
}

int cmd_ground(const RunConfig& rc, const fs::path& ckpt, const fs::path& image, const std::string& sentence,
               const fs::path& out) {
  if (galn::normalize_words(sentence).empty()) throw galn::InputError("empty query sentence");
  const galn::Checkpoint ck = galn::load_checkpoint(ckpt);
  const galn::ImageSample img = galn::load_image(image);
  const galn::SimilarityMap map = galn::ground_query(sentence, img, ck.model, rc.upsample);
  prepare_out(out, rc, "ground");
  galn::write_pgm(out / "heatmap.pgm", galn::heatmap_raster(map));
  for (double t : rc.thresholds) galn::save_mask(out / ("mask_" + threshold_label(t) + ".pgm"), galn::threshold_mask(map, t));
  const auto [r, c] = map.argmax_cell();
  log(Level::info, "argmax cell row " + std::to_string(r) + " col " + std::to_string(c));
  return 0;
}

int cmd_eval(const RunConfig& rc, const fs::path& ckpt, const fs::path& data, const fs::path& out) {
  const galn::Checkpoint ck = galn::load_checkpoint(ckpt);
  const galn::LoadedDataset ds = galn::load_dataset(data, true);
  const auto& split = rc.split == "train" ? ds.train : ds.test;
  if (split.empty()) throw galn::DataError("dataset split '" + rc.split + "' is empty");
  const galn::EvaluationReport rep = galn::evaluate(split, ck.model, rc.thresholds, rc.upsample);
  prepare_out(out, rc, "eval");
  write_file(out / "metrics.json", galn::to_json(rep).dump(2) + "\n");
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << "mean_iou " << rep.overall.mean_iou << "\nmean_dice " << rep.overall.mean_dice << "\n";
  std::cout << os.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sentence-level image/report alignment: data, training, grounding, evaluation"};
  app.require_subcommand(1);
  Overrides o;
  std::string out, data, ckpt, image, sentence, resume;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "JSON run configuration");
    sub->add_option("--seed", o.seed, "seed for every random draw");
    sub->add_option("--out", out, "output directory")->required();
  };
  auto loss_flags = [&](CLI::App* sub) {
    sub->add_option("--tau1", o.tau1, "global / instance temperature");
    sub->add_option("--tau2", o.tau2, "region attention temperature");
    sub->add_option("--tau3", o.tau3, "match aggregation scale");
  };
  auto eval_flags = [&](CLI::App* sub) {
    sub->add_option("--thresholds", o.thresholds, "comma-separated thresholds");
    sub->add_option("--upsample", o.upsample, "bilinear or nearest");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic benchmark");
  common(gen);

  CLI::App* tr = app.add_subcommand("train", "train on a dataset's train split");
  common(tr);
  loss_flags(tr);
  tr->add_option("--data", data, "dataset directory")->required();
  tr->add_option("--epochs", o.epochs, "number of epochs");
  tr->add_option("--batch", o.batch, "batch size");
  tr->add_option("--lr", o.lr, "initial learning rate");
  tr->add_option("--decay", o.decay, "per-epoch learning rate factor");
  tr->add_option("--resume", resume, "continue from a checkpoint");

  CLI::App* gr = app.add_subcommand("ground", "heatmap and threshold masks for one query");
  common(gr);
  eval_flags(gr);
  gr->add_option("--ckpt", ckpt, "checkpoint file")->required();
  gr->add_option("--image", image, "PGM image")->required();
  gr->add_option("--sentence", sentence, "query text")->required();

  CLI::App* ev = app.add_subcommand("eval", "IoU / Dice over a dataset split");
  common(ev);
  eval_flags(ev);
  ev->add_option("--ckpt", ckpt, "checkpoint file")->required();
  ev->add_option("--data", data, "dataset directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    g_level = level_from_env();
    const RunConfig rc = resolve(o);
    log(Level::debug, "resolved config " + rc.to_json().dump());
    if (gen->parsed()) return cmd_gen_data(rc, out);
    if (tr->parsed()) return cmd_train(rc, data, out, resume);
    if (gr->parsed()) return cmd_ground(rc, ckpt, image, sentence, out);
    if (ev->parsed()) return cmd_eval(rc, ckpt, data, out);
  } catch (const galn::ConfigError& e) {
    log(Level::error, std::string("config error: ") + e.what());
    return 2;
  } catch (const galn::InputError& e) {
    log(Level::error, std::string("input error: ") + e.what());
    return 2;
  } catch (const galn::IoError& e) {
    log(Level::error, std::string("io error: ") + e.what());
    return 3;
  } catch (const galn::Error& e) {
    log(Level::error, std::string("data error: ") + e.what());
    return 4;
  } catch (const std::exception& e) {
    log(Level::error, std::string("unexpected error: ") + e.what());
    return 1;
  }
  return 0;
}
