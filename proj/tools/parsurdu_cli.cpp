// Command-line entry point: dataset synthesis, training, evaluation,
// single-image inference and gradient self-verification.
//
// Exit codes: 0 success, 1 usage/config error, 2 I/O error, 3 numeric
// failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "parsurdu/config.hpp"
#include "parsurdu/dataset.hpp"
#include "parsurdu/eval.hpp"
#include "parsurdu/gradcheck.hpp"
#include "parsurdu/model.hpp"
#include "parsurdu/train.hpp"

namespace {

using namespace parsurdu;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitIo = 2;
constexpr int kExitNumeric = 3;

std::vector<std::string> load_lexicon_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FileNotFound(path);
  std::vector<std::string> words;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    utf8_to_u32(line);  // validate encoding early
    words.push_back(line);
  }
  return words;
}

std::vector<std::string> lexicon_for(const RunConfig& rc) {
  if (!rc.lexicon.empty()) {
    auto words = load_lexicon_file(rc.lexicon);
    if (words.empty()) throw ConfigError("lexicon file has no words: " + rc.lexicon);
    return words;
  }
  std::vector<std::string> words;
  words.reserve(kDemoLexiconSize);
  for (const char* w : kDemoLexicon) words.emplace_back(w);
  return words;
}

int cmd_synth(const std::string& config_path, const std::string& out_dir, long long samples,
              std::uint64_t seed) {
  const RunConfig rc = config_path.empty() ? RunConfig{} : parse_config_file(config_path);
  if (samples < 0) throw ConfigError("--samples must be >= 0");
  const std::vector<std::string> words = lexicon_for(rc);
  std::vector<const char*> word_ptrs;
  word_ptrs.reserve(words.size());
  for (const std::string& w : words) word_ptrs.push_back(w.c_str());

  const std::vector<Sample> samples_out = make_synthetic_dataset(
      static_cast<std::size_t>(samples), seed, synth_options(rc),
      std::span<const char* const>(word_ptrs.data(), word_ptrs.size()));
  const std::string manifest = save_dataset(out_dir, samples_out);

  // The vocabulary covers the whole lexicon, not just the sampled words, so
  // train/val splits generated separately share one label space.
  const GlyphVocabulary vocab = GlyphVocabulary::build(words);
  const std::string vocab_path =
      (std::filesystem::path(out_dir) / "vocab.tsv").string();
  vocab.save(vocab_path);

  std::printf("wrote %zu samples\nmanifest: %s\nvocabulary: %s (%d classes)\n",
              samples_out.size(), manifest.c_str(), vocab_path.c_str(), vocab.size());
  return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              const std::string& resume, std::optional<std::uint64_t> seed_override) {
  RunConfig rc = parse_config_file(config_path);
  if (seed_override) rc.seed = *seed_override;
  std::optional<std::string> resume_path;
  if (!resume.empty()) resume_path = resume;
  const TrainRunResult r = run_training(rc, out_dir, resume_path);
  if (r.final_val_cer >= 0.0) {
    std::printf("finished at step %llu  val_loss=%.6f  val_cer=%.6f\ncheckpoint: %s\nmetrics: %s\n",
                static_cast<unsigned long long>(r.final_step), r.final_val_loss, r.final_val_cer,
                r.checkpoint_path.c_str(), r.metrics_path.c_str());
  } else {
    std::printf("finished at step %llu (no validation ran)\ncheckpoint: %s\n",
                static_cast<unsigned long long>(r.final_step), r.checkpoint_path.c_str());
  }
  return kExitOk;
}

struct LoadedModel {
  RecognizerConfig config;
  GlyphVocabulary vocab;
  std::unique_ptr<Recognizer> model;
  LeafSet leaves;
};

LoadedModel load_model(const std::string& checkpoint_path) {
  const Checkpoint ck = load_checkpoint(checkpoint_path);
  LoadedModel lm;
  lm.config = ck.config;
  lm.vocab = GlyphVocabulary::from_entries(ck.vocab_entries);
  if (lm.vocab.size() != ck.config.vocab_size) {
    throw CheckpointError("vocabulary size in checkpoint config does not match its entries");
  }
  lm.model = std::make_unique<Recognizer>(ck.config);
  restore_params(ck, lm.model->params());  // optimizer slots ignored here
  lm.leaves = LeafSet(lm.model->params(), /*requires_grad=*/false);
  return lm;
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint_path,
             const std::string& manifest_path, const std::string& report_path,
             const std::string& mode_flag, std::optional<int> refine_flag) {
  RunConfig rc = config_path.empty() ? RunConfig{} : parse_config_file(config_path);
  const LoadedModel lm = load_model(checkpoint_path);
  rc.model = lm.config;  // checkpoint geometry governs preprocessing output

  Recognizer::DecodeMode mode = rc.decode_mode;
  if (mode_flag == "ar") mode = Recognizer::DecodeMode::AR;
  else if (mode_flag == "nar") mode = Recognizer::DecodeMode::NAR;
  const int refine = refine_flag.value_or(rc.refine_passes);

  std::vector<Sample> samples = load_manifest(manifest_path);
  for (Sample& s : samples) s.image = preprocess_image(std::move(s.image), rc);

  std::vector<Prediction> preds;
  preds.reserve(samples.size());
  for (const Sample& s : samples) {
    Prediction p;
    p.id = s.id;
    p.ground_truth = s.label;
    p.prediction = lm.model->recognize(s.image, lm.vocab, lm.leaves, mode, refine);
    preds.push_back(std::move(p));
  }
  const CERReport report = aggregate_cer(preds);
  if (!report_path.empty()) write_cer_report(report_path, report);
  std::printf("cer=%.6f word_accuracy=%.6f samples=%zu\n", report.cer(), report.word_accuracy(),
              report.per_sample.size());
  return kExitOk;
}

int cmd_infer(const std::string& config_path, const std::string& checkpoint_path,
              const std::string& image_path, const std::string& mode_flag,
              std::optional<int> refine_flag) {
  RunConfig rc = config_path.empty() ? RunConfig{} : parse_config_file(config_path);
  const LoadedModel lm = load_model(checkpoint_path);
  rc.model = lm.config;

  Recognizer::DecodeMode mode = rc.decode_mode;
  if (mode_flag == "ar") mode = Recognizer::DecodeMode::AR;
  else if (mode_flag == "nar") mode = Recognizer::DecodeMode::NAR;
  const int refine = refine_flag.value_or(rc.refine_passes);

  GrayImage img = preprocess_image(read_pgm(image_path), rc);
  const std::string text = lm.model->recognize(img, lm.vocab, lm.leaves, mode, refine);
  std::printf("%s\n", text.c_str());
  return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed) {
  const GradReport report = run_gradient_checks(seed);
  print_gradient_report(std::cout, report);
  return report.all_pass() ? kExitOk : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Word-level Urdu OCR: permuted-order sequence recognizer"};
  app.require_subcommand(1);

  std::string config_path, out_dir, checkpoint_path, resume_path, manifest_path, image_path;
  std::string mode_flag;
  long long samples = 100;
  std::uint64_t seed = 0;
  int refine = -1;

  auto* synth = app.add_subcommand("synth", "Render a synthetic word-image dataset");
  synth->add_option("--config", config_path, "Run configuration file");
  synth->add_option("--out", out_dir, "Output directory")->required();
  synth->add_option("--samples", samples, "Number of images to render");
  synth->add_option("--seed", seed, "Generator seed");

  auto* train = app.add_subcommand("train", "Train a recognizer");
  train->add_option("--config", config_path, "Run configuration file")->required();
  train->add_option("--out", out_dir, "Output directory for metrics and checkpoints")->required();
  train->add_option("--checkpoint", resume_path, "Checkpoint to resume from");
  train->add_option("--seed", seed, "Override the config seed");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  eval->add_option("--config", config_path, "Run configuration file (preprocessing/decoding)");
  eval->add_option("--checkpoint", checkpoint_path, "Checkpoint to evaluate")->required();
  eval->add_option("--out", out_dir, "Report file path");
  eval->add_option("--mode", mode_flag, "Decode mode: ar or nar")
      ->check(CLI::IsMember({"ar", "nar"}));
  eval->add_option("--refine", refine, "Refinement passes (nar mode)");
  eval->add_option("manifest", manifest_path, "Dataset manifest")->required();

  auto* infer = app.add_subcommand("infer", "Recognize one word image");
  infer->add_option("--config", config_path, "Run configuration file (preprocessing/decoding)");
  infer->add_option("--checkpoint", checkpoint_path, "Trained checkpoint")->required();
  infer->add_option("--mode", mode_flag, "Decode mode: ar or nar")
      ->check(CLI::IsMember({"ar", "nar"}));
  infer->add_option("--refine", refine, "Refinement passes (nar mode)");
  infer->add_option("image", image_path, "Input PGM image")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference self-verification");
  gradcheck->add_option("--seed", seed, "Probe seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth(config_path, out_dir, samples, seed);
    if (train->parsed()) {
      const bool seed_set = train->count("--seed") > 0;
      return cmd_train(config_path, out_dir, resume_path,
                       seed_set ? std::optional<std::uint64_t>(seed) : std::nullopt);
    }
    if (eval->parsed()) {
      return cmd_eval(config_path, checkpoint_path, manifest_path, out_dir, mode_flag,
                      refine >= 0 ? std::optional<int>(refine) : std::nullopt);
    }
    if (infer->parsed()) {
      return cmd_infer(config_path, checkpoint_path, image_path, mode_flag,
                       refine >= 0 ? std::optional<int>(refine) : std::nullopt);
    }
    if (gradcheck->parsed()) return cmd_gradcheck(seed);
  } catch (const NonFiniteLoss& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FileNotFound& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const MalformedManifest& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const UnsupportedImageFormat& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const VocabIoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const CheckpointError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const EncodingError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
