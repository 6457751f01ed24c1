// Flat `key = value` run configuration with `#` comments. Unknown keys are
// errors: a typo must fail loudly, not silently fall back to a default.
#pragma once

#include <cctype>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>

#include "parsurdu/image.hpp"
#include "parsurdu/model.hpp"
#include "parsurdu/synth.hpp"

namespace parsurdu {

struct RunConfig {
  // Model architecture + geometry (defaults follow the recognizer).
  RecognizerConfig model;

  // Training schedule.
  std::uint64_t seed = 0;
  int batch_size = 32;
  double learning_rate = 0.1;
  double momentum = 0.9;
  double clip_norm = 1.0;
  long long max_steps = 1000;
  long long val_interval = 200;

  // Data paths.
  std::string train_manifest;
  std::string val_manifest;
  std::string vocab_file;  // optional; built from train labels when empty
  std::string lexicon;     // optional word list for synthesis; built-in when empty

  // Preprocessing chain (applied in this order).
  int median_radius = 0;      // 0 = off
  double gaussian_sigma = 0;  // 0 = off
  bool deskew = false;
  bool contrast = false;

  // Augmentation (training only).
  bool augment = false;
  AugmentPolicy aug = AugmentPolicy::defaults();

  // Synthesis.
  double synth_noise_sigma = 8.0;
  int synth_jitter_px = 1;

  // Decoding.
  Recognizer::DecodeMode decode_mode = Recognizer::DecodeMode::AR;
  int refine_passes = 1;

  void validate() const {
    // The model's own validate() needs vocab_size, which is data-dependent;
    // check the config-level pieces here.
    RecognizerConfig m = model;
    m.vocab_size = GlyphVocabulary::kNumSpecials + 1;
    m.validate();
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
    if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
    if (val_interval < 1) throw ConfigError("val_interval must be positive");
    if (median_radius < 0) throw ConfigError("median_radius must be >= 0");
    if (gaussian_sigma < 0) throw ConfigError("gaussian_sigma must be >= 0");
    if (!(aug.scale_min > 0.0 && aug.scale_max >= aug.scale_min)) {
      throw ConfigError("augmentation scale range must satisfy 0 < min <= max");
    }
    if (!(aug.blur_prob >= 0.0 && aug.blur_prob <= 1.0)) {
      throw ConfigError("aug_blur_prob must lie in [0, 1]");
    }
    if (!(aug.crop_jitter_frac >= 0.0 && aug.crop_jitter_frac <= 0.4)) {
      throw ConfigError("aug_crop_jitter_frac must lie in [0, 0.4]");
    }
    if (refine_passes < 0) throw ConfigError("refine_passes must be >= 0");
    if (synth_noise_sigma < 0) throw ConfigError("synth_noise_sigma must be >= 0");
    if (synth_jitter_px < 0) throw ConfigError("synth_jitter_px must be >= 0");
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

inline int to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const int r = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': not an integer: '" + v + "'");
  }
}

inline long long to_ll(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long r = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': not an integer: '" + v + "'");
  }
}

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const std::uint64_t r = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': not an unsigned integer: '" + v + "'");
  }
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double r = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': not a number: '" + v + "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "off" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "': not a boolean: '" + v + "'");
}

}  // namespace detail

inline RunConfig parse_config_text(std::istream& is) {
  RunConfig rc;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string body = detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = detail::trim(std::string_view(body).substr(0, eq));
    const std::string val = detail::trim(std::string_view(body).substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");

    using namespace detail;
    if (key == "image_height") rc.model.image_height = to_int(key, val);
    else if (key == "image_width") rc.model.image_width = to_int(key, val);
    else if (key == "patch_height") rc.model.patch_height = to_int(key, val);
    else if (key == "patch_width") rc.model.patch_width = to_int(key, val);
    else if (key == "embed_dim") rc.model.embed_dim = to_int(key, val);
    else if (key == "heads") rc.model.heads = to_int(key, val);
    else if (key == "enc_layers") rc.model.enc_layers = to_int(key, val);
    else if (key == "dec_layers") rc.model.dec_layers = to_int(key, val);
    else if (key == "ff_dim") rc.model.ff_dim = to_int(key, val);
    else if (key == "dropout") rc.model.dropout = to_double(key, val);
    else if (key == "permutations") rc.model.permutations = to_int(key, val);
    else if (key == "max_label_len") rc.model.max_label_len = to_int(key, val);
    else if (key == "seed") rc.seed = to_u64(key, val);
    else if (key == "batch_size") rc.batch_size = to_int(key, val);
    else if (key == "learning_rate") rc.learning_rate = to_double(key, val);
    else if (key == "momentum") rc.momentum = to_double(key, val);
    else if (key == "clip_norm") rc.clip_norm = to_double(key, val);
    else if (key == "max_steps") rc.max_steps = to_ll(key, val);
    else if (key == "val_interval") rc.val_interval = to_ll(key, val);
    else if (key == "train_manifest") rc.train_manifest = val;
    else if (key == "val_manifest") rc.val_manifest = val;
    else if (key == "vocab_file") rc.vocab_file = val;
    else if (key == "lexicon") rc.lexicon = val;
    else if (key == "median_radius") rc.median_radius = to_int(key, val);
    else if (key == "gaussian_sigma") rc.gaussian_sigma = to_double(key, val);
    else if (key == "deskew") rc.deskew = to_bool(key, val);
    else if (key == "contrast") rc.contrast = to_bool(key, val);
    else if (key == "augment") rc.augment = to_bool(key, val);
    else if (key == "aug_rotate_deg") rc.aug.rotate_deg = to_double(key, val);
    else if (key == "aug_translate_frac") rc.aug.translate_frac = to_double(key, val);
    else if (key == "aug_scale_min") rc.aug.scale_min = to_double(key, val);
    else if (key == "aug_scale_max") rc.aug.scale_max = to_double(key, val);
    else if (key == "aug_blur_prob") rc.aug.blur_prob = to_double(key, val);
    else if (key == "aug_blur_sigma") rc.aug.blur_sigma = to_double(key, val);
    else if (key == "aug_crop_jitter_frac") rc.aug.crop_jitter_frac = to_double(key, val);
    else if (key == "synth_noise_sigma") rc.synth_noise_sigma = to_double(key, val);
    else if (key == "synth_jitter_px") rc.synth_jitter_px = to_int(key, val);
    else if (key == "decode_mode") {
      if (val == "ar") rc.decode_mode = Recognizer::DecodeMode::AR;
      else if (val == "nar") rc.decode_mode = Recognizer::DecodeMode::NAR;
      else throw ConfigError("config key 'decode_mode': expected ar or nar, got '" + val + "'");
    }
    else if (key == "refine_passes") rc.refine_passes = to_int(key, val);
    else throw ConfigError("unknown config key: '" + key + "'");
  }
  rc.validate();
  return rc;
}

inline RunConfig parse_config_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open config file: " + path);
  return parse_config_text(is);
}

inline SynthOptions synth_options(const RunConfig& rc) {
  SynthOptions o;
  o.width = rc.model.image_width;
  o.height = rc.model.image_height;
  o.noise_sigma = rc.synth_noise_sigma;
  o.jitter_px = rc.synth_jitter_px;
  return o;
}

}  // namespace parsurdu
