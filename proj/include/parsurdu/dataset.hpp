// Labeled samples, tab-separated manifest i/o and synthetic corpus
// generation. A manifest line is `<image path relative to the manifest>\t
// <UTF-8 label>` with LF endings.
#pragma once

#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "parsurdu/image.hpp"
#include "parsurdu/lexicon.hpp"
#include "parsurdu/synth.hpp"
#include "parsurdu/util.hpp"

namespace parsurdu {

struct MalformedManifest : std::runtime_error {
  MalformedManifest(const std::string& path, std::size_t line, const std::string& why)
      : std::runtime_error("malformed manifest " + path + " line " + std::to_string(line) + ": " + why) {}
};

struct Sample {
  GrayImage image;
  std::string label;  // UTF-8 ground truth, non-empty
  std::string id;     // stable per-sample name, manifest path stem
};

// Loads every referenced image eagerly. Empty manifest -> empty dataset.
inline std::vector<Sample> load_manifest(const std::string& manifest_path) {
  std::ifstream is(manifest_path, std::ios::binary);
  if (!is) throw FileNotFound(manifest_path);
  const std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();

  std::vector<Sample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw MalformedManifest(manifest_path, line_no, "missing tab separator");
    if (line.find('\t', tab + 1) != std::string::npos)
      throw MalformedManifest(manifest_path, line_no, "more than one tab");
    std::string rel = line.substr(0, tab);
    std::string label = line.substr(tab + 1);
    if (rel.empty()) throw MalformedManifest(manifest_path, line_no, "empty image path");
    if (label.empty()) throw MalformedManifest(manifest_path, line_no, "empty label");
    utf8_to_u32(label);  // validates encoding, throws EncodingError

    Sample s;
    s.image = read_pgm((base / rel).string());
    s.label = std::move(label);
    s.id = std::filesystem::path(rel).stem().string();
    out.push_back(std::move(s));
  }
  return out;
}

// Writes `<id>.pgm` files plus `manifest.tsv` into `dir`; returns the
// manifest path.
inline std::string save_dataset(const std::string& dir, const std::vector<Sample>& samples) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path root(dir);
  std::ofstream manifest(root / "manifest.tsv", std::ios::binary);
  if (!manifest) throw FileNotFound((root / "manifest.tsv").string());
  for (const Sample& s : samples) {
    const std::string name = s.id + ".pgm";
    write_pgm((root / name).string(), s.image);
    manifest << name << '\t' << s.label << '\n';
  }
  return (root / "manifest.tsv").string();
}

// Draws `count` words (uniform with replacement) from `words` and renders
// them. Fully determined by (count, seed, options, words).
inline std::vector<Sample> make_synthetic_dataset(std::size_t count, std::uint64_t seed,
                                                  const SynthOptions& opt,
                                                  std::span<const char* const> words) {
  if (words.empty()) throw std::invalid_argument("synthetic dataset needs a non-empty lexicon");
  std::vector<Sample> out;
  out.reserve(count);
  Rng word_rng(mix_seed(seed, 0x77726473ULL));
  for (std::size_t i = 0; i < count; ++i) {
    const char* word = words[static_cast<std::size_t>(
        word_rng.uniform_int(0, static_cast<std::int64_t>(words.size()) - 1))];
    Rng render_rng(mix_seed(seed, 0x706978ULL, i));
    Sample s;
    s.image = render_word_image(word, render_rng, opt);
    s.label = word;
    char buf[32];
    std::snprintf(buf, sizeof buf, "w%05zu", i);
    s.id = buf;
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<Sample> make_synthetic_dataset(std::size_t count, std::uint64_t seed,
                                                  const SynthOptions& opt = {}) {
  return make_synthetic_dataset(count, seed, opt, std::span<const char* const>(kDemoLexicon));
}

}  // namespace parsurdu
