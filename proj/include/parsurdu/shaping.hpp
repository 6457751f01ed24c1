// Contextual shaping for Urdu: resolves each letter of a word to its
// positional form (isolated/initial/medial/final) and maps forms to dense
// class ids. The forms, not the letters, are the recognizer's output labels.
#pragma once

#include <algorithm>
#include <compare>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "parsurdu/joining_data.hpp"
#include "parsurdu/util.hpp"

namespace parsurdu {

struct EmptyWord : std::runtime_error {
  EmptyWord() : std::runtime_error("word is empty after stripping combining marks") {}
};
struct EmptyCorpus : std::runtime_error {
  EmptyCorpus() : std::runtime_error("vocabulary corpus is empty") {}
};
struct InvalidId : std::runtime_error {
  explicit InvalidId(int id) : std::runtime_error("class id out of range: " + std::to_string(id)) {}
};
struct VocabIoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class JoiningClass : std::uint8_t { DualJoining, RightJoining, NonJoining, Transparent };

enum class GlyphPosition : std::uint8_t { Isolated, Initial, Medial, Final };

inline std::string_view to_string(GlyphPosition p) {
  switch (p) {
    case GlyphPosition::Isolated: return "isolated";
    case GlyphPosition::Initial: return "initial";
    case GlyphPosition::Medial: return "medial";
    case GlyphPosition::Final: return "final";
  }
  return "?";
}

inline GlyphPosition position_from_string(std::string_view name) {
  if (name == "isolated") return GlyphPosition::Isolated;
  if (name == "initial") return GlyphPosition::Initial;
  if (name == "medial") return GlyphPosition::Medial;
  if (name == "final") return GlyphPosition::Final;
  throw VocabIoError("unknown position name '" + std::string(name) + "'");
}

// Total over all codepoints: anything outside the embedded table is
// non-joining, so digits, punctuation and unsupported scripts come out as
// single-form labels.
inline JoiningClass joining_class(char32_t cp) {
  for (const auto& r : detail::kArabicJoiningRanges) {
    if (cp >= r.lo && cp <= r.hi) {
      switch (r.type) {
        case detail::RawJoiningType::Dual: return JoiningClass::DualJoining;
        case detail::RawJoiningType::Right: return JoiningClass::RightJoining;
        case detail::RawJoiningType::Transparent: return JoiningClass::Transparent;
        // Tatweel joins on both sides; under the 4-class model that makes it
        // behave as dual-joining.
        case detail::RawJoiningType::JoinCausing: return JoiningClass::DualJoining;
      }
    }
  }
  return JoiningClass::NonJoining;
}

struct GlyphForm {
  char32_t base = 0;
  GlyphPosition position = GlyphPosition::Isolated;

  friend auto operator<=>(const GlyphForm&, const GlyphForm&) = default;
};

// Shapes a single word (logical order, UTF-32). Transparent marks are
// stripped; every remaining codepoint yields exactly one form. A letter
// joins its predecessor when the predecessor can start a connection
// (dual-joining) and the letter itself can receive one (dual or right).
inline std::vector<GlyphForm> shape_word(std::u32string_view word) {
  std::vector<char32_t> bases;
  bases.reserve(word.size());
  for (char32_t cp : word) {
    if (joining_class(cp) != JoiningClass::Transparent) bases.push_back(cp);
  }
  if (bases.empty()) throw EmptyWord();

  std::vector<GlyphForm> out;
  out.reserve(bases.size());
  for (std::size_t i = 0; i < bases.size(); ++i) {
    const JoiningClass self = joining_class(bases[i]);
    const bool receives = self == JoiningClass::DualJoining || self == JoiningClass::RightJoining;
    const bool emits = self == JoiningClass::DualJoining;
    const bool join_prev =
        receives && i > 0 && joining_class(bases[i - 1]) == JoiningClass::DualJoining;
    bool join_next = false;
    if (emits && i + 1 < bases.size()) {
      const JoiningClass next = joining_class(bases[i + 1]);
      join_next = next == JoiningClass::DualJoining || next == JoiningClass::RightJoining;
    }
    GlyphPosition pos;
    if (join_prev && join_next) {
      pos = GlyphPosition::Medial;
    } else if (join_prev) {
      pos = GlyphPosition::Final;
    } else if (join_next) {
      pos = GlyphPosition::Initial;
    } else {
      pos = GlyphPosition::Isolated;
    }
    out.push_back({bases[i], pos});
  }
  return out;
}

inline std::vector<GlyphForm> shape_word(std::string_view utf8_word) {
  return shape_word(std::u32string_view(utf8_to_u32(utf8_word)));
}

class GlyphVocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kNumSpecials = 4;

  GlyphVocabulary() = default;

  // Builds from a word corpus: all distinct observed forms, sorted by
  // (base, position) so the id assignment is independent of corpus order.
  template <typename Iterable>
  static GlyphVocabulary build(const Iterable& corpus) {
    std::vector<GlyphForm> forms;
    bool any = false;
    for (const auto& word : corpus) {
      any = true;
      for (const GlyphForm& f : shape_word(std::string_view(word))) forms.push_back(f);
    }
    if (!any) throw EmptyCorpus();
    std::sort(forms.begin(), forms.end());
    forms.erase(std::unique(forms.begin(), forms.end()), forms.end());
    GlyphVocabulary v;
    v.entries_ = std::move(forms);
    v.rebuild_index();
    return v;
  }

  // Rebuilds a vocabulary from a previously serialized entry list.
  static GlyphVocabulary from_entries(std::vector<GlyphForm> entries) {
    for (std::size_t i = 1; i < entries.size(); ++i) {
      if (!(entries[i - 1] < entries[i])) throw VocabIoError("vocabulary entries not sorted/unique");
    }
    GlyphVocabulary v;
    v.entries_ = std::move(entries);
    v.rebuild_index();
    return v;
  }

  int size() const { return kNumSpecials + static_cast<int>(entries_.size()); }

  int id_of(const GlyphForm& f) const {
    const auto it = index_.find(f);
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(const GlyphForm& f) const { return index_.count(f) != 0; }

  // Only non-special ids name a form.
  const GlyphForm& form(int id) const {
    if (id < 0 || id >= size()) throw InvalidId(id);
    if (id < kNumSpecials) throw InvalidId(id);
    return entries_[static_cast<std::size_t>(id - kNumSpecials)];
  }

  const std::vector<GlyphForm>& entries() const { return entries_; }

  std::vector<int> encode(std::u32string_view word) const {
    std::vector<int> ids;
    for (const GlyphForm& f : shape_word(word)) ids.push_back(id_of(f));
    return ids;
  }

  std::vector<int> encode(std::string_view utf8_word) const {
    return encode(std::u32string_view(utf8_to_u32(utf8_word)));
  }

  // Specials are dropped; positional information is discarded (it is
  // recoverable from the neighbours).
  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (id < 0 || id >= size()) throw InvalidId(id);
      if (id < kNumSpecials) continue;
      append_utf8(out, entries_[static_cast<std::size_t>(id - kNumSpecials)].base);
    }
    return out;
  }

  // --- vocabulary file: one `<hex>\t<position>\t<id>` line per entry -------

  static std::string hex4(char32_t cp) {
    static const char* digits = "0123456789ABCDEF";
    std::string s;
    for (int shift = 28; shift >= 0; shift -= 4) {
      const unsigned nibble = (static_cast<std::uint32_t>(cp) >> shift) & 0xF;
      if (!s.empty() || nibble != 0 || shift < 16) s.push_back(digits[nibble]);
    }
    return s;
  }

  void save(std::ostream& os) const {
    os << "0000\tpad\t" << kPad << "\n";
    os << "0000\tbos\t" << kBos << "\n";
    os << "0000\teos\t" << kEos << "\n";
    os << "0000\tunk\t" << kUnk << "\n";
    int id = kNumSpecials;
    for (const GlyphForm& f : entries_) {
      os << hex4(f.base) << "\t" << to_string(f.position) << "\t" << id++ << "\n";
    }
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw VocabIoError("cannot open vocabulary file for writing: " + path);
    save(os);
  }

  static GlyphVocabulary load(std::istream& is) {
    GlyphVocabulary v;
    std::string line;
    int lineno = 0;
    int expected_id = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::istringstream ls(line);
      std::string hex, pos_name, id_str;
      if (!std::getline(ls, hex, '\t') || !std::getline(ls, pos_name, '\t') ||
          !std::getline(ls, id_str, '\t')) {
        throw VocabIoError("malformed vocabulary line " + std::to_string(lineno));
      }
      const int id = std::stoi(id_str);
      if (id != expected_id) {
        throw VocabIoError("non-dense id " + id_str + " at vocabulary line " + std::to_string(lineno));
      }
      ++expected_id;
      if (id < kNumSpecials) continue;  // fixed specials, nothing to store
      GlyphForm f;
      f.base = static_cast<char32_t>(std::stoul(hex, nullptr, 16));
      f.position = position_from_string(pos_name);
      v.entries_.push_back(f);
    }
    if (expected_id < kNumSpecials) throw VocabIoError("vocabulary file lacks the special tokens");
    v.rebuild_index();
    return v;
  }

  static GlyphVocabulary load_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw VocabIoError("cannot open vocabulary file: " + path);
    return load(is);
  }

 private:
  void rebuild_index() {
    index_.clear();
    int id = kNumSpecials;
    for (const GlyphForm& f : entries_) index_[f] = id++;
  }

  std::vector<GlyphForm> entries_;
  std::map<GlyphForm, int> index_;
};

}  // namespace parsurdu
