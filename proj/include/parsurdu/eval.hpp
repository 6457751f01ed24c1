// Character error rate and word accuracy. CER is pooled: total edit
// operations over total ground-truth characters, both summed across the set
// before dividing.
#pragma once

#include <algorithm>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "parsurdu/image.hpp"
#include "parsurdu/util.hpp"

namespace parsurdu {

struct EmptyGroundTruth : std::runtime_error {
  explicit EmptyGroundTruth(const std::string& id)
      : std::runtime_error("empty ground truth for sample: " + id) {}
};

// Levenshtein distance over Unicode codepoints, unit costs.
inline std::size_t edit_distance(std::u32string_view a, std::u32string_view b) {
  const std::size_t n = a.size(), m = b.size();
  if (n == 0) return m;
  if (m == 0) return n;
  std::vector<std::size_t> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = j;
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

inline std::size_t edit_distance(std::string_view a_utf8, std::string_view b_utf8) {
  return edit_distance(std::u32string_view(utf8_to_u32(a_utf8)),
                       std::u32string_view(utf8_to_u32(b_utf8)));
}

struct SampleResult {
  std::string id;
  std::string ground_truth;
  std::string prediction;
  std::size_t edit_ops = 0;
};

struct CERReport {
  std::vector<SampleResult> per_sample;
  std::size_t total_edit_ops = 0;
  std::size_t total_gt_chars = 0;
  std::size_t exact_matches = 0;

  double cer() const {
    return total_gt_chars == 0 ? 0.0 : static_cast<double>(total_edit_ops) / static_cast<double>(total_gt_chars);
  }
  double word_accuracy() const {
    return per_sample.empty() ? 0.0
                              : static_cast<double>(exact_matches) / static_cast<double>(per_sample.size());
  }
};

struct Prediction {
  std::string id;
  std::string ground_truth;
  std::string prediction;
};

inline CERReport aggregate_cer(const std::vector<Prediction>& preds) {
  CERReport r;
  for (const Prediction& p : preds) {
    const std::u32string gt = utf8_to_u32(p.ground_truth);
    if (gt.empty()) throw EmptyGroundTruth(p.id);
    const std::u32string hy = utf8_to_u32(p.prediction);
    SampleResult sr;
    sr.id = p.id;
    sr.ground_truth = p.ground_truth;
    sr.prediction = p.prediction;
    sr.edit_ops = edit_distance(std::u32string_view(gt), std::u32string_view(hy));
    r.total_edit_ops += sr.edit_ops;
    r.total_gt_chars += gt.size();
    if (sr.edit_ops == 0) ++r.exact_matches;
    r.per_sample.push_back(std::move(sr));
  }
  return r;
}

// One `<id>\t<gt>\t<pred>\t<edit ops>` line per sample (sorted by id), then
// a summary line.
inline void write_cer_report(const std::string& path, const CERReport& report) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FileNotFound(path);
  std::vector<const SampleResult*> order;
  order.reserve(report.per_sample.size());
  for (const SampleResult& s : report.per_sample) order.push_back(&s);
  std::sort(order.begin(), order.end(),
            [](const SampleResult* a, const SampleResult* b) { return a->id < b->id; });
  for (const SampleResult* s : order) {
    os << s->id << '\t' << s->ground_truth << '\t' << s->prediction << '\t' << s->edit_ops << '\n';
  }
  char buf[128];
  std::snprintf(buf, sizeof buf, "# cer=%.6f word_accuracy=%.6f samples=%zu\n", report.cer(),
                report.word_accuracy(), report.per_sample.size());
  os << buf;
}

}  // namespace parsurdu
