// Permutation language modeling support: sampling the K factorization orders
// used per training example and turning each order into the decoder
// attention masks. Query position i may see content position j exactly when
// j is predicted earlier under the permutation (strict rank comparison, so
// self-attention to a position's own token is excluded).
#pragma once

#include <algorithm>
#include <set>
#include <stdexcept>
#include <vector>

#include "parsurdu/tensor.hpp"
#include "parsurdu/util.hpp"

namespace parsurdu {

struct Permutation {
  std::vector<int> order;  // order[s] = target position predicted at step s
  std::vector<int> rank;   // rank[pos] = prediction step of that position

  Permutation() = default;

  explicit Permutation(std::vector<int> order_in) : order(std::move(order_in)) {
    const int t = static_cast<int>(order.size());
    rank.assign(order.size(), -1);
    for (int s = 0; s < t; ++s) {
      const int pos = order[static_cast<std::size_t>(s)];
      if (pos < 0 || pos >= t || rank[static_cast<std::size_t>(pos)] != -1) {
        throw std::invalid_argument("permutation order is not a bijection");
      }
      rank[static_cast<std::size_t>(pos)] = s;
    }
  }

  static Permutation identity(int t) {
    std::vector<int> o(static_cast<std::size_t>(t));
    for (int i = 0; i < t; ++i) o[static_cast<std::size_t>(i)] = i;
    return Permutation(std::move(o));
  }

  static Permutation reversal(int t) {
    std::vector<int> o(static_cast<std::size_t>(t));
    for (int i = 0; i < t; ++i) o[static_cast<std::size_t>(i)] = t - 1 - i;
    return Permutation(std::move(o));
  }

  int length() const { return static_cast<int>(order.size()); }

  friend bool operator==(const Permutation& a, const Permutation& b) { return a.order == b.order; }
};

struct MaskPair {
  BoolMatrix content_mask;
  BoolMatrix query_mask;
};

inline MaskPair masks_from_permutation(const Permutation& p) {
  const std::size_t t = p.order.size();
  MaskPair m{BoolMatrix(t, t), BoolMatrix(t, t)};
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = 0; j < t; ++j) {
      const bool allowed = p.rank[j] < p.rank[i];
      m.content_mask.set(i, j, allowed);
      m.query_mask.set(i, j, allowed);
    }
  }
  return m;
}

// Left-to-right factorization mask: row i attends columns j < i. Equal to
// masks_from_permutation(identity) but usable against a key sequence of a
// different length, which autoregressive inference needs.
inline BoolMatrix strict_causal_mask(std::size_t query_len, std::size_t key_len) {
  BoolMatrix m(query_len, key_len);
  for (std::size_t i = 0; i < query_len; ++i)
    for (std::size_t j = 0; j < key_len && j < i; ++j) m.set(i, j, true);
  return m;
}

// Cloze mask for iterative refinement: every position sees every other one.
inline BoolMatrix cloze_mask(std::size_t t) {
  BoolMatrix m(t, t, true);
  for (std::size_t i = 0; i < t; ++i) m.set(i, i, false);
  return m;
}

namespace detail {

inline void enumerate_permutations(int t, std::vector<std::vector<int>>& out) {
  std::vector<int> o(static_cast<std::size_t>(t));
  for (int i = 0; i < t; ++i) o[static_cast<std::size_t>(i)] = i;
  do {
    out.push_back(o);
  } while (std::next_permutation(o.begin(), o.end()));
}

inline double factorial_capped(int t) {
  double f = 1.0;
  for (int i = 2; i <= t; ++i) {
    f *= i;
    if (f > 1e18) return 1e18;
  }
  return f;
}

}  // namespace detail

// Samples the K training permutations for a target length T. The first is
// always the canonical left-to-right order and, when K >= 2, the second is
// the full reversal; the remainder are uniform draws, without replacement
// whenever T! admits K distinct permutations.
inline std::vector<Permutation> sample_permutations(int t, int k, Rng& rng) {
  if (t < 1 || k < 1) throw std::invalid_argument("sample_permutations: T and K must be positive");
  std::vector<Permutation> out;
  out.reserve(static_cast<std::size_t>(k));
  out.push_back(Permutation::identity(t));
  if (k == 1) return out;
  out.push_back(Permutation::reversal(t));

  const bool distinct_possible = detail::factorial_capped(t) >= static_cast<double>(k);
  if (!distinct_possible) {
    // Not enough distinct orders; fall back to draws with replacement.
    for (int i = 2; i < k; ++i) {
      std::vector<int> o = out[0].order;
      rng.shuffle(o);
      out.push_back(Permutation(std::move(o)));
    }
    return out;
  }

  std::set<std::vector<int>> used{out[0].order, out[1].order};
  if (t <= 8) {
    // Small factorial: enumerate the space, drop the anchors, shuffle, take.
    std::vector<std::vector<int>> all;
    detail::enumerate_permutations(t, all);
    std::vector<std::vector<int>> pool;
    for (auto& o : all) {
      if (!used.count(o)) pool.push_back(std::move(o));
    }
    rng.shuffle(pool);
    for (int i = 2; i < k && !pool.empty(); ++i) {
      out.push_back(Permutation(std::move(pool.back())));
      pool.pop_back();
    }
  } else {
    // Huge space: rejection sampling terminates almost immediately.
    while (static_cast<int>(out.size()) < k) {
      std::vector<int> o = out[0].order;
      rng.shuffle(o);
      if (used.insert(o).second) out.push_back(Permutation(std::move(o)));
    }
  }
  return out;
}

// Averaged K-permutation objective: the arithmetic mean of the per-order
// cross-entropies. Each logit set must come from a decoder pass under the
// matching permutation's masks; gradients flow into all K passes.
inline Tensor plm_loss(const std::vector<Tensor>& logit_sets, const std::vector<int>& targets,
                       int ignore_id = -1) {
  if (logit_sets.empty()) throw ShapeMismatch("plm_loss needs at least one logit set");
  for (const Tensor& l : logit_sets) {
    if (l.dims() != logit_sets[0].dims()) {
      throw ShapeMismatch("plm_loss logit sets disagree: " + dims_str(l.dims()) + " vs " +
                          dims_str(logit_sets[0].dims()));
    }
  }
  std::vector<Tensor> losses;
  losses.reserve(logit_sets.size());
  for (const Tensor& l : logit_sets) losses.push_back(softmax_cross_entropy(l, targets, ignore_id));
  return mean_scalars(losses);
}

}  // namespace parsurdu
