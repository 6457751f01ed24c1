// Central finite-difference verification of every differentiable op plus an
// end-to-end loss probe. This is the self-test behind the `gradcheck`
// command; the unit suite also runs it with a sign-flip fault injected to
// prove the harness can fail.
#pragma once

#include <cmath>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "parsurdu/model.hpp"
#include "parsurdu/permutation.hpp"
#include "parsurdu/tensor.hpp"
#include "parsurdu/util.hpp"

namespace parsurdu {

struct OpCheck {
  std::string name;
  double tolerance = 1e-4;
  double worst_rel = 0.0;
  bool pass = false;
};

struct GradReport {
  std::vector<OpCheck> ops;
  bool all_pass() const {
    for (const OpCheck& o : ops) {
      if (!o.pass) return false;
    }
    return true;
  }
};

namespace detail {

inline double fd_relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-3, std::abs(analytic) + std::abs(numeric));
}

// Generic case: leaves view `bufs`; `build` must construct the same scalar
// graph on every call (all randomness frozen into captures).
inline double fd_check(std::vector<std::vector<double>>& bufs, const std::vector<Dims>& shapes,
                       const std::function<Tensor(const std::vector<Tensor>&)>& build,
                       double h = 1e-5) {
  std::vector<Tensor> leaves;
  leaves.reserve(bufs.size());
  for (std::size_t i = 0; i < bufs.size(); ++i) {
    leaves.push_back(Tensor::leaf_view(shapes[i], bufs[i].data(), true));
  }
  const Tensor out = build(leaves);
  out.backward();
  std::vector<std::vector<double>> analytic;
  for (const Tensor& l : leaves) {
    analytic.emplace_back(l.grad().begin(), l.grad().end());
  }

  double worst = 0.0;
  for (std::size_t t = 0; t < bufs.size(); ++t) {
    for (std::size_t j = 0; j < bufs[t].size(); ++j) {
      const double x0 = bufs[t][j];
      bufs[t][j] = x0 + h;
      const double fp = build(leaves).scalar_value();
      bufs[t][j] = x0 - h;
      const double fm = build(leaves).scalar_value();
      bufs[t][j] = x0;
      worst = std::max(worst, fd_relative_error(analytic[t][j], (fp - fm) / (2.0 * h)));
    }
  }
  return worst;
}

inline void fill_uniform(std::vector<double>& v, Rng& rng, double lo = -1.0, double hi = 1.0) {
  for (double& x : v) x = rng.uniform(lo, hi);
}

}  // namespace detail

// Weighted sum of all elements with fixed pseudo-random positive weights;
// implemented with make_op so it works for any tensor shape.
inline Tensor weighted_sum(const Tensor& x, std::uint64_t salt = 0xC0FFEE) {
  std::vector<double> w(x.numel());
  Rng rng(salt);
  for (double& v : w) v = rng.uniform(0.5, 1.5);
  Tensor out = make_op({1}, {x}, [w](detail::TapeNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < p.numel; ++i) p.grad[i] += w[i] * self.grad[0];
  });
  double acc = 0.0;
  const auto v = x.value();
  for (std::size_t i = 0; i < x.numel(); ++i) acc += w[i] * v[i];
  out.node()->mutable_data()[0] = acc;
  return out;
}

inline GradReport run_gradient_checks(std::uint64_t seed = 1234) {
  GradReport report;
  Rng master(mix_seed(seed, 0x67636B31ULL));

  auto run = [&](const std::string& name, double tol, std::vector<Dims> shapes,
                 const std::function<void(std::vector<std::vector<double>>&, Rng&)>& fill,
                 const std::function<Tensor(const std::vector<Tensor>&)>& build) {
    std::vector<std::vector<double>> bufs;
    bufs.reserve(shapes.size());
    for (const Dims& d : shapes) bufs.emplace_back(dims_numel(d));
    Rng rng = master.fork(std::hash<std::string>{}(name));
    fill(bufs, rng);
    OpCheck oc;
    oc.name = name;
    oc.tolerance = tol;
    oc.worst_rel = detail::fd_check(bufs, shapes, build);
    oc.pass = oc.worst_rel < tol;
    report.ops.push_back(oc);
  };

  auto fill_default = [](std::vector<std::vector<double>>& bufs, Rng& rng) {
    for (auto& b : bufs) detail::fill_uniform(b, rng);
  };

  run("add", 1e-6, {{3, 4}, {3, 4}}, fill_default,
      [](const std::vector<Tensor>& L) { return weighted_sum(add(L[0], L[1])); });

  run("scale", 1e-6, {{3, 4}}, fill_default,
      [](const std::vector<Tensor>& L) { return weighted_sum(scale(L[0], -1.7)); });

  run("add_bias", 1e-6, {{3, 4}, {4}}, fill_default,
      [](const std::vector<Tensor>& L) { return weighted_sum(add_bias(L[0], L[1])); });

  run("relu", 1e-5, {{4, 4}},
      [](std::vector<std::vector<double>>& bufs, Rng& rng) {
        // Keep inputs away from the kink at zero.
        for (auto& b : bufs) {
          for (double& x : b) {
            x = rng.uniform(0.2, 1.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
          }
        }
      },
      [](const std::vector<Tensor>& L) { return weighted_sum(relu(L[0])); });

  run("gelu", 1e-5, {{4, 4}}, fill_default,
      [](const std::vector<Tensor>& L) { return weighted_sum(gelu(L[0])); });

  run("dropout", 1e-5, {{5, 4}}, fill_default, [](const std::vector<Tensor>& L) {
    Rng frozen(42);  // same mask on every rebuild
    return weighted_sum(dropout(L[0], 0.4, frozen));
  });

  run("matmul", 1e-6, {{3, 4}, {4, 2}}, fill_default,
      [](const std::vector<Tensor>& L) { return weighted_sum(matmul(L[0], L[1])); });

  run("layer_norm", 1e-4, {{3, 5}, {5}, {5}},
      [](std::vector<std::vector<double>>& bufs, Rng& rng) {
        detail::fill_uniform(bufs[0], rng, -2.0, 2.0);
        detail::fill_uniform(bufs[1], rng, 0.5, 1.5);  // gamma
        detail::fill_uniform(bufs[2], rng, -0.5, 0.5);  // beta
      },
      [](const std::vector<Tensor>& L) { return weighted_sum(layer_norm(L[0], L[1], L[2])); });

  run("embedding_rows", 1e-6, {{5, 3}}, fill_default, [](const std::vector<Tensor>& L) {
    return weighted_sum(embedding_rows(L[0], {0, 2, 2, 4}));  // repeated id: scatter-add path
  });

  run("slice_rows", 1e-6, {{5, 3}}, fill_default,
      [](const std::vector<Tensor>& L) { return weighted_sum(slice_rows(L[0], 1, 3)); });

  run("masked_attention", 1e-4, {{4, 6}, {5, 6}, {5, 6}}, fill_default,
      [](const std::vector<Tensor>& L) {
        BoolMatrix mask(4, 5);
        Rng mrng(7);
        for (std::size_t i = 0; i + 1 < 4; ++i) {
          for (std::size_t j = 0; j < 5; ++j) mask.set(i, j, mrng.uniform() < 0.7);
        }
        mask.set(0, 1, true);  // ensure row 0 not empty
        // Row 3 stays fully masked: its output and gradient must be zero.
        return weighted_sum(multi_head_attention(L[0], L[1], L[2], 2, &mask));
      });

  run("softmax_ce", 1e-5, {{3, 5}}, fill_default, [](const std::vector<Tensor>& L) {
    return softmax_cross_entropy(L[0], {1, 0, 4});
  });

  run("softmax_ce_ignored", 1e-5, {{4, 5}}, fill_default, [](const std::vector<Tensor>& L) {
    return softmax_cross_entropy(L[0], {1, 0, 0, 3}, /*ignore_id=*/0);
  });

  run("plm_loss", 1e-5, {{3, 6}, {3, 6}}, fill_default, [](const std::vector<Tensor>& L) {
    return plm_loss({L[0], L[1]}, {2, 4, 5});
  });

  // End-to-end: tiny recognizer, one sample, two factorization orders,
  // dropout off; probes a deterministic 1-in-50 subset of parameters.
  {
    OpCheck oc;
    oc.name = "end_to_end";
    oc.tolerance = 1e-3;
    RecognizerConfig cfg;
    cfg.image_height = 8;
    cfg.image_width = 16;
    cfg.patch_height = 4;
    cfg.patch_width = 4;
    cfg.embed_dim = 8;
    cfg.heads = 2;
    cfg.enc_layers = 1;
    cfg.dec_layers = 2;
    cfg.ff_dim = 16;
    cfg.dropout = 0.0;
    cfg.permutations = 2;
    cfg.max_label_len = 4;
    cfg.vocab_size = 8;
    Recognizer model(cfg);
    model.init_params(mix_seed(seed, 0x65326531ULL));
    LeafSet leaves(model.params(), true);

    GrayImage img(cfg.image_width, cfg.image_height);
    Rng img_rng(mix_seed(seed, 0x696D6721ULL));
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(img_rng.uniform_int(0, 255));
    const std::vector<int> targets{4, 6, 5, 2};
    std::vector<Permutation> perms;
    {
      Rng prng(mix_seed(seed, 0x7065726DULL));
      perms = sample_permutations(static_cast<int>(targets.size()), cfg.permutations, prng);
    }
    const DropCtx off{};
    auto forward = [&]() {
      const Tensor memory = model.encode_image(img, leaves, off);
      const std::vector<Tensor> logit_sets = model.decode_train(memory, targets, perms, leaves, off);
      return plm_loss(logit_sets, targets, GlyphVocabulary::kPad);
    };
    forward().backward();

    std::vector<std::vector<double>> analytic;
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      const auto g = leaves[static_cast<int>(i)].grad();
      analytic.emplace_back(g.begin(), g.end());
    }

    const double h = 1e-5;
    double worst = 0.0;
    ParamStore& params = model.params();
    long long probe = 0;
    for (int p = 0; p < params.size(); ++p) {
      auto& values = params.values(p);
      for (std::size_t j = 0; j < values.size(); ++j, ++probe) {
        if (probe % 50 != 0) continue;
        const double x0 = values[j];
        values[j] = x0 + h;
        const double fp = forward().scalar_value();
        values[j] = x0 - h;
        const double fm = forward().scalar_value();
        values[j] = x0;
        worst = std::max(worst, detail::fd_relative_error(
                                    analytic[static_cast<std::size_t>(p)][j], (fp - fm) / (2.0 * h)));
      }
    }
    oc.worst_rel = worst;
    oc.pass = worst < oc.tolerance;
    report.ops.push_back(oc);
  }

  return report;
}

inline void print_gradient_report(std::ostream& os, const GradReport& report) {
  for (const OpCheck& oc : report.ops) {
    char line[160];
    std::snprintf(line, sizeof line, "%-20s worst_rel=%.3e  tol=%.0e  %s\n", oc.name.c_str(),
                  oc.worst_rel, oc.tolerance, oc.pass ? "PASS" : "FAIL");
    os << line;
  }
  os << (report.all_pass() ? "gradient checks: ALL PASS\n" : "gradient checks: FAILURES PRESENT\n");
}

}  // namespace parsurdu
