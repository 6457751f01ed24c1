// The recognizer: a patch-embedding transformer encoder over the word image
// and a two-stream transformer decoder whose attention masks come from
// sampled factorization orders. One set of weights serves left-to-right
// decoding, parallel decoding and iterative cloze refinement.
#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "parsurdu/image.hpp"
#include "parsurdu/permutation.hpp"
#include "parsurdu/shaping.hpp"
#include "parsurdu/tensor.hpp"
#include "parsurdu/util.hpp"

namespace parsurdu {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct LengthExceeded : std::runtime_error {
  LengthExceeded(std::size_t got, std::size_t max_len)
      : std::runtime_error("label of " + std::to_string(got) + " tokens exceeds maximum " +
                           std::to_string(max_len)) {}
};
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RecognizerConfig {
  int image_height = 32;
  int image_width = 128;
  int patch_height = 4;
  int patch_width = 8;
  int embed_dim = 256;
  int heads = 4;
  int enc_layers = 4;
  int dec_layers = 2;
  int ff_dim = 1024;
  double dropout = 0.3;
  int permutations = 3;  // factorization orders per training example
  int max_label_len = 25;
  int vocab_size = 0;  // set from the glyph vocabulary

  int patch_dim() const { return patch_height * patch_width; }
  int patches_x() const { return image_width / patch_width; }
  int patches_y() const { return image_height / patch_height; }
  int num_patches() const { return patches_x() * patches_y(); }

  void validate() const {
    auto positive = [](int v, const char* what) {
      if (v < 1) throw ConfigError(std::string(what) + " must be positive");
    };
    positive(image_height, "image_height");
    positive(image_width, "image_width");
    positive(patch_height, "patch_height");
    positive(patch_width, "patch_width");
    positive(embed_dim, "embed_dim");
    positive(heads, "heads");
    positive(enc_layers, "enc_layers");
    positive(dec_layers, "dec_layers");
    positive(ff_dim, "ff_dim");
    positive(permutations, "permutations");
    positive(max_label_len, "max_label_len");
    if (image_height % patch_height != 0 || image_width % patch_width != 0) {
      throw ConfigError("image dimensions must be divisible by the patch dimensions");
    }
    if (embed_dim % heads != 0) throw ConfigError("embed_dim must be divisible by heads");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    if (vocab_size < GlyphVocabulary::kNumSpecials + 1) {
      throw ConfigError("vocab_size must cover the specials plus at least one form");
    }
  }

  // Closed-form parameter total; a test compares it with the actual store.
  long long param_count() const {
    const long long d = embed_dim, f = ff_dim, v = vocab_size;
    const long long p = patch_dim(), n = num_patches(), m = max_label_len + 1;
    const long long attn = 4 * (d * d + d);
    const long long ff = (d * f + f) + (f * d + d);
    const long long ln = 2 * d;
    const long long enc = p * d + d + n * d + enc_layers * (attn + 2 * ln + ff) + ln;
    const long long dec = v * d + m * d + dec_layers * (2 * attn + 3 * ln + ff) + ln + (d * v + v);
    return enc + dec;
  }
};

// --- parameter storage ------------------------------------------------------

class ParamStore {
 public:
  int add(std::string name, Dims dims) {
    names_.push_back(std::move(name));
    values_.emplace_back(dims_numel(dims), 0.0);
    dims_.push_back(std::move(dims));
    return static_cast<int>(names_.size()) - 1;
  }

  int size() const { return static_cast<int>(names_.size()); }
  const std::string& name(int i) const { return names_[static_cast<std::size_t>(i)]; }
  const Dims& dims(int i) const { return dims_[static_cast<std::size_t>(i)]; }
  std::vector<double>& values(int i) { return values_[static_cast<std::size_t>(i)]; }
  const std::vector<double>& values(int i) const { return values_[static_cast<std::size_t>(i)]; }

  int find(std::string_view name) const {
    for (int i = 0; i < size(); ++i) {
      if (names_[static_cast<std::size_t>(i)] == name) return i;
    }
    return -1;
  }

  long long total_count() const {
    long long n = 0;
    for (const auto& v : values_) n += static_cast<long long>(v.size());
    return n;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Dims> dims_;
  std::vector<std::vector<double>> values_;
};

// Leaf tensors viewing a ParamStore. Each LeafSet owns its gradient buffers,
// so worker threads can run backward concurrently over shared weights.
class LeafSet {
 public:
  LeafSet() = default;
  LeafSet(const ParamStore& store, bool requires_grad) {
    leaves_.reserve(static_cast<std::size_t>(store.size()));
    for (int i = 0; i < store.size(); ++i) {
      leaves_.push_back(Tensor::leaf_view(store.dims(i), store.values(i).data(), requires_grad));
    }
  }

  const Tensor& operator[](int i) const { return leaves_[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return leaves_.size(); }

  void zero_grads() {
    for (auto& t : leaves_) t.zero_grad();
  }

  // Appends all gradients in parameter order into one flat vector.
  void accumulate_grads(std::vector<double>& flat) const {
    std::size_t off = 0;
    for (const auto& t : leaves_) {
      const auto g = t.grad();
      for (std::size_t i = 0; i < g.size(); ++i) flat[off + i] += g[i];
      off += t.numel();
    }
  }

 private:
  std::vector<Tensor> leaves_;
};

// Dropout context: inactive when no rng is supplied (inference/validation).
struct DropCtx {
  double p = 0.0;
  Rng* rng = nullptr;
};

inline Tensor maybe_dropout(const Tensor& x, const DropCtx& ctx) {
  if (ctx.p <= 0.0 || ctx.rng == nullptr) return x;
  return dropout(x, ctx.p, *ctx.rng);
}

// --- the recognizer ---------------------------------------------------------

class Recognizer {
 public:
  explicit Recognizer(RecognizerConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    build_params();
  }

  const RecognizerConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // Deterministic initialization: uniform +-1/sqrt(fan_in) for projections,
  // N(0, 0.02) embeddings, identity layer norms, zero biases.
  void init_params(std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0x696E6974ULL));
    for (int i = 0; i < params_.size(); ++i) {
      auto& v = params_.values(i);
      const std::string& name = params_.name(i);
      const Dims& d = params_.dims(i);
      const bool is_matrix = d.size() == 2;
      const bool is_emb = name.find("pos_emb") != std::string::npos || name == "dec.tok_emb";
      const bool is_gamma = name.size() >= 6 && name.rfind(".gamma") == name.size() - 6;
      if (is_emb) {
        for (auto& x : v) x = 0.02 * rng.normal();
      } else if (is_matrix) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(d[0]));
        for (auto& x : v) x = rng.uniform(-bound, bound);
      } else if (is_gamma) {
        std::fill(v.begin(), v.end(), 1.0);
      } else {
        std::fill(v.begin(), v.end(), 0.0);  // biases, betas
      }
    }
  }

  // --- encoder --------------------------------------------------------------

  // Row-major patch grid; each row of the result is one flattened patch with
  // pixels mapped to [-1, 1].
  std::vector<double> patch_values(const GrayImage& img) const {
    if (img.width != cfg_.image_width || img.height != cfg_.image_height) {
      throw ShapeMismatch("image " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                          " does not match configured geometry");
    }
    const int py = cfg_.patches_y(), px = cfg_.patches_x();
    std::vector<double> out(static_cast<std::size_t>(cfg_.num_patches()) *
                            static_cast<std::size_t>(cfg_.patch_dim()));
    std::size_t k = 0;
    for (int gy = 0; gy < py; ++gy) {
      for (int gx = 0; gx < px; ++gx) {
        for (int dy = 0; dy < cfg_.patch_height; ++dy) {
          for (int dx = 0; dx < cfg_.patch_width; ++dx) {
            const std::uint8_t p = img.at(gx * cfg_.patch_width + dx, gy * cfg_.patch_height + dy);
            out[k++] = static_cast<double>(p) / 255.0 * 2.0 - 1.0;
          }
        }
      }
    }
    return out;
  }

  // Encodes a [N, patch_dim] tensor of flattened patches.
  Tensor encode_patches(const Tensor& x, const LeafSet& L, const DropCtx& ctx) const {
    Tensor h = add_bias(matmul(x, L[patch_w_]), L[patch_b_]);
    h = add(h, L[enc_pos_]);
    h = maybe_dropout(h, ctx);
    for (const EncLayerP& lp : enc_) {
      const Tensor x_n = layer_norm(h, L[lp.ln1_g], L[lp.ln1_b]);
      const Tensor att = attn_block(x_n, x_n, lp.sa, nullptr, L);
      h = add(h, maybe_dropout(att, ctx));
      const Tensor f_n = layer_norm(h, L[lp.ln2_g], L[lp.ln2_b]);
      h = add(h, maybe_dropout(ff_block(f_n, lp, L), ctx));
    }
    return layer_norm(h, L[enc_lng_], L[enc_lnb_]);
  }

  Tensor encode_image(const GrayImage& img, const LeafSet& L, const DropCtx& ctx) const {
    return encode_patches(
        Tensor::from({static_cast<std::size_t>(cfg_.num_patches()),
                      static_cast<std::size_t>(cfg_.patch_dim())},
                     patch_values(img)),
        L, ctx);
  }

  // --- decoder --------------------------------------------------------------

  // Cross-attention key/value projections of the encoder output, computed
  // once per image and shared across factorization orders and decode steps.
  struct MemoryKV {
    std::vector<Tensor> k, v;  // one pair per decoder layer
  };

  MemoryKV project_memory(const Tensor& memory, const LeafSet& L) const {
    MemoryKV kv;
    for (const DecLayerP& lp : dec_) {
      kv.k.push_back(add_bias(matmul(memory, L[lp.ca.wk]), L[lp.ca.bk]));
      kv.v.push_back(add_bias(matmul(memory, L[lp.ca.wv]), L[lp.ca.bv]));
    }
    return kv;
  }

  // One decoder forward. The position-query stream carries only position
  // embeddings for `query_positions`; the content stream carries the given
  // token ids at positions 0..Tc-1. Masks select, per query, which content
  // positions are visible (self always excluded by construction of the
  // mask). The content stream is refreshed through all but the last layer
  // with the same weights.
  Tensor decode_pass(const MemoryKV& mem_kv, const std::vector<int>& content_ids,
                     const std::vector<int>& query_positions, const BoolMatrix* query_mask,
                     const BoolMatrix* content_mask, const LeafSet& L, const DropCtx& ctx) const {
    const std::size_t tc = content_ids.size();
    const std::size_t tq = query_positions.size();
    if (tq == 0) throw ShapeMismatch("decoder needs at least one query position");
    check_positions(query_positions);
    if (tc > static_cast<std::size_t>(cfg_.max_label_len) + 1) {
      throw LengthExceeded(tc, static_cast<std::size_t>(cfg_.max_label_len) + 1);
    }
    if (query_mask && (query_mask->rows != tq || query_mask->cols != tc)) {
      throw ShapeMismatch("query mask does not match stream lengths");
    }
    if (content_mask && (content_mask->rows != tc || content_mask->cols != tc)) {
      throw ShapeMismatch("content mask does not match content length");
    }

    std::vector<int> content_pos(tc);
    for (std::size_t i = 0; i < tc; ++i) content_pos[i] = static_cast<int>(i);

    Tensor q = maybe_dropout(embedding_rows(L[dec_pos_], query_positions), ctx);
    Tensor c;
    if (tc > 0) {
      c = maybe_dropout(add(embedding_rows(L[tok_emb_], content_ids),
                            embedding_rows(L[dec_pos_], content_pos)),
                        ctx);
    }

    for (std::size_t l = 0; l < dec_.size(); ++l) {
      const DecLayerP& lp = dec_[l];
      const bool update_content = tc > 0 && l + 1 < dec_.size();

      Tensor c_in, c_k, c_v;
      if (tc > 0) {
        c_in = layer_norm(c, L[lp.ln_sa_g], L[lp.ln_sa_b]);
        c_k = add_bias(matmul(c_in, L[lp.sa.wk]), L[lp.sa.bk]);
        c_v = add_bias(matmul(c_in, L[lp.sa.wv]), L[lp.sa.bv]);
      }

      // Position-query stream.
      if (tc > 0) {
        const Tensor q_n = layer_norm(q, L[lp.ln_sa_g], L[lp.ln_sa_b]);
        const Tensor q_proj = add_bias(matmul(q_n, L[lp.sa.wq]), L[lp.sa.bq]);
        const Tensor att = multi_head_attention(q_proj, c_k, c_v,
                                                static_cast<std::size_t>(cfg_.heads), query_mask);
        q = add(q, maybe_dropout(add_bias(matmul(att, L[lp.sa.wo]), L[lp.sa.bo]), ctx));
      }
      q = add(q, maybe_dropout(cross_block(q, mem_kv, l, L), ctx));
      q = add(q, maybe_dropout(ff_block(layer_norm(q, L[lp.ln_ff_g], L[lp.ln_ff_b]), lp, L), ctx));

      // Content stream, same weights, own mask.
      if (update_content) {
        const Tensor c_proj = add_bias(matmul(c_in, L[lp.sa.wq]), L[lp.sa.bq]);
        const Tensor att = multi_head_attention(c_proj, c_k, c_v,
                                                static_cast<std::size_t>(cfg_.heads), content_mask);
        c = add(c, maybe_dropout(add_bias(matmul(att, L[lp.sa.wo]), L[lp.sa.bo]), ctx));
        c = add(c, maybe_dropout(cross_block(c, mem_kv, l, L), ctx));
        c = add(c, maybe_dropout(ff_block(layer_norm(c, L[lp.ln_ff_g], L[lp.ln_ff_b]), lp, L), ctx));
      }
    }

    const Tensor out = layer_norm(q, L[dec_lng_], L[dec_lnb_]);
    return add_bias(matmul(out, L[head_w_]), L[head_b_]);
  }

  // Teacher-forced training passes: one [T, vocab] logit set per
  // factorization order over the same memory.
  std::vector<Tensor> decode_train(const Tensor& memory, const std::vector<int>& targets,
                                   const std::vector<Permutation>& perms, const LeafSet& L,
                                   const DropCtx& ctx) const {
    const std::size_t t = targets.size();
    if (t == 0) throw ShapeMismatch("empty target sequence");
    if (t > static_cast<std::size_t>(cfg_.max_label_len) + 1) {
      throw LengthExceeded(t, static_cast<std::size_t>(cfg_.max_label_len) + 1);
    }
    std::vector<int> qpos(t);
    for (std::size_t i = 0; i < t; ++i) qpos[i] = static_cast<int>(i);
    const MemoryKV mem_kv = project_memory(memory, L);
    std::vector<Tensor> out;
    out.reserve(perms.size());
    for (const Permutation& p : perms) {
      if (p.length() != static_cast<int>(t)) throw ShapeMismatch("permutation length != target length");
      const MaskPair masks = masks_from_permutation(p);
      out.push_back(decode_pass(mem_kv, targets, qpos, &masks.query_mask, &masks.content_mask, L, ctx));
    }
    return out;
  }

  // --- inference ------------------------------------------------------------

  // Left-to-right greedy decoding; stops at EOS or the length cap. Returns
  // ids without the terminator.
  std::vector<int> greedy_ar(const Tensor& memory, const LeafSet& L) const {
    const MemoryKV mem_kv = project_memory(memory, L);
    const DropCtx off{};
    std::vector<int> ids;
    for (int s = 0; s <= cfg_.max_label_len; ++s) {
      const std::vector<int> qpos{s};
      const BoolMatrix qmask(1, ids.size(), true);
      const BoolMatrix cmask = strict_causal_mask(ids.size(), ids.size());
      const Tensor logits = decode_pass(mem_kv, ids, qpos, &qmask, &cmask, L, off);
      const int id = argmax_row(logits, 0);
      if (id == GlyphVocabulary::kEos) break;
      ids.push_back(id);
    }
    return ids;
  }

  // Parallel decoding: one mask-free pass over every position, then
  // `refine` cloze passes conditioned on the previous full prediction.
  std::vector<int> greedy_nar(const Tensor& memory, const LeafSet& L, int refine = 0) const {
    const MemoryKV mem_kv = project_memory(memory, L);
    const DropCtx off{};
    const std::size_t t_all = static_cast<std::size_t>(cfg_.max_label_len) + 1;
    std::vector<int> qpos(t_all);
    for (std::size_t i = 0; i < t_all; ++i) qpos[i] = static_cast<int>(i);

    std::vector<int> full(t_all);
    {
      const Tensor logits = decode_pass(mem_kv, {}, qpos, nullptr, nullptr, L, off);
      for (std::size_t i = 0; i < t_all; ++i) full[i] = argmax_row(logits, i);
    }
    for (int r = 0; r < refine; ++r) {
      const BoolMatrix everyone_else = cloze_mask(t_all);
      const Tensor logits = decode_pass(mem_kv, full, qpos, &everyone_else, &everyone_else, L, off);
      for (std::size_t i = 0; i < t_all; ++i) full[i] = argmax_row(logits, i);
    }

    std::vector<int> ids;
    for (int id : full) {
      if (id == GlyphVocabulary::kEos) break;
      ids.push_back(id);
    }
    return ids;
  }

  enum class DecodeMode { AR, NAR };

  std::string recognize(const GrayImage& img, const GlyphVocabulary& vocab, const LeafSet& L,
                        DecodeMode mode, int refine = 0) const {
    const DropCtx off{};
    const Tensor memory = encode_image(img, L, off);
    const std::vector<int> ids =
        mode == DecodeMode::AR ? greedy_ar(memory, L) : greedy_nar(memory, L, refine);
    return vocab.decode(ids);
  }

 private:
  struct AttnP {
    int wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct EncLayerP {
    int ln1_g, ln1_b;
    AttnP sa;
    int ln2_g, ln2_b;
    int ff_w1, ff_b1, ff_w2, ff_b2;
  };
  struct DecLayerP {
    int ln_sa_g, ln_sa_b;
    AttnP sa;
    int ln_ca_g, ln_ca_b;
    AttnP ca;
    int ln_ff_g, ln_ff_b;
    int ff_w1, ff_b1, ff_w2, ff_b2;
  };

  void check_positions(const std::vector<int>& pos) const {
    for (int p : pos) {
      if (p < 0 || p > cfg_.max_label_len) {
        throw LengthExceeded(static_cast<std::size_t>(p) + 1,
                             static_cast<std::size_t>(cfg_.max_label_len) + 1);
      }
    }
  }

  static int argmax_row(const Tensor& logits, std::size_t row) {
    const std::size_t v = logits.dim(1);
    const auto vals = logits.value();
    std::size_t best = 0;
    for (std::size_t j = 1; j < v; ++j) {
      if (vals[row * v + j] > vals[row * v + best]) best = j;
    }
    return static_cast<int>(best);
  }

  AttnP add_attn(const std::string& prefix) {
    const auto d = static_cast<std::size_t>(cfg_.embed_dim);
    AttnP p;
    p.wq = params_.add(prefix + ".wq", {d, d});
    p.bq = params_.add(prefix + ".bq", {d});
    p.wk = params_.add(prefix + ".wk", {d, d});
    p.bk = params_.add(prefix + ".bk", {d});
    p.wv = params_.add(prefix + ".wv", {d, d});
    p.bv = params_.add(prefix + ".bv", {d});
    p.wo = params_.add(prefix + ".wo", {d, d});
    p.bo = params_.add(prefix + ".bo", {d});
    return p;
  }

  void build_params() {
    const auto d = static_cast<std::size_t>(cfg_.embed_dim);
    const auto f = static_cast<std::size_t>(cfg_.ff_dim);
    const auto v = static_cast<std::size_t>(cfg_.vocab_size);
    patch_w_ = params_.add("enc.patch.w", {static_cast<std::size_t>(cfg_.patch_dim()), d});
    patch_b_ = params_.add("enc.patch.b", {d});
    enc_pos_ = params_.add("enc.pos_emb", {static_cast<std::size_t>(cfg_.num_patches()), d});
    for (int l = 0; l < cfg_.enc_layers; ++l) {
      const std::string p = "enc.layer" + std::to_string(l);
      EncLayerP lp;
      lp.ln1_g = params_.add(p + ".ln1.gamma", {d});
      lp.ln1_b = params_.add(p + ".ln1.beta", {d});
      lp.sa = add_attn(p + ".sa");
      lp.ln2_g = params_.add(p + ".ln2.gamma", {d});
      lp.ln2_b = params_.add(p + ".ln2.beta", {d});
      lp.ff_w1 = params_.add(p + ".ff.w1", {d, f});
      lp.ff_b1 = params_.add(p + ".ff.b1", {f});
      lp.ff_w2 = params_.add(p + ".ff.w2", {f, d});
      lp.ff_b2 = params_.add(p + ".ff.b2", {d});
      enc_.push_back(lp);
    }
    enc_lng_ = params_.add("enc.ln_out.gamma", {d});
    enc_lnb_ = params_.add("enc.ln_out.beta", {d});

    tok_emb_ = params_.add("dec.tok_emb", {v, d});
    dec_pos_ = params_.add("dec.pos_emb", {static_cast<std::size_t>(cfg_.max_label_len) + 1, d});
    for (int l = 0; l < cfg_.dec_layers; ++l) {
      const std::string p = "dec.layer" + std::to_string(l);
      DecLayerP lp;
      lp.ln_sa_g = params_.add(p + ".ln_sa.gamma", {d});
      lp.ln_sa_b = params_.add(p + ".ln_sa.beta", {d});
      lp.sa = add_attn(p + ".sa");
      lp.ln_ca_g = params_.add(p + ".ln_ca.gamma", {d});
      lp.ln_ca_b = params_.add(p + ".ln_ca.beta", {d});
      lp.ca = add_attn(p + ".ca");
      lp.ln_ff_g = params_.add(p + ".ln_ff.gamma", {d});
      lp.ln_ff_b = params_.add(p + ".ln_ff.beta", {d});
      lp.ff_w1 = params_.add(p + ".ff.w1", {d, f});
      lp.ff_b1 = params_.add(p + ".ff.b1", {f});
      lp.ff_w2 = params_.add(p + ".ff.w2", {f, d});
      lp.ff_b2 = params_.add(p + ".ff.b2", {d});
      dec_.push_back(lp);
    }
    dec_lng_ = params_.add("dec.ln_out.gamma", {d});
    dec_lnb_ = params_.add("dec.ln_out.beta", {d});
    head_w_ = params_.add("dec.head.w", {d, v});
    head_b_ = params_.add("dec.head.b", {v});
  }

  // Self-attention with q from `x_q` and k/v freshly projected from `src`.
  Tensor attn_block(const Tensor& x_q, const Tensor& src, const AttnP& p, const BoolMatrix* mask,
                    const LeafSet& L) const {
    const Tensor q = add_bias(matmul(x_q, L[p.wq]), L[p.bq]);
    const Tensor k = add_bias(matmul(src, L[p.wk]), L[p.bk]);
    const Tensor v = add_bias(matmul(src, L[p.wv]), L[p.bv]);
    const Tensor att = multi_head_attention(q, k, v, static_cast<std::size_t>(cfg_.heads), mask);
    return add_bias(matmul(att, L[p.wo]), L[p.bo]);
  }

  // Cross-attention of a decoder stream over precomputed memory projections.
  Tensor cross_block(const Tensor& x, const MemoryKV& mem_kv, std::size_t layer,
                     const LeafSet& L) const {
    const DecLayerP& lp = dec_[layer];
    const Tensor x_n = layer_norm(x, L[lp.ln_ca_g], L[lp.ln_ca_b]);
    const Tensor q = add_bias(matmul(x_n, L[lp.ca.wq]), L[lp.ca.bq]);
    const Tensor att = multi_head_attention(q, mem_kv.k[layer], mem_kv.v[layer],
                                            static_cast<std::size_t>(cfg_.heads), nullptr);
    return add_bias(matmul(att, L[lp.ca.wo]), L[lp.ca.bo]);
  }

  template <typename LayerP>
  Tensor ff_block(const Tensor& x_n, const LayerP& lp, const LeafSet& L) const {
    const Tensor h = gelu(add_bias(matmul(x_n, L[lp.ff_w1]), L[lp.ff_b1]));
    return add_bias(matmul(h, L[lp.ff_w2]), L[lp.ff_b2]);
  }

  RecognizerConfig cfg_;
  ParamStore params_;
  int patch_w_ = -1, patch_b_ = -1, enc_pos_ = -1;
  std::vector<EncLayerP> enc_;
  int enc_lng_ = -1, enc_lnb_ = -1;
  int tok_emb_ = -1, dec_pos_ = -1;
  std::vector<DecLayerP> dec_;
  int dec_lng_ = -1, dec_lnb_ = -1;
  int head_w_ = -1, head_b_ = -1;
};

// --- checkpoint format ------------------------------------------------------
//
// Layout (all integers little-endian):
//   8-byte magic "PARSEQCK"
//   u32 version (currently 1)
//   u32 config block length, then that many bytes of `key=value\n` UTF-8
//   tensor records until end of file:
//     u32 name length, name bytes, u32 rank, rank x u64 extents,
//     then the values as 64-bit floats.
//
// The config block carries the architecture, the training step and seed and
// the glyph vocabulary (entries as `vocab.<id>=<hex>:<position>`).

struct Checkpoint {
  RecognizerConfig config;
  std::vector<std::pair<std::string, std::vector<double>>> tensors;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  std::vector<GlyphForm> vocab_entries;
};

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'P', 'A', 'R', 'S', 'E', 'Q', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 4);
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 8);
}
inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw CheckpointError("truncated checkpoint");
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}
inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw CheckpointError("truncated checkpoint");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}
inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

inline std::string checkpoint_config_block(const RecognizerConfig& c, std::uint64_t step,
                                           std::uint64_t seed,
                                           const std::vector<GlyphForm>& entries) {
  char dropout_str[32];
  std::snprintf(dropout_str, sizeof dropout_str, "%.17g", c.dropout);  // exact round-trip
  std::ostringstream cfg;
  cfg << "image_height=" << c.image_height << "\nimage_width=" << c.image_width
      << "\npatch_height=" << c.patch_height << "\npatch_width=" << c.patch_width
      << "\nembed_dim=" << c.embed_dim << "\nheads=" << c.heads << "\nenc_layers=" << c.enc_layers
      << "\ndec_layers=" << c.dec_layers << "\nff_dim=" << c.ff_dim << "\ndropout=" << dropout_str
      << "\npermutations=" << c.permutations << "\nmax_label_len=" << c.max_label_len
      << "\nvocab_size=" << c.vocab_size << "\nstep=" << step << "\nseed=" << seed << "\n";
  for (std::size_t i = 0; i < entries.size(); ++i) {
    cfg << "vocab." << (GlyphVocabulary::kNumSpecials + i) << "="
        << GlyphVocabulary::hex4(entries[i].base) << ":" << to_string(entries[i].position) << "\n";
  }
  return cfg.str();
}

inline void put_tensor_record(std::ostream& os, const std::string& name, const Dims& dims,
                              const std::vector<double>& values) {
  put_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(os, static_cast<std::uint32_t>(dims.size()));
  for (std::size_t e : dims) put_u64(os, e);
  for (double v : values) put_f64(os, v);
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open for writing: " + path);
  os.write(detail::kCheckpointMagic, 8);
  detail::put_u32(os, detail::kCheckpointVersion);
  const std::string cfg_str =
      detail::checkpoint_config_block(ck.config, ck.step, ck.seed, ck.vocab_entries);
  detail::put_u32(os, static_cast<std::uint32_t>(cfg_str.size()));
  os.write(cfg_str.data(), static_cast<std::streamsize>(cfg_str.size()));
  for (const auto& [name, values] : ck.tensors) {
    detail::put_tensor_record(os, name, Dims{values.size()}, values);
  }
  if (!os) throw CheckpointError("write failure: " + path);
}

// Writes model parameters with their true ranks plus optional extra tensors
// (optimizer slots) as rank-1 records.
inline void save_checkpoint(const std::string& path, const RecognizerConfig& config,
                            const ParamStore& params, const GlyphVocabulary& vocab,
                            std::uint64_t step, std::uint64_t seed,
                            const std::vector<std::pair<std::string, std::vector<double>>>& extra = {}) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open for writing: " + path);
  os.write(detail::kCheckpointMagic, 8);
  detail::put_u32(os, detail::kCheckpointVersion);
  const std::string cfg_str =
      detail::checkpoint_config_block(config, step, seed, vocab.entries());
  detail::put_u32(os, static_cast<std::uint32_t>(cfg_str.size()));
  os.write(cfg_str.data(), static_cast<std::streamsize>(cfg_str.size()));
  for (int i = 0; i < params.size(); ++i) {
    detail::put_tensor_record(os, params.name(i), params.dims(i), params.values(i));
  }
  for (const auto& [name, values] : extra) {
    detail::put_tensor_record(os, name, Dims{values.size()}, values);
  }
  if (!os) throw CheckpointError("write failure: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open: " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0) {
    throw CheckpointError("bad magic, not a recognizer checkpoint: " + path);
  }
  const std::uint32_t version = detail::get_u32(is);
  if (version != detail::kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t cfg_len = detail::get_u32(is);
  std::string cfg_str(cfg_len, '\0');
  if (!is.read(cfg_str.data(), cfg_len)) throw CheckpointError("truncated config block");

  Checkpoint ck;
  std::map<int, GlyphForm> vocab_by_id;
  std::istringstream cfg(cfg_str);
  std::string line;
  while (std::getline(cfg, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError("malformed config line: " + line);
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    RecognizerConfig& c = ck.config;
    if (key == "image_height") c.image_height = std::stoi(val);
    else if (key == "image_width") c.image_width = std::stoi(val);
    else if (key == "patch_height") c.patch_height = std::stoi(val);
    else if (key == "patch_width") c.patch_width = std::stoi(val);
    else if (key == "embed_dim") c.embed_dim = std::stoi(val);
    else if (key == "heads") c.heads = std::stoi(val);
    else if (key == "enc_layers") c.enc_layers = std::stoi(val);
    else if (key == "dec_layers") c.dec_layers = std::stoi(val);
    else if (key == "ff_dim") c.ff_dim = std::stoi(val);
    else if (key == "dropout") c.dropout = std::stod(val);
    else if (key == "permutations") c.permutations = std::stoi(val);
    else if (key == "max_label_len") c.max_label_len = std::stoi(val);
    else if (key == "vocab_size") c.vocab_size = std::stoi(val);
    else if (key == "step") ck.step = std::stoull(val);
    else if (key == "seed") ck.seed = std::stoull(val);
    else if (key.rfind("vocab.", 0) == 0) {
      const int id = std::stoi(key.substr(6));
      const auto colon = val.find(':');
      if (colon == std::string::npos) throw CheckpointError("malformed vocab entry: " + line);
      GlyphForm f;
      f.base = static_cast<char32_t>(std::stoul(val.substr(0, colon), nullptr, 16));
      f.position = position_from_string(val.substr(colon + 1));
      vocab_by_id[id] = f;
    } else {
      throw CheckpointError("unknown config key in checkpoint: " + key);
    }
  }
  int expected = GlyphVocabulary::kNumSpecials;
  for (const auto& [id, form] : vocab_by_id) {
    if (id != expected++) throw CheckpointError("non-dense vocabulary ids in checkpoint");
    ck.vocab_entries.push_back(form);
  }

  while (true) {
    std::uint32_t name_len;
    {
      unsigned char b[4];
      if (!is.read(reinterpret_cast<char*>(b), 4)) break;  // clean end of file
      name_len = 0;
      for (int i = 3; i >= 0; --i) name_len = (name_len << 8) | b[i];
    }
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw CheckpointError("truncated tensor name");
    const std::uint32_t rank = detail::get_u32(is);
    std::size_t numel = 1;
    for (std::uint32_t r = 0; r < rank; ++r) numel *= static_cast<std::size_t>(detail::get_u64(is));
    std::vector<double> values(numel);
    for (std::size_t i = 0; i < numel; ++i) values[i] = detail::get_f64(is);
    ck.tensors.emplace_back(std::move(name), std::move(values));
  }
  return ck;
}

// Restores parameters into an existing store; every model tensor must be
// present with matching element counts. Returns the optimizer extras.
inline std::vector<std::pair<std::string, std::vector<double>>> restore_params(
    const Checkpoint& ck, ParamStore& params) {
  std::vector<std::pair<std::string, std::vector<double>>> extras;
  std::vector<bool> seen(static_cast<std::size_t>(params.size()), false);
  for (const auto& [name, values] : ck.tensors) {
    const int idx = params.find(name);
    if (idx < 0) {
      extras.emplace_back(name, values);
      continue;
    }
    if (params.values(idx).size() != values.size()) {
      throw CheckpointError("tensor " + name + " has " + std::to_string(values.size()) +
                            " values, expected " + std::to_string(params.values(idx).size()));
    }
    // In-place copy: leaf tensors may already view this buffer.
    std::copy(values.begin(), values.end(), params.values(idx).begin());
    seen[static_cast<std::size_t>(idx)] = true;
  }
  for (int i = 0; i < params.size(); ++i) {
    if (!seen[static_cast<std::size_t>(i)]) {
      throw CheckpointError("checkpoint lacks tensor " + params.name(i));
    }
  }
  return extras;
}

}  // namespace parsurdu
