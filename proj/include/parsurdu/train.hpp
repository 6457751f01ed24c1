// Optimization loop: per-sample permutation sampling, averaged permutation
// loss, SGD with momentum and global-norm clipping, deterministic batch
// scheduling, validation, metric logging and resumable checkpoints.
#pragma once

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "parsurdu/config.hpp"
#include "parsurdu/dataset.hpp"
#include "parsurdu/eval.hpp"
#include "parsurdu/model.hpp"
#include "parsurdu/permutation.hpp"

namespace parsurdu {

struct NonFiniteLoss : std::runtime_error {
  NonFiniteLoss(std::uint64_t step, const std::string& sample_ids)
      : std::runtime_error("non-finite loss at step " + std::to_string(step) +
                           " (batch ids: " + sample_ids + ")") {}
};

namespace detail {
// Stream tags keeping every consumer of the run seed statistically
// independent.
inline constexpr std::uint64_t kTagShuffle = 0x73687566ULL;
inline constexpr std::uint64_t kTagReplacement = 0x72657031ULL;
inline constexpr std::uint64_t kTagPerm = 0x7065726DULL;
inline constexpr std::uint64_t kTagDropout = 0x64726F70ULL;
inline constexpr std::uint64_t kTagAugment = 0x61756731ULL;
}  // namespace detail

// Deterministic batch schedule: a pure function of (seed, step). Epochs are
// independent shuffles; the remainder that does not fill a batch is dropped.
class BatchSampler {
 public:
  BatchSampler(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed)
      : n_(dataset_size), batch_(batch_size), seed_(seed) {
    if (n_ == 0) throw std::invalid_argument("empty dataset");
    if (batch_ == 0) throw std::invalid_argument("batch size must be positive");
  }

  std::vector<std::size_t> batch_for_step(std::uint64_t step) {
    std::vector<std::size_t> out(batch_);
    if (n_ < batch_) {  // tiny dataset: draw with replacement
      Rng rng(mix_seed(seed_, detail::kTagReplacement, step));
      for (auto& i : out) i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n_) - 1));
      return out;
    }
    const std::uint64_t per_epoch = n_ / batch_;
    const std::uint64_t epoch = step / per_epoch;
    const std::uint64_t slot = step % per_epoch;
    if (!cached_ || cached_epoch_ != epoch) {
      order_.resize(n_);
      for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
      Rng rng(mix_seed(seed_, detail::kTagShuffle, epoch));
      rng.shuffle(order_);
      cached_epoch_ = epoch;
      cached_ = true;
    }
    for (std::size_t i = 0; i < batch_; ++i) out[i] = order_[slot * batch_ + i];
    return out;
  }

 private:
  std::size_t n_, batch_;
  std::uint64_t seed_;
  bool cached_ = false;
  std::uint64_t cached_epoch_ = 0;
  std::vector<std::size_t> order_;
};

// The preprocessing chain, in application order: noise filters, skew
// correction, contrast normalization, then geometry normalization.
inline GrayImage preprocess_image(GrayImage img, const RunConfig& rc) {
  if (rc.median_radius > 0) img = median_filter(img, rc.median_radius);
  if (rc.gaussian_sigma > 0.0) img = gaussian_filter(img, rc.gaussian_sigma);
  if (rc.deskew) img = parsurdu::deskew(img).image;
  if (rc.contrast) img = parsurdu::contrast_stretch(img);
  if (img.width != rc.model.image_width || img.height != rc.model.image_height) {
    img = fit_to(img, rc.model.image_width, rc.model.image_height);
  }
  return img;
}

struct TrainerOptions {
  double learning_rate = 0.1;
  double momentum = 0.9;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
};

// Owns the model, the optimizer state and the step counter. The update step
// is single-threaded and is the sole writer of the parameters.
class Trainer {
 public:
  Trainer(const RecognizerConfig& cfg, GlyphVocabulary vocab, const TrainerOptions& opt)
      : model_(cfg),
        vocab_(std::move(vocab)),
        opt_(opt),
        velocity_(static_cast<std::size_t>(model_.params().total_count()), 0.0) {
    model_.init_params(opt_.seed);
    rebuild_leaves();
  }

  Recognizer& model() { return model_; }
  const Recognizer& model() const { return model_; }
  const GlyphVocabulary& vocab() const { return vocab_; }
  std::uint64_t step() const { return step_; }
  double best_cer() const { return best_cer_; }
  const LeafSet& eval_leaves() const { return eval_leaves_; }

  // Encodes a label and appends the terminator.
  std::vector<int> targets_for(const std::string& label) const {
    std::vector<int> ids = vocab_.encode(std::string_view(label));
    ids.push_back(GlyphVocabulary::kEos);
    return ids;
  }

  // One optimization step over an already-augmented batch; returns the mean
  // permutation-averaged loss.
  double train_step(const std::vector<const Sample*>& batch) {
    if (batch.empty()) throw std::invalid_argument("empty batch");
    train_leaves_.zero_grads();
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    double loss_sum = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const Sample& s = *batch[i];
      const std::vector<int> targets = targets_for(s.label);
      Rng perm_rng(mix_seed(opt_.seed, detail::kTagPerm, step_, i));
      Rng drop_rng(mix_seed(opt_.seed, detail::kTagDropout, step_, i));
      DropCtx ctx{model_.config().dropout, &drop_rng};

      const Tensor memory = model_.encode_image(s.image, train_leaves_, ctx);
      const std::vector<Permutation> perms = sample_permutations(
          static_cast<int>(targets.size()), model_.config().permutations, perm_rng);
      const std::vector<Tensor> logit_sets =
          model_.decode_train(memory, targets, perms, train_leaves_, ctx);
      const Tensor loss = plm_loss(logit_sets, targets, GlyphVocabulary::kPad);
      const double lv = loss.scalar_value();
      if (!std::isfinite(lv)) throw NonFiniteLoss(step_, batch_ids(batch));
      loss_sum += lv;
      scale(loss, inv_b).backward();
    }
    apply_gradients();
    ++step_;
    return loss_sum * inv_b;
  }

  // Teacher-forced cross-entropy under the canonical left-to-right order,
  // dropout disabled. Deterministic and side-effect-free.
  double validation_loss(const std::vector<Sample>& samples) const {
    const DropCtx off{};
    double sum = 0.0;
    for (const Sample& s : samples) {
      const std::vector<int> targets = targets_for(s.label);
      const Tensor memory = model_.encode_image(s.image, eval_leaves_, off);
      const std::vector<Permutation> identity{Permutation::identity(static_cast<int>(targets.size()))};
      const std::vector<Tensor> logits =
          model_.decode_train(memory, targets, identity, eval_leaves_, off);
      sum += plm_loss(logits, targets, GlyphVocabulary::kPad).scalar_value();
    }
    return samples.empty() ? 0.0 : sum / static_cast<double>(samples.size());
  }

  CERReport evaluate(const std::vector<Sample>& samples,
                     Recognizer::DecodeMode mode = Recognizer::DecodeMode::AR,
                     int refine = 0) const {
    std::vector<Prediction> preds;
    preds.reserve(samples.size());
    for (const Sample& s : samples) {
      Prediction p;
      p.id = s.id;
      p.ground_truth = s.label;
      p.prediction = model_.recognize(s.image, vocab_, eval_leaves_, mode, refine);
      preds.push_back(std::move(p));
    }
    return aggregate_cer(preds);
  }

  void note_validation_cer(double cer) { best_cer_ = std::min(best_cer_, cer); }

  void save(const std::string& path) const {
    std::vector<std::pair<std::string, std::vector<double>>> extra;
    extra.emplace_back("opt/velocity", velocity_);
    extra.emplace_back("opt/best_cer", std::vector<double>{best_cer_});
    save_checkpoint(path, model_.config(), model_.params(), vocab_, step_, opt_.seed, extra);
  }

  // Restores parameters, optimizer slots and the step counter so training
  // resumes on the exact trajectory of an uninterrupted run.
  void restore(const Checkpoint& ck) {
    const auto extras = restore_params(ck, model_.params());
    for (const auto& [name, values] : extras) {
      if (name == "opt/velocity") {
        if (values.size() != velocity_.size()) {
          throw CheckpointError("optimizer slot size mismatch");
        }
        velocity_ = values;
      } else if (name == "opt/best_cer") {
        if (!values.empty()) best_cer_ = values[0];
      } else {
        throw CheckpointError("unexpected extra tensor in checkpoint: " + name);
      }
    }
    step_ = ck.step;
    rebuild_leaves();
  }

 private:
  static std::string batch_ids(const std::vector<const Sample*>& batch) {
    std::string ids;
    for (const Sample* s : batch) {
      if (!ids.empty()) ids += ",";
      ids += s->id;
    }
    return ids;
  }

  void rebuild_leaves() {
    train_leaves_ = LeafSet(model_.params(), /*requires_grad=*/true);
    eval_leaves_ = LeafSet(model_.params(), /*requires_grad=*/false);
  }

  void apply_gradients() {
    double sq = 0.0;
    for (std::size_t p = 0; p < train_leaves_.size(); ++p) {
      for (double g : train_leaves_[static_cast<int>(p)].grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    const double clip_scale = norm > opt_.clip_norm ? opt_.clip_norm / norm : 1.0;

    std::size_t off = 0;
    ParamStore& params = model_.params();
    for (int p = 0; p < params.size(); ++p) {
      auto& values = params.values(p);
      const auto grads = train_leaves_[p].grad();
      for (std::size_t j = 0; j < values.size(); ++j) {
        const double v = opt_.momentum * velocity_[off + j] + clip_scale * grads[j];
        velocity_[off + j] = v;
        values[j] -= opt_.learning_rate * v;
      }
      off += values.size();
    }
  }

  Recognizer model_;
  GlyphVocabulary vocab_;
  TrainerOptions opt_;
  std::vector<double> velocity_;  // flat, aligned with parameter order
  LeafSet train_leaves_, eval_leaves_;
  std::uint64_t step_ = 0;
  double best_cer_ = std::numeric_limits<double>::infinity();
};

// --- full training run (the `train` command body) ---------------------------

struct TrainRunResult {
  std::uint64_t final_step = 0;
  double final_val_cer = -1.0;
  double final_val_loss = -1.0;
  std::string checkpoint_path;
  std::string metrics_path;
};

inline GlyphVocabulary vocabulary_for_run(const RunConfig& rc, const std::vector<Sample>& train_set) {
  if (!rc.vocab_file.empty()) return GlyphVocabulary::load_file(rc.vocab_file);
  std::vector<std::string> labels;
  labels.reserve(train_set.size());
  for (const Sample& s : train_set) labels.push_back(s.label);
  return GlyphVocabulary::build(labels);
}

inline TrainRunResult run_training(const RunConfig& rc, const std::string& out_dir,
                                   const std::optional<std::string>& resume_path = {}) {
  if (rc.train_manifest.empty()) throw ConfigError("train_manifest is not set");
  if (rc.val_manifest.empty()) throw ConfigError("val_manifest is not set");
  std::filesystem::create_directories(out_dir);

  std::vector<Sample> train_raw = load_manifest(rc.train_manifest);
  if (train_raw.empty()) throw ConfigError("training manifest is empty: " + rc.train_manifest);
  std::vector<Sample> val_set = load_manifest(rc.val_manifest);

  const GlyphVocabulary vocab = vocabulary_for_run(rc, train_raw);
  RecognizerConfig mc = rc.model;
  mc.vocab_size = vocab.size();
  mc.validate();

  // Preprocess once; augmentation (when enabled) re-runs the chain per step
  // on the perturbed image instead.
  std::vector<Sample> train_set = train_raw;
  if (!rc.augment) {
    for (Sample& s : train_set) s.image = preprocess_image(std::move(s.image), rc);
  }
  for (Sample& s : val_set) s.image = preprocess_image(std::move(s.image), rc);

  TrainerOptions topt;
  topt.learning_rate = rc.learning_rate;
  topt.momentum = rc.momentum;
  topt.clip_norm = rc.clip_norm;
  topt.seed = rc.seed;
  Trainer trainer(mc, vocab, topt);
  if (resume_path) trainer.restore(load_checkpoint(*resume_path));

  const std::filesystem::path out_root(out_dir);
  const std::string metrics_path = (out_root / "metrics.tsv").string();
  const std::string ck_path = (out_root / "checkpoint.ckpt").string();
  const std::string best_path = (out_root / "best.ckpt").string();
  std::ofstream metrics(metrics_path, std::ios::binary | std::ios::app);
  if (!metrics) throw FileNotFound(metrics_path);

  BatchSampler sampler(train_set.size(), static_cast<std::size_t>(rc.batch_size), rc.seed);

  TrainRunResult result;
  double interval_loss_sum = 0.0;
  long long interval_count = 0;
  std::uint64_t last_logged = trainer.step();

  auto validate_and_log = [&]() {
    const double train_loss =
        interval_count > 0 ? interval_loss_sum / static_cast<double>(interval_count) : 0.0;
    const double val_loss = trainer.validation_loss(val_set);
    const CERReport rep = trainer.evaluate(val_set, Recognizer::DecodeMode::AR, 0);
    const double cer = rep.cer();
    char line[160];
    std::snprintf(line, sizeof line, "%" PRIu64 "\t%.6f\t%.6f\t%.6f\n", trainer.step(), train_loss,
                  val_loss, cer);
    metrics << line;
    metrics.flush();
    const bool improved = cer < trainer.best_cer();
    trainer.note_validation_cer(cer);
    trainer.save(ck_path);
    if (improved) trainer.save(best_path);
    interval_loss_sum = 0.0;
    interval_count = 0;
    last_logged = trainer.step();
    result.final_val_cer = cer;
    result.final_val_loss = val_loss;
  };

  if (rc.max_steps == 0 || trainer.step() >= static_cast<std::uint64_t>(rc.max_steps)) {
    trainer.save(ck_path);  // nothing to train; still leave a checkpoint
  }

  while (trainer.step() < static_cast<std::uint64_t>(rc.max_steps)) {
    const std::vector<std::size_t> idx = sampler.batch_for_step(trainer.step());
    std::vector<Sample> augmented;  // storage when augmentation is active
    std::vector<const Sample*> batch;
    batch.reserve(idx.size());
    if (rc.augment) {
      augmented.reserve(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) {
        Rng aug_rng(mix_seed(rc.seed, detail::kTagAugment, trainer.step(), i));
        Sample s = train_set[idx[i]];
        s.image = preprocess_image(augment(s.image, aug_rng, rc.aug), rc);
        augmented.push_back(std::move(s));
      }
      for (const Sample& s : augmented) batch.push_back(&s);
    } else {
      for (std::size_t i : idx) batch.push_back(&train_set[i]);
    }
    interval_loss_sum += trainer.train_step(batch);
    ++interval_count;
    if (trainer.step() % static_cast<std::uint64_t>(rc.val_interval) == 0 ||
        trainer.step() == static_cast<std::uint64_t>(rc.max_steps)) {
      validate_and_log();
    }
  }
  if (trainer.step() > last_logged && interval_count > 0) validate_and_log();

  result.final_step = trainer.step();
  result.checkpoint_path = ck_path;
  result.metrics_path = metrics_path;
  return result;
}

}  // namespace parsurdu
