#pragma once

// Feature extractor for distribution metrics: a small convolutional
// classifier trained to predict the target label from the image. Its pooled
// penultimate activations are the feature vectors consumed by the Frechet
// metric; its softmax posteriors feed the diversity score. Training aborts
// if held-out accuracy is below the configured floor, since metrics computed
// from an untrained feature space are meaningless.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "duodiff/adamw.hpp"
#include "duodiff/ops.hpp"
#include "duodiff/phantom.hpp"
#include "duodiff/rng.hpp"
#include "duodiff/tape.hpp"

namespace duodiff {

struct feature_extractor_config {
  int width1 = 16;
  int width2 = 32;
  int feature_dim = 32;  // width of the final conv block == feature size
  int train_steps = 1000;
  int batch_size = 32;
  float lr = 2e-3f;
  float accuracy_floor = 0.9f;

  void validate() const {
    if (width1 < 1 || width2 < 1 || feature_dim < 1)
      throw config_error("feature_extractor: widths must be positive");
    if (train_steps < 1) throw config_error("feature_extractor: train_steps must be >= 1");
    if (batch_size < 1) throw config_error("feature_extractor: batch_size must be >= 1");
    if (!(lr > 0.0f)) throw config_error("feature_extractor: lr must be positive");
    if (accuracy_floor < 0.0f || accuracy_floor > 1.0f)
      throw config_error("feature_extractor: accuracy_floor must be in [0,1]");
  }
};

namespace featdetail {

inline void init_conv(tensor& w, counter_rng rng) {
  int64_t fan_in = w.size() / w.dim(0);
  float sigma = std::sqrt(2.0f / static_cast<float>(fan_in));
  rng.fill_normal(w.values_mut());
  for (float& v : w.values_mut()) v *= sigma;
}

inline void init_linear(tensor& w, counter_rng rng) {
  float sigma = 1.0f / std::sqrt(static_cast<float>(w.dim(0)));
  rng.fill_normal(w.values_mut());
  for (float& v : w.values_mut()) v *= sigma;
}

// Mean cross-entropy from [N,k] logits and integer targets, using the
// one-hot * log-softmax contraction.
inline tensor ce_mean(tape& tp, const tensor& logits, std::span<const int> targets) {
  int n = logits.dim(0), k = logits.dim(1);
  if (static_cast<int>(targets.size()) != n)
    throw std::invalid_argument("ce_mean: target count mismatch");
  tensor onehot({n, k}, 0.0f);
  auto ov = onehot.values_mut();
  for (int i = 0; i < n; ++i) {
    int t = targets[static_cast<size_t>(i)];
    if (t < 0 || t >= k) throw std::invalid_argument("ce_mean: target out of range");
    ov[static_cast<int64_t>(i) * k + t] = 1.0f;
  }
  tensor logp = ops::log_softmax_last(tp, logits);
  return ops::scale(tp, ops::mean(tp, ops::mul(tp, logp, onehot)), -static_cast<float>(k));
}

}  // namespace featdetail

class feature_extractor {
 public:
  feature_extractor(int in_channels, int image_size, int n_classes,
                    const feature_extractor_config& cfg, uint64_t init_seed)
      : cfg_(cfg), in_channels_(in_channels), image_size_(image_size), n_classes_(n_classes) {
    cfg.validate();
    if (image_size % 8 != 0)
      throw config_error("feature_extractor: image_size must be divisible by 8");
    counter_rng root = counter_rng(init_seed).stream(rng_streams::param_init);
    w1_ = tensor({cfg.width1, in_channels, 3, 3});
    b1_ = tensor({cfg.width1}, 0.0f);
    w2_ = tensor({cfg.width2, cfg.width1, 3, 3});
    b2_ = tensor({cfg.width2}, 0.0f);
    w3_ = tensor({cfg.feature_dim, cfg.width2, 3, 3});
    b3_ = tensor({cfg.feature_dim}, 0.0f);
    head_w_ = tensor({cfg.feature_dim, n_classes_});
    head_b_ = tensor({n_classes_}, 0.0f);
    featdetail::init_conv(w1_, root.stream(1));
    featdetail::init_conv(w2_, root.stream(2));
    featdetail::init_conv(w3_, root.stream(3));
    featdetail::init_linear(head_w_, root.stream(4));
    for (tensor* t : all_params()) t->set_requires_grad(true);
  }

  int feature_dim() const { return cfg_.feature_dim; }
  int n_classes() const { return n_classes_; }

  std::vector<tensor> trainable() {
    std::vector<tensor> out;
    for (tensor* t : all_params()) out.push_back(*t);
    return out;
  }

  // [N,c,h,w] -> pooled features [N,feature_dim]. Global max pooling keeps
  // small high-activation structures visible in the feature vector.
  tensor features_batch(tape& tp, const tensor& images) const {
    tensor h = ops::silu(tp, ops::conv2d(tp, images, w1_, b1_, 2, 1));
    h = ops::silu(tp, ops::conv2d(tp, h, w2_, b2_, 2, 1));
    h = ops::silu(tp, ops::conv2d(tp, h, w3_, b3_, 1, 1));
    int n = h.dim(0), c = h.dim(1);
    int64_t hw = static_cast<int64_t>(h.dim(2)) * h.dim(3);
    h = ops::reshape(tp, h, {n, c, static_cast<int>(hw)});
    return ops::max_last(tp, h);
  }

  // [N,c,h,w] -> logits [N,n_classes].
  tensor logits_batch(tape& tp, const tensor& images) const {
    return ops::linear(tp, features_batch(tp, images), head_w_, head_b_);
  }

  std::vector<float> features(const tensor& image) const {
    tensor x = batch_of_one(image);
    tape tp;
    tp.set_recording(false);
    tensor f = features_batch(tp, x);
    return {f.values().begin(), f.values().end()};
  }

  std::vector<float> probs(const tensor& image) const {
    tensor x = batch_of_one(image);
    tape tp;
    tp.set_recording(false);
    tensor p = ops::softmax_last(tp, logits_batch(tp, x));
    return {p.values().begin(), p.values().end()};
  }

 private:
  tensor batch_of_one(const tensor& image) const {
    if (image.rank() != 3)
      throw std::invalid_argument("feature_extractor: expected [c,h,w] image");
    shape_t s = {1, image.dim(0), image.dim(1), image.dim(2)};
    return tensor(s, std::vector<float>(image.values().begin(), image.values().end()));
  }

  std::vector<tensor*> all_params() {
    return {&w1_, &b1_, &w2_, &b2_, &w3_, &b3_, &head_w_, &head_b_};
  }

  feature_extractor_config cfg_;
  int in_channels_, image_size_, n_classes_;
  tensor w1_, b1_, w2_, b2_, w3_, b3_, head_w_, head_b_;
};

namespace featdetail {

inline tensor stack_images(std::span<const paired_sample> data, std::span<const size_t> idx) {
  const tensor& first = data[idx[0]].image;
  tensor out({static_cast<int>(idx.size()), first.dim(0), first.dim(1), first.dim(2)});
  int64_t per = first.size();
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy_n(data[idx[i]].image.values().data(), per,
                out.values_mut().data() + static_cast<int64_t>(i) * per);
  return out;
}

// In-place horizontal/vertical flip of one [c,h,w] plane inside a batch.
inline void flip_plane(std::span<float> v, int c, int h, int w, bool horiz, bool vert) {
  for (int ch = 0; ch < c; ++ch) {
    float* p = v.data() + static_cast<int64_t>(ch) * h * w;
    if (horiz)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w / 2; ++x) std::swap(p[y * w + x], p[y * w + (w - 1 - x)]);
    if (vert)
      for (int y = 0; y < h / 2; ++y)
        for (int x = 0; x < w; ++x) std::swap(p[y * w + x], p[(h - 1 - y) * w + x]);
  }
}

inline int label_of(const paired_sample& ps) {
  if (!ps.prompt.label)
    throw std::invalid_argument("feature_extractor: sample has no target label");
  return vocabulary::index_of(vocabulary::instance().labels, *ps.prompt.label, "label");
}

}  // namespace featdetail

// Trains the classifier on `train` and gates on `heldout` accuracy.
inline feature_extractor train_feature_extractor(std::span<const paired_sample> train,
                                                 std::span<const paired_sample> heldout,
                                                 const feature_extractor_config& cfg,
                                                 uint64_t seed) {
  cfg.validate();
  if (train.empty() || heldout.empty())
    throw config_error("feature_extractor: empty train or held-out split");
  int n_labels = static_cast<int>(vocabulary::instance().labels.size());
  const tensor& first = train[0].image;
  feature_extractor fx(first.dim(0), first.dim(1), n_labels, cfg, seed);

  adamw_config oc;
  oc.lr = cfg.lr;
  oc.weight_decay = 1e-4f;
  adamw opt(oc, fx.trainable());
  counter_rng rng = counter_rng(seed).stream(rng_streams::eval).stream(0xfea7);

  const tensor& shape_ref = train[0].image;
  int c = shape_ref.dim(0), h = shape_ref.dim(1), w = shape_ref.dim(2);
  int64_t per = shape_ref.size();
  for (int step = 1; step <= cfg.train_steps; ++step) {
    counter_rng srng = rng.stream(static_cast<uint64_t>(step));
    std::vector<size_t> idx(static_cast<size_t>(cfg.batch_size));
    std::vector<int> targets(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) {
      idx[i] = static_cast<size_t>(srng.uniform_index(i, train.size()));
      targets[i] = featdetail::label_of(train[idx[i]]);
    }
    tensor images = featdetail::stack_images(train, idx);
    // Flip augmentation: the label is invariant under reflections, and this
    // keeps the classifier from memorizing background texture.
    counter_rng frng = srng.stream(0xf11b);
    for (size_t i = 0; i < idx.size(); ++i) {
      uint64_t bits = frng.bits(i);
      featdetail::flip_plane(
          std::span<float>(images.values_mut().data() + static_cast<int64_t>(i) * per,
                           static_cast<size_t>(per)),
          c, h, w, (bits & 1) != 0, (bits & 2) != 0);
    }
    tape tp;
    tensor loss = featdetail::ce_mean(tp, fx.logits_batch(tp, images), targets);
    tp.backward(loss);
    opt.step();
    opt.zero_grad();
  }

  int correct = 0;
  for (const paired_sample& ps : heldout) {
    std::vector<float> p = fx.probs(ps.image);
    int argmax = 0;
    for (size_t j = 1; j < p.size(); ++j)
      if (p[j] > p[static_cast<size_t>(argmax)]) argmax = static_cast<int>(j);
    correct += argmax == featdetail::label_of(ps);
  }
  float acc = static_cast<float>(correct) / static_cast<float>(heldout.size());
  if (acc < cfg.accuracy_floor)
    throw std::runtime_error(
        "feature_extractor: held-out accuracy " + std::to_string(acc) + " is below the floor " +
        std::to_string(cfg.accuracy_floor) +
        "; increase train_steps or corpus size in the evaluation config");
  return fx;
}

}  // namespace duodiff
