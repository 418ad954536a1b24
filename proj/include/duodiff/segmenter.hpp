#pragma once

// Downstream segmentation network used to score datasets: a deliberately
// small two-level U-Net trained with per-pixel cross-entropy. Dataset
// quality experiments compare the scores of segmenters trained on different
// data mixes under identical seeds and budgets.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "duodiff/adamw.hpp"
#include "duodiff/features.hpp"
#include "duodiff/metrics.hpp"
#include "duodiff/ops.hpp"
#include "duodiff/phantom.hpp"
#include "duodiff/rng.hpp"
#include "duodiff/tape.hpp"

namespace duodiff {

struct segmenter_config {
  int base_width = 16;
  int train_steps = 800;
  int batch_size = 8;
  float lr = 2e-3f;

  void validate() const {
    if (base_width < 1) throw config_error("segmenter: base_width must be positive");
    if (train_steps < 1) throw config_error("segmenter: train_steps must be >= 1");
    if (batch_size < 1) throw config_error("segmenter: batch_size must be >= 1");
    if (!(lr > 0.0f)) throw config_error("segmenter: lr must be positive");
  }
};

class segmenter {
 public:
  segmenter(int in_channels, int n_classes, const segmenter_config& cfg, uint64_t init_seed)
      : cfg_(cfg), n_classes_(n_classes) {
    cfg.validate();
    if (n_classes < 2) throw config_error("segmenter: need >= 2 classes");
    int w = cfg.base_width;
    counter_rng root = counter_rng(init_seed).stream(rng_streams::param_init);
    auto conv = [&](int co, int ci, uint64_t sid) {
      tensor t({co, ci, 3, 3});
      featdetail::init_conv(t, root.stream(sid));
      return t;
    };
    enc1_w_ = conv(w, in_channels, 1);
    enc2_w_ = conv(w, w, 2);
    down_w_ = conv(2 * w, w, 3);
    mid_w_ = conv(2 * w, 2 * w, 4);
    up_w_ = conv(w, 2 * w, 5);
    dec_w_ = conv(w, 2 * w, 6);
    out_w_ = conv(n_classes, w, 7);
    enc1_b_ = tensor({w}, 0.0f);
    enc2_b_ = tensor({w}, 0.0f);
    down_b_ = tensor({2 * w}, 0.0f);
    mid_b_ = tensor({2 * w}, 0.0f);
    up_b_ = tensor({w}, 0.0f);
    dec_b_ = tensor({w}, 0.0f);
    out_b_ = tensor({n_classes}, 0.0f);
    for (tensor* t : all_params()) t->set_requires_grad(true);
  }

  int n_classes() const { return n_classes_; }

  std::vector<tensor> trainable() {
    std::vector<tensor> out;
    for (tensor* t : all_params()) out.push_back(*t);
    return out;
  }

  // [N,c,h,w] -> logits [N,n_classes,h,w].
  tensor logits(tape& tp, const tensor& images) const {
    tensor h = ops::silu(tp, ops::conv2d(tp, images, enc1_w_, enc1_b_, 1, 1));
    tensor skip = ops::silu(tp, ops::conv2d(tp, h, enc2_w_, enc2_b_, 1, 1));
    h = ops::silu(tp, ops::conv2d(tp, skip, down_w_, down_b_, 2, 1));
    h = ops::silu(tp, ops::conv2d(tp, h, mid_w_, mid_b_, 1, 1));
    h = ops::silu(tp, ops::conv2d(tp, ops::upsample_nearest2x(tp, h), up_w_, up_b_, 1, 1));
    h = ops::concat(tp, h, skip, 1);
    h = ops::silu(tp, ops::conv2d(tp, h, dec_w_, dec_b_, 1, 1));
    return ops::conv2d(tp, h, out_w_, out_b_, 1, 1);
  }

  label_map predict(const tensor& image) const {
    if (image.rank() != 3) throw std::invalid_argument("segmenter: expected [c,h,w] image");
    shape_t s = {1, image.dim(0), image.dim(1), image.dim(2)};
    tensor x(s, std::vector<float>(image.values().begin(), image.values().end()));
    tape tp;
    tp.set_recording(false);
    tensor lg = logits(tp, x);
    int cls = lg.dim(1), h = lg.dim(2), w = lg.dim(3);
    int64_t plane = static_cast<int64_t>(h) * w;
    auto v = lg.values();
    label_map out(h, w);
    for (int64_t i = 0; i < plane; ++i) {
      int best = 0;
      float bv = v[i];
      for (int c = 1; c < cls; ++c) {
        float cv = v[c * plane + i];
        if (cv > bv) {
          bv = cv;
          best = c;
        }
      }
      out.ids[static_cast<size_t>(i)] = static_cast<uint8_t>(best);
    }
    return out;
  }

 private:
  std::vector<tensor*> all_params() {
    return {&enc1_w_, &enc1_b_, &enc2_w_, &enc2_b_, &down_w_, &down_b_, &mid_w_,
            &mid_b_,  &up_w_,   &up_b_,   &dec_w_,  &dec_b_,  &out_w_,  &out_b_};
  }

  segmenter_config cfg_;
  int n_classes_;
  tensor enc1_w_, enc1_b_, enc2_w_, enc2_b_, down_w_, down_b_, mid_w_, mid_b_;
  tensor up_w_, up_b_, dec_w_, dec_b_, out_w_, out_b_;
};

namespace segdetail {

// Per-pixel mean cross-entropy: [N,cls,H,W] logits against class-id masks.
inline tensor ce_pixels(tape& tp, const tensor& lg, std::span<const label_map> masks) {
  int n = lg.dim(0), cls = lg.dim(1), h = lg.dim(2), w = lg.dim(3);
  if (static_cast<int>(masks.size()) != n)
    throw std::invalid_argument("ce_pixels: mask count mismatch");
  int hw = h * w;
  tensor onehot({n, hw, cls}, 0.0f);
  auto ov = onehot.values_mut();
  for (int i = 0; i < n; ++i) {
    const label_map& m = masks[static_cast<size_t>(i)];
    if (m.h != h || m.w != w) throw std::invalid_argument("ce_pixels: mask shape mismatch");
    for (int p = 0; p < hw; ++p) {
      int t = m.ids[static_cast<size_t>(p)];
      if (t >= cls) throw std::invalid_argument("ce_pixels: class id out of range");
      ov[(static_cast<int64_t>(i) * hw + p) * cls + t] = 1.0f;
    }
  }
  tensor flat = ops::reshape(tp, lg, {n, cls, hw});
  tensor logp = ops::log_softmax_last(tp, ops::transpose_last2(tp, flat));
  return ops::scale(tp, ops::mean(tp, ops::mul(tp, logp, onehot)), -static_cast<float>(cls));
}

}  // namespace segdetail

// Trains a segmenter on (image, mask) pairs with the given budget and seed.
inline segmenter train_segmenter(std::span<const paired_sample> data, int n_classes,
                                 const segmenter_config& cfg, uint64_t seed) {
  cfg.validate();
  if (data.empty()) throw config_error("segmenter: empty training set");
  const tensor& first = data[0].image;
  segmenter seg(first.dim(0), n_classes, cfg, seed);
  adamw_config oc;
  oc.lr = cfg.lr;
  adamw opt(oc, seg.trainable());
  counter_rng rng = counter_rng(seed).stream(rng_streams::eval).stream(0x5e6);

  for (int step = 1; step <= cfg.train_steps; ++step) {
    counter_rng srng = rng.stream(static_cast<uint64_t>(step));
    std::vector<size_t> idx(static_cast<size_t>(cfg.batch_size));
    std::vector<label_map> masks;
    masks.reserve(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) {
      idx[i] = static_cast<size_t>(srng.uniform_index(i, data.size()));
      masks.push_back(data[idx[i]].mask);
    }
    tensor images = featdetail::stack_images(data, idx);
    tape tp;
    tensor loss = segdetail::ce_pixels(tp, seg.logits(tp, images), masks);
    tp.backward(loss);
    opt.step();
    opt.zero_grad();
  }
  return seg;
}

struct seg_scores {
  std::vector<double> dsc_per_class, iou_per_class;  // foreground classes 1..k-1
  double mean_dsc = 0.0, mean_iou = 0.0;
};

// Mean per-class overlap of predictions against ground truth, foreground
// classes only.
inline seg_scores evaluate_segmenter(const segmenter& seg, std::span<const paired_sample> data) {
  if (data.empty()) throw config_error("segmenter: empty evaluation set");
  int k = seg.n_classes();
  seg_scores sc;
  sc.dsc_per_class.assign(static_cast<size_t>(k - 1), 0.0);
  sc.iou_per_class.assign(static_cast<size_t>(k - 1), 0.0);
  for (const paired_sample& ps : data) {
    label_map pred = seg.predict(ps.image);
    for (int c = 1; c < k; ++c) {
      sc.dsc_per_class[static_cast<size_t>(c - 1)] += dsc(pred, ps.mask, c);
      sc.iou_per_class[static_cast<size_t>(c - 1)] += iou(pred, ps.mask, c);
    }
  }
  for (int c = 0; c < k - 1; ++c) {
    sc.dsc_per_class[static_cast<size_t>(c)] /= static_cast<double>(data.size());
    sc.iou_per_class[static_cast<size_t>(c)] /= static_cast<double>(data.size());
    sc.mean_dsc += sc.dsc_per_class[static_cast<size_t>(c)] / (k - 1);
    sc.mean_iou += sc.iou_per_class[static_cast<size_t>(c)] / (k - 1);
  }
  return sc;
}

}  // namespace duodiff
