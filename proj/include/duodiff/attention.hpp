#pragma once

// Multi-head scaled dot-product attention blocks.
//
// cross_attention(block, q_feats, kv_feats) projects queries from q_feats and
// keys/values from kv_feats, then adds the attended output back onto the
// query-side features (residual). Self-attention is the same op with
// kv_feats == q_feats.
//
// joint_cross_attention applies the op twice with one shared block, each
// stream's features serving as queries against the other stream's keys and
// values, both updates computed from the pre-update inputs. The query-from-y
// branch is routed to the image stream and the query-from-z branch to the
// mask stream; an ablation flag per branch turns that stream's update into an
// identity pass-through.

#include <cmath>
#include <utility>

#include "duodiff/ops.hpp"
#include "duodiff/rng.hpp"
#include "duodiff/tape.hpp"
#include "duodiff/tensor.hpp"

namespace duodiff {

struct attention_block {
  tensor wq, wk, wv, wo;  // each [C, C]
  int heads = 1;

  attention_block() = default;
  attention_block(int channels, int heads_) : heads(heads_) {
    if (channels % heads != 0)
      throw std::invalid_argument("attention_block: channels " + std::to_string(channels) +
                                  " not divisible by heads " + std::to_string(heads));
    wq = tensor({channels, channels});
    wk = tensor({channels, channels});
    wv = tensor({channels, channels});
    wo = tensor({channels, channels});
  }

  int channels() const { return wq.dim(0); }
  int head_dim() const { return channels() / heads; }
};

namespace detail {

// Shared forward; optionally exposes the post-softmax attention probabilities
// [B*heads, Tq, Tk] for inspection.
inline tensor attention_core(tape& tp, const attention_block& blk, const tensor& q_feats,
                             const tensor& kv_feats, tensor* probs_out) {
  if (q_feats.rank() != 3 || kv_feats.rank() != 3)
    throw std::invalid_argument("cross_attention: features must be [B,T,C]");
  int C = blk.channels();
  if (q_feats.dim(2) != C || kv_feats.dim(2) != C || q_feats.dim(0) != kv_feats.dim(0))
    throw std::invalid_argument("cross_attention: feature dims " +
                                shape_str(q_feats.shape()) + " / " +
                                shape_str(kv_feats.shape()) +
                                " incompatible with block dim " + std::to_string(C));
  tensor q = ops::linear(tp, q_feats, blk.wq);
  tensor k = ops::linear(tp, kv_feats, blk.wk);
  tensor v = ops::linear(tp, kv_feats, blk.wv);
  tensor qh = ops::split_heads(tp, q, blk.heads);
  tensor kh = ops::split_heads(tp, k, blk.heads);
  tensor vh = ops::split_heads(tp, v, blk.heads);
  float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(blk.head_dim()));
  tensor scores = ops::bmm(tp, ops::scale(tp, qh, inv_sqrt_d), kh, /*transpose_b=*/true);
  tensor probs = ops::softmax_last(tp, scores);
  if (probs_out) *probs_out = probs;
  tensor attended = ops::merge_heads(tp, ops::bmm(tp, probs, vh), blk.heads);
  return ops::add(tp, q_feats, ops::linear(tp, attended, blk.wo));
}

}  // namespace detail

inline tensor cross_attention(tape& tp, const attention_block& blk, const tensor& q_feats,
                              const tensor& kv_feats) {
  return detail::attention_core(tp, blk, q_feats, kv_feats, nullptr);
}

inline tensor self_attention(tape& tp, const attention_block& blk, const tensor& feats) {
  return detail::attention_core(tp, blk, feats, feats, nullptr);
}

// Attention probabilities only (no residual path), for property tests.
inline tensor attention_probs(const attention_block& blk, const tensor& q_feats,
                              const tensor& kv_feats) {
  tape tp;
  tp.set_recording(false);
  tensor probs;
  detail::attention_core(tp, blk, q_feats, kv_feats, &probs);
  return probs;
}

// Simultaneous dual-stream update from the pre-update inputs:
//   z' = cross_attention(block, y_feats, z_feats)   (query-from-y -> image stream)
//   y' = cross_attention(block, z_feats, y_feats)   (query-from-z -> mask stream)
// Disabling a branch passes that stream's features through unchanged.
inline std::pair<tensor, tensor> joint_cross_attention(tape& tp, const attention_block& blk,
                                                       const tensor& z_feats,
                                                       const tensor& y_feats,
                                                       bool mask_to_image = true,
                                                       bool image_to_mask = true) {
  if (z_feats.shape() != y_feats.shape())
    throw std::invalid_argument("joint_cross_attention: stream shapes differ: " +
                                shape_str(z_feats.shape()) + " vs " +
                                shape_str(y_feats.shape()));
  tensor z_new = mask_to_image ? cross_attention(tp, blk, y_feats, z_feats) : z_feats;
  tensor y_new = image_to_mask ? cross_attention(tp, blk, z_feats, y_feats) : y_feats;
  return {z_new, y_new};
}

}  // namespace duodiff
