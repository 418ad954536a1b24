#pragma once

// The shared-weight dual-stream denoiser.
//
// One U-Net-style parameter set serves both streams: each denoise call
// advances the image and mask latents through identical trunks in lockstep
// (this computes exactly the two role-swapped backbone applications — the
// partner features each stream attends to are the partner trunk at the same
// depth). Attention stages run text cross-attention, then self-attention,
// then joint cross-attention between the streams.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "duodiff/attention.hpp"
#include "duodiff/codec.hpp"
#include "duodiff/ops.hpp"
#include "duodiff/prompt.hpp"
#include "duodiff/rng.hpp"
#include "duodiff/schedule.hpp"
#include "duodiff/tape.hpp"
#include "duodiff/tensor.hpp"
#include "duodiff/util.hpp"

namespace duodiff {

// Seed of the frozen prompt-embedding table; a documented constant so the
// table is a pure function of (vocabulary, text_dim).
inline constexpr uint64_t frozen_table_seed = 0xd00dfeed;

struct model_config {
  int image_size = 32;
  int image_channels = 1;
  std::string codec = "identity";
  int base_width = 64;
  std::vector<int> channel_mult = {1, 2};  // encoder stage width multipliers
  int bottleneck_mult = 4;
  int heads = 4;
  int gn_groups = 8;
  int time_dim = 32;     // sinusoidal embedding size
  int time_hidden = 64;  // time MLP width
  int text_dim = 32;     // prompt embedding size
  std::vector<int> attn_stages = {1, 2};  // stage ids with attention; id == n_stages() is the bottleneck
  std::vector<int> jca_stages = {1, 2};   // subset of attn_stages carrying JCA
  bool jca_mask_to_image = true;          // functional branch flags (ablations)
  bool jca_image_to_mask = true;
  int schedule_T = 1000;

  int n_stages() const { return static_cast<int>(channel_mult.size()); }
  int width(int stage) const {
    return stage < n_stages() ? base_width * channel_mult[static_cast<size_t>(stage)]
                              : base_width * bottleneck_mult;
  }
  bool attn_at(int stage) const {
    return std::find(attn_stages.begin(), attn_stages.end(), stage) != attn_stages.end();
  }
  bool jca_at(int stage) const {
    return std::find(jca_stages.begin(), jca_stages.end(), stage) != jca_stages.end();
  }
  bool jca_present() const { return !jca_stages.empty(); }

  latent_codec make_codec() const { return latent_codec(codec_from_string(codec)); }
  int latent_channels() const { return make_codec().latent_channels(image_channels); }
  int latent_size() const { return make_codec().latent_size(image_size); }

  void validate() const {
    if (image_size < 8 || image_channels < 1) throw config_error("model: bad image shape");
    if (base_width < 1 || bottleneck_mult < 1) throw config_error("model: bad widths");
    if (channel_mult.empty()) throw config_error("model: channel_mult empty");
    if (schedule_T < 1) throw config_error("model: schedule_T < 1");
    if (time_dim < 2 || time_dim % 2 != 0) throw config_error("model: time_dim must be even");
    if (time_hidden < 1 || text_dim < 1) throw config_error("model: bad embedding dims");
    codec_from_string(codec);
    int s = latent_size();
    for (int d = 0; d < n_stages(); ++d) {
      if (s % 2 != 0)
        throw config_error("model: latent size not divisible across " +
                           std::to_string(n_stages()) + " stages");
      s /= 2;
    }
    for (int d = 0; d <= n_stages(); ++d) {
      if (width(d) % gn_groups != 0)
        throw config_error("model: stage width " + std::to_string(width(d)) +
                           " not divisible by gn_groups " + std::to_string(gn_groups));
      if (attn_at(d) && width(d) % heads != 0)
        throw config_error("model: attention width " + std::to_string(width(d)) +
                           " not divisible by heads " + std::to_string(heads));
    }
    for (int d : attn_stages)
      if (d < 0 || d > n_stages()) throw config_error("model: attn stage out of range");
    for (int d : jca_stages)
      if (!attn_at(d))
        throw config_error("model: jca stage " + std::to_string(d) +
                           " must also be an attention stage");
    if (codec == "patchify" && image_size % 2 != 0)
      throw config_error("model: patchify needs an even image size");
  }
};

namespace modeldetail {

struct res_block_params {
  tensor gn1_g, gn1_b;
  tensor conv1_w, conv1_b;
  tensor time_w, time_b;
  tensor gn2_g, gn2_b;
  tensor conv2_w, conv2_b;
  bool has_skip = false;
  tensor skip_w, skip_b;  // 1x1 projection when in/out channels differ

  res_block_params() = default;
  res_block_params(int cin, int cout, int time_hidden) {
    gn1_g = tensor({cin});
    gn1_b = tensor({cin});
    conv1_w = tensor({cout, cin, 3, 3});
    conv1_b = tensor({cout});
    time_w = tensor({time_hidden, cout});
    time_b = tensor({cout});
    gn2_g = tensor({cout});
    gn2_b = tensor({cout});
    conv2_w = tensor({cout, cout, 3, 3});
    conv2_b = tensor({cout});
    has_skip = cin != cout;
    if (has_skip) {
      skip_w = tensor({cout, cin, 1, 1});
      skip_b = tensor({cout});
    }
  }
};

struct attn_stage_params {
  tensor text_w, text_b;  // projects frozen text embeddings into stage width
  attention_block text_ca;
  attention_block self_attn;
  bool has_jca = false;
  attention_block jca;

  attn_stage_params() = default;
  attn_stage_params(int channels, int heads, int text_dim, bool with_jca) {
    text_w = tensor({text_dim, channels});
    text_b = tensor({channels});
    text_ca = attention_block(channels, heads);
    self_attn = attention_block(channels, heads);
    has_jca = with_jca;
    if (with_jca) jca = attention_block(channels, heads);
  }
};

struct conv_params {
  tensor w, b;
  conv_params() = default;
  conv_params(int cout, int cin, int k) : w({cout, cin, k, k}), b({cout}) {}
};

}  // namespace modeldetail

class denoiser {
 public:
  struct named_param {
    std::string name;
    tensor t;
  };

  denoiser(model_config cfg, uint64_t init_seed)
      : cfg_(std::move(cfg)), embedder_(vocabulary::instance(), cfg_.text_dim,
                                        frozen_table_seed) {
    cfg_.validate();
    build();
    init_params(init_seed);
    build_time_table();
  }

  const model_config& config() const { return cfg_; }
  const prompt_embedder& embedder() const { return embedder_; }
  const tensor& null_embedding_x() const { return null_x_; }
  const tensor& null_embedding_m() const { return null_m_; }

  // Frozen per-stream embedding; the all-null spec resolves to the learned
  // null pair (the unconditional branch).
  tensor encode_prompt_stream(const prompt_spec& p, bool mask_stream) const {
    if (p.all_null()) return mask_stream ? null_m_ : null_x_;
    return embedder_.encode_stream(p, mask_stream);
  }

  struct prompt_embedding {
    tensor e_x, e_m;
  };
  prompt_embedding encode_prompt(const prompt_spec& p) const {
    return {encode_prompt_stream(p, false), encode_prompt_stream(p, true)};
  }

  const std::vector<named_param>& params() const { return registry_; }
  std::vector<tensor> trainable() const {
    std::vector<tensor> out;
    out.reserve(registry_.size());
    for (const auto& np : registry_) out.push_back(np.t);
    return out;
  }

  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& np : registry_) n += np.t.size();
    return n;
  }

  void check_finite_params() const {
    for (const auto& np : registry_)
      for (float v : np.t.values())
        if (!std::isfinite(v))
          throw std::runtime_error("denoiser: non-finite parameter values in " + np.name);
  }

  // Joint two-stream forward. z, y: [N, C, S, S] latents sharing a shape;
  // ts: one timestep per sample; e_x, e_m: [N, L, text_dim] embeddings.
  // Returns the per-stream noise estimates (eps_x from the z stream trunk,
  // eps_m from the y stream trunk).
  noise_pair denoise(tape& tp, const tensor& z, const tensor& y, std::span<const int> ts,
                     const tensor& e_x, const tensor& e_m) const {
    validate_inputs(z, y, ts, e_x, e_m);
    int n = z.dim(0);

    tensor tvec;
    {
      tape_scope sc(tp, "time");
      tensor trows({n, cfg_.time_dim});
      {
        auto tv = trows.values_mut();
        auto tabv = time_table_.values();
        for (int i = 0; i < n; ++i)
          std::copy_n(tabv.data() + static_cast<int64_t>(ts[i]) * cfg_.time_dim,
                      cfg_.time_dim, tv.data() + static_cast<int64_t>(i) * cfg_.time_dim);
      }
      tvec = ops::linear(tp, trows, time_w1_, time_b1_);
      tvec = ops::silu(tp, tvec);
      tvec = ops::linear(tp, tvec, time_w2_, time_b2_);
    }

    tensor h1, h2;
    {
      tape_scope sc(tp, "conv_in");
      h1 = ops::conv2d(tp, z, conv_in_.w, conv_in_.b, 1, 1);
      h2 = ops::conv2d(tp, y, conv_in_.w, conv_in_.b, 1, 1);
    }

    int S = cfg_.n_stages();
    std::vector<tensor> skips1(static_cast<size_t>(S)), skips2(static_cast<size_t>(S));
    for (int d = 0; d < S; ++d) {
      {
        tape_scope sc(tp, "enc" + std::to_string(d));
        h1 = res_forward(tp, enc_res_[static_cast<size_t>(d)], h1, tvec);
        h2 = res_forward(tp, enc_res_[static_cast<size_t>(d)], h2, tvec);
        if (cfg_.attn_at(d))
          attn_forward(tp, enc_attn_[static_cast<size_t>(d)], h1, h2, e_x, e_m);
      }
      skips1[static_cast<size_t>(d)] = h1;
      skips2[static_cast<size_t>(d)] = h2;
      {
        tape_scope sc(tp, "down" + std::to_string(d));
        h1 = ops::conv2d(tp, h1, down_[static_cast<size_t>(d)].w,
                         down_[static_cast<size_t>(d)].b, 2, 1);
        h2 = ops::conv2d(tp, h2, down_[static_cast<size_t>(d)].w,
                         down_[static_cast<size_t>(d)].b, 2, 1);
      }
    }

    {
      tape_scope sc(tp, "mid");
      h1 = res_forward(tp, mid_res_a_, h1, tvec);
      h2 = res_forward(tp, mid_res_a_, h2, tvec);
      if (cfg_.attn_at(S)) attn_forward(tp, mid_attn_, h1, h2, e_x, e_m);
      h1 = res_forward(tp, mid_res_b_, h1, tvec);
      h2 = res_forward(tp, mid_res_b_, h2, tvec);
    }

    for (int d = S - 1; d >= 0; --d) {
      tape_scope sc(tp, "dec" + std::to_string(d));
      h1 = ops::upsample_nearest2x(tp, h1);
      h2 = ops::upsample_nearest2x(tp, h2);
      h1 = ops::conv2d(tp, h1, up_[static_cast<size_t>(d)].w, up_[static_cast<size_t>(d)].b,
                       1, 1);
      h2 = ops::conv2d(tp, h2, up_[static_cast<size_t>(d)].w, up_[static_cast<size_t>(d)].b,
                       1, 1);
      h1 = ops::concat(tp, h1, skips1[static_cast<size_t>(d)], 1);
      h2 = ops::concat(tp, h2, skips2[static_cast<size_t>(d)], 1);
      h1 = res_forward(tp, dec_res_[static_cast<size_t>(d)], h1, tvec);
      h2 = res_forward(tp, dec_res_[static_cast<size_t>(d)], h2, tvec);
      if (cfg_.attn_at(d))
        attn_forward(tp, dec_attn_[static_cast<size_t>(d)], h1, h2, e_x, e_m);
    }

    noise_pair out;
    {
      tape_scope sc(tp, "out");
      out.eps_x = ops::conv2d(
          tp, ops::silu(tp, ops::group_norm(tp, h1, out_gn_g_, out_gn_b_, cfg_.gn_groups)),
          out_conv_.w, out_conv_.b, 1, 1);
      out.eps_m = ops::conv2d(
          tp, ops::silu(tp, ops::group_norm(tp, h2, out_gn_g_, out_gn_b_, cfg_.gn_groups)),
          out_conv_.w, out_conv_.b, 1, 1);
    }
    return out;
  }

  // Single-sample convenience: latents [C,S,S], one t, per-stream [L,d]
  // embeddings.
  noise_pair denoise_one(tape& tp, const tensor& z, const tensor& y, int t,
                         const tensor& e_x, const tensor& e_m) const {
    shape_t batched = z.shape();
    batched.insert(batched.begin(), 1);
    tensor zb(batched, std::vector<float>(z.values().begin(), z.values().end()));
    tensor yb(batched, std::vector<float>(y.values().begin(), y.values().end()));
    shape_t eshape = e_x.shape();
    eshape.insert(eshape.begin(), 1);
    tensor exb(eshape, std::vector<float>(e_x.values().begin(), e_x.values().end()));
    tensor emb(eshape, std::vector<float>(e_m.values().begin(), e_m.values().end()));
    int ts[1] = {t};
    noise_pair b = denoise(tp, zb, yb, std::span<const int>(ts, 1), exb, emb);
    shape_t lat = z.shape();
    noise_pair out;
    tape scratch;
    scratch.set_recording(false);
    out.eps_x = ops::reshape(scratch, b.eps_x, lat);
    out.eps_m = ops::reshape(scratch, b.eps_m, lat);
    return out;
  }

  // Closed-form parameter count for a config (pure arithmetic; no allocation).
  static int64_t expected_param_count(const model_config& cfg) {
    cfg.validate();
    auto conv = [](int64_t co, int64_t ci, int64_t k) { return co * ci * k * k + co; };
    auto lin = [](int64_t in, int64_t out_) { return in * out_ + out_; };
    auto res = [&](int64_t cin, int64_t cout) {
      int64_t n = 2 * cin;                        // gn1
      n += conv(cout, cin, 3);                    // conv1
      n += lin(cfg.time_hidden, cout);            // time projection
      n += 2 * cout;                              // gn2
      n += conv(cout, cout, 3);                   // conv2
      if (cin != cout) n += conv(cout, cin, 1);   // skip
      return n;
    };
    auto attn = [&](int64_t c, bool with_jca) {
      int64_t blocks = with_jca ? 3 : 2;
      return lin(cfg.text_dim, c) + blocks * 4 * c * c;
    };
    int S = cfg.n_stages();
    int64_t cl = cfg.latent_channels();
    int64_t n = lin(cfg.time_dim, cfg.time_hidden) + lin(cfg.time_hidden, cfg.time_hidden);
    n += conv(cfg.width(0), cl, 3);
    for (int d = 0; d < S; ++d) {
      n += res(cfg.width(d), cfg.width(d));
      if (cfg.attn_at(d)) n += attn(cfg.width(d), cfg.jca_at(d));
      n += conv(cfg.width(d + 1), cfg.width(d), 3);  // downsample
    }
    n += 2 * res(cfg.width(S), cfg.width(S));
    if (cfg.attn_at(S)) n += attn(cfg.width(S), cfg.jca_at(S));
    for (int d = S - 1; d >= 0; --d) {
      n += conv(cfg.width(d), cfg.width(d + 1), 3);  // post-upsample conv
      n += res(2 * cfg.width(d), cfg.width(d));
      if (cfg.attn_at(d)) n += attn(cfg.width(d), cfg.jca_at(d));
    }
    n += 2 * cfg.width(0);         // out gn
    n += conv(cl, cfg.width(0), 3);
    n += 2 * static_cast<int64_t>(prompt_embedder::seq_len) * cfg.text_dim;  // null pair
    return n;
  }

 private:
  void validate_inputs(const tensor& z, const tensor& y, std::span<const int> ts,
                       const tensor& e_x, const tensor& e_m) const {
    int cl = cfg_.latent_channels(), s = cfg_.latent_size();
    if (z.rank() != 4 || z.shape() != y.shape())
      throw std::invalid_argument("denoise: latents must share shape [N,C,S,S], got " +
                                  shape_str(z.shape()) + " vs " + shape_str(y.shape()));
    if (z.dim(1) != cl || z.dim(2) != s || z.dim(3) != s)
      throw std::invalid_argument("denoise: latent shape " + shape_str(z.shape()) +
                                  " does not match config [N," + std::to_string(cl) + "," +
                                  std::to_string(s) + "," + std::to_string(s) + "]");
    int n = z.dim(0);
    if (static_cast<int>(ts.size()) != n)
      throw std::invalid_argument("denoise: need one t per sample");
    for (int t : ts)
      if (t < 1 || t > cfg_.schedule_T)
        throw std::invalid_argument("denoise: t = " + std::to_string(t) + " outside [1, " +
                                    std::to_string(cfg_.schedule_T) + "]");
    for (const tensor* e : {&e_x, &e_m})
      if (e->rank() != 3 || e->dim(0) != n || e->dim(1) != prompt_embedder::seq_len ||
          e->dim(2) != cfg_.text_dim)
        throw std::invalid_argument("denoise: embeddings must be [N," +
                                    std::to_string(prompt_embedder::seq_len) + "," +
                                    std::to_string(cfg_.text_dim) + "], got " +
                                    shape_str(e->shape()));
  }

  tensor res_forward(tape& tp, const modeldetail::res_block_params& rb, const tensor& h,
                     const tensor& tvec) const {
    tape_scope sc(tp, "res");
    tensor a = ops::group_norm(tp, h, rb.gn1_g, rb.gn1_b, cfg_.gn_groups);
    a = ops::silu(tp, a);
    a = ops::conv2d(tp, a, rb.conv1_w, rb.conv1_b, 1, 1);
    tensor tproj = ops::linear(tp, tvec, rb.time_w, rb.time_b);
    tproj = ops::reshape(tp, tproj, {tproj.dim(0), tproj.dim(1), 1, 1});
    a = ops::add(tp, a, tproj);
    a = ops::group_norm(tp, a, rb.gn2_g, rb.gn2_b, cfg_.gn_groups);
    a = ops::silu(tp, a);
    a = ops::conv2d(tp, a, rb.conv2_w, rb.conv2_b, 1, 1);
    tensor skip = rb.has_skip ? ops::conv2d(tp, h, rb.skip_w, rb.skip_b, 1, 0) : h;
    return ops::add(tp, a, skip);
  }

  // Tokenize both streams, run text-CA then SA per stream, then JCA between
  // the streams; updates h1/h2 in place.
  void attn_forward(tape& tp, const modeldetail::attn_stage_params& ap, tensor& h1,
                    tensor& h2, const tensor& e_x, const tensor& e_m) const {
    tape_scope sc(tp, "attn");
    int n = h1.dim(0), c = h1.dim(1), hh = h1.dim(2), ww = h1.dim(3);
    auto to_tokens = [&](const tensor& h) {
      return ops::transpose_last2(tp, ops::reshape(tp, h, {n, c, hh * ww}));
    };
    auto from_tokens = [&](const tensor& x) {
      return ops::reshape(tp, ops::transpose_last2(tp, x), {n, c, hh, ww});
    };
    tensor x1 = to_tokens(h1);
    tensor x2 = to_tokens(h2);
    {
      tape_scope s2(tp, "text_ca");
      tensor tf1 = ops::linear(tp, e_x, ap.text_w, ap.text_b);
      tensor tf2 = ops::linear(tp, e_m, ap.text_w, ap.text_b);
      x1 = cross_attention(tp, ap.text_ca, x1, tf1);
      x2 = cross_attention(tp, ap.text_ca, x2, tf2);
    }
    {
      tape_scope s2(tp, "self");
      x1 = self_attention(tp, ap.self_attn, x1);
      x2 = self_attention(tp, ap.self_attn, x2);
    }
    if (ap.has_jca) {
      tape_scope s2(tp, "jca");
      auto [z_new, y_new] = joint_cross_attention(tp, ap.jca, x1, x2,
                                                  cfg_.jca_mask_to_image,
                                                  cfg_.jca_image_to_mask);
      x1 = z_new;
      x2 = y_new;
    }
    h1 = from_tokens(x1);
    h2 = from_tokens(x2);
  }

  void build() {
    int S = cfg_.n_stages();
    int cl = cfg_.latent_channels();
    time_w1_ = tensor({cfg_.time_dim, cfg_.time_hidden});
    time_b1_ = tensor({cfg_.time_hidden});
    time_w2_ = tensor({cfg_.time_hidden, cfg_.time_hidden});
    time_b2_ = tensor({cfg_.time_hidden});
    conv_in_ = modeldetail::conv_params(cfg_.width(0), cl, 3);
    enc_res_.resize(static_cast<size_t>(S));
    enc_attn_.resize(static_cast<size_t>(S));
    down_.resize(static_cast<size_t>(S));
    dec_res_.resize(static_cast<size_t>(S));
    dec_attn_.resize(static_cast<size_t>(S));
    up_.resize(static_cast<size_t>(S));
    for (int d = 0; d < S; ++d) {
      enc_res_[static_cast<size_t>(d)] =
          modeldetail::res_block_params(cfg_.width(d), cfg_.width(d), cfg_.time_hidden);
      if (cfg_.attn_at(d))
        enc_attn_[static_cast<size_t>(d)] = modeldetail::attn_stage_params(
            cfg_.width(d), cfg_.heads, cfg_.text_dim, cfg_.jca_at(d));
      down_[static_cast<size_t>(d)] =
          modeldetail::conv_params(cfg_.width(d + 1), cfg_.width(d), 3);
    }
    mid_res_a_ = modeldetail::res_block_params(cfg_.width(S), cfg_.width(S), cfg_.time_hidden);
    mid_res_b_ = modeldetail::res_block_params(cfg_.width(S), cfg_.width(S), cfg_.time_hidden);
    if (cfg_.attn_at(S))
      mid_attn_ = modeldetail::attn_stage_params(cfg_.width(S), cfg_.heads, cfg_.text_dim,
                                                 cfg_.jca_at(S));
    for (int d = S - 1; d >= 0; --d) {
      up_[static_cast<size_t>(d)] =
          modeldetail::conv_params(cfg_.width(d), cfg_.width(d + 1), 3);
      dec_res_[static_cast<size_t>(d)] =
          modeldetail::res_block_params(2 * cfg_.width(d), cfg_.width(d), cfg_.time_hidden);
      if (cfg_.attn_at(d))
        dec_attn_[static_cast<size_t>(d)] = modeldetail::attn_stage_params(
            cfg_.width(d), cfg_.heads, cfg_.text_dim, cfg_.jca_at(d));
    }
    out_gn_g_ = tensor({cfg_.width(0)});
    out_gn_b_ = tensor({cfg_.width(0)});
    out_conv_ = modeldetail::conv_params(cl, cfg_.width(0), 3);
    null_x_ = tensor({prompt_embedder::seq_len, cfg_.text_dim});
    null_m_ = tensor({prompt_embedder::seq_len, cfg_.text_dim});
    build_registry();
  }

  void register_param(const std::string& name, tensor& t) {
    t.set_requires_grad(true);
    registry_.push_back({name, t});
  }

  void register_res(const std::string& prefix, modeldetail::res_block_params& rb) {
    register_param(prefix + ".gn1_g", rb.gn1_g);
    register_param(prefix + ".gn1_b", rb.gn1_b);
    register_param(prefix + ".conv1.w", rb.conv1_w);
    register_param(prefix + ".conv1.b", rb.conv1_b);
    register_param(prefix + ".time.w", rb.time_w);
    register_param(prefix + ".time.b", rb.time_b);
    register_param(prefix + ".gn2_g", rb.gn2_g);
    register_param(prefix + ".gn2_b", rb.gn2_b);
    register_param(prefix + ".conv2.w", rb.conv2_w);
    register_param(prefix + ".conv2.b", rb.conv2_b);
    if (rb.has_skip) {
      register_param(prefix + ".skip.w", rb.skip_w);
      register_param(prefix + ".skip.b", rb.skip_b);
    }
  }

  void register_attn_block(const std::string& prefix, attention_block& b) {
    register_param(prefix + ".wq", b.wq);
    register_param(prefix + ".wk", b.wk);
    register_param(prefix + ".wv", b.wv);
    register_param(prefix + ".wo", b.wo);
  }

  void register_attn(const std::string& prefix, modeldetail::attn_stage_params& ap) {
    register_param(prefix + ".text.w", ap.text_w);
    register_param(prefix + ".text.b", ap.text_b);
    register_attn_block(prefix + ".text_ca", ap.text_ca);
    register_attn_block(prefix + ".self", ap.self_attn);
    if (ap.has_jca) register_attn_block(prefix + ".jca", ap.jca);
  }

  void build_registry() {
    int S = cfg_.n_stages();
    register_param("time.w1", time_w1_);
    register_param("time.b1", time_b1_);
    register_param("time.w2", time_w2_);
    register_param("time.b2", time_b2_);
    register_param("conv_in.w", conv_in_.w);
    register_param("conv_in.b", conv_in_.b);
    for (int d = 0; d < S; ++d) {
      std::string p = "enc" + std::to_string(d);
      register_res(p + ".res", enc_res_[static_cast<size_t>(d)]);
      if (cfg_.attn_at(d)) register_attn(p + ".attn", enc_attn_[static_cast<size_t>(d)]);
      register_param("down" + std::to_string(d) + ".w", down_[static_cast<size_t>(d)].w);
      register_param("down" + std::to_string(d) + ".b", down_[static_cast<size_t>(d)].b);
    }
    register_res("mid.res_a", mid_res_a_);
    if (cfg_.attn_at(S)) register_attn("mid.attn", mid_attn_);
    register_res("mid.res_b", mid_res_b_);
    for (int d = S - 1; d >= 0; --d) {
      std::string p = "dec" + std::to_string(d);
      register_param("up" + std::to_string(d) + ".w", up_[static_cast<size_t>(d)].w);
      register_param("up" + std::to_string(d) + ".b", up_[static_cast<size_t>(d)].b);
      register_res(p + ".res", dec_res_[static_cast<size_t>(d)]);
      if (cfg_.attn_at(d)) register_attn(p + ".attn", dec_attn_[static_cast<size_t>(d)]);
    }
    register_param("out.gn_g", out_gn_g_);
    register_param("out.gn_b", out_gn_b_);
    register_param("out.conv.w", out_conv_.w);
    register_param("out.conv.b", out_conv_.b);
    register_param("null.e_x", null_x_);
    register_param("null.e_m", null_m_);
  }

  // Per-parameter init keyed by name, so values do not depend on enumeration
  // order. Output-side weights (attention wo, final conv) start at zero;
  // norms start at identity.
  void init_params(uint64_t seed) {
    counter_rng root = counter_rng(seed).stream(rng_streams::param_init);
    for (auto& np : registry_) {
      const std::string& name = np.name;
      auto ends_with = [&](const char* suf) {
        std::string_view s(suf);
        return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
      };
      auto fill_normal = [&](float sigma) {
        counter_rng r = root.stream(fnv1a64(name));
        auto v = np.t.values_mut();
        for (size_t i = 0; i < v.size(); ++i) v[i] = sigma * r.normal(i);
      };
      if (ends_with("gn1_g") || ends_with("gn2_g") || ends_with("gn_g")) {
        std::fill(np.t.values_mut().begin(), np.t.values_mut().end(), 1.0f);
      } else if (ends_with(".b") || ends_with("_b") || ends_with("b1") || ends_with("b2")) {
        // biases and gn offsets stay zero
      } else if (name == "out.conv.w" || ends_with(".wo")) {
        // zero so every residual path starts as identity
      } else if (name == "null.e_x" || name == "null.e_m") {
        fill_normal(1.0f);
      } else if (ends_with(".wq") || ends_with(".wk") || ends_with(".wv")) {
        fill_normal(1.0f / std::sqrt(static_cast<float>(np.t.dim(0))));
      } else if (np.t.rank() == 4) {
        int64_t fan_in = static_cast<int64_t>(np.t.dim(1)) * np.t.dim(2) * np.t.dim(3);
        fill_normal(std::sqrt(2.0f / static_cast<float>(fan_in)));
      } else if (np.t.rank() == 2) {
        fill_normal(1.0f / std::sqrt(static_cast<float>(np.t.dim(0))));
      } else {
        fill_normal(0.02f);
      }
    }
  }

  void build_time_table() {
    int half = cfg_.time_dim / 2;
    time_table_ = tensor({cfg_.schedule_T + 1, cfg_.time_dim});
    auto v = time_table_.values_mut();
    for (int t = 0; t <= cfg_.schedule_T; ++t)
      for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
        v[static_cast<int64_t>(t) * cfg_.time_dim + 2 * i] =
            static_cast<float>(std::sin(t * freq));
        v[static_cast<int64_t>(t) * cfg_.time_dim + 2 * i + 1] =
            static_cast<float>(std::cos(t * freq));
      }
  }

  model_config cfg_;
  prompt_embedder embedder_;
  tensor time_table_;  // frozen [T+1, time_dim]

  tensor time_w1_, time_b1_, time_w2_, time_b2_;
  modeldetail::conv_params conv_in_;
  std::vector<modeldetail::res_block_params> enc_res_, dec_res_;
  std::vector<modeldetail::attn_stage_params> enc_attn_, dec_attn_;
  std::vector<modeldetail::conv_params> down_, up_;
  modeldetail::res_block_params mid_res_a_, mid_res_b_;
  modeldetail::attn_stage_params mid_attn_;
  tensor out_gn_g_, out_gn_b_;
  modeldetail::conv_params out_conv_;
  tensor null_x_, null_m_;

  std::vector<named_param> registry_;
};

}  // namespace duodiff
