#pragma once

// Latent codec between pixel space ([0,1]) and diffusion space ([-1,1]).
// "identity": rescale only. "patchify": rescale plus space-to-depth by 2,
// trading spatial size for channels so attention runs on fewer tokens.

#include <algorithm>
#include <stdexcept>
#include <string>

#include "duodiff/tensor.hpp"
#include "duodiff/util.hpp"

namespace duodiff {

enum class codec_kind { identity, patchify };

inline codec_kind codec_from_string(const std::string& s) {
  if (s == "identity") return codec_kind::identity;
  if (s == "patchify") return codec_kind::patchify;
  throw config_error("unknown codec '" + s + "'; expected identity or patchify");
}

inline const char* codec_to_string(codec_kind k) {
  return k == codec_kind::identity ? "identity" : "patchify";
}

class latent_codec {
 public:
  explicit latent_codec(codec_kind kind) : kind_(kind) {}

  codec_kind kind() const { return kind_; }

  int latent_channels(int image_channels) const {
    return kind_ == codec_kind::identity ? image_channels : 4 * image_channels;
  }
  int latent_size(int image_size) const {
    return kind_ == codec_kind::identity ? image_size : image_size / 2;
  }

  // [c,h,w] in [0,1] -> latent in [-1,1].
  tensor encode(const tensor& image) const {
    if (image.rank() != 3)
      throw std::invalid_argument("codec encode: expected [c,h,w], got " +
                                  shape_str(image.shape()));
    for (float v : image.values())
      if (v < -1e-6f || v > 1.0f + 1e-6f)
        throw std::invalid_argument("codec encode: input outside [0,1]");
    int c = image.dim(0), h = image.dim(1), w = image.dim(2);
    tensor scaled({c, h, w});
    {
      auto iv = image.values();
      auto sv = scaled.values_mut();
      for (int64_t i = 0; i < image.size(); ++i) sv[i] = 2.0f * iv[i] - 1.0f;
    }
    if (kind_ == codec_kind::identity) return scaled;
    if (h % 2 != 0 || w % 2 != 0)
      throw std::invalid_argument("codec encode: patchify needs even spatial dims, got " +
                                  shape_str(image.shape()));
    return space_to_depth(scaled);
  }

  // Inverse of encode with clamping of out-of-range latents to [-1,1].
  tensor decode(const tensor& latent) const {
    if (latent.rank() != 3)
      throw std::invalid_argument("codec decode: expected [c,h,w], got " +
                                  shape_str(latent.shape()));
    tensor spatial = latent;
    if (kind_ == codec_kind::patchify) {
      if (latent.dim(0) % 4 != 0)
        throw std::invalid_argument("codec decode: patchify latent needs 4k channels, got " +
                                    shape_str(latent.shape()));
      spatial = depth_to_space(latent);
    }
    tensor out(spatial.shape());
    auto sv = spatial.values();
    auto ov = out.values_mut();
    for (int64_t i = 0; i < spatial.size(); ++i) {
      float v = std::min(1.0f, std::max(-1.0f, sv[i]));
      ov[i] = 0.5f * (v + 1.0f);
    }
    return out;
  }

 private:
  // [c,h,w] -> [4c,h/2,w/2]; output channel (c*4 + 2*dy + dx) holds the
  // (dy,dx) phase of input channel c.
  static tensor space_to_depth(const tensor& x) {
    int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    tensor out({4 * c, h / 2, w / 2});
    auto xv = x.values();
    auto ov = out.values_mut();
    int ho = h / 2, wo = w / 2;
    for (int ci = 0; ci < c; ++ci)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          int co = ci * 4 + dy * 2 + dx;
          for (int i = 0; i < ho; ++i)
            for (int j = 0; j < wo; ++j)
              ov[(static_cast<int64_t>(co) * ho + i) * wo + j] =
                  xv[(static_cast<int64_t>(ci) * h + 2 * i + dy) * w + 2 * j + dx];
        }
    return out;
  }

  static tensor depth_to_space(const tensor& x) {
    int c4 = x.dim(0), ho = x.dim(1), wo = x.dim(2);
    int c = c4 / 4, h = 2 * ho, w = 2 * wo;
    tensor out({c, h, w});
    auto xv = x.values();
    auto ov = out.values_mut();
    for (int ci = 0; ci < c; ++ci)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          int co = ci * 4 + dy * 2 + dx;
          for (int i = 0; i < ho; ++i)
            for (int j = 0; j < wo; ++j)
              ov[(static_cast<int64_t>(ci) * h + 2 * i + dy) * w + 2 * j + dx] =
                  xv[(static_cast<int64_t>(co) * ho + i) * wo + j];
        }
    return out;
  }

  codec_kind kind_;
};

}  // namespace duodiff
