#pragma once

// AdamW with decoupled weight decay: the decay shrinks the parameter directly
// (p *= 1 - lr*wd) before the bias-corrected Adam update is applied, so decay
// never flows through the moment estimates.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "duodiff/tensor.hpp"

namespace duodiff {

struct adamw_config {
  float lr = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;
};

class adamw {
 public:
  adamw(adamw_config cfg, std::vector<tensor> params) : cfg_(cfg), params_(std::move(params)) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const tensor& p : params_) {
      m_.emplace_back(static_cast<size_t>(p.size()), 0.0f);
      v_.emplace_back(static_cast<size_t>(p.size()), 0.0f);
    }
  }

  int64_t step_count() const { return t_; }
  const adamw_config& config() const { return cfg_; }
  size_t param_count() const { return params_.size(); }

  // Moment access for checkpointing.
  const std::vector<float>& moment1(size_t i) const { return m_[i]; }
  const std::vector<float>& moment2(size_t i) const { return v_[i]; }
  std::vector<float>& moment1(size_t i) { return m_[i]; }
  std::vector<float>& moment2(size_t i) { return v_[i]; }
  void set_step_count(int64_t t) { t_ = t; }

  // Applies one update from the gradients currently stored on the params.
  // A parameter without a gradient is treated as having a zero gradient (its
  // moments still decay and weight decay still applies) so params that do not
  // take part in every step stay well-defined. Non-finite gradients abort.
  void step() {
    ++t_;
    float bc1 = 1.0f - std::pow(cfg_.beta1, static_cast<float>(t_));
    float bc2 = 1.0f - std::pow(cfg_.beta2, static_cast<float>(t_));
    for (size_t pi = 0; pi < params_.size(); ++pi) {
      tensor& p = params_[pi];
      bool has_g = p.has_grad();
      auto pv = p.values_mut();
      auto g = has_g ? p.grad() : std::span<const float>();
      auto& m = m_[pi];
      auto& v = v_[pi];
      for (size_t i = 0; i < pv.size(); ++i) {
        float gi = has_g ? g[i] : 0.0f;
        if (!std::isfinite(gi))
          throw std::runtime_error("adamw: non-finite gradient in parameter " +
                                   std::to_string(pi));
        if (cfg_.weight_decay != 0.0f) pv[i] *= 1.0f - cfg_.lr * cfg_.weight_decay;
        m[i] = cfg_.beta1 * m[i] + (1.0f - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0f - cfg_.beta2) * gi * gi;
        float mhat = m[i] / bc1;
        float vhat = v[i] / bc2;
        pv[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  void zero_grad() {
    for (tensor& p : params_) p.zero_grad();
  }

 private:
  adamw_config cfg_;
  std::vector<tensor> params_;
  std::vector<std::vector<float>> m_, v_;
  int64_t t_ = 0;
};

}  // namespace duodiff
