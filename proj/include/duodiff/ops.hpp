#pragma once

// Differentiable ops. Each op computes values eagerly, verifies the output is
// finite, and (when the tape is recording and an input requires grad) appends
// a node whose closure accumulates input gradients from the output gradient.
// Matrix products and convolution inner loops are backed by Eigen.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "duodiff/tape.hpp"
#include "duodiff/tensor.hpp"

namespace duodiff::ops {

using emat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using emat_map = Eigen::Map<emat>;
using emat_cmap = Eigen::Map<const emat>;

namespace detail {

inline std::span<float> grad_of(const std::shared_ptr<tensor_storage>& s) {
  if (s->grad.empty()) s->grad.assign(s->values.size(), 0.0f);
  return s->grad;
}

inline bool wants_grad(const std::shared_ptr<tensor_storage>& s) {
  return s->requires_grad;
}

[[noreturn]] inline void shape_error(const char* op, const tensor& a, const tensor& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                              shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

// Broadcast classes for elementwise binary ops: identical shapes, scalar
// second operand, or equal-rank second operand whose leading dims match and
// trailing dims are 1 (e.g. [N,C,1,1] against [N,C,H,W]).
enum class bcast { same, scalar, trailing };

inline bcast bcast_kind(const char* op, const tensor& a, const tensor& b) {
  if (a.shape() == b.shape()) return bcast::same;
  if (b.size() == 1) return bcast::scalar;
  if (b.rank() == a.rank()) {
    size_t i = 0;
    const auto& as = a.shape();
    const auto& bs = b.shape();
    while (i < as.size() && bs[i] == as[i]) ++i;
    size_t j = i;
    while (j < as.size() && bs[j] == 1) ++j;
    if (j == as.size() && i > 0) return bcast::trailing;
  }
  shape_error(op, a, b);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

namespace detail {

template <typename Fwd>
tensor ewise_binary(tape& tp, const char* op, const tensor& a, const tensor& b, Fwd f,
                    float da_coef, bool db_times_a) {
  bcast k = bcast_kind(op, a, b);
  int64_t n = a.size();
  int64_t inner = k == bcast::trailing ? n / b.size() : (k == bcast::scalar ? n : 1);

  tensor out(a.shape());
  {
    auto av = a.values();
    auto bv = b.values();
    auto ov = out.values_mut();
    switch (k) {
      case bcast::same:
        for (int64_t i = 0; i < n; ++i) ov[i] = f(av[i], bv[i]);
        break;
      case bcast::scalar:
        for (int64_t i = 0; i < n; ++i) ov[i] = f(av[i], bv[0]);
        break;
      case bcast::trailing:
        for (int64_t i = 0; i < n; ++i) ov[i] = f(av[i], bv[i / inner]);
        break;
    }
  }
  tp.check_finite(op, out);

  if (tp.wants(a, b)) {
    auto sa = a.storage();
    auto sb = b.storage();
    auto so = out.storage();
    tp.record(op, {a, b}, out, [=]() {
      const auto& g = so->grad;
      if (wants_grad(sa)) {
        auto ga = grad_of(sa);
        if (db_times_a) {  // mul: da = g * b
          switch (k) {
            case bcast::same:
              for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * sb->values[i];
              break;
            case bcast::scalar:
              for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * sb->values[0];
              break;
            case bcast::trailing:
              for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * sb->values[i / inner];
              break;
          }
        } else {
          for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
        }
      }
      if (wants_grad(sb)) {
        auto gb = grad_of(sb);
        auto term = [&](int64_t i) {
          return db_times_a ? g[i] * sa->values[i] : da_coef * g[i];
        };
        switch (k) {
          case bcast::same:
            for (int64_t i = 0; i < n; ++i) gb[i] += term(i);
            break;
          case bcast::scalar:
            for (int64_t i = 0; i < n; ++i) gb[0] += term(i);
            break;
          case bcast::trailing:
            for (int64_t i = 0; i < n; ++i) gb[i / inner] += term(i);
            break;
        }
      }
    });
  }
  return out;
}

}  // namespace detail

inline tensor add(tape& tp, const tensor& a, const tensor& b) {
  return detail::ewise_binary(tp, "add", a, b, [](float x, float y) { return x + y; },
                              1.0f, false);
}

inline tensor sub(tape& tp, const tensor& a, const tensor& b) {
  return detail::ewise_binary(tp, "sub", a, b, [](float x, float y) { return x - y; },
                              -1.0f, false);
}

inline tensor mul(tape& tp, const tensor& a, const tensor& b) {
  return detail::ewise_binary(tp, "mul", a, b, [](float x, float y) { return x * y; },
                              0.0f, true);
}

inline tensor scale(tape& tp, const tensor& a, float s) {
  int64_t n = a.size();
  tensor out(a.shape());
  auto av = a.values();
  auto ov = out.values_mut();
  for (int64_t i = 0; i < n; ++i) ov[i] = av[i] * s;
  tp.check_finite("scale", out);
  if (tp.wants(a)) {
    auto sa = a.storage();
    auto so = out.storage();
    tp.record("scale", {a}, out, [=]() {
      auto ga = detail::grad_of(sa);
      for (int64_t i = 0; i < n; ++i) ga[i] += s * so->grad[i];
    });
  }
  return out;
}

inline tensor abs(tape& tp, const tensor& a) {
  int64_t n = a.size();
  tensor out(a.shape());
  auto av = a.values();
  auto ov = out.values_mut();
  for (int64_t i = 0; i < n; ++i) ov[i] = std::fabs(av[i]);
  tp.check_finite("abs", out);
  if (tp.wants(a)) {
    auto sa = a.storage();
    auto so = out.storage();
    tp.record("abs", {a}, out, [=]() {
      auto ga = detail::grad_of(sa);
      for (int64_t i = 0; i < n; ++i) {
        float x = sa->values[i];
        float sign = x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f);
        ga[i] += sign * so->grad[i];
      }
    });
  }
  return out;
}

inline tensor square(tape& tp, const tensor& a) {
  int64_t n = a.size();
  tensor out(a.shape());
  auto av = a.values();
  auto ov = out.values_mut();
  for (int64_t i = 0; i < n; ++i) ov[i] = av[i] * av[i];
  tp.check_finite("square", out);
  if (tp.wants(a)) {
    auto sa = a.storage();
    auto so = out.storage();
    tp.record("square", {a}, out, [=]() {
      auto ga = detail::grad_of(sa);
      for (int64_t i = 0; i < n; ++i) ga[i] += 2.0f * sa->values[i] * so->grad[i];
    });
  }
  return out;
}

inline tensor mean(tape& tp, const tensor& a) {
  int64_t n = a.size();
  double acc = 0.0;
  for (float v : a.values()) acc += v;
  tensor out = tensor::scalar(static_cast<float>(acc / static_cast<double>(n)));
  tp.check_finite("mean", out);
  if (tp.wants(a)) {
    auto sa = a.storage();
    auto so = out.storage();
    tp.record("mean", {a}, out, [=]() {
      auto ga = detail::grad_of(sa);
      float g = so->grad[0] / static_cast<float>(n);
      for (int64_t i = 0; i < n; ++i) ga[i] += g;
    });
  }
  return out;
}

// Mean over the last axis: [..., k] -> [...].
inline tensor mean_last(tape& tp, const tensor& a) {
  if (a.rank() < 2) throw std::invalid_argument("mean_last: rank < 2");
  int64_t cols = a.dim(a.rank() - 1);
  int64_t rows = a.size() / cols;
  shape_t os(a.shape().begin(), a.shape().end() - 1);
  tensor out(os);
  auto av = a.values();
  auto ov = out.values_mut();
  for (int64_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int64_t c = 0; c < cols; ++c) acc += av[r * cols + c];
    ov[r] = static_cast<float>(acc / static_cast<double>(cols));
  }
  tp.check_finite("mean_last", out);
  if (tp.wants(a)) {
    auto sa = a.storage();
    auto so = out.storage();
    tp.record("mean_last", {a}, out, [=]() {
      auto ga = detail::grad_of(sa);
      float inv = 1.0f / static_cast<float>(cols);
      for (int64_t r = 0; r < rows; ++r) {
        float g = so->grad[r] * inv;
        for (int64_t c = 0; c < cols; ++c) ga[r * cols + c] += g;
      }
    });
  }
  return out;
}

// Max over the last axis: [..., k] -> [...]. Gradient routes to the first
// maximal element of each row.
inline tensor max_last(tape& tp, const tensor& a) {
  if (a.rank() < 2) throw std::invalid_argument("max_last: rank < 2");
  int64_t cols = a.dim(a.rank() - 1);
  int64_t rows = a.size() / cols;
  shape_t os(a.shape().begin(), a.shape().end() - 1);
  tensor out(os);
  std::vector<int64_t> argmax(static_cast<size_t>(rows));
  auto av = a.values();
  auto ov = out.values_mut();
  for (int64_t r = 0; r < rows; ++r) {
    int64_t best = 0;
    for (int64_t c = 1; c < cols; ++c)
      if (av[r * cols + c] > av[r * cols + best]) best = c;
    argmax[static_cast<size_t>(r)] = best;
    ov[r] = av[r * cols + best];
  }
  tp.check_finite("max_last", out);
  if (tp.wants(a)) {
    auto sa = a.storage();
    auto so = out.storage();
    tp.record("max_last", {a}, out, [=, am = std::move(argmax)]() {
      auto ga = detail::grad_of(sa);
      for (int64_t r = 0; r < rows; ++r)
        ga[r * cols + am[static_cast<size_t>(r)]] += so->grad[r];
    });
  }
  return out;
}

inline tensor silu(tape& tp, const tensor& a) {
  int64_t n = a.size();
  tensor out(a.shape());
  auto av = a.values();
  auto ov = out.values_mut();
  for (int64_t i = 0; i < n; ++i) {
    float s = 1.0f / (1.0f + std::exp(-av[i]));
    ov[i] = av[i] * s;
  }
  tp.check_finite("silu", out);
  if (tp.wants(a)) {
    auto sa = a.storage();
    auto so = out.storage();
    tp.record("silu", {a}, out, [=]() {
      auto ga = detail::grad_of(sa);
      for (int64_t i = 0; i < n; ++i) {
        float x = sa->values[i];
        float s = 1.0f / (1.0f + std::exp(-x));
        ga[i] += s * (1.0f + x * (1.0f - s)) * so->grad[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax family (last axis)

namespace detail {

inline std::pair<int64_t, int64_t> rows_cols_last(const tensor& a) {
  int64_t cols = a.dim(a.rank() - 1);
  return {a.size() / cols, cols};
}

}  // namespace detail

inline tensor softmax_last(tape& tp, const tensor& a) {
  auto [rows, cols] = detail::rows_cols_last(a);
  tensor out(a.shape());
  auto av = a.values();
  auto ov = out.values_mut();
  for (int64_t r = 0; r < rows; ++r) {
    const float* x = av.data() + r * cols;
    float* y = ov.data() + r * cols;
    float m = *std::max_element(x, x + cols);
    double z = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - m);
      z += y[c];
    }
    float inv = static_cast<float>(1.0 / z);
    for (int64_t c = 0; c < cols; ++c) y[c] *= inv;
  }
  tp.check_finite("softmax_last", out);
  if (tp.wants(a)) {
    auto sa = a.storage();
    auto so = out.storage();
    tp.record("softmax_last", {a}, out, [=]() {
      auto ga = detail::grad_of(sa);
      for (int64_t r = 0; r < rows; ++r) {
        const float* y = so->values.data() + r * cols;
        const float* g = so->grad.data() + r * cols;
        double dot = 0.0;
        for (int64_t c = 0; c < cols; ++c) dot += static_cast<double>(g[c]) * y[c];
        for (int64_t c = 0; c < cols; ++c)
          ga[r * cols + c] += y[c] * (g[c] - static_cast<float>(dot));
      }
    });
  }
  return out;
}

inline tensor log_softmax_last(tape& tp, const tensor& a) {
  auto [rows, cols] = detail::rows_cols_last(a);
  tensor out(a.shape());
  auto av = a.values();
  auto ov = out.values_mut();
  for (int64_t r = 0; r < rows; ++r) {
    const float* x = av.data() + r * cols;
    float* y = ov.data() + r * cols;
    float m = *std::max_element(x, x + cols);
    double z = 0.0;
    for (int64_t c = 0; c < cols; ++c) z += std::exp(static_cast<double>(x[c]) - m);
    float lz = m + static_cast<float>(std::log(z));
    for (int64_t c = 0; c < cols; ++c) y[c] = x[c] - lz;
  }
  tp.check_finite("log_softmax_last", out);
  if (tp.wants(a)) {
    auto sa = a.storage();
    auto so = out.storage();
    tp.record("log_softmax_last", {a}, out, [=]() {
      auto ga = detail::grad_of(sa);
      for (int64_t r = 0; r < rows; ++r) {
        const float* y = so->values.data() + r * cols;
        const float* g = so->grad.data() + r * cols;
        double gsum = 0.0;
        for (int64_t c = 0; c < cols; ++c) gsum += g[c];
        for (int64_t c = 0; c < cols; ++c)
          ga[r * cols + c] += g[c] - std::exp(y[c]) * static_cast<float>(gsum);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape ops

inline tensor reshape(tape& tp, const tensor& a, shape_t s) {
  if (shape_numel(s) != a.size())
    throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " to " + shape_str(s));
  tensor out(std::move(s), std::vector<float>(a.values().begin(), a.values().end()));
  if (tp.wants(a)) {
    auto sa = a.storage();
    auto so = out.storage();
    tp.record("reshape", {a}, out, [=]() {
      auto ga = detail::grad_of(sa);
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += so->grad[i];
    });
  }
  return out;
}

// [..., X, Y] -> [..., Y, X]
inline tensor transpose_last2(tape& tp, const tensor& a) {
  if (a.rank() < 2) throw std::invalid_argument("transpose_last2: rank < 2");
  shape_t s = a.shape();
  int64_t y = s[s.size() - 1], x = s[s.size() - 2];
  std::swap(s[s.size() - 1], s[s.size() - 2]);
  int64_t batch = a.size() / (x * y);
  tensor out(s);
  auto av = a.values();
  auto ov = out.values_mut();
  for (int64_t b = 0; b < batch; ++b) {
    const float* in = av.data() + b * x * y;
    float* o = ov.data() + b * x * y;
    for (int64_t i = 0; i < x; ++i)
      for (int64_t j = 0; j < y; ++j) o[j * x + i] = in[i * y + j];
  }
  if (tp.wants(a)) {
    auto sa = a.storage();
    auto so = out.storage();
    tp.record("transpose_last2", {a}, out, [=]() {
      auto ga = detail::grad_of(sa);
      for (int64_t b = 0; b < batch; ++b) {
        const float* g = so->grad.data() + b * x * y;
        float* d = ga.data() + b * x * y;
        for (int64_t i = 0; i < x; ++i)
          for (int64_t j = 0; j < y; ++j) d[i * y + j] += g[j * x + i];
      }
    });
  }
  return out;
}

// Concatenate along an axis; all parts must agree on every other dim.
inline tensor concat(tape& tp, std::span<const tensor> parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const shape_t& s0 = parts[0].shape();
  if (axis < 0 || axis >= static_cast<int>(s0.size()))
    throw std::invalid_argument("concat: bad axis " + std::to_string(axis));
  shape_t os = s0;
  int axis_total = 0;
  for (const tensor& p : parts) {
    if (p.rank() != static_cast<int>(s0.size()))
      throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < p.rank(); ++i)
      if (i != axis && p.dim(i) != s0[static_cast<size_t>(i)])
        throw std::invalid_argument("concat: dim mismatch at axis " + std::to_string(i));
    axis_total += p.dim(axis);
  }
  os[static_cast<size_t>(axis)] = axis_total;

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s0.size(); ++i) inner *= s0[i];

  tensor out(os);
  auto ov = out.values_mut();
  int64_t off = 0;  // offset within the axis
  std::vector<int64_t> part_off(parts.size());
  for (size_t pi = 0; pi < parts.size(); ++pi) {
    part_off[pi] = off;
    int64_t len = parts[pi].dim(axis) * inner;
    auto pv = parts[pi].values();
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(pv.data() + o * len, len,
                  ov.data() + o * axis_total * inner + off * inner);
    off += parts[pi].dim(axis);
  }

  bool any = false;
  for (const tensor& p : parts) any = any || p.requires_grad();
  if (tp.recording() && any) {
    std::vector<tensor> ins(parts.begin(), parts.end());
    std::vector<std::shared_ptr<tensor_storage>> stores;
    for (const tensor& p : parts) stores.push_back(p.storage());
    std::vector<int> axis_dims;
    for (const tensor& p : parts) axis_dims.push_back(p.dim(axis));
    auto so = out.storage();
    tp.record("concat", std::move(ins), out, [=]() {
      for (size_t pi = 0; pi < stores.size(); ++pi) {
        if (!detail::wants_grad(stores[pi])) continue;
        auto gp = detail::grad_of(stores[pi]);
        int64_t len = axis_dims[pi] * inner;
        for (int64_t o = 0; o < outer; ++o) {
          const float* g = so->grad.data() + o * axis_total * inner + part_off[pi] * inner;
          float* d = gp.data() + o * len;
          for (int64_t i = 0; i < len; ++i) d[i] += g[i];
        }
      }
    });
  }
  return out;
}

inline tensor concat(tape& tp, const tensor& a, const tensor& b, int axis) {
  tensor parts[2] = {a, b};
  return concat(tp, std::span<const tensor>(parts, 2), axis);
}

// Stack same-shaped parts along a new leading axis: n x [s...] -> [n, s...].
inline tensor stack(tape& tp, std::span<const tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("stack: no inputs");
  const shape_t& s0 = parts[0].shape();
  for (const tensor& p : parts)
    if (p.shape() != s0) throw std::invalid_argument("stack: shape mismatch");
  shape_t os;
  os.push_back(static_cast<int>(parts.size()));
  os.insert(os.end(), s0.begin(), s0.end());
  int64_t sz = parts[0].size();
  tensor out(os);
  auto ov = out.values_mut();
  for (size_t pi = 0; pi < parts.size(); ++pi)
    std::copy_n(parts[pi].values().data(), sz, ov.data() + static_cast<int64_t>(pi) * sz);

  bool any = false;
  for (const tensor& p : parts) any = any || p.requires_grad();
  if (tp.recording() && any) {
    std::vector<tensor> ins(parts.begin(), parts.end());
    std::vector<std::shared_ptr<tensor_storage>> stores;
    for (const tensor& p : parts) stores.push_back(p.storage());
    auto so = out.storage();
    tp.record("stack", std::move(ins), out, [=]() {
      for (size_t pi = 0; pi < stores.size(); ++pi) {
        if (!detail::wants_grad(stores[pi])) continue;
        auto gp = detail::grad_of(stores[pi]);
        const float* g = so->grad.data() + static_cast<int64_t>(pi) * sz;
        for (int64_t i = 0; i < sz; ++i) gp[i] += g[i];
      }
    });
  }
  return out;
}

// [B, T, C] -> [B*heads, T, C/heads]
inline tensor split_heads(tape& tp, const tensor& a, int heads) {
  if (a.rank() != 3) throw std::invalid_argument("split_heads: need rank 3");
  int B = a.dim(0), T = a.dim(1), C = a.dim(2);
  if (C % heads != 0)
    throw std::invalid_argument("split_heads: channels " + std::to_string(C) +
                                " not divisible by heads " + std::to_string(heads));
  int dh = C / heads;
  tensor out({B * heads, T, dh});
  auto av = a.values();
  auto ov = out.values_mut();
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < T; ++t)
      for (int h = 0; h < heads; ++h)
        std::copy_n(av.data() + (static_cast<int64_t>(b) * T + t) * C + h * dh, dh,
                    ov.data() + ((static_cast<int64_t>(b) * heads + h) * T + t) * dh);
  if (tp.wants(a)) {
    auto sa = a.storage();
    auto so = out.storage();
    tp.record("split_heads", {a}, out, [=]() {
      auto ga = detail::grad_of(sa);
      for (int b = 0; b < B; ++b)
        for (int t = 0; t < T; ++t)
          for (int h = 0; h < heads; ++h) {
            const float* g = so->grad.data() + ((static_cast<int64_t>(b) * heads + h) * T + t) * dh;
            float* d = ga.data() + (static_cast<int64_t>(b) * T + t) * C + h * dh;
            for (int i = 0; i < dh; ++i) d[i] += g[i];
          }
    });
  }
  return out;
}

// [B*heads, T, dh] -> [B, T, heads*dh]
inline tensor merge_heads(tape& tp, const tensor& a, int heads) {
  if (a.rank() != 3) throw std::invalid_argument("merge_heads: need rank 3");
  if (a.dim(0) % heads != 0) throw std::invalid_argument("merge_heads: bad batch");
  int B = a.dim(0) / heads, T = a.dim(1), dh = a.dim(2);
  int C = heads * dh;
  tensor out({B, T, C});
  auto av = a.values();
  auto ov = out.values_mut();
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < T; ++t)
      for (int h = 0; h < heads; ++h)
        std::copy_n(av.data() + ((static_cast<int64_t>(b) * heads + h) * T + t) * dh, dh,
                    ov.data() + (static_cast<int64_t>(b) * T + t) * C + h * dh);
  if (tp.wants(a)) {
    auto sa = a.storage();
    auto so = out.storage();
    tp.record("merge_heads", {a}, out, [=]() {
      auto ga = detail::grad_of(sa);
      for (int b = 0; b < B; ++b)
        for (int t = 0; t < T; ++t)
          for (int h = 0; h < heads; ++h) {
            const float* g = so->grad.data() + (static_cast<int64_t>(b) * T + t) * C + h * dh;
            float* d = ga.data() + ((static_cast<int64_t>(b) * heads + h) * T + t) * dh;
            for (int i = 0; i < dh; ++i) d[i] += g[i];
          }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear algebra

// [m,k] x [k,n] -> [m,n]
inline tensor matmul(tape& tp, const tensor& a, const tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    detail::shape_error("matmul", a, b);
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  tensor out({m, n});
  {
    emat_cmap A(a.values().data(), m, k), B(b.values().data(), k, n);
    emat_map O(out.values_mut().data(), m, n);
    O.noalias() = A * B;
  }
  tp.check_finite("matmul", out);
  if (tp.wants(a, b)) {
    auto sa = a.storage();
    auto sb = b.storage();
    auto so = out.storage();
    tp.record("matmul", {a, b}, out, [=]() {
      emat_cmap G(so->grad.data(), m, n);
      emat_cmap A(sa->values.data(), m, k), B(sb->values.data(), k, n);
      if (detail::wants_grad(sa)) {
        emat_map GA(detail::grad_of(sa).data(), m, k);
        GA.noalias() += G * B.transpose();
      }
      if (detail::wants_grad(sb)) {
        emat_map GB(detail::grad_of(sb).data(), k, n);
        GB.noalias() += A.transpose() * G;
      }
    });
  }
  return out;
}

// x [..., k] x w [k, n] (+ b [n]) -> [..., n]; leading dims are batch rows.
inline tensor linear(tape& tp, const tensor& x, const tensor& w, const tensor& b = {}) {
  if (w.rank() != 2 || x.dim(x.rank() - 1) != w.dim(0)) detail::shape_error("linear", x, w);
  int k = w.dim(0), n = w.dim(1);
  int64_t rows = x.size() / k;
  if (b.defined() && (b.rank() != 1 || b.dim(0) != n)) detail::shape_error("linear", x, b);
  shape_t os = x.shape();
  os.back() = n;
  tensor out(os);
  {
    emat_cmap X(x.values().data(), rows, k), W(w.values().data(), k, n);
    emat_map O(out.values_mut().data(), rows, n);
    O.noalias() = X * W;
    if (b.defined()) O.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(b.values().data(), n);
  }
  tp.check_finite("linear", out);

  bool track = b.defined() ? tp.wants(x, w, b) : tp.wants(x, w);
  if (track) {
    auto sx = x.storage();
    auto sw = w.storage();
    auto so = out.storage();
    auto sb = b.defined() ? b.storage() : nullptr;
    std::vector<tensor> ins = b.defined() ? std::vector<tensor>{x, w, b}
                                          : std::vector<tensor>{x, w};
    tp.record("linear", std::move(ins), out, [=]() {
      emat_cmap G(so->grad.data(), rows, n);
      emat_cmap X(sx->values.data(), rows, k), W(sw->values.data(), k, n);
      if (detail::wants_grad(sx)) {
        emat_map GX(detail::grad_of(sx).data(), rows, k);
        GX.noalias() += G * W.transpose();
      }
      if (detail::wants_grad(sw)) {
        emat_map GW(detail::grad_of(sw).data(), k, n);
        GW.noalias() += X.transpose() * G;
      }
      if (sb && detail::wants_grad(sb)) {
        Eigen::Map<Eigen::RowVectorXf> GB(detail::grad_of(sb).data(), n);
        GB += G.colwise().sum();
      }
    });
  }
  return out;
}

// Batched matmul: a [B,m,k] x b [B,k,n] -> [B,m,n].
// With transpose_b: a [B,m,k] x b [B,n,k] -> [B,m,n].
inline tensor bmm(tape& tp, const tensor& a, const tensor& b, bool transpose_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
    detail::shape_error("bmm", a, b);
  int B = a.dim(0), m = a.dim(1), k = a.dim(2);
  int n = transpose_b ? b.dim(1) : b.dim(2);
  int bk = transpose_b ? b.dim(2) : b.dim(1);
  if (bk != k) detail::shape_error("bmm", a, b);
  tensor out({B, m, n});
  {
    auto av = a.values();
    auto bv = b.values();
    auto ov = out.values_mut();
    for (int i = 0; i < B; ++i) {
      emat_cmap A(av.data() + static_cast<int64_t>(i) * m * k, m, k);
      emat_map O(ov.data() + static_cast<int64_t>(i) * m * n, m, n);
      if (transpose_b) {
        emat_cmap Bm(bv.data() + static_cast<int64_t>(i) * n * k, n, k);
        O.noalias() = A * Bm.transpose();
      } else {
        emat_cmap Bm(bv.data() + static_cast<int64_t>(i) * k * n, k, n);
        O.noalias() = A * Bm;
      }
    }
  }
  tp.check_finite("bmm", out);
  if (tp.wants(a, b)) {
    auto sa = a.storage();
    auto sb = b.storage();
    auto so = out.storage();
    tp.record("bmm", {a, b}, out, [=]() {
      bool ga_w = detail::wants_grad(sa), gb_w = detail::wants_grad(sb);
      std::span<float> ga = ga_w ? detail::grad_of(sa) : std::span<float>{};
      std::span<float> gb = gb_w ? detail::grad_of(sb) : std::span<float>{};
      for (int i = 0; i < B; ++i) {
        emat_cmap G(so->grad.data() + static_cast<int64_t>(i) * m * n, m, n);
        emat_cmap A(sa->values.data() + static_cast<int64_t>(i) * m * k, m, k);
        if (transpose_b) {
          emat_cmap Bm(sb->values.data() + static_cast<int64_t>(i) * n * k, n, k);
          if (ga_w) {
            emat_map GA(ga.data() + static_cast<int64_t>(i) * m * k, m, k);
            GA.noalias() += G * Bm;
          }
          if (gb_w) {
            emat_map GB(gb.data() + static_cast<int64_t>(i) * n * k, n, k);
            GB.noalias() += G.transpose() * A;
          }
        } else {
          emat_cmap Bm(sb->values.data() + static_cast<int64_t>(i) * k * n, k, n);
          if (ga_w) {
            emat_map GA(ga.data() + static_cast<int64_t>(i) * m * k, m, k);
            GA.noalias() += G * Bm.transpose();
          }
          if (gb_w) {
            emat_map GB(gb.data() + static_cast<int64_t>(i) * k * n, k, n);
            GB.noalias() += A.transpose() * G;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// convolution

namespace detail {

struct conv_dims {
  int N, Ci, H, W, Co, K, stride, pad, Ho, Wo;
  bool batched;  // input had a leading batch dim
};

inline conv_dims conv_check(const tensor& x, const tensor& w, const tensor& b, int stride,
                            int pad) {
  if (w.rank() != 4 || w.dim(2) != w.dim(3))
    throw std::invalid_argument("conv2d: weight must be [Co,Ci,K,K], got " +
                                shape_str(w.shape()));
  if (x.rank() != 3 && x.rank() != 4)
    throw std::invalid_argument("conv2d: input must be [C,H,W] or [N,C,H,W], got " +
                                shape_str(x.shape()));
  if (stride != 1 && stride != 2)
    throw std::invalid_argument("conv2d: stride must be 1 or 2");
  if (pad < 0) throw std::invalid_argument("conv2d: negative padding");
  conv_dims d;
  d.batched = x.rank() == 4;
  d.N = d.batched ? x.dim(0) : 1;
  d.Ci = x.dim(d.batched ? 1 : 0);
  d.H = x.dim(d.batched ? 2 : 1);
  d.W = x.dim(d.batched ? 3 : 2);
  d.Co = w.dim(0);
  d.K = w.dim(2);
  d.stride = stride;
  d.pad = pad;
  if (w.dim(1) != d.Ci) shape_error("conv2d", x, w);
  if (b.defined() && (b.rank() != 1 || b.dim(0) != d.Co)) shape_error("conv2d", x, b);
  d.Ho = (d.H + 2 * pad - d.K) / stride + 1;
  d.Wo = (d.W + 2 * pad - d.K) / stride + 1;
  if (d.Ho <= 0 || d.Wo <= 0)
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  return d;
}

// cols is [Ci*K*K, N*Ho*Wo]; column (n, oy, ox) holds the receptive field.
inline void im2col(const conv_dims& d, const float* x, emat& cols) {
  int64_t hw = static_cast<int64_t>(d.Ho) * d.Wo;
  cols.setZero(static_cast<int64_t>(d.Ci) * d.K * d.K, d.N * hw);
  for (int n = 0; n < d.N; ++n) {
    const float* xs = x + static_cast<int64_t>(n) * d.Ci * d.H * d.W;
    for (int ci = 0; ci < d.Ci; ++ci)
      for (int ki = 0; ki < d.K; ++ki)
        for (int kj = 0; kj < d.K; ++kj) {
          int64_t row = (static_cast<int64_t>(ci) * d.K + ki) * d.K + kj;
          float* crow = cols.data() + row * cols.cols() + static_cast<int64_t>(n) * hw;
          for (int oy = 0; oy < d.Ho; ++oy) {
            int iy = oy * d.stride + ki - d.pad;
            if (iy < 0 || iy >= d.H) continue;
            const float* xrow = xs + (static_cast<int64_t>(ci) * d.H + iy) * d.W;
            float* c = crow + static_cast<int64_t>(oy) * d.Wo;
            for (int ox = 0; ox < d.Wo; ++ox) {
              int ix = ox * d.stride + kj - d.pad;
              if (ix >= 0 && ix < d.W) c[ox] = xrow[ix];
            }
          }
        }
  }
}

inline void col2im_add(const conv_dims& d, const emat& cols, float* dx) {
  int64_t hw = static_cast<int64_t>(d.Ho) * d.Wo;
  for (int n = 0; n < d.N; ++n) {
    float* xs = dx + static_cast<int64_t>(n) * d.Ci * d.H * d.W;
    for (int ci = 0; ci < d.Ci; ++ci)
      for (int ki = 0; ki < d.K; ++ki)
        for (int kj = 0; kj < d.K; ++kj) {
          int64_t row = (static_cast<int64_t>(ci) * d.K + ki) * d.K + kj;
          const float* crow =
              cols.data() + row * cols.cols() + static_cast<int64_t>(n) * hw;
          for (int oy = 0; oy < d.Ho; ++oy) {
            int iy = oy * d.stride + ki - d.pad;
            if (iy < 0 || iy >= d.H) continue;
            float* xrow = xs + (static_cast<int64_t>(ci) * d.H + iy) * d.W;
            const float* c = crow + static_cast<int64_t>(oy) * d.Wo;
            for (int ox = 0; ox < d.Wo; ++ox) {
              int ix = ox * d.stride + kj - d.pad;
              if (ix >= 0 && ix < d.W) xrow[ix] += c[ox];
            }
          }
        }
  }
}

}  // namespace detail

// Zero-padded 2D convolution, stride 1 or 2. x is [C,H,W] or [N,C,H,W],
// w is [Co,Ci,K,K], optional bias [Co].
inline tensor conv2d(tape& tp, const tensor& x, const tensor& w, const tensor& b,
                     int stride, int pad) {
  auto d = detail::conv_check(x, w, b, stride, pad);
  int64_t hw = static_cast<int64_t>(d.Ho) * d.Wo;
  int64_t ckk = static_cast<int64_t>(d.Ci) * d.K * d.K;

  auto cols = std::make_shared<emat>();
  detail::im2col(d, x.values().data(), *cols);

  shape_t os = d.batched ? shape_t{d.N, d.Co, d.Ho, d.Wo} : shape_t{d.Co, d.Ho, d.Wo};
  tensor out(os);
  {
    emat_cmap W(w.values().data(), d.Co, ckk);
    emat omat(d.Co, d.N * hw);
    omat.noalias() = W * (*cols);
    auto ov = out.values_mut();
    for (int n = 0; n < d.N; ++n)
      for (int co = 0; co < d.Co; ++co) {
        const float* src = omat.data() + co * omat.cols() + static_cast<int64_t>(n) * hw;
        float* dst = ov.data() + (static_cast<int64_t>(n) * d.Co + co) * hw;
        float bias = b.defined() ? b.values()[static_cast<size_t>(co)] : 0.0f;
        for (int64_t i = 0; i < hw; ++i) dst[i] = src[i] + bias;
      }
  }
  tp.check_finite("conv2d", out);

  bool track = b.defined() ? tp.wants(x, w, b) : tp.wants(x, w);
  if (track) {
    auto sx = x.storage();
    auto sw = w.storage();
    auto so = out.storage();
    auto sb = b.defined() ? b.storage() : nullptr;
    std::vector<tensor> ins = b.defined() ? std::vector<tensor>{x, w, b}
                                          : std::vector<tensor>{x, w};
    tp.record("conv2d", std::move(ins), out, [=]() {
      emat gmat(d.Co, d.N * hw);
      for (int n = 0; n < d.N; ++n)
        for (int co = 0; co < d.Co; ++co)
          std::copy_n(so->grad.data() + (static_cast<int64_t>(n) * d.Co + co) * hw, hw,
                      gmat.data() + co * gmat.cols() + static_cast<int64_t>(n) * hw);
      if (detail::wants_grad(sw)) {
        emat_map GW(detail::grad_of(sw).data(), d.Co, ckk);
        GW.noalias() += gmat * cols->transpose();
      }
      if (sb && detail::wants_grad(sb)) {
        auto gb = detail::grad_of(sb);
        for (int co = 0; co < d.Co; ++co)
          gb[static_cast<size_t>(co)] += gmat.row(co).sum();
      }
      if (detail::wants_grad(sx)) {
        emat_cmap W(sw->values.data(), d.Co, ckk);
        emat dcols(ckk, d.N * hw);
        dcols.noalias() = W.transpose() * gmat;
        detail::col2im_add(d, dcols, detail::grad_of(sx).data());
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalization

// Group normalization over [N,C,H,W] or [C,H,W]; gamma/beta are [C].
inline tensor group_norm(tape& tp, const tensor& x, const tensor& gamma, const tensor& beta,
                         int groups, float eps = 1e-5f) {
  bool batched = x.rank() == 4;
  if (!batched && x.rank() != 3)
    throw std::invalid_argument("group_norm: input must be [C,H,W] or [N,C,H,W]");
  int N = batched ? x.dim(0) : 1;
  int C = x.dim(batched ? 1 : 0);
  int64_t hw = static_cast<int64_t>(x.dim(batched ? 2 : 1)) * x.dim(batched ? 3 : 2);
  if (C % groups != 0)
    throw std::invalid_argument("group_norm: channels " + std::to_string(C) +
                                " not divisible by groups " + std::to_string(groups));
  if (gamma.rank() != 1 || gamma.dim(0) != C || beta.rank() != 1 || beta.dim(0) != C)
    throw std::invalid_argument("group_norm: gamma/beta must be [C]");
  int cg = C / groups;
  int64_t gsz = cg * hw;

  auto stats = std::make_shared<std::vector<float>>(static_cast<size_t>(N) * groups * 2);
  tensor out(x.shape());
  {
    auto xv = x.values();
    auto ov = out.values_mut();
    auto gv = gamma.values();
    auto bv = beta.values();
    for (int n = 0; n < N; ++n)
      for (int g = 0; g < groups; ++g) {
        const float* xs = xv.data() + (static_cast<int64_t>(n) * C + g * cg) * hw;
        double s = 0.0, s2 = 0.0;
        for (int64_t i = 0; i < gsz; ++i) {
          s += xs[i];
          s2 += static_cast<double>(xs[i]) * xs[i];
        }
        double mu = s / static_cast<double>(gsz);
        double var = s2 / static_cast<double>(gsz) - mu * mu;
        float inv = static_cast<float>(1.0 / std::sqrt(std::max(var, 0.0) + eps));
        (*stats)[(static_cast<size_t>(n) * groups + g) * 2] = static_cast<float>(mu);
        (*stats)[(static_cast<size_t>(n) * groups + g) * 2 + 1] = inv;
        float* os = ov.data() + (static_cast<int64_t>(n) * C + g * cg) * hw;
        for (int c = 0; c < cg; ++c) {
          float ga = gv[static_cast<size_t>(g * cg + c)];
          float be = bv[static_cast<size_t>(g * cg + c)];
          for (int64_t i = 0; i < hw; ++i) {
            float xh = (xs[c * hw + i] - static_cast<float>(mu)) * inv;
            os[c * hw + i] = ga * xh + be;
          }
        }
      }
  }
  tp.check_finite("group_norm", out);

  if (tp.wants(x, gamma, beta)) {
    auto sx = x.storage();
    auto sg = gamma.storage();
    auto sbt = beta.storage();
    auto so = out.storage();
    tp.record("group_norm", {x, gamma, beta}, out, [=]() {
      bool gx_w = detail::wants_grad(sx);
      bool gg_w = detail::wants_grad(sg);
      bool gb_w = detail::wants_grad(sbt);
      std::span<float> gx = gx_w ? detail::grad_of(sx) : std::span<float>{};
      std::span<float> gg = gg_w ? detail::grad_of(sg) : std::span<float>{};
      std::span<float> gb = gb_w ? detail::grad_of(sbt) : std::span<float>{};
      for (int n = 0; n < N; ++n)
        for (int g = 0; g < groups; ++g) {
          float mu = (*stats)[(static_cast<size_t>(n) * groups + g) * 2];
          float inv = (*stats)[(static_cast<size_t>(n) * groups + g) * 2 + 1];
          const float* xs = sx->values.data() + (static_cast<int64_t>(n) * C + g * cg) * hw;
          const float* gr = so->grad.data() + (static_cast<int64_t>(n) * C + g * cg) * hw;
          // h = dL/dxhat; dx = inv * (h - mean(h) - xhat * mean(h*xhat))
          double hsum = 0.0, hxsum = 0.0;
          for (int c = 0; c < cg; ++c) {
            float ga = sg->values[static_cast<size_t>(g * cg + c)];
            for (int64_t i = 0; i < hw; ++i) {
              float xh = (xs[c * hw + i] - mu) * inv;
              float h = gr[c * hw + i] * ga;
              hsum += h;
              hxsum += static_cast<double>(h) * xh;
            }
          }
          float hmean = static_cast<float>(hsum / static_cast<double>(gsz));
          float hxmean = static_cast<float>(hxsum / static_cast<double>(gsz));
          for (int c = 0; c < cg; ++c) {
            float ga = sg->values[static_cast<size_t>(g * cg + c)];
            double dgamma = 0.0, dbeta = 0.0;
            for (int64_t i = 0; i < hw; ++i) {
              float xh = (xs[c * hw + i] - mu) * inv;
              float go = gr[c * hw + i];
              if (gx_w) {
                float h = go * ga;
                gx[(static_cast<int64_t>(n) * C + g * cg + c) * hw + i] +=
                    inv * (h - hmean - xh * hxmean);
              }
              dgamma += static_cast<double>(go) * xh;
              dbeta += go;
            }
            if (gg_w) gg[static_cast<size_t>(g * cg + c)] += static_cast<float>(dgamma);
            if (gb_w) gb[static_cast<size_t>(g * cg + c)] += static_cast<float>(dbeta);
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// spatial

// Nearest-neighbor 2x upsample of [N,C,H,W] or [C,H,W].
inline tensor upsample_nearest2x(tape& tp, const tensor& x) {
  bool batched = x.rank() == 4;
  if (!batched && x.rank() != 3)
    throw std::invalid_argument("upsample_nearest2x: input must be [C,H,W] or [N,C,H,W]");
  int N = batched ? x.dim(0) : 1;
  int C = x.dim(batched ? 1 : 0);
  int H = x.dim(batched ? 2 : 1), W = x.dim(batched ? 3 : 2);
  shape_t os = batched ? shape_t{N, C, 2 * H, 2 * W} : shape_t{C, 2 * H, 2 * W};
  tensor out(os);
  {
    auto xv = x.values();
    auto ov = out.values_mut();
    for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
      const float* in = xv.data() + nc * H * W;
      float* o = ov.data() + nc * 4 * H * W;
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          float v = in[i * W + j];
          int64_t base = (static_cast<int64_t>(2 * i) * 2 * W) + 2 * j;
          o[base] = v;
          o[base + 1] = v;
          o[base + 2 * W] = v;
          o[base + 2 * W + 1] = v;
        }
    }
  }
  if (tp.wants(x)) {
    auto sx = x.storage();
    auto so = out.storage();
    tp.record("upsample_nearest2x", {x}, out, [=]() {
      auto gx = detail::grad_of(sx);
      for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
        const float* g = so->grad.data() + nc * 4 * H * W;
        float* d = gx.data() + nc * H * W;
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j) {
            int64_t base = (static_cast<int64_t>(2 * i) * 2 * W) + 2 * j;
            d[i * W + j] += g[base] + g[base + 1] + g[base + 2 * W] + g[base + 2 * W + 1];
          }
      }
    });
  }
  return out;
}

}  // namespace duodiff::ops
