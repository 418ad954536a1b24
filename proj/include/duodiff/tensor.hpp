#pragma once

// Dense float32 tensor. A tensor is a cheap handle onto shared storage; ops
// treat tensors as immutable once they have entered a forward pass. Raw
// mutation (init, optimizer updates, IO) goes through values_mut() between
// passes.

#include <cstdint>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace duodiff {

using shape_t = std::vector<int>;

inline int64_t shape_numel(const shape_t& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const shape_t& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

struct tensor_storage {
  shape_t shape;
  std::vector<float> values;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad = false;
};

class tensor {
 public:
  tensor() = default;

  explicit tensor(shape_t shape, float fill = 0.0f, bool requires_grad = false) {
    validate_shape(shape);
    d_ = std::make_shared<tensor_storage>();
    d_->values.assign(static_cast<size_t>(shape_numel(shape)), fill);
    d_->shape = std::move(shape);
    d_->requires_grad = requires_grad;
  }

  tensor(shape_t shape, std::vector<float> values, bool requires_grad = false) {
    validate_shape(shape);
    if (static_cast<int64_t>(values.size()) != shape_numel(shape))
      throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                  " values for shape " + shape_str(shape));
    d_ = std::make_shared<tensor_storage>();
    d_->shape = std::move(shape);
    d_->values = std::move(values);
    d_->requires_grad = requires_grad;
  }

  static tensor scalar(float v) { return tensor({1}, std::vector<float>{v}); }

  bool defined() const { return static_cast<bool>(d_); }

  const shape_t& shape() const { return data().shape; }
  int rank() const { return static_cast<int>(shape().size()); }
  int dim(int i) const { return shape().at(static_cast<size_t>(i)); }
  int64_t size() const { return static_cast<int64_t>(data().values.size()); }

  std::span<const float> values() const { return data().values; }
  std::span<float> values_mut() { return data().values; }
  float at(int64_t i) const { return data().values[static_cast<size_t>(i)]; }

  float item() const {
    if (size() != 1)
      throw std::invalid_argument("tensor::item: size " + std::to_string(size()) + " != 1");
    return data().values[0];
  }

  bool requires_grad() const { return data().requires_grad; }
  void set_requires_grad(bool r) { data().requires_grad = r; }

  bool has_grad() const { return !data().grad.empty(); }
  std::span<const float> grad() const { return data().grad; }
  std::span<float> grad_mut() {
    auto& g = data().grad;
    if (g.empty()) g.assign(data().values.size(), 0.0f);
    return g;
  }
  void zero_grad() { data().grad.clear(); }

  std::shared_ptr<tensor_storage> storage() const { return d_; }
  bool same_storage(const tensor& o) const { return d_ == o.d_; }

 private:
  static void validate_shape(const shape_t& s) {
    if (s.empty()) throw std::invalid_argument("tensor: empty shape");
    for (int d : s)
      if (d <= 0)
        throw std::invalid_argument("tensor: non-positive dim in " + shape_str(s));
  }

  tensor_storage& data() const {
    if (!d_) throw std::logic_error("tensor: use of undefined tensor");
    return *d_;
  }

  std::shared_ptr<tensor_storage> d_;
};

}  // namespace duodiff
