#pragma once

// Reverse-mode autodiff tape. Ops append nodes in execution order; backward
// walks the list in reverse, accumulating gradients into tensor storage.
// Scopes give layer-qualified names to numeric errors.

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "duodiff/tensor.hpp"

namespace duodiff {

struct non_finite_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct tape_node {
  const char* op;
  std::vector<std::shared_ptr<tensor_storage>> inputs;
  std::shared_ptr<tensor_storage> output;
  // Accumulates into inputs' grads; reads output->grad. May be empty for
  // gradient-stopping ops.
  std::function<void()> backward;
};

class tape {
 public:
  bool recording() const { return recording_; }
  void set_recording(bool r) { recording_ = r; }

  size_t size() const { return nodes_.size(); }
  void reset() { nodes_.clear(); }

  void push_scope(const std::string& s) {
    scope_ += scope_.empty() ? s : "." + s;
    scope_lens_.push_back(s.size());
  }
  void pop_scope() {
    size_t n = scope_lens_.back();
    scope_lens_.pop_back();
    scope_.resize(scope_.size() - n - (scope_.empty() || scope_.size() == n ? 0 : 1));
  }
  const std::string& scope() const { return scope_; }

  // Returns true when ops should record a node for these inputs.
  template <typename... Ts>
  bool wants(const Ts&... inputs) const {
    return recording_ && (inputs.requires_grad() || ...);
  }

  void record(const char* op, std::vector<tensor> inputs, const tensor& output,
              std::function<void()> backward) {
    tape_node n;
    n.op = op;
    n.inputs.reserve(inputs.size());
    for (auto& t : inputs) n.inputs.push_back(t.storage());
    n.output = output.storage();
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    output.storage()->requires_grad = true;
  }

  // Checks every output element is finite; throws naming op and scope.
  void check_finite(const char* op, const tensor& out) const {
    for (float v : out.values()) {
      if (!std::isfinite(v)) {
        std::string where = scope_.empty() ? std::string(op) : scope_ + ": " + op;
        throw non_finite_error("non-finite value produced by op '" + std::string(op) +
                               "' (" + where + ")");
      }
    }
  }

  // Seeds d(loss)/d(loss) = 1 and propagates to every tensor reachable from
  // the loss. Grads of all tensors touched by the tape are cleared first, so
  // repeated passes never see stale accumulation. The tape is consumed.
  void backward(const tensor& loss) {
    if (loss.size() != 1)
      throw std::invalid_argument("backward: loss must be a scalar, got " +
                                  shape_str(loss.shape()));
    int64_t seed_at = -1;
    for (int64_t i = static_cast<int64_t>(nodes_.size()) - 1; i >= 0; --i) {
      if (nodes_[static_cast<size_t>(i)].output == loss.storage()) {
        seed_at = i;
        break;
      }
    }
    if (seed_at < 0)
      throw std::logic_error("backward: loss is not the output of any recorded op");

    for (auto& n : nodes_) {
      n.output->grad.clear();
      for (auto& in : n.inputs) in->grad.clear();
    }
    loss.storage()->grad.assign(1, 1.0f);

    for (int64_t i = seed_at; i >= 0; --i) {
      auto& n = nodes_[static_cast<size_t>(i)];
      if (n.output->grad.empty()) continue;  // no path to the loss
      if (n.backward) n.backward();
    }
    nodes_.clear();
  }

 private:
  std::vector<tape_node> nodes_;
  std::string scope_;
  std::vector<size_t> scope_lens_;
  bool recording_ = true;
};

// RAII scope label for error messages.
class tape_scope {
 public:
  tape_scope(tape& t, const std::string& name) : t_(t) { t_.push_scope(name); }
  ~tape_scope() { t_.pop_scope(); }
  tape_scope(const tape_scope&) = delete;
  tape_scope& operator=(const tape_scope&) = delete;

 private:
  tape& t_;
};

}  // namespace duodiff
