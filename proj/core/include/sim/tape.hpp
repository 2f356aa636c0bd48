#pragma once

#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "sim/tensor.hpp"

namespace sim {

// Per-backward-pass gradient buffers, keyed by node. Separate from the
// persistent Tensor::grad so that repeated backward calls accumulate.
class GradMap {
 public:
  Storage* find(const detail::Node* n);
  // Returns the buffer for n, creating a zero-filled one on first use.
  Storage& ensure(const std::shared_ptr<detail::Node>& n);

  const std::unordered_map<detail::Node*, std::shared_ptr<Storage>>& entries() const {
    return map_;
  }

 private:
  std::unordered_map<detail::Node*, std::shared_ptr<Storage>> map_;
};

// Receives the gradient w.r.t. the op output and scatters into the inputs.
using BackwardFn = std::function<void(const Storage& out_grad, GradMap& grads)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::vector<std::shared_ptr<detail::Node>> inputs,
              std::shared_ptr<detail::Node> output, BackwardFn fn);

  // Reverse sweep from a scalar root recorded on this tape. Each record is
  // applied at most once, in reverse execution order; records whose output
  // never received a gradient are skipped. Gradients of requires_grad
  // tensors accumulate into their persistent grad buffers.
  void backward(const Tensor& root);

  size_t size() const { return records_.size(); }
  void clear() { records_.clear(); }

 private:
  struct Record {
    std::vector<std::shared_ptr<detail::Node>> inputs;
    std::shared_ptr<detail::Node> output;
    BackwardFn fn;
  };
  std::vector<Record> records_;
};

// Thread-local active tape. Ops record onto it when present; a null tape
// means forward-only execution.
Tape* active_tape();
bool grad_enabled();

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* prev_;
};

// Dispatches to the tape that produced root; errors if root has none.
void backward(const Tensor& root);

}  // namespace sim
