#include "sim/tape.hpp"

namespace sim {

Storage* GradMap::find(const detail::Node* n) {
  auto it = map_.find(const_cast<detail::Node*>(n));
  return it == map_.end() ? nullptr : it->second.get();
}

Storage& GradMap::ensure(const std::shared_ptr<detail::Node>& n) {
  auto it = map_.find(n.get());
  if (it == map_.end()) {
    it = map_.emplace(n.get(), std::make_shared<Storage>(n->dtype, n->data->size())).first;
  }
  return *it->second;
}

void Tape::record(std::vector<std::shared_ptr<detail::Node>> inputs,
                  std::shared_ptr<detail::Node> output, BackwardFn fn) {
  output->tape = this;
  records_.push_back({std::move(inputs), std::move(output), std::move(fn)});
}

namespace {
template <typename T>
void axpy(std::span<T> dst, std::span<const T> src) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}
}  // namespace

void Tape::backward(const Tensor& root) {
  SIM_CHECK(root.defined(), "backward on undefined tensor");
  SIM_CHECK(root.numel() == 1,
            "backward needs a scalar root, got shape " << shape_str(root.shape()));
  SIM_CHECK(root.node()->tape == this, "root tensor was not produced by an op on this tape");

  GradMap grads;
  grads.ensure(root.node_ptr()).fill(1.0);

  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    Storage* g = grads.find(it->output.get());
    if (!g) continue;  // not on any path from the root
    it->fn(*g, grads);
  }

  for (const auto& [node, buf] : grads.entries()) {
    if (!node->requires_grad) continue;
    if (!node->grad) node->grad = std::make_shared<Storage>(node->dtype, node->data->size());
    if (node->dtype == DType::F32) {
      axpy(node->grad->as<float>(), std::as_const(*buf).as<float>());
    } else {
      axpy(node->grad->as<double>(), std::as_const(*buf).as<double>());
    }
  }
}

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* active_tape() { return g_active_tape; }
bool grad_enabled() { return g_active_tape != nullptr; }

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

NoGradScope::NoGradScope() : prev_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = prev_; }

void backward(const Tensor& root) {
  SIM_CHECK(root.defined(), "backward on undefined tensor");
  Tape* t = root.node()->tape;
  SIM_CHECK(t != nullptr, "tensor was not recorded on a tape; wrap the computation in a TapeScope");
  t->backward(root);
}

}  // namespace sim
