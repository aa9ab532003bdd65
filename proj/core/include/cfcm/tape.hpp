#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cfcm/errors.hpp"
#include "cfcm/tensor.hpp"

namespace cfcm {

// Reverse-mode gradient tape. Ops append nodes in execution order, which is a
// topological order by construction; backward() walks it once in reverse.
// Single-writer: one tape records one forward pass on one thread.
template <typename T>
class Tape {
 public:
  using NodeId = std::uint32_t;
  // Receives the accumulated gradient of the node's output and pushes
  // gradients into the node's inputs via accumulate().
  using BackwardFn = std::function<void(Tape&, const Tensor4<T>&)>;

  Tape() : serial_(next_serial()) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t serial() const { return serial_; }
  std::size_t size() const { return nodes_.size(); }

  // Node id of `t` on this tape. Registers a new leaf when the tensor
  // requires gradients but has not participated in an op yet; returns
  // nullopt for untracked tensors.
  std::optional<NodeId> track(const Tensor4<T>& t) {
    auto& meta = t.grad_meta();
    if (meta.bound && meta.tape_serial == serial_) return meta.node;
    if (!meta.requires_grad) return std::nullopt;
    const NodeId id = add_node("leaf", nullptr);
    meta.bound = true;
    meta.tape_serial = serial_;
    meta.node = id;
    return id;
  }

  NodeId add_node(const char* kind, BackwardFn fn) {
    nodes_.push_back(Node{kind, std::move(fn)});
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  void accumulate(NodeId id, Tensor4<T> g) {
    auto& slot = grads_[id];
    if (slot.empty()) {
      slot = std::move(g);
      return;
    }
    if (!(slot.shape() == g.shape())) {
      throw InvalidArgument("gradient shape " + to_string(g.shape()) +
                            " does not match accumulated " + to_string(slot.shape()));
    }
    auto dst = slot.mutable_data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  // Seeds d(loss)/d(loss) = 1 and propagates through every recorded node.
  // The tape is consumed afterwards; a second call without reset() throws.
  void backward(const Tensor4<T>& loss) {
    if (consumed_) {
      throw InvalidArgument("backward() called twice on the same tape without reset()");
    }
    if (loss.numel() != 1) {
      throw InvalidArgument("backward() requires a scalar loss, got " + to_string(loss.shape()));
    }
    const auto& meta = loss.grad_meta();
    if (!meta.bound || meta.tape_serial != serial_) {
      throw InvalidArgument("loss tensor was not produced through this tape");
    }
    consumed_ = true;
    grads_.assign(nodes_.size(), Tensor4<T>{});
    grads_[meta.node] = Tensor4<T>::ones({1, 1, 1, 1});
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      if (grads_[i].empty() || !nodes_[i].backward) continue;
      nodes_[i].backward(*this, grads_[i]);
    }
  }

  bool has_grad(const Tensor4<T>& t) const {
    const auto& meta = t.grad_meta();
    return meta.bound && meta.tape_serial == serial_ && meta.node < grads_.size() &&
           !grads_[meta.node].empty();
  }

  const Tensor4<T>& grad(const Tensor4<T>& t) const {
    if (!has_grad(t)) {
      throw InvalidArgument("no gradient recorded for tensor " + to_string(t.shape()));
    }
    return grads_[t.grad_meta().node];
  }

  // Clears nodes and gradients and invalidates every handle issued so far.
  void reset() {
    nodes_.clear();
    grads_.clear();
    consumed_ = false;
    serial_ = next_serial();
  }

 private:
  struct Node {
    const char* kind;
    BackwardFn backward;
  };

  static std::uint64_t next_serial() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  std::uint64_t serial_;
  std::vector<Node> nodes_;
  std::vector<Tensor4<T>> grads_;
  bool consumed_ = false;
};

}  // namespace cfcm
