#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "relab/tensor.hpp"

namespace relab {

template <typename T>
class Tape;

template <typename T>
using GradientMap = std::map<std::string, Tensor<T>>;

// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
};

// Reverse-mode tape. Nodes are appended in execution order, so walking the
// node list backwards is a valid reverse topological order. Gradients from
// fan-out accumulate additively in each node's slot.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  Var<T> parameter(const std::string& name, Tensor<T> value);

  // Appends an op result. `fn` is dropped when no input requires a gradient.
  Var<T> record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn);

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Adds `g` into the gradient slot of node `id` (no-op for constants).
  void accumulate(std::size_t id, const Tensor<T>& g);
  // Direct access to a node's gradient slot, zero-initialised on first use.
  Tensor<T>& grad_slot(std::size_t id);

  // Runs the reverse sweep from a scalar loss. Returns one gradient per
  // parameter name; parameters the loss does not reach get zeros.
  GradientMap<T> backward(Var<T> loss);

 private:
  struct Node {
    Tensor<T> value;
    BackwardFn backward;
    std::string name;
    bool requires_grad = false;
    bool is_parameter = false;
  };

  std::deque<Node> nodes_;
  std::vector<Tensor<T>> grads_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(id);
}

struct Segment {
  std::size_t offset = 0;
  std::size_t length = 0;
};

// Forward primitives. Each validates shapes (ShapeError naming the operands)
// and records itself on the tape of its inputs.

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);
template <typename T>
Var<T> transpose(Var<T> a);
// Same-shape addition, or row broadcast when `b` is rank 1 with a.cols() entries.
template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, T factor);
template <typename T>
Var<T> gelu(Var<T> x);
template <typename T>
Var<T> softmax(Var<T> x, int axis = -1);
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-12));
template <typename T>
Var<T> embedding_lookup(Var<T> table, std::span<const std::int32_t> ids);
template <typename T>
Var<T> mean(Var<T> x, int axis);
template <typename T>
Var<T> sum(Var<T> x);
// Mean negative log-likelihood over rows; logits are [rows, classes] or [classes].
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::int32_t> labels);
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::int32_t label);
// Row means of each segment: [sum(len), n] -> [segments, n].
template <typename T>
Var<T> segment_mean(Var<T> x, std::span<const Segment> segments);

// Multi-head scaled dot-product attention over packed sequences. q, k, v are
// [rows, hidden]; each segment attends only within itself. `key_valid`, when
// non-empty, marks which rows may be attended to (padding masks). When
// `probs_out` is given it receives one [len, len] matrix per (segment, head),
// segment-major.
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::span<const Segment> segments, std::size_t num_heads,
                 std::span<const std::uint8_t> key_valid = {}, std::vector<Tensor<T>>* probs_out = nullptr);

// Plain (untaped) helpers shared with the forward-only evaluation path.
template <typename T>
T gelu_value(T x);

}  // namespace relab
