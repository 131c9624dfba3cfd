#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tvl/tensor.hpp"

namespace tvl {

/// Raised when a Var does not belong to the tape it is used with, or the
/// graph is used in a way reverse-mode replay cannot honour.
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised by the finite-value check mode when an op produces NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Handle to a value recorded on a Tape.
struct Var {
  std::uint64_t tape = 0;
  std::size_t index = std::numeric_limits<std::size_t>::max();

  bool valid() const { return tape != 0; }
};

/// Linear record of primitive applications for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so inputs always precede their
/// consumers and a reverse sweep visits each node once. A tape belongs to a
/// single thread and is rebuilt every step.
template <typename T>
class Tape {
 public:
  /// Called during the reverse sweep with the node's own handle. The
  /// function reads `grad(self)` and accumulates into `grad_buffer(input)`.
  using BackwardFn = std::function<void(Tape&, Var self)>;

  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var leaf(Tensor<T> value, bool requires_grad = false);

  /// Appends an op result. The node requires a gradient iff one of its
  /// inputs does; otherwise `fn` is discarded. `saved_elems` counts buffers
  /// the op keeps for its backward rule besides the output.
  Var record(const char* op, Tensor<T> value, std::initializer_list<Var> inputs,
             BackwardFn fn, std::size_t saved_elems = 0);

  const Tensor<T>& value(Var v) const;
  bool requires_grad(Var v) const;

  /// Gradient reached by the last backward(); empty if none flowed here.
  std::span<const T> grad(Var v) const;
  /// Gradient as a tensor of the value's shape (zeros if none flowed).
  Tensor<T> grad_tensor(Var v) const;
  /// Zero-initialised accumulation buffer, or an empty span when `v` does
  /// not require a gradient.
  std::span<T> grad_buffer(Var v);

  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  /// Bytes held by op outputs and their saved buffers (leaves excluded).
  std::size_t activation_bytes() const;

  void set_check_finite(bool on) { check_finite_ = on; }
  bool check_finite() const { return check_finite_; }

 private:
  struct Node {
    const char* op = "leaf";
    Tensor<T> value;
    std::vector<T> grad;
    BackwardFn backward;
    std::size_t saved_elems = 0;
    bool requires_grad = false;
    bool is_leaf = true;
  };

  const Node& node(Var v) const;
  Node& node(Var v);

  std::uint64_t id_;
  std::vector<Node> nodes_;
  bool check_finite_ = false;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace tvl
