#include "tvl/tape.hpp"

#include <atomic>
#include <utility>

namespace tvl {

namespace {
std::atomic<std::uint64_t> next_tape_id{1};
}

template <typename T>
Tape<T>::Tape() : id_(next_tape_id.fetch_add(1)) {}

template <typename T>
const typename Tape<T>::Node& Tape<T>::node(Var v) const {
  if (v.tape != id_ || v.index >= nodes_.size())
    throw GraphError("variable is not recorded on this tape");
  return nodes_[v.index];
}

template <typename T>
typename Tape<T>::Node& Tape<T>::node(Var v) {
  return const_cast<Node&>(std::as_const(*this).node(v));
}

template <typename T>
Var Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
  if (check_finite_ && !value.all_finite())
    throw NumericError("non-finite value in leaf " + std::to_string(nodes_.size()));
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{id_, nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::record(const char* op, Tensor<T> value,
                    std::initializer_list<Var> inputs, BackwardFn fn,
                    std::size_t saved_elems) {
  bool needs = false;
  for (Var in : inputs) needs = needs || node(in).requires_grad;
  if (check_finite_ && !value.all_finite())
    throw NumericError(std::string("non-finite output from op '") + op +
                       "' at node " + std::to_string(nodes_.size()));
  Node n;
  n.op = op;
  n.value = std::move(value);
  n.requires_grad = needs;
  n.is_leaf = false;
  n.saved_elems = saved_elems;
  if (needs) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{id_, nodes_.size() - 1};
}

template <typename T>
const Tensor<T>& Tape<T>::value(Var v) const {
  return node(v).value;
}

template <typename T>
bool Tape<T>::requires_grad(Var v) const {
  return node(v).requires_grad;
}

template <typename T>
std::span<const T> Tape<T>::grad(Var v) const {
  return node(v).grad;
}

template <typename T>
Tensor<T> Tape<T>::grad_tensor(Var v) const {
  const Node& n = node(v);
  if (n.grad.empty()) return Tensor<T>(n.value.shape(), T(0));
  return Tensor<T>(n.value.shape(), n.grad);
}

template <typename T>
std::span<T> Tape<T>::grad_buffer(Var v) {
  Node& n = node(v);
  if (!n.requires_grad) return {};
  if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
  return n.grad;
}

template <typename T>
void Tape<T>::backward(Var loss) {
  Node& root = node(loss);
  if (root.value.size() != 1)
    throw GraphError("backward() needs a scalar loss, got shape " +
                     shape_str(root.value.shape()));
  for (Node& n : nodes_) n.grad.clear();
  if (!root.requires_grad) return;
  root.grad.assign(1, T(1));
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && !n.grad.empty()) n.backward(*this, Var{id_, i});
  }
}

template <typename T>
std::size_t Tape<T>::activation_bytes() const {
  std::size_t bytes = 0;
  for (const Node& n : nodes_)
    if (!n.is_leaf) bytes += (n.value.size() + n.saved_elems) * sizeof(T);
  return bytes;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace tvl
