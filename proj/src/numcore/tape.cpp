#include "kcrl/numcore/tape.hpp"

#include "kcrl/error.hpp"

namespace kcrl::nc {

std::string shape_str(const Matrix& m) {
  return "[" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + "]";
}

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw DimensionError("scalar() on non-scalar " + shape_str(v));
  return v(0, 0);
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), false, nullptr, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Parameter& p) {
  if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) p.zero_grad();
  nodes_.push_back(Node{p.value, Matrix(), true, &p, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::initializer_list<Var> parents, BackwardFn backward) {
  bool needs = false;
  for (const Var& v : parents) needs = needs || nodes_[v.id()].requires_grad;
  nodes_.push_back(Node{std::move(value), Matrix(), needs, nullptr,
                        needs ? std::move(backward) : BackwardFn{}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, const std::vector<Var>& parents, BackwardFn backward) {
  bool needs = false;
  for (const Var& v : parents) needs = needs || nodes_[v.id()].requires_grad;
  nodes_.push_back(Node{std::move(value), Matrix(), needs, nullptr,
                        needs ? std::move(backward) : BackwardFn{}});
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var root) {
  if (root.tape() != this) throw ProtocolError("backward() on a foreign tape");
  const std::size_t last = root.id();
  if (nodes_[last].value.size() != 1) {
    throw DimensionError("backward() needs a scalar root, got " + shape_str(nodes_[last].value));
  }
  if (!nodes_[last].requires_grad) return;
  for (std::size_t i = 0; i <= last; ++i) {
    Node& n = nodes_[i];
    if (n.requires_grad) n.grad.setZero(n.value.rows(), n.value.cols());
  }
  nodes_[last].grad(0, 0) = 1.0;
  for (std::size_t i = last + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad) continue;
    if (n.param != nullptr) {
      n.param->grad += n.grad;
    } else if (n.backward) {
      n.backward(*this, i);
    }
  }
}

}  // namespace kcrl::nc
