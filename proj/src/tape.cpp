#include "ramnet/tape.hpp"

#include <stdexcept>
#include <utility>

namespace ramnet {

Var Tape::constant(Matrix value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return {static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::parameter(const Matrix& value, Matrix& grad_sink) {
    if (!grad_sink.same_shape(value)) throw ConfigError("tape: gradient sink shape mismatch");
    Node n;
    n.external_value = &value;
    n.external_grad = &grad_sink;
    nodes_.push_back(std::move(n));
    return {static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::record(Matrix value, BackwardFn backward) {
    Node n;
    n.value = std::move(value);
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Tape::Node& Tape::node(Var v) {
    if (v.id >= nodes_.size()) throw std::out_of_range("tape: unknown variable");
    return nodes_[v.id];
}

const Tape::Node& Tape::node(Var v) const {
    if (v.id >= nodes_.size()) throw std::out_of_range("tape: unknown variable");
    return nodes_[v.id];
}

const Matrix& Tape::value(Var v) const {
    const auto& n = node(v);
    return n.external_value != nullptr ? *n.external_value : n.value;
}

Matrix& Tape::grad(Var v) {
    auto& n = node(v);
    if (n.external_grad != nullptr) return *n.external_grad;
    if (n.grad.empty()) {
        const auto& val = value(v);
        n.grad = Matrix(val.rows(), val.cols());
    }
    return n.grad;
}

bool Tape::has_grad(Var v) const {
    const auto& n = node(v);
    return n.external_grad != nullptr || !n.grad.empty();
}

void Tape::backward(Var root) {
    if (consumed_) throw std::logic_error("tape: backward called twice without reset");
    const auto& rv = value(root);
    if (rv.size() != 1) throw std::logic_error("tape: backward root must be a scalar");
    consumed_ = true;
    grad(root)(0, 0) += 1.0;
    for (std::uint32_t i = root.id + 1; i-- > 0;) {
        auto& n = nodes_[i];
        if (n.backward && !n.grad.empty()) n.backward(*this);
    }
}

void Tape::reset() {
    nodes_.clear();
    consumed_ = false;
}

}  // namespace ramnet
