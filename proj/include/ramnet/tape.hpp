#pragma once

// Minimal reverse-mode tape. Each recorded node owns its value (or points at an
// external parameter) plus a gradient buffer, and carries a closure that pushes
// its gradient to its parents. Nodes are appended in evaluation order, so the
// reverse of creation order is a valid reverse topological order.

#include <cstdint>
#include <functional>
#include <vector>

#include "ramnet/common.hpp"

namespace ramnet {

struct Var {
    std::uint32_t id = 0;
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    /// A value that receives no gradient sink (still has a readable grad).
    Var constant(Matrix value);

    /// Leaf bound to external storage. The gradient is accumulated directly
    /// into `grad_sink`, which must outlive the tape's backward pass.
    Var parameter(const Matrix& value, Matrix& grad_sink);

    Var record(Matrix value, BackwardFn backward);

    /// Handle the next recorded node will receive; lets a backward closure
    /// name its own output.
    Var next() const noexcept { return {static_cast<std::uint32_t>(nodes_.size())}; }

    const Matrix& value(Var v) const;
    /// Gradient buffer, allocated (zeroed) on first access.
    Matrix& grad(Var v);
    bool has_grad(Var v) const;

    /// Seeds d(root)/d(root) = 1 and visits every node in reverse order.
    /// Calling it a second time without reset() throws.
    void backward(Var root);

    void reset();
    std::size_t size() const noexcept { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        const Matrix* external_value = nullptr;
        Matrix grad;
        Matrix* external_grad = nullptr;
        BackwardFn backward;
    };

    Node& node(Var v);
    const Node& node(Var v) const;

    std::vector<Node> nodes_;
    bool consumed_ = false;
};

}  // namespace ramnet
