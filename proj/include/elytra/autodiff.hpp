#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "elytra/tensor.hpp"

namespace elytra {

class Tape;

/// Handle to a tensor recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
struct Var {
    Tape *tape = nullptr;
    std::size_t id = 0;

    const Tensor &value() const;
    const Shape &shape() const { return value().shape(); }
};

/// Gradient buffers for one reverse sweep. `slot(id)` returns nullptr for
/// nodes that do not require a gradient, so backward rules can skip work.
class GradBuffer {
public:
    GradBuffer(const Tape &tape);
    Tensor *slot(std::size_t id);
    Tensor *peek(std::size_t id) { return present_[id] ? &grads_[id] : nullptr; }
    Tensor take(std::size_t id);

private:
    const Tape &tape_;
    std::vector<Tensor> grads_;
    std::vector<bool> present_;
};

/// Reverse rule of a node: receives the upstream gradient and the node's own
/// forward value, accumulates into input slots.
using BackwardFn = std::function<void(const Tensor &grad_out, const Tensor &out, GradBuffer &grads)>;

/// Linear record of primitive operations. Nodes are appended in evaluation
/// order, so the reverse of insertion order is a valid topological order.
class Tape {
public:
    Tape() = default;
    Tape(const Tape &) = delete;
    Tape &operator=(const Tape &) = delete;

    Var constant(Tensor value);
    Var variable(Tensor value);

    /// Appends an operation node. The node requires a gradient iff any input does.
    Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

    const Tensor &value(std::size_t id) const { return nodes_[id].value; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Reverse sweep from a scalar loss. Returns one gradient per entry of `wrt`
    /// (zeros for tensors that did not participate).
    std::vector<Tensor> backward(Var loss, std::span<const Var> wrt);

    /// Number of nodes whose backward rule ran during the last sweep.
    std::size_t last_sweep_visits() const noexcept { return last_visits_; }

    /// Process-wide count of backward() calls on this thread. Attacks use this
    /// as an instrumented gradient-evaluation counter.
    static std::uint64_t thread_backward_calls() noexcept;

private:
    struct Node {
        Tensor value;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
        bool requires_grad = false;
    };
    std::vector<Node> nodes_;
    std::size_t last_visits_ = 0;
};

} // namespace elytra
