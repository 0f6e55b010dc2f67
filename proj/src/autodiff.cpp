#include "elytra/autodiff.hpp"

#include "elytra/error.hpp"

namespace elytra {

namespace {
thread_local std::uint64_t backward_calls = 0;
}

const Tensor &Var::value() const {
    if (tape == nullptr) {
        throw ContractError("use of an unbound Var");
    }
    return tape->value(id);
}

GradBuffer::GradBuffer(const Tape &tape) : tape_(tape), grads_(tape.size()), present_(tape.size(), false) {}

Tensor *GradBuffer::slot(std::size_t id) {
    if (!tape_.requires_grad(id)) {
        return nullptr;
    }
    if (!present_[id]) {
        grads_[id] = Tensor::zeros(tape_.value(id).shape());
        present_[id] = true;
    }
    return &grads_[id];
}

Tensor GradBuffer::take(std::size_t id) {
    if (!present_[id]) {
        return Tensor::zeros(tape_.value(id).shape());
    }
    present_[id] = false;
    return std::move(grads_[id]);
}

Var Tape::constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, false});
    return Var{this, nodes_.size() - 1};
}

Var Tape::variable(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, true});
    return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
    bool needs = false;
    for (auto in : inputs) {
        if (in >= nodes_.size()) {
            throw IndexError("tape input id out of range");
        }
        needs = needs || nodes_[in].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), std::move(inputs), needs ? std::move(backward) : BackwardFn{}, needs});
    return Var{this, nodes_.size() - 1};
}

std::vector<Tensor> Tape::backward(Var loss, std::span<const Var> wrt) {
    if (loss.tape != this) {
        throw ContractError("loss was not recorded on this tape");
    }
    if (value(loss.id).numel() != 1) {
        throw ContractError("backward() needs a scalar loss, got shape " + shape_str(value(loss.id).shape()));
    }
    for (const auto &w : wrt) {
        if (w.tape != this) {
            throw ContractError("requested gradient for a tensor from another tape");
        }
    }
    ++backward_calls;
    last_visits_ = 0;

    GradBuffer grads(*this);
    if (Tensor *seed = grads.slot(loss.id)) {
        seed->fill(1.0f);
    }
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        Node &node = nodes_[i];
        if (!node.requires_grad || !node.backward) {
            continue;
        }
        Tensor *g = grads.peek(i);
        if (g == nullptr) {
            continue;
        }
        ++last_visits_;
        node.backward(*g, node.value, grads);
    }

    std::vector<Tensor> out;
    out.reserve(wrt.size());
    for (const auto &w : wrt) {
        Tensor *g = grads.peek(w.id);
        out.push_back(g ? *g : Tensor::zeros(value(w.id).shape()));
    }
    return out;
}

std::uint64_t Tape::thread_backward_calls() noexcept { return backward_calls; }

} // namespace elytra
