#pragma once

#include <cstddef>

#include "elytra/autodiff.hpp"

namespace elytra {

/// Anything that maps a batch of images [B×C×H×W] to logits [B×k] on a tape.
/// Attacks only ever see this interface, so they cannot mutate parameters.
class Classifier {
public:
    virtual ~Classifier() = default;
    virtual Var logits(Tape &tape, Var images) const = 0;
    virtual std::size_t num_classes() const = 0;
};

} // namespace elytra
