#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "elytra/io.hpp"
#include "elytra/tensor.hpp"

namespace elytra {

struct OptimSpec {
    double lr = 1e-4;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    /// StepLR interval (epochs) and decay factor.
    std::size_t step = 20;
    double gamma = 0.1;
    std::size_t epochs = 24;
    std::size_t batch_size = 32;

    /// Zero epochs is only meaningful for degenerate programmatic runs.
    void validate(bool allow_zero_epochs = false) const;
    Json to_json() const;
    static OptimSpec from_json(const Json &j, const OptimSpec &defaults);
    static OptimSpec from_json(const Json &j) { return from_json(j, OptimSpec{}); }
};

/// lr·γ^⌊epoch/step⌋.
double step_lr(std::size_t epoch, const OptimSpec &spec);

/// AdamW with decoupled weight decay; moments kept in double, keyed by name.
class AdamW {
public:
    struct State {
        std::vector<double> m, v;
        std::size_t t = 0;
    };

    explicit AdamW(const OptimSpec &spec);

    /// p ← p·(1 − lr·λ) − lr·m̂/(√v̂ + ε).
    void step(const std::string &name, Tensor &param, const Tensor &grad, double lr);
    const std::map<std::string, State> &state() const noexcept { return state_; }

private:
    OptimSpec spec_;
    std::map<std::string, State> state_;
};

} // namespace elytra
