#include "elytra/optim.hpp"

#include <cmath>

#include "elytra/error.hpp"

namespace elytra {

void OptimSpec::validate(bool allow_zero_epochs) const {
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be non-negative");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("StepLR gamma must lie in (0, 1]");
    if (step == 0) throw ConfigError("StepLR step must be positive");
    if (epochs == 0 && !allow_zero_epochs) throw ConfigError("epochs must be at least 1");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
}

Json OptimSpec::to_json() const {
    return Json{{"lr", lr},       {"weight_decay", weight_decay}, {"beta1", beta1},   {"beta2", beta2},
                {"eps", eps},     {"step", step},                 {"gamma", gamma},   {"epochs", epochs},
                {"batch_size", batch_size}};
}

OptimSpec OptimSpec::from_json(const Json &j, const OptimSpec &defaults) {
    OptimSpec s = defaults;
    s.lr = j.value("lr", s.lr);
    s.weight_decay = j.value("weight_decay", s.weight_decay);
    s.beta1 = j.value("beta1", s.beta1);
    s.beta2 = j.value("beta2", s.beta2);
    s.eps = j.value("eps", s.eps);
    s.step = j.value("step", s.step);
    s.gamma = j.value("gamma", s.gamma);
    s.epochs = j.value("epochs", s.epochs);
    s.batch_size = j.value("batch_size", s.batch_size);
    s.validate();
    return s;
}

double step_lr(std::size_t epoch, const OptimSpec &spec) {
    return spec.lr * std::pow(spec.gamma, static_cast<double>(epoch / spec.step));
}

AdamW::AdamW(const OptimSpec &spec) : spec_(spec) {}

void AdamW::step(const std::string &name, Tensor &param, const Tensor &grad, double lr) {
    if (param.shape() != grad.shape()) {
        throw DimensionError("AdamW: gradient " + shape_str(grad.shape()) + " for parameter '" + name + "' " +
                             shape_str(param.shape()));
    }
    State &s = state_[name];
    if (s.m.empty()) {
        s.m.assign(param.numel(), 0.0);
        s.v.assign(param.numel(), 0.0);
    } else if (s.m.size() != param.numel()) {
        throw DimensionError("AdamW: state for '" + name + "' does not match parameter size");
    }
    ++s.t;
    const double t = static_cast<double>(s.t);
    const double c1 = 1.0 - std::pow(spec_.beta1, t), c2 = 1.0 - std::pow(spec_.beta2, t);
    const double decay = 1.0 - lr * spec_.weight_decay;
    for (std::size_t i = 0; i < param.numel(); ++i) {
        const double g = grad[i];
        s.m[i] = spec_.beta1 * s.m[i] + (1.0 - spec_.beta1) * g;
        s.v[i] = spec_.beta2 * s.v[i] + (1.0 - spec_.beta2) * g * g;
        const double p = static_cast<double>(param[i]) * decay;
        param[i] = static_cast<float>(p - lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + spec_.eps));
    }
}

} // namespace elytra
