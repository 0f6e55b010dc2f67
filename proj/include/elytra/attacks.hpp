#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "elytra/classifier.hpp"
#include "elytra/io.hpp"
#include "elytra/tensor.hpp"

namespace elytra {

enum class AttackKind { fgsm, pgd, apgd_ce, apgd_dlr, square, patch, autoattack };
enum class PatchShape { circle, square };
enum class LossKind { ce, dlr };

std::string_view attack_name(AttackKind kind);
AttackKind attack_from_name(std::string_view name);
std::string_view patch_shape_name(PatchShape shape);
PatchShape patch_shape_from_name(std::string_view name);

struct AttackSpec {
    AttackKind kind = AttackKind::pgd;
    float epsilon = 8.0f / 255.0f;
    float step = 2.0f / 255.0f;
    std::size_t iterations = 10;
    /// APGD momentum interpolation; 1 disables momentum.
    float apgd_alpha = 0.75f;
    /// APGD initial step; 0 selects 2ε.
    float apgd_step = 0.0f;
    /// Square attack query budget per sample.
    std::size_t queries = 1000;
    float square_p_init = 0.8f;

    PatchShape patch_shape = PatchShape::circle;
    std::size_t patch_iterations = 500;
    float patch_lr = 5.0f;
    std::size_t patch_batch = 16;
    float train_scale_min = 0.05f;
    float train_scale_max = 1.0f;
    float apply_scale_min = 0.1f;
    float apply_scale_max = 0.5f;
    float rotation_deg = 22.5f;

    /// Valid pixel box intersected with the ε-ball.
    float box_lo = 0.0f;
    float box_hi = 1.0f;
    std::uint64_t seed = 0;

    static AttackSpec defaults(AttackKind kind);
    void validate() const;
    Json to_json() const;
    static AttackSpec from_json(const Json &j);
};

/// Budget counters of one attack invocation.
struct AttackStats {
    /// Reverse sweeps observed on the instrumented tape counter.
    std::uint64_t gradient_calls = 0;
    /// Forward-only model evaluations, summed over samples.
    std::uint64_t queries = 0;
};

/// ℓ∞ ball of radius ε around x₀ intersected with the pixel box.
class FeasibleSet {
public:
    FeasibleSet(const Tensor &center, float epsilon, float lo = 0.0f, float hi = 1.0f);
    /// Ball clip, then box clamp.
    Tensor project(const Tensor &x) const;
    bool contains(const Tensor &x, float tol = 1e-6f) const;

private:
    const Tensor &center_;
    float epsilon_, lo_, hi_;
};

/// Per-sample loss values and the input gradient of their mean.
struct LossGrad {
    std::vector<float> loss;
    Tensor grad;
    Tensor logits;
};
LossGrad loss_and_grad(const Classifier &model, const Tensor &x, std::span<const int> labels, LossKind loss);
/// Logits without recording a backward rule.
Tensor query_logits(const Classifier &model, const Tensor &x);

Tensor fgsm(const Classifier &model, const Tensor &x, std::span<const int> labels, float epsilon,
            AttackStats *stats = nullptr, float box_lo = 0.0f, float box_hi = 1.0f);

Tensor pgd(const Classifier &model, const Tensor &x, std::span<const int> labels, const AttackSpec &spec,
           AttackStats *stats = nullptr, std::vector<Tensor> *trajectory = nullptr);

/// Inspection hooks for APGD.
struct ApgdTrace {
    std::vector<Tensor> iterates;
    /// Step size per sample after each iteration.
    std::vector<std::vector<float>> steps;
    /// Iteration indices (1-based count of completed steps) used as checkpoints.
    std::vector<std::size_t> checkpoints;
};
/// Checkpoints w_j = ⌈p_j·N⌉ with p₀ = 0, p₁ = 0.22, p_{j+1} = p_j + max(p_j − p_{j−1} − 0.03, 0.06).
std::vector<std::size_t> apgd_checkpoints(std::size_t iterations);

Tensor apgd(const Classifier &model, const Tensor &x, std::span<const int> labels, const AttackSpec &spec,
            LossKind loss, AttackStats *stats = nullptr, ApgdTrace *trace = nullptr);

/// Fraction of pixels resampled at query i of n (piecewise halving from p_init).
float square_p(std::size_t query, std::size_t budget, float p_init);

/// Random-search ℓ∞ attack. Sample i draws from an RNG derived from
/// (spec.seed, first_index + i), so results do not depend on batching.
Tensor square_attack(const Classifier &model, const Tensor &x, std::span<const int> labels, const AttackSpec &spec,
                     std::size_t first_index = 0, AttackStats *stats = nullptr);

/// APGD-CE, APGD-DLR (when k ≥ 3), then Square, each on samples still
/// classified correctly. Samples no component fools are returned unchanged.
Tensor autoattack_lite(const Classifier &model, const Tensor &x, std::span<const int> labels, const AttackSpec &spec,
                       std::size_t first_index = 0, AttackStats *stats = nullptr);

} // namespace elytra
