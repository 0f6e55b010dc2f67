#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "elytra/io.hpp"
#include "elytra/params.hpp"
#include "elytra/tensor.hpp"

namespace elytra {

/// One low-rank factor pair for target matrix W[u×v]: ΔW = (α/r)·U·V.
struct LoraFactor {
    std::string target;
    Tensor u; // u×r
    Tensor v; // r×v
};

/// A security patch: a rank-r update over a set of target matrices.
struct LoraAdapter {
    std::size_t rank = 16;
    float alpha = 32.0f;
    float dropout = 0.1f;
    std::string provenance;
    std::vector<LoraFactor> factors;

    float scaling() const { return alpha / static_cast<float>(rank); }
    const LoraFactor *find(std::string_view target) const;
    std::vector<std::string> targets() const;
    /// Σ_j r·(u_j + v_j).
    std::size_t trainable_count() const;
    /// Checks conformance of every factor with its target; throws LookupError / DimensionError.
    void validate_against(const ParameterStore &store) const;
    std::string content_hash() const;
};

/// Convex mixing weights π for parallel composition.
struct CompositionWeights {
    std::vector<double> pi;

    static CompositionWeights uniform(std::size_t n);
    static CompositionWeights one_hot(std::size_t n, std::size_t index);
    /// Throws ContractError unless pi.size() == n, every π ≥ 0 and Σπ = 1 within 1e-9.
    /// Zero weights are allowed so that one-hot vectors are valid.
    void validate(std::size_t n) const;
};

/// Named target-role presets: "attn_qv" (default), "attn_qkvo", "attn_mlp_head".
std::set<Role> target_preset(std::string_view name);
inline constexpr std::string_view kDefaultTargetPreset = "attn_qv";

/// Fresh adapter over every 2-D weight whose role is in `targets`:
/// U ~ N(0, 1/r), V = 0, so the adapter starts as an exact no-op.
LoraAdapter init_adapter(const ParameterStore &store, const std::set<Role> &targets, std::size_t rank, float alpha,
                         float dropout, std::uint64_t seed, std::string provenance = {});

/// Δθ_j = (α/r)·U_j·V_j per target.
std::map<std::string, Tensor> materialize(const LoraAdapter &adapter);

/// θ + Σ_ℓ π_ℓ Δθ^ℓ on the union of targets; the base store is not modified.
ParameterStore merge_parallel(const ParameterStore &base, std::span<const LoraAdapter> adapters,
                              const CompositionWeights &weights);
/// θ + Σ_ℓ Δθ^ℓ. The sum is independent of list order.
ParameterStore merge_sequential(const ParameterStore &base, std::span<const LoraAdapter> adapters);

std::size_t trainable_count(const LoraAdapter &adapter);
/// 1 − trainable/total.
double reduction_ratio(const LoraAdapter &adapter, const ParameterStore &store);

/// Adapter directory: adapter.json manifest + factors.f32 blob.
void save_adapter(const std::filesystem::path &dir, const LoraAdapter &adapter, const Json &lineage = Json::object());
LoraAdapter load_adapter(const std::filesystem::path &dir);

} // namespace elytra
