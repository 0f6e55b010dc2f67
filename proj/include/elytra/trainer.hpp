#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "elytra/archive.hpp"
#include "elytra/lora.hpp"
#include "elytra/optim.hpp"
#include "elytra/vit.hpp"

namespace elytra {

struct LabeledSet {
    std::string name;
    Tensor images;
    std::vector<int> labels;
};

/// Sets evaluated at the end of a training run.
struct EvalSets {
    const LabeledSet *clean = nullptr;
    std::vector<const LabeledSet *> attacks;
};

struct TrainReport {
    std::string phase;
    std::uint64_t seed = 0;
    std::vector<double> epoch_loss;
    /// Percentages; negative when not evaluated.
    double clean_accuracy = -1.0;
    std::map<std::string, double> attack_accuracy;
    std::size_t trainable_params = 0;
    /// Keys of the optimizer state, i.e. exactly what received updates.
    std::vector<std::string> optimizer_keys;
    /// Wall clock; kept out of to_json so reports stay byte-reproducible.
    double seconds = 0.0;

    Json to_json() const;
};

/// Hyperparameters of a fresh adapter.
struct LoraSpec {
    std::size_t rank = 16;
    float alpha = 32.0f;
    float dropout = 0.1f;
    std::string targets = std::string(kDefaultTargetPreset);

    Json to_json() const;
    static LoraSpec from_json(const Json &j);
};

/// correct / total · 100 over argmax predictions.
double accuracy(const VitConfig &cfg, const ParameterStore &store, std::span<const LoraAdapter *const> adapters,
                const Tensor &images, std::span<const int> labels, std::vector<int> *predictions = nullptr);

/// Cross-entropy training of every non-frozen parameter on a clean split.
TrainReport fine_tune_base(const VitConfig &cfg, ParameterStore &store, const LabeledSet &train,
                           const OptimSpec &spec, std::uint64_t seed, const EvalSets &eval = {});

/// Trains `adapter` on a precomputed archive against base + Σ priors, all
/// frozen. The archive must have been generated against `base` itself.
TrainReport train_elytra(const VitConfig &cfg, const ParameterStore &base, std::span<const LoraAdapter> priors,
                         LoraAdapter &adapter, const AdvArchive &archive, const OptimSpec &spec, std::uint64_t seed,
                         const EvalSets &eval = {});

struct ElytraJob {
    const AdvArchive *archive = nullptr;
    std::uint64_t seed = 0;
    std::string provenance;
};

/// L independent games: every adapter sees the bare base only.
std::vector<LoraAdapter> train_parallel(const VitConfig &cfg, const ParameterStore &base,
                                        std::span<const ElytraJob> jobs, const LoraSpec &lora, const OptimSpec &spec,
                                        std::vector<TrainReport> *reports = nullptr);

/// Stage ℓ trains against base + Σ_{i<ℓ} Δθ^i; archives stay those of the bare base.
std::vector<LoraAdapter> train_sequential(const VitConfig &cfg, const ParameterStore &base,
                                          std::span<const ElytraJob> jobs, const LoraSpec &lora,
                                          const OptimSpec &spec, std::vector<TrainReport> *reports = nullptr);

/// Freezes all but the last k blocks; the final norm and head stay trainable,
/// and k = depth also releases the embeddings so nothing is frozen.
void apply_freeze_depth(const VitConfig &cfg, ParameterStore &store, std::size_t k);

/// Full-weight adversarial fine-tuning baseline with freeze depth k.
TrainReport adversarial_fine_tune(const VitConfig &cfg, ParameterStore &store, std::size_t k,
                                  const LabeledSet &train, const OptimSpec &spec, std::uint64_t seed,
                                  const EvalSets &eval = {});

} // namespace elytra
