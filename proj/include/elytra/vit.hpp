#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "elytra/autodiff.hpp"
#include "elytra/classifier.hpp"
#include "elytra/io.hpp"
#include "elytra/lora.hpp"
#include "elytra/params.hpp"
#include "elytra/rng.hpp"

namespace elytra {

struct VitConfig {
    std::size_t image_size = 32;
    std::size_t channels = 3;
    std::size_t patch_size = 4;
    std::size_t embed_dim = 64;
    std::size_t depth = 4;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    std::size_t num_classes = 8;
    std::uint64_t seed = 0;

    void validate() const;
    std::size_t patches() const { return (image_size / patch_size) * (image_size / patch_size); }
    std::size_t tokens() const { return patches() + 1; }
    std::size_t input_dim() const { return channels * image_size * image_size; }
    Shape image_shape(std::size_t batch) const { return {batch, channels, image_size, image_size}; }

    Json to_json() const;
    static VitConfig from_json(const Json &j);
    bool operator==(const VitConfig &) const = default;
};

struct ParamShape {
    std::string name;
    Role role;
    Shape shape;
    int block;
};

/// Parameter layout of the model in store order, without allocating weights.
std::vector<ParamShape> vit_param_shapes(const VitConfig &cfg);

/// Σ_j r·(u_j + v_j) over the 2-D weights whose role is in `targets`, from shapes alone.
std::size_t adapter_count_from_shapes(const VitConfig &cfg, const std::set<Role> &targets, std::size_t rank);
/// 1 − adapter/total from shapes alone, for configs too large to instantiate.
double reduction_from_shapes(const VitConfig &cfg, const std::set<Role> &targets, std::size_t rank);
/// ViT-B/16 shapes (224 px, patch 16, dim 768, 12 blocks, 12 heads) with k classes.
VitConfig vit_base_config(std::size_t num_classes);

/// Weights ~ N(0, 0.02²) truncated at ±2σ; biases and position embeddings
/// zero; layernorm scale 1 / bias 0. Deterministic in cfg.seed.
ParameterStore init_params(const VitConfig &cfg);

/// Adapter participating in a forward pass.
struct AdapterUse {
    const LoraAdapter *adapter = nullptr;
    /// Record factors as tape variables (the adapter being trained).
    bool trainable = false;
    /// Apply the adapter's dropout to its branch input (training only).
    bool dropout = false;
};

/// Tape-bound view of a store and its adapters for one forward pass.
class BoundModel {
public:
    BoundModel(Tape &tape, const VitConfig &cfg, const ParameterStore &store, std::span<const AdapterUse> adapters,
               bool params_trainable = false, Rng *dropout_rng = nullptr);

    Var logits(Var images);

    /// Tape variables of the store, aligned with the store order.
    const std::vector<Var> &param_vars() const { return params_; }
    /// Variables of trainable adapter factors: (U, V) per factor of adapter i.
    const std::vector<std::pair<Var, Var>> &adapter_vars(std::size_t i) const { return adapters_[i].factors; }

private:
    struct BoundAdapter {
        const LoraAdapter *adapter;
        bool dropout;
        std::vector<std::pair<Var, Var>> factors;
    };

    Var param(const std::string &name) const;
    Var linear(Var x, const std::string &prefix);

    Tape &tape_;
    const VitConfig &cfg_;
    const ParameterStore &store_;
    std::vector<Var> params_;
    std::vector<BoundAdapter> adapters_;
    Rng *dropout_rng_;
};

/// Inference-mode logits with the supplied adapters applied as side branches.
Tensor forward_logits(const VitConfig &cfg, const ParameterStore &store, std::span<const LoraAdapter *const> adapters,
                      const Tensor &images);

/// Frozen-model adapter exposed to the attack suite.
class VitClassifier : public Classifier {
public:
    VitClassifier(const VitConfig &cfg, const ParameterStore &store, std::vector<const LoraAdapter *> adapters = {})
        : cfg_(cfg), store_(store), adapters_(std::move(adapters)) {}

    Var logits(Tape &tape, Var images) const override;
    std::size_t num_classes() const override { return cfg_.num_classes; }

private:
    const VitConfig &cfg_;
    const ParameterStore &store_;
    std::vector<const LoraAdapter *> adapters_;
};

/// Predicted class per image, evaluated in batches.
std::vector<int> predict(const VitConfig &cfg, const ParameterStore &store,
                         std::span<const LoraAdapter *const> adapters, const Tensor &images,
                         std::size_t batch_size = 64);

/// Checkpoint directory: checkpoint.json manifest + params.f32 blob.
struct Checkpoint {
    VitConfig config;
    ParameterStore store;
};
void save_checkpoint(const std::filesystem::path &dir, const VitConfig &cfg, const ParameterStore &store,
                     const Json &lineage = Json::object());
Checkpoint load_checkpoint(const std::filesystem::path &dir);

/// Slices rows [begin, end) of a batch tensor along axis 0.
Tensor slice_batch(const Tensor &t, std::size_t begin, std::size_t end);

} // namespace elytra
