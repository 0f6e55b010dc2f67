#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "elytra/attacks.hpp"
#include "elytra/patch.hpp"
#include "elytra/vit.hpp"

namespace elytra {

/// Adversarial examples generated once against a frozen base checkpoint.
struct AdvArchive {
    AttackSpec spec;
    std::string source_split;
    /// Content hash of the base store the examples were generated against.
    std::string base_hash;
    /// Content hash of the patch used, for patch attacks.
    std::string patch_hash;
    Tensor images;
    std::vector<int> labels;
    /// 1 where the base model misclassifies the adversarial example.
    std::vector<std::uint8_t> success;
    AttackStats stats;

    std::size_t size() const { return labels.size(); }
    double success_rate() const;
    std::string content_hash() const;
};

/// Runs one attack over a batch; `first_index` keys the per-sample RNG streams.
Tensor run_attack(const Classifier &model, const Tensor &x, std::span<const int> labels, const AttackSpec &spec,
                  const PatchArtifact *patch, std::size_t first_index, AttackStats *stats);

AdvArchive generate_archive(const VitConfig &cfg, const ParameterStore &base, const Tensor &images,
                            std::span<const int> labels, const AttackSpec &spec, const std::string &source_split,
                            const PatchArtifact *patch = nullptr, std::size_t batch_size = 32);

/// Archive directory: archive.json manifest + images.f32 blob.
void save_archive(const std::filesystem::path &dir, const AdvArchive &archive, const Json &lineage = Json::object());
AdvArchive load_archive(const std::filesystem::path &dir);

} // namespace elytra
