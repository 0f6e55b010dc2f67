#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "elytra/attacks.hpp"
#include "elytra/rng.hpp"

namespace elytra {

/// Trained patch pixels [C×P×P] and the shape mask confining them.
struct PatchArtifact {
    Tensor pixels;
    PatchShape shape = PatchShape::circle;
    /// Split the patch was optimized on.
    std::string source_split;
    AttackSpec spec;

    std::size_t side() const { return pixels.dim(1); }
    std::string content_hash() const;
};

/// Row-major P×P mask; a circle keeps pixel centres inside the inscribed disc.
std::vector<std::uint8_t> patch_mask(PatchShape shape, std::size_t side);

/// Where and how a patch lands on an image.
struct Placement {
    float scale = 1.0f;
    float angle_deg = 0.0f;
    /// Footprint side S = round(scale·W) and its top-left corner.
    std::size_t footprint = 0;
    std::size_t top = 0;
    std::size_t left = 0;
};

Placement sample_placement(Rng &rng, std::size_t height, std::size_t width, float scale_min, float scale_max,
                           float rotation_deg);

/// Appends, for every pixel of one C×H×W image, the patch element it takes
/// (or -1 to keep the image). Nearest-neighbour resampling under rotation.
/// Throws PlacementError when the transformed mask covers no pixel.
void placement_index(const Placement &placement, std::span<const std::uint8_t> mask, std::size_t patch_side,
                     std::size_t channels, std::size_t height, std::size_t width, std::vector<std::int64_t> &index);

/// Gradient ascent on cross-entropy over random placements (Adam, pixels
/// clamped to [0,1] after every step). Deterministic in spec.seed.
PatchArtifact train_patch(const Classifier &model, const Tensor &images, std::span<const int> labels,
                          const AttackSpec &spec, std::string source_split = "train");

/// Composites the patch onto every image at a placement drawn from
/// derive_seed(seed, first_index + i). Pixels outside the mask keep their bytes.
Tensor apply_patch(const PatchArtifact &patch, const Tensor &images, const AttackSpec &spec, std::uint64_t seed,
                   std::size_t first_index = 0);

void save_patch(const std::filesystem::path &dir, const PatchArtifact &patch, const Json &lineage = Json::object());
PatchArtifact load_patch(const std::filesystem::path &dir);

} // namespace elytra
