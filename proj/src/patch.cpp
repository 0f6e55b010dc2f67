#include "elytra/patch.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "elytra/error.hpp"
#include "elytra/ops.hpp"

namespace elytra {

namespace fs = std::filesystem;

std::string PatchArtifact::content_hash() const {
    return sha256_hex(std::string(patch_shape_name(shape)) + "|" + shape_str(pixels.shape()) + "|" +
                      sha256_floats(pixels.values()));
}

std::vector<std::uint8_t> patch_mask(PatchShape shape, std::size_t side) {
    std::vector<std::uint8_t> mask(side * side, 1);
    if (shape == PatchShape::square) return mask;
    const double r = static_cast<double>(side) / 2.0;
    for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
            const double dy = static_cast<double>(y) + 0.5 - r, dx = static_cast<double>(x) + 0.5 - r;
            mask[y * side + x] = dy * dy + dx * dx <= r * r ? 1 : 0;
        }
    }
    return mask;
}

Placement sample_placement(Rng &rng, std::size_t height, std::size_t width, float scale_min, float scale_max,
                           float rotation_deg) {
    Placement p;
    p.scale = rng.uniform(scale_min, scale_max);
    p.angle_deg = rng.uniform(-rotation_deg, rotation_deg);
    const auto s = static_cast<std::size_t>(std::lround(p.scale * static_cast<float>(width)));
    p.footprint = std::min({s, height, width});
    if (p.footprint == 0) {
        throw PlacementError("patch scale " + std::to_string(p.scale) + " on a " + std::to_string(width) +
                             "px image leaves an empty footprint");
    }
    p.top = rng.below(height - p.footprint + 1);
    p.left = rng.below(width - p.footprint + 1);
    return p;
}

void placement_index(const Placement &placement, std::span<const std::uint8_t> mask, std::size_t patch_side,
                     std::size_t channels, std::size_t height, std::size_t width, std::vector<std::int64_t> &index) {
    const std::size_t base = index.size(), plane = height * width;
    index.resize(base + channels * plane, -1);
    const std::size_t s = placement.footprint;
    if (s == 0 || placement.top + s > height || placement.left + s > width) {
        throw PlacementError("patch footprint does not fit the image");
    }
    const double theta = static_cast<double>(placement.angle_deg) * std::numbers::pi / 180.0;
    const double ct = std::cos(theta), st = std::sin(theta), half = static_cast<double>(s) / 2.0;
    const double to_patch = static_cast<double>(patch_side) / static_cast<double>(s);
    std::size_t covered = 0;
    for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
            const double dy = static_cast<double>(y) + 0.5 - half, dx = static_cast<double>(x) + 0.5 - half;
            // Inverse rotation takes the destination pixel back into the patch frame.
            const double py = (ct * dy + st * dx + half) * to_patch, px = (-st * dy + ct * dx + half) * to_patch;
            if (py < 0.0 || px < 0.0) continue;
            const auto iy = static_cast<std::size_t>(py), ix = static_cast<std::size_t>(px);
            if (iy >= patch_side || ix >= patch_side || mask[iy * patch_side + ix] == 0) continue;
            ++covered;
            const std::size_t dst = (placement.top + y) * width + placement.left + x;
            for (std::size_t c = 0; c < channels; ++c) {
                index[base + c * plane + dst] =
                    static_cast<std::int64_t>((c * patch_side + iy) * patch_side + ix);
            }
        }
    }
    if (covered == 0) {
        throw PlacementError("transformed patch mask covers no pixel (footprint " + std::to_string(s) + ")");
    }
}

PatchArtifact train_patch(const Classifier &model, const Tensor &images, std::span<const int> labels,
                          const AttackSpec &spec, std::string source_split) {
    spec.validate();
    if (images.rank() != 4 || images.dim(0) == 0) {
        throw ContractError("patch training needs a non-empty image split");
    }
    if (labels.size() != images.dim(0)) throw DimensionError("label count does not match image count");
    const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
    const std::size_t side = w, per_image = c * h * w;
    Rng rng(derive_seed(spec.seed, 0x9a7c4));

    PatchArtifact patch{Tensor(Shape{c, side, side}), spec.patch_shape, std::move(source_split), spec};
    for (auto &v : patch.pixels.values()) v = static_cast<float>(rng.uniform());
    const std::vector<std::uint8_t> mask = patch_mask(spec.patch_shape, side);

    constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
    std::vector<double> m(patch.pixels.numel(), 0.0), v(patch.pixels.numel(), 0.0);
    const std::size_t batch = std::min(spec.patch_batch, n);
    for (std::size_t it = 0; it < spec.patch_iterations; ++it) {
        Tensor xb(Shape{batch, c, h, w});
        std::vector<int> yb(batch);
        std::vector<std::int64_t> index;
        index.reserve(batch * per_image);
        for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t pick = rng.below(n);
            std::copy_n(images.data() + pick * per_image, per_image, xb.data() + b * per_image);
            yb[b] = labels[pick];
            const Placement pl =
                sample_placement(rng, h, w, spec.train_scale_min, spec.train_scale_max, spec.rotation_deg);
            placement_index(pl, mask, side, c, h, w, index);
        }
        Tape tape;
        Var pv = tape.variable(patch.pixels);
        Var composed = ops::overlay(tape.constant(std::move(xb)), pv, std::move(index));
        Var loss = ops::cross_entropy(model.logits(tape, composed), yb);
        const Var wrt[] = {pv};
        const Tensor g = std::move(tape.backward(loss, wrt)[0]);

        const double t = static_cast<double>(it + 1);
        const double c1 = 1.0 - std::pow(kBeta1, t), c2 = 1.0 - std::pow(kBeta2, t);
        for (std::size_t i = 0; i < patch.pixels.numel(); ++i) {
            const double gi = g[i];
            m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * gi;
            v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * gi * gi;
            const double upd = spec.patch_lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + kEps);
            patch.pixels[i] = std::clamp(static_cast<float>(patch.pixels[i] + upd), 0.0f, 1.0f);
        }
    }
    return patch;
}

Tensor apply_patch(const PatchArtifact &patch, const Tensor &images, const AttackSpec &spec, std::uint64_t seed,
                   std::size_t first_index) {
    spec.validate();
    if (images.rank() != 4) throw DimensionError("apply_patch expects [B×C×H×W], got " + shape_str(images.shape()));
    const std::size_t c = images.dim(1), h = images.dim(2), w = images.dim(3), per_image = c * h * w;
    if (patch.pixels.dim(0) != c) throw DimensionError("patch channel count does not match images");
    const std::vector<std::uint8_t> mask = patch_mask(patch.shape, patch.side());
    Tensor out = images;
    std::vector<std::int64_t> index;
    for (std::size_t b = 0; b < images.dim(0); ++b) {
        Rng rng(derive_seed(seed, first_index + b));
        const Placement pl = sample_placement(rng, h, w, spec.apply_scale_min, spec.apply_scale_max, spec.rotation_deg);
        index.clear();
        placement_index(pl, mask, patch.side(), c, h, w, index);
        float *dst = out.data() + b * per_image;
        for (std::size_t i = 0; i < per_image; ++i) {
            if (index[i] >= 0) dst[i] = patch.pixels[static_cast<std::size_t>(index[i])];
        }
    }
    return out;
}

void save_patch(const fs::path &dir, const PatchArtifact &patch, const Json &lineage) {
    fs::create_directories(dir);
    write_f32_blob(dir / "patch.f32", patch.pixels.values());
    write_json(dir / "patch.json", Json{{"format", "elytra-patch/1"},
                                        {"shape", std::string(patch_shape_name(patch.shape))},
                                        {"pixels_shape", patch.pixels.shape()},
                                        {"source_split", patch.source_split},
                                        {"spec", patch.spec.to_json()},
                                        {"content_hash", patch.content_hash()},
                                        {"lineage", lineage}});
}

PatchArtifact load_patch(const fs::path &dir) {
    if (!fs::exists(dir / "patch.json")) throw MissingArtifactError("no patch at " + dir.string());
    const Json doc = read_json(dir / "patch.json");
    Shape shape = doc.at("pixels_shape").get<Shape>();
    std::vector<float> blob = read_f32_blob(dir / "patch.f32");
    if (blob.size() != shape_numel(shape)) throw FormatError("patch blob length mismatch in " + dir.string());
    PatchArtifact p{Tensor(std::move(shape), std::move(blob)), patch_shape_from_name(doc.at("shape").get<std::string>()),
                    doc.at("source_split").get<std::string>(), AttackSpec::from_json(doc.at("spec"))};
    if (p.content_hash() != doc.at("content_hash").get<std::string>()) {
        throw FormatError("patch content hash mismatch in " + dir.string());
    }
    return p;
}

} // namespace elytra
