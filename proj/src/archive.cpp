#include "elytra/archive.hpp"

#include <algorithm>

#include "elytra/error.hpp"
#include "elytra/ops.hpp"

namespace elytra {

namespace fs = std::filesystem;

double AdvArchive::success_rate() const {
    if (success.empty()) return 0.0;
    const auto hits = std::count(success.begin(), success.end(), std::uint8_t{1});
    return 100.0 * static_cast<double>(hits) / static_cast<double>(success.size());
}

std::string AdvArchive::content_hash() const {
    std::string labels_text;
    for (int y : labels) labels_text += std::to_string(y) + ",";
    return sha256_hex(spec.to_json().dump() + "|" + source_split + "|" + base_hash + "|" + patch_hash + "|" +
                      sha256_hex(labels_text) + "|" + sha256_floats(images.values()));
}

Tensor run_attack(const Classifier &model, const Tensor &x, std::span<const int> labels, const AttackSpec &spec,
                  const PatchArtifact *patch, std::size_t first_index, AttackStats *stats) {
    switch (spec.kind) {
    case AttackKind::fgsm:
        return fgsm(model, x, labels, spec.epsilon, stats, spec.box_lo, spec.box_hi);
    case AttackKind::pgd:
        return pgd(model, x, labels, spec, stats);
    case AttackKind::apgd_ce:
        return apgd(model, x, labels, spec, LossKind::ce, stats);
    case AttackKind::apgd_dlr:
        return apgd(model, x, labels, spec, LossKind::dlr, stats);
    case AttackKind::square:
        return square_attack(model, x, labels, spec, first_index, stats);
    case AttackKind::autoattack:
        return autoattack_lite(model, x, labels, spec, first_index, stats);
    case AttackKind::patch:
        if (patch == nullptr) throw MissingArtifactError("patch attack needs a trained patch (run train-patch)");
        return apply_patch(*patch, x, spec, spec.seed, first_index);
    }
    throw LookupError("unknown attack kind");
}

AdvArchive generate_archive(const VitConfig &cfg, const ParameterStore &base, const Tensor &images,
                            std::span<const int> labels, const AttackSpec &spec, const std::string &source_split,
                            const PatchArtifact *patch, std::size_t batch_size) {
    spec.validate();
    if (images.rank() != 4 || labels.size() != images.dim(0)) {
        throw DimensionError("archive generation needs [B×C×H×W] images with one label each");
    }
    const VitClassifier model(cfg, base);
    AdvArchive ar{spec, source_split, base.content_hash(), patch ? patch->content_hash() : std::string{},
                  Tensor(images.shape()), std::vector<int>(labels.begin(), labels.end()), {}, {}};
    const std::size_t n = images.dim(0), per = images.numel() / n;
    for (std::size_t b = 0; b < n; b += batch_size) {
        const std::size_t e = std::min(n, b + batch_size);
        const Tensor x = slice_batch(images, b, e);
        const Tensor adv = run_attack(model, x, labels.subspan(b, e - b), spec, patch, b, &ar.stats);
        std::copy_n(adv.data(), adv.numel(), ar.images.data() + b * per);
        const std::vector<int> pred = eager::argmax_rows(query_logits(model, adv));
        for (std::size_t i = 0; i < pred.size(); ++i) ar.success.push_back(pred[i] != labels[b + i] ? 1 : 0);
    }
    return ar;
}

void save_archive(const fs::path &dir, const AdvArchive &ar, const Json &lineage) {
    fs::create_directories(dir);
    write_f32_blob(dir / "images.f32", ar.images.values());
    write_json(dir / "archive.json", Json{{"format", "elytra-archive/1"},
                                          {"spec", ar.spec.to_json()},
                                          {"seed", ar.spec.seed},
                                          {"source_split", ar.source_split},
                                          {"base_hash", ar.base_hash},
                                          {"patch_hash", ar.patch_hash},
                                          {"image_shape", ar.images.shape()},
                                          {"labels", ar.labels},
                                          {"success", ar.success},
                                          {"success_rate", ar.success_rate()},
                                          {"gradient_calls", ar.stats.gradient_calls},
                                          {"queries", ar.stats.queries},
                                          {"content_hash", ar.content_hash()},
                                          {"lineage", lineage}});
}

AdvArchive load_archive(const fs::path &dir) {
    if (!fs::exists(dir / "archive.json")) {
        throw MissingArtifactError("no adversarial archive at " + dir.string() + " (run gen-attacks)");
    }
    const Json doc = read_json(dir / "archive.json");
    Shape shape = doc.at("image_shape").get<Shape>();
    std::vector<float> blob = read_f32_blob(dir / "images.f32");
    if (blob.size() != shape_numel(shape)) throw FormatError("archive blob length mismatch in " + dir.string());
    AdvArchive ar{AttackSpec::from_json(doc.at("spec")),
                  doc.at("source_split").get<std::string>(),
                  doc.at("base_hash").get<std::string>(),
                  doc.at("patch_hash").get<std::string>(),
                  Tensor(std::move(shape), std::move(blob)),
                  doc.at("labels").get<std::vector<int>>(),
                  doc.at("success").get<std::vector<std::uint8_t>>(),
                  {doc.at("gradient_calls").get<std::uint64_t>(), doc.at("queries").get<std::uint64_t>()}};
    if (ar.labels.size() != ar.images.dim(0) || ar.success.size() != ar.labels.size()) {
        throw FormatError("archive label/sample count mismatch in " + dir.string());
    }
    if (ar.content_hash() != doc.at("content_hash").get<std::string>()) {
        throw FormatError("archive content hash mismatch in " + dir.string());
    }
    return ar;
}

} // namespace elytra
