#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "elytra/attacks.hpp"
#include "elytra/dataset.hpp"
#include "elytra/io.hpp"
#include "elytra/optim.hpp"
#include "elytra/trainer.hpp"
#include "elytra/vit.hpp"

namespace elytra {

struct NamedAttack {
    std::string name;
    AttackSpec spec;
};

struct CompositionConfig {
    /// "parallel" trains one Elytra per attack in `order`; "sequential" also
    /// rolls the order out forward (Sequence One) and inverted (Sequence Two).
    std::string mode = "sequential";
    std::vector<std::string> order;
    /// Mixing weights of the full parallel merge; empty means uniform.
    std::vector<double> pi;
};

struct SweepConfig {
    std::string attack = "PGD";
    std::vector<std::size_t> ranks{2, 4, 8, 16, 32};
    /// Empty means every k in 0..depth.
    std::vector<std::size_t> freeze_depths;
};

struct ExperimentConfig {
    std::string preset;
    /// Every stage seed is derived from this one.
    std::uint64_t seed = 0;
    DatasetConfig dataset;
    VitConfig model;
    std::vector<NamedAttack> attacks;
    LoraSpec lora;
    OptimSpec base_train;
    OptimSpec elytra_train;
    OptimSpec adversarial_train;
    CompositionConfig composition;
    SweepConfig sweep;
    /// Attack and evaluation batch size.
    std::size_t batch_size = 64;

    void validate() const;
    Json to_json() const;
    static ExperimentConfig from_json(const Json &j);
    const NamedAttack &attack(std::string_view name) const;
    std::size_t attack_index(std::string_view name) const;
    /// SHA-256 of the canonical JSON.
    std::string hash() const;
};

/// Named presets: "paper" (Appendix A settings at ViT-B/16 scale), "desk"
/// (pilot-calibrated micro-ViT run) and "smoke" (seconds-long plumbing run).
std::vector<std::string> preset_names();
Json preset_json(std::string_view name);

/// RFC 7386-style merge: objects merge key by key, anything else replaces.
Json merge_json(Json base, const Json &overrides);

/// Preset, then overrides, then the seed flag; stage seeds are re-derived last.
ExperimentConfig resolve_config(std::string_view preset, const Json &overrides = Json::object(),
                                std::optional<std::uint64_t> seed = std::nullopt);

/// One accuracy cell: accuracy = correct / total · 100.
struct EvalCell {
    std::size_t correct = 0;
    std::size_t total = 0;
    double accuracy() const;
};

struct EvalMatrix {
    std::vector<std::string> columns;
    std::vector<std::string> rows;
    /// cells[row][column].
    std::vector<std::vector<EvalCell>> cells;

    const EvalCell &at(std::string_view row, std::string_view column) const;
    Json to_json() const;
    static EvalMatrix from_json(const Json &j);
    /// variant,<columns...>,samples with accuracies to four decimals.
    std::string to_csv() const;
};

/// One point of an ablation sweep.
struct SweepPoint {
    std::size_t setting = 0;
    std::size_t trainable = 0;
    double clean = 0.0;
    double robust = 0.0;
};

/// Directory layout and stages of one experiment run. Every stage rewrites
/// <out>/config.json, checks the lineage of what it reads and records the
/// lineage of what it writes.
class Pipeline {
public:
    Pipeline(ExperimentConfig cfg, std::filesystem::path out);

    const ExperimentConfig &config() const { return cfg_; }
    const std::filesystem::path &out() const { return out_; }

    void gen_data();
    void train_base();
    void train_patches();
    /// All configured attacks, or only the named ones.
    void gen_attacks(const std::vector<std::string> &only = {});
    void compose();
    EvalMatrix evaluate();
    void report();
    std::vector<SweepPoint> rank_sweep();
    std::vector<SweepPoint> freeze_sweep();
    /// gen-data through report.
    void run_all();

    std::filesystem::path data_dir() const { return out_ / "data"; }
    std::filesystem::path base_dir() const { return out_ / "base"; }
    std::filesystem::path patch_dir(std::string_view attack) const;
    std::filesystem::path archive_dir(std::string_view attack, Split split) const;
    std::filesystem::path single_dir(std::string_view attack) const;
    /// `sequence` is 1 (forward order) or 2 (inverse order).
    std::filesystem::path sequence_dir(int sequence, std::size_t stage, std::string_view attack) const;
    std::filesystem::path eval_dir() const { return out_ / "eval"; }
    std::filesystem::path report_dir() const { return out_ / "report"; }
    std::filesystem::path sweep_dir() const { return out_ / "sweeps"; }

    /// Lineage-checked loaders.
    Dataset load_data() const;
    ParameterStore load_base(const Dataset &ds) const;
    AdvArchive load_attack_archive(std::string_view attack, Split split, const Dataset &ds,
                                   const ParameterStore &base) const;
    /// Content hash recorded in an archive manifest, without reading the blob.
    std::string archive_hash(std::string_view attack, Split split) const;
    LoraAdapter load_single(std::string_view attack, const std::string &base_hash) const;
    std::vector<LoraAdapter> load_sequence(int sequence, const std::string &base_hash) const;

    /// Elytras and patches train on the train split; matrices report the test split.
    static constexpr Split kTrainSplit = Split::train;
    static constexpr Split kEvalSplit = Split::test;

private:
    struct Variant;
    std::vector<Variant> variants(const std::string &base_hash, const ParameterStore &base, Json &lineage) const;
    Json eval_lineage(const Dataset &ds, const ParameterStore &base, Json adapters) const;
    void write_config() const;
    std::vector<std::string> sequence_order(int sequence) const;
    std::uint64_t elytra_seed(std::string_view attack) const;

    ExperimentConfig cfg_;
    std::filesystem::path out_;
};

/// Paths of every file under `dir` except timing files, relative and sorted.
std::vector<std::filesystem::path> artifact_files(const std::filesystem::path &dir);
/// Timing files hold wall-clock only and are excluded from reproducibility checks.
bool is_timing_file(const std::filesystem::path &path);

} // namespace elytra
