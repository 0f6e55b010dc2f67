#include "elytra/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "elytra/error.hpp"
#include "elytra/lora.hpp"
#include "elytra/patch.hpp"
#include "elytra/rng.hpp"

namespace elytra {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kDatasetStream = 1;
constexpr std::uint64_t kModelStream = 2;
constexpr std::uint64_t kAttackStream = 3;
constexpr std::uint64_t kBaseTrainStream = 4;
constexpr std::uint64_t kElytraStream = 5;
constexpr std::uint64_t kRankSweepStream = 6;
constexpr std::uint64_t kFreezeSweepStream = 7;
constexpr std::uint64_t kSplitStream = 100;

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void write_timings(const fs::path &dir, const Json &doc) {
    fs::create_directories(dir);
    write_json(dir / "timings.json", doc);
}

std::string fixed(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string section_hash(const Json &j) { return sha256_hex(j.dump()); }

void check_lineage(const Json &stored, const Json &expected, const fs::path &where, std::string_view producer) {
    if (stored != expected) {
        throw ProvenanceError(where.string() + " was produced from different inputs or settings; re-run " +
                              std::string(producer));
    }
}

void require(const fs::path &manifest, std::string_view what, std::string_view producer) {
    if (!fs::exists(manifest)) {
        throw MissingArtifactError("missing " + std::string(what) + " at " + manifest.parent_path().string() +
                                   "; run `elytra_cli " + std::string(producer) + "` first");
    }
}

bool valid_name(const std::string &name) {
    if (name.empty()) return false;
    return std::all_of(name.begin(), name.end(), [](char c) {
        return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '-' || c == '_';
    });
}

std::string csv_field(const std::string &s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

Json named_attack_json(const NamedAttack &a) {
    Json j = a.spec.to_json();
    j["name"] = a.name;
    return j;
}

NamedAttack attack(std::string name, AttackKind kind) { return {std::move(name), AttackSpec::defaults(kind)}; }

NamedAttack patch_attack(std::string name, PatchShape shape) {
    NamedAttack a = attack(std::move(name), AttackKind::patch);
    a.spec.patch_shape = shape;
    return a;
}

/// Five composition attacks in the order of Sequence One.
std::vector<std::string> sequence_one() { return {"Circle", "PGD", "PatchSquare", "FGSM", "AutoAttack-lite"}; }

std::vector<NamedAttack> standard_attacks() {
    return {attack("FGSM", AttackKind::fgsm),
            attack("PGD", AttackKind::pgd),
            attack("Square", AttackKind::square),
            patch_attack("Circle", PatchShape::circle),
            patch_attack("PatchSquare", PatchShape::square),
            attack("AutoAttack-lite", AttackKind::autoattack)};
}

ExperimentConfig paper_preset() {
    ExperimentConfig c;
    c.preset = "paper";
    c.seed = 0;
    c.dataset.classes = 21;
    // 56,521 images over 21 classes.
    c.dataset.per_class = 2692;
    c.dataset.image_size = 224;
    c.model = vit_base_config(21);
    c.attacks = standard_attacks();
    c.base_train = OptimSpec{};
    c.base_train.lr = 1e-4;
    c.base_train.epochs = 24;
    c.base_train.batch_size = 32;
    c.elytra_train = OptimSpec{};
    c.elytra_train.epochs = 4;
    c.adversarial_train = OptimSpec{};
    c.adversarial_train.lr = 1e-5;
    c.adversarial_train.batch_size = 64;
    c.adversarial_train.epochs = 12;
    c.adversarial_train.step = 10;
    c.adversarial_train.gamma = 0.5;
    c.composition.order = sequence_one();
    return c;
}

ExperimentConfig desk_preset() {
    ExperimentConfig c;
    c.preset = "desk";
    c.seed = 7;
    c.attacks = standard_attacks();
    for (auto &a : c.attacks) {
        if (a.spec.kind == AttackKind::square) a.spec.queries = 100;
        if (a.spec.kind == AttackKind::autoattack) {
            a.spec.iterations = 20;
            a.spec.queries = 100;
        }
    }
    c.base_train.lr = 1e-3;
    c.base_train.epochs = 24;
    c.elytra_train.lr = 5e-5;
    c.elytra_train.epochs = 4;
    c.adversarial_train.lr = 1e-4;
    c.adversarial_train.batch_size = 64;
    c.adversarial_train.epochs = 12;
    c.adversarial_train.step = 10;
    c.adversarial_train.gamma = 0.5;
    c.composition.order = sequence_one();
    return c;
}

ExperimentConfig smoke_preset() {
    ExperimentConfig c;
    c.preset = "smoke";
    c.seed = 1;
    c.dataset.classes = 4;
    c.dataset.per_class = 20;
    c.dataset.image_size = 16;
    c.model.image_size = 16;
    c.model.patch_size = 4;
    c.model.embed_dim = 16;
    c.model.depth = 2;
    c.model.heads = 2;
    c.model.mlp_ratio = 2;
    c.model.num_classes = 4;
    c.attacks = standard_attacks();
    for (auto &a : c.attacks) {
        a.spec.queries = 20;
        a.spec.patch_iterations = 10;
        if (a.spec.kind == AttackKind::autoattack) a.spec.iterations = 5;
    }
    c.lora.rank = 4;
    c.lora.alpha = 8.0f;
    for (OptimSpec *o : {&c.base_train, &c.elytra_train, &c.adversarial_train}) {
        o->batch_size = 16;
        o->epochs = 1;
    }
    c.base_train.lr = 1e-2;
    c.base_train.epochs = 20;
    c.elytra_train.lr = 1e-3;
    c.composition.order = sequence_one();
    c.sweep.ranks = {2, 4, 8, 16};
    c.batch_size = 16;
    return c;
}

} // namespace

// ---------------------------------------------------------------- config

void ExperimentConfig::validate() const {
    dataset.validate();
    model.validate();
    if (dataset.classes != model.num_classes) throw ConfigError("dataset classes and model classes differ");
    if (dataset.image_size != model.image_size) throw ConfigError("dataset and model image sizes differ");
    if (model.channels != 3) throw ConfigError("rendered images have 3 channels");
    std::set<std::string> names;
    for (const auto &a : attacks) {
        if (!valid_name(a.name)) throw ConfigError("attack name '" + a.name + "' must be [A-Za-z0-9_-]+");
        if (!names.insert(a.name).second) throw ConfigError("duplicate attack name '" + a.name + "'");
        a.spec.validate();
    }
    target_preset(lora.targets);
    if (lora.rank == 0) throw ConfigError("LoRA rank must be positive");
    base_train.validate();
    elytra_train.validate();
    adversarial_train.validate();
    if (composition.mode != "parallel" && composition.mode != "sequential") {
        throw ConfigError("composition mode must be parallel or sequential");
    }
    std::set<std::string> seen;
    for (const auto &n : composition.order) {
        if (!names.contains(n)) throw ConfigError("composition order names unknown attack '" + n + "'");
        if (!seen.insert(n).second) throw ConfigError("composition order repeats '" + n + "'");
    }
    if (!composition.pi.empty()) {
        try {
            CompositionWeights{composition.pi}.validate(composition.order.size());
        } catch (const ContractError &e) {
            throw ConfigError(std::string("composition pi: ") + e.what());
        }
    }
    if (sweep.ranks.empty()) throw ConfigError("rank sweep needs at least one rank");
    for (std::size_t r : sweep.ranks) {
        if (r == 0) throw ConfigError("sweep ranks must be positive");
    }
    for (std::size_t k : sweep.freeze_depths) {
        if (k > model.depth) throw ConfigError("freeze depth exceeds model depth");
    }
    if (batch_size == 0) throw ConfigError("batch size must be positive");
}

Json ExperimentConfig::to_json() const {
    Json atk = Json::array();
    for (const auto &a : attacks) atk.push_back(named_attack_json(a));
    return Json{{"preset", preset},
                {"seed", seed},
                {"dataset", dataset.to_json()},
                {"model", model.to_json()},
                {"attacks", atk},
                {"lora", lora.to_json()},
                {"training", {{"base", base_train.to_json()},
                              {"elytra", elytra_train.to_json()},
                              {"adversarial", adversarial_train.to_json()}}},
                {"composition", {{"mode", composition.mode}, {"order", composition.order}, {"pi", composition.pi}}},
                {"sweep", {{"attack", sweep.attack},
                           {"ranks", sweep.ranks},
                           {"freeze_depths", sweep.freeze_depths}}},
                {"batch_size", batch_size}};
}

ExperimentConfig ExperimentConfig::from_json(const Json &j) {
    try {
        ExperimentConfig c;
        c.preset = j.value("preset", std::string());
        c.seed = j.value("seed", c.seed);
        if (j.contains("dataset")) c.dataset = DatasetConfig::from_json(j.at("dataset"));
        if (j.contains("model")) c.model = VitConfig::from_json(j.at("model"));
        if (j.contains("attacks")) {
            for (const auto &a : j.at("attacks")) {
                c.attacks.push_back({a.at("name").get<std::string>(), AttackSpec::from_json(a)});
            }
        }
        if (j.contains("lora")) c.lora = LoraSpec::from_json(j.at("lora"));
        if (j.contains("training")) {
            const Json &t = j.at("training");
            if (t.contains("base")) c.base_train = OptimSpec::from_json(t.at("base"));
            if (t.contains("elytra")) c.elytra_train = OptimSpec::from_json(t.at("elytra"));
            if (t.contains("adversarial")) c.adversarial_train = OptimSpec::from_json(t.at("adversarial"));
        }
        if (j.contains("composition")) {
            const Json &t = j.at("composition");
            c.composition.mode = t.value("mode", c.composition.mode);
            c.composition.order = t.value("order", c.composition.order);
            c.composition.pi = t.value("pi", c.composition.pi);
        }
        if (j.contains("sweep")) {
            const Json &t = j.at("sweep");
            c.sweep.attack = t.value("attack", c.sweep.attack);
            c.sweep.ranks = t.value("ranks", c.sweep.ranks);
            c.sweep.freeze_depths = t.value("freeze_depths", c.sweep.freeze_depths);
        }
        c.batch_size = j.value("batch_size", c.batch_size);
        c.validate();
        return c;
    } catch (const Json::exception &e) {
        throw ConfigError(std::string("malformed experiment config: ") + e.what());
    } catch (const LookupError &e) {
        throw ConfigError(e.what());
    }
}

const NamedAttack &ExperimentConfig::attack(std::string_view name) const { return attacks[attack_index(name)]; }

std::size_t ExperimentConfig::attack_index(std::string_view name) const {
    for (std::size_t i = 0; i < attacks.size(); ++i) {
        if (attacks[i].name == name) return i;
    }
    throw LookupError("no attack named '" + std::string(name) + "' in the config");
}

std::string ExperimentConfig::hash() const { return section_hash(to_json()); }

std::vector<std::string> preset_names() { return {"desk", "paper", "smoke"}; }

Json preset_json(std::string_view name) {
    if (name == "paper") return paper_preset().to_json();
    if (name == "desk") return desk_preset().to_json();
    if (name == "smoke") return smoke_preset().to_json();
    throw ConfigError("unknown preset '" + std::string(name) + "' (known: desk, paper, smoke)");
}

Json merge_json(Json base, const Json &overrides) {
    if (!overrides.is_object() || !base.is_object()) return overrides;
    for (auto it = overrides.begin(); it != overrides.end(); ++it) {
        if (it.value().is_null()) {
            base.erase(it.key());
        } else if (base.contains(it.key())) {
            base[it.key()] = merge_json(base[it.key()], it.value());
        } else {
            base[it.key()] = it.value();
        }
    }
    return base;
}

ExperimentConfig resolve_config(std::string_view preset, const Json &overrides, std::optional<std::uint64_t> seed) {
    if (!overrides.is_object()) throw ConfigError("config overrides must be a JSON object");
    Json doc = merge_json(preset_json(overrides.value("preset", std::string(preset))), overrides);
    if (seed) doc["seed"] = *seed;
    ExperimentConfig c = ExperimentConfig::from_json(doc);
    c.dataset.seed = derive_seed(c.seed, kDatasetStream);
    c.model.seed = derive_seed(c.seed, kModelStream);
    for (std::size_t i = 0; i < c.attacks.size(); ++i) c.attacks[i].spec.seed = derive_seed(c.seed, kAttackStream, i);
    return c;
}

// ---------------------------------------------------------------- matrix

double EvalCell::accuracy() const {
    return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total) * 100.0;
}

const EvalCell &EvalMatrix::at(std::string_view row, std::string_view column) const {
    const auto r = std::find(rows.begin(), rows.end(), row);
    const auto c = std::find(columns.begin(), columns.end(), column);
    if (r == rows.end() || c == columns.end()) {
        throw LookupError("no matrix cell (" + std::string(row) + ", " + std::string(column) + ")");
    }
    return cells[static_cast<std::size_t>(r - rows.begin())][static_cast<std::size_t>(c - columns.begin())];
}

Json EvalMatrix::to_json() const {
    Json out = Json::array();
    for (std::size_t r = 0; r < rows.size(); ++r) {
        Json cs = Json::array();
        for (const auto &c : cells[r]) {
            cs.push_back(Json{{"correct", c.correct}, {"total", c.total}, {"accuracy", c.accuracy()}});
        }
        out.push_back(Json{{"variant", rows[r]}, {"cells", cs}});
    }
    return Json{{"columns", columns}, {"rows", out}};
}

EvalMatrix EvalMatrix::from_json(const Json &j) {
    EvalMatrix m;
    m.columns = j.at("columns").get<std::vector<std::string>>();
    for (const auto &r : j.at("rows")) {
        m.rows.push_back(r.at("variant").get<std::string>());
        std::vector<EvalCell> cs;
        for (const auto &c : r.at("cells")) cs.push_back({c.at("correct").get<std::size_t>(), c.at("total").get<std::size_t>()});
        if (cs.size() != m.columns.size()) throw FormatError("matrix row has the wrong number of cells");
        m.cells.push_back(std::move(cs));
    }
    return m;
}

std::string EvalMatrix::to_csv() const {
    std::string out = "variant";
    for (const auto &c : columns) out += "," + csv_field(c);
    out += ",samples\n";
    for (std::size_t r = 0; r < rows.size(); ++r) {
        out += csv_field(rows[r]);
        for (const auto &c : cells[r]) out += "," + fixed(c.accuracy());
        out += "," + std::to_string(cells[r].empty() ? 0 : cells[r].front().total) + "\n";
    }
    return out;
}

// ---------------------------------------------------------------- pipeline

struct Pipeline::Variant {
    std::string name;
    ParameterStore store;
    std::size_t adapters = 0;
    std::size_t trainable = 0;
};

Pipeline::Pipeline(ExperimentConfig cfg, fs::path out) : cfg_(std::move(cfg)), out_(std::move(out)) {
    cfg_.validate();
}

fs::path Pipeline::patch_dir(std::string_view attack) const { return out_ / "patches" / std::string(attack); }

fs::path Pipeline::archive_dir(std::string_view attack, Split split) const {
    return out_ / "attacks" / std::string(attack) / std::string(split_name(split));
}

fs::path Pipeline::single_dir(std::string_view attack) const { return out_ / "elytras" / "single" / std::string(attack); }

fs::path Pipeline::sequence_dir(int sequence, std::size_t stage, std::string_view attack) const {
    const std::string seq = sequence == 1 ? "sequence_one" : "sequence_two";
    return out_ / "elytras" / seq / (std::to_string(stage + 1) + "_" + std::string(attack));
}

void Pipeline::write_config() const {
    fs::create_directories(out_);
    write_json(out_ / "config.json", cfg_.to_json());
}

std::vector<std::string> Pipeline::sequence_order(int sequence) const {
    std::vector<std::string> order = cfg_.composition.order;
    if (sequence == 2) std::reverse(order.begin(), order.end());
    return order;
}

std::uint64_t Pipeline::elytra_seed(std::string_view attack) const {
    return derive_seed(cfg_.seed, kElytraStream, cfg_.attack_index(attack));
}

namespace {

/// Seed of an attack on one split; patches train with the unsplit seed.
AttackSpec split_spec(const NamedAttack &a, Split split) {
    AttackSpec s = a.spec;
    s.seed = derive_seed(a.spec.seed, kSplitStream + static_cast<std::uint64_t>(split));
    return s;
}

Json base_lineage(const ExperimentConfig &cfg, const Dataset &ds) {
    return Json{{"dataset", ds.content_hash()},
                {"model", section_hash(cfg.model.to_json())},
                {"train", section_hash(cfg.base_train.to_json())},
                {"seed", derive_seed(cfg.seed, kBaseTrainStream)}};
}

Json patch_lineage(const NamedAttack &a, const Dataset &ds, const std::string &base_hash) {
    return Json{{"base", base_hash}, {"dataset", ds.content_hash()}, {"attack", section_hash(a.spec.to_json())}};
}

Json archive_lineage(const NamedAttack &a, Split split, const Dataset &ds, const std::string &base_hash,
                     const std::string &patch_hash) {
    return Json{{"base", base_hash},
                {"dataset", ds.content_hash()},
                {"attack", section_hash(split_spec(a, split).to_json())},
                {"split", std::string(split_name(split))},
                {"patch", patch_hash}};
}

} // namespace

Dataset Pipeline::load_data() const {
    require(data_dir() / "manifest.json", "dataset", "gen-data");
    Dataset ds = load_dataset(data_dir());
    if (ds.config.to_json() != cfg_.dataset.to_json()) {
        throw ProvenanceError(data_dir().string() + " was generated with a different dataset config; re-run gen-data");
    }
    return ds;
}

ParameterStore Pipeline::load_base(const Dataset &ds) const {
    require(base_dir() / "checkpoint.json", "base checkpoint", "train-base");
    Checkpoint ck = load_checkpoint(base_dir());
    if (!(ck.config == cfg_.model)) {
        throw ProvenanceError(base_dir().string() + " holds a different model config; re-run train-base");
    }
    check_lineage(read_json(base_dir() / "checkpoint.json").at("lineage"), base_lineage(cfg_, ds), base_dir(),
                  "train-base");
    return std::move(ck.store);
}

AdvArchive Pipeline::load_attack_archive(std::string_view attack, Split split, const Dataset &ds,
                                         const ParameterStore &base) const {
    const NamedAttack &a = cfg_.attack(attack);
    const fs::path dir = archive_dir(attack, split);
    require(dir / "archive.json", "archive for " + a.name, "gen-attacks");
    AdvArchive ar = load_archive(dir);
    const std::string base_hash = base.content_hash();
    if (ar.base_hash != base_hash) {
        throw ProvenanceError(dir.string() + " was generated against a different base; re-run gen-attacks");
    }
    std::string patch_hash;
    if (a.spec.kind == AttackKind::patch) {
        require(patch_dir(attack) / "patch.json", "patch for " + a.name, "train-patch");
        patch_hash = read_json(patch_dir(attack) / "patch.json").at("content_hash").get<std::string>();
    }
    check_lineage(read_json(dir / "archive.json").at("lineage"), archive_lineage(a, split, ds, base_hash, patch_hash),
                  dir, "gen-attacks");
    if (ar.labels != ds.split_labels(split)) {
        throw ProvenanceError(dir.string() + " labels differ from the dataset split; re-run gen-attacks");
    }
    return ar;
}

std::string Pipeline::archive_hash(std::string_view attack, Split split) const {
    const fs::path dir = archive_dir(attack, split);
    require(dir / "archive.json", "archive for " + std::string(attack), "gen-attacks");
    return read_json(dir / "archive.json").at("content_hash").get<std::string>();
}

namespace {

Json adapter_lineage(const ExperimentConfig &cfg, const std::string &base_hash, const std::string &archive_hash,
                     std::uint64_t seed, const std::vector<std::string> &priors) {
    return Json{{"base", base_hash},
                {"archive", archive_hash},
                {"lora", section_hash(cfg.lora.to_json())},
                {"train", section_hash(cfg.elytra_train.to_json())},
                {"seed", seed},
                {"priors", priors}};
}

LoraAdapter load_checked_adapter(const fs::path &dir, const Json &expected) {
    require(dir / "adapter.json", "Elytra", "compose");
    LoraAdapter ad = load_adapter(dir);
    const Json doc = read_json(dir / "adapter.json");
    check_lineage(doc.value("lineage", Json::object()), expected, dir, "compose");
    return ad;
}

} // namespace

LoraAdapter Pipeline::load_single(std::string_view attack, const std::string &base_hash) const {
    return load_checked_adapter(single_dir(attack), adapter_lineage(cfg_, base_hash, archive_hash(attack, kTrainSplit),
                                                                    elytra_seed(attack), {}));
}

std::vector<LoraAdapter> Pipeline::load_sequence(int sequence, const std::string &base_hash) const {
    const std::vector<std::string> order = sequence_order(sequence);
    std::vector<LoraAdapter> out;
    std::vector<std::string> priors;
    for (std::size_t i = 0; i < order.size(); ++i) {
        out.push_back(load_checked_adapter(
            sequence_dir(sequence, i, order[i]),
            adapter_lineage(cfg_, base_hash, archive_hash(order[i], kTrainSplit), elytra_seed(order[i]), priors)));
        priors.push_back(out.back().content_hash());
    }
    return out;
}

void Pipeline::gen_data() {
    write_config();
    Stopwatch sw;
    const Dataset ds = generate(cfg_.dataset);
    save_dataset(data_dir(), ds);
    write_timings(data_dir(), Json{{"gen-data", sw.seconds()}});
}

void Pipeline::train_base() {
    write_config();
    Stopwatch sw;
    const Dataset ds = load_data();
    const LabeledSet train{"train", ds.split_images(kTrainSplit), ds.split_labels(kTrainSplit)};
    const LabeledSet test{"test", ds.split_images(kEvalSplit), ds.split_labels(kEvalSplit)};
    ParameterStore store = init_params(cfg_.model);
    const TrainReport rep = fine_tune_base(cfg_.model, store, train, cfg_.base_train,
                                           derive_seed(cfg_.seed, kBaseTrainStream), EvalSets{&test, {}});
    save_checkpoint(base_dir(), cfg_.model, store, base_lineage(cfg_, ds));
    write_json(base_dir() / "report.json", rep.to_json());
    write_timings(base_dir(), Json{{"train-base", sw.seconds()}});
}

void Pipeline::train_patches() {
    write_config();
    const Dataset ds = load_data();
    const ParameterStore base = load_base(ds);
    const std::string base_hash = base.content_hash();
    const Tensor images = ds.split_images(kTrainSplit);
    const std::vector<int> labels = ds.split_labels(kTrainSplit);
    const VitClassifier model(cfg_.model, base);
    for (const auto &a : cfg_.attacks) {
        if (a.spec.kind != AttackKind::patch) continue;
        Stopwatch sw;
        const PatchArtifact patch = train_patch(model, images, labels, a.spec, std::string(split_name(kTrainSplit)));
        save_patch(patch_dir(a.name), patch, patch_lineage(a, ds, base_hash));
        write_timings(patch_dir(a.name), Json{{"train-patch", sw.seconds()}});
    }
}

void Pipeline::gen_attacks(const std::vector<std::string> &only) {
    write_config();
    for (const auto &n : only) cfg_.attack(n);
    const Dataset ds = load_data();
    const ParameterStore base = load_base(ds);
    const std::string base_hash = base.content_hash();
    for (const auto &a : cfg_.attacks) {
        if (!only.empty() && std::find(only.begin(), only.end(), a.name) == only.end()) continue;
        std::optional<PatchArtifact> patch;
        if (a.spec.kind == AttackKind::patch) {
            require(patch_dir(a.name) / "patch.json", "patch for " + a.name, "train-patch");
            patch = load_patch(patch_dir(a.name));
            check_lineage(read_json(patch_dir(a.name) / "patch.json").at("lineage"), patch_lineage(a, ds, base_hash),
                          patch_dir(a.name), "train-patch");
        }
        for (Split split : {kTrainSplit, kEvalSplit}) {
            Stopwatch sw;
            const AdvArchive ar =
                generate_archive(cfg_.model, base, ds.split_images(split), ds.split_labels(split), split_spec(a, split),
                                 std::string(split_name(split)), patch ? &*patch : nullptr, cfg_.batch_size);
            const fs::path dir = archive_dir(a.name, split);
            save_archive(dir, ar,
                         archive_lineage(a, split, ds, base_hash, patch ? patch->content_hash() : std::string()));
            write_timings(dir, Json{{"gen-attacks", sw.seconds()}});
        }
    }
}

void Pipeline::compose() {
    write_config();
    const Dataset ds = load_data();
    const ParameterStore base = load_base(ds);
    const std::string base_hash = base.content_hash();
    const auto &order = cfg_.composition.order;
    std::map<std::string, AdvArchive> archives;
    for (const auto &name : order) archives.emplace(name, load_attack_archive(name, kTrainSplit, ds, base));

    const auto jobs_for = [&](const std::vector<std::string> &names) {
        std::vector<ElytraJob> jobs;
        for (const auto &n : names) jobs.push_back({&archives.at(n), elytra_seed(n), n});
        return jobs;
    };

    // Singles are independent games, so training them one at a time gives each its own timing.
    const std::vector<ElytraJob> singles = jobs_for(order);
    for (std::size_t i = 0; i < order.size(); ++i) {
        Stopwatch sw;
        std::vector<TrainReport> reports;
        const std::vector<LoraAdapter> trained = train_parallel(cfg_.model, base, std::span(&singles[i], 1), cfg_.lora,
                                                                cfg_.elytra_train, &reports);
        const fs::path dir = single_dir(order[i]);
        save_adapter(dir, trained.front(),
                     adapter_lineage(cfg_, base_hash, archives.at(order[i]).content_hash(), singles[i].seed, {}));
        write_json(dir / "report.json", reports.front().to_json());
        write_timings(dir, Json{{"compose", sw.seconds()}});
    }
    if (cfg_.composition.mode != "sequential") return;

    for (int sequence : {1, 2}) {
        const std::vector<std::string> seq = sequence_order(sequence);
        Stopwatch ssw;
        std::vector<TrainReport> seq_reports;
        const std::vector<ElytraJob> jobs = jobs_for(seq);
        const std::vector<LoraAdapter> stages =
            train_sequential(cfg_.model, base, jobs, cfg_.lora, cfg_.elytra_train, &seq_reports);
        const double seconds = ssw.seconds();
        std::vector<std::string> priors;
        for (std::size_t i = 0; i < seq.size(); ++i) {
            const fs::path dir = sequence_dir(sequence, i, seq[i]);
            save_adapter(dir, stages[i],
                         adapter_lineage(cfg_, base_hash, archives.at(seq[i]).content_hash(), jobs[i].seed, priors));
            write_json(dir / "report.json", seq_reports[i].to_json());
            write_timings(dir, Json{{"compose", seconds / static_cast<double>(seq.size())}});
            priors.push_back(stages[i].content_hash());
        }
    }
}

std::vector<Pipeline::Variant> Pipeline::variants(const std::string &base_hash, const ParameterStore &base,
                                                  Json &lineage) const {
    std::vector<Variant> out;
    out.push_back({"Baseline", base, 0, 0});
    const auto &order = cfg_.composition.order;
    if (order.empty()) return out;

    std::vector<LoraAdapter> singles;
    for (const auto &name : order) {
        singles.push_back(load_single(name, base_hash));
        lineage[single_dir(name).lexically_relative(out_).generic_string()] = singles.back().content_hash();
    }
    const auto count = [](std::span<const LoraAdapter> ads) {
        std::size_t n = 0;
        for (const auto &a : ads) n += trainable_count(a);
        return n;
    };
    for (std::size_t i = 0; i < order.size(); ++i) {
        const std::span<const LoraAdapter> one(&singles[i], 1);
        out.push_back({"Elytra " + order[i], merge_sequential(base, one), 1, count(one)});
    }
    // Prefix merges trace the degradation as more patches share the weights.
    for (std::size_t l = 2; l <= order.size(); ++l) {
        const std::span<const LoraAdapter> prefix(singles.data(), l);
        const CompositionWeights w = (l == order.size() && !cfg_.composition.pi.empty())
                                         ? CompositionWeights{cfg_.composition.pi}
                                         : CompositionWeights::uniform(l);
        out.push_back({"Parallel " + std::to_string(l), merge_parallel(base, prefix, w), l, count(prefix)});
    }
    if (cfg_.composition.mode == "sequential") {
        for (int sequence : {1, 2}) {
            const std::vector<LoraAdapter> stages = load_sequence(sequence, base_hash);
            const std::vector<std::string> seq = sequence_order(sequence);
            for (std::size_t i = 0; i < seq.size(); ++i) {
                lineage[sequence_dir(sequence, i, seq[i]).lexically_relative(out_).generic_string()] =
                    stages[i].content_hash();
            }
            out.push_back({sequence == 1 ? "Sequence One" : "Sequence Two", merge_sequential(base, stages),
                           stages.size(), count(stages)});
        }
    }
    return out;
}

Json Pipeline::eval_lineage(const Dataset &ds, const ParameterStore &base, Json adapters) const {
    Json archives = Json::object();
    for (const auto &a : cfg_.attacks) archives[a.name] = archive_hash(a.name, kEvalSplit);
    return Json{{"dataset", ds.content_hash()},
                {"base", base.content_hash()},
                {"archives", archives},
                {"adapters", std::move(adapters)},
                {"composition", section_hash(cfg_.to_json().at("composition"))},
                {"split", std::string(split_name(kEvalSplit))}};
}

EvalMatrix Pipeline::evaluate() {
    write_config();
    Stopwatch sw;
    const Dataset ds = load_data();
    const ParameterStore base = load_base(ds);
    const std::string base_hash = base.content_hash();

    std::vector<std::pair<std::string, Tensor>> inputs;
    inputs.emplace_back("Clean", ds.split_images(kEvalSplit));
    for (const auto &a : cfg_.attacks) {
        inputs.emplace_back(a.name, load_attack_archive(a.name, kEvalSplit, ds, base).images);
    }
    const std::vector<int> labels = ds.split_labels(kEvalSplit);

    Json adapters = Json::object();
    const std::vector<Variant> vars = variants(base_hash, base, adapters);

    EvalMatrix m;
    for (const auto &in : inputs) m.columns.push_back(in.first);
    std::string log = "variant,column,index,label,prediction\n";
    for (const auto &v : vars) {
        m.rows.push_back(v.name);
        std::vector<EvalCell> row;
        for (const auto &[column, images] : inputs) {
            const std::vector<int> pred = predict(cfg_.model, v.store, {}, images, cfg_.batch_size);
            EvalCell cell{0, labels.size()};
            for (std::size_t i = 0; i < labels.size(); ++i) {
                if (pred[i] == labels[i]) ++cell.correct;
                log += csv_field(v.name) + "," + csv_field(column) + "," + std::to_string(i) + "," +
                       std::to_string(labels[i]) + "," + std::to_string(pred[i]) + "\n";
            }
            row.push_back(cell);
        }
        m.cells.push_back(std::move(row));
    }

    fs::create_directories(eval_dir());
    Json doc = m.to_json();
    doc["lineage"] = eval_lineage(ds, base, adapters);
    write_json(eval_dir() / "matrix.json", doc);
    write_text(eval_dir() / "matrix.csv", m.to_csv());
    write_text(eval_dir() / "predictions.csv", log);
    write_timings(eval_dir(), Json{{"evaluate", sw.seconds()}});
    return m;
}

void Pipeline::report() {
    write_config();
    const Dataset ds = load_data();
    const ParameterStore base = load_base(ds);
    require(eval_dir() / "matrix.json", "evaluation matrix", "evaluate");
    const Json doc = read_json(eval_dir() / "matrix.json");
    Json adapters = Json::object();
    const std::vector<Variant> vars = variants(base.content_hash(), base, adapters);
    check_lineage(doc.at("lineage"), eval_lineage(ds, base, adapters), eval_dir(), "evaluate");
    const EvalMatrix m = EvalMatrix::from_json(doc);

    fs::create_directories(report_dir());
    write_json(report_dir() / "matrix.json", doc);
    write_text(report_dir() / "matrix.csv", m.to_csv());

    const std::size_t total = count_params(base);
    const std::set<Role> targets = target_preset(cfg_.lora.targets);
    std::string csv = "variant,adapters,trainable,total,reduction_percent\n";
    Json rows = Json::array();
    for (const auto &v : vars) {
        // The baseline row accounts for full fine-tuning of every weight.
        const std::size_t trainable = v.adapters == 0 ? total : v.trainable;
        const double reduction = (1.0 - static_cast<double>(trainable) / static_cast<double>(total)) * 100.0;
        const std::string name = v.adapters == 0 ? "Full fine-tune" : v.name;
        csv += csv_field(name) + "," + std::to_string(v.adapters) + "," + std::to_string(trainable) + "," +
               std::to_string(total) + "," + fixed(reduction) + "\n";
        rows.push_back(Json{{"variant", name},
                            {"adapters", v.adapters},
                            {"trainable", trainable},
                            {"total", total},
                            {"reduction_percent", reduction}});
    }
    const VitConfig paper = vit_base_config(cfg_.model.num_classes);
    write_text(report_dir() / "accounting.csv", csv);
    write_json(report_dir() / "accounting.json",
               Json{{"rows", rows},
                    {"single_adapter",
                     {{"trainable", adapter_count_from_shapes(cfg_.model, targets, cfg_.lora.rank)},
                      {"reduction_percent", reduction_from_shapes(cfg_.model, targets, cfg_.lora.rank) * 100.0}}},
                    {"paper_scale",
                     {{"config", paper.to_json()},
                      {"trainable", adapter_count_from_shapes(paper, targets, cfg_.lora.rank)},
                      {"reduction_percent", reduction_from_shapes(paper, targets, cfg_.lora.rank) * 100.0}}},
                    {"lineage", {{"matrix", sha256_file(eval_dir() / "matrix.json")}}}});

    // Wall-clock of every stage, gathered from the per-artifact timing files.
    std::string tcsv = "artifact,stage,seconds\n";
    std::vector<fs::path> timing_files;
    for (const auto &e : fs::recursive_directory_iterator(out_)) {
        if (e.is_regular_file() && is_timing_file(e.path()) && e.path().extension() == ".json") {
            timing_files.push_back(e.path());
        }
    }
    std::sort(timing_files.begin(), timing_files.end());
    for (const auto &f : timing_files) {
        const Json t = read_json(f);
        for (auto it = t.begin(); it != t.end(); ++it) {
            tcsv += f.lexically_relative(out_).generic_string() + "," + it.key() + "," +
                    fixed(it.value().get<double>(), 3) + "\n";
        }
    }
    write_text(report_dir() / "timings.csv", tcsv);
}

std::vector<SweepPoint> Pipeline::rank_sweep() {
    write_config();
    Stopwatch sw;
    const Dataset ds = load_data();
    const ParameterStore base = load_base(ds);
    const std::string &name = cfg_.attack(cfg_.sweep.attack).name;
    const AdvArchive train = load_attack_archive(name, kTrainSplit, ds, base);
    const AdvArchive test = load_attack_archive(name, kEvalSplit, ds, base);
    const Tensor clean = ds.split_images(kEvalSplit);
    const std::vector<int> labels = ds.split_labels(kEvalSplit);
    const std::set<Role> targets = target_preset(cfg_.lora.targets);
    // α scales with r so that α/r stays at the configured ratio.
    const float alpha_per_rank = cfg_.lora.alpha / static_cast<float>(cfg_.lora.rank);

    std::vector<SweepPoint> points;
    std::string csv = "rank,trainable,clean,robust\n";
    Json rows = Json::array();
    for (std::size_t r : cfg_.sweep.ranks) {
        const std::uint64_t seed = derive_seed(cfg_.seed, kRankSweepStream, r);
        LoraAdapter ad = init_adapter(base, targets, r, alpha_per_rank * static_cast<float>(r), cfg_.lora.dropout,
                                      seed, name);
        train_elytra(cfg_.model, base, {}, ad, train, cfg_.elytra_train, seed);
        const LoraAdapter *use[] = {&ad};
        const SweepPoint p{r, trainable_count(ad), accuracy(cfg_.model, base, use, clean, labels),
                           accuracy(cfg_.model, base, use, test.images, test.labels)};
        points.push_back(p);
        csv += std::to_string(r) + "," + std::to_string(p.trainable) + "," + fixed(p.clean) + "," + fixed(p.robust) +
               "\n";
        rows.push_back(Json{{"rank", r}, {"trainable", p.trainable}, {"clean", p.clean}, {"robust", p.robust}});
    }
    fs::create_directories(sweep_dir());
    write_text(sweep_dir() / "rank.csv", csv);
    write_json(sweep_dir() / "rank.json",
               Json{{"attack", name},
                    {"rows", rows},
                    {"lineage",
                     {{"base", base.content_hash()},
                      {"train_archive", train.content_hash()},
                      {"eval_archive", test.content_hash()},
                      {"lora", section_hash(cfg_.lora.to_json())},
                      {"train", section_hash(cfg_.elytra_train.to_json())}}}});
    write_json(sweep_dir() / "rank_timings.json", Json{{"rank-sweep", sw.seconds()}});
    return points;
}

std::vector<SweepPoint> Pipeline::freeze_sweep() {
    write_config();
    Stopwatch sw;
    const Dataset ds = load_data();
    const ParameterStore base = load_base(ds);
    const std::string &name = cfg_.attack(cfg_.sweep.attack).name;
    const AdvArchive train = load_attack_archive(name, kTrainSplit, ds, base);
    const AdvArchive test = load_attack_archive(name, kEvalSplit, ds, base);
    const Tensor clean = ds.split_images(kEvalSplit);
    const std::vector<int> labels = ds.split_labels(kEvalSplit);
    const LabeledSet adv{name, train.images, train.labels};

    std::vector<std::size_t> depths = cfg_.sweep.freeze_depths;
    if (depths.empty()) {
        for (std::size_t k = 0; k <= cfg_.model.depth; ++k) depths.push_back(k);
    }
    std::vector<SweepPoint> points;
    std::string csv = "k,trainable,clean,robust\n";
    Json rows = Json::array();
    for (std::size_t k : depths) {
        ParameterStore store = base;
        const TrainReport rep = adversarial_fine_tune(cfg_.model, store, k, adv, cfg_.adversarial_train,
                                                      derive_seed(cfg_.seed, kFreezeSweepStream, k));
        const SweepPoint p{k, rep.trainable_params, accuracy(cfg_.model, store, {}, clean, labels),
                           accuracy(cfg_.model, store, {}, test.images, test.labels)};
        points.push_back(p);
        csv += std::to_string(k) + "," + std::to_string(p.trainable) + "," + fixed(p.clean) + "," + fixed(p.robust) +
               "\n";
        rows.push_back(Json{{"k", k}, {"trainable", p.trainable}, {"clean", p.clean}, {"robust", p.robust}});
    }
    fs::create_directories(sweep_dir());
    write_text(sweep_dir() / "freeze.csv", csv);
    write_json(sweep_dir() / "freeze.json",
               Json{{"attack", name},
                    {"rows", rows},
                    {"lineage",
                     {{"base", base.content_hash()},
                      {"train_archive", train.content_hash()},
                      {"eval_archive", test.content_hash()},
                      {"train", section_hash(cfg_.adversarial_train.to_json())}}}});
    write_json(sweep_dir() / "freeze_timings.json", Json{{"freeze-sweep", sw.seconds()}});
    return points;
}

void Pipeline::run_all() {
    gen_data();
    train_base();
    train_patches();
    gen_attacks();
    compose();
    evaluate();
    report();
}

bool is_timing_file(const fs::path &path) { return path.filename().string().find("timings") != std::string::npos; }

std::vector<fs::path> artifact_files(const fs::path &dir) {
    std::vector<fs::path> out;
    for (const auto &e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file() && !is_timing_file(e.path())) out.push_back(e.path().lexically_relative(dir));
    }
    std::sort(out.begin(), out.end());
    return out;
}

} // namespace elytra
