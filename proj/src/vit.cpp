#include "elytra/vit.hpp"

#include <algorithm>

#include "elytra/error.hpp"
#include "elytra/ops.hpp"

namespace elytra {

namespace fs = std::filesystem;

void VitConfig::validate() const {
    if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0) {
        throw ConfigError("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                          std::to_string(patch_size));
    }
    if (channels == 0) throw ConfigError("channels must be positive");
    if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) {
        throw ConfigError("embed_dim " + std::to_string(embed_dim) + " is not divisible by heads " +
                          std::to_string(heads));
    }
    if (depth == 0) throw ConfigError("depth must be positive");
    if (mlp_ratio == 0) throw ConfigError("mlp_ratio must be positive");
    if (num_classes < 2) throw ConfigError("need at least 2 classes, got " + std::to_string(num_classes));
}

Json VitConfig::to_json() const {
    return Json{{"image_size", image_size}, {"channels", channels},   {"patch_size", patch_size},
                {"embed_dim", embed_dim},   {"depth", depth},         {"heads", heads},
                {"mlp_ratio", mlp_ratio},   {"num_classes", num_classes}, {"seed", seed}};
}

VitConfig VitConfig::from_json(const Json &j) {
    VitConfig c;
    c.image_size = j.value("image_size", c.image_size);
    c.channels = j.value("channels", c.channels);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.depth = j.value("depth", c.depth);
    c.heads = j.value("heads", c.heads);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

std::vector<ParamShape> vit_param_shapes(const VitConfig &cfg) {
    cfg.validate();
    const std::size_t d = cfg.embed_dim, hidden = d * cfg.mlp_ratio;
    const std::size_t patch_in = cfg.channels * cfg.patch_size * cfg.patch_size;
    std::vector<ParamShape> s;
    s.push_back({"patch_embed.weight", Role::patch_embed, {patch_in, d}, -1});
    s.push_back({"patch_embed.bias", Role::patch_embed, {d}, -1});
    s.push_back({"cls_token", Role::cls_token, {1, d}, -1});
    s.push_back({"pos_embed", Role::pos_embed, {cfg.tokens(), d}, -1});
    for (std::size_t b = 0; b < cfg.depth; ++b) {
        const std::string p = "blocks." + std::to_string(b) + ".";
        const int bi = static_cast<int>(b);
        s.push_back({p + "ln1.scale", Role::ln_scale, {d}, bi});
        s.push_back({p + "ln1.bias", Role::ln_bias, {d}, bi});
        const std::pair<const char *, Role> attn[] = {{"q", Role::wq}, {"k", Role::wk}, {"v", Role::wv}, {"o", Role::wo}};
        for (const auto &[n, r] : attn) {
            s.push_back({p + "attn." + n + ".weight", r, {d, d}, bi});
            s.push_back({p + "attn." + n + ".bias", r, {d}, bi});
        }
        s.push_back({p + "ln2.scale", Role::ln_scale, {d}, bi});
        s.push_back({p + "ln2.bias", Role::ln_bias, {d}, bi});
        s.push_back({p + "mlp.in.weight", Role::mlp_in, {d, hidden}, bi});
        s.push_back({p + "mlp.in.bias", Role::mlp_in, {hidden}, bi});
        s.push_back({p + "mlp.out.weight", Role::mlp_out, {hidden, d}, bi});
        s.push_back({p + "mlp.out.bias", Role::mlp_out, {d}, bi});
    }
    s.push_back({"norm.scale", Role::ln_scale, {d}, -1});
    s.push_back({"norm.bias", Role::ln_bias, {d}, -1});
    s.push_back({"head.weight", Role::head, {d, cfg.num_classes}, -1});
    s.push_back({"head.bias", Role::head, {cfg.num_classes}, -1});
    return s;
}

std::size_t adapter_count_from_shapes(const VitConfig &cfg, const std::set<Role> &targets, std::size_t rank) {
    std::size_t n = 0;
    for (const auto &p : vit_param_shapes(cfg)) {
        if (targets.contains(p.role) && p.shape.size() == 2) n += rank * (p.shape[0] + p.shape[1]);
    }
    return n;
}

double reduction_from_shapes(const VitConfig &cfg, const std::set<Role> &targets, std::size_t rank) {
    std::size_t total = 0;
    for (const auto &p : vit_param_shapes(cfg)) total += shape_numel(p.shape);
    return 1.0 - static_cast<double>(adapter_count_from_shapes(cfg, targets, rank)) / static_cast<double>(total);
}

VitConfig vit_base_config(std::size_t num_classes) {
    VitConfig c;
    c.image_size = 224;
    c.patch_size = 16;
    c.embed_dim = 768;
    c.depth = 12;
    c.heads = 12;
    c.num_classes = num_classes;
    return c;
}

ParameterStore init_params(const VitConfig &cfg) {
    constexpr float kInitStd = 0.02f;
    Rng rng(cfg.seed);
    ParameterStore store;
    for (const auto &ps : vit_param_shapes(cfg)) {
        Tensor t = Tensor::zeros(ps.shape);
        const bool is_matrix = ps.name.ends_with(".weight") || ps.role == Role::cls_token;
        if (ps.role == Role::ln_scale) {
            t.fill(1.0f);
        } else if (is_matrix) {
            for (auto &v : t.values()) v = rng.truncated_normal(kInitStd);
        }
        store.add(Parameter{ps.name, ps.role, std::move(t), false, ps.block});
    }
    return store;
}

BoundModel::BoundModel(Tape &tape, const VitConfig &cfg, const ParameterStore &store,
                       std::span<const AdapterUse> adapters, bool params_trainable, Rng *dropout_rng)
    : tape_(tape), cfg_(cfg), store_(store), dropout_rng_(dropout_rng) {
    params_.reserve(store.size());
    for (const auto &p : store) {
        params_.push_back(params_trainable && !p.frozen ? tape.variable(p.value) : tape.constant(p.value));
    }
    for (const auto &use : adapters) {
        if (use.adapter == nullptr) throw ContractError("null adapter in forward pass");
        use.adapter->validate_against(store);
        BoundAdapter bound{use.adapter, use.dropout && use.adapter->dropout > 0.0f, {}};
        if (bound.dropout && dropout_rng_ == nullptr) {
            throw ContractError("adapter dropout requested without an RNG");
        }
        for (const auto &f : use.adapter->factors) {
            bound.factors.emplace_back(use.trainable ? tape.variable(f.u) : tape.constant(f.u),
                                       use.trainable ? tape.variable(f.v) : tape.constant(f.v));
        }
        adapters_.push_back(std::move(bound));
    }
}

Var BoundModel::param(const std::string &name) const { return params_[store_.index_of(name)]; }

Var BoundModel::linear(Var x, const std::string &prefix) {
    const std::string wname = prefix + ".weight";
    Var y = ops::matmul(x, param(wname));
    for (auto &bound : adapters_) {
        const auto &factors = bound.adapter->factors;
        for (std::size_t i = 0; i < factors.size(); ++i) {
            if (factors[i].target != wname) continue;
            Var in = x;
            if (bound.dropout) {
                const float p = bound.adapter->dropout;
                Tensor mask(x.shape());
                for (auto &m : mask.values()) m = dropout_rng_->uniform() < p ? 0.0f : 1.0f / (1.0f - p);
                in = ops::mul(x, tape_.constant(std::move(mask)));
            }
            Var branch = ops::matmul(ops::matmul(in, bound.factors[i].first), bound.factors[i].second);
            y = ops::add(y, ops::scale(branch, bound.adapter->scaling()));
        }
    }
    return ops::add_row_bias(y, param(prefix + ".bias"));
}

Var BoundModel::logits(Var images) {
    const Shape &s = images.shape();
    if (s.size() != 4 || s[1] != cfg_.channels || s[2] != cfg_.image_size || s[3] != cfg_.image_size) {
        throw DimensionError("model expects images [B×" + std::to_string(cfg_.channels) + "×" +
                             std::to_string(cfg_.image_size) + "×" + std::to_string(cfg_.image_size) + "], got " +
                             shape_str(s));
    }
    const std::size_t batch = s[0];
    Var x = linear(ops::patchify(images, cfg_.patch_size), "patch_embed");
    x = ops::assemble_tokens(x, param("cls_token"), param("pos_embed"), batch);
    for (std::size_t b = 0; b < cfg_.depth; ++b) {
        const std::string p = "blocks." + std::to_string(b) + ".";
        Var h = ops::layernorm_rows(x, param(p + "ln1.scale"), param(p + "ln1.bias"));
        Var q = linear(h, p + "attn.q");
        Var k = linear(h, p + "attn.k");
        Var v = linear(h, p + "attn.v");
        Var a = ops::attention(q, k, v, batch, cfg_.heads);
        x = ops::add(x, linear(a, p + "attn.o"));
        h = ops::layernorm_rows(x, param(p + "ln2.scale"), param(p + "ln2.bias"));
        h = linear(ops::gelu(linear(h, p + "mlp.in")), p + "mlp.out");
        x = ops::add(x, h);
    }
    std::vector<std::size_t> cls_rows(batch);
    for (std::size_t i = 0; i < batch; ++i) cls_rows[i] = i * cfg_.tokens();
    Var c = ops::gather_rows(x, std::move(cls_rows));
    c = ops::layernorm_rows(c, param("norm.scale"), param("norm.bias"));
    return linear(c, "head");
}

Tensor forward_logits(const VitConfig &cfg, const ParameterStore &store, std::span<const LoraAdapter *const> adapters,
                      const Tensor &images) {
    std::vector<AdapterUse> uses;
    for (const auto *a : adapters) uses.push_back(AdapterUse{a, false, false});
    Tape tape;
    BoundModel model(tape, cfg, store, uses);
    return model.logits(tape.constant(images)).value();
}

Var VitClassifier::logits(Tape &tape, Var images) const {
    std::vector<AdapterUse> uses;
    for (const auto *a : adapters_) uses.push_back(AdapterUse{a, false, false});
    BoundModel model(tape, cfg_, store_, uses);
    return model.logits(images);
}

Tensor slice_batch(const Tensor &t, std::size_t begin, std::size_t end) {
    if (t.rank() == 0 || begin >= end || end > t.dim(0)) {
        throw IndexError("slice_batch: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                         shape_str(t.shape()));
    }
    const std::size_t stride = t.numel() / t.dim(0);
    Shape s = t.shape();
    s[0] = end - begin;
    return Tensor(std::move(s), std::vector<float>(t.data() + begin * stride, t.data() + end * stride));
}

std::vector<int> predict(const VitConfig &cfg, const ParameterStore &store,
                         std::span<const LoraAdapter *const> adapters, const Tensor &images, std::size_t batch_size) {
    std::vector<int> out;
    const std::size_t n = images.dim(0);
    out.reserve(n);
    for (std::size_t b = 0; b < n; b += batch_size) {
        const Tensor logits = forward_logits(cfg, store, adapters, slice_batch(images, b, std::min(n, b + batch_size)));
        for (int p : eager::argmax_rows(logits)) out.push_back(p);
    }
    return out;
}

void save_checkpoint(const fs::path &dir, const VitConfig &cfg, const ParameterStore &store, const Json &lineage) {
    fs::create_directories(dir);
    std::vector<float> blob;
    Json params = Json::array();
    for (const auto &p : store) {
        params.push_back(Json{{"name", p.name},
                              {"role", std::string(role_name(p.role))},
                              {"shape", p.value.shape()},
                              {"offset", blob.size()},
                              {"block", p.block},
                              {"frozen", p.frozen}});
        blob.insert(blob.end(), p.value.values().begin(), p.value.values().end());
    }
    Json doc;
    doc["format"] = "elytra-checkpoint/1";
    doc["config"] = cfg.to_json();
    doc["parameters"] = params;
    doc["blob"] = "params.f32";
    doc["blob_floats"] = blob.size();
    doc["content_hash"] = store.content_hash();
    doc["lineage"] = lineage;
    write_f32_blob(dir / "params.f32", blob);
    write_json(dir / "checkpoint.json", doc);
}

Checkpoint load_checkpoint(const fs::path &dir) {
    if (!fs::exists(dir / "checkpoint.json")) {
        throw MissingArtifactError("no checkpoint at " + dir.string());
    }
    const Json doc = read_json(dir / "checkpoint.json");
    const std::vector<float> blob = read_f32_blob(dir / doc.at("blob").get<std::string>());
    if (blob.size() != doc.at("blob_floats").get<std::size_t>()) {
        throw FormatError("checkpoint blob length mismatch in " + dir.string());
    }
    Checkpoint ck{VitConfig::from_json(doc.at("config")), {}};
    for (const auto &e : doc.at("parameters")) {
        Shape shape = e.at("shape").get<Shape>();
        const std::size_t off = e.at("offset").get<std::size_t>(), n = shape_numel(shape);
        if (off + n > blob.size()) {
            throw FormatError("parameter '" + e.at("name").get<std::string>() + "' extends past end of blob");
        }
        ck.store.add(Parameter{e.at("name").get<std::string>(), role_from_name(e.at("role").get<std::string>()),
                               Tensor(std::move(shape), std::vector<float>(blob.begin() + static_cast<std::ptrdiff_t>(off),
                                                                           blob.begin() + static_cast<std::ptrdiff_t>(off + n))),
                               e.at("frozen").get<bool>(), e.at("block").get<int>()});
    }
    if (ck.store.content_hash() != doc.at("content_hash").get<std::string>()) {
        throw FormatError("checkpoint content hash mismatch in " + dir.string());
    }
    return ck;
}

} // namespace elytra
