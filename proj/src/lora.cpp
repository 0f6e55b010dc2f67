#include "elytra/lora.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "elytra/error.hpp"
#include "elytra/io.hpp"
#include "elytra/ops.hpp"
#include "elytra/rng.hpp"

namespace elytra {

namespace fs = std::filesystem;

const LoraFactor *LoraAdapter::find(std::string_view target) const {
    for (const auto &f : factors) {
        if (f.target == target) return &f;
    }
    return nullptr;
}

std::vector<std::string> LoraAdapter::targets() const {
    std::vector<std::string> out;
    out.reserve(factors.size());
    for (const auto &f : factors) out.push_back(f.target);
    return out;
}

std::size_t LoraAdapter::trainable_count() const {
    std::size_t n = 0;
    for (const auto &f : factors) n += f.u.numel() + f.v.numel();
    return n;
}

void LoraAdapter::validate_against(const ParameterStore &store) const {
    if (rank == 0) {
        throw ConfigError("adapter rank must be positive");
    }
    for (const auto &f : factors) {
        if (!store.contains(f.target)) {
            throw LookupError("adapter target '" + f.target + "' not found in parameter store");
        }
        const Tensor &w = store.at(f.target).value;
        if (w.rank() != 2 || f.u.rank() != 2 || f.v.rank() != 2 || f.u.dim(0) != w.dim(0) || f.u.dim(1) != rank ||
            f.v.dim(0) != rank || f.v.dim(1) != w.dim(1)) {
            throw DimensionError("adapter factors " + shape_str(f.u.shape()) + "·" + shape_str(f.v.shape()) +
                                 " do not conform to target '" + f.target + "' " + shape_str(w.shape()) +
                                 " at rank " + std::to_string(rank));
        }
    }
}

std::string LoraAdapter::content_hash() const {
    std::string header = std::to_string(rank) + "|" + std::to_string(alpha) + "|" + std::to_string(dropout);
    std::vector<float> payload;
    for (const auto &f : factors) {
        header += "|" + f.target;
        payload.insert(payload.end(), f.u.values().begin(), f.u.values().end());
        payload.insert(payload.end(), f.v.values().begin(), f.v.values().end());
    }
    return sha256_hex(sha256_hex(header) + sha256_floats(payload));
}

CompositionWeights CompositionWeights::uniform(std::size_t n) {
    if (n == 0) {
        throw ContractError("composition needs at least one adapter");
    }
    return CompositionWeights{std::vector<double>(n, 1.0 / static_cast<double>(n))};
}

CompositionWeights CompositionWeights::one_hot(std::size_t n, std::size_t index) {
    CompositionWeights w{std::vector<double>(n, 0.0)};
    w.pi.at(index) = 1.0;
    return w;
}

void CompositionWeights::validate(std::size_t n) const {
    if (pi.size() != n) {
        throw ContractError("got " + std::to_string(pi.size()) + " mixing weights for " + std::to_string(n) +
                            " adapters");
    }
    double total = 0.0;
    for (double p : pi) {
        if (!(p >= 0.0)) {
            throw ContractError("mixing weights must be non-negative");
        }
        total += p;
    }
    if (std::fabs(total - 1.0) > 1e-9) {
        throw ContractError("mixing weights sum to " + std::to_string(total) + ", expected 1");
    }
}

std::set<Role> target_preset(std::string_view name) {
    if (name == "attn_qv") return {Role::wq, Role::wv};
    if (name == "attn_qkvo") return {Role::wq, Role::wk, Role::wv, Role::wo};
    if (name == "attn_mlp_head") return {Role::wq, Role::wk, Role::wv, Role::wo, Role::mlp_in, Role::mlp_out, Role::head};
    throw ConfigError("unknown LoRA target preset '" + std::string(name) + "'");
}

LoraAdapter init_adapter(const ParameterStore &store, const std::set<Role> &targets, std::size_t rank, float alpha,
                         float dropout, std::uint64_t seed, std::string provenance) {
    if (rank == 0) {
        throw ConfigError("LoRA rank must be positive");
    }
    if (!(dropout >= 0.0f && dropout < 1.0f)) {
        throw ConfigError("LoRA dropout must lie in [0, 1)");
    }
    if (targets.empty()) {
        throw LookupError("empty LoRA target set");
    }
    LoraAdapter adapter;
    adapter.rank = rank;
    adapter.alpha = alpha;
    adapter.dropout = dropout;
    adapter.provenance = std::move(provenance);

    Rng rng(seed);
    const float stddev = 1.0f / std::sqrt(static_cast<float>(rank));
    std::set<Role> matched;
    for (const auto &p : store) {
        if (!targets.contains(p.role) || p.value.rank() != 2) continue;
        const std::size_t u = p.value.dim(0), v = p.value.dim(1);
        if (rank > std::min(u, v)) {
            throw ConfigError("rank " + std::to_string(rank) + " exceeds min dimension of '" + p.name + "' " +
                              shape_str(p.value.shape()));
        }
        LoraFactor f{p.name, Tensor(Shape{u, rank}), Tensor::zeros(Shape{rank, v})};
        for (auto &x : f.u.values()) x = static_cast<float>(rng.normal()) * stddev;
        adapter.factors.push_back(std::move(f));
        matched.insert(p.role);
    }
    for (Role r : targets) {
        if (!matched.contains(r)) {
            throw LookupError("LoRA target role '" + std::string(role_name(r)) + "' has no weight matrix");
        }
    }
    return adapter;
}

std::map<std::string, Tensor> materialize(const LoraAdapter &adapter) {
    std::map<std::string, Tensor> out;
    const float s = adapter.scaling();
    for (const auto &f : adapter.factors) {
        Tensor d = eager::matmul(f.u, f.v);
        for (auto &x : d.values()) x *= s;
        out.emplace(f.target, std::move(d));
    }
    return out;
}

namespace {

// Sums weighted deltas in a canonical adapter order (by content hash) so the
// result does not depend on the order the caller lists the adapters in.
ParameterStore merge_weighted(const ParameterStore &base, std::span<const LoraAdapter> adapters,
                              std::span<const double> weights) {
    for (const auto &a : adapters) a.validate_against(base);

    std::vector<std::size_t> order(adapters.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<std::string> keys(adapters.size());
    for (std::size_t i = 0; i < adapters.size(); ++i) keys[i] = adapters[i].content_hash();
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return keys[a] != keys[b] ? keys[a] < keys[b] : weights[a] < weights[b];
    });

    std::map<std::string, std::vector<double>> acc;
    for (std::size_t idx : order) {
        const double w = weights[idx];
        for (const auto &[name, delta] : materialize(adapters[idx])) {
            auto &sum = acc[name];
            if (sum.empty()) sum.assign(delta.numel(), 0.0);
            for (std::size_t i = 0; i < delta.numel(); ++i) sum[i] += w * static_cast<double>(delta[i]);
        }
    }

    ParameterStore merged = base;
    for (const auto &[name, sum] : acc) {
        Tensor &w = merged.at(name).value;
        for (std::size_t i = 0; i < w.numel(); ++i) {
            w[i] = static_cast<float>(static_cast<double>(w[i]) + sum[i]);
        }
        w.require_finite("merge of '" + name + "'");
    }
    return merged;
}

} // namespace

ParameterStore merge_parallel(const ParameterStore &base, std::span<const LoraAdapter> adapters,
                              const CompositionWeights &weights) {
    weights.validate(adapters.size());
    return merge_weighted(base, adapters, weights.pi);
}

ParameterStore merge_sequential(const ParameterStore &base, std::span<const LoraAdapter> adapters) {
    const std::vector<double> ones(adapters.size(), 1.0);
    return merge_weighted(base, adapters, ones);
}

std::size_t trainable_count(const LoraAdapter &adapter) { return adapter.trainable_count(); }

double reduction_ratio(const LoraAdapter &adapter, const ParameterStore &store) {
    const auto total = static_cast<double>(count_params(store));
    return 1.0 - static_cast<double>(adapter.trainable_count()) / total;
}

void save_adapter(const fs::path &dir, const LoraAdapter &adapter, const Json &lineage) {
    fs::create_directories(dir);
    std::vector<float> blob;
    Json factors = Json::array();
    for (const auto &f : adapter.factors) {
        Json entry;
        entry["target"] = f.target;
        entry["u_shape"] = f.u.shape();
        entry["u_offset"] = blob.size();
        blob.insert(blob.end(), f.u.values().begin(), f.u.values().end());
        entry["v_shape"] = f.v.shape();
        entry["v_offset"] = blob.size();
        blob.insert(blob.end(), f.v.values().begin(), f.v.values().end());
        factors.push_back(entry);
    }
    Json doc;
    doc["format"] = "elytra-adapter/1";
    doc["rank"] = adapter.rank;
    doc["alpha"] = adapter.alpha;
    doc["dropout"] = adapter.dropout;
    doc["provenance"] = adapter.provenance;
    doc["factors"] = factors;
    doc["blob"] = "factors.f32";
    doc["blob_floats"] = blob.size();
    doc["blob_sha256"] = sha256_floats(blob);
    doc["content_hash"] = adapter.content_hash();
    doc["lineage"] = lineage;
    write_f32_blob(dir / "factors.f32", blob);
    write_json(dir / "adapter.json", doc);
}

LoraAdapter load_adapter(const fs::path &dir) {
    const Json doc = read_json(dir / "adapter.json");
    const std::vector<float> blob = read_f32_blob(dir / doc.at("blob").get<std::string>());
    if (blob.size() != doc.at("blob_floats").get<std::size_t>()) {
        throw FormatError("adapter blob length mismatch in " + dir.string());
    }
    auto slice = [&](const Json &shape, const Json &offset) {
        Shape s = shape.get<Shape>();
        const std::size_t off = offset.get<std::size_t>(), n = shape_numel(s);
        if (off + n > blob.size()) {
            throw FormatError("adapter factor extends past end of blob in " + dir.string());
        }
        return Tensor(std::move(s), std::vector<float>(blob.begin() + static_cast<std::ptrdiff_t>(off),
                                                       blob.begin() + static_cast<std::ptrdiff_t>(off + n)));
    };
    LoraAdapter a;
    a.rank = doc.at("rank").get<std::size_t>();
    a.alpha = doc.at("alpha").get<float>();
    a.dropout = doc.at("dropout").get<float>();
    a.provenance = doc.at("provenance").get<std::string>();
    for (const auto &entry : doc.at("factors")) {
        a.factors.push_back(LoraFactor{entry.at("target").get<std::string>(), slice(entry.at("u_shape"), entry.at("u_offset")),
                                       slice(entry.at("v_shape"), entry.at("v_offset"))});
    }
    if (a.content_hash() != doc.at("content_hash").get<std::string>()) {
        throw FormatError("adapter content hash mismatch in " + dir.string());
    }
    return a;
}

} // namespace elytra
