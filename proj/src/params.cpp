#include "elytra/params.hpp"

#include <array>
#include <utility>

#include "elytra/error.hpp"
#include "elytra/io.hpp"

namespace elytra {

namespace {
constexpr std::array<std::pair<Role, std::string_view>, 12> kRoleNames{{
    {Role::patch_embed, "patch_embed"},
    {Role::cls_token, "cls_token"},
    {Role::pos_embed, "pos_embed"},
    {Role::wq, "Wq"},
    {Role::wk, "Wk"},
    {Role::wv, "Wv"},
    {Role::wo, "Wo"},
    {Role::mlp_in, "mlp_in"},
    {Role::mlp_out, "mlp_out"},
    {Role::ln_scale, "ln_scale"},
    {Role::ln_bias, "ln_bias"},
    {Role::head, "head"},
}};
} // namespace

std::string_view role_name(Role role) {
    for (const auto &[r, n] : kRoleNames) {
        if (r == role) return n;
    }
    throw LookupError("unnamed role");
}

Role role_from_name(std::string_view name) {
    for (const auto &[r, n] : kRoleNames) {
        if (n == name) return r;
    }
    throw LookupError("unknown role tag '" + std::string(name) + "'");
}

std::set<Role> roles_from_names(const std::vector<std::string> &names) {
    std::set<Role> roles;
    for (const auto &n : names) roles.insert(role_from_name(n));
    return roles;
}

void ParameterStore::add(Parameter p) {
    if (index_.contains(p.name)) {
        throw ConfigError("duplicate parameter name '" + p.name + "'");
    }
    index_.emplace(p.name, params_.size());
    params_.push_back(std::move(p));
}

bool ParameterStore::contains(std::string_view name) const { return index_.find(name) != index_.end(); }

std::size_t ParameterStore::index_of(std::string_view name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
        throw LookupError("no parameter named '" + std::string(name) + "'");
    }
    return it->second;
}

void ParameterStore::freeze_all(bool frozen) {
    for (auto &p : params_) p.frozen = frozen;
}

std::size_t ParameterStore::trainable_scalars() const {
    std::size_t n = 0;
    for (const auto &p : params_) {
        if (!p.frozen) n += p.value.numel();
    }
    return n;
}

std::string ParameterStore::content_hash() const {
    std::string header;
    std::vector<float> payload;
    for (const auto &p : params_) {
        header += p.name + ":" + shape_str(p.value.shape()) + ";";
        payload.insert(payload.end(), p.value.values().begin(), p.value.values().end());
    }
    return sha256_hex(sha256_hex(header) + sha256_floats(payload));
}

bool ParameterStore::bit_equal(const ParameterStore &other) const {
    if (params_.size() != other.params_.size()) return false;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (params_[i].name != other.params_[i].name || !params_[i].value.bit_equal(other.params_[i].value)) {
            return false;
        }
    }
    return true;
}

std::size_t count_params(const ParameterStore &store, const std::optional<std::set<Role>> &roles) {
    std::size_t n = 0;
    for (const auto &p : store) {
        if (!roles || roles->contains(p.role)) n += p.value.numel();
    }
    return n;
}

std::size_t count_params(const ParameterStore &store, const std::vector<std::string> &role_names) {
    if (role_names.empty()) return count_params(store);
    return count_params(store, roles_from_names(role_names));
}

} // namespace elytra
