#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "elytra/tensor.hpp"

namespace elytra {

enum class Role {
    patch_embed,
    cls_token,
    pos_embed,
    wq,
    wk,
    wv,
    wo,
    mlp_in,
    mlp_out,
    ln_scale,
    ln_bias,
    head,
};

std::string_view role_name(Role role);
/// Throws LookupError for an unknown tag.
Role role_from_name(std::string_view name);
std::set<Role> roles_from_names(const std::vector<std::string> &names);

struct Parameter {
    std::string name;
    Role role;
    Tensor value;
    bool frozen = false;
    /// Encoder block index, or -1 for embedding / head parameters.
    int block = -1;
};

/// Ordered collection of named parameter tensors. Names are unique and
/// insertion order is the iteration order.
class ParameterStore {
public:
    void add(Parameter p);

    std::size_t size() const noexcept { return params_.size(); }
    const Parameter &operator[](std::size_t i) const { return params_[i]; }
    Parameter &operator[](std::size_t i) { return params_[i]; }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }

    bool contains(std::string_view name) const;
    std::size_t index_of(std::string_view name) const;
    const Parameter &at(std::string_view name) const { return params_[index_of(name)]; }
    Parameter &at(std::string_view name) { return params_[index_of(name)]; }

    void freeze_all(bool frozen = true);
    std::size_t trainable_scalars() const;

    /// SHA-256 over names, shapes and payload bytes.
    std::string content_hash() const;
    bool bit_equal(const ParameterStore &other) const;

private:
    std::vector<Parameter> params_;
    std::map<std::string, std::size_t, std::less<>> index_;
};

/// Scalar count of parameters whose role is in `roles` (all when empty optional).
std::size_t count_params(const ParameterStore &store, const std::optional<std::set<Role>> &roles = std::nullopt);
std::size_t count_params(const ParameterStore &store, const std::vector<std::string> &role_names);

} // namespace elytra
