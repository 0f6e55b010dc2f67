#pragma once

#include <stdexcept>
#include <string>

namespace elytra {

/// Base class of every error raised by the library. `kind()` is a stable
/// machine-readable tag used by the CLI error JSON.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string &what) : std::runtime_error(what), kind_(std::move(kind)) {}
    const std::string &kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define ELYTRA_DEFINE_ERROR(Name, tag)                                                                                 \
    class Name : public Error {                                                                                        \
    public:                                                                                                            \
        explicit Name(const std::string &what) : Error(tag, what) {}                                                   \
    };

ELYTRA_DEFINE_ERROR(DimensionError, "dimension")
ELYTRA_DEFINE_ERROR(IndexError, "index")
ELYTRA_DEFINE_ERROR(ContractError, "contract")
ELYTRA_DEFINE_ERROR(NumericError, "numeric")
ELYTRA_DEFINE_ERROR(ConfigError, "config")
ELYTRA_DEFINE_ERROR(LookupError, "lookup")
ELYTRA_DEFINE_ERROR(AttackError, "attack")
ELYTRA_DEFINE_ERROR(PlacementError, "placement")
ELYTRA_DEFINE_ERROR(FormatError, "format")
ELYTRA_DEFINE_ERROR(ProvenanceError, "provenance")
ELYTRA_DEFINE_ERROR(MissingArtifactError, "missing_artifact")
ELYTRA_DEFINE_ERROR(DivergenceError, "divergence")

#undef ELYTRA_DEFINE_ERROR

} // namespace elytra
