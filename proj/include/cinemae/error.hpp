#pragma once

#include <stdexcept>
#include <string>

namespace cinemae {

/// Root of every error thrown by the library. `kind()` is the stable
/// machine-readable tag used by the CLI error records.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}
    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define CINEMAE_DEFINE_ERROR(Name)                                             \
    class Name : public Error {                                                \
    public:                                                                    \
        explicit Name(const std::string& what) : Error(#Name, what) {}         \
    };

CINEMAE_DEFINE_ERROR(DimensionError)
CINEMAE_DEFINE_ERROR(ValueError)
CINEMAE_DEFINE_ERROR(FormatError)
CINEMAE_DEFINE_ERROR(ArchMismatchError)
CINEMAE_DEFINE_ERROR(MaskError)
CINEMAE_DEFINE_ERROR(ContextError)
CINEMAE_DEFINE_ERROR(EmptyError)
CINEMAE_DEFINE_ERROR(ShapeError)
CINEMAE_DEFINE_ERROR(StrategyError)
CINEMAE_DEFINE_ERROR(DataError)
CINEMAE_DEFINE_ERROR(NonFiniteError)
CINEMAE_DEFINE_ERROR(ConfigError)
CINEMAE_DEFINE_ERROR(IngestError)
CINEMAE_DEFINE_ERROR(CacheCorruptionError)
CINEMAE_DEFINE_ERROR(PreconditionError)
CINEMAE_DEFINE_ERROR(IoError)

#undef CINEMAE_DEFINE_ERROR

}  // namespace cinemae
