#pragma once

#include <stdexcept>
#include <string>

namespace csrd {

/// Base of every error raised by the library. The CLI maps these to a
/// structured message and a nonzero exit code.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(kind + ": " + what), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define CSRD_DEFINE_ERROR(Name, tag)                                          \
    class Name : public Error {                                               \
    public:                                                                   \
        explicit Name(const std::string& what) : Error(tag, what) {}          \
    }

CSRD_DEFINE_ERROR(DimensionError, "dimension error");
CSRD_DEFINE_ERROR(DomainError, "domain error");
CSRD_DEFINE_ERROR(TilingError, "tiling error");
CSRD_DEFINE_ERROR(CompletenessError, "completeness error");
CSRD_DEFINE_ERROR(NumericError, "numeric error");
CSRD_DEFINE_ERROR(ConfigError, "config error");
CSRD_DEFINE_ERROR(ShapeError, "shape error");
CSRD_DEFINE_ERROR(SpecError, "spec error");
CSRD_DEFINE_ERROR(ManifestError, "manifest error");
CSRD_DEFINE_ERROR(IoError, "io error");

#undef CSRD_DEFINE_ERROR

} // namespace csrd
