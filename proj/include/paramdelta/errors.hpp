#pragma once

#include <stdexcept>
#include <string>

namespace paramdelta {

// Stable error classes. The CLI surfaces these verbatim on failure
// (exit 1, single line), so names must not change between releases.
enum class ErrorClass {
    MalformedHeader,
    OverlappingRegions,
    TruncatedFile,
    DuplicateTensorName,
    UnknownTensor,
    IoFailure,
    ShapeMismatch,
    NotHomologous,
    ShapeConflict,
    EmptyIntersection,
    NonFiniteCoefficient,
    NoSharedTensors,
    EmptyInput,
    NoCompleteTriples,
    DegenerateInput,
    DuplicateAlpha,
    NonFiniteAlpha,
    InvalidSpec,
};

const char* to_string(ErrorClass cls);

class Error : public std::runtime_error {
public:
    Error(ErrorClass cls, const std::string& detail)
        : std::runtime_error(std::string(to_string(cls)) + ": " + detail), cls_(cls) {}

    ErrorClass cls() const { return cls_; }

private:
    ErrorClass cls_;
};

[[noreturn]] inline void fail(ErrorClass cls, const std::string& detail) {
    throw Error(cls, detail);
}

} // namespace paramdelta
