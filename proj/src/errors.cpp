#include "paramdelta/errors.hpp"

namespace paramdelta {

const char* to_string(ErrorClass cls) {
    switch (cls) {
    case ErrorClass::MalformedHeader: return "MalformedHeader";
    case ErrorClass::OverlappingRegions: return "OverlappingRegions";
    case ErrorClass::TruncatedFile: return "TruncatedFile";
    case ErrorClass::DuplicateTensorName: return "DuplicateTensorName";
    case ErrorClass::UnknownTensor: return "UnknownTensor";
    case ErrorClass::IoFailure: return "IoFailure";
    case ErrorClass::ShapeMismatch: return "ShapeMismatch";
    case ErrorClass::NotHomologous: return "NotHomologous";
    case ErrorClass::ShapeConflict: return "ShapeConflict";
    case ErrorClass::EmptyIntersection: return "EmptyIntersection";
    case ErrorClass::NonFiniteCoefficient: return "NonFiniteCoefficient";
    case ErrorClass::NoSharedTensors: return "NoSharedTensors";
    case ErrorClass::EmptyInput: return "EmptyInput";
    case ErrorClass::NoCompleteTriples: return "NoCompleteTriples";
    case ErrorClass::DegenerateInput: return "DegenerateInput";
    case ErrorClass::DuplicateAlpha: return "DuplicateAlpha";
    case ErrorClass::NonFiniteAlpha: return "NonFiniteAlpha";
    case ErrorClass::InvalidSpec: return "InvalidSpec";
    }
    return "UnknownError";
}

} // namespace paramdelta
