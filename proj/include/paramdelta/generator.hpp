#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "paramdelta/analysis.hpp"
#include "paramdelta/checkpoint.hpp"

namespace paramdelta {

/// Structured perturbation planted into a generated checkpoint so tests have
/// a recorded ground truth. When any delta scale is present, a seeded random
/// delta stream (base per-element magnitude kPlantDeltaMagnitude, scaled per
/// layer class, unlisted classes at 1.0) is added to every tensor; offsets
/// add a constant to every element of the named tensors.
struct PlantSpec {
    std::map<LayerClass, double> delta_scales;
    std::map<std::string, double> offsets;

    bool empty() const { return delta_scales.empty() && offsets.empty(); }
};

inline constexpr double kPlantDeltaMagnitude = 0.25;

/// Deterministic miniature decoder-style checkpoint: embedding, per-layer
/// attention q/k/v/o and ffn gate/up/down projections, norms, and an
/// unembedding head. Identical specs yield byte-identical files on every
/// platform (counter-based streams, dyadic grid values).
struct GenSpec {
    uint64_t seed = 0;
    uint32_t layers = 2;
    uint32_t hidden_dim = 32;
    uint32_t ffn_dim = 64;
    uint32_t vocab_dim = 64;
    DType dtype = DType::F32;
    bool include_norms = true;
    std::optional<PlantSpec> plant;
};

/// Tensor names and shapes the spec expands to, in file order.
std::vector<TensorDecl> generator_template(const GenSpec& spec);

/// Resolved plant ground truth (paramdelta.plant/1); empty optional when the
/// spec has no plant.
std::optional<std::string> plant_ground_truth_json(const GenSpec& spec);

/// Writes the checkpoint; with a plant, also writes "<out>.plant.json"
/// recording the planted ground truth. Throws InvalidSpec on bad dimensions,
/// non-finite plant values, or offsets naming tensors the template lacks.
Checkpoint generate_checkpoint(const GenSpec& spec, const std::filesystem::path& out);

} // namespace paramdelta
