#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "paramdelta/checkpoint.hpp"

namespace paramdelta {

enum class MissingPolicy { Strict, Intersect, AnchorPassthrough };
enum class OutDTypePolicy { MatchAnchor, ForceF32 };

std::string_view policy_name(MissingPolicy p);
std::string_view dtype_policy_name(OutDTypePolicy p);

struct CombineTerm {
    Checkpoint checkpoint;
    double coefficient = 1.0; // finite; negative is meaningful subtraction
};

struct CombineSpec {
    std::vector<CombineTerm> terms; // nonempty
    MissingPolicy missing_policy = MissingPolicy::Strict;
    size_t anchor_index = 0;
    OutDTypePolicy out_dtype_policy = OutDTypePolicy::MatchAnchor;
    CheckpointKind out_kind = CheckpointKind::Fused;
    std::map<std::string, std::string> extra_metadata;
    int threads = 1;
};

/// Canonical provenance rendering of a spec (coefficients at 17 significant
/// digits), recorded in output metadata under paramdelta.recipe.
std::string render_recipe(const CombineSpec& spec);

/// The ParamΔ engine: out[name] = Σᵢ coeffᵢ · termᵢ[name], accumulated in
/// working precision with Neumaier-compensated summation over terms in fixed
/// term order, then rounded to the output dtype. Tensors are streamed in
/// chunks in deterministic name order; identical inputs and spec produce
/// byte-identical output files regardless of thread count.
///
/// `skipped`, when given, receives the names dropped by the Intersect policy.
Checkpoint linear_combine(const CombineSpec& spec, const std::filesystem::path& out,
                          std::vector<std::string>* skipped = nullptr);

/// ΔΘ = Θ_post − Θ_base. Inputs must be homologous; the delta is stored in
/// F32 so 16-bit subtraction stays exact and reconstruction is bit-exact.
Checkpoint extract_delta(const Checkpoint& post, const Checkpoint& base,
                         const std::filesystem::path& out, int threads = 1,
                         const std::map<std::string, std::string>& extra_metadata = {});

/// Θ_out = Θ_anchor + α·ΔΘ. Output dtype matches the anchor.
Checkpoint apply_delta(const Checkpoint& anchor, const Checkpoint& delta, double alpha,
                       const std::filesystem::path& out,
                       MissingPolicy policy = MissingPolicy::Strict, int threads = 1,
                       const std::map<std::string, std::string>& extra_metadata = {},
                       std::vector<std::string>* skipped = nullptr);

/// Θ_out = Θ_anchor + Σ coeffᵢ·ΔΘᵢ (multi-delta fusion, e.g. α=β=0.5).
Checkpoint fuse(const Checkpoint& anchor,
                const std::vector<std::pair<Checkpoint, double>>& deltas,
                const std::filesystem::path& out,
                MissingPolicy policy = MissingPolicy::Strict, int threads = 1,
                const std::map<std::string, std::string>& extra_metadata = {},
                std::vector<std::string>* skipped = nullptr);

} // namespace paramdelta
