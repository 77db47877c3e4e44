#include "paramdelta/combine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "paramdelta/parallel.hpp"

namespace paramdelta {

namespace {

// Streaming chunk length, in elements. Working buffers are per worker and
// per chunk, so peak memory is O(threads · chunk), independent of tensor
// size.
constexpr uint64_t kChunkElems = 16 * 1024;

std::string format_coefficient(double c) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.16e", c); // 17 significant digits
    return buf;
}

std::string shape_to_string(const std::vector<uint64_t>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

void check_spec(const CombineSpec& spec) {
    if (spec.terms.empty()) fail(ErrorClass::InvalidSpec, "combine spec has no terms");
    if (spec.anchor_index >= spec.terms.size()) {
        fail(ErrorClass::InvalidSpec, "anchor index " + std::to_string(spec.anchor_index) +
                                          " out of range for " + std::to_string(spec.terms.size()) +
                                          " terms");
    }
    for (const auto& term : spec.terms) {
        if (!std::isfinite(term.coefficient)) {
            fail(ErrorClass::NonFiniteCoefficient,
                 "coefficient for '" + term.checkpoint.path().string() + "' is not finite");
        }
    }
    if (spec.missing_policy == MissingPolicy::AnchorPassthrough &&
        spec.terms[spec.anchor_index].coefficient != 1.0) {
        fail(ErrorClass::InvalidSpec, "anchor coefficient must be 1 under the anchor policy");
    }
}

// Output tensor names for the spec's missing policy. Shape conflicts on
// shared names are always fatal, under every policy.
std::vector<std::string> resolve_names(const CombineSpec& spec, std::vector<std::string>* skipped) {
    const Checkpoint& anchor = spec.terms[spec.anchor_index].checkpoint;

    if (spec.missing_policy == MissingPolicy::Strict) {
        for (size_t i = 0; i < spec.terms.size(); ++i) {
            if (i == spec.anchor_index) continue;
            CompatReport r = validate_homologous(anchor, spec.terms[i].checkpoint);
            if (!r.homologous) {
                std::string what = "'" + anchor.path().string() + "' vs '" +
                                   spec.terms[i].checkpoint.path().string() + "'";
                if (!r.only_in_a.empty()) what += "; missing from b: " + r.only_in_a.front();
                if (!r.only_in_b.empty()) what += "; missing from a: " + r.only_in_b.front();
                if (!r.shape_mismatches.empty()) {
                    const auto& m = r.shape_mismatches.front();
                    what += "; shape of '" + m.name + "': " + shape_to_string(m.shape_a) + " vs " +
                            shape_to_string(m.shape_b);
                }
                fail(ErrorClass::NotHomologous, what);
            }
        }
        return anchor.names();
    }

    // Intersect / AnchorPassthrough share the shape check over shared names
    auto check_shapes = [&](const std::string& name) {
        const TensorMeta* first = nullptr;
        for (const auto& term : spec.terms) {
            if (!term.checkpoint.contains(name)) continue;
            const TensorMeta& m = term.checkpoint.meta(name);
            if (!first) {
                first = &m;
            } else if (first->shape != m.shape) {
                fail(ErrorClass::ShapeConflict,
                     "tensor '" + name + "' has shape " + shape_to_string(first->shape) + " and " +
                         shape_to_string(m.shape) + " across terms");
            }
        }
    };

    if (spec.missing_policy == MissingPolicy::AnchorPassthrough) {
        for (const auto& name : anchor.names()) check_shapes(name);
        return anchor.names();
    }

    std::vector<std::string> names;
    for (const auto& name : anchor.names()) {
        bool everywhere = true;
        for (const auto& term : spec.terms) {
            if (!term.checkpoint.contains(name)) {
                everywhere = false;
                break;
            }
        }
        if (everywhere) {
            check_shapes(name);
            names.push_back(name);
        } else if (skipped) {
            skipped->push_back(name);
        }
    }
    // names only some non-anchor terms carry are skipped as well
    if (skipped) {
        std::set<std::string> anchor_names(anchor.names().begin(), anchor.names().end());
        for (const auto& term : spec.terms) {
            for (const auto& name : term.checkpoint.names()) {
                if (!anchor_names.count(name)) {
                    skipped->push_back(name);
                    anchor_names.insert(name); // dedupe
                }
            }
        }
    }
    if (names.empty()) {
        fail(ErrorClass::EmptyIntersection, "no tensor name is present in every term");
    }
    return names;
}

struct TermView {
    const Checkpoint* checkpoint;
    const TensorMeta* meta; // nullptr when the term lacks the tensor
    double coefficient;
};

} // namespace

std::string_view policy_name(MissingPolicy p) {
    switch (p) {
    case MissingPolicy::Strict: return "strict";
    case MissingPolicy::Intersect: return "intersect";
    case MissingPolicy::AnchorPassthrough: return "anchor";
    }
    return "strict";
}

std::string_view dtype_policy_name(OutDTypePolicy p) {
    return p == OutDTypePolicy::MatchAnchor ? "match_anchor" : "force_f32";
}

std::string render_recipe(const CombineSpec& spec) {
    std::string s = "combine(policy=";
    s += policy_name(spec.missing_policy);
    s += ",out_dtype=";
    s += dtype_policy_name(spec.out_dtype_policy);
    s += ",anchor=";
    s += std::to_string(spec.anchor_index);
    s += ",terms=[";
    for (size_t i = 0; i < spec.terms.size(); ++i) {
        if (i) s += ",";
        s += "(";
        s += spec.terms[i].checkpoint.path().string();
        s += ",";
        s += format_coefficient(spec.terms[i].coefficient);
        s += ")";
    }
    s += "])";
    return s;
}

Checkpoint linear_combine(const CombineSpec& spec, const std::filesystem::path& out,
                          std::vector<std::string>* skipped) {
    check_spec(spec);
    std::vector<std::string> names = resolve_names(spec, skipped);
    const Checkpoint& anchor = spec.terms[spec.anchor_index].checkpoint;

    std::vector<TensorDecl> decls;
    decls.reserve(names.size());
    for (const auto& name : names) {
        const TensorMeta& m = anchor.meta(name);
        DType out_dtype =
            spec.out_dtype_policy == OutDTypePolicy::ForceF32 ? DType::F32 : m.dtype;
        decls.push_back({name, out_dtype, m.shape});
    }

    std::map<std::string, std::string> metadata = spec.extra_metadata;
    metadata[std::string(kKindKey)] = std::string(kind_name(spec.out_kind));
    metadata[std::string(kRecipeKey)] = render_recipe(spec);

    FileLayout layout = plan_layout(decls, metadata);
    PositionalWriter writer(out, layout);

    for (size_t t = 0; t < names.size(); ++t) {
        const std::string& name = names[t];
        const TensorMeta& out_meta = layout.tensors[t];
        uint64_t elems = out_meta.num_elements();

        std::vector<TermView> views;
        views.reserve(spec.terms.size());
        for (const auto& term : spec.terms) {
            const TensorMeta* m =
                term.checkpoint.contains(name) ? &term.checkpoint.meta(name) : nullptr;
            views.push_back({&term.checkpoint, m, term.coefficient});
        }

        // untouched anchor tensor under the anchor policy: bit-level copy
        bool passthrough = spec.missing_policy == MissingPolicy::AnchorPassthrough;
        for (size_t i = 0; passthrough && i < views.size(); ++i) {
            if (i != spec.anchor_index && views[i].meta) passthrough = false;
        }
        if (passthrough && out_meta.dtype == anchor.meta(name).dtype) {
            const TensorMeta& src = anchor.meta(name);
            uint64_t bytes = src.num_bytes();
            uint64_t chunk_bytes = kChunkElems * byte_width(src.dtype);
            uint64_t n_chunks = bytes == 0 ? 0 : (bytes + chunk_bytes - 1) / chunk_bytes;
            parallel_for(n_chunks, spec.threads, [&](size_t cb, size_t ce, int) {
                mem::Buffer<uint8_t> raw;
                for (size_t c = cb; c < ce; ++c) {
                    uint64_t lo = c * chunk_bytes;
                    uint64_t hi = std::min(bytes, lo + chunk_bytes);
                    raw.resize(static_cast<size_t>(hi - lo));
                    anchor.read_raw(src, lo, hi, raw.data());
                    writer.write_at(layout.data_begin + out_meta.begin + lo, raw.data(),
                                    static_cast<size_t>(hi - lo));
                }
            });
            continue;
        }

        uint64_t n_chunks = elems == 0 ? 0 : (elems + kChunkElems - 1) / kChunkElems;
        size_t out_width = byte_width(out_meta.dtype);
        parallel_for(n_chunks, spec.threads, [&](size_t cb, size_t ce, int) {
            mem::Buffer<float> input, sum, comp;
            mem::Buffer<uint8_t> encoded;
            for (size_t c = cb; c < ce; ++c) {
                uint64_t lo = c * kChunkElems;
                uint64_t hi = std::min(elems, lo + kChunkElems);
                size_t n = static_cast<size_t>(hi - lo);
                if (sum.size() < n) {
                    input.resize(n);
                    sum.resize(n);
                    comp.resize(n);
                    encoded.resize(n * 4);
                }
                std::fill_n(sum.data(), n, 0.0f);
                std::fill_n(comp.data(), n, 0.0f);

                for (const TermView& view : views) {
                    if (!view.meta) continue; // absent under intersect/anchor policy
                    view.checkpoint->read_elements(*view.meta, lo, hi, input.data());
                    const double coeff = view.coefficient;
                    for (size_t j = 0; j < n; ++j) {
                        // product in one rounding, Neumaier-compensated f32 accumulation
                        float y = static_cast<float>(coeff * static_cast<double>(input[j]));
                        float s = sum[j];
                        float t2 = s + y;
                        if (std::fabs(s) >= std::fabs(y)) {
                            comp[j] += (s - t2) + y;
                        } else {
                            comp[j] += (y - t2) + s;
                        }
                        sum[j] = t2;
                    }
                }
                for (size_t j = 0; j < n; ++j) sum[j] += comp[j];
                encode_from_f32(out_meta.dtype, sum.data(), n, encoded.data());
                writer.write_at(layout.data_begin + out_meta.begin + lo * out_width,
                                encoded.data(), n * out_width);
            }
        });
    }

    writer.finish();
    return Checkpoint::open(out);
}

Checkpoint extract_delta(const Checkpoint& post, const Checkpoint& base,
                         const std::filesystem::path& out, int threads,
                         const std::map<std::string, std::string>& extra_metadata) {
    CombineSpec spec;
    spec.terms = {{post, 1.0}, {base, -1.0}};
    spec.missing_policy = MissingPolicy::Strict;
    spec.anchor_index = 0;
    spec.out_dtype_policy = OutDTypePolicy::ForceF32;
    spec.out_kind = CheckpointKind::Delta;
    spec.threads = threads;
    spec.extra_metadata = extra_metadata;
    spec.extra_metadata[std::string(kMinuendKey)] = post.path().string();
    spec.extra_metadata[std::string(kSubtrahendKey)] = base.path().string();
    return linear_combine(spec, out);
}

Checkpoint apply_delta(const Checkpoint& anchor, const Checkpoint& delta, double alpha,
                       const std::filesystem::path& out, MissingPolicy policy, int threads,
                       const std::map<std::string, std::string>& extra_metadata,
                       std::vector<std::string>* skipped) {
    CombineSpec spec;
    spec.terms = {{anchor, 1.0}, {delta, alpha}};
    spec.missing_policy = policy;
    spec.anchor_index = 0;
    spec.out_dtype_policy = OutDTypePolicy::MatchAnchor;
    spec.out_kind = CheckpointKind::Fused;
    spec.threads = threads;
    spec.extra_metadata = extra_metadata;
    return linear_combine(spec, out, skipped);
}

Checkpoint fuse(const Checkpoint& anchor, const std::vector<std::pair<Checkpoint, double>>& deltas,
                const std::filesystem::path& out, MissingPolicy policy, int threads,
                const std::map<std::string, std::string>& extra_metadata,
                std::vector<std::string>* skipped) {
    CombineSpec spec;
    spec.terms.push_back({anchor, 1.0});
    for (const auto& [delta, coeff] : deltas) spec.terms.push_back({delta, coeff});
    spec.missing_policy = policy;
    spec.anchor_index = 0;
    spec.out_dtype_policy = OutDTypePolicy::MatchAnchor;
    spec.out_kind = CheckpointKind::Fused;
    spec.threads = threads;
    spec.extra_metadata = extra_metadata;
    return linear_combine(spec, out, skipped);
}

} // namespace paramdelta
