#include "paramdelta/generator.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "paramdelta/rng.hpp"

namespace paramdelta {

using ordered_json = nlohmann::ordered_json;

namespace {

constexpr uint64_t kPlantSalt = 0x70616c6e74ull; // distinct stream family for plants
constexpr size_t kEmitChunk = 64 * 1024;

void check_spec(const GenSpec& spec) {
    if (spec.layers == 0 || spec.hidden_dim == 0 || spec.ffn_dim == 0 || spec.vocab_dim == 0) {
        fail(ErrorClass::InvalidSpec, "layers, hidden_dim, ffn_dim and vocab_dim must all be positive");
    }
    if (spec.plant) {
        for (const auto& [cls, factor] : spec.plant->delta_scales) {
            if (!std::isfinite(factor)) {
                fail(ErrorClass::InvalidSpec, "plant scale for class " +
                                                  std::string(layer_class_name(cls)) + " is not finite");
            }
        }
        for (const auto& [name, offset] : spec.plant->offsets) {
            if (!std::isfinite(offset)) {
                fail(ErrorClass::InvalidSpec, "plant offset for '" + name + "' is not finite");
            }
        }
    }
}

std::string provenance(const GenSpec& spec) {
    std::string s = "seed=" + std::to_string(spec.seed);
    s += ",layers=" + std::to_string(spec.layers);
    s += ",hidden=" + std::to_string(spec.hidden_dim);
    s += ",ffn=" + std::to_string(spec.ffn_dim);
    s += ",vocab=" + std::to_string(spec.vocab_dim);
    s += ",dtype=";
    s += dtype_name(spec.dtype);
    if (!spec.include_norms) s += ",norms=off";
    if (spec.plant && !spec.plant->empty()) s += ",planted";
    return s;
}

} // namespace

std::vector<TensorDecl> generator_template(const GenSpec& spec) {
    check_spec(spec);
    const uint64_t h = spec.hidden_dim, f = spec.ffn_dim, v = spec.vocab_dim;
    std::vector<TensorDecl> decls;
    decls.push_back({"model.embed_tokens.weight", spec.dtype, {v, h}});
    for (uint32_t i = 0; i < spec.layers; ++i) {
        std::string prefix = "model.layers." + std::to_string(i) + ".";
        decls.push_back({prefix + "self_attn.q_proj.weight", spec.dtype, {h, h}});
        decls.push_back({prefix + "self_attn.k_proj.weight", spec.dtype, {h, h}});
        decls.push_back({prefix + "self_attn.v_proj.weight", spec.dtype, {h, h}});
        decls.push_back({prefix + "self_attn.o_proj.weight", spec.dtype, {h, h}});
        decls.push_back({prefix + "mlp.gate_proj.weight", spec.dtype, {f, h}});
        decls.push_back({prefix + "mlp.up_proj.weight", spec.dtype, {f, h}});
        decls.push_back({prefix + "mlp.down_proj.weight", spec.dtype, {h, f}});
        if (spec.include_norms) {
            decls.push_back({prefix + "input_layernorm.weight", spec.dtype, {h}});
            decls.push_back({prefix + "post_attention_layernorm.weight", spec.dtype, {h}});
        }
    }
    if (spec.include_norms) decls.push_back({"model.norm.weight", spec.dtype, {h}});
    decls.push_back({"lm_head.weight", spec.dtype, {v, h}});
    return decls;
}

std::optional<std::string> plant_ground_truth_json(const GenSpec& spec) {
    if (!spec.plant || spec.plant->empty()) return std::nullopt;
    ordered_json doc = ordered_json::object();
    doc["schema"] = "paramdelta.plant/1";
    doc["delta_magnitude"] = spec.plant->delta_scales.empty() ? 0.0 : kPlantDeltaMagnitude;

    ordered_json scales = ordered_json::object();
    if (!spec.plant->delta_scales.empty()) {
        for (LayerClass cls : {LayerClass::Attention, LayerClass::FeedForward, LayerClass::Embedding,
                               LayerClass::Norm, LayerClass::Output, LayerClass::Other}) {
            auto it = spec.plant->delta_scales.find(cls);
            scales[std::string(layer_class_name(cls))] =
                it == spec.plant->delta_scales.end() ? 1.0 : it->second;
        }
    }
    doc["delta_scale_by_class"] = std::move(scales);

    ordered_json offsets = ordered_json::object();
    for (const auto& [name, offset] : spec.plant->offsets) offsets[name] = offset;
    doc["offsets"] = std::move(offsets);
    return doc.dump(2) + "\n";
}

Checkpoint generate_checkpoint(const GenSpec& spec, const std::filesystem::path& out) {
    std::vector<TensorDecl> decls = generator_template(spec);

    if (spec.plant) {
        std::set<std::string> known;
        for (const auto& d : decls) known.insert(d.name);
        for (const auto& [name, _] : spec.plant->offsets) {
            if (!known.count(name)) {
                fail(ErrorClass::InvalidSpec, "plant offset names unknown tensor '" + name + "'");
            }
        }
    }

    ClassificationRules rules = ClassificationRules::defaults();
    const bool plant_deltas = spec.plant && !spec.plant->delta_scales.empty();

    std::map<std::string, std::string> metadata;
    metadata[std::string(kKindKey)] = std::string(kind_name(CheckpointKind::Base));
    metadata[std::string(kGeneratorKey)] = provenance(spec);

    Checkpoint ck = write_checkpoint(
        out, decls, metadata, [&](size_t, const TensorDecl& decl, const ValueSink& emit) {
            uint64_t base_key = rng::stream_key(spec.seed, decl.name);
            uint64_t plant_key = rng::stream_key(spec.seed ^ kPlantSalt, decl.name);

            float delta_scale = 0.0f;
            if (plant_deltas) {
                auto [cls, _] = rules.classify(decl.name);
                auto it = spec.plant->delta_scales.find(cls);
                double factor = it == spec.plant->delta_scales.end() ? 1.0 : it->second;
                delta_scale = static_cast<float>(factor * kPlantDeltaMagnitude);
            }
            float offset = 0.0f;
            if (spec.plant) {
                auto it = spec.plant->offsets.find(decl.name);
                if (it != spec.plant->offsets.end()) offset = static_cast<float>(it->second);
            }

            uint64_t total = 1;
            for (uint64_t d : decl.shape) total *= d;

            mem::Buffer<float> chunk(static_cast<size_t>(std::min<uint64_t>(total, kEmitChunk)));
            uint64_t done = 0;
            while (done < total) {
                size_t n = static_cast<size_t>(std::min<uint64_t>(kEmitChunk, total - done));
                for (size_t j = 0; j < n; ++j) {
                    uint64_t i = done + j;
                    float v = rng::grid_value(base_key, i);
                    if (delta_scale != 0.0f) v += delta_scale * rng::grid_value(plant_key, i);
                    if (offset != 0.0f) v += offset;
                    chunk[j] = v;
                }
                emit(std::span<const float>(chunk.data(), n));
                done += n;
            }
            if (total == 0) emit({});
        });

    if (auto truth = plant_ground_truth_json(spec)) {
        std::filesystem::path companion = out;
        companion += ".plant.json";
        std::ofstream f(companion, std::ios::binary);
        if (!f) fail(ErrorClass::IoFailure, "cannot write '" + companion.string() + "'");
        f << *truth;
    }
    return ck;
}

} // namespace paramdelta
