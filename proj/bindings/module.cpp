// Python bindings for the checkpoint-arithmetic core. Thin path-oriented
// wrappers over the C++ operations; report-producing calls hand back plain
// dicts decoded from the canonical JSON documents.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "paramdelta/analysis.hpp"
#include "paramdelta/combine.hpp"
#include "paramdelta/generator.hpp"
#include "paramdelta/transfer.hpp"

namespace py = pybind11;
namespace pd = paramdelta;

namespace {

py::object json_loads(const std::string& text) {
    return py::module_::import("json").attr("loads")(text);
}

pd::DType dtype_from_string(const std::string& s) {
    if (s == "f32" || s == "F32") return pd::DType::F32;
    if (s == "f16" || s == "F16") return pd::DType::F16;
    if (s == "bf16" || s == "BF16") return pd::DType::BF16;
    throw py::value_error("dtype must be one of f32|f16|bf16");
}

pd::MissingPolicy policy_from_string(const std::string& s) {
    if (s == "strict") return pd::MissingPolicy::Strict;
    if (s == "intersect") return pd::MissingPolicy::Intersect;
    if (s == "anchor") return pd::MissingPolicy::AnchorPassthrough;
    throw py::value_error("policy must be one of strict|intersect|anchor");
}

pd::FitMode mode_from_string(const std::string& s) {
    if (s == "origin") return pd::FitMode::ThroughOrigin;
    if (s == "intercept") return pd::FitMode::WithIntercept;
    throw py::value_error("mode must be origin or intercept");
}

pd::ClassificationRules rules_from_optional(const std::optional<std::string>& rules_file) {
    return rules_file ? pd::ClassificationRules::from_file(*rules_file)
                      : pd::ClassificationRules::defaults();
}

py::dict compat_to_dict(const pd::CompatReport& r) {
    py::dict d;
    d["homologous"] = r.homologous;
    d["shared"] = r.shared;
    d["only_in_a"] = r.only_in_a;
    d["only_in_b"] = r.only_in_b;
    py::list shapes;
    for (const auto& m : r.shape_mismatches) {
        shapes.append(py::make_tuple(m.name, m.shape_a, m.shape_b));
    }
    d["shape_mismatches"] = shapes;
    py::list dtypes;
    for (const auto& m : r.dtype_mismatches) {
        dtypes.append(py::make_tuple(m.name, std::string(pd::dtype_name(m.dtype_a)),
                                     std::string(pd::dtype_name(m.dtype_b))));
    }
    d["dtype_mismatches"] = dtypes;
    return d;
}

} // namespace

PYBIND11_MODULE(_paramdelta, m) {
    m.doc() = "Checkpoint arithmetic for post-training parameter deltas";
#ifdef PARAMDELTA_VERSION
    m.attr("__version__") = PARAMDELTA_VERSION;
#else
    m.attr("__version__") = "dev";
#endif

    py::register_exception<pd::Error>(m, "ParamDeltaError");

    m.def(
        "gen",
        [](const std::string& out, uint64_t seed, uint32_t layers, uint32_t hidden_dim,
           uint32_t ffn_dim, uint32_t vocab_dim, const std::string& dtype, bool include_norms,
           const std::map<std::string, double>& plant_scales,
           const std::map<std::string, double>& plant_offsets) {
            pd::GenSpec spec;
            spec.seed = seed;
            spec.layers = layers;
            spec.hidden_dim = hidden_dim;
            spec.ffn_dim = ffn_dim;
            spec.vocab_dim = vocab_dim;
            spec.dtype = dtype_from_string(dtype);
            spec.include_norms = include_norms;
            if (!plant_scales.empty() || !plant_offsets.empty()) {
                pd::PlantSpec plant;
                for (const auto& [cls, factor] : plant_scales) {
                    plant.delta_scales[pd::parse_layer_class(cls)] = factor;
                }
                plant.offsets = plant_offsets;
                spec.plant = std::move(plant);
            }
            pd::generate_checkpoint(spec, out);
            return out;
        },
        py::arg("out"), py::arg("seed") = 0, py::arg("layers") = 2, py::arg("hidden_dim") = 32,
        py::arg("ffn_dim") = 64, py::arg("vocab_dim") = 64, py::arg("dtype") = "f32",
        py::arg("include_norms") = true, py::arg("plant_scales") = std::map<std::string, double>{},
        py::arg("plant_offsets") = std::map<std::string, double>{},
        "Generate a deterministic miniature decoder checkpoint.");

    m.def(
        "inspect",
        [](const std::string& path) {
            pd::Checkpoint ck = pd::Checkpoint::open(path);
            py::dict d;
            d["path"] = ck.path().string();
            d["kind"] = std::string(pd::kind_name(ck.kind()));
            d["metadata"] = ck.metadata();
            py::dict tensors;
            for (const auto& name : ck.names()) {
                const pd::TensorMeta& meta = ck.meta(name);
                py::dict t;
                t["dtype"] = std::string(pd::dtype_name(meta.dtype));
                t["shape"] = meta.shape;
                t["data_offsets"] = py::make_tuple(meta.begin, meta.end);
                tensors[py::str(name)] = t;
            }
            d["tensors"] = tensors;
            return d;
        },
        py::arg("path"), "Manifest and metadata of a checkpoint file.");

    m.def(
        "read_tensor",
        [](const std::string& path, const std::string& name) {
            pd::Checkpoint ck = pd::Checkpoint::open(path);
            pd::Tensor t = ck.read_tensor(name);
            std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
            py::array_t<float> arr(shape);
            std::copy(t.values.data(), t.values.data() + t.values.size(),
                      arr.mutable_data());
            return arr;
        },
        py::arg("path"), py::arg("name"),
        "Read one tensor in 32-bit working precision (row-major).");

    m.def(
        "diff",
        [](const std::string& post, const std::string& base, const std::string& out, int threads) {
            pd::extract_delta(pd::Checkpoint::open(post), pd::Checkpoint::open(base), out, threads);
            return out;
        },
        py::arg("post"), py::arg("base"), py::arg("out"), py::arg("threads") = 1,
        "Extract a parameter delta: post - base (stored F32).");

    m.def(
        "apply",
        [](const std::string& anchor, const std::string& delta, const std::string& out,
           double alpha, const std::string& policy, int threads) {
            pd::apply_delta(pd::Checkpoint::open(anchor), pd::Checkpoint::open(delta), alpha, out,
                            policy_from_string(policy), threads);
            return out;
        },
        py::arg("anchor"), py::arg("delta"), py::arg("out"), py::arg("alpha") = 1.0,
        py::arg("policy") = "strict", py::arg("threads") = 1,
        "Apply a delta: anchor + alpha*delta.");

    m.def(
        "fuse",
        [](const std::string& anchor,
           const std::vector<std::pair<std::string, double>>& deltas, const std::string& out,
           const std::string& policy, int threads) {
            std::vector<std::pair<pd::Checkpoint, double>> opened;
            opened.reserve(deltas.size());
            for (const auto& [path, coeff] : deltas) {
                opened.emplace_back(pd::Checkpoint::open(path), coeff);
            }
            pd::fuse(pd::Checkpoint::open(anchor), opened, out, policy_from_string(policy), threads);
            return out;
        },
        py::arg("anchor"), py::arg("deltas"), py::arg("out"), py::arg("policy") = "strict",
        py::arg("threads") = 1, "Fuse weighted deltas into an anchor.");

    m.def(
        "validate",
        [](const std::string& a, const std::string& b) {
            return compat_to_dict(
                pd::validate_homologous(pd::Checkpoint::open(a), pd::Checkpoint::open(b)));
        },
        py::arg("a"), py::arg("b"), "Structural homology report for two checkpoints.");

    m.def(
        "cosine_map",
        [](const std::string& a, const std::string& b, const std::optional<std::string>& rules,
           size_t bins, int threads) {
            pd::AnalysisReport report =
                pd::cosine_map(pd::Checkpoint::open(a), pd::Checkpoint::open(b),
                               rules_from_optional(rules), bins, threads);
            return json_loads(pd::to_json_string(report));
        },
        py::arg("a"), py::arg("b"), py::arg("rules") = std::nullopt, py::arg("bins") = 50,
        py::arg("threads") = 1, "Per-tensor cosine similarity report (paramdelta.report/1).");

    m.def(
        "norm_map",
        [](const std::string& delta, const std::optional<std::string>& rules, size_t bins,
           int threads) {
            pd::AnalysisReport report = pd::norm_map(pd::Checkpoint::open(delta),
                                                     rules_from_optional(rules), bins, threads);
            return json_loads(pd::to_json_string(report));
        },
        py::arg("delta"), py::arg("rules") = std::nullopt, py::arg("bins") = 50,
        py::arg("threads") = 1, "Per-tensor norm report (paramdelta.report/1).");

    m.def(
        "classify_tensor",
        [](const std::string& name, const std::optional<std::string>& rules) {
            auto [cls, layer] = rules_from_optional(rules).classify(name);
            return py::make_tuple(std::string(pd::layer_class_name(cls)), layer);
        },
        py::arg("name"), py::arg("rules") = std::nullopt,
        "(layer class, optional layer index) for a tensor name.");

    m.def(
        "histogram",
        [](const std::vector<double>& values, size_t bins,
           const std::optional<std::pair<double, double>>& range) {
            pd::Histogram h = pd::histogram(values, bins, range);
            py::dict d;
            d["edges"] = h.edges;
            d["counts"] = h.counts;
            return d;
        },
        py::arg("values"), py::arg("bins"), py::arg("range") = std::nullopt,
        "Equal-width histogram; right edge of the last bin is inclusive.");

    m.def(
        "hypothetical_scores",
        [](const std::string& csv, const std::string& base_i, const std::string& post_j,
           const std::string& base_j) {
            pd::HypotheticalResult r =
                pd::hypothetical_scores(pd::ScoreTable::from_csv(csv), base_i, post_j, base_j);
            py::list scores;
            for (const auto& s : r.scores) {
                scores.append(py::make_tuple(s.benchmark, s.metric, s.value));
            }
            py::list skipped;
            for (const auto& s : r.skipped) {
                skipped.append(py::make_tuple(s.benchmark, s.metric, s.missing));
            }
            py::dict d;
            d["scores"] = scores;
            d["skipped"] = skipped;
            return d;
        },
        py::arg("csv"), py::arg("base_i"), py::arg("post_j"), py::arg("base_j"),
        "f(base_i) + f(post_j) - f(base_j) per (benchmark, metric).");

    m.def(
        "fit_gamma",
        [](const std::vector<std::pair<double, double>>& pairs, const std::string& mode) {
            pd::RegressionResult r = pd::fit_gamma(pairs, mode_from_string(mode));
            py::dict d;
            d["gamma"] = r.gamma;
            d["intercept"] = r.intercept;
            d["r_squared"] = r.r_squared;
            d["n_points"] = r.n_points;
            d["residuals"] = r.residuals;
            d["fit_mode"] = std::string(pd::fit_mode_name(r.fit_mode));
            return d;
        },
        py::arg("pairs"), py::arg("mode") = "origin",
        "Least-squares fit of real = gamma*hypothetical (+ intercept).");

    m.def(
        "gamma_report",
        [](const std::string& csv, const std::string& base_i, const std::string& post_j,
           const std::string& base_j, const std::string& real, const std::string& mode) {
            pd::GammaReport report = pd::gamma_report(pd::ScoreTable::from_csv(csv), base_i,
                                                      post_j, base_j, real, mode_from_string(mode));
            return json_loads(report.to_json_string());
        },
        py::arg("csv"), py::arg("base_i"), py::arg("post_j"), py::arg("base_j"), py::arg("real"),
        py::arg("mode") = "origin", "Full transfer-efficiency report (paramdelta.gamma/1).");

    m.def(
        "plan_sweep",
        [](const std::string& anchor, const std::string& delta, std::vector<double> alphas,
           const std::string& output_template) {
            return json_loads(
                pd::plan_sweep(anchor, delta, std::move(alphas), output_template).to_json_string());
        },
        py::arg("anchor"), py::arg("delta"), py::arg("alphas"), py::arg("template"),
        "Plan an alpha sweep (paramdelta.sweep/1).");

    m.def(
        "run_sweep",
        [](const std::string& anchor, const std::string& delta, std::vector<double> alphas,
           const std::string& output_template, const std::string& policy, int threads) {
            pd::SweepManifest manifest =
                pd::plan_sweep(anchor, delta, std::move(alphas), output_template);
            pd::Checkpoint anchor_ck = pd::Checkpoint::open(anchor);
            pd::Checkpoint delta_ck = pd::Checkpoint::open(delta);
            for (size_t i = 0; i < manifest.alphas.size(); ++i) {
                pd::apply_delta(anchor_ck, delta_ck, manifest.alphas[i], manifest.outputs[i],
                                policy_from_string(policy), threads);
            }
            return json_loads(manifest.to_json_string());
        },
        py::arg("anchor"), py::arg("delta"), py::arg("alphas"), py::arg("template"),
        py::arg("policy") = "strict", py::arg("threads") = 1,
        "Plan a sweep and produce one checkpoint per alpha.");
}
