#include "paramdelta/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <regex>

#include <nlohmann/json.hpp>

#include "paramdelta/parallel.hpp"

namespace paramdelta {

using ordered_json = nlohmann::ordered_json;

namespace {

// Pairwise (tree) reduction leaf, fixed by contract: error grows O(log n)
// and the result is independent of thread count.
constexpr size_t kReductionLeaf = 4096;
// I/O chunk, a whole number of leaves.
constexpr size_t kLeavesPerChunk = 16;

constexpr LayerClass kClassOrder[] = {LayerClass::Attention, LayerClass::FeedForward,
                                      LayerClass::Embedding, LayerClass::Norm,
                                      LayerClass::Output,    LayerClass::Other};

float tree_sum(std::vector<float>& partials) {
    size_t n = partials.size();
    if (n == 0) return 0.0f;
    while (n > 1) {
        size_t half = n / 2;
        for (size_t i = 0; i < half; ++i) partials[i] = partials[2 * i] + partials[2 * i + 1];
        if (n & 1) {
            partials[half] = partials[n - 1];
            n = half + 1;
        } else {
            n = half;
        }
    }
    return partials[0];
}

// In-leaf reductions recurse pairwise down to short runs so rounding error
// grows with log(n), not n; the split depends only on n, keeping results
// independent of threads and chunking.
struct LeafMoments {
    float a2 = 0.0f;
    float b2 = 0.0f;
    float dot = 0.0f;
};

LeafMoments pairwise_moments(const float* a, const float* b, size_t n) {
    if (n <= 16) {
        LeafMoments m;
        for (size_t j = 0; j < n; ++j) {
            m.a2 += a[j] * a[j];
            m.b2 += b[j] * b[j];
            m.dot += a[j] * b[j];
        }
        return m;
    }
    size_t half = n / 2;
    LeafMoments l = pairwise_moments(a, b, half);
    LeafMoments r = pairwise_moments(a + half, b + half, n - half);
    return {l.a2 + r.a2, l.b2 + r.b2, l.dot + r.dot};
}

float pairwise_square_sum(const float* a, size_t n) {
    if (n <= 16) {
        float s = 0.0f;
        for (size_t j = 0; j < n; ++j) s += a[j] * a[j];
        return s;
    }
    size_t half = n / 2;
    return pairwise_square_sum(a, half) + pairwise_square_sum(a + half, n - half);
}

std::optional<int> parse_layer_index(const std::string& name) {
    static const std::regex layer_re(R"((?:^|\.)(\d+)(?:\.|$))");
    std::smatch m;
    if (std::regex_search(name, m, layer_re)) {
        try {
            return std::stoi(m[1].str());
        } catch (...) {
            return std::nullopt;
        }
    }
    return std::nullopt;
}

} // namespace

std::string_view layer_class_name(LayerClass c) {
    switch (c) {
    case LayerClass::Attention: return "Attention";
    case LayerClass::FeedForward: return "FeedForward";
    case LayerClass::Embedding: return "Embedding";
    case LayerClass::Norm: return "Norm";
    case LayerClass::Output: return "Output";
    case LayerClass::Other: return "Other";
    }
    return "Other";
}

LayerClass parse_layer_class(std::string_view s) {
    for (LayerClass c : kClassOrder) {
        if (s == layer_class_name(c)) return c;
    }
    fail(ErrorClass::InvalidSpec, "unknown layer class \"" + std::string(s) + "\"");
}

struct ClassificationRules::Compiled {
    std::vector<std::regex> patterns;
};

ClassificationRules::ClassificationRules(std::vector<Rule> rules) : rules_(std::move(rules)) {
    auto compiled = std::make_shared<Compiled>();
    compiled->patterns.reserve(rules_.size());
    for (const auto& rule : rules_) {
        try {
            compiled->patterns.emplace_back(rule.pattern, std::regex::ECMAScript);
        } catch (const std::regex_error& e) {
            fail(ErrorClass::InvalidSpec, "bad classification pattern \"" + rule.pattern + "\": " + e.what());
        }
    }
    compiled_ = std::move(compiled);
}

ClassificationRules ClassificationRules::defaults() {
    // Norm patterns first: "post_attention_layernorm" must not fall into the
    // attention bucket.
    return ClassificationRules({
        {R"(layernorm|rmsnorm|ln_f|ln_\d|(?:^|\.)norm(?:\.|$)|norm\.weight$)", LayerClass::Norm},
        {R"(q_proj|k_proj|v_proj|o_proj|self_attn|attention\.w[qkvo])", LayerClass::Attention},
        {R"(gate_proj|up_proj|down_proj|(?:^|\.)mlp\.|feed_forward\.w)", LayerClass::FeedForward},
        {R"(embed_tokens|tok_embeddings|wte|word_embeddings)", LayerClass::Embedding},
        {R"(lm_head|(?:^|\.)output\.weight$|unembed)", LayerClass::Output},
    });
}

ClassificationRules ClassificationRules::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorClass::IoFailure, "cannot open rules file '" + path.string() + "'");
    ordered_json doc = ordered_json::parse(in, nullptr, false);
    if (doc.is_discarded() || !doc.is_array()) {
        fail(ErrorClass::InvalidSpec, "rules file '" + path.string() + "' is not a JSON array");
    }
    std::vector<Rule> rules;
    for (const auto& entry : doc) {
        if (!entry.is_object() || !entry.contains("pattern") || !entry["pattern"].is_string() ||
            !entry.contains("class") || !entry["class"].is_string()) {
            fail(ErrorClass::InvalidSpec, "each rule needs a pattern string and a class string");
        }
        rules.push_back({entry["pattern"].get<std::string>(),
                         parse_layer_class(entry["class"].get<std::string>())});
    }
    return ClassificationRules(std::move(rules));
}

std::pair<LayerClass, std::optional<int>> ClassificationRules::classify(const std::string& name) const {
    for (size_t i = 0; i < rules_.size(); ++i) {
        if (std::regex_search(name, compiled_->patterns[i])) {
            return {rules_[i].cls, parse_layer_index(name)};
        }
    }
    return {LayerClass::Other, parse_layer_index(name)};
}

// ---------------------------------------------------------------------------

Histogram histogram(std::span<const double> values, size_t bin_count,
                    std::optional<std::pair<double, double>> range) {
    if (bin_count < 1) fail(ErrorClass::InvalidSpec, "bin count must be at least 1");
    if (values.empty()) fail(ErrorClass::EmptyInput, "no values to histogram");

    double lo, hi;
    if (range) {
        lo = range->first;
        hi = range->second;
        if (!(lo < hi)) fail(ErrorClass::InvalidSpec, "histogram range is empty");
    } else {
        lo = *std::min_element(values.begin(), values.end());
        hi = *std::max_element(values.begin(), values.end());
        if (lo == hi) {
            hi = lo + std::numeric_limits<double>::epsilon() * std::max(1.0, std::fabs(lo));
        }
    }

    Histogram h;
    h.edges.resize(bin_count + 1);
    for (size_t i = 0; i <= bin_count; ++i) {
        h.edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bin_count);
    }
    h.edges.back() = hi;
    h.counts.assign(bin_count, 0);

    for (double v : values) {
        if (v < lo || v > hi) continue; // only reachable with an explicit range
        double rel = (v - lo) / (hi - lo);
        size_t idx = std::min(bin_count - 1, static_cast<size_t>(rel * static_cast<double>(bin_count)));
        ++h.counts[idx];
    }
    return h;
}

const ClassSummary& AnalysisReport::summary(LayerClass c) const {
    auto it = class_summary.find(c);
    if (it == class_summary.end()) {
        fail(ErrorClass::UnknownTensor, "no records for class " + std::string(layer_class_name(c)));
    }
    return it->second;
}

namespace {

// dot(a,b), ‖a‖², ‖b‖² (or just ‖a‖² in single-input mode) with the fixed
// 4096-element leaf pairwise reduction, parallel over I/O chunks.
struct ReducedMoments {
    float dot = 0.0f;
    float norm2_a = 0.0f;
    float norm2_b = 0.0f;
};

ReducedMoments reduce_tensor(const Checkpoint& a, const TensorMeta& meta_a, const Checkpoint* b,
                             const TensorMeta* meta_b, int threads) {
    uint64_t elems = meta_a.num_elements();
    size_t n_leaves = static_cast<size_t>((elems + kReductionLeaf - 1) / kReductionLeaf);
    if (n_leaves == 0) return {};

    std::vector<float> dot_parts(b ? n_leaves : 0, 0.0f);
    std::vector<float> a2_parts(n_leaves, 0.0f);
    std::vector<float> b2_parts(b ? n_leaves : 0, 0.0f);

    constexpr uint64_t chunk_elems = kReductionLeaf * kLeavesPerChunk;
    uint64_t n_chunks = (elems + chunk_elems - 1) / chunk_elems;

    parallel_for(n_chunks, threads, [&](size_t cb, size_t ce, int) {
        mem::Buffer<float> buf_a, buf_b;
        for (size_t c = cb; c < ce; ++c) {
            uint64_t lo = c * chunk_elems;
            uint64_t hi = std::min(elems, lo + chunk_elems);
            size_t n = static_cast<size_t>(hi - lo);
            if (buf_a.size() < n) buf_a.resize(n);
            a.read_elements(meta_a, lo, hi, buf_a.data());
            if (b) {
                if (buf_b.size() < n) buf_b.resize(n);
                b->read_elements(*meta_b, lo, hi, buf_b.data());
            }
            size_t leaf0 = static_cast<size_t>(lo / kReductionLeaf);
            for (size_t off = 0; off < n; off += kReductionLeaf) {
                size_t len = std::min(kReductionLeaf, n - off);
                size_t slot = leaf0 + off / kReductionLeaf;
                const float* pa = buf_a.data() + off;
                if (b) {
                    LeafMoments m = pairwise_moments(pa, buf_b.data() + off, len);
                    a2_parts[slot] = m.a2;
                    b2_parts[slot] = m.b2;
                    dot_parts[slot] = m.dot;
                } else {
                    a2_parts[slot] = pairwise_square_sum(pa, len);
                }
            }
        }
    });

    ReducedMoments m;
    m.norm2_a = tree_sum(a2_parts);
    if (b) {
        m.norm2_b = tree_sum(b2_parts);
        m.dot = tree_sum(dot_parts);
    }
    return m;
}

void finalize_report(AnalysisReport& report, size_t hist_bins) {
    std::map<LayerClass, std::vector<double>> defined_by_class;
    for (const auto& rec : report.records) {
        ClassSummary& s = report.class_summary[rec.cls];
        ++s.count;
        if (rec.value) {
            ++s.defined;
            defined_by_class[rec.cls].push_back(*rec.value);
        }
    }
    for (auto& [cls, values] : defined_by_class) {
        ClassSummary& s = report.class_summary[cls];
        std::vector<double> sorted = values;
        std::sort(sorted.begin(), sorted.end());
        double sum = 0.0;
        for (double v : sorted) sum += v;
        s.mean = sum / static_cast<double>(sorted.size());
        s.min = sorted.front();
        s.max = sorted.back();
        size_t n = sorted.size();
        s.median = (n % 2) ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
        report.histograms.emplace(cls, histogram(values, hist_bins));
    }
}

ordered_json histogram_to_json(const Histogram& h) {
    ordered_json j = ordered_json::object();
    j["edges"] = h.edges;
    j["counts"] = h.counts;
    return j;
}

} // namespace

std::string to_json_string(const AnalysisReport& report) {
    ordered_json doc = ordered_json::object();
    doc["schema"] = "paramdelta.report/1";
    doc["kind"] = report.kind == ReportKind::CosineMap ? "CosineMap" : "NormMap";
    doc["inputs"] = report.inputs;

    ordered_json records = ordered_json::array();
    for (const auto& rec : report.records) {
        ordered_json r = ordered_json::object();
        r["tensor"] = rec.tensor;
        r["class"] = std::string(layer_class_name(rec.cls));
        if (rec.layer) {
            r["layer"] = *rec.layer;
        } else {
            r["layer"] = nullptr;
        }
        if (report.kind == ReportKind::CosineMap) {
            if (rec.value) {
                r["cosine"] = *rec.value;
            } else {
                r["cosine"] = nullptr; // Undefined: a zero-norm side
            }
            r["norm_a"] = rec.norm_a;
            r["norm_b"] = rec.norm_b;
        } else {
            r["norm"] = rec.value ? *rec.value : 0.0;
        }
        records.push_back(std::move(r));
    }
    doc["records"] = std::move(records);

    ordered_json summary = ordered_json::object();
    for (LayerClass cls : kClassOrder) {
        auto it = report.class_summary.find(cls);
        if (it == report.class_summary.end()) continue;
        const ClassSummary& s = it->second;
        ordered_json j = ordered_json::object();
        j["count"] = s.count;
        j["defined"] = s.defined;
        if (s.defined > 0) {
            j["mean"] = s.mean;
            j["median"] = s.median;
            j["min"] = s.min;
            j["max"] = s.max;
        } else {
            j["mean"] = nullptr;
            j["median"] = nullptr;
            j["min"] = nullptr;
            j["max"] = nullptr;
        }
        summary[std::string(layer_class_name(cls))] = std::move(j);
    }
    doc["class_summary"] = std::move(summary);

    ordered_json hists = ordered_json::object();
    for (LayerClass cls : kClassOrder) {
        auto it = report.histograms.find(cls);
        if (it == report.histograms.end()) continue;
        hists[std::string(layer_class_name(cls))] = histogram_to_json(it->second);
    }
    doc["histograms"] = std::move(hists);
    return doc.dump(2) + "\n";
}

AnalysisReport cosine_map(const Checkpoint& delta_a, const Checkpoint& delta_b,
                          const ClassificationRules& rules, size_t hist_bins, int threads) {
    std::vector<std::string> shared;
    std::set_intersection(delta_a.names().begin(), delta_a.names().end(), delta_b.names().begin(),
                          delta_b.names().end(), std::back_inserter(shared));
    if (shared.empty()) {
        fail(ErrorClass::NoSharedTensors, "'" + delta_a.path().string() + "' and '" +
                                              delta_b.path().string() + "' share no tensor names");
    }
    for (const auto& name : shared) {
        if (delta_a.meta(name).shape != delta_b.meta(name).shape) {
            fail(ErrorClass::ShapeConflict, "tensor '" + name + "' has different shapes in the two deltas");
        }
    }

    AnalysisReport report;
    report.kind = ReportKind::CosineMap;
    report.inputs = {delta_a.path().string(), delta_b.path().string()};

    for (const auto& name : shared) {
        ReducedMoments m =
            reduce_tensor(delta_a, delta_a.meta(name), &delta_b, &delta_b.meta(name), threads);
        AnalysisRecord rec;
        rec.tensor = name;
        std::tie(rec.cls, rec.layer) = rules.classify(name);
        float norm_a = std::sqrt(m.norm2_a);
        float norm_b = std::sqrt(m.norm2_b);
        rec.norm_a = norm_a;
        rec.norm_b = norm_b;
        if (norm_a == 0.0f || norm_b == 0.0f) {
            rec.value = std::nullopt; // orthogonality is meaningless for a zero vector
        } else {
            float cosine = m.dot / (norm_a * norm_b);
            cosine = std::clamp(cosine, -1.0f, 1.0f);
            rec.value = static_cast<double>(cosine);
        }
        report.records.push_back(std::move(rec));
    }
    finalize_report(report, hist_bins);
    return report;
}

AnalysisReport norm_map(const Checkpoint& delta, const ClassificationRules& rules,
                        size_t hist_bins, int threads) {
    AnalysisReport report;
    report.kind = ReportKind::NormMap;
    report.inputs = {delta.path().string()};

    for (const auto& name : delta.names()) {
        ReducedMoments m = reduce_tensor(delta, delta.meta(name), nullptr, nullptr, threads);
        AnalysisRecord rec;
        rec.tensor = name;
        std::tie(rec.cls, rec.layer) = rules.classify(name);
        rec.value = static_cast<double>(std::sqrt(m.norm2_a));
        report.records.push_back(std::move(rec));
    }
    finalize_report(report, hist_bins);
    return report;
}

} // namespace paramdelta
