#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "paramdelta/checkpoint.hpp"

namespace paramdelta {

enum class LayerClass { Attention, FeedForward, Embedding, Norm, Output, Other };

std::string_view layer_class_name(LayerClass c);
LayerClass parse_layer_class(std::string_view s); // InvalidSpec on unknown

/// Ordered name-matching rules; the first matching pattern wins and every
/// name maps to exactly one class (fallback Other). Patterns are ECMAScript
/// regexes matched anywhere in the name.
class ClassificationRules {
public:
    struct Rule {
        std::string pattern;
        LayerClass cls;
    };

    /// Llama/Qwen-style decoder naming.
    static ClassificationRules defaults();

    /// JSON rules file: [{"pattern": "...", "class": "Attention"}, ...]
    static ClassificationRules from_file(const std::filesystem::path& path);

    explicit ClassificationRules(std::vector<Rule> rules);

    /// (class, layer index parsed from the name when present)
    std::pair<LayerClass, std::optional<int>> classify(const std::string& name) const;

    const std::vector<Rule>& rules() const { return rules_; }

private:
    struct Compiled;
    std::vector<Rule> rules_;
    std::shared_ptr<const Compiled> compiled_;
};

struct AnalysisRecord {
    std::string tensor;
    LayerClass cls = LayerClass::Other;
    std::optional<int> layer;
    /// Cosine or norm. Empty means Undefined (cosine of a zero-norm tensor);
    /// undefined records are reported but excluded from stats and histograms.
    std::optional<double> value;
    double norm_a = 0.0; // cosine reports only
    double norm_b = 0.0;
};

struct ClassSummary {
    size_t count = 0;   // all records of the class
    size_t defined = 0; // records with a value
    double mean = 0.0, median = 0.0, min = 0.0, max = 0.0; // over defined values
};

struct Histogram {
    std::vector<double> edges;  // bin_count + 1, equal width
    std::vector<size_t> counts; // right edge of the last bin is inclusive
};

/// Equal-width histogram. Default range is [min, max] of the values, with a
/// degenerate range widened by machine epsilon; with an explicit range,
/// values outside it are dropped. Throws EmptyInput / InvalidSpec.
Histogram histogram(std::span<const double> values, size_t bin_count,
                    std::optional<std::pair<double, double>> range = std::nullopt);

enum class ReportKind { CosineMap, NormMap };

struct AnalysisReport {
    ReportKind kind = ReportKind::NormMap;
    std::vector<std::string> inputs;          // provenance of analyzed checkpoints
    std::vector<AnalysisRecord> records;      // ordered by tensor name
    std::map<LayerClass, ClassSummary> class_summary;
    std::map<LayerClass, Histogram> histograms; // classes with ≥1 defined value

    const ClassSummary& summary(LayerClass c) const;
};

/// Serialized paramdelta.report/1 document (fixed field order, shortest
/// round-trip numerals) for golden-file testing and plotviz.
std::string to_json_string(const AnalysisReport& report);

/// Per-tensor cosine similarity between two deltas over shared names
/// (Intersect semantics). cosine = dot(a,b)/(‖a‖·‖b‖) over flattened
/// elements in working precision with deterministic pairwise reduction;
/// Undefined when either norm is zero.
AnalysisReport cosine_map(const Checkpoint& delta_a, const Checkpoint& delta_b,
                          const ClassificationRules& rules, size_t hist_bins = 50,
                          int threads = 1);

/// Per-tensor Euclidean norms of a delta.
AnalysisReport norm_map(const Checkpoint& delta, const ClassificationRules& rules,
                        size_t hist_bins = 50, int threads = 1);

} // namespace paramdelta
