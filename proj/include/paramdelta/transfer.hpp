#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace paramdelta {

struct ScoreRow {
    std::string model_id;
    std::string benchmark;
    std::string metric;
    double value = 0.0;
};

/// Benchmark score table, one row per (model_id, benchmark, metric). Ingested
/// from delimited text with header `model_id,benchmark,metric,value`.
class ScoreTable {
public:
    static ScoreTable from_csv(const std::filesystem::path& path);
    static ScoreTable from_rows(std::vector<ScoreRow> rows);

    std::optional<double> lookup(const std::string& model_id, const std::string& benchmark,
                                 const std::string& metric) const;

    /// Distinct (benchmark, metric) pairs across the given models, sorted.
    std::vector<std::pair<std::string, std::string>>
    benchmark_metrics(std::span<const std::string> model_ids) const;

    const std::vector<ScoreRow>& rows() const { return rows_; }

private:
    std::vector<ScoreRow> rows_;
};

struct HypotheticalScore {
    std::string benchmark;
    std::string metric;
    double value = 0.0;
};

struct SkippedPair {
    std::string benchmark;
    std::string metric;
    std::vector<std::string> missing; // role names: base_i / post_j / base_j / real
};

struct HypotheticalResult {
    std::vector<HypotheticalScore> scores;
    std::vector<SkippedPair> skipped;
};

/// Interpolated performance f(base_i) + f(post_j) − f(base_j) per
/// (benchmark, metric); pairs missing any input are skipped and listed.
/// Throws NoCompleteTriples when nothing is computable.
HypotheticalResult hypothetical_scores(const ScoreTable& table, const std::string& base_i,
                                       const std::string& post_j, const std::string& base_j);

enum class FitMode { ThroughOrigin, WithIntercept };

std::string_view fit_mode_name(FitMode m);

struct RegressionResult {
    double gamma = 0.0;     // transfer-efficiency coefficient
    double intercept = 0.0; // 0 when fit through the origin
    double r_squared = 0.0; // about the mean of the real values in both modes
    size_t n_points = 0;
    std::vector<double> residuals; // input order
    FitMode fit_mode = FitMode::ThroughOrigin;
};

/// Least-squares fit of real = γ·hypothetical (+ intercept).
/// ThroughOrigin: γ = Σxy / Σx². Throws DegenerateInput.
RegressionResult fit_gamma(std::span<const std::pair<double, double>> pairs, FitMode mode);

struct SweepManifest {
    std::string anchor;
    std::string delta;
    std::vector<double> alphas; // strictly increasing
    std::string output_template;
    std::vector<std::string> outputs;

    std::string to_json_string() const; // paramdelta.sweep/1
};

/// Plans an α-sweep: sorts the alphas, rejects duplicates and non-finite
/// values, and derives one output path per α from the template (every
/// "{alpha}" is replaced by the shortest round-trip rendering of α).
/// Executing the manifest is repeated apply_delta, one output per α.
SweepManifest plan_sweep(const std::string& anchor, const std::string& delta,
                         std::vector<double> alphas, const std::string& output_template);

struct GammaPoint {
    std::string benchmark;
    std::string metric;
    double hypothetical = 0.0;
    double real = 0.0;
    double residual = 0.0;
};

struct GammaReport {
    RegressionResult fit;
    std::vector<GammaPoint> points;
    std::vector<SkippedPair> skipped;

    std::string to_json_string() const; // paramdelta.gamma/1
};

/// Full pipeline behind `paramdelta gamma`: hypothetical scores joined with
/// the real model's scores, then fit. Pairs missing the real score are
/// appended to the skipped list.
GammaReport gamma_report(const ScoreTable& table, const std::string& base_i,
                         const std::string& post_j, const std::string& base_j,
                         const std::string& real_model, FitMode mode);

} // namespace paramdelta
