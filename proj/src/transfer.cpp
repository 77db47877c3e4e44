#include "paramdelta/transfer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

#include "paramdelta/errors.hpp"

namespace paramdelta {

using ordered_json = nlohmann::ordered_json;

namespace {

std::string trim(std::string_view s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    size_t start = 0;
    while (true) {
        size_t comma = line.find(',', start);
        if (comma == std::string::npos) {
            out.push_back(trim(std::string_view(line).substr(start)));
            break;
        }
        out.push_back(trim(std::string_view(line).substr(start, comma - start)));
        start = comma + 1;
    }
    return out;
}

std::string format_shortest(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, end);
}

} // namespace

std::string_view fit_mode_name(FitMode m) {
    return m == FitMode::ThroughOrigin ? "ThroughOrigin" : "WithIntercept";
}

ScoreTable ScoreTable::from_rows(std::vector<ScoreRow> rows) {
    std::set<std::tuple<std::string, std::string, std::string>> seen;
    for (const auto& row : rows) {
        if (!std::isfinite(row.value)) {
            fail(ErrorClass::InvalidSpec, "score for (" + row.model_id + ", " + row.benchmark + ", " +
                                              row.metric + ") is not finite");
        }
        if (!seen.insert({row.model_id, row.benchmark, row.metric}).second) {
            fail(ErrorClass::InvalidSpec, "duplicate score row (" + row.model_id + ", " +
                                              row.benchmark + ", " + row.metric + ")");
        }
    }
    ScoreTable table;
    table.rows_ = std::move(rows);
    return table;
}

ScoreTable ScoreTable::from_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorClass::IoFailure, "cannot open score table '" + path.string() + "'");

    std::string line;
    if (!std::getline(in, line)) fail(ErrorClass::InvalidSpec, "score table is empty");
    auto header = split_fields(line);
    if (header != std::vector<std::string>{"model_id", "benchmark", "metric", "value"}) {
        fail(ErrorClass::InvalidSpec,
             "score table must start with header 'model_id,benchmark,metric,value'");
    }

    std::vector<ScoreRow> rows;
    size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        auto fields = split_fields(line);
        if (fields.size() != 4) {
            fail(ErrorClass::InvalidSpec,
                 "line " + std::to_string(line_no) + " has " + std::to_string(fields.size()) +
                     " fields, expected 4");
        }
        ScoreRow row;
        row.model_id = fields[0];
        row.benchmark = fields[1];
        row.metric = fields[2];
        const std::string& v = fields[3];
        auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), row.value);
        if (ec != std::errc() || ptr != v.data() + v.size()) {
            fail(ErrorClass::InvalidSpec, "line " + std::to_string(line_no) + ": bad value '" + v + "'");
        }
        rows.push_back(std::move(row));
    }
    return from_rows(std::move(rows));
}

std::optional<double> ScoreTable::lookup(const std::string& model_id, const std::string& benchmark,
                                         const std::string& metric) const {
    for (const auto& row : rows_) {
        if (row.model_id == model_id && row.benchmark == benchmark && row.metric == metric) {
            return row.value;
        }
    }
    return std::nullopt;
}

std::vector<std::pair<std::string, std::string>>
ScoreTable::benchmark_metrics(std::span<const std::string> model_ids) const {
    std::set<std::pair<std::string, std::string>> pairs;
    for (const auto& row : rows_) {
        if (std::find(model_ids.begin(), model_ids.end(), row.model_id) != model_ids.end()) {
            pairs.insert({row.benchmark, row.metric});
        }
    }
    return {pairs.begin(), pairs.end()};
}

HypotheticalResult hypothetical_scores(const ScoreTable& table, const std::string& base_i,
                                       const std::string& post_j, const std::string& base_j) {
    const std::string roles[3] = {base_i, post_j, base_j};
    const char* role_names[3] = {"base_i", "post_j", "base_j"};

    HypotheticalResult result;
    for (const auto& [benchmark, metric] : table.benchmark_metrics({roles, 3})) {
        std::optional<double> scores[3];
        std::vector<std::string> missing;
        for (int r = 0; r < 3; ++r) {
            scores[r] = table.lookup(roles[r], benchmark, metric);
            if (!scores[r]) missing.push_back(role_names[r]);
        }
        if (missing.empty()) {
            // f(base_i) + f(post_j) − f(base_j)
            result.scores.push_back({benchmark, metric, *scores[0] + *scores[1] - *scores[2]});
        } else {
            result.skipped.push_back({benchmark, metric, std::move(missing)});
        }
    }
    if (result.scores.empty()) {
        fail(ErrorClass::NoCompleteTriples,
             "no (benchmark, metric) has scores for all of base_i, post_j, base_j");
    }
    return result;
}

RegressionResult fit_gamma(std::span<const std::pair<double, double>> pairs, FitMode mode) {
    if (pairs.size() < 2) {
        fail(ErrorClass::DegenerateInput,
             "need at least 2 points, got " + std::to_string(pairs.size()));
    }
    for (const auto& [x, y] : pairs) {
        if (!std::isfinite(x) || !std::isfinite(y)) {
            fail(ErrorClass::DegenerateInput, "non-finite point in regression input");
        }
    }

    const double n = static_cast<double>(pairs.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (const auto& [x, y] : pairs) {
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }

    RegressionResult result;
    result.fit_mode = mode;
    result.n_points = pairs.size();

    if (mode == FitMode::ThroughOrigin) {
        if (sxx == 0.0) {
            fail(ErrorClass::DegenerateInput, "all hypothetical values are zero; slope is unconstrained");
        }
        result.gamma = sxy / sxx;
        result.intercept = 0.0;
    } else {
        double denom = n * sxx - sx * sx;
        if (denom == 0.0) {
            fail(ErrorClass::DegenerateInput, "all hypothetical values are identical; slope is unconstrained");
        }
        result.gamma = (n * sxy - sx * sy) / denom;
        result.intercept = (sy - result.gamma * sx) / n;
    }

    double ybar = sy / n;
    double ss_res = 0, ss_tot = 0;
    result.residuals.reserve(pairs.size());
    for (const auto& [x, y] : pairs) {
        double r = y - (result.gamma * x + result.intercept);
        result.residuals.push_back(r);
        ss_res += r * r;
        ss_tot += (y - ybar) * (y - ybar);
    }
    // R² about the mean in both modes so they stay comparable
    if (ss_tot == 0.0) {
        result.r_squared = ss_res == 0.0 ? 1.0 : 0.0;
    } else {
        result.r_squared = 1.0 - ss_res / ss_tot;
    }
    return result;
}

SweepManifest plan_sweep(const std::string& anchor, const std::string& delta,
                         std::vector<double> alphas, const std::string& output_template) {
    if (alphas.empty()) fail(ErrorClass::InvalidSpec, "alpha list is empty");
    for (double a : alphas) {
        if (!std::isfinite(a)) fail(ErrorClass::NonFiniteAlpha, "alpha values must be finite");
    }
    std::sort(alphas.begin(), alphas.end());
    for (size_t i = 1; i < alphas.size(); ++i) {
        if (alphas[i] == alphas[i - 1]) {
            fail(ErrorClass::DuplicateAlpha, "alpha " + format_shortest(alphas[i]) + " appears twice");
        }
    }
    if (output_template.find("{alpha}") == std::string::npos) {
        fail(ErrorClass::InvalidSpec, "output template must contain {alpha}");
    }

    SweepManifest manifest;
    manifest.anchor = anchor;
    manifest.delta = delta;
    manifest.alphas = std::move(alphas);
    manifest.output_template = output_template;
    for (double a : manifest.alphas) {
        std::string path = output_template;
        std::string rendered = format_shortest(a);
        size_t pos = 0;
        while ((pos = path.find("{alpha}", pos)) != std::string::npos) {
            path.replace(pos, 7, rendered);
            pos += rendered.size();
        }
        manifest.outputs.push_back(std::move(path));
    }
    return manifest;
}

std::string SweepManifest::to_json_string() const {
    ordered_json doc = ordered_json::object();
    doc["schema"] = "paramdelta.sweep/1";
    doc["anchor"] = anchor;
    doc["delta"] = delta;
    doc["alphas"] = alphas;
    doc["template"] = output_template;
    doc["outputs"] = outputs;
    return doc.dump(2) + "\n";
}

namespace {

ordered_json skipped_to_json(const std::vector<SkippedPair>& skipped) {
    ordered_json arr = ordered_json::array();
    for (const auto& s : skipped) {
        ordered_json j = ordered_json::object();
        j["benchmark"] = s.benchmark;
        j["metric"] = s.metric;
        j["missing"] = s.missing;
        arr.push_back(std::move(j));
    }
    return arr;
}

} // namespace

std::string GammaReport::to_json_string() const {
    ordered_json doc = ordered_json::object();
    doc["schema"] = "paramdelta.gamma/1";
    doc["fit_mode"] = std::string(fit_mode_name(fit.fit_mode));
    doc["gamma"] = fit.gamma;
    doc["intercept"] = fit.intercept;
    doc["r_squared"] = fit.r_squared;
    doc["n_points"] = fit.n_points;

    ordered_json pts = ordered_json::array();
    for (const auto& p : points) {
        ordered_json j = ordered_json::object();
        j["benchmark"] = p.benchmark;
        j["metric"] = p.metric;
        j["hypothetical"] = p.hypothetical;
        j["real"] = p.real;
        j["residual"] = p.residual;
        pts.push_back(std::move(j));
    }
    doc["points"] = std::move(pts);
    doc["skipped"] = skipped_to_json(skipped);
    return doc.dump(2) + "\n";
}

GammaReport gamma_report(const ScoreTable& table, const std::string& base_i,
                         const std::string& post_j, const std::string& base_j,
                         const std::string& real_model, FitMode mode) {
    HypotheticalResult hypo = hypothetical_scores(table, base_i, post_j, base_j);

    GammaReport report;
    report.skipped = hypo.skipped;

    std::vector<std::pair<double, double>> pairs;
    for (const auto& h : hypo.scores) {
        auto real = table.lookup(real_model, h.benchmark, h.metric);
        if (!real) {
            report.skipped.push_back({h.benchmark, h.metric, {"real"}});
            continue;
        }
        pairs.emplace_back(h.value, *real);
        report.points.push_back({h.benchmark, h.metric, h.value, *real, 0.0});
    }
    if (pairs.empty()) {
        fail(ErrorClass::NoCompleteTriples,
             "no (benchmark, metric) joins the hypothetical scores with '" + real_model + "'");
    }

    report.fit = fit_gamma(pairs, mode);
    for (size_t i = 0; i < report.points.size(); ++i) {
        report.points[i].residual = report.fit.residuals[i];
    }
    return report;
}

} // namespace paramdelta
