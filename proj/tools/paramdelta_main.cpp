// paramdelta — checkpoint arithmetic for post-training deltas.
//
// Subcommands: gen, diff, apply, fuse, validate, inspect, cosine, norms,
// gamma, sweep. Exit codes: 0 success, 1 operation failure (single
// machine-parseable "error: <Class>: ..." line on stderr), 2 usage errors.

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"

#include "paramdelta/analysis.hpp"
#include "paramdelta/combine.hpp"
#include "paramdelta/generator.hpp"
#include "paramdelta/membudget.hpp"
#include "paramdelta/parallel.hpp"
#include "paramdelta/transfer.hpp"

namespace pd = paramdelta;

namespace {

std::string format_shortest(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, end);
}

std::string shape_to_string(const std::vector<uint64_t>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) pd::fail(pd::ErrorClass::IoFailure, "cannot write '" + path + "'");
    out << text;
}

pd::DType parse_cli_dtype(const std::string& s) {
    if (s == "f32") return pd::DType::F32;
    if (s == "f16") return pd::DType::F16;
    if (s == "bf16") return pd::DType::BF16;
    throw CLI::ValidationError("--dtype", "expected one of f32|f16|bf16");
}

pd::MissingPolicy parse_policy(const std::string& s) {
    if (s == "strict") return pd::MissingPolicy::Strict;
    if (s == "intersect") return pd::MissingPolicy::Intersect;
    if (s == "anchor") return pd::MissingPolicy::AnchorPassthrough;
    throw CLI::ValidationError("--policy", "expected one of strict|intersect|anchor");
}

pd::FitMode parse_mode(const std::string& s) {
    if (s == "origin") return pd::FitMode::ThroughOrigin;
    if (s == "intercept") return pd::FitMode::WithIntercept;
    throw CLI::ValidationError("--mode", "expected origin or intercept");
}

std::pair<std::string, double> parse_name_value(const std::string& arg_name, const std::string& s) {
    size_t eq = s.rfind('=');
    if (eq == std::string::npos || eq == 0) {
        throw CLI::ValidationError(arg_name, "expected NAME=VALUE, got '" + s + "'");
    }
    std::string name = s.substr(0, eq);
    std::string value = s.substr(eq + 1);
    double v = 0;
    auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc() || ptr != value.data() + value.size()) {
        throw CLI::ValidationError(arg_name, "bad value in '" + s + "'");
    }
    return {name, v};
}

pd::ClassificationRules load_rules(const std::string& rules_file) {
    return rules_file.empty() ? pd::ClassificationRules::defaults()
                              : pd::ClassificationRules::from_file(rules_file);
}

void warn_skipped(const std::vector<std::string>& skipped) {
    for (const auto& name : skipped) {
        std::cerr << "warning: skipped tensor '" << name << "' (not present everywhere)\n";
    }
}

std::map<std::string, std::string> scenario_metadata(int scenario) {
    std::map<std::string, std::string> meta;
    if (scenario != 0) meta[std::string(pd::kScenarioKey)] = std::to_string(scenario);
    return meta;
}

void print_compat_report(const pd::CompatReport& report) {
    std::cout << "homologous: " << (report.homologous ? "yes" : "no") << "\n";
    std::cout << "shared tensors: " << report.shared.size() << "\n";
    for (const auto& n : report.only_in_a) std::cout << "only in a: " << n << "\n";
    for (const auto& n : report.only_in_b) std::cout << "only in b: " << n << "\n";
    for (const auto& m : report.shape_mismatches) {
        std::cout << "shape mismatch: " << m.name << " " << shape_to_string(m.shape_a) << " vs "
                  << shape_to_string(m.shape_b) << "\n";
    }
    for (const auto& m : report.dtype_mismatches) {
        std::cout << "dtype mismatch: " << m.name << " " << pd::dtype_name(m.dtype_a) << " vs "
                  << pd::dtype_name(m.dtype_b) << "\n";
    }
}

std::string compat_report_json(const pd::CompatReport& report) {
    nlohmann::ordered_json doc = nlohmann::ordered_json::object();
    doc["schema"] = "paramdelta.compat/1";
    doc["homologous"] = report.homologous;
    doc["shared"] = report.shared;
    doc["only_in_a"] = report.only_in_a;
    doc["only_in_b"] = report.only_in_b;
    nlohmann::ordered_json shapes = nlohmann::ordered_json::array();
    for (const auto& m : report.shape_mismatches) {
        shapes.push_back({{"tensor", m.name}, {"shape_a", m.shape_a}, {"shape_b", m.shape_b}});
    }
    doc["shape_mismatches"] = std::move(shapes);
    nlohmann::ordered_json dtypes = nlohmann::ordered_json::array();
    for (const auto& m : report.dtype_mismatches) {
        dtypes.push_back({{"tensor", m.name},
                          {"dtype_a", std::string(pd::dtype_name(m.dtype_a))},
                          {"dtype_b", std::string(pd::dtype_name(m.dtype_b))}});
    }
    doc["dtype_mismatches"] = std::move(dtypes);
    return doc.dump(2) + "\n";
}

std::string inspect_json(const pd::Checkpoint& ck) {
    nlohmann::ordered_json doc = nlohmann::ordered_json::object();
    doc["path"] = ck.path().string();
    doc["kind"] = std::string(pd::kind_name(ck.kind()));
    nlohmann::ordered_json meta = nlohmann::ordered_json::object();
    for (const auto& [k, v] : ck.metadata()) meta[k] = v;
    doc["metadata"] = std::move(meta);
    nlohmann::ordered_json tensors = nlohmann::ordered_json::object();
    for (const auto& name : ck.names()) {
        const pd::TensorMeta& m = ck.meta(name);
        nlohmann::ordered_json t = nlohmann::ordered_json::object();
        t["dtype"] = std::string(pd::dtype_name(m.dtype));
        t["shape"] = m.shape;
        t["data_offsets"] = {m.begin, m.end};
        tensors[name] = std::move(t);
    }
    doc["tensors"] = std::move(tensors);
    return doc.dump(2) + "\n";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"ParamDelta checkpoint arithmetic toolkit"};
    app.require_subcommand(1);

    int threads = pd::default_threads();
    std::string mem_stats_path;
    app.add_option("--threads", threads, "cap on worker threads (default: PARAMDELTA_THREADS or 1)")
        ->envname("PARAMDELTA_THREADS");
    app.add_option("--mem-stats", mem_stats_path,
                   "write peak working-buffer bytes to FILE on exit (test hook)");

    // --- gen -------------------------------------------------------------
    auto* gen = app.add_subcommand("gen", "generate a deterministic miniature checkpoint");
    pd::GenSpec gen_spec;
    std::string gen_out, gen_dtype = "f32";
    bool gen_no_norms = false;
    std::vector<std::string> plant_scales, plant_offsets;
    gen->add_option("-o,--out", gen_out, "output checkpoint path")->required();
    gen->add_option("--seed", gen_spec.seed, "stream seed");
    gen->add_option("--layers", gen_spec.layers, "decoder layer count");
    gen->add_option("--hidden", gen_spec.hidden_dim, "hidden dimension");
    gen->add_option("--ffn", gen_spec.ffn_dim, "feed-forward dimension");
    gen->add_option("--vocab", gen_spec.vocab_dim, "vocabulary rows");
    gen->add_option("--dtype", gen_dtype, "storage dtype: f32|f16|bf16");
    gen->add_flag("--no-norms", gen_no_norms, "omit normalization weight vectors");
    gen->add_option("--plant-scale", plant_scales,
                    "CLASS=FACTOR: plant a random delta scaled per layer class (repeatable)");
    gen->add_option("--plant-offset", plant_offsets,
                    "NAME=VALUE: plant a constant offset into one tensor (repeatable)");

    // --- diff ------------------------------------------------------------
    auto* diff = app.add_subcommand("diff", "extract a parameter delta: post − base");
    std::string diff_post, diff_base, diff_out;
    int diff_scenario = 0;
    diff->add_option("post", diff_post, "post-trained checkpoint")->required();
    diff->add_option("base", diff_base, "base checkpoint")->required();
    diff->add_option("-o,--out", diff_out, "output delta path")->required();
    diff->add_option("--scenario", diff_scenario, "provenance tag 1-4")->check(CLI::Range(1, 4));

    // --- apply -----------------------------------------------------------
    auto* apply = app.add_subcommand("apply", "apply a delta to an anchor: anchor + alpha*delta");
    std::string apply_anchor, apply_delta, apply_out, apply_policy = "strict";
    double apply_alpha = 1.0;
    int apply_scenario = 0;
    apply->add_option("anchor", apply_anchor, "anchor checkpoint")->required();
    apply->add_option("delta", apply_delta, "delta checkpoint")->required();
    apply->add_option("-o,--out", apply_out, "output checkpoint path")->required();
    apply->add_option("--alpha", apply_alpha, "delta scale (default 1)");
    apply->add_option("--policy", apply_policy, "missing-tensor policy: strict|intersect|anchor");
    apply->add_option("--scenario", apply_scenario, "provenance tag 1-4")->check(CLI::Range(1, 4));

    // --- fuse ------------------------------------------------------------
    auto* fuse_cmd = app.add_subcommand("fuse", "fuse multiple deltas into an anchor");
    std::string fuse_anchor, fuse_out, fuse_policy = "strict";
    std::vector<std::string> fuse_deltas, fuse_coeffs;
    int fuse_scenario = 0;
    fuse_cmd->add_option("anchor", fuse_anchor, "anchor checkpoint")->required();
    fuse_cmd->add_option("deltas", fuse_deltas, "delta checkpoints")->required();
    fuse_cmd->add_option("-o,--out", fuse_out, "output checkpoint path")->required();
    fuse_cmd->add_option("--coeff", fuse_coeffs, "NAME=VALUE coefficient per delta (default 1)");
    fuse_cmd->add_option("--policy", fuse_policy, "missing-tensor policy: strict|intersect|anchor");
    fuse_cmd->add_option("--scenario", fuse_scenario, "provenance tag 1-4")->check(CLI::Range(1, 4));

    // --- validate ----------------------------------------------------------
    auto* validate = app.add_subcommand("validate", "check two checkpoints for homology");
    std::string val_a, val_b, val_out;
    validate->add_option("a", val_a, "first checkpoint")->required();
    validate->add_option("b", val_b, "second checkpoint")->required();
    validate->add_option("-o,--out", val_out, "also write the report as JSON");

    // --- inspect -----------------------------------------------------------
    auto* inspect = app.add_subcommand("inspect", "print manifest and metadata");
    std::string ins_path;
    bool ins_json = false;
    inspect->add_option("checkpoint", ins_path, "checkpoint to inspect")->required();
    inspect->add_flag("--json", ins_json, "emit JSON instead of text");

    // --- cosine ------------------------------------------------------------
    auto* cosine = app.add_subcommand("cosine", "per-tensor cosine similarity of two deltas");
    std::string cos_a, cos_b, cos_out, cos_rules;
    size_t cos_bins = 50;
    cosine->add_option("a", cos_a, "first delta")->required();
    cosine->add_option("b", cos_b, "second delta")->required();
    cosine->add_option("-o,--out", cos_out, "report path (paramdelta.report/1)")->required();
    cosine->add_option("--rules", cos_rules, "classification rules file");
    cosine->add_option("--bins", cos_bins, "histogram bin count (default 50)");

    // --- norms -------------------------------------------------------------
    auto* norms = app.add_subcommand("norms", "per-tensor norms of a delta");
    std::string norm_d, norm_out, norm_rules;
    size_t norm_bins = 50;
    norms->add_option("delta", norm_d, "delta checkpoint")->required();
    norms->add_option("-o,--out", norm_out, "report path (paramdelta.report/1)")->required();
    norms->add_option("--rules", norm_rules, "classification rules file");
    norms->add_option("--bins", norm_bins, "histogram bin count (default 50)");

    // --- gamma -------------------------------------------------------------
    auto* gamma = app.add_subcommand("gamma", "transfer-efficiency regression from a score table");
    std::string g_csv, g_base_i, g_post_j, g_base_j, g_real, g_mode = "origin", g_out;
    gamma->add_option("scores", g_csv, "CSV with header model_id,benchmark,metric,value")->required();
    gamma->add_option("--base-i", g_base_i, "anchor base model id")->required();
    gamma->add_option("--post-j", g_post_j, "post-trained model id")->required();
    gamma->add_option("--base-j", g_base_j, "original base model id")->required();
    gamma->add_option("--real", g_real, "measured ParamDelta model id")->required();
    gamma->add_option("--mode", g_mode, "fit mode: origin|intercept");
    gamma->add_option("-o,--out", g_out, "report path (paramdelta.gamma/1)");

    // --- sweep -------------------------------------------------------------
    auto* sweep = app.add_subcommand("sweep", "plan (and run) an alpha sweep of apply");
    std::string sw_anchor, sw_delta, sw_template, sw_manifest, sw_policy = "strict";
    std::vector<double> sw_alphas;
    bool sw_plan_only = false;
    sweep->add_option("anchor", sw_anchor, "anchor checkpoint")->required();
    sweep->add_option("delta", sw_delta, "delta checkpoint")->required();
    sweep->add_option("--alphas", sw_alphas, "alpha values")->required()->delimiter(',');
    sweep->add_option("--template", sw_template, "output path template containing {alpha}")->required();
    sweep->add_option("--manifest", sw_manifest, "manifest path (paramdelta.sweep/1)")->required();
    sweep->add_option("--policy", sw_policy, "missing-tensor policy: strict|intersect|anchor");
    sweep->add_flag("--plan-only", sw_plan_only, "write the manifest without producing checkpoints");

    // parent options (--threads, --mem-stats) remain usable after a subcommand
    for (auto* sub : app.get_subcommands([](CLI::App*) { return true; })) {
        sub->fallthrough();
    }

    int exit_code = 0;
    try {
        app.parse(argc, argv);

        if (*gen) {
            gen_spec.dtype = parse_cli_dtype(gen_dtype);
            gen_spec.include_norms = !gen_no_norms;
            if (!plant_scales.empty() || !plant_offsets.empty()) {
                pd::PlantSpec plant;
                for (const auto& s : plant_scales) {
                    auto [cls, factor] = parse_name_value("--plant-scale", s);
                    plant.delta_scales[pd::parse_layer_class(cls)] = factor;
                }
                for (const auto& s : plant_offsets) {
                    auto [name, off] = parse_name_value("--plant-offset", s);
                    plant.offsets[name] = off;
                }
                gen_spec.plant = std::move(plant);
            }
            pd::Checkpoint ck = pd::generate_checkpoint(gen_spec, gen_out);
            std::cout << "wrote " << gen_out << " (" << ck.names().size() << " tensors)\n";
        } else if (*diff) {
            pd::Checkpoint post = pd::Checkpoint::open(diff_post);
            pd::Checkpoint base = pd::Checkpoint::open(diff_base);
            pd::extract_delta(post, base, diff_out, threads, scenario_metadata(diff_scenario));
            std::cout << "wrote " << diff_out << "\n";
        } else if (*apply) {
            pd::Checkpoint anchor = pd::Checkpoint::open(apply_anchor);
            pd::Checkpoint delta = pd::Checkpoint::open(apply_delta);
            std::vector<std::string> skipped;
            pd::apply_delta(anchor, delta, apply_alpha, apply_out, parse_policy(apply_policy),
                            threads, scenario_metadata(apply_scenario), &skipped);
            warn_skipped(skipped);
            std::cout << "wrote " << apply_out << "\n";
        } else if (*fuse_cmd) {
            pd::Checkpoint anchor = pd::Checkpoint::open(fuse_anchor);
            std::map<std::string, double> coeffs;
            for (const auto& s : fuse_coeffs) {
                auto [name, value] = parse_name_value("--coeff", s);
                if (std::find(fuse_deltas.begin(), fuse_deltas.end(), name) == fuse_deltas.end()) {
                    throw CLI::ValidationError("--coeff", "'" + name + "' is not one of the deltas");
                }
                coeffs[name] = value;
            }
            std::vector<std::pair<pd::Checkpoint, double>> deltas;
            for (const auto& path : fuse_deltas) {
                auto it = coeffs.find(path);
                deltas.emplace_back(pd::Checkpoint::open(path),
                                    it == coeffs.end() ? 1.0 : it->second);
            }
            std::vector<std::string> skipped;
            pd::fuse(anchor, deltas, fuse_out, parse_policy(fuse_policy), threads,
                     scenario_metadata(fuse_scenario), &skipped);
            warn_skipped(skipped);
            std::cout << "wrote " << fuse_out << "\n";
        } else if (*validate) {
            pd::Checkpoint a = pd::Checkpoint::open(val_a);
            pd::Checkpoint b = pd::Checkpoint::open(val_b);
            pd::CompatReport report = pd::validate_homologous(a, b);
            print_compat_report(report);
            if (!val_out.empty()) write_text_file(val_out, compat_report_json(report));
            if (!report.homologous) {
                pd::fail(pd::ErrorClass::NotHomologous,
                         "'" + val_a + "' and '" + val_b + "' differ structurally");
            }
        } else if (*inspect) {
            pd::Checkpoint ck = pd::Checkpoint::open(ins_path);
            if (ins_json) {
                std::cout << inspect_json(ck);
            } else {
                std::cout << "path: " << ck.path().string() << "\n";
                std::cout << "kind: " << pd::kind_name(ck.kind()) << "\n";
                for (const auto& [k, v] : ck.metadata()) std::cout << "meta " << k << " = " << v << "\n";
                for (const auto& name : ck.names()) {
                    const pd::TensorMeta& m = ck.meta(name);
                    std::cout << name << " " << pd::dtype_name(m.dtype) << " "
                              << shape_to_string(m.shape) << " bytes=[" << m.begin << "," << m.end
                              << ")\n";
                }
            }
        } else if (*cosine) {
            pd::Checkpoint a = pd::Checkpoint::open(cos_a);
            pd::Checkpoint b = pd::Checkpoint::open(cos_b);
            pd::AnalysisReport report = pd::cosine_map(a, b, load_rules(cos_rules), cos_bins, threads);
            write_text_file(cos_out, pd::to_json_string(report));
            std::cout << "wrote " << cos_out << " (" << report.records.size() << " tensors)\n";
        } else if (*norms) {
            pd::Checkpoint d = pd::Checkpoint::open(norm_d);
            pd::AnalysisReport report = pd::norm_map(d, load_rules(norm_rules), norm_bins, threads);
            write_text_file(norm_out, pd::to_json_string(report));
            std::cout << "wrote " << norm_out << " (" << report.records.size() << " tensors)\n";
        } else if (*gamma) {
            pd::ScoreTable table = pd::ScoreTable::from_csv(g_csv);
            pd::GammaReport report =
                pd::gamma_report(table, g_base_i, g_post_j, g_base_j, g_real, parse_mode(g_mode));
            if (!g_out.empty()) write_text_file(g_out, report.to_json_string());
            std::cout << "gamma=" << format_shortest(report.fit.gamma)
                      << " intercept=" << format_shortest(report.fit.intercept)
                      << " r_squared=" << format_shortest(report.fit.r_squared)
                      << " n=" << report.fit.n_points << "\n";
        } else if (*sweep) {
            pd::SweepManifest manifest =
                pd::plan_sweep(sw_anchor, sw_delta, sw_alphas, sw_template);
            write_text_file(sw_manifest, manifest.to_json_string());
            std::cout << "wrote " << sw_manifest << " (" << manifest.alphas.size() << " alphas)\n";
            if (!sw_plan_only) {
                pd::Checkpoint anchor = pd::Checkpoint::open(sw_anchor);
                pd::Checkpoint delta = pd::Checkpoint::open(sw_delta);
                for (size_t i = 0; i < manifest.alphas.size(); ++i) {
                    std::vector<std::string> skipped;
                    pd::apply_delta(anchor, delta, manifest.alphas[i], manifest.outputs[i],
                                    parse_policy(sw_policy), threads, {}, &skipped);
                    warn_skipped(skipped);
                    std::cout << "wrote " << manifest.outputs[i] << "\n";
                }
            }
        }
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        exit_code = 2;
    } catch (const pd::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        exit_code = 1;
    } catch (const std::exception& e) {
        std::cerr << "error: Internal: " << e.what() << "\n";
        exit_code = 1;
    }

    if (!mem_stats_path.empty()) {
        std::ofstream out(mem_stats_path);
        out << pd::mem::peak_bytes() << "\n";
    }
    return exit_code;
}
