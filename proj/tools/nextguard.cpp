// nextguard command-line tool: synth, calibrate, monitor, eval, convert.

#include <csignal>
#include <cstdlib>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <nextguard/nextguard.hpp>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nextguard;

namespace {

int g_threads = 1;

void init_logging()
{
    auto logger = spdlog::stderr_color_mt("nextguard");
    logger->set_pattern("%Y-%m-%dT%H:%M:%S.%e %^%l%$ %v");
    spdlog::set_default_logger(logger);
    spdlog::set_level(spdlog::level::warn);
    if (const char *env = std::getenv("NEXTGUARD_LOG")) {
        spdlog::set_level(spdlog::level::from_str(env));
    }
}

[[noreturn]] void usage_error(const std::string &message) { fail(ErrorCode::InvalidArgument, message); }

MaskPolicy mask_option(const std::string &s) { return parse_mask_policy(s); }

std::string threshold_path_for(const fs::path &artifact)
{
    auto p = artifact;
    p.replace_extension(".threshold.json");
    return p.string();
}

bool is_forest_file(const fs::path &path)
{
    std::ifstream in(path, std::ios::binary);
    std::string head(kForestMagic.size(), '\0');
    in.read(head.data(), static_cast<std::streamsize>(head.size()));
    return in && head == kForestMagic;
}

MonitorConfig load_monitor(const fs::path &scorer_path, double threshold, MaskPolicy mask, Decision decision)
{
    if (is_forest_file(scorer_path)) {
        return forest_monitor(load_forest(scorer_path), threshold, mask, decision);
    }
    return MonitorConfig::weighted(load_feature_set(scorer_path), threshold, mask, decision);
}

/// --threshold wins; otherwise the threshold file written by calibrate.
double resolve_threshold(const std::optional<double> &flag, const std::string &file, const fs::path &scorer_path)
{
    if (flag) {
        return *flag;
    }
    const fs::path p = file.empty() ? fs::path(threshold_path_for(scorer_path)) : fs::path(file);
    if (!fs::exists(p)) {
        usage_error("no threshold: pass --threshold or run calibrate with --validation (looked for " + p.string() +
                    ")");
    }
    try {
        const auto j = json::parse(detail::read_file(p));
        require(j.value("format", "") == "nextguard.threshold", ErrorCode::Malformed, p.string() + ": not a threshold file");
        const auto &t = j.at("threshold");
        if (t.is_string()) {
            return t.get<std::string>() == "inf" ? std::numeric_limits<double>::infinity()
                                                 : -std::numeric_limits<double>::infinity();
        }
        return t.get<double>();
    } catch (const json::exception &ex) {
        fail(ErrorCode::Malformed, p.string() + ": " + ex.what());
    }
}

json threshold_json(double tau)
{
    if (std::isinf(tau)) {
        return tau > 0 ? "inf" : "-inf";
    }
    return tau;
}

SaeParams load_sae_logged(const fs::path &path)
{
    std::vector<std::string> warnings;
    auto sae = load_sae(path, Strictness::Lenient, &warnings);
    for (const auto &w : warnings) {
        spdlog::warn("{}: {}", path.string(), w);
    }
    spdlog::info("loaded SAE {} (d={}, M={}, fingerprint {})", path.string(), sae.width(), sae.dict_size(),
                 sae.fingerprint());
    return sae;
}

ActivationDataset load_data(const fs::path &manifest, const SaeParams &sae)
{
    auto ds = load_dataset(manifest, sae.width());
    spdlog::info("loaded {} samples from {}", ds.samples.size(), manifest.string());
    return ds;
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
    std::string out;
    std::map<std::string, std::string> spec;
    std::size_t validation_safe = 100;
    std::size_t validation_unsafe = 100;
};

void add_synth(CLI::App &app, SynthArgs &a)
{
    auto *sub = app.add_subcommand("synth", "Generate a synthetic oracle SAE and datasets");
    sub->add_option("--out", a.out, "Output directory")->required();
    sub->add_option("--validation_safe", a.validation_safe, "Safe sessions in the validation split");
    sub->add_option("--validation_unsafe", a.validation_unsafe, "Unsafe sessions in the validation split");
    const auto defaults = to_json(OracleSpec{});
    for (const auto &[key, value] : defaults.items()) {
        if (key == "format" || key == "version") {
            continue;
        }
        sub->add_option_function<std::string>(
            "--" + key, [&a, key = key](const std::string &v) { a.spec[key] = v; },
            "Oracle spec (default " + value.dump() + ")");
    }
}

void run_synth(const SynthArgs &a, const std::optional<std::uint64_t> &seed)
{
    json j = json::object();
    for (const auto &[key, text] : a.spec) {
        try {
            j[key] = json::parse(text);
        } catch (const json::exception &) {
            usage_error("--" + key + ": '" + text + "' is not a number or boolean");
        }
    }
    if (seed) {
        j["seed"] = *seed;
    }
    const auto o = build_oracle(oracle_spec_from_json(j));
    const fs::path out = a.out;
    save_sae(o.sae, out / "sae.ngsae");
    write_oracle_truth(o, out / "truth.json");
    write_dataset(generate_calibration_set(o), out / "calibration");
    write_dataset(generate_split(o, a.validation_unsafe, a.validation_safe, detail::kStreamValidation),
                  out / "validation");
    write_dataset(generate_split(o, o.spec.n_unsafe, o.spec.n_safe, detail::kStreamSessions), out / "test");
    spdlog::info("wrote oracle (seed {}, fingerprint {}) to {}", o.spec.seed, o.sae.fingerprint(), out.string());
}

// ---------------------------------------------------------------------------
// calibrate

struct CalibrateArgs {
    std::string sae, data, out, validation, threshold_out;
    std::string metric = "smd";
    std::string mask = "score_content_only";
    std::string rule = "safe_quantile";
    std::size_t K = 32;
    double target_fpr = 0.05;
    std::size_t n_label = 3;
    std::size_t k_pool = 10000;
    std::uint32_t trees = 100, max_depth = 12, min_leaf = 5, mtry = 0;
};

void add_calibrate(CLI::App &app, CalibrateArgs &a)
{
    auto *sub = app.add_subcommand("calibrate", "Select safety features (or train a forest) from labeled data");
    sub->add_option("--sae", a.sae, "NGSAE file")->required();
    sub->add_option("--data", a.data, "Calibration manifest")->required();
    sub->add_option("--out", a.out, "Output feature set (.json) or forest (.ngrf)")->required();
    sub->add_option("--metric", a.metric, "smd | threshold_f1 | pearson | mutual_info | starguard");
    sub->add_option("-K,--K", a.K, "Features to keep");
    sub->add_option("--mask", a.mask, "score_all | score_content_only | score_response_only");
    sub->add_option("--validation", a.validation, "Validation manifest; enables threshold calibration");
    sub->add_option("--threshold_rule", a.rule, "safe_quantile | max_validation_f1");
    sub->add_option("--target_fpr", a.target_fpr, "Session false-trigger budget");
    sub->add_option("--threshold_out", a.threshold_out, "Threshold file (default <out stem>.threshold.json)");
    sub->add_option("--n_label", a.n_label, "Forest: labeling features");
    sub->add_option("--k_pool", a.k_pool, "Forest: feature pool size");
    sub->add_option("--trees", a.trees, "Forest: number of trees");
    sub->add_option("--max_depth", a.max_depth, "Forest: maximum depth");
    sub->add_option("--min_leaf", a.min_leaf, "Forest: minimum rows per leaf");
    sub->add_option("--mtry", a.mtry, "Forest: features per split (0 = sqrt)");
}

void run_calibrate(const CalibrateArgs &a, const std::optional<std::uint64_t> &seed)
{
    const auto sae = load_sae_logged(a.sae);
    const auto ds = load_data(a.data, sae);
    const auto mask = mask_option(a.mask);
    MonitorConfig mon;
    if (a.metric == "starguard") {
        ForestParams hp;
        hp.n_trees = a.trees;
        hp.max_depth = a.max_depth;
        hp.min_leaf = a.min_leaf;
        hp.mtry = a.mtry;
        hp.seed = seed.value_or(0);
        hp.n_threads = static_cast<unsigned>(g_threads);
        auto forest = train_starguard(ds.samples, sae, {a.n_label, a.k_pool}, hp);
        save_forest(forest, a.out);
        spdlog::info("trained {} trees over a pool of {} features", forest.trees.size(), forest.pool.size());
        mon = forest_monitor(std::move(forest), 0.0, mask, Decision::FlagOnly);
    } else {
        const auto metric = parse_metric(a.metric);
        if (a.K > sae.dict_size()) {
            usage_error("K=" + std::to_string(a.K) + " exceeds dictionary size M=" + std::to_string(sae.dict_size()) +
                        " (K must be <= M)");
        }
        const auto summaries = aggregate_samples(ds.samples, sae, mask, static_cast<unsigned>(g_threads));
        const auto stats = compute_feature_stats(summaries, sae.dict_size(), metric);
        auto fset = select_features(stats, a.K, sae.fingerprint());
        save_feature_set(fset, a.out);
        spdlog::info("selected {} features by {}", fset.K(), a.metric);
        mon = MonitorConfig::weighted(std::move(fset), 0.0, mask, Decision::FlagOnly);
    }
    if (a.validation.empty()) {
        return;
    }
    const auto val = load_data(a.validation, sae);
    const auto rule = parse_threshold_rule(a.rule);
    const auto traces = trace_dataset(mon, sae, val.samples, static_cast<unsigned>(g_threads));
    const double tau = choose_threshold(traces, rule, a.target_fpr);
    const json t{{"format", "nextguard.threshold"},
                 {"version", 1},
                 {"threshold", threshold_json(tau)},
                 {"rule", std::string(to_string(rule))},
                 {"target_fpr", a.target_fpr},
                 {"mask_policy", std::string(to_string(mask))},
                 {"n_validation", val.samples.size()}};
    const auto path = a.threshold_out.empty() ? threshold_path_for(a.out) : a.threshold_out;
    detail::write_file(path, t.dump(2) + "\n");
    spdlog::info("threshold {} written to {}", tau, path);
}

// ---------------------------------------------------------------------------
// monitor

struct MonitorArgs {
    std::string sae, features, threshold_file, listen, data, input;
    std::optional<double> threshold;
    std::string mask = "score_content_only";
    std::string decision = "halt";
    std::size_t max_sessions = 1024;
    std::size_t token_cap = 1u << 20;
    std::size_t max_frame_bytes = 1u << 20;
    std::string reference_dir = ".";
};

void add_monitor(CLI::App &app, MonitorArgs &a)
{
    auto *sub = app.add_subcommand("monitor", "Serve the streaming protocol, or score files once");
    sub->add_option("--sae", a.sae, "NGSAE file")->required();
    sub->add_option("--features", a.features, "Feature set (.json) or forest (.ngrf)")->required();
    sub->add_option("--threshold_file", a.threshold_file, "Threshold file written by calibrate");
    sub->add_option("--mask", a.mask, "score_all | score_content_only | score_response_only");
    sub->add_option("--decision", a.decision, "halt | flag");
    auto *listen = sub->add_option("--listen", a.listen, "stdio | unix:<path> | tcp:[host:]port");
    auto *data = sub->add_option("--data", a.data, "One-shot: score every sample of a manifest");
    auto *input = sub->add_option("--input", a.input, "One-shot: score one NGACT file (all tokens as response)");
    listen->excludes(data)->excludes(input);
    data->excludes(input);
    sub->add_option("--max_sessions", a.max_sessions, "Open sessions across connections");
    sub->add_option("--token_cap", a.token_cap, "Tokens per session");
    sub->add_option("--max_frame_bytes", a.max_frame_bytes, "Longest accepted frame");
    sub->add_option("--reference_dir", a.reference_dir, "Base directory for hidden_state_ref paths");
}

json session_line(const std::string &id, const SessionTrace &t, double tau)
{
    const auto at = t.first_trigger(tau);
    return {{"id", id},
            {"verdict", at ? "unsafe" : "safe"},
            {"triggered_at", at ? json(*at) : json(nullptr)},
            {"max_score", detail::number_or_null(t.max_score())},
            {"tokens", t.n_tokens}};
}

int run_monitor(const MonitorArgs &a, const std::optional<double> &threshold)
{
    const auto sae = load_sae_logged(a.sae);
    const double tau = resolve_threshold(threshold, a.threshold_file, a.features);
    const auto decision = a.decision == "flag"   ? Decision::FlagOnly
                          : a.decision == "halt" ? Decision::HaltOnTrigger
                                                 : (usage_error("--decision must be halt or flag"), Decision::FlagOnly);
    auto mon = load_monitor(a.features, tau, mask_option(a.mask), decision);
    if (!a.data.empty() || !a.input.empty()) {
        validate_config(mon, sae);
        std::vector<CalibrationSample> samples;
        if (!a.data.empty()) {
            samples = load_data(a.data, sae).samples;
        } else {
            CalibrationSample s;
            s.id = fs::path(a.input).stem().string();
            s.hidden_states = load_activations(a.input);
            s.response_span = {0, s.hidden_states.n_tokens};
            samples.push_back(std::move(s));
        }
        const auto traces = trace_dataset(mon, sae, samples, static_cast<unsigned>(g_threads));
        for (std::size_t i = 0; i < traces.size(); ++i) {
            std::cout << session_line(samples[i].id, traces[i], tau).dump() << "\n";
        }
        return 0;
    }
    require(!a.listen.empty(), ErrorCode::InvalidArgument, "monitor needs --listen, --data or --input");
    ServiceConfig cfg;
    cfg.max_sessions = a.max_sessions;
    cfg.token_cap = a.token_cap;
    cfg.max_frame_bytes = a.max_frame_bytes;
    cfg.reference_dir = a.reference_dir;
    Service service(sae, std::move(mon), cfg);
    const auto endpoint = parse_endpoint(a.listen);
    if (endpoint.kind == Endpoint::Kind::Stdio) {
        spdlog::info("serving on stdio");
        serve_fd(service, STDIN_FILENO, STDOUT_FILENO);
        return 0;
    }
    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);
    Server server(service, endpoint);
    server.start();
    if (endpoint.kind == Endpoint::Kind::Tcp) {
        // Printed so callers binding port 0 can find the port.
        std::cout << json{{"listening", "tcp:" + endpoint.host + ":" + std::to_string(server.port())}}.dump()
                  << std::endl;
    } else {
        std::cout << json{{"listening", "unix:" + endpoint.path}}.dump() << std::endl;
    }
    int sig = 0;
    sigwait(&set, &sig);
    spdlog::info("signal {}, shutting down", sig);
    server.stop();
    return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
    std::string sae, features, data, threshold_file, out, sweep;
    std::string format = "text";
    std::string mask = "score_content_only";
    std::vector<std::uint32_t> pr_features;
    std::size_t pr_top = 8;
    std::vector<std::string> rank_metrics;
    std::size_t bins = 20;
    bool no_timing = false;
    std::vector<std::string> aggregate;
};

void add_eval(CLI::App &app, EvalArgs &a)
{
    auto *sub = app.add_subcommand("eval", "Evaluate a monitor on a labeled dataset");
    sub->add_option("--sae", a.sae, "NGSAE file");
    sub->add_option("--features", a.features, "Feature set (.json) or forest (.ngrf)");
    sub->add_option("--data", a.data, "Evaluation manifest");
    sub->add_option("--threshold_file", a.threshold_file, "Threshold file written by calibrate");
    sub->add_option("--out", a.out, "Report directory");
    sub->add_option("--format", a.format, "Standard output format")->check(CLI::IsMember({"text", "tabular"}));
    sub->add_option("--mask", a.mask, "score_all | score_content_only | score_response_only");
    sub->add_option("--pr_features", a.pr_features, "Features for precision-recall curves");
    sub->add_option("--pr_top", a.pr_top, "Use the feature set's top N features for PR curves");
    sub->add_option("--rank_metrics", a.rank_metrics, "Metrics for the rank-consistency matrix");
    sub->add_option("--bins", a.bins, "Timing histogram bins");
    sub->add_flag("--no_timing", a.no_timing, "Skip intervention timing");
    auto *sweep = sub->add_option("--sweep", a.sweep, "Layer sweep description (JSON)");
    auto *agg = sub->add_option("--aggregate", a.aggregate, "Summarize several report.json files over seeds");
    sweep->excludes(agg);
}

void print_tables(const std::map<std::string, std::string> &tables)
{
    for (const auto &[name, body] : tables) {
        std::cout << "# " << name << "\n" << body;
    }
}

void print_report_text(const EvalReport &r)
{
    std::cout << fmt::format("scorer {}  threshold {}\n", r.scorer, r.threshold);
    std::cout << fmt::format("unsafe F1 {:.4f}  precision {:.4f}  recall {:.4f}  (tp {} fp {} fn {} tn {})\n", r.f1.f1,
                             r.f1.precision, r.f1.recall, r.f1.tp, r.f1.fp, r.f1.fn, r.f1.tn);
    if (r.timing) {
        std::cout << fmt::format("timing: median |trigger - onset| {} tokens, peak bins {} / {}, peak match {}\n",
                                 r.timing->median_abs_error, r.timing->trigger_peak_bin, r.timing->onset_peak_bin,
                                 r.timing->peak_match ? "yes" : "no");
    } else if (!r.timing_note.empty()) {
        std::cout << "timing: " << r.timing_note << "\n";
    }
    for (const auto &f : r.feature_pr) {
        std::cout << fmt::format("pr feature {} category {}: AP {:.4f} (prevalence {:.4f})\n", f.feature, f.category,
                                 f.average_precision, f.prevalence);
    }
    if (r.rank_consistency) {
        const auto &rc = *r.rank_consistency;
        for (std::size_t i = 0; i < rc.metrics.size(); ++i) {
            for (std::size_t k = i + 1; k < rc.metrics.size(); ++k) {
                std::cout << fmt::format("spearman {} vs {}: {:.4f}\n", to_string(rc.metrics[i]),
                                         to_string(rc.metrics[k]), rc.matrix[i][k]);
            }
        }
    }
}

int run_eval_sweep(const EvalArgs &a)
{
    const fs::path sweep_path = a.sweep;
    json j;
    try {
        j = json::parse(detail::read_file(sweep_path));
    } catch (const json::exception &ex) {
        fail(ErrorCode::Malformed, sweep_path.string() + ": " + ex.what());
    }
    const auto base = sweep_path.parent_path();
    LayerSweepConfig cfg;
    std::map<std::uint32_t, LayerData> layers;
    try {
        require(j.value("format", "") == "nextguard.layer_sweep", ErrorCode::Malformed,
                sweep_path.string() + ": not a layer sweep description");
        cfg.K = j.value("K", cfg.K);
        cfg.metric = parse_metric(j.value("metric", "smd"));
        cfg.mask = parse_mask_policy(j.value("mask_policy", "score_content_only"));
        cfg.rule = parse_threshold_rule(j.value("threshold_rule", "max_validation_f1"));
        cfg.target_fpr = j.value("target_fpr", cfg.target_fpr);
        cfg.n_threads = static_cast<unsigned>(g_threads);
        for (const auto &l : j.at("layers")) {
            auto sae = load_sae_logged(base / l.at("sae").get<std::string>());
            const auto layer = sae.layer_index();
            auto cal = load_data(base / l.at("calibration").get<std::string>(), sae);
            auto val = load_data(base / l.at("validation").get<std::string>(), sae);
            auto test = load_data(base / l.at("test").get<std::string>(), sae);
            require(!layers.contains(layer), ErrorCode::InvalidArgument,
                    "layer " + std::to_string(layer) + " appears twice in the sweep");
            layers.emplace(layer, LayerData{std::move(sae), std::move(cal), std::move(val), std::move(test)});
        }
    } catch (const json::exception &ex) {
        fail(ErrorCode::Malformed, sweep_path.string() + ": " + ex.what());
    }
    EvalReport r;
    r.layer_sweep = eval_layer_sweep(layers, cfg);
    const auto tables = report_tables(r);
    if (!a.out.empty()) {
        json out{{"format", "nextguard.layer_sweep_report"},
                 {"version", 1},
                 {"metric", std::string(to_string(cfg.metric))},
                 {"threshold_rule", std::string(to_string(cfg.rule))},
                 {"rows", to_json(r)["layer_sweep"]}};
        detail::write_file(fs::path(a.out) / "layer_sweep.json", out.dump(2) + "\n");
        detail::write_file(fs::path(a.out) / "layer_sweep.csv", tables.at("layer_sweep.csv"));
    }
    if (a.format == "tabular") {
        std::cout << tables.at("layer_sweep.csv");
    } else {
        for (const auto &row : r.layer_sweep) {
            std::cout << fmt::format("{:>8}  threshold {:>10.4g}  F1 {:.4f}\n",
                                     row.layer ? std::to_string(*row.layer) : "baseline", row.threshold,
                                     row.result.f1);
        }
    }
    return 0;
}

int run_eval_aggregate(const EvalArgs &a)
{
    std::map<std::string, std::vector<double>> values;
    for (const auto &path : a.aggregate) {
        try {
            const auto j = json::parse(detail::read_file(path));
            require(j.value("format", "") == "nextguard.eval_report", ErrorCode::Malformed,
                    path + ": not an eval report");
            for (const char *k : {"f1", "precision", "recall"}) {
                const auto &v = j.at("unsafe_f1").at(k);
                if (v.is_number()) {
                    values[std::string("unsafe_") + k].push_back(v.get<double>());
                }
            }
            if (j.at("timing").is_object()) {
                values["median_abs_onset_error"].push_back(j["timing"].at("median_abs_onset_error").get<double>());
            }
        } catch (const json::exception &ex) {
            fail(ErrorCode::Malformed, path + ": " + ex.what());
        }
    }
    json out{{"format", "nextguard.seed_summary"},
             {"version", 1},
             {"std", "sample standard deviation over seeds"},
             {"n_reports", a.aggregate.size()}};
    std::string csv = "metric,n,mean,std_over_seeds\n";
    for (const auto &[name, v] : values) {
        const auto s = summarize_seeds(v);
        out["summaries"][name] = {{"n", s.n}, {"mean", s.mean}, {"std_over_seeds", s.std_over_seeds}};
        csv += name + "," + std::to_string(s.n) + "," + detail::csv_number(s.mean) + "," +
               detail::csv_number(s.std_over_seeds) + "\n";
        if (a.format == "text") {
            std::cout << fmt::format("{}: {:.4f} +/- {:.4f} (std over {} seeds)\n", name, s.mean, s.std_over_seeds,
                                     s.n);
        }
    }
    if (a.format == "tabular") {
        std::cout << csv;
    }
    if (!a.out.empty()) {
        detail::write_file(fs::path(a.out) / "seed_summary.json", out.dump(2) + "\n");
        detail::write_file(fs::path(a.out) / "seed_summary.csv", csv);
    }
    return 0;
}

int run_eval(const EvalArgs &a, const std::optional<double> &threshold)
{
    if (!a.sweep.empty()) {
        return run_eval_sweep(a);
    }
    if (!a.aggregate.empty()) {
        return run_eval_aggregate(a);
    }
    if (a.sae.empty() || a.features.empty() || a.data.empty()) {
        usage_error("eval needs --sae, --features and --data (or --sweep / --aggregate)");
    }
    const auto sae = load_sae_logged(a.sae);
    const auto ds = load_data(a.data, sae);
    const double tau = resolve_threshold(threshold, a.threshold_file, a.features);
    const auto mon = load_monitor(a.features, tau, mask_option(a.mask), Decision::FlagOnly);
    EvalOptions opt;
    opt.timing = !a.no_timing;
    opt.n_bins = a.bins;
    opt.summary_mask = mask_option(a.mask);
    opt.n_threads = static_cast<unsigned>(g_threads);
    opt.pr_features = a.pr_features;
    if (opt.pr_features.empty() && a.pr_top > 0) {
        if (const auto *w = dynamic_cast<const WeightedSumScorer *>(mon.scorer.get())) {
            for (const auto &f : w->feature_set().features) {
                if (opt.pr_features.size() == a.pr_top) {
                    break;
                }
                opt.pr_features.push_back(f.index);
            }
        }
    }
    for (const auto &m : a.rank_metrics) {
        opt.rank_metrics.push_back(parse_metric(m));
    }
    const auto r = evaluate(ds, sae, mon, opt);
    if (!a.out.empty()) {
        write_report(r, a.out);
        spdlog::info("report written to {}", a.out);
    }
    if (a.format == "tabular") {
        print_tables(report_tables(r));
    } else {
        print_report_text(r);
    }
    return 0;
}

// ---------------------------------------------------------------------------
// convert

struct ConvertArgs {
    std::string enc_weights, enc_bias, dec_weights, pre_bias, out, sparsity = "relu", export_dir;
    std::size_t d = 0, M = 0;
    std::uint32_t layer = 0;
    bool strict = false;
    bool transpose_dec = false;
};

void add_convert(CLI::App &app, ConvertArgs &a)
{
    auto *sub = app.add_subcommand("convert", "Pack raw little-endian f32 matrices into NGSAE (or unpack)");
    sub->add_option("--d", a.d, "Hidden width");
    sub->add_option("--M", a.M, "Dictionary size");
    sub->add_option("--enc_weights", a.enc_weights, "M x d encoder, row-major f32");
    sub->add_option("--enc_bias", a.enc_bias, "M encoder biases, f32");
    sub->add_option("--dec_weights", a.dec_weights, "d x M decoder, row-major f32");
    sub->add_option("--pre_bias", a.pre_bias, "d pre-encoder biases, f32");
    sub->add_flag("--transpose_dec", a.transpose_dec, "Decoder file is M x d (transpose on load)");
    sub->add_option("--sparsity", a.sparsity, "relu | topk:<k>");
    sub->add_option("--layer", a.layer, "Layer tag");
    sub->add_flag("--strict", a.strict, "Reject dictionaries that are not overcomplete");
    sub->add_option("--out", a.out, "NGSAE file to write, or to read with --export");
    sub->add_option("--export", a.export_dir, "Unpack --out into raw files in this directory");
}

std::vector<float> read_f32(const std::string &path, std::size_t n, const char *what)
{
    require(!path.empty(), ErrorCode::InvalidArgument, std::string("convert needs --") + what);
    const auto bytes = detail::read_file(path);
    if (bytes.size() != n * sizeof(float)) {
        fail(ErrorCode::DimensionMismatch, path + ": " + what + " needs " + std::to_string(n * sizeof(float)) +
                                               " bytes, file has " + std::to_string(bytes.size()));
    }
    std::vector<float> v(n);
    std::memcpy(v.data(), bytes.data(), bytes.size());
    return v;
}

void write_f32(const fs::path &path, std::span<const float> v)
{
    detail::write_file(path, std::string_view(reinterpret_cast<const char *>(v.data()), v.size_bytes()));
}

Sparsity parse_sparsity(const std::string &s)
{
    if (s == "relu") {
        return Sparsity::relu();
    }
    if (s.starts_with("topk:")) {
        try {
            std::size_t used = 0;
            const auto k = std::stoul(s.substr(5), &used);
            if (used == s.size() - 5) {
                return Sparsity::top_k(static_cast<std::uint32_t>(k));
            }
        } catch (const std::exception &) {
        }
    }
    usage_error("--sparsity must be relu or topk:<k>, got '" + s + "'");
}

void run_convert(const ConvertArgs &a)
{
    require(!a.out.empty(), ErrorCode::InvalidArgument, "convert needs --out");
    if (!a.export_dir.empty()) {
        const auto sae = load_sae_logged(a.out);
        const auto &p = sae.parts();
        const fs::path dir = a.export_dir;
        write_f32(dir / "enc_weights.f32", p.enc_weights);
        write_f32(dir / "enc_bias.f32", p.enc_bias);
        write_f32(dir / "dec_weights.f32", p.dec_weights);
        write_f32(dir / "pre_bias.f32", p.pre_bias);
        const json meta{{"format", "nextguard.raw_sae"},
                        {"version", 1},
                        {"d", p.d},
                        {"M", p.M},
                        {"sparsity", p.sparsity.kind == SparsityKind::Relu ? std::string("relu")
                                                                            : "topk:" + std::to_string(p.sparsity.k)},
                        {"layer", p.layer_index},
                        {"sae_fingerprint", sae.fingerprint()}};
        detail::write_file(dir / "meta.json", meta.dump(2) + "\n");
        return;
    }
    require(a.d > 0 && a.M > 0, ErrorCode::InvalidArgument, "convert needs --d and --M");
    SaeParts p;
    p.d = a.d;
    p.M = a.M;
    p.enc_weights = read_f32(a.enc_weights, a.M * a.d, "enc_weights");
    p.enc_bias = read_f32(a.enc_bias, a.M, "enc_bias");
    p.dec_weights = read_f32(a.dec_weights, a.d * a.M, "dec_weights");
    if (a.transpose_dec) {
        std::vector<float> t(p.dec_weights.size());
        for (std::size_t j = 0; j < a.M; ++j) {
            for (std::size_t i = 0; i < a.d; ++i) {
                t[i * a.M + j] = p.dec_weights[j * a.d + i];
            }
        }
        p.dec_weights = std::move(t);
    }
    p.pre_bias = read_f32(a.pre_bias, a.d, "pre_bias");
    p.sparsity = parse_sparsity(a.sparsity);
    p.layer_index = a.layer;
    std::vector<std::string> warnings;
    const auto sae = SaeParams::create(std::move(p), a.strict ? Strictness::Strict : Strictness::Lenient, &warnings);
    for (const auto &w : warnings) {
        spdlog::warn("{}", w);
    }
    save_sae(sae, a.out);
    std::cout << json{{"sae_fingerprint", sae.fingerprint()}}.dump() << "\n";
}

void print_error(std::string_view code, const std::string &message)
{
    std::cerr << json{{"error", {{"code", code}, {"message", message}}}}.dump() << std::endl;
}

} // namespace

int main(int argc, char **argv)
{
    init_logging();
    CLI::App app{"nextguard: sparse-feature safety monitor"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_config("--config", "", "TOML config file; [section] per subcommand");
    std::optional<std::uint64_t> seed;
    std::optional<double> threshold;
    app.add_option("--seed", seed, "Random seed");
    app.add_option("--threshold", threshold, "Risk threshold (overrides threshold files)");
    app.add_option("--threads", g_threads, "Worker threads")->check(CLI::Range(1, 1024));

    SynthArgs synth;
    CalibrateArgs cal;
    MonitorArgs mon;
    EvalArgs ev;
    ConvertArgs conv;
    add_synth(app, synth);
    add_calibrate(app, cal);
    add_monitor(app, mon);
    add_eval(app, ev);
    add_convert(app, conv);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        print_error("usage", e.what());
        return 64;
    }

    try {
        if (app.got_subcommand("synth")) {
            run_synth(synth, seed);
        } else if (app.got_subcommand("calibrate")) {
            run_calibrate(cal, seed);
        } else if (app.got_subcommand("monitor")) {
            return run_monitor(mon, threshold);
        } else if (app.got_subcommand("eval")) {
            return run_eval(ev, threshold);
        } else if (app.got_subcommand("convert")) {
            run_convert(conv);
        }
    } catch (const Error &e) {
        print_error(to_string(e.code()), e.what());
        return 2;
    } catch (const std::exception &e) {
        print_error("internal", e.what());
        return 3;
    }
    return 0;
}
