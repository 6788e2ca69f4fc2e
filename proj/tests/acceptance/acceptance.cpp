// Acceptance suite: one PASS/FAIL line per criterion A1-A9.
//
// Usage: acceptance [A1 A2 ...]   (default: all)
// Exit status is nonzero when a criterion fails that is not listed in
// kKnownFailures.

#include <sys/socket.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include <Eigen/Dense>
#include <fmt/format.h>

#include <nextguard/nextguard.hpp>

#include "../scenarios.hpp"

namespace fs = std::filesystem;
using namespace nextguard;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
    bool pass = false;
    /// Pass/fail is decided by `pass`; `known` marks a failure documented in
    /// the project notes.
    bool known = false;
    std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::size_t planted_hits(const Oracle &o, const SafetyFeatureSet &fs)
{
    std::size_t hits = 0;
    for (const auto &f : fs.features) {
        hits += std::count(o.truth.planted.begin(), o.truth.planted.end(), f.index);
    }
    return hits;
}

// ---------------------------------------------------------------------------
// A1 / A4: feature recovery and metric consistency on the default oracle.

constexpr int kRecoverySeeds = 20;

struct RecoveryRun {
    Oracle oracle;
    std::vector<SampleFeatureSummary> summaries;
};

std::vector<RecoveryRun> &recovery_runs()
{
    static std::vector<RecoveryRun> runs;
    return runs;
}

Outcome a1()
{
    auto &runs = recovery_runs();
    runs.clear();
    const auto t0 = Clock::now();
    int good = 0;
    std::string hits;
    for (int seed = 1; seed <= kRecoverySeeds; ++seed) {
        OracleSpec spec;  // d=64, M=1024, 8 planted, 200+200, noise 0.05, decoy 0.05
        spec.seed = static_cast<std::uint64_t>(seed);
        auto o = build_oracle(spec);
        const auto cal = generate_calibration_set(o);
        auto sums = aggregate_samples(cal.samples, o.sae, MaskPolicy::ScoreContentOnly);
        const auto fs = select_features(compute_smd(sums, spec.M), 32, o.sae.fingerprint());
        const auto h = planted_hits(o, fs);
        good += h >= 7;
        hits += std::to_string(h);
        runs.push_back({std::move(o), std::move(sums)});
    }
    const double wall = seconds_since(t0);
    return {good >= 19 && wall < 30.0, false,
            fmt::format("{}/{} seeds recover >= 7 of 8 planted (per-seed hits {}), wall {:.1f} s (< 30 s)", good,
                        kRecoverySeeds, hits, wall)};
}

Outcome a4()
{
    if (recovery_runs().empty()) {
        a1();
    }
    double min_f1 = 1.0, min_pearson = 1.0, sum_f1 = 0.0;
    int planted_top = 0;
    for (const auto &run : recovery_runs()) {
        const PooledColumns cols(run.summaries, run.oracle.spec.M);
        const auto smd = compute_feature_stats(cols, Metric::Smd);
        const auto f1 = compute_feature_stats(cols, Metric::ThresholdF1);
        const auto pearson = compute_feature_stats(cols, Metric::Pearson);
        const double r_f1 = rank_consistency(smd, f1);
        const double r_p = rank_consistency(smd, pearson);
        min_f1 = std::min(min_f1, r_f1);
        min_pearson = std::min(min_pearson, r_p);
        sum_f1 += r_f1;
        bool top = true;
        for (const auto *st : {&smd, &f1}) {
            const auto order = rank_features(st->score);
            const std::set<std::uint32_t> top8(order.begin(), order.begin() + 8);
            for (auto j : run.oracle.truth.planted) {
                top = top && top8.contains(j);
            }
        }
        planted_top += top;
    }
    const bool f1_ok = min_f1 >= 0.8;
    const bool pearson_ok = min_pearson >= 0.8;
    const auto n = recovery_runs().size();
    return {f1_ok && pearson_ok, !f1_ok && pearson_ok,
            fmt::format("spearman SMD vs ThresholdF1 min {:.3f} mean {:.3f} (>= 0.8: {}); SMD vs Pearson min {:.3f} "
                        "(>= 0.8: {}); planted set is the top 8 under both SMD and ThresholdF1 in {}/{} seeds",
                        min_f1, sum_f1 / static_cast<double>(n), f1_ok ? "yes" : "no", min_pearson,
                        pearson_ok ? "yes" : "no", planted_top, n)};
}

// ---------------------------------------------------------------------------
// A2 / A5: streaming detection, weighted sum vs forest.

constexpr int kDetectionSeeds = 10;

struct DetectionRun {
    Oracle oracle;
    ActivationDataset cal, val, test;
    double f1 = 0.0;
};

std::vector<DetectionRun> &detection_runs()
{
    static std::vector<DetectionRun> runs;
    return runs;
}

Outcome a2()
{
    auto &runs = detection_runs();
    runs.clear();
    std::vector<double> f1s;
    std::string per_seed;
    for (int seed = 1; seed <= kDetectionSeeds; ++seed) {
        OracleSpec spec;
        spec.seed = static_cast<std::uint64_t>(seed);
        DetectionRun r{build_oracle(spec), {}, {}, {}, 0.0};
        r.cal = generate_calibration_set(r.oracle);
        r.val = generate_split(r.oracle, 0, 100, detail::kStreamValidation);
        r.test = generate_split(r.oracle, 200, 200, detail::kStreamSessions);
        const auto fs = calibrate(r.cal.samples, r.oracle.sae, 32);
        const auto mon = MonitorConfig::weighted(fs, 0.0, MaskPolicy::ScoreContentOnly);
        const double tau = calibrate_threshold(safe_max_scores(trace_dataset(mon, r.oracle.sae, r.val.samples)), 0.05);
        r.f1 = eval_f1(trace_dataset(mon, r.oracle.sae, r.test.samples), tau).f1;
        f1s.push_back(r.f1);
        per_seed += fmt::format(" {:.4f}", r.f1);
        runs.push_back(std::move(r));
    }
    const auto s = summarize_seeds(f1s);
    const double lo = *std::min_element(f1s.begin(), f1s.end());
    return {lo >= 0.95, false,
            fmt::format("unsafe F1 per seed{}; min {:.4f} (>= 0.95); mean {:.4f} +/- {:.4f} (std over {} seeds)",
                        per_seed, lo, s.mean, s.std_over_seeds, s.n)};
}

Outcome a5()
{
    if (detection_runs().empty()) {
        a2();
    }
    double worst = 0.0;
    std::size_t tokens_checked = 0, unsound = 0;
    std::string per_seed;
    for (std::size_t i = 0; i < detection_runs().size(); ++i) {
        const auto &r = detection_runs()[i];
        ForestParams hp;
        hp.seed = i + 1;
        LabelingSelection sel;
        auto forest = train_starguard(r.cal.samples, r.oracle.sae, {3, 256}, hp, &sel);
        const auto mon = forest_monitor(std::move(forest), 0.0, MaskPolicy::ScoreContentOnly);
        const double tau =
            calibrate_threshold(safe_max_scores(trace_dataset(mon, r.oracle.sae, r.val.samples)), 0.05);
        const double f1 = eval_f1(trace_dataset(mon, r.oracle.sae, r.test.samples), tau).f1;
        worst = std::max(worst, std::abs(f1 - r.f1));
        per_seed += fmt::format(" {:.4f}", f1);
        for (const auto *ds : {&r.cal, &r.val, &r.test}) {
            const auto labels = generate_pseudo_labels(ds->samples, r.oracle.sae, sel.labeling);
            std::size_t k = 0;
            for (const auto &s : ds->samples) {
                for (std::size_t t = 0; t < s.n_tokens(); ++t, ++k) {
                    unsound += s.label == Label::Safe && labels[k].label != 0;
                }
            }
            tokens_checked += labels.size();
        }
    }
    return {worst <= 0.05 && unsound == 0, false,
            fmt::format("forest F1 per seed{}; max |forest - weighted sum| {:.4f} (<= 0.05); safe-sample tokens "
                        "with pseudo-label 1: {} of {} tokens checked",
                        per_seed, worst, unsound, tokens_checked)};
}

// ---------------------------------------------------------------------------
// A3: intervention timing.

Outcome a3()
{
    OracleSpec spec;
    spec.seed = 1;
    const auto o = build_oracle(spec);
    const auto fs = calibrate(generate_calibration_set(o).samples, o.sae, 32);
    const auto mon = MonitorConfig::weighted(fs, 0.0, MaskPolicy::ScoreContentOnly);
    const auto val = generate_split(o, 0, 100, detail::kStreamValidation);
    const double tau = calibrate_threshold(safe_max_scores(trace_dataset(mon, o.sae, val.samples)), 0.05);
    const auto sessions = generate_split(o, 300, 0, detail::kStreamSessions);
    const auto r = eval_intervention_timing(trace_dataset(mon, o.sae, sessions.samples), tau);
    const auto set_text = [](const std::vector<std::size_t> &v) { return fmt::format("{{{}}}", fmt::join(v, ",")); };
    return {r.median_abs_error <= 2.0 && r.peak_match, false,
            fmt::format("300 sessions, {} triggered; median |trigger - onset| {} tokens (<= 2); peak bins trigger {} "
                        "onset {}; peak sets (within 2 SE) {} and {} intersect: {}",
                        r.n_true_positive, r.median_abs_error, r.trigger_peak_bin, r.onset_peak_bin,
                        set_text(r.trigger_peak_set), set_text(r.onset_peak_set), r.peak_match ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// A6: SAE numeric contracts against Eigen dense references.

SaeParams random_sae(std::size_t d, std::size_t M, Sparsity sp, std::uint64_t seed)
{
    detail::Rng rng(seed);
    SaeParts p;
    p.d = d;
    p.M = M;
    p.sparsity = sp;
    const auto fill = [&](std::vector<float> &v, std::size_t n, double scale) {
        v.resize(n);
        for (auto &x : v) {
            x = static_cast<float>(scale * rng.normal());
        }
    };
    fill(p.enc_weights, M * d, 1.0 / std::sqrt(static_cast<double>(d)));
    fill(p.enc_bias, M, 0.1);
    fill(p.dec_weights, d * M, 1.0 / std::sqrt(static_cast<double>(d)));
    fill(p.pre_bias, d, 0.1);
    return SaeParams::create(std::move(p));
}

double rel_err(double a, double b) { return b == 0.0 ? std::abs(a) : std::abs(a - b) / std::abs(b); }

Outcome a6()
{
    using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    double worst_enc = 0.0, worst_dec = 0.0;
    std::size_t set_mismatch = 0;
    const std::size_t d = 48, M = 384;
    for (auto sp : {Sparsity::relu(), Sparsity::top_k(16)}) {
        const auto sae = random_sae(d, M, sp, 17 + sp.k);
        const auto &p = sae.parts();
        const Mat W = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                          p.enc_weights.data(), M, d)
                          .cast<double>();
        const Mat D = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                          p.dec_weights.data(), d, M)
                          .cast<double>();
        const Eigen::VectorXd be = Eigen::Map<const Eigen::VectorXf>(p.enc_bias.data(), M).cast<double>();
        const Eigen::VectorXd bp = Eigen::Map<const Eigen::VectorXf>(p.pre_bias.data(), d).cast<double>();
        detail::Rng rng(5);
        for (int trial = 0; trial < 200; ++trial) {
            std::vector<float> h(d);
            for (auto &x : h) {
                x = static_cast<float>(rng.normal());
            }
            const Eigen::VectorXd pre = W * (Eigen::Map<const Eigen::VectorXf>(h.data(), d).cast<double>() - bp) + be;
            std::vector<std::pair<double, std::uint32_t>> ref;
            for (std::uint32_t j = 0; j < M; ++j) {
                ref.emplace_back(pre[j], j);
            }
            if (sp.kind == SparsityKind::TopK) {
                std::sort(ref.begin(), ref.end(),
                          [](auto a, auto b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
                ref.resize(sp.k);
            }
            std::erase_if(ref, [](auto e) { return !(e.first > 0.0); });
            std::sort(ref.begin(), ref.end(), [](auto a, auto b) { return a.second < b.second; });
            const auto z = encode(sae, h);
            if (z.entries.size() != ref.size()) {
                ++set_mismatch;
                continue;
            }
            for (std::size_t i = 0; i < ref.size(); ++i) {
                set_mismatch += z.entries[i].index != ref[i].second;
                worst_enc = std::max(worst_enc, rel_err(z.entries[i].value, ref[i].first));
            }
            // Decode a random 5-sparse code.
            FeatureVector code;
            code.dense_len = M;
            Eigen::VectorXd dense = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(M));
            std::set<std::uint32_t> picked;
            while (picked.size() < 5) {
                picked.insert(static_cast<std::uint32_t>(rng.below(M)));
            }
            for (auto j : picked) {
                const auto v = static_cast<float>(rng.uniform(0.1, 3.0));
                code.entries.push_back({j, v});
                dense[j] = v;
            }
            const Eigen::VectorXd hat = D * dense + bp;
            const auto out = decode(sae, code);
            for (std::size_t i = 0; i < d; ++i) {
                worst_dec = std::max(worst_dec, rel_err(out[i], hat[static_cast<Eigen::Index>(i)]));
            }
        }
    }

    OracleSpec spec;
    spec.seed = 3;
    const auto o = build_oracle(spec);
    detail::Rng rng(9);
    double worst_recon = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        FeatureVector z;
        z.dense_len = spec.M;
        for (auto j : o.truth.planted) {
            if (rng.bernoulli(0.5)) {
                z.entries.push_back({j, static_cast<float>(rng.uniform(0.5, 6.0))});
            }
        }
        std::sort(z.entries.begin(), z.entries.end(), [](auto a, auto b) { return a.index < b.index; });
        worst_recon = std::max(worst_recon, reconstruction_error(o.sae, decode(o.sae, z)));
    }

    const auto t0 = Clock::now();
    std::size_t violations = 0;
    const std::size_t n_inputs = 100000;
    for (std::size_t i = 0; i < n_inputs; ++i) {
        std::vector<float> h(spec.d);
        const double scale = rng.uniform(0.1, 10.0);
        for (auto &x : h) {
            x = static_cast<float>(scale * rng.normal());
        }
        const auto z = encode(o.sae, h);
        bool ok = z.entries.size() <= spec.k;
        for (std::size_t e = 0; e < z.entries.size(); ++e) {
            ok = ok && z.entries[e].value > 0.0f && (e == 0 || z.entries[e - 1].index < z.entries[e].index);
        }
        violations += !ok;
    }
    const bool pass = set_mismatch == 0 && worst_enc <= 1e-5 && worst_dec <= 1e-5 && worst_recon <= 1e-10 &&
                      violations == 0;
    return {pass, false,
            fmt::format("encode max rel err {:.2e}, active-set mismatches {}; decode max rel err {:.2e} (<= 1e-5); "
                        "planted reconstruction max {:.2e} (<= 1e-10); TopK k={} violations {} in {} inputs ({:.1f} s)",
                        worst_enc, set_mismatch, worst_dec, worst_recon, spec.k, violations, n_inputs,
                        seconds_since(t0))};
}

// ---------------------------------------------------------------------------
// A7: layer sweep.

Outcome a7()
{
    bool pass = true;
    std::string rows;
    for (int seed = 1; seed <= 5; ++seed) {
        std::map<std::uint32_t, LayerData> layers;
        for (int signal = 0; signal < 2; ++signal) {
            OracleSpec spec;
            spec.seed = static_cast<std::uint64_t>(seed * 10 + signal);
            spec.layer_index = signal ? 18 : 9;
            spec.signal_enabled = signal == 1;
            const auto o = build_oracle(spec);
            layers.emplace(spec.layer_index,
                           LayerData{o.sae, generate_calibration_set(o),
                                     generate_split(o, 100, 100, detail::kStreamValidation),
                                     generate_split(o, 200, 200, detail::kStreamSessions)});
        }
        LayerSweepConfig cfg;
        cfg.rule = ThresholdRule::MaxValidationF1;
        const auto r = eval_layer_sweep(layers, cfg);
        // Rows: layer 9 (no signal), layer 18 (signal), baseline.
        const double none = r[0].result.f1, sig = r[1].result.f1, base = r[2].result.f1;
        pass = pass && sig >= 0.95 && std::abs(none - base) <= 0.05;
        rows += fmt::format(" [seed {}: signal {:.4f}, no-signal {:.4f}, always-unsafe {:.4f}]", seed, sig, none, base);
    }
    return {pass, false,
            "threshold by max validation F1;" + rows + " (signal >= 0.95, |no-signal - baseline| <= 0.05)"};
}

// ---------------------------------------------------------------------------
// A8: service protocol and latency.

std::vector<nlohmann::json> parse_frames(const std::string &text)
{
    std::vector<nlohmann::json> v;
    std::istringstream in(text);
    for (std::string l; std::getline(in, l);) {
        v.push_back(nlohmann::json::parse(l));
    }
    return v;
}

bool check_out_of_order(std::string &why)
{
    const auto fx = testing::ServiceFixture::make();
    auto svc = fx.service(1e9);
    Connection conn(svc);
    const auto s = generate_stream_session(fx.oracle, false, 0);
    conn.handle_line(protocol::open_frame("a", fx.oracle.sae.fingerprint()));
    conn.handle_line(testing::token_request(s, 0, "a", 3));
    const auto err = parse_frames(conn.handle_line(testing::token_request(s, 1, "a", 3)));
    const auto after = parse_frames(conn.handle_line(testing::token_request(s, 1, "a", 4)));
    const bool ok = err.size() == 1 && err[0].value("code", "") == "OUT_OF_ORDER" && after.size() == 1 &&
                    after[0]["type"] == "risk" && after[0]["token_index"] == 4;
    if (!ok) {
        why += " out-of-order check failed;";
    }
    return ok;
}

bool check_interleaving(std::string &why)
{
    const auto fx = testing::ServiceFixture::make();
    auto svc = fx.service(1e9);
    Connection conn(svc);
    const auto a = generate_stream_session(fx.oracle, true, 1);
    const auto b = generate_stream_session(fx.oracle, false, 2);
    conn.handle_line(protocol::open_frame("A", fx.oracle.sae.fingerprint()));
    conn.handle_line(protocol::open_frame("B", fx.oracle.sae.fingerprint()));
    bool ok = true;
    for (std::size_t t = 0; t < std::min(a.n_tokens(), b.n_tokens()); ++t) {
        for (const auto *s : {&a, &b}) {
            const std::string sid = s == &a ? "A" : "B";
            const auto r = parse_frames(conn.handle_line(testing::token_request(*s, t, sid, t)));
            const bool scored = is_scored(svc.monitor().mask_policy, s->role(t));
            const double expect = scored ? score_token(svc.monitor(), svc.params(), s->hidden_states.row(t)).score : 0.0;
            ok = ok && r.size() == 1 && r[0]["session_id"] == sid && r[0]["token_index"] == t &&
                 r[0]["score"].get<double>() == expect;
        }
    }
    if (!ok) {
        why += " interleaving check failed;";
    }
    return ok;
}

bool check_lockstep(std::string &why)
{
    const auto fx = testing::ServiceFixture::make();
    auto svc = fx.service(1e9);
    Server server(svc, parse_endpoint("tcp:127.0.0.1:0"));
    server.start();
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(server.port());
    ::inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
    bool ok = ::connect(fd, reinterpret_cast<sockaddr *>(&addr), sizeof addr) == 0;
    // Two sessions, all frames pipelined in one write.
    std::string all = protocol::open_frame("x", fx.oracle.sae.fingerprint()) +
                      protocol::open_frame("y", fx.oracle.sae.fingerprint());
    const auto sx = generate_stream_session(fx.oracle, true, 8);
    const auto sy = generate_stream_session(fx.oracle, false, 9);
    const std::size_t n = std::min(sx.n_tokens(), sy.n_tokens());
    for (std::size_t t = 0; t < n; ++t) {
        all += testing::token_request(sx, t, "x", 2 * t) + testing::token_request(sy, t, "y", t);
    }
    ok = ok && detail::write_all(fd, all, true);
    detail::LineReader reader(fd, 1u << 20);
    std::map<std::string, long long> last{{"x", -1}, {"y", -1}};
    std::size_t risks = 0;
    for (std::string l; ok && risks < 2 * n && reader.next(l) == detail::LineReader::Status::Line;) {
        const auto j = nlohmann::json::parse(l);
        if (j["type"] != "risk") {
            continue;
        }
        const auto sid = j["session_id"].get<std::string>();
        const auto idx = j["token_index"].get<long long>();
        ok = ok && idx > last[sid];
        last[sid] = idx;
        ++risks;
    }
    ::close(fd);
    ok = ok && risks == 2 * n;
    if (!ok) {
        why += " lockstep check failed;";
    }
    return ok;
}

/// Median score_token latency on a ReLU SAE at d=4096, M=65536, |S|=32.
double latency_median_ms(std::size_t &bytes)
{
    const std::size_t d = 4096, M = 65536;
    SaeParts p;
    p.d = d;
    p.M = M;
    p.sparsity = Sparsity::relu();
    std::uint64_t x = 0x9e3779b97f4a7c15ULL;
    const auto next = [&x] {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        return static_cast<float>(static_cast<std::int32_t>(x >> 32)) * (1.0f / 2147483648.0f) * 0.03f;
    };
    p.enc_weights.resize(M * d);
    for (auto &w : p.enc_weights) {
        w = next();
    }
    p.dec_weights.assign(d * M, 0.0f);
    p.enc_bias.assign(M, 0.0f);
    p.pre_bias.assign(d, 0.0f);
    bytes = (p.enc_weights.size() + p.dec_weights.size()) * sizeof(float);
    const auto sae = SaeParams::create(std::move(p));
    SafetyFeatureSet fs;
    fs.sae_fingerprint = sae.fingerprint();
    detail::Rng rng(4);
    std::set<std::uint32_t> picked;
    while (picked.size() < 32) {
        picked.insert(static_cast<std::uint32_t>(rng.below(M)));
    }
    for (auto j : picked) {
        fs.features.push_back({j, rng.uniform(0.5, 2.0)});
    }
    const auto mon = MonitorConfig::weighted(fs, 1.0);
    std::vector<float> h(d);
    std::vector<double> ms;
    double sink = 0.0;
    for (int rep = 0; rep < 2000; ++rep) {
        for (auto &v : h) {
            v = static_cast<float>(rng.normal());
        }
        const auto t0 = Clock::now();
        sink += score_token(mon, sae, h).score;
        ms.push_back(seconds_since(t0) * 1e3);
    }
    std::nth_element(ms.begin(), ms.begin() + static_cast<std::ptrdiff_t>(ms.size() / 2), ms.end());
    if (sink == -1.0) {
        std::puts("");
    }
    return ms[ms.size() / 2];
}

Outcome a8()
{
    std::string why;
    std::ifstream in(fs::path(NEXTGUARD_GOLDEN_DIR) / "service_transcript.jsonl", std::ios::binary);
    std::ostringstream golden;
    golden << in.rdbuf();
    const bool golden_ok = in.good() || in.eof() ? golden.str() == testing::golden_transcript() : false;
    if (!golden_ok) {
        why += " golden transcript differs;";
    }
    const bool ooo = check_out_of_order(why);
    const bool inter = check_interleaving(why);
    const bool lock = check_lockstep(why);
    std::size_t bytes = 0;
    const double med = latency_median_ms(bytes);
    const bool fast = med < 1.0;
    return {golden_ok && ooo && inter && lock && fast, false,
            fmt::format("golden transcript {}; out-of-order {}; interleaving {}; lockstep {};{} score_token median "
                        "{:.4f} ms at d=4096 M=65536 |S|=32 ReLU (< 1 ms; {:.1f} GB of weights)",
                        golden_ok ? "identical" : "DIFFERS", ooo ? "ok" : "FAIL", inter ? "ok" : "FAIL",
                        lock ? "ok" : "FAIL", why, med, static_cast<double>(bytes) / 1e9)};
}

// ---------------------------------------------------------------------------
// A9: CLI pipeline determinism.

std::map<std::string, std::string> snapshot(const fs::path &root)
{
    std::map<std::string, std::string> files;
    for (const auto &e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) {
            files[fs::relative(e.path(), root).string()] = detail::read_file(e.path());
        }
    }
    return files;
}

bool run_pipeline(const fs::path &dir)
{
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string cli = NEXTGUARD_CLI;
    const std::string d = dir.string();
    const std::vector<std::string> cmds{
        cli + " synth --seed 9 --out " + d + "/oracle",
        cli + " calibrate --sae " + d + "/oracle/sae.ngsae --data " + d + "/oracle/calibration/manifest.jsonl --out " +
            d + "/features.json --validation " + d + "/oracle/validation/manifest.jsonl",
        cli + " eval --sae " + d + "/oracle/sae.ngsae --features " + d + "/features.json --data " + d +
            "/oracle/test/manifest.jsonl --rank_metrics smd pearson threshold_f1 --out " + d + "/report > " + d +
            "/eval_stdout.txt",
    };
    for (const auto &c : cmds) {
        if (std::system(c.c_str()) != 0) {
            return false;
        }
    }
    return true;
}

Outcome a9()
{
    const auto base = fs::temp_directory_path() / "nextguard_acceptance_a9";
    const auto t0 = Clock::now();
    if (!run_pipeline(base / "run1") || !run_pipeline(base / "run2")) {
        return {false, false, "CLI pipeline exited nonzero"};
    }
    const auto a = snapshot(base / "run1");
    const auto b = snapshot(base / "run2");
    std::size_t differ = 0;
    std::size_t bytes = 0;
    for (const auto &[name, body] : a) {
        const auto it = b.find(name);
        differ += it == b.end() || it->second != body;
        bytes += body.size();
    }
    differ += b.size() > a.size() ? b.size() - a.size() : 0;
    const bool report = a.contains("report/report.json");
    fs::remove_all(base);
    return {differ == 0 && report, false,
            fmt::format("synth -> calibrate -> eval twice with seed 9: {} files ({:.1f} MB), {} differ; {:.1f} s",
                        a.size(), static_cast<double>(bytes) / 1e6, differ, seconds_since(t0))};
}

} // namespace

int main(int argc, char **argv)
{
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"A1", a1}, {"A2", a2}, {"A3", a3}, {"A4", a4}, {"A5", a5}, {"A6", a6}, {"A7", a7}, {"A8", a8}, {"A9", a9}};
    std::set<std::string> only(argv + 1, argv + argc);
    int unexpected = 0;
    for (const auto &[name, run] : criteria) {
        if (!only.empty() && !only.contains(name)) {
            continue;
        }
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = run();
        } catch (const std::exception &e) {
            o = {false, false, std::string("exception: ") + e.what()};
        }
        std::cout << name << " " << (o.pass ? "PASS" : (o.known ? "FAIL (known)" : "FAIL")) << "  " << o.detail
                  << fmt::format("  [{:.1f} s]", seconds_since(t0)) << std::endl;
        unexpected += !o.pass && !o.known;
    }
    return unexpected == 0 ? 0 : 1;
}
