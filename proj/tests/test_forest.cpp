#include <cmath>
#include <cstdio>

#include <gtest/gtest.h>

#include <nextguard/detail/random.hpp>
#include <nextguard/oracle.hpp>
#include <nextguard/starguard.hpp>

#include "support.hpp"

using namespace nextguard;
using nextguard::testing::expect_golden;
using nextguard::testing::identity_sae;

namespace {

struct Toy {
    SparseRows rows;
    std::vector<std::uint8_t> labels;
};

// Two features on a 0.01 grid; class 1 iff x0 + x1 > 1 (or x0 > 0.5 when
// `axis` is set), with a margin of 0.05 around the boundary.
Toy separable_toy(std::uint64_t seed, std::size_t n = 200, bool axis = false)
{
    detail::Rng rng(seed);
    Toy t{SparseRows(2), {}};
    while (t.labels.size() < n) {
        const float a = static_cast<float>(1 + rng.below(100)) / 100.0f;
        const float b = static_cast<float>(1 + rng.below(100)) / 100.0f;
        const double s = axis ? 2.0 * a : static_cast<double>(a) + b;
        if (std::abs(s - 1.0) < 0.05) {
            continue;
        }
        const FeatureEntry row[2] = {{0, a}, {1, b}};
        t.rows.add_row(row);
        t.labels.push_back(s > 1.0 ? 1 : 0);
    }
    return t;
}

std::vector<FeatureEntry> to_row(const std::vector<float> &dense)
{
    std::vector<FeatureEntry> r;
    for (std::uint32_t i = 0; i < dense.size(); ++i) {
        if (dense[i] != 0.0f) {
            r.push_back({i, dense[i]});
        }
    }
    return r;
}

ActivationMatrix matrix(std::size_t d, const std::vector<std::vector<float>> &rows)
{
    ActivationMatrix m;
    m.d = d;
    m.n_tokens = rows.size();
    for (const auto &r : rows) {
        m.data.insert(m.data.end(), r.begin(), r.end());
    }
    return m;
}

CalibrationSample sample(std::string id, Label label, std::size_t d, std::size_t n,
                         std::vector<std::pair<std::size_t, std::size_t>> fires)
{
    std::vector<std::vector<float>> rows(n, std::vector<float>(d, 0.0f));
    for (auto [t, j] : fires) {
        rows[t][j] = 1.0f;
    }
    CalibrationSample s;
    s.id = std::move(id);
    s.label = label;
    s.prompt_span = {0, 2};
    s.response_span = {2, n};
    s.hidden_states = matrix(d, rows);
    return s;
}

SampleFeatureSummary summary(Label label, std::vector<std::uint32_t> active, std::size_t M)
{
    SampleFeatureSummary s;
    s.label = label;
    s.pooled.dense_len = M;
    for (auto j : active) {
        s.pooled.entries.push_back({j, 1.0f});
    }
    return s;
}

} // namespace

// ---------------------------------------------------------------------------
// Forest

TEST(Forest, SeparableToyFitsPerfectly)
{
    const auto toy = separable_toy(11);
    ForestParams hp;
    hp.n_trees = 25;
    hp.min_leaf = 1;
    hp.mtry = 2;
    hp.seed = 3;
    const auto f = train_forest(toy.rows, toy.labels, hp);
    std::size_t correct = 0;
    for (std::size_t r = 0; r < toy.rows.n_rows(); ++r) {
        correct += (f.predict_proba(toy.rows.row(r)) > 0.5 ? 1 : 0) == toy.labels[r];
    }
    EXPECT_EQ(correct, toy.rows.n_rows());
}

TEST(Forest, IndependentLabelsStayNearChance)
{
    detail::Rng rng(21);
    const std::size_t n = 1000, p = 20;
    SparseRows rows(p);
    std::vector<std::uint8_t> labels;
    for (std::size_t r = 0; r < n; ++r) {
        std::vector<FeatureEntry> row;
        for (std::uint32_t j = 0; j < p; ++j) {
            if (rng.bernoulli(0.5)) {
                row.push_back({j, static_cast<float>(rng.uniform(0.1, 2.0))});
            }
        }
        rows.add_row(row);
        labels.push_back(rng.bernoulli(0.5) ? 1 : 0);
    }
    ForestParams hp;
    hp.n_trees = 50;
    hp.seed = 4;
    std::vector<double> oob;
    train_forest(rows, labels, hp, {}, {}, &oob);
    std::size_t used = 0, correct = 0, ones = 0;
    for (std::size_t r = 0; r < n; ++r) {
        ones += labels[r];
        if (!std::isnan(oob[r])) {
            ++used;
            correct += (oob[r] > 0.5 ? 1 : 0) == labels[r];
        }
    }
    const double majority = std::max(ones, n - ones) / static_cast<double>(n);
    const double acc = correct / static_cast<double>(used);
    EXPECT_GT(used, n * 9 / 10);
    EXPECT_LE(acc, 0.55);
    EXPECT_LE(std::abs(acc - majority), 0.06);
}

TEST(Forest, DuplicatedRowsGolden)
{
    // Axis-aligned classes: every tree recovers the same partition, so
    // predictions away from the boundary cannot depend on the bootstrap.
    const auto toy = separable_toy(12, 120, true);
    Toy dup{SparseRows(2), {}};
    for (std::size_t r = 0; r < toy.rows.n_rows(); ++r) {
        for (int c = 0; c < 2; ++c) {
            dup.rows.add_row(toy.rows.row(r));
            dup.labels.push_back(toy.labels[r]);
        }
    }
    ForestParams hp;
    hp.n_trees = 15;
    hp.min_leaf = 1;
    hp.mtry = 2;
    hp.seed = 9;
    const auto base = train_forest(toy.rows, toy.labels, hp);
    const auto twice = train_forest(dup.rows, dup.labels, hp);

    std::string out;
    char buf[96];
    for (int a = 5; a <= 95; a += 10) {
        for (int b = 5; b <= 95; b += 10) {
            const FeatureEntry probe[2] = {{0, a / 100.0f}, {1, b / 100.0f}};
            const double pb = base.predict_proba(probe);
            const double pd = twice.predict_proba(probe);
            // Away from the class boundary both forests are unanimous.
            if (std::abs(a - 50) >= 10) {
                EXPECT_EQ(pb, pd) << a << "," << b;
            }
            std::snprintf(buf, sizeof buf, "%d %d %.9g\n", a, b, pd);
            out += buf;
        }
    }
    expect_golden("forest_duplicated_probe.txt", out);
}

TEST(Forest, MonotoneTransformLeavesPredictionsUnchanged)
{
    detail::Rng rng(31);
    const std::size_t n = 400, p = 4;
    std::vector<std::vector<float>> raw(n, std::vector<float>(p, 0.0f));
    std::vector<std::uint8_t> labels;
    for (auto &r : raw) {
        for (auto &x : r) {
            if (rng.bernoulli(0.6)) {
                x = static_cast<float>(1 + rng.below(300)) / 100.0f;
            }
        }
        labels.push_back(r[0] + 0.5f * r[1] > 1.5f || rng.bernoulli(0.1) ? 1 : 0);
    }
    // Strictly increasing with f(0) = 0, so absent entries stay absent.
    using Fn = float (*)(float);
    const Fn transforms[] = {
        [](float x) { return x * x * x; },
        [](float x) { return 5.0f * x; },
        [](float x) { return std::sqrt(x); },
        [](float x) { return std::log1p(x); },
    };
    const auto build = [&](Fn f) {
        SparseRows rows(p);
        for (const auto &r : raw) {
            std::vector<float> t(r);
            for (auto &x : t) {
                x = f(x);
            }
            rows.add_row(to_row(t));
        }
        return rows;
    };
    ForestParams hp;
    hp.n_trees = 20;
    hp.seed = 5;
    const auto identity = build([](float x) { return x; });
    const auto ref = train_forest(identity, labels, hp);
    for (auto f : transforms) {
        const auto rows = build(f);
        const auto forest = train_forest(rows, labels, hp);
        for (std::size_t t = 0; t < hp.n_trees; ++t) {
            ASSERT_EQ(forest.trees[t].nodes.size(), ref.trees[t].nodes.size());
            for (std::size_t i = 0; i < ref.trees[t].nodes.size(); ++i) {
                const auto &a = ref.trees[t].nodes[i];
                const auto &b = forest.trees[t].nodes[i];
                EXPECT_EQ(a.feature, b.feature);
                EXPECT_EQ(a.left, b.left);
                EXPECT_EQ(a.count0, b.count0);
                EXPECT_EQ(a.count1, b.count1);
                if (!a.is_leaf()) {
                    EXPECT_EQ(f(a.threshold), b.threshold);
                }
            }
        }
        for (std::size_t r = 0; r < n; ++r) {
            EXPECT_EQ(ref.predict_proba(identity.row(r)), forest.predict_proba(rows.row(r)));
        }
    }
}

TEST(Forest, SameSeedSameBytes)
{
    const auto toy = separable_toy(13);
    ForestParams hp;
    hp.n_trees = 12;
    hp.seed = 77;
    const auto a = serialize_forest(train_forest(toy.rows, toy.labels, hp));
    const auto b = serialize_forest(train_forest(toy.rows, toy.labels, hp));
    EXPECT_EQ(a, b);
    hp.n_threads = 3;
    EXPECT_EQ(a, serialize_forest(train_forest(toy.rows, toy.labels, hp)));
    hp.seed = 78;
    EXPECT_NE(a, serialize_forest(train_forest(toy.rows, toy.labels, hp)));
}

TEST(Forest, SerializationRoundTripAndCorruption)
{
    const auto toy = separable_toy(14);
    ForestParams hp;
    hp.n_trees = 6;
    hp.seed = 1;
    const auto f = train_forest(toy.rows, toy.labels, hp, {40, 7}, "fp-abc");
    const auto bytes = serialize_forest(f);
    EXPECT_EQ(bytes.substr(0, 5), std::string("NGRF\0", 5));
    EXPECT_EQ(parse_forest(bytes), f);

    const auto dir = std::filesystem::temp_directory_path() / "nextguard_forest_test";
    std::filesystem::create_directories(dir);
    save_forest(f, dir / "f.ngrf");
    EXPECT_EQ(load_forest(dir / "f.ngrf"), f);
    std::filesystem::remove_all(dir);

    const auto code_of = [](const std::string &b) {
        try {
            parse_forest(b);
        } catch (const Error &e) {
            return e.code();
        }
        ADD_FAILURE() << "corrupt forest accepted";
        return ErrorCode::Io;
    };
    auto bad = bytes;
    bad[0] = 'X';
    EXPECT_EQ(code_of(bad), ErrorCode::Malformed);
    bad = bytes;
    bad[5] = 9;
    EXPECT_EQ(code_of(bad), ErrorCode::UnsupportedVersion);
    EXPECT_EQ(code_of(bytes.substr(0, bytes.size() - 3)), ErrorCode::Malformed);
    EXPECT_EQ(code_of(bytes + "x"), ErrorCode::Malformed);

    // Point the root's left child back at the root.
    auto cyclic = f;
    ASSERT_FALSE(cyclic.trees[0].nodes[0].is_leaf());
    cyclic.trees[0].nodes[0].left = 0;
    EXPECT_EQ(code_of(serialize_forest(cyclic)), ErrorCode::Malformed);
    auto outside = f;
    outside.trees[0].nodes[0].feature = 2;
    EXPECT_EQ(code_of(serialize_forest(outside)), ErrorCode::Malformed);
}

TEST(Forest, SingleTreeReturnsOneLeafFrequency)
{
    detail::Rng rng(41);
    SparseRows rows(3);
    std::vector<std::uint8_t> labels;
    for (int r = 0; r < 300; ++r) {
        std::vector<FeatureEntry> row;
        for (std::uint32_t j = 0; j < 3; ++j) {
            if (rng.bernoulli(0.5)) {
                row.push_back({j, static_cast<float>(rng.uniform(0.1, 1.0))});
            }
        }
        rows.add_row(row);
        labels.push_back(rng.bernoulli(row.size() > 1 ? 0.7 : 0.2) ? 1 : 0);
    }
    ForestParams hp;
    hp.n_trees = 1;
    hp.max_depth = 4;
    hp.seed = 2;
    const auto f = train_forest(rows, labels, hp);
    std::vector<double> leaves;
    for (const auto &n : f.trees[0].nodes) {
        if (n.is_leaf()) {
            leaves.push_back(n.proba());
        }
    }
    for (std::size_t r = 0; r < rows.n_rows(); ++r) {
        const double p = f.predict_proba(rows.row(r));
        EXPECT_NE(std::find(leaves.begin(), leaves.end(), p), leaves.end());
        EXPECT_EQ(p, f.trees[0].leaf_for(rows.row(r)).count1 /
                         (static_cast<double>(f.trees[0].leaf_for(rows.row(r)).count0) +
                          f.trees[0].leaf_for(rows.row(r)).count1));
    }
}

TEST(Forest, ZeroRowLearnedSafe)
{
    detail::Rng rng(51);
    SparseRows rows(8);
    std::vector<std::uint8_t> labels;
    for (int r = 0; r < 400; ++r) {
        if (r % 2 == 0) {
            rows.add_row(std::vector<FeatureEntry>{});
            labels.push_back(0);
        } else {
            const std::vector<FeatureEntry> row{{static_cast<std::uint32_t>(rng.below(8)),
                                                 static_cast<float>(rng.uniform(0.5, 2.0))}};
            rows.add_row(row);
            labels.push_back(1);
        }
    }
    ForestParams hp;
    hp.n_trees = 30;
    hp.seed = 6;
    const auto f = train_forest(rows, labels, hp);
    EXPECT_LE(f.predict_proba({}), 0.5);
}

TEST(Forest, InvalidInputs)
{
    SparseRows rows(2);
    const FeatureEntry r0[1] = {{0, 1.0f}};
    rows.add_row(r0);
    rows.add_row(r0);
    const std::vector<std::uint8_t> same{1, 1};
    try {
        train_forest(rows, same, {});
        FAIL() << "single class accepted";
    } catch (const Error &e) {
        EXPECT_EQ(e.code(), ErrorCode::InsufficientData);
    }
    const FeatureEntry unsorted[2] = {{1, 1.0f}, {0, 1.0f}};
    EXPECT_THROW(rows.add_row(unsorted), Error);
    const FeatureEntry beyond[1] = {{2, 1.0f}};
    EXPECT_THROW(rows.add_row(beyond), Error);
}

// ---------------------------------------------------------------------------
// Pseudo-labels and pool selection

TEST(PseudoLabels, SafeSampleIsGatedOff)
{
    const auto sae = identity_sae(6);
    const auto s = sample("s", Label::Safe, 6, 12, {{3, 1}, {4, 1}, {9, 1}});
    const std::vector<std::uint32_t> lab{1};
    for (const auto &p : generate_pseudo_labels(std::span(&s, 1), sae, lab)) {
        EXPECT_EQ(p.label, 0);
    }
}

TEST(PseudoLabels, UnsafeTokensWhereLabelingFeatureFires)
{
    const auto sae = identity_sae(6);
    const auto s = sample("u", Label::Unsafe, 6, 12, {{4, 2}, {9, 2}, {6, 5}});
    const std::vector<std::uint32_t> lab{2, 3};
    const auto labels = generate_pseudo_labels(std::span(&s, 1), sae, lab);
    ASSERT_EQ(labels.size(), 12u);
    for (const auto &p : labels) {
        EXPECT_EQ(p.sample_id, "u");
        EXPECT_EQ(p.label, p.token_index == 4 || p.token_index == 9 ? 1 : 0) << p.token_index;
    }
}

TEST(PseudoLabels, PromptTokensAndSilentSamplesStayZero)
{
    const auto sae = identity_sae(6);
    const std::vector<CalibrationSample> ss{sample("a", Label::Unsafe, 6, 10, {{1, 2}}),
                                            sample("b", Label::Unsafe, 6, 10, {{5, 4}})};
    const std::vector<std::uint32_t> lab{2};
    for (const auto &p : generate_pseudo_labels(ss, sae, lab)) {
        EXPECT_EQ(p.label, 0);
    }
}

TEST(PseudoLabels, SoundOnOracleData)
{
    OracleSpec spec;
    spec.n_safe = 60;
    spec.n_unsafe = 60;
    spec.decoy_rate = 0.2;
    const auto o = build_oracle(spec);
    const auto ds = generate_calibration_set(o);
    const auto labels = generate_pseudo_labels(ds.samples, o.sae, o.truth.planted);
    std::map<std::string, Label> by_id;
    std::size_t total = 0;
    for (const auto &s : ds.samples) {
        by_id[s.id] = s.label;
        total += s.n_tokens();
    }
    ASSERT_EQ(labels.size(), total);
    std::size_t positives = 0;
    for (const auto &p : labels) {
        if (p.label == 1) {
            ++positives;
            EXPECT_EQ(by_id.at(p.sample_id), Label::Unsafe) << p.sample_id;
        }
    }
    EXPECT_GT(positives, 0u);
}

TEST(PoolSelection, OraclePlantedTrioIsTheLabelingSet)
{
    OracleSpec spec;
    spec.n_planted = 3;
    spec.n_categories = 3;
    const auto o = build_oracle(spec);
    const auto ds = generate_calibration_set(o);
    const auto summaries = aggregate_samples(ds.samples, o.sae, MaskPolicy::ScoreResponseOnly);
    const auto sel = select_labeling_and_pool(PooledColumns(summaries, spec.M), {3, 64});
    auto lab = sel.labeling;
    std::sort(lab.begin(), lab.end());
    auto planted = o.truth.planted;
    std::sort(planted.begin(), planted.end());
    EXPECT_EQ(lab, planted);
    EXPECT_EQ(sel.pool.size(), 64u);
    EXPECT_TRUE(std::equal(sel.labeling.begin(), sel.labeling.end(), sel.pool.begin()));
}

TEST(PoolSelection, BoundaryAndConstantFeature)
{
    const std::size_t M = 4;
    std::vector<SampleFeatureSummary> ss;
    for (int i = 0; i < 10; ++i) {
        const bool unsafe = i < 4;
        std::vector<std::uint32_t> active{0};
        if (unsafe) {
            active.push_back(1);
        }
        ss.push_back(summary(unsafe ? Label::Unsafe : Label::Safe, active, M));
    }
    const PooledColumns cols(ss, M);
    const auto sel = select_labeling_and_pool(cols, {M, M});
    const double P = 0.4;
    EXPECT_NEAR(sel.f1[0], 2 * P / (P + 1), 1e-12);
    EXPECT_EQ(sel.f1[1], 1.0);
    EXPECT_EQ(sel.f1[2], 0.0);
    EXPECT_EQ(sel.pool, (std::vector<std::uint32_t>{1, 0, 2, 3}));
    EXPECT_EQ(sel.labeling, sel.pool);

    try {
        select_labeling_and_pool(cols, {3, M + 1});
        FAIL() << "oversized pool accepted";
    } catch (const Error &e) {
        EXPECT_EQ(e.code(), ErrorCode::InvalidArgument);
        EXPECT_NE(std::string(e.what()).find("exceeds dictionary size"), std::string::npos);
    }
}

TEST(StarGuard, TrainsAndScoresCausally)
{
    OracleSpec spec;
    spec.n_safe = 60;
    spec.n_unsafe = 60;
    const auto o = build_oracle(spec);
    const auto ds = generate_calibration_set(o);
    ForestParams hp;
    hp.n_trees = 20;
    hp.seed = 8;
    LabelingSelection sel;
    const auto forest = train_starguard(ds.samples, o.sae, {3, 128}, hp, &sel);
    EXPECT_EQ(forest.pool, sel.pool);
    EXPECT_EQ(forest.sae_fingerprint, o.sae.fingerprint());

    const auto unsafe = generate_stream_session(o, true, 0);
    ASSERT_TRUE(unsafe.onset);
    EXPECT_GT(forest_score_token(forest, o.sae, unsafe.hidden_states.row(*unsafe.onset)), 0.5);
    EXPECT_LT(forest_score_token(forest, o.sae, unsafe.hidden_states.row(0)), 0.5);

    const auto cfg = forest_monitor(forest, 0.5, MaskPolicy::ScoreContentOnly, Decision::FlagOnly);
    auto full = open_session("full");
    std::vector<RiskEvent> all;
    for (std::size_t t = 0; t < unsafe.n_tokens(); ++t) {
        all.push_back(feed(full, cfg, o.sae, unsafe.hidden_states.row(t), unsafe.role(t)));
    }
    EXPECT_TRUE(full.triggered_at.has_value());
    for (std::size_t cut = 1; cut <= unsafe.n_tokens(); cut += 5) {
        auto part = open_session("part");
        for (std::size_t t = 0; t < cut; ++t) {
            const auto ev = feed(part, cfg, o.sae, unsafe.hidden_states.row(t), unsafe.role(t));
            EXPECT_EQ(ev.score, all[t].score);
            EXPECT_EQ(ev.triggered, all[t].triggered);
        }
    }

    OracleSpec other = spec;
    other.seed = spec.seed + 1;
    const auto o2 = build_oracle(other);
    try {
        forest_score_token(forest, o2.sae, unsafe.hidden_states.row(0));
        FAIL() << "fingerprint mismatch accepted";
    } catch (const Error &e) {
        EXPECT_EQ(e.code(), ErrorCode::FingerprintMismatch);
    }
}
