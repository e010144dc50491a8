#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "flatcal/calibration.hpp"
#include "flatcal/rng.hpp"

using namespace flatcal;

namespace {

PredictionRecord rec(double conf, int predicted, int label, int k) {
    PredictionRecord r;
    r.confidence = conf;
    r.predicted = predicted;
    r.label = label;
    r.probs.assign(static_cast<size_t>(k), (1.0 - conf) / (k - 1));
    r.probs[static_cast<size_t>(predicted)] = conf;
    return r;
}

PredictionLog random_log(uint64_t seed, int n, int k) {
    Rng rng(seed);
    PredictionLog log;
    for (int i = 0; i < n; ++i) {
        Vec z = rng.gaussian_vec(k);
        double mx = *std::max_element(z.begin(), z.end());
        double denom = 0.0;
        for (double& v : z) {
            v = std::exp(v - mx);
            denom += v;
        }
        PredictionRecord r;
        r.probs.resize(static_cast<size_t>(k));
        for (int j = 0; j < k; ++j) r.probs[static_cast<size_t>(j)] = z[static_cast<size_t>(j)] / denom;
        r.predicted = static_cast<int>(
            std::max_element(r.probs.begin(), r.probs.end()) - r.probs.begin());
        r.confidence = r.probs[static_cast<size_t>(r.predicted)];
        r.label = static_cast<int>(rng.below(k));
        log.records.push_back(r);
    }
    return log;
}

// independent per-class binning oracle
double sce_oracle(const PredictionLog& log, int b, int k) {
    double total = 0.0;
    const double m = static_cast<double>(log.size());
    for (int cls = 0; cls < k; ++cls) {
        for (int bin = 0; bin < b; ++bin) {
            double conf_sum = 0.0, acc_sum = 0.0;
            int count = 0;
            for (const auto& r : log.records) {
                const double p = r.probs[static_cast<size_t>(cls)];
                int wb = static_cast<int>(std::ceil(p * b)) - 1;
                wb = std::clamp(wb, 0, b - 1);
                if (wb != bin) continue;
                ++count;
                conf_sum += p;
                acc_sum += r.label == cls ? 1.0 : 0.0;
            }
            if (count > 0) total += (count / m) * std::fabs(acc_sum / count - conf_sum / count);
        }
    }
    return total / k;
}

}  // namespace

TEST_CASE("ece: hand-computed oracles") {
    PredictionLog log;
    log.records.push_back(rec(0.9, 0, 0, 10));  // correct
    log.records.push_back(rec(0.9, 1, 2, 10));  // wrong
    CHECK(ece(log, 15) == doctest::Approx(0.4).epsilon(1e-12));

    // perfectly calibrated within one bin: conf 0.75, 3 of 4 correct
    PredictionLog cal;
    cal.records.push_back(rec(0.75, 0, 0, 4));
    cal.records.push_back(rec(0.75, 0, 0, 4));
    cal.records.push_back(rec(0.75, 0, 0, 4));
    cal.records.push_back(rec(0.75, 0, 1, 4));
    CHECK(ece(cal, 4) == doctest::Approx(0.0).epsilon(1e-12));

    CHECK_THROWS_AS(ece(log, 0), std::invalid_argument);
    CHECK_THROWS_AS(ece(PredictionLog{}, 15), std::invalid_argument);
}

TEST_CASE("reliability: bin placement and bit-exact ece_from_bins") {
    PredictionLog log;
    log.records.push_back(rec(0.55, 1, 1, 4));
    ReliabilityBins bins = reliability(log, 10);
    REQUIRE(bins.bins.size() == 10);
    CHECK(bins.bins[5].count == 1);  // 0.55 lands in (0.5, 0.6]
    CHECK(bins.bins[5].mean_confidence == 0.55);
    CHECK(bins.bins[5].accuracy == 1.0);
    for (int b = 0; b < 10; ++b)
        if (b != 5) CHECK(bins.bins[static_cast<size_t>(b)].count == 0);

    // boundary: conf exactly 0.5 is right-closed into bin 4, not 5
    PredictionLog edge;
    edge.records.push_back(rec(0.5, 0, 0, 2));
    ReliabilityBins eb = reliability(edge, 10);
    CHECK(eb.bins[4].count == 1);

    PredictionLog big = random_log(21, 500, 6);
    CHECK(ece_from_bins(reliability(big, 15)) == ece(big, 15));

    const std::string csv = reliability_to_csv(reliability(big, 15));
    CHECK(csv.find("schema_version,flatcal.reliability.csv.v1") != std::string::npos);
    CHECK(csv.find("bin_low,bin_high,count,conf,acc") != std::string::npos);
}

TEST_CASE("sce: closed-form cases and brute-force oracle") {
    // K=2, every record is (0.5, 0.5) with balanced labels
    PredictionLog half;
    for (int i = 0; i < 4; ++i) half.records.push_back(rec(0.5, 0, i % 2, 2));
    CHECK(sce(half, 15, 2) == doctest::Approx(0.0).epsilon(1e-12));

    // one-hot and always correct
    PredictionLog hot;
    for (int i = 0; i < 3; ++i) {
        PredictionRecord r;
        r.confidence = 1.0;
        r.predicted = i % 2;
        r.label = i % 2;
        r.probs = {0.0, 0.0};
        r.probs[static_cast<size_t>(i % 2)] = 1.0;
        hot.records.push_back(r);
    }
    CHECK(sce(hot, 15, 2) == doctest::Approx(0.0).epsilon(1e-12));

    PredictionLog rand5 = random_log(7, 5, 3);
    CHECK(sce(rand5, 2, 3) == doctest::Approx(sce_oracle(rand5, 2, 3)).epsilon(1e-12));
    PredictionLog rand200 = random_log(8, 200, 4);
    CHECK(sce(rand200, 15, 4) ==
          doctest::Approx(sce_oracle(rand200, 15, 4)).epsilon(1e-12));
}

TEST_CASE("mce dominates ece") {
    PredictionLog log;
    log.records.push_back(rec(0.9, 0, 0, 10));
    log.records.push_back(rec(0.9, 1, 2, 10));
    log.records.push_back(rec(0.2, 3, 3, 10));
    CHECK(mce(log, 15) == doctest::Approx(0.8).epsilon(1e-12));  // the 0.2-correct bin
    for (uint64_t s = 1; s <= 5; ++s) {
        PredictionLog r = random_log(s, 300, 5);
        CHECK(mce(r, 15) >= ece(r, 15) - 1e-15);
    }
}

TEST_CASE("aece: equal-mass bins with ties pulled together") {
    // B=1 degenerates to |acc - mean confidence|
    PredictionLog log = random_log(9, 100, 4);
    CHECK(aece(log, 1) ==
          doctest::Approx(std::fabs(accuracy(log) - mean_confidence(log))).epsilon(1e-12));

    // all-equal confidences collapse to a single bin at any B
    PredictionLog tie;
    for (int i = 0; i < 6; ++i) tie.records.push_back(rec(0.7, 0, i < 4 ? 0 : 1, 4));
    const double expect = std::fabs(4.0 / 6.0 - 0.7);
    CHECK(aece(tie, 3) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(aece(tie, 6) == doctest::Approx(expect).epsilon(1e-12));

    // two equal-mass bins, hand computed
    PredictionLog two;
    two.records.push_back(rec(0.6, 0, 0, 4));
    two.records.push_back(rec(0.7, 0, 1, 4));
    two.records.push_back(rec(0.8, 0, 0, 4));
    two.records.push_back(rec(0.9, 0, 0, 4));
    // bins {0.6, 0.7} acc 0.5 conf 0.65, {0.8, 0.9} acc 1.0 conf 0.85
    CHECK(aece(two, 2) == doctest::Approx(0.5 * 0.15 + 0.5 * 0.15).epsilon(1e-12));
}

TEST_CASE("aurc: hand case and degenerate logs") {
    PredictionLog log;
    log.records.push_back(rec(0.9, 0, 0, 4));   // correct
    log.records.push_back(rec(0.8, 0, 0, 4));   // correct
    log.records.push_back(rec(0.7, 0, 1, 4));   // wrong
    log.records.push_back(rec(0.6, 0, 0, 4));   // correct
    CHECK(aurc(log) == doctest::Approx(7.0 / 48.0).epsilon(1e-12));

    PredictionLog allright;
    for (int i = 0; i < 5; ++i) allright.records.push_back(rec(0.5, 0, 0, 4));
    CHECK(aurc(allright) == doctest::Approx(0.0).epsilon(1e-12));
    PredictionLog allwrong;
    for (int i = 0; i < 5; ++i) allwrong.records.push_back(rec(0.5, 0, 1, 4));
    CHECK(aurc(allwrong) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("metrics are permutation invariant") {
    PredictionLog log = random_log(10, 250, 5);
    PredictionLog shuffled = log;
    std::mt19937 g(1234);
    std::shuffle(shuffled.records.begin(), shuffled.records.end(), g);
    CHECK(ece(shuffled, 15) == doctest::Approx(ece(log, 15)).epsilon(1e-12));
    CHECK(sce(shuffled, 15, 5) == doctest::Approx(sce(log, 15, 5)).epsilon(1e-12));
    CHECK(mce(shuffled, 15) == doctest::Approx(mce(log, 15)).epsilon(1e-12));
    CHECK(aece(shuffled, 10) == doctest::Approx(aece(log, 10)).epsilon(1e-12));
    CHECK(aurc(shuffled) == doctest::Approx(aurc(log)).epsilon(1e-12));
}

TEST_CASE("sharpness_groups: sizes, ordering and error cases") {
    PredictionLog log;
    for (int i = 0; i < 9; ++i) {
        PredictionRecord r = rec(0.6 + 0.04 * i, 0, i % 2, 4);
        r.sharpness = 0.01 * (8 - i);
        log.records.push_back(r);
    }
    std::vector<SharpnessGroup> g = sharpness_groups(log, 3);
    REQUIRE(g.size() == 3);
    for (const auto& grp : g) CHECK(grp.count == 3);
    CHECK(g[0].mean_sharpness < g[1].mean_sharpness);
    CHECK(g[1].mean_sharpness < g[2].mean_sharpness);

    PredictionRecord extra = rec(0.99, 0, 0, 4);
    extra.sharpness = 1.0;
    log.records.push_back(extra);
    std::vector<SharpnessGroup> g10 = sharpness_groups(log, 3);
    CHECK(g10[0].count == 3);
    CHECK(g10[1].count == 3);
    CHECK(g10[2].count == 4);

    CHECK_THROWS_AS(sharpness_groups(PredictionLog{}, 3), std::invalid_argument);
    PredictionLog two;
    two.records.push_back(log.records[0]);
    two.records.push_back(log.records[1]);
    CHECK_THROWS_AS(sharpness_groups(two, 3), std::invalid_argument);
    PredictionLog bare;
    bare.records.push_back(rec(0.7, 0, 0, 4));  // no sharpness recorded
    bare.records.push_back(rec(0.8, 0, 0, 4));
    bare.records.push_back(rec(0.9, 0, 0, 4));
    CHECK_THROWS_AS(sharpness_groups(bare, 3), std::invalid_argument);
}

TEST_CASE("ndjson roundtrip preserves records exactly") {
    PredictionLog log = random_log(12, 40, 3);
    log.records[5].sharpness = 0.0123456789;
    log.records[17].sharpness = -2.5e-7;
    PredictionLog back = log_from_ndjson(log_to_ndjson(log));
    REQUIRE(back.size() == log.size());
    for (size_t i = 0; i < log.size(); ++i) {
        const auto& a = log.records[i];
        const auto& b = back.records[i];
        CHECK(a.confidence == b.confidence);
        CHECK(a.predicted == b.predicted);
        CHECK(a.label == b.label);
        REQUIRE(a.probs.size() == b.probs.size());
        for (size_t j = 0; j < a.probs.size(); ++j) CHECK(a.probs[j] == b.probs[j]);
        CHECK(a.sharpness.has_value() == b.sharpness.has_value());
        if (a.sharpness) CHECK(*a.sharpness == *b.sharpness);
    }
}

TEST_CASE("validate rejects malformed logs") {
    PredictionLog ok = random_log(13, 10, 4);
    CHECK_NOTHROW(ok.validate(4));

    PredictionLog bad_conf = ok;
    bad_conf.records[0].confidence += 0.01;
    CHECK_THROWS_AS(bad_conf.validate(4), std::invalid_argument);

    PredictionLog bad_label = ok;
    bad_label.records[1].label = 4;
    CHECK_THROWS_AS(bad_label.validate(4), std::invalid_argument);

    PredictionLog bad_pred = ok;
    bad_pred.records[2].predicted = -1;
    CHECK_THROWS_AS(bad_pred.validate(4), std::invalid_argument);

    PredictionLog bad_probs = ok;
    bad_probs.records[3].probs.pop_back();
    CHECK_THROWS_AS(bad_probs.validate(4), std::invalid_argument);
}
