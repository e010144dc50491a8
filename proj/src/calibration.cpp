#include "flatcal/calibration.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace flatcal {

namespace {

void require_nonempty(const PredictionLog& log, const char* who) {
    if (log.records.empty()) throw std::invalid_argument(std::string(who) + ": empty log");
}

void require_bins(int n_bins, const char* who) {
    if (n_bins < 1) throw std::invalid_argument(std::string(who) + ": n_bins must be >= 1");
}

// equal-width right-closed bins: (b/B, (b+1)/B], bin 0 also takes 0
int width_bin(double conf, int n_bins) {
    int b = static_cast<int>(std::ceil(conf * n_bins)) - 1;
    return std::clamp(b, 0, n_bins - 1);
}

}  // namespace

void PredictionLog::validate(int n_classes) const {
    for (const auto& r : records) {
        if (r.predicted < 0 || r.predicted >= n_classes || r.label < 0 || r.label >= n_classes)
            throw std::invalid_argument("PredictionLog: class out of range");
        if (static_cast<int>(r.probs.size()) != n_classes)
            throw std::invalid_argument("PredictionLog: probability vector size mismatch");
        const double mx = *std::max_element(r.probs.begin(), r.probs.end());
        if (std::fabs(r.confidence - mx) > 1e-9)
            throw std::invalid_argument("PredictionLog: confidence != max probability");
    }
}

std::string log_to_ndjson(const PredictionLog& log) {
    std::ostringstream out;
    for (const auto& r : log.records) {
        nlohmann::json j = {{"confidence", r.confidence},
                            {"predicted", r.predicted},
                            {"label", r.label},
                            {"probs", r.probs}};
        if (r.sharpness) j["sharpness"] = *r.sharpness;
        out << j.dump() << '\n';
    }
    return out.str();
}

PredictionLog log_from_ndjson(const std::string& text) {
    PredictionLog log;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        PredictionRecord r;
        r.confidence = j.at("confidence").get<double>();
        r.predicted = j.at("predicted").get<int>();
        r.label = j.at("label").get<int>();
        r.probs = j.at("probs").get<Vec>();
        if (j.contains("sharpness")) r.sharpness = j.at("sharpness").get<double>();
        log.records.push_back(std::move(r));
    }
    return log;
}

ReliabilityBins reliability(const PredictionLog& log, int n_bins) {
    require_nonempty(log, "reliability");
    require_bins(n_bins, "reliability");
    ReliabilityBins out;
    out.bins.resize(static_cast<size_t>(n_bins));
    for (int b = 0; b < n_bins; ++b) {
        out.bins[static_cast<size_t>(b)].lo = static_cast<double>(b) / n_bins;
        out.bins[static_cast<size_t>(b)].hi = static_cast<double>(b + 1) / n_bins;
    }
    for (const auto& r : log.records) {
        auto& bin = out.bins[static_cast<size_t>(width_bin(r.confidence, n_bins))];
        bin.count += 1;
        bin.mean_confidence += r.confidence;
        bin.accuracy += r.correct() ? 1.0 : 0.0;
    }
    for (auto& bin : out.bins) {
        if (bin.count > 0) {
            bin.mean_confidence /= bin.count;
            bin.accuracy /= bin.count;
        }
    }
    return out;
}

std::string reliability_to_csv(const ReliabilityBins& bins) {
    std::ostringstream out;
    out.precision(17);
    out << "schema_version,flatcal.reliability.csv.v1\n";
    out << "bin_low,bin_high,count,conf,acc\n";
    for (const auto& b : bins.bins)
        out << b.lo << ',' << b.hi << ',' << b.count << ',' << b.mean_confidence << ','
            << b.accuracy << '\n';
    return out.str();
}

double ece_from_bins(const ReliabilityBins& bins) {
    long long total = 0;
    for (const auto& b : bins.bins) total += b.count;
    double e = 0.0;
    for (const auto& b : bins.bins)
        if (b.count > 0)
            e += (static_cast<double>(b.count) / total) * std::fabs(b.accuracy - b.mean_confidence);
    return e;
}

double ece(const PredictionLog& log, int n_bins) {
    return ece_from_bins(reliability(log, n_bins));
}

double mce(const PredictionLog& log, int n_bins) {
    ReliabilityBins bins = reliability(log, n_bins);
    double worst = 0.0;
    for (const auto& b : bins.bins)
        if (b.count > 0) worst = std::max(worst, std::fabs(b.accuracy - b.mean_confidence));
    return worst;
}

double sce(const PredictionLog& log, int n_bins, int n_classes) {
    require_nonempty(log, "sce");
    require_bins(n_bins, "sce");
    if (n_classes < 2) throw std::invalid_argument("sce: n_classes must be >= 2");
    const double m = static_cast<double>(log.size());
    double total = 0.0;
    std::vector<int> count(static_cast<size_t>(n_bins));
    std::vector<double> conf(static_cast<size_t>(n_bins)), hits(static_cast<size_t>(n_bins));
    for (int k = 0; k < n_classes; ++k) {
        std::fill(count.begin(), count.end(), 0);
        std::fill(conf.begin(), conf.end(), 0.0);
        std::fill(hits.begin(), hits.end(), 0.0);
        for (const auto& r : log.records) {
            if (static_cast<int>(r.probs.size()) <= k)
                throw std::invalid_argument("sce: probability vector too short");
            const double p = r.probs[static_cast<size_t>(k)];
            const int b = width_bin(p, n_bins);
            count[static_cast<size_t>(b)] += 1;
            conf[static_cast<size_t>(b)] += p;
            hits[static_cast<size_t>(b)] += r.label == k ? 1.0 : 0.0;
        }
        for (int b = 0; b < n_bins; ++b) {
            const auto bb = static_cast<size_t>(b);
            if (count[bb] == 0) continue;
            total += (count[bb] / m) * std::fabs(hits[bb] / count[bb] - conf[bb] / count[bb]);
        }
    }
    return total / n_classes;
}

double aece(const PredictionLog& log, int n_bins) {
    require_nonempty(log, "aece");
    require_bins(n_bins, "aece");
    const size_t m = log.size();
    std::vector<size_t> idx(m);
    std::iota(idx.begin(), idx.end(), 0u);
    std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
        return log.records[a].confidence < log.records[b].confidence;
    });
    // equal-mass bins by rank; ties pulled down to the lowest bin of the tie run
    std::vector<int> bin_of(m);
    size_t i = 0;
    while (i < m) {
        size_t j = i;
        while (j + 1 < m &&
               log.records[idx[j + 1]].confidence == log.records[idx[i]].confidence)
            ++j;
        const int b = static_cast<int>(i * static_cast<size_t>(n_bins) / m);
        for (size_t k = i; k <= j; ++k) bin_of[idx[k]] = b;
        i = j + 1;
    }
    std::vector<int> count(static_cast<size_t>(n_bins));
    std::vector<double> conf(static_cast<size_t>(n_bins)), hits(static_cast<size_t>(n_bins));
    for (size_t s = 0; s < m; ++s) {
        const auto b = static_cast<size_t>(bin_of[s]);
        count[b] += 1;
        conf[b] += log.records[s].confidence;
        hits[b] += log.records[s].correct() ? 1.0 : 0.0;
    }
    double e = 0.0;
    for (int b = 0; b < n_bins; ++b) {
        const auto bb = static_cast<size_t>(b);
        if (count[bb] == 0) continue;
        e += (static_cast<double>(count[bb]) / m) *
             std::fabs(hits[bb] / count[bb] - conf[bb] / count[bb]);
    }
    return e;
}

double aurc(const PredictionLog& log) {
    require_nonempty(log, "aurc");
    const size_t m = log.size();
    std::vector<size_t> idx(m);
    std::iota(idx.begin(), idx.end(), 0u);
    std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
        return log.records[a].confidence > log.records[b].confidence;
    });
    double errors = 0.0, area = 0.0;
    for (size_t i = 0; i < m; ++i) {
        errors += log.records[idx[i]].correct() ? 0.0 : 1.0;
        area += errors / static_cast<double>(i + 1);
    }
    return area / static_cast<double>(m);
}

double accuracy(const PredictionLog& log) {
    require_nonempty(log, "accuracy");
    double hits = 0.0;
    for (const auto& r : log.records) hits += r.correct() ? 1.0 : 0.0;
    return hits / static_cast<double>(log.size());
}

double mean_confidence(const PredictionLog& log) {
    require_nonempty(log, "mean_confidence");
    double s = 0.0;
    for (const auto& r : log.records) s += r.confidence;
    return s / static_cast<double>(log.size());
}

std::vector<SharpnessGroup> sharpness_groups(const PredictionLog& log, int n_groups, int n_bins) {
    require_nonempty(log, "sharpness_groups");
    if (n_groups < 1) throw std::invalid_argument("sharpness_groups: n_groups must be >= 1");
    if (log.size() < static_cast<size_t>(n_groups))
        throw std::invalid_argument("sharpness_groups: fewer records than groups");
    for (const auto& r : log.records)
        if (!r.sharpness)
            throw std::invalid_argument("sharpness_groups: record without sharpness");
    std::vector<size_t> idx(log.size());
    std::iota(idx.begin(), idx.end(), 0u);
    std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
        return *log.records[a].sharpness < *log.records[b].sharpness;
    });
    const size_t base = log.size() / static_cast<size_t>(n_groups);
    std::vector<SharpnessGroup> out;
    size_t pos = 0;
    for (int g = 0; g < n_groups; ++g) {
        const size_t take = g == n_groups - 1 ? log.size() - pos : base;
        PredictionLog part;
        SharpnessGroup grp;
        for (size_t i = 0; i < take; ++i) {
            const auto& r = log.records[idx[pos + i]];
            part.records.push_back(r);
            grp.mean_sharpness += *r.sharpness;
        }
        pos += take;
        grp.count = static_cast<int>(take);
        grp.mean_sharpness /= static_cast<double>(take);
        grp.ece = ece(part, n_bins);
        out.push_back(grp);
    }
    return out;
}

}  // namespace flatcal
