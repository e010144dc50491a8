#pragma once

#include <optional>
#include <string>
#include <vector>

#include "flatcal/linalg.hpp"

namespace flatcal {

struct PredictionRecord {
    double confidence = 0.0;
    int predicted = 0;
    int label = 0;
    Vec probs;
    std::optional<double> sharpness;  // per-sample probe, when recorded
    bool correct() const { return predicted == label; }
};

struct PredictionLog {
    std::vector<PredictionRecord> records;
    size_t size() const { return records.size(); }
    void validate(int n_classes) const;  // confidence == max prob, classes in range
};

// newline-delimited JSON, one record per line
std::string log_to_ndjson(const PredictionLog& log);
PredictionLog log_from_ndjson(const std::string& text);

struct ReliabilityBin {
    double lo = 0.0;
    double hi = 0.0;
    int count = 0;
    double mean_confidence = 0.0;
    double accuracy = 0.0;
};

struct ReliabilityBins {
    std::vector<ReliabilityBin> bins;
};

// equal-width bins over [0,1], right-closed: bin b covers (b/B, (b+1)/B]
// except bin 0 which also takes 0.
ReliabilityBins reliability(const PredictionLog& log, int n_bins);
std::string reliability_to_csv(const ReliabilityBins& bins);

double ece(const PredictionLog& log, int n_bins);
double ece_from_bins(const ReliabilityBins& bins);  // bit-exact match with ece()
double sce(const PredictionLog& log, int n_bins, int n_classes);
double mce(const PredictionLog& log, int n_bins);
double aece(const PredictionLog& log, int n_bins);  // equal-mass quantile bins
double aurc(const PredictionLog& log);
double accuracy(const PredictionLog& log);
double mean_confidence(const PredictionLog& log);

struct SharpnessGroup {
    int count = 0;
    double mean_sharpness = 0.0;
    double ece = 0.0;
};

// sort ascending by sharpness, split into n_groups equal groups (remainder
// to the last), ECE per group
std::vector<SharpnessGroup> sharpness_groups(const PredictionLog& log, int n_groups,
                                             int n_bins = 15);

}  // namespace flatcal
