#pragma once

#include <string>
#include <vector>

#include "flatcal/linalg.hpp"
#include "flatcal/rng.hpp"

namespace flatcal {

enum class Surrogate { disp, orth };

Surrogate surrogate_from_string(const std::string& s);
std::string to_string(Surrogate s);

// Closed-form constants of the small-logit entropy expansion
// E[H] = alpha * L_reg + beta + O(D^{-3/2}).
struct ExpansionConstants {
    double alpha = 0.0;
    double beta = 0.0;
    Surrogate reg = Surrogate::disp;
    int n_classes = 0;
    int feature_dim = 0;
};

ExpansionConstants constants(Surrogate reg, int n_classes, int feature_dim);

struct McEstimate {
    double estimate = 0.0;
    double stderr_ = 0.0;
    int n_samples = 0;
};

// Mean entropy of softmax(T v / tau) over v ~ Unif(S^{D-1}). Per-draw RNG
// substreams + pairwise summation: result is independent of n_jobs.
McEstimate expected_entropy_mc(const Mat& text_features, double tau, int n_samples, Rng& rng,
                               int n_jobs = 1);

struct Theorem1Row {
    int feature_dim = 0;
    double lambda_mix = 0.0;
    double s_stat = 0.0;
    double l_reg = 0.0;
    double h_mc = 0.0;
    double h_stderr = 0.0;
    double predicted = 0.0;
    double residual = 0.0;
};

struct Theorem1Report {
    Surrogate reg = Surrogate::disp;
    int n_classes = 0;
    std::vector<int> d_list;
    int family_size = 0;
    int n_mc = 0;
    std::vector<Theorem1Row> rows;
    std::vector<double> max_residual;      // per D, max |H_mc - (alpha L_reg + beta)|
    std::vector<double> rank_correlation;  // per D, Spearman over the family
    double exponent = 0.0;                 // log-log least-squares slope of max_residual vs D
    bool inconclusive = false;             // MC noise drowns the residual
    long long suggested_n_mc = 0;
};

// One-parameter family t_k = normalize(sqrt(l) u + sqrt(1-l) e_k) with shared
// u orthogonal to the basis vectors; sweeps the dispersion statistic.
Mat theorem_family_member(int n_classes, int feature_dim, double lambda_mix, const Vec& u_tail);

Theorem1Report verify_theorem1(Surrogate reg, int n_classes, const std::vector<int>& d_list,
                               int family_size, int n_mc, Rng& rng, int n_jobs = 1);

double spearman(const std::vector<double>& x, const std::vector<double>& y);

std::string to_json(const Theorem1Report& report);
std::string to_csv(const Theorem1Report& report);

}  // namespace flatcal
