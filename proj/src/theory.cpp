#include "flatcal/theory.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "flatcal/losses.hpp"

namespace flatcal {

Surrogate surrogate_from_string(const std::string& s) {
    if (s == "disp") return Surrogate::disp;
    if (s == "orth") return Surrogate::orth;
    throw std::invalid_argument("unknown surrogate tag: " + s);
}

std::string to_string(Surrogate s) {
    return s == Surrogate::disp ? "disp" : "orth";
}

ExpansionConstants constants(Surrogate reg, int n_classes, int feature_dim) {
    if (n_classes < 2) throw std::invalid_argument("constants: K must be >= 2");
    if (feature_dim < 2) throw std::invalid_argument("constants: D must be >= 2");
    const double K = n_classes, D = feature_dim;
    ExpansionConstants c;
    c.reg = reg;
    c.n_classes = n_classes;
    c.feature_dim = feature_dim;
    if (reg == Surrogate::disp) {
        c.alpha = 1.0 / (2.0 * K * D);
        c.beta = std::log(K);
    } else {
        c.alpha = 1.0 / (K * K * D);
        c.beta = std::log(K) - (K - 1.0) / (2.0 * K * D);
    }
    return c;
}

namespace {

// order-stable pairwise summation
double pairwise_sum(const double* x, size_t n) {
    if (n <= 8) {
        double s = 0.0;
        for (size_t i = 0; i < n; ++i) s += x[i];
        return s;
    }
    const size_t h = n / 2;
    return pairwise_sum(x, h) + pairwise_sum(x + h, n - h);
}

double entropy_softmax(const Vec& logits, double tau) {
    // H = lse - dot(p, s) with s = logits / tau, stable via max shift
    const size_t k = logits.size();
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double z = 0.0, ps = 0.0;
    for (size_t i = 0; i < k; ++i) {
        const double e = std::exp((logits[i] - mx) / tau);
        z += e;
        ps += e * (logits[i] - mx) / tau;
    }
    return std::log(z) - ps / z;
}

}  // namespace

McEstimate expected_entropy_mc(const Mat& text_features, double tau, int n_samples, Rng& rng,
                               int n_jobs) {
    if (n_samples < 1000) throw std::invalid_argument("expected_entropy_mc: n_samples >= 1000");
    if (tau <= 0.0) throw std::invalid_argument("expected_entropy_mc: tau must be > 0");
    const int K = text_features.rows, D = text_features.cols;
    std::vector<double> h(static_cast<size_t>(n_samples));

    auto worker = [&](int lo, int hi) {
        Vec logits(static_cast<size_t>(K));
        for (int i = lo; i < hi; ++i) {
            Rng draw = rng.substream(static_cast<uint64_t>(i));
            Vec v = sphere_uniform(draw, D);
            for (int k = 0; k < K; ++k) {
                double s = 0.0;
                for (int d = 0; d < D; ++d) s += text_features(k, d) * v[d];
                logits[static_cast<size_t>(k)] = s;
            }
            h[static_cast<size_t>(i)] = entropy_softmax(logits, tau);
        }
    };

    n_jobs = std::max(1, n_jobs);
    if (n_jobs == 1) {
        worker(0, n_samples);
    } else {
        std::vector<std::thread> pool;
        const int chunk = (n_samples + n_jobs - 1) / n_jobs;
        for (int j = 0; j < n_jobs; ++j) {
            const int lo = j * chunk, hi = std::min(n_samples, lo + chunk);
            if (lo >= hi) break;
            pool.emplace_back(worker, lo, hi);
        }
        for (auto& t : pool) t.join();
    }

    McEstimate e;
    e.n_samples = n_samples;
    e.estimate = pairwise_sum(h.data(), h.size()) / n_samples;
    std::vector<double> sq(h.size());
    for (size_t i = 0; i < h.size(); ++i) {
        const double d = h[i] - e.estimate;
        sq[i] = d * d;
    }
    const double var = pairwise_sum(sq.data(), sq.size()) / (n_samples - 1);
    e.stderr_ = std::sqrt(var / n_samples);
    return e;
}

Mat theorem_family_member(int n_classes, int feature_dim, double lambda_mix, const Vec& u_tail) {
    if (feature_dim <= n_classes)
        throw std::invalid_argument("theorem_family_member: need D > K");
    if (lambda_mix < 0.0 || lambda_mix > 1.0)
        throw std::invalid_argument("theorem_family_member: lambda_mix in [0,1]");
    if (static_cast<int>(u_tail.size()) != feature_dim - n_classes)
        throw std::invalid_argument("theorem_family_member: u_tail size mismatch");
    Mat t = Mat::zeros(n_classes, feature_dim);
    const double a = std::sqrt(lambda_mix), b = std::sqrt(1.0 - lambda_mix);
    for (int k = 0; k < n_classes; ++k) {
        t(k, k) = b;
        for (int d = n_classes; d < feature_dim; ++d)
            t(k, d) = a * u_tail[static_cast<size_t>(d - n_classes)];
    }
    return t;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2)
        throw std::invalid_argument("spearman: need two equal-length series, n >= 2");
    auto ranks = [](const std::vector<double>& v) {
        const size_t n = v.size();
        std::vector<size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0u);
        std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
        std::vector<double> r(n);
        size_t i = 0;
        while (i < n) {  // average ranks over ties
            size_t j = i;
            while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
            const double avg = 0.5 * (i + j) + 1.0;
            for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    std::vector<double> rx = ranks(x), ry = ranks(y);
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

Theorem1Report verify_theorem1(Surrogate reg, int n_classes, const std::vector<int>& d_list,
                               int family_size, int n_mc, Rng& rng, int n_jobs) {
    if (d_list.size() < 3) throw std::invalid_argument("verify_theorem1: need >= 3 dims");
    for (size_t i = 1; i < d_list.size(); ++i)
        if (d_list[i] <= d_list[i - 1])
            throw std::invalid_argument("verify_theorem1: d_list must be strictly increasing");
    if (family_size < 20) throw std::invalid_argument("verify_theorem1: family_size >= 20");

    Theorem1Report rep;
    rep.reg = reg;
    rep.n_classes = n_classes;
    rep.d_list = d_list;
    rep.family_size = family_size;
    rep.n_mc = n_mc;

    for (size_t di = 0; di < d_list.size(); ++di) {
        const int D = d_list[di];
        ExpansionConstants c = constants(reg, n_classes, D);
        Rng d_rng = rng.substream(di);
        Rng u_rng = d_rng.substream(0);
        Vec u_tail = sphere_uniform(u_rng, D - n_classes);

        std::vector<double> lregs, hmcs;
        double worst = 0.0, worst_stderr = 0.0;
        for (int j = 0; j < family_size; ++j) {
            const double lam = static_cast<double>(j) / (family_size - 1);
            Mat t = theorem_family_member(n_classes, D, lam, u_tail);
            const double lreg =
                reg == Surrogate::disp ? disp_surrogate(t) : orth_surrogate(t);
            Rng mc_rng = d_rng.substream(static_cast<uint64_t>(j) + 1);
            McEstimate h = expected_entropy_mc(t, 1.0, n_mc, mc_rng, n_jobs);
            Theorem1Row row;
            row.feature_dim = D;
            row.lambda_mix = lam;
            row.s_stat = s_stat(t);
            row.l_reg = lreg;
            row.h_mc = h.estimate;
            row.h_stderr = h.stderr_;
            row.predicted = c.alpha * lreg + c.beta;
            row.residual = std::fabs(h.estimate - row.predicted);
            rep.rows.push_back(row);
            lregs.push_back(lreg);
            hmcs.push_back(h.estimate);
            if (row.residual >= worst) {
                worst = row.residual;
                worst_stderr = h.stderr_;
            }
        }
        rep.max_residual.push_back(worst);
        rep.rank_correlation.push_back(spearman(lregs, hmcs));
        // the run is conclusive when Monte-Carlo noise cannot overturn the
        // residual-tolerance verdict: certified pass needs worst + 3 stderr
        // under the tolerance, certified fail needs worst - 3 stderr above it
        const double tolerance = 5.0 / (static_cast<double>(n_classes) * D);
        const bool certified_pass = worst + 3.0 * worst_stderr < tolerance;
        const bool certified_fail = worst - 3.0 * worst_stderr > tolerance;
        if (!certified_pass && !certified_fail) {
            rep.inconclusive = true;
            const double gap = std::max(std::fabs(tolerance - worst), tolerance * 0.1);
            const double factor = 3.0 * worst_stderr / gap;
            rep.suggested_n_mc = std::max<long long>(
                rep.suggested_n_mc,
                static_cast<long long>(std::ceil(n_mc * factor * factor * 2.0)));
        }
    }

    // least squares on (log D, log r)
    const size_t nd = d_list.size();
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    for (size_t i = 0; i < nd; ++i) {
        const double x = std::log(static_cast<double>(d_list[i]));
        const double y = std::log(std::max(rep.max_residual[i], 1e-300));
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    rep.exponent = (nd * sxy - sx * sy) / (nd * sxx - sx * sx);
    return rep;
}

std::string to_json(const Theorem1Report& rep) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : rep.rows)
        rows.push_back({{"D", r.feature_dim},
                        {"lambda_mix", r.lambda_mix},
                        {"s_stat", r.s_stat},
                        {"l_reg", r.l_reg},
                        {"h_mc", r.h_mc},
                        {"h_stderr", r.h_stderr},
                        {"predicted", r.predicted},
                        {"residual", r.residual}});
    nlohmann::json j = {{"schema", "flatcal.theorem1.v1"},
                        {"regularizer", to_string(rep.reg)},
                        {"n_classes", rep.n_classes},
                        {"d_list", rep.d_list},
                        {"family_size", rep.family_size},
                        {"n_mc", rep.n_mc},
                        {"rows", rows},
                        {"max_residual", rep.max_residual},
                        {"rank_correlation", rep.rank_correlation},
                        {"exponent", rep.exponent},
                        {"inconclusive", rep.inconclusive},
                        {"suggested_n_mc", rep.suggested_n_mc}};
    return j.dump(2);
}

std::string to_csv(const Theorem1Report& rep) {
    std::ostringstream out;
    out.precision(17);
    out << "schema_version,flatcal.theorem1.csv.v1\n";
    out << "D,s_stat,l_reg,h_mc,residual\n";
    for (const auto& r : rep.rows)
        out << r.feature_dim << ',' << r.s_stat << ',' << r.l_reg << ',' << r.h_mc << ','
            << r.residual << '\n';
    return out.str();
}

}  // namespace flatcal
