#include "flatcal/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace flatcal {

Regularizer regularizer_from_string(const std::string& s) {
    if (s == "none") return Regularizer::none;
    if (s == "ctpt") return Regularizer::ctpt;
    if (s == "otpt") return Regularizer::otpt;
    throw std::invalid_argument("unknown regularizer: " + s);
}

std::string to_string(Regularizer r) {
    switch (r) {
        case Regularizer::none: return "none";
        case Regularizer::ctpt: return "ctpt";
        case Regularizer::otpt: return "otpt";
    }
    return "?";
}

Distance distance_from_string(const std::string& s) {
    if (s == "l2") return Distance::l2;
    if (s == "cos" || s == "cosine") return Distance::cosine;
    throw std::invalid_argument("unknown distance: " + s);
}

std::string to_string(Distance d) { return d == Distance::l2 ? "l2" : "cos"; }

int ProbVector::predicted_class() const {
    return static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

double ProbVector::confidence() const { return *std::max_element(probs.begin(), probs.end()); }

ProbVector predict(const Mat& text_features, const Vec& image_feature, double temperature) {
    if (temperature <= 0.0) throw std::invalid_argument("predict: temperature must be > 0");
    if (text_features.cols != static_cast<int>(image_feature.size()))
        throw std::invalid_argument("predict: feature dim mismatch");
    const int K = text_features.rows;
    Vec logits(static_cast<size_t>(K));
    for (int k = 0; k < K; ++k) {
        double s = 0.0;
        for (int d = 0; d < text_features.cols; ++d)
            s += text_features(k, d) * image_feature[static_cast<size_t>(d)];
        logits[static_cast<size_t>(k)] = s / temperature;
    }
    // log-sum-exp stable softmax
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    Vec probs(static_cast<size_t>(K));
    for (int k = 0; k < K; ++k) {
        probs[static_cast<size_t>(k)] = std::exp(logits[static_cast<size_t>(k)] - mx);
        z += probs[static_cast<size_t>(k)];
    }
    for (double& p : probs) p /= z;
    return ProbVector{std::move(probs), temperature};
}

double entropy_of(const Vec& probs) {
    double h = 0.0;
    for (double p : probs)
        if (p > 0.0) h -= p * std::log(p);
    return h;
}

namespace {

// Indices of the ceil(select_frac * N) lowest-entropy views, in stable order.
std::vector<size_t> select_views(const std::vector<Vec>& per_view_probs, double select_frac) {
    const size_t n = per_view_probs.size();
    const size_t m = static_cast<size_t>(
        std::ceil(select_frac * static_cast<double>(n)));
    std::vector<double> ents(n);
    for (size_t i = 0; i < n; ++i) ents[i] = entropy_of(per_view_probs[i]);
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    std::stable_sort(idx.begin(), idx.end(),
                     [&ents](size_t a, size_t b) { return ents[a] < ents[b]; });
    idx.resize(std::max<size_t>(m, 1));
    return idx;
}

}  // namespace

double em_loss(const Mat& text_features, const AugmentedViews& views, double temperature,
               double select_frac) {
    if (select_frac <= 0.0 || select_frac > 1.0)
        throw std::invalid_argument("em_loss: select_frac must be in (0, 1]");
    std::vector<Vec> probs;
    probs.reserve(views.views.size());
    for (const Vec& v : views.views) probs.push_back(predict(text_features, v, temperature).probs);
    const std::vector<size_t> sel = select_views(probs, select_frac);
    Vec avg(probs[0].size(), 0.0);
    for (size_t i : sel)
        for (size_t k = 0; k < avg.size(); ++k) avg[k] += probs[i][k];
    for (double& p : avg) p /= static_cast<double>(sel.size());
    return entropy_of(avg);
}

double ctpt_reg(const Mat& t) {
    const int K = t.rows;
    Vec mu(static_cast<size_t>(t.cols), 0.0);
    for (int k = 0; k < K; ++k)
        for (int d = 0; d < t.cols; ++d) mu[static_cast<size_t>(d)] += t(k, d);
    for (double& x : mu) x /= K;
    double s = 0.0;
    for (int k = 0; k < K; ++k) {
        double nsq = 0.0;
        for (int d = 0; d < t.cols; ++d) {
            const double diff = t(k, d) - mu[static_cast<size_t>(d)];
            nsq += diff * diff;
        }
        s += std::sqrt(nsq);
    }
    return -s / K;
}

double otpt_reg(const Mat& t) {
    const int K = t.rows;
    double s = 0.0;
    for (int i = 0; i < K; ++i) {
        for (int j = 0; j < K; ++j) {
            double g = 0.0;
            for (int d = 0; d < t.cols; ++d) g += t(i, d) * t(j, d);
            const double r = g - (i == j ? 1.0 : 0.0);
            s += r * r;
        }
    }
    return s;
}

double total_loss(const Mat& t, const AugmentedViews& views, double temperature,
                  double select_frac, Regularizer reg, double lambda) {
    if (lambda < 0.0) throw std::invalid_argument("total_loss: lambda must be >= 0");
    double loss = em_loss(t, views, temperature, select_frac);
    switch (reg) {
        case Regularizer::none: break;
        case Regularizer::ctpt: loss += lambda * ctpt_reg(t); break;
        case Regularizer::otpt: loss += lambda * otpt_reg(t); break;
    }
    return loss;
}

double s_stat(const Mat& t) {
    const int K = t.rows;
    Vec mu(static_cast<size_t>(t.cols), 0.0);
    for (int k = 0; k < K; ++k)
        for (int d = 0; d < t.cols; ++d) mu[static_cast<size_t>(d)] += t(k, d);
    for (double& x : mu) x /= K;
    return K - K * dot(mu, mu);
}

double disp_surrogate(const Mat& t) {
    const int K = t.rows;
    Vec mu(static_cast<size_t>(t.cols), 0.0);
    for (int k = 0; k < K; ++k)
        for (int d = 0; d < t.cols; ++d) mu[static_cast<size_t>(d)] += t(k, d);
    for (double& x : mu) x /= K;
    double s = 0.0;
    for (int k = 0; k < K; ++k)
        for (int d = 0; d < t.cols; ++d) {
            const double diff = t(k, d) - mu[static_cast<size_t>(d)];
            s += diff * diff;
        }
    return -s;
}

double orth_surrogate(const Mat& t) {
    const int K = t.rows;
    double s = 0.0;
    for (int i = 0; i < K; ++i)
        for (int j = i + 1; j < K; ++j) {
            double g = 0.0;
            for (int d = 0; d < t.cols; ++d) g += t(i, d) * t(j, d);
            s += g;
        }
    return s;
}

double fpp_lambda(double gamma1, double gamma2, int n_classes) {
    if (gamma1 <= 0.0 || gamma2 <= 0.0) throw std::invalid_argument("fpp_lambda: gammas must be > 0");
    if (n_classes < 2) throw std::invalid_argument("fpp_lambda: K must be >= 2");
    return gamma1 + gamma2 / n_classes;
}

double flat_loss(const SynthEncoder& enc, const Mat& c, const Mat& theta, const Mat& eps_c,
                 const Mat& eps_theta) {
    check_same_shape(c, eps_c, "flat_loss(eps_classes)");
    check_same_shape(theta, eps_theta, "flat_loss(eps_prompt)");
    const Mat t0 = enc.encode(c, theta);
    const Mat t1 = enc.encode(c + eps_c, theta + eps_theta);
    const int K = t0.rows;
    double s = 0.0;
    for (int k = 0; k < K; ++k) {
        double cosv = 0.0;
        for (int d = 0; d < t0.cols; ++d) cosv += t0(k, d) * t1(k, d);
        s += 1.0 - cosv;
    }
    return s / K;
}

double align_loss(const SynthEncoder& enc, const Mat& c, const Mat& theta, const Mat& anchor) {
    check_same_shape(theta, anchor, "align_loss");
    const Mat t = enc.encode(c, theta);
    const Mat t0 = enc.encode(c, anchor);
    const int K = t.rows;
    double s = 0.0;
    for (int k = 0; k < K; ++k) {
        double nsq = 0.0;
        for (int d = 0; d < t.cols; ++d) {
            const double diff = t(k, d) - t0(k, d);
            nsq += diff * diff;
        }
        s += std::sqrt(nsq);
    }
    return s / K;
}

// --- tape versions -----------------------------------------------------------

Tape::Var predict_t(Tape& tape, Tape::Var text_features, const Vec& image_feature,
                    double temperature) {
    if (temperature <= 0.0) throw std::invalid_argument("predict_t: temperature must be > 0");
    Tape::Var v = tape.constant(Mat::col_vector(image_feature));
    Tape::Var logits = tape.matmul(text_features, v);  // K x 1
    return tape.softmax(logits, temperature);
}

Tape::Var em_loss_t(Tape& tape, Tape::Var text_features, const AugmentedViews& views,
                    double temperature, double select_frac) {
    if (select_frac <= 0.0 || select_frac > 1.0)
        throw std::invalid_argument("em_loss_t: select_frac must be in (0, 1]");
    std::vector<Tape::Var> probs;
    std::vector<Vec> prob_values;
    probs.reserve(views.views.size());
    for (const Vec& v : views.views) {
        Tape::Var p = predict_t(tape, text_features, v, temperature);
        prob_values.push_back(tape.value(p).a);
        probs.push_back(p);
    }
    const std::vector<size_t> sel = select_views(prob_values, select_frac);
    Tape::Var acc = probs[sel[0]];
    for (size_t i = 1; i < sel.size(); ++i) acc = tape.add(acc, probs[sel[i]]);
    Tape::Var avg = tape.scale(acc, 1.0 / static_cast<double>(sel.size()));
    return tape.entropy(avg);
}

Tape::Var ctpt_reg_t(Tape& tape, Tape::Var t) {
    const int K = tape.value(t).rows;
    Tape::Var mu = tape.mean_rows(t);
    Tape::Var diffs = tape.sub(t, tape.repeat_rows(mu, K));
    return tape.scale(tape.sum(tape.row_norms(diffs)), -1.0 / K);
}

Tape::Var otpt_reg_t(Tape& tape, Tape::Var t) {
    const int K = tape.value(t).rows;
    Tape::Var gram = tape.matmul(t, tape.transpose_of(t));
    Tape::Var resid = tape.sub(gram, tape.constant(Mat::identity(K)));
    return tape.sum(tape.mul(resid, resid));
}

Tape::Var total_loss_t(Tape& tape, Tape::Var t, const AugmentedViews& views, double temperature,
                       double select_frac, Regularizer reg, double lambda) {
    if (lambda < 0.0) throw std::invalid_argument("total_loss_t: lambda must be >= 0");
    Tape::Var loss = em_loss_t(tape, t, views, temperature, select_frac);
    if (reg == Regularizer::none || lambda == 0.0) return loss;
    Tape::Var r = reg == Regularizer::ctpt ? ctpt_reg_t(tape, t) : otpt_reg_t(tape, t);
    return tape.add(loss, tape.scale(r, lambda));
}

Tape::Var disp_surrogate_t(Tape& tape, Tape::Var t) {
    const int K = tape.value(t).rows;
    Tape::Var mu = tape.mean_rows(t);
    Tape::Var centered = tape.sub(t, tape.repeat_rows(mu, K));
    return tape.scale(tape.sum(tape.mul(centered, centered)), -1.0);
}

Tape::Var orth_surrogate_t(Tape& tape, Tape::Var t) {
    // sum_{i<j} t_i . t_j = (sum(T T^T) - sum_i ||t_i||^2) / 2
    Tape::Var gram = tape.matmul(t, tape.transpose_of(t));
    Tape::Var diag_sum = tape.sum(tape.row_dots(t, t));
    return tape.scale(tape.sub(tape.sum(gram), diag_sum), 0.5);
}

Tape::Var flat_loss_t(Tape& tape, const SynthEncoder& enc, Tape::Var class_embeddings,
                      Tape::Var prompt_tokens, const Mat& eps_c, const Mat& eps_theta,
                      Distance dist) {
    check_same_shape(tape.value(class_embeddings), eps_c, "flat_loss_t(eps_classes)");
    check_same_shape(tape.value(prompt_tokens), eps_theta, "flat_loss_t(eps_prompt)");
    Tape::Var c_pert = tape.add(class_embeddings, tape.constant(eps_c));
    Tape::Var p_pert = tape.add(prompt_tokens, tape.constant(eps_theta));
    Tape::Var t0 = enc.encode(tape, class_embeddings, prompt_tokens);
    Tape::Var t1 = enc.encode(tape, c_pert, p_pert);
    const int K = tape.value(t0).rows;
    if (dist == Distance::cosine) {
        Tape::Var cos_k = tape.row_dots(t0, t1);  // rows are unit norm
        Tape::Var ones = tape.constant(Mat(K, 1, std::vector<double>(static_cast<size_t>(K), 1.0)));
        return tape.scale(tape.sum(tape.sub(ones, cos_k)), 1.0 / K);
    }
    return tape.scale(tape.sum(tape.row_norms(tape.sub(t1, t0))), 1.0 / K);
}

Tape::Var align_loss_t(Tape& tape, const SynthEncoder& enc, Tape::Var class_embeddings,
                       Tape::Var prompt_tokens, const Mat& anchor_prompt_tokens, Distance dist) {
    check_same_shape(tape.value(prompt_tokens), anchor_prompt_tokens, "align_loss_t");
    Tape::Var t = enc.encode(tape, class_embeddings, prompt_tokens);
    // evaluate the anchor through the same tape path so that at
    // prompt == anchor the difference is exactly zero, not one ulp
    Mat anchor_value;
    {
        Tape scratch;
        anchor_value = scratch.value(enc.encode(scratch,
                                                scratch.constant(tape.value(class_embeddings)),
                                                scratch.constant(anchor_prompt_tokens)));
    }
    Tape::Var t0 = tape.constant(anchor_value);
    const int K = tape.value(t).rows;
    if (dist == Distance::l2) {
        return tape.scale(tape.sum(tape.row_norms(tape.sub(t, t0))), 1.0 / K);
    }
    Tape::Var cos_k = tape.row_dots(t, t0);
    Tape::Var ones = tape.constant(Mat(K, 1, std::vector<double>(static_cast<size_t>(K), 1.0)));
    return tape.scale(tape.sum(tape.sub(ones, cos_k)), 1.0 / K);
}

}  // namespace flatcal
