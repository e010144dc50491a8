#include "flatcal/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

namespace flatcal {

using nlohmann::json;

SynthEncoder::SynthEncoder(int prompt_len, int embed_dim, int hidden_dim, int feature_dim,
                           uint64_t weight_seed)
    : prompt_len_(prompt_len),
      embed_dim_(embed_dim),
      hidden_dim_(hidden_dim),
      feature_dim_(feature_dim),
      weight_seed_(weight_seed) {
    if (prompt_len < 1 || embed_dim < 2 || hidden_dim < 2 || feature_dim < 2)
        throw std::invalid_argument("SynthEncoder: dims out of range");
    Rng rng(weight_seed);
    w1_ = rng.gaussian_mat(hidden_dim, 2 * embed_dim, 1.0 / std::sqrt(2.0 * embed_dim));
    b1_ = Vec(static_cast<size_t>(hidden_dim));
    for (double& b : b1_) b = 0.1 * rng.gaussian();
    w2_ = rng.gaussian_mat(feature_dim, hidden_dim, 1.0 / std::sqrt(static_cast<double>(hidden_dim)));
    w1t_ = transpose(w1_);
    w2t_ = transpose(w2_);
}

void SynthEncoder::scale_output_weights(double factor) {
    for (double& x : w2_.a) x *= factor;
    w2t_ = transpose(w2_);
}

void SynthEncoder::scale_hidden_weights(double factor) {
    for (double& x : w1_.a) x *= factor;
    w1t_ = transpose(w1_);
}

Mat SynthEncoder::encode(const Mat& class_embeddings, const Mat& prompt_tokens) const {
    Mat out = encode_prenorm(class_embeddings, prompt_tokens);
    for (int k = 0; k < out.rows; ++k) {
        double nsq = 0.0;
        for (int d = 0; d < feature_dim_; ++d) nsq += out(k, d) * out(k, d);
        if (nsq == 0.0) throw std::domain_error("encode: zero feature row");
        const double inv = 1.0 / std::sqrt(nsq);
        for (int d = 0; d < feature_dim_; ++d) out(k, d) *= inv;
    }
    return out;
}

Mat SynthEncoder::encode_prenorm(const Mat& class_embeddings, const Mat& prompt_tokens) const {
    if (class_embeddings.cols != embed_dim_)
        throw std::invalid_argument("encode: class embedding dim mismatch");
    if (prompt_tokens.cols != embed_dim_ || prompt_tokens.rows != prompt_len_)
        throw std::invalid_argument("encode: prompt shape mismatch");
    const int K = class_embeddings.rows;

    Vec pooled(static_cast<size_t>(embed_dim_), 0.0);
    for (int t = 0; t < prompt_len_; ++t)
        for (int e = 0; e < embed_dim_; ++e) pooled[static_cast<size_t>(e)] += prompt_tokens(t, e);
    for (double& x : pooled) x /= prompt_len_;

    Mat out(K, feature_dim_);
    Vec z(static_cast<size_t>(2 * embed_dim_));
    Vec h(static_cast<size_t>(hidden_dim_));
    for (int k = 0; k < K; ++k) {
        for (int e = 0; e < embed_dim_; ++e) {
            z[static_cast<size_t>(e)] = pooled[static_cast<size_t>(e)];
            z[static_cast<size_t>(embed_dim_ + e)] = class_embeddings(k, e);
        }
        for (int i = 0; i < hidden_dim_; ++i) {
            double s = b1_[static_cast<size_t>(i)];
            for (int j = 0; j < 2 * embed_dim_; ++j) s += w1_(i, j) * z[static_cast<size_t>(j)];
            h[static_cast<size_t>(i)] = std::tanh(s);
        }
        for (int d = 0; d < feature_dim_; ++d) {
            double s = 0.0;
            for (int i = 0; i < hidden_dim_; ++i) s += w2_(d, i) * h[static_cast<size_t>(i)];
            out(k, d) = s;
        }
    }
    return out;
}

Tape::Var SynthEncoder::encode(Tape& tape, Tape::Var class_embeddings,
                               Tape::Var prompt_tokens) const {
    const Mat& cv = tape.value(class_embeddings);
    const Mat& pv = tape.value(prompt_tokens);
    if (cv.cols != embed_dim_ || pv.cols != embed_dim_ || pv.rows != prompt_len_)
        throw std::invalid_argument("encode(tape): shape mismatch");
    const int K = cv.rows;

    Tape::Var pooled = tape.mean_rows(prompt_tokens);                // 1 x E
    Tape::Var tiled = tape.repeat_rows(pooled, K);                   // K x E
    Tape::Var z = tape.concat_cols(tiled, class_embeddings);         // K x 2E
    Tape::Var pre = tape.add_rowvec(tape.matmul(z, tape.constant(w1t_)),
                                    tape.constant(Mat::row_vector(b1_)));
    Tape::Var h = tape.tanh_el(pre);                                 // K x H
    Tape::Var o = tape.matmul(h, tape.constant(w2t_));               // K x D
    return tape.normalize_rows(o);
}

AugmentedViews augment(Rng& rng, const Vec& v, int n_views, double sigma_aug) {
    if (n_views < 1) throw std::invalid_argument("augment: n_views must be >= 1");
    if (std::fabs(norm2(v) - 1.0) > 1e-9)
        throw std::invalid_argument("augment: base feature must be unit norm");
    AugmentedViews out;
    out.base = v;
    out.sigma_aug = sigma_aug;
    out.views.reserve(static_cast<size_t>(n_views));
    out.views.push_back(v);
    const int d = static_cast<int>(v.size());
    for (int i = 1; i < n_views; ++i) {
        if (sigma_aug == 0.0) {
            out.views.push_back(v);
            continue;
        }
        Vec w = v;
        for (int j = 0; j < d; ++j) w[static_cast<size_t>(j)] += sigma_aug * rng.gaussian();
        const double n = norm2(w);
        for (double& x : w) x /= n;
        out.views.push_back(std::move(w));
    }
    return out;
}

namespace {

double zero_shot_accuracy(const Mat& text_features, const std::vector<Vec>& features,
                          const std::vector<int>& labels) {
    int correct = 0;
    for (size_t i = 0; i < features.size(); ++i) {
        int best = 0;
        double best_score = -2.0;
        for (int k = 0; k < text_features.rows; ++k) {
            double s = 0.0;
            for (int d = 0; d < text_features.cols; ++d)
                s += text_features(k, d) * features[i][static_cast<size_t>(d)];
            if (s > best_score) {
                best_score = s;
                best = k;
            }
        }
        if (best == labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(features.size());
}

}  // namespace

SynthTask gen_task(uint64_t seed, const TaskParams& p) {
    if (p.n_classes < 2 || p.embed_dim < 2 || p.hidden_dim < 2 || p.feature_dim < 2)
        throw std::invalid_argument("gen_task: dims must be >= 2");
    if (p.n_test < p.n_classes) throw std::invalid_argument("gen_task: n_test must be >= K");

    Rng root(seed);
    const int K = p.n_classes;
    for (int attempt = 0; attempt < 20; ++attempt) {
        Rng rng = root.substream(static_cast<uint64_t>(attempt));
        SynthEncoder enc(p.prompt_len, p.embed_dim, p.hidden_dim, p.feature_dim, rng.next_u64());

        ClassSet classes;
        classes.embeddings = rng.gaussian_mat(K, p.embed_dim);
        classes.names.reserve(static_cast<size_t>(K));
        for (int k = 0; k < K; ++k) classes.names.push_back("class_" + std::to_string(k));

        Prompt theta_star{rng.gaussian_mat(p.prompt_len, p.embed_dim)};
        Prompt theta_zs{theta_star.tokens + rng.gaussian_mat(p.prompt_len, p.embed_dim, p.sigma_offset)};

        Vec shift = sphere_uniform(rng, p.feature_dim);

        Mat prototypes = enc.encode(classes.embeddings, theta_star.tokens);

        std::vector<int> labels(static_cast<size_t>(p.n_test));
        for (int& y : labels) y = rng.below(K);

        std::vector<Vec> features;
        features.reserve(static_cast<size_t>(p.n_test));
        for (int i = 0; i < p.n_test; ++i) {
            Vec f(static_cast<size_t>(p.feature_dim));
            for (int d = 0; d < p.feature_dim; ++d)
                f[static_cast<size_t>(d)] = prototypes(labels[static_cast<size_t>(i)], d) +
                                            p.sigma_noise * rng.gaussian() +
                                            p.sigma_shift * shift[static_cast<size_t>(d)];
            const double n = norm2(f);
            for (double& x : f) x /= n;
            features.push_back(std::move(f));
        }

        Mat zs_features = enc.encode(classes.embeddings, theta_zs.tokens);
        const double acc = zero_shot_accuracy(zs_features, features, labels);
        if (acc > 1.0 / K + 0.05 && acc < 0.98) {
            SynthTask task{p, seed, std::move(enc), std::move(classes), std::move(theta_star),
                           std::move(theta_zs), std::move(features), std::move(labels),
                           std::move(shift), acc, attempt};
            return task;
        }
    }
    throw std::runtime_error(
        "gen_task: no acceptable task after 20 attempts (seed=" + std::to_string(seed) +
        ", K=" + std::to_string(p.n_classes) + ", D=" + std::to_string(p.feature_dim) +
        ", sigma_offset=" + std::to_string(p.sigma_offset) +
        ", sigma_noise=" + std::to_string(p.sigma_noise) +
        ", sigma_shift=" + std::to_string(p.sigma_shift) + ")");
}

namespace {

json mat_to_json(const Mat& m) {
    return json{{"rows", m.rows}, {"cols", m.cols}, {"data", m.a}};
}

Mat mat_from_json(const json& j) {
    return Mat(j.at("rows").get<int>(), j.at("cols").get<int>(),
               j.at("data").get<std::vector<double>>());
}

}  // namespace

std::string task_to_json(const SynthTask& task) {
    json j;
    j["schema"] = "flatcal.task.v1";
    j["seed"] = task.seed;
    j["params"] = {{"n_classes", task.params.n_classes},
                   {"prompt_len", task.params.prompt_len},
                   {"embed_dim", task.params.embed_dim},
                   {"hidden_dim", task.params.hidden_dim},
                   {"feature_dim", task.params.feature_dim},
                   {"n_test", task.params.n_test},
                   {"sigma_offset", task.params.sigma_offset},
                   {"sigma_noise", task.params.sigma_noise},
                   {"sigma_shift", task.params.sigma_shift}};
    j["encoder_weight_seed"] = task.encoder.weight_seed();
    j["class_embeddings"] = mat_to_json(task.classes.embeddings);
    j["class_names"] = task.classes.names;
    j["theta_star"] = mat_to_json(task.theta_star.tokens);
    j["theta_zs"] = mat_to_json(task.theta_zs.tokens);
    j["shift_direction"] = task.shift_direction;
    j["labels"] = task.labels;
    j["features"] = task.features;
    j["zero_shot_accuracy"] = task.zero_shot_accuracy;
    j["rejected_attempts"] = task.rejected_attempts;
    return j.dump(2);
}

SynthTask task_from_json(const std::string& json_text) {
    json j = json::parse(json_text);
    if (j.at("schema").get<std::string>() != "flatcal.task.v1")
        throw std::invalid_argument("task_from_json: unknown schema");
    const json& jp = j.at("params");
    TaskParams p{jp.at("n_classes").get<int>(),    jp.at("prompt_len").get<int>(),
                 jp.at("embed_dim").get<int>(),    jp.at("hidden_dim").get<int>(),
                 jp.at("feature_dim").get<int>(),  jp.at("n_test").get<int>(),
                 jp.at("sigma_offset").get<double>(), jp.at("sigma_noise").get<double>(),
                 jp.at("sigma_shift").get<double>()};
    SynthEncoder enc(p.prompt_len, p.embed_dim, p.hidden_dim, p.feature_dim,
                     j.at("encoder_weight_seed").get<uint64_t>());
    ClassSet classes{mat_from_json(j.at("class_embeddings")),
                     j.at("class_names").get<std::vector<std::string>>()};
    SynthTask task{p,
                   j.at("seed").get<uint64_t>(),
                   std::move(enc),
                   std::move(classes),
                   Prompt{mat_from_json(j.at("theta_star"))},
                   Prompt{mat_from_json(j.at("theta_zs"))},
                   j.at("features").get<std::vector<Vec>>(),
                   j.at("labels").get<std::vector<int>>(),
                   j.at("shift_direction").get<Vec>(),
                   j.at("zero_shot_accuracy").get<double>(),
                   j.at("rejected_attempts").get<int>()};
    return task;
}

}  // namespace flatcal
