#pragma once

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "oodseg/linalg.hpp"
#include "oodseg/nnet.hpp"
#include "oodseg/tensor.hpp"

// The four pixel-level OOD scoring functions and the thresholded decision
// rule. Every scorer softmax-normalizes, so score rows sum to 1 and the
// per-pixel argmax of the raw scores is preserved.

namespace oodseg {

inline ScoreVolume score_baseline(const LogitVolume& logits) {
    ScoreVolume s;
    s.height = logits.height;
    s.width = logits.width;
    s.num_classes = logits.num_classes;
    s.data = logits.data;
    const int C = s.num_classes;
    for (std::size_t p = 0; p + C <= s.data.size(); p += C) softmax_inplace(s.data.data() + p, C);
    return s;
}

// Temperature-scaled softmax; T = 1 reduces to the baseline bit-exactly.
inline ScoreVolume score_odin(const LogitVolume& logits, double temperature) {
    if (temperature <= 0.0) throw std::invalid_argument("score_odin: temperature must be > 0");
    if (temperature == 1.0) return score_baseline(logits);
    LogitVolume scaled = logits;
    for (double& v : scaled.data) v /= temperature;
    return score_baseline(scaled);
}

// Per-class means with a tied covariance over penultimate features, plus
// the factorized inverse of the regularized covariance.
struct GaussianStats {
    std::vector<std::vector<double>> means;  // C vectors of dim d
    Matrix covariance;                       // d x d, tied across classes
    double epsilon = 0.0;                    // regularizer actually applied
    std::vector<std::size_t> counts;         // per class
    std::shared_ptr<Cholesky> precision;     // factorization of covariance + eps*I

    int dim() const { return covariance.rows; }
    int num_classes() const { return static_cast<int>(means.size()); }
};

// Streaming accumulator: per-class counts, feature sums and second
// moments. Pooling is exact, so grouping pixels into images is
// irrelevant to the final estimates.
class GaussianAccumulator {
public:
    GaussianAccumulator(int num_classes, int dim)
        : dim_(dim),
          counts_(num_classes, 0),
          sums_(num_classes, std::vector<double>(dim, 0.0)),
          second_(num_classes, Matrix(dim, dim)) {}

    void add(const FeatureVolume& features, const SparseAnnotation& ann) {
        if (features.dim != dim_) throw std::invalid_argument("GaussianAccumulator: dim mismatch");
        if (features.height != ann.height || features.width != ann.width)
            throw std::invalid_argument("GaussianAccumulator: shape mismatch");
        for (int i = 0; i < features.height; ++i) {
            for (int j = 0; j < features.width; ++j) {
                const int y = ann.at(i, j);
                if (y == 0) continue;
                if (y > static_cast<int>(counts_.size()))
                    throw std::invalid_argument("GaussianAccumulator: label out of range");
                const int c = y - 1;
                ++counts_[c];
                const double* f = features.data.data() + flat_index(i, j, 0, features.width, dim_);
                auto& sum = sums_[c];
                auto& sec = second_[c];
                for (int a = 0; a < dim_; ++a) {
                    sum[a] += f[a];
                    for (int b = 0; b < dim_; ++b) sec.at(a, b) += f[a] * f[b];
                }
            }
        }
    }

    GaussianStats finalize(double epsilon_scale) const {
        GaussianStats st;
        const int C = static_cast<int>(counts_.size());
        std::size_t total = 0;
        st.means.resize(C);
        st.counts = counts_;
        st.covariance = Matrix(dim_, dim_);
        for (int c = 0; c < C; ++c) {
            if (counts_[c] == 0)
                throw std::runtime_error("fit_gaussian_stats: class " + std::to_string(c + 1) +
                                         " has no labelled pixels");
            total += counts_[c];
            st.means[c].resize(dim_);
            for (int a = 0; a < dim_; ++a) st.means[c][a] = sums_[c][a] / counts_[c];
        }
        // Pooled within-class scatter over all classes, divided by total count.
        for (int c = 0; c < C; ++c) {
            const double n = static_cast<double>(counts_[c]);
            for (int a = 0; a < dim_; ++a)
                for (int b = 0; b < dim_; ++b)
                    st.covariance.at(a, b) += second_[c].at(a, b) - n * st.means[c][a] * st.means[c][b];
        }
        for (double& v : st.covariance.v) v /= static_cast<double>(total);

        double trace = 0.0;
        for (int a = 0; a < dim_; ++a) trace += st.covariance.at(a, a);
        // Zero scatter (all features identical) would give eps = 0 and an
        // unfactorizable matrix; fall back to the raw scale.
        st.epsilon = epsilon_scale * (trace > 0.0 ? trace / dim_ : 1.0);

        Matrix reg = st.covariance;
        for (int a = 0; a < dim_; ++a) reg.at(a, a) += st.epsilon;
        st.precision = std::make_shared<Cholesky>(reg);
        return st;
    }

private:
    int dim_;
    std::vector<std::size_t> counts_;
    std::vector<std::vector<double>> sums_;
    std::vector<Matrix> second_;
};

inline GaussianStats fit_gaussian_stats(const std::vector<FeatureVolume>& features,
                                        const std::vector<SparseAnnotation>& annotations,
                                        int num_classes, double epsilon_scale) {
    if (features.size() != annotations.size())
        throw std::invalid_argument("fit_gaussian_stats: list length mismatch");
    if (features.empty()) throw std::invalid_argument("fit_gaussian_stats: empty training set");
    GaussianAccumulator acc(num_classes, features.front().dim);
    for (std::size_t i = 0; i < features.size(); ++i) acc.add(features[i], annotations[i]);
    return acc.finalize(epsilon_scale);
}

// Negative Mahalanobis distance to each class Gaussian, then softmax.
inline ScoreVolume score_mahalanobis(const FeatureVolume& features, const GaussianStats& stats) {
    if (features.dim != stats.dim())
        throw std::invalid_argument("score_mahalanobis: feature dim mismatch");
    const int C = stats.num_classes();
    const int d = features.dim;
    ScoreVolume s;
    s.height = features.height;
    s.width = features.width;
    s.num_classes = C;
    s.data.resize(static_cast<std::size_t>(features.height) * features.width * C);
    std::vector<double> diff(d);
    for (int i = 0; i < features.height; ++i) {
        for (int j = 0; j < features.width; ++j) {
            double* row = s.data.data() + flat_index(i, j, 0, s.width, C);
            for (int c = 0; c < C; ++c) {
                for (int a = 0; a < d; ++a) diff[a] = features.at(i, j, a) - stats.means[c][a];
                row[c] = -stats.precision->quad_form(diff);
            }
            softmax_inplace(row, C);
        }
    }
    return s;
}

// GODIN scoring over a feature volume; in context mode the head consumes
// the flattened 3x3 neighborhood of phi with zero-padded borders.
inline std::vector<double> gather_neighborhood(const FeatureVolume& features, int i, int j,
                                               int context) {
    const int d = features.dim;
    const int half = context / 2;
    std::vector<double> u(static_cast<std::size_t>(context) * context * d, 0.0);
    int q = 0;
    for (int di = -half; di <= half; ++di) {
        for (int dj = -half; dj <= half; ++dj, ++q) {
            const int ni = i + di, nj = j + dj;
            if (ni < 0 || ni >= features.height || nj < 0 || nj >= features.width) continue;
            for (int a = 0; a < d; ++a) u[static_cast<std::size_t>(q) * d + a] = features.at(ni, nj, a);
        }
    }
    return u;
}

inline ScoreVolume score_godin(const GodinHead& head, const FeatureVolume& features) {
    if (features.dim != head.feat_dim)
        throw std::invalid_argument("score_godin: feature dim mismatch");
    ScoreVolume s;
    s.height = features.height;
    s.width = features.width;
    s.num_classes = head.num_classes;
    s.data.resize(static_cast<std::size_t>(features.height) * features.width * head.num_classes);
    for (int i = 0; i < features.height; ++i) {
        for (int j = 0; j < features.width; ++j) {
            const GodinOutput out = godin_forward(head, gather_neighborhood(features, i, j, head.context));
            double* row = s.data.data() + flat_index(i, j, 0, s.width, s.num_classes);
            std::copy(out.score.begin(), out.score.end(), row);
        }
    }
    return s;
}

// Decision rule: accept the argmax class when max score strictly exceeds
// tau, otherwise reject as OOD (label 0). Ties in the argmax go to the
// smallest class index.
inline PredictionMask decide(const ScoreVolume& scores, double tau) {
    if (tau < 0.0 || tau > 1.0) throw std::invalid_argument("decide: tau must be in [0,1]");
    PredictionMask mask;
    mask.height = scores.height;
    mask.width = scores.width;
    mask.labels.resize(static_cast<std::size_t>(scores.height) * scores.width);
    const int C = scores.num_classes;
    for (std::size_t p = 0; p < mask.labels.size(); ++p) {
        const double* row = scores.data.data() + p * C;
        int best = 0;
        for (int c = 1; c < C; ++c)
            if (row[c] > row[best]) best = c;
        mask.labels[p] = row[best] > tau ? best + 1 : 0;
    }
    return mask;
}

// ---------------------------------------------------------------------------
// GaussianStats serialization via the core tensor container.

inline void save_gaussian_stats(const std::string& dir, const GaussianStats& st) {
    std::filesystem::create_directories(dir);
    const int C = st.num_classes();
    const int d = st.dim();
    std::vector<double> means_flat;
    for (const auto& m : st.means) means_flat.insert(means_flat.end(), m.begin(), m.end());
    write_tensor(dir + "/means", {static_cast<std::size_t>(C), static_cast<std::size_t>(d)}, means_flat);
    write_tensor(dir + "/covariance", {static_cast<std::size_t>(d), static_cast<std::size_t>(d)},
                 st.covariance.v);
    std::vector<double> meta{st.epsilon};
    for (std::size_t n : st.counts) meta.push_back(static_cast<double>(n));
    write_tensor(dir + "/meta", {meta.size()}, meta);
}

inline GaussianStats load_gaussian_stats(const std::string& dir) {
    GaussianStats st;
    auto [mshape, means] = read_tensor(dir + "/means");
    auto [cshape, cov] = read_tensor(dir + "/covariance");
    auto [xshape, meta] = read_tensor(dir + "/meta");
    const int C = static_cast<int>(mshape[0]);
    const int d = static_cast<int>(mshape[1]);
    st.means.resize(C);
    for (int c = 0; c < C; ++c)
        st.means[c].assign(means.begin() + c * d, means.begin() + (c + 1) * d);
    st.covariance = Matrix(d, d);
    st.covariance.v = cov;
    st.epsilon = meta[0];
    for (std::size_t i = 1; i < meta.size(); ++i)
        st.counts.push_back(static_cast<std::size_t>(meta[i]));
    Matrix reg = st.covariance;
    for (int a = 0; a < d; ++a) reg.at(a, a) += st.epsilon;
    st.precision = std::make_shared<Cholesky>(reg);
    return st;
}

}  // namespace oodseg
