#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "oodseg/linalg.hpp"
#include "oodseg/rng.hpp"
#include "oodseg/tensor.hpp"

// Minimal differentiable network core: dense layers + ReLU, softmax
// cross-entropy, hand-written reverse-mode gradients, Adam with
// exponential learning-rate decay, and the GODIN dividend/divisor head
// with its three similarity variants.

namespace oodseg {

struct DenseLayer {
    int in = 0;
    int out = 0;
    std::vector<double> W;  // out x in, row-major
    std::vector<double> b;  // out
};

// Pixel/patch classifier: input is the flattened context x context patch of
// spectra, hidden layers use ReLU, the last layer emits C logits. The
// penultimate activations realize the feature map phi used by the
// Mahalanobis and GODIN scorers.
struct MlpClassifier {
    int context = 1;  // odd patch side; 1 = pixel-only
    std::vector<DenseLayer> layers;

    int input_dim() const { return layers.front().in; }
    int num_classes() const { return layers.back().out; }
    int feature_dim() const {
        return layers.size() > 1 ? layers[layers.size() - 2].out : layers.front().in;
    }
};

enum class Similarity { InnerProduct, Euclidean, Cosine };

inline std::string similarity_name(Similarity s) {
    switch (s) {
        case Similarity::InnerProduct: return "ip";
        case Similarity::Euclidean: return "euclid";
        case Similarity::Cosine: return "cos";
    }
    throw std::logic_error("similarity_name");
}

inline Similarity similarity_from_name(const std::string& s) {
    if (s == "ip") return Similarity::InnerProduct;
    if (s == "euclid") return Similarity::Euclidean;
    if (s == "cos") return Similarity::Cosine;
    throw std::invalid_argument("unknown similarity: " + s);
}

// GODIN head over phi (or the flattened 3x3 neighborhood of phi in context
// mode, zero-padded at borders). g is a learned, sigmoid-bounded divisor.
struct GodinHead {
    Similarity sim = Similarity::InnerProduct;
    int context = 1;   // 1 or 3
    int feat_dim = 0;  // dimension of phi per pixel
    int num_classes = 0;

    Matrix Wc;               // C x input_dim
    std::vector<double> bc;  // C; only the inner-product similarity uses it
    std::vector<double> wg;  // input_dim
    double bg = 0.0;

    double bn_gamma = 1.0;
    double bn_beta = 0.0;
    double bn_run_mean = 0.0;
    double bn_run_var = 1.0;
    double bn_eps = 1e-5;
    double bn_momentum = 0.9;

    int input_dim() const { return context * context * feat_dim; }
};

struct TrainConfig {
    double lr = 1e-2;
    int batch_size = 32;
    int epochs = 10;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double gamma = 0.999;  // per-step exponential lr decay
    std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Initialization: Glorot-uniform weights, zero biases.

inline DenseLayer make_layer(int in, int out, Rng& rng) {
    DenseLayer l;
    l.in = in;
    l.out = out;
    l.W.resize(static_cast<std::size_t>(in) * out);
    l.b.assign(out, 0.0);
    const double bound = std::sqrt(6.0 / (in + out));
    for (auto& w : l.W) w = rng.uniform(-bound, bound);
    return l;
}

inline MlpClassifier make_mlp(int bands, int context, const std::vector<int>& hidden,
                              int num_classes, std::uint64_t seed) {
    if (context < 1 || context % 2 == 0)
        throw std::invalid_argument("make_mlp: context must be odd and positive");
    Rng rng(mix_seed(seed, {0x4D4C50ull}));
    MlpClassifier m;
    m.context = context;
    int prev = bands * context * context;
    for (int h : hidden) {
        m.layers.push_back(make_layer(prev, h, rng));
        prev = h;
    }
    m.layers.push_back(make_layer(prev, num_classes, rng));
    return m;
}

inline GodinHead make_godin_head(Similarity sim, int feat_dim, int num_classes, int context,
                                 std::uint64_t seed) {
    if (context != 1 && context != 3)
        throw std::invalid_argument("make_godin_head: context must be 1 or 3");
    Rng rng(mix_seed(seed, {0x474F44ull}));
    GodinHead h;
    h.sim = sim;
    h.context = context;
    h.feat_dim = feat_dim;
    h.num_classes = num_classes;
    const int d = h.input_dim();
    h.Wc = Matrix(num_classes, d);
    h.bc.assign(num_classes, 0.0);
    h.wg.resize(d);
    const double bound = std::sqrt(6.0 / (d + num_classes));
    for (auto& w : h.Wc.v) w = rng.uniform(-bound, bound);
    const double gbound = std::sqrt(6.0 / (d + 1));
    for (auto& w : h.wg) w = rng.uniform(-gbound, gbound);
    return h;
}

// ---------------------------------------------------------------------------
// Forward / loss / backward.

struct MlpCache {
    std::vector<Matrix> acts;  // acts[0] = input; acts[l+1] = output of layer l (ReLU on hidden)
};

inline MlpCache mlp_forward_cache(const MlpClassifier& m, const Matrix& x) {
    if (x.cols != m.input_dim())
        throw std::invalid_argument("forward: input width " + std::to_string(x.cols) +
                                    " != model input " + std::to_string(m.input_dim()));
    MlpCache cache;
    cache.acts.reserve(m.layers.size() + 1);
    cache.acts.push_back(x);
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        const DenseLayer& layer = m.layers[l];
        const Matrix& in = cache.acts.back();
        Matrix out(in.rows, layer.out);
        for (int r = 0; r < in.rows; ++r)
            for (int o = 0; o < layer.out; ++o)
                out.at(r, o) = dot(in.row(r), layer.W.data() + static_cast<std::size_t>(o) * layer.in,
                                   layer.in) +
                               layer.b[o];
        if (l + 1 < m.layers.size())
            for (auto& v : out.v) v = std::max(v, 0.0);
        cache.acts.push_back(std::move(out));
    }
    return cache;
}

struct ForwardResult {
    Matrix logits;    // N x C
    Matrix features;  // N x feature_dim (penultimate activations)
};

inline ForwardResult forward(const MlpClassifier& m, const Matrix& batch) {
    MlpCache cache = mlp_forward_cache(m, batch);
    ForwardResult r;
    r.logits = cache.acts.back();
    r.features = cache.acts[cache.acts.size() - 2];
    return r;
}

// Mean softmax cross-entropy over the batch; labels are 1-based class ids.
inline double loss_ce(const Matrix& logits, const std::vector<int>& labels) {
    if (logits.rows == 0) throw std::invalid_argument("loss_ce: empty batch");
    if (static_cast<int>(labels.size()) != logits.rows)
        throw std::invalid_argument("loss_ce: label count mismatch");
    double total = 0.0;
    for (int r = 0; r < logits.rows; ++r) {
        const int y = labels[r];
        if (y < 1 || y > logits.cols) throw std::invalid_argument("loss_ce: label out of range");
        const double* row = logits.row(r);
        double mx = row[0];
        for (int c = 1; c < logits.cols; ++c) mx = std::max(mx, row[c]);
        double lse = 0.0;
        for (int c = 0; c < logits.cols; ++c) lse += std::exp(row[c] - mx);
        total += mx + std::log(lse) - row[y - 1];
    }
    return total / logits.rows;
}

// Parameter flattening: one contiguous ordering shared by gradients and
// the Adam state. Layers first (W then b), then head (Wc, bc, wg, bg,
// bn_gamma, bn_beta).
inline std::vector<double*> collect_params(MlpClassifier& m, GodinHead* head) {
    std::vector<double*> p;
    for (auto& l : m.layers) {
        for (auto& w : l.W) p.push_back(&w);
        for (auto& b : l.b) p.push_back(&b);
    }
    if (head) {
        for (auto& w : head->Wc.v) p.push_back(&w);
        for (auto& b : head->bc) p.push_back(&b);
        for (auto& w : head->wg) p.push_back(&w);
        p.push_back(&head->bg);
        p.push_back(&head->bn_gamma);
        p.push_back(&head->bn_beta);
    }
    return p;
}

namespace detail {

// Backprop through the dense stack given gradients on acts[top].
// top = layers.size() backpropagates from the logits; top = layers.size()-1
// backpropagates from the penultimate features (the last layer gets zero
// gradients, as in GODIN training where the head replaces it).
inline void mlp_backward_from(const MlpClassifier& m, const MlpCache& cache, Matrix delta,
                              std::size_t top, std::vector<double>& grads, std::size_t offset) {
    // Gradient slot offsets per layer.
    std::vector<std::size_t> layer_off(m.layers.size());
    std::size_t off = offset;
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        layer_off[l] = off;
        off += m.layers[l].W.size() + m.layers[l].b.size();
    }
    for (std::size_t li = top; li-- > 0;) {
        const DenseLayer& layer = m.layers[li];
        const Matrix& in = cache.acts[li];
        double* gW = grads.data() + layer_off[li];
        double* gb = gW + layer.W.size();
        Matrix dprev(in.rows, layer.in);
        for (int r = 0; r < in.rows; ++r) {
            const double* din = delta.row(r);
            const double* xin = in.row(r);
            for (int o = 0; o < layer.out; ++o) {
                const double d = din[o];
                if (d == 0.0) continue;
                double* wrow = gW + static_cast<std::size_t>(o) * layer.in;
                const double* lw = layer.W.data() + static_cast<std::size_t>(o) * layer.in;
                for (int i = 0; i < layer.in; ++i) {
                    wrow[i] += d * xin[i];
                    dprev.at(r, i) += d * lw[i];
                }
                gb[o] += d;
            }
        }
        if (li > 0) {  // ReLU mask of the producing hidden layer
            const Matrix& act = cache.acts[li];
            for (std::size_t t = 0; t < dprev.v.size(); ++t)
                if (act.v[t] <= 0.0) dprev.v[t] = 0.0;
        }
        delta = std::move(dprev);
    }
}

inline std::size_t param_count(const MlpClassifier& m, const GodinHead* head) {
    std::size_t n = 0;
    for (const auto& l : m.layers) n += l.W.size() + l.b.size();
    if (head) n += head->Wc.v.size() + head->bc.size() + head->wg.size() + 3;
    return n;
}

}  // namespace detail

// Gradients of loss_ce w.r.t. every model parameter, flat in
// collect_params order. Returns the loss as well.
struct LossGrads {
    double loss = 0.0;
    std::vector<double> grads;
};

inline LossGrads backward(const MlpClassifier& m, const Matrix& batch,
                          const std::vector<int>& labels) {
    MlpCache cache = mlp_forward_cache(m, batch);
    const Matrix& logits = cache.acts.back();
    LossGrads out;
    out.loss = loss_ce(logits, labels);
    out.grads.assign(detail::param_count(m, nullptr), 0.0);

    const int n = logits.rows;
    Matrix delta = logits;
    for (int r = 0; r < n; ++r) {
        softmax_inplace(delta.row(r), delta.cols);
        delta.at(r, labels[r] - 1) -= 1.0;
        for (int c = 0; c < delta.cols; ++c) delta.at(r, c) /= n;
    }
    detail::mlp_backward_from(m, cache, std::move(delta), m.layers.size(), out.grads, 0);
    return out;
}

// ---------------------------------------------------------------------------
// Adam with per-step exponential lr decay.

struct AdamState {
    std::vector<double> m, v;
    int step = 0;  // completed steps
};

inline void adam_step(const std::vector<double*>& params, const std::vector<double>& grads,
                      AdamState& state, const TrainConfig& cfg) {
    if (grads.size() != params.size()) throw std::invalid_argument("adam_step: size mismatch");
    if (state.m.empty()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    }
    const double lr = cfg.lr * std::pow(cfg.gamma, state.step);
    const int t = ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        *params[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

// ---------------------------------------------------------------------------
// GODIN forward (inference) and training loss/gradients.

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

namespace detail {

inline double godin_similarity(const GodinHead& h, int c, const double* u, double u_norm) {
    const int d = h.input_dim();
    const double* w = h.Wc.row(c);
    switch (h.sim) {
        case Similarity::InnerProduct:
            return dot(w, u, d) + h.bc[c];
        case Similarity::Euclidean: {
            double s = 0.0;
            for (int i = 0; i < d; ++i) {
                const double diff = u[i] - w[i];
                s += diff * diff;
            }
            return -s;
        }
        case Similarity::Cosine: {
            const double wn = std::sqrt(dot(w, w, d));
            if (wn == 0.0 || u_norm == 0.0) return 0.0;
            return dot(w, u, d) / (wn * u_norm);
        }
    }
    throw std::logic_error("godin_similarity");
}

}  // namespace detail

struct GodinOutput {
    std::vector<double> h;      // per-class similarity
    double g = 0.0;             // sigmoid-bounded divisor
    std::vector<double> score;  // softmax(h / g)
};

// Inference-mode head evaluation on one gathered feature vector
// (length context^2 * feat_dim). Batch norm uses the frozen running stats.
inline GodinOutput godin_forward(const GodinHead& head, const std::vector<double>& u) {
    if (static_cast<int>(u.size()) != head.input_dim())
        throw std::invalid_argument("godin_forward: feature dim mismatch");
    GodinOutput out;
    const int C = head.num_classes;
    const double u_norm = std::sqrt(dot(u.data(), u.data(), static_cast<int>(u.size())));
    out.h.resize(C);
    for (int c = 0; c < C; ++c) out.h[c] = detail::godin_similarity(head, c, u.data(), u_norm);

    const double z = dot(head.wg.data(), u.data(), head.input_dim()) + head.bg;
    const double xhat = (z - head.bn_run_mean) / std::sqrt(head.bn_run_var + head.bn_eps);
    out.g = sigmoid(head.bn_gamma * xhat + head.bn_beta);

    out.score = out.h;
    for (double& s : out.score) s /= out.g;
    softmax_inplace(out.score.data(), C);
    return out;
}

// One GODIN training sample holds context^2 neighbor inputs for the
// backbone (zero rows where a neighbor falls outside the image).
struct GodinBatch {
    int n = 0;  // samples
    int k = 1;  // neighbors per sample (head context squared)
    Matrix inputs;                      // (n*k) x mlp input_dim
    std::vector<std::uint8_t> present;  // n*k
    std::vector<int> labels;            // 1..C
};

// Training-mode loss and gradients for the full GODIN network (backbone +
// head). Batch norm uses batch statistics; when update_bn_stats is set the
// running averages are updated with momentum.
inline LossGrads godin_backward(const MlpClassifier& m, GodinHead& head, const GodinBatch& batch,
                                bool update_bn_stats) {
    if (batch.n == 0) throw std::invalid_argument("godin_backward: empty batch");
    const int K = batch.k;
    const int d = head.feat_dim;
    const int D = head.input_dim();
    const int C = head.num_classes;
    if (K != head.context * head.context)
        throw std::invalid_argument("godin_backward: neighbor count mismatch");
    if (m.feature_dim() != d) throw std::invalid_argument("godin_backward: feature dim mismatch");

    MlpCache cache = mlp_forward_cache(m, batch.inputs);
    const Matrix& phi = cache.acts[cache.acts.size() - 2];

    // Gather u_n = concat of the K neighbor features, zeros where absent.
    Matrix u(batch.n, D);
    for (int s = 0; s < batch.n; ++s)
        for (int q = 0; q < K; ++q)
            if (batch.present[static_cast<std::size_t>(s) * K + q])
                for (int i = 0; i < d; ++i) u.at(s, q * d + i) = phi.at(s * K + q, i);

    std::vector<double> u_norm(batch.n);
    for (int s = 0; s < batch.n; ++s) u_norm[s] = std::sqrt(dot(u.row(s), u.row(s), D));

    Matrix h(batch.n, C);
    for (int s = 0; s < batch.n; ++s)
        for (int c = 0; c < C; ++c)
            h.at(s, c) = detail::godin_similarity(head, c, u.row(s), u_norm[s]);

    // g branch with batch-statistics batch norm.
    std::vector<double> z(batch.n);
    for (int s = 0; s < batch.n; ++s) z[s] = dot(head.wg.data(), u.row(s), D) + head.bg;
    double mu = 0.0;
    for (double v : z) mu += v;
    mu /= batch.n;
    double var = 0.0;
    for (double v : z) var += (v - mu) * (v - mu);
    var /= batch.n;
    const double inv_std = 1.0 / std::sqrt(var + head.bn_eps);

    std::vector<double> xhat(batch.n), g(batch.n);
    for (int s = 0; s < batch.n; ++s) {
        xhat[s] = (z[s] - mu) * inv_std;
        g[s] = sigmoid(head.bn_gamma * xhat[s] + head.bn_beta);
    }
    if (update_bn_stats) {
        head.bn_run_mean = head.bn_momentum * head.bn_run_mean + (1.0 - head.bn_momentum) * mu;
        head.bn_run_var = head.bn_momentum * head.bn_run_var + (1.0 - head.bn_momentum) * var;
    }

    // s~ = h / g, loss = mean CE of softmax(s~).
    Matrix stilde(batch.n, C);
    for (int s = 0; s < batch.n; ++s)
        for (int c = 0; c < C; ++c) stilde.at(s, c) = h.at(s, c) / g[s];

    LossGrads out;
    out.loss = loss_ce(stilde, batch.labels);
    out.grads.assign(detail::param_count(m, &head), 0.0);

    std::size_t off = 0;
    for (const auto& l : m.layers) off += l.W.size() + l.b.size();
    double* gWc = out.grads.data() + off;
    double* gbc = gWc + head.Wc.v.size();
    double* gwg = gbc + head.bc.size();
    double* gbg = gwg + head.wg.size();
    double* gbn_gamma = gbg + 1;
    double* gbn_beta = gbn_gamma + 1;

    Matrix dstilde = stilde;
    for (int s = 0; s < batch.n; ++s) {
        softmax_inplace(dstilde.row(s), C);
        dstilde.at(s, batch.labels[s] - 1) -= 1.0;
        for (int c = 0; c < C; ++c) dstilde.at(s, c) /= batch.n;
    }

    Matrix du(batch.n, D);
    std::vector<double> dg(batch.n, 0.0);
    for (int s = 0; s < batch.n; ++s) {
        const double gs = g[s];
        for (int c = 0; c < C; ++c) {
            const double ds = dstilde.at(s, c);
            const double dh = ds / gs;
            dg[s] -= ds * h.at(s, c) / (gs * gs);
            const double* w = head.Wc.row(c);
            double* gw = gWc + static_cast<std::size_t>(c) * D;
            switch (head.sim) {
                case Similarity::InnerProduct:
                    for (int i = 0; i < D; ++i) {
                        gw[i] += dh * u.at(s, i);
                        du.at(s, i) += dh * w[i];
                    }
                    gbc[c] += dh;
                    break;
                case Similarity::Euclidean:
                    for (int i = 0; i < D; ++i) {
                        const double diff = u.at(s, i) - w[i];
                        gw[i] += dh * 2.0 * diff;
                        du.at(s, i) -= dh * 2.0 * diff;
                    }
                    break;
                case Similarity::Cosine: {
                    const double wn = std::sqrt(dot(w, w, D));
                    const double un = u_norm[s];
                    if (wn == 0.0 || un == 0.0) break;
                    const double a = dot(w, u.row(s), D);
                    for (int i = 0; i < D; ++i) {
                        du.at(s, i) += dh * (w[i] / (wn * un) - a * u.at(s, i) / (wn * un * un * un));
                        gw[i] += dh * (u.at(s, i) / (wn * un) - a * w[i] / (wn * wn * wn * un));
                    }
                    break;
                }
            }
        }
    }

    // g = sigmoid(gamma * xhat + beta); batch-norm backward over the batch.
    std::vector<double> dy(batch.n);
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (int s = 0; s < batch.n; ++s) {
        dy[s] = dg[s] * g[s] * (1.0 - g[s]);
        *gbn_gamma += dy[s] * xhat[s];
        *gbn_beta += dy[s];
    }
    std::vector<double> dxhat(batch.n);
    for (int s = 0; s < batch.n; ++s) {
        dxhat[s] = dy[s] * head.bn_gamma;
        mean_dxhat += dxhat[s];
        mean_dxhat_xhat += dxhat[s] * xhat[s];
    }
    mean_dxhat /= batch.n;
    mean_dxhat_xhat /= batch.n;
    for (int s = 0; s < batch.n; ++s) {
        const double dz = inv_std * (dxhat[s] - mean_dxhat - xhat[s] * mean_dxhat_xhat);
        *gbg += dz;
        for (int i = 0; i < D; ++i) gwg[i] += dz * u.at(s, i);
        for (int i = 0; i < D; ++i) du.at(s, i) += dz * head.wg[i];
    }

    // Split du into per-neighbor feature gradients and backpropagate
    // through the backbone (absent neighbors contributed zeros, so they
    // receive no gradient).
    Matrix dphi(batch.n * K, phi.cols);
    for (int s = 0; s < batch.n; ++s)
        for (int q = 0; q < K; ++q)
            if (batch.present[static_cast<std::size_t>(s) * K + q])
                for (int i = 0; i < d; ++i) dphi.at(s * K + q, i) = du.at(s, q * d + i);
    if (m.layers.size() > 1) {
        // The feature map is the post-ReLU output of the last hidden layer.
        const Matrix& act = cache.acts[cache.acts.size() - 2];
        for (std::size_t t = 0; t < dphi.v.size(); ++t)
            if (act.v[t] <= 0.0) dphi.v[t] = 0.0;
        detail::mlp_backward_from(m, cache, std::move(dphi), m.layers.size() - 1, out.grads, 0);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training loop.

struct TrainSet {
    Matrix inputs;                      // plain: n x input_dim; GODIN context: (n*k) x input_dim
    std::vector<std::uint8_t> present;  // n*k; empty means all present
    std::vector<int> labels;            // 1..C
    int neighbors = 1;                  // k
};

struct FitReport {
    double final_loss = 0.0;
    std::vector<std::size_t> label_histogram;  // index 0 unused by construction
};

// Runs epochs x minibatches of adam_step. Plain MLP when head == nullptr,
// GODIN (loss on softmax(h/g)) otherwise. Deterministic given cfg.seed.
inline FitReport fit(MlpClassifier& model, GodinHead* head, const TrainSet& data,
                     const TrainConfig& cfg) {
    const int n = static_cast<int>(data.labels.size());
    if (n == 0) throw std::invalid_argument("fit: empty dataset");
    const int K = data.neighbors;
    const int C = head ? head->num_classes : model.num_classes();

    FitReport report;
    report.label_histogram.assign(C + 1, 0);
    for (int y : data.labels) {
        if (y < 1 || y > C) throw std::invalid_argument("fit: label outside 1..C");
        ++report.label_histogram[y];
    }

    std::vector<double*> params = collect_params(model, head);
    AdamState state;
    Rng rng(mix_seed(cfg.seed, {0x464954ull}));
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;

    const int in_dim = model.input_dim();
    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (int start = 0; start < n; start += cfg.batch_size) {
            const int bn = std::min(cfg.batch_size, n - start);
            LossGrads lg;
            if (!head) {
                Matrix x(bn, in_dim);
                std::vector<int> y(bn);
                for (int r = 0; r < bn; ++r) {
                    const int s = order[start + r];
                    std::copy_n(data.inputs.row(s), in_dim, x.row(r));
                    y[r] = data.labels[s];
                }
                lg = backward(model, x, y);
            } else {
                GodinBatch gb;
                gb.n = bn;
                gb.k = K;
                gb.inputs = Matrix(bn * K, in_dim);
                gb.present.resize(static_cast<std::size_t>(bn) * K);
                gb.labels.resize(bn);
                for (int r = 0; r < bn; ++r) {
                    const int s = order[start + r];
                    for (int q = 0; q < K; ++q) {
                        std::copy_n(data.inputs.row(s * K + q), in_dim, gb.inputs.row(r * K + q));
                        gb.present[static_cast<std::size_t>(r) * K + q] =
                            data.present.empty() ? 1 : data.present[static_cast<std::size_t>(s) * K + q];
                    }
                    gb.labels[r] = data.labels[s];
                }
                lg = godin_backward(model, *head, gb, /*update_bn_stats=*/true);
            }
            if (!std::isfinite(lg.loss))
                throw std::runtime_error("fit: non-finite loss at step " + std::to_string(step));
            adam_step(params, lg.grads, state, cfg);
            ++step;
            report.final_loss = lg.loss;
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Checkpoints: one tensor container per parameter block plus a JSON
// manifest of layer shapes and head kind.

inline void save_model(const std::string& dir, const MlpClassifier& m, const GodinHead* head) {
    std::filesystem::create_directories(dir);
    nlohmann::json arch;
    arch["context"] = m.context;
    arch["layers"] = nlohmann::json::array();
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        arch["layers"].push_back({{"in", m.layers[l].in}, {"out", m.layers[l].out}});
        const std::string base = dir + "/layer" + std::to_string(l);
        write_tensor(base + "_W",
                     {static_cast<std::size_t>(m.layers[l].out), static_cast<std::size_t>(m.layers[l].in)},
                     m.layers[l].W);
        write_tensor(base + "_b", {static_cast<std::size_t>(m.layers[l].out)}, m.layers[l].b);
    }
    if (head) {
        arch["head"] = {{"similarity", similarity_name(head->sim)},
                        {"context", head->context},
                        {"feat_dim", head->feat_dim},
                        {"num_classes", head->num_classes},
                        {"bn_run_mean", head->bn_run_mean},
                        {"bn_run_var", head->bn_run_var},
                        {"bn_gamma", head->bn_gamma},
                        {"bn_beta", head->bn_beta},
                        {"bn_eps", head->bn_eps},
                        {"bg", head->bg}};
        write_tensor(dir + "/head_Wc",
                     {static_cast<std::size_t>(head->num_classes),
                      static_cast<std::size_t>(head->input_dim())},
                     head->Wc.v);
        write_tensor(dir + "/head_bc", {static_cast<std::size_t>(head->num_classes)}, head->bc);
        write_tensor(dir + "/head_wg", {static_cast<std::size_t>(head->input_dim())}, head->wg);
    }
    std::ofstream f(dir + "/model.json", std::ios::trunc);
    if (!f) throw std::runtime_error("save_model: cannot open " + dir + "/model.json");
    f << arch.dump(2) << "\n";
}

struct LoadedModel {
    MlpClassifier model;
    bool has_head = false;
    GodinHead head;
};

inline LoadedModel load_model(const std::string& dir) {
    std::ifstream f(dir + "/model.json");
    if (!f) throw std::runtime_error("load_model: missing " + dir + "/model.json");
    nlohmann::json arch = nlohmann::json::parse(f);

    LoadedModel lm;
    lm.model.context = arch.at("context").get<int>();
    for (std::size_t l = 0; l < arch.at("layers").size(); ++l) {
        DenseLayer layer;
        layer.in = arch["layers"][l].at("in").get<int>();
        layer.out = arch["layers"][l].at("out").get<int>();
        const std::string base = dir + "/layer" + std::to_string(l);
        layer.W = read_tensor(base + "_W").second;
        layer.b = read_tensor(base + "_b").second;
        if (layer.W.size() != static_cast<std::size_t>(layer.in) * layer.out)
            throw std::runtime_error("load_model: layer shape mismatch");
        lm.model.layers.push_back(std::move(layer));
    }
    if (arch.contains("head")) {
        const auto& h = arch["head"];
        lm.has_head = true;
        lm.head.sim = similarity_from_name(h.at("similarity").get<std::string>());
        lm.head.context = h.at("context").get<int>();
        lm.head.feat_dim = h.at("feat_dim").get<int>();
        lm.head.num_classes = h.at("num_classes").get<int>();
        lm.head.bn_run_mean = h.at("bn_run_mean").get<double>();
        lm.head.bn_run_var = h.at("bn_run_var").get<double>();
        lm.head.bn_gamma = h.at("bn_gamma").get<double>();
        lm.head.bn_beta = h.at("bn_beta").get<double>();
        lm.head.bn_eps = h.at("bn_eps").get<double>();
        lm.head.bg = h.at("bg").get<double>();
        lm.head.Wc = Matrix(lm.head.num_classes, lm.head.input_dim());
        lm.head.Wc.v = read_tensor(dir + "/head_Wc").second;
        lm.head.bc = read_tensor(dir + "/head_bc").second;
        lm.head.wg = read_tensor(dir + "/head_wg").second;
    }
    return lm;
}

}  // namespace oodseg
