#pragma once

// Client objectives with hand-written gradients: multinomial softmax regression,
// a one-hidden-layer MLP, and closed-form quadratic toy risks. Plus mini-batch SGD.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "cfl/numerics.hpp"

namespace cfl {

enum class ModelKind { softmax, mlp, quadratic };
enum class Activation { tanh, relu };

inline const char* to_string(ModelKind k) {
    switch (k) {
        case ModelKind::softmax: return "softmax";
        case ModelKind::mlp: return "mlp";
        case ModelKind::quadratic: return "quadratic";
    }
    return "?";
}

inline const char* to_string(Activation a) { return a == Activation::tanh ? "tanh" : "relu"; }

struct ModelSpec {
    ModelKind kind = ModelKind::softmax;
    int input_dim = 0;    // p
    int classes = 0;      // C
    int hidden = 0;       // h, mlp only
    Activation activation = Activation::tanh;
    ParamVec center;      // quadratic only

    static ModelSpec softmax(int p, int c) { return {ModelKind::softmax, p, c, 0, Activation::tanh, {}}; }
    static ModelSpec mlp(int p, int h, int c, Activation act = Activation::tanh) {
        return {ModelKind::mlp, p, c, h, act, {}};
    }
    static ModelSpec quadratic(ParamVec mu) {
        const int d = static_cast<int>(mu.dim());
        return {ModelKind::quadratic, d, 0, 0, Activation::tanh, std::move(mu)};
    }

    bool is_classifier() const noexcept { return kind != ModelKind::quadratic; }

    std::size_t param_dim() const {
        switch (kind) {
            case ModelKind::softmax: return static_cast<std::size_t>(input_dim + 1) * classes;
            case ModelKind::mlp:
                return static_cast<std::size_t>(input_dim + 1) * hidden + static_cast<std::size_t>(hidden + 1) * classes;
            case ModelKind::quadratic: return center.dim();
        }
        return 0;
    }

    void validate() const {
        switch (kind) {
            case ModelKind::softmax:
                if (input_dim < 1 || classes < 2) throw InvalidArgument("softmax spec needs p >= 1 and C >= 2");
                break;
            case ModelKind::mlp:
                if (input_dim < 1 || classes < 2 || hidden < 1)
                    throw InvalidArgument("mlp spec needs p >= 1, h >= 1 and C >= 2");
                break;
            case ModelKind::quadratic:
                if (center.empty()) throw InvalidArgument("quadratic spec needs a center");
                break;
        }
    }
};

/// Row-major examples with integer class labels.
struct Batch {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> features;
    std::vector<int> labels;

    std::span<const double> row(std::size_t i) const { return {features.data() + i * cols, cols}; }
    std::size_t size() const noexcept { return rows; }

    void validate(int classes) const {
        if (rows == 0) throw InvalidArgument("batch must contain at least one example");
        if (features.size() != rows * cols || labels.size() != rows) throw InvalidArgument("batch shape mismatch");
        if (classes > 0) {
            for (int y : labels) {
                if (y < 0 || y >= classes) throw InvalidArgument("batch label out of range");
            }
        }
    }

    Batch subset(std::span<const int> idx) const {
        Batch b;
        b.rows = idx.size();
        b.cols = cols;
        b.features.reserve(idx.size() * cols);
        b.labels.reserve(idx.size());
        for (int i : idx) {
            const auto r = row(static_cast<std::size_t>(i));
            b.features.insert(b.features.end(), r.begin(), r.end());
            b.labels.push_back(labels[static_cast<std::size_t>(i)]);
        }
        return b;
    }
};

namespace detail {

inline void require_theta(const ModelSpec& spec, const ParamVec& theta) {
    if (theta.dim() != spec.param_dim()) {
        throw InvalidArgument("parameter dimension " + std::to_string(theta.dim()) + " does not match model (" +
                              std::to_string(spec.param_dim()) + ")");
    }
}

inline void require_features(const ModelSpec& spec, const Batch& batch) {
    if (batch.cols != static_cast<std::size_t>(spec.input_dim))
        throw InvalidArgument("batch feature dimension does not match model input dimension");
    batch.validate(spec.classes);
}

// Affine layer: rows of (in + 1) values, weights then bias.
inline void affine(const double* w, int out_dim, int in_dim, std::span<const double> x, std::vector<double>& z) {
    z.assign(static_cast<std::size_t>(out_dim), 0.0);
    for (int o = 0; o < out_dim; ++o) {
        const double* r = w + static_cast<std::size_t>(o) * (in_dim + 1);
        double s = 0.0;
        for (int i = 0; i < in_dim; ++i) s += r[i] * x[static_cast<std::size_t>(i)];
        z[static_cast<std::size_t>(o)] = s + r[in_dim];
    }
}

// In-place softmax; returns log-sum-exp of the logits.
inline double softmax_inplace(std::vector<double>& z) {
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    double s = 0.0;
    for (double& v : z) {
        v = std::exp(v - mx);
        s += v;
    }
    for (double& v : z) v /= s;
    return mx + std::log(s);
}

struct Workspace {
    std::vector<double> hidden_pre, hidden_act, logits, delta_hidden;
};

// Forward pass for one example. Fills ws.logits with class probabilities and
// returns the example's cross-entropy.
inline double forward(const ModelSpec& spec, const double* theta, std::span<const double> x, int y, Workspace& ws) {
    const int p = spec.input_dim;
    const int c = spec.classes;
    if (spec.kind == ModelKind::softmax) {
        affine(theta, c, p, x, ws.logits);
    } else {
        const int h = spec.hidden;
        affine(theta, h, p, x, ws.hidden_pre);
        ws.hidden_act.resize(static_cast<std::size_t>(h));
        for (int j = 0; j < h; ++j) {
            const double z = ws.hidden_pre[static_cast<std::size_t>(j)];
            ws.hidden_act[static_cast<std::size_t>(j)] = spec.activation == Activation::tanh ? std::tanh(z) : (z > 0.0 ? z : 0.0);
        }
        affine(theta + static_cast<std::size_t>(p + 1) * h, c, h, ws.hidden_act, ws.logits);
    }
    const double raw_y = ws.logits[static_cast<std::size_t>(y)];
    const double lse = softmax_inplace(ws.logits);
    return lse - raw_y;
}

}  // namespace detail

/// Initial parameters. Quadratic objectives start at the origin; classifier
/// weights are uniform in +-1/sqrt(fan_in) with zero biases.
inline ParamVec init_params(const ModelSpec& spec, RandomStream& rng) {
    spec.validate();
    std::vector<double> theta(spec.param_dim(), 0.0);
    auto fill_layer = [&](std::size_t offset, int out_dim, int in_dim) {
        const double a = 1.0 / std::sqrt(static_cast<double>(in_dim));
        for (int o = 0; o < out_dim; ++o) {
            for (int i = 0; i < in_dim; ++i) theta[offset + static_cast<std::size_t>(o) * (in_dim + 1) + i] = rng.uniform(-a, a);
        }
    };
    switch (spec.kind) {
        case ModelKind::quadratic: break;
        case ModelKind::softmax: fill_layer(0, spec.classes, spec.input_dim); break;
        case ModelKind::mlp:
            fill_layer(0, spec.hidden, spec.input_dim);
            fill_layer(static_cast<std::size_t>(spec.input_dim + 1) * spec.hidden, spec.classes, spec.hidden);
            break;
    }
    return ParamVec(std::move(theta));
}

/// Mean cross-entropy over the batch; quadratic objectives return 0.5 |theta - mu|^2.
inline double loss(const ModelSpec& spec, const ParamVec& theta, const Batch& batch) {
    detail::require_theta(spec, theta);
    if (spec.kind == ModelKind::quadratic) {
        const ParamVec diff = theta - spec.center;
        return 0.5 * dot(diff, diff);
    }
    detail::require_features(spec, batch);
    detail::Workspace ws;
    double total = 0.0;
    for (std::size_t n = 0; n < batch.rows; ++n) total += detail::forward(spec, theta.values().data(), batch.row(n), batch.labels[n], ws);
    return total / static_cast<double>(batch.rows);
}

/// Analytic gradient of `loss`.
inline ParamVec grad(const ModelSpec& spec, const ParamVec& theta, const Batch& batch) {
    detail::require_theta(spec, theta);
    if (spec.kind == ModelKind::quadratic) return theta - spec.center;
    detail::require_features(spec, batch);

    const int p = spec.input_dim;
    const int c = spec.classes;
    const double inv_n = 1.0 / static_cast<double>(batch.rows);
    const double* th = theta.values().data();
    std::vector<double> g(spec.param_dim(), 0.0);
    detail::Workspace ws;

    for (std::size_t n = 0; n < batch.rows; ++n) {
        const auto x = batch.row(n);
        const int y = batch.labels[n];
        detail::forward(spec, th, x, y, ws);
        std::vector<double>& delta = ws.logits;  // becomes dL/dlogits
        delta[static_cast<std::size_t>(y)] -= 1.0;

        if (spec.kind == ModelKind::softmax) {
            for (int k = 0; k < c; ++k) {
                double* row = g.data() + static_cast<std::size_t>(k) * (p + 1);
                const double dk = delta[static_cast<std::size_t>(k)] * inv_n;
                for (int i = 0; i < p; ++i) row[i] += dk * x[static_cast<std::size_t>(i)];
                row[p] += dk;
            }
            continue;
        }

        const int h = spec.hidden;
        const std::size_t out_off = static_cast<std::size_t>(p + 1) * h;
        ws.delta_hidden.assign(static_cast<std::size_t>(h), 0.0);
        for (int k = 0; k < c; ++k) {
            const double dk = delta[static_cast<std::size_t>(k)];
            const double* w2 = th + out_off + static_cast<std::size_t>(k) * (h + 1);
            double* g2 = g.data() + out_off + static_cast<std::size_t>(k) * (h + 1);
            for (int j = 0; j < h; ++j) {
                g2[j] += dk * inv_n * ws.hidden_act[static_cast<std::size_t>(j)];
                ws.delta_hidden[static_cast<std::size_t>(j)] += dk * w2[j];
            }
            g2[h] += dk * inv_n;
        }
        for (int j = 0; j < h; ++j) {
            const double a = ws.hidden_act[static_cast<std::size_t>(j)];
            const double z = ws.hidden_pre[static_cast<std::size_t>(j)];
            const double dact = spec.activation == Activation::tanh ? 1.0 - a * a : (z > 0.0 ? 1.0 : 0.0);
            const double dj = ws.delta_hidden[static_cast<std::size_t>(j)] * dact * inv_n;
            double* g1 = g.data() + static_cast<std::size_t>(j) * (p + 1);
            for (int i = 0; i < p; ++i) g1[i] += dj * x[static_cast<std::size_t>(i)];
            g1[p] += dj;
        }
    }
    return ParamVec(std::move(g));
}

/// How `n` in sgd_n is counted.
enum class LocalSteps { epochs, steps };

inline const char* to_string(LocalSteps s) { return s == LocalSteps::epochs ? "epochs" : "steps"; }

/// Local training: `n` epochs (or raw mini-batch steps) of plain SGD.
///
/// Each epoch draws a fresh permutation of the data from `rng`; the final short
/// batch is kept. Quadratic objectives take one full gradient step per epoch.
inline ParamVec sgd_n(const ModelSpec& spec, const ParamVec& theta, const Batch& data, int n, double lr, int batch_size,
                      RandomStream& rng, LocalSteps mode = LocalSteps::epochs) {
    detail::require_theta(spec, theta);
    if (n <= 0) throw InvalidArgument("sgd_n: n must be positive");
    if (!(lr > 0.0)) throw InvalidArgument("sgd_n: learning rate must be positive");
    if (batch_size <= 0) throw InvalidArgument("sgd_n: batch size must be positive");

    std::vector<double> th = theta.values();
    auto step = [&](const ParamVec& g) {
        for (std::size_t i = 0; i < th.size(); ++i) th[i] -= lr * g[i];
    };

    if (spec.kind == ModelKind::quadratic) {
        for (int t = 0; t < n; ++t) step(grad(spec, ParamVec(th), data));
        return ParamVec(std::move(th));
    }

    detail::require_features(spec, data);
    const std::size_t bs = std::min<std::size_t>(static_cast<std::size_t>(batch_size), data.rows);
    const bool full = bs == data.rows;
    int steps_left = n;
    const int epochs = mode == LocalSteps::epochs ? n : std::numeric_limits<int>::max();
    for (int e = 0; e < epochs && steps_left > 0; ++e) {
        const std::vector<int> order = rng.permutation(data.rows);
        for (std::size_t start = 0; start < data.rows; start += bs) {
            const std::size_t len = std::min(bs, data.rows - start);
            if (full) {
                step(grad(spec, ParamVec(th), data));
            } else {
                const Batch mb = data.subset(std::span<const int>(order.data() + start, len));
                step(grad(spec, ParamVec(th), mb));
            }
            if (mode == LocalSteps::steps && --steps_left == 0) break;
        }
    }
    return ParamVec(std::move(th));
}

/// Argmax class for one example; ties go to the lowest class index.
inline int predict(const ModelSpec& spec, const ParamVec& theta, std::span<const double> x) {
    detail::Workspace ws;
    detail::forward(spec, theta.values().data(), x, 0, ws);
    int best = 0;
    for (int k = 1; k < spec.classes; ++k) {
        if (ws.logits[static_cast<std::size_t>(k)] > ws.logits[static_cast<std::size_t>(best)]) best = k;
    }
    return best;
}

inline double accuracy(const ModelSpec& spec, const ParamVec& theta, const Batch& data) {
    if (!spec.is_classifier()) throw InvalidArgument("accuracy is undefined for quadratic objectives");
    detail::require_theta(spec, theta);
    detail::require_features(spec, data);
    std::size_t hits = 0;
    for (std::size_t n = 0; n < data.rows; ++n) {
        if (predict(spec, theta, data.row(n)) == data.labels[n]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(data.rows);
}

}  // namespace cfl
