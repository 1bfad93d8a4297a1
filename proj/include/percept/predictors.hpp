#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "percept/datasets.hpp"
#include "percept/nn/adam.hpp"
#include "percept/nn/layers.hpp"
#include "percept/rng.hpp"
#include "percept/tensor.hpp"

namespace percept {

enum class PredictorKind { mlp, linear };
enum class Activation { rectify, sigmoid };
enum class OutputActivation { none, softmax };

inline const char* to_string(PredictorKind k) { return k == PredictorKind::mlp ? "mlp" : "linear"; }
inline const char* to_string(Activation a) { return a == Activation::rectify ? "relu" : "sigmoid"; }
inline const char* to_string(OutputActivation a) { return a == OutputActivation::none ? "none" : "softmax"; }

struct PredictorConfig {
    PredictorKind kind = PredictorKind::mlp;
    std::vector<int> hidden;
    Activation activation = Activation::rectify;
    OutputActivation output_activation = OutputActivation::none;
    int input_dim = 0;
    int output_dim = 0;

    void validate() const {
        if (kind == PredictorKind::linear && !hidden.empty())
            throw std::invalid_argument("PredictorConfig: linear predictor has no hidden layers");
        if (hidden.size() > 2) throw std::invalid_argument("PredictorConfig: at most two hidden layers");
        for (int h : hidden)
            if (h != 32 && h != 64 && h != 128) throw std::invalid_argument("PredictorConfig: hidden sizes are 32/64/128");
        if (hidden.size() == 2 && hidden[1] > hidden[0])
            throw std::invalid_argument("PredictorConfig: second hidden layer larger than the first");
        if (input_dim <= 0 || output_dim <= 0) throw std::invalid_argument("PredictorConfig: dimensions must be positive");
    }

    /// e.g. "mlp[128,64]-relu-softmax" or "linear".
    std::string name() const {
        if (kind == PredictorKind::linear) return "linear";
        std::ostringstream os;
        os << "mlp[";
        for (std::size_t i = 0; i < hidden.size(); ++i) os << (i ? "," : "") << hidden[i];
        os << "]-" << to_string(activation) << "-" << to_string(output_activation);
        return os.str();
    }

    friend bool operator==(const PredictorConfig&, const PredictorConfig&) = default;
};

/// The full MLP search space in a fixed order: hidden layouts (one layer of
/// 32/64/128, then two layers with h2 <= h1), each with relu and sigmoid
/// hidden activations and no/softmax output.
inline std::vector<PredictorConfig> enumerate_mlp_grid(int input_dim = 1, int output_dim = 1) {
    const int sizes[] = {32, 64, 128};
    std::vector<std::vector<int>> layouts;
    for (int a : sizes) layouts.push_back({a});
    for (int a : sizes)
        for (int b : sizes)
            if (b <= a) layouts.push_back({a, b});
    std::vector<PredictorConfig> grid;
    for (const auto& h : layouts)
        for (Activation act : {Activation::rectify, Activation::sigmoid})
            for (OutputActivation out : {OutputActivation::none, OutputActivation::softmax})
                grid.push_back({PredictorKind::mlp, h, act, out, input_dim, output_dim});
    return grid;
}

inline PredictorConfig linear_config(int input_dim, int output_dim) {
    return {PredictorKind::linear, {}, Activation::rectify, OutputActivation::none, input_dim, output_dim};
}

/// Feed-forward network with a network-wide hidden activation.
class Mlp {
public:
    Mlp() = default;
    Mlp(const PredictorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        Rng rng(seed);
        int in = cfg.input_dim;
        for (int h : cfg.hidden) {
            layers_.emplace_back(in, h);
            in = h;
        }
        layers_.emplace_back(in, cfg.output_dim);
        for (auto& l : layers_) l.init(rng);
    }

    struct Tape {
        std::vector<Tensor<double>> inputs;  // inputs[i] feeds layer i
        Tensor<double> output;               // after output activation
    };

    Tape forward_tape(const Tensor<double>& x) const {
        Tape t;
        Tensor<double> h = x;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            t.inputs.push_back(h);
            h = layers_[i].forward(h);
            if (i + 1 < layers_.size())
                h = cfg_.activation == Activation::rectify ? nn::relu(std::move(h)) : nn::sigmoid(std::move(h));
        }
        if (cfg_.output_activation == OutputActivation::softmax) softmax_rows(h);
        t.output = std::move(h);
        return t;
    }

    Tensor<double> forward(const Tensor<double>& x) const { return forward_tape(x).output; }

    void backward(const Tape& t, Tensor<double> d_out) {
        if (cfg_.output_activation == OutputActivation::softmax) {
            const int n = t.output.dim(0), k = t.output.dim(1);
            for (int r = 0; r < n; ++r) {
                const double* y = t.output.data() + static_cast<std::size_t>(r) * k;
                double* g = d_out.data() + static_cast<std::size_t>(r) * k;
                double dot = 0;
                for (int j = 0; j < k; ++j) dot += y[j] * g[j];
                for (int j = 0; j < k; ++j) g[j] = y[j] * (g[j] - dot);
            }
        }
        Tensor<double> d = std::move(d_out);
        for (std::size_t i = layers_.size(); i-- > 0;) {
            layers_[i].accumulate_grads(t.inputs[i], d);
            if (i == 0) break;
            d = layers_[i].backward_input(t.inputs[i].shape(), d);
            d = cfg_.activation == Activation::rectify ? nn::relu_backward(t.inputs[i], std::move(d))
                                                       : nn::sigmoid_backward(t.inputs[i], std::move(d));
        }
    }

    std::vector<nn::Param<double>> params() {
        std::vector<nn::Param<double>> p;
        for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].params(p, "layer" + std::to_string(i));
        return p;
    }

    const PredictorConfig& config() const { return cfg_; }
    std::vector<nn::Linear<double>>& layers() { return layers_; }

    static void softmax_rows(Tensor<double>& h) {
        const int n = h.dim(0), k = h.dim(1);
        for (int r = 0; r < n; ++r) {
            double* row = h.data() + static_cast<std::size_t>(r) * k;
            const double mx = *std::max_element(row, row + k);
            double s = 0;
            for (int j = 0; j < k; ++j) s += (row[j] = std::exp(row[j] - mx));
            for (int j = 0; j < k; ++j) row[j] /= s;
        }
    }

private:
    PredictorConfig cfg_;
    std::vector<nn::Linear<double>> layers_;
};

/// Optimisation settings for probe training (the search space itself is fixed).
struct ProbeOptions {
    double lr = 1e-3;
    int batch_size = 64;
    int max_epochs = 200;
    int patience = 20;
    /// Position targets are divided by this (image side) before fitting.
    double target_scale = 1.0;
    /// Z-score each embedding dimension with training-row statistics.
    bool standardize = true;
};

/// Per-dimension affine input map; empty means identity.
struct InputScaler {
    std::vector<double> mean, inv_sd;

    static InputScaler fit(const Tensor<double>& x, std::span<const std::size_t> rows) {
        const int d = x.dim(1);
        InputScaler s;
        s.mean.assign(d, 0.0);
        s.inv_sd.assign(d, 1.0);
        std::vector<long double> sum(d, 0), sq(d, 0);
        for (std::size_t r : rows)
            for (int j = 0; j < d; ++j) {
                const double v = x[r * d + j];
                sum[j] += v;
                sq[j] += static_cast<long double>(v) * v;
            }
        const auto n = static_cast<long double>(rows.size());
        for (int j = 0; j < d; ++j) {
            const long double m = sum[j] / n, var = std::max<long double>(0, sq[j] / n - m * m);
            s.mean[j] = static_cast<double>(m);
            if (var > 1e-24L) s.inv_sd[j] = static_cast<double>(1.0L / std::sqrt(var));
        }
        return s;
    }

    Tensor<double> apply(const Tensor<double>& x) const {
        if (mean.empty()) return x;
        Tensor<double> out = x;
        const int d = x.dim(1);
        for (std::size_t i = 0; i < out.size(); ++i) {
            const int j = static_cast<int>(i % d);
            out[i] = (out[i] - mean[j]) * inv_sd[j];
        }
        return out;
    }
};

class PredictorError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainedPredictor {
    PredictorConfig config;
    TaskKind task = TaskKind::positioning;
    double target_scale = 1.0;
    Mlp network;  // used by both kinds; a linear probe is a network without hidden layers
    InputScaler scaler;
    double validation_loss = std::numeric_limits<double>::infinity();
    int epochs = 0;
    bool failed = false;
    std::string failure;
};

/// Labels to a dense target matrix: scaled (x, y) rows or class indices.
struct ProbeTargets {
    TaskKind task;
    Tensor<double> values;  // [N, 2] positions (scaled) or [N, 1] class ids
    int num_outputs;
};

inline ProbeTargets make_targets(const std::vector<Label>& labels, std::optional<int> num_classes, double scale) {
    if (labels.empty()) throw PredictorError("no labels");
    const bool positioning = std::holds_alternative<Position>(labels.front());
    const int n = static_cast<int>(labels.size());
    if (positioning) {
        Tensor<double> t({n, 2});
        for (int i = 0; i < n; ++i) {
            const auto& p = std::get<Position>(labels[i]);
            t[2 * i] = p.x / scale;
            t[2 * i + 1] = p.y / scale;
        }
        return {TaskKind::positioning, std::move(t), 2};
    }
    if (!num_classes) throw PredictorError("classification labels need num_classes");
    Tensor<double> t({n, 1});
    for (int i = 0; i < n; ++i) t[i] = std::get<ClassId>(labels[i]);
    return {TaskKind::classification, std::move(t), *num_classes};
}

namespace detail {

/// Task loss and its gradient for a batch of outputs. Positioning uses mean
/// squared error over coordinates; classification uses cross-entropy with the
/// network outputs taken as logits.
inline double task_loss(TaskKind task, const Tensor<double>& out, const Tensor<double>& targets,
                        std::span<const std::size_t> rows, Tensor<double>* grad) {
    const int n = out.dim(0), k = out.dim(1);
    if (grad) *grad = Tensor<double>(out.shape());
    double loss = 0;
    if (task == TaskKind::positioning) {
        for (int r = 0; r < n; ++r)
            for (int j = 0; j < k; ++j) {
                const double d = out[static_cast<std::size_t>(r) * k + j] - targets[rows[r] * 2 + j];
                loss += d * d;
                if (grad) (*grad)[static_cast<std::size_t>(r) * k + j] = 2.0 * d / (n * k);
            }
        return loss / (n * k);
    }
    for (int r = 0; r < n; ++r) {
        const double* z = out.data() + static_cast<std::size_t>(r) * k;
        const int y = static_cast<int>(targets[rows[r]]);
        const double mx = *std::max_element(z, z + k);
        double s = 0;
        for (int j = 0; j < k; ++j) s += std::exp(z[j] - mx);
        const double lse = mx + std::log(s);
        loss += lse - z[y];
        if (grad)
            for (int j = 0; j < k; ++j)
                (*grad)[static_cast<std::size_t>(r) * k + j] = (std::exp(z[j] - lse) - (j == y ? 1.0 : 0.0)) / n;
    }
    return loss / n;
}

inline Tensor<double> gather_rows(const Tensor<double>& x, std::span<const std::size_t> rows) {
    const int d = x.dim(1);
    Tensor<double> out({static_cast<int>(rows.size()), d});
    for (std::size_t r = 0; r < rows.size(); ++r)
        std::copy_n(x.data() + rows[r] * d, d, out.data() + r * d);
    return out;
}

inline double evaluate_loss(const Mlp& net, TaskKind task, const Tensor<double>& x, const Tensor<double>& targets,
                            std::span<const std::size_t> rows) {
    if (rows.empty()) return std::numeric_limits<double>::quiet_NaN();
    return task_loss(task, net.forward(gather_rows(x, rows)), targets, rows, nullptr);
}

/// Least squares with bias on one-hot or coordinate targets; false when the
/// system is underdetermined.
inline bool fit_linear_closed_form(Mlp& net, TaskKind task, const Tensor<double>& x, const Tensor<double>& targets,
                                   std::span<const std::size_t> rows, int outputs) {
    const int d = x.dim(1);
    const auto n = static_cast<Eigen::Index>(rows.size());
    if (n <= d) return false;
    Eigen::MatrixXd a(n, d + 1), b(n, outputs);
    b.setZero();
    for (Eigen::Index r = 0; r < n; ++r) {
        for (int j = 0; j < d; ++j) a(r, j) = x[rows[r] * d + j];
        a(r, d) = 1.0;
        if (task == TaskKind::positioning)
            for (int j = 0; j < outputs; ++j) b(r, j) = targets[rows[r] * 2 + j];
        else
            b(r, static_cast<int>(targets[rows[r]])) = 1.0;
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
    if (qr.rank() < d + 1) return false;
    const Eigen::MatrixXd w = qr.solve(b);
    auto& layer = net.layers().front();
    for (int o = 0; o < outputs; ++o) {
        for (int j = 0; j < d; ++j) layer.weight()[static_cast<std::size_t>(o) * d + j] = w(j, o);
        layer.bias()[o] = w(d, o);
    }
    return true;
}

/// Squared error against one-hot or coordinate targets (linear probe selection loss).
inline double linear_validation_loss(const Mlp& net, TaskKind task, const Tensor<double>& x,
                                     const Tensor<double>& targets, std::span<const std::size_t> rows) {
    if (task == TaskKind::positioning) return evaluate_loss(net, task, x, targets, rows);
    const Tensor<double> out = net.forward(gather_rows(x, rows));
    const int k = out.dim(1);
    double loss = 0;
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (int j = 0; j < k; ++j) {
            const double t = (j == static_cast<int>(targets[rows[r]])) ? 1.0 : 0.0;
            const double dlt = out[r * k + j] - t;
            loss += dlt * dlt;
        }
    return loss / static_cast<double>(rows.size() * k);
}

}  // namespace detail

/// Trains one probe on frozen embeddings [N, z]. `train_rows` / `val_rows`
/// index into embeddings and labels. Returns the snapshot with the lowest
/// validation loss; a non-finite loss marks the result failed.
inline TrainedPredictor train_predictor(const PredictorConfig& config, const Tensor<double>& raw_embeddings,
                                        const std::vector<Label>& labels, std::optional<int> num_classes,
                                        std::span<const std::size_t> train_rows, std::span<const std::size_t> val_rows,
                                        std::uint64_t seed, const ProbeOptions& opt = {}) {
    config.validate();
    const Tensor<double>& embeddings = raw_embeddings;
    if (embeddings.rank() != 2 || embeddings.dim(1) != config.input_dim)
        throw PredictorError("train_predictor: embeddings must be [N," + std::to_string(config.input_dim) + "]");
    if (static_cast<std::size_t>(embeddings.dim(0)) != labels.size())
        throw PredictorError("train_predictor: embedding/label count mismatch");
    if (train_rows.empty() || val_rows.empty()) throw PredictorError("train_predictor: empty train or validation split");
    const ProbeTargets targets = make_targets(labels, num_classes, opt.target_scale);
    if (targets.num_outputs != config.output_dim)
        throw PredictorError("train_predictor: output_dim " + std::to_string(config.output_dim) + " does not match task (" +
                             std::to_string(targets.num_outputs) + ")");
    if (targets.task == TaskKind::classification) {
        const double first = targets.values[train_rows[0]];
        bool single = true;
        for (std::size_t r : train_rows) single = single && targets.values[r] == first;
        if (single) throw PredictorError("train_predictor: degenerate labels (single class)");
    }

    TrainedPredictor tp;
    tp.config = config;
    tp.task = targets.task;
    tp.target_scale = opt.target_scale;
    tp.network = Mlp(config, seed);
    const int d = config.input_dim;
    for (auto rows : {train_rows, val_rows})
        for (std::size_t r : rows)
            for (int j = 0; j < d; ++j)
                if (!std::isfinite(raw_embeddings[r * d + j])) {
                    tp.failed = true;
                    tp.failure = "non-finite embedding in row " + std::to_string(r);
                    return tp;
                }
    if (opt.standardize) tp.scaler = InputScaler::fit(raw_embeddings, train_rows);
    const Tensor<double> x = tp.scaler.apply(raw_embeddings);

    if (config.kind == PredictorKind::linear &&
        detail::fit_linear_closed_form(tp.network, targets.task, x, targets.values, train_rows,
                                       config.output_dim)) {
        tp.validation_loss = detail::linear_validation_loss(tp.network, targets.task, x, targets.values, val_rows);
        tp.epochs = 0;
        if (!std::isfinite(tp.validation_loss)) {
            tp.failed = true;
            tp.failure = "non-finite validation loss";
        }
        return tp;
    }

    nn::Adam<double> adam(tp.network.params(), {opt.lr});
    Rng rng(derive_seed(seed, 0xba7c4));
    std::vector<std::size_t> order(train_rows.begin(), train_rows.end());
    auto snapshot = [&] {
        std::vector<Tensor<double>> s;
        for (auto& p : tp.network.params()) s.push_back(*p.value);
        return s;
    };
    auto best = snapshot();
    int since_best = 0;
    auto val_loss = [&] {
        return config.kind == PredictorKind::linear
                   ? detail::linear_validation_loss(tp.network, targets.task, x, targets.values, val_rows)
                   : detail::evaluate_loss(tp.network, targets.task, x, targets.values, val_rows);
    };
    for (int epoch = 0; epoch < opt.max_epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
            const std::size_t end = std::min(order.size(), start + opt.batch_size);
            std::span<const std::size_t> rows(order.data() + start, end - start);
            const auto tape = tp.network.forward_tape(detail::gather_rows(x, rows));
            Tensor<double> grad;
            double loss;
            if (config.kind == PredictorKind::linear && targets.task == TaskKind::classification) {
                // Gradient fallback of the one-hot least-squares fit.
                const int k = tape.output.dim(1);
                grad = Tensor<double>(tape.output.shape());
                loss = 0;
                for (std::size_t r = 0; r < rows.size(); ++r)
                    for (int j = 0; j < k; ++j) {
                        const double dlt = tape.output[r * k + j] - (j == static_cast<int>(targets.values[rows[r]]) ? 1.0 : 0.0);
                        loss += dlt * dlt;
                        grad[r * k + j] = 2.0 * dlt / static_cast<double>(rows.size() * k);
                    }
            } else {
                loss = detail::task_loss(targets.task, tape.output, targets.values, rows, &grad);
            }
            if (!std::isfinite(loss)) {
                tp.failed = true;
                tp.failure = "non-finite training loss at epoch " + std::to_string(epoch);
                tp.validation_loss = std::numeric_limits<double>::infinity();
                return tp;
            }
            adam.zero_grad();
            tp.network.backward(tape, std::move(grad));
            adam.step();
        }
        tp.epochs = epoch + 1;
        const double v = val_loss();
        if (!std::isfinite(v)) {
            tp.failed = true;
            tp.failure = "non-finite validation loss at epoch " + std::to_string(epoch);
            tp.validation_loss = std::numeric_limits<double>::infinity();
            return tp;
        }
        if (v < tp.validation_loss) {
            tp.validation_loss = v;
            best = snapshot();
            since_best = 0;
        } else if (++since_best >= opt.patience) {
            break;
        }
    }
    auto params = tp.network.params();
    for (std::size_t i = 0; i < params.size(); ++i) *params[i].value = best[i];
    return tp;
}

/// Raw outputs per row: positions in pixels or class scores.
inline Tensor<double> predict_raw(const TrainedPredictor& tp, const Tensor<double>& embeddings) {
    if (embeddings.rank() != 2 || embeddings.dim(1) != tp.config.input_dim)
        throw PredictorError("predict: expected [N," + std::to_string(tp.config.input_dim) + "] embeddings, got " +
                             Tensor<double>::shape_string(embeddings.shape()));
    Tensor<double> out = tp.network.forward(tp.scaler.apply(embeddings));
    if (tp.task == TaskKind::positioning)
        for (auto& v : out.vec()) v *= tp.target_scale;
    return out;
}

struct Predictions {
    std::vector<Position> positions;
    std::vector<ClassId> classes;
};

inline Predictions predict(const TrainedPredictor& tp, const Tensor<double>& embeddings) {
    const Tensor<double> out = predict_raw(tp, embeddings);
    Predictions p;
    const int n = out.dim(0), k = out.dim(1);
    for (int r = 0; r < n; ++r) {
        const double* row = out.data() + static_cast<std::size_t>(r) * k;
        if (tp.task == TaskKind::positioning) p.positions.push_back({row[0], row[1]});
        else p.classes.push_back(static_cast<ClassId>(std::max_element(row, row + k) - row));
    }
    return p;
}

}  // namespace percept
