#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "percept/datasets.hpp"
#include "percept/losses.hpp"
#include "percept/models.hpp"
#include "percept/nn/adam.hpp"
#include "percept/rng.hpp"
#include "percept/weights_io.hpp"

namespace percept {

struct TrainConfig {
    double lr = 1e-4;
    int batch_size = 64;
    int max_epochs = 100;
    int patience = 10;
    std::uint64_t seed = 0;
    double adam_eps = 1e-8;

    void validate() const {
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
        if (max_epochs < 1) throw std::invalid_argument("TrainConfig: max_epochs must be >= 1");
        if (patience < 1 || patience > max_epochs)
            throw std::invalid_argument("TrainConfig: patience must be in [1, max_epochs]");
        if (!(lr > 0)) throw std::invalid_argument("TrainConfig: lr must be positive");
        if (!(adam_eps > 0)) throw std::invalid_argument("TrainConfig: adam_eps must be positive");
    }
};

struct EpochStats {
    int epoch = 0;
    double train_loss = 0;
    double val_loss = 0;
    double seconds = 0;
};

struct RunTimings {
    double wall_seconds_total = 0;
    std::vector<double> seconds_per_epoch;
    LossKind loss_kind = LossKind::pixelwise;
};

struct TrainHistory {
    std::vector<EpochStats> epochs;
    int best_epoch = -1;
    double best_val = std::numeric_limits<double>::infinity();
    RunTimings timings;
};

class TrainingError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Called after every epoch; returning false stops training early.
using EpochCallback = std::function<bool(const EpochStats&)>;

inline void write_history_csv(const TrainHistory& h, const std::filesystem::path& path) {
    std::ofstream os(path);
    os << "epoch,train_loss,val_loss,seconds\n" << std::setprecision(17);
    for (const auto& e : h.epochs) os << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.seconds << '\n';
}

namespace detail {

template <typename T>
std::vector<Tensor<T>> snapshot(const std::vector<nn::Param<T>>& params) {
    std::vector<Tensor<T>> s;
    s.reserve(params.size());
    for (const auto& p : params) s.push_back(*p.value);
    return s;
}

template <typename T>
void restore(const std::vector<nn::Param<T>>& params, const std::vector<Tensor<T>>& s) {
    for (std::size_t i = 0; i < params.size(); ++i) *params[i].value = s[i];
}

inline std::span<const std::size_t> batch_rows(const std::vector<std::size_t>& order, std::size_t start, int batch) {
    const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch));
    return {order.data() + start, end - start};
}

inline void require_finite(double loss, int epoch, std::size_t batch, const char* what) {
    if (!std::isfinite(loss))
        throw TrainingError(std::string(what) + ": non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batch));
}

/// Shared loop: shuffled mini-batches, per-epoch validation, best snapshot,
/// early stopping. `step` returns the batch loss after updating parameters;
/// `evaluate` returns the mean loss over a batch without updating.
template <typename T, typename Step, typename Eval>
TrainHistory run_loop(std::vector<nn::Param<T>> params, const std::vector<std::size_t>& train,
                      const std::vector<std::size_t>& validation, const TrainConfig& cfg, LossKind kind, Step&& step,
                      Eval&& evaluate, const EpochCallback& on_epoch, const char* what) {
    cfg.validate();
    if (train.empty() || validation.empty()) throw TrainingError(std::string(what) + ": empty train or validation split");
    nn::FlushDenormals ftz;
    using clock = std::chrono::steady_clock;
    TrainHistory h;
    h.timings.loss_kind = kind;
    const auto t_start = clock::now();
    auto best = snapshot(params);
    int since_best = 0;
    std::vector<std::size_t> order = train;
    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const auto t0 = clock::now();
        Rng shuffle_rng(derive_seed(cfg.seed, 0x5b0ff1e, static_cast<std::uint64_t>(epoch)));
        order = train;
        shuffle_rng.shuffle(order);
        long double train_acc = 0;
        std::size_t b = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++b) {
            auto rows = batch_rows(order, start, cfg.batch_size);
            const double loss = step(rows, epoch, b);
            require_finite(loss, epoch, b, what);
            train_acc += static_cast<long double>(loss) * rows.size();
        }
        long double val_acc = 0;
        std::size_t vb = 0;
        for (std::size_t start = 0; start < validation.size(); start += cfg.batch_size, ++vb) {
            auto rows = batch_rows(validation, start, cfg.batch_size);
            const double loss = evaluate(rows, vb);
            require_finite(loss, epoch, vb, what);
            val_acc += static_cast<long double>(loss) * rows.size();
        }
        EpochStats st;
        st.epoch = epoch;
        st.train_loss = static_cast<double>(train_acc / order.size());
        st.val_loss = static_cast<double>(val_acc / validation.size());
        st.seconds = std::chrono::duration<double>(clock::now() - t0).count();
        h.epochs.push_back(st);
        h.timings.seconds_per_epoch.push_back(st.seconds);
        if (st.val_loss < h.best_val) {
            h.best_val = st.val_loss;
            h.best_epoch = epoch;
            best = snapshot(params);
            since_best = 0;
        } else {
            ++since_best;
        }
        if (on_epoch && !on_epoch(st)) break;
        if (since_best >= cfg.patience) break;
    }
    restore(params, best);
    h.timings.wall_seconds_total = std::chrono::duration<double>(clock::now() - t_start).count();
    return h;
}

}  // namespace detail

/// Trains `model` on the autoencoder part under `spec`. Batch order and VAE
/// noise derive from cfg.seed; validation noise is fixed across epochs so that
/// validation losses are comparable. The model ends at its best-validation snapshot.
template <typename T>
TrainHistory train_autoencoder(AutoencoderModel<T>& model, const DataPart& data, const LossSpec<T>& spec,
                               const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
    spec.validate();
    if (data.source->side() != model.input_size())
        throw TrainingError("train_autoencoder: data side " + std::to_string(data.source->side()) +
                            " does not match model input " + std::to_string(model.input_size()));
    auto params = model.params();
    nn::Adam<T> adam(params, {.lr = cfg.lr, .eps = cfg.adam_eps});
    const SampleSource& src = *data.source;

    auto step = [&](std::span<const std::size_t> rows, int epoch, std::size_t b) {
        const Tensor<T> x = load_batch(src, rows).template cast<T>();
        Rng eps(derive_seed(cfg.seed, 0xe95, static_cast<std::uint64_t>(epoch), b));
        const auto fwd = model.forward(x, &eps);
        auto loss = total_loss(spec, x, fwd.x_hat(), fwd.code(), true);
        if (!std::isfinite(static_cast<double>(loss.total))) return static_cast<double>(loss.total);
        adam.zero_grad();
        model.backward(fwd, loss.d_x_hat, loss.d_mu, loss.d_logvar);
        adam.step();
        return static_cast<double>(loss.total);
    };
    auto evaluate = [&](std::span<const std::size_t> rows, std::size_t b) {
        const Tensor<T> x = load_batch(src, rows).template cast<T>();
        Rng eps(derive_seed(cfg.seed, 0x7a1, b));
        const auto fwd = model.forward(x, &eps);
        return static_cast<double>(total_loss(spec, x, fwd.x_hat(), fwd.code(), false).total);
    };
    return detail::run_loop<T>(params, data.train, data.validation, cfg, spec.kind, step, evaluate, on_epoch,
                               "train_autoencoder");
}

/// Deterministic embeddings (mu) of source rows, in batches.
template <typename T>
Tensor<T> embed_rows(const AutoencoderModel<T>& model, const SampleSource& src, std::span<const std::size_t> rows,
                     int batch = 64) {
    Tensor<T> out({static_cast<int>(rows.size()), model.z_size()});
    for (std::size_t start = 0; start < rows.size(); start += batch) {
        const std::size_t end = std::min(rows.size(), start + static_cast<std::size_t>(batch));
        const Tensor<T> mu = model.embed(load_batch(src, rows.subspan(start, end - start)).template cast<T>());
        std::copy(mu.vec().begin(), mu.vec().end(), out.data() + start * model.z_size());
    }
    return out;
}

template <typename T>
Tensor<T> embed_all(const AutoencoderModel<T>& model, const SampleSource& src, int batch = 64) {
    std::vector<std::size_t> rows(src.size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    return embed_rows(model, src, rows, batch);
}

template <typename T>
std::string encoder_hash(AutoencoderModel<T>& model) {
    return hash_params(model.encoder_params());
}

/// Re-initialises the decoder from the model seed and fits it with pixel-wise
/// MSE to the frozen encoder's mean embeddings. Throws if the encoder changed.
template <typename T>
TrainHistory retrain_decoder(AutoencoderModel<T>& model, const DataPart& data, const TrainConfig& cfg,
                             const EpochCallback& on_epoch = {}) {
    const std::string before = encoder_hash(model);
    const SampleSource& src = *data.source;
    const Tensor<T> z_train = embed_rows(model, src, data.train);
    const Tensor<T> z_val = embed_rows(model, src, data.validation);
    std::vector<std::size_t> pos_train(data.train.size()), pos_val(data.validation.size());
    for (std::size_t i = 0; i < pos_train.size(); ++i) pos_train[i] = i;
    for (std::size_t i = 0; i < pos_val.size(); ++i) pos_val[i] = i;

    model.init_decoder();
    auto params = model.decoder_params();
    nn::Adam<T> adam(params, {.lr = cfg.lr, .eps = cfg.adam_eps});
    const int zs = model.z_size();
    auto gather = [&](const Tensor<T>& z, const std::vector<std::size_t>& map, std::span<const std::size_t> rows,
                      Tensor<T>& zb, std::vector<std::size_t>& src_rows) {
        zb = Tensor<T>({static_cast<int>(rows.size()), zs});
        src_rows.clear();
        for (std::size_t r = 0; r < rows.size(); ++r) {
            std::copy_n(z.data() + rows[r] * zs, zs, zb.data() + r * zs);
            src_rows.push_back(map[rows[r]]);
        }
    };
    auto step = [&](std::span<const std::size_t> rows, int, std::size_t) {
        Tensor<T> zb;
        std::vector<std::size_t> src_rows;
        gather(z_train, data.train, rows, zb, src_rows);
        const Tensor<T> x = load_batch(src, src_rows).template cast<T>();
        const auto tape = model.decode_tape(zb);
        const T loss = elementwise_loss(x, tape.x_hat, Reduction::mean);
        if (!std::isfinite(static_cast<double>(loss))) return static_cast<double>(loss);
        adam.zero_grad();
        model.backward_decoder(tape, elementwise_loss_grad(x, tape.x_hat, Reduction::mean), true);
        adam.step();
        return static_cast<double>(loss);
    };
    auto evaluate = [&](std::span<const std::size_t> rows, std::size_t) {
        Tensor<T> zb;
        std::vector<std::size_t> src_rows;
        gather(z_val, data.validation, rows, zb, src_rows);
        const Tensor<T> x = load_batch(src, src_rows).template cast<T>();
        return static_cast<double>(elementwise_loss(x, model.decode(zb), Reduction::mean));
    };
    auto h = detail::run_loop<T>(params, pos_train, pos_val, cfg, LossKind::pixelwise, step, evaluate, on_epoch,
                                 "retrain_decoder");
    if (encoder_hash(model) != before) throw TrainingError("retrain_decoder: encoder parameters changed");
    return h;
}

/// Mean absolute pixel error of reconstructions (z = mu) over source rows.
template <typename T>
double reconstruction_l1(const AutoencoderModel<T>& model, const SampleSource& src, std::span<const std::size_t> rows,
                         int batch = 64) {
    long double acc = 0;
    std::size_t count = 0;
    for (std::size_t start = 0; start < rows.size(); start += batch) {
        const std::size_t end = std::min(rows.size(), start + static_cast<std::size_t>(batch));
        const Tensor<T> x = load_batch(src, rows.subspan(start, end - start)).template cast<T>();
        const Tensor<T> y = model.decode(model.embed(x));
        for (std::size_t i = 0; i < x.size(); ++i) acc += std::fabs(static_cast<long double>(x[i]) - y[i]);
        count += x.size();
    }
    if (count == 0) throw std::invalid_argument("reconstruction_l1: no rows");
    return static_cast<double>(acc / count);
}

inline double median(std::vector<double> v) {
    if (v.empty()) throw std::invalid_argument("median of empty list");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Percent extra time per epoch of a perceptual run over a pixel-wise one.
inline double measure_overhead(const RunTimings& pixel, const RunTimings& perceptual) {
    if (pixel.seconds_per_epoch.size() != perceptual.seconds_per_epoch.size())
        throw std::invalid_argument("measure_overhead: epoch counts differ (" +
                                    std::to_string(pixel.seconds_per_epoch.size()) + " vs " +
                                    std::to_string(perceptual.seconds_per_epoch.size()) + ")");
    if (pixel.seconds_per_epoch.empty()) throw std::invalid_argument("measure_overhead: no epochs");
    for (double s : pixel.seconds_per_epoch)
        if (!(s > 0)) throw std::invalid_argument("measure_overhead: non-positive epoch time");
    return 100.0 * (median(perceptual.seconds_per_epoch) / median(pixel.seconds_per_epoch) - 1.0);
}

/// Overhead over the first min(epochs) epochs of each run, for runs that
/// early-stopped at different points.
inline double measure_overhead_common(const RunTimings& pixel, const RunTimings& perceptual) {
    const std::size_t n = std::min(pixel.seconds_per_epoch.size(), perceptual.seconds_per_epoch.size());
    RunTimings a = pixel, b = perceptual;
    a.seconds_per_epoch.resize(n);
    b.seconds_per_epoch.resize(n);
    return measure_overhead(a, b);
}

}  // namespace percept
