#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "percept/nn/layers.hpp"
#include "percept/rng.hpp"
#include "percept/tensor.hpp"

namespace percept {

inline constexpr int kZSizes[] = {32, 64, 128, 256, 512};

inline bool valid_z_size(int z) { return std::find(std::begin(kZSizes), std::end(kZSizes), z) != std::end(kZSizes); }
inline bool valid_input_size(int s) { return s == 64 || s == 96; }

/// Layer plan of the convolutional autoencoder. All convolutions and
/// deconvolutions use stride 2 and no padding.
struct Architecture {
    int input_size = 64;
    int input_channels = 3;
    std::vector<int> enc_channels;
    int enc_kernel = 4;
    int seed_channels = 1024;  // decoder affine output, reshaped to [seed_channels, 1, 1]
    std::vector<int> dec_channels;
    std::vector<int> dec_kernels;
    int stride = 2;

    /// 64: conv 32/64/128/256 k4 -> 2x2; deconv 128/64/32/3 with k 5/5/6/6 from 1x1.
    /// 96: one extra 256-channel conv stage (-> 1x1) and deconv 256/128/64/32/3 with k 4/4/4/5/4.
    static Architecture standard(int input_size) {
        if (input_size == 64) return {64, 3, {32, 64, 128, 256}, 4, 1024, {128, 64, 32, 3}, {5, 5, 6, 6}, 2};
        if (input_size == 96)
            return {96, 3, {32, 64, 128, 256, 256}, 4, 1024, {256, 128, 64, 32, 3}, {4, 4, 4, 5, 4}, 2};
        throw std::invalid_argument("Architecture: input size must be 64 or 96, got " +
                                    std::to_string(input_size));
    }

    std::vector<int> encoder_trace() const {
        std::vector<int> t{input_size};
        for (std::size_t i = 0; i < enc_channels.size(); ++i)
            t.push_back(nn::conv_out_size(t.back(), enc_kernel, stride, 0));
        return t;
    }

    std::vector<int> decoder_trace() const {
        std::vector<int> t{1};
        for (int k : dec_kernels) t.push_back(nn::deconv_out_size(t.back(), k, stride));
        return t;
    }

    int flat_features() const {
        const int s = encoder_trace().back();
        return enc_channels.back() * s * s;
    }

    void validate() const {
        if (enc_channels.empty() || dec_channels.empty())
            throw std::invalid_argument("Architecture: empty encoder or decoder");
        if (dec_channels.size() != dec_kernels.size())
            throw std::invalid_argument("Architecture: decoder channels/kernels length mismatch");
        if (dec_channels.back() != input_channels)
            throw std::invalid_argument("Architecture: decoder must end in input_channels");
        for (int s : encoder_trace())
            if (s <= 0) throw std::invalid_argument("Architecture: encoder collapses spatially");
        if (decoder_trace().back() != input_size)
            throw std::invalid_argument("Architecture: decoder output " +
                                        std::to_string(decoder_trace().back()) + " != input " +
                                        std::to_string(input_size));
    }
};

/// Per-row latent parameters and the code fed to the decoder; all [N, z].
template <typename T>
struct LatentCode {
    Tensor<T> mu;
    Tensor<T> logvar;
    Tensor<T> z;
};

template <typename T>
struct EncoderTape {
    std::vector<Tensor<T>> inputs;  // inputs[i] feeds conv i; inputs[0] is x
    Tensor<T> flat;                 // rectified output of last conv, [N, F]
    LatentCode<T> code;
    Tensor<T> eps;                  // standard-normal draws (variational only)
};

template <typename T>
struct DecoderTape {
    Tensor<T> z;
    std::vector<Tensor<T>> inputs;  // inputs[i] feeds deconv i
    Tensor<T> x_hat;
};

template <typename T>
struct ForwardResult {
    EncoderTape<T> enc;
    DecoderTape<T> dec;
    const Tensor<T>& x_hat() const { return dec.x_hat; }
    const LatentCode<T>& code() const { return enc.code; }
};

/// Convolutional autoencoder. In variational mode the code is
/// z = mu + exp(logvar/2) * eps; otherwise z = mu and the logvar head is unused.
template <typename T>
class AutoencoderModel {
public:
    AutoencoderModel(Architecture arch, int z_size, bool variational, std::uint64_t seed)
        : arch_(std::move(arch)), z_size_(z_size), variational_(variational), seed_(seed) {
        arch_.validate();
        if (z_size <= 0) throw std::invalid_argument("AutoencoderModel: z_size must be positive");
        int in = arch_.input_channels;
        for (int c : arch_.enc_channels) {
            convs_.emplace_back(in, c, arch_.enc_kernel, arch_.stride, 0);
            in = c;
        }
        mu_head_ = nn::Linear<T>(arch_.flat_features(), z_size);
        logvar_head_ = nn::Linear<T>(arch_.flat_features(), z_size);
        init_encoder();
        dec_fc_ = nn::Linear<T>(z_size, arch_.seed_channels);
        in = arch_.seed_channels;
        for (std::size_t i = 0; i < arch_.dec_channels.size(); ++i) {
            deconvs_.emplace_back(in, arch_.dec_channels[i], arch_.dec_kernels[i], arch_.stride);
            in = arch_.dec_channels[i];
        }
        init_decoder();
    }

    const Architecture& architecture() const { return arch_; }
    int z_size() const { return z_size_; }
    bool variational() const { return variational_; }
    int input_size() const { return arch_.input_size; }
    std::uint64_t seed() const { return seed_; }

    /// Re-draws decoder parameters from the model seed.
    void init_decoder() {
        Rng rng(derive_seed(seed_, 2));
        dec_fc_.init(rng);
        for (auto& d : deconvs_) d.init(rng);
    }

    EncoderTape<T> encode_tape(const Tensor<T>& x, Rng* eps_rng) const {
        check_image_batch(x);
        EncoderTape<T> tape;
        Tensor<T> h = x;
        for (const auto& conv : convs_) {
            tape.inputs.push_back(h);
            h = nn::relu(conv.forward(h));
        }
        const int n = x.dim(0);
        h.reshape({n, arch_.flat_features()});
        tape.flat = std::move(h);
        tape.code.mu = mu_head_.forward(tape.flat);
        if (variational_) {
            if (eps_rng == nullptr) throw std::invalid_argument("encode: variational model needs an eps generator");
            tape.code.logvar = logvar_head_.forward(tape.flat);
            tape.eps = Tensor<T>(tape.code.mu.shape());
            for (auto& e : tape.eps.vec()) e = static_cast<T>(eps_rng->normal());
            tape.code.z = tape.code.mu;
            for (std::size_t i = 0; i < tape.code.z.size(); ++i)
                tape.code.z[i] = tape.code.mu[i] + std::exp(tape.code.logvar[i] / T(2)) * tape.eps[i];
        } else {
            tape.code.logvar = Tensor<T>(tape.code.mu.shape());
            tape.code.z = tape.code.mu;
        }
        return tape;
    }

    LatentCode<T> encode(const Tensor<T>& x, Rng* eps_rng = nullptr) const {
        return encode_tape(x, eps_rng).code;
    }

    /// Deterministic embedding (mu) for probing and decoder retraining.
    Tensor<T> embed(const Tensor<T>& x) const {
        check_image_batch(x);
        Tensor<T> h = x;
        for (const auto& conv : convs_) h = nn::relu(conv.forward(h));
        h.reshape({x.dim(0), arch_.flat_features()});
        return mu_head_.forward(h);
    }

    DecoderTape<T> decode_tape(const Tensor<T>& z) const {
        if (z.rank() != 2 || z.dim(1) != z_size_) {
            throw std::invalid_argument("decode: expected [N," + std::to_string(z_size_) + "] code, got " +
                                        Tensor<T>::shape_string(z.shape()));
        }
        DecoderTape<T> tape;
        tape.z = z;
        Tensor<T> h = dec_fc_.forward(z);
        h.reshape({z.dim(0), arch_.seed_channels, 1, 1});
        for (std::size_t i = 0; i < deconvs_.size(); ++i) {
            tape.inputs.push_back(h);
            h = deconvs_[i].forward(h);
            h = (i + 1 == deconvs_.size()) ? nn::sigmoid(std::move(h)) : nn::relu(std::move(h));
        }
        tape.x_hat = std::move(h);
        return tape;
    }

    Tensor<T> decode(const Tensor<T>& z) const { return decode_tape(z).x_hat; }

    ForwardResult<T> forward(const Tensor<T>& x, Rng* eps_rng = nullptr) const {
        ForwardResult<T> r;
        r.enc = encode_tape(x, eps_rng);
        r.dec = decode_tape(r.enc.code.z);
        return r;
    }

    /// Backpropagates dL/dx_hat through the decoder. Accumulates decoder
    /// gradients when `accumulate` is set and returns dL/dz.
    Tensor<T> backward_decoder(const DecoderTape<T>& tape, const Tensor<T>& dx_hat, bool accumulate = true) {
        return backward_decoder_impl(tape, dx_hat, accumulate);
    }

    /// dL/dz without touching any gradient buffer.
    Tensor<T> decoder_input_gradient(const DecoderTape<T>& tape, const Tensor<T>& dx_hat) const {
        return const_cast<AutoencoderModel*>(this)->backward_decoder_impl(tape, dx_hat, false);
    }

    /// Full backward pass. `dmu_extra` / `dlogvar_extra` carry direct loss
    /// terms on the latent parameters (the KL regularizer); pass empty tensors if none.
    void backward(const ForwardResult<T>& fwd, const Tensor<T>& dx_hat, const Tensor<T>& dmu_extra,
                  const Tensor<T>& dlogvar_extra) {
        Tensor<T> dz = backward_decoder(fwd.dec, dx_hat, true);
        const auto& code = fwd.enc.code;
        Tensor<T> dmu = dz;
        if (!dmu_extra.empty())
            for (std::size_t i = 0; i < dmu.size(); ++i) dmu[i] += dmu_extra[i];
        Tensor<T> dflat = mu_head_.backward_input(fwd.enc.flat.shape(), dmu);
        mu_head_.accumulate_grads(fwd.enc.flat, dmu);
        if (variational_) {
            Tensor<T> dlv(code.logvar.shape());
            for (std::size_t i = 0; i < dlv.size(); ++i) {
                const T sigma = std::exp(code.logvar[i] / T(2));
                dlv[i] = dz[i] * fwd.enc.eps[i] * sigma / T(2);
                if (!dlogvar_extra.empty()) dlv[i] += dlogvar_extra[i];
            }
            Tensor<T> d2 = logvar_head_.backward_input(fwd.enc.flat.shape(), dlv);
            logvar_head_.accumulate_grads(fwd.enc.flat, dlv);
            for (std::size_t i = 0; i < dflat.size(); ++i) dflat[i] += d2[i];
        }
        backward_encoder_trunk(fwd.enc, std::move(dflat));
    }

    std::vector<nn::Param<T>> encoder_params() {
        std::vector<nn::Param<T>> p;
        for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].params(p, "enc.conv" + std::to_string(i));
        mu_head_.params(p, "enc.mu");
        logvar_head_.params(p, "enc.logvar");
        return p;
    }

    std::vector<nn::Param<T>> decoder_params() {
        std::vector<nn::Param<T>> p;
        dec_fc_.params(p, "dec.fc");
        for (std::size_t i = 0; i < deconvs_.size(); ++i) deconvs_[i].params(p, "dec.deconv" + std::to_string(i));
        return p;
    }

    std::vector<nn::Param<T>> params() {
        auto p = encoder_params();
        auto d = decoder_params();
        p.insert(p.end(), d.begin(), d.end());
        return p;
    }

    const std::vector<nn::Conv2d<T>>& encoder_convs() const { return convs_; }
    const std::vector<nn::ConvTranspose2d<T>>& decoder_deconvs() const { return deconvs_; }

private:
    void init_encoder() {
        Rng rng(derive_seed(seed_, 1));
        for (auto& c : convs_) c.init(rng);
        mu_head_.init(rng);
        logvar_head_.init(rng);
    }

    void check_image_batch(const Tensor<T>& x) const {
        if (x.rank() != 4 || x.dim(1) != arch_.input_channels || x.dim(2) != arch_.input_size ||
            x.dim(3) != arch_.input_size) {
            throw std::invalid_argument("encode: expected [N," + std::to_string(arch_.input_channels) + "," +
                                        std::to_string(arch_.input_size) + "," +
                                        std::to_string(arch_.input_size) + "] input, got " +
                                        Tensor<T>::shape_string(x.shape()));
        }
    }

    Tensor<T> backward_decoder_impl(const DecoderTape<T>& tape, const Tensor<T>& dx_hat, bool accumulate) {
        require_same_shape(dx_hat.shape(), tape.x_hat.shape(), "backward_decoder");
        Tensor<T> d = nn::sigmoid_backward(tape.x_hat, dx_hat);
        for (std::size_t i = deconvs_.size(); i-- > 0;) {
            if (accumulate) deconvs_[i].accumulate_grads(tape.inputs[i], d);
            d = deconvs_[i].backward_input(tape.inputs[i].shape(), d);
            if (i > 0) d = nn::relu_backward(tape.inputs[i], std::move(d));
        }
        d.reshape({tape.z.dim(0), arch_.seed_channels});
        if (accumulate) dec_fc_.accumulate_grads(tape.z, d);
        return dec_fc_.backward_input(tape.z.shape(), d);
    }

    void backward_encoder_trunk(const EncoderTape<T>& tape, Tensor<T> dflat) {
        const std::size_t last = convs_.size() - 1;
        const int n = tape.inputs[0].dim(0);
        const int s = arch_.encoder_trace().back();
        Tensor<T> out_last = tape.flat.reshaped({n, arch_.enc_channels.back(), s, s});
        dflat.reshape(out_last.shape());
        Tensor<T> d = nn::relu_backward(out_last, std::move(dflat));
        for (std::size_t i = last + 1; i-- > 0;) {
            convs_[i].accumulate_grads(tape.inputs[i], d);
            if (i == 0) break;
            d = convs_[i].backward_input(tape.inputs[i].shape(), d);
            d = nn::relu_backward(tape.inputs[i], std::move(d));
        }
    }

    Architecture arch_;
    int z_size_;
    bool variational_;
    std::uint64_t seed_;
    std::vector<nn::Conv2d<T>> convs_;
    nn::Linear<T> mu_head_, logvar_head_;
    nn::Linear<T> dec_fc_;
    std::vector<nn::ConvTranspose2d<T>> deconvs_;
};

/// Standard model for the supported z sizes and input sizes.
template <typename T = float>
AutoencoderModel<T> build_model(int z_size, bool variational, int input_size, std::uint64_t seed) {
    if (!valid_z_size(z_size)) throw std::invalid_argument("build_model: z_size must be one of 32/64/128/256/512");
    if (!valid_input_size(input_size)) throw std::invalid_argument("build_model: input size must be 64 or 96");
    return AutoencoderModel<T>(Architecture::standard(input_size), z_size, variational, seed);
}

}  // namespace percept
