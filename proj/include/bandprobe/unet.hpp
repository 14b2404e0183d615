#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "bandprobe/mask.hpp"
#include "bandprobe/nn_ops.hpp"
#include "bandprobe/rng.hpp"
#include "bandprobe/tensor.hpp"

namespace bandprobe {

// Per-pixel argmax over the class axis of a [K,H,W] probability tensor.
// Ties resolve to the lower class index, so an even land/water split is land.
template <typename T>
Mask argmax_mask(const Tensor<T>& probs) {
    if (probs.rank() != 3) {
        throw std::invalid_argument("argmax_mask: expected [K,H,W], got " +
                                    shape_to_string(probs.shape()));
    }
    const int k = probs.dim(0), h = probs.dim(1), w = probs.dim(2);
    Mask mask(h, w);
    const T* p = probs.data().data();
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    for (std::int64_t i = 0; i < plane; ++i) {
        int best = 0;
        T best_v = p[i];
        for (int c = 1; c < k; ++c) {
            const T v = p[c * plane + i];
            if (v > best_v) {
                best_v = v;
                best = c;
            }
        }
        mask.values[static_cast<size_t>(i)] = static_cast<std::uint8_t>(best);
    }
    return mask;
}

struct UNetConfig {
    int in_bands = 12;
    int num_classes = 2;
    int base_width = 16;
    static constexpr int depth = 4;

    void validate() const {
        if (in_bands < 1) throw std::invalid_argument("UNetConfig: in_bands must be >= 1");
        if (num_classes < 2) throw std::invalid_argument("UNetConfig: num_classes must be >= 2");
        if (base_width < 1) throw std::invalid_argument("UNetConfig: base_width must be >= 1");
    }

    bool operator==(const UNetConfig&) const = default;

    // Spatial dims must survive `depth` halvings.
    static constexpr int spatial_multiple = 1 << depth;
};

// Encoder/decoder/bottleneck building block: two [conv3x3 -> ELU -> batchnorm]
// stages at a fixed output width.
template <typename T>
struct ConvBlock {
    Tensor<T> k1, b1, gamma1, beta1;
    Tensor<T> k2, b2, gamma2, beta2;
    BatchNormState<T> bn1, bn2;
};

// The architecture: four encoder blocks each followed by 2x2 max pooling,
// a bottleneck block, four decoder blocks fed by 2x2 transposed convolutions
// and skip concatenations, and a 1x1 projection to class probabilities.
// Channel width doubles per encoder block and halves per decoder block.
template <typename T>
class UNet {
public:
    static UNet build(const UNetConfig& config, std::uint64_t seed) {
        config.validate();
        UNet net;
        net.cfg_ = config;
        Rng rng(seed);

        int in_ch = config.in_bands;
        int width = config.base_width;
        for (int i = 0; i < UNetConfig::depth; ++i) {
            net.enc_[i] = make_block(rng, in_ch, width);
            in_ch = width;
            width *= 2;
        }
        net.bottleneck_ = make_block(rng, in_ch, width);

        // Decoder, deepest stage first: upsample halves the width, the skip
        // doubles the input channels of the first conv.
        int deep = width;  // bottleneck width
        for (int i = UNetConfig::depth - 1; i >= 0; --i) {
            const int skip = deep / 2;
            net.up_k_[i] = init_kernel(rng, {deep, skip, 2, 2}, deep * 4);
            net.up_b_[i] = Tensor<T>::zeros({skip}, true);
            net.dec_[i] = make_block(rng, skip * 2, skip);
            deep = skip;
        }

        net.head_k_ = init_kernel(rng, {config.num_classes, config.base_width},
                                  config.base_width);
        net.head_b_ = Tensor<T>::zeros({config.num_classes}, true);
        return net;
    }

    const UNetConfig& config() const { return cfg_; }
    Mode mode() const { return mode_; }
    void set_mode(Mode m) { mode_ = m; }

    // [in_bands,H,W] -> [num_classes,H,W] per-pixel probabilities; batched
    // rank-4 input is accepted for training.
    Tensor<T> forward(const Tensor<T>& image) {
        const auto& shape = image.shape();
        if (shape.size() != 3 && shape.size() != 4) {
            throw std::invalid_argument("UNet::forward: expected [C,H,W] or [N,C,H,W], got " +
                                        shape_to_string(shape));
        }
        const int c = shape[shape.size() - 3], h = shape[shape.size() - 2],
                  w = shape[shape.size() - 1];
        if (c != cfg_.in_bands) {
            throw std::invalid_argument("UNet::forward: input has " + std::to_string(c) +
                                        " bands, model expects " + std::to_string(cfg_.in_bands));
        }
        if (h % UNetConfig::spatial_multiple != 0 || w % UNetConfig::spatial_multiple != 0) {
            throw std::invalid_argument(
                "UNet::forward: spatial dims " + std::to_string(h) + "x" + std::to_string(w) +
                " must be multiples of " + std::to_string(UNetConfig::spatial_multiple));
        }

        Tensor<T> x = image;
        std::vector<Tensor<T>> skips;
        skips.reserve(UNetConfig::depth);
        for (int i = 0; i < UNetConfig::depth; ++i) {
            Tensor<T> pre = run_encoder_stage(i, x);
            skips.push_back(pre);
            x = maxpool2d(pre);
        }
        x = run_bottleneck(x);
        for (int i = UNetConfig::depth - 1; i >= 0; --i) {
            x = run_decoder_stage(i, x, skips[static_cast<size_t>(i)]);
        }
        return run_head(x);
    }

    // The stages below are the building blocks of forward(); they are public
    // so inspection and incremental re-evaluation can drive them directly.

    // Encoder block i, pre-pool activation.
    Tensor<T> run_encoder_stage(int i, const Tensor<T>& x) {
        return run_block(enc_[i], x);
    }

    Tensor<T> run_bottleneck(const Tensor<T>& x) { return run_block(bottleneck_, x); }

    // Upsample, concatenate the symmetric encoder activation, convolve.
    Tensor<T> run_decoder_stage(int i, const Tensor<T>& x, const Tensor<T>& skip) {
        Tensor<T> up = transposed_conv2d(x, up_k_[i], up_b_[i]);
        const auto& us = up.shape();
        const auto& ss = skip.shape();
        if (us[us.size() - 1] != ss[ss.size() - 1] || us[us.size() - 2] != ss[ss.size() - 2]) {
            throw std::runtime_error("UNet::forward: decoder stage " + std::to_string(i) +
                                     " spatial dims diverged from the encoder skip");
        }
        return run_block(dec_[i], concat_channels(up, skip));
    }

    Tensor<T> run_head(const Tensor<T>& x) {
        return softmax_channels(pointwise_conv(x, head_k_, head_b_));
    }

    // Per-pixel argmax; ties resolve to the lower class index (land).
    Mask predict_mask(const Tensor<T>& image) {
        if (mode_ != Mode::eval) {
            throw std::runtime_error("UNet::predict_mask: model must be in eval mode");
        }
        if (image.rank() != 3) {
            throw std::invalid_argument("UNet::predict_mask: expected a single [C,H,W] image");
        }
        NoGradGuard ng;
        return argmax_mask(forward(image));
    }

    // Visits every trainable tensor in build order.
    void for_each_parameter(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
        for (int i = 0; i < UNetConfig::depth; ++i) visit_block(fn, "enc" + std::to_string(i + 1), enc_[i]);
        visit_block(fn, "bottleneck", bottleneck_);
        for (int i = UNetConfig::depth - 1; i >= 0; --i) {
            const std::string name = "up" + std::to_string(i + 1);
            fn(name + ".kernel", up_k_[i]);
            fn(name + ".bias", up_b_[i]);
            visit_block(fn, "dec" + std::to_string(i + 1), dec_[i]);
        }
        fn("head.kernel", head_k_);
        fn("head.bias", head_b_);
    }

    // Visits batchnorm running statistics in build order.
    void for_each_bn_state(const std::function<void(const std::string&, BatchNormState<T>&)>& fn) {
        for (int i = 0; i < UNetConfig::depth; ++i) {
            fn("enc" + std::to_string(i + 1) + ".bn1", enc_[i].bn1);
            fn("enc" + std::to_string(i + 1) + ".bn2", enc_[i].bn2);
        }
        fn("bottleneck.bn1", bottleneck_.bn1);
        fn("bottleneck.bn2", bottleneck_.bn2);
        for (int i = UNetConfig::depth - 1; i >= 0; --i) {
            fn("dec" + std::to_string(i + 1) + ".bn1", dec_[i].bn1);
            fn("dec" + std::to_string(i + 1) + ".bn2", dec_[i].bn2);
        }
    }

    std::int64_t parameter_count() {
        std::int64_t n = 0;
        for_each_parameter([&](const std::string&, Tensor<T>& t) { n += t.numel(); });
        return n;
    }

    void zero_grads() {
        for_each_parameter([](const std::string&, Tensor<T>& t) { t.zero_grad(); });
    }

    // Marks running stats usable for eval without a prior training pass.
    void mark_stats_initialized() {
        for_each_bn_state([](const std::string&, BatchNormState<T>& s) { s.initialized = true; });
    }

    UNet clone() const {
        UNet copy;
        copy.cfg_ = cfg_;
        copy.mode_ = mode_;
        for (int i = 0; i < UNetConfig::depth; ++i) {
            copy.enc_[i] = clone_block(enc_[i]);
            copy.dec_[i] = clone_block(dec_[i]);
            copy.up_k_[i] = up_k_[i].clone();
            copy.up_b_[i] = up_b_[i].clone();
        }
        copy.bottleneck_ = clone_block(bottleneck_);
        copy.head_k_ = head_k_.clone();
        copy.head_b_ = head_b_.clone();
        return copy;
    }

    // Copies values (not storage) from another structurally identical model.
    void load_values_from(UNet& other) {
        if (!(cfg_ == other.cfg_)) {
            throw std::invalid_argument("UNet::load_values_from: config mismatch");
        }
        std::vector<Tensor<T>*> theirs;
        other.for_each_parameter([&](const std::string&, Tensor<T>& t) { theirs.push_back(&t); });
        size_t i = 0;
        for_each_parameter([&](const std::string&, Tensor<T>& t) {
            auto src = theirs[i++]->data();
            std::copy(src.begin(), src.end(), t.data().begin());
        });
        std::vector<BatchNormState<T>*> their_state;
        other.for_each_bn_state(
            [&](const std::string&, BatchNormState<T>& s) { their_state.push_back(&s); });
        size_t j = 0;
        for_each_bn_state([&](const std::string&, BatchNormState<T>& s) { s = *their_state[j++]; });
    }

private:
    Tensor<T> run_block(ConvBlock<T>& block, const Tensor<T>& input) {
        Tensor<T> x = batchnorm2d(elu(conv2d(input, block.k1, block.b1)), block.gamma1,
                                  block.beta1, block.bn1, mode_);
        return batchnorm2d(elu(conv2d(x, block.k2, block.b2)), block.gamma2, block.beta2,
                           block.bn2, mode_);
    }

    static Tensor<T> init_kernel(Rng& rng, std::vector<int> shape, int fan_in) {
        std::int64_t n = 1;
        for (int d : shape) n *= d;
        // Kaiming-style fan-in scaling.
        const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
        std::vector<T> v(static_cast<size_t>(n));
        for (auto& x : v) x = static_cast<T>(rng.normal() * stddev);
        return Tensor<T>::from_vector(std::move(shape), std::move(v), true);
    }

    static ConvBlock<T> make_block(Rng& rng, int in_ch, int out_ch) {
        ConvBlock<T> b;
        b.k1 = init_kernel(rng, {out_ch, in_ch, 3, 3}, in_ch * 9);
        b.b1 = Tensor<T>::zeros({out_ch}, true);
        b.gamma1 = Tensor<T>::full({out_ch}, T(1), true);
        b.beta1 = Tensor<T>::zeros({out_ch}, true);
        b.k2 = init_kernel(rng, {out_ch, out_ch, 3, 3}, out_ch * 9);
        b.b2 = Tensor<T>::zeros({out_ch}, true);
        b.gamma2 = Tensor<T>::full({out_ch}, T(1), true);
        b.beta2 = Tensor<T>::zeros({out_ch}, true);
        b.bn1 = BatchNormState<T>(out_ch);
        b.bn2 = BatchNormState<T>(out_ch);
        return b;
    }

    static ConvBlock<T> clone_block(const ConvBlock<T>& b) {
        ConvBlock<T> c;
        c.k1 = b.k1.clone();
        c.b1 = b.b1.clone();
        c.gamma1 = b.gamma1.clone();
        c.beta1 = b.beta1.clone();
        c.k2 = b.k2.clone();
        c.b2 = b.b2.clone();
        c.gamma2 = b.gamma2.clone();
        c.beta2 = b.beta2.clone();
        c.bn1 = b.bn1;
        c.bn2 = b.bn2;
        return c;
    }

    void visit_block(const std::function<void(const std::string&, Tensor<T>&)>& fn,
                     const std::string& name, ConvBlock<T>& b) {
        fn(name + ".k1", b.k1);
        fn(name + ".b1", b.b1);
        fn(name + ".gamma1", b.gamma1);
        fn(name + ".beta1", b.beta1);
        fn(name + ".k2", b.k2);
        fn(name + ".b2", b.b2);
        fn(name + ".gamma2", b.gamma2);
        fn(name + ".beta2", b.beta2);
    }

    UNetConfig cfg_;
    Mode mode_ = Mode::train;
    ConvBlock<T> enc_[UNetConfig::depth];
    ConvBlock<T> bottleneck_;
    Tensor<T> up_k_[UNetConfig::depth];
    Tensor<T> up_b_[UNetConfig::depth];
    ConvBlock<T> dec_[UNetConfig::depth];
    Tensor<T> head_k_;
    Tensor<T> head_b_;
};

// Checkpoint container: magic, version, config, then every parameter and
// batchnorm running statistic in build order as little-endian float32.
void save_checkpoint(UNet<float>& model, const std::string& path);
UNet<float> load_checkpoint(const std::string& path);

}  // namespace bandprobe
