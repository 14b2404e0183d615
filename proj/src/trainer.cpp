#include "bandprobe/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <limits>
#include <numeric>

#include "bandprobe/nn_ops.hpp"
#include "bandprobe/rng.hpp"

namespace bandprobe {

Tensor<float> scale_input(const Tensor<float>& raw) {
    std::vector<float> scaled(static_cast<size_t>(raw.numel()));
    auto src = raw.data();
    std::int64_t clamped = 0;
    for (size_t i = 0; i < scaled.size(); ++i) {
        float v = src[i];
        if (v < 0.0f) {
            v = 0.0f;
            ++clamped;
        }
        scaled[i] = std::min(v / 10000.0f, 1.0f);
    }
    if (clamped > 0) {
        std::cerr << "scale_input: clamped " << clamped << " negative reflectance values to 0\n";
    }
    return Tensor<float>::from_vector(raw.shape(), std::move(scaled));
}

void TrainConfig::validate() const {
    if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (!(learning_rate >= 0.0f)) {
        throw std::invalid_argument("TrainConfig: learning_rate must be nonnegative");
    }
}

namespace {

// Stacks the chosen samples into a scaled [N,C,H,W] batch plus flat targets.
std::pair<Tensor<float>, std::vector<std::uint8_t>> make_batch(
    const std::vector<RasterSample>& samples, const std::vector<size_t>& order, size_t begin,
    size_t end) {
    const RasterSample& first = samples[order[begin]];
    const int c = kNumBands, h = first.height(), w = first.width();
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    const int n = static_cast<int>(end - begin);

    std::vector<float> data(static_cast<size_t>(n) * c * plane);
    std::vector<std::uint8_t> targets(static_cast<size_t>(n) * plane);
    for (int k = 0; k < n; ++k) {
        const RasterSample& s = samples[order[begin + static_cast<size_t>(k)]];
        if (s.height() != h || s.width() != w) {
            throw std::invalid_argument("train: sample '" + s.id +
                                        "' spatial dims differ from the rest of the batch");
        }
        Tensor<float> scaled = scale_input(s.bands);
        auto sd = scaled.data();
        std::copy(sd.begin(), sd.end(), data.begin() + static_cast<std::int64_t>(k) * c * plane);
        std::copy(s.mask.values.begin(), s.mask.values.end(),
                  targets.begin() + static_cast<std::int64_t>(k) * plane);
    }
    return {Tensor<float>::from_vector({n, c, h, w}, std::move(data)), std::move(targets)};
}

// Adam with bias correction; state per parameter tensor in build order.
class Adam {
public:
    Adam(UNet<float>& model, const TrainConfig& cfg) : cfg_(cfg) {
        model.for_each_parameter([&](const std::string&, Tensor<float>& t) {
            m_.emplace_back(static_cast<size_t>(t.numel()), 0.0f);
            v_.emplace_back(static_cast<size_t>(t.numel()), 0.0f);
        });
    }

    void step(UNet<float>& model) {
        ++t_;
        const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.adam_beta1), t_);
        const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.adam_beta2), t_);
        size_t idx = 0;
        model.for_each_parameter([&](const std::string&, Tensor<float>& param) {
            auto g = param.has_grad() ? param.grad() : std::span<const float>{};
            auto p = param.data();
            auto& m = m_[idx];
            auto& v = v_[idx];
            ++idx;
            if (g.empty()) return;
            for (size_t i = 0; i < p.size(); ++i) {
                m[i] = cfg_.adam_beta1 * m[i] + (1.0f - cfg_.adam_beta1) * g[i];
                v[i] = cfg_.adam_beta2 * v[i] + (1.0f - cfg_.adam_beta2) * g[i] * g[i];
                const double mhat = static_cast<double>(m[i]) / bc1;
                const double vhat = static_cast<double>(v[i]) / bc2;
                p[i] -= static_cast<float>(static_cast<double>(cfg_.learning_rate) * mhat /
                                           (std::sqrt(vhat) + static_cast<double>(cfg_.adam_eps)));
            }
        });
    }

private:
    TrainConfig cfg_;
    std::vector<std::vector<float>> m_, v_;
    long t_ = 0;
};

}  // namespace

double validation_loss(UNet<float>& model, const std::vector<RasterSample>& samples) {
    if (samples.empty()) throw std::invalid_argument("validation_loss: empty sample set");
    const Mode saved = model.mode();
    model.set_mode(Mode::eval);
    NoGradGuard ng;
    double total = 0;
    for (const auto& s : samples) {
        Tensor<float> probs = model.forward(scale_input(s.bands));
        total += static_cast<double>(cross_entropy(probs, s.mask.values).item());
    }
    model.set_mode(saved);
    return total / static_cast<double>(samples.size());
}

TrainLog train(UNet<float>& model, const std::vector<RasterSample>& train_set,
               const std::vector<RasterSample>& val_set, const TrainConfig& config) {
    config.validate();
    if (train_set.empty()) throw std::invalid_argument("train: empty training set");
    if (val_set.empty()) throw std::invalid_argument("train: empty validation set");
    for (const auto& s : train_set) s.validate("train");
    for (const auto& s : val_set) s.validate("train");

    TrainLog log;
    Adam optimizer(model, config);
    UNet<float> best = model.clone();
    double best_val = std::numeric_limits<double>::infinity();

    std::vector<size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), size_t{0});

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();

        // Full reshuffle each epoch from a per-epoch seed.
        Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(epoch)));
        rng.shuffle(std::span<size_t>(order));

        model.set_mode(Mode::train);
        double epoch_loss = 0;
        size_t seen = 0;
        for (size_t begin = 0; begin < order.size(); begin += static_cast<size_t>(config.batch_size)) {
            const size_t end = std::min(order.size(), begin + static_cast<size_t>(config.batch_size));
            auto [batch, targets] = make_batch(train_set, order, begin, end);

            model.zero_grads();
            Tensor<float> probs = model.forward(batch);
            Tensor<float> loss = cross_entropy(probs, targets);
            const double loss_v = static_cast<double>(loss.item());
            if (!std::isfinite(loss_v)) {
                throw std::runtime_error("train: loss became non-finite at epoch " +
                                         std::to_string(epoch) + ", batch starting at sample " +
                                         std::to_string(begin) + "; aborting");
            }
            backward(loss);
            optimizer.step(model);

            epoch_loss += loss_v * static_cast<double>(end - begin);
            seen += end - begin;
        }
        epoch_loss /= static_cast<double>(seen);

        const double val = validation_loss(model, val_set);
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log.entries.push_back({epoch, epoch_loss, val, secs});

        if (val < best_val) {
            best_val = val;
            log.selected_epoch = epoch;
            best.load_values_from(model);
        }
    }

    model.load_values_from(best);
    model.set_mode(Mode::eval);
    return log;
}

std::string trainlog_to_csv(const TrainLog& log) {
    std::string out = "epoch,train_loss,val_loss,seconds\n";
    char buf[128];
    for (const auto& e : log.entries) {
        std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g,%.3f\n", e.epoch, e.train_loss, e.val_loss,
                      e.seconds);
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "# selected_epoch=%d\n", log.selected_epoch);
    out += buf;
    return out;
}

}  // namespace bandprobe
