#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bandprobe/parallel.hpp"
#include "bandprobe/tensor.hpp"

namespace bandprobe {

enum class Mode { train, eval };

// Probability floor applied before log in the loss; keeps a saturated
// softmax from producing -inf.
inline constexpr double kProbFloor = 1e-12;

namespace detail {

struct Dims4 {
    std::int64_t n, c, h, w;
    bool batched;
};

// Layer inputs are [C,H,W] or batched [N,C,H,W]; both run through the same
// kernels with n = 1 for the former.
inline Dims4 image_dims(const std::vector<int>& shape, const char* op) {
    if (shape.size() == 3) return {1, shape[0], shape[1], shape[2], false};
    if (shape.size() == 4) return {shape[0], shape[1], shape[2], shape[3], true};
    throw std::invalid_argument(std::string(op) + ": expected rank 3 or 4 input, got shape " +
                                shape_to_string(shape));
}

inline std::vector<int> with_channels(const Dims4& d, std::int64_t channels) {
    if (d.batched)
        return {static_cast<int>(d.n), static_cast<int>(channels), static_cast<int>(d.h),
                static_cast<int>(d.w)};
    return {static_cast<int>(channels), static_cast<int>(d.h), static_cast<int>(d.w)};
}

}  // namespace detail

// --- 3x3 same-padding convolution -----------------------------------------

// Cross-correlation with a [C_out,C_in,3,3] kernel, zero pad 1, stride 1.
// Output spatial size equals input spatial size.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias) {
    const auto d = detail::image_dims(input.shape(), "conv2d");
    if (kernel.rank() != 4 || kernel.dim(2) != 3 || kernel.dim(3) != 3) {
        throw std::invalid_argument("conv2d: kernel must be [C_out,C_in,3,3], got " +
                                    shape_to_string(kernel.shape()));
    }
    const std::int64_t co_n = kernel.dim(0), ci_n = kernel.dim(1);
    if (ci_n != d.c) {
        throw std::invalid_argument("conv2d: input has " + std::to_string(d.c) +
                                    " channels but kernel expects " + std::to_string(ci_n));
    }
    if (bias.rank() != 1 || bias.dim(0) != co_n) {
        throw std::invalid_argument("conv2d: bias must be [C_out]=[" + std::to_string(co_n) +
                                    "], got " + shape_to_string(bias.shape()));
    }

    const std::int64_t H = d.h, W = d.w, plane = H * W;
    std::vector<T> out(static_cast<size_t>(d.n * co_n * plane));
    const T* in = input.data().data();
    const T* ker = kernel.data().data();
    const T* b = bias.data().data();

    parallel_for(d.n * co_n, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t nc = lo; nc < hi; ++nc) {
            const std::int64_t n = nc / co_n, co = nc % co_n;
            T* dst = out.data() + nc * plane;
            std::fill(dst, dst + plane, b[co]);
            for (std::int64_t ci = 0; ci < ci_n; ++ci) {
                const T* src_plane = in + (n * ci_n + ci) * plane;
                const T* kb = ker + (co * ci_n + ci) * 9;
                const T k00 = kb[0], k01 = kb[1], k02 = kb[2];
                const T k10 = kb[3], k11 = kb[4], k12 = kb[5];
                const T k20 = kb[6], k21 = kb[7], k22 = kb[8];
                for (std::int64_t y = 0; y < H; ++y) {
                    const T* r0 = y > 0 ? src_plane + (y - 1) * W : nullptr;
                    const T* r1 = src_plane + y * W;
                    const T* r2 = y < H - 1 ? src_plane + (y + 1) * W : nullptr;
                    T* row = dst + y * W;

                    // Boundary columns take only the in-range taps.
                    auto edge = [&](std::int64_t x) {
                        T acc = T(0);
                        if (r0) {
                            if (x > 0) acc += k00 * r0[x - 1];
                            acc += k01 * r0[x];
                            if (x < W - 1) acc += k02 * r0[x + 1];
                        }
                        if (x > 0) acc += k10 * r1[x - 1];
                        acc += k11 * r1[x];
                        if (x < W - 1) acc += k12 * r1[x + 1];
                        if (r2) {
                            if (x > 0) acc += k20 * r2[x - 1];
                            acc += k21 * r2[x];
                            if (x < W - 1) acc += k22 * r2[x + 1];
                        }
                        row[x] += acc;
                    };
                    edge(0);
                    if (W > 1) edge(W - 1);

                    if (r0 && r2) {
                        for (std::int64_t x = 1; x < W - 1; ++x) {
                            row[x] += k00 * r0[x - 1] + k01 * r0[x] + k02 * r0[x + 1] +
                                      k10 * r1[x - 1] + k11 * r1[x] + k12 * r1[x + 1] +
                                      k20 * r2[x - 1] + k21 * r2[x] + k22 * r2[x + 1];
                        }
                    } else {
                        if (r0)
                            for (std::int64_t x = 1; x < W - 1; ++x)
                                row[x] += k00 * r0[x - 1] + k01 * r0[x] + k02 * r0[x + 1];
                        for (std::int64_t x = 1; x < W - 1; ++x)
                            row[x] += k10 * r1[x - 1] + k11 * r1[x] + k12 * r1[x + 1];
                        if (r2)
                            for (std::int64_t x = 1; x < W - 1; ++x)
                                row[x] += k20 * r2[x - 1] + k21 * r2[x] + k22 * r2[x + 1];
                    }
                }
            }
        }
    });

    auto out_shape = detail::with_channels(d, co_n);
    Tensor<T> in_t = input, ker_t = kernel, b_t = bias;
    return Tensor<T>::make_op(
        std::move(out_shape), std::move(out), {input, kernel, bias},
        [in_t, ker_t, b_t, d, co_n, ci_n](Tensor<T>& o) mutable {
            const std::int64_t H = d.h, W = d.w, plane = H * W;
            const T* g = o.grad().data();
            const T* in = in_t.data().data();
            const T* ker = ker_t.data().data();

            if (in_t.requires_grad()) {
                T* din = in_t.grad_buffer().data();
                parallel_for(d.n * ci_n, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t nc = lo; nc < hi; ++nc) {
                        const std::int64_t n = nc / ci_n, ci = nc % ci_n;
                        T* dst = din + nc * plane;
                        for (std::int64_t co = 0; co < co_n; ++co) {
                            const T* g_plane = g + (n * co_n + co) * plane;
                            const T* kbase = ker + (co * ci_n + ci) * 9;
                            for (int ky = 0; ky < 3; ++ky) {
                                const int dy = ky - 1;
                                const std::int64_t y0 = std::max<std::int64_t>(0, dy);
                                const std::int64_t y1 = std::min<std::int64_t>(H, H + dy);
                                for (int kx = 0; kx < 3; ++kx) {
                                    const int dx = kx - 1;
                                    const T w = kbase[ky * 3 + kx];
                                    const std::int64_t x0 = std::max<std::int64_t>(0, dx);
                                    const std::int64_t x1 = std::min<std::int64_t>(W, W + dx);
                                    for (std::int64_t y = y0; y < y1; ++y) {
                                        const T* src = g_plane + (y - dy) * W - dx;
                                        T* row = dst + y * W;
                                        for (std::int64_t x = x0; x < x1; ++x)
                                            row[x] += w * src[x];
                                    }
                                }
                            }
                        }
                    }
                });
            }

            const bool want_k = ker_t.requires_grad(), want_b = b_t.requires_grad();
            if (want_k || want_b) {
                T* dker = want_k ? ker_t.grad_buffer().data() : nullptr;
                T* dbias = want_b ? b_t.grad_buffer().data() : nullptr;
                parallel_for(co_n, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t co = lo; co < hi; ++co) {
                        if (want_b) {
                            T acc = T(0);
                            for (std::int64_t n = 0; n < d.n; ++n) {
                                const T* g_plane = g + (n * co_n + co) * plane;
                                for (std::int64_t i = 0; i < plane; ++i) acc += g_plane[i];
                            }
                            dbias[co] += acc;
                        }
                        if (!want_k) continue;
                        for (std::int64_t ci = 0; ci < ci_n; ++ci) {
                            T* kslot = dker + (co * ci_n + ci) * 9;
                            for (int ky = 0; ky < 3; ++ky) {
                                const int dy = ky - 1;
                                const std::int64_t y0 = std::max<std::int64_t>(0, -dy);
                                const std::int64_t y1 = std::min<std::int64_t>(H, H - dy);
                                for (int kx = 0; kx < 3; ++kx) {
                                    const int dx = kx - 1;
                                    const std::int64_t x0 = std::max<std::int64_t>(0, -dx);
                                    const std::int64_t x1 = std::min<std::int64_t>(W, W - dx);
                                    T acc = T(0);
                                    for (std::int64_t n = 0; n < d.n; ++n) {
                                        const T* g_plane = g + (n * co_n + co) * plane;
                                        const T* src_plane = in + (n * ci_n + ci) * plane;
                                        for (std::int64_t y = y0; y < y1; ++y) {
                                            const T* gr = g_plane + y * W;
                                            const T* ir = src_plane + (y + dy) * W + dx;
                                            for (std::int64_t x = x0; x < x1; ++x)
                                                acc += gr[x] * ir[x];
                                        }
                                    }
                                    kslot[ky * 3 + kx] += acc;
                                }
                            }
                        }
                    }
                });
            }
        });
}

// --- 1x1 projection ---------------------------------------------------------

// Per-pixel linear map with a [C_out,C_in] kernel; the class head in front of
// the softmax.
template <typename T>
Tensor<T> pointwise_conv(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias) {
    const auto d = detail::image_dims(input.shape(), "pointwise_conv");
    if (kernel.rank() != 2 || kernel.dim(1) != d.c) {
        throw std::invalid_argument("pointwise_conv: kernel must be [C_out," + std::to_string(d.c) +
                                    "], got " + shape_to_string(kernel.shape()));
    }
    const std::int64_t co_n = kernel.dim(0), ci_n = d.c, plane = d.h * d.w;
    if (bias.rank() != 1 || bias.dim(0) != co_n) {
        throw std::invalid_argument("pointwise_conv: bias shape mismatch");
    }

    std::vector<T> out(static_cast<size_t>(d.n * co_n * plane));
    const T* in = input.data().data();
    const T* ker = kernel.data().data();
    const T* b = bias.data().data();
    for (std::int64_t n = 0; n < d.n; ++n) {
        for (std::int64_t co = 0; co < co_n; ++co) {
            T* dst = out.data() + (n * co_n + co) * plane;
            std::fill(dst, dst + plane, b[co]);
            for (std::int64_t ci = 0; ci < ci_n; ++ci) {
                const T w = ker[co * ci_n + ci];
                const T* src = in + (n * ci_n + ci) * plane;
                for (std::int64_t i = 0; i < plane; ++i) dst[i] += w * src[i];
            }
        }
    }

    auto out_shape = detail::with_channels(d, co_n);
    Tensor<T> in_t = input, ker_t = kernel, b_t = bias;
    return Tensor<T>::make_op(
        std::move(out_shape), std::move(out), {input, kernel, bias},
        [in_t, ker_t, b_t, d, co_n, ci_n](Tensor<T>& o) mutable {
            const std::int64_t plane = d.h * d.w;
            const T* g = o.grad().data();
            const T* in = in_t.data().data();
            const T* ker = ker_t.data().data();
            if (in_t.requires_grad()) {
                T* din = in_t.grad_buffer().data();
                for (std::int64_t n = 0; n < d.n; ++n)
                    for (std::int64_t ci = 0; ci < ci_n; ++ci) {
                        T* dst = din + (n * ci_n + ci) * plane;
                        for (std::int64_t co = 0; co < co_n; ++co) {
                            const T w = ker[co * ci_n + ci];
                            const T* src = g + (n * co_n + co) * plane;
                            for (std::int64_t i = 0; i < plane; ++i) dst[i] += w * src[i];
                        }
                    }
            }
            if (ker_t.requires_grad()) {
                T* dker = ker_t.grad_buffer().data();
                for (std::int64_t n = 0; n < d.n; ++n)
                    for (std::int64_t co = 0; co < co_n; ++co)
                        for (std::int64_t ci = 0; ci < ci_n; ++ci) {
                            const T* gp = g + (n * co_n + co) * plane;
                            const T* ip = in + (n * ci_n + ci) * plane;
                            T acc = T(0);
                            for (std::int64_t i = 0; i < plane; ++i) acc += gp[i] * ip[i];
                            dker[co * ci_n + ci] += acc;
                        }
            }
            if (b_t.requires_grad()) {
                T* db = b_t.grad_buffer().data();
                for (std::int64_t n = 0; n < d.n; ++n)
                    for (std::int64_t co = 0; co < co_n; ++co) {
                        const T* gp = g + (n * co_n + co) * plane;
                        T acc = T(0);
                        for (std::int64_t i = 0; i < plane; ++i) acc += gp[i];
                        db[co] += acc;
                    }
            }
        });
}

// --- ELU --------------------------------------------------------------------

// x for x > 0, alpha (e^x - 1) otherwise, alpha = 1.
template <typename T>
Tensor<T> elu(const Tensor<T>& input) {
    std::vector<T> out(static_cast<size_t>(input.numel()));
    const T* in = input.data().data();
    for (size_t i = 0; i < out.size(); ++i) {
        const T x = in[i];
        out[i] = x > T(0) ? x : static_cast<T>(std::expm1(static_cast<double>(x)));
    }
    Tensor<T> in_t = input;
    return Tensor<T>::make_op(input.shape(), std::move(out), {input}, [in_t](Tensor<T>& o) mutable {
        if (!in_t.requires_grad()) return;
        auto g = o.grad();
        auto y = o.data();
        const T* x = in_t.data().data();
        auto din = in_t.grad_buffer();
        // d/dx = 1 for x > 0, e^x = y + 1 otherwise (continuous at 0).
        for (size_t i = 0; i < din.size(); ++i)
            din[i] += g[i] * (x[i] > T(0) ? T(1) : y[i] + T(1));
    });
}

// --- batch normalization ------------------------------------------------------

template <typename T>
struct BatchNormState {
    std::vector<T> running_mean;
    std::vector<T> running_var;
    bool initialized = false;

    explicit BatchNormState(std::int64_t channels = 0)
        : running_mean(static_cast<size_t>(channels), T(0)),
          running_var(static_cast<size_t>(channels), T(1)) {}
};

// Per-channel normalization over (N,H,W). Train mode uses batch statistics
// and folds them into the running estimates; eval mode reads the running
// estimates and requires them to be populated.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormState<T>& state, Mode mode, T eps = T(1e-5), T momentum = T(0.1)) {
    const auto d = detail::image_dims(input.shape(), "batchnorm2d");
    const std::int64_t C = d.c, plane = d.h * d.w, M = d.n * plane;
    if (gamma.numel() != C || beta.numel() != C ||
        static_cast<std::int64_t>(state.running_mean.size()) != C ||
        static_cast<std::int64_t>(state.running_var.size()) != C) {
        throw std::invalid_argument("batchnorm2d: parameter/state length does not match " +
                                    std::to_string(C) + " channels");
    }
    if (mode == Mode::eval && !state.initialized) {
        throw std::runtime_error(
            "batchnorm2d: eval mode requested before running statistics exist; train first or "
            "initialize the running stats explicitly");
    }

    const T* in = input.data().data();
    const T* gm = gamma.data().data();
    const T* bt = beta.data().data();

    std::vector<T> mean(static_cast<size_t>(C)), invstd(static_cast<size_t>(C));
    if (mode == Mode::train) {
        for (std::int64_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (std::int64_t n = 0; n < d.n; ++n) {
                const T* p = in + (n * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) s += static_cast<double>(p[i]);
            }
            const double mu = s / static_cast<double>(M);
            double v = 0.0;
            for (std::int64_t n = 0; n < d.n; ++n) {
                const T* p = in + (n * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    const double dlt = static_cast<double>(p[i]) - mu;
                    v += dlt * dlt;
                }
            }
            v /= static_cast<double>(M);
            mean[static_cast<size_t>(c)] = static_cast<T>(mu);
            invstd[static_cast<size_t>(c)] =
                static_cast<T>(1.0 / std::sqrt(v + static_cast<double>(eps)));
            // Running update uses the unbiased variance, matching the usual
            // momentum convention.
            const double v_unbiased = M > 1 ? v * static_cast<double>(M) / static_cast<double>(M - 1) : v;
            state.running_mean[static_cast<size_t>(c)] =
                (T(1) - momentum) * state.running_mean[static_cast<size_t>(c)] +
                momentum * static_cast<T>(mu);
            state.running_var[static_cast<size_t>(c)] =
                (T(1) - momentum) * state.running_var[static_cast<size_t>(c)] +
                momentum * static_cast<T>(v_unbiased);
        }
        state.initialized = true;
    } else {
        for (std::int64_t c = 0; c < C; ++c) {
            mean[static_cast<size_t>(c)] = state.running_mean[static_cast<size_t>(c)];
            invstd[static_cast<size_t>(c)] = static_cast<T>(
                1.0 / std::sqrt(static_cast<double>(state.running_var[static_cast<size_t>(c)]) +
                                static_cast<double>(eps)));
        }
    }

    std::vector<T> out(static_cast<size_t>(input.numel()));
    for (std::int64_t n = 0; n < d.n; ++n) {
        for (std::int64_t c = 0; c < C; ++c) {
            const T* p = in + (n * C + c) * plane;
            T* q = out.data() + (n * C + c) * plane;
            const T mu = mean[static_cast<size_t>(c)], is = invstd[static_cast<size_t>(c)];
            const T gc = gm[c], bc = bt[c];
            for (std::int64_t i = 0; i < plane; ++i) q[i] = gc * (p[i] - mu) * is + bc;
        }
    }

    Tensor<T> in_t = input, gm_t = gamma, bt_t = beta;
    const bool train_stats = (mode == Mode::train);
    return Tensor<T>::make_op(
        input.shape(), std::move(out), {input, gamma, beta},
        [in_t, gm_t, bt_t, d, mean, invstd, train_stats](Tensor<T>& o) mutable {
            const std::int64_t C = d.c, plane = d.h * d.w, M = d.n * plane;
            const T* g = o.grad().data();
            const T* in = in_t.data().data();
            const T* gm = gm_t.data().data();

            for (std::int64_t c = 0; c < C; ++c) {
                const T mu = mean[static_cast<size_t>(c)], is = invstd[static_cast<size_t>(c)];
                // Channel sums of g and g*xhat feed every gradient below.
                double gsum = 0.0, gxsum = 0.0;
                for (std::int64_t n = 0; n < d.n; ++n) {
                    const T* gp = g + (n * C + c) * plane;
                    const T* ip = in + (n * C + c) * plane;
                    for (std::int64_t i = 0; i < plane; ++i) {
                        const double xh = static_cast<double>((ip[i] - mu) * is);
                        gsum += static_cast<double>(gp[i]);
                        gxsum += static_cast<double>(gp[i]) * xh;
                    }
                }
                if (bt_t.requires_grad()) bt_t.grad_buffer()[static_cast<size_t>(c)] += static_cast<T>(gsum);
                if (gm_t.requires_grad()) gm_t.grad_buffer()[static_cast<size_t>(c)] += static_cast<T>(gxsum);
                if (in_t.requires_grad()) {
                    T* din = in_t.grad_buffer().data();
                    const double gmean = gsum / static_cast<double>(M);
                    const double gxmean = gxsum / static_cast<double>(M);
                    const double k = static_cast<double>(gm[c]) * static_cast<double>(is);
                    for (std::int64_t n = 0; n < d.n; ++n) {
                        const T* gp = g + (n * C + c) * plane;
                        const T* ip = in + (n * C + c) * plane;
                        T* dp = din + (n * C + c) * plane;
                        if (train_stats) {
                            for (std::int64_t i = 0; i < plane; ++i) {
                                const double xh = static_cast<double>((ip[i] - mu) * is);
                                dp[i] += static_cast<T>(k * (static_cast<double>(gp[i]) - gmean -
                                                             xh * gxmean));
                            }
                        } else {
                            // Running stats are constants in eval mode.
                            for (std::int64_t i = 0; i < plane; ++i)
                                dp[i] += static_cast<T>(k * static_cast<double>(gp[i]));
                        }
                    }
                }
            }
        });
}

// --- 2x2 max pooling ----------------------------------------------------------

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input) {
    const auto d = detail::image_dims(input.shape(), "maxpool2d");
    if (d.h % 2 != 0 || d.w % 2 != 0) {
        throw std::invalid_argument("maxpool2d: spatial dims must be even, got " +
                                    std::to_string(d.h) + "x" + std::to_string(d.w));
    }
    const std::int64_t H = d.h, W = d.w, oh = H / 2, ow = W / 2;
    const std::int64_t planes = d.n * d.c;
    std::vector<T> out(static_cast<size_t>(planes * oh * ow));
    std::vector<std::int64_t> argmax(out.size());
    const T* in = input.data().data();

    for (std::int64_t p = 0; p < planes; ++p) {
        const T* src = in + p * H * W;
        T* dst = out.data() + p * oh * ow;
        std::int64_t* amax = argmax.data() + p * oh * ow;
        for (std::int64_t y = 0; y < oh; ++y) {
            for (std::int64_t x = 0; x < ow; ++x) {
                // Row-major scan; strict > keeps the first maximal element.
                std::int64_t base = (2 * y) * W + 2 * x;
                T best = src[base];
                std::int64_t besti = base;
                const std::int64_t cand[3] = {base + 1, base + W, base + W + 1};
                for (std::int64_t idx : cand) {
                    if (src[idx] > best) {
                        best = src[idx];
                        besti = idx;
                    }
                }
                dst[y * ow + x] = best;
                amax[y * ow + x] = p * H * W + besti;
            }
        }
    }

    auto out_shape = input.shape();
    out_shape[out_shape.size() - 2] = static_cast<int>(oh);
    out_shape[out_shape.size() - 1] = static_cast<int>(ow);
    Tensor<T> in_t = input;
    return Tensor<T>::make_op(std::move(out_shape), std::move(out), {input},
                              [in_t, argmax = std::move(argmax)](Tensor<T>& o) mutable {
                                  if (!in_t.requires_grad()) return;
                                  auto g = o.grad();
                                  auto din = in_t.grad_buffer();
                                  for (size_t i = 0; i < g.size(); ++i)
                                      din[static_cast<size_t>(argmax[i])] += g[i];
                              });
}

// --- 2x2 stride-2 transposed convolution ---------------------------------------

// Each input pixel scatters a [C_in,C_out,2,2] kernel patch; spatial dims double.
template <typename T>
Tensor<T> transposed_conv2d(const Tensor<T>& input, const Tensor<T>& kernel,
                            const Tensor<T>& bias) {
    const auto d = detail::image_dims(input.shape(), "transposed_conv2d");
    if (kernel.rank() != 4 || kernel.dim(2) != 2 || kernel.dim(3) != 2) {
        throw std::invalid_argument("transposed_conv2d: kernel must be [C_in,C_out,2,2], got " +
                                    shape_to_string(kernel.shape()));
    }
    if (kernel.dim(0) != d.c) {
        throw std::invalid_argument("transposed_conv2d: input has " + std::to_string(d.c) +
                                    " channels but kernel expects " +
                                    std::to_string(kernel.dim(0)));
    }
    const std::int64_t ci_n = d.c, co_n = kernel.dim(1);
    if (bias.rank() != 1 || bias.dim(0) != co_n) {
        throw std::invalid_argument("transposed_conv2d: bias shape mismatch");
    }
    const std::int64_t H = d.h, W = d.w, OH = 2 * H, OW = 2 * W;
    std::vector<T> out(static_cast<size_t>(d.n * co_n * OH * OW));
    const T* in = input.data().data();
    const T* ker = kernel.data().data();
    const T* b = bias.data().data();

    parallel_for(d.n * co_n, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t nc = lo; nc < hi; ++nc) {
            const std::int64_t n = nc / co_n, co = nc % co_n;
            T* dst = out.data() + nc * OH * OW;
            std::fill(dst, dst + OH * OW, b[co]);
            for (std::int64_t ci = 0; ci < ci_n; ++ci) {
                const T* src = in + (n * ci_n + ci) * H * W;
                const T* kbase = ker + (ci * co_n + co) * 4;
                for (std::int64_t y = 0; y < H; ++y) {
                    const T* srow = src + y * W;
                    T* d00 = dst + (2 * y) * OW;
                    T* d10 = dst + (2 * y + 1) * OW;
                    const T k00 = kbase[0], k01 = kbase[1], k10 = kbase[2], k11 = kbase[3];
                    for (std::int64_t x = 0; x < W; ++x) {
                        const T v = srow[x];
                        d00[2 * x] += v * k00;
                        d00[2 * x + 1] += v * k01;
                        d10[2 * x] += v * k10;
                        d10[2 * x + 1] += v * k11;
                    }
                }
            }
        }
    });

    auto out_shape = detail::with_channels(d, co_n);
    out_shape[out_shape.size() - 2] = static_cast<int>(OH);
    out_shape[out_shape.size() - 1] = static_cast<int>(OW);
    Tensor<T> in_t = input, ker_t = kernel, b_t = bias;
    return Tensor<T>::make_op(
        std::move(out_shape), std::move(out), {input, kernel, bias},
        [in_t, ker_t, b_t, d, co_n, ci_n](Tensor<T>& o) mutable {
            const std::int64_t H = d.h, W = d.w, OH = 2 * H, OW = 2 * W;
            const T* g = o.grad().data();
            const T* in = in_t.data().data();
            const T* ker = ker_t.data().data();

            if (in_t.requires_grad()) {
                T* din = in_t.grad_buffer().data();
                parallel_for(d.n * ci_n, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t nc = lo; nc < hi; ++nc) {
                        const std::int64_t n = nc / ci_n, ci = nc % ci_n;
                        T* dst = din + nc * H * W;
                        for (std::int64_t co = 0; co < co_n; ++co) {
                            const T* gp = g + (n * co_n + co) * OH * OW;
                            const T* kbase = ker + (ci * co_n + co) * 4;
                            const T k00 = kbase[0], k01 = kbase[1], k10 = kbase[2], k11 = kbase[3];
                            for (std::int64_t y = 0; y < H; ++y) {
                                const T* g00 = gp + (2 * y) * OW;
                                const T* g10 = gp + (2 * y + 1) * OW;
                                T* drow = dst + y * W;
                                for (std::int64_t x = 0; x < W; ++x) {
                                    drow[x] += g00[2 * x] * k00 + g00[2 * x + 1] * k01 +
                                               g10[2 * x] * k10 + g10[2 * x + 1] * k11;
                                }
                            }
                        }
                    }
                });
            }
            if (ker_t.requires_grad()) {
                T* dker = ker_t.grad_buffer().data();
                parallel_for(ci_n, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t ci = lo; ci < hi; ++ci) {
                        for (std::int64_t co = 0; co < co_n; ++co) {
                            double a00 = 0, a01 = 0, a10 = 0, a11 = 0;
                            for (std::int64_t n = 0; n < d.n; ++n) {
                                const T* src = in + (n * ci_n + ci) * H * W;
                                const T* gp = g + (n * co_n + co) * OH * OW;
                                for (std::int64_t y = 0; y < H; ++y) {
                                    const T* srow = src + y * W;
                                    const T* g00 = gp + (2 * y) * OW;
                                    const T* g10 = gp + (2 * y + 1) * OW;
                                    for (std::int64_t x = 0; x < W; ++x) {
                                        const double v = static_cast<double>(srow[x]);
                                        a00 += v * g00[2 * x];
                                        a01 += v * g00[2 * x + 1];
                                        a10 += v * g10[2 * x];
                                        a11 += v * g10[2 * x + 1];
                                    }
                                }
                            }
                            T* kslot = dker + (ci * co_n + co) * 4;
                            kslot[0] += static_cast<T>(a00);
                            kslot[1] += static_cast<T>(a01);
                            kslot[2] += static_cast<T>(a10);
                            kslot[3] += static_cast<T>(a11);
                        }
                    }
                });
            }
            if (b_t.requires_grad()) {
                T* db = b_t.grad_buffer().data();
                for (std::int64_t co = 0; co < co_n; ++co) {
                    double acc = 0;
                    for (std::int64_t n = 0; n < d.n; ++n) {
                        const T* gp = g + (n * co_n + co) * OH * OW;
                        for (std::int64_t i = 0; i < OH * OW; ++i) acc += static_cast<double>(gp[i]);
                    }
                    db[co] += static_cast<T>(acc);
                }
            }
        });
}

// --- channel concatenation ------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    const auto da = detail::image_dims(a.shape(), "concat_channels");
    const auto db = detail::image_dims(b.shape(), "concat_channels");
    if (da.batched != db.batched || da.n != db.n || da.h != db.h || da.w != db.w) {
        throw std::invalid_argument("concat_channels: incompatible shapes " +
                                    shape_to_string(a.shape()) + " and " +
                                    shape_to_string(b.shape()));
    }
    const std::int64_t plane = da.h * da.w, ca = da.c, cb = db.c;
    std::vector<T> out(static_cast<size_t>(da.n * (ca + cb) * plane));
    const T* ap = a.data().data();
    const T* bp = b.data().data();
    for (std::int64_t n = 0; n < da.n; ++n) {
        std::copy(ap + n * ca * plane, ap + (n + 1) * ca * plane,
                  out.data() + n * (ca + cb) * plane);
        std::copy(bp + n * cb * plane, bp + (n + 1) * cb * plane,
                  out.data() + n * (ca + cb) * plane + ca * plane);
    }

    auto out_shape = detail::with_channels(da, ca + cb);
    Tensor<T> a_t = a, b_t = b;
    return Tensor<T>::make_op(std::move(out_shape), std::move(out), {a, b},
                              [a_t, b_t, da, ca, cb, plane](Tensor<T>& o) mutable {
                                  const T* g = o.grad().data();
                                  if (a_t.requires_grad()) {
                                      T* ga = a_t.grad_buffer().data();
                                      for (std::int64_t n = 0; n < da.n; ++n) {
                                          const T* src = g + n * (ca + cb) * plane;
                                          T* dst = ga + n * ca * plane;
                                          for (std::int64_t i = 0; i < ca * plane; ++i)
                                              dst[i] += src[i];
                                      }
                                  }
                                  if (b_t.requires_grad()) {
                                      T* gb = b_t.grad_buffer().data();
                                      for (std::int64_t n = 0; n < da.n; ++n) {
                                          const T* src = g + n * (ca + cb) * plane + ca * plane;
                                          T* dst = gb + n * cb * plane;
                                          for (std::int64_t i = 0; i < cb * plane; ++i)
                                              dst[i] += src[i];
                                      }
                                  }
                              });
}

// --- per-pixel channel softmax ----------------------------------------------------

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& input) {
    const auto d = detail::image_dims(input.shape(), "softmax_channels");
    if (d.c < 2) {
        throw std::invalid_argument("softmax_channels: need at least 2 channels, got " +
                                    std::to_string(d.c));
    }
    const std::int64_t K = d.c, plane = d.h * d.w;
    std::vector<T> out(static_cast<size_t>(input.numel()));
    const T* in = input.data().data();
    for (std::int64_t n = 0; n < d.n; ++n) {
        const T* base = in + n * K * plane;
        T* obase = out.data() + n * K * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
            T m = base[i];
            for (std::int64_t k = 1; k < K; ++k) m = std::max(m, base[k * plane + i]);
            double s = 0.0;
            for (std::int64_t k = 0; k < K; ++k) {
                const double e = std::exp(static_cast<double>(base[k * plane + i] - m));
                obase[k * plane + i] = static_cast<T>(e);
                s += e;
            }
            const double inv = 1.0 / s;
            for (std::int64_t k = 0; k < K; ++k)
                obase[k * plane + i] = static_cast<T>(static_cast<double>(obase[k * plane + i]) * inv);
        }
    }

    Tensor<T> in_t = input;
    return Tensor<T>::make_op(input.shape(), std::move(out), {input},
                              [in_t, d](Tensor<T>& o) mutable {
                                  if (!in_t.requires_grad()) return;
                                  const std::int64_t K = d.c, plane = d.h * d.w;
                                  const T* g = o.grad().data();
                                  const T* y = o.data().data();
                                  T* din = in_t.grad_buffer().data();
                                  for (std::int64_t n = 0; n < d.n; ++n) {
                                      const std::int64_t off = n * K * plane;
                                      for (std::int64_t i = 0; i < plane; ++i) {
                                          double dot = 0.0;
                                          for (std::int64_t k = 0; k < K; ++k) {
                                              const std::int64_t idx = off + k * plane + i;
                                              dot += static_cast<double>(g[idx]) *
                                                     static_cast<double>(y[idx]);
                                          }
                                          for (std::int64_t k = 0; k < K; ++k) {
                                              const std::int64_t idx = off + k * plane + i;
                                              din[idx] += static_cast<T>(
                                                  static_cast<double>(y[idx]) *
                                                  (static_cast<double>(g[idx]) - dot));
                                          }
                                      }
                                  }
                              });
}

// --- cross entropy over probabilities ----------------------------------------------

// Mean over pixels of -log(pred[target]); pred holds per-pixel class
// probabilities, target holds class indices (one per pixel, row-major,
// batch-major when pred is rank 4).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& pred, std::span<const std::uint8_t> target) {
    const auto d = detail::image_dims(pred.shape(), "cross_entropy");
    const std::int64_t K = d.c, plane = d.h * d.w, pixels = d.n * plane;
    if (static_cast<std::int64_t>(target.size()) != pixels) {
        throw std::invalid_argument("cross_entropy: target has " + std::to_string(target.size()) +
                                    " entries for " + std::to_string(pixels) + " pixels");
    }
    const T* p = pred.data().data();
    const T floor = static_cast<T>(kProbFloor);
    double loss = 0.0;
    for (std::int64_t n = 0; n < d.n; ++n) {
        for (std::int64_t i = 0; i < plane; ++i) {
            const std::uint8_t t = target[static_cast<size_t>(n * plane + i)];
            if (t >= K) {
                throw std::invalid_argument("cross_entropy: target class " + std::to_string(int(t)) +
                                            " out of range [0," + std::to_string(K) + ")");
            }
            const T pv = p[(n * K + t) * plane + i];
            loss -= std::log(static_cast<double>(std::max(pv, floor)));
        }
    }
    loss /= static_cast<double>(pixels);

    Tensor<T> pred_t = pred;
    std::vector<std::uint8_t> tgt(target.begin(), target.end());
    return Tensor<T>::make_op(
        {1}, {static_cast<T>(loss)}, {pred},
        [pred_t, tgt = std::move(tgt), d](Tensor<T>& o) mutable {
            if (!pred_t.requires_grad()) return;
            const std::int64_t K = d.c, plane = d.h * d.w, pixels = d.n * plane;
            const T floor = static_cast<T>(kProbFloor);
            const T g = o.grad()[0];
            const T* p = pred_t.data().data();
            T* dp = pred_t.grad_buffer().data();
            const T scale = g / static_cast<T>(pixels);
            for (std::int64_t n = 0; n < d.n; ++n) {
                for (std::int64_t i = 0; i < plane; ++i) {
                    const std::uint8_t t = tgt[static_cast<size_t>(n * plane + i)];
                    const std::int64_t idx = (n * K + t) * plane + i;
                    // Below the floor the clamped log is constant.
                    if (p[idx] >= floor) dp[idx] -= scale / p[idx];
                }
            }
        });
}

}  // namespace bandprobe
