#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <memory>
#include <vector>

#include "bandprobe/nn_ops.hpp"
#include "bandprobe/parallel.hpp"
#include "bandprobe/rng.hpp"
#include "bandprobe/tensor.hpp"
#include "oracles.hpp"

using bandprobe::backward;
using bandprobe::BatchNormState;
using bandprobe::Mode;
using bandprobe::Rng;
using bandprobe::Tensor;

namespace {

template <typename T>
Tensor<T> rand_tensor(Rng& rng, std::vector<int> shape, bool requires_grad = false,
                      double lo = -1.0, double hi = 1.0) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    std::vector<T> v(static_cast<size_t>(n));
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return Tensor<T>::from_vector(std::move(shape), std::move(v), requires_grad);
}

std::vector<double> to_vec(std::span<const double> s) { return {s.begin(), s.end()}; }

// Weighted-sum loss so per-element output gradients are all distinct.
double weighted_sum(const Tensor<double>& out, const Tensor<double>& w) {
    double s = 0;
    auto od = out.data();
    auto wd = w.data();
    for (size_t i = 0; i < od.size(); ++i) s += od[i] * wd[i];
    return s;
}

}  // namespace

// --------------------------------------------------------------------------
// conv2d
// --------------------------------------------------------------------------

TEST_CASE("conv2d identity kernel passes the pixel through") {
    auto x = Tensor<float>::from_vector({1, 1, 1}, {5.0f});
    std::vector<float> k(9, 0.0f);
    k[4] = 1.0f;  // center tap
    auto ker = Tensor<float>::from_vector({1, 1, 3, 3}, std::move(k));
    auto bias = Tensor<float>::zeros({1});
    auto out = bandprobe::conv2d(x, ker, bias);
    CHECK(out.shape() == std::vector<int>{1, 1, 1});
    CHECK(out.data()[0] == doctest::Approx(5.0f));
}

TEST_CASE("conv2d all-ones kernel on constant input counts the padded window") {
    auto x = Tensor<float>::full({1, 3, 3}, 1.0f);
    auto ker = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
    auto bias = Tensor<float>::zeros({1});
    auto out = bandprobe::conv2d(x, ker, bias);
    auto d = out.data();
    CHECK(d[4] == doctest::Approx(9.0f));  // center
    CHECK(d[0] == doctest::Approx(4.0f));  // corners
    CHECK(d[2] == doctest::Approx(4.0f));
    CHECK(d[6] == doctest::Approx(4.0f));
    CHECK(d[8] == doctest::Approx(4.0f));
    CHECK(d[1] == doctest::Approx(6.0f));  // edges
}

TEST_CASE("conv2d zero kernel zero bias gives zero output") {
    Rng rng(7);
    auto x = rand_tensor<float>(rng, {3, 4, 4});
    auto ker = Tensor<float>::zeros({2, 3, 3, 3});
    auto bias = Tensor<float>::zeros({2});
    auto out = bandprobe::conv2d(x, ker, bias);
    for (float v : out.data()) CHECK(v == 0.0f);
}

TEST_CASE("conv2d rejects channel mismatch") {
    auto x = Tensor<float>::zeros({3, 4, 4});
    auto ker = Tensor<float>::zeros({2, 4, 3, 3});
    auto bias = Tensor<float>::zeros({2});
    CHECK_THROWS_AS(bandprobe::conv2d(x, ker, bias), std::invalid_argument);
}

TEST_CASE("conv2d matches the sliding-window oracle on random inputs") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const int ci = 1 + static_cast<int>(rng.bounded(4));
        const int co = 1 + static_cast<int>(rng.bounded(4));
        const int h = 2 + static_cast<int>(rng.bounded(7));
        const int w = 2 + static_cast<int>(rng.bounded(7));
        auto x = rand_tensor<double>(rng, {ci, h, w});
        auto ker = rand_tensor<double>(rng, {co, ci, 3, 3});
        auto bias = rand_tensor<double>(rng, {co});
        auto out = bandprobe::conv2d(x, ker, bias);
        auto ref = oracle::conv2d_ref(to_vec(x.data()), ci, h, w, to_vec(ker.data()), co,
                                      to_vec(bias.data()));
        REQUIRE(out.numel() == static_cast<std::int64_t>(ref.size()));
        for (size_t i = 0; i < ref.size(); ++i)
            CHECK(std::abs(out.data()[i] - ref[i]) < 1e-5);
    }
}

TEST_CASE("conv2d output is identical across thread counts") {
    Rng rng(13);
    auto x = rand_tensor<float>(rng, {4, 2, 16, 16});
    auto ker = rand_tensor<float>(rng, {6, 2, 3, 3});
    auto bias = rand_tensor<float>(rng, {6});
    const int saved = bandprobe::max_threads();
    bandprobe::set_max_threads(1);
    auto out1 = bandprobe::conv2d(x, ker, bias);
    bandprobe::set_max_threads(4);
    auto out4 = bandprobe::conv2d(x, ker, bias);
    bandprobe::set_max_threads(saved);
    for (std::int64_t i = 0; i < out1.numel(); ++i) CHECK(out1.data()[i] == out4.data()[i]);
}

TEST_CASE("conv2d gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(100 + seed);
        auto x = rand_tensor<double>(rng, {2, 5, 4}, true);
        auto ker = rand_tensor<double>(rng, {3, 2, 3, 3}, true);
        auto bias = rand_tensor<double>(rng, {3}, true);
        auto w = rand_tensor<double>(rng, {3, 5, 4});

        auto out = bandprobe::conv2d(x, ker, bias);
        auto loss = bandprobe::sum(bandprobe::mul(out, w));
        backward(loss);

        auto loss_fn = [&]() {
            bandprobe::NoGradGuard ng;
            return weighted_sum(bandprobe::conv2d(x, ker, bias), w);
        };
        CHECK(oracle::max_rel_error(to_vec(x.grad()), oracle::finite_diff(x.data(), loss_fn)) <
              1e-5);
        CHECK(oracle::max_rel_error(to_vec(ker.grad()), oracle::finite_diff(ker.data(), loss_fn)) <
              1e-5);
        CHECK(oracle::max_rel_error(to_vec(bias.grad()),
                                    oracle::finite_diff(bias.data(), loss_fn)) < 1e-5);
    }
}

// --------------------------------------------------------------------------
// elu
// --------------------------------------------------------------------------

TEST_CASE("elu point values") {
    auto x = Tensor<float>::from_vector({3}, {0.0f, 2.5f, -1.0f});
    auto y = bandprobe::elu(x);
    CHECK(y.data()[0] == doctest::Approx(0.0f));
    CHECK(y.data()[1] == doctest::Approx(2.5f));
    CHECK(y.data()[2] == doctest::Approx(-0.63212).epsilon(1e-5));
}

TEST_CASE("elu gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(200 + seed);
        auto x = rand_tensor<double>(rng, {2, 3, 3}, true, -2.0, 2.0);
        auto w = rand_tensor<double>(rng, {2, 3, 3});
        auto loss = bandprobe::sum(bandprobe::mul(bandprobe::elu(x), w));
        backward(loss);
        auto loss_fn = [&]() {
            bandprobe::NoGradGuard ng;
            return weighted_sum(bandprobe::elu(x), w);
        };
        CHECK(oracle::max_rel_error(to_vec(x.grad()), oracle::finite_diff(x.data(), loss_fn)) <
              1e-5);
    }
}

// --------------------------------------------------------------------------
// batchnorm2d
// --------------------------------------------------------------------------

TEST_CASE("batchnorm2d train mode zero-variance channel maps to zero") {
    auto x = Tensor<float>::full({1, 1, 2, 2}, 1.0f);
    auto gamma = Tensor<float>::full({1}, 1.0f);
    auto beta = Tensor<float>::zeros({1});
    BatchNormState<float> state(1);
    auto y = bandprobe::batchnorm2d(x, gamma, beta, state, Mode::train);
    for (float v : y.data()) CHECK(v == doctest::Approx(0.0f));
    CHECK(state.initialized);
}

TEST_CASE("batchnorm2d train mode normalizes {0,2} to about +-1") {
    auto x = Tensor<float>::from_vector({1, 1, 1, 2}, {0.0f, 2.0f});
    auto gamma = Tensor<float>::full({1}, 1.0f);
    auto beta = Tensor<float>::zeros({1});
    BatchNormState<float> state(1);
    auto y = bandprobe::batchnorm2d(x, gamma, beta, state, Mode::train);
    const double expected = 1.0 / std::sqrt(1.0 + 1e-5);
    CHECK(y.data()[0] == doctest::Approx(-expected).epsilon(1e-6));
    CHECK(y.data()[1] == doctest::Approx(expected).epsilon(1e-6));
}

TEST_CASE("batchnorm2d eval mode with identity stats passes input through") {
    Rng rng(31);
    auto x = rand_tensor<float>(rng, {1, 2, 2, 2});
    auto gamma = Tensor<float>::full({2}, 1.0f);
    auto beta = Tensor<float>::zeros({2});
    BatchNormState<float> state(2);  // mean 0, var 1
    state.initialized = true;
    auto y = bandprobe::batchnorm2d(x, gamma, beta, state, Mode::eval);
    for (std::int64_t i = 0; i < x.numel(); ++i)
        CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-4));
}

TEST_CASE("batchnorm2d eval mode before any statistics is an error") {
    auto x = Tensor<float>::zeros({1, 1, 2, 2});
    auto gamma = Tensor<float>::full({1}, 1.0f);
    auto beta = Tensor<float>::zeros({1});
    BatchNormState<float> state(1);
    CHECK_THROWS_AS(bandprobe::batchnorm2d(x, gamma, beta, state, Mode::eval),
                    std::runtime_error);
}

TEST_CASE("batchnorm2d updates running statistics with momentum") {
    auto x = Tensor<float>::from_vector({1, 1, 1, 2}, {0.0f, 2.0f});
    auto gamma = Tensor<float>::full({1}, 1.0f);
    auto beta = Tensor<float>::zeros({1});
    BatchNormState<float> state(1);
    bandprobe::batchnorm2d(x, gamma, beta, state, Mode::train);
    // momentum 0.1: mean 0.9*0 + 0.1*1, var 0.9*1 + 0.1*2 (unbiased var = 2)
    CHECK(state.running_mean[0] == doctest::Approx(0.1f));
    CHECK(state.running_var[0] == doctest::Approx(1.1f));
}

TEST_CASE("batchnorm2d gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(300 + seed);
        auto x = rand_tensor<double>(rng, {2, 3, 4, 4}, true);
        auto gamma = rand_tensor<double>(rng, {3}, true, 0.5, 1.5);
        auto beta = rand_tensor<double>(rng, {3}, true);
        auto w = rand_tensor<double>(rng, {2, 3, 4, 4});
        BatchNormState<double> state(3);

        auto out = bandprobe::batchnorm2d(x, gamma, beta, state, Mode::train);
        auto loss = bandprobe::sum(bandprobe::mul(out, w));
        backward(loss);

        auto loss_fn = [&]() {
            bandprobe::NoGradGuard ng;
            BatchNormState<double> scratch(3);
            return weighted_sum(bandprobe::batchnorm2d(x, gamma, beta, scratch, Mode::train), w);
        };
        CHECK(oracle::max_rel_error(to_vec(x.grad()), oracle::finite_diff(x.data(), loss_fn)) <
              1e-5);
        CHECK(oracle::max_rel_error(to_vec(gamma.grad()),
                                    oracle::finite_diff(gamma.data(), loss_fn)) < 1e-5);
        CHECK(oracle::max_rel_error(to_vec(beta.grad()),
                                    oracle::finite_diff(beta.data(), loss_fn)) < 1e-5);
    }
}

// --------------------------------------------------------------------------
// maxpool2d
// --------------------------------------------------------------------------

TEST_CASE("maxpool2d point examples") {
    auto a = bandprobe::maxpool2d(Tensor<float>::from_vector({1, 2, 2}, {1, 2, 3, 4}));
    CHECK(a.data()[0] == 4.0f);

    auto b = bandprobe::maxpool2d(Tensor<float>::full({1, 4, 4}, 7.0f));
    CHECK(b.shape() == std::vector<int>{1, 2, 2});
    for (float v : b.data()) CHECK(v == 7.0f);

    auto c = bandprobe::maxpool2d(Tensor<float>::from_vector({1, 2, 2}, {-1, -2, -3, -4}));
    CHECK(c.data()[0] == -1.0f);
}

TEST_CASE("maxpool2d rejects odd spatial dims") {
    CHECK_THROWS_AS(bandprobe::maxpool2d(Tensor<float>::zeros({1, 3, 4})), std::invalid_argument);
    CHECK_THROWS_AS(bandprobe::maxpool2d(Tensor<float>::zeros({1, 4, 5})), std::invalid_argument);
}

TEST_CASE("maxpool2d equals brute-force window max exactly") {
    Rng rng(41);
    for (int trial = 0; trial < 20; ++trial) {
        const int c = 1 + static_cast<int>(rng.bounded(3));
        const int h = 2 * (1 + static_cast<int>(rng.bounded(5)));
        const int w = 2 * (1 + static_cast<int>(rng.bounded(5)));
        auto x = rand_tensor<double>(rng, {c, h, w});
        auto out = bandprobe::maxpool2d(x);
        auto ref = oracle::maxpool2d_ref(to_vec(x.data()), c, h, w);
        for (size_t i = 0; i < ref.size(); ++i) CHECK(out.data()[i] == ref[i]);
    }
}

TEST_CASE("maxpool2d routes tied gradients to the first element in row-major order") {
    auto x = Tensor<float>::full({1, 2, 2}, 7.0f, true);
    auto loss = bandprobe::sum(bandprobe::maxpool2d(x));
    backward(loss);
    auto g = x.grad();
    CHECK(g[0] == 1.0f);
    CHECK(g[1] == 0.0f);
    CHECK(g[2] == 0.0f);
    CHECK(g[3] == 0.0f);
}

TEST_CASE("maxpool2d gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(400 + seed);
        auto x = rand_tensor<double>(rng, {2, 4, 4}, true);
        auto w = rand_tensor<double>(rng, {2, 2, 2});
        auto loss = bandprobe::sum(bandprobe::mul(bandprobe::maxpool2d(x), w));
        backward(loss);
        auto loss_fn = [&]() {
            bandprobe::NoGradGuard ng;
            return weighted_sum(bandprobe::maxpool2d(x), w);
        };
        CHECK(oracle::max_rel_error(to_vec(x.grad()), oracle::finite_diff(x.data(), loss_fn)) <
              1e-5);
    }
}

// --------------------------------------------------------------------------
// transposed_conv2d
// --------------------------------------------------------------------------

TEST_CASE("transposed_conv2d single-pixel scatter") {
    auto x = Tensor<float>::from_vector({1, 1, 1}, {3.0f});
    auto ker = Tensor<float>::full({1, 1, 2, 2}, 1.0f);
    auto bias = Tensor<float>::zeros({1});
    auto out = bandprobe::transposed_conv2d(x, ker, bias);
    CHECK(out.shape() == std::vector<int>{1, 2, 2});
    for (float v : out.data()) CHECK(v == doctest::Approx(3.0f));
}

TEST_CASE("transposed_conv2d zero input gives zero output and doubles the shape") {
    auto x = Tensor<float>::zeros({1, 8, 8});
    auto ker = Tensor<float>::full({1, 3, 2, 2}, 0.5f);
    auto bias = Tensor<float>::zeros({3});
    auto out = bandprobe::transposed_conv2d(x, ker, bias);
    CHECK(out.shape() == std::vector<int>{3, 16, 16});
    for (float v : out.data()) CHECK(v == 0.0f);
}

TEST_CASE("transposed_conv2d matches the scatter oracle on random inputs") {
    Rng rng(51);
    for (int trial = 0; trial < 20; ++trial) {
        const int ci = 1 + static_cast<int>(rng.bounded(4));
        const int co = 1 + static_cast<int>(rng.bounded(4));
        const int h = 1 + static_cast<int>(rng.bounded(8));
        const int w = 1 + static_cast<int>(rng.bounded(8));
        auto x = rand_tensor<double>(rng, {ci, h, w});
        auto ker = rand_tensor<double>(rng, {ci, co, 2, 2});
        auto bias = rand_tensor<double>(rng, {co});
        auto out = bandprobe::transposed_conv2d(x, ker, bias);
        auto ref = oracle::tconv2d_ref(to_vec(x.data()), ci, h, w, to_vec(ker.data()), co,
                                       to_vec(bias.data()));
        for (size_t i = 0; i < ref.size(); ++i)
            CHECK(std::abs(out.data()[i] - ref[i]) < 1e-5);
    }
}

TEST_CASE("transposed_conv2d gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(500 + seed);
        auto x = rand_tensor<double>(rng, {2, 3, 4}, true);
        auto ker = rand_tensor<double>(rng, {2, 3, 2, 2}, true);
        auto bias = rand_tensor<double>(rng, {3}, true);
        auto w = rand_tensor<double>(rng, {3, 6, 8});
        auto out = bandprobe::transposed_conv2d(x, ker, bias);
        auto loss = bandprobe::sum(bandprobe::mul(out, w));
        backward(loss);
        auto loss_fn = [&]() {
            bandprobe::NoGradGuard ng;
            return weighted_sum(bandprobe::transposed_conv2d(x, ker, bias), w);
        };
        CHECK(oracle::max_rel_error(to_vec(x.grad()), oracle::finite_diff(x.data(), loss_fn)) <
              1e-5);
        CHECK(oracle::max_rel_error(to_vec(ker.grad()), oracle::finite_diff(ker.data(), loss_fn)) <
              1e-5);
        CHECK(oracle::max_rel_error(to_vec(bias.grad()),
                                    oracle::finite_diff(bias.data(), loss_fn)) < 1e-5);
    }
}

// --------------------------------------------------------------------------
// concat_channels
// --------------------------------------------------------------------------

TEST_CASE("concat_channels shape law and slice recovery") {
    Rng rng(61);
    auto a = rand_tensor<float>(rng, {2, 4, 4});
    auto b = rand_tensor<float>(rng, {3, 4, 4});
    auto out = bandprobe::concat_channels(a, b);
    CHECK(out.shape() == std::vector<int>{5, 4, 4});
    // channels [0..2) recover a exactly
    for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(out.data()[i] == a.data()[i]);
    for (std::int64_t i = 0; i < b.numel(); ++i) CHECK(out.data()[a.numel() + i] == b.data()[i]);
}

TEST_CASE("concat_channels with an empty-channel tensor is the identity") {
    Rng rng(62);
    auto a = rand_tensor<float>(rng, {3, 2, 2});
    auto empty = Tensor<float>::zeros({0, 2, 2});
    auto out = bandprobe::concat_channels(a, empty);
    CHECK(out.shape() == std::vector<int>{3, 2, 2});
    for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(out.data()[i] == a.data()[i]);
}

TEST_CASE("concat_channels rejects spatial mismatch") {
    auto a = Tensor<float>::zeros({2, 4, 4});
    auto b = Tensor<float>::zeros({2, 4, 6});
    CHECK_THROWS_AS(bandprobe::concat_channels(a, b), std::invalid_argument);
}

TEST_CASE("concat_channels splits gradients") {
    Rng rng(63);
    auto a = rand_tensor<double>(rng, {2, 3, 3}, true);
    auto b = rand_tensor<double>(rng, {1, 3, 3}, true);
    auto w = rand_tensor<double>(rng, {3, 3, 3});
    auto loss = bandprobe::sum(bandprobe::mul(bandprobe::concat_channels(a, b), w));
    backward(loss);
    auto loss_fn = [&]() {
        bandprobe::NoGradGuard ng;
        return weighted_sum(bandprobe::concat_channels(a, b), w);
    };
    CHECK(oracle::max_rel_error(to_vec(a.grad()), oracle::finite_diff(a.data(), loss_fn)) < 1e-5);
    CHECK(oracle::max_rel_error(to_vec(b.grad()), oracle::finite_diff(b.data(), loss_fn)) < 1e-5);
}

// --------------------------------------------------------------------------
// softmax_channels
// --------------------------------------------------------------------------

TEST_CASE("softmax_channels point values and stability") {
    auto even = bandprobe::softmax_channels(Tensor<float>::zeros({2, 1, 1}));
    CHECK(even.data()[0] == doctest::Approx(0.5f));
    CHECK(even.data()[1] == doctest::Approx(0.5f));

    auto extreme =
        bandprobe::softmax_channels(Tensor<float>::from_vector({2, 1, 1}, {100.0f, -100.0f}));
    CHECK(extreme.data()[0] == doctest::Approx(1.0f));
    CHECK(extreme.data()[1] == doctest::Approx(0.0f).epsilon(1e-6));
    CHECK(extreme.all_finite());

    auto skew = bandprobe::softmax_channels(Tensor<float>::from_vector({2, 1, 1}, {1.0f, 0.0f}));
    CHECK(skew.data()[0] == doctest::Approx(0.7311).epsilon(1e-4));
    CHECK(skew.data()[1] == doctest::Approx(0.2689).epsilon(1e-4));
}

TEST_CASE("softmax_channels rejects single-channel input") {
    CHECK_THROWS_AS(bandprobe::softmax_channels(Tensor<float>::zeros({1, 2, 2})),
                    std::invalid_argument);
}

TEST_CASE("softmax_channels sums to one per pixel with entries in (0,1)") {
    Rng rng(71);
    for (int trial = 0; trial < 10; ++trial) {
        const int k = 2 + static_cast<int>(rng.bounded(4));
        const int h = 1 + static_cast<int>(rng.bounded(6));
        const int w = 1 + static_cast<int>(rng.bounded(6));
        auto x = rand_tensor<float>(rng, {k, h, w}, false, -5.0, 5.0);
        auto y = bandprobe::softmax_channels(x);
        for (int i = 0; i < h * w; ++i) {
            double s = 0;
            for (int c = 0; c < k; ++c) {
                const float v = y.data()[c * h * w + i];
                CHECK(v > 0.0f);
                CHECK(v < 1.0f);
                s += v;
            }
            CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("softmax_channels gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(600 + seed);
        auto x = rand_tensor<double>(rng, {3, 2, 2}, true, -2.0, 2.0);
        auto w = rand_tensor<double>(rng, {3, 2, 2});
        auto loss = bandprobe::sum(bandprobe::mul(bandprobe::softmax_channels(x), w));
        backward(loss);
        auto loss_fn = [&]() {
            bandprobe::NoGradGuard ng;
            return weighted_sum(bandprobe::softmax_channels(x), w);
        };
        CHECK(oracle::max_rel_error(to_vec(x.grad()), oracle::finite_diff(x.data(), loss_fn)) <
              1e-5);
    }
}

// --------------------------------------------------------------------------
// cross_entropy
// --------------------------------------------------------------------------

TEST_CASE("cross_entropy point values") {
    // probability 1 on every target pixel -> 0
    auto perfect = Tensor<float>::from_vector({2, 1, 2}, {1.0f, 0.0f, 0.0f, 1.0f});
    std::vector<std::uint8_t> target{0, 1};
    CHECK(bandprobe::cross_entropy(perfect, target).item() == doctest::Approx(0.0f));

    // uniform two-class prediction -> ln 2
    auto uniform = Tensor<float>::full({2, 2, 2}, 0.5f);
    std::vector<std::uint8_t> target2{0, 1, 1, 0};
    CHECK(bandprobe::cross_entropy(uniform, target2).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-6));

    // 0.9 on the correct class everywhere -> -ln 0.9
    auto mostly = Tensor<float>::from_vector({2, 1, 2}, {0.9f, 0.9f, 0.1f, 0.1f});
    std::vector<std::uint8_t> target3{0, 0};
    CHECK(bandprobe::cross_entropy(mostly, target3).item() ==
          doctest::Approx(-std::log(0.9)).epsilon(1e-6));
}

TEST_CASE("cross_entropy rejects out-of-range target classes") {
    auto pred = Tensor<float>::full({2, 1, 1}, 0.5f);
    std::vector<std::uint8_t> bad{2};
    CHECK_THROWS_AS(bandprobe::cross_entropy(pred, bad), std::invalid_argument);
}

TEST_CASE("cross_entropy floors saturated probabilities instead of diverging") {
    auto pred = Tensor<float>::from_vector({2, 1, 1}, {0.0f, 1.0f});
    std::vector<std::uint8_t> target{0};  // probability 0 on the target class
    auto loss = bandprobe::cross_entropy(pred, target);
    CHECK(loss.all_finite());
    CHECK(loss.item() == doctest::Approx(-std::log(bandprobe::kProbFloor)).epsilon(1e-6));
}

TEST_CASE("cross_entropy is nonnegative and zero only at certainty") {
    Rng rng(81);
    for (int trial = 0; trial < 10; ++trial) {
        auto logits = rand_tensor<float>(rng, {2, 4, 4}, false, -3.0, 3.0);
        auto probs = bandprobe::softmax_channels(logits);
        std::vector<std::uint8_t> target(16);
        for (auto& t : target) t = static_cast<std::uint8_t>(rng.bounded(2));
        const float loss = bandprobe::cross_entropy(probs, target).item();
        CHECK(loss > 0.0f);
    }
}

TEST_CASE("cross_entropy through softmax matches finite differences") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(700 + seed);
        auto x = rand_tensor<double>(rng, {2, 4, 4}, true, -2.0, 2.0);
        std::vector<std::uint8_t> target(16);
        for (auto& t : target) t = static_cast<std::uint8_t>(rng.bounded(2));

        auto loss = bandprobe::cross_entropy(bandprobe::softmax_channels(x), target);
        backward(loss);
        auto loss_fn = [&]() {
            bandprobe::NoGradGuard ng;
            return static_cast<double>(
                bandprobe::cross_entropy(bandprobe::softmax_channels(x), target).item());
        };
        CHECK(oracle::max_rel_error(to_vec(x.grad()), oracle::finite_diff(x.data(), loss_fn)) <
              1e-5);
    }
}

// --------------------------------------------------------------------------
// backward
// --------------------------------------------------------------------------

TEST_CASE("backward of sum gives all-ones gradient") {
    Rng rng(91);
    auto x = rand_tensor<float>(rng, {3, 2, 2}, true);
    backward(bandprobe::sum(x));
    for (float g : x.grad()) CHECK(g == 1.0f);
}

TEST_CASE("backward of sum of squares doubles the input") {
    auto x = Tensor<float>::from_vector({2}, {1.0f, 2.0f}, true);
    backward(bandprobe::sum(bandprobe::mul(x, x)));
    CHECK(x.grad()[0] == doctest::Approx(2.0f));
    CHECK(x.grad()[1] == doctest::Approx(4.0f));
}

TEST_CASE("backward accumulates across calls without reset") {
    auto x = Tensor<float>::from_vector({2}, {1.0f, 2.0f}, true);
    backward(bandprobe::sum(x));
    backward(bandprobe::sum(x));
    CHECK(x.grad()[0] == 2.0f);
    CHECK(x.grad()[1] == 2.0f);
}

TEST_CASE("backward rejects non-scalar losses") {
    auto x = Tensor<float>::zeros({2, 2}, true);
    CHECK_THROWS_AS(backward(x), std::invalid_argument);
}

TEST_CASE("composite micro-net gradients match finite differences") {
    // conv -> elu -> batchnorm -> pool -> tconv -> concat -> 1x1 -> softmax -> CE
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        Rng rng(800 + seed);
        auto x = rand_tensor<double>(rng, {2, 8, 8}, true);
        auto k1 = rand_tensor<double>(rng, {4, 2, 3, 3}, true, -0.5, 0.5);
        auto b1 = rand_tensor<double>(rng, {4}, true, -0.1, 0.1);
        auto gamma = rand_tensor<double>(rng, {4}, true, 0.5, 1.5);
        auto beta = rand_tensor<double>(rng, {4}, true, -0.2, 0.2);
        auto k2 = rand_tensor<double>(rng, {4, 2, 2, 2}, true, -0.5, 0.5);
        auto b2 = rand_tensor<double>(rng, {2}, true, -0.1, 0.1);
        auto kp = rand_tensor<double>(rng, {2, 4}, true, -0.5, 0.5);
        auto bp = rand_tensor<double>(rng, {2}, true, -0.1, 0.1);
        std::vector<std::uint8_t> target(64);
        for (auto& t : target) t = static_cast<std::uint8_t>(rng.bounded(2));

        auto run = [&](bool record) -> double {
            std::unique_ptr<bandprobe::NoGradGuard> guard;
            if (!record) guard = std::make_unique<bandprobe::NoGradGuard>();
            BatchNormState<double> state(4);
            auto h1 = bandprobe::batchnorm2d(bandprobe::elu(bandprobe::conv2d(x, k1, b1)), gamma,
                                             beta, state, Mode::train);
            auto h2 = bandprobe::maxpool2d(h1);                        // [4,4,4]
            auto h3 = bandprobe::transposed_conv2d(h2, k2, b2);        // [2,8,8]
            auto h4 = bandprobe::concat_channels(h3, x);               // [4,8,8]
            auto probs = bandprobe::softmax_channels(bandprobe::pointwise_conv(h4, kp, bp));
            auto loss = bandprobe::cross_entropy(probs, target);
            if (record) backward(loss);
            return static_cast<double>(loss.item());
        };
        run(true);

        auto loss_fn = [&]() { return run(false); };
        for (auto* p : {&x, &k1, &b1, &gamma, &beta, &k2, &b2, &kp, &bp}) {
            CHECK(oracle::max_rel_error(to_vec(p->grad()),
                                        oracle::finite_diff(p->data(), loss_fn)) < 1e-5);
        }
    }
}
