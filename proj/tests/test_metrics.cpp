#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <vector>

#include "gcisg/metrics.hpp"
#include "gcisg/rng.hpp"

using namespace gcisg;
using Catch::Matchers::WithinAbs;

namespace {

Tensor random_features(std::size_t n, std::size_t d, std::uint64_t seed) {
    auto eng = rng::engine(seed);
    std::vector<double> v(n * d);
    for (auto& x : v) x = rng::normal(eng);
    return Tensor::from_data({n, d}, std::move(v));
}

// Independent oracle: CKA from centered Gram matrices,
// tr(Kc Lc) / sqrt(tr(Kc Kc) tr(Lc Lc)) with Kc = H K H, H = I - 11'/n.
double cka_gram_oracle(const Tensor& x, const Tensor& y) {
    const std::size_t n = x.shape()[0];
    auto gram = [n](const Tensor& m) {
        const std::size_t d = m.shape()[1];
        std::vector<double> k(n * n, 0.0);
        const auto v = m.data();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < d; ++c) s += v[i * d + c] * v[j * d + c];
                k[i * n + j] = s;
            }
        return k;
    };
    auto center = [n](std::vector<double> k) {
        std::vector<double> row(n, 0.0), col(n, 0.0);
        double all = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                row[i] += k[i * n + j];
                col[j] += k[i * n + j];
                all += k[i * n + j];
            }
        for (auto& v : row) v /= static_cast<double>(n);
        for (auto& v : col) v /= static_cast<double>(n);
        all /= static_cast<double>(n * n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) k[i * n + j] += all - row[i] - col[j];
        return k;
    };
    const std::vector<double> kc = center(gram(x));
    const std::vector<double> lc = center(gram(y));
    double kl = 0.0, kk = 0.0, ll = 0.0;
    for (std::size_t i = 0; i < n * n; ++i) {
        kl += kc[i] * lc[i];
        kk += kc[i] * kc[i];
        ll += lc[i] * lc[i];
    }
    return kl / std::sqrt(kk * ll);
}

}  // namespace

TEST_CASE("cka of a matrix with itself is one", "[metrics]") {
    Tensor x = random_features(20, 7, 5);
    REQUIRE_THAT(cka_linear(x, x), WithinAbs(1.0, 1e-8));
}

TEST_CASE("cka is symmetric in its arguments", "[metrics]") {
    Tensor x = random_features(16, 5, 6);
    Tensor y = random_features(16, 9, 7);
    REQUIRE_THAT(cka_linear(x, y), WithinAbs(cka_linear(y, x), 1e-10));
}

TEST_CASE("cka stays within the unit interval", "[metrics]") {
    for (std::uint64_t s = 0; s < 20; ++s) {
        Tensor x = random_features(12, 6, 100 + s);
        Tensor y = random_features(12, 4, 200 + s);
        const double v = cka_linear(x, y);
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0 + 1e-12);
    }
}

TEST_CASE("cka ignores orthogonal transforms of either side", "[metrics]") {
    Tensor x = random_features(18, 6, 8);
    Tensor y = random_features(18, 6, 9);
    const double base = cka_linear(x, y);

    // Householder reflection H = I - 2 u u' applied to y's feature axes
    auto eng = rng::engine(10);
    std::vector<double> u(6);
    double un = 0.0;
    for (auto& v : u) {
        v = rng::normal(eng);
        un += v * v;
    }
    for (auto& v : u) v /= std::sqrt(un);
    std::vector<double> ry(18 * 6, 0.0);
    const auto yv = y.data();
    for (std::size_t i = 0; i < 18; ++i)
        for (std::size_t a = 0; a < 6; ++a) {
            double dot = 0.0;
            for (std::size_t b = 0; b < 6; ++b) dot += yv[i * 6 + b] * u[b];
            ry[i * 6 + a] = yv[i * 6 + a] - 2.0 * dot * u[a];
        }
    REQUIRE_THAT(cka_linear(x, Tensor::from_data({18, 6}, std::move(ry))),
                 WithinAbs(base, 1e-8));
}

TEST_CASE("cka ignores isotropic scaling and column mean shifts", "[metrics]") {
    Tensor x = random_features(15, 5, 11);
    Tensor y = random_features(15, 8, 12);
    const double base = cka_linear(x, y);
    REQUIRE_THAT(cka_linear(mul_scalar(x, 17.0), y), WithinAbs(base, 1e-8));
    REQUIRE_THAT(cka_linear(x, mul_scalar(y, 0.003)), WithinAbs(base, 1e-8));
    REQUIRE_THAT(cka_linear(add_scalar(x, 42.0), y), WithinAbs(base, 1e-8));
}

TEST_CASE("cka agrees with the centered gram oracle", "[metrics]") {
    for (std::uint64_t s = 0; s < 8; ++s) {
        Tensor x = random_features(14, 6, 300 + s);
        Tensor y = random_features(14, 9, 400 + s);
        REQUIRE_THAT(cka_linear(x, y), WithinAbs(cka_gram_oracle(x, y), 1e-10));
    }
}

TEST_CASE("cka distinguishes related from unrelated features", "[metrics]") {
    Tensor x = random_features(30, 6, 13);
    // y = noisy linear image of x: highly similar
    auto eng = rng::engine(14);
    std::vector<double> yv(30 * 6);
    const auto xv = x.data();
    for (std::size_t i = 0; i < yv.size(); ++i)
        yv[i] = 2.0 * xv[i] + 0.01 * rng::normal(eng);
    const double related = cka_linear(x, Tensor::from_data({30, 6}, std::move(yv)));
    const double unrelated = cka_linear(x, random_features(30, 6, 999));
    REQUIRE(related > 0.99);
    REQUIRE(unrelated < related);
}

TEST_CASE("cka rejects degenerate inputs", "[metrics]") {
    Tensor ok = random_features(8, 3, 15);
    REQUIRE_THROWS_AS(cka_linear(random_features(2, 3, 16), random_features(2, 3, 17)),
                      DegenerateInputError);
    REQUIRE_THROWS_AS(cka_linear(ok, random_features(9, 3, 18)), ShapeError);
    REQUIRE_THROWS_AS(cka_linear(ok, Tensor::full({8, 3}, 1.0)), DegenerateInputError);

    std::vector<double> withnan(24, 1.0);
    withnan[5] = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_AS(cka_linear(ok, Tensor::from_data({8, 3}, std::move(withnan))),
                      DegenerateInputError);
}

TEST_CASE("real accuracy counts exact rational hits", "[metrics]") {
    std::vector<Tensor> images;
    for (double v : {0.0, 1.0, 2.0, 0.0}) images.push_back(Tensor::from_data({1}, {v}));
    std::vector<int> labels{0, 1, 2, 1};
    PredictFn predict = [](const Tensor& img) { return static_cast<int>(img.data()[0]); };
    REQUIRE(real_accuracy(predict, images, labels) == 0.75);

    REQUIRE_THROWS_AS(real_accuracy(predict, {}, {}), DegenerateInputError);
    REQUIRE_THROWS_AS(real_accuracy(predict, images, {0, 1}), ShapeError);
}

TEST_CASE("match rate counts predictions that survive stylization", "[metrics]") {
    std::vector<Tensor> images;
    for (double v : {0.0, 1.0, 2.0, 3.0}) images.push_back(Tensor::from_data({1}, {v}));
    PredictFn predict = [](const Tensor& img) { return static_cast<int>(img.data()[0]); };
    StylizeFn flip_odd = [](const Tensor& img, std::size_t i) {
        return i % 2 == 1 ? add_scalar(img, 10.0) : img;
    };
    REQUIRE(match_rate(predict, images, flip_odd) == 0.5);

    StylizeFn identity = [](const Tensor& img, std::size_t) { return img; };
    REQUIRE(match_rate(predict, images, identity) == 1.0);
    REQUIRE_THROWS_AS(match_rate(predict, {}, identity), DegenerateInputError);
}
