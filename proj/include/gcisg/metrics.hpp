#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "gcisg/tensor.hpp"

namespace gcisg {

// ============================================================================
// linear CKA
// ============================================================================

// Centered-feature similarity ||Yc'Xc||_F^2 / (||Xc'Xc||_F ||Yc'Yc||_F) on
// [n,d] feature matrices with matched rows. Symmetric, in [0,1], invariant to
// orthogonal transforms and nonzero isotropic scaling of either side.
inline double cka_linear(const Tensor& x, const Tensor& y) {
    if (x.rank() != 2 || y.rank() != 2 || x.shape()[0] != y.shape()[0])
        throw ShapeError("cka_linear: expected [n,dx] and [n,dy] with equal n, got " +
                         shape_str(x.shape()) + " and " + shape_str(y.shape()));
    const std::size_t n = x.shape()[0];
    if (n < 3) throw DegenerateInputError("cka_linear: need n >= 3 rows");
    for (double v : x.data())
        if (std::isnan(v)) throw DegenerateInputError("cka_linear: NaN in features");
    for (double v : y.data())
        if (std::isnan(v)) throw DegenerateInputError("cka_linear: NaN in features");

    auto centered = [n](const Tensor& m) {
        const std::size_t d = m.shape()[1];
        std::vector<double> c(m.data().begin(), m.data().end());
        for (std::size_t j = 0; j < d; ++j) {
            double mean = 0.0;
            for (std::size_t i = 0; i < n; ++i) mean += c[i * d + j];
            mean /= static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) c[i * d + j] -= mean;
        }
        return c;
    };
    const std::vector<double> xc = centered(x);
    const std::vector<double> yc = centered(y);
    const std::size_t dx = x.shape()[1], dy = y.shape()[1];

    // ||A'B||_F^2 for column-centered A [n,da], B [n,db]
    auto cross_fro2 = [n](const std::vector<double>& a, std::size_t da,
                          const std::vector<double>& b, std::size_t db) {
        double total = 0.0;
        for (std::size_t p = 0; p < da; ++p)
            for (std::size_t q = 0; q < db; ++q) {
                double s = 0.0;
                for (std::size_t i = 0; i < n; ++i) s += a[i * da + p] * b[i * db + q];
                total += s * s;
            }
        return total;
    };
    const double xx = cross_fro2(xc, dx, xc, dx);
    const double yy = cross_fro2(yc, dy, yc, dy);
    if (xx <= 0.0 || yy <= 0.0)
        throw DegenerateInputError("cka_linear: zero-variance feature matrix");
    return cross_fro2(yc, dy, xc, dx) / (std::sqrt(xx) * std::sqrt(yy));
}

// ============================================================================
// prediction-level rates (exact rationals count/n)
// ============================================================================

using PredictFn = std::function<int(const Tensor&)>;   // image -> class id
using StylizeFn = std::function<Tensor(const Tensor&, std::size_t)>;  // (image, index) -> image

inline double real_accuracy(const PredictFn& predict, const std::vector<Tensor>& images,
                            const std::vector<int>& labels) {
    if (images.empty()) throw DegenerateInputError("real_accuracy: empty evaluation set");
    if (images.size() != labels.size())
        throw ShapeError("real_accuracy: " + std::to_string(images.size()) + " images vs " +
                         std::to_string(labels.size()) + " labels");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < images.size(); ++i)
        if (predict(images[i]) == labels[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(images.size());
}

// Fraction of samples whose prediction survives stylization.
inline double match_rate(const PredictFn& predict, const std::vector<Tensor>& images,
                         const StylizeFn& stylize) {
    if (images.empty()) throw DegenerateInputError("match_rate: empty evaluation set");
    std::size_t consistent = 0;
    for (std::size_t i = 0; i < images.size(); ++i)
        if (predict(images[i]) == predict(stylize(images[i], i))) ++consistent;
    return static_cast<double>(consistent) / static_cast<double>(images.size());
}

struct MetricReport {
    double match_rate = 0.0;
    double cka = 0.0;
    double ref_head_acc = 0.0;
    double real_acc = 0.0;
    std::size_t n = 0;
    std::uint64_t seed = 0;
};

}  // namespace gcisg
