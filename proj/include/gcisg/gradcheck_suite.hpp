#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "gcisg/ci.hpp"
#include "gcisg/gradcheck.hpp"
#include "gcisg/guidance.hpp"
#include "gcisg/ops.hpp"
#include "gcisg/rng.hpp"
#include "gcisg/tensor.hpp"
#include "gcisg/trainer.hpp"

namespace gcisg::gradcheck {

namespace detail {

inline Tensor random_normal(const Shape& s, std::mt19937_64& eng) {
    std::vector<double> v(shape_numel(s));
    for (auto& x : v) x = rng::normal(eng, 0.0, 1.0);
    return Tensor::from_data(s, std::move(v));
}

// mirrors a post-ReLU tap point: strictly positive, bounded away from zero
inline Tensor random_positive(const Shape& s, std::mt19937_64& eng) {
    Tensor t = random_normal(s, eng);
    for (auto& x : t.mutable_data()) x = std::abs(x) + 0.1;
    return t;
}

inline Tensor random_unit_rows(std::size_t n, std::size_t d, std::mt19937_64& eng) {
    Tensor t = random_normal({n, d}, eng);
    auto v = t.mutable_data();
    for (std::size_t r = 0; r < n; ++r) {
        double sq = 0.0;
        for (std::size_t i = 0; i < d; ++i) sq += v[r * d + i] * v[r * d + i];
        const double inv = 1.0 / std::sqrt(sq);
        for (std::size_t i = 0; i < d; ++i) v[r * d + i] *= inv;
    }
    return t;
}

}  // namespace detail

// The full verification suite: tensor-op composites, the task loss, every CI
// loss form, InfoNCE, all five guidance pools, and the attention pipeline.
// Quantities a loss treats as constants (target-branch embeddings, the support
// set, reference maps) are captured in the closures rather than listed as
// inputs: their analytic gradient is zero by design and a finite difference
// through them would disagree.
inline std::vector<Target> default_targets(std::uint64_t seed = 1234) {
    using detail::random_normal;
    using detail::random_positive;
    using detail::random_unit_rows;
    auto eng = rng::engine({seed, 0x90adu});
    std::vector<Target> targets;

    targets.push_back({"affine_relu_mean",
                       [](const std::vector<Tensor>& l) {
                           return mean(relu(add_bias_rows(matmul(l[0], l[1]), l[2])));
                       },
                       {random_normal({3, 4}, eng), random_normal({4, 2}, eng),
                        random_normal({2}, eng)},
                       1e-3});

    targets.push_back({"conv_chain_pool",
                       [](const std::vector<Tensor>& l) {
                           Tensor h1 = relu(conv2d(l[0], l[1], l[2], 2, 1));
                           Tensor h2 = relu(conv2d(h1, l[3], l[4], 2, 1));
                           return mean(global_avg_pool(h2));
                       },
                       {random_normal({1, 2, 6, 6}, eng), random_normal({2, 2, 3, 3}, eng),
                        random_normal({2}, eng), random_normal({3, 2, 3, 3}, eng),
                        random_normal({3}, eng)},
                       1e-3});

    {
        Tensor c = random_normal({2, 3, 2, 2}, eng);
        targets.push_back({"avg_pool_window",
                           [c](const std::vector<Tensor>& l) {
                               return sum(mul(avg_pool2d(l[0], 2, 2, 2), c));
                           },
                           {random_normal({2, 3, 4, 4}, eng)},
                           1e-3});
    }

    targets.push_back({"task_loss",
                       [](const std::vector<Tensor>& l) { return task_loss(l[0], {1, 0, 4}); },
                       {random_normal({3, 5}, eng)},
                       1e-3});

    targets.push_back({"softmax_entropy",
                       [](const std::vector<Tensor>& l) {
                           return neg(mean(sum_last(mul(softmax_last(l[0]), log_softmax_last(l[0])))));
                       },
                       {random_normal({2, 6}, eng)},
                       1e-3});

    {
        Tensor c = random_normal({3, 6}, eng);
        targets.push_back({"normalize_project",
                           [c](const std::vector<Tensor>& l) {
                               return sum(mul(l2_normalize(l[0]), c));
                           },
                           {random_normal({3, 6}, eng)},
                           1e-3});
    }

    {
        Tensor c = random_normal({6, 4}, eng);
        targets.push_back({"movement_composite",
                           [c](const std::vector<Tensor>& l) {
                               Tensor halves = concat({slice(l[0], 0, 0, 2), slice(l[0], 0, 2, 2)}, 0);
                               return sum(mul(transpose(reshape(halves, {4, 6})), c));
                           },
                           {random_normal({4, 6}, eng)},
                           1e-3});
    }

    {
        Tensor c = random_normal({2, 3}, eng);
        targets.push_back({"projector_head",
                           [c](const std::vector<Tensor>& l) {
                               Tensor h = relu(add_bias_rows(matmul(l[0], l[1]), l[2]));
                               Tensor z = l2_normalize(add_bias_rows(matmul(h, l[3]), l[4]));
                               return sum(mul(z, c));
                           },
                           {random_normal({2, 5}, eng), random_normal({5, 4}, eng),
                            random_normal({4}, eng), random_normal({4, 3}, eng),
                            random_normal({3}, eng)},
                           1e-3});
    }

    const Tensor support = random_unit_rows(5, 8, eng);
    {
        Tensor zbar = random_normal({8}, eng);
        targets.push_back({"ci_pair",
                           [zbar, support](const std::vector<Tensor>& l) {
                               return ci_pair_loss(l[0], zbar, support, 0.12, 0.04);
                           },
                           {random_normal({8}, eng)},
                           1e-3});
    }
    {
        Tensor zb1 = random_normal({8}, eng);
        Tensor zb2 = random_normal({8}, eng);
        targets.push_back({"ci_symmetric",
                           [zb1, zb2, support](const std::vector<Tensor>& l) {
                               return ci_symmetric_loss(l[0], l[1], zb1, zb2, support, 0.12, 0.04);
                           },
                           {random_normal({8}, eng), random_normal({8}, eng)},
                           1e-3});
    }
    {
        Tensor zb1 = random_normal({3, 8}, eng);
        Tensor zb2 = random_normal({3, 8}, eng);
        targets.push_back({"ci_batch",
                           [zb1, zb2, support](const std::vector<Tensor>& l) {
                               return ci_batch_symmetric_loss(l[0], l[1], zb1, zb2, support, 0.12,
                                                             0.04);
                           },
                           {random_normal({3, 8}, eng), random_normal({3, 8}, eng)},
                           1e-3});
    }
    {
        Tensor zb1 = random_normal({4, 8}, eng);
        Tensor zb2 = random_normal({4, 8}, eng);
        targets.push_back({"ci_patchwise",
                           [zb1, zb2, support](const std::vector<Tensor>& l) {
                               return ci_patchwise_loss(l[0], l[1], zb1, zb2, support, 0.12, 0.04);
                           },
                           {random_normal({4, 8}, eng), random_normal({4, 8}, eng)},
                           1e-3});
    }
    {
        Tensor zb2 = random_normal({8}, eng);
        targets.push_back({"infonce",
                           [zb2, support](const std::vector<Tensor>& l) {
                               return infonce_loss(l[0], zb2, support, 0.12);
                           },
                           {random_normal({8}, eng)},
                           1e-3});
    }
    {
        Tensor zb2 = random_normal({3, 8}, eng);
        targets.push_back({"infonce_batch",
                           [zb2, support](const std::vector<Tensor>& l) {
                               return infonce_batch_loss(l[0], zb2, support, 0.12);
                           },
                           {random_normal({3, 8}, eng)},
                           1e-3});
    }

    for (PoolOp op : {PoolOp::NP, PoolOp::GAP, PoolOp::CP, PoolOp::SP, PoolOp::SAP}) {
        Tensor fr = random_positive({3, 4, 4}, eng);
        targets.push_back({"guidance_" + to_string(op),
                           [fr, op](const std::vector<Tensor>& l) {
                               return guidance_loss(l[0], fr, op);
                           },
                           {random_positive({3, 4, 4}, eng)},
                           1e-3});
    }

    {
        Tensor c = random_normal({3}, eng);
        targets.push_back({"attention_pool_pipeline",
                           [c](const std::vector<Tensor>& l) {
                               return sum(mul(self_attention_pool(l[0]), c));
                           },
                           {random_positive({3, 3, 3}, eng)},
                           1e-3});
    }

    return targets;
}

// Negative control: the SAP guidance loss with its input detached. The
// analytic gradient vanishes while finite differences see the true slope, so
// the harness must flag this row. Scaling the loss keeps the discrepancy well
// above the pass threshold.
inline Target corrupted_sap_target(std::uint64_t seed = 1234) {
    auto eng = rng::engine({seed, 0xbadu});
    Tensor fr = detail::random_positive({3, 4, 4}, eng);
    return {"guidance_sap_corrupted",
            [fr](const std::vector<Tensor>& l) {
                return mul_scalar(guidance_loss(stop_gradient(l[0]), fr, PoolOp::SAP), 50.0);
            },
            {detail::random_positive({3, 4, 4}, eng)},
            1e-3};
}

}  // namespace gcisg::gradcheck
