#pragma once

#include <cmath>
#include <string>

#include "gcisg/ops.hpp"
#include "gcisg/tensor.hpp"

namespace gcisg {

// Pooling operators applied to a C x H x W stage feature map before
// normalization and distillation.
enum class PoolOp { NP, GAP, CP, SP, SAP };

inline PoolOp pool_op_from_string(const std::string& s) {
    if (s == "np") return PoolOp::NP;
    if (s == "gap") return PoolOp::GAP;
    if (s == "cp") return PoolOp::CP;
    if (s == "sp") return PoolOp::SP;
    if (s == "sap") return PoolOp::SAP;
    throw ConfigError("unknown pooling op '" + s + "' (expected np|gap|cp|sp|sap)");
}

inline std::string to_string(PoolOp op) {
    switch (op) {
        case PoolOp::NP: return "np";
        case PoolOp::GAP: return "gap";
        case PoolOp::CP: return "cp";
        case PoolOp::SP: return "sp";
        case PoolOp::SAP: return "sap";
    }
    throw ConfigError("invalid pooling op");
}

namespace detail {

inline void require_chw(const Tensor& v, const char* what) {
    if (v.rank() != 3)
        throw ShapeError(std::string(what) + ": expected [C,H,W], got " + shape_str(v.shape()));
    for (double x : v.data())
        if (std::isnan(x)) throw DegenerateInputError(std::string(what) + ": NaN input");
}

}  // namespace detail

// Attention weights over spatial positions: the channel-mean vector g scores
// each position by sum_c v[c,h,w] * g[c]; scores are normalized by their total,
// whose magnitude is clamped to eps (sign kept) so near-zero maps stay finite.
inline Tensor attention_map(const Tensor& v, double eps = kNormEps) {
    detail::require_chw(v, "attention_map");
    const std::size_t C = v.shape()[0], H = v.shape()[1], W = v.shape()[2];
    // g[c] = mean over positions; scores[h,w] = sum_c v[c,h,w] g[c]
    Tensor g = mean_last(reshape(v, {C, H * W}));                      // [C]
    Tensor scores = matmul(transpose(reshape(v, {C, H * W})), reshape(g, {C, 1}));  // [HW,1]
    Tensor denom = clamp_away_from_zero(sum(scores), eps);
    return reshape(div(reshape(scores, {H * W}), denom), {H, W});
}

// P_a(v)[c] = sum_{h,w} v[c,h,w] * a[h,w]; differentiable through both the
// feature and attention paths.
inline Tensor self_attention_pool(const Tensor& v, double eps = kNormEps) {
    detail::require_chw(v, "self_attention_pool");
    const std::size_t C = v.shape()[0], H = v.shape()[1], W = v.shape()[2];
    Tensor a = attention_map(v, eps);
    return reshape(matmul(reshape(v, {C, H * W}), reshape(a, {H * W, 1})), {C});
}

// Flattened 1-D pooled view of a [C,H,W] map under the selected operator.
inline Tensor pool(const Tensor& v, PoolOp op) {
    detail::require_chw(v, "pool");
    const std::size_t C = v.shape()[0], H = v.shape()[1], W = v.shape()[2];
    switch (op) {
        case PoolOp::NP:
            return reshape(v, {C * H * W});
        case PoolOp::GAP:
            return mean_last(reshape(v, {C, H * W}));
        case PoolOp::CP: {
            // mean over channels -> H x W map, flattened
            Tensor m = mean_last(transpose(reshape(v, {C, H * W})));  // [HW]
            return m;
        }
        case PoolOp::SP: {
            // width-mean gives C x H, height-mean gives C x W; concatenated
            Tensor wmean = mean_last(reshape(v, {C * H, W}));                     // [C*H]
            Tensor hmean = mean_last(reshape(transpose(v, {0, 2, 1}), {C * W, H}));  // [C*W]
            return concat({wmean, hmean}, 0);
        }
        case PoolOp::SAP:
            return self_attention_pool(v);
    }
    throw ConfigError("invalid pooling op");
}

// Squared distance between unit-normalized pooled views, 2 - 2 cos in [0,4].
// The reference map is detached: guidance shapes the online encoder only.
inline Tensor guidance_loss(const Tensor& fs_map, const Tensor& fr_map, PoolOp op) {
    if (fs_map.shape() != fr_map.shape())
        throw ShapeError("guidance_loss: map shapes differ: " + shape_str(fs_map.shape()) +
                         " vs " + shape_str(fr_map.shape()));
    Tensor ps = l2_normalize(pool(fs_map, op));
    Tensor pr;
    {
        NoGradGuard ng;
        pr = l2_normalize(pool(fr_map.detach(), op));
    }
    Tensor diff = sub(ps, stop_gradient(pr));
    return sum(mul(diff, diff));
}

}  // namespace gcisg
