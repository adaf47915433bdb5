#pragma once

#include "gcisg/ops.hpp"
#include "gcisg/queue.hpp"
#include "gcisg/tensor.hpp"

namespace gcisg {

namespace detail {

// [K] vector of z . q_k against a [K,d] support snapshot; differentiable in z.
inline Tensor support_dots(const Tensor& z, const Tensor& support) {
    if (z.rank() != 1 || support.rank() != 2 || support.shape()[1] != z.shape()[0])
        throw ShapeError("support_dots: incompatible " + shape_str(z.shape()) + " and " +
                         shape_str(support.shape()));
    const std::size_t K = support.shape()[0], d = z.shape()[0];
    return reshape(matmul(support, reshape(z, {d, 1})), {K});
}

inline void require_support(const Tensor& support) {
    if (support.rank() != 2 || support.shape()[0] < 2)
        throw DegenerateInputError("relational distribution needs a support of at least 2 entries, got " +
                                   shape_str(support.shape()));
}

}  // namespace detail

// p[k] = exp(z.q_k / tau) / sum_k' exp(z.q_k' / tau) over the filled entries.
inline Tensor relational_distribution(const Tensor& z, const Tensor& support, double tau) {
    detail::require_support(support);
    if (tau <= 0.0) throw ConfigError("relational temperature must be > 0");
    return softmax_last(mul_scalar(detail::support_dots(z, support), 1.0 / tau));
}

inline Tensor relational_distribution(const Tensor& z, const SupportQueue& q, double tau) {
    if (q.fill() < 2)
        throw DegenerateInputError("relational distribution needs queue fill >= 2, have " +
                                   std::to_string(q.fill()));
    return relational_distribution(z, q.snapshot(), tau);
}

// Cross-entropy between the target's sharper relational distribution and the
// online one: -sum_k p_taubar(z_target)[k] . log p_tau(z_online)[k].
// Gradient flows only into z_online; the target branch and support are held
// constant.
inline Tensor ci_pair_loss(const Tensor& z_online, const Tensor& z_target, const Tensor& support,
                           double tau, double tau_bar) {
    detail::require_support(support);
    if (tau <= 0.0 || tau_bar <= 0.0) throw ConfigError("temperatures must be > 0");
    const Tensor sup = stop_gradient(support);
    Tensor p_target;
    {
        NoGradGuard ng;
        p_target = relational_distribution(z_target.detach(), sup, tau_bar);
    }
    Tensor logp = log_softmax_last(mul_scalar(detail::support_dots(z_online, sup), 1.0 / tau));
    return neg(sum(mul(stop_gradient(p_target), logp)));
}

inline Tensor ci_pair_loss(const Tensor& z_online, const Tensor& z_target, const SupportQueue& q,
                           double tau, double tau_bar) {
    if (q.fill() < 2)
        throw DegenerateInputError("ci_pair_loss needs queue fill >= 2, have " +
                                   std::to_string(q.fill()));
    return ci_pair_loss(z_online, z_target, q.snapshot(), tau, tau_bar);
}

// Symmetric total over the two views: 1/2 l(z1, zbar2) + 1/2 l(z2, zbar1).
inline Tensor ci_symmetric_loss(const Tensor& z1, const Tensor& z2, const Tensor& zbar1,
                                const Tensor& zbar2, const Tensor& support, double tau,
                                double tau_bar) {
    Tensor a = ci_pair_loss(z1, zbar2, support, tau, tau_bar);
    Tensor b = ci_pair_loss(z2, zbar1, support, tau, tau_bar);
    return mul_scalar(add(a, b), 0.5);
}

// Mean of the symmetric pair loss over matched rows of [N,d] patch embedding
// matrices (row n = patch n of the stage feature map).
inline Tensor ci_patchwise_loss(const Tensor& z1, const Tensor& z2, const Tensor& zbar1,
                                const Tensor& zbar2, const Tensor& support, double tau,
                                double tau_bar) {
    if (z1.rank() != 2 || z1.shape() != z2.shape() || z1.shape() != zbar1.shape() ||
        z1.shape() != zbar2.shape())
        throw ShapeError("ci_patchwise_loss: patch matrices must share one [N,d] shape");
    const std::size_t n = z1.shape()[0], d = z1.shape()[1];
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t i = 0; i < n; ++i) {
        auto row = [&](const Tensor& m) { return reshape(slice(m, 0, i, 1), {d}); };
        total = add(total, ci_symmetric_loss(row(z1), row(z2), row(zbar1), row(zbar2), support,
                                             tau, tau_bar));
    }
    return mul_scalar(total, 1.0 / static_cast<double>(n));
}

// Batch-mean of ci_pair_loss over matched rows of [N,d] online/target
// matrices; one matmul against the support instead of N small ones.
inline Tensor ci_batch_pair_loss(const Tensor& z_online, const Tensor& z_target,
                                 const Tensor& support, double tau, double tau_bar) {
    detail::require_support(support);
    if (tau <= 0.0 || tau_bar <= 0.0) throw ConfigError("temperatures must be > 0");
    if (z_online.rank() != 2 || z_online.shape() != z_target.shape() ||
        z_online.shape()[1] != support.shape()[1])
        throw ShapeError("ci_batch_pair_loss: incompatible " + shape_str(z_online.shape()) +
                         " / " + shape_str(z_target.shape()) + " / " +
                         shape_str(support.shape()));
    const Tensor supT = stop_gradient(transpose(support));
    Tensor p_target;
    {
        NoGradGuard ng;
        p_target = softmax_last(mul_scalar(matmul(z_target.detach(), supT), 1.0 / tau_bar));
    }
    Tensor logp = log_softmax_last(mul_scalar(matmul(z_online, supT), 1.0 / tau));
    return neg(mean(sum_last(mul(stop_gradient(p_target), logp))));
}

// Batch-mean symmetric total over two views.
inline Tensor ci_batch_symmetric_loss(const Tensor& z1, const Tensor& z2, const Tensor& zbar1,
                                      const Tensor& zbar2, const Tensor& support, double tau,
                                      double tau_bar) {
    Tensor a = ci_batch_pair_loss(z1, zbar2, support, tau, tau_bar);
    Tensor b = ci_batch_pair_loss(z2, zbar1, support, tau, tau_bar);
    return mul_scalar(add(a, b), 0.5);
}

// Contrastive baseline for the ablation: the queue entries act as negatives
// and zbar2 as the single positive.
inline Tensor infonce_loss(const Tensor& z1, const Tensor& zbar2, const Tensor& support,
                           double tau) {
    detail::require_support(support);
    if (tau <= 0.0) throw ConfigError("infonce temperature must be > 0");
    const Tensor sup = stop_gradient(support);
    const std::size_t d = z1.shape()[0];
    Tensor pos = matmul(reshape(z1, {1, d}), reshape(stop_gradient(zbar2), {d, 1}));
    Tensor dots = concat({reshape(pos, {1}), detail::support_dots(z1, sup)}, 0);
    Tensor logp = log_softmax_last(mul_scalar(dots, 1.0 / tau));
    return neg(reshape(slice(logp, 0, 0, 1), {}));
}

inline Tensor infonce_loss(const Tensor& z1, const Tensor& zbar2, const SupportQueue& q,
                           double tau) {
    if (q.fill() < 2)
        throw DegenerateInputError("infonce_loss needs queue fill >= 2, have " +
                                   std::to_string(q.fill()));
    return infonce_loss(z1, zbar2, q.snapshot(), tau);
}

// Batch-mean InfoNCE over matched rows, positives on the diagonal pairing.
inline Tensor infonce_batch_loss(const Tensor& z1, const Tensor& zbar2, const Tensor& support,
                                 double tau) {
    detail::require_support(support);
    if (tau <= 0.0) throw ConfigError("infonce temperature must be > 0");
    if (z1.rank() != 2 || z1.shape() != zbar2.shape() || z1.shape()[1] != support.shape()[1])
        throw ShapeError("infonce_batch_loss: incompatible " + shape_str(z1.shape()) + " / " +
                         shape_str(zbar2.shape()) + " / " + shape_str(support.shape()));
    const std::size_t n = z1.shape()[0];
    const Tensor supT = stop_gradient(transpose(support));
    Tensor pos = sum_last(mul(z1, stop_gradient(zbar2.detach())));      // [N]
    Tensor neg_dots = matmul(z1, supT);                                 // [N,K]
    Tensor dots = concat({reshape(pos, {n, 1}), neg_dots}, 1);          // [N,1+K]
    Tensor logp = log_softmax_last(mul_scalar(dots, 1.0 / tau));
    return neg(mean(reshape(slice(logp, 1, 0, 1), {n})));
}

// CI terms are skipped while the queue is too empty for relational
// distributions to be meaningful.
inline bool ci_warm(const SupportQueue& q) {
    return q.fill() * 4 >= q.capacity();
}

}  // namespace gcisg
