#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "gcisg/tensor.hpp"

namespace gcisg::gradcheck {

// Guarded relative error: behaves like absolute error once both magnitudes
// drop below 1, so near-zero gradients do not blow up the ratio.
inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

using LossFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Compares the analytic gradient of fn wrt every element of every input
// against central finite differences and returns the worst relative error.
// fn must be a pure function of its inputs.
inline double max_rel_grad_err(const LossFn& fn, const std::vector<Tensor>& inputs,
                               double h = 1e-5) {
    std::vector<Tensor> leaves;
    leaves.reserve(inputs.size());
    for (const auto& in : inputs) {
        Tensor leaf = in.detach();
        leaf.set_requires_grad(true);
        leaves.push_back(leaf);
    }
    Tensor loss = fn(leaves);
    if (loss.numel() != 1)
        throw ShapeError("gradcheck: loss must be scalar, got " + shape_str(loss.shape()));
    backward(loss);

    double worst = 0.0;
    for (std::size_t i = 0; i < leaves.size(); ++i) {
        std::vector<double> analytic(leaves[i].numel(), 0.0);
        if (leaves[i].has_grad()) {
            auto g = leaves[i].grad();
            std::copy(g.begin(), g.end(), analytic.begin());
        }
        for (std::size_t j = 0; j < leaves[i].numel(); ++j) {
            double fd;
            {
                NoGradGuard ng;
                std::vector<Tensor> probe;
                probe.reserve(leaves.size());
                for (const auto& l : leaves) probe.push_back(l.detach());
                const double x0 = probe[i].data()[j];
                probe[i].mutable_data()[j] = x0 + h;
                const double fp = fn(probe).value();
                probe[i].mutable_data()[j] = x0 - h;
                const double fm = fn(probe).value();
                probe[i].mutable_data()[j] = x0;
                fd = (fp - fm) / (2.0 * h);
            }
            worst = std::max(worst, rel_err(analytic[j], fd));
        }
    }
    return worst;
}

struct Target {
    std::string name;
    LossFn fn;
    std::vector<Tensor> inputs;
    double tol = 1e-3;
};

struct TargetResult {
    std::string name;
    double max_rel_err = 0.0;
    double tol = 0.0;
    bool pass = false;
};

inline TargetResult run_target(const Target& t, double h = 1e-5) {
    TargetResult r;
    r.name = t.name;
    r.tol = t.tol;
    r.max_rel_err = max_rel_grad_err(t.fn, t.inputs, h);
    r.pass = r.max_rel_err < t.tol;
    return r;
}

struct SuiteReport {
    std::vector<TargetResult> results;
    double seconds = 0.0;
    bool all_pass() const {
        for (const auto& r : results)
            if (!r.pass) return false;
        return true;
    }
};

inline SuiteReport run_targets(const std::vector<Target>& targets, double h = 1e-5) {
    SuiteReport rep;
    const auto t0 = std::chrono::steady_clock::now();
    for (const auto& t : targets) rep.results.push_back(run_target(t, h));
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

}  // namespace gcisg::gradcheck
