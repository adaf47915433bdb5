#pragma once

#include <string>
#include <vector>

#include "gcisg/serialize.hpp"
#include "gcisg/tensor.hpp"

namespace gcisg {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

// SGD with classical momentum: v <- mu v + g, theta <- theta - lr v.
// Velocity slots are keyed by parameter name so they survive checkpointing.
class SgdMomentum {
public:
    SgdMomentum(double lr, double mu) : lr_(lr), mu_(mu) {
        if (lr < 0.0) throw ConfigError("sgd: lr must be >= 0");
        if (mu < 0.0 || mu >= 1.0) throw ConfigError("sgd: momentum must be in [0,1)");
    }

    double lr() const { return lr_; }

    void step(const NamedParams& params) {
        for (const auto& [name, p] : params) {
            if (!p.requires_grad())
                throw ConfigError("sgd: parameter '" + name + "' does not require grad");
            auto& v = velocity_[name];
            if (v.size() != p.numel()) v.assign(p.numel(), 0.0);
            if (!p.has_grad()) continue;  // parameter unused by this loss
            auto g = p.grad();
            auto d = p.mutable_data();
            for (std::size_t i = 0; i < d.size(); ++i) {
                v[i] = mu_ * v[i] + g[i];
                d[i] -= lr_ * v[i];
            }
        }
    }

    void save(TensorTable& table, const std::string& prefix) const {
        for (const auto& [name, v] : velocity_)
            table[prefix + "." + name] =
                Tensor::from_data({v.size()}, std::vector<double>(v.begin(), v.end()));
    }

    void load(const TensorTable& table, const std::string& prefix) {
        velocity_.clear();
        const std::string p = prefix + ".";
        for (const auto& [name, t] : table)
            if (name.rfind(p, 0) == 0)
                velocity_[name.substr(p.size())] =
                    std::vector<double>(t.data().begin(), t.data().end());
    }

private:
    double lr_;
    double mu_;
    std::map<std::string, std::vector<double>> velocity_;
};

inline void zero_grads(const NamedParams& params) {
    for (const auto& [name, p] : params) p.drop_grad();
}

}  // namespace gcisg
