#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "gcisg/datagen.hpp"
#include "gcisg/ops.hpp"
#include "gcisg/optim.hpp"
#include "gcisg/rng.hpp"
#include "gcisg/serialize.hpp"
#include "gcisg/tensor.hpp"

namespace gcisg {

constexpr std::array<std::size_t, 4> kStageChannels{16, 32, 64, 128};
constexpr std::size_t kEmbedDim = 128;
constexpr std::size_t kProjHidden = 128;
constexpr std::size_t kProjDim = 64;
constexpr int kPretextClasses = kFamilyCount;

// ============================================================================
// layers
// ============================================================================

struct Linear {
    Tensor w;  // [in, out]
    Tensor b;  // [out]

    void init(std::size_t in, std::size_t out, std::uint64_t seed, bool requires_grad) {
        auto eng = rng::engine({seed, in, out});
        const double stddev = std::sqrt(2.0 / static_cast<double>(in));
        std::vector<double> wv(in * out);
        for (auto& x : wv) x = rng::normal(eng, 0.0, stddev);
        w = Tensor::from_data({in, out}, std::move(wv), requires_grad);
        b = Tensor::zeros({out}, requires_grad);
    }

    Tensor forward(const Tensor& x) const { return add_bias_rows(matmul(x, w), b); }
};

struct ConvLayer {
    Tensor w;  // [cout, cin, 3, 3]
    Tensor b;  // [cout]

    void init(std::size_t cin, std::size_t cout, std::uint64_t seed, bool requires_grad) {
        auto eng = rng::engine({seed, cin, cout});
        const double stddev = std::sqrt(2.0 / static_cast<double>(cin * 9));
        std::vector<double> wv(cout * cin * 9);
        for (auto& x : wv) x = rng::normal(eng, 0.0, stddev);
        w = Tensor::from_data({cout, cin, 3, 3}, std::move(wv), requires_grad);
        b = Tensor::zeros({cout}, requires_grad);
    }

    Tensor forward(const Tensor& x) const { return conv2d(x, w, b, /*stride=*/2, /*pad=*/1); }
};

struct Projector {
    Linear fc1, fc2;

    void init(std::size_t in, std::uint64_t seed, bool requires_grad) {
        fc1.init(in, kProjHidden, rng::mix({seed, 1}), requires_grad);
        fc2.init(kProjHidden, kProjDim, rng::mix({seed, 2}), requires_grad);
    }

    // rows [N, in] -> raw projections [N, d]
    Tensor forward(const Tensor& x) const { return fc2.forward(relu(fc1.forward(x))); }
};

// ============================================================================
// staged encoder with per-stage projectors
// ============================================================================

struct StagedFeatures {
    std::array<Tensor, 4> stage;  // post-ReLU maps [N, C_l, H_l, W_l]
    Tensor pooled;                // [N, 128]
};

// Four stride-2 conv stages 3 -> 16 -> 32 -> 64 -> 128, ReLU after each, plus
// one projector per stage (C_l -> 128 -> 64). Stage 4's projector is the main
// CI projector; shallower ones only engage when their stage is active.
struct EncoderNet {
    std::array<ConvLayer, 4> stages;
    std::array<Projector, 4> projs;

    void init(std::uint64_t seed, bool requires_grad) {
        std::size_t cin = 3;
        for (std::size_t l = 0; l < 4; ++l) {
            stages[l].init(cin, kStageChannels[l], rng::mix({seed, 10 + l}), requires_grad);
            projs[l].init(kStageChannels[l], rng::mix({seed, 20 + l}), requires_grad);
            cin = kStageChannels[l];
        }
    }

    StagedFeatures forward_staged(const Tensor& images) const {
        if (images.rank() != 4 || images.shape()[1] != 3)
            throw ShapeError("forward_staged: expected [N,3,H,W], got " +
                             shape_str(images.shape()));
        StagedFeatures f;
        Tensor x = images;
        for (std::size_t l = 0; l < 4; ++l) {
            x = relu(stages[l].forward(x));
            f.stage[l] = x;
        }
        f.pooled = global_avg_pool(x);
        return f;
    }

    // stage index is 1-based to match config and checkpoint names
    Tensor project(int stage, const Tensor& rows) const {
        if (stage < 1 || stage > 4)
            throw ConfigError("project: stage must be in 1..4, got " + std::to_string(stage));
        return projs[static_cast<std::size_t>(stage - 1)].forward(rows);
    }

    // z rows with unit norm: the projector output normalized per row
    Tensor project_normalize(int stage, const Tensor& rows) const {
        return l2_normalize(project(stage, rows));
    }

    NamedParams named(const std::string& prefix) const {
        NamedParams out;
        for (std::size_t l = 0; l < 4; ++l) {
            const std::string s = prefix + ".stage" + std::to_string(l + 1);
            out.emplace_back(s + ".conv.w", stages[l].w);
            out.emplace_back(s + ".conv.b", stages[l].b);
            const std::string p = prefix + ".proj" + std::to_string(l + 1);
            out.emplace_back(p + ".fc1.w", projs[l].fc1.w);
            out.emplace_back(p + ".fc1.b", projs[l].fc1.b);
            out.emplace_back(p + ".fc2.w", projs[l].fc2.w);
            out.emplace_back(p + ".fc2.b", projs[l].fc2.b);
        }
        return out;
    }
};

// ============================================================================
// parameter plumbing
// ============================================================================

inline void copy_params(const NamedParams& src, const NamedParams& dst) {
    if (src.size() != dst.size()) throw ShapeError("copy_params: parameter lists differ");
    for (std::size_t i = 0; i < src.size(); ++i) {
        const Tensor& s = src[i].second;
        const Tensor& d = dst[i].second;
        if (s.shape() != d.shape())
            throw ShapeError("copy_params: shape mismatch at " + src[i].first);
        auto sv = s.data();
        auto dv = d.mutable_data();
        std::copy(sv.begin(), sv.end(), dv.begin());
    }
}

inline void params_to_table(const NamedParams& params, TensorTable& table) {
    for (const auto& [name, p] : params) table[name] = p.detach();
}

inline void params_from_table(const TensorTable& table, const NamedParams& params) {
    for (const auto& [name, p] : params) {
        const auto it = table.find(name);
        if (it == table.end()) throw IoError("checkpoint missing parameter '" + name + "'");
        if (it->second.shape() != p.shape())
            throw IoError("checkpoint parameter '" + name + "' has shape " +
                          shape_str(it->second.shape()) + ", expected " + shape_str(p.shape()));
        auto sv = it->second.data();
        auto dv = p.mutable_data();
        std::copy(sv.begin(), sv.end(), dv.begin());
    }
}

// ============================================================================
// model pair: online + EMA target + frozen reference
// ============================================================================

struct ModelPair {
    EncoderNet online;
    EncoderNet target;     // EMA copy; never receives gradients
    Linear task_head;      // online pooled 128 -> n_classes
    EncoderNet reference;  // frozen real-pretrained encoder
    Linear ref_head;       // frozen pretext head 128 -> 12
    int n_classes = 6;

    void init(std::uint64_t seed, int classes) {
        n_classes = classes;
        online.init(rng::mix({seed, 0x11}), true);
        target.init(rng::mix({seed, 0x11}), false);  // same init as online
        task_head.init(kEmbedDim, static_cast<std::size_t>(classes), rng::mix({seed, 0x22}),
                       true);
        reference.init(rng::mix({seed, 0x33}), false);
        ref_head.init(kEmbedDim, kPretextClasses, rng::mix({seed, 0x44}), false);
    }

    NamedParams trainable() const {
        NamedParams out = online.named("online");
        out.emplace_back("head.w", task_head.w);
        out.emplace_back("head.b", task_head.b);
        return out;
    }

    NamedParams target_params() const { return target.named("target"); }

    NamedParams reference_params() const {
        NamedParams out = reference.named("ref");
        out.emplace_back("ref.head.w", ref_head.w);
        out.emplace_back("ref.head.b", ref_head.b);
        return out;
    }

    Tensor logits(const Tensor& images) const {
        return task_head.forward(online.forward_staged(images).pooled);
    }
};

inline void init_target_from_online(ModelPair& pair) {
    copy_params(pair.online.named("online"), pair.target.named("target"));
}

// theta_bar <- m theta_bar + (1 - m) theta, elementwise over matched params.
inline void ema_update(ModelPair& pair, double m) {
    if (m < 0.0 || m > 1.0) throw ConfigError("ema momentum must be in [0,1]");
    const NamedParams on = pair.online.named("online");
    const NamedParams tg = pair.target.named("target");
    for (std::size_t i = 0; i < on.size(); ++i) {
        auto s = on[i].second.data();
        auto d = tg[i].second.mutable_data();
        for (std::size_t j = 0; j < d.size(); ++j) d[j] = m * d[j] + (1.0 - m) * s[j];
    }
}

inline int argmax_row(const Tensor& rows, std::size_t row) {
    const std::size_t c = rows.shape().back();
    const auto v = rows.data();
    int best = 0;
    for (std::size_t j = 1; j < c; ++j)
        if (v[row * c + j] > v[row * c + best]) best = static_cast<int>(j);
    return best;
}

// ============================================================================
// reference pretraining (the ImageNet stand-in)
// ============================================================================

struct PretrainResult {
    double val_accuracy = 0.0;
    int epochs_run = 0;
};

namespace detail {

inline double eval_classifier(const EncoderNet& enc, const Linear& head, const DataSet& data,
                              std::size_t batch) {
    NoGradGuard ng;
    std::size_t hits = 0;
    for (std::size_t off = 0; off < data.size(); off += batch) {
        const std::size_t n = std::min(batch, data.size() - off);
        Tensor x = slice(data.images, 0, off, n);
        Tensor lg = head.forward(enc.forward_staged(x).pooled);
        for (std::size_t r = 0; r < n; ++r)
            if (argmax_row(lg, r) == data.labels[off + r]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(data.size());
}

}  // namespace detail

// Supervised pretraining of the reference encoder on the 12-way pretext data.
// Aborts if the encoder clearly failed to learn; the caller freezes the
// result by never marking reference params trainable.
inline PretrainResult pretrain_reference(ModelPair& pair, const DataSet& train,
                                         const DataSet& val, int epochs, double lr,
                                         std::size_t batch, std::uint64_t seed) {
    // temporarily trainable copies share storage with the frozen slots
    EncoderNet enc;
    enc.init(1, true);
    Linear head;
    head.init(kEmbedDim, kPretextClasses, 1, true);
    copy_params(pair.reference.named("ref"), enc.named("ref"));
    std::copy(pair.ref_head.w.data().begin(), pair.ref_head.w.data().end(),
              head.w.mutable_data().begin());
    std::copy(pair.ref_head.b.data().begin(), pair.ref_head.b.data().end(),
              head.b.mutable_data().begin());
    NamedParams params = enc.named("ref");
    params.emplace_back("ref.head.w", head.w);
    params.emplace_back("ref.head.b", head.b);

    SgdMomentum opt(lr, 0.9);
    const std::size_t n = train.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    PretrainResult res;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        auto shuffle_eng = rng::engine({seed, 0x5u, static_cast<std::uint64_t>(epoch)});
        rng::shuffle(order, shuffle_eng);
        for (std::size_t off = 0; off < n; off += batch) {
            const std::size_t bn = std::min(batch, n - off);
            std::vector<Tensor> imgs;
            std::vector<int> labels;
            imgs.reserve(bn);
            for (std::size_t k = 0; k < bn; ++k) {
                const std::size_t idx = order[off + k];
                imgs.push_back(reshape(train.image(idx), {1, 3, train.images.shape()[2],
                                                          train.images.shape()[3]}));
                labels.push_back(train.labels[idx]);
            }
            Tensor x = imgs.size() == 1 ? imgs[0] : concat(imgs, 0);
            Tensor loss = nll_loss(log_softmax_last(head.forward(enc.forward_staged(x).pooled)),
                                   labels);
            if (!std::isfinite(loss.value()))
                throw DivergenceError("reference pretraining diverged (non-finite loss)");
            zero_grads(params);
            backward(loss);
            opt.step(params);
        }
        res.epochs_run = epoch + 1;
    }
    res.val_accuracy = detail::eval_classifier(enc, head, val, batch);

    copy_params(enc.named("ref"), pair.reference.named("ref"));
    std::copy(head.w.data().begin(), head.w.data().end(), pair.ref_head.w.mutable_data().begin());
    std::copy(head.b.data().begin(), head.b.data().end(), pair.ref_head.b.mutable_data().begin());

    if (res.val_accuracy < 0.70)
        throw DivergenceError("reference pretraining reached only " +
                              std::to_string(res.val_accuracy) +
                              " pretext validation accuracy (need 0.70; target 0.90)");
    return res;
}

inline void save_reference(const std::string& path, const ModelPair& pair) {
    TensorTable table;
    params_to_table(pair.reference_params(), table);
    save_checkpoint(path, table);
}

inline void load_reference(const std::string& path, ModelPair& pair) {
    params_from_table(load_checkpoint(path), pair.reference_params());
}

}  // namespace gcisg
