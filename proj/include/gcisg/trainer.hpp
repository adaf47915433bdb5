#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gcisg/ci.hpp"
#include "gcisg/config.hpp"
#include "gcisg/datagen.hpp"
#include "gcisg/encoder.hpp"
#include "gcisg/guidance.hpp"
#include "gcisg/metrics.hpp"
#include "gcisg/optim.hpp"
#include "gcisg/queue.hpp"
#include "gcisg/rng.hpp"

namespace gcisg {

// Softmax cross-entropy over class logits.
inline Tensor task_loss(const Tensor& logits, const std::vector<int>& labels) {
    return nll_loss(log_softmax_last(logits), labels);
}

// One optimization step's loss with its per-term contributions. The per-stage
// entries are the lambda-weighted contributions, so task + sum(g) + sum(ci)
// reconstructs the scalar.
struct LossBreakdown {
    Tensor total;
    double task = 0.0;
    std::array<double, 4> g{};   // weighted guidance contribution per stage
    std::array<double, 4> ci{};  // weighted CI contribution per stage
};

struct ViewBatch {
    Tensor x1, x2;            // [N,3,H,W] strong-augmented views
    std::vector<int> labels;  // length N
};

struct StepRecord {
    std::uint64_t step = 0;
    int epoch = 0;
    double loss_total = 0.0;
    double loss_task = 0.0;
    std::array<double, 4> loss_g{};
    std::array<double, 4> loss_ci{};
};

// ============================================================================
// trainer
// ============================================================================

class Trainer {
public:
    explicit Trainer(const ExperimentConfig& cfg)
        : cfg_(cfg), opt_(cfg.lr, cfg.momentum), pool_(pool_op_from_string(cfg.pool)) {
        cfg_.validate();
        if (cfg_.proj_dim != static_cast<int>(kProjDim))
            throw ConfigError("model.proj_dim is fixed to " + std::to_string(kProjDim) +
                              " in this build");
        pair_.init(cfg_.seed, cfg_.classes);
        init_target_from_online(pair_);
        for (int l = 0; l < 4; ++l)
            queues_.emplace_back(static_cast<std::size_t>(cfg_.queue_capacity), kProjDim);
        if (cfg_.dense_ci) {
            grid_ = static_cast<int>(std::lround(std::sqrt(double(cfg_.dense_patches))));
            if (grid_ * grid_ != cfg_.dense_patches)
                throw ConfigError("ci.patches must be a perfect square, got " +
                                  std::to_string(cfg_.dense_patches));
        }
    }

    const ExperimentConfig& config() const { return cfg_; }
    ModelPair& pair() { return pair_; }
    const ModelPair& pair() const { return pair_; }
    SupportQueue& queue(int stage) { return queues_[static_cast<std::size_t>(stage - 1)]; }
    int epochs_done() const { return epochs_done_; }
    std::uint64_t global_step() const { return global_step_; }

    // CI representation rows for one stage map: globally pooled [N,C], or one
    // row per grid patch [N*P,C] in dense mode. A 1x1 grid is exactly the
    // global path.
    Tensor stage_rows(const Tensor& map) const {
        if (!cfg_.dense_ci || grid_ == 1) return global_avg_pool(map);
        const std::size_t N = map.shape()[0], C = map.shape()[1];
        const std::size_t H = map.shape()[2], W = map.shape()[3];
        const std::size_t g = static_cast<std::size_t>(grid_);
        if (H % g != 0 || W % g != 0 || H < g || W < g)
            throw ConfigError("dense CI grid " + std::to_string(g) + "x" + std::to_string(g) +
                              " does not divide stage map " + shape_str(map.shape()));
        Tensor pooled = avg_pool2d(map, H / g, W / g, H / g);       // [N,C,g,g]
        Tensor flat = reshape(pooled, {N, C, g * g});
        return reshape(transpose(flat, {0, 2, 1}), {N * g * g, C});  // [N*P, C]
    }

    // Builds the loss graph for one batch and collects the target projections
    // to enqueue after the parameter updates.
    LossBreakdown total_loss(const ViewBatch& b,
                             std::vector<std::pair<int, Tensor>>* enqueue_rows = nullptr) {
        LossBreakdown out;
        StagedFeatures on1 = pair_.online.forward_staged(b.x1);
        Tensor loss = task_loss(pair_.task_head.forward(on1.pooled), b.labels);
        out.task = loss.value();

        const std::vector<int> g_stages = stages_with_(cfg_.lambda_g, cfg_.use_guidance);
        const std::vector<int> ci_stages = stages_with_(cfg_.lambda_ci, cfg_.use_ci);

        if (!g_stages.empty()) {
            StagedFeatures ref1;
            {
                NoGradGuard ng;
                ref1 = pair_.reference.forward_staged(b.x1);
            }
            for (int l : g_stages) {
                Tensor term = guidance_stage_(on1.stage[static_cast<std::size_t>(l - 1)],
                                              ref1.stage[static_cast<std::size_t>(l - 1)]);
                const double lam = cfg_.effective_lambda_g(l);
                out.g[static_cast<std::size_t>(l - 1)] = lam * term.value();
                loss = add(loss, mul_scalar(term, lam));
            }
        }

        if (!ci_stages.empty()) {
            StagedFeatures on2 = pair_.online.forward_staged(b.x2);
            StagedFeatures tg1, tg2;
            {
                NoGradGuard ng;
                tg1 = pair_.target.forward_staged(b.x1);
                tg2 = pair_.target.forward_staged(b.x2);
            }
            for (int l : ci_stages) {
                const std::size_t li = static_cast<std::size_t>(l - 1);
                Tensor z1 = pair_.online.project_normalize(l, stage_rows(on1.stage[li]));
                Tensor z2 = pair_.online.project_normalize(l, stage_rows(on2.stage[li]));
                Tensor zb1, zb2;
                {
                    NoGradGuard ng;
                    zb1 = pair_.target.project_normalize(l, stage_rows(tg1.stage[li]));
                    zb2 = pair_.target.project_normalize(l, stage_rows(tg2.stage[li]));
                }
                if (enqueue_rows) {
                    enqueue_rows->emplace_back(l, zb1);
                    enqueue_rows->emplace_back(l, zb2);
                }
                SupportQueue& q = queues_[li];
                if (!ci_warm(q)) continue;  // cold start: support too sparse
                const Tensor sup = q.snapshot();
                Tensor term;
                if (cfg_.ci_kind == "infonce") {
                    term = mul_scalar(add(infonce_batch_loss(z1, zb2, sup, cfg_.tau),
                                          infonce_batch_loss(z2, zb1, sup, cfg_.tau)),
                                      0.5);
                } else {
                    term = ci_batch_symmetric_loss(z1, z2, zb1, zb2, sup, cfg_.tau,
                                                   cfg_.tau_bar);
                }
                const double lam = cfg_.effective_lambda_ci(l);
                out.ci[li] = lam * term.value();
                loss = add(loss, mul_scalar(term, lam));
            }
        }
        out.total = loss;
        return out;
    }

    // One optimization step: loss -> backward -> SGD -> EMA -> enqueue.
    StepRecord train_step(const ViewBatch& b) {
        std::vector<std::pair<int, Tensor>> enq;
        LossBreakdown lb = total_loss(b, &enq);
        if (!std::isfinite(lb.total.value())) throw DivergenceError(diagnostic_dump_(lb));

        const NamedParams params = pair_.trainable();
        zero_grads(params);
        backward(lb.total);
        opt_.step(params);
        ema_update(pair_, cfg_.ema_momentum);
        for (auto& [stage, rows] : enq) queues_[static_cast<std::size_t>(stage - 1)].enqueue(rows);

        StepRecord rec;
        rec.step = ++global_step_;
        rec.epoch = epochs_done_;
        rec.loss_total = lb.total.value();
        rec.loss_task = lb.task;
        rec.loss_g = lb.g;
        rec.loss_ci = lb.ci;
        return rec;
    }

    void finish_epoch() { ++epochs_done_; }

    // Two augmented views per sample; augmentation seeds derive from
    // (run seed, epoch, dataset index, view), so resume at an epoch boundary
    // replays the identical stream.
    ViewBatch make_views(const DataSet& ds, const std::vector<std::size_t>& idx, int epoch) const {
        if (ds.domain != Domain::synthetic)
            throw ConfigError("train batches must come from the synthetic domain");
        std::vector<Tensor> v1, v2;
        ViewBatch b;
        v1.reserve(idx.size());
        v2.reserve(idx.size());
        const Shape& s = ds.images.shape();
        for (std::size_t i : idx) {
            Tensor img = ds.image(i);
            const auto e = static_cast<std::uint64_t>(epoch);
            v1.push_back(reshape(strong_augment(img, rng::mix({cfg_.seed, 0xa06u, e, i, 1})),
                                 {1, s[1], s[2], s[3]}));
            v2.push_back(reshape(strong_augment(img, rng::mix({cfg_.seed, 0xa06u, e, i, 2})),
                                 {1, s[1], s[2], s[3]}));
            b.labels.push_back(ds.labels[i]);
        }
        b.x1 = v1.size() == 1 ? v1[0] : concat(v1, 0);
        b.x2 = v2.size() == 1 ? v2[0] : concat(v2, 0);
        return b;
    }

    // ---- checkpointing --------------------------------------------------

    void save(const std::string& path, std::uint64_t metrics_bytes) const {
        TensorTable t;
        params_to_table(pair_.trainable(), t);
        params_to_table(pair_.target_params(), t);
        opt_.save(t, "opt");
        queues_[3].save(t, "queue.global");
        for (int l = 1; l <= 3; ++l)
            queues_[static_cast<std::size_t>(l - 1)].save(t, "queue.stage" + std::to_string(l));
        t["trainstate.meta"] = Tensor::from_data(
            {3}, {static_cast<double>(epochs_done_), static_cast<double>(global_step_),
                  static_cast<double>(metrics_bytes)});
        std::ostringstream cfg_text;
        write_config(cfg_text, cfg_);
        const std::string blob = cfg_text.str();
        std::vector<double> chars(blob.begin(), blob.end());
        t["meta.config"] = Tensor::from_data({blob.size()}, std::move(chars));
        save_checkpoint(path, t);
    }

    // Returns the metrics byte offset recorded at save time.
    std::uint64_t load(const std::string& path) {
        const TensorTable t = load_checkpoint(path);
        params_from_table(t, pair_.trainable());
        params_from_table(t, pair_.target_params());
        opt_.load(t, "opt");
        queues_[3].load(t, "queue.global");
        for (int l = 1; l <= 3; ++l)
            queues_[static_cast<std::size_t>(l - 1)].load(t, "queue.stage" + std::to_string(l));
        const auto it = t.find("trainstate.meta");
        if (it == t.end()) throw IoError("checkpoint missing trainstate.meta");
        epochs_done_ = static_cast<int>(it->second.data()[0]);
        global_step_ = static_cast<std::uint64_t>(it->second.data()[1]);
        return static_cast<std::uint64_t>(it->second.data()[2]);
    }

private:
    static std::vector<int> stages_with_(const std::array<double, 4>& lambda, bool enabled) {
        std::vector<int> out;
        if (!enabled) return out;
        for (int l = 1; l <= 4; ++l)
            if (lambda[static_cast<std::size_t>(l - 1)] > 0.0) out.push_back(l);
        return out;
    }

    Tensor guidance_stage_(const Tensor& on_map, const Tensor& ref_map) const {
        const std::size_t N = on_map.shape()[0];
        const Shape per{on_map.shape()[1], on_map.shape()[2], on_map.shape()[3]};
        Tensor acc = Tensor::scalar(0.0);
        for (std::size_t i = 0; i < N; ++i) {
            Tensor gs = reshape(slice(on_map, 0, i, 1), per);
            Tensor gr = reshape(slice(ref_map, 0, i, 1), per);
            acc = add(acc, guidance_loss(gs, gr, pool_));
        }
        return mul_scalar(acc, 1.0 / static_cast<double>(N));
    }

    std::string diagnostic_dump_(const LossBreakdown& lb) const {
        std::ostringstream os;
        os << "non-finite loss at step " << global_step_ + 1 << " (epoch " << epochs_done_
           << "): total=" << lb.total.value() << " task=" << lb.task;
        for (int l = 1; l <= 4; ++l)
            os << " g" << l << "=" << lb.g[static_cast<std::size_t>(l - 1)] << " ci" << l << "="
               << lb.ci[static_cast<std::size_t>(l - 1)];
        return os.str();
    }

    ExperimentConfig cfg_;
    ModelPair pair_;
    SgdMomentum opt_;
    PoolOp pool_;
    std::vector<SupportQueue> queues_;
    int grid_ = 1;
    int epochs_done_ = 0;
    std::uint64_t global_step_ = 0;
};

// ============================================================================
// evaluation glue
// ============================================================================

inline std::vector<int> predict_all(const ModelPair& pair, const Tensor& images,
                                    std::size_t batch = 128) {
    NoGradGuard ng;
    const std::size_t n = images.shape()[0];
    std::vector<int> preds;
    preds.reserve(n);
    for (std::size_t off = 0; off < n; off += batch) {
        const std::size_t bn = std::min(batch, n - off);
        Tensor lg = pair.logits(slice(images, 0, off, bn));
        for (std::size_t r = 0; r < bn; ++r) preds.push_back(argmax_row(lg, r));
    }
    return preds;
}

inline double real_accuracy_of(const ModelPair& pair, const DataSet& val) {
    const std::vector<int> preds = predict_all(pair, val.images);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == val.labels[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(preds.size());
}

inline double match_rate_of(const ModelPair& pair, const DataSet& val, std::uint64_t eval_seed,
                            double strength = 1.0) {
    const Shape& s = val.images.shape();
    std::vector<Tensor> stylized;
    stylized.reserve(val.size());
    for (std::size_t i = 0; i < val.size(); ++i)
        stylized.push_back(reshape(stylize_for_matchrate(val.image(i), rng::mix({eval_seed, i}),
                                                         strength),
                                   {1, s[1], s[2], s[3]}));
    Tensor styl = stylized.size() == 1 ? stylized[0] : concat(stylized, 0);
    const std::vector<int> a = predict_all(pair, val.images);
    const std::vector<int> b = predict_all(pair, styl);
    std::size_t same = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] == b[i]) ++same;
    return static_cast<double>(same) / static_cast<double>(a.size());
}

inline Tensor pooled_features(const EncoderNet& enc, const Tensor& images,
                              std::size_t batch = 128) {
    NoGradGuard ng;
    const std::size_t n = images.shape()[0];
    std::vector<Tensor> rows;
    for (std::size_t off = 0; off < n; off += batch) {
        const std::size_t bn = std::min(batch, n - off);
        rows.push_back(enc.forward_staged(slice(images, 0, off, bn)).pooled);
    }
    return rows.size() == 1 ? rows[0] : concat(rows, 0);
}

inline double cka_to_reference(const ModelPair& pair, const DataSet& val) {
    return cka_linear(pooled_features(pair.online, val.images),
                      pooled_features(pair.reference, val.images));
}

// Frozen reference head on the trained online backbone, over pretext data.
inline double ref_head_accuracy_of(const ModelPair& pair, const DataSet& pretext_val) {
    NoGradGuard ng;
    const std::size_t n = pretext_val.size();
    std::size_t hits = 0;
    const std::size_t batch = 128;
    for (std::size_t off = 0; off < n; off += batch) {
        const std::size_t bn = std::min(batch, n - off);
        Tensor feats = pair.online.forward_staged(slice(pretext_val.images, 0, off, bn)).pooled;
        Tensor lg = pair.ref_head.forward(feats);
        for (std::size_t r = 0; r < bn; ++r)
            if (argmax_row(lg, r) == pretext_val.labels[off + r]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

// ============================================================================
// full experiment runs
// ============================================================================

struct RunResult {
    MetricReport report;
    bool complete = false;
    int epochs_done = 0;
    std::string metrics_path;
    std::string final_ckpt;
};

namespace detail {

inline nlohmann::json step_json(const StepRecord& r, double lr) {
    nlohmann::json j;
    j["schema"] = 1;
    j["step"] = r.step;
    j["epoch"] = r.epoch;
    j["loss_total"] = r.loss_total;
    j["loss_task"] = r.loss_task;
    j["loss_g_l"] = r.loss_g;
    j["loss_ci_l"] = r.loss_ci;
    j["lr"] = lr;
    return j;
}

}  // namespace detail

// Trains per config, evaluating real-domain accuracy each epoch and the full
// diagnostic set at the end. stop_after (when >= 0) ends the session once
// that many epochs are complete, leaving a resumable checkpoint; resume picks
// up from ckpt-latest in the output directory, rewinding the metrics log to
// the matching offset so the final file is identical to an uninterrupted run.
inline RunResult run_experiment(const ExperimentConfig& cfg, bool resume = false,
                                int stop_after = -1) {
    namespace fs = std::filesystem;
    cfg.validate();
    DataSet train = load_dataset(cfg.data_dir, "syn_train");
    DataSet val = load_dataset(cfg.data_dir, "real_val");
    DataSet pretext_val = load_dataset(cfg.data_dir, "pretext_val");
    if (train.domain != Domain::synthetic)
        throw ConfigError("training split must be synthetic-domain data");

    fs::create_directories(cfg.out_dir);
    const std::string metrics_path = cfg.out_dir + "/metrics.jsonl";
    const std::string latest_path = cfg.out_dir + "/ckpt-latest.gckp";
    const std::string final_path = cfg.out_dir + "/final.gckp";

    Trainer tr(cfg);
    load_reference(cfg.reference_ckpt, tr.pair());

    std::ofstream metrics;
    if (resume && fs::exists(latest_path)) {
        const std::uint64_t offset = tr.load(latest_path);
        if (!fs::exists(metrics_path))
            throw IoError("resume: metrics log missing: " + metrics_path);
        fs::resize_file(metrics_path, offset);
        metrics.open(metrics_path, std::ios::app);
    } else {
        metrics.open(metrics_path, std::ios::trunc);
        nlohmann::json echo;
        echo["schema"] = 1;
        echo["config"] = config_to_kv(cfg);
        echo["note"] = "desk-scale defaults (batch 32, epochs 10); paper protocol uses 64/30";
        metrics << echo.dump() << "\n";
    }
    if (!metrics) throw IoError("cannot open metrics log: " + metrics_path);

    const std::size_t n = train.size();
    std::vector<std::size_t> order(n);

    RunResult res;
    res.metrics_path = metrics_path;
    res.final_ckpt = final_path;

    for (int epoch = tr.epochs_done(); epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        auto shuffle_eng = rng::engine({cfg.seed, 0xe70c4u, static_cast<std::uint64_t>(epoch)});
        rng::shuffle(order, shuffle_eng);

        for (std::size_t off = 0; off < n; off += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t bn = std::min(static_cast<std::size_t>(cfg.batch), n - off);
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(off),
                                         order.begin() + static_cast<std::ptrdiff_t>(off + bn));
            StepRecord rec = tr.train_step(tr.make_views(train, idx, epoch));
            metrics << detail::step_json(rec, cfg.lr).dump() << "\n";
        }
        tr.finish_epoch();

        nlohmann::json ej;
        ej["schema"] = 1;
        ej["epoch"] = epoch;
        ej["step"] = tr.global_step();
        ej["real_acc"] = real_accuracy_of(tr.pair(), val);
        metrics << ej.dump() << "\n";
        metrics.flush();
        tr.save(latest_path, static_cast<std::uint64_t>(fs::file_size(metrics_path)));

        res.epochs_done = tr.epochs_done();
        if (stop_after >= 0 && tr.epochs_done() >= stop_after && tr.epochs_done() < cfg.epochs)
            return res;  // leave resumable state behind
    }

    MetricReport rep;
    rep.n = val.size();
    rep.seed = cfg.seed;
    rep.real_acc = real_accuracy_of(tr.pair(), val);
    rep.match_rate = match_rate_of(tr.pair(), val, rng::mix({cfg.seed, 0xe7a1u}));
    rep.cka = cka_to_reference(tr.pair(), val);
    rep.ref_head_acc = ref_head_accuracy_of(tr.pair(), pretext_val);

    nlohmann::json fj;
    fj["schema"] = 1;
    fj["epoch"] = cfg.epochs - 1;
    fj["step"] = tr.global_step();
    fj["real_acc"] = rep.real_acc;
    fj["match_rate"] = rep.match_rate;
    fj["cka"] = rep.cka;
    fj["ref_head_acc"] = rep.ref_head_acc;
    metrics << fj.dump() << "\n";
    metrics.flush();

    tr.save(final_path, static_cast<std::uint64_t>(fs::file_size(metrics_path)));
    res.report = rep;
    res.complete = true;
    res.epochs_done = tr.epochs_done();
    return res;
}

}  // namespace gcisg
