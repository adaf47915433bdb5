#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gcisg/trainer.hpp"
#include "test_util.hpp"

using namespace gcisg;
using Catch::Matchers::WithinAbs;

namespace {

ExperimentConfig small_cfg() {
    ExperimentConfig c;
    c.classes = 6;
    c.batch = 4;
    c.epochs = 2;
    c.lr = 0.01;
    c.queue_capacity = 8;
    c.seed = 11;
    return c;
}

DataSet tiny_train(std::size_t n = 8, std::uint64_t seed = 301) {
    return pack_samples(generate_split(DatasetSpec::defaults(), Domain::synthetic, n, seed));
}

std::vector<std::size_t> first_indices(std::size_t n) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return idx;
}

// unit-norm rows to warm a queue deterministically
Tensor warm_rows(std::size_t n, std::uint64_t seed) {
    auto eng = rng::engine(seed);
    std::vector<double> v(n * kProjDim);
    for (auto& x : v) x = rng::normal(eng, 0.0, 1.0);
    for (std::size_t r = 0; r < n; ++r) {
        double sq = 0.0;
        for (std::size_t i = 0; i < kProjDim; ++i) sq += v[r * kProjDim + i] * v[r * kProjDim + i];
        const double inv = 1.0 / std::sqrt(sq);
        for (std::size_t i = 0; i < kProjDim; ++i) v[r * kProjDim + i] *= inv;
    }
    return Tensor::from_data({n, kProjDim}, std::move(v));
}

void warm_queues(Trainer& tr, std::uint64_t seed = 77) {
    for (int l = 1; l <= 4; ++l) tr.queue(l).enqueue(warm_rows(tr.queue(l).capacity(), seed));
}

double breakdown_sum(const LossBreakdown& lb) {
    double s = lb.task;
    for (double v : lb.g) s += v;
    for (double v : lb.ci) s += v;
    return s;
}

bool same_values(const NamedParams& a, const NamedParams& b) {
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[i].second.numel(); ++j)
            if (a[i].second.data()[j] != b[i].second.data()[j]) return false;
    return true;
}

std::string file_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

// Shared on-disk fixture: datasets plus an (untrained) reference checkpoint.
// Mechanics tests only need the files to exist and load consistently.
struct RunEnv {
    testutil::TempDir dir{"trainer_env"};
    std::string data;
    std::string ref;
    RunEnv() {
        data = dir.file("data");
        std::filesystem::create_directories(data);
        DatasetSpec spec = DatasetSpec::defaults();
        save_dataset(data, "syn_train",
                     pack_samples(generate_split(spec, Domain::synthetic, 64, 401)));
        save_dataset(data, "real_val",
                     pack_samples(generate_split(spec, Domain::real_world, 24, 402)));
        DatasetSpec pspec = spec;
        pspec.n_classes = kFamilyCount;
        save_dataset(data, "pretext_val",
                     pack_samples(generate_split(pspec, Domain::synthetic, 24, 403)));
        ref = dir.file("ref.gckp");
        ModelPair p;
        p.init(7, 6);
        save_reference(ref, p);
    }
};

RunEnv& env() {
    static RunEnv e;
    return e;
}

ExperimentConfig run_cfg(const std::string& out_tag) {
    ExperimentConfig c;
    c.data_dir = env().data;
    c.reference_ckpt = env().ref;
    c.out_dir = env().dir.file(out_tag);
    c.classes = 6;
    c.batch = 16;
    c.epochs = 2;
    c.lr = 0.01;
    c.queue_capacity = 16;
    c.seed = 11;
    return c;
}

// One uninterrupted run in a shared output directory, with its metrics log
// and final checkpoint copied aside. Replay tests wipe the directory, rerun
// with the identical config, and demand byte equality against the copies.
struct Baseline {
    RunResult result;
    std::string metrics_copy;
    std::string ckpt_copy;
};

const Baseline& baseline_run() {
    static Baseline b = [] {
        Baseline out;
        out.result = run_experiment(run_cfg("out_shared"));
        out.metrics_copy = env().dir.file("base_metrics.jsonl");
        out.ckpt_copy = env().dir.file("base_final.gckp");
        std::filesystem::copy_file(out.result.metrics_path, out.metrics_copy);
        std::filesystem::copy_file(out.result.final_ckpt, out.ckpt_copy);
        return out;
    }();
    return b;
}

void wipe_shared_out() {
    std::filesystem::remove_all(env().dir.file("out_shared"));
}

}  // namespace

TEST_CASE("loss breakdown reconstructs the total", "[trainer]") {
    Trainer tr(small_cfg());
    warm_queues(tr);
    DataSet ds = tiny_train();
    LossBreakdown lb = tr.total_loss(tr.make_views(ds, first_indices(4), 0));

    REQUIRE(lb.task > 0.0);
    for (int l : {1, 2}) {
        REQUIRE(lb.g[static_cast<std::size_t>(l - 1)] == 0.0);
        REQUIRE(lb.ci[static_cast<std::size_t>(l - 1)] == 0.0);
    }
    for (int l : {3, 4}) {
        REQUIRE(lb.g[static_cast<std::size_t>(l - 1)] > 0.0);
        REQUIRE(lb.ci[static_cast<std::size_t>(l - 1)] > 0.0);
    }
    REQUIRE_THAT(lb.total.value(), WithinAbs(breakdown_sum(lb), 1e-10));
}

TEST_CASE("disabling both auxiliary terms leaves the classification loss", "[trainer]") {
    ExperimentConfig cfg = small_cfg();
    cfg.use_guidance = false;
    cfg.use_ci = false;
    Trainer tr(cfg);
    warm_queues(tr);
    DataSet ds = tiny_train();
    LossBreakdown lb = tr.total_loss(tr.make_views(ds, first_indices(4), 0));
    REQUIRE(lb.total.value() == lb.task);
    for (double v : lb.g) REQUIRE(v == 0.0);
    for (double v : lb.ci) REQUIRE(v == 0.0);
}

TEST_CASE("doubling a lambda doubles that contribution", "[trainer]") {
    ExperimentConfig a = small_cfg();
    ExperimentConfig b = small_cfg();
    b.lambda_g = {0.0, 0.0, 2.0, 2.0};
    b.lambda_ci = {0.0, 0.0, 2.0, 2.0};
    Trainer ta(a), tb(b);
    warm_queues(ta);
    warm_queues(tb);
    DataSet ds = tiny_train();
    ViewBatch batch = ta.make_views(ds, first_indices(4), 0);
    LossBreakdown la = ta.total_loss(batch);
    LossBreakdown lbd = tb.total_loss(batch);

    REQUIRE(la.task == lbd.task);  // identical init, identical views
    for (int l : {3, 4}) {
        const std::size_t i = static_cast<std::size_t>(l - 1);
        REQUIRE(lbd.g[i] == 2.0 * la.g[i]);
        REQUIRE(lbd.ci[i] == 2.0 * la.ci[i]);
    }
}

TEST_CASE("single-stage contributions match standalone recomputation", "[trainer]") {
    ExperimentConfig c = small_cfg();
    c.lambda_g = {0.0, 0.0, 1.0, 0.0};
    c.lambda_ci = {0.0, 0.0, 1.0, 0.0};
    Trainer tr(c);
    warm_queues(tr);
    DataSet ds = tiny_train();
    ViewBatch b = tr.make_views(ds, first_indices(4), 0);
    const LossBreakdown lb = tr.total_loss(b);

    // rebuild both stage-3 terms from the model pair directly
    const StagedFeatures on1 = tr.pair().online.forward_staged(b.x1);
    const StagedFeatures on2 = tr.pair().online.forward_staged(b.x2);
    const StagedFeatures ref1 = tr.pair().reference.forward_staged(b.x1);
    const StagedFeatures tg1 = tr.pair().target.forward_staged(b.x1);
    const StagedFeatures tg2 = tr.pair().target.forward_staged(b.x2);

    const PoolOp pool = pool_op_from_string(c.pool);
    const Tensor& om = on1.stage[2];
    const Tensor& rm = ref1.stage[2];
    const Shape per{om.shape()[1], om.shape()[2], om.shape()[3]};
    double guide = 0.0;
    for (std::size_t i = 0; i < 4; ++i)
        guide += guidance_loss(reshape(slice(om, 0, i, 1), per),
                               reshape(slice(rm, 0, i, 1), per), pool)
                     .value();
    guide /= 4.0;

    Tensor z1 = tr.pair().online.project_normalize(3, tr.stage_rows(on1.stage[2]));
    Tensor z2 = tr.pair().online.project_normalize(3, tr.stage_rows(on2.stage[2]));
    Tensor zb1 = tr.pair().target.project_normalize(3, tr.stage_rows(tg1.stage[2]));
    Tensor zb2 = tr.pair().target.project_normalize(3, tr.stage_rows(tg2.stage[2]));
    const double ci =
        ci_batch_symmetric_loss(z1, z2, zb1, zb2, tr.queue(3).snapshot(), c.tau, c.tau_bar)
            .value();

    CHECK_THAT(lb.g[2], WithinAbs(guide, 1e-12));
    CHECK_THAT(lb.ci[2], WithinAbs(ci, 1e-12));
    CHECK(lb.g[0] == 0.0);
    CHECK(lb.ci[3] == 0.0);
    CHECK_THAT(lb.total.value() - lb.task, WithinAbs(guide + ci, 1e-10));
}

TEST_CASE("a step blends the target toward the updated online weights", "[trainer]") {
    Trainer tr(small_cfg());
    warm_queues(tr);
    DataSet ds = tiny_train();
    ViewBatch b = tr.make_views(ds, first_indices(4), 0);

    std::vector<std::vector<double>> target_before;
    for (auto& [name, t] : tr.pair().target.named("t"))
        target_before.emplace_back(t.data().begin(), t.data().end());

    tr.train_step(b);
    const double m = tr.config().ema_momentum;
    NamedParams on = tr.pair().online.named("t");
    NamedParams tg = tr.pair().target.named("t");
    bool moved = false;
    for (std::size_t i = 0; i < on.size(); ++i)
        for (std::size_t j = 0; j < on[i].second.numel(); ++j) {
            const double expect =
                m * target_before[i][j] + (1.0 - m) * on[i].second.data()[j];
            REQUIRE_THAT(tg[i].second.data()[j], WithinAbs(expect, 1e-14));
            if (on[i].second.data()[j] != target_before[i][j]) moved = true;
        }
    REQUIRE(moved);  // the optimizer actually changed the online weights
}

TEST_CASE("zero learning rate freezes the weights", "[trainer]") {
    ExperimentConfig cfg = small_cfg();
    cfg.lr = 0.0;
    Trainer tr(cfg);
    warm_queues(tr);
    std::vector<std::vector<double>> before;
    for (auto& [name, t] : tr.pair().trainable())
        before.emplace_back(t.data().begin(), t.data().end());

    DataSet ds = tiny_train();
    tr.train_step(tr.make_views(ds, first_indices(4), 0));
    tr.train_step(tr.make_views(ds, first_indices(4), 0));

    NamedParams after = tr.pair().trainable();
    for (std::size_t i = 0; i < after.size(); ++i)
        for (std::size_t j = 0; j < after[i].second.numel(); ++j)
            REQUIRE(after[i].second.data()[j] == before[i][j]);
    REQUIRE(same_values(tr.pair().online.named("x"), tr.pair().target.named("x")));
}

TEST_CASE("both target views reach the queues; CI waits for warmup", "[trainer]") {
    ExperimentConfig cfg = small_cfg();
    cfg.queue_capacity = 64;
    Trainer tr(cfg);
    DataSet ds = tiny_train();
    ViewBatch b = tr.make_views(ds, first_indices(4), 0);

    StepRecord r1 = tr.train_step(b);
    REQUIRE(tr.queue(3).fill() == 8);  // 2 views x 4 samples
    REQUIRE(tr.queue(4).fill() == 8);
    REQUIRE(tr.queue(1).fill() == 0);  // inactive stage
    for (double v : r1.loss_ci) REQUIRE(v == 0.0);  // cold start

    StepRecord r2 = tr.train_step(b);
    REQUIRE(tr.queue(3).fill() == 16);
    for (double v : r2.loss_ci) REQUIRE(v == 0.0);  // 8 * 4 < 64 at loss time

    StepRecord r3 = tr.train_step(b);  // 16 * 4 >= 64: warm
    REQUIRE(r3.loss_ci[2] > 0.0);
    REQUIRE(r3.loss_ci[3] > 0.0);
}

TEST_CASE("augmented views are deterministic, distinct, and epoch-dependent", "[trainer]") {
    Trainer tr(small_cfg());
    DataSet ds = tiny_train();
    auto idx = first_indices(4);
    ViewBatch a = tr.make_views(ds, idx, 0);
    ViewBatch b = tr.make_views(ds, idx, 0);
    ViewBatch c = tr.make_views(ds, idx, 1);

    REQUIRE(a.x1.shape() == Shape{4, 3, 32, 32});
    for (std::size_t i = 0; i < a.x1.numel(); ++i) REQUIRE(a.x1.data()[i] == b.x1.data()[i]);
    double d12 = 0.0, d_epoch = 0.0;
    for (std::size_t i = 0; i < a.x1.numel(); ++i) {
        d12 += std::abs(a.x1.data()[i] - a.x2.data()[i]);
        d_epoch += std::abs(a.x1.data()[i] - c.x1.data()[i]);
    }
    REQUIRE(d12 > 1.0);
    REQUIRE(d_epoch > 1.0);
    REQUIRE(a.labels == b.labels);

    DataSet real = pack_samples(
        generate_split(DatasetSpec::defaults(), Domain::real_world, 4, 305));
    REQUIRE_THROWS_AS(tr.make_views(real, first_indices(2), 0), ConfigError);
}

TEST_CASE("a one-patch dense grid matches global pooling", "[trainer]") {
    ExperimentConfig a = small_cfg();
    ExperimentConfig b = small_cfg();
    b.dense_ci = true;
    b.dense_patches = 1;
    Trainer ta(a), tb(b);
    warm_queues(ta);
    warm_queues(tb);
    DataSet ds = tiny_train();
    ViewBatch batch = ta.make_views(ds, first_indices(4), 0);
    LossBreakdown la = ta.total_loss(batch);
    LossBreakdown lb = tb.total_loss(batch);
    REQUIRE(la.total.value() == lb.total.value());
    for (std::size_t i = 0; i < 4; ++i) REQUIRE(la.ci[i] == lb.ci[i]);
}

TEST_CASE("dense grids produce one row per patch and must divide the map", "[trainer]") {
    ExperimentConfig cfg = small_cfg();
    cfg.dense_ci = true;
    cfg.dense_patches = 4;
    Trainer tr(cfg);
    Tensor map = Tensor::from_data({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
    Tensor rows = tr.stage_rows(map);  // 1x1 patches: identity layout
    REQUIRE(rows.shape() == Shape{4, 1});
    REQUIRE(rows.data()[0] == 1.0);
    REQUIRE(rows.data()[3] == 4.0);

    warm_queues(tr);
    DataSet ds = tiny_train();
    LossBreakdown lb = tr.total_loss(tr.make_views(ds, first_indices(2), 0));
    REQUIRE(std::isfinite(lb.total.value()));

    ExperimentConfig bad = small_cfg();
    bad.dense_ci = true;
    bad.dense_patches = 3;  // not a perfect square
    REQUIRE_THROWS_AS(Trainer(bad), ConfigError);

    ExperimentConfig coarse = small_cfg();
    coarse.dense_ci = true;
    coarse.dense_patches = 64;  // 8x8 grid, but stage-3 maps are 4x4
    Trainer tc(coarse);
    warm_queues(tc);
    REQUIRE_THROWS_AS(tc.total_loss(tc.make_views(ds, first_indices(2), 0)), ConfigError);
}

TEST_CASE("trainer rejects a mismatched projection width", "[trainer]") {
    ExperimentConfig cfg = small_cfg();
    cfg.proj_dim = 32;
    REQUIRE_THROWS_AS(Trainer(cfg), ConfigError);
}

TEST_CASE("non-finite losses raise a divergence diagnostic", "[trainer]") {
    // Runaway weights alone cannot make this loss non-finite (log-softmax
    // subtracts the max and ReLU zeroes NaN products), so corrupt a head
    // parameter the pooled features multiply into.
    ExperimentConfig cfg = small_cfg();
    Trainer tr(cfg);
    DataSet ds = tiny_train();
    ViewBatch b = tr.make_views(ds, first_indices(4), 0);

    tr.pair().task_head.w.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_MATCHES(tr.train_step(b), DivergenceError,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("non-finite loss at step")));

    ExperimentConfig cfg2 = small_cfg();
    Trainer tr2(cfg2);
    tr2.pair().task_head.b.mutable_data()[2] = std::numeric_limits<double>::infinity();
    REQUIRE_THROWS_AS(tr2.train_step(b), DivergenceError);
}

TEST_CASE("identically configured runs are byte-identical", "[trainer][slow]") {
    const Baseline& base = baseline_run();
    REQUIRE(base.result.complete);
    REQUIRE(base.result.epochs_done == 2);
    REQUIRE(base.result.report.n == 24);
    REQUIRE(base.result.report.real_acc >= 0.0);

    wipe_shared_out();
    RunResult b = run_experiment(run_cfg("out_shared"));
    REQUIRE(b.complete);
    REQUIRE(file_bytes(b.metrics_path) == file_bytes(base.metrics_copy));
    REQUIRE(file_bytes(b.final_ckpt) == file_bytes(base.ckpt_copy));
}

TEST_CASE("interrupting after an epoch and resuming reproduces the run", "[trainer][slow]") {
    const Baseline& base = baseline_run();

    wipe_shared_out();
    ExperimentConfig cfg = run_cfg("out_shared");
    RunResult part = run_experiment(cfg, false, /*stop_after=*/1);
    REQUIRE_FALSE(part.complete);
    REQUIRE(part.epochs_done == 1);
    REQUIRE(std::filesystem::exists(cfg.out_dir + "/ckpt-latest.gckp"));
    REQUIRE_FALSE(std::filesystem::exists(part.final_ckpt));

    RunResult done = run_experiment(cfg, true);
    REQUIRE(done.complete);
    REQUIRE(done.epochs_done == 2);
    REQUIRE(file_bytes(done.metrics_path) == file_bytes(base.metrics_copy));
    REQUIRE(file_bytes(done.final_ckpt) == file_bytes(base.ckpt_copy));
}

TEST_CASE("mislabeled training data is refused by domain", "[trainer][slow]") {
    testutil::TempDir dir("trainer_leak");
    const std::string data = dir.file("data");
    std::filesystem::create_directories(data);
    DatasetSpec spec = DatasetSpec::defaults();
    // real-domain images saved under the training split's name
    save_dataset(data, "syn_train",
                 pack_samples(generate_split(spec, Domain::real_world, 8, 501)));
    save_dataset(data, "real_val",
                 pack_samples(generate_split(spec, Domain::real_world, 8, 502)));
    save_dataset(data, "pretext_val",
                 pack_samples(generate_split(spec, Domain::synthetic, 8, 503)));

    ExperimentConfig cfg = run_cfg("out_leak");
    cfg.data_dir = data;
    REQUIRE_THROWS_AS(run_experiment(cfg), ConfigError);
}

TEST_CASE("metrics log lines parse and account for every step", "[trainer][slow]") {
    const Baseline& base = baseline_run();
    std::ifstream is(base.metrics_copy);
    REQUIRE(is.good());
    std::vector<nlohmann::json> lines;
    std::string line;
    while (std::getline(is, line)) lines.push_back(nlohmann::json::parse(line));

    // 1 config echo + 2 epochs x (4 steps + 1 epoch line) + 1 final line
    REQUIRE(lines.size() == 12);
    REQUIRE(lines[0].contains("config"));
    REQUIRE(lines[0]["config"]["train.seed"] == "11");
    REQUIRE(lines[0]["schema"] == 1);

    std::size_t steps = 0;
    for (const auto& j : lines) {
        REQUIRE(j["schema"] == 1);
        if (j.contains("loss_total")) {
            ++steps;
            double sum = j["loss_task"].get<double>();
            for (double v : j["loss_g_l"].get<std::vector<double>>()) sum += v;
            for (double v : j["loss_ci_l"].get<std::vector<double>>()) sum += v;
            REQUIRE_THAT(j["loss_total"].get<double>(), WithinAbs(sum, 1e-9));
            REQUIRE(j["lr"].get<double>() == 0.01);
        }
    }
    REQUIRE(steps == 8);
    REQUIRE(lines[5].contains("real_acc"));   // epoch 0 summary
    REQUIRE(lines.back().contains("match_rate"));
    REQUIRE(lines.back().contains("cka"));
    REQUIRE(lines.back().contains("ref_head_acc"));
    const double cka = lines.back()["cka"].get<double>();
    REQUIRE(cka >= 0.0);
    REQUIRE(cka <= 1.0);
}

TEST_CASE("checkpoints embed queue state and the run configuration", "[trainer][slow]") {
    const Baseline& base = baseline_run();
    TensorTable t = load_checkpoint(base.ckpt_copy);

    REQUIRE(t.count("queue.global") == 1);
    REQUIRE(t.count("queue.global.meta") == 1);
    for (int l = 1; l <= 3; ++l) REQUIRE(t.count("queue.stage" + std::to_string(l)) == 1);
    REQUIRE(t.at("queue.global").shape() == Shape{16, kProjDim});  // full by run end
    REQUIRE(t.count("online.stage1.conv.w") == 1);
    REQUIRE(t.count("target.stage1.conv.w") == 1);
    REQUIRE(t.count("head.w") == 1);

    const Tensor& meta = t.at("trainstate.meta");
    REQUIRE(meta.data()[0] == 2.0);  // epochs done
    REQUIRE(meta.data()[1] == 8.0);  // global step
    REQUIRE(meta.data()[2] > 0.0);   // metrics byte offset

    const Tensor& blob = t.at("meta.config");
    std::string text(blob.numel(), '\0');
    for (std::size_t i = 0; i < blob.numel(); ++i)
        text[i] = static_cast<char>(blob.data()[i]);
    std::istringstream cfg_is(text);
    ExperimentConfig echoed = read_config(cfg_is);
    REQUIRE(config_to_kv(echoed) == config_to_kv(run_cfg("out_shared")));
}
