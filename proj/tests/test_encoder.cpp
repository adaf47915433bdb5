#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "gcisg/encoder.hpp"
#include "gcisg/rng.hpp"
#include "test_util.hpp"

using namespace gcisg;
using Catch::Matchers::WithinAbs;

namespace {

Tensor random_images(std::size_t n, std::uint64_t seed) {
    auto eng = rng::engine(seed);
    std::vector<double> v(n * 3 * 32 * 32);
    for (auto& x : v) x = rng::uniform(eng, 0.0, 1.0);
    return Tensor::from_data({n, 3, 32, 32}, std::move(v));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

bool params_equal(const NamedParams& a, const NamedParams& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].second.shape() != b[i].second.shape()) return false;
        for (std::size_t j = 0; j < a[i].second.numel(); ++j)
            if (a[i].second.data()[j] != b[i].second.data()[j]) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("stage maps halve spatially and widen in channels", "[encoder]") {
    EncoderNet enc;
    enc.init(3, false);
    StagedFeatures f = enc.forward_staged(random_images(2, 1));
    REQUIRE(f.stage[0].shape() == Shape{2, 16, 16, 16});
    REQUIRE(f.stage[1].shape() == Shape{2, 32, 8, 8});
    REQUIRE(f.stage[2].shape() == Shape{2, 64, 4, 4});
    REQUIRE(f.stage[3].shape() == Shape{2, 128, 2, 2});
    REQUIRE(f.pooled.shape() == Shape{2, 128});
    REQUIRE_THROWS_AS(enc.forward_staged(Tensor::zeros({2, 1, 32, 32})), ShapeError);
}

TEST_CASE("zero images produce zero features under zero-bias init", "[encoder]") {
    EncoderNet enc;
    enc.init(7, false);
    StagedFeatures f = enc.forward_staged(Tensor::zeros({1, 3, 32, 32}));
    for (const Tensor& s : f.stage)
        for (double v : s.data()) REQUIRE(v == 0.0);
    for (double v : f.pooled.data()) REQUIRE(v == 0.0);
}

TEST_CASE("initialization is deterministic in the seed", "[encoder]") {
    EncoderNet a, b, c;
    a.init(5, false);
    b.init(5, false);
    c.init(6, false);
    REQUIRE(params_equal(a.named("e"), b.named("e")));
    REQUIRE_FALSE(params_equal(a.named("e"), c.named("e")));
}

TEST_CASE("projector outputs unit rows after normalization", "[encoder]") {
    EncoderNet enc;
    enc.init(9, false);
    StagedFeatures f = enc.forward_staged(random_images(4, 2));
    for (int stage = 1; stage <= 4; ++stage) {
        Tensor rows = global_avg_pool(f.stage[static_cast<std::size_t>(stage - 1)]);
        Tensor z = enc.project_normalize(stage, rows);
        REQUIRE(z.shape() == Shape{4, kProjDim});
        for (std::size_t r = 0; r < 4; ++r) {
            double sq = 0.0;
            for (std::size_t i = 0; i < kProjDim; ++i)
                sq += z.at({r, i}) * z.at({r, i});
            REQUIRE_THAT(std::sqrt(sq), WithinAbs(1.0, 1e-12));
        }
    }
    REQUIRE_THROWS_AS(enc.project(0, Tensor::zeros({1, 16})), ConfigError);
    REQUIRE_THROWS_AS(enc.project(5, Tensor::zeros({1, 128})), ConfigError);
}

TEST_CASE("normalized projections ignore final-layer rescaling", "[encoder]") {
    EncoderNet enc;
    enc.init(11, false);
    Tensor rows = global_avg_pool(enc.forward_staged(random_images(3, 3)).stage[3]);
    Tensor before = enc.project_normalize(4, rows);
    for (auto& v : enc.projs[3].fc2.w.mutable_data()) v *= 2.5;
    for (auto& v : enc.projs[3].fc2.b.mutable_data()) v *= 2.5;
    Tensor after = enc.project_normalize(4, rows);
    REQUIRE(max_abs_diff(before, after) < 1e-12);
}

TEST_CASE("named parameter lists cover the whole network", "[encoder]") {
    EncoderNet enc;
    enc.init(13, true);
    NamedParams p = enc.named("online");
    REQUIRE(p.size() == 24);  // 4 stages x (conv w/b + two projector layers w/b)
    REQUIRE(p[0].first == "online.stage1.conv.w");
    std::size_t total = 0;
    for (const auto& [name, t] : p) {
        REQUIRE(t.requires_grad());
        total += t.numel();
    }
    REQUIRE(total > 100000);  // conv stack plus projectors

    ModelPair pair;
    pair.init(17, 6);
    REQUIRE(pair.trainable().size() == 26);  // encoder + task head
    REQUIRE(pair.reference_params().size() == 26);
}

TEST_CASE("parameter tables round trip through a checkpoint", "[encoder]") {
    testutil::TempDir dir("encoder_ckpt");
    EncoderNet a, b;
    a.init(19, true);
    b.init(23, true);
    TensorTable table;
    params_to_table(a.named("e"), table);
    save_checkpoint(dir.file("enc.gckp"), table);
    params_from_table(load_checkpoint(dir.file("enc.gckp")), b.named("e"));
    REQUIRE(params_equal(a.named("e"), b.named("e")));

    TensorTable incomplete;
    incomplete["e.stage1.conv.w"] = a.named("e")[0].second.detach();
    REQUIRE_THROWS_AS(params_from_table(incomplete, b.named("e")), IoError);
}

TEST_CASE("model pair starts with target equal to online and frozen sides", "[encoder]") {
    ModelPair pair;
    pair.init(29, 6);
    init_target_from_online(pair);
    REQUIRE(params_equal(pair.online.named("x"), pair.target.named("x")));
    REQUIRE_FALSE(params_equal(pair.online.named("x"), pair.reference.named("x")));

    for (const auto& [name, t] : pair.online.named("x")) REQUIRE(t.requires_grad());
    for (const auto& [name, t] : pair.target.named("x")) REQUIRE_FALSE(t.requires_grad());
    for (const auto& [name, t] : pair.reference_params()) REQUIRE_FALSE(t.requires_grad());
    REQUIRE(pair.task_head.w.requires_grad());
}

TEST_CASE("ema update follows the convex mixing law", "[encoder]") {
    ModelPair pair;
    pair.init(31, 6);
    init_target_from_online(pair);

    // push online away from target
    for (auto& [name, t] : pair.online.named("x"))
        for (auto& v : t.mutable_data()) v += 0.5;

    NamedParams before = pair.target.named("x");
    std::vector<std::vector<double>> old_target;
    for (auto& [name, t] : before)
        old_target.emplace_back(t.data().begin(), t.data().end());

    ema_update(pair, 0.996);
    NamedParams on = pair.online.named("x");
    NamedParams tg = pair.target.named("x");
    for (std::size_t i = 0; i < tg.size(); ++i)
        for (std::size_t j = 0; j < tg[i].second.numel(); ++j) {
            const double expect =
                0.996 * old_target[i][j] + 0.004 * on[i].second.data()[j];
            REQUIRE_THAT(tg[i].second.data()[j], WithinAbs(expect, 1e-15));
            // the per-step drift is exactly (1 - m) times the disagreement
            REQUIRE_THAT(std::abs(tg[i].second.data()[j] - old_target[i][j]),
                         WithinAbs(0.004 * std::abs(on[i].second.data()[j] - old_target[i][j]),
                                   1e-15));
        }
}

TEST_CASE("ema endpoints freeze or copy the online weights", "[encoder]") {
    ModelPair pair;
    pair.init(37, 6);
    init_target_from_online(pair);
    for (auto& [name, t] : pair.online.named("x"))
        for (auto& v : t.mutable_data()) v += 1.0;

    std::vector<double> frozen(pair.target.stages[0].w.data().begin(),
                               pair.target.stages[0].w.data().end());
    ema_update(pair, 1.0);  // m = 1: target never moves
    for (std::size_t i = 0; i < frozen.size(); ++i)
        REQUIRE(pair.target.stages[0].w.data()[i] == frozen[i]);

    ema_update(pair, 0.0);  // m = 0: target becomes the online copy
    REQUIRE(params_equal(pair.online.named("x"), pair.target.named("x")));

    REQUIRE_THROWS_AS(ema_update(pair, -0.1), ConfigError);
    REQUIRE_THROWS_AS(ema_update(pair, 1.1), ConfigError);
}

TEST_CASE("argmax_row picks the largest logit per row", "[encoder]") {
    Tensor rows = Tensor::from_data({2, 3}, {0.1, 0.9, 0.3, 2.0, -1.0, 1.5});
    REQUIRE(argmax_row(rows, 0) == 1);
    REQUIRE(argmax_row(rows, 1) == 0);
}

TEST_CASE("reference pretraining learns the pretext task on clean data", "[encoder][slow]") {
    DatasetSpec spec = DatasetSpec::defaults();
    spec.n_classes = kFamilyCount;
    DataSet train = pack_samples(generate_split(spec, Domain::synthetic, 1440, 91));
    DataSet val = pack_samples(generate_split(spec, Domain::synthetic, 240, 92));

    ModelPair pair;
    pair.init(41, 6);
    PretrainResult res = pretrain_reference(pair, train, val, 14, 0.04, 32, 7);
    REQUIRE(res.epochs_run == 14);
    REQUIRE(res.val_accuracy >= 0.70);

    // reload gives bit-identical reference logits
    testutil::TempDir dir("encoder_ref");
    save_reference(dir.file("ref.gckp"), pair);
    ModelPair other;
    other.init(43, 6);
    load_reference(dir.file("ref.gckp"), other);

    Tensor probe = slice(val.images, 0, 0, 8);
    Tensor la = pair.ref_head.forward(pair.reference.forward_staged(probe).pooled);
    Tensor lb = other.ref_head.forward(other.reference.forward_staged(probe).pooled);
    REQUIRE(max_abs_diff(la, lb) == 0.0);
}
