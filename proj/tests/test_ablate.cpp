#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gcisg/ablate.hpp"

using namespace gcisg;
using Catch::Matchers::WithinAbs;

namespace {

ExperimentConfig base_cfg() {
    ExperimentConfig c;
    c.out_dir = "sweep";
    c.seed = 5;
    return c;
}

// dotted keys on which two configs disagree
std::set<std::string> changed_keys(const ExperimentConfig& a, const ExperimentConfig& b) {
    const auto ka = config_to_kv(a);
    const auto kb = config_to_kv(b);
    std::set<std::string> out;
    for (const auto& [k, v] : ka)
        if (kb.at(k) != v) out.insert(k);
    return out;
}

}  // namespace

TEST_CASE("cells vary only along the swept axis", "[ablate]") {
    const ExperimentConfig base = base_cfg();
    const std::map<std::string, std::set<std::string>> allowed = {
        {"pooling", {"guidance.pool"}},
        {"temperature", {"ci.tau", "ci.tau_bar"}},
        {"stages", {"guidance.lambda", "ci.lambda"}},
        {"loss", {"loss.guidance", "loss.ci"}},
        {"ci-loss", {"ci.kind"}},
    };
    for (const auto& [axis, keys] : allowed) {
        const auto cells = ablation_cells(base, axis);
        std::set<std::string> labels;
        for (const auto& cell : cells) {
            labels.insert(cell.label);
            for (const std::string& k : changed_keys(base, cell.cfg)) {
                INFO(axis << " / " << cell.label << " changed " << k);
                CHECK(keys.count(k) == 1);
            }
        }
        CHECK(labels.size() == cells.size());
    }
}

TEST_CASE("axis enumerations match the protocol", "[ablate]") {
    const ExperimentConfig base = base_cfg();
    CHECK(ablation_cells(base, "pooling").size() == 5);
    CHECK(ablation_cells(base, "temperature").size() == 3);
    CHECK(ablation_cells(base, "stages").size() == 4);
    CHECK(ablation_cells(base, "loss").size() == 4);
    CHECK(ablation_cells(base, "ci-loss").size() == 2);

    // the default temperature pair must be one of the swept cells
    bool found_default = false;
    for (const auto& cell : ablation_cells(base, "temperature"))
        if (cell.cfg.tau == 0.12 && cell.cfg.tau_bar == 0.04) found_default = true;
    CHECK(found_default);

    const auto loss = ablation_cells(base, "loss");
    CHECK(loss[0].label == "task-only");
    CHECK_FALSE(loss[0].cfg.use_guidance);
    CHECK_FALSE(loss[0].cfg.use_ci);
    CHECK(loss[3].cfg.use_guidance);
    CHECK(loss[3].cfg.use_ci);

    REQUIRE_THROWS_AS(ablation_cells(base, "widths"), ConfigError);
}

TEST_CASE("stage cells re-aim the base weight at the chosen stages", "[ablate]") {
    ExperimentConfig base = base_cfg();
    base.lambda_g = {0.0, 0.0, 0.5, 0.5};
    base.lambda_ci = {0.0, 0.0, 2.0, 2.0};
    const auto cells = ablation_cells(base, "stages");
    REQUIRE(cells[1].label == "stages=1+2");
    CHECK(cells[1].cfg.lambda_g == std::array<double, 4>{0.5, 0.5, 0.0, 0.0});
    CHECK(cells[1].cfg.lambda_ci == std::array<double, 4>{2.0, 2.0, 0.0, 0.0});
    REQUIRE(cells[0].label == "stages=3+4");
    CHECK(cells[0].cfg.lambda_g == base.lambda_g);
}

TEST_CASE("ablation aggregates per-cell means over seeds", "[ablate]") {
    const ExperimentConfig base = base_cfg();
    std::vector<std::pair<std::string, std::uint64_t>> calls;
    CellRunner runner = [&](const ExperimentConfig& cfg) {
        calls.emplace_back(cfg.pool, cfg.seed);
        MetricReport r;
        r.real_acc = 0.2 * static_cast<double>(cfg.seed) + (cfg.pool == "sap" ? 0.1 : 0.0);
        r.match_rate = 0.5;
        r.cka = 0.25;
        r.ref_head_acc = 0.75;
        r.seed = cfg.seed;
        return r;
    };
    const AblationResult res = run_ablation(base, "pooling", {1, 2, 3}, runner);
    REQUIRE(res.cells.size() == 5);
    REQUIRE(calls.size() == 15);

    for (const auto& c : res.cells) {
        CHECK(c.ok == 3);
        CHECK(c.failed == 0);
        const double shift = (c.label == "pool=sap") ? 0.1 : 0.0;
        CHECK_THAT(c.real_acc_mean, WithinAbs(0.4 + shift, 1e-15));
        CHECK_THAT(c.real_acc_sd, WithinAbs(0.2, 1e-15));  // sample sd of {0.2,0.4,0.6}
        CHECK_THAT(c.match_rate_sd, WithinAbs(0.0, 0.0));
        CHECK_THAT(c.cka_mean, WithinAbs(0.25, 1e-15));
    }

    REQUIRE_THROWS_AS(run_ablation(base, "pooling", {}, runner), ConfigError);
}

TEST_CASE("each run lands in its own cell and seed directory", "[ablate]") {
    const ExperimentConfig base = base_cfg();
    std::set<std::string> dirs;
    CellRunner runner = [&](const ExperimentConfig& cfg) {
        dirs.insert(cfg.out_dir);
        return MetricReport{};
    };
    run_ablation(base, "loss", {7, 8}, runner);
    CHECK(dirs.size() == 8);
    CHECK(dirs.count("sweep/task-only/seed7") == 1);
    CHECK(dirs.count("sweep/G/seed8") == 1);     // "+G" slugged
    CHECK(dirs.count("sweep/both/seed7") == 1);  // "+both" slugged
}

TEST_CASE("a failing cell is recorded and the sweep continues", "[ablate]") {
    const ExperimentConfig base = base_cfg();
    CellRunner runner = [](const ExperimentConfig& cfg) {
        if (cfg.ci_kind == "infonce" && cfg.seed == 2)
            throw DivergenceError("loss went non-finite");
        MetricReport r;
        r.real_acc = 0.5;
        return r;
    };
    const AblationResult res = run_ablation(base, "ci-loss", {1, 2, 3}, runner);
    REQUIRE(res.cells.size() == 2);
    CHECK(res.cells[0].ok == 3);
    CHECK(res.cells[0].errors.empty());
    CHECK(res.cells[1].ok == 2);
    CHECK(res.cells[1].failed == 1);
    REQUIRE(res.cells[1].errors.size() == 1);
    CHECK(res.cells[1].errors[0].find("seed 2") != std::string::npos);
    CHECK(res.cells[1].errors[0].find("non-finite") != std::string::npos);
    CHECK_THAT(res.cells[1].real_acc_mean, WithinAbs(0.5, 1e-15));
}

TEST_CASE("ablation csv has a header and one quoted row per cell", "[ablate]") {
    const ExperimentConfig base = base_cfg();
    CellRunner runner = [](const ExperimentConfig& cfg) {
        if (cfg.tau_bar == 0.12) throw ConfigError("bad, bad cell");
        MetricReport r;
        r.real_acc = 0.625;
        return r;
    };
    const AblationResult res = run_ablation(base, "temperature", {1, 2}, runner);
    std::ostringstream os;
    write_ablation_csv(os, res);

    std::istringstream is(os.str());
    std::string line;
    REQUIRE(std::getline(is, line));
    CHECK(line ==
          "schema,axis,cell,ok,failed,real_acc_mean,real_acc_sd,match_rate_mean,match_rate_sd,"
          "cka_mean,cka_sd,ref_head_acc_mean,ref_head_acc_sd,errors");
    std::vector<std::string> rows;
    while (std::getline(is, line)) rows.push_back(line);
    REQUIRE(rows.size() == 3);
    for (const auto& r : rows) CHECK(r.rfind("1,temperature,", 0) == 0);
    // labels contain a comma, so they must arrive quoted
    CHECK(rows[0].find("\"tau=0.12,tau_bar=0.04\"") != std::string::npos);
    CHECK(rows[0].find(",0.625,") != std::string::npos);
    // the failing cell quotes its error list (the message itself has a comma)
    CHECK(rows[2].find("\"seed 1: bad, bad cell; seed 2: bad, bad cell\"") != std::string::npos);
    CHECK(rows[2].find("0,2") != std::string::npos);
}
