#pragma once

#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <functional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "gcisg/config.hpp"
#include "gcisg/trainer.hpp"

namespace gcisg {

// One grid point of a sweep: a label and the full config it runs with. Cells
// differ from the base config only along the swept axis.
struct AblationCell {
    std::string label;
    ExperimentConfig cfg;
};

namespace detail {

inline std::string short_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

// filesystem-safe cell directory name
inline std::string slug(const std::string& label) {
    std::string s;
    for (char ch : label) {
        if (std::isalnum(static_cast<unsigned char>(ch)) || ch == '.' || ch == '_' || ch == '-')
            s += ch;
        else
            s += '-';
    }
    while (!s.empty() && s.front() == '-') s.erase(s.begin());
    while (!s.empty() && s.back() == '-') s.pop_back();
    return s.empty() ? "cell" : s;
}

inline std::string csv_quote(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char ch : s) {
        if (ch == '"') q += '"';
        q += ch;
    }
    q += '"';
    return q;
}

inline std::array<double, 4> stage_weights(const std::array<double, 4>& base,
                                           const std::vector<int>& stages) {
    double w = 0.0;
    for (double v : base) w = std::max(w, v);
    if (w == 0.0) w = 1.0;
    std::array<double, 4> out{};
    for (int l : stages) out[static_cast<std::size_t>(l - 1)] = w;
    return out;
}

}  // namespace detail

// Expands one swept axis into its cells. The loss axis keeps the spec'd
// toggle names; the stage axis re-aims both lambda vectors at the chosen
// stages, reusing the base weight magnitude.
inline std::vector<AblationCell> ablation_cells(const ExperimentConfig& base,
                                                const std::string& axis) {
    std::vector<AblationCell> cells;
    if (axis == "pooling") {
        for (const char* p : {"np", "gap", "cp", "sp", "sap"}) {
            ExperimentConfig c = base;
            c.pool = p;
            cells.push_back({std::string("pool=") + p, c});
        }
    } else if (axis == "temperature") {
        const std::array<std::pair<double, double>, 3> pairs{
            {{0.12, 0.04}, {0.12, 0.08}, {0.12, 0.12}}};
        for (const auto& [tau, tau_bar] : pairs) {
            ExperimentConfig c = base;
            c.tau = tau;
            c.tau_bar = tau_bar;
            cells.push_back({"tau=" + detail::short_num(tau) +
                                 ",tau_bar=" + detail::short_num(tau_bar),
                             c});
        }
    } else if (axis == "stages") {
        const std::vector<std::pair<std::string, std::vector<int>>> sets{
            {"stages=3+4", {3, 4}},
            {"stages=1+2", {1, 2}},
            {"stages=2+3", {2, 3}},
            {"stages=1+2+3+4", {1, 2, 3, 4}},
        };
        for (const auto& [label, stages] : sets) {
            ExperimentConfig c = base;
            c.lambda_g = detail::stage_weights(base.lambda_g, stages);
            c.lambda_ci = detail::stage_weights(base.lambda_ci, stages);
            cells.push_back({label, c});
        }
    } else if (axis == "loss") {
        const std::vector<std::pair<std::string, std::pair<bool, bool>>> toggles{
            {"task-only", {false, false}},
            {"+G", {true, false}},
            {"+CI", {false, true}},
            {"+both", {true, true}},
        };
        for (const auto& [label, gc] : toggles) {
            ExperimentConfig c = base;
            c.use_guidance = gc.first;
            c.use_ci = gc.second;
            cells.push_back({label, c});
        }
    } else if (axis == "ci-loss") {
        for (const char* kind : {"relational", "infonce"}) {
            ExperimentConfig c = base;
            c.ci_kind = kind;
            cells.push_back({std::string("ci=") + kind, c});
        }
    } else {
        throw ConfigError("unknown ablation axis '" + axis +
                          "' (pooling|temperature|stages|loss|ci-loss)");
    }
    return cells;
}

struct CellSummary {
    std::string label;
    int ok = 0;
    int failed = 0;
    double real_acc_mean = 0.0, real_acc_sd = 0.0;
    double match_rate_mean = 0.0, match_rate_sd = 0.0;
    double cka_mean = 0.0, cka_sd = 0.0;
    double ref_head_acc_mean = 0.0, ref_head_acc_sd = 0.0;
    std::vector<std::string> errors;
};

struct AblationResult {
    std::string axis;
    std::vector<CellSummary> cells;
};

using CellRunner = std::function<MetricReport(const ExperimentConfig&)>;

inline MetricReport default_cell_runner(const ExperimentConfig& cfg) {
    return run_experiment(cfg).report;
}

namespace detail {

inline void mean_sd(const std::vector<double>& v, double& mean, double& sd) {
    if (v.empty()) {
        mean = sd = std::numeric_limits<double>::quiet_NaN();
        return;
    }
    mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    sd = 0.0;
    if (v.size() < 2) return;
    for (double x : v) sd += (x - mean) * (x - mean);
    sd = std::sqrt(sd / static_cast<double>(v.size() - 1));  // sample sd across seeds
}

}  // namespace detail

// Runs every cell x seed; a failing run is recorded on its cell and the sweep
// continues. Each run writes under <base out.dir>/<cell slug>/seed<k>.
inline AblationResult run_ablation(const ExperimentConfig& base, const std::string& axis,
                                   const std::vector<std::uint64_t>& seeds,
                                   const CellRunner& runner = default_cell_runner) {
    if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
    AblationResult result;
    result.axis = axis;
    for (const AblationCell& cell : ablation_cells(base, axis)) {
        CellSummary s;
        s.label = cell.label;
        std::vector<double> acc, match, cka, ref;
        for (std::uint64_t seed : seeds) {
            ExperimentConfig cfg = cell.cfg;
            cfg.seed = seed;
            cfg.out_dir = base.out_dir + "/" + detail::slug(cell.label) + "/seed" +
                          std::to_string(seed);
            try {
                const MetricReport r = runner(cfg);
                acc.push_back(r.real_acc);
                match.push_back(r.match_rate);
                cka.push_back(r.cka);
                ref.push_back(r.ref_head_acc);
                ++s.ok;
            } catch (const std::exception& e) {
                ++s.failed;
                s.errors.push_back("seed " + std::to_string(seed) + ": " + e.what());
            }
        }
        detail::mean_sd(acc, s.real_acc_mean, s.real_acc_sd);
        detail::mean_sd(match, s.match_rate_mean, s.match_rate_sd);
        detail::mean_sd(cka, s.cka_mean, s.cka_sd);
        detail::mean_sd(ref, s.ref_head_acc_mean, s.ref_head_acc_sd);
        result.cells.push_back(std::move(s));
    }
    return result;
}

inline void write_ablation_csv(std::ostream& os, const AblationResult& r) {
    os << "schema,axis,cell,ok,failed,real_acc_mean,real_acc_sd,match_rate_mean,match_rate_sd,"
          "cka_mean,cka_sd,ref_head_acc_mean,ref_head_acc_sd,errors\n";
    for (const CellSummary& c : r.cells) {
        std::string errs;
        for (std::size_t i = 0; i < c.errors.size(); ++i) {
            if (i) errs += "; ";
            errs += c.errors[i];
        }
        os << 1 << ',' << detail::csv_quote(r.axis) << ',' << detail::csv_quote(c.label) << ','
           << c.ok << ',' << c.failed << ',' << detail::fmt_double(c.real_acc_mean) << ','
           << detail::fmt_double(c.real_acc_sd) << ',' << detail::fmt_double(c.match_rate_mean)
           << ',' << detail::fmt_double(c.match_rate_sd) << ',' << detail::fmt_double(c.cka_mean)
           << ',' << detail::fmt_double(c.cka_sd) << ','
           << detail::fmt_double(c.ref_head_acc_mean) << ','
           << detail::fmt_double(c.ref_head_acc_sd) << ',' << detail::csv_quote(errs) << '\n';
    }
}

inline void save_ablation_csv(const std::string& path, const AblationResult& r) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open ablation csv for writing: " + path);
    write_ablation_csv(os, r);
    os.flush();
    if (!os) throw IoError("failed writing ablation csv: " + path);
}

}  // namespace gcisg
