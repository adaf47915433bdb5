// Single entry point for the GCISG laboratory: data generation, reference
// pretraining, training, evaluation, ablation sweeps, and gradient checks.
// Exit codes: 0 success, 2 config error, 3 divergence, 4 gradcheck failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gcisg/ablate.hpp"
#include "gcisg/config.hpp"
#include "gcisg/datagen.hpp"
#include "gcisg/encoder.hpp"
#include "gcisg/gradcheck_suite.hpp"
#include "gcisg/metrics.hpp"
#include "gcisg/trainer.hpp"

namespace fs = std::filesystem;
using namespace gcisg;

namespace {

std::uint64_t env_seed_or(std::uint64_t fallback) {
    if (const char* env = std::getenv("GCISG_SEED"))
        return gcisg::detail::parse_u64("GCISG_SEED", env);
    return fallback;
}

// Layered run config: defaults < GCISG_SEED < --config file < dotted-key flags.
struct ConfigFlags {
    std::string config_file;
    std::map<std::string, std::string> store;
    std::map<std::string, CLI::Option*> opts;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config_file, "run config file (INI)");
        for (const auto& [key, value] : config_to_kv(ExperimentConfig{})) store[key];
        for (auto& [key, slot] : store)
            opts[key] = cmd->add_option("--" + key, slot, "override config key " + key);
    }

    ExperimentConfig assemble() const {
        ExperimentConfig c;
        c.seed = env_seed_or(c.seed);
        if (!config_file.empty()) {
            std::ifstream is(config_file);
            if (!is) throw ConfigError("cannot open config: " + config_file);
            read_config_into(is, c);
        }
        for (const auto& [key, opt] : opts)
            if (opt->count() > 0) config_set(c, key, store.at(key));
        c.validate();
        return c;
    }
};

void echo_config(const std::string& command, const ExperimentConfig& cfg) {
    std::cout << "# gcisg " << command << "\n";
    write_config(std::cout, cfg);
    std::cout << std::flush;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
    std::vector<std::uint64_t> seeds;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ','))
        seeds.push_back(gcisg::detail::parse_u64("--seeds", gcisg::detail::trim(item)));
    if (seeds.empty()) throw ConfigError("--seeds must list at least one seed");
    return seeds;
}

struct GenDataArgs {
    std::string spec_file;
    std::string out;
    int train_n = 5000;
    int val_n = 1000;
    int pretext_train_n = 2880;
    int pretext_val_n = 480;
    std::uint64_t seed = 1;
    CLI::Option* seed_opt = nullptr;
};

void write_split_meta(const std::string& path, const std::string& name, Domain domain,
                      std::size_t n, std::uint64_t split_seed, const DatasetSpec& spec) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write split metadata: " + path);
    os << "# gcisg dataset split\n"
       << "split = " << name << "\n"
       << "domain = " << (domain == Domain::synthetic ? "synthetic" : "real") << "\n"
       << "n = " << n << "\n"
       << "seed = " << split_seed << "\n\n";
    write_dataset_spec(os, spec);
}

int cmd_gen_data(const GenDataArgs& a) {
    DatasetSpec spec = a.spec_file.empty() ? DatasetSpec::defaults()
                                           : load_dataset_spec(a.spec_file);
    spec.master_seed = a.seed_opt->count() > 0 ? a.seed : env_seed_or(spec.master_seed);
    validate_spec(spec);
    if (a.train_n < 1 || a.val_n < 1 || a.pretext_train_n < 1 || a.pretext_val_n < 1)
        throw ConfigError("split sizes must be >= 1");

    std::cout << "# gcisg gen-data\n";
    write_dataset_spec(std::cout, spec);
    std::cout << "\n[splits]\nsyn_train = " << a.train_n << "\nreal_val = " << a.val_n
              << "\npretext_train = " << a.pretext_train_n
              << "\npretext_val = " << a.pretext_val_n << "\n"
              << std::flush;

    DatasetSpec pretext = spec;
    pretext.n_classes = kFamilyCount;
    struct SplitPlan {
        const char* name;
        const DatasetSpec& spec;
        Domain domain;
        int n;
    };
    const SplitPlan plan[] = {
        {"syn_train", spec, Domain::synthetic, a.train_n},
        {"real_val", spec, Domain::real_world, a.val_n},
        {"pretext_train", pretext, Domain::synthetic, a.pretext_train_n},
        {"pretext_val", pretext, Domain::synthetic, a.pretext_val_n},
    };

    fs::create_directories(a.out);
    std::uint64_t tag = 0;
    for (const SplitPlan& p : plan) {
        const std::uint64_t split_seed = rng::mix({spec.master_seed, 0xda7au, tag++});
        const DataSet ds =
            pack_samples(generate_split(p.spec, p.domain, static_cast<std::size_t>(p.n),
                                        split_seed));
        save_dataset(a.out, p.name, ds);
        write_split_meta(a.out + "/" + p.name + "_meta.txt", p.name, p.domain, ds.size(),
                         split_seed, p.spec);
        std::cout << "wrote " << p.name << ": " << ds.size() << " samples\n";
    }
    return 0;
}

struct PretrainArgs {
    std::string data;
    std::string out = "ref.gckp";
    int epochs = 24;
    double lr = 0.02;
    int batch = 32;
    int classes = 6;
    std::uint64_t seed = 1;
    CLI::Option* seed_opt = nullptr;
};

int cmd_pretrain_ref(const PretrainArgs& a) {
    const std::uint64_t seed = a.seed_opt->count() > 0 ? a.seed : env_seed_or(a.seed);
    if (a.epochs < 1 || a.batch < 1 || a.lr <= 0.0 || a.classes < 2)
        throw ConfigError("pretrain-ref: epochs/batch >= 1, lr > 0, classes >= 2");
    std::cout << "# gcisg pretrain-ref\n[pretrain]\ndata = " << a.data << "\nout = " << a.out
              << "\nepochs = " << a.epochs << "\nlr = " << gcisg::detail::fmt_double(a.lr)
              << "\nbatch = " << a.batch << "\nclasses = " << a.classes << "\nseed = " << seed
              << "\n"
              << std::flush;

    const DataSet train = load_dataset(a.data, "pretext_train");
    const DataSet val = load_dataset(a.data, "pretext_val");
    ModelPair pair;
    pair.init(seed, a.classes);
    const PretrainResult res = pretrain_reference(pair, train, val, a.epochs, a.lr,
                                                  static_cast<std::size_t>(a.batch), seed);
    save_reference(a.out, pair);
    std::cout << "pretext val accuracy " << res.val_accuracy << " after " << res.epochs_run
              << " epochs; reference saved to " << a.out << "\n";
    return 0;
}

int cmd_train(const ConfigFlags& flags, bool resume, int stop_after) {
    const ExperimentConfig cfg = flags.assemble();
    echo_config("train", cfg);
    const RunResult res = run_experiment(cfg, resume, stop_after);
    if (!res.complete) {
        std::cout << "stopped after " << res.epochs_done
                  << " epochs; resume with --resume\n";
        return 0;
    }
    std::cout << "real_acc " << res.report.real_acc << "  match_rate " << res.report.match_rate
              << "  cka " << res.report.cka << "  ref_head_acc " << res.report.ref_head_acc
              << "\nmetrics " << res.metrics_path << "\ncheckpoint " << res.final_ckpt << "\n";
    return 0;
}

struct EvalArgs {
    std::string ckpt;
    std::string data;
    std::string out;
    std::string ref_override;
    std::string dump_dir;
};

int cmd_eval(const EvalArgs& a) {
    const TensorTable table = load_checkpoint(a.ckpt);
    const auto it = table.find("meta.config");
    if (it == table.end()) throw IoError("checkpoint lacks meta.config: " + a.ckpt);
    std::string blob;
    for (double v : it->second.data()) blob += static_cast<char>(v);
    std::istringstream iss(blob);
    ExperimentConfig cfg = read_config(iss);
    cfg.data_dir = a.data;
    if (!a.ref_override.empty()) cfg.reference_ckpt = a.ref_override;
    echo_config("eval", cfg);

    Trainer tr(cfg);
    tr.load(a.ckpt);
    load_reference(cfg.reference_ckpt, tr.pair());
    const DataSet val = load_dataset(a.data, "real_val");
    const DataSet pretext_val = load_dataset(a.data, "pretext_val");

    MetricReport rep;
    rep.n = val.size();
    rep.seed = cfg.seed;
    rep.real_acc = real_accuracy_of(tr.pair(), val);
    rep.match_rate = match_rate_of(tr.pair(), val, rng::mix({cfg.seed, 0xe7a1u}));
    rep.cka = cka_to_reference(tr.pair(), val);
    rep.ref_head_acc = ref_head_accuracy_of(tr.pair(), pretext_val);

    nlohmann::json j;
    j["schema"] = 1;
    j["ckpt"] = a.ckpt;
    j["data"] = a.data;
    j["n"] = rep.n;
    j["seed"] = rep.seed;
    j["real_acc"] = rep.real_acc;
    j["match_rate"] = rep.match_rate;
    j["cka"] = rep.cka;
    j["ref_head_acc"] = rep.ref_head_acc;
    std::ofstream os(a.out);
    if (!os) throw IoError("cannot write report: " + a.out);
    os << j.dump(2) << "\n";

    if (!a.dump_dir.empty()) {
        fs::create_directories(a.dump_dir);
        save_tensor(a.dump_dir + "/features_online.gtsr",
                    pooled_features(tr.pair().online, val.images));
        save_tensor(a.dump_dir + "/features_reference.gtsr",
                    pooled_features(tr.pair().reference, val.images));
        std::cout << "feature dumps in " << a.dump_dir << "\n";
    }
    std::cout << "real_acc " << rep.real_acc << "  match_rate " << rep.match_rate << "  cka "
              << rep.cka << "  ref_head_acc " << rep.ref_head_acc << "\nreport " << a.out
              << "\n";
    return 0;
}

int cmd_ablate(const ConfigFlags& flags, const std::string& axis, const std::string& seeds_text,
               std::string out_csv) {
    const ExperimentConfig base = flags.assemble();
    const std::vector<std::uint64_t> seeds = parse_seed_list(seeds_text);
    echo_config("ablate", base);
    std::cout << "axis = " << axis << "\nseeds =";
    for (std::uint64_t s : seeds) std::cout << " " << s;
    std::cout << "\n" << std::flush;

    const AblationResult res = run_ablation(base, axis, seeds);
    if (out_csv.empty()) out_csv = base.out_dir + "/ablation.csv";
    fs::create_directories(fs::path(out_csv).parent_path().empty()
                               ? fs::path(".")
                               : fs::path(out_csv).parent_path());
    save_ablation_csv(out_csv, res);

    int failed = 0;
    for (const CellSummary& c : res.cells) {
        std::cout << c.label << ": real_acc " << c.real_acc_mean << " +- " << c.real_acc_sd
                  << " (ok " << c.ok << ", failed " << c.failed << ")\n";
        failed += c.failed;
    }
    std::cout << "csv " << out_csv << "\n";
    if (failed > 0) std::cout << failed << " cell run(s) failed; see csv errors column\n";
    return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
    std::cout << "# gcisg gradcheck\nseed = " << seed << "\n";
    const auto rep = gradcheck::run_targets(gradcheck::default_targets(seed));
    for (const auto& r : rep.results)
        std::cout << (r.pass ? "pass" : "FAIL") << "  " << r.name << "  max_rel_err "
                  << r.max_rel_err << "  tol " << r.tol << "\n";
    std::cout << rep.results.size() << " targets in " << rep.seconds << " s\n";
    return rep.all_pass() ? 0 : 4;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"GCISG laboratory: guided causal-invariant synthetic-to-real training"};
    app.require_subcommand(1);
    std::string workdir;
    app.add_option("--workdir", workdir, "resolve all paths relative to this directory");

    auto* gen = app.add_subcommand("gen-data", "generate task and pretext dataset splits");
    GenDataArgs gd;
    gen->add_option("--spec", gd.spec_file, "dataset spec file (INI)");
    gen->add_option("--out", gd.out, "output directory")->required();
    gen->add_option("--train-n", gd.train_n, "synthetic training samples");
    gen->add_option("--val-n", gd.val_n, "real validation samples");
    gen->add_option("--pretext-train-n", gd.pretext_train_n, "pretext training samples");
    gen->add_option("--pretext-val-n", gd.pretext_val_n, "pretext validation samples");
    gd.seed_opt = gen->add_option("--seed", gd.seed, "master seed (overrides spec and env)");

    auto* pre = app.add_subcommand("pretrain-ref", "pretrain the frozen reference encoder");
    PretrainArgs pa;
    pre->add_option("--data", pa.data, "dataset directory with pretext splits")->required();
    pre->add_option("--out", pa.out, "reference checkpoint path");
    pre->add_option("--epochs", pa.epochs, "pretraining epochs");
    pre->add_option("--lr", pa.lr, "learning rate");
    pre->add_option("--batch", pa.batch, "batch size");
    pre->add_option("--classes", pa.classes, "task classes for the paired heads");
    pa.seed_opt = pre->add_option("--seed", pa.seed, "init seed");

    auto* train = app.add_subcommand("train", "run one training experiment");
    ConfigFlags train_flags;
    train_flags.attach(train);
    bool resume = false;
    int stop_after = -1;
    train->add_flag("--resume", resume, "resume from ckpt-latest in the output directory");
    train->add_option("--stop-after", stop_after, "stop once this many epochs are complete");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    EvalArgs ea;
    ev->add_option("--ckpt", ea.ckpt, "checkpoint file")->required();
    ev->add_option("--data", ea.data, "dataset directory")->required();
    ev->add_option("--out", ea.out, "report JSON path")->required();
    ev->add_option("--ref", ea.ref_override, "override the reference checkpoint path");
    ev->add_option("--dump-features", ea.dump_dir, "write pooled feature GTSR dumps here");

    auto* ab = app.add_subcommand("ablate", "sweep one axis and summarize to CSV");
    ConfigFlags ablate_flags;
    ablate_flags.attach(ab);
    std::string axis, seeds_text = "1,2,3", out_csv;
    ab->add_option("--axis", axis, "pooling|temperature|stages|loss|ci-loss")->required();
    ab->add_option("--seeds", seeds_text, "comma-separated seed list");
    ab->add_option("--out", out_csv, "summary CSV path (default <out.dir>/ablation.csv)");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    std::uint64_t gc_seed = 1234;
    CLI::Option* gc_seed_opt = gc->add_option("--seed", gc_seed, "suite seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (!workdir.empty()) fs::current_path(workdir);
        if (app.got_subcommand(gen)) return cmd_gen_data(gd);
        if (app.got_subcommand(pre)) return cmd_pretrain_ref(pa);
        if (app.got_subcommand(train)) return cmd_train(train_flags, resume, stop_after);
        if (app.got_subcommand(ev)) return cmd_eval(ea);
        if (app.got_subcommand(ab)) return cmd_ablate(ablate_flags, axis, seeds_text, out_csv);
        if (app.got_subcommand(gc))
            return cmd_gradcheck(gc_seed_opt->count() > 0 ? gc_seed : env_seed_or(gc_seed));
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}
