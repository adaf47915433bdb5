#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gcisg/tensor.hpp"

namespace gcisg {

// All hyperparameters of one training run. File form is INI-style sections of
// `key = value`; flag form uses dotted keys (`--guidance.pool sap`).
struct ExperimentConfig {
    // data
    std::string data_dir = "data";
    std::string reference_ckpt = "ref.gckp";
    // out
    std::string out_dir = "run";
    // model
    int classes = 6;
    int proj_dim = 64;
    // train
    double lr = 0.001;
    double momentum = 0.9;
    int batch = 32;
    int epochs = 10;
    std::uint64_t seed = 1;
    // loss toggles
    bool use_guidance = true;
    bool use_ci = true;
    // guidance
    std::string pool = "sap";
    std::array<double, 4> lambda_g{0.0, 0.0, 1.0, 1.0};
    // causal invariance
    std::string ci_kind = "relational";
    std::array<double, 4> lambda_ci{0.0, 0.0, 1.0, 1.0};
    double tau = 0.12;
    double tau_bar = 0.04;
    int queue_capacity = 1024;
    double ema_momentum = 0.996;
    bool dense_ci = false;
    int dense_patches = 64;

    void validate() const;
    std::vector<int> active_stages() const {
        std::vector<int> s;
        for (int l = 1; l <= 4; ++l) {
            const double g = use_guidance ? lambda_g[l - 1] : 0.0;
            const double c = use_ci ? lambda_ci[l - 1] : 0.0;
            if (g > 0.0 || c > 0.0) s.push_back(l);
        }
        return s;
    }
    double effective_lambda_g(int stage) const {
        return use_guidance ? lambda_g[stage - 1] : 0.0;
    }
    double effective_lambda_ci(int stage) const {
        return use_ci ? lambda_ci[stage - 1] : 0.0;
    }
};

namespace detail {

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string fmt_list(const std::array<double, 4>& v) {
    std::string s;
    for (std::size_t i = 0; i < 4; ++i) {
        if (i) s += ", ";
        s += fmt_double(v[i]);
    }
    return s;
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': not a number: '" + v + "'");
    }
}

inline long long parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const long long i = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return i;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': not an integer: '" + v + "'");
    }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const std::uint64_t i = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return i;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': not an unsigned integer: '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config key '" + key + "': not a bool: '" + v + "'");
}

inline std::array<double, 4> parse_list4(const std::string& key, const std::string& v) {
    std::array<double, 4> out{};
    std::stringstream ss(v);
    std::string item;
    std::size_t i = 0;
    while (std::getline(ss, item, ',')) {
        if (i >= 4) throw ConfigError("config key '" + key + "': expected 4 values, got more");
        out[i++] = parse_double(key, trim(item));
    }
    if (i != 4)
        throw ConfigError("config key '" + key + "': expected 4 values, got " + std::to_string(i));
    return out;
}

// Shared INI walker: sections of `key = value`, '#'/';' comments. Each parsed
// pair is handed to `set` with its dotted section.key name.
template <typename SetFn>
inline void parse_ini(std::istream& is, SetFn&& set) {
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw ConfigError("config line " + std::to_string(lineno) + ": malformed section");
            section = trim(t.substr(1, t.size() - 2));
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        if (section.empty())
            throw ConfigError("config line " + std::to_string(lineno) + ": key outside a section");
        set(section + "." + key, value);
    }
}

// Inverse of parse_ini for a flat dotted-key table: groups keys by their
// section prefix, emitting each section header once.
inline void write_ini(std::ostream& os, const std::map<std::string, std::string>& kv) {
    std::string section;
    for (const auto& [key, value] : kv) {
        const auto dot = key.find('.');
        const std::string sec = key.substr(0, dot);
        if (sec != section) {
            if (!section.empty()) os << "\n";
            os << "[" << sec << "]\n";
            section = sec;
        }
        os << key.substr(dot + 1) << " = " << value << "\n";
    }
}

}  // namespace detail

// Flat dotted-key view of the config; the canonical exchange form between the
// INI file, CLI overrides, and the JSON echo in metrics logs.
inline std::map<std::string, std::string> config_to_kv(const ExperimentConfig& c) {
    using detail::fmt_double;
    using detail::fmt_list;
    return {
        {"data.dir", c.data_dir},
        {"data.reference", c.reference_ckpt},
        {"out.dir", c.out_dir},
        {"model.classes", std::to_string(c.classes)},
        {"model.proj_dim", std::to_string(c.proj_dim)},
        {"train.lr", fmt_double(c.lr)},
        {"train.momentum", fmt_double(c.momentum)},
        {"train.batch", std::to_string(c.batch)},
        {"train.epochs", std::to_string(c.epochs)},
        {"train.seed", std::to_string(c.seed)},
        {"loss.guidance", c.use_guidance ? "true" : "false"},
        {"loss.ci", c.use_ci ? "true" : "false"},
        {"guidance.pool", c.pool},
        {"guidance.lambda", fmt_list(c.lambda_g)},
        {"ci.kind", c.ci_kind},
        {"ci.lambda", fmt_list(c.lambda_ci)},
        {"ci.tau", fmt_double(c.tau)},
        {"ci.tau_bar", fmt_double(c.tau_bar)},
        {"ci.queue", std::to_string(c.queue_capacity)},
        {"ci.ema", fmt_double(c.ema_momentum)},
        {"ci.dense", c.dense_ci ? "true" : "false"},
        {"ci.patches", std::to_string(c.dense_patches)},
    };
}

inline void config_set(ExperimentConfig& c, const std::string& key, const std::string& value) {
    using namespace detail;
    if (key == "data.dir") c.data_dir = value;
    else if (key == "data.reference") c.reference_ckpt = value;
    else if (key == "out.dir") c.out_dir = value;
    else if (key == "model.classes") c.classes = static_cast<int>(parse_int(key, value));
    else if (key == "model.proj_dim") c.proj_dim = static_cast<int>(parse_int(key, value));
    else if (key == "train.lr") c.lr = parse_double(key, value);
    else if (key == "train.momentum") c.momentum = parse_double(key, value);
    else if (key == "train.batch") c.batch = static_cast<int>(parse_int(key, value));
    else if (key == "train.epochs") c.epochs = static_cast<int>(parse_int(key, value));
    else if (key == "train.seed") c.seed = parse_u64(key, value);
    else if (key == "loss.guidance") c.use_guidance = parse_bool(key, value);
    else if (key == "loss.ci") c.use_ci = parse_bool(key, value);
    else if (key == "guidance.pool") c.pool = value;
    else if (key == "guidance.lambda") c.lambda_g = parse_list4(key, value);
    else if (key == "ci.kind") c.ci_kind = value;
    else if (key == "ci.lambda") c.lambda_ci = parse_list4(key, value);
    else if (key == "ci.tau") c.tau = parse_double(key, value);
    else if (key == "ci.tau_bar") c.tau_bar = parse_double(key, value);
    else if (key == "ci.queue") c.queue_capacity = static_cast<int>(parse_int(key, value));
    else if (key == "ci.ema") c.ema_momentum = parse_double(key, value);
    else if (key == "ci.dense") c.dense_ci = parse_bool(key, value);
    else if (key == "ci.patches") c.dense_patches = static_cast<int>(parse_int(key, value));
    else throw ConfigError("unknown config key '" + key + "'");
}

inline void ExperimentConfig::validate() const {
    if (classes < 2) throw ConfigError("model.classes must be >= 2");
    if (proj_dim < 1) throw ConfigError("model.proj_dim must be >= 1");
    if (lr < 0.0) throw ConfigError("train.lr must be >= 0");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train.momentum must be in [0,1)");
    if (batch < 1) throw ConfigError("train.batch must be >= 1");
    if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
    if (pool != "np" && pool != "gap" && pool != "cp" && pool != "sp" && pool != "sap")
        throw ConfigError("guidance.pool must be one of np|gap|cp|sp|sap, got '" + pool + "'");
    if (ci_kind != "relational" && ci_kind != "infonce")
        throw ConfigError("ci.kind must be relational|infonce, got '" + ci_kind + "'");
    for (double v : lambda_g)
        if (v < 0.0) throw ConfigError("guidance.lambda entries must be >= 0");
    for (double v : lambda_ci)
        if (v < 0.0) throw ConfigError("ci.lambda entries must be >= 0");
    if (tau <= 0.0) throw ConfigError("ci.tau must be > 0");
    if (tau_bar <= 0.0) throw ConfigError("ci.tau_bar must be > 0");
    if (queue_capacity < 2) throw ConfigError("ci.queue must be >= 2");
    if (ema_momentum < 0.0 || ema_momentum > 1.0) throw ConfigError("ci.ema must be in [0,1]");
    if (dense_patches < 1) throw ConfigError("ci.patches must be >= 1");
}

inline void write_config(std::ostream& os, const ExperimentConfig& c) {
    detail::write_ini(os, config_to_kv(c));
}

// Applies file keys on top of whatever `c` already holds, so callers can layer
// defaults, environment fallbacks, a file, and flag overrides in order. Does
// not validate; the caller does once all layers are in.
inline void read_config_into(std::istream& is, ExperimentConfig& c) {
    detail::parse_ini(is, [&](const std::string& key, const std::string& value) {
        config_set(c, key, value);
    });
}

inline ExperimentConfig read_config(std::istream& is) {
    ExperimentConfig c;
    read_config_into(is, c);
    c.validate();
    return c;
}

inline void save_config(const std::string& path, const ExperimentConfig& c) {
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot open config for writing: " + path);
    write_config(os, c);
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config: " + path);
    return read_config(is);
}

}  // namespace gcisg
