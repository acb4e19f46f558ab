#include "cli/config.hpp"

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

#include "tsae/io/binary.hpp"

namespace fs = std::filesystem;

namespace tsae::cli {
namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(v);
    while (std::getline(is, cur, ',')) {
        cur = trim(cur);
        if (!cur.empty()) out.push_back(cur);
    }
    return out;
}

double to_double(const std::string& v) {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("not a number: '" + v + "'");
    return x;
}

std::size_t to_size(const std::string& v) {
    if (v.empty() || v[0] == '-') throw std::invalid_argument("not a non-negative integer: '" + v + "'");
    std::size_t used = 0;
    const unsigned long long x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument("not an integer: '" + v + "'");
    return static_cast<std::size_t>(x);
}

bool to_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw std::invalid_argument("not a boolean: '" + v + "'");
}

std::vector<std::size_t> to_sizes(const std::string& v) {
    std::vector<std::size_t> out;
    for (const auto& s : split_list(v)) out.push_back(to_size(s));
    return out;
}

std::vector<double> to_doubles(const std::string& v) {
    std::vector<double> out;
    for (const auto& s : split_list(v)) out.push_back(to_double(s));
    return out;
}

std::string resolve(const std::string& base, const std::string& p) {
    fs::path path(p);
    if (path.is_relative()) path = fs::path(base) / path;
    return path.lexically_normal().string();
}

std::string existing(const std::string& base, const std::string& p) {
    const std::string r = resolve(base, p);
    if (!fs::exists(r)) throw std::invalid_argument("path does not exist: " + r);
    return r;
}

/// argv[0] of an external command must be an existing file or found on PATH.
void check_command(const std::vector<std::string>& argv) {
    if (argv.empty()) throw std::invalid_argument("empty command");
    if (argv[0].find('/') != std::string::npos) {
        if (!fs::exists(argv[0])) throw std::invalid_argument("command not found: " + argv[0]);
        return;
    }
    const char* env = std::getenv("PATH");
    std::istringstream is(env ? env : "");
    std::string dir;
    while (std::getline(is, dir, ':')) {
        if (!dir.empty() && fs::exists(fs::path(dir) / argv[0])) return;
    }
    throw std::invalid_argument("command not found on PATH: " + argv[0]);
}

using Setter = std::function<void(ExperimentConfig&, const std::string& value, const std::string& base)>;

const std::map<std::string, Setter>& schema() {
    static const std::map<std::string, Setter> s = [] {
        std::map<std::string, Setter> m;
        auto sz = [&m](const std::string& key, auto member) {
            m[key] = [member](ExperimentConfig& c, const std::string& v, const std::string&) { member(c) = to_size(v); };
        };
        auto dbl = [&m](const std::string& key, auto member) {
            m[key] = [member](ExperimentConfig& c, const std::string& v, const std::string&) { member(c) = to_double(v); };
        };
        auto bln = [&m](const std::string& key, auto member) {
            m[key] = [member](ExperimentConfig& c, const std::string& v, const std::string&) { member(c) = to_bool(v); };
        };
        auto str = [&m](const std::string& key, auto member) {
            m[key] = [member](ExperimentConfig& c, const std::string& v, const std::string&) { member(c) = v; };
        };

        m["run.out"] = [](ExperimentConfig& c, const std::string& v, const std::string& base) { c.out = resolve(base, v); };
        m["run.seed"] = [](ExperimentConfig& c, const std::string& v, const std::string&) { c.apply_seed(to_size(v)); };

        str("dataset.generator", [](ExperimentConfig& c) -> std::string& { return c.dataset.generator; });
        sz("dataset.n", [](ExperimentConfig& c) -> std::size_t& { return c.dataset.n; });
        sz("dataset.length", [](ExperimentConfig& c) -> std::size_t& { return c.dataset.length; });
        sz("dataset.channels", [](ExperimentConfig& c) -> std::size_t& { return c.dataset.channels; });
        dbl("dataset.noise_sigma", [](ExperimentConfig& c) -> double& { return c.dataset.gen.noise_sigma; });
        dbl("dataset.amplitude", [](ExperimentConfig& c) -> double& { return c.dataset.gen.amplitude; });
        sz("dataset.max_classes", [](ExperimentConfig& c) -> std::size_t& { return c.dataset.gen.max_classes; });
        dbl("dataset.train_frac", [](ExperimentConfig& c) -> double& { return c.dataset.train_frac; });
        dbl("dataset.val_frac", [](ExperimentConfig& c) -> double& { return c.dataset.val_frac; });
        m["dataset.csv_path"] = [](ExperimentConfig& c, const std::string& v, const std::string& base) {
            c.dataset.csv_path = existing(base, v);
        };
        m["dataset.csv_features"] = [](ExperimentConfig& c, const std::string& v, const std::string&) {
            c.dataset.csv.feature_columns = split_list(v);
        };
        str("dataset.csv_label", [](ExperimentConfig& c) -> std::string& { return c.dataset.csv.label_column; });
        str("dataset.csv_timestamp", [](ExperimentConfig& c) -> std::string& { return c.dataset.csv.timestamp_column; });
        m["dataset.csv_masks"] = [](ExperimentConfig& c, const std::string& v, const std::string&) {
            c.dataset.csv.mask_columns = split_list(v);
        };
        bln("dataset.csv_regression", [](ExperimentConfig& c) -> bool& { return c.dataset.csv.regression; });
        sz("dataset.csv_window", [](ExperimentConfig& c) -> std::size_t& { return c.dataset.csv.window; });
        sz("dataset.csv_stride", [](ExperimentConfig& c) -> std::size_t& { return c.dataset.csv.stride; });

        m["blackbox.kind"] = [](ExperimentConfig& c, const std::string& v, const std::string&) {
            const bb::Kind k = bb::kind_from_name(v);
            c.blackbox.external = k == bb::Kind::ExternalProcess;
            if (!c.blackbox.external) c.blackbox.cfg.kind = k;
        };
        m["blackbox.command"] = [](ExperimentConfig& c, const std::string& v, const std::string& base) {
            std::istringstream is(v);
            std::vector<std::string> argv;
            for (std::string w; is >> w;) argv.push_back(w);
            if (!argv.empty() && argv[0].find('/') != std::string::npos) argv[0] = resolve(base, argv[0]);
            check_command(argv);
            c.blackbox.command = std::move(argv);
        };
        bln("blackbox.fd_fallback", [](ExperimentConfig& c) -> bool& { return c.blackbox.fd_fallback; });
        dbl("blackbox.fd_step", [](ExperimentConfig& c) -> double& { return c.blackbox.fd_step; });
        bln("blackbox.require_qualified", [](ExperimentConfig& c) -> bool& { return c.blackbox.require_qualified; });
        sz("blackbox.tcn_channels", [](ExperimentConfig& c) -> std::size_t& { return c.blackbox.cfg.tcn_channels; });
        sz("blackbox.kernel", [](ExperimentConfig& c) -> std::size_t& { return c.blackbox.cfg.kernel; });
        m["blackbox.dilations"] = [](ExperimentConfig& c, const std::string& v, const std::string&) {
            c.blackbox.cfg.dilations = to_sizes(v);
        };
        sz("blackbox.mlp_hidden", [](ExperimentConfig& c) -> std::size_t& { return c.blackbox.cfg.mlp_hidden; });
        dbl("blackbox.lr", [](ExperimentConfig& c) -> double& { return c.blackbox.cfg.lr; });
        sz("blackbox.batch_size", [](ExperimentConfig& c) -> std::size_t& { return c.blackbox.cfg.batch_size; });
        sz("blackbox.epochs", [](ExperimentConfig& c) -> std::size_t& { return c.blackbox.cfg.epochs; });
        dbl("blackbox.weight_decay", [](ExperimentConfig& c) -> double& { return c.blackbox.cfg.weight_decay; });
        dbl("blackbox.qualify_accuracy", [](ExperimentConfig& c) -> double& { return c.blackbox.cfg.qualify_accuracy; });

        dbl("sae.r", [](ExperimentConfig& c) -> double& { return c.sae.r; });
        m["sae.activation"] = [](ExperimentConfig& c, const std::string& v, const std::string&) {
            c.sae.activation = sae::activation_from_name(v);
        };
        sz("sae.k", [](ExperimentConfig& c) -> std::size_t& { return c.sae.k; });
        sz("sae.gamma_max", [](ExperimentConfig& c) -> std::size_t& { return c.sae.gamma_max; });
        dbl("sae.eta", [](ExperimentConfig& c) -> double& { return c.sae.eta; });
        sz("sae.encoder_width", [](ExperimentConfig& c) -> std::size_t& { return c.sae.encoder_width; });
        sz("sae.tcn_channels", [](ExperimentConfig& c) -> std::size_t& { return c.sae.tcn_channels; });
        m["sae.dilations"] = [](ExperimentConfig& c, const std::string& v, const std::string&) { c.sae.dilations = to_sizes(v); };
        sz("sae.kernel", [](ExperimentConfig& c) -> std::size_t& { return c.sae.kernel; });
        sz("sae.n_blocks", [](ExperimentConfig& c) -> std::size_t& { return c.sae.n_blocks; });
        sz("sae.se_reduction", [](ExperimentConfig& c) -> std::size_t& { return c.sae.se_reduction; });
        sz("sae.decoder_channels", [](ExperimentConfig& c) -> std::size_t& { return c.sae.decoder_channels; });
        m["sae.decoder"] = [](ExperimentConfig& c, const std::string& v, const std::string&) {
            c.sae.decoder_kind = sae::decoder_kind_from_name(v);
        };
        sz("sae.k_max", [](ExperimentConfig& c) -> std::size_t& { return c.sae.k_max; });
        dbl("sae.p0", [](ExperimentConfig& c) -> double& { return c.sae.p0; });
        bln("sae.share_terms", [](ExperimentConfig& c) -> bool& { return c.sae.share_terms; });
        sz("sae.term_hidden", [](ExperimentConfig& c) -> std::size_t& { return c.sae.term_hidden; });
        dbl("sae.phi_init", [](ExperimentConfig& c) -> double& { return c.sae.phi_init; });
        dbl("sae.ste_eps", [](ExperimentConfig& c) -> double& { return c.sae.ste_eps; });

        dbl("train.lr", [](ExperimentConfig& c) -> double& { return c.train.lr; });
        sz("train.batch_size", [](ExperimentConfig& c) -> std::size_t& { return c.train.batch_size; });
        dbl("train.weight_decay", [](ExperimentConfig& c) -> double& { return c.train.weight_decay; });
        sz("train.epochs", [](ExperimentConfig& c) -> std::size_t& { return c.train.epochs; });
        sz("train.eval_every", [](ExperimentConfig& c) -> std::size_t& { return c.train.eval_every; });
        sz("train.patience", [](ExperimentConfig& c) -> std::size_t& { return c.train.early_stop_patience; });
        m["train.optimizer"] = [](ExperimentConfig& c, const std::string& v, const std::string&) {
            if (v == "adam") c.train.optimizer = OptimizerKind::Adam;
            else if (v == "sgd") c.train.optimizer = OptimizerKind::SgdMomentum;
            else throw std::invalid_argument("unknown optimizer '" + v + "' (expected adam or sgd)");
        };
        dbl("train.clip_norm", [](ExperimentConfig& c) -> double& { return c.train.clip_norm; });
        dbl("train.alpha", [](ExperimentConfig& c) -> double& { return c.train.weights.alpha; });
        dbl("train.lambda", [](ExperimentConfig& c) -> double& { return c.train.weights.lambda; });
        dbl("train.tau", [](ExperimentConfig& c) -> double& { return c.train.weights.tau; });
        sz("train.cc_samples", [](ExperimentConfig& c) -> std::size_t& { return c.train.cc_samples; });

        str("eval.split", [](ExperimentConfig& c) -> std::string& { return c.eval.split; });
        dbl("eval.removal_fraction", [](ExperimentConfig& c) -> double& { return c.eval.opts.removal_fraction; });
        sz("eval.thresholds", [](ExperimentConfig& c) -> std::size_t& { return c.eval.opts.thresholds; });
        sz("eval.kl_bins", [](ExperimentConfig& c) -> std::size_t& { return c.eval.opts.kl_bins; });
        sz("eval.max_points", [](ExperimentConfig& c) -> std::size_t& { return c.eval.opts.max_points; });
        bln("eval.oracle_saliency", [](ExperimentConfig& c) -> bool& { return c.eval.opts.oracle_saliency; });

        str("explain.select", [](ExperimentConfig& c) -> std::string& { return c.explain.select; });

        str("counterfactual.select", [](ExperimentConfig& c) -> std::string& { return c.counterfactual.select; });
        m["counterfactual.target_class"] = [](ExperimentConfig& c, const std::string& v, const std::string&) {
            c.counterfactual.opts.target_class = to_size(v);
        };
        m["counterfactual.target_value"] = [](ExperimentConfig& c, const std::string& v, const std::string&) {
            c.counterfactual.opts.target_value = to_double(v);
        };
        m["counterfactual.subset"] = [](ExperimentConfig& c, const std::string& v, const std::string&) {
            c.counterfactual.opts.subset = to_sizes(v);
        };
        sz("counterfactual.top_k", [](ExperimentConfig& c) -> std::size_t& { return c.counterfactual.opts.top_k; });
        dbl("counterfactual.step", [](ExperimentConfig& c) -> double& { return c.counterfactual.opts.step; });
        dbl("counterfactual.eps", [](ExperimentConfig& c) -> double& { return c.counterfactual.opts.eps; });
        sz("counterfactual.max_iter", [](ExperimentConfig& c) -> std::size_t& { return c.counterfactual.opts.max_iter; });
        bln("counterfactual.nonnegative", [](ExperimentConfig& c) -> bool& { return c.counterfactual.opts.nonnegative; });

        sz("theorem.interventions", [](ExperimentConfig& c) -> std::size_t& { return c.theorem.interventions; });
        sz("theorem.probe_size", [](ExperimentConfig& c) -> std::size_t& { return c.theorem.probe_size; });
        sz("theorem.matched_concepts", [](ExperimentConfig& c) -> std::size_t& { return c.theorem.matched_concepts; });
        bln("theorem.per_instance", [](ExperimentConfig& c) -> bool& { return c.theorem.per_instance; });
        bln("theorem.oracle", [](ExperimentConfig& c) -> bool& { return c.theorem.oracle; });

        m["sweep.axis"] = [](ExperimentConfig& c, const std::string& v, const std::string&) {
            c.sweep.axis = train::sweep_axis_from_name(v);
        };
        m["sweep.values"] = [](ExperimentConfig& c, const std::string& v, const std::string&) { c.sweep.values = to_doubles(v); };

        m["fx.checkpoints"] = [](ExperimentConfig& c, const std::string& v, const std::string& base) {
            c.fx.checkpoints.clear();
            for (const auto& p : split_list(v)) c.fx.checkpoints.push_back(existing(base, p));
        };
        dbl("fx.removal_fraction", [](ExperimentConfig& c) -> double& { return c.fx.removal_fraction; });

        sz("interactions.k_max", [](ExperimentConfig& c) -> std::size_t& { return c.interactions.k_max; });
        sz("interactions.probes", [](ExperimentConfig& c) -> std::size_t& { return c.interactions.probes; });
        return m;
    }();
    return s;
}

}  // namespace

void ExperimentConfig::apply_seed(std::uint64_t s) {
    seed = s;
    blackbox.cfg.seed = s;
    sae.seed = s;
    train.seed = s;
    eval.opts.seed = s;
    theorem.seed = s;
}

ExperimentConfig parse_config(const std::string& text, const std::string& base_dir) {
    ExperimentConfig c;
    c.out = resolve(base_dir, c.out);
    const auto& keys = schema();
    std::istringstream is(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::string where = "config line " + std::to_string(lineno) + ": ";
        if (line.front() == '[') {
            if (line.back() != ']') throw std::invalid_argument(where + "malformed section header");
            section = trim(line.substr(1, line.size() - 2));
            const std::string prefix = section + ".";
            const auto it = keys.lower_bound(prefix);
            if (it == keys.end() || it->first.compare(0, prefix.size(), prefix) != 0) {
                throw std::invalid_argument(where + "unknown section [" + section + "]");
            }
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw std::invalid_argument(where + "expected key = value");
        if (section.empty()) throw std::invalid_argument(where + "key outside of a section");
        const std::string key = section + "." + trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        const auto it = keys.find(key);
        if (it == keys.end()) throw std::invalid_argument(where + "unknown key '" + key + "'");
        try {
            it->second(c, value, base_dir);
        } catch (const std::exception& e) {
            throw std::invalid_argument(where + key + ": " + e.what());
        }
    }
    if (c.blackbox.external && c.blackbox.command.empty()) {
        throw std::invalid_argument("blackbox.kind = external-process needs blackbox.command");
    }
    if (c.dataset.generator == "csv" && c.dataset.csv_path.empty()) {
        throw std::invalid_argument("dataset.generator = csv needs dataset.csv_path");
    }
    c.sae.validate();
    c.train.validate();
    return c;
}

ExperimentConfig load_config(const std::string& path) {
    ExperimentConfig c;
    if (path.empty()) {
        c = parse_config("", fs::current_path().string());
    } else {
        if (!fs::exists(path)) throw std::invalid_argument("config file not found: " + path);
        const fs::path abs = fs::absolute(path);
        c = parse_config(io::read_file(abs.string()), abs.parent_path().string());
    }
    if (const char* out = std::getenv("TSAE_OUT"); out && *out) c.out = fs::absolute(out).lexically_normal().string();
    return c;
}

std::vector<std::string> config_keys() {
    std::vector<std::string> out;
    for (const auto& [k, _] : schema()) out.push_back(k);
    return out;
}

}  // namespace tsae::cli
