#include "cli/commands.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>

#include "cli/config.hpp"
#include "tsae/blackbox/blackbox.hpp"
#include "tsae/causal/causal.hpp"
#include "tsae/interpret/interpret.hpp"
#include "tsae/io/binary.hpp"
#include "tsae/metrics/evaluate.hpp"
#include "tsae/train/trainer.hpp"

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace tsae::cli {
namespace {

/// Raised when an artifact was produced but a qualification gate failed.
struct GateFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string fmt(double v) {
    if (!std::isfinite(v)) return "nan";
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

std::string brief(double v) {
    std::ostringstream os;
    os << std::setprecision(4) << v;
    return os.str();
}

json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

class Run {
public:
    Run(ExperimentConfig cfg, std::ostream& log) : cfg_(std::move(cfg)), log_(log) {
        fs::create_directories(cfg_.out);
    }

    const ExperimentConfig& cfg() const { return cfg_; }
    std::ostream& log() { return log_; }
    std::string path(const std::string& rel) const { return (fs::path(cfg_.out) / rel).string(); }

    void write(const std::string& rel, const std::string& bytes) {
        const std::string p = path(rel);
        fs::create_directories(fs::path(p).parent_path());
        io::write_file_atomic(p, bytes);
        written_.push_back(rel);
    }
    /// Records a file that a library call wrote directly.
    void record(const std::string& rel) { written_.push_back(rel); }

    std::string require(const std::string& rel, const std::string& producer) const {
        const std::string p = path(rel);
        if (!fs::exists(p)) throw std::runtime_error("missing artifact " + p + " (run " + producer + " first)");
        return p;
    }

    data::Dataset dataset() const { return data::read_cache(require("data.bin", "gen-data")); }

    data::Split split(const data::Dataset& d) const {
        return data::stratified_split(d, cfg_.seed, cfg_.dataset.train_frac, cfg_.dataset.val_frac);
    }

    std::unique_ptr<bb::BlackBox> blackbox() const {
        const auto& b = cfg_.blackbox;
        if (b.external) return std::make_unique<bb::ExternalProcess>(b.command, b.fd_fallback, b.fd_step);
        return bb::InternalModel::load(require("blackbox.bin", "train-blackbox"));
    }

    sae::SAEModel sae() const { return sae::SAEModel::load(require("sae.bin", "train-sae")); }

    sae::SAEConfig sae_config(const data::Dataset& d) const {
        sae::SAEConfig s = cfg_.sae;
        s.channels = d.channels;
        s.length = d.length;
        return s;
    }

    /// Merges the checksums of everything written by this command into manifest.json.
    void finish(const std::string& command) {
        json m = json::object();
        const std::string mp = path("manifest.json");
        if (fs::exists(mp)) {
            try {
                m = json::parse(io::read_file(mp));
            } catch (const std::exception&) {
                m = json::object();
            }
        }
        for (const auto& rel : written_) {
            const std::string p = path(rel);
            m["artifacts"][rel] = {{"bytes", fs::file_size(p)}, {"fnv1a", io::hex64(io::file_checksum(p))}};
        }
        m["seed"] = cfg_.seed;
        m["commands"][command] = {{"artifacts", written_.size()}};
        io::write_file_atomic(mp, m.dump(2) + "\n");
    }

private:
    ExperimentConfig cfg_;
    std::ostream& log_;
    std::vector<std::string> written_;
};

const std::vector<std::size_t>& split_indices(const data::Split& s, const std::string& name,
                                              std::vector<std::size_t>& all_storage, std::size_t n) {
    if (name == "train") return s.train;
    if (name == "val") return s.val;
    if (name == "test") return s.test;
    if (name == "all") {
        all_storage.resize(n);
        for (std::size_t i = 0; i < n; ++i) all_storage[i] = i;
        return all_storage;
    }
    throw std::invalid_argument("unknown split '" + name + "' (expected train, val, test or all)");
}

std::vector<std::size_t> resolve_split(const data::Split& s, const std::string& name, std::size_t n) {
    std::vector<std::size_t> storage;
    return split_indices(s, name, storage, n);
}

json tensor_rows(const Tensor& x) {
    const std::size_t T = x.shape().back();
    json rows = json::array();
    for (std::size_t r = 0; r < x.size() / T; ++r) {
        rows.push_back(std::vector<double>(x.values().begin() + r * T, x.values().begin() + (r + 1) * T));
    }
    return rows;
}

std::vector<double> vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

// ---------------------------------------------------------------- gen-data

int gen_data(Run& run) {
    const auto& c = run.cfg().dataset;
    data::Dataset d;
    if (c.generator == "csv") {
        d = data::load_csv(c.csv_path, c.csv);
    } else {
        d = data::generate(c.generator, c.n, c.length, c.channels, run.cfg().seed, c.gen);
    }
    if (d.size() == 0) run.log() << "warning: dataset is empty\n";
    data::write_cache(run.path("data.bin"), d);
    run.record("data.bin");

    json s = {{"name", d.name},
              {"instances", d.size()},
              {"channels", d.channels},
              {"length", d.length},
              {"classes", d.n_classes},
              {"seed", run.cfg().seed}};
    if (!d.regression()) {
        std::vector<std::size_t> counts(d.n_classes, 0);
        for (const auto& it : d.items) {
            if (it.label() >= 0 && static_cast<std::size_t>(it.label()) < counts.size()) ++counts[it.label()];
        }
        s["class_counts"] = counts;
    }
    s["with_mask"] = std::count_if(d.items.begin(), d.items.end(), [](const auto& it) { return it.has_mask; });
    s["with_factors"] =
        std::count_if(d.items.begin(), d.items.end(), [](const auto& it) { return it.factors.has_value(); });
    run.write("data_summary.json", s.dump(2) + "\n");
    run.log() << "gen-data: " << d.size() << " instances of " << d.channels << "x" << d.length << "\n";
    return 0;
}

// ---------------------------------------------------------------- train-blackbox

int train_blackbox(Run& run) {
    const auto d = run.dataset();
    const auto split = run.split(d);
    const auto& b = run.cfg().blackbox;
    bb::QualificationReport rep;
    json j;
    if (b.external) {
        const auto f = run.blackbox();
        rep.test_accuracy = bb::accuracy(*f, d, split.test);
        rep.qualified = rep.test_accuracy >= b.cfg.qualify_accuracy;
        j["kind"] = bb::kind_name(f->kind());
        j["checksum"] = io::hex64(f->checksum());
    } else {
        auto t = bb::train_blackbox(d, split, b.cfg);
        t.model->save(run.path("blackbox.bin"));
        run.record("blackbox.bin");
        rep = t.report;
        j["kind"] = bb::kind_name(t.model->kind());
        j["checksum"] = io::hex64(t.model->checksum());
    }
    j["train_accuracy"] = num(rep.train_accuracy);
    j["val_accuracy"] = num(rep.val_accuracy);
    j["test_accuracy"] = num(rep.test_accuracy);
    j["test_loss"] = num(rep.test_loss);
    j["qualified"] = rep.qualified;
    j["degenerate"] = rep.degenerate;
    j["epochs_run"] = rep.epochs_run;
    j["qualify_accuracy"] = b.cfg.qualify_accuracy;
    run.write("blackbox_report.json", j.dump(2) + "\n");
    run.log() << "train-blackbox: test accuracy " << brief(rep.test_accuracy) << (rep.qualified ? " (qualified)\n" : " (not qualified)\n");
    if (!rep.qualified && b.require_qualified) throw GateFailure("black box did not qualify");
    return 0;
}

// ---------------------------------------------------------------- train-sae

json loss_json(const loss::LossReport& r) {
    return {{"recon", num(r.recon)},        {"sparsity", num(r.sparsity)}, {"sae", num(r.sae)},
            {"label_fidelity", num(r.label_fidelity)}, {"cc", num(r.cc)}, {"cf", num(r.cf)},
            {"total", num(r.total)},        {"l0", num(r.l0)},             {"agreement", num(r.agreement)}};
}

int train_sae(Run& run, bool resume) {
    const auto d = run.dataset();
    const auto split = run.split(d);
    const auto f = run.blackbox();
    const auto scfg = run.sae_config(d);
    train::TrainConfig tcfg = run.cfg().train;
    tcfg.state_path = run.path("train_state.bin");
    if (!resume && fs::exists(tcfg.state_path)) fs::remove(tcfg.state_path);

    std::ostream& log = run.log();
    auto result = train::train_sae(d, split, *f, scfg, tcfg, resume, [&](const train::EpochRecord& e) {
        log << "epoch " << e.epoch << "/" << tcfg.epochs << " train " << brief(e.train.total);
        if (e.evaluated) log << " val " << brief(e.val.total) << " l0 " << brief(e.val.l0);
        log << "\n";
        return true;
    });
    result.model.save(run.path("sae.bin"));
    run.record("sae.bin");
    run.record("train_state.bin");
    run.write("history.csv", train::history_csv(result.history));
    json j = {{"best_epoch", result.best_epoch},
              {"epochs_run", result.history.empty() ? 0 : result.history.back().epoch},
              {"steps", result.steps},
              {"stopped_early", result.stopped_early},
              {"aborted", result.aborted},
              {"abort_reason", result.abort_reason},
              {"dict_size", result.model.d()},
              {"checksum", io::hex64(result.model.checksum())}};
    const auto& eval_idx = split.val.empty() ? split.train : split.val;
    if (!eval_idx.empty()) j["val"] = loss_json(train::evaluate_objective(result.model, *f, d, eval_idx, tcfg));
    run.write("sae_report.json", j.dump(2) + "\n");
    if (result.aborted) throw GateFailure("training aborted: " + result.abort_reason);
    return 0;
}

// ---------------------------------------------------------------- explain / counterfactual

int explain(Run& run) {
    const auto d = run.dataset();
    const auto split = run.split(d);
    const auto f = run.blackbox();
    auto model = run.sae();
    causal::SaeConcepts cm(model);
    const auto sel_probe = parse_selector(run.cfg().explain.select, 0);
    const auto idx = resolve_split(split, sel_probe.split, d.size());
    const auto sel = parse_selector(run.cfg().explain.select, idx.size());
    for (std::size_t pos : sel.positions) {
        const auto& it = d.items[idx[pos]];
        const auto e = interp::explain(it.x, cm, *f);
        const std::string stem = "explain/" + sel.split + "_" + std::to_string(pos);
        run.write(stem + ".csv", interp::saliency_csv(e.mask));
        json j = json::parse(interp::explanation_json(e));
        j["split"] = sel.split;
        j["position"] = pos;
        j["instance"] = idx[pos];
        j["label"] = num(it.y);
        run.write(stem + ".json", j.dump(2) + "\n");
    }
    run.log() << "explain: " << sel.positions.size() << " instances\n";
    return 0;
}

int counterfactual(Run& run) {
    const auto d = run.dataset();
    const auto split = run.split(d);
    const auto f = run.blackbox();
    auto model = run.sae();
    causal::SaeConcepts cm(model);
    const auto& c = run.cfg().counterfactual;
    const auto idx = resolve_split(split, parse_selector(c.select, 0).split, d.size());
    const auto sel = parse_selector(c.select, idx.size());
    std::size_t converged = 0;
    for (std::size_t pos : sel.positions) {
        const auto& it = d.items[idx[pos]];
        const auto r = causal::generate_counterfactual(it.x, cm, *f, c.opts);
        converged += r.converged;
        json j = {{"split", sel.split},
                  {"position", pos},
                  {"instance", idx[pos]},
                  {"y_original", vec(f->predict(it.x))},
                  {"y_achieved", vec(r.y_achieved)},
                  {"target_class", r.target_class},
                  {"target_value", num(r.target_value)},
                  {"subset", r.subset},
                  {"iterations", r.iterations},
                  {"converged", r.converged},
                  {"delta_c", vec(r.delta_c)},
                  {"x_cf", tensor_rows(r.x_cf)}};
        run.write("counterfactual/" + sel.split + "_" + std::to_string(pos) + ".json", j.dump(2) + "\n");
    }
    run.log() << "counterfactual: " << converged << "/" << sel.positions.size() << " converged\n";
    return 0;
}

// ---------------------------------------------------------------- evaluate

int evaluate(Run& run) {
    const auto d = run.dataset();
    const auto split = run.split(d);
    const auto f = run.blackbox();
    auto model = run.sae();
    causal::SaeConcepts cm(model);
    const auto idx = resolve_split(split, run.cfg().eval.split, d.size());
    const auto r = metrics::evaluate(cm, *f, d, idx, run.cfg().eval.opts);
    json j = json::parse(metrics::report_json(r));
    j["split"] = run.cfg().eval.split;
    j["oracle_saliency"] = run.cfg().eval.opts.oracle_saliency;
    run.write("eval_report.json", j.dump(2) + "\n");
    run.write("eval_report.csv", metrics::report_csv_header() + "\n" + metrics::report_csv_row(r) + "\n");
    std::ostringstream lb;
    lb << "method,auprc,aup,aur,fx_mean,kl,mmd,kde_ll\n";
    lb << (run.cfg().eval.opts.oracle_saliency ? "oracle-mask" : "timesae") << ',' << fmt(r.auprc) << ','
       << fmt(r.aup) << ',' << fmt(r.aur) << ',' << fmt(r.fx_mean) << ',' << fmt(r.kl) << ',' << fmt(r.mmd) << ','
       << fmt(r.kde_ll) << '\n';
    lb << "random," << fmt(r.random_auprc) << ',' << fmt(r.random_aup) << ',' << fmt(r.random_aur) << ",,,,\n";
    run.write("leaderboard.csv", lb.str());
    run.log() << "evaluate: auprc " << brief(r.auprc) << " (random " << brief(r.random_auprc) << "), agreement "
              << brief(r.agreement) << ", F_x " << brief(r.fx_mean) << "\n";
    return 0;
}

// ---------------------------------------------------------------- theorem / fx correlation

int validate_theorem(Run& run) {
    const auto d = run.dataset();
    const auto split = run.split(d);
    const auto f = run.blackbox();
    auto model = run.sae();
    causal::SaeConcepts cm(model);
    const auto probe = data::subset(d, resolve_split(split, run.cfg().eval.split, d.size()));
    const auto r = causal::validate_theorem(cm, *f, probe, run.cfg().theorem);
    run.write("theorem.json", causal::effects_to_json(r) + "\n");
    std::ostringstream csv;
    csv << "intervention,field,measure,value\n";
    for (std::size_t i = 0; i < r.records.size(); ++i) {
        const auto& e = r.records[i];
        for (const auto& [k, v] : std::vector<std::pair<std::string, double>>{
                 {"delta_true", e.delta_true}, {"delta_approx", e.delta_approx}, {"eps_cf", e.eps_cf}, {"eps_rec", e.eps_rec}}) {
            csv << i << ',' << e.edit.field << ',' << k << ',' << fmt(v) << '\n';
        }
    }
    run.write("theorem_effects.csv", csv.str());
    run.log() << "validate-theorem: spearman " << brief(r.summary.spearman.value) << ", ordering "
              << r.summary.pairs_preserved << "/" << r.summary.pairs_eligible << " eligible pairs\n";
    return 0;
}

std::vector<std::string> sweep_checkpoints(const Run& run) {
    std::vector<std::string> out;
    const auto& s = run.cfg().sweep;
    for (std::size_t i = 0; i < s.values.size(); ++i) {
        const std::string p = run.path("sweep/" + train::sweep_axis_name(s.axis) + "_" + std::to_string(i) + ".bin");
        if (fs::exists(p)) out.push_back(p);
    }
    return out;
}

int fx_correlation(Run& run) {
    const auto& cfg = run.cfg();
    const auto paths = cfg.fx.checkpoints.empty() ? sweep_checkpoints(run) : cfg.fx.checkpoints;
    if (paths.size() < 5) {
        throw std::runtime_error("fx-correlation needs at least 5 checkpoints, found " + std::to_string(paths.size()));
    }
    const auto d = run.dataset();
    const auto split = run.split(d);
    const auto f = run.blackbox();
    std::vector<sae::SAEModel> models;
    models.reserve(paths.size());
    for (const auto& p : paths) models.push_back(sae::SAEModel::load(p));
    std::vector<std::unique_ptr<causal::SaeConcepts>> wrapped;
    std::vector<causal::ConceptModel*> ptrs;
    for (auto& m : models) {
        wrapped.push_back(std::make_unique<causal::SaeConcepts>(m));
        ptrs.push_back(wrapped.back().get());
    }
    const auto probe = data::subset(d, resolve_split(split, cfg.eval.split, d.size()));
    const auto r = causal::faithfulness_error_correlation(ptrs, *f, probe, cfg.theorem, cfg.fx.removal_fraction);
    json pts = json::array();
    std::ostringstream csv;
    csv << "checkpoint,measure,value\n";
    for (std::size_t i = 0; i < r.points.size(); ++i) {
        const std::string rel = fs::relative(paths[i], cfg.out).string();
        pts.push_back({{"checkpoint", rel}, {"eps_cf", num(r.points[i].eps_cf)}, {"fx", num(r.points[i].fx)}});
        csv << rel << ",eps_cf," << fmt(r.points[i].eps_cf) << '\n' << rel << ",fx," << fmt(r.points[i].fx) << '\n';
    }
    json j = {{"points", pts}, {"spearman", num(r.rho.value)}, {"defined", r.rho.defined}};
    run.write("fx_correlation.json", j.dump(2) + "\n");
    run.write("fx_correlation.csv", csv.str());
    run.log() << "fx-correlation: spearman " << brief(r.rho.value) << " over " << r.points.size() << " checkpoints\n";
    return 0;
}

// ---------------------------------------------------------------- sweep / interactions

int sweep(Run& run) {
    const auto d = run.dataset();
    const auto split = run.split(d);
    const auto f = run.blackbox();
    const auto& s = run.cfg().sweep;
    const auto points = train::sweep(s.axis, s.values, d, split, *f, run.sae_config(d), run.cfg().train);
    const std::string axis = train::sweep_axis_name(s.axis);
    std::ostringstream csv;
    csv << "axis,value,measure,measurement\n";
    std::size_t failed = 0;
    for (std::size_t i = 0; i < points.size(); ++i) {
        const auto& p = points[i];
        const std::string stem = "sweep/" + axis + "_" + std::to_string(i);
        if (!p.error.empty() || !p.result) {
            ++failed;
            run.log() << "sweep " << axis << "=" << brief(p.value) << " failed: " << p.error << "\n";
            continue;
        }
        p.result->model.save(run.path(stem + ".bin"));
        run.record(stem + ".bin");
        run.write(stem + "_history.csv", train::history_csv(p.result->history));
        const json val = loss_json(p.val);
        for (const auto& [k, v] : val.items()) {
            csv << axis << ',' << fmt(p.value) << ",val_" << k << ',' << (v.is_null() ? "nan" : fmt(v.get<double>())) << '\n';
        }
        csv << axis << ',' << fmt(p.value) << ",best_epoch," << p.result->best_epoch << '\n';
    }
    run.write("sweep.csv", csv.str());
    if (failed) throw GateFailure(std::to_string(failed) + " sweep point(s) failed");
    return 0;
}

int interactions(Run& run) {
    const auto d = run.dataset();
    const auto split = run.split(d);
    auto model = run.sae();
    auto idx = resolve_split(split, run.cfg().eval.split, d.size());
    if (idx.size() > run.cfg().interactions.probes) idx.resize(run.cfg().interactions.probes);
    if (idx.empty()) throw std::runtime_error("interactions: no probe instances");
    const auto r = interp::global_interactions(model, bb::stack(d, idx), run.cfg().interactions.k_max);
    run.write("interactions.json", interp::interactions_json(r) + "\n");
    return 0;
}

const std::map<std::string, std::function<int(Run&, const Options&)>>& table() {
    static const std::map<std::string, std::function<int(Run&, const Options&)>> t = {
        {"gen-data", [](Run& r, const Options&) { return gen_data(r); }},
        {"train-blackbox", [](Run& r, const Options&) { return train_blackbox(r); }},
        {"train-sae", [](Run& r, const Options& o) { return train_sae(r, o.resume); }},
        {"explain", [](Run& r, const Options&) { return explain(r); }},
        {"counterfactual", [](Run& r, const Options&) { return counterfactual(r); }},
        {"evaluate", [](Run& r, const Options&) { return evaluate(r); }},
        {"validate-theorem", [](Run& r, const Options&) { return validate_theorem(r); }},
        {"fx-correlation", [](Run& r, const Options&) { return fx_correlation(r); }},
        {"sweep", [](Run& r, const Options&) { return sweep(r); }},
        {"interactions", [](Run& r, const Options&) { return interactions(r); }},
    };
    return t;
}

}  // namespace

std::vector<std::string> command_names() {
    std::vector<std::string> out;
    for (const auto& [k, _] : table()) out.push_back(k);
    out.push_back("serve-blackbox");
    return out;
}

Selection parse_selector(const std::string& s, std::size_t split_size) {
    const auto colon = s.find(':');
    if (colon == std::string::npos) throw std::invalid_argument("selector '" + s + "' must look like split:spec");
    Selection sel;
    sel.split = s.substr(0, colon);
    const std::string spec = s.substr(colon + 1);
    if (spec.empty()) throw std::invalid_argument("selector '" + s + "' selects nothing");
    auto number = [&](const std::string& v) {
        if (v.empty() || !std::all_of(v.begin(), v.end(), [](char ch) { return ch >= '0' && ch <= '9'; })) {
            throw std::invalid_argument("selector '" + s + "': bad index '" + v + "'");
        }
        return static_cast<std::size_t>(std::stoull(v));
    };
    if (spec == "all") {
        for (std::size_t i = 0; i < split_size; ++i) sel.positions.push_back(i);
    } else if (const auto dots = spec.find(".."); dots != std::string::npos) {
        const std::size_t a = number(spec.substr(0, dots)), b = number(spec.substr(dots + 2));
        if (b < a) throw std::invalid_argument("selector '" + s + "': empty range");
        for (std::size_t i = a; i <= b; ++i) sel.positions.push_back(i);
    } else {
        std::istringstream is(spec);
        for (std::string tok; std::getline(is, tok, ',');) sel.positions.push_back(number(tok));
    }
    if (split_size > 0) {
        for (std::size_t p : sel.positions) {
            if (p >= split_size) {
                throw std::out_of_range("selector '" + s + "': position " + std::to_string(p) + " beyond split of " +
                                        std::to_string(split_size));
            }
        }
    }
    return sel;
}

int run_command(const std::string& name, const Options& opts, std::istream& in, std::ostream& out, std::ostream& log) {
    try {
        if (opts.threads == 0) throw std::invalid_argument("--threads must be at least 1");
        if (name == "serve-blackbox") {
            if (opts.model.empty()) throw std::invalid_argument("serve-blackbox needs --model PATH");
            const auto f = bb::InternalModel::load(opts.model);
            bb::serve(*f, in, out);
            return 0;
        }
        const auto it = table().find(name);
        if (it == table().end()) throw std::invalid_argument("unknown command '" + name + "'");
        ExperimentConfig cfg = load_config(opts.config);
        if (opts.seed) cfg.apply_seed(*opts.seed);
        Run run(std::move(cfg), log);
        int rc = 0;
        try {
            rc = it->second(run, opts);
        } catch (const GateFailure& g) {
            run.finish(name);
            log << name << ": gate failed: " << g.what() << "\n";
            return 1;
        }
        run.finish(name);
        return rc;
    } catch (const std::exception& e) {
        log << name << ": error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace tsae::cli
