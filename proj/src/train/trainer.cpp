#include "tsae/train/trainer.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "tsae/io/binary.hpp"
#include "tsae/sae/activation.hpp"

namespace tsae::train {

namespace {

constexpr char kMagic[] = "TSAE";
constexpr std::uint8_t kVersion = 1;
constexpr std::uint8_t kKindState = 'S';

nlohmann::json report_json(const loss::LossReport& r) {
    return {r.recon, r.sparsity, r.sae, r.label_fidelity, r.cc, r.cf, r.total, r.l0, r.agreement};
}

loss::LossReport report_from_json(const nlohmann::json& j) {
    loss::LossReport r;
    double* fields[] = {&r.recon, &r.sparsity, &r.sae, &r.label_fidelity, &r.cc, &r.cf, &r.total, &r.l0, &r.agreement};
    for (std::size_t i = 0; i < 9; ++i) *fields[i] = j.at(i).get<double>();
    return r;
}

void accumulate(loss::LossReport& acc, const loss::LossReport& r, double w) {
    acc.recon += w * r.recon;
    acc.sparsity += w * r.sparsity;
    acc.sae += w * r.sae;
    acc.label_fidelity += w * r.label_fidelity;
    acc.cc += w * r.cc;
    acc.cf += w * r.cf;
    acc.total += w * r.total;
    acc.l0 += w * r.l0;
    acc.agreement += w * r.agreement;
}

bool report_finite(const loss::LossReport& r) {
    for (double v : {r.recon, r.sparsity, r.sae, r.label_fidelity, r.cc, r.cf, r.total, r.l0, r.agreement}) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

/// Consecutive chunks of `order`; a trailing chunk of one joins its predecessor
/// so every batch can form counterfactual pairs.
std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order, std::size_t batch_size) {
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < order.size(); i += batch_size) {
        out.emplace_back(order.begin() + i, order.begin() + std::min(order.size(), i + batch_size));
    }
    if (out.size() > 1 && out.back().size() == 1) {
        out[out.size() - 2].push_back(out.back()[0]);
        out.pop_back();
    }
    return out;
}

std::string describe(const loss::LossReport& r) {
    std::ostringstream os;
    os << "recon=" << r.recon << " sparsity=" << r.sparsity << " label_fidelity=" << r.label_fidelity
       << " cc=" << r.cc << " cf=" << r.cf << " total=" << r.total;
    return os.str();
}

struct State {
    std::size_t epochs_done = 0;
    std::uint64_t steps = 0;
    double best_total = std::numeric_limits<double>::infinity();
    std::size_t best_epoch = 0;
    double best_recon = std::numeric_limits<double>::infinity();
    std::size_t since_improve = 0;
    std::vector<EpochRecord> history;
};

std::string history_json(const std::vector<EpochRecord>& h) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& e : h) j.push_back({e.epoch, e.gamma, e.evaluated, report_json(e.train), report_json(e.val)});
    return j.dump();
}

std::vector<EpochRecord> history_from_json(const std::string& s) {
    std::vector<EpochRecord> out;
    for (const auto& e : nlohmann::json::parse(s)) {
        EpochRecord r;
        r.epoch = e.at(0);
        r.gamma = e.at(1);
        r.evaluated = e.at(2);
        r.train = report_from_json(e.at(3));
        r.val = report_from_json(e.at(4));
        out.push_back(r);
    }
    return out;
}

std::string resume_key(const sae::SAEConfig& s, TrainConfig c) {
    c.state_path.clear();
    return sae::config_to_json(s) + train_config_to_json(c);
}

void write_state(const std::string& path, const std::string& key, const State& st, const sae::SAEModel& current,
                 const sae::SAEModel& best, const Optimizer& opt) {
    std::ostringstream os;
    io::write_magic(os, kMagic);
    io::write_u8(os, kVersion);
    io::write_u8(os, kKindState);
    io::write_string(os, key);
    io::write_u64(os, st.epochs_done);
    io::write_u64(os, st.steps);
    io::write_f64(os, st.best_total);
    io::write_u64(os, st.best_epoch);
    io::write_f64(os, st.best_recon);
    io::write_u64(os, st.since_improve);
    io::write_string(os, history_json(st.history));
    io::write_string(os, current.serialize());
    io::write_string(os, best.serialize());
    opt.write(os);
    io::write_file_atomic(path, os.str());
}

void read_state(const std::string& path, const std::string& key, State& st, sae::SAEModel& current,
                sae::SAEModel& best, Optimizer& opt) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open training state '" + path + "'");
    const std::string what = "training state '" + path + "'";
    io::expect_magic(is, kMagic, what);
    if (io::read_u8(is) != kVersion) throw std::runtime_error(what + ": unsupported version");
    if (io::read_u8(is) != kKindState) throw std::runtime_error(what + ": not a training state file");
    if (io::read_string(is) != key) throw std::runtime_error(what + ": configuration differs from the resumed run");
    st.epochs_done = io::read_u64(is);
    st.steps = io::read_u64(is);
    st.best_total = io::read_f64(is);
    st.best_epoch = io::read_u64(is);
    st.best_recon = io::read_f64(is);
    st.since_improve = io::read_u64(is);
    st.history = history_from_json(io::read_string(is));
    current = sae::SAEModel::deserialize(io::read_string(is));
    best = sae::SAEModel::deserialize(io::read_string(is));
    opt.read(is);
}

}  // namespace

void TrainConfig::validate() const {
    if (!(lr > 0)) throw std::invalid_argument("train: lr must be positive");
    if (batch_size < 2) throw std::invalid_argument("train: batch_size must be at least 2");
    if (!(weight_decay >= 0)) throw std::invalid_argument("train: weight_decay must be nonnegative");
    if (eval_every == 0) throw std::invalid_argument("train: eval_every must be positive");
    if (!(clip_norm > 0)) throw std::invalid_argument("train: clip_norm must be positive");
    weights.validate();
}

std::string train_config_to_json(const TrainConfig& c) {
    nlohmann::json j{{"lr", c.lr},
                     {"batch_size", c.batch_size},
                     {"weight_decay", c.weight_decay},
                     {"epochs", c.epochs},
                     {"seed", c.seed},
                     {"eval_every", c.eval_every},
                     {"early_stop_patience", c.early_stop_patience},
                     {"optimizer", c.optimizer == OptimizerKind::Adam ? "adam" : "sgd-momentum"},
                     {"clip_norm", c.clip_norm},
                     {"alpha", c.weights.alpha},
                     {"lambda", c.weights.lambda},
                     {"tau", c.weights.tau},
                     {"cc_samples", c.cc_samples},
                     {"state_path", c.state_path}};
    return j.dump();
}

TrainConfig train_config_from_json(const std::string& s) {
    const auto j = nlohmann::json::parse(s);
    TrainConfig c;
    c.lr = j.at("lr");
    c.batch_size = j.at("batch_size");
    c.weight_decay = j.at("weight_decay");
    c.epochs = j.at("epochs");
    c.seed = j.at("seed");
    c.eval_every = j.at("eval_every");
    c.early_stop_patience = j.at("early_stop_patience");
    c.optimizer = j.at("optimizer") == "adam" ? OptimizerKind::Adam : OptimizerKind::SgdMomentum;
    c.clip_norm = j.at("clip_norm");
    c.weights.alpha = j.at("alpha");
    c.weights.lambda = j.at("lambda");
    c.weights.tau = j.at("tau");
    c.cc_samples = j.at("cc_samples");
    c.state_path = j.at("state_path");
    return c;
}

loss::LossReport evaluate_objective(sae::SAEModel& model, const bb::BlackBox& f, const data::Dataset& data,
                                    const std::vector<std::size_t>& idx, const TrainConfig& cfg) {
    loss::LossReport acc;
    if (idx.empty()) return acc;
    loss::ObjectiveOptions opts;
    opts.weights = cfg.weights;
    opts.weights.eta = model.config().eta;
    opts.training = false;
    opts.update_stats = false;
    opts.cc_samples = cfg.cc_samples;
    if (idx.size() < 2) opts.weights.lambda = 0.0;
    Rng rng(derive_seed(cfg.seed, 0x7661));
    for (const auto& batch : make_batches(idx, cfg.batch_size)) {
        Graph g;
        const auto obj = loss::build_objective(g, model, f, bb::stack(data, batch), opts, rng);
        accumulate(acc, obj.report, static_cast<double>(batch.size()) / static_cast<double>(idx.size()));
    }
    return acc;
}

TrainResult train_sae(const data::Dataset& data, const data::Split& split, const bb::BlackBox& f,
                      const sae::SAEConfig& sae_cfg, const TrainConfig& cfg, bool resume,
                      const EpochCallback& on_epoch) {
    cfg.validate();
    if (f.channels() != sae_cfg.channels || f.length() != sae_cfg.length) {
        throw std::invalid_argument("black box input shape does not match the SAE configuration");
    }
    if (split.train.size() < 2) throw std::invalid_argument("train: at least 2 training instances required");

    sae::SAEModel model(sae_cfg);
    sae::SAEModel best = model;
    OptimizerConfig ocfg;
    ocfg.kind = cfg.optimizer;
    ocfg.lr = cfg.lr;
    ocfg.weight_decay = cfg.weight_decay;
    Optimizer opt(ocfg);
    State st;
    const std::string key = resume_key(sae_cfg, cfg);
    if (resume && !cfg.state_path.empty() && std::filesystem::exists(cfg.state_path)) {
        read_state(cfg.state_path, key, st, model, best, opt);
    }

    loss::ObjectiveOptions opts;
    opts.weights = cfg.weights;
    opts.weights.eta = sae_cfg.eta;
    opts.training = true;
    opts.update_stats = true;
    opts.cc_samples = cfg.cc_samples;

    const std::size_t n_batches = make_batches(split.train, cfg.batch_size).size();
    const std::size_t total_steps = cfg.epochs * n_batches;
    const bool topk = sae_cfg.activation == sae::Activation::TopK;

    TrainResult out{best, {}, 0, false, false, {}, 0};
    for (std::size_t epoch = st.epochs_done + 1; epoch <= cfg.epochs; ++epoch) {
        std::vector<std::size_t> order = split.train;
        Rng shuffle_rng(derive_seed(cfg.seed, 0x5e, epoch));
        shuffle_rng.shuffle(order);
        const auto batches = make_batches(order, cfg.batch_size);

        EpochRecord rec;
        rec.epoch = epoch;
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            opts.gamma = topk ? sae::gamma_schedule(st.steps, total_steps, sae_cfg.gamma_max) : 1;
            rec.gamma = opts.gamma;
            Rng rng(derive_seed(cfg.seed, epoch, bi + 1));
            Graph g;
            const auto obj = loss::build_objective(g, model, f, bb::stack(data, batches[bi]), opts, rng);
            Gradients grads = g.backward(obj.total);
            const double norm = clip_global_norm(grads, cfg.clip_norm);
            if (!report_finite(obj.report) || !std::isfinite(norm)) {
                out.aborted = true;
                out.abort_reason = "non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                                   std::to_string(bi) + " (" + describe(obj.report) + ", grad norm " +
                                   std::to_string(norm) + "); returning the last good checkpoint";
                out.model = best;
                out.history = st.history;
                out.best_epoch = st.best_epoch;
                out.steps = st.steps;
                return out;
            }
            opt.step(model.params(), grads);
            ++st.steps;
            model.renormalize_dictionary(st.steps);
            accumulate(rec.train, obj.report, static_cast<double>(batches[bi].size()) /
                                                  static_cast<double>(split.train.size()));
        }

        bool stop = false;
        if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
            rec.evaluated = true;
            rec.val = split.val.empty() ? rec.train : evaluate_objective(model, f, data, split.val, cfg);
            if (rec.val.total < st.best_total) {
                st.best_total = rec.val.total;
                st.best_epoch = epoch;
                best = model;
            }
            if (rec.val.recon < st.best_recon) {
                st.best_recon = rec.val.recon;
                st.since_improve = 0;
            } else if (++st.since_improve >= cfg.early_stop_patience) {
                stop = true;
            }
        }
        st.history.push_back(rec);
        st.epochs_done = epoch;
        if (!cfg.state_path.empty()) write_state(cfg.state_path, key, st, model, best, opt);
        if (stop) {
            out.stopped_early = true;
            break;
        }
        if (on_epoch && !on_epoch(rec)) break;
    }
    out.model = st.best_epoch == 0 ? model : best;
    out.history = st.history;
    out.best_epoch = st.best_epoch;
    out.steps = st.steps;
    return out;
}

std::string history_csv(const std::vector<EpochRecord>& history) {
    std::ostringstream os;
    os.precision(17);
    os << "epoch,split,gamma,recon,sparsity,sae,label_fidelity,cc,cf,total,l0,agreement\n";
    for (const auto& e : history) {
        auto row = [&](const char* split, const loss::LossReport& r) {
            os << e.epoch << ',' << split << ',' << e.gamma << ',' << r.recon << ',' << r.sparsity << ',' << r.sae
               << ',' << r.label_fidelity << ',' << r.cc << ',' << r.cf << ',' << r.total << ',' << r.l0 << ','
               << r.agreement << '\n';
        };
        row("train", e.train);
        if (e.evaluated) row("val", e.val);
    }
    return os.str();
}

void write_history_csv(const std::string& path, const std::vector<EpochRecord>& history) {
    io::write_file_atomic(path, history_csv(history));
}

SweepAxis sweep_axis_from_name(const std::string& s) {
    for (auto a : {SweepAxis::Eta, SweepAxis::R, SweepAxis::K, SweepAxis::Alpha, SweepAxis::Lambda}) {
        if (sweep_axis_name(a) == s) return a;
    }
    throw std::invalid_argument("unknown sweep axis '" + s + "' (expected eta, r, k, alpha or lambda)");
}

std::string sweep_axis_name(SweepAxis a) {
    switch (a) {
    case SweepAxis::Eta: return "eta";
    case SweepAxis::R: return "r";
    case SweepAxis::K: return "k";
    case SweepAxis::Alpha: return "alpha";
    case SweepAxis::Lambda: return "lambda";
    }
    return "unknown";
}

void apply_sweep_value(SweepAxis axis, double value, sae::SAEConfig& sae_cfg, TrainConfig& cfg) {
    switch (axis) {
    case SweepAxis::Eta: sae_cfg.eta = value; break;
    case SweepAxis::R: sae_cfg.r = value; break;
    case SweepAxis::K:
        if (value < 1 || value != std::floor(value)) throw std::invalid_argument("sweep: k must be a positive integer");
        sae_cfg.k = static_cast<std::size_t>(value);
        break;
    case SweepAxis::Alpha: cfg.weights.alpha = value; break;
    case SweepAxis::Lambda: cfg.weights.lambda = value; break;
    }
}

std::vector<SweepPoint> sweep(SweepAxis axis, const std::vector<double>& values, const data::Dataset& data,
                              const data::Split& split, const bb::BlackBox& f, const sae::SAEConfig& sae_cfg,
                              const TrainConfig& cfg) {
    std::vector<SweepPoint> out;
    for (double v : values) {
        SweepPoint p;
        p.value = v;
        try {
            sae::SAEConfig s = sae_cfg;
            TrainConfig c = cfg;
            c.state_path.clear();
            apply_sweep_value(axis, v, s, c);
            TrainResult r = train_sae(data, split, f, s, c);
            if (r.aborted) p.error = r.abort_reason;
            p.val = evaluate_objective(r.model, f, data, split.val.empty() ? split.train : split.val, c);
            p.result = std::move(r);
        } catch (const std::exception& e) {
            p.error = e.what();
        }
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace tsae::train
