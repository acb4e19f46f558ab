#include "tsae/blackbox/blackbox.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "tsae/io/binary.hpp"
#include "tsae/numerics/layers.hpp"
#include "tsae/numerics/rng.hpp"

namespace tsae::bb {

namespace {

constexpr char kMagic[] = "TSBB";
constexpr std::uint8_t kVersion = 1;

nlohmann::json config_json(const BlackBoxConfig& c, std::size_t D, std::size_t T, std::size_t classes) {
    return {{"kind", kind_name(c.kind)},
            {"tcn_channels", c.tcn_channels},
            {"kernel", c.kernel},
            {"dilations", c.dilations},
            {"mlp_hidden", c.mlp_hidden},
            {"lr", c.lr},
            {"batch_size", c.batch_size},
            {"epochs", c.epochs},
            {"weight_decay", c.weight_decay},
            {"seed", c.seed},
            {"qualify_accuracy", c.qualify_accuracy},
            {"channels", D},
            {"length", T},
            {"n_classes", classes}};
}

}  // namespace

std::string kind_name(Kind k) {
    switch (k) {
    case Kind::InternalTcn: return "internal-tcn";
    case Kind::InternalMlp: return "internal-mlp";
    case Kind::InternalLinear: return "internal-linear";
    case Kind::ExternalProcess: return "external-process";
    }
    return "unknown";
}

Kind kind_from_name(const std::string& s) {
    for (Kind k : {Kind::InternalTcn, Kind::InternalMlp, Kind::InternalLinear, Kind::ExternalProcess}) {
        if (kind_name(k) == s) return k;
    }
    throw std::invalid_argument("unknown black-box kind '" + s + "'");
}

std::string output_mode_name(OutputMode m) {
    return m == OutputMode::ClassProbabilities ? "class-probabilities" : "scalar-regression";
}

OutputMode output_mode_from_name(const std::string& s) {
    if (s == "class-probabilities") return OutputMode::ClassProbabilities;
    if (s == "scalar-regression") return OutputMode::ScalarRegression;
    throw std::invalid_argument("unknown output mode '" + s + "'");
}

void BlackBox::check_input(const Tensor& x, bool batched) const {
    const Shape want = batched ? Shape{x.rank() == 3 ? x.dim(0) : 0, channels(), length()} : Shape{channels(), length()};
    if (x.shape() != want) {
        throw std::invalid_argument("black box expects input " +
                                    (batched ? std::string("[B,") + std::to_string(channels()) + "," +
                                                   std::to_string(length()) + "]"
                                             : shape_str(want)) +
                                    ", got " + shape_str(x.shape()));
    }
}

Tensor BlackBox::predict(const Tensor& x) const {
    check_input(x, false);
    Tensor y = predict_batch(x.reshaped({1, channels(), length()}));
    return y.reshaped({output_dim()});
}

Tensor BlackBox::predict_grad(const Tensor& x, std::size_t output) const {
    check_input(x, false);
    if (output >= output_dim()) throw std::out_of_range("output index out of range");
    Graph g;
    const NodeId xin = g.variable("x", x.reshaped({1, channels(), length()}));
    const NodeId y = apply(g, xin);
    const NodeId pick = g.sum(g.slice(y, 1, output, output + 1));
    const Gradients grads = g.backward(pick);
    return grads.at("x").reshaped({channels(), length()});
}

double BlackBox::scalar_output(const Tensor& y, std::size_t cls) const {
    if (output_mode() == OutputMode::ScalarRegression) return y[0];
    return y[cls];
}

InternalModel::InternalModel(const BlackBoxConfig& cfg, std::size_t D, std::size_t T, std::size_t n_classes)
    : cfg_(cfg), D_(D), T_(T), classes_(n_classes) {
    if (D == 0 || T == 0) throw std::invalid_argument("black box needs positive input shape");
    if (cfg.kind == Kind::ExternalProcess) throw std::invalid_argument("internal model cannot be external-process");
    Rng rng(derive_seed(cfg.seed, 0xb1ac));
    const std::size_t K = output_dim();
    switch (cfg.kind) {
    case Kind::InternalTcn: {
        std::size_t cin = D;
        for (std::size_t i = 0; i < cfg.dilations.size(); ++i) {
            nn::init_conv(params_, "tcn" + std::to_string(i), cin, cfg.tcn_channels, cfg.kernel, rng);
            cin = cfg.tcn_channels;
        }
        nn::init_linear(params_, "head", cin, K, rng);
        break;
    }
    case Kind::InternalMlp:
        nn::init_linear(params_, "fc0", D * T, cfg.mlp_hidden, rng);
        nn::init_linear(params_, "fc1", cfg.mlp_hidden, cfg.mlp_hidden, rng);
        nn::init_linear(params_, "head", cfg.mlp_hidden, K, rng);
        break;
    case Kind::InternalLinear:
        nn::init_linear(params_, "head", D * T, K, rng);
        break;
    case Kind::ExternalProcess:
        break;
    }
}

NodeId InternalModel::forward(Graph& g, NodeId x, bool trainable) const {
    auto p = [&](const std::string& name) {
        return trainable ? g.variable(name, params_.get(name)) : g.constant(params_.get(name));
    };
    auto linear = [&](const std::string& name, NodeId h) {
        return g.add(g.matmul(h, p(name + ".w"), true), p(name + ".b"));
    };
    const std::size_t B = g.shape(x).at(0);
    NodeId h = x;
    switch (cfg_.kind) {
    case Kind::InternalTcn:
        for (std::size_t i = 0; i < cfg_.dilations.size(); ++i) {
            const std::string n = "tcn" + std::to_string(i);
            h = g.relu(g.add(g.conv1d(h, p(n + ".w"), cfg_.dilations[i]), p(n + ".b")));
        }
        h = g.mean_pool(h);
        break;
    case Kind::InternalMlp:
        h = g.reshape(h, {B, D_ * T_});
        h = g.relu(linear("fc0", h));
        h = g.relu(linear("fc1", h));
        break;
    case Kind::InternalLinear:
        h = g.reshape(h, {B, D_ * T_});
        break;
    case Kind::ExternalProcess:
        break;
    }
    const NodeId out = linear("head", h);
    return classes_ == 0 ? out : g.softmax(out);
}

NodeId InternalModel::apply(Graph& g, NodeId x) const { return forward(g, x, false); }

Tensor InternalModel::predict_batch(const Tensor& x) const {
    check_input(x, true);
    Graph g;
    return g.value(apply(g, g.constant(x)));
}

void InternalModel::save(const std::string& path) const {
    std::ostringstream os;
    io::write_magic(os, kMagic);
    io::write_u8(os, kVersion);
    io::write_string(os, config_json(cfg_, D_, T_, classes_).dump());
    params_.write(os);
    io::write_file_atomic(path, os.str());
}

std::unique_ptr<InternalModel> InternalModel::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("missing black-box checkpoint '" + path + "'");
    io::expect_magic(is, kMagic, "black-box checkpoint '" + path + "'");
    const auto version = io::read_u8(is);
    if (version != kVersion) throw std::runtime_error("unsupported black-box checkpoint version");
    const auto j = nlohmann::json::parse(io::read_string(is));
    BlackBoxConfig c;
    c.kind = kind_from_name(j.at("kind"));
    c.tcn_channels = j.at("tcn_channels");
    c.kernel = j.at("kernel");
    c.dilations = j.at("dilations").get<std::vector<std::size_t>>();
    c.mlp_hidden = j.at("mlp_hidden");
    c.lr = j.at("lr");
    c.batch_size = j.at("batch_size");
    c.epochs = j.at("epochs");
    c.weight_decay = j.at("weight_decay");
    c.seed = j.at("seed");
    c.qualify_accuracy = j.at("qualify_accuracy");
    auto m = std::make_unique<InternalModel>(c, j.at("channels"), j.at("length"), j.at("n_classes"));
    m->params_.read(is);
    return m;
}

Tensor stack(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw std::invalid_argument("cannot stack an empty batch");
    Shape s{xs.size()};
    for (auto d : xs[0].shape()) s.push_back(d);
    Tensor out(s);
    const std::size_t n = xs[0].size();
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (xs[i].shape() != xs[0].shape()) throw std::invalid_argument("stack: inconsistent instance shapes");
        std::copy(xs[i].values().begin(), xs[i].values().end(), out.values().begin() + i * n);
    }
    return out;
}

Tensor stack(const data::Dataset& d, const std::vector<std::size_t>& idx) {
    std::vector<Tensor> xs;
    xs.reserve(idx.size());
    for (auto i : idx) xs.push_back(d.items.at(i).x);
    return stack(xs);
}

double accuracy(const BlackBox& f, const data::Dataset& d, const std::vector<std::size_t>& idx) {
    if (idx.empty()) return 0.0;
    std::size_t correct = 0;
    constexpr std::size_t chunk = 256;
    for (std::size_t s = 0; s < idx.size(); s += chunk) {
        std::vector<std::size_t> part(idx.begin() + s, idx.begin() + std::min(idx.size(), s + chunk));
        const Tensor y = f.predict_batch(stack(d, part));
        const std::size_t K = f.output_dim();
        for (std::size_t b = 0; b < part.size(); ++b) {
            const double* row = y.values().data() + b * K;
            const auto arg = static_cast<int>(std::max_element(row, row + K) - row);
            if (arg == d.items[part[b]].label()) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(idx.size());
}

namespace {

// Mean loss over the selected instances; class mode cross-entropy, regression MSE.
double batch_loss_value(const InternalModel& m, const data::Dataset& d, const std::vector<std::size_t>& idx) {
    const Tensor y = m.predict_batch(stack(d, idx));
    double loss = 0;
    for (std::size_t b = 0; b < idx.size(); ++b) {
        if (m.n_classes() == 0) {
            const double e = y[b] - d.items[idx[b]].y;
            loss += e * e;
        } else {
            loss -= std::log(std::max(y[b * m.n_classes() + d.items[idx[b]].label()], 1e-300));
        }
    }
    return loss / static_cast<double>(idx.size());
}

double r_squared(const InternalModel& m, const data::Dataset& d, const std::vector<std::size_t>& idx) {
    if (idx.size() < 2) return 0.0;
    const Tensor y = m.predict_batch(stack(d, idx));
    double mean = 0;
    for (auto i : idx) mean += d.items[i].y;
    mean /= static_cast<double>(idx.size());
    double ss_res = 0, ss_tot = 0;
    for (std::size_t b = 0; b < idx.size(); ++b) {
        const double t = d.items[idx[b]].y;
        ss_res += (y[b] - t) * (y[b] - t);
        ss_tot += (t - mean) * (t - mean);
    }
    return ss_tot > 0 ? 1.0 - ss_res / ss_tot : 0.0;
}

}  // namespace

TrainedBlackBox train_blackbox(const data::Dataset& d, const data::Split& split, const BlackBoxConfig& cfg) {
    if (d.size() == 0 || split.train.empty()) throw std::invalid_argument("cannot train a black box on an empty dataset");
    if (cfg.batch_size == 0) throw std::invalid_argument("black-box batch size must be positive");
    TrainedBlackBox out;
    out.model = std::make_unique<InternalModel>(cfg, d.channels, d.length, d.n_classes);
    InternalModel& m = *out.model;
    const std::size_t K = m.output_dim();

    if (!d.regression()) {
        const int first = d.items[split.train[0]].label();
        out.report.degenerate = std::all_of(split.train.begin(), split.train.end(),
                                            [&](std::size_t i) { return d.items[i].label() == first; });
    }

    Optimizer opt({OptimizerKind::Adam, cfg.lr, 0.9, 0.999, 1e-8, 0.9, cfg.weight_decay});
    const std::vector<std::size_t>& val = split.val.empty() ? split.train : split.val;
    double best = -std::numeric_limits<double>::infinity();
    ParameterStore best_params = m.params();
    std::vector<std::size_t> order = split.train;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng rng(derive_seed(cfg.seed, epoch, 0xb1));
        rng.shuffle(order);
        for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
            std::vector<std::size_t> batch(order.begin() + s, order.begin() + std::min(order.size(), s + cfg.batch_size));
            const std::size_t B = batch.size();
            Graph g;
            const NodeId y = m.forward(g, g.constant(stack(d, batch)), true);
            Tensor target({B, K}, 0.0);
            NodeId loss;
            if (d.regression()) {
                for (std::size_t b = 0; b < B; ++b) target[b] = d.items[batch[b]].y;
                loss = g.scale(g.sq_l2(g.sub(y, g.constant(target))), 1.0 / static_cast<double>(B));
            } else {
                for (std::size_t b = 0; b < B; ++b) target[b * K + d.items[batch[b]].label()] = 1.0;
                loss = g.scale(g.sum(g.mul(g.log(y), g.constant(target))), -1.0 / static_cast<double>(B));
            }
            const double lv = g.value(loss).item();
            if (!std::isfinite(lv)) {
                throw std::runtime_error("black-box training diverged: loss " + std::to_string(lv) + " at epoch " +
                                         std::to_string(epoch) + ", batch offset " + std::to_string(s));
            }
            Gradients grads = g.backward(loss);
            opt.step(m.params(), grads);
        }
        const double score = d.regression() ? -batch_loss_value(m, d, val) : accuracy(m, d, val);
        if (score > best) {
            best = score;
            best_params = m.params();
        }
        out.report.epochs_run = epoch + 1;
    }
    if (cfg.epochs > 0) m.params() = best_params;

    const std::vector<std::size_t>& test = split.test.empty() ? val : split.test;
    if (d.regression()) {
        out.report.train_accuracy = r_squared(m, d, split.train);
        out.report.val_accuracy = r_squared(m, d, val);
        out.report.test_accuracy = r_squared(m, d, test);
        out.report.test_loss = batch_loss_value(m, d, test);
        out.report.qualified = std::isfinite(out.report.test_loss);
    } else {
        out.report.train_accuracy = accuracy(m, d, split.train);
        out.report.val_accuracy = accuracy(m, d, val);
        out.report.test_accuracy = accuracy(m, d, test);
        out.report.test_loss = batch_loss_value(m, d, test);
        out.report.qualified = out.report.test_accuracy >= cfg.qualify_accuracy;
    }
    return out;
}

}  // namespace tsae::bb
