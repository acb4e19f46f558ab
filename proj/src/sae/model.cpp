#include "tsae/sae/model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "tsae/io/binary.hpp"
#include "tsae/sae/activation.hpp"

namespace tsae::sae {

namespace {

constexpr char kMagic[] = "TSAE";
constexpr std::uint8_t kVersion = 1;
constexpr std::uint8_t kKindModel = 'M';
constexpr double kSlope = 0.01;

std::string idx(const std::string& base, std::size_t i) { return base + std::to_string(i); }

}  // namespace

std::string activation_name(Activation a) { return a == Activation::JumpRelu ? "jumprelu" : "topk"; }

Activation activation_from_name(const std::string& s) {
    if (s == "jumprelu") return Activation::JumpRelu;
    if (s == "topk") return Activation::TopK;
    throw std::invalid_argument("unknown activation '" + s + "'");
}

std::string decoder_kind_name(DecoderKind k) {
    switch (k) {
    case DecoderKind::MirrorTcn: return "mirror-tcn";
    case DecoderKind::Attention: return "attention";
    case DecoderKind::Decompositional: return "decompositional";
    }
    return "unknown";
}

DecoderKind decoder_kind_from_name(const std::string& s) {
    for (auto k : {DecoderKind::MirrorTcn, DecoderKind::Attention, DecoderKind::Decompositional}) {
        if (decoder_kind_name(k) == s) return k;
    }
    throw std::invalid_argument("unknown decoder kind '" + s + "'");
}

std::size_t SAEConfig::dict_size() const {
    return static_cast<std::size_t>(std::llround(r * static_cast<double>(channels * length)));
}

void SAEConfig::validate() const {
    if (channels == 0 || length == 0) throw std::invalid_argument("sae: input shape must be positive");
    if (!(r > 0)) throw std::invalid_argument("sae: r must be positive");
    const std::size_t d = dict_size();
    if (d < 1) throw std::invalid_argument("sae: dictionary size rounds to zero");
    if (gamma_max < 1) throw std::invalid_argument("sae: gamma_max must be at least 1");
    if (!(p0 > 0 && p0 <= 1)) throw std::invalid_argument("sae: p0 must lie in (0, 1]");
    if (!(eta >= 0)) throw std::invalid_argument("sae: eta must be nonnegative");
    if (activation == Activation::TopK && (k < 1 || k > d)) {
        throw std::invalid_argument("sae: topk k=" + std::to_string(k) + " must lie in [1, d=" + std::to_string(d) + "]");
    }
    if (decoder_kind == DecoderKind::Decompositional && k_max > d) {
        throw std::invalid_argument("sae: K_max=" + std::to_string(k_max) + " exceeds d=" + std::to_string(d));
    }
    if (encoder_width == 0 || tcn_channels == 0 || decoder_channels < 2 || dilations.empty() || kernel == 0) {
        throw std::invalid_argument("sae: layer widths must be positive");
    }
    if (!(phi_init > 0) || !(ste_eps > 0)) throw std::invalid_argument("sae: phi_init and ste_eps must be positive");
}

std::string config_to_json(const SAEConfig& c) {
    nlohmann::json j{{"channels", c.channels},
                     {"length", c.length},
                     {"r", c.r},
                     {"activation", activation_name(c.activation)},
                     {"k", c.k},
                     {"gamma_max", c.gamma_max},
                     {"eta", c.eta},
                     {"encoder_width", c.encoder_width},
                     {"tcn_channels", c.tcn_channels},
                     {"dilations", c.dilations},
                     {"kernel", c.kernel},
                     {"n_blocks", c.n_blocks},
                     {"se_reduction", c.se_reduction},
                     {"decoder_channels", c.decoder_channels},
                     {"decoder_kind", decoder_kind_name(c.decoder_kind)},
                     {"k_max", c.k_max},
                     {"p0", c.p0},
                     {"share_terms", c.share_terms},
                     {"term_hidden", c.term_hidden},
                     {"phi_init", c.phi_init},
                     {"ste_eps", c.ste_eps},
                     {"seed", c.seed}};
    return j.dump();
}

SAEConfig config_from_json(const std::string& s) {
    const auto j = nlohmann::json::parse(s);
    SAEConfig c;
    c.channels = j.at("channels");
    c.length = j.at("length");
    c.r = j.at("r");
    c.activation = activation_from_name(j.at("activation"));
    c.k = j.at("k");
    c.gamma_max = j.at("gamma_max");
    c.eta = j.at("eta");
    c.encoder_width = j.at("encoder_width");
    c.tcn_channels = j.at("tcn_channels");
    c.dilations = j.at("dilations").get<std::vector<std::size_t>>();
    c.kernel = j.at("kernel");
    c.n_blocks = j.at("n_blocks");
    c.se_reduction = j.at("se_reduction");
    c.decoder_channels = j.at("decoder_channels");
    c.decoder_kind = decoder_kind_from_name(j.at("decoder_kind"));
    c.k_max = j.at("k_max");
    c.p0 = j.at("p0");
    c.share_terms = j.at("share_terms");
    c.term_hidden = j.at("term_hidden");
    c.phi_init = j.at("phi_init");
    c.ste_eps = j.at("ste_eps");
    c.seed = j.at("seed");
    return c;
}

SAEModel::SAEModel(SAEConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    d_ = cfg_.dict_size();
    padded_ = (cfg_.length + 3) / 4 * 4;
    Rng rng(derive_seed(cfg_.seed, 0x5ae));
    const std::size_t D = cfg_.channels, T = cfg_.length, H = cfg_.encoder_width;

    std::size_t cin = D;
    for (std::size_t i = 0; i < cfg_.dilations.size(); ++i) {
        nn::init_conv(params_, idx("enc.tcn", i), cin, cfg_.tcn_channels, cfg_.kernel, rng);
        cin = cfg_.tcn_channels;
    }
    nn::init_linear(params_, "enc.in", cfg_.tcn_channels * T, H, rng);
    for (std::size_t i = 0; i < cfg_.n_blocks; ++i) nn::init_fc_block(params_, idx("enc.block", i), H, H, cfg_.se_reduction, rng);
    Tensor M({d_, H});
    for (double& v : M.values()) v = rng.normal();
    params_.add("enc.dict.M", std::move(M));
    params_.add("enc.dict.b", Tensor({d_}, 0.0), false);
    if (cfg_.activation == Activation::JumpRelu) params_.add("enc.log_phi", Tensor({d_}, std::log(cfg_.phi_init)), false);
    renormalize_dictionary();

    if (cfg_.decoder_kind == DecoderKind::Decompositional) {
        params_.add("dec.psi0", Tensor({D * T}, 0.0), false);
        const std::size_t Hh = cfg_.term_hidden;
        for (std::size_t k = 1; k <= cfg_.k_max; ++k) {
            const std::size_t P = d_ - k + 1;
            const std::string base = idx("dec.term", k);
            const std::size_t copies = cfg_.share_terms ? 1 : P;
            for (std::size_t j = 0; j < copies; ++j) {
                const std::string name = cfg_.share_terms ? base : base + "." + std::to_string(j);
                nn::init_linear(params_, name + ".hidden", k, Hh, rng);
                nn::init_linear(params_, name + ".out", Hh, D * T, rng);
            }
            params_.add(base + ".pos_bias", Tensor({P, D * T}, 0.0), false);
        }
        return;
    }
    const std::size_t C = cfg_.decoder_channels;
    nn::init_linear(params_, "dec.in", d_, H, rng);
    nn::init_batch_norm(params_, "dec.in_bn", H);
    for (std::size_t i = 0; i < cfg_.n_blocks; ++i) nn::init_fc_block(params_, idx("dec.block", i), H, H, cfg_.se_reduction, rng);
    nn::init_linear(params_, "dec.expand", H, C * (padded_ / 4), rng);
    if (cfg_.decoder_kind == DecoderKind::Attention) {
        for (const char* n : {"dec.attn.q", "dec.attn.k", "dec.attn.v"}) {
            Tensor w({C, C});
            for (double& v : w.values()) v = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(C)));
            params_.add(n, std::move(w));
        }
    }
    nn::init_conv(params_, "dec.up0", C, C / 2, cfg_.kernel, rng);
    nn::init_conv(params_, "dec.up1", C / 2, D, cfg_.kernel, rng);
}

NodeId SAEModel::param(Graph& g, const std::string& name, const Pass& pass) {
    return pass.trainable ? g.variable(name, params_.get(name)) : g.constant(params_.get(name));
}

NodeId SAEModel::fc_block(nn::Ctx& c, const std::string& name, NodeId x, const Pass&) { return nn::fc_block(c, name, x); }

EncodeNodes SAEModel::encode(Graph& g, NodeId x, const Pass& pass) {
    const Shape xs = g.shape(x);
    if (xs.size() != 3 || xs[1] != cfg_.channels || xs[2] != cfg_.length) {
        throw std::invalid_argument("sae encode: expected [B," + std::to_string(cfg_.channels) + "," +
                                    std::to_string(cfg_.length) + "], got " + shape_str(xs));
    }
    const std::size_t B = xs[0];
    nn::Ctx c{g, params_, pass.training, pass.update_stats, pass.trainable};
    NodeId h = x;
    for (std::size_t i = 0; i < cfg_.dilations.size(); ++i) h = g.leaky_relu(nn::conv(c, idx("enc.tcn", i), h, cfg_.dilations[i]), kSlope);
    h = g.reshape(h, {B, cfg_.tcn_channels * cfg_.length});
    h = g.leaky_relu(nn::linear(c, "enc.in", h), kSlope);
    for (std::size_t i = 0; i < cfg_.n_blocks; ++i) h = fc_block(c, idx("enc.block", i), h, pass);
    const NodeId u = g.add(g.matmul(h, c.var("enc.dict.M"), true), c.var("enc.dict.b"));
    EncodeNodes out{u, u, u};
    if (cfg_.activation == Activation::JumpRelu) {
        out.phi = g.exp(c.var("enc.log_phi"));
        out.code = g.jumprelu(u, out.phi, cfg_.ste_eps);
    } else {
        const Tensor mask = topk_mask(g.value(u), cfg_.k, std::max<std::size_t>(1, pass.gamma));
        out.code = g.mul(g.relu(u), g.constant(mask));
    }
    return out;
}

NodeId SAEModel::attention(Graph& g, NodeId tokens, const Pass& pass) {
    // tokens [B, C, L]; single-head self-attention over the L positions with a residual path.
    const Shape s = g.shape(tokens);
    const std::size_t B = s[0], C = s[1], L = s[2];
    const NodeId eye_l = g.constant([&] {
        Tensor t({L, L}, 0.0);
        for (std::size_t i = 0; i < L; ++i) t[i * L + i] = 1.0;
        return t;
    }());
    const NodeId eye_c = g.constant([&] {
        Tensor t({C, C}, 0.0);
        for (std::size_t i = 0; i < C; ++i) t[i * C + i] = 1.0;
        return t;
    }());
    const NodeId wq = param(g, "dec.attn.q", pass);
    const NodeId wk = param(g, "dec.attn.k", pass);
    const NodeId wv = param(g, "dec.attn.v", pass);
    const double scale = 1.0 / std::sqrt(static_cast<double>(C));
    std::vector<NodeId> outs;
    for (std::size_t b = 0; b < B; ++b) {
        const NodeId x = g.reshape(g.slice(tokens, 0, b, b + 1), {C, L});
        const NodeId xt = g.matmul(eye_l, x, true);  // [L, C]
        const NodeId q = g.matmul(xt, wq, true);
        const NodeId k = g.matmul(xt, wk, true);
        const NodeId v = g.matmul(xt, wv, true);
        const NodeId a = g.softmax(g.scale(g.matmul(q, k, true), scale));  // [L, L]
        const NodeId o = g.matmul(eye_c, g.matmul(a, v), true);           // [C, L]
        outs.push_back(g.reshape(g.add(x, o), {1, C, L}));
    }
    return outs.size() == 1 ? outs[0] : g.concat(outs, 0);
}

NodeId SAEModel::decode_mirror(Graph& g, NodeId code, const Pass& pass) {
    const std::size_t B = g.shape(code)[0];
    nn::Ctx c{g, params_, pass.training, pass.update_stats, pass.trainable};
    NodeId h = g.leaky_relu(nn::batch_norm(c, "dec.in_bn", nn::linear(c, "dec.in", code)), kSlope);
    for (std::size_t i = 0; i < cfg_.n_blocks; ++i) h = fc_block(c, idx("dec.block", i), h, pass);
    const std::size_t C = cfg_.decoder_channels;
    h = g.reshape(nn::linear(c, "dec.expand", h), {B, C, padded_ / 4});
    if (cfg_.decoder_kind == DecoderKind::Attention) h = attention(g, h, pass);
    h = g.leaky_relu(nn::conv(c, "dec.up0", g.upsample(h, 2), 1), kSlope);
    h = nn::conv(c, "dec.up1", g.upsample(h, 2), 1);
    if (padded_ != cfg_.length) h = g.slice(h, 2, 0, cfg_.length);
    return h;
}

NodeId SAEModel::decode_terms(Graph& g, NodeId code, const Pass& pass, std::vector<NodeId>* per_order) {
    if (cfg_.decoder_kind != DecoderKind::Decompositional) throw std::logic_error("decoder is not decompositional");
    const std::size_t B = g.shape(code)[0];
    const std::size_t DT = cfg_.channels * cfg_.length;
    NodeId out = g.add(g.constant(Tensor({B, DT}, 0.0)), param(g, "dec.psi0", pass));
    nn::Ctx c{g, params_, pass.training, pass.update_stats, pass.trainable};
    for (std::size_t k = 1; k <= cfg_.k_max; ++k) {
        const std::size_t P = d_ - k + 1;
        const std::string base = idx("dec.term", k);
        NodeId terms;
        if (cfg_.share_terms) {
            std::vector<NodeId> cols;
            for (std::size_t i = 0; i < k; ++i) cols.push_back(g.reshape(g.slice(code, 1, i, i + P), {B, P, 1}));
            NodeId windows = cols.size() == 1 ? cols[0] : g.concat(cols, 2);
            windows = g.reshape(windows, {B * P, k});
            const NodeId hid = g.leaky_relu(nn::linear(c, base + ".hidden", windows), kSlope);
            terms = g.reshape(nn::linear(c, base + ".out", hid), {B, P, DT});
        } else {
            std::vector<NodeId> parts;
            for (std::size_t j = 0; j < P; ++j) {
                const std::string name = base + "." + std::to_string(j);
                const NodeId w = g.slice(code, 1, j, j + k);
                const NodeId hid = g.leaky_relu(nn::linear(c, name + ".hidden", w), kSlope);
                parts.push_back(g.reshape(nn::linear(c, name + ".out", hid), {B, 1, DT}));
            }
            terms = parts.size() == 1 ? parts[0] : g.concat(parts, 1);
        }
        terms = g.add(terms, param(g, base + ".pos_bias", pass));
        if (pass.masks == MaskMode::Sample) {
            if (!pass.mask_rng) throw std::invalid_argument("mask sampling needs a random stream");
            Tensor m({B, P, 1});
            for (double& v : m.values()) v = pass.mask_rng->bernoulli(cfg_.p0) ? 1.0 : 0.0;
            terms = g.mul(terms, g.constant(std::move(m)));
        } else if (cfg_.p0 != 1.0) {
            terms = g.scale(terms, cfg_.p0);
        }
        if (per_order) per_order->push_back(terms);
        out = g.add(out, g.sum(terms, 1));
    }
    return g.reshape(out, {B, cfg_.channels, cfg_.length});
}

NodeId SAEModel::decode(Graph& g, NodeId c, const Pass& pass) {
    const Shape cs = g.shape(c);
    if (cs.size() != 2 || cs[1] != d_) {
        throw std::invalid_argument("sae decode: expected codes [B," + std::to_string(d_) + "], got " + shape_str(cs));
    }
    if (cfg_.decoder_kind == DecoderKind::Decompositional) return decode_terms(g, c, pass, nullptr);
    return decode_mirror(g, c, pass);
}

namespace {

Tensor as_batch(const Tensor& x, std::size_t rank_single) {
    if (x.rank() == rank_single) {
        Shape s{1};
        for (auto d : x.shape()) s.push_back(d);
        return x.reshaped(s);
    }
    return x;
}

Tensor unbatch(const Tensor& y, bool single) {
    if (!single) return y;
    return y.reshaped(Shape(y.shape().begin() + 1, y.shape().end()));
}

Pass eval_pass() {
    Pass p;
    p.trainable = false;
    return p;
}

}  // namespace

Tensor SAEModel::encode(const Tensor& x) {
    Graph g;
    const Tensor c = g.value(encode(g, g.constant(as_batch(x, 2)), eval_pass()).code);
    return unbatch(c, x.rank() == 2);
}

Tensor SAEModel::pre_activation(const Tensor& x) {
    Graph g;
    const Tensor u = g.value(encode(g, g.constant(as_batch(x, 2)), eval_pass()).pre);
    return unbatch(u, x.rank() == 2);
}

Tensor SAEModel::decode(const Tensor& c) {
    Graph g;
    const Tensor x = g.value(decode(g, g.constant(as_batch(c, 1)), eval_pass()));
    return unbatch(x, c.rank() == 1);
}

Decomposition SAEModel::decode_decompositional(const Tensor& c, MaskMode mode, Rng* rng) {
    if (cfg_.decoder_kind != DecoderKind::Decompositional) {
        throw std::invalid_argument("model uses the " + decoder_kind_name(cfg_.decoder_kind) +
                                    " decoder; retrain with decoder_kind = decompositional");
    }
    Graph g;
    Pass pass = eval_pass();
    pass.masks = mode;
    pass.mask_rng = rng;
    std::vector<NodeId> orders;
    const Tensor cb = as_batch(c, 1);
    const std::size_t B = cb.dim(0), D = cfg_.channels, T = cfg_.length, DT = D * T;
    Decomposition out;
    out.output = g.value(decode_terms(g, g.constant(cb), pass, &orders));
    out.psi0 = params_.get("dec.psi0").reshaped({D, T});
    for (std::size_t k = 1; k <= orders.size(); ++k) {
        const Tensor& v = g.value(orders[k - 1]);
        const std::size_t P = v.dim(1);
        for (std::size_t j = 0; j < P; ++j) {
            Term t{k, j, Tensor({B, D, T})};
            for (std::size_t b = 0; b < B; ++b) {
                std::copy_n(v.values().data() + (b * P + j) * DT, DT, t.value.values().data() + b * DT);
            }
            if (c.rank() == 1) t.value = unbatch(t.value, true);
            out.terms.push_back(std::move(t));
        }
    }
    out.output = unbatch(out.output, c.rank() == 1);
    return out;
}

Tensor SAEModel::thresholds() const {
    if (cfg_.activation != Activation::JumpRelu) return Tensor({d_}, 0.0);
    Tensor phi = params_.get("enc.log_phi");
    for (double& v : phi.values()) v = std::exp(v);
    return phi;
}

void SAEModel::renormalize_dictionary(std::uint64_t step) {
    Tensor& M = params_.get("enc.dict.M");
    const std::size_t H = M.dim(1);
    for (std::size_t r = 0; r < d_; ++r) {
        double* row = M.values().data() + r * H;
        double ss = 0;
        for (std::size_t j = 0; j < H; ++j) ss += row[j] * row[j];
        if (std::sqrt(ss) < 1e-12) {
            Rng rng(derive_seed(cfg_.seed, step, r + 0x10000));
            ss = 0;
            for (std::size_t j = 0; j < H; ++j) {
                row[j] = rng.normal();
                ss += row[j] * row[j];
            }
        }
        const double n = std::sqrt(ss);
        for (std::size_t j = 0; j < H; ++j) row[j] /= n;
    }
}

std::string SAEModel::serialize() const {
    std::ostringstream os;
    io::write_magic(os, kMagic);
    io::write_u8(os, kVersion);
    io::write_u8(os, kKindModel);
    io::write_string(os, config_to_json(cfg_));
    params_.write(os);
    return os.str();
}

void SAEModel::save(const std::string& path) const { io::write_file_atomic(path, serialize()); }

namespace {

SAEModel read_model(std::istream& is, const std::string& what) {
    io::expect_magic(is, kMagic, what);
    if (io::read_u8(is) != kVersion) throw std::runtime_error(what + ": unsupported version");
    if (io::read_u8(is) != kKindModel) throw std::runtime_error(what + ": not an SAE checkpoint");
    SAEModel m(config_from_json(io::read_string(is)));
    m.params().read(is);
    return m;
}

}  // namespace

SAEModel SAEModel::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("missing SAE checkpoint '" + path + "'");
    return read_model(is, "SAE checkpoint '" + path + "'");
}

SAEModel SAEModel::deserialize(const std::string& bytes) {
    std::istringstream is(bytes);
    return read_model(is, "SAE checkpoint");
}

}  // namespace tsae::sae
