#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "tsae/numerics/finite_diff.hpp"
#include "tsae/numerics/layers.hpp"
#include "tsae/sae/activation.hpp"
#include "tsae/sae/model.hpp"

using namespace tsae;
using namespace tsae::sae;

namespace {

SAEConfig small_config(DecoderKind kind = DecoderKind::MirrorTcn, Activation act = Activation::JumpRelu) {
    SAEConfig c;
    c.channels = 2;
    c.length = 10;
    c.r = 0.5;
    c.activation = act;
    c.k = 2;
    c.encoder_width = 12;
    c.tcn_channels = 4;
    c.n_blocks = 2;
    c.decoder_channels = 4;
    c.decoder_kind = kind;
    c.k_max = 2;
    c.p0 = 0.8;
    c.term_hidden = 3;
    c.seed = 5;
    return c;
}

Tensor random_tensor(const Shape& s, Rng& rng) {
    Tensor t(s);
    for (double& v : t.values()) v = rng.normal();
    return t;
}

std::size_t active_count(const Tensor& c) {
    std::size_t n = 0;
    for (double v : c.values()) n += v > 0;
    return n;
}

}  // namespace

TEST_CASE("jumprelu keeps values strictly above the threshold") {
    const Tensor c = jumprelu(Tensor::vector({0.5, 1.3}), Tensor::vector({1.0, 1.0}));
    CHECK(c == Tensor::vector({0.0, 1.3}));
    CHECK(jumprelu(Tensor::vector({1.0, 0.7}), Tensor::vector({1.0, 0.7})) == Tensor::vector({0.0, 0.0}));
    CHECK(jumprelu(Tensor::vector({2.0, -1.0}), Tensor::vector({1.0, 1.0})) == Tensor::vector({2.0, 0.0}));
    const Tensor u = Tensor::vector({0.3, -0.2, 1e-6});
    CHECK(jumprelu(u, Tensor::vector({1e-12, 1e-12, 1e-12})) == Tensor::vector({0.3, 0.0, 1e-6}));
}

TEST_CASE("topk selection and the gamma multiplier") {
    const Tensor c = topk_gamma(Tensor::vector({0.2, 0.9, 0.4}), 1, 1);
    CHECK(c == Tensor::vector({0.0, 0.9, 0.0}));
    CHECK(active_count(topk_gamma(Tensor::vector({0.5, -1.0, -2.0, 0.1}), 3, 1)) == 2);
    CHECK(active_count(topk_gamma(Tensor::vector({-0.5, -1.0}), 1, 1)) == 0);

    Rng rng(3);
    Tensor u({10});
    for (double& v : u.values()) v = rng.uniform(0.1, 1.0);
    CHECK(active_count(topk_gamma(u, 2, 3)) == 6);
    CHECK(active_count(topk_gamma(u, 2, 1)) == 2);
    CHECK(active_count(topk_gamma(u, 4, 5)) == 10);
    // Ties go to the lower index.
    CHECK(topk_mask(Tensor::vector({1.0, 1.0, 1.0}), 2, 1) == Tensor::vector({1.0, 1.0, 0.0}));
    CHECK_THROWS(topk_mask(Tensor::vector({1.0, 2.0}), 3, 1));
}

TEST_CASE("gamma schedule endpoints and midpoint") {
    CHECK(gamma_schedule(0, 100, 10) == 10);
    CHECK(gamma_schedule(100, 100, 10) == 1);
    CHECK(gamma_schedule(50, 100, 10) == 6);
    CHECK(gamma_schedule(7, 0, 10) == 1);
    CHECK(gamma_schedule(0, 100, 1) == 1);
    for (std::size_t t = 1; t <= 100; ++t) CHECK(gamma_schedule(t, 100, 10) <= gamma_schedule(t - 1, 100, 10));
}

TEST_CASE("configuration validation") {
    SAEConfig c = small_config();
    CHECK(c.dict_size() == 10);
    c.r = 0.0;
    CHECK_THROWS(c.validate());
    c = small_config();
    c.p0 = 0.0;
    CHECK_THROWS(c.validate());
    c = small_config();
    c.gamma_max = 0;
    CHECK_THROWS(c.validate());
    c = small_config(DecoderKind::Decompositional);
    c.k_max = 11;
    CHECK_THROWS_WITH(SAEModel{c}, doctest::Contains("K_max"));
    c = small_config(DecoderKind::MirrorTcn, Activation::TopK);
    c.k = 11;
    CHECK_THROWS(SAEModel{c});
    const SAEConfig round = config_from_json(config_to_json(small_config(DecoderKind::Attention)));
    CHECK(config_to_json(round) == config_to_json(small_config(DecoderKind::Attention)));
}

TEST_CASE("all-zero input encodes to all-zero concepts") {
    SAEModel m(small_config());
    const Tensor c = m.encode(Tensor({2, 10}, 0.0));
    CHECK(c.shape() == Shape{10});
    CHECK(active_count(c) == 0);
    CHECK_THROWS_WITH(m.encode(Tensor({3, 10}, 0.0)), doctest::Contains("sae encode"));
}

TEST_CASE("decoded output has the input shape for any length") {
    for (std::size_t T : {8, 10, 13}) {
        for (auto kind : {DecoderKind::MirrorTcn, DecoderKind::Attention, DecoderKind::Decompositional}) {
            SAEConfig cfg = small_config(kind);
            cfg.length = T;
            SAEModel m(cfg);
            Rng rng(T);
            const Tensor c = m.encode(random_tensor({3, 2, T}, rng));
            CHECK(c.shape() == Shape{3, m.d()});
            CHECK(m.decode(c).shape() == Shape{3, 2, T});
            CHECK(m.decode(Tensor({m.d()}, 0.0)).shape() == Shape{2, T});
        }
    }
}

TEST_CASE("zero concepts decode to a bias-only series") {
    SAEModel m(small_config());
    for (auto& [name, t] : m.params().tensors()) {
        if (name.ends_with(".b")) CHECK(std::all_of(t.values().begin(), t.values().end(), [](double v) { return v == 0.0; }));
    }
    const Tensor flat = m.decode(Tensor({m.d()}, 0.0));
    for (double v : flat.values()) CHECK(v == 0.0);

    // With only the output convolution biased, the series is that bias past the causal padding.
    m.params().get("dec.up1.b")[0] = 0.7;
    m.params().get("dec.up1.b")[1] = -1.2;
    const Tensor x = m.decode(Tensor({m.d()}, 0.0));
    for (std::size_t t = 0; t < 10; ++t) {
        CHECK(x.at(0, t) == doctest::Approx(0.7).epsilon(1e-12));
        CHECK(x.at(1, t) == doctest::Approx(-1.2).epsilon(1e-12));
    }
}

TEST_CASE("decompositional decoder is exactly additive") {
    for (bool shared : {true, false}) {
        SAEConfig cfg = small_config(DecoderKind::Decompositional);
        cfg.share_terms = shared;
        SAEModel m(cfg);
        Rng rng(9);
        for (auto& [name, t] : m.params().tensors()) {
            for (double& v : t.values()) v += 0.1 * rng.normal();
        }
        Tensor c({4, m.d()});
        for (double& v : c.values()) v = std::max(0.0, rng.normal());
        for (auto mode : {MaskMode::Expectation, MaskMode::Sample}) {
            Rng masks(2);
            const Decomposition dec = m.decode_decompositional(c, mode, &masks);
            CHECK(dec.terms.size() == 10 + 9);
            for (std::size_t b = 0; b < 4; ++b) {
                for (std::size_t i = 0; i < 20; ++i) {
                    double acc = dec.psi0[i];
                    for (const Term& t : dec.terms) acc += t.value[b * 20 + i];
                    CHECK(std::abs(acc - dec.output[b * 20 + i]) < 1e-12);
                }
            }
        }
    }
}

TEST_CASE("decompositional edge cases") {
    SAEConfig cfg = small_config(DecoderKind::Decompositional);
    cfg.k_max = 0;
    SAEModel bias_only(cfg);
    Rng rng(4);
    for (double& v : bias_only.params().get("dec.psi0").values()) v = rng.normal();
    Tensor c({bias_only.d()});
    for (double& v : c.values()) v = rng.uniform(0.0, 2.0);
    const Decomposition dec = bias_only.decode_decompositional(c);
    CHECK(dec.terms.empty());
    CHECK(dec.output.reshaped({2, 10}) == dec.psi0);

    cfg = small_config(DecoderKind::Decompositional);
    cfg.p0 = 1.0;
    SAEModel full(cfg);
    Rng masks(1);
    const Tensor sampled = full.decode_decompositional(c, MaskMode::Sample, &masks).output;
    CHECK(full.decode(c) == sampled);
    CHECK_THROWS(full.decode_decompositional(c, MaskMode::Sample, nullptr));

    SAEModel mirror(small_config());
    CHECK_THROWS_WITH(mirror.decode_decompositional(c), doctest::Contains("decompositional"));
}

TEST_CASE("squeeze-excite gates lie in (0,1) and scale channels linearly") {
    ParameterStore p;
    Rng rng(8);
    nn::init_se(p, "se", 4, 2, rng);
    Graph g;
    nn::Ctx ctx{g, p, false, false};
    const NodeId zero = nn::squeeze_excite(ctx, "se", g.constant(Tensor({2, 4, 5}, 0.0)));
    for (double v : g.value(zero).values()) CHECK(v == 0.0);

    const Tensor h = random_tensor({1, 4, 5}, rng);
    const Tensor out = g.value(nn::squeeze_excite(ctx, "se", g.constant(h)));
    for (std::size_t ch = 0; ch < 4; ++ch) {
        const double gate = out[ch * 5] / h[ch * 5];
        CHECK(gate > 0.0);
        CHECK(gate < 1.0);
        for (std::size_t t = 1; t < 5; ++t) CHECK(out[ch * 5 + t] == doctest::Approx(gate * h[ch * 5 + t]).epsilon(1e-12));
    }
}

TEST_CASE("dictionary renormalization") {
    SAEModel m(small_config());
    Tensor& M = m.params().get("enc.dict.M");
    const std::size_t H = M.dim(1);
    const Tensor before = M;
    m.renormalize_dictionary();
    for (std::size_t i = 0; i < M.size(); ++i) CHECK(std::abs(M[i] - before[i]) < 1e-15);

    for (std::size_t j = 0; j < H; ++j) {
        M.at(0, j) = 0.0;
        M.at(1, j) = 0.0;
    }
    M.at(0, 0) = 3.0;
    M.at(0, 1) = 4.0;
    for (std::size_t j = 0; j < H; ++j) M.at(2, j) *= 7.5;
    m.renormalize_dictionary(17);
    CHECK(M.at(0, 0) == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(M.at(0, 1) == doctest::Approx(0.8).epsilon(1e-15));
    for (std::size_t r = 0; r < m.d(); ++r) {
        double ss = 0;
        for (std::size_t j = 0; j < H; ++j) ss += M.at(r, j) * M.at(r, j);
        CHECK(std::abs(std::sqrt(ss) - 1.0) < 1e-12);
    }
    // The reseeded row depends only on (seed, step, row).
    SAEModel twin(small_config());
    Tensor& M2 = twin.params().get("enc.dict.M");
    for (std::size_t j = 0; j < H; ++j) M2.at(1, j) = 0.0;
    twin.renormalize_dictionary(17);
    for (std::size_t j = 0; j < H; ++j) CHECK(M2.at(1, j) == M.at(1, j));
}

TEST_CASE("sparsity bound under topk with gamma 1") {
    SAEModel m(small_config(DecoderKind::MirrorTcn, Activation::TopK));
    Rng rng(12);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor c = m.encode(random_tensor({4, 2, 10}, rng));
        for (std::size_t b = 0; b < 4; ++b) {
            std::size_t n = 0;
            for (std::size_t k = 0; k < m.d(); ++k) n += c.at(b, k) > 0;
            CHECK(n <= 2);
        }
        for (double v : c.values()) CHECK(v >= 0.0);
    }
}

TEST_CASE("raising jumprelu thresholds never grows the active set") {
    SAEModel m(small_config());
    Rng rng(13);
    Tensor& log_phi = m.params().get("enc.log_phi");
    for (double& v : log_phi.values()) v = std::log(rng.uniform(0.01, 0.5));
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor x = random_tensor({2, 10}, rng);
        const Tensor u = m.pre_activation(x);
        const Tensor c = m.encode(x);
        for (std::size_t k = 0; k < m.d(); ++k) {
            if (c[k] > 0) CHECK(u[k] > m.thresholds()[k]);
        }
        const Tensor saved = log_phi;
        for (double& v : log_phi.values()) v += rng.uniform(0.0, 1.0);
        CHECK(active_count(m.encode(x)) <= active_count(c));
        log_phi = saved;
    }
}

TEST_CASE("end-to-end reconstruction gradients match finite differences") {
    for (auto kind : {DecoderKind::MirrorTcn, DecoderKind::Attention, DecoderKind::Decompositional}) {
        SAEConfig cfg = small_config(kind, Activation::TopK);
        cfg.length = 6;
        cfg.encoder_width = 6;
        cfg.n_blocks = 1;
        cfg.r = 0.5;
        cfg.k = 3;
        SAEModel m(cfg);
        Rng rng(21);
        for (auto& [name, t] : m.params().tensors()) {
            for (double& v : t.values()) v += 0.05 * rng.normal();
        }
        const Tensor x = random_tensor({3, 2, 6}, rng);
        auto loss_of = [&](const ParamMap& p) {
            for (const auto& [name, t] : p) m.params().get(name) = t;
            Graph g;
            Pass pass;
            pass.training = true;
            const NodeId c = m.encode(g, g.constant(x), pass).code;
            return g.value(g.sq_l2(g.sub(m.decode(g, c, pass), g.constant(x)))).item();
        };
        const ParamMap base = m.params().tensors();
        Graph g;
        Pass pass;
        pass.training = true;
        const NodeId c = m.encode(g, g.constant(x), pass).code;
        const Gradients analytic = g.backward(g.sq_l2(g.sub(m.decode(g, c, pass), g.constant(x))));
        const Gradients numeric = finite_diff_gradient(loss_of, base, 1e-6);
        for (const auto& [name, t] : base) m.params().get(name) = t;
        const GradCheck check = compare_gradients(analytic, numeric, 1e-4, 1e-7);
        INFO(decoder_kind_name(kind), " worst ", check.worst, " rel ", check.max_rel_err);
        CHECK(check.ok);
    }
}

TEST_CASE("checkpoints round-trip bit-exactly") {
    const auto path = std::filesystem::temp_directory_path() / "tsae_test_sae.bin";
    SAEModel m(small_config(DecoderKind::Decompositional));
    Rng rng(30);
    for (double& v : m.params().get("dec.psi0").values()) v = rng.normal();
    m.save(path.string());
    const SAEModel back = SAEModel::load(path.string());
    CHECK(back.checksum() == m.checksum());
    CHECK(back.serialize() == m.serialize());
    CHECK(SAEModel(small_config(DecoderKind::Decompositional)).serialize() ==
          SAEModel(small_config(DecoderKind::Decompositional)).serialize());
    std::filesystem::remove(path);
    CHECK_THROWS_WITH(SAEModel::load(path.string()), doctest::Contains("missing"));
}
