#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tsae/numerics/layers.hpp"
#include "tsae/numerics/params.hpp"
#include "tsae/numerics/rng.hpp"

namespace tsae::sae {

enum class Activation { JumpRelu, TopK };
enum class DecoderKind { MirrorTcn, Attention, Decompositional };

std::string activation_name(Activation a);
Activation activation_from_name(const std::string& s);
std::string decoder_kind_name(DecoderKind k);
DecoderKind decoder_kind_from_name(const std::string& s);

struct SAEConfig {
    std::size_t channels = 1;  // D
    std::size_t length = 50;   // T
    double r = 1.5;            // dictionary ratio, d = round(r * D * T)
    Activation activation = Activation::JumpRelu;
    std::size_t k = 4;
    std::size_t gamma_max = 10;
    double eta = 0.1;
    std::size_t encoder_width = 512;
    std::size_t tcn_channels = 32;
    std::vector<std::size_t> dilations{1, 2, 4};
    std::size_t kernel = 3;
    std::size_t n_blocks = 5;
    std::size_t se_reduction = 4;
    std::size_t decoder_channels = 64;
    DecoderKind decoder_kind = DecoderKind::MirrorTcn;
    std::size_t k_max = 2;
    double p0 = 0.9;
    bool share_terms = true;
    std::size_t term_hidden = 16;
    double phi_init = 0.1;
    double ste_eps = 0.1;     // half-width of the threshold pseudo-gradient window
    std::uint64_t seed = 0;

    std::size_t dict_size() const;
    /// Throws on invariant violations (r > 0, d >= 1, gamma_max >= 1, 0 < p0 <= 1, ...).
    void validate() const;
};

std::string config_to_json(const SAEConfig& c);
SAEConfig config_from_json(const std::string& s);

enum class MaskMode { Sample, Expectation };

/// How a forward graph is built.
struct Pass {
    bool training = false;
    bool update_stats = false;
    bool trainable = true;      // parameters as variables
    std::size_t gamma = 1;      // TopK-gamma multiplier
    MaskMode masks = MaskMode::Expectation;
    Rng* mask_rng = nullptr;    // required for MaskMode::Sample
};

struct EncodeNodes {
    NodeId pre;  // u [B,d]
    NodeId phi;  // thresholds [d] (JumpReLU only; equals pre otherwise)
    NodeId code; // c [B,d]
};

/// One additive term of the decompositional decoder.
struct Term {
    std::size_t order = 0;
    std::size_t position = 0;
    Tensor value;  // [B,D,T], or [D,T] for a single code vector
};

struct Decomposition {
    Tensor output;             // [B,D,T], or [D,T] for a single code vector
    Tensor psi0;               // [D,T]
    std::vector<Term> terms;
};

/// Temporal sparse autoencoder: TCN + SE encoder ending in a unit-row dictionary layer,
/// JumpReLU or TopK-gamma sparsification, and a mirrored, attention or decompositional decoder.
class SAEModel {
public:
    explicit SAEModel(SAEConfig cfg);

    const SAEConfig& config() const { return cfg_; }
    std::size_t d() const { return d_; }
    ParameterStore& params() { return params_; }
    const ParameterStore& params() const { return params_; }

    EncodeNodes encode(Graph& g, NodeId x, const Pass& pass);
    NodeId decode(Graph& g, NodeId c, const Pass& pass);
    /// Decompositional decoder with per-order term tensors [B, P_k, D*T].
    NodeId decode_terms(Graph& g, NodeId c, const Pass& pass, std::vector<NodeId>* per_order);

    /// Eval-mode conveniences. x is [B,D,T] or [D,T]; codes are [B,d] or [d].
    Tensor encode(const Tensor& x);
    Tensor pre_activation(const Tensor& x);
    Tensor decode(const Tensor& c);
    Decomposition decode_decompositional(const Tensor& c, MaskMode mode = MaskMode::Expectation, Rng* rng = nullptr);

    Tensor thresholds() const;  // phi = exp(log_phi)
    const Tensor& dictionary() const { return params_.get("enc.dict.M"); }
    /// Divides each dictionary row by its norm; rows with norm < 1e-12 are redrawn from a
    /// Gaussian seeded by (seed, step, row) first.
    void renormalize_dictionary(std::uint64_t step = 0);

    std::uint64_t checksum() const { return params_.checksum(); }
    void save(const std::string& path) const;
    std::string serialize() const;
    static SAEModel load(const std::string& path);
    static SAEModel deserialize(const std::string& bytes);

private:
    NodeId param(Graph& g, const std::string& name, const Pass& pass);
    NodeId fc_block(nn::Ctx& c, const std::string& name, NodeId x, const Pass& pass);
    NodeId decode_mirror(Graph& g, NodeId c, const Pass& pass);
    NodeId attention(Graph& g, NodeId tokens, const Pass& pass);

    SAEConfig cfg_;
    std::size_t d_;
    std::size_t padded_;  // T rounded up to a multiple of 4
    ParameterStore params_;
};

}  // namespace tsae::sae
