#pragma once

#include <cstddef>
#include <vector>

#include "tsae/blackbox/blackbox.hpp"
#include "tsae/numerics/graph.hpp"
#include "tsae/sae/model.hpp"

namespace tsae::causal {

/// An encoder/decoder pair over a concept space of size concepts().
class ConceptModel {
public:
    virtual ~ConceptModel() = default;

    virtual std::size_t concepts() const = 0;
    virtual std::size_t channels() const = 0;
    virtual std::size_t length() const = 0;
    /// [B,D,T] -> [B,d]
    virtual Tensor encode(const Tensor& x) = 0;
    /// [B,d] -> [B,D,T]
    virtual Tensor decode(const Tensor& c) = 0;
    /// Decoder with frozen parameters, so gradients reach the codes only.
    virtual NodeId decode(Graph& g, NodeId c) = 0;
};

/// Non-owning view of a trained SAE in evaluation mode.
class SaeConcepts final : public ConceptModel {
public:
    explicit SaeConcepts(sae::SAEModel& m) : m_(m) {}

    std::size_t concepts() const override { return m_.d(); }
    std::size_t channels() const override { return m_.config().channels; }
    std::size_t length() const override { return m_.config().length; }
    Tensor encode(const Tensor& x) override;
    Tensor decode(const Tensor& c) override;
    NodeId decode(Graph& g, NodeId c) override;

    sae::SAEModel& model() { return m_; }

private:
    sae::SAEModel& m_;
};

/// Linear concept model: c = flat(x) * enc^T, x = reshape(c * dec + bias).
/// enc and dec are [d, D*T]; bias is [D*T].
class LinearToy final : public ConceptModel {
public:
    LinearToy(std::size_t D, std::size_t T, Tensor enc, Tensor dec, Tensor bias);

    std::size_t concepts() const override { return enc_.dim(0); }
    std::size_t channels() const override { return D_; }
    std::size_t length() const override { return T_; }
    Tensor encode(const Tensor& x) override;
    Tensor decode(const Tensor& c) override;
    NodeId decode(Graph& g, NodeId c) override;

private:
    std::size_t D_, T_;
    Tensor enc_, dec_, bias_;
};

/// Index of the largest output per row (0 for regression).
std::vector<std::size_t> predicted_classes(const bb::BlackBox& f, const Tensor& y);
/// Scalarized outputs: probability of cls[b] in class mode, the prediction otherwise.
std::vector<double> scalarize(const bb::BlackBox& f, const Tensor& y, const std::vector<std::size_t>& cls);

/// Row b of a batched tensor, keeping the leading axis ([1,...]).
Tensor row(const Tensor& x, std::size_t b);
/// Rows `idx` of a batched tensor.
Tensor rows(const Tensor& x, const std::vector<std::size_t>& idx);

}  // namespace tsae::causal
