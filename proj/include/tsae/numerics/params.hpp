#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <set>
#include <string>

#include "tsae/numerics/graph.hpp"

namespace tsae {

/// Named trainable tensors plus batch-norm running statistics, kept in name order
/// so serialization and checksums are deterministic.
class ParameterStore {
public:
    Tensor& add(const std::string& name, Tensor init, bool decay = true);
    BatchNormState& add_bn(const std::string& name, std::size_t channels);

    bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    BatchNormState& bn(const std::string& name);
    const BatchNormState& bn(const std::string& name) const;
    bool decays(const std::string& name) const { return no_decay_.count(name) == 0; }

    std::map<std::string, Tensor>& tensors() { return tensors_; }
    const std::map<std::string, Tensor>& tensors() const { return tensors_; }
    const std::map<std::string, BatchNormState>& bn_states() const { return bn_; }

    /// Graph variable holding the current value of a named tensor.
    NodeId var(Graph& g, const std::string& name) const { return g.variable(name, get(name)); }

    std::size_t parameter_count() const;
    std::uint64_t checksum() const;

    void write(std::ostream& os) const;
    /// Reads values into an already-structured store; names and shapes must match.
    void read(std::istream& is);

private:
    std::map<std::string, Tensor> tensors_;
    std::map<std::string, BatchNormState> bn_;
    std::set<std::string> no_decay_;
};

enum class OptimizerKind { Adam, SgdMomentum };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::Adam;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double momentum = 0.9;
    double weight_decay = 0.0;  // decoupled
};

class Optimizer {
public:
    explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

    void step(ParameterStore& params, const Gradients& grads);
    std::uint64_t steps() const noexcept { return t_; }
    const OptimizerConfig& config() const noexcept { return cfg_; }
    void set_lr(double lr) { cfg_.lr = lr; }

    void write(std::ostream& os) const;
    void read(std::istream& is);

private:
    OptimizerConfig cfg_;
    std::uint64_t t_ = 0;
    std::map<std::string, std::vector<double>> m_;
    std::map<std::string, std::vector<double>> v_;
};

/// Scales all gradients in place so their joint L2 norm is at most max_norm; returns the pre-clip norm.
double clip_global_norm(Gradients& grads, double max_norm);

}  // namespace tsae
