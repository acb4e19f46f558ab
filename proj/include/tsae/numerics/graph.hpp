#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "tsae/numerics/tensor.hpp"

namespace tsae {

/// The fixed operation set of the differentiable substrate.
enum class OpKind {
    Leaf,
    MatMul,
    Add,
    Mul,
    Conv1dDilated,
    LeakyRelu,
    Relu,
    Sigmoid,
    Softmax,
    BatchNorm,
    LayerMeanPool,
    Reshape,
    UpsampleNearest,
    Concat,
    Slice,
    Sum,
    Mean,
    SqL2,
    Log,
    Exp,
    CosineSim,
    JumpRelu,
    Step,
    External,
};

std::string_view op_name(OpKind kind);
/// Parses the snake_case op identifier ("conv1d_dilated", "sq_l2", ...). Throws on unknown names.
OpKind op_kind_from_name(std::string_view name);

/// Running statistics owned by a model; batch_norm reads them in eval mode and
/// updates them (momentum-weighted) in training mode.
struct BatchNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    BatchNormState() = default;
    explicit BatchNormState(std::size_t channels)
        : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

/// A function evaluated outside the graph, with a caller-supplied vector-Jacobian product.
struct ExternalFunction {
    std::string name;
    std::function<Tensor(const Tensor& x)> forward;
    std::function<Tensor(const Tensor& x, const Tensor& y, const Tensor& grad_y)> vjp;
};

struct OpAttrs {
    double slope = 0.01;
    std::size_t dilation = 1;
    std::size_t factor = 2;
    std::optional<std::size_t> axis;
    std::size_t start = 0;
    std::size_t stop = 0;
    Shape shape;
    bool transpose_b = false;
    bool training = true;
    bool update_stats = true;
    BatchNormState* bn = nullptr;
    double ste_eps = 1e-3;
    std::shared_ptr<const ExternalFunction> external;
};

using NodeId = std::size_t;
using Gradients = std::map<std::string, Tensor>;

/// Tape-based reverse-mode graph. Nodes are appended in topological order, so the
/// backward sweep is a single reverse pass. Named variables are the differentiable
/// leaves; requesting the same name twice returns the same node so fan-out
/// gradients accumulate.
class Graph {
public:
    Graph() = default;

    NodeId constant(Tensor value);
    NodeId variable(const std::string& name, Tensor value);
    NodeId apply(OpKind kind, std::span<const NodeId> inputs, const OpAttrs& attrs = {});

    NodeId matmul(NodeId a, NodeId b, bool transpose_b = false);
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId a, double s);
    NodeId add_scalar(NodeId a, double s);
    NodeId conv1d(NodeId x, NodeId w, std::size_t dilation);
    NodeId leaky_relu(NodeId x, double slope = 0.01);
    NodeId relu(NodeId x);
    NodeId sigmoid(NodeId x);
    NodeId softmax(NodeId x);
    NodeId batch_norm(NodeId x, NodeId gamma, NodeId beta, BatchNormState& state, bool training,
                      bool update_stats = true);
    NodeId mean_pool(NodeId x);
    NodeId reshape(NodeId x, Shape shape);
    NodeId upsample(NodeId x, std::size_t factor);
    NodeId concat(std::span<const NodeId> xs, std::size_t axis);
    NodeId slice(NodeId x, std::size_t axis, std::size_t start, std::size_t stop);
    NodeId sum(NodeId x, std::optional<std::size_t> axis = std::nullopt);
    NodeId mean(NodeId x, std::optional<std::size_t> axis = std::nullopt);
    NodeId sq_l2(NodeId x);
    NodeId log(NodeId x);
    NodeId exp(NodeId x);
    NodeId cosine_sim(NodeId a, NodeId b);
    NodeId jumprelu(NodeId u, NodeId phi, double ste_eps = 1e-3);
    NodeId step(NodeId u, NodeId phi, double ste_eps = 1e-3);
    NodeId external(NodeId x, std::shared_ptr<const ExternalFunction> fn);

    const Tensor& value(NodeId id) const;
    const Shape& shape(NodeId id) const { return value(id).shape(); }
    bool requires_grad(NodeId id) const;
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Runs the reverse sweep from a single-element loss node and returns the
    /// gradient of every named variable reachable from it.
    Gradients backward(NodeId loss);
    /// Gradient of an arbitrary node from the most recent backward() call.
    const Tensor& grad(NodeId id) const;

private:
    struct Node {
        OpKind kind = OpKind::Leaf;
        std::vector<NodeId> inputs;
        OpAttrs attrs;
        Tensor value;
        Tensor grad;
        std::vector<double> aux;
        std::string name;
        bool requires_grad = false;
    };

    NodeId push(Node node);
    Tensor forward(OpKind kind, const std::vector<NodeId>& inputs, const OpAttrs& attrs,
                   std::vector<double>& aux) const;
    void backward_node(const Node& node);
    Tensor& grad_buffer(NodeId id);

    std::vector<Node> nodes_;
    std::unordered_map<std::string, NodeId> variables_;
};

}  // namespace tsae
