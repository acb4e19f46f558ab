#include "tsae/numerics/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace tsae::nn {

namespace {

Tensor uniform_tensor(Shape s, double bound, Rng& rng) {
    Tensor t(std::move(s));
    for (double& v : t.values()) v = rng.uniform(-bound, bound);
    return t;
}

}  // namespace

std::size_t se_hidden(std::size_t channels, std::size_t reduction) {
    if (reduction == 0) throw std::invalid_argument("squeeze-excite reduction must be positive");
    return std::max<std::size_t>(1, channels / reduction);
}

void init_linear(ParameterStore& p, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    p.add(name + ".w", uniform_tensor({out, in}, std::sqrt(3.0) * bound, rng));
    p.add(name + ".b", Tensor({out}, 0.0), false);
}

void init_conv(ParameterStore& p, const std::string& name, std::size_t cin, std::size_t cout, std::size_t kernel,
               Rng& rng) {
    const double bound = std::sqrt(3.0 / static_cast<double>(cin * kernel));
    p.add(name + ".w", uniform_tensor({cout, cin, kernel}, bound, rng));
    p.add(name + ".b", Tensor({cout, 1}, 0.0), false);
}

void init_batch_norm(ParameterStore& p, const std::string& name, std::size_t channels) {
    p.add(name + ".gamma", Tensor({channels}, 1.0), false);
    p.add(name + ".beta", Tensor({channels}, 0.0), false);
    p.add_bn(name, channels);
}

void init_se(ParameterStore& p, const std::string& name, std::size_t channels, std::size_t reduction, Rng& rng) {
    const std::size_t hidden = se_hidden(channels, reduction);
    init_linear(p, name + ".squeeze", channels, hidden, rng);
    init_linear(p, name + ".excite", hidden, channels, rng);
}

void init_fc_block(ParameterStore& p, const std::string& name, std::size_t in, std::size_t out,
                   std::size_t se_reduction, Rng& rng) {
    init_linear(p, name + ".fc", in, out, rng);
    init_batch_norm(p, name + ".bn", out);
    init_se(p, name + ".se", out, se_reduction, rng);
}

NodeId linear(Ctx& c, const std::string& name, NodeId x) {
    return c.g.add(c.g.matmul(x, c.var(name + ".w"), true), c.var(name + ".b"));
}

NodeId conv(Ctx& c, const std::string& name, NodeId x, std::size_t dilation) {
    return c.g.add(c.g.conv1d(x, c.var(name + ".w"), dilation), c.var(name + ".b"));
}

NodeId batch_norm(Ctx& c, const std::string& name, NodeId x) {
    return c.g.batch_norm(x, c.var(name + ".gamma"), c.var(name + ".beta"), c.params.bn(name), c.training,
                          c.update_stats);
}

NodeId squeeze_excite(Ctx& c, const std::string& name, NodeId h) {
    const Shape s = c.g.shape(h);
    const NodeId pooled = c.g.mean_pool(h);
    const NodeId z = c.g.relu(linear(c, name + ".squeeze", pooled));
    const NodeId gates = c.g.sigmoid(linear(c, name + ".excite", z));
    return c.g.mul(h, c.g.reshape(gates, {s[0], s[1], 1}));
}

NodeId fc_block(Ctx& c, const std::string& name, NodeId x) {
    NodeId h = c.g.leaky_relu(batch_norm(c, name + ".bn", linear(c, name + ".fc", x)), 0.01);
    const Shape s = c.g.shape(h);
    h = squeeze_excite(c, name + ".se", c.g.reshape(h, {s[0], s[1], 1}));
    return c.g.reshape(h, s);
}

}  // namespace tsae::nn
