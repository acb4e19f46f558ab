#pragma once

#include <string>

#include "tsae/numerics/graph.hpp"
#include "tsae/numerics/params.hpp"
#include "tsae/numerics/rng.hpp"

namespace tsae::nn {

/// Everything a layer needs while building a forward graph.
struct Ctx {
    Graph& g;
    ParameterStore& params;
    bool training = false;
    bool update_stats = false;
    bool trainable = true;  // false: parameters enter the graph as constants

    NodeId var(const std::string& name) {
        return trainable ? g.variable(name, params.get(name)) : g.constant(params.get(name));
    }
};

void init_linear(ParameterStore& p, const std::string& name, std::size_t in, std::size_t out, Rng& rng);
void init_conv(ParameterStore& p, const std::string& name, std::size_t cin, std::size_t cout, std::size_t kernel,
               Rng& rng);
void init_batch_norm(ParameterStore& p, const std::string& name, std::size_t channels);
void init_se(ParameterStore& p, const std::string& name, std::size_t channels, std::size_t reduction, Rng& rng);
/// affine + batch norm + leaky relu + squeeze-excite
void init_fc_block(ParameterStore& p, const std::string& name, std::size_t in, std::size_t out,
                   std::size_t se_reduction, Rng& rng);

/// x [B,in] -> [B,out]
NodeId linear(Ctx& c, const std::string& name, NodeId x);
/// x [B,Cin,T] -> [B,Cout,T], causal dilated
NodeId conv(Ctx& c, const std::string& name, NodeId x, std::size_t dilation);
NodeId batch_norm(Ctx& c, const std::string& name, NodeId x);
/// h [B,C,T]; gates from the time-pooled channel summary, applied multiplicatively
NodeId squeeze_excite(Ctx& c, const std::string& name, NodeId h);
NodeId fc_block(Ctx& c, const std::string& name, NodeId x);

/// SE bottleneck width for a channel count (at least 1).
std::size_t se_hidden(std::size_t channels, std::size_t reduction);

}  // namespace tsae::nn
