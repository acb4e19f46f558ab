#pragma once

#include <cstddef>

#include "tsae/causal/concepts.hpp"

namespace tsae::metrics {

struct FxResult {
    double value = 0.0;
    std::size_t active = 0;
    std::size_t removed = 0;
    bool no_active = false;  // compared against the plain reconstruction
};

/// ||f(x) - f(g(c with the top ceil(p * |active|) concepts at 0))||^2, concepts ranked by
/// their causal weight in the explanation of x [D,T].
FxResult faithfulness_fx(const Tensor& x, causal::ConceptModel& model, const bb::BlackBox& f,
                         double removal_fraction = 0.2);

}  // namespace tsae::metrics
