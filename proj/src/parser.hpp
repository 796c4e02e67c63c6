#pragma once

#include "model.hpp"

namespace snnconv {

/// Flattens a raw model into the interchange vocabulary: sub-networks are
/// inlined under `<subnet>/<inner>` ids, BatchNorm is folded into the
/// preceding Conv2D/Dense, standalone ReLU nodes become the producer's
/// activation, and nodes that do not reach an output are dropped.
ModelGraph parse(const ModelGraph& raw);

struct ParseFidelity {
    double max_relative_deviation = 0.0;
    std::vector<double> per_output;
    bool ok = true;
};

/// Compares designated outputs of `raw` and `parsed` on `probe_batch`.
ParseFidelity verify_parse(const ModelGraph& raw, const ModelGraph& parsed, const Tensor& probe_batch,
                           double tolerance = 1e-4);

} // namespace snnconv
