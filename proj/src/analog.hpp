#pragma once

#include "model.hpp"

#include <map>
#include <string>
#include <vector>

namespace snnconv {

/// Post-activation values of every node for a batch, keyed by node id (and by
/// `<subnet>/<output>` for sub-network outputs). Each tensor is the node's
/// output_shape with the batch extent prepended.
using ActivationRecord = std::map<std::string, Tensor>;

/// Evaluates every node of `model` (raw or parsed) on `batch`, whose shape is
/// (N, input_shape...). Throws on shape mismatch or non-finite intermediates.
ActivationRecord forward(const ModelGraph& model, const Tensor& batch);

/// Designated outputs only, in `model.outputs` order. Intermediates are
/// released as soon as their last consumer has run.
std::vector<Tensor> forward_outputs(const ModelGraph& model, const Tensor& batch);

/// Wraps a single sample into a batch of one when it matches the model's
/// input shape exactly; batches pass through unchanged.
Tensor as_batch(const ModelGraph& model, const Tensor& sample_or_batch);

} // namespace snnconv
