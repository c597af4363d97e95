#pragma once

#include <random>
#include <string>
#include <vector>

#include "dnbp/autodiff/ops.hpp"
#include "dnbp/autodiff/parameter.hpp"

namespace dnbp::ad {

// Whether a forward pass may send gradient into the network's parameters.
enum class GradMode { trainable, frozen };

Var bind(Tape& tape, Parameter& p, GradMode mode);

struct DenseLayer {
    std::size_t out;
    Activation act;
};

// Stack of fully connected layers stored in a ParameterBlock under
// "<prefix><i>.weight" / "<prefix><i>.bias".
class Mlp {
public:
    Mlp() = default;
    Mlp(std::string prefix, std::size_t in, std::vector<DenseLayer> layers);

    // Registers the tensors in `block` and initializes them: He-uniform for
    // ReLU layers, LeCun-uniform otherwise, zero biases.
    void init(ParameterBlock& block, std::mt19937_64& rng) const;
    Var forward(Tape& tape, ParameterBlock& block, Var x, GradMode mode) const;

    std::size_t in_dim() const { return in_; }
    std::size_t out_dim() const { return layers_.empty() ? in_ : layers_.back().out; }

private:
    std::string prefix_;
    std::size_t in_ = 0;
    std::vector<DenseLayer> layers_;
};

// Repeated [conv(3x3, stride 2, pad 1, ReLU), maxpool(2x2, 2)] units.
class ConvStack {
public:
    ConvStack() = default;
    ConvStack(std::string prefix, std::size_t in_channels, std::size_t channels, std::size_t units);

    void init(ParameterBlock& block, std::mt19937_64& rng) const;
    // [c x h x w] -> flattened feature vector.
    Var forward(Tape& tape, ParameterBlock& block, Var image, GradMode mode) const;

    // Spatial extent after all units for an h x w input.
    static std::size_t output_extent(std::size_t extent, std::size_t units);
    std::size_t feature_dim(std::size_t h, std::size_t w) const;

private:
    std::string prefix_;
    std::size_t in_channels_ = 0;
    std::size_t channels_ = 0;
    std::size_t units_ = 0;
};

}  // namespace dnbp::ad
