#include "dnbp/autodiff/nn.hpp"

namespace dnbp::ad {

Var bind(Tape& tape, Parameter& p, GradMode mode) {
    return mode == GradMode::trainable ? tape.parameter(p) : tape.frozen(p);
}

Mlp::Mlp(std::string prefix, std::size_t in, std::vector<DenseLayer> layers)
    : prefix_(std::move(prefix)), in_(in), layers_(std::move(layers)) {}

void Mlp::init(ParameterBlock& block, std::mt19937_64& rng) const {
    std::size_t fan_in = in_;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& l = layers_[i];
        auto& w = block.add(prefix_ + std::to_string(i) + ".weight", {l.out, fan_in});
        if (l.act == Activation::relu) {
            he_uniform(w, fan_in, rng);
        } else {
            lecun_uniform(w, fan_in, rng);
        }
        block.add(prefix_ + std::to_string(i) + ".bias", {l.out});
        fan_in = l.out;
    }
}

Var Mlp::forward(Tape& tape, ParameterBlock& block, Var x, GradMode mode) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        Var w = bind(tape, block.at(prefix_ + std::to_string(i) + ".weight"), mode);
        Var b = bind(tape, block.at(prefix_ + std::to_string(i) + ".bias"), mode);
        x = activation(affine(x, w, b), layers_[i].act);
    }
    return x;
}

ConvStack::ConvStack(std::string prefix, std::size_t in_channels, std::size_t channels, std::size_t units)
    : prefix_(std::move(prefix)), in_channels_(in_channels), channels_(channels), units_(units) {}

void ConvStack::init(ParameterBlock& block, std::mt19937_64& rng) const {
    std::size_t c = in_channels_;
    for (std::size_t i = 0; i < units_; ++i) {
        auto& k = block.add(prefix_ + std::to_string(i) + ".kernel", {channels_, c, 3, 3});
        he_uniform(k, c * 9, rng);
        block.add(prefix_ + std::to_string(i) + ".bias", {channels_});
        c = channels_;
    }
}

Var ConvStack::forward(Tape& tape, ParameterBlock& block, Var image, GradMode mode) const {
    Var x = image;
    for (std::size_t i = 0; i < units_; ++i) {
        Var k = bind(tape, block.at(prefix_ + std::to_string(i) + ".kernel"), mode);
        Var b = bind(tape, block.at(prefix_ + std::to_string(i) + ".bias"), mode);
        x = maxpool2x2(relu(conv2d(x, k, b, 2, 1)));
    }
    return reshape(x, {x.size()});
}

std::size_t ConvStack::output_extent(std::size_t extent, std::size_t units) {
    for (std::size_t i = 0; i < units; ++i) {
        extent = (extent + 1) / 2;  // conv, stride 2, pad 1
        extent = (extent + 1) / 2;  // ceil-mode pool
    }
    return extent;
}

std::size_t ConvStack::feature_dim(std::size_t h, std::size_t w) const {
    return channels_ * output_extent(h, units_) * output_extent(w, units_);
}

}  // namespace dnbp::ad
