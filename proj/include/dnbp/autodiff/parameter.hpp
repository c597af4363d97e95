#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dnbp/autodiff/tape.hpp"

namespace dnbp::ad {

// A named trainable tensor with its Adam moments.
struct Parameter {
    std::string name;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<double> first_moment;
    std::vector<double> second_moment;

    Parameter() = default;
    Parameter(std::string n, Shape s);

    void zero_grad();
};

// Named group of parameters sharing one Adam step counter (one network).
struct ParameterBlock {
    std::string name;
    std::vector<Parameter> tensors;
    std::uint64_t step = 0;

    Parameter& add(std::string tensor_name, Shape shape);
    Parameter& at(const std::string& tensor_name);
    const Parameter& at(const std::string& tensor_name) const;
    std::size_t parameter_count() const;
    void zero_grad();
};

// Uniform(-sqrt(6/fan_in), +sqrt(6/fan_in)); suited to ReLU layers.
void he_uniform(Parameter& p, std::size_t fan_in, std::mt19937_64& rng);
// Uniform(-sqrt(3/fan_in), +sqrt(3/fan_in)); used for linear/sigmoid heads.
void lecun_uniform(Parameter& p, std::size_t fan_in, std::mt19937_64& rng);

}  // namespace dnbp::ad
