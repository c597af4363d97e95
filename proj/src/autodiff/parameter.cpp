#include "dnbp/autodiff/parameter.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dnbp::ad {

Parameter::Parameter(std::string n, Shape s)
    : name(std::move(n)),
      shape(std::move(s)),
      value(numel(shape), 0.0),
      grad(value.size(), 0.0),
      first_moment(value.size(), 0.0),
      second_moment(value.size(), 0.0) {}

void Parameter::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

Parameter& ParameterBlock::add(std::string tensor_name, Shape shape) {
    for (const auto& t : tensors) {
        if (t.name == tensor_name) throw std::invalid_argument("duplicate tensor " + tensor_name + " in " + name);
    }
    tensors.emplace_back(std::move(tensor_name), std::move(shape));
    return tensors.back();
}

Parameter& ParameterBlock::at(const std::string& tensor_name) {
    for (auto& t : tensors) {
        if (t.name == tensor_name) return t;
    }
    throw std::out_of_range("no tensor " + tensor_name + " in block " + name);
}

const Parameter& ParameterBlock::at(const std::string& tensor_name) const {
    return const_cast<ParameterBlock*>(this)->at(tensor_name);
}

std::size_t ParameterBlock::parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.value.size();
    return n;
}

void ParameterBlock::zero_grad() {
    for (auto& t : tensors) t.zero_grad();
}

namespace {
void fill_uniform(Parameter& p, double bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : p.value) v = dist(rng);
}
}  // namespace

void he_uniform(Parameter& p, std::size_t fan_in, std::mt19937_64& rng) {
    fill_uniform(p, std::sqrt(6.0 / static_cast<double>(fan_in)), rng);
}

void lecun_uniform(Parameter& p, std::size_t fan_in, std::mt19937_64& rng) {
    fill_uniform(p, std::sqrt(3.0 / static_cast<double>(fan_in)), rng);
}

}  // namespace dnbp::ad
