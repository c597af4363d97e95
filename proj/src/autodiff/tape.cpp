#include "dnbp/autodiff/tape.hpp"

#include <sstream>
#include <stdexcept>

#include "dnbp/autodiff/parameter.hpp"

namespace dnbp::ad {

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

const Shape& Var::shape() const { return tape_->shape(id_); }
std::size_t Var::size() const { return tape_->value(id_).size(); }
std::span<const double> Var::value() const { return tape_->value(id_); }
std::span<const double> Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

double Var::item() const {
    auto v = value();
    if (v.size() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_string(shape()));
    return v[0];
}

Var Tape::leaf(Shape shape, std::vector<double> values, bool requires_grad) {
    if (numel(shape) != values.size()) {
        throw std::invalid_argument("leaf: shape " + shape_string(shape) + " does not hold " +
                                    std::to_string(values.size()) + " values");
    }
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(values);
    n.requires_grad = requires_grad && grad_enabled_;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

Var Tape::parameter(Parameter& p) {
    if (auto it = trainable_.find(&p); it != trainable_.end()) return {this, it->second};
    Var v = leaf(p.shape, p.value, true);
    trainable_.emplace(&p, v.id());
    return v;
}

Var Tape::frozen(const Parameter& p) {
    if (auto it = frozen_.find(&p); it != frozen_.end()) return {this, it->second};
    Var v = leaf(p.shape, p.value, false);
    frozen_.emplace(&p, v.id());
    return v;
}

void Tape::accumulate_parameter_grads(double scale) {
    for (auto& [param, id] : trainable_) {
        auto* p = const_cast<Parameter*>(param);
        const auto& g = nodes_[id].grad;
        if (g.empty()) continue;
        if (p->grad.size() != g.size()) p->grad.assign(g.size(), 0.0);
        for (std::size_t i = 0; i < g.size(); ++i) p->grad[i] += scale * g[i];
    }
}

std::span<const double> Tape::grad(std::size_t id) { return grad_mut(id); }

std::span<double> Tape::grad_mut(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
}

Var Tape::record(Shape shape, std::vector<double> values, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(shape), std::move(values), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(fn));
}

Var Tape::record(Shape shape, std::vector<double> values, std::span<const Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& in : inputs) {
        if (in.tape() != this) throw std::invalid_argument("operation mixes nodes from different tapes");
        needs = needs || nodes_[in.id()].requires_grad;
    }
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(values);
    n.requires_grad = needs && grad_enabled_;
    if (n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

void Tape::backward(Var root) {
    if (root.tape() != this) throw std::invalid_argument("backward: root belongs to another tape");
    if (root.size() != 1) {
        throw std::invalid_argument("backward: root must be scalar, got shape " + shape_string(root.shape()));
    }
    if (!nodes_[root.id()].requires_grad) return;
    grad_mut(root.id())[0] += 1.0;
    for (std::size_t id = root.id() + 1; id-- > 0;) {
        auto& n = nodes_[id];
        if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
        n.backward(*this, id);
    }
}

}  // namespace dnbp::ad
