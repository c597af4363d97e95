#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace dnbp::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

struct Parameter;
class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
// owning tape is alive.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape() const { return tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t size() const;
    std::span<const double> value() const;
    std::span<const double> grad() const;
    double item() const;
    bool requires_grad() const;

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

// Records operations in construction order. Because every node is appended
// after its inputs, reverse insertion order is a valid topological order for
// the backward sweep.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }

    Var leaf(Shape shape, std::vector<double> values, bool requires_grad = false);
    Var constant(Shape shape, std::vector<double> values) { return leaf(std::move(shape), std::move(values), false); }
    Var scalar(double v, bool requires_grad = false) { return leaf({1}, {v}, requires_grad); }

    // Binds a parameter tensor as a trainable leaf; repeated calls on the same
    // tape return the same node so gradients accumulate in one place.
    Var parameter(Parameter& p);
    // Binds a parameter by value with no gradient path (a detached view).
    Var frozen(const Parameter& p);

    // Adds each bound parameter's accumulated leaf gradient (times scale)
    // into Parameter::grad.
    void accumulate_parameter_grads(double scale = 1.0);

    void backward(Var root);

    // Node construction for operation implementations. requires_grad is
    // derived from the inputs; the backward closure is dropped when no input
    // needs a gradient or when the tape has gradients disabled.
    Var record(Shape shape, std::vector<double> values, std::initializer_list<Var> inputs, BackwardFn fn);
    Var record(Shape shape, std::vector<double> values, std::span<const Var> inputs, BackwardFn fn);

    const Shape& shape(std::size_t id) const { return nodes_[id].shape; }
    std::span<const double> value(std::size_t id) const { return nodes_[id].value; }
    std::span<const double> grad(std::size_t id);
    std::span<double> grad_mut(std::size_t id);
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Shape shape;
        std::vector<double> value;
        std::vector<double> grad;
        bool requires_grad = false;
        BackwardFn backward;
    };

    std::vector<Node> nodes_;
    std::unordered_map<const Parameter*, std::size_t> trainable_;
    std::unordered_map<const Parameter*, std::size_t> frozen_;
    bool grad_enabled_;
};

}  // namespace dnbp::ad
