#pragma once

#include <span>
#include <vector>

#include "dnbp/autodiff/tape.hpp"

// Differentiable primitives. Rank-2 tensors are row-major [rows x cols] and
// are used for batches of particles (one particle per row).
namespace dnbp::ad {

enum class Activation { identity, relu, sigmoid_scaled };

// Lower bound of the scaled sigmoid used for density-type outputs.
inline constexpr double kSigmoidFloor = 0.005;

// out = weights * input + bias. input is [n] or a batch [k x n].
Var affine(Var input, Var weights, Var bias);

// Zero-padded cross-correlation; kernels are [out_c x in_c x kh x kw].
Var conv2d(Var input, Var kernels, Var bias, std::size_t stride = 2, std::size_t pad = 1);

// 2x2 window, stride 2, ceil mode. Backward routes to the first row-major
// argmax of each window.
Var maxpool2x2(Var input);

Var activation(Var input, Activation mode);
Var relu(Var input);
Var sigmoid_scaled(Var input);

Var concat(Var a, Var b);
// Appends the vector `tail` to every row of `rows` ([k x n] -> [k x (n+m)]).
Var concat_broadcast(Var rows, Var tail);
// Stacks along the first dimension; all parts share trailing extents.
Var concat_rows(std::span<const Var> parts);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double factor);
// Adds the vector `row` to every row of `rows`.
Var add_row(Var rows, Var row);
// Row (i*b + j) of the result is a_i - b_j.
Var outer_difference(Var a, Var b);
Var repeat_rows(Var a, std::size_t times);
// Means over consecutive groups of `group` entries: [k*group] -> [k].
Var group_mean(Var a, std::size_t group);
Var matmul(Var a, Var b);
Var reshape(Var a, Shape shape);

Var sum(Var a);
Var mean(Var a);
Var log(Var a);
Var exp(Var a);
// max(a, floor); the gradient is zero wherever the floor is active.
Var clamp_min(Var a, double floor);
// a / sum(a).
Var normalize(Var a);

// Sum_i w_i * N(x; mu_i, sigma^2 I) for a fixed query point x.
Var gaussian_mixture_density(Var centers, Var weights, std::span<const double> query, double sigma);

// Value-identical leaf with no gradient path back to `a`.
Var detach(Var a);

}  // namespace dnbp::ad
