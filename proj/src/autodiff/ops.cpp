#include "dnbp/autodiff/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <stdexcept>

namespace dnbp::ad {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using ConstMapVec = Eigen::Map<const Eigen::VectorXd>;
using MapVec = Eigen::Map<Eigen::VectorXd>;

ConstMapMat as_matrix(std::span<const double> v, std::size_t rows, std::size_t cols) {
    return {v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}
MapMat as_matrix(std::span<double> v, std::size_t rows, std::size_t cols) {
    return {v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
    throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " +
                                shape_string(b));
}

void require_same_shape(const char* op, Var a, Var b) {
    if (a.shape() != b.shape()) shape_error(op, a.shape(), b.shape());
}

// Applies an elementwise map with derivative d(out)/d(in) = deriv(in, out).
template <typename F, typename D>
Var unary_map(Var a, F f, D deriv) {
    auto in = a.value();
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
    const std::size_t ia = a.id();
    return a.tape()->record(a.shape(), std::move(out), {a}, [ia, deriv](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        auto x = t.value(ia);
        auto y = t.value(self);
        auto ga = t.grad_mut(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(x[i], y[i]);
    });
}

}  // namespace

Var affine(Var input, Var weights, Var bias) {
    const auto& ws = weights.shape();
    const auto& xs = input.shape();
    if (ws.size() != 2) shape_error("affine", xs, ws);
    const std::size_t m = ws[0], n = ws[1];
    if (bias.shape() != Shape{m}) shape_error("affine", ws, bias.shape());
    std::size_t k;
    Shape out_shape;
    if (xs.size() == 1 && xs[0] == n) {
        k = 1;
        out_shape = {m};
    } else if (xs.size() == 2 && xs[1] == n) {
        k = xs[0];
        out_shape = {k, m};
    } else {
        shape_error("affine", xs, ws);
    }
    std::vector<double> out(k * m);
    auto X = as_matrix(input.value(), k, n);
    auto W = as_matrix(weights.value(), m, n);
    auto b = ConstMapVec(bias.value().data(), static_cast<Eigen::Index>(m));
    auto Y = as_matrix(std::span<double>(out), k, m);
    Y.noalias() = X * W.transpose();
    Y.rowwise() += b.transpose();

    const std::size_t ix = input.id(), iw = weights.id(), ib = bias.id();
    return input.tape()->record(out_shape, std::move(out), {input, weights, bias},
                                [ix, iw, ib, k, m, n](Tape& t, std::size_t self) {
        auto G = as_matrix(t.grad(self), k, m);
        if (t.requires_grad(ix)) {
            auto dX = as_matrix(t.grad_mut(ix), k, n);
            dX.noalias() += G * as_matrix(t.value(iw), m, n);
        }
        if (t.requires_grad(iw)) {
            auto dW = as_matrix(t.grad_mut(iw), m, n);
            dW.noalias() += G.transpose() * as_matrix(t.value(ix), k, n);
        }
        if (t.requires_grad(ib)) {
            MapVec db(t.grad_mut(ib).data(), static_cast<Eigen::Index>(m));
            db += G.colwise().sum().transpose();
        }
    });
}

Var conv2d(Var input, Var kernels, Var bias, std::size_t stride, std::size_t pad) {
    const auto& xs = input.shape();
    const auto& ks = kernels.shape();
    if (xs.size() != 3 || ks.size() != 4 || ks[1] != xs[0]) shape_error("conv2d", xs, ks);
    if (xs[1] == 0 || xs[2] == 0) shape_error("conv2d", xs, ks);
    const std::size_t oc = ks[0], c = xs[0], h = xs[1], w = xs[2], kh = ks[2], kw = ks[3];
    if (bias.shape() != Shape{oc}) shape_error("conv2d", ks, bias.shape());
    if (h + 2 * pad < kh || w + 2 * pad < kw) shape_error("conv2d", xs, ks);
    const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
    const std::size_t ow = (w + 2 * pad - kw) / stride + 1;
    const std::size_t patch = c * kh * kw, npos = oh * ow;

    // im2col: column p holds the receptive field of output position p.
    auto cols = std::make_shared<std::vector<double>>(patch * npos, 0.0);
    auto x = input.value();
    for (std::size_t ci = 0; ci < c; ++ci) {
        for (std::size_t ky = 0; ky < kh; ++ky) {
            for (std::size_t kx = 0; kx < kw; ++kx) {
                const std::size_t row = (ci * kh + ky) * kw + kx;
                double* dst = cols->data() + row * npos;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                        dst[oy * ow + ox] = x[(ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)];
                    }
                }
            }
        }
    }
    std::vector<double> out(oc * npos);
    auto Y = as_matrix(std::span<double>(out), oc, npos);
    Y.noalias() = as_matrix(kernels.value(), oc, patch) * as_matrix(std::span<const double>(*cols), patch, npos);
    Y.colwise() += ConstMapVec(bias.value().data(), static_cast<Eigen::Index>(oc));

    const std::size_t iin = input.id(), ik = kernels.id(), ib = bias.id();
    return input.tape()->record({oc, oh, ow}, std::move(out), {input, kernels, bias},
                                [=](Tape& t, std::size_t self) {
        auto G = as_matrix(t.grad(self), oc, npos);
        const auto C = as_matrix(std::span<const double>(*cols), patch, npos);
        if (t.requires_grad(ik)) as_matrix(t.grad_mut(ik), oc, patch).noalias() += G * C.transpose();
        if (t.requires_grad(ib)) {
            MapVec(t.grad_mut(ib).data(), static_cast<Eigen::Index>(oc)) += G.rowwise().sum();
        }
        if (t.requires_grad(iin)) {
            RowMat dC = as_matrix(t.value(ik), oc, patch).transpose() * G;
            auto dx = t.grad_mut(iin);
            for (std::size_t ci = 0; ci < c; ++ci) {
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const std::size_t row = (ci * kh + ky) * kw + kx;
                        for (std::size_t oy = 0; oy < oh; ++oy) {
                            const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                            for (std::size_t ox = 0; ox < ow; ++ox) {
                                const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                                dx[(ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] +=
                                    dC(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(oy * ow + ox));
                            }
                        }
                    }
                }
            }
        }
    });
}

Var maxpool2x2(Var input) {
    const auto& xs = input.shape();
    if (xs.size() != 3 || xs[1] == 0 || xs[2] == 0) {
        throw std::invalid_argument("maxpool2x2: expected [c x h x w], got " + shape_string(xs));
    }
    const std::size_t c = xs[0], h = xs[1], w = xs[2];
    const std::size_t oh = (h + 1) / 2, ow = (w + 1) / 2;
    std::vector<double> out(c * oh * ow);
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    auto x = input.value();
    for (std::size_t ci = 0; ci < c; ++ci) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                std::size_t best = (ci * h + 2 * oy) * w + 2 * ox;
                for (std::size_t dy = 0; dy < 2; ++dy) {
                    for (std::size_t dx = 0; dx < 2; ++dx) {
                        const std::size_t y = 2 * oy + dy, xx = 2 * ox + dx;
                        if (y >= h || xx >= w) continue;
                        const std::size_t idx = (ci * h + y) * w + xx;
                        if (x[idx] > x[best]) best = idx;
                    }
                }
                const std::size_t o = (ci * oh + oy) * ow + ox;
                out[o] = x[best];
                (*argmax)[o] = best;
            }
        }
    }
    const std::size_t ia = input.id();
    return input.tape()->record({c, oh, ow}, std::move(out), {input}, [ia, argmax](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        auto gx = t.grad_mut(ia);
        for (std::size_t i = 0; i < g.size(); ++i) gx[(*argmax)[i]] += g[i];
    });
}

Var relu(Var input) {
    return unary_map(
        input, [](double v) { return v > 0.0 ? v : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid_scaled(Var input) {
    constexpr double span = 1.0 - kSigmoidFloor;
    return unary_map(
        input,
        [](double v) {
            const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
            return kSigmoidFloor + span * s;
        },
        [](double, double y) {
            const double s = (y - kSigmoidFloor) / span;
            return span * s * (1.0 - s);
        });
}

Var activation(Var input, Activation mode) {
    switch (mode) {
        case Activation::relu: return relu(input);
        case Activation::sigmoid_scaled: return sigmoid_scaled(input);
        case Activation::identity: return input;
    }
    return input;
}

Var concat(Var a, Var b) {
    if (a.rank() != 1 || b.rank() != 1) shape_error("concat", a.shape(), b.shape());
    std::vector<Var> parts{a, b};
    return concat_rows(parts);
}

Var concat_broadcast(Var rows, Var tail) {
    if (rows.rank() != 2 || tail.rank() != 1) shape_error("concat_broadcast", rows.shape(), tail.shape());
    const std::size_t k = rows.shape()[0], n = rows.shape()[1], m = tail.shape()[0];
    std::vector<double> out(k * (n + m));
    auto r = rows.value();
    auto tl = tail.value();
    for (std::size_t i = 0; i < k; ++i) {
        std::copy_n(r.data() + i * n, n, out.data() + i * (n + m));
        std::copy_n(tl.data(), m, out.data() + i * (n + m) + n);
    }
    const std::size_t ir = rows.id(), it = tail.id();
    return rows.tape()->record({k, n + m}, std::move(out), {rows, tail}, [=](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        if (t.requires_grad(ir)) {
            auto gr = t.grad_mut(ir);
            for (std::size_t i = 0; i < k; ++i)
                for (std::size_t j = 0; j < n; ++j) gr[i * n + j] += g[i * (n + m) + j];
        }
        if (t.requires_grad(it)) {
            auto gt = t.grad_mut(it);
            for (std::size_t i = 0; i < k; ++i)
                for (std::size_t j = 0; j < m; ++j) gt[j] += g[i * (n + m) + n + j];
        }
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    Shape trailing(parts[0].shape().begin() + 1, parts[0].shape().end());
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.rank() == 0 || Shape(p.shape().begin() + 1, p.shape().end()) != trailing) {
            shape_error("concat_rows", parts[0].shape(), p.shape());
        }
        rows += p.shape()[0];
    }
    Shape out_shape = parts[0].shape();
    out_shape[0] = rows;
    std::vector<double> out;
    out.reserve(numel(out_shape));
    std::vector<std::size_t> ids, offsets;
    for (const auto& p : parts) {
        offsets.push_back(out.size());
        ids.push_back(p.id());
        auto v = p.value();
        out.insert(out.end(), v.begin(), v.end());
    }
    return parts[0].tape()->record(out_shape, std::move(out), parts, [ids, offsets](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (!t.requires_grad(ids[k])) continue;
            auto gp = t.grad_mut(ids[k]);
            for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offsets[k] + i];
        }
    });
}

namespace {
template <typename F>
Var binary_map(const char* name, Var a, Var b, F f, double da_sign, double db_sign, bool product) {
    require_same_shape(name, a, b);
    auto x = a.value();
    auto y = b.value();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i], y[i]);
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape()->record(a.shape(), std::move(out), {a, b}, [=](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        auto xa = t.value(ia);
        auto xb = t.value(ib);
        if (t.requires_grad(ia)) {
            auto ga = t.grad_mut(ia);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (product ? xb[i] : da_sign);
        }
        if (t.requires_grad(ib)) {
            auto gb = t.grad_mut(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * (product ? xa[i] : db_sign);
        }
    });
}
}  // namespace

Var add(Var a, Var b) { return binary_map("add", a, b, std::plus<>{}, 1.0, 1.0, false); }
Var sub(Var a, Var b) { return binary_map("sub", a, b, std::minus<>{}, 1.0, -1.0, false); }
Var mul(Var a, Var b) { return binary_map("mul", a, b, std::multiplies<>{}, 0.0, 0.0, true); }

Var neg(Var a) { return scale(a, -1.0); }

Var scale(Var a, double factor) {
    return unary_map(
        a, [factor](double v) { return factor * v; }, [factor](double, double) { return factor; });
}

Var add_row(Var rows, Var row) {
    if (rows.rank() != 2 || row.rank() != 1 || row.shape()[0] != rows.shape()[1]) {
        shape_error("add_row", rows.shape(), row.shape());
    }
    const std::size_t k = rows.shape()[0], n = rows.shape()[1];
    std::vector<double> out(rows.value().begin(), rows.value().end());
    auto r = row.value();
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] += r[j];
    const std::size_t ia = rows.id(), ib = row.id();
    return rows.tape()->record(rows.shape(), std::move(out), {rows, row}, [=](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        if (t.requires_grad(ia)) {
            auto ga = t.grad_mut(ia);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (t.requires_grad(ib)) {
            auto gb = t.grad_mut(ib);
            for (std::size_t i = 0; i < k; ++i)
                for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
        }
    });
}

Var outer_difference(Var a, Var b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1]) {
        shape_error("outer_difference", a.shape(), b.shape());
    }
    const std::size_t na = a.shape()[0], nb = b.shape()[0], d = a.shape()[1];
    std::vector<double> out(na * nb * d);
    auto x = a.value();
    auto y = b.value();
    for (std::size_t i = 0; i < na; ++i)
        for (std::size_t j = 0; j < nb; ++j)
            for (std::size_t c = 0; c < d; ++c) out[(i * nb + j) * d + c] = x[i * d + c] - y[j * d + c];
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape()->record({na * nb, d}, std::move(out), {a, b}, [=](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        const bool ga_on = t.requires_grad(ia), gb_on = t.requires_grad(ib);
        std::span<double> ga, gb;
        if (ga_on) ga = t.grad_mut(ia);
        if (gb_on) gb = t.grad_mut(ib);
        for (std::size_t i = 0; i < na; ++i)
            for (std::size_t j = 0; j < nb; ++j)
                for (std::size_t c = 0; c < d; ++c) {
                    const double v = g[(i * nb + j) * d + c];
                    if (ga_on) ga[i * d + c] += v;
                    if (gb_on) gb[j * d + c] -= v;
                }
    });
}

Var repeat_rows(Var a, std::size_t times) {
    if (a.rank() != 2) throw std::invalid_argument("repeat_rows: expected rank 2, got " + shape_string(a.shape()));
    const std::size_t k = a.shape()[0], n = a.shape()[1];
    std::vector<double> out(k * times * n);
    auto x = a.value();
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t r = 0; r < times; ++r) std::copy_n(x.data() + i * n, n, out.data() + (i * times + r) * n);
    const std::size_t ia = a.id();
    return a.tape()->record({k * times, n}, std::move(out), {a}, [=](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        auto ga = t.grad_mut(ia);
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t r = 0; r < times; ++r)
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[(i * times + r) * n + j];
    });
}

Var group_mean(Var a, std::size_t group) {
    if (group == 0 || a.size() % group != 0) {
        throw std::invalid_argument("group_mean: " + shape_string(a.shape()) + " not divisible into groups of " +
                                    std::to_string(group));
    }
    const std::size_t k = a.size() / group;
    std::vector<double> out(k, 0.0);
    auto x = a.value();
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t r = 0; r < group; ++r) out[i] += x[i * group + r];
        out[i] /= static_cast<double>(group);
    }
    const std::size_t ia = a.id();
    return a.tape()->record({k}, std::move(out), {a}, [=](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        auto ga = t.grad_mut(ia);
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t r = 0; r < group; ++r) ga[i * group + r] += g[i] / static_cast<double>(group);
    });
}

Var matmul(Var a, Var b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) shape_error("matmul", a.shape(), b.shape());
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> out(m * n);
    as_matrix(std::span<double>(out), m, n).noalias() = as_matrix(a.value(), m, k) * as_matrix(b.value(), k, n);
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape()->record({m, n}, std::move(out), {a, b}, [=](Tape& t, std::size_t self) {
        auto G = as_matrix(t.grad(self), m, n);
        if (t.requires_grad(ia)) as_matrix(t.grad_mut(ia), m, k).noalias() += G * as_matrix(t.value(ib), k, n).transpose();
        if (t.requires_grad(ib)) as_matrix(t.grad_mut(ib), k, n).noalias() += as_matrix(t.value(ia), m, k).transpose() * G;
    });
}

Var reshape(Var a, Shape shape) {
    if (numel(shape) != a.size()) shape_error("reshape", a.shape(), shape);
    std::vector<double> out(a.value().begin(), a.value().end());
    const std::size_t ia = a.id();
    return a.tape()->record(std::move(shape), std::move(out), {a}, [ia](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        auto ga = t.grad_mut(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

Var sum(Var a) {
    double s = 0.0;
    for (double v : a.value()) s += v;
    const std::size_t ia = a.id();
    return a.tape()->record({1}, {s}, {a}, [ia](Tape& t, std::size_t self) {
        const double g = t.grad(self)[0];
        for (auto& v : t.grad_mut(ia)) v += g;
    });
}

Var mean(Var a) {
    if (a.size() == 0) throw std::invalid_argument("mean of empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Var log(Var a) {
    return unary_map(
        a, [](double v) { return std::log(v); }, [](double x, double) { return 1.0 / x; });
}

Var exp(Var a) {
    return unary_map(
        a, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var clamp_min(Var a, double floor) {
    return unary_map(
        a, [floor](double v) { return v > floor ? v : floor; },
        [floor](double x, double) { return x > floor ? 1.0 : 0.0; });
}

Var normalize(Var a) {
    double s = 0.0;
    for (double v : a.value()) s += v;
    if (!(s > 0.0)) throw std::domain_error("normalize: weights sum to " + std::to_string(s));
    std::vector<double> out(a.value().begin(), a.value().end());
    for (auto& v : out) v /= s;
    const std::size_t ia = a.id();
    return a.tape()->record(a.shape(), std::move(out), {a}, [ia, s](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        auto y = t.value(self);
        double dot = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * y[i];
        auto ga = t.grad_mut(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += (g[i] - dot) / s;
    });
}

Var gaussian_mixture_density(Var centers, Var weights, std::span<const double> query, double sigma) {
    if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_mixture_density: sigma must be positive");
    const std::size_t d = query.size();
    if (centers.rank() != 2 || centers.shape()[1] != d || weights.rank() != 1 ||
        weights.shape()[0] != centers.shape()[0]) {
        shape_error("gaussian_mixture_density", centers.shape(), weights.shape());
    }
    const std::size_t n = centers.shape()[0];
    const double var = sigma * sigma;
    const double norm = std::pow(2.0 * std::numbers::pi * var, -0.5 * static_cast<double>(d));
    auto mu = centers.value();
    auto w = weights.value();
    auto kernel = std::make_shared<std::vector<double>>(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double r2 = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            const double diff = query[c] - mu[i * d + c];
            r2 += diff * diff;
        }
        (*kernel)[i] = norm * std::exp(-0.5 * r2 / var);
        total += w[i] * (*kernel)[i];
    }
    std::vector<double> q(query.begin(), query.end());
    const std::size_t ic = centers.id(), iw = weights.id();
    return centers.tape()->record({1}, {total}, {centers, weights}, [=](Tape& t, std::size_t self) {
        const double g = t.grad(self)[0];
        if (t.requires_grad(iw)) {
            auto gw = t.grad_mut(iw);
            for (std::size_t i = 0; i < n; ++i) gw[i] += g * (*kernel)[i];
        }
        if (t.requires_grad(ic)) {
            auto gc = t.grad_mut(ic);
            auto m = t.value(ic);
            auto wv = t.value(iw);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t c = 0; c < d; ++c)
                    gc[i * d + c] += g * wv[i] * (*kernel)[i] * (q[c] - m[i * d + c]) / var;
        }
    });
}

Var detach(Var a) {
    return a.tape()->leaf(a.shape(), std::vector<double>(a.value().begin(), a.value().end()), false);
}

}  // namespace dnbp::ad
