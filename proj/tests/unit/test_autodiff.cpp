#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "dnbp/autodiff/adam.hpp"
#include "dnbp/autodiff/checkpoint.hpp"
#include "dnbp/autodiff/nn.hpp"
#include "dnbp/autodiff/ops.hpp"
#include "support/gradcheck.hpp"

using namespace dnbp;
using dnbp::testing::gradcheck;
using dnbp::testing::random_values;

namespace {
std::vector<double> values_of(ad::Var v) { return {v.value().begin(), v.value().end()}; }
}  // namespace

TEST_CASE("affine forward on small cases") {
    ad::Tape t;
    auto y = ad::affine(t.constant({2}, {1, 0}), t.constant({2, 2}, {1, 0, 0, 1}), t.constant({2}, {0, 0}));
    CHECK(values_of(y) == std::vector<double>{1, 0});
    auto z = ad::affine(t.constant({1}, {2}), t.constant({1, 1}, {3}), t.constant({1}, {1}));
    CHECK(z.item() == 7.0);
}

TEST_CASE("affine shape mismatch names both shapes") {
    ad::Tape t;
    try {
        ad::affine(t.constant({3}, {1, 2, 3}), t.constant({2, 2}, {1, 0, 0, 1}), t.constant({2}, {0, 0}));
        FAIL("expected throw");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[3]") != std::string::npos);
        CHECK(msg.find("[2x2]") != std::string::npos);
    }
}

TEST_CASE("affine 64->64 gradient matches finite differences") {
    std::mt19937_64 rng(11);
    const double err = gradcheck(
        {{{4, 64}, random_values(256, rng)}, {{64, 64}, random_values(4096, rng)}, {{64}, random_values(64, rng)}},
        [](ad::Tape&, const std::vector<ad::Var>& v) {
            return ad::sum(ad::mul(ad::affine(v[0], v[1], v[2]), ad::affine(v[0], v[1], v[2])));
        });
    CHECK(err < 1e-4);
}

TEST_CASE("conv2d forward matches dense convolution") {
    ad::Tape t;
    auto zero = ad::conv2d(t.constant({1, 4, 4}, std::vector<double>(16, 0.0)), t.constant({1, 1, 3, 3}, std::vector<double>(9, 1.0)),
                           t.constant({1}, {0.0}));
    for (double v : zero.value()) CHECK(v == 0.0);

    auto y = ad::conv2d(t.constant({1, 4, 4}, std::vector<double>(16, 1.0)), t.constant({1, 1, 3, 3}, std::vector<double>(9, 1.0)),
                        t.constant({1}, {0.0}));
    CHECK(y.shape() == ad::Shape{1, 2, 2});
    // Top-left output sees the 2x2 valid corner of the padded window.
    CHECK(y.value()[0] == 4.0);
    CHECK(y.value()[3] == 9.0);

    auto odd = ad::conv2d(t.constant({3, 5, 7}, std::vector<double>(105, 0.5)), t.constant({10, 3, 3, 3}, std::vector<double>(270, 0.1)),
                          t.constant({10}, std::vector<double>(10, 0.0)));
    CHECK(odd.shape() == ad::Shape{10, 3, 4});
}

TEST_CASE("conv2d channel mismatch is an error") {
    ad::Tape t;
    CHECK_THROWS_AS(ad::conv2d(t.constant({2, 4, 4}, std::vector<double>(32, 0.0)), t.constant({1, 3, 3, 3}, std::vector<double>(27, 0.0)),
                               t.constant({1}, {0.0})),
                    std::invalid_argument);
}

TEST_CASE("conv2d gradients match finite differences") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 3; ++trial) {
        const double err = gradcheck({{{2, 7, 6}, random_values(84, rng)},
                                      {{10, 2, 3, 3}, random_values(180, rng)},
                                      {{10}, random_values(10, rng)}},
                                     [](ad::Tape&, const std::vector<ad::Var>& v) {
                                         auto y = ad::conv2d(v[0], v[1], v[2]);
                                         return ad::sum(ad::mul(y, y));
                                     });
        CHECK(err < 1e-4);
    }
}

TEST_CASE("maxpool2x2 forward, ceil mode, and tie-break") {
    ad::Tape t;
    CHECK(ad::maxpool2x2(t.constant({1, 2, 2}, {1, 2, 3, 4})).item() == 4.0);
    CHECK(ad::maxpool2x2(t.constant({1, 1, 1}, {-3.5})).item() == -3.5);
    CHECK(ad::maxpool2x2(t.constant({1, 3, 3}, std::vector<double>(9, 0.0))).shape() == ad::Shape{1, 2, 2});

    auto x = t.leaf({1, 2, 2}, {5, 5, 5, 5}, true);
    t.backward(ad::sum(ad::maxpool2x2(x)));
    CHECK(values_of(x) == std::vector<double>{5, 5, 5, 5});
    auto g = x.grad();
    CHECK(g[0] == 1.0);
    CHECK(g[1] == 0.0);
    CHECK(g[2] == 0.0);
    CHECK(g[3] == 0.0);
}

TEST_CASE("activations") {
    ad::Tape t;
    CHECK(ad::relu(t.scalar(-1.0)).item() == 0.0);
    CHECK(ad::sigmoid_scaled(t.scalar(0.0)).item() == doctest::Approx(0.5025).epsilon(1e-12));
    CHECK(ad::sigmoid_scaled(t.scalar(-1e6)).item() >= 0.005);
    CHECK(ad::sigmoid_scaled(t.scalar(1e6)).item() <= 1.0);
}

TEST_CASE("concat forward and gradient split") {
    ad::Tape t;
    CHECK(values_of(ad::concat(t.constant({1}, {1}), t.constant({2}, {2, 3}))) == std::vector<double>{1, 2, 3});
    CHECK(values_of(ad::concat(t.constant({0}, {}), t.constant({1}, {5}))) == std::vector<double>{5});
    auto a = t.leaf({3}, {1, 2, 3}, true);
    auto b = t.leaf({2}, {4, 5}, true);
    t.backward(ad::sum(ad::concat(a, b)));
    for (double g : a.grad()) CHECK(g == 1.0);
    CHECK_THROWS_AS(ad::concat(t.constant({1, 1}, {1}), b), std::invalid_argument);
}

TEST_CASE("backward basics") {
    ad::Tape t;
    auto x = t.scalar(2.0, true);
    t.backward(x);
    CHECK(x.grad()[0] == 1.0);

    ad::Tape t2;
    auto y = t2.scalar(3.0, true);
    t2.backward(ad::mul(y, y));
    CHECK(y.grad()[0] == 6.0);

    ad::Tape t3;
    CHECK_THROWS_AS(t3.backward(t3.leaf({2}, {1, 2}, true)), std::invalid_argument);
}

TEST_CASE("diamond graph accumulates gradients") {
    ad::Tape t;
    auto x = t.scalar(1.5, true);
    auto a = ad::scale(x, 2.0);
    auto b = ad::mul(x, x);
    t.backward(ad::add(a, b));  // d/dx (2x + x^2) = 2 + 2x
    CHECK(x.grad()[0] == doctest::Approx(5.0));
}

TEST_CASE("detach blocks gradient and preserves values") {
    ad::Tape t;
    auto x = t.leaf({2}, {1.0, -2.0}, true);
    auto y = t.leaf({2}, {3.0, 4.0}, true);
    auto dx = ad::detach(x);
    CHECK(values_of(dx) == values_of(x));
    t.backward(ad::sum(ad::mul(dx, y)));
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 0.0);
    CHECK(y.grad()[0] == 1.0);
    CHECK(y.grad()[1] == -2.0);
}

TEST_CASE("composite primitives pass finite-difference checks on random instances") {
    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 20; ++trial) {
        const auto a = random_values(12, rng);
        const auto b = random_values(12, rng);
        const auto pos = random_values(6, rng, 0.1, 1.0);
        const auto row = random_values(3, rng);
        std::vector<double> q = random_values(2, rng);
        CHECK(gradcheck({{{4, 3}, a}, {{4, 3}, b}, {{3}, row}},
                        [](ad::Tape&, const std::vector<ad::Var>& v) {
                            auto s = ad::add(ad::mul(v[0], v[1]), ad::sub(v[0], ad::neg(v[1])));
                            auto r = ad::add_row(s, v[2]);
                            auto rep = ad::repeat_rows(r, 2);
                            auto gm = ad::group_mean(ad::reshape(rep, {24}), 3);
                            return ad::sum(ad::mul(gm, gm));
                        }) < 1e-4);
        CHECK(gradcheck({{{6}, pos}},
                        [](ad::Tape&, const std::vector<ad::Var>& v) {
                            auto n = ad::normalize(v[0]);
                            return ad::sum(ad::log(ad::mul(n, ad::exp(v[0]))));
                        }) < 1e-4);
        CHECK(gradcheck({{{3, 2}, random_values(6, rng)}, {{3}, random_values(3, rng, 0.1, 1.0)}},
                        [q](ad::Tape&, const std::vector<ad::Var>& v) {
                            return ad::log(ad::gaussian_mixture_density(v[0], v[1], q, 0.7));
                        }) < 1e-4);
        CHECK(gradcheck({{{3, 2}, random_values(6, rng)}, {{4, 2}, random_values(8, rng)}, {{12, 1}, random_values(12, rng)}},
                        [](ad::Tape&, const std::vector<ad::Var>& v) {
                            auto d = ad::outer_difference(v[0], v[1]);  // [12 x 2]
                            auto m = ad::matmul(ad::reshape(d, {2, 12}), v[2]);
                            return ad::sum(ad::mul(m, m));
                        }) < 1e-4);
        CHECK(gradcheck({{{3, 2}, random_values(6, rng)}, {{4}, random_values(4, rng)}, {{5}, random_values(5, rng)}},
                        [](ad::Tape&, const std::vector<ad::Var>& v) {
                            auto c = ad::concat_broadcast(v[0], v[1]);
                            std::vector<ad::Var> parts{ad::reshape(c, {18}), v[2]};
                            auto all = ad::concat_rows(parts);
                            return ad::sum(ad::mul(ad::sigmoid_scaled(all), all));
                        }) < 1e-4);
        CHECK(gradcheck({{{2, 5, 5}, random_values(50, rng)}},
                        [](ad::Tape&, const std::vector<ad::Var>& v) {
                            auto p = ad::maxpool2x2(v[0]);
                            return ad::sum(ad::mul(p, p));
                        }) < 1e-4);
    }
}

TEST_CASE("mlp and conv stack gradients over parameters") {
    std::mt19937_64 rng(3);
    ad::ParameterBlock block{"net", {}, 0};
    ad::ConvStack conv("conv", 3, 10, 5);
    ad::Mlp head("fc", 2 + 10, {{64, ad::Activation::relu}, {64, ad::Activation::relu}, {1, ad::Activation::sigmoid_scaled}});
    conv.init(block, rng);
    head.init(block, rng);
    CHECK(conv.feature_dim(128, 128) == 10);
    CHECK(conv.feature_dim(64, 64) == 10);
    const auto image = random_values(3 * 16 * 16, rng);
    const auto particles = random_values(8, rng);
    const double err = dnbp::testing::gradcheck_parameters({&block}, [&](ad::Tape& t) {
        auto feat = conv.forward(t, block, t.constant({3, 16, 16}, image), ad::GradMode::trainable);
        auto x = ad::concat_broadcast(t.constant({4, 2}, particles), feat);
        return ad::sum(ad::log(head.forward(t, block, x, ad::GradMode::trainable)));
    });
    CHECK(err < 1e-4);
}

TEST_CASE("frozen binding yields no parameter gradient") {
    std::mt19937_64 rng(1);
    ad::ParameterBlock block{"net", {}, 0};
    ad::Mlp mlp("fc", 3, {{4, ad::Activation::relu}, {1, ad::Activation::identity}});
    mlp.init(block, rng);
    ad::Tape t;
    auto x = t.leaf({3}, {0.1, 0.2, 0.3}, true);
    t.backward(ad::sum(mlp.forward(t, block, x, ad::GradMode::frozen)));
    t.accumulate_parameter_grads();
    for (const auto& p : block.tensors)
        for (double g : p.grad) CHECK(g == 0.0);
    double norm = 0.0;
    for (double g : x.grad()) norm += std::abs(g);
    CHECK(norm > 0.0);
}

TEST_CASE("tape evaluation is deterministic") {
    std::mt19937_64 rng(8);
    const auto w = random_values(64 * 12, rng);
    const auto x = random_values(5 * 12, rng);
    auto run = [&] {
        ad::Tape t;
        auto y = ad::sigmoid_scaled(ad::affine(t.constant({5, 12}, x), t.constant({64, 12}, w), t.constant({64}, std::vector<double>(64, 0.1))));
        return values_of(y);
    };
    CHECK(run() == run());
}

TEST_CASE("adam first step, zero gradient, and quadratic descent") {
    ad::ParameterBlock b{"b", {}, 0};
    auto& p = b.add("w", {3});
    p.value = {1.0, -2.0, 0.5};
    p.grad = {1.0, 1.0, 1.0};
    REQUIRE(ad::adam_step(b, {}).applied);
    CHECK(p.value[0] == doctest::Approx(1.0 - 1e-3).epsilon(1e-9));
    CHECK(p.value[1] == doctest::Approx(-2.0 - 1e-3).epsilon(1e-9));
    CHECK(p.grad[0] == 0.0);
    CHECK(b.step == 1);

    ad::ParameterBlock z{"z", {}, 0};
    auto& q = z.add("w", {2});
    q.value = {0.3, -0.7};
    ad::adam_step(z, {});
    CHECK(q.value == std::vector<double>{0.3, -0.7});

    // Scalar reference: theta <- theta - lr * mhat / (sqrt(vhat) + eps) on f = theta^2 / 2.
    ad::ParameterBlock s{"s", {}, 0};
    auto& th = s.add("theta", {1});
    th.value = {1.0};
    double ref = 1.0, m = 0.0, v = 0.0, prev = 1.0;
    for (int k = 1; k <= 100; ++k) {
        th.grad = {th.value[0]};
        ad::adam_step(s, {});
        m = 0.9 * m + 0.1 * ref;
        v = 0.999 * v + 0.001 * ref * ref;
        ref -= 1e-3 * (m / (1 - std::pow(0.9, k))) / (std::sqrt(v / (1 - std::pow(0.999, k))) + 1e-8);
        CHECK(std::abs(th.value[0]) < prev);
        prev = std::abs(th.value[0]);
        CHECK(th.value[0] == doctest::Approx(ref).epsilon(1e-12));
    }
}

TEST_CASE("adam skips non-finite gradients") {
    ad::ParameterBlock b{"b", {}, 0};
    auto& p = b.add("w", {2});
    p.value = {1.0, 2.0};
    p.grad = {std::nan(""), 0.0};
    auto r = ad::adam_step(b, {});
    CHECK_FALSE(r.applied);
    CHECK(r.diagnostic.find("b/w") != std::string::npos);
    CHECK(p.value == std::vector<double>{1.0, 2.0});
    CHECK(b.step == 0);
}

TEST_CASE("checkpoint round trip and corruption handling") {
    std::mt19937_64 rng(4);
    ad::ParameterBlock a{"unary.0", {}, 7};
    ad::Mlp("fc", 3, {{4, ad::Activation::relu}}).init(a, rng);
    a.tensors[0].first_moment[2] = 0.25;
    const auto dir = std::filesystem::temp_directory_path() / "dnbp_ckpt_test";
    std::filesystem::create_directories(dir);
    const auto path = dir / "a.ckpt";
    const ad::ParameterBlock* blocks[] = {&a};
    auto entries = ad::to_entries(blocks);
    ad::write_checkpoint(path, entries);

    ad::ParameterBlock b{"unary.0", {}, 0};
    std::mt19937_64 other(5);
    ad::Mlp("fc", 3, {{4, ad::Activation::relu}}).init(b, other);
    ad::ParameterBlock* targets[] = {&b};
    ad::load_entries(targets, ad::read_checkpoint(path));
    CHECK(b.step == 7);
    CHECK(b.tensors[0].value == a.tensors[0].value);
    CHECK(b.tensors[0].first_moment[2] == 0.25);

    // Header begins with the magic and a little-endian version.
    std::ifstream in(path, std::ios::binary);
    char hdr[8];
    in.read(hdr, 8);
    CHECK(std::string(hdr, 4) == "DNBP");
    CHECK(hdr[4] == 1);
    CHECK(hdr[5] == 0);

    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 3);
    CHECK_THROWS(ad::read_checkpoint(path));
    std::filesystem::remove_all(dir);
}
