#include <doctest.h>

#include <filesystem>

#include "dnbp/potentials/potentials.hpp"
#include "support/gradcheck.hpp"

using namespace dnbp;
using potentials::Frame;
using potentials::LearnedPotentials;
using potentials::NetworkShape;
using potentials::Observation;

namespace {

NetworkShape small_shape() { return {3, 16, 16, 2, 8}; }

Frame random_frame(const NetworkShape& s, std::mt19937_64& rng) {
    Frame f{s.image_channels, s.image_height, s.image_width, {}};
    f.pixels = testing::random_values(s.image_channels * s.image_height * s.image_width, rng);
    return f;
}

void zero_tensors(ad::ParameterBlock& b, const std::string& prefix) {
    for (auto& p : b.tensors)
        if (p.name.rfind(prefix, 0) == 0) std::fill(p.value.begin(), p.value.end(), 0.0);
}

}  // namespace

TEST_CASE("unary and density outputs respect the sigmoid floor") {
    const auto g = model::GraphModel::pendulum();
    LearnedPotentials pm(g, small_shape(), 1);
    std::mt19937_64 rng(2);
    const Frame frame = random_frame(small_shape(), rng);
    ad::Tape tape(false);
    Observation obs(&frame);
    ad::Var x = tape.constant({40, 2}, testing::random_values(80, rng, -3, 3));
    for (double v : pm.unary(tape, 1, x, obs, ad::GradMode::trainable).value()) {
        CHECK(v >= ad::kSigmoidFloor);
        CHECK(v <= 1.0);
    }
    for (double v : pm.density(tape, 0, x, ad::GradMode::trainable).value()) {
        CHECK(v >= ad::kSigmoidFloor);
        CHECK(v <= 1.0);
    }

    // Parameters are bound by value per tape, so re-evaluate on a new one.
    zero_tensors(pm.block(g.unary_block(1)), "head");
    ad::Tape fresh(false);
    Observation obs2(&frame);
    ad::Var x2 = fresh.constant({40, 2}, std::vector<double>(x.value().begin(), x.value().end()));
    for (double v : pm.unary(fresh, 1, x2, obs2, ad::GradMode::trainable).value()) CHECK(v == doctest::Approx(0.5025));
}

TEST_CASE("pairwise density depends only on the translation") {
    const auto g = model::GraphModel::pendulum();
    LearnedPotentials pm(g, small_shape(), 3);
    std::mt19937_64 rng(4);
    ad::Tape tape(false);
    auto xs = testing::random_values(20, rng), xd = testing::random_values(20, rng);
    auto xs2 = xs, xd2 = xd;
    for (std::size_t i = 0; i < 20; ++i) {
        xs2[i] += 0.3 * (i % 2 ? -1 : 1);
        xd2[i] += 0.3 * (i % 2 ? -1 : 1);
    }
    auto a = potentials::pairwise_density_eval(pm, tape, 1, tape.constant({10, 2}, xs), tape.constant({10, 2}, xd));
    auto b = potentials::pairwise_density_eval(pm, tape, 1, tape.constant({10, 2}, xs2), tape.constant({10, 2}, xd2));
    for (std::size_t i = 0; i < 10; ++i) CHECK(a.value()[i] == doctest::Approx(b.value()[i]).epsilon(1e-12));
}

TEST_CASE("sampling directions invert each other") {
    const auto g = model::GraphModel::pendulum();
    LearnedPotentials pm(g, small_shape(), 5);
    std::mt19937_64 rng(6);
    ad::Tape tape(false);
    ad::Var xd = tape.constant({7, 2}, testing::random_values(14, rng));
    ad::Var eps = potentials::gaussian_noise(tape, 7, pm.noise_dim(), rng);
    ad::Var xs = potentials::pairwise_sample(pm, tape, 0, xd, potentials::SampleDirection::source_given_dest, eps);
    ad::Var back = potentials::pairwise_sample(pm, tape, 0, xs, potentials::SampleDirection::dest_given_source, eps);
    for (std::size_t i = 0; i < 14; ++i) CHECK(back.value()[i] == doctest::Approx(xd.value()[i]).epsilon(1e-12));

    CHECK_THROWS_AS(potentials::pairwise_sample(pm, tape, 0, xd, potentials::SampleDirection::source_given_dest,
                                                potentials::gaussian_noise(tape, 7, 3, rng)),
                    std::invalid_argument);
}

TEST_CASE("zero diffusion network is the identity") {
    const auto g = model::GraphModel::pendulum();
    LearnedPotentials pm(g, small_shape(), 7);
    for (auto& p : pm.block(g.diffusion_block(2)).tensors) std::fill(p.value.begin(), p.value.end(), 0.0);
    std::mt19937_64 rng(8);
    ad::Tape tape(false);
    ad::Var x = tape.constant({5, 2}, testing::random_values(10, rng));
    ad::Var y = potentials::diffuse(pm, tape, 2, x, potentials::gaussian_noise(tape, 5, pm.noise_dim(), rng));
    for (std::size_t i = 0; i < 10; ++i) CHECK(y.value()[i] == x.value()[i]);
}

TEST_CASE("features are extracted once per frame and node") {
    const auto g = model::GraphModel::pendulum();
    LearnedPotentials pm(g, small_shape(), 9);
    std::mt19937_64 rng(10);
    const Frame frame = random_frame(small_shape(), rng);
    ad::Tape tape(false);
    Observation obs(&frame);
    ad::Var x = tape.constant({50, 2}, testing::random_values(100, rng));
    pm.unary(tape, 0, x, obs, ad::GradMode::trainable);
    pm.unary(tape, 0, x, obs, ad::GradMode::frozen);
    pm.unary(tape, 0, x, obs, ad::GradMode::trainable);
    CHECK(pm.extractor_calls() == 1);

    Frame wrong = frame;
    wrong.height = 8;
    wrong.pixels.resize(3 * 8 * 16);
    Observation bad(&wrong);
    CHECK_THROWS_AS(pm.unary(tape, 0, x, bad, ad::GradMode::trainable), std::invalid_argument);
}

TEST_CASE("full potential networks pass finite-difference checks") {
    const auto g = model::GraphModel::pendulum();
    LearnedPotentials pm(g, small_shape(), 11);
    std::mt19937_64 rng(12);
    const Frame frame = random_frame(small_shape(), rng);
    const auto x = testing::random_values(6, rng);
    const auto eps = testing::random_values(3 * small_shape().noise_dim, rng);

    auto unary_err = testing::gradcheck_parameters({&pm.block(g.unary_block(0))}, [&](ad::Tape& t) {
        Observation obs(&frame);
        return ad::sum(pm.unary(t, 0, t.constant({3, 2}, x), obs, ad::GradMode::trainable));
    });
    CHECK(unary_err < 1e-4);

    auto density_err = testing::gradcheck_parameters({&pm.block(g.density_block(0))}, [&](ad::Tape& t) {
        return ad::sum(ad::log(pm.density(t, 0, t.constant({3, 2}, x), ad::GradMode::trainable)));
    });
    CHECK(density_err < 1e-4);

    auto sampler_err = testing::gradcheck_parameters({&pm.block(g.sampler_block(1))}, [&](ad::Tape& t) {
        ad::Var y = pm.sampler(t, 1, t.constant({3, small_shape().noise_dim}, eps), ad::GradMode::trainable);
        return ad::sum(ad::mul(y, y));
    });
    CHECK(sampler_err < 1e-4);
}

TEST_CASE("frozen mode produces no parameter gradient") {
    const auto g = model::GraphModel::pendulum();
    LearnedPotentials pm(g, small_shape(), 13);
    auto& b = pm.block(g.density_block(0));
    b.zero_grad();
    {
        ad::Tape tape;
        ad::Var x = tape.leaf({2, 2}, {0.1, 0.2, -0.3, 0.4}, true);
        tape.backward(ad::sum(pm.density(tape, 0, x, ad::GradMode::frozen)));
        tape.accumulate_parameter_grads();
        double n = 0.0;
        for (double v : x.grad()) n += std::abs(v);
        CHECK(n > 0.0);
    }
    for (const auto& p : b.tensors)
        for (double v : p.grad) CHECK(v == 0.0);
}

TEST_CASE("checkpoint round trip restores all blocks") {
    const auto g = model::GraphModel::spider();
    LearnedPotentials a(g, small_shape(), 14), b(g, small_shape(), 15);
    const auto path = std::filesystem::temp_directory_path() / "dnbp_potentials_ckpt.bin";
    a.save(path);
    b.load(path);
    std::filesystem::remove(path);
    for (const auto* blk : a.blocks()) {
        const auto& other = b.block(blk->name);
        for (std::size_t i = 0; i < blk->tensors.size(); ++i) CHECK(blk->tensors[i].value == other.tensors[i].value);
    }
    LearnedPotentials c(model::GraphModel::pendulum(), small_shape(), 16);
    const auto path2 = std::filesystem::temp_directory_path() / "dnbp_potentials_ckpt2.bin";
    c.save(path2);
    CHECK_THROWS(b.load(path2));
    std::filesystem::remove(path2);
}
