#include <doctest.h>

#include <cmath>
#include <numeric>

#include "dnbp/inference/inference.hpp"
#include "support/analytic_potentials.hpp"

using namespace dnbp;
using inference::InferenceConfig;
using model::GraphModel;

namespace {

// Ground-truth pose consistent with the fixture offsets.
testing::AnalyticPotentials pendulum_fixture() {
    testing::AnalyticPotentials pm;
    pm.centers = {{0.0, 0.0}, {0.4, 0.0}, {0.4, -0.4}};
    pm.offsets = {{-0.4, 0.0}, {0.0, 0.4}};  // x0 - x1, x1 - x2
    return pm;
}

testing::AnalyticPotentials spider_fixture() {
    testing::AnalyticPotentials pm;
    pm.centers = {{0, 0}, {0.3, 0}, {-0.3, 0}, {0, 0.3}, {0.6, 0}, {-0.6, 0}, {0, 0.6}};
    const auto g = GraphModel::spider();
    for (const auto& e : g.edges()) {
        pm.offsets.push_back({pm.centers[e.source][0] - pm.centers[e.destination][0],
                              pm.centers[e.source][1] - pm.centers[e.destination][1]});
    }
    return pm;
}

const potentials::Frame kNoFrame{};

}  // namespace

TEST_CASE("initial beliefs are unions of uniform messages") {
    const auto g = GraphModel::spider();
    auto st = inference::init_beliefs(g, 20, 1);
    CHECK(st.messages.size() == 12);
    CHECK(st.beliefs[0].size() == 60);
    CHECK(st.beliefs[4].size() == 20);
    for (const auto& b : st.beliefs) {
        CHECK(std::accumulate(b.weights.begin(), b.weights.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
        for (double x : b.positions) CHECK(std::abs(x) <= 1.0);
    }
    CHECK_THROWS_AS(inference::init_beliefs(g, 0, 1), std::invalid_argument);
}

TEST_CASE("resampling split follows the uniform-proposal schedule") {
    CHECK(inference::belief_sourced_count(50, 0.9, 1, true) == 0);
    CHECK(inference::belief_sourced_count(50, 0.9, 2, true) == 5);
    CHECK(inference::belief_sourced_count(50, 0.9, 3, true) == 9);
    CHECK(inference::belief_sourced_count(50, 0.9, 4, true) == 13);
    CHECK(inference::belief_sourced_count(50, 0.9, 5, true) == 17);
    CHECK(inference::belief_sourced_count(50, 0.9, 1, false) == 50);
}

TEST_CASE("deployment sweep keeps weights normalized and positive") {
    const auto g = GraphModel::spider();
    const auto pm = spider_fixture();
    InferenceConfig cfg;
    cfg.particles = 30;
    auto st = inference::init_beliefs(g, cfg.particles, 7);
    for (int step = 0; step < 3; ++step) {
        inference::run_sequence_step(st, g, pm, kNoFrame, 2, cfg);
        for (model::NodeIndex n = 0; n < g.node_count(); ++n) {
            const auto& b = st.beliefs[n];
            CHECK(b.size() == g.neighbors(n).size() * cfg.particles);
            CHECK(std::accumulate(b.weights.begin(), b.weights.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
            for (double w : b.weights) CHECK(w > 0.0);
        }
    }
    CHECK(st.iteration == 7);
    CHECK(st.diagnostics.empty());
}

TEST_CASE("beliefs concentrate near the fixture pose") {
    const auto g = GraphModel::pendulum();
    const auto pm = pendulum_fixture();
    InferenceConfig cfg;
    cfg.particles = 100;
    auto st = inference::init_beliefs(g, cfg.particles, 3);
    for (int step = 0; step < 4; ++step) inference::run_sequence_step(st, g, pm, kNoFrame, 2, cfg);
    for (model::NodeIndex n = 0; n < 3; ++n) {
        const auto est = inference::max_weight_estimate(st.beliefs[n]);
        CHECK(std::hypot(est[0] - pm.centers[n][0], est[1] - pm.centers[n][1]) < 0.1);
    }
}

TEST_CASE("ground-truth substitution replaces each neighbor sum by one density") {
    const auto g = GraphModel::pendulum();
    auto pm = pendulum_fixture();
    InferenceConfig cfg;
    cfg.particles = 10;
    auto st = inference::init_beliefs(g, cfg.particles, 5);
    ad::Tape tape(false);
    potentials::Observation obs(&kNoFrame);
    inference::MessageOptions opts;
    opts.sender_truth = std::vector<double>{0.4, 0.0};
    // 1 -> 0: the sender's only other neighbor is 2.
    const model::DirectedEdge dir{0, 1, 0};
    auto m = inference::message_update(tape, st, g, pm, dir, obs, cfg, opts);
    for (std::size_t i = 0; i < cfg.particles; ++i) {
        const double x0 = m.positions.value()[2 * i], y0 = m.positions.value()[2 * i + 1];
        const double tx = x0 - 0.4, ty = y0 - 0.0;  // canonical x0 - x1
        const double dx = tx - pm.offsets[0][0], dy = ty - pm.offsets[0][1];
        const double expect = 0.005 + 0.995 * std::exp(-(dx * dx + dy * dy) / (2 * 0.01));
        CHECK(m.neigh_component.value()[i] == doctest::Approx(expect).epsilon(1e-12));
    }
    // 0 -> 1: the sender has no other neighbor, so the product is empty.
    auto leaf = inference::message_update(tape, st, g, pm, {0, 0, 1}, obs, cfg, opts);
    for (double v : leaf.neigh_component.value()) CHECK(v == 1.0);
}

TEST_CASE("misuse is reported") {
    const auto g = GraphModel::pendulum();
    const auto pm = pendulum_fixture();
    InferenceConfig cfg;
    inference::InferenceState empty;
    ad::Tape tape(false);
    potentials::Observation obs(&kNoFrame);
    CHECK_THROWS_AS(inference::message_update(tape, empty, g, pm, {0, 0, 1}, obs, cfg), std::logic_error);
    CHECK_THROWS_AS(inference::message_slot(g, {0, 1, 2}), std::invalid_argument);

    auto st = inference::init_beliefs(g, 10, 1);
    cfg.particles = 10;
    auto a = inference::message_update(tape, st, g, pm, {0, 0, 1}, obs, cfg);
    auto b = inference::message_update(tape, st, g, pm, {1, 2, 1}, obs, cfg);
    std::vector<inference::MessageVars> reversed{b, a};
    CHECK_THROWS_AS(inference::belief_update(tape, st, g, pm, 1, obs, reversed), std::invalid_argument);

    std::fill(st.beliefs[1].weights.begin(), st.beliefs[1].weights.end(), 0.0);
    st.iteration = 3;
    cfg.uniform_mixing = true;
    inference::message_update(tape, st, g, pm, {0, 0, 1}, obs, cfg);
    CHECK(st.diagnostics.size() == 1);
}

TEST_CASE("max-weight estimate breaks ties by lowest index") {
    inference::ParticleSet p;
    p.positions = {0, 0, 1, 1, 2, 2};
    p.weights = {0.2, 0.4, 0.4};
    CHECK(inference::max_weight_index(p) == 1);
}

TEST_CASE("identical seeds give identical beliefs") {
    const auto g = GraphModel::pendulum();
    const auto pm = pendulum_fixture();
    InferenceConfig cfg;
    cfg.particles = 20;
    auto a = inference::init_beliefs(g, 20, 42), b = inference::init_beliefs(g, 20, 42);
    inference::run_sequence_step(a, g, pm, kNoFrame, 2, cfg);
    inference::run_sequence_step(b, g, pm, kNoFrame, 2, cfg);
    for (model::NodeIndex n = 0; n < 3; ++n) {
        CHECK(a.beliefs[n].positions == b.beliefs[n].positions);
        CHECK(a.beliefs[n].weights == b.beliefs[n].weights);
    }
}
