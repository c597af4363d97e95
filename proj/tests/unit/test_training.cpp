#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <sstream>

#include "dnbp/training/training.hpp"
#include "support/gradcheck.hpp"

using namespace dnbp;
using training::LabeledSequence;
using training::TrainConfig;

namespace {

potentials::NetworkShape small_shape() { return {3, 16, 16, 2, 8}; }

LabeledSequence random_sequence(const model::GraphModel& g, std::size_t frames, std::mt19937_64& rng) {
    LabeledSequence s;
    for (std::size_t t = 0; t < frames; ++t) {
        s.frames.push_back({3, 16, 16, testing::random_values(3 * 16 * 16, rng)});
        s.truth.push_back(testing::random_values(g.node_count() * 2, rng, -0.8, 0.8));
    }
    return s;
}

TrainConfig small_config() {
    TrainConfig c;
    c.particles = 12;
    c.val_particles = 12;
    c.unary_samples = 3;
    c.batch = 2;
    return c;
}

// Brute-force family mixture, independent of the tape ops.
double mixture(const std::vector<double>& pos, const std::vector<double>& w, std::span<const double> x, double s) {
    double total = 0.0, acc = 0.0;
    for (double v : w) total += v;
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double dx = x[0] - pos[2 * i], dy = x[1] - pos[2 * i + 1];
        acc += w[i] / total * std::exp(-(dx * dx + dy * dy) / (2 * s * s)) / (2 * std::numbers::pi * s * s);
    }
    return acc;
}

}  // namespace

TEST_CASE("config parses, validates and round-trips") {
    auto c = training::parse_train_config("particles = 50\n# comment\nbatch=6\ngamma = 0.8\nlr = 0.0005\n");
    CHECK(c.particles == 50);
    CHECK(c.gamma == 0.8);
    CHECK(c.adam.lr == 0.0005);
    auto again = training::parse_train_config(training::format_train_config(c));
    CHECK(again.gamma == c.gamma);
    CHECK(again.particles == c.particles);
    CHECK_THROWS_AS(training::parse_train_config("particles = 0\n"), std::invalid_argument);
    CHECK_THROWS_AS(training::parse_train_config("gamma = 1.0\n"), std::invalid_argument);
    CHECK_THROWS_AS(training::parse_train_config("speed = 3\n"), std::invalid_argument);
    CHECK_THROWS_AS(training::parse_train_config("batch = -2\n"), std::invalid_argument);
    CHECK_THROWS_AS(training::parse_train_config("batch 2\n"), std::invalid_argument);
}

TEST_CASE("partial densities match direct summation") {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 1 + rng() % 60;
        ad::Tape tape(false);
        inference::BeliefVars b;
        auto pos = testing::random_values(2 * n, rng);
        auto w1 = testing::random_values(n, rng, 0.005, 1), w2 = testing::random_values(n, rng, 0.005, 1),
             w3 = testing::random_values(n, rng, 0.005, 1);
        b.positions = tape.constant({n, 2}, pos);
        b.unary_dest = tape.constant({n}, w1);
        b.unary_sender = tape.constant({n}, w2);
        b.neigh_sender = tape.constant({n}, w3);
        const auto x = testing::random_values(2, rng);
        auto pd = training::partial_belief_eval(b, x, 0.1);
        CHECK(pd.unary_dest.item() == doctest::Approx(mixture(pos, w1, x, 0.1)).epsilon(1e-12));
        CHECK(pd.unary_sender.item() == doctest::Approx(mixture(pos, w2, x, 0.1)).epsilon(1e-12));
        CHECK(pd.neigh_sender.item() == doctest::Approx(mixture(pos, w3, x, 0.1)).epsilon(1e-12));
    }
}

TEST_CASE("node loss values") {
    ad::Tape tape(false);
    inference::BeliefVars b;
    b.positions = tape.constant({1, 2}, {0.2, 0.3});
    b.unary_dest = b.unary_sender = b.neigh_sender = tape.constant({1}, {0.7});
    // Peak density of exactly 1.
    const double sigma = 1.0 / std::sqrt(2 * std::numbers::pi);
    const std::vector<double> at{0.2, 0.3};
    CHECK(training::node_loss(b, at, sigma).item() == doctest::Approx(0.0).epsilon(1e-12));
    // Each density e^-1: squared distance 2 sigma^2 away from the peak of 1.
    const std::vector<double> off{0.2 + std::sqrt(2.0) * sigma, 0.3};
    CHECK(training::node_loss(b, off, sigma).item() == doctest::Approx(3.0).epsilon(1e-12));

    std::vector<std::string> diag;
    const std::vector<double> far{50.0, 50.0};
    const double l = training::node_loss(b, far, 0.05, &diag).item();
    CHECK(std::isfinite(l));
    CHECK(l == doctest::Approx(-3 * std::log(1e-300)));
    CHECK(diag.size() == 3);
}

TEST_CASE("node loss reaches only its own families") {
    const auto g = model::GraphModel::pendulum();
    potentials::LearnedPotentials pm(g, small_shape(), 3);
    std::mt19937_64 rng(4);
    auto seq = random_sequence(g, 1, rng);
    TrainConfig cfg = small_config();
    // Node 0's only sender (1) has another neighbor, so all three families are live.
    const model::NodeIndex d = 0;

    auto gradients = [&](int family) {
        for (auto* b : pm.blocks()) b->zero_grad();
        auto st = inference::init_beliefs(g, cfg.particles, 9);
        inference::InferenceConfig ic;
        ic.particles = cfg.particles;
        ic.unary_samples = cfg.unary_samples;
        ic.uniform_mixing = true;
        ad::Tape tape;
        potentials::Observation obs(&seq.frames[0]);
        std::vector<inference::MessageVars> in;
        for (const auto& dir : g.incoming(d)) {
            inference::MessageOptions o;
            o.sender_truth = std::vector<double>(seq.truth[0].begin() + 2 * dir.from, seq.truth[0].begin() + 2 * dir.from + 2);
            in.push_back(inference::message_update(tape, st, g, pm, dir, obs, ic, o));
        }
        auto bv = inference::belief_update(tape, st, g, pm, d, obs, in);
        auto pd = training::partial_belief_eval(bv, std::span<const double>(seq.truth[0]).subspan(0, 2), 0.05);
        ad::Var pick = family == 0 ? pd.unary_dest : family == 1 ? pd.unary_sender : pd.neigh_sender;
        tape.backward(ad::neg(ad::log(pick)));
        tape.accumulate_parameter_grads();
        std::map<std::string, double> norms;
        for (const auto* b : std::as_const(pm).blocks()) {
            double n = 0.0;
            for (const auto& p : b->tensors)
                for (double v : p.grad) n += std::abs(v);
            norms[b->name] = n;
        }
        return norms;
    };

    const auto ud = gradients(0), us = gradients(1), ns = gradients(2);
    // The sender unary never learns from node 0's loss.
    for (const auto* m : {&ud, &us, &ns}) {
        CHECK(m->at("unary.1") == 0.0);
        CHECK(m->at("unary.2") == 0.0);
    }
    CHECK(ud.at("unary.0") > 0.0);
    CHECK(ud.at("pairwise.0-1.sampler") == 0.0);
    CHECK(ud.at("pairwise.0-1.density") == 0.0);
    CHECK(us.at("unary.0") == 0.0);
    CHECK(us.at("pairwise.0-1.sampler") > 0.0);
    CHECK(us.at("pairwise.0-1.density") == 0.0);
    CHECK(ns.at("unary.0") == 0.0);
    CHECK(ns.at("pairwise.0-1.sampler") == 0.0);
    CHECK(ns.at("pairwise.0-1.density") > 0.0);
    CHECK(ns.at("pairwise.1-2.density") == 0.0);
}

TEST_CASE("train step is reproducible and steps once per node and frame") {
    const auto g = model::GraphModel::pendulum();
    std::mt19937_64 rng(5);
    std::vector<LabeledSequence> data{random_sequence(g, 3, rng), random_sequence(g, 3, rng)};
    std::vector<const LabeledSequence*> batch{&data[0], &data[1]};
    const auto cfg = small_config();
    potentials::LearnedPotentials a(g, small_shape(), 6), b(g, small_shape(), 6);
    auto ra = training::train_step(batch, g, a, cfg, 77);
    auto rb = training::train_step(batch, g, b, cfg, 77);
    CHECK(ra.optimizer_steps == 9);
    CHECK(ra.node_loss == rb.node_loss);
    for (const auto* blk : std::as_const(a).blocks()) {
        const auto& other = std::as_const(b).block(blk->name);
        for (std::size_t i = 0; i < blk->tensors.size(); ++i) CHECK(blk->tensors[i].value == other.tensors[i].value);
    }
    CHECK_THROWS_AS(training::train_step({}, g, a, cfg, 1), std::invalid_argument);
}

TEST_CASE("early stopping keeps the first epoch under rising loss") {
    training::EarlyStopping es(5);
    std::size_t stopped = 0;
    for (std::size_t epoch = 1; epoch <= 20; ++epoch) {
        es.update(epoch, static_cast<double>(epoch));
        if (es.stop()) {
            stopped = epoch;
            break;
        }
    }
    CHECK(stopped == 6);
    CHECK(es.best_epoch() == 1);
}

TEST_CASE("fit restores the best epoch and logs every node") {
    const auto g = model::GraphModel::pendulum();
    std::mt19937_64 rng(8);
    std::vector<LabeledSequence> data{random_sequence(g, 2, rng), random_sequence(g, 2, rng)};
    auto cfg = small_config();
    cfg.patience = 2;
    cfg.max_epochs = 10;
    potentials::LearnedPotentials pm(g, small_shape(), 1);
    std::ostringstream log;
    training::FitHooks hooks;
    hooks.log = &log;
    hooks.val_metric = [](std::size_t epoch) { return epoch == 2 ? 0.5 : 1.0 + static_cast<double>(epoch); };
    const auto dir = std::filesystem::temp_directory_path() / "dnbp_fit_test";
    auto res = training::fit(data, {}, g, pm, cfg, dir, hooks);
    CHECK(res.epochs_run == 4);
    CHECK(res.best_epoch == 2);
    CHECK(std::filesystem::exists(res.checkpoint));

    potentials::LearnedPotentials reloaded(g, small_shape(), 99);
    reloaded.load(res.checkpoint);
    for (const auto* blk : std::as_const(pm).blocks()) {
        const auto& other = std::as_const(reloaded).block(blk->name);
        for (std::size_t i = 0; i < blk->tensors.size(); ++i) CHECK(blk->tensors[i].value == other.tensors[i].value);
    }
    std::size_t lines = 0;
    std::istringstream in(log.str());
    for (std::string line; std::getline(in, line);) ++lines;
    CHECK(lines == 4 * 3);
    std::filesystem::remove_all(dir);

    CHECK_THROWS_AS(training::fit({}, data, g, pm, cfg, dir), std::invalid_argument);
}

TEST_CASE("validation loss is finite on the deployment path") {
    const auto g = model::GraphModel::pendulum();
    std::mt19937_64 rng(10);
    std::vector<LabeledSequence> data{random_sequence(g, 2, rng)};
    potentials::LearnedPotentials pm(g, small_shape(), 2);
    auto v = training::validation_loss(data, g, pm, small_config());
    REQUIRE(v.size() == 3);
    for (double x : v) CHECK(std::isfinite(x));
}
