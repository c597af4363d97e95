#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "dnbp/simworld/simworld.hpp"

using namespace dnbp::simworld;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(p);
    return p;
}

std::size_t mask_count(const std::vector<std::uint8_t>& m) {
    std::size_t n = 0;
    for (auto v : m) n += v;
    return n;
}

}  // namespace

TEST_CASE("pendulum equilibria and energy") {
    PendulumState rest;
    auto next = step_pendulum(rest, 0.05);
    CHECK(next.theta1 == 0.0);
    CHECK(next.theta2 == 0.0);
    CHECK(next.omega1 == 0.0);

    PendulumState s{1.2, -0.7, 0.3, -0.5};
    const double e0 = pendulum_energy(s);
    for (int i = 0; i < 1000; ++i) s = step_pendulum(s, 1e-3);
    CHECK(std::abs(pendulum_energy(s) - e0) / std::abs(e0) < 1e-6);

    PendulumState up{std::numbers::pi - 1e-6, 0.0, 0.0, 0.0};
    for (int i = 0; i < 500; ++i) up = step_pendulum(up, 0.01);
    CHECK(std::abs(std::abs(up.theta1) - std::numbers::pi) > 0.1);

    CHECK_THROWS_AS(step_pendulum(rest, 0.0), std::invalid_argument);

    const auto kp = pendulum_keypoints(rest);
    CHECK(kp[3] == doctest::Approx(0.4));
    CHECK(kp[5] == doctest::Approx(0.8));
}

TEST_CASE("spider joints reflect at their limits") {
    SpiderState s;
    s.inner_angle = {1.0, 3.0, 5.0};
    s.inner_ext = {80.0, 50.0, 50.0};
    s.inner_ext_vel = {100.0, 0.0, 0.0};
    auto n = step_spider(s, 0.01);
    CHECK(n.inner_ext[0] <= 80.0);
    CHECK(n.inner_ext_vel[0] < 0.0);

    SpiderState still = s;
    still.inner_ext_vel = {0, 0, 0};
    auto same = step_spider(still, 0.01);
    CHECK(same.inner_ext == still.inner_ext);
    CHECK(same.x == still.x);

    std::mt19937_64 rng(1);
    bool ok = true;
    for (int trial = 0; trial < 20; ++trial) {
        auto sp = random_spider(rng);
        ok = ok && spider_constraints_hold(sp);
        for (int i = 0; i < 500; ++i) {
            sp = step_spider(sp, kSpiderFrameDt);
            ok = ok && spider_constraints_hold(sp);
        }
    }
    CHECK(ok);
}

TEST_CASE("clutter shape fractions and sizes") {
    std::mt19937_64 rng(2);
    for (Task task : {Task::pendulum, Task::spider}) {
        std::size_t rects = 0, beneath = 0;
        const std::size_t n = 100000;
        bool sizes_ok = true;
        for (std::size_t i = 0; i < n; ++i) {
            auto c = spawn_clutter(task, rng);
            rects += c.shape == ShapeKind::rectangle;
            beneath += c.layer == Layer::beneath;
            sizes_ok = sizes_ok && c.length >= 0 && c.height >= 0 && c.radius >= 0;
        }
        const double expect = task == Task::pendulum ? 0.8 : 0.7;
        CHECK(std::abs(static_cast<double>(rects) / n - expect) < 0.01);
        CHECK(std::abs(static_cast<double>(beneath) / n - 0.5) < 0.01);
        CHECK(sizes_ok);
    }
    auto fixed = spawn_clutter(Task::pendulum, rng, false);
    CHECK(fixed.vx == 0.0);
    CHECK(fixed.vangle == 0.0);
}

TEST_CASE("rendering: mask and joint colors") {
    PendulumState s{0.4, 0.9, 0, 0};
    auto r = render_pendulum(s, {}, 128);
    CHECK(mask_count(r.mask) == 0);
    const auto kp = pendulum_keypoints(s);
    auto probe = [&](int node) {
        const auto x = static_cast<std::size_t>(64 + kp[2 * node] * 64);
        const auto y = static_cast<std::size_t>(64 + kp[2 * node + 1] * 64);
        return r.image.at(x, y);
    };
    CHECK(probe(0) == Rgb{204, 204, 0});
    CHECK(probe(1) == Rgb{204, 204, 0});
    CHECK(probe(2) == Rgb{96, 217, 63});

    ClutterElement full;
    full.length = full.height = 20.0;
    full.layer = Layer::on_top;
    auto covered = render_pendulum(s, {full}, 64);
    CHECK(mask_count(covered.mask) == 64 * 64);

    SpiderState sp;
    sp.inner_angle = {1.0, 3.0, 5.0};
    sp.inner_ext = {40, 40, 40};
    auto rs = render_spider(sp, {}, 500);
    const auto px = spider_pixels(sp);
    for (int j = 0; j < 7; ++j) {
        CHECK(rs.image.at(static_cast<std::size_t>(px[2 * j]), static_cast<std::size_t>(px[2 * j + 1])) == Rgb{255, 255, 0});
    }
    ClutterElement huge;
    huge.length = huge.height = 2000.0;
    huge.x = huge.y = 250.0;
    auto small = render_spider(sp, {huge}, 128);
    CHECK(small.image.width == 128);
    CHECK(mask_count(small.mask) == 128 * 128);
}

TEST_CASE("clutter ratio matches a recount") {
    std::mt19937_64 rng(3);
    std::vector<ClutterElement> clutter;
    for (int i = 0; i < 12; ++i) clutter.push_back(spawn_clutter(Task::pendulum, rng));
    auto seq = simulate_sequence(Task::pendulum, 6, 64, clutter, rng);
    double acc = 0.0;
    for (const auto& m : seq.masks) acc += static_cast<double>(mask_count(m)) / (64.0 * 64.0);
    CHECK(seq.clutter_ratio == doctest::Approx(acc / 6.0).epsilon(1e-12));
    CHECK(clutter_ratio(seq) == seq.clutter_ratio);

    auto empty = simulate_sequence(Task::pendulum, 3, 32, {}, rng);
    CHECK(empty.clutter_ratio == 0.0);
}

TEST_CASE("training bins and test deciles are honored") {
    DatasetSpec spec;
    spec.task = Task::pendulum;
    spec.split = Split::train;
    spec.sequences = 6;
    spec.frames = 4;
    spec.image_size = 32;
    spec.seed = 5;
    auto ds = generate_dataset(spec);
    REQUIRE(ds.sequences.size() == 6);
    const auto bins = train_bins(Task::pendulum);
    for (const auto& s : ds.sequences) {
        const auto& b = bins[s.bin];
        if (b.none) {
            CHECK(s.clutter_count == 0);
        } else {
            CHECK(s.clutter_ratio > b.lo);
            CHECK(s.clutter_ratio <= b.hi);
        }
    }

    spec.split = Split::test;
    spec.sequences = 1;
    auto test = generate_dataset(spec);
    REQUIRE(test.sequences.size() == 10);
    const auto deciles = test_deciles();
    for (const auto& s : test.sequences) {
        CHECK(s.clutter_ratio >= deciles[s.bin].lo);
        CHECK(s.clutter_ratio <= deciles[s.bin].hi);
    }

    auto again = generate_dataset(spec);
    for (std::size_t i = 0; i < test.sequences.size(); ++i) {
        CHECK(again.sequences[i].frames.back().rgb == test.sequences[i].frames.back().rgb);
    }

    spec.retry_budget = 1;
    CHECK_THROWS_WITH_AS(generate_dataset(spec), doctest::Contains("unreachable"), std::runtime_error);
}

TEST_CASE("dataset files round-trip and reject corruption") {
    DatasetSpec spec;
    spec.task = Task::spider;
    spec.split = Split::val;
    spec.sequences = 5;
    spec.frames = 2;
    spec.image_size = 32;
    spec.seed = 9;
    auto ds = generate_dataset(spec);
    const auto dir = temp_dir("dnbp_dataset_rt");
    save_dataset(ds, dir);
    auto back = load_dataset(dir);
    REQUIRE(back.sequences.size() == 5);
    CHECK(back.spec.task == Task::spider);
    CHECK(back.stats.mean == ds.stats.mean);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(back.sequences[i].frames[1].rgb == ds.sequences[i].frames[1].rgb);
        CHECK(back.sequences[i].masks == ds.sequences[i].masks);
        CHECK(back.sequences[i].keypoints == ds.sequences[i].keypoints);
        CHECK(back.sequences[i].clutter_ratio == ds.sequences[i].clutter_ratio);
    }

    const auto rec = dir / "seq_00003.bin";
    {
        std::fstream f(rec, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(100);
        f.put('\x7f');
    }
    CHECK_THROWS_WITH_AS(load_dataset(dir), doctest::Contains("checksum"), std::runtime_error);
    std::filesystem::resize_file(rec, 50);
    CHECK_THROWS_WITH_AS(load_dataset(dir), doctest::Contains("truncated"), std::runtime_error);
    std::filesystem::remove_all(dir);
    CHECK_THROWS(load_dataset(dir));
}

TEST_CASE("normalized frames are channel-major") {
    Image img(2, 1, {255, 0, 0});
    ChannelStats st;
    st.mean = {0.5, 0.0, 0.0};
    st.stddev = {0.5, 1.0, 1.0};
    auto f = normalize_frame(img, st);
    CHECK(f.channels == 3);
    CHECK(f.pixels[0] == 1.0);
    CHECK(f.pixels[1] == 1.0);
    CHECK(f.pixels[2] == 0.0);
}
