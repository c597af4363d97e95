#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "dnbp/potentials/potentials.hpp"
#include "dnbp/training/training.hpp"

namespace dnbp::simworld {

enum class Task { pendulum, spider };
enum class Split { train, val, test };

std::string to_string(Task t);
std::string to_string(Split s);
Task parse_task(const std::string& s);
Split parse_split(const std::string& s);

struct Rgb {
    std::uint8_t r = 0, g = 0, b = 0;
    bool operator==(const Rgb&) const = default;
};

// 8-bit RGB raster, row-major, interleaved.
struct Image {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> rgb;

    Image() = default;
    Image(std::size_t w, std::size_t h, Rgb fill);
    Rgb at(std::size_t x, std::size_t y) const;
};

// ---- Double pendulum -------------------------------------------------------
// Unit point masses at the end of unit-length massless links, g = 9.8.
// theta1 is the first link's angle from the downward vertical, theta2 the
// second link's angle relative to the first (Acrobot convention).
struct PendulumState {
    double theta1 = 0.0, theta2 = 0.0;
    double omega1 = 0.0, omega2 = 0.0;
};

inline constexpr double kPendulumGravity = 9.8;
inline constexpr double kPendulumFrameDt = 0.05;
// World units per half image: the two unit links span 80% of it.
inline constexpr double kPendulumHalfExtent = 2.5;

PendulumState step_pendulum(const PendulumState& s, double dt);
double pendulum_energy(const PendulumState& s);
// Normalized keypoints of base, middle joint, end effector (x right, y down).
std::vector<double> pendulum_keypoints(const PendulumState& s);

// ---- Spider ----------------------------------------------------------------
// Pixel units of the 500x500 render canvas, y down.
struct SpiderState {
    double x = 250.0, y = 250.0, angle = 0.0;
    double vx = 0.0, vy = 0.0, vangle = 0.0;
    // Inner revolute-prismatic joints: angle relative to the root within
    // sector k = [k*120deg, (k+1)*120deg], extension in [20, 80] px.
    std::array<double, 3> inner_angle{}, inner_ext{}, inner_angle_vel{}, inner_ext_vel{};
    // Outer revolute joints: angle relative to the inner link, within +-35deg.
    std::array<double, 3> outer_angle{}, outer_vel{};
};

inline constexpr double kSpiderCanvas = 500.0;
inline constexpr double kSpiderFrameDt = 0.01;
inline constexpr double kSpiderLinkLength = 80.0;
inline constexpr double kSpiderLinkWidth = 20.0;
inline constexpr double kSpiderJointRadius = 10.0;
inline constexpr double kSpiderMinExt = 20.0;
inline constexpr double kSpiderMaxExt = 80.0;
inline constexpr double kSpiderOuterLimit = 35.0 * 3.14159265358979323846 / 180.0;
// Root stays in the central window it is initialized in.
inline constexpr double kSpiderRootWindow = 180.0;

SpiderState step_spider(const SpiderState& s, double dt);
SpiderState random_spider(std::mt19937_64& rng);
bool spider_constraints_hold(const SpiderState& s, double tol = 1e-9);
// Keypoints of root, three middle joints, three ends in canvas pixels.
std::vector<double> spider_pixels(const SpiderState& s);
std::vector<double> spider_keypoints(const SpiderState& s);

// ---- Clutter -----------------------------------------------------------------
enum class ShapeKind { rectangle, circle };
enum class Layer { beneath, on_top };

// Sizes, pose and velocities are in task-native units (pendulum world units,
// spider canvas pixels); velocities are per frame.
struct ClutterElement {
    ShapeKind shape = ShapeKind::rectangle;
    double length = 0.0, height = 0.0, radius = 0.0;
    Rgb color;
    double x = 0.0, y = 0.0, angle = 0.0;
    double vx = 0.0, vy = 0.0, vangle = 0.0;
    Layer layer = Layer::beneath;
    bool dynamic = false;
};

ClutterElement spawn_clutter(Task task, std::mt19937_64& rng, bool dynamic = true);
void advance_clutter(std::vector<ClutterElement>& clutter);

struct RenderedFrame {
    Image image;
    std::vector<std::uint8_t> mask;  // 1 where any clutter covers the pixel
};

RenderedFrame render_pendulum(const PendulumState& s, const std::vector<ClutterElement>& clutter, std::size_t size);
// Rendered on the 500x500 canvas, then area-downsampled to `size`; a mask
// pixel is set when clutter covers at least half of its area.
RenderedFrame render_spider(const SpiderState& s, const std::vector<ClutterElement>& clutter, std::size_t size);

// ---- Sequences and datasets ---------------------------------------------------
struct SequenceSample {
    Task task = Task::pendulum;
    std::size_t image_size = 128;
    std::vector<Image> frames;
    std::vector<std::vector<std::uint8_t>> masks;
    std::vector<std::vector<double>> keypoints;  // per frame, node-major
    double clutter_ratio = 0.0;
    int bin = -1;  // clutter bin (train/val) or decile (test)
    bool dynamic = false;
    std::uint32_t clutter_count = 0;
};

double clutter_ratio(const SequenceSample& seq);

struct ClutterPlan {
    std::vector<ClutterElement> elements;
};

// Simulates a structure from a random initial state and renders every frame
// with the given clutter (moved each frame when dynamic).
SequenceSample simulate_sequence(Task task, std::size_t frames, std::size_t image_size,
                                 std::vector<ClutterElement> clutter, std::mt19937_64& rng);

struct RatioBin {
    double lo = 0.0, hi = 0.0;
    bool none = false;  // sequences without any clutter
};

std::vector<RatioBin> train_bins(Task task);
std::vector<RatioBin> test_deciles();

struct DatasetSpec {
    Task task = Task::pendulum;
    Split split = Split::train;
    std::size_t sequences = 0;  // train/val total; test: per decile
    std::size_t frames = 20;
    std::size_t image_size = 128;
    std::uint64_t seed = 0;
    std::size_t retry_budget = 2000;
};

// Full-scale sizes: pendulum 1024/150 x20 frames, test 50 per decile x100;
// spider 2048/300 x20, test 50 per decile x20.
DatasetSpec default_spec(Task task, Split split);

struct ChannelStats {
    std::array<double, 3> mean{0.0, 0.0, 0.0};
    std::array<double, 3> stddev{1.0, 1.0, 1.0};
};

ChannelStats channel_stats(const std::vector<SequenceSample>& seqs);

struct Dataset {
    DatasetSpec spec;
    std::vector<SequenceSample> sequences;
    ChannelStats stats;
};

Dataset generate_dataset(const DatasetSpec& spec);

void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

void save_channel_stats(const ChannelStats& s, const std::filesystem::path& path);
ChannelStats load_channel_stats(const std::filesystem::path& path);

potentials::Frame normalize_frame(const Image& img, const ChannelStats& stats);
training::LabeledSequence to_labeled(const SequenceSample& seq, const ChannelStats& stats);
std::vector<training::LabeledSequence> to_labeled(const Dataset& ds, const ChannelStats& stats);

}  // namespace dnbp::simworld
