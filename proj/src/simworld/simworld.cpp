#include "dnbp/simworld/simworld.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace dnbp::simworld {

namespace {

constexpr double kPi = std::numbers::pi;

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

double wrap_pi(double a) {
    a = std::fmod(a + kPi, 2.0 * kPi);
    if (a < 0.0) a += 2.0 * kPi;
    return a - kPi;
}

double normal(std::mt19937_64& rng, double mean, double sd) { return std::normal_distribution<double>(mean, sd)(rng); }
double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
bool coin(std::mt19937_64& rng, double p) { return std::bernoulli_distribution(p)(rng); }

// Equally weighted two-component mixture at +-mean.
double symmetric_mixture(std::mt19937_64& rng, double mean, double sd) {
    const double sign = coin(rng, 0.5) ? 1.0 : -1.0;
    return normal(rng, sign * mean, sd);
}

// ---- Rasterization ------------------------------------------------------------

struct Canvas {
    Image image;
    std::vector<std::uint8_t> mask;

    Canvas(std::size_t size, Rgb bg) : image(size, size, bg), mask(size * size, 0) {}

    void put(long x, long y, Rgb c, bool clutter) {
        const std::size_t i = static_cast<std::size_t>(y) * image.width + static_cast<std::size_t>(x);
        image.rgb[3 * i] = c.r;
        image.rgb[3 * i + 1] = c.g;
        image.rgb[3 * i + 2] = c.b;
        if (clutter) mask[i] = 1;
    }

    // Rectangle centered at (cx, cy), half extents hl along `angle`, hw across.
    void rect(double cx, double cy, double hl, double hw, double angle, Rgb c, bool clutter) {
        if (!(hl > 0.0) || !(hw > 0.0)) return;
        const double ca = std::cos(angle), sa = std::sin(angle);
        const double ex = std::abs(hl * ca) + std::abs(hw * sa), ey = std::abs(hl * sa) + std::abs(hw * ca);
        const long x0 = std::max(0L, static_cast<long>(std::floor(cx - ex)));
        const long x1 = std::min(static_cast<long>(image.width) - 1, static_cast<long>(std::ceil(cx + ex)));
        const long y0 = std::max(0L, static_cast<long>(std::floor(cy - ey)));
        const long y1 = std::min(static_cast<long>(image.height) - 1, static_cast<long>(std::ceil(cy + ey)));
        for (long y = y0; y <= y1; ++y) {
            const double dy = y + 0.5 - cy;
            for (long x = x0; x <= x1; ++x) {
                const double dx = x + 0.5 - cx;
                const double u = dx * ca + dy * sa, v = -dx * sa + dy * ca;
                if (std::abs(u) <= hl && std::abs(v) <= hw) put(x, y, c, clutter);
            }
        }
    }

    void circle(double cx, double cy, double r, Rgb c, bool clutter) {
        if (!(r > 0.0)) return;
        const long x0 = std::max(0L, static_cast<long>(std::floor(cx - r)));
        const long x1 = std::min(static_cast<long>(image.width) - 1, static_cast<long>(std::ceil(cx + r)));
        const long y0 = std::max(0L, static_cast<long>(std::floor(cy - r)));
        const long y1 = std::min(static_cast<long>(image.height) - 1, static_cast<long>(std::ceil(cy + r)));
        for (long y = y0; y <= y1; ++y) {
            const double dy = y + 0.5 - cy;
            for (long x = x0; x <= x1; ++x) {
                const double dx = x + 0.5 - cx;
                if (dx * dx + dy * dy <= r * r) put(x, y, c, clutter);
            }
        }
    }
};

// Maps task-native coordinates to canvas pixels.
struct Projection {
    double scale = 1.0;
    double cx = 0.0, cy = 0.0;
    bool flip_y = false;

    double px(double x) const { return cx + x * scale; }
    double py(double y) const { return flip_y ? cy - y * scale : cy + y * scale; }
    double angle(double a) const { return flip_y ? -a : a; }
};

void draw_clutter(Canvas& canvas, const std::vector<ClutterElement>& clutter, Layer layer, const Projection& p) {
    for (const auto& c : clutter) {
        if (c.layer != layer) continue;
        if (c.shape == ShapeKind::rectangle) {
            canvas.rect(p.px(c.x), p.py(c.y), 0.5 * c.length * p.scale, 0.5 * c.height * p.scale, p.angle(c.angle),
                        c.color, true);
        } else {
            canvas.circle(p.px(c.x), p.py(c.y), c.radius * p.scale, c.color, true);
        }
    }
}

// Link as a rectangle between two canvas points.
void draw_link(Canvas& canvas, double x0, double y0, double x1, double y1, double width, Rgb c) {
    const double len = std::hypot(x1 - x0, y1 - y0);
    canvas.rect(0.5 * (x0 + x1), 0.5 * (y0 + y1), 0.5 * len, 0.5 * width, std::atan2(y1 - y0, x1 - x0), c, false);
}

// Area-weighted resampling of a square canvas to `size`.
RenderedFrame downsample(const Canvas& src, std::size_t size) {
    const std::size_t n = src.image.width;
    if (n == size) return {src.image, src.mask};
    const double f = static_cast<double>(n) / static_cast<double>(size);
    struct Span {
        std::size_t first;
        std::vector<double> w;
    };
    std::vector<Span> spans(size);
    for (std::size_t o = 0; o < size; ++o) {
        const double a = o * f, b = (o + 1) * f;
        Span s{static_cast<std::size_t>(std::floor(a)), {}};
        for (std::size_t i = s.first; i < n && static_cast<double>(i) < b; ++i) {
            s.w.push_back(std::min<double>(b, i + 1.0) - std::max<double>(a, static_cast<double>(i)));
        }
        spans[o] = std::move(s);
    }
    RenderedFrame out{Image(size, size, {}), std::vector<std::uint8_t>(size * size, 0)};
    const double area = f * f;
    for (std::size_t oy = 0; oy < size; ++oy) {
        for (std::size_t ox = 0; ox < size; ++ox) {
            double acc[3] = {0, 0, 0}, cover = 0.0;
            const auto& sy = spans[oy];
            const auto& sx = spans[ox];
            for (std::size_t j = 0; j < sy.w.size(); ++j) {
                const std::size_t y = sy.first + j;
                for (std::size_t i = 0; i < sx.w.size(); ++i) {
                    const std::size_t x = sx.first + i;
                    const double w = sy.w[j] * sx.w[i];
                    const std::size_t k = y * n + x;
                    for (int c = 0; c < 3; ++c) acc[c] += w * src.image.rgb[3 * k + c];
                    cover += w * src.mask[k];
                }
            }
            const std::size_t o = oy * size + ox;
            for (int c = 0; c < 3; ++c) {
                out.image.rgb[3 * o + c] = static_cast<std::uint8_t>(std::clamp(std::lround(acc[c] / area), 0L, 255L));
            }
            out.mask[o] = cover >= 0.5 * area ? 1 : 0;
        }
    }
    return out;
}

// ---- Pendulum ODE ----------------------------------------------------------------

// Absolute-angle form: a = (a1, a2, w1, w2).
std::array<double, 4> pendulum_deriv(const std::array<double, 4>& s) {
    const double a1 = s[0], a2 = s[1], w1 = s[2], w2 = s[3];
    const double g = kPendulumGravity;
    const double d = a1 - a2;
    const double den = 3.0 - std::cos(2.0 * d);
    const double acc1 = (-3.0 * g * std::sin(a1) - g * std::sin(a1 - 2.0 * a2) -
                         2.0 * std::sin(d) * (w2 * w2 + w1 * w1 * std::cos(d))) /
                        den;
    const double acc2 = 2.0 * std::sin(d) * (2.0 * w1 * w1 + 2.0 * g * std::cos(a1) + w2 * w2 * std::cos(d)) / den;
    return {w1, w2, acc1, acc2};
}

// ---- Dataset file helpers ----------------------------------------------------------

constexpr char kSeqMagic[4] = {'D', 'N', 'B', 'S'};
constexpr std::uint32_t kSeqVersion = 1;

std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

template <class T>
void put(std::string& out, T v) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    // Stored little-endian; all supported targets are little-endian.
    out.append(reinterpret_cast<const char*>(b), sizeof(T));
}

struct Reader {
    const std::string& data;
    std::size_t pos = 0;
    std::string what;

    template <class T>
    T get() {
        if (pos + sizeof(T) > data.size()) throw std::runtime_error(what + ": truncated record");
        T v;
        std::memcpy(&v, data.data() + pos, sizeof(T));
        pos += sizeof(T);
        return v;
    }
    void bytes(std::uint8_t* dst, std::size_t n) {
        if (pos + n > data.size()) throw std::runtime_error(what + ": truncated record");
        std::memcpy(dst, data.data() + pos, n);
        pos += n;
    }
};

std::size_t node_count(Task t) { return t == Task::pendulum ? 3 : 7; }

struct ClutterCounts {
    std::size_t n = 15;
    double p = 0.3;
};

ClutterCounts train_counts(Task t) { return t == Task::pendulum ? ClutterCounts{15, 0.3} : ClutterCounts{10, 0.5}; }

// Training bins are (lo, hi]; test deciles are [lo, hi) except the last,
// which is closed.
bool in_bin(const RatioBin& b, double r, bool test, bool last) {
    if (b.none) return r == 0.0;
    if (!test) return r > b.lo && r <= b.hi;
    return r >= b.lo && (last ? r <= b.hi : r < b.hi);
}

std::string bin_name(const RatioBin& b, bool test, bool last) {
    if (b.none) return "none";
    std::ostringstream os;
    os << (test ? "[" : "(") << b.lo << ", " << b.hi << (test && !last ? ")" : "]");
    return os.str();
}

}  // namespace

std::string to_string(Task t) { return t == Task::pendulum ? "pendulum" : "spider"; }
std::string to_string(Split s) { return s == Split::train ? "train" : s == Split::val ? "val" : "test"; }

Task parse_task(const std::string& s) {
    if (s == "pendulum") return Task::pendulum;
    if (s == "spider") return Task::spider;
    throw std::invalid_argument("unknown task '" + s + "' (expected pendulum or spider)");
}

Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw std::invalid_argument("unknown split '" + s + "' (expected train, val or test)");
}

Image::Image(std::size_t w, std::size_t h, Rgb fill) : width(w), height(h), rgb(w * h * 3) {
    for (std::size_t i = 0; i < w * h; ++i) {
        rgb[3 * i] = fill.r;
        rgb[3 * i + 1] = fill.g;
        rgb[3 * i + 2] = fill.b;
    }
}

Rgb Image::at(std::size_t x, std::size_t y) const {
    const std::size_t i = 3 * (y * width + x);
    return {rgb[i], rgb[i + 1], rgb[i + 2]};
}

PendulumState step_pendulum(const PendulumState& s, double dt) {
    if (!(dt > 0.0)) throw std::invalid_argument("step_pendulum: dt must be positive");
    const std::array<double, 4> y{s.theta1, s.theta1 + s.theta2, s.omega1, s.omega1 + s.omega2};
    auto axpy = [](const std::array<double, 4>& a, const std::array<double, 4>& b, double h) {
        return std::array<double, 4>{a[0] + h * b[0], a[1] + h * b[1], a[2] + h * b[2], a[3] + h * b[3]};
    };
    const auto k1 = pendulum_deriv(y);
    const auto k2 = pendulum_deriv(axpy(y, k1, 0.5 * dt));
    const auto k3 = pendulum_deriv(axpy(y, k2, 0.5 * dt));
    const auto k4 = pendulum_deriv(axpy(y, k3, dt));
    std::array<double, 4> n;
    for (int i = 0; i < 4; ++i) n[i] = y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    return {wrap_pi(n[0]), wrap_pi(n[1] - n[0]), n[2], n[3] - n[2]};
}

double pendulum_energy(const PendulumState& s) {
    const double a1 = s.theta1, a2 = s.theta1 + s.theta2;
    const double w1 = s.omega1, w2 = s.omega1 + s.omega2;
    const double kinetic = 0.5 * w1 * w1 + 0.5 * (w1 * w1 + w2 * w2 + 2.0 * w1 * w2 * std::cos(a1 - a2));
    const double potential = -kPendulumGravity * (2.0 * std::cos(a1) + std::cos(a2));
    return kinetic + potential;
}

std::vector<double> pendulum_keypoints(const PendulumState& s) {
    const double a1 = s.theta1, a2 = s.theta1 + s.theta2;
    const double x1 = std::sin(a1), y1 = -std::cos(a1);
    const double x2 = x1 + std::sin(a2), y2 = y1 - std::cos(a2);
    const double k = 1.0 / kPendulumHalfExtent;
    return {0.0, 0.0, x1 * k, -y1 * k, x2 * k, -y2 * k};
}

SpiderState random_spider(std::mt19937_64& rng) {
    SpiderState s;
    const double half = 0.5 * kSpiderRootWindow, c = 0.5 * kSpiderCanvas;
    s.x = uniform(rng, c - half, c + half);
    s.y = uniform(rng, c - half, c + half);
    s.angle = uniform(rng, 0.0, 2.0 * kPi);
    s.vx = symmetric_mixture(rng, 24.0, 15.0);
    s.vy = symmetric_mixture(rng, 24.0, 15.0);
    s.vangle = symmetric_mixture(rng, 0.3, 0.1);
    for (int k = 0; k < 3; ++k) {
        s.inner_angle[k] = uniform(rng, k * 2.0 * kPi / 3.0, (k + 1) * 2.0 * kPi / 3.0);
        s.inner_ext[k] = uniform(rng, kSpiderMinExt, kSpiderMaxExt);
        s.outer_angle[k] = uniform(rng, -kSpiderOuterLimit, kSpiderOuterLimit);
        s.inner_angle_vel[k] = symmetric_mixture(rng, 0.3, 0.1);
        s.inner_ext_vel[k] = symmetric_mixture(rng, 500.0, 60.0);
        s.outer_vel[k] = symmetric_mixture(rng, 0.3, 0.1);
    }
    return s;
}

SpiderState step_spider(const SpiderState& s, double dt) {
    if (!(dt > 0.0)) throw std::invalid_argument("step_spider: dt must be positive");
    SpiderState n = s;
    auto limited = [dt](double& pos, double& vel, double lo, double hi) {
        pos += vel * dt;
        if (pos > hi) {
            pos = hi;
            vel = -vel;
        } else if (pos < lo) {
            pos = lo;
            vel = -vel;
        }
    };
    const double half = 0.5 * kSpiderRootWindow, c = 0.5 * kSpiderCanvas;
    limited(n.x, n.vx, c - half, c + half);
    limited(n.y, n.vy, c - half, c + half);
    n.angle = std::fmod(n.angle + n.vangle * dt, 2.0 * kPi);
    if (n.angle < 0.0) n.angle += 2.0 * kPi;
    for (int k = 0; k < 3; ++k) {
        limited(n.inner_angle[k], n.inner_angle_vel[k], k * 2.0 * kPi / 3.0, (k + 1) * 2.0 * kPi / 3.0);
        limited(n.inner_ext[k], n.inner_ext_vel[k], kSpiderMinExt, kSpiderMaxExt);
        limited(n.outer_angle[k], n.outer_vel[k], -kSpiderOuterLimit, kSpiderOuterLimit);
    }
    return n;
}

bool spider_constraints_hold(const SpiderState& s, double tol) {
    for (int k = 0; k < 3; ++k) {
        if (s.inner_ext[k] < kSpiderMinExt - tol || s.inner_ext[k] > kSpiderMaxExt + tol) return false;
        if (std::abs(s.outer_angle[k]) > kSpiderOuterLimit + tol) return false;
        if (s.inner_angle[k] < k * 2.0 * kPi / 3.0 - tol || s.inner_angle[k] > (k + 1) * 2.0 * kPi / 3.0 + tol) return false;
    }
    return true;
}

std::vector<double> spider_pixels(const SpiderState& s) {
    std::vector<double> out(14);
    out[0] = s.x;
    out[1] = s.y;
    for (int k = 0; k < 3; ++k) {
        const double a = s.angle + s.inner_angle[k];
        const double mx = s.x + (s.inner_ext[k] + kSpiderLinkLength) * std::cos(a);
        const double my = s.y + (s.inner_ext[k] + kSpiderLinkLength) * std::sin(a);
        const double b = a + s.outer_angle[k];
        out[2 + 2 * k] = mx;
        out[3 + 2 * k] = my;
        out[8 + 2 * k] = mx + kSpiderLinkLength * std::cos(b);
        out[9 + 2 * k] = my + kSpiderLinkLength * std::sin(b);
    }
    return out;
}

std::vector<double> spider_keypoints(const SpiderState& s) {
    auto p = spider_pixels(s);
    const double h = 0.5 * kSpiderCanvas;
    for (auto& v : p) v = (v - h) / h;
    return p;
}

ClutterElement spawn_clutter(Task task, std::mt19937_64& rng, bool dynamic) {
    ClutterElement c;
    c.dynamic = dynamic;
    if (task == Task::pendulum) {
        static const Rgb rect_colors[2] = {{0, 204, 204}, {245, 87, 77}};
        static const Rgb circle_colors[2] = {{204, 204, 0}, {96, 217, 63}};
        const bool rect = coin(rng, 0.8);
        c.shape = rect ? ShapeKind::rectangle : ShapeKind::circle;
        if (rect) {
            c.length = std::max(0.0, normal(rng, 0.2, 0.05));
            c.height = std::max(0.0, normal(rng, 0.8, 0.2));
            c.color = rect_colors[coin(rng, 0.5)];
        } else {
            c.radius = std::max(0.0, normal(rng, 0.1, 0.1));
            c.color = circle_colors[coin(rng, 0.5)];
        }
        const double extent = 1.5 * kPendulumHalfExtent;
        c.x = uniform(rng, -extent, extent);
        c.y = uniform(rng, -extent, extent);
        c.angle = uniform(rng, 0.0, 2.0 * kPi);
        c.vx = normal(rng, 0.0, 0.025);
        c.vy = normal(rng, 0.0, 0.025);
        c.vangle = normal(rng, 0.0, 0.05);
    } else {
        static const Rgb rect_colors[3] = {{255, 0, 0}, {0, 255, 0}, {0, 0, 255}};
        const bool rect = coin(rng, 0.7);
        c.shape = rect ? ShapeKind::rectangle : ShapeKind::circle;
        if (rect) {
            c.length = std::max(0.0, normal(rng, 20.0, 3.0));
            c.height = std::max(0.0, normal(rng, 80.0, 5.0));
            c.color = rect_colors[std::uniform_int_distribution<int>(0, 2)(rng)];
        } else {
            c.radius = std::max(0.0, normal(rng, 10.0, 3.0));
            c.color = {255, 255, 0};
        }
        c.x = uniform(rng, 0.0, kSpiderCanvas);
        c.y = uniform(rng, 0.0, kSpiderCanvas);
        c.angle = uniform(rng, 0.0, 2.0 * kPi);
        c.vx = normal(rng, 0.0, 3.0);
        c.vy = normal(rng, 0.0, 3.0);
        c.vangle = normal(rng, 0.0, 0.05);
    }
    c.layer = coin(rng, 0.5) ? Layer::beneath : Layer::on_top;
    if (!dynamic) c.vx = c.vy = c.vangle = 0.0;
    return c;
}

void advance_clutter(std::vector<ClutterElement>& clutter) {
    for (auto& c : clutter) {
        if (!c.dynamic) continue;
        c.x += c.vx;
        c.y += c.vy;
        c.angle += c.vangle;
    }
}

RenderedFrame render_pendulum(const PendulumState& s, const std::vector<ClutterElement>& clutter, std::size_t size) {
    Canvas canvas(size, {255, 255, 255});
    const double half = 0.5 * static_cast<double>(size);
    const Projection p{half / kPendulumHalfExtent, half, half, true};
    draw_clutter(canvas, clutter, Layer::beneath, p);
    const auto kp = pendulum_keypoints(s);
    // Keypoints are normalized with y down; map back to pixels.
    double px[3], py[3];
    for (int i = 0; i < 3; ++i) {
        px[i] = half + kp[2 * i] * half;
        py[i] = half + kp[2 * i + 1] * half;
    }
    const double width = 0.2 * p.scale, radius = 0.1 * p.scale;
    draw_link(canvas, px[0], py[0], px[1], py[1], width, {0, 204, 204});
    draw_link(canvas, px[1], py[1], px[2], py[2], width, {245, 87, 77});
    canvas.circle(px[0], py[0], radius, {204, 204, 0}, false);
    canvas.circle(px[1], py[1], radius, {204, 204, 0}, false);
    canvas.circle(px[2], py[2], radius, {96, 217, 63}, false);
    draw_clutter(canvas, clutter, Layer::on_top, p);
    return {std::move(canvas.image), std::move(canvas.mask)};
}

RenderedFrame render_spider(const SpiderState& s, const std::vector<ClutterElement>& clutter, std::size_t size) {
    const auto n = static_cast<std::size_t>(kSpiderCanvas);
    Canvas canvas(n, {0, 0, 0});
    const Projection p{1.0, 0.0, 0.0, false};
    draw_clutter(canvas, clutter, Layer::beneath, p);
    static const Rgb arm_colors[3] = {{255, 0, 0}, {0, 255, 0}, {0, 0, 255}};
    const auto kp = spider_pixels(s);
    for (int k = 0; k < 3; ++k) {
        const double a = s.angle + s.inner_angle[k];
        const double sx = s.x + s.inner_ext[k] * std::cos(a), sy = s.y + s.inner_ext[k] * std::sin(a);
        draw_link(canvas, sx, sy, kp[2 + 2 * k], kp[3 + 2 * k], kSpiderLinkWidth, arm_colors[k]);
        draw_link(canvas, kp[2 + 2 * k], kp[3 + 2 * k], kp[8 + 2 * k], kp[9 + 2 * k], kSpiderLinkWidth, arm_colors[k]);
    }
    for (int j = 0; j < 7; ++j) canvas.circle(kp[2 * j], kp[2 * j + 1], kSpiderJointRadius, {255, 255, 0}, false);
    draw_clutter(canvas, clutter, Layer::on_top, p);
    return downsample(canvas, size);
}

double clutter_ratio(const SequenceSample& seq) {
    if (seq.masks.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& m : seq.masks) {
        std::size_t on = 0;
        for (auto v : m) on += v != 0;
        acc += static_cast<double>(on) / static_cast<double>(m.size());
    }
    return acc / static_cast<double>(seq.masks.size());
}

SequenceSample simulate_sequence(Task task, std::size_t frames, std::size_t image_size,
                                 std::vector<ClutterElement> clutter, std::mt19937_64& rng) {
    SequenceSample seq;
    seq.task = task;
    seq.image_size = image_size;
    seq.clutter_count = static_cast<std::uint32_t>(clutter.size());
    seq.dynamic = std::any_of(clutter.begin(), clutter.end(), [](const auto& c) { return c.dynamic; });
    if (task == Task::pendulum) {
        PendulumState s{uniform(rng, -kPi, kPi), uniform(rng, -kPi, kPi), normal(rng, 0.0, 1.0), normal(rng, 0.0, 1.0)};
        for (std::size_t t = 0; t < frames; ++t) {
            auto r = render_pendulum(s, clutter, image_size);
            seq.frames.push_back(std::move(r.image));
            seq.masks.push_back(std::move(r.mask));
            seq.keypoints.push_back(pendulum_keypoints(s));
            for (int k = 0; k < 5; ++k) s = step_pendulum(s, kPendulumFrameDt / 5.0);
            advance_clutter(clutter);
        }
    } else {
        SpiderState s = random_spider(rng);
        for (std::size_t t = 0; t < frames; ++t) {
            auto r = render_spider(s, clutter, image_size);
            seq.frames.push_back(std::move(r.image));
            seq.masks.push_back(std::move(r.mask));
            seq.keypoints.push_back(spider_keypoints(s));
            s = step_spider(s, kSpiderFrameDt);
            advance_clutter(clutter);
        }
    }
    seq.clutter_ratio = clutter_ratio(seq);
    return seq;
}

std::vector<RatioBin> train_bins(Task task) {
    std::vector<RatioBin> b{{0.0, 0.0, true}, {0.0, 0.04, false}, {0.04, 0.1, false}};
    if (task == Task::spider) {
        b.push_back({0.1, 0.2, false});
        b.push_back({0.2, 0.3, false});
    }
    return b;
}

std::vector<RatioBin> test_deciles() {
    std::vector<RatioBin> b;
    for (int d = 0; d < 10; ++d) b.push_back({0.1 * d, d == 9 ? 0.95 : 0.1 * (d + 1), false});
    return b;
}

DatasetSpec default_spec(Task task, Split split) {
    DatasetSpec s;
    s.task = task;
    s.split = split;
    s.frames = 20;
    if (split == Split::train) s.sequences = task == Task::pendulum ? 1024 : 2048;
    if (split == Split::val) s.sequences = task == Task::pendulum ? 150 : 300;
    if (split == Split::test) {
        s.sequences = 50;
        s.frames = task == Task::pendulum ? 100 : 20;
    }
    return s;
}

ChannelStats channel_stats(const std::vector<SequenceSample>& seqs) {
    std::array<double, 3> sum{}, sq{};
    double n = 0.0;
    for (const auto& s : seqs) {
        for (const auto& f : s.frames) {
            for (std::size_t i = 0; i < f.rgb.size(); i += 3) {
                for (int c = 0; c < 3; ++c) {
                    const double v = f.rgb[i + c] / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            n += static_cast<double>(f.rgb.size() / 3);
        }
    }
    ChannelStats st;
    if (n == 0.0) return st;
    for (int c = 0; c < 3; ++c) {
        st.mean[c] = sum[c] / n;
        const double var = std::max(0.0, sq[c] / n - st.mean[c] * st.mean[c]);
        st.stddev[c] = var > 1e-12 ? std::sqrt(var) : 1.0;
    }
    return st;
}

Dataset generate_dataset(const DatasetSpec& spec) {
    if (spec.sequences == 0 || spec.frames == 0 || spec.image_size == 0) {
        throw std::invalid_argument("generate_dataset: counts and sizes must be positive");
    }
    Dataset ds;
    ds.spec = spec;
    const bool test = spec.split == Split::test;
    const auto bins = test ? test_deciles() : train_bins(spec.task);
    const std::size_t total = test ? spec.sequences * bins.size() : spec.sequences;
    const auto counts = train_counts(spec.task);
    const std::uint64_t base = mix(mix(spec.seed, static_cast<std::uint64_t>(spec.task) + 1),
                                   static_cast<std::uint64_t>(spec.split) + 11);

    for (std::size_t i = 0; i < total; ++i) {
        const std::size_t b = test ? i / spec.sequences : i % bins.size();
        const std::size_t within = test ? i % spec.sequences : i / bins.size();
        const RatioBin& bin = bins[b];
        const bool last = test && b + 1 == bins.size();
        const bool dynamic = within % 2 == 1;
        std::mt19937_64 rng(mix(base, i));

        if (bin.none) {
            auto seq = simulate_sequence(spec.task, spec.frames, spec.image_size, {}, rng);
            seq.bin = static_cast<int>(b);
            ds.sequences.push_back(std::move(seq));
            continue;
        }
        // Training bins start from binomial clutter counts and
        // fall back to count search (as used for the test deciles) when the
        // binomial draws keep missing the bin.
        const std::size_t binomial_attempts = test ? 0 : spec.retry_budget / 4;
        std::size_t n = std::max<std::size_t>(1, static_cast<std::size_t>(2.0 * counts.n * counts.p));
        bool accepted = false;
        for (std::size_t attempt = 0; attempt < spec.retry_budget; ++attempt) {
            std::vector<ClutterElement> clutter;
            if (attempt < binomial_attempts) {
                std::binomial_distribution<int> bd(static_cast<int>(counts.n), counts.p);
                const int beneath = bd(rng), top = bd(rng);
                for (int k = 0; k < beneath + top; ++k) {
                    auto c = spawn_clutter(spec.task, rng, dynamic);
                    c.layer = k < beneath ? Layer::beneath : Layer::on_top;
                    clutter.push_back(c);
                }
            } else {
                for (std::size_t k = 0; k < n; ++k) clutter.push_back(spawn_clutter(spec.task, rng, dynamic));
            }
            const std::size_t used = clutter.size();
            auto seq = simulate_sequence(spec.task, spec.frames, spec.image_size, std::move(clutter), rng);
            const double r = seq.clutter_ratio;
            if (in_bin(bin, r, test, last)) {
                seq.bin = static_cast<int>(b);
                ds.sequences.push_back(std::move(seq));
                accepted = true;
                break;
            }
            // Count search under a Poisson coverage model r = 1 - exp(-k n).
            const double target = 0.5 * (bin.lo + bin.hi);
            const double cur = std::max<std::size_t>(used, 1);
            double next;
            if (r <= 0.0) {
                next = 2.0 * cur + 1.0;
            } else {
                next = cur * std::log(1.0 - target) / std::log(1.0 - std::min(r, 0.999));
            }
            next = std::clamp(next, 0.5 * cur, 4.0 * cur);
            // Jitter keeps the search from cycling between two counts.
            next *= uniform(rng, 0.9, 1.1);
            n = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(next)));
        }
        if (!accepted) {
            throw std::runtime_error("generate_dataset: clutter " + std::string(test ? "decile " : "bin ") +
                                     bin_name(bin, test, last) + " unreachable within " + std::to_string(spec.retry_budget) +
                                     " attempts");
        }
    }
    ds.stats = channel_stats(ds.sequences);
    return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < ds.sequences.size(); ++i) {
        const auto& s = ds.sequences[i];
        std::string buf;
        buf.append(kSeqMagic, 4);
        put<std::uint32_t>(buf, kSeqVersion);
        put<std::uint32_t>(buf, static_cast<std::uint32_t>(s.task));
        put<std::uint32_t>(buf, static_cast<std::uint32_t>(s.frames.size()));
        put<std::uint32_t>(buf, static_cast<std::uint32_t>(s.image_size));
        put<std::uint32_t>(buf, static_cast<std::uint32_t>(node_count(s.task)));
        put<std::int32_t>(buf, s.bin);
        put<std::uint8_t>(buf, s.dynamic ? 1 : 0);
        put<std::uint32_t>(buf, s.clutter_count);
        put<double>(buf, s.clutter_ratio);
        for (const auto& f : s.frames) buf.append(reinterpret_cast<const char*>(f.rgb.data()), f.rgb.size());
        for (const auto& m : s.masks) buf.append(reinterpret_cast<const char*>(m.data()), m.size());
        for (const auto& k : s.keypoints)
            for (double v : k) put<double>(buf, v);
        put<std::uint64_t>(buf, fnv1a(buf));
        std::ostringstream name;
        name << "seq_" << std::setw(5) << std::setfill('0') << i << ".bin";
        std::ofstream out(dir / name.str(), std::ios::binary);
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!out) throw std::runtime_error("cannot write " + (dir / name.str()).string());
    }
    std::ofstream m(dir / "manifest.txt");
    m << std::setprecision(17);
    m << "format dnbp-dataset 1\n";
    m << "task " << to_string(ds.spec.task) << "\n";
    m << "split " << to_string(ds.spec.split) << "\n";
    m << "sequences " << ds.sequences.size() << "\n";
    m << "per_bin " << ds.spec.sequences << "\n";
    m << "frames " << ds.spec.frames << "\n";
    m << "image_size " << ds.spec.image_size << "\n";
    m << "seed " << ds.spec.seed << "\n";
    m << "retry_budget " << ds.spec.retry_budget << "\n";
    const auto bins = ds.spec.split == Split::test ? test_deciles() : train_bins(ds.spec.task);
    std::vector<std::size_t> pop(bins.size(), 0);
    for (const auto& s : ds.sequences)
        if (s.bin >= 0 && static_cast<std::size_t>(s.bin) < bins.size()) ++pop[s.bin];
    const bool test = ds.spec.split == Split::test;
    for (std::size_t b = 0; b < bins.size(); ++b) {
        m << "bin " << b << " " << bin_name(bins[b], test, b + 1 == bins.size()) << " count " << pop[b] << "\n";
    }
    m << "channel_mean " << ds.stats.mean[0] << " " << ds.stats.mean[1] << " " << ds.stats.mean[2] << "\n";
    m << "channel_std " << ds.stats.stddev[0] << " " << ds.stats.stddev[1] << " " << ds.stats.stddev[2] << "\n";
    if (!m) throw std::runtime_error("cannot write manifest in " + dir.string());
}

Dataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream m(dir / "manifest.txt");
    if (!m) throw std::runtime_error("dataset manifest missing in " + dir.string());
    Dataset ds;
    std::size_t count = 0;
    bool format_ok = false;
    for (std::string line; std::getline(m, line);) {
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "format") {
            std::string name;
            int version = 0;
            ls >> name >> version;
            if (name != "dnbp-dataset" || version != 1) throw std::runtime_error("unsupported dataset format in " + dir.string());
            format_ok = true;
        } else if (key == "task") {
            std::string v;
            ls >> v;
            ds.spec.task = parse_task(v);
        } else if (key == "split") {
            std::string v;
            ls >> v;
            ds.spec.split = parse_split(v);
        } else if (key == "sequences") {
            ls >> count;
        } else if (key == "per_bin") {
            ls >> ds.spec.sequences;
        } else if (key == "frames") {
            ls >> ds.spec.frames;
        } else if (key == "image_size") {
            ls >> ds.spec.image_size;
        } else if (key == "seed") {
            ls >> ds.spec.seed;
        } else if (key == "retry_budget") {
            ls >> ds.spec.retry_budget;
        } else if (key == "channel_mean") {
            ls >> ds.stats.mean[0] >> ds.stats.mean[1] >> ds.stats.mean[2];
        } else if (key == "channel_std") {
            ls >> ds.stats.stddev[0] >> ds.stats.stddev[1] >> ds.stats.stddev[2];
        }
    }
    if (!format_ok) throw std::runtime_error("dataset manifest has no format header in " + dir.string());

    std::vector<SequenceSample> seqs;
    for (std::size_t i = 0; i < count; ++i) {
        std::ostringstream name;
        name << "seq_" << std::setw(5) << std::setfill('0') << i << ".bin";
        const auto path = dir / name.str();
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("dataset record missing: " + path.string());
        std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        if (data.size() < 12 + 8) throw std::runtime_error(path.string() + ": truncated record");
        std::uint64_t stored;
        std::memcpy(&stored, data.data() + data.size() - 8, 8);
        const std::string body = data.substr(0, data.size() - 8);
        Reader r{body, 0, path.string()};
        char magic[4];
        r.bytes(reinterpret_cast<std::uint8_t*>(magic), 4);
        if (std::memcmp(magic, kSeqMagic, 4) != 0) throw std::runtime_error(path.string() + ": bad magic");
        if (r.get<std::uint32_t>() != kSeqVersion) throw std::runtime_error(path.string() + ": unsupported version");
        SequenceSample s;
        const auto task = r.get<std::uint32_t>();
        if (task > 1) throw std::runtime_error(path.string() + ": bad task");
        s.task = static_cast<Task>(task);
        const std::size_t frames = r.get<std::uint32_t>();
        s.image_size = r.get<std::uint32_t>();
        const std::size_t nodes = r.get<std::uint32_t>();
        s.bin = r.get<std::int32_t>();
        s.dynamic = r.get<std::uint8_t>() != 0;
        s.clutter_count = r.get<std::uint32_t>();
        s.clutter_ratio = r.get<double>();
        const std::size_t px = s.image_size * s.image_size;
        const std::size_t expected = r.pos + frames * (px * 3 + px + nodes * 2 * 8);
        if (body.size() != expected) throw std::runtime_error(path.string() + ": truncated record");
        if (fnv1a(body) != stored) throw std::runtime_error(path.string() + ": checksum mismatch");
        for (std::size_t t = 0; t < frames; ++t) {
            Image img(s.image_size, s.image_size, {});
            r.bytes(img.rgb.data(), img.rgb.size());
            s.frames.push_back(std::move(img));
        }
        for (std::size_t t = 0; t < frames; ++t) {
            std::vector<std::uint8_t> mask(px);
            r.bytes(mask.data(), px);
            s.masks.push_back(std::move(mask));
        }
        for (std::size_t t = 0; t < frames; ++t) {
            std::vector<double> k(nodes * 2);
            for (auto& v : k) v = r.get<double>();
            s.keypoints.push_back(std::move(k));
        }
        seqs.push_back(std::move(s));
    }
    ds.sequences = std::move(seqs);
    return ds;
}

void save_channel_stats(const ChannelStats& s, const std::filesystem::path& path) {
    std::ofstream out(path);
    out << std::setprecision(17) << "channel_mean " << s.mean[0] << " " << s.mean[1] << " " << s.mean[2] << "\n"
        << "channel_std " << s.stddev[0] << " " << s.stddev[1] << " " << s.stddev[2] << "\n";
    if (!out) throw std::runtime_error("cannot write " + path.string());
}

ChannelStats load_channel_stats(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open channel statistics " + path.string());
    ChannelStats s;
    bool mean = false, sd = false;
    for (std::string line; std::getline(in, line);) {
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "channel_mean") mean = static_cast<bool>(ls >> s.mean[0] >> s.mean[1] >> s.mean[2]);
        if (key == "channel_std") sd = static_cast<bool>(ls >> s.stddev[0] >> s.stddev[1] >> s.stddev[2]);
    }
    if (!mean || !sd) throw std::runtime_error("malformed channel statistics in " + path.string());
    return s;
}

potentials::Frame normalize_frame(const Image& img, const ChannelStats& stats) {
    potentials::Frame f{3, img.height, img.width, std::vector<double>(3 * img.width * img.height)};
    const std::size_t px = img.width * img.height;
    for (std::size_t i = 0; i < px; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
            f.pixels[c * px + i] = (img.rgb[3 * i + c] / 255.0 - stats.mean[c]) / stats.stddev[c];
        }
    }
    return f;
}

training::LabeledSequence to_labeled(const SequenceSample& seq, const ChannelStats& stats) {
    training::LabeledSequence out;
    for (const auto& f : seq.frames) out.frames.push_back(normalize_frame(f, stats));
    out.truth = seq.keypoints;
    return out;
}

std::vector<training::LabeledSequence> to_labeled(const Dataset& ds, const ChannelStats& stats) {
    std::vector<training::LabeledSequence> out;
    out.reserve(ds.sequences.size());
    for (const auto& s : ds.sequences) out.push_back(to_labeled(s, stats));
    return out;
}

}  // namespace dnbp::simworld
