#include "dnbp/evalreport/evalreport.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <queue>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "dnbp/autodiff/checkpoint.hpp"

namespace dnbp::evalreport {

namespace {

std::size_t cell_index(double v, const GridSpec& grid) {
    const double t = (v - grid.lo) / (grid.hi - grid.lo) * static_cast<double>(grid.bins);
    if (!(t > 0.0)) return 0;  // also catches NaN
    return std::min(static_cast<std::size_t>(t), grid.bins - 1);
}

double cell_center(std::size_t i, const GridSpec& grid) {
    return grid.lo + (static_cast<double>(i) + 0.5) * (grid.hi - grid.lo) / static_cast<double>(grid.bins);
}

void normalize_in_place(std::vector<double>& v) {
    double total = 0.0;
    for (double x : v) total += x;
    if (total > 0.0)
        for (double& x : v) x /= total;
}

std::string csv_number(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

}  // namespace

std::vector<double> histogram2d(std::span<const double> positions, std::size_t dim, std::span<const double> weights,
                                const GridSpec& grid) {
    if (dim < 2) throw std::invalid_argument("histogram2d needs at least two state dimensions");
    if (grid.bins == 0 || !(grid.hi > grid.lo)) throw std::invalid_argument("histogram2d: empty grid");
    if (positions.size() != weights.size() * dim) throw std::invalid_argument("histogram2d: size mismatch");
    std::vector<double> h(grid.bins * grid.bins, 0.0);
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const auto cx = cell_index(positions[i * dim], grid);
        const auto cy = cell_index(positions[i * dim + 1], grid);
        h[cy * grid.bins + cx] += weights[i];
    }
    normalize_in_place(h);
    return h;
}

double histogram_entropy(std::span<const double> p) {
    double h = 0.0;
    for (double v : p)
        if (v > 0.0) h -= v * std::log(v);
    return std::max(h, 0.0);
}

double discrete_entropy(const ParticleSet& b, const GridSpec& grid) {
    return histogram_entropy(histogram2d(b.positions, b.dim, b.weights, grid));
}

TrackReport make_track_report(const SequenceResult& r) {
    if (r.estimate.size() != r.truth.size())
        throw std::invalid_argument("track report: " + std::to_string(r.estimate.size()) + " predicted frames vs " +
                                    std::to_string(r.truth.size()) + " labeled frames");
    if (!r.entropy.empty() && r.entropy.size() != r.estimate.size())
        throw std::invalid_argument("track report: entropy trace length mismatch");
    TrackReport rep;
    rep.decile = r.decile;
    rep.entropy = r.entropy;
    const double px = static_cast<double>(r.image_size) / 2.0;
    for (std::size_t t = 0; t < r.estimate.size(); ++t) {
        const auto& e = r.estimate[t];
        const auto& g = r.truth[t];
        if (e.size() != g.size() || e.size() % r.dim != 0)
            throw std::invalid_argument("track report: frame " + std::to_string(t) + " has mismatched node states");
        std::vector<double> err(e.size() / r.dim), err_px(e.size() / r.dim);
        for (std::size_t n = 0; n < err.size(); ++n) {
            double s = 0.0;
            for (std::size_t k = 0; k < r.dim; ++k) {
                const double d = e[n * r.dim + k] - g[n * r.dim + k];
                s += d * d;
            }
            err[n] = std::sqrt(s);
            err_px[n] = err[n] * px;
        }
        rep.error.push_back(std::move(err));
        rep.error_px.push_back(std::move(err_px));
    }
    return rep;
}

std::vector<ErrorRow> avg_error_report(const std::string& task, std::span<const SequenceResult> results) {
    // Collect per-cell values first and sort them so the mean does not
    // depend on the order of the sequences.
    std::map<std::pair<std::size_t, int>, std::vector<double>> cells;
    for (const auto& r : results) {
        const auto rep = make_track_report(r);
        for (const auto& frame : rep.error_px)
            for (std::size_t n = 0; n < frame.size(); ++n) cells[{n, r.decile}].push_back(frame[n]);
    }
    std::vector<ErrorRow> rows;
    for (auto& [key, values] : cells) {
        std::sort(values.begin(), values.end());
        double s = 0.0;
        for (double v : values) s += v;
        rows.push_back({task, key.first, key.second, s / static_cast<double>(values.size()), values.size()});
    }
    return rows;
}

void write_error_csv(std::span<const ErrorRow> rows, std::ostream& out) {
    out << "task,node,decile,mean_error_px,n\n";
    for (const auto& r : rows)
        out << r.task << ',' << r.node << ',' << r.decile << ',' << csv_number(r.mean_error_px) << ',' << r.n << '\n';
}

std::vector<EntropyRow> entropy_trace(std::span<const SequenceResult> results) {
    std::vector<EntropyRow> rows;
    for (std::size_t s = 0; s < results.size(); ++s)
        for (std::size_t t = 0; t < results[s].entropy.size(); ++t)
            for (std::size_t n = 0; n < results[s].entropy[t].size(); ++n)
                rows.push_back({s, t, n, results[s].entropy[t][n]});
    return rows;
}

void write_entropy_csv(std::span<const EntropyRow> rows, std::ostream& out) {
    out << "sequence,frame,node,entropy\n";
    for (const auto& r : rows) out << r.sequence << ',' << r.frame << ',' << r.node << ',' << csv_number(r.entropy) << '\n';
}

void write_line_plot_svg(std::span<const Series> series, const std::string& title, const std::string& x_label,
                         const std::string& y_label, std::ostream& out) {
    constexpr double w = 640, h = 400, left = 60, right = 150, top = 40, bottom = 50;
    double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    bool any = false;
    for (const auto& s : series) {
        if (s.x.size() != s.y.size()) throw std::invalid_argument("plot series '" + s.label + "' has mismatched axes");
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!any) {
                x0 = x1 = s.x[i];
                y0 = y1 = s.y[i];
                any = true;
            }
            x0 = std::min(x0, s.x[i]);
            x1 = std::max(x1, s.x[i]);
            y0 = std::min(y0, s.y[i]);
            y1 = std::max(y1, s.y[i]);
        }
    }
    y0 = std::min(y0, 0.0);
    if (x1 <= x0) x1 = x0 + 1;
    if (y1 <= y0) y1 = y0 + 1;
    auto sx = [&](double x) { return left + (x - x0) / (x1 - x0) * (w - left - right); };
    auto sy = [&](double y) { return h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom); };
    static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2"};

    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<text x=\"" << w / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << title << "</text>\n";
    out << "<line x1=\"" << left << "\" y1=\"" << h - bottom << "\" x2=\"" << w - right << "\" y2=\"" << h - bottom
        << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << h - bottom
        << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
        out << "<text x=\"" << sx(xv) << "\" y=\"" << h - bottom + 16 << "\" text-anchor=\"middle\" font-size=\"11\">"
            << std::setprecision(3) << xv << "</text>\n";
        out << "<text x=\"" << left - 6 << "\" y=\"" << sy(yv) + 4 << "\" text-anchor=\"end\" font-size=\"11\">"
            << std::setprecision(3) << yv << "</text>\n";
    }
    out << "<text x=\"" << (left + w - right) / 2 << "\" y=\"" << h - 10 << "\" text-anchor=\"middle\" font-size=\"12\">"
        << x_label << "</text>\n";
    out << "<text x=\"14\" y=\"" << (top + h - bottom) / 2 << "\" transform=\"rotate(-90 14 " << (top + h - bottom) / 2
        << ")\" text-anchor=\"middle\" font-size=\"12\">" << y_label << "</text>\n";
    for (std::size_t k = 0; k < series.size(); ++k) {
        const char* color = palette[k % std::size(palette)];
        out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (std::size_t i = 0; i < series[k].x.size(); ++i)
            out << std::setprecision(6) << sx(series[k].x[i]) << ',' << sy(series[k].y[i]) << ' ';
        out << "\"/>\n";
        const double ly = top + 16.0 * static_cast<double>(k);
        out << "<text x=\"" << w - right + 10 << "\" y=\"" << ly + 4 << "\" font-size=\"12\" fill=\"" << color << "\">"
            << series[k].label << "</text>\n";
    }
    out << "</svg>\n";
}

void write_heatmap_pgm(std::span<const double> values, std::size_t width, std::size_t height,
                       const std::filesystem::path& path) {
    if (values.size() != width * height) throw std::invalid_argument("heat map size mismatch");
    double hi = 0.0;
    for (double v : values) hi = std::max(hi, v);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "P5\n" << width << ' ' << height << "\n255\n";
    for (double v : values) {
        const double t = hi > 0.0 ? std::clamp(v / hi, 0.0, 1.0) : 0.0;
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(t * 255.0))));
    }
}

void write_grid_csv(std::span<const double> values, std::size_t width, std::ostream& out) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        out << csv_number(values[i]);
        out << ((i + 1) % width == 0 ? '\n' : ',');
    }
}

std::vector<double> conditional_child_weights(const Belief& child, std::span<const double> parent_state,
                                              const GraphModel& g, const potentials::PotentialModel& pm,
                                              NodeIndex parent) {
    const auto e = g.edge_between(parent, child.node);
    if (!e) throw std::invalid_argument("nodes " + std::to_string(parent) + " and " + std::to_string(child.node) +
                                        " are not adjacent");
    const std::size_t n = child.size(), dim = child.dim;
    ad::Tape tape(false);
    auto xc = tape.constant({n, dim}, child.positions);
    std::vector<double> rep;
    rep.reserve(n * dim);
    for (std::size_t i = 0; i < n; ++i) rep.insert(rep.end(), parent_state.begin(), parent_state.end());
    auto xp = tape.constant({n, dim}, rep);
    const bool child_is_source = g.edge(*e).source == child.node;
    auto psi = child_is_source ? potentials::pairwise_density_eval(pm, tape, *e, xc, xp, ad::GradMode::frozen)
                               : potentials::pairwise_density_eval(pm, tape, *e, xp, xc, ad::GradMode::frozen);
    std::vector<double> w(n);
    const auto pv = psi.value();
    for (std::size_t i = 0; i < n; ++i) w[i] = child.weights[i] * pv[i];
    double total = 0.0;
    for (double v : w) total += v;
    if (!(total > 0.0)) throw std::runtime_error("child " + std::to_string(child.node) + " has no weight given its parent");
    for (double& v : w) v /= total;
    return w;
}

std::vector<std::vector<double>> joint_posterior_samples(std::span<const Belief> beliefs, const GraphModel& g,
                                                         const potentials::PotentialModel& pm, std::size_t k,
                                                         std::mt19937_64& rng, NodeIndex root) {
    if (!g.is_tree()) throw std::invalid_argument("joint posterior sampling requires a tree-structured graph");
    if (beliefs.size() != g.node_count()) throw std::invalid_argument("one belief per node is required");
    if (root >= g.node_count()) throw std::invalid_argument("root node out of range");
    const std::size_t dim = g.state_dim();

    // Parents in breadth-first order from the root.
    std::vector<NodeIndex> order{root};
    std::vector<NodeIndex> parent(g.node_count(), root);
    std::vector<bool> seen(g.node_count(), false);
    seen[root] = true;
    for (std::size_t i = 0; i < order.size(); ++i)
        for (NodeIndex c : g.neighbors(order[i]))
            if (!seen[c]) {
                seen[c] = true;
                parent[c] = order[i];
                order.push_back(c);
            }

    auto draw = [&](std::span<const double> w) {
        std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
        return pick(rng);
    };

    std::vector<std::vector<double>> out;
    out.reserve(k);
    for (std::size_t s = 0; s < k; ++s) {
        std::vector<double> config(g.node_count() * dim);
        for (NodeIndex node : order) {
            const Belief& b = beliefs[node];
            std::size_t i;
            if (node == root) {
                i = draw(b.weights);
            } else {
                const auto w = conditional_child_weights(
                    b, std::span<const double>(config).subspan(parent[node] * dim, dim), g, pm, parent[node]);
                i = draw(w);
            }
            const auto p = b.particle(i);
            std::copy(p.begin(), p.end(), config.begin() + static_cast<std::ptrdiff_t>(node * dim));
        }
        out.push_back(std::move(config));
    }
    return out;
}

PairwiseInspection pairwise_inspection(std::span<const std::vector<double>> truth, const GraphModel& g,
                                       const potentials::PotentialModel& pm, model::EdgeIndex edge,
                                       std::mt19937_64& rng, std::size_t grid, std::size_t draws) {
    if (edge >= g.edge_count()) throw std::invalid_argument("edge " + std::to_string(edge) + " out of range");
    const std::size_t dim = g.state_dim();
    const auto& e = g.edge(edge);
    PairwiseInspection p;
    p.grid = {grid, -1.0, 1.0};

    std::vector<double> trans;
    for (const auto& state : truth) {
        if (state.size() != g.node_count() * dim) throw std::invalid_argument("inspection truth has the wrong size");
        for (std::size_t k = 0; k < dim; ++k) trans.push_back(state[e.source * dim + k] - state[e.destination * dim + k]);
    }
    p.translation_hist = histogram2d(trans, dim, std::vector<double>(trans.size() / dim, 1.0), p.grid);

    ad::Tape tape(false);
    auto eps = potentials::gaussian_noise(tape, draws, pm.noise_dim(), rng);
    auto drawn = pm.sampler(tape, edge, eps, ad::GradMode::frozen);
    const auto dv = drawn.value();
    p.sampler_hist = histogram2d(dv, dim, std::vector<double>(draws, 1.0), p.grid);
    p.sampler_radii.resize(draws);
    for (std::size_t i = 0; i < draws; ++i) p.sampler_radii[i] = std::hypot(dv[i * dim], dv[i * dim + 1]);

    std::vector<double> cells;
    cells.reserve(grid * grid * dim);
    for (std::size_t y = 0; y < grid; ++y)
        for (std::size_t x = 0; x < grid; ++x) {
            cells.push_back(cell_center(x, p.grid));
            cells.push_back(cell_center(y, p.grid));
            for (std::size_t k = 2; k < dim; ++k) cells.push_back(0.0);
        }
    auto dens = pm.density(tape, edge, tape.constant({grid * grid, dim}, cells), ad::GradMode::frozen);
    p.density_grid.assign(dens.value().begin(), dens.value().end());
    return p;
}

double ring_mass_fraction(const PairwiseInspection& p, double radius, double tol) {
    const std::size_t n = p.grid.bins;
    std::vector<double> sorted = p.density_grid;
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    const std::size_t top = std::max<std::size_t>(1, sorted.size() / 10);
    const double cut = sorted[top - 1];
    double in = 0.0, all = 0.0;
    std::size_t taken = 0;
    for (std::size_t y = 0; y < n && taken < top; ++y)
        for (std::size_t x = 0; x < n && taken < top; ++x) {
            const double v = p.density_grid[y * n + x];
            if (v < cut) continue;
            ++taken;
            all += v;
            const double r = std::hypot(cell_center(x, p.grid), cell_center(y, p.grid));
            if (std::abs(r - radius) <= tol * radius) in += v;
        }
    return all > 0.0 ? in / all : 0.0;
}

void write_inspection(const PairwiseInspection& p, const std::filesystem::path& dir, const std::string& stem) {
    std::filesystem::create_directories(dir);
    const auto n = p.grid.bins;
    auto emit = [&](const std::vector<double>& v, const std::string& name) {
        std::ofstream csv(dir / (stem + "_" + name + ".csv"));
        if (!csv) throw std::runtime_error("cannot write inspection output in " + dir.string());
        write_grid_csv(v, n, csv);
        write_heatmap_pgm(v, n, n, dir / (stem + "_" + name + ".pgm"));
    };
    emit(p.translation_hist, "translations");
    emit(p.sampler_hist, "sampler");
    emit(p.density_grid, "density");
}

TrackedSequence track_sequence(std::span<const potentials::Frame> frames,
                               const std::vector<std::vector<double>>& truth, const GraphModel& g,
                               const potentials::PotentialModel& pm, const TrackOptions& opts) {
    if (!truth.empty() && truth.size() != frames.size())
        throw std::invalid_argument("tracking: " + std::to_string(frames.size()) + " frames vs " +
                                    std::to_string(truth.size()) + " labels");
    auto cfg = opts.inference;
    cfg.uniform_mixing = false;
    auto state = inference::init_beliefs(g, cfg.particles, opts.seed);
    TrackedSequence out;
    out.result.dim = g.state_dim();
    out.result.truth = truth;
    for (const auto& frame : frames) {
        inference::run_sequence_step(state, g, pm, frame, opts.passes, cfg);
        std::vector<double> est;
        std::vector<double> ent;
        for (const auto& b : state.beliefs) {
            const auto x = inference::max_weight_estimate(b);
            est.insert(est.end(), x.begin(), x.end());
            ent.push_back(discrete_entropy(b, opts.entropy_grid));
        }
        out.result.estimate.push_back(std::move(est));
        out.result.entropy.push_back(std::move(ent));
        out.beliefs.push_back(state.beliefs);
    }
    return out;
}

void write_track_jsonl(std::size_t sequence, const SequenceResult& r, std::ostream& out) {
    for (std::size_t t = 0; t < r.estimate.size(); ++t) {
        nlohmann::json j;
        j["sequence"] = sequence;
        j["frame"] = t;
        j["decile"] = r.decile;
        j["image_size"] = r.image_size;
        j["dim"] = r.dim;
        j["estimate"] = r.estimate[t];
        j["entropy"] = t < r.entropy.size() ? r.entropy[t] : std::vector<double>{};
        if (t < r.truth.size()) j["truth"] = r.truth[t];
        out << j.dump() << '\n';
    }
}

std::vector<SequenceResult> read_track_jsonl(std::istream& in) {
    std::map<std::size_t, SequenceResult> by_seq;
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
            auto& r = by_seq[j.at("sequence").get<std::size_t>()];
            const auto frame = j.at("frame").get<std::size_t>();
            if (frame != r.estimate.size())
                throw std::runtime_error("frame " + std::to_string(frame) + " out of order");
            r.decile = j.at("decile").get<int>();
            r.image_size = j.at("image_size").get<std::size_t>();
            r.dim = j.at("dim").get<std::size_t>();
            r.estimate.push_back(j.at("estimate").get<std::vector<double>>());
            r.entropy.push_back(j.at("entropy").get<std::vector<double>>());
            if (j.contains("truth")) r.truth.push_back(j["truth"].get<std::vector<double>>());
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("track file line " + std::to_string(line_no) + ": " + e.what());
        } catch (const std::runtime_error& e) {
            throw std::runtime_error("track file line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    std::vector<SequenceResult> out;
    for (auto& [k, v] : by_seq) out.push_back(std::move(v));
    return out;
}

void write_particle_dump(std::span<const TrackedSequence> tracks, const std::filesystem::path& path) {
    std::vector<ad::CheckpointEntry> entries;
    for (std::size_t s = 0; s < tracks.size(); ++s)
        for (std::size_t t = 0; t < tracks[s].beliefs.size(); ++t)
            for (const auto& b : tracks[s].beliefs[t]) {
                const std::string base =
                    "s" + std::to_string(s) + "/f" + std::to_string(t) + "/n" + std::to_string(b.node) + "/";
                entries.push_back(ad::value_entry(base + "positions", {b.size(), b.dim}, b.positions));
                entries.push_back(ad::value_entry(base + "weights", {b.size()}, b.weights));
            }
    ad::write_checkpoint(path, entries);
}

}  // namespace dnbp::evalreport
