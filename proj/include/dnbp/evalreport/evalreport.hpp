#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dnbp/inference/inference.hpp"
#include "dnbp/model/graph.hpp"
#include "dnbp/potentials/potentials.hpp"

namespace dnbp::evalreport {

using inference::Belief;
using inference::ParticleSet;
using model::GraphModel;
using model::NodeIndex;

// ---- Entropy -----------------------------------------------------------------
struct GridSpec {
    std::size_t bins = 10;  // per axis
    double lo = -1.0;
    double hi = 1.0;
};

// Weight histogram of the first two coordinates on a bins x bins grid
// (row-major, y rows); points outside the box fall in the edge cells.
// Normalized to sum 1 when the total weight is positive.
std::vector<double> histogram2d(std::span<const double> positions, std::size_t dim, std::span<const double> weights,
                                const GridSpec& grid);

// Shannon entropy (natural log) of the belief's weight histogram.
double discrete_entropy(const ParticleSet& b, const GridSpec& grid = {});
double histogram_entropy(std::span<const double> p);

// ---- Tracking error ---------------------------------------------------------------
// One tracked sequence: estimates and truth are [frame][node * dim].
struct SequenceResult {
    std::vector<std::vector<double>> estimate;
    std::vector<std::vector<double>> truth;
    std::vector<std::vector<double>> entropy;  // [frame][node]
    int decile = -1;
    std::size_t image_size = 128;
    std::size_t dim = 2;
};

struct TrackReport {
    std::vector<std::vector<double>> error;     // [frame][node], normalized units
    std::vector<std::vector<double>> error_px;  // [frame][node], pixels
    std::vector<std::vector<double>> entropy;   // [frame][node]
    int decile = -1;
};

// Throws std::invalid_argument when estimate and truth are misaligned.
TrackReport make_track_report(const SequenceResult& r);

struct ErrorRow {
    std::string task;
    std::size_t node = 0;
    int decile = -1;
    double mean_error_px = 0.0;
    std::size_t n = 0;
};

// Mean pixel error per (node, decile), sorted by node then decile.
std::vector<ErrorRow> avg_error_report(const std::string& task, std::span<const SequenceResult> results);

void write_error_csv(std::span<const ErrorRow> rows, std::ostream& out);

struct EntropyRow {
    std::size_t sequence = 0;
    std::size_t frame = 0;
    std::size_t node = 0;
    double entropy = 0.0;
};

std::vector<EntropyRow> entropy_trace(std::span<const SequenceResult> results);
void write_entropy_csv(std::span<const EntropyRow> rows, std::ostream& out);

// ---- Plots ---------------------------------------------------------------------------
struct Series {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
};

void write_line_plot_svg(std::span<const Series> series, const std::string& title, const std::string& x_label,
                         const std::string& y_label, std::ostream& out);

// Grayscale heat map (binary PGM), max value white; `values` row-major.
void write_heatmap_pgm(std::span<const double> values, std::size_t width, std::size_t height,
                       const std::filesystem::path& path);
void write_grid_csv(std::span<const double> values, std::size_t width, std::ostream& out);

// ---- Joint posterior -----------------------------------------------------------------------
// Ancestral sampling over a tree: the root draws by belief weight, then each
// child redraws its belief particles with weights scaled by the pairwise
// density against the parent's draw. Returns k configurations, node-major.
// Throws std::invalid_argument for non-tree graphs.
std::vector<std::vector<double>> joint_posterior_samples(std::span<const Belief> beliefs, const GraphModel& g,
                                                         const potentials::PotentialModel& pm, std::size_t k,
                                                         std::mt19937_64& rng, NodeIndex root = 0);

// Categorical probabilities the child is drawn with, given the parent state.
std::vector<double> conditional_child_weights(const Belief& child, std::span<const double> parent_state,
                                              const GraphModel& g, const potentials::PotentialModel& pm,
                                              NodeIndex parent);

// ---- Pairwise inspection ---------------------------------------------------------------------
struct PairwiseInspection {
    GridSpec grid;
    std::vector<double> translation_hist;  // training x_source - x_dest
    std::vector<double> sampler_hist;      // sampler draws
    std::vector<double> density_grid;      // psi_rho at cell centers
    std::vector<double> sampler_radii;
};

// `truth` holds node-major states per frame of every training sequence.
PairwiseInspection pairwise_inspection(std::span<const std::vector<double>> truth, const GraphModel& g,
                                       const potentials::PotentialModel& pm, model::EdgeIndex edge,
                                       std::mt19937_64& rng, std::size_t grid = 100, std::size_t draws = 10000);

// Share of the top-decile grid cells' mass lying in |r - radius| <= tol*radius.
double ring_mass_fraction(const PairwiseInspection& p, double radius, double tol);

void write_inspection(const PairwiseInspection& p, const std::filesystem::path& dir, const std::string& stem);

// ---- Tracking --------------------------------------------------------------------------------
struct TrackOptions {
    inference::InferenceConfig inference;
    std::size_t passes = 1;
    std::uint64_t seed = 0;
    GridSpec entropy_grid;
};

struct TrackedSequence {
    SequenceResult result;
    std::vector<std::vector<Belief>> beliefs;  // [frame][node]
};

// Deployment tracking: fresh uniform beliefs, then one sweep group per frame.
TrackedSequence track_sequence(std::span<const potentials::Frame> frames,
                               const std::vector<std::vector<double>>& truth, const GraphModel& g,
                               const potentials::PotentialModel& pm, const TrackOptions& opts);

// One JSON object per frame.
void write_track_jsonl(std::size_t sequence, const SequenceResult& r, std::ostream& out);
// Parses records written by write_track_jsonl, grouped by sequence.
std::vector<SequenceResult> read_track_jsonl(std::istream& in);

// Particle dumps in the checkpoint container, entries "s<seq>/f<frame>/n<node>/positions|weights".
void write_particle_dump(std::span<const TrackedSequence> tracks, const std::filesystem::path& path);

}  // namespace dnbp::evalreport
