#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dnbp/autodiff/ops.hpp"
#include "dnbp/model/graph.hpp"
#include "dnbp/potentials/potentials.hpp"

namespace dnbp::inference {

using model::DirectedEdge;
using model::GraphModel;
using model::NodeIndex;
using potentials::Observation;
using potentials::PotentialModel;

// Weighted particles; positions are row-major [size x dim].
struct ParticleSet {
    std::size_t dim = 2;
    std::vector<double> positions;
    std::vector<double> weights;

    std::size_t size() const { return weights.size(); }
    std::span<const double> particle(std::size_t i) const { return {positions.data() + i * dim, dim}; }
};

struct Message : ParticleSet {
    NodeIndex from = 0;
    NodeIndex to = 0;
};

struct Belief : ParticleSet {
    NodeIndex node = 0;
};

struct InferenceConfig {
    std::size_t particles = 200;        // M, particles per message
    double gamma = 0.9;                 // uniform-proposal decay
    bool uniform_mixing = false;        // inject gamma^(n-1) uniform particles
    std::size_t unary_samples = 10;     // U
    double bandwidth = 0.05;            // isotropic kernel sigma
};

struct InferenceState {
    // Indexed like GraphModel::message_schedule(): 2*edge (+1 if reversed).
    std::vector<Message> messages;
    std::vector<Belief> beliefs;
    std::uint64_t iteration = 1;
    std::vector<std::mt19937_64> streams;  // one per directed edge
    std::uint64_t message_updates = 0;
    std::uint64_t belief_updates = 0;
    std::vector<std::string> diagnostics;
};

std::size_t message_slot(const GraphModel& g, const DirectedEdge& dir);

// Messages hold M particles drawn uniformly over the state bounds with
// weights 1/M; each belief is the union of its incoming messages.
InferenceState init_beliefs(const GraphModel& g, std::size_t particles, std::uint64_t seed);

// Number of particles taken from the previous belief at iteration n.
std::size_t belief_sourced_count(std::size_t particles, double gamma, std::uint64_t iteration, bool uniform_mixing);

// Message particles and weights as tape values. The component weights are
// kept separately for the partial-belief loss.
struct MessageVars {
    DirectedEdge direction;
    ad::Var positions;        // [M x dim]
    ad::Var weights;          // [M] = unary_component * neigh_component
    ad::Var unary_component;  // [M] sender unary averaged over U conditional samples
    ad::Var neigh_component;  // [M] product over the sender's other neighbors
    std::size_t from_belief = 0;
};

struct MessageOptions {
    // Ground-truth state of the sender; when set, each neighbor sum is
    // replaced by a single density evaluation at this point.
    std::optional<std::vector<double>> sender_truth;
};

MessageVars message_update(ad::Tape& tape, InferenceState& state, const GraphModel& g, const PotentialModel& pm,
                           const DirectedEdge& dir, Observation& obs, const InferenceConfig& cfg,
                           const MessageOptions& opts = {});

struct BeliefVars {
    NodeIndex node = 0;
    ad::Var positions;  // [T x dim]
    ad::Var weights;    // [T], sums to 1
    ad::Var unary_dest;    // [T] receiver unary per particle
    ad::Var unary_sender;  // [T] sender unary component
    ad::Var neigh_sender;  // [T] sender neighbor component
};

// Reweights each incoming message by the receiver's unary, normalizes per
// message, forms the union, and renormalizes. Commits the belief and the
// reweighted messages to `state`. `incoming` follows g.incoming(node).
BeliefVars belief_update(ad::Tape& tape, InferenceState& state, const GraphModel& g, const PotentialModel& pm,
                         NodeIndex node, Observation& obs, std::span<const MessageVars> incoming);

// Writes message values into the state slot (weights as computed, before
// any receiver reweighting).
void commit_message(InferenceState& state, const GraphModel& g, const MessageVars& m);

// Sum_i w_i N(x; mu_i, sigma^2 I).
double belief_density_eval(const ParticleSet& b, std::span<const double> x, double sigma);

// Index of the largest weight, lowest index on ties.
std::size_t max_weight_index(const ParticleSet& b);
std::vector<double> max_weight_estimate(const ParticleSet& b);

// Deployment sweep for one frame: per pass, every directed message is
// recomputed from the previous pass's state, then every belief.
void run_sequence_step(InferenceState& state, const GraphModel& g, const PotentialModel& pm,
                       const potentials::Frame& frame, std::size_t passes, const InferenceConfig& cfg);

}  // namespace dnbp::inference
