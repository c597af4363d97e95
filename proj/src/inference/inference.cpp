#include "dnbp/inference/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace dnbp::inference {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::vector<double> uniform_positions(const GraphModel& g, std::size_t count, std::mt19937_64& rng) {
    const auto& b = g.bounds();
    const std::size_t dim = g.state_dim();
    std::vector<double> out(count * dim);
    for (std::size_t i = 0; i < count; ++i) {
        for (std::size_t k = 0; k < dim; ++k) {
            out[i * dim + k] = std::uniform_real_distribution<double>(b.lower[k], b.upper[k])(rng);
        }
    }
    return out;
}

// Multinomial draw of `count` indices by inverse CDF.
std::vector<std::size_t> resample(std::span<const double> weights, std::size_t count, std::mt19937_64& rng,
                                  bool& degenerate) {
    std::vector<double> cdf(weights.size());
    double acc = 0.0;
    degenerate = false;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double w = weights[i];
        if (!std::isfinite(w) || w < 0.0) degenerate = true;
        acc += std::isfinite(w) && w > 0.0 ? w : 0.0;
        cdf[i] = acc;
    }
    if (!(acc > 0.0)) degenerate = true;
    std::vector<std::size_t> idx(count);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (auto& i : idx) {
        if (degenerate) {
            i = std::uniform_int_distribution<std::size_t>(0, weights.size() - 1)(rng);
        } else {
            const double r = u01(rng) * acc;
            i = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), r) - cdf.begin());
            i = std::min(i, weights.size() - 1);
        }
    }
    return idx;
}

ad::Var ones(ad::Tape& tape, std::size_t n) { return tape.constant({n}, std::vector<double>(n, 1.0)); }

ad::Var positions_leaf(ad::Tape& tape, const ParticleSet& p) {
    return tape.constant({p.size(), p.dim}, p.positions);
}

// Translation x_source - x_destination for all (receiver i, sender j) pairs,
// row i*|senders| + j, where receiver particles belong to node `receiver`.
ad::Var canonical_pairs(const GraphModel& g, model::EdgeIndex e, NodeIndex receiver, ad::Var receiver_particles,
                        ad::Var sender_particles) {
    ad::Var diff = ad::outer_difference(receiver_particles, sender_particles);  // x_recv - x_send
    return g.edge(e).destination == receiver ? ad::neg(diff) : diff;
}

}  // namespace

std::size_t message_slot(const GraphModel& g, const DirectedEdge& dir) {
    const auto& e = g.edge(dir.edge);
    if (e.source == dir.from && e.destination == dir.to) return 2 * dir.edge;
    if (e.source == dir.to && e.destination == dir.from) return 2 * dir.edge + 1;
    throw std::invalid_argument("message direction does not match edge " + std::to_string(dir.edge));
}

InferenceState init_beliefs(const GraphModel& g, std::size_t particles, std::uint64_t seed) {
    if (particles == 0) throw std::invalid_argument("init_beliefs: particle count must be positive");
    InferenceState st;
    const auto sched = g.message_schedule();
    st.messages.resize(sched.size());
    st.streams.resize(sched.size());
    std::mt19937_64 init_rng(splitmix64(seed));
    for (const auto& dir : sched) {
        const std::size_t slot = message_slot(g, dir);
        st.streams[slot].seed(splitmix64(seed ^ splitmix64(slot + 1)));
        Message& m = st.messages[slot];
        m.dim = g.state_dim();
        m.from = dir.from;
        m.to = dir.to;
        m.positions = uniform_positions(g, particles, init_rng);
        m.weights.assign(particles, 1.0 / static_cast<double>(particles));
    }
    st.beliefs.resize(g.node_count());
    for (NodeIndex n = 0; n < g.node_count(); ++n) {
        Belief& b = st.beliefs[n];
        b.node = n;
        b.dim = g.state_dim();
        for (const auto& dir : g.incoming(n)) {
            const Message& m = st.messages[message_slot(g, dir)];
            b.positions.insert(b.positions.end(), m.positions.begin(), m.positions.end());
        }
        b.weights.assign(b.positions.size() / b.dim, 1.0 / static_cast<double>(b.positions.size() / b.dim));
    }
    return st;
}

std::size_t belief_sourced_count(std::size_t particles, double gamma, std::uint64_t iteration, bool uniform_mixing) {
    if (!uniform_mixing) return particles;
    if (iteration == 0) throw std::invalid_argument("iteration counter starts at 1");
    const double share = 1.0 - std::pow(gamma, static_cast<double>(iteration - 1));
    // Guard against share*M landing a hair below an integer.
    const double raw = share * static_cast<double>(particles);
    const auto n = static_cast<std::size_t>(std::floor(raw + 1e-9));
    return std::min(n, particles);
}

MessageVars message_update(ad::Tape& tape, InferenceState& state, const GraphModel& g, const PotentialModel& pm,
                           const DirectedEdge& dir, Observation& obs, const InferenceConfig& cfg,
                           const MessageOptions& opts) {
    using ad::GradMode;
    const std::size_t slot = message_slot(g, dir);
    if (state.beliefs.size() != g.node_count() || state.streams.size() != g.message_schedule().size()) {
        throw std::logic_error("message_update: inference state is not initialized for this graph");
    }
    const Belief& prior = state.beliefs[dir.to];
    if (prior.size() == 0) throw std::logic_error("message_update: missing prior belief for node " + g.node_id(dir.to));
    const std::size_t M = cfg.particles;
    const std::size_t dim = g.state_dim();
    const std::size_t U = std::max<std::size_t>(cfg.unary_samples, 1);
    auto& rng = state.streams[slot];

    // Proposal: diffused resample of the receiver's previous belief, topped
    // up with uniform draws.
    const std::size_t nb = belief_sourced_count(M, cfg.gamma, state.iteration, cfg.uniform_mixing);
    std::vector<ad::Var> parts;
    if (nb > 0) {
        bool degenerate = false;
        const auto idx = resample(prior.weights, nb, rng, degenerate);
        if (degenerate) {
            state.diagnostics.push_back("belief of node " + g.node_id(dir.to) +
                                        " has no positive weight; resampling uniformly");
        }
        std::vector<double> picked(nb * dim);
        for (std::size_t i = 0; i < nb; ++i) std::copy_n(prior.positions.data() + idx[i] * dim, dim, picked.data() + i * dim);
        ad::Var base = tape.constant({nb, dim}, std::move(picked));
        ad::Var noise = potentials::gaussian_noise(tape, nb, pm.noise_dim(), rng);
        parts.push_back(potentials::diffuse(pm, tape, dir.to, base, noise, GradMode::trainable));
    }
    if (nb < M) parts.push_back(tape.constant({M - nb, dim}, uniform_positions(g, M - nb, rng)));
    ad::Var mu = parts.size() == 1 ? parts[0] : ad::concat_rows(parts);

    // Sender unary, averaged over U conditional samples of the sender.
    ad::Var unary_w;
    if (g.observed(dir.from)) {
        const auto direction = g.edge(dir.edge).source == dir.from ? potentials::SampleDirection::source_given_dest
                                                                    : potentials::SampleDirection::dest_given_source;
        ad::Var rep = ad::repeat_rows(mu, U);
        ad::Var noise = potentials::gaussian_noise(tape, M * U, pm.noise_dim(), rng);
        ad::Var xs = potentials::pairwise_sample(pm, tape, dir.edge, rep, direction, noise, GradMode::trainable);
        ad::Var phi = potentials::unary_eval(pm, tape, dir.from, xs, obs, GradMode::frozen);
        unary_w = ad::group_mean(phi, U);
    } else {
        unary_w = ones(tape, M);
    }

    // Product over the sender's other neighbors.
    ad::Var neigh_w = ones(tape, M);
    for (NodeIndex u : g.neighbors(dir.from)) {
        if (u == dir.to) continue;
        ad::Var factor;
        if (opts.sender_truth) {
            if (opts.sender_truth->size() != dim) throw std::invalid_argument("message_update: sender truth has wrong dimension");
            ad::Var truth = tape.constant({1, dim}, *opts.sender_truth);
            ad::Var t = canonical_pairs(g, dir.edge, dir.to, mu, truth);
            factor = pm.density(tape, dir.edge, t, GradMode::trainable);
        } else {
            const Message& in = state.messages[message_slot(g, {*g.edge_between(u, dir.from), u, dir.from})];
            if (in.size() == 0) {
                throw std::logic_error("message_update: missing message " + g.node_id(u) + "->" + g.node_id(dir.from));
            }
            ad::Var xs = positions_leaf(tape, in);
            ad::Var ws = tape.constant({in.size(), 1}, in.weights);
            ad::Var t = canonical_pairs(g, dir.edge, dir.to, mu, xs);
            ad::Var dens = ad::reshape(pm.density(tape, dir.edge, t, GradMode::trainable), {M, in.size()});
            factor = ad::reshape(ad::matmul(dens, ws), {M});
        }
        neigh_w = ad::mul(neigh_w, factor);
    }

    ad::Var w = ad::mul(unary_w, neigh_w);
    for (double v : w.value()) {
        if (!(v > 0.0) || !std::isfinite(v)) {
            throw std::logic_error("message_update: non-positive message weight on " + g.node_id(dir.from) + "->" +
                                   g.node_id(dir.to));
        }
    }
    ++state.message_updates;
    return {dir, mu, w, unary_w, neigh_w, nb};
}

void commit_message(InferenceState& state, const GraphModel& g, const MessageVars& m) {
    Message& out = state.messages[message_slot(g, m.direction)];
    out.dim = g.state_dim();
    out.from = m.direction.from;
    out.to = m.direction.to;
    out.positions.assign(m.positions.value().begin(), m.positions.value().end());
    out.weights.assign(m.weights.value().begin(), m.weights.value().end());
}

BeliefVars belief_update(ad::Tape& tape, InferenceState& state, const GraphModel& g, const PotentialModel& pm,
                         NodeIndex node, Observation& obs, std::span<const MessageVars> incoming) {
    const auto expected = g.incoming(node);
    if (incoming.size() != expected.size()) {
        throw std::invalid_argument("belief_update: node " + g.node_id(node) + " expects " +
                                    std::to_string(expected.size()) + " messages, got " +
                                    std::to_string(incoming.size()));
    }
    std::vector<ad::Var> pos, wts, ud, us, ns;
    for (std::size_t k = 0; k < incoming.size(); ++k) {
        const auto& m = incoming[k];
        if (m.direction.from != expected[k].from || m.direction.to != node) {
            throw std::invalid_argument("belief_update: messages out of order for node " + g.node_id(node));
        }
        const std::size_t n = m.positions.shape()[0];
        ad::Var phi = g.observed(node) ? potentials::unary_eval(pm, tape, node, m.positions, obs, ad::GradMode::trainable)
                                       : ones(tape, n);
        ad::Var reweighted = ad::normalize(ad::mul(m.weights, phi));
        Message& slot = state.messages[message_slot(g, m.direction)];
        slot.dim = g.state_dim();
        slot.from = m.direction.from;
        slot.to = node;
        slot.positions.assign(m.positions.value().begin(), m.positions.value().end());
        slot.weights.assign(reweighted.value().begin(), reweighted.value().end());
        pos.push_back(m.positions);
        wts.push_back(reweighted);
        ud.push_back(phi);
        us.push_back(m.unary_component);
        ns.push_back(m.neigh_component);
    }
    auto cat = [](std::vector<ad::Var>& v) { return v.size() == 1 ? v[0] : ad::concat_rows(v); };
    BeliefVars out;
    out.node = node;
    out.positions = cat(pos);
    out.weights = ad::normalize(cat(wts));
    out.unary_dest = cat(ud);
    out.unary_sender = cat(us);
    out.neigh_sender = cat(ns);

    Belief& b = state.beliefs[node];
    b.node = node;
    b.dim = g.state_dim();
    b.positions.assign(out.positions.value().begin(), out.positions.value().end());
    b.weights.assign(out.weights.value().begin(), out.weights.value().end());
    ++state.belief_updates;
    return out;
}

double belief_density_eval(const ParticleSet& b, std::span<const double> x, double sigma) {
    if (x.size() != b.dim) throw std::invalid_argument("belief_density_eval: query dimension mismatch");
    const double norm = std::pow(2.0 * std::numbers::pi * sigma * sigma, -0.5 * static_cast<double>(b.dim));
    double acc = 0.0;
    for (std::size_t i = 0; i < b.size(); ++i) {
        double d2 = 0.0;
        for (std::size_t k = 0; k < b.dim; ++k) {
            const double d = x[k] - b.positions[i * b.dim + k];
            d2 += d * d;
        }
        acc += b.weights[i] * std::exp(-0.5 * d2 / (sigma * sigma));
    }
    return norm * acc;
}

std::size_t max_weight_index(const ParticleSet& b) {
    if (b.size() == 0) throw std::invalid_argument("max_weight_index: empty particle set");
    return static_cast<std::size_t>(std::max_element(b.weights.begin(), b.weights.end()) - b.weights.begin());
}

std::vector<double> max_weight_estimate(const ParticleSet& b) {
    auto p = b.particle(max_weight_index(b));
    return {p.begin(), p.end()};
}

void run_sequence_step(InferenceState& state, const GraphModel& g, const PotentialModel& pm,
                       const potentials::Frame& frame, std::size_t passes, const InferenceConfig& cfg) {
    const auto sched = g.message_schedule();
    for (std::size_t p = 0; p < passes; ++p) {
        ad::Tape tape(false);
        Observation obs(&frame);
        std::vector<MessageVars> fresh;
        fresh.reserve(sched.size());
        for (const auto& dir : sched) fresh.push_back(message_update(tape, state, g, pm, dir, obs, cfg));
        for (const auto& m : fresh) commit_message(state, g, m);
        for (NodeIndex n = 0; n < g.node_count(); ++n) {
            std::vector<MessageVars> in;
            for (const auto& dir : g.incoming(n)) in.push_back(fresh[message_slot(g, dir)]);
            belief_update(tape, state, g, pm, n, obs, in);
        }
        ++state.iteration;
    }
}

}  // namespace dnbp::inference
