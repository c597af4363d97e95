#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dnbp/autodiff/nn.hpp"
#include "dnbp/model/graph.hpp"

namespace dnbp::potentials {

using model::EdgeIndex;
using model::NodeIndex;

// Channel-major normalized image, [channels x height x width].
struct Frame {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> pixels;
};

// Caches per-node unary features for one frame on one tape. Features are
// extracted at most once per (node, grad mode) for the lifetime of the
// context.
class Observation {
public:
    explicit Observation(const Frame* frame) : frame_(frame) {}
    const Frame* frame() const { return frame_; }

    std::optional<ad::Var> feature(NodeIndex node, ad::GradMode mode) const;
    void store(NodeIndex node, ad::GradMode mode, ad::Var feature);

private:
    const Frame* frame_;
    std::map<std::pair<NodeIndex, int>, ad::Var> features_;
};

// The four potential families a graph needs. Implementations must be safe
// to evaluate from several tapes concurrently.
class PotentialModel {
public:
    virtual ~PotentialModel() = default;

    // [k x dim] particles -> [k] weights in (0.005, 1].
    virtual ad::Var unary(ad::Tape& tape, NodeIndex node, ad::Var particles, Observation& obs,
                          ad::GradMode mode) const = 0;
    // [k x dim] translations (source - destination) -> [k] weights.
    virtual ad::Var density(ad::Tape& tape, EdgeIndex edge, ad::Var translations, ad::GradMode mode) const = 0;
    // [k x noise_dim] standard-normal noise -> [k x dim] translations
    // (source - destination).
    virtual ad::Var sampler(ad::Tape& tape, EdgeIndex edge, ad::Var noise, ad::GradMode mode) const = 0;
    // [k x noise_dim] noise -> [k x dim] displacements.
    virtual ad::Var diffusion(ad::Tape& tape, NodeIndex node, ad::Var noise, ad::GradMode mode) const = 0;

    virtual std::size_t noise_dim() const { return 64; }
};

enum class SampleDirection { source_given_dest, dest_given_source };

ad::Var unary_eval(const PotentialModel& pm, ad::Tape& tape, NodeIndex node, ad::Var particles, Observation& obs,
                   ad::GradMode mode = ad::GradMode::trainable);

// psi_rho(x_source - x_destination) for rows of x_source / x_destination.
ad::Var pairwise_density_eval(const PotentialModel& pm, ad::Tape& tape, EdgeIndex edge, ad::Var x_source,
                              ad::Var x_destination, ad::GradMode mode = ad::GradMode::trainable);

// source_given_dest: x_known + psi(eps); dest_given_source: x_known - psi(eps).
ad::Var pairwise_sample(const PotentialModel& pm, ad::Tape& tape, EdgeIndex edge, ad::Var x_known,
                        SampleDirection direction, ad::Var noise, ad::GradMode mode = ad::GradMode::trainable);

ad::Var diffuse(const PotentialModel& pm, ad::Tape& tape, NodeIndex node, ad::Var x, ad::Var noise,
                ad::GradMode mode = ad::GradMode::trainable);

// [rows x noise_dim] standard-normal draws as a constant leaf.
ad::Var gaussian_noise(ad::Tape& tape, std::size_t rows, std::size_t dim, std::mt19937_64& rng);

struct NetworkShape {
    std::size_t image_channels = 3;
    std::size_t image_height = 128;
    std::size_t image_width = 128;
    std::size_t state_dim = 2;
    std::size_t noise_dim = 64;
};

// Learned potentials for a graph: per node a unary network (conv feature
// extractor + likelihood head) and a diffusion sampler, per edge a density
// network and a translation sampler. Blocks are keyed by the graph's
// binding names, so several elements may share one block.
class LearnedPotentials final : public PotentialModel {
public:
    LearnedPotentials(const model::GraphModel& graph, NetworkShape shape, std::uint64_t seed);

    ad::Var unary(ad::Tape& tape, NodeIndex node, ad::Var particles, Observation& obs,
                  ad::GradMode mode) const override;
    ad::Var density(ad::Tape& tape, EdgeIndex edge, ad::Var translations, ad::GradMode mode) const override;
    ad::Var sampler(ad::Tape& tape, EdgeIndex edge, ad::Var noise, ad::GradMode mode) const override;
    ad::Var diffusion(ad::Tape& tape, NodeIndex node, ad::Var noise, ad::GradMode mode) const override;
    std::size_t noise_dim() const override { return shape_.noise_dim; }

    // Feature extraction [c x h x w] -> [feature_dim].
    ad::Var features(ad::Tape& tape, NodeIndex node, const Frame& frame, ad::GradMode mode) const;

    const NetworkShape& shape() const { return shape_; }
    const model::GraphModel& graph() const { return graph_; }

    ad::ParameterBlock& block(const std::string& name);
    const ad::ParameterBlock& block(const std::string& name) const;
    std::vector<ad::ParameterBlock*> blocks();
    std::vector<const ad::ParameterBlock*> blocks() const;
    std::size_t parameter_count() const;

    void save(const std::filesystem::path& path) const;
    void load(const std::filesystem::path& path);

    // Number of feature-extractor invocations since construction.
    std::uint64_t extractor_calls() const { return extractor_calls_.load(); }

private:
    ad::ParameterBlock& mutable_block(const std::string& name) const;

    model::GraphModel graph_;
    NetworkShape shape_;
    ad::ConvStack feature_net_;
    ad::Mlp likelihood_head_;
    ad::Mlp density_net_;
    ad::Mlp sampler_net_;
    ad::Mlp diffusion_net_;
    // Mutable so evaluation can bind parameters by reference; parameter
    // values are only written by the optimizer.
    mutable std::map<std::string, ad::ParameterBlock> blocks_;
    mutable std::atomic<std::uint64_t> extractor_calls_{0};
};

}  // namespace dnbp::potentials
