#include "dnbp/potentials/potentials.hpp"

#include <stdexcept>

#include "dnbp/autodiff/checkpoint.hpp"

namespace dnbp::potentials {

std::optional<ad::Var> Observation::feature(NodeIndex node, ad::GradMode mode) const {
    auto it = features_.find({node, static_cast<int>(mode)});
    if (it == features_.end()) return std::nullopt;
    return it->second;
}

void Observation::store(NodeIndex node, ad::GradMode mode, ad::Var feature) {
    features_[{node, static_cast<int>(mode)}] = feature;
}

ad::Var unary_eval(const PotentialModel& pm, ad::Tape& tape, NodeIndex node, ad::Var particles, Observation& obs,
                   ad::GradMode mode) {
    return pm.unary(tape, node, particles, obs, mode);
}

ad::Var pairwise_density_eval(const PotentialModel& pm, ad::Tape& tape, EdgeIndex edge, ad::Var x_source,
                              ad::Var x_destination, ad::GradMode mode) {
    return pm.density(tape, edge, ad::sub(x_source, x_destination), mode);
}

ad::Var pairwise_sample(const PotentialModel& pm, ad::Tape& tape, EdgeIndex edge, ad::Var x_known,
                        SampleDirection direction, ad::Var noise, ad::GradMode mode) {
    if (noise.rank() != 2 || noise.shape()[1] != pm.noise_dim() || noise.shape()[0] != x_known.shape()[0]) {
        throw std::invalid_argument("pairwise_sample: noise shape " + ad::shape_string(noise.shape()) +
                                    " does not match " + std::to_string(x_known.shape()[0]) + " rows of dimension " +
                                    std::to_string(pm.noise_dim()));
    }
    ad::Var t = pm.sampler(tape, edge, noise, mode);
    return direction == SampleDirection::source_given_dest ? ad::add(x_known, t) : ad::sub(x_known, t);
}

ad::Var diffuse(const PotentialModel& pm, ad::Tape& tape, NodeIndex node, ad::Var x, ad::Var noise,
                ad::GradMode mode) {
    if (noise.rank() != 2 || noise.shape()[1] != pm.noise_dim() || noise.shape()[0] != x.shape()[0]) {
        throw std::invalid_argument("diffuse: noise shape " + ad::shape_string(noise.shape()) + " does not match " +
                                    ad::shape_string(x.shape()));
    }
    return ad::add(x, pm.diffusion(tape, node, noise, mode));
}

ad::Var gaussian_noise(ad::Tape& tape, std::size_t rows, std::size_t dim, std::mt19937_64& rng) {
    std::normal_distribution<double> n01(0.0, 1.0);
    std::vector<double> v(rows * dim);
    for (auto& x : v) x = n01(rng);
    return tape.constant({rows, dim}, std::move(v));
}

namespace {
constexpr std::size_t kConvChannels = 10;
constexpr std::size_t kConvUnits = 5;
}  // namespace

LearnedPotentials::LearnedPotentials(const model::GraphModel& graph, NetworkShape shape, std::uint64_t seed)
    : graph_(graph), shape_(shape) {
    using ad::Activation;
    if (shape_.state_dim != graph_.state_dim()) throw std::invalid_argument("potentials: state dimension mismatch");
    feature_net_ = ad::ConvStack("conv", shape_.image_channels, kConvChannels, kConvUnits);
    const std::size_t feat = feature_net_.feature_dim(shape_.image_height, shape_.image_width);
    likelihood_head_ = ad::Mlp("head", shape_.state_dim + feat,
                               {{64, Activation::relu}, {64, Activation::relu}, {1, Activation::sigmoid_scaled}});
    density_net_ = ad::Mlp("fc", shape_.state_dim,
                           {{32, Activation::relu},
                            {32, Activation::relu},
                            {32, Activation::relu},
                            {32, Activation::relu},
                            {1, Activation::sigmoid_scaled}});
    sampler_net_ = ad::Mlp("fc", shape_.noise_dim,
                           {{64, Activation::relu}, {64, Activation::relu}, {shape_.state_dim, Activation::identity}});
    diffusion_net_ = sampler_net_;

    std::mt19937_64 rng(seed);
    auto make = [&](const std::string& name, auto&& init) {
        if (blocks_.count(name)) return;
        auto& b = blocks_[name];
        b.name = name;
        init(b);
    };
    for (NodeIndex n = 0; n < graph_.node_count(); ++n) {
        make(graph_.unary_block(n), [&](ad::ParameterBlock& b) {
            feature_net_.init(b, rng);
            likelihood_head_.init(b, rng);
        });
        make(graph_.diffusion_block(n), [&](ad::ParameterBlock& b) { diffusion_net_.init(b, rng); });
    }
    for (EdgeIndex e = 0; e < graph_.edge_count(); ++e) {
        make(graph_.density_block(e), [&](ad::ParameterBlock& b) { density_net_.init(b, rng); });
        make(graph_.sampler_block(e), [&](ad::ParameterBlock& b) { sampler_net_.init(b, rng); });
    }
}

ad::ParameterBlock& LearnedPotentials::mutable_block(const std::string& name) const {
    auto it = blocks_.find(name);
    if (it == blocks_.end()) throw std::out_of_range("no parameter block " + name);
    return it->second;
}

ad::ParameterBlock& LearnedPotentials::block(const std::string& name) { return mutable_block(name); }
const ad::ParameterBlock& LearnedPotentials::block(const std::string& name) const { return mutable_block(name); }

std::vector<ad::ParameterBlock*> LearnedPotentials::blocks() {
    std::vector<ad::ParameterBlock*> out;
    for (auto& [_, b] : blocks_) out.push_back(&b);
    return out;
}

std::vector<const ad::ParameterBlock*> LearnedPotentials::blocks() const {
    std::vector<const ad::ParameterBlock*> out;
    for (const auto& [_, b] : blocks_) out.push_back(&b);
    return out;
}

std::size_t LearnedPotentials::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, b] : blocks_) n += b.parameter_count();
    return n;
}

ad::Var LearnedPotentials::features(ad::Tape& tape, NodeIndex node, const Frame& frame, ad::GradMode mode) const {
    if (frame.channels != shape_.image_channels || frame.height != shape_.image_height ||
        frame.width != shape_.image_width || frame.pixels.size() != frame.channels * frame.height * frame.width) {
        throw std::invalid_argument("unary: frame shape [" + std::to_string(frame.channels) + "x" +
                                    std::to_string(frame.height) + "x" + std::to_string(frame.width) +
                                    "] does not match configured [" + std::to_string(shape_.image_channels) + "x" +
                                    std::to_string(shape_.image_height) + "x" + std::to_string(shape_.image_width) + "]");
    }
    ++extractor_calls_;
    ad::Var image = tape.constant({frame.channels, frame.height, frame.width}, frame.pixels);
    return feature_net_.forward(tape, mutable_block(graph_.unary_block(node)), image, mode);
}

ad::Var LearnedPotentials::unary(ad::Tape& tape, NodeIndex node, ad::Var particles, Observation& obs,
                                 ad::GradMode mode) const {
    if (obs.frame() == nullptr) throw std::invalid_argument("unary: observation has no frame");
    // Without gradients both modes are identical; share one feature.
    if (!tape.grad_enabled()) mode = ad::GradMode::frozen;
    ad::Var feat;
    if (auto cached = obs.feature(node, mode)) {
        feat = *cached;
    } else {
        feat = features(tape, node, *obs.frame(), mode);
        obs.store(node, mode, feat);
    }
    auto& b = mutable_block(graph_.unary_block(node));
    ad::Var out = likelihood_head_.forward(tape, b, ad::concat_broadcast(particles, feat), mode);
    return ad::reshape(out, {particles.shape()[0]});
}

ad::Var LearnedPotentials::density(ad::Tape& tape, EdgeIndex edge, ad::Var translations, ad::GradMode mode) const {
    auto& b = mutable_block(graph_.density_block(edge));
    ad::Var out = density_net_.forward(tape, b, translations, mode);
    return ad::reshape(out, {translations.shape()[0]});
}

ad::Var LearnedPotentials::sampler(ad::Tape& tape, EdgeIndex edge, ad::Var noise, ad::GradMode mode) const {
    return sampler_net_.forward(tape, mutable_block(graph_.sampler_block(edge)), noise, mode);
}

ad::Var LearnedPotentials::diffusion(ad::Tape& tape, NodeIndex node, ad::Var noise, ad::GradMode mode) const {
    return diffusion_net_.forward(tape, mutable_block(graph_.diffusion_block(node)), noise, mode);
}

void LearnedPotentials::save(const std::filesystem::path& path) const {
    const auto bs = blocks();
    ad::write_checkpoint(path, ad::to_entries(bs));
}

void LearnedPotentials::load(const std::filesystem::path& path) {
    auto bs = blocks();
    ad::load_entries(bs, ad::read_checkpoint(path));
}

}  // namespace dnbp::potentials
