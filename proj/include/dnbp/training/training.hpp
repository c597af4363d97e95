#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "dnbp/autodiff/adam.hpp"
#include "dnbp/inference/inference.hpp"
#include "dnbp/potentials/potentials.hpp"

namespace dnbp::training {

using model::GraphModel;
using model::NodeIndex;

// Frames with per-frame ground truth; truth[t] holds node-major states
// (node n occupies [n*dim, (n+1)*dim)).
struct LabeledSequence {
    std::vector<potentials::Frame> frames;
    std::vector<std::vector<double>> truth;
};

struct TrainConfig {
    std::size_t particles = 100;
    std::size_t passes = 1;
    std::size_t batch = 6;
    double gamma = 0.9;
    std::size_t unary_samples = 10;
    double bandwidth = 0.05;
    ad::AdamConfig adam;
    std::size_t max_epochs = 50;
    std::size_t patience = 5;
    std::uint64_t seed = 0;
    // Validation runs the deployment path with these settings.
    std::size_t val_particles = 100;
    std::size_t val_passes = 1;
};

// Plain "key = value" lines; '#' starts a comment. Unknown keys and
// out-of-range values throw std::invalid_argument.
TrainConfig parse_train_config(const std::string& text);
TrainConfig load_train_config(const std::filesystem::path& path);
std::string format_train_config(const TrainConfig& cfg);

// Mixture densities at x* using one weight family each; every family is
// normalized to sum 1 before mixing.
struct PartialDensities {
    ad::Var unary_dest;
    ad::Var unary_sender;
    ad::Var neigh_sender;
};

inline constexpr double kDensityFloor = 1e-300;

PartialDensities partial_belief_eval(const inference::BeliefVars& b, std::span<const double> truth, double sigma);

// -(log rho_unary_d + log rho_unary_s + log rho_neigh), each argument clamped
// at 1e-300. Appends a diagnostic when the clamp is active.
ad::Var node_loss(const inference::BeliefVars& b, std::span<const double> truth, double sigma,
                  std::vector<std::string>* diagnostics = nullptr);

// Parameter blocks a node's loss reaches: its unary and diffusion networks
// and the density and sampler networks of every incident edge.
std::vector<std::string> node_blocks(const GraphModel& g, NodeIndex node);

struct StepReport {
    std::vector<double> node_loss;     // per node, averaged over sequence steps and batch
    std::size_t optimizer_steps = 0;
    std::size_t skipped_steps = 0;
    std::vector<std::string> diagnostics;
};

// Advances the batch in lockstep through every frame. Per frame and per
// node: incoming messages with ground-truth substitution, belief update,
// batch-mean node loss, one Adam step on that node's blocks.
StepReport train_step(std::span<const LabeledSequence* const> batch, const GraphModel& g,
                      potentials::LearnedPotentials& pm, const TrainConfig& cfg, std::uint64_t stream_seed);

// Mean per-node loss over the deployment path (no substitution, no
// uniform injection); gradients disabled.
std::vector<double> validation_loss(std::span<const LabeledSequence> data, const GraphModel& g,
                                    const potentials::PotentialModel& pm, const TrainConfig& cfg);

// Tracks the best validation loss; stop() once `patience` epochs pass
// without improvement.
class EarlyStopping {
public:
    explicit EarlyStopping(std::size_t patience) : patience_(patience) {}
    // Returns true when this epoch is the new best.
    bool update(std::size_t epoch, double loss);
    bool stop() const { return since_best_ >= patience_; }
    std::size_t best_epoch() const { return best_epoch_; }
    double best_loss() const { return best_; }

private:
    std::size_t patience_;
    std::size_t best_epoch_ = 0;
    std::size_t since_best_ = 0;
    double best_ = 0.0;
    bool seen_ = false;
};

struct EpochRecord {
    std::size_t epoch = 0;
    std::vector<double> train_loss;
    std::vector<double> val_loss;
    double seconds = 0.0;
};

struct FitResult {
    std::size_t epochs_run = 0;
    std::size_t best_epoch = 0;
    double best_val_loss = 0.0;
    std::vector<EpochRecord> history;
    std::filesystem::path checkpoint;
};

struct FitHooks {
    // Training-only loss log, one JSON object per (epoch, node).
    std::ostream* log = nullptr;
    // Overrides the validation metric (testing hook); default is the summed
    // per-node validation loss.
    std::function<double(std::size_t epoch)> val_metric;
    // Caps the number of batches per epoch (0 = all).
    std::size_t max_batches = 0;
};

// Epochs of shuffled train_step batches with validation after each epoch.
// The best parameters are written to out_dir/best.ckpt and restored into
// `pm` before returning.
FitResult fit(std::span<const LabeledSequence> train, std::span<const LabeledSequence> val, const GraphModel& g,
              potentials::LearnedPotentials& pm, const TrainConfig& cfg, const std::filesystem::path& out_dir,
              const FitHooks& hooks = {});

}  // namespace dnbp::training
