#include "dnbp/training/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "dnbp/autodiff/checkpoint.hpp"

namespace dnbp::training {

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::span<const double> node_truth(const LabeledSequence& s, std::size_t t, NodeIndex n, std::size_t dim) {
    const auto& row = s.truth.at(t);
    if (row.size() < (n + 1) * dim) throw std::invalid_argument("ground truth row too short for node " + std::to_string(n));
    return {row.data() + n * dim, dim};
}

void check_sequence(const LabeledSequence& s, const GraphModel& g) {
    if (s.frames.empty()) throw std::invalid_argument("sequence has no frames");
    if (s.truth.size() != s.frames.size()) throw std::invalid_argument("sequence frame/label count mismatch");
    for (const auto& row : s.truth) {
        if (row.size() != g.node_count() * g.state_dim()) throw std::invalid_argument("ground truth has wrong width");
    }
}

inference::InferenceConfig inference_config(const TrainConfig& cfg, bool training) {
    inference::InferenceConfig ic;
    ic.particles = training ? cfg.particles : cfg.val_particles;
    ic.gamma = cfg.gamma;
    ic.uniform_mixing = training;
    ic.unary_samples = cfg.unary_samples;
    ic.bandwidth = cfg.bandwidth;
    return ic;
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
    std::istringstream is(v);
    T out{};
    if (!(is >> out) || !is.eof()) {
        if constexpr (std::is_floating_point_v<T>) {
            throw std::invalid_argument("config: '" + key + "' expects a number, got '" + v + "'");
        } else {
            throw std::invalid_argument("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
        }
    }
    if constexpr (std::is_unsigned_v<T>) {
        if (v.find('-') != std::string::npos) throw std::invalid_argument("config: '" + key + "' must be non-negative");
    }
    return out;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace

TrainConfig parse_train_config(const std::string& text) {
    TrainConfig c;
    std::map<std::string, std::function<void(const std::string&, const std::string&)>> setters{
        {"particles", [&](auto& k, auto& v) { c.particles = parse_number<std::size_t>(k, v); }},
        {"passes", [&](auto& k, auto& v) { c.passes = parse_number<std::size_t>(k, v); }},
        {"batch", [&](auto& k, auto& v) { c.batch = parse_number<std::size_t>(k, v); }},
        {"gamma", [&](auto& k, auto& v) { c.gamma = parse_number<double>(k, v); }},
        {"unary_samples", [&](auto& k, auto& v) { c.unary_samples = parse_number<std::size_t>(k, v); }},
        {"bandwidth", [&](auto& k, auto& v) { c.bandwidth = parse_number<double>(k, v); }},
        {"lr", [&](auto& k, auto& v) { c.adam.lr = parse_number<double>(k, v); }},
        {"beta1", [&](auto& k, auto& v) { c.adam.beta1 = parse_number<double>(k, v); }},
        {"beta2", [&](auto& k, auto& v) { c.adam.beta2 = parse_number<double>(k, v); }},
        {"adam_eps", [&](auto& k, auto& v) { c.adam.eps = parse_number<double>(k, v); }},
        {"max_epochs", [&](auto& k, auto& v) { c.max_epochs = parse_number<std::size_t>(k, v); }},
        {"patience", [&](auto& k, auto& v) { c.patience = parse_number<std::size_t>(k, v); }},
        {"seed", [&](auto& k, auto& v) { c.seed = parse_number<std::uint64_t>(k, v); }},
        {"val_particles", [&](auto& k, auto& v) { c.val_particles = parse_number<std::size_t>(k, v); }},
        {"val_passes", [&](auto& k, auto& v) { c.val_passes = parse_number<std::size_t>(k, v); }},
    };
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        auto it = setters.find(key);
        if (it == setters.end()) throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
        it->second(key, value);
    }
    for (auto [name, v] : {std::pair{"particles", c.particles}, {"passes", c.passes}, {"batch", c.batch},
                           {"unary_samples", c.unary_samples}, {"max_epochs", c.max_epochs},
                           {"val_particles", c.val_particles}, {"val_passes", c.val_passes}}) {
        if (v == 0) throw std::invalid_argument(std::string("config: '") + name + "' must be positive");
    }
    if (!(c.gamma > 0.0 && c.gamma < 1.0)) throw std::invalid_argument("config: 'gamma' must lie in (0, 1)");
    if (!(c.bandwidth > 0.0)) throw std::invalid_argument("config: 'bandwidth' must be positive");
    if (!(c.adam.lr > 0.0)) throw std::invalid_argument("config: 'lr' must be positive");
    return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_train_config(ss.str());
}

std::string format_train_config(const TrainConfig& c) {
    std::ostringstream os;
    os.precision(17);
    os << "particles = " << c.particles << "\npasses = " << c.passes << "\nbatch = " << c.batch
       << "\ngamma = " << c.gamma << "\nunary_samples = " << c.unary_samples << "\nbandwidth = " << c.bandwidth
       << "\nlr = " << c.adam.lr << "\nbeta1 = " << c.adam.beta1 << "\nbeta2 = " << c.adam.beta2
       << "\nadam_eps = " << c.adam.eps << "\nmax_epochs = " << c.max_epochs << "\npatience = " << c.patience
       << "\nseed = " << c.seed << "\nval_particles = " << c.val_particles << "\nval_passes = " << c.val_passes
       << "\n";
    return os.str();
}

PartialDensities partial_belief_eval(const inference::BeliefVars& b, std::span<const double> truth, double sigma) {
    if (!(sigma > 0.0)) throw std::invalid_argument("partial_belief_eval: bandwidth must be positive");
    auto family = [&](ad::Var w) { return ad::gaussian_mixture_density(b.positions, ad::normalize(w), truth, sigma); };
    return {family(b.unary_dest), family(b.unary_sender), family(b.neigh_sender)};
}

ad::Var node_loss(const inference::BeliefVars& b, std::span<const double> truth, double sigma,
                  std::vector<std::string>* diagnostics) {
    const auto pd = partial_belief_eval(b, truth, sigma);
    ad::Var total;
    for (ad::Var rho : {pd.unary_dest, pd.unary_sender, pd.neigh_sender}) {
        if (diagnostics && !(rho.item() >= kDensityFloor)) {
            diagnostics->push_back("node " + std::to_string(b.node) + ": partial density underflow, clamped");
        }
        ad::Var term = ad::neg(ad::log(ad::clamp_min(rho, kDensityFloor)));
        total = total.valid() ? ad::add(total, term) : term;
    }
    return total;
}

std::vector<std::string> node_blocks(const GraphModel& g, NodeIndex node) {
    std::vector<std::string> out{g.unary_block(node), g.diffusion_block(node)};
    for (NodeIndex s : g.neighbors(node)) {
        const auto e = *g.edge_between(s, node);
        out.push_back(g.density_block(e));
        out.push_back(g.sampler_block(e));
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

StepReport train_step(std::span<const LabeledSequence* const> batch, const GraphModel& g,
                      potentials::LearnedPotentials& pm, const TrainConfig& cfg, std::uint64_t stream_seed) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    const std::size_t dim = g.state_dim();
    std::size_t frames = batch[0]->frames.size();
    for (const auto* s : batch) {
        check_sequence(*s, g);
        frames = std::min(frames, s->frames.size());
    }
    const auto icfg = inference_config(cfg, true);
    std::vector<inference::InferenceState> states;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        states.push_back(inference::init_beliefs(g, cfg.particles, mix(stream_seed, b)));
    }

    StepReport rep;
    rep.node_loss.assign(g.node_count(), 0.0);
    std::vector<std::size_t> counted(g.node_count(), 0);
    const double inv_batch = 1.0 / static_cast<double>(batch.size());
    for (std::size_t t = 0; t < frames; ++t) {
        for (NodeIndex d = 0; d < g.node_count(); ++d) {
            ad::Tape tape;
            ad::Var total;
            for (std::size_t b = 0; b < batch.size(); ++b) {
                auto& st = states[b];
                st.iteration = t + 1;
                potentials::Observation obs(&batch[b]->frames[t]);
                std::vector<inference::MessageVars> in;
                for (const auto& dir : g.incoming(d)) {
                    inference::MessageOptions opts;
                    const auto truth_s = node_truth(*batch[b], t, dir.from, dim);
                    opts.sender_truth = std::vector<double>(truth_s.begin(), truth_s.end());
                    in.push_back(inference::message_update(tape, st, g, pm, dir, obs, icfg, opts));
                }
                auto bv = inference::belief_update(tape, st, g, pm, d, obs, in);
                ad::Var l = node_loss(bv, node_truth(*batch[b], t, d, dim), cfg.bandwidth, &rep.diagnostics);
                total = total.valid() ? ad::add(total, l) : l;
                for (auto& msg : st.diagnostics) rep.diagnostics.push_back(std::move(msg));
                st.diagnostics.clear();
            }
            ad::Var loss = ad::scale(total, inv_batch);
            const double value = loss.item();
            const auto names = node_blocks(g, d);
            if (!std::isfinite(value)) {
                ++rep.skipped_steps;
                rep.diagnostics.push_back("frame " + std::to_string(t) + " node " + g.node_id(d) +
                                          ": non-finite loss, optimizer step skipped");
                continue;
            }
            tape.backward(loss);
            tape.accumulate_parameter_grads();
            bool applied = true;
            for (const auto& name : names) {
                auto r = ad::adam_step(pm.block(name), cfg.adam);
                if (!r.applied) {
                    applied = false;
                    rep.diagnostics.push_back("frame " + std::to_string(t) + " node " + g.node_id(d) + ": " + r.diagnostic);
                }
            }
            applied ? ++rep.optimizer_steps : ++rep.skipped_steps;
            rep.node_loss[d] += value;
            ++counted[d];
        }
    }
    for (NodeIndex d = 0; d < g.node_count(); ++d) {
        if (counted[d]) rep.node_loss[d] /= static_cast<double>(counted[d]);
    }
    return rep;
}

std::vector<double> validation_loss(std::span<const LabeledSequence> data, const GraphModel& g,
                                    const potentials::PotentialModel& pm, const TrainConfig& cfg) {
    if (data.empty()) throw std::invalid_argument("validation_loss: empty dataset");
    const auto icfg = inference_config(cfg, false);
    const auto sched = g.message_schedule();
    std::vector<double> acc(g.node_count(), 0.0);
    std::size_t count = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& seq = data[i];
        check_sequence(seq, g);
        auto st = inference::init_beliefs(g, icfg.particles, mix(cfg.seed ^ 0x5eedULL, i));
        for (std::size_t t = 0; t < seq.frames.size(); ++t) {
            for (std::size_t p = 0; p < cfg.val_passes; ++p) {
                ad::Tape tape(false);
                potentials::Observation obs(&seq.frames[t]);
                std::vector<inference::MessageVars> fresh;
                for (const auto& dir : sched) fresh.push_back(inference::message_update(tape, st, g, pm, dir, obs, icfg));
                for (const auto& m : fresh) inference::commit_message(st, g, m);
                for (NodeIndex n = 0; n < g.node_count(); ++n) {
                    std::vector<inference::MessageVars> in;
                    for (const auto& dir : g.incoming(n)) in.push_back(fresh[inference::message_slot(g, dir)]);
                    auto bv = inference::belief_update(tape, st, g, pm, n, obs, in);
                    if (p + 1 == cfg.val_passes) acc[n] += node_loss(bv, node_truth(seq, t, n, g.state_dim()), cfg.bandwidth).item();
                }
                ++st.iteration;
            }
            ++count;
        }
    }
    for (auto& v : acc) v /= static_cast<double>(count);
    return acc;
}

bool EarlyStopping::update(std::size_t epoch, double loss) {
    if (!seen_ || loss < best_) {
        seen_ = true;
        best_ = loss;
        best_epoch_ = epoch;
        since_best_ = 0;
        return true;
    }
    ++since_best_;
    return false;
}

FitResult fit(std::span<const LabeledSequence> train, std::span<const LabeledSequence> val, const GraphModel& g,
              potentials::LearnedPotentials& pm, const TrainConfig& cfg, const std::filesystem::path& out_dir,
              const FitHooks& hooks) {
    if (train.empty()) throw std::invalid_argument("fit: empty training set");
    if (val.empty() && !hooks.val_metric) throw std::invalid_argument("fit: empty validation set");
    std::filesystem::create_directories(out_dir);
    FitResult res;
    res.checkpoint = out_dir / "best.ckpt";

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(mix(cfg.seed, 0xf17ULL));
    EarlyStopping stopper(cfg.patience);
    std::vector<ad::CheckpointEntry> best;

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss.assign(g.node_count(), 0.0);
        std::size_t batches = 0;
        for (std::size_t first = 0; first < order.size(); first += cfg.batch) {
            if (hooks.max_batches && batches >= hooks.max_batches) break;
            std::vector<const LabeledSequence*> batch;
            for (std::size_t k = first; k < std::min(order.size(), first + cfg.batch); ++k) batch.push_back(&train[order[k]]);
            auto rep = train_step(batch, g, pm, cfg, mix(mix(cfg.seed, epoch), batches));
            for (NodeIndex n = 0; n < g.node_count(); ++n) rec.train_loss[n] += rep.node_loss[n];
            ++batches;
        }
        for (auto& v : rec.train_loss) v /= static_cast<double>(std::max<std::size_t>(batches, 1));

        double metric;
        if (hooks.val_metric) {
            metric = hooks.val_metric(epoch);
            rec.val_loss.assign(g.node_count(), metric / static_cast<double>(g.node_count()));
        } else {
            rec.val_loss = validation_loss(val, g, pm, cfg);
            metric = std::accumulate(rec.val_loss.begin(), rec.val_loss.end(), 0.0);
        }
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (hooks.log) {
            for (NodeIndex n = 0; n < g.node_count(); ++n) {
                nlohmann::json j{{"epoch", epoch},
                                 {"node", g.node_id(n)},
                                 {"train_loss", rec.train_loss[n]},
                                 {"val_loss", rec.val_loss[n]},
                                 {"seconds", rec.seconds}};
                *hooks.log << j.dump() << "\n";
            }
            hooks.log->flush();
        }
        res.history.push_back(rec);
        res.epochs_run = epoch;
        if (stopper.update(epoch, metric)) {
            const auto bs = std::as_const(pm).blocks();
            best = ad::to_entries(bs);
            ad::write_checkpoint(res.checkpoint, best);
        }
        if (stopper.stop()) break;
    }
    auto bs = pm.blocks();
    ad::load_entries(bs, best);
    res.best_epoch = stopper.best_epoch();
    res.best_val_loss = stopper.best_loss();
    return res;
}

}  // namespace dnbp::training
