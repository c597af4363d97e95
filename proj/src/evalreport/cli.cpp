#include "dnbp/evalreport/cli.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "dnbp/evalreport/evalreport.hpp"
#include "dnbp/simworld/simworld.hpp"
#include "dnbp/training/training.hpp"

namespace dnbp::evalreport {

namespace {

namespace fs = std::filesystem;
namespace sw = simworld;

// Raised for problems that should print the usage text and exit 2.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string read_text(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw UsageError("cannot read config file " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::ofstream open_out(const fs::path& p) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    return out;
}

// Dataset overrides: sequences, frames, image_size, retry_budget.
void apply_dataset_config(const std::string& text, sw::DatasetSpec& spec) {
    std::istringstream in(text);
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("dataset config line " + std::to_string(line_no) + ": expected key = value");
        auto trim = [](std::string s) {
            s.erase(0, s.find_first_not_of(" \t\r"));
            s.erase(s.find_last_not_of(" \t\r") + 1);
            return s;
        };
        const auto key = trim(line.substr(0, eq));
        const auto value = trim(line.substr(eq + 1));
        std::size_t used = 0;
        long long v = 0;
        try {
            v = std::stoll(value, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != value.size() || v <= 0)
            throw std::invalid_argument("dataset config key '" + key + "' needs a positive integer");
        const auto u = static_cast<std::size_t>(v);
        if (key == "sequences") spec.sequences = u;
        else if (key == "frames") spec.frames = u;
        else if (key == "image_size") spec.image_size = u;
        else if (key == "retry_budget") spec.retry_budget = u;
        else throw std::invalid_argument("unknown dataset config key '" + key + "'");
    }
}

model::GraphModel graph_for(sw::Task task) {
    return task == sw::Task::pendulum ? model::GraphModel::pendulum() : model::GraphModel::spider();
}

potentials::NetworkShape shape_for(const sw::Dataset& ds) {
    potentials::NetworkShape s;
    s.image_height = s.image_width = ds.spec.image_size;
    return s;
}

fs::path stats_path(const fs::path& checkpoint) { return checkpoint.parent_path() / "channel_stats.txt"; }

struct Options {
    std::string config;
    std::uint64_t seed = 0;
    std::optional<std::size_t> particles;
    std::optional<std::size_t> passes;
    std::string out;
    std::string task;
    std::string split;
    std::string data;
    std::string val;
    std::string checkpoint;
    std::string tracks;
    std::size_t edge = 0;
    std::size_t max_batches = 0;
    std::size_t limit = 0;
    bool dump_particles = false;
};

int gen_data(const Options& o, std::ostream& out) {
    auto spec = sw::default_spec(sw::parse_task(o.task), sw::parse_split(o.split));
    spec.seed = o.seed;
    if (!o.config.empty()) apply_dataset_config(read_text(o.config), spec);
    const auto ds = sw::generate_dataset(spec);
    sw::save_dataset(ds, o.out);
    out << "wrote " << ds.sequences.size() << " sequences to " << o.out << '\n';
    return 0;
}

int train(const Options& o, std::ostream& out, std::ostream& err) {
    training::TrainConfig cfg;
    if (!o.config.empty()) cfg = training::parse_train_config(read_text(o.config));
    if (o.particles) cfg.particles = cfg.val_particles = *o.particles;
    if (o.passes) cfg.passes = cfg.val_passes = *o.passes;
    cfg.seed = o.seed;

    const auto train_ds = sw::load_dataset(o.data);
    const auto val_ds = sw::load_dataset(o.val);
    if (train_ds.spec.task != val_ds.spec.task) throw std::invalid_argument("train and validation tasks differ");
    if (train_ds.spec.image_size != val_ds.spec.image_size)
        throw std::invalid_argument("train and validation image sizes differ");
    const auto g = graph_for(train_ds.spec.task);
    // Normalization always uses the training split's statistics.
    const auto train_seqs = sw::to_labeled(train_ds, train_ds.stats);
    const auto val_seqs = sw::to_labeled(val_ds, train_ds.stats);

    fs::create_directories(o.out);
    potentials::LearnedPotentials pm(g, shape_for(train_ds), o.seed);
    auto log = open_out(fs::path(o.out) / "train_log.jsonl");
    training::FitHooks hooks;
    hooks.log = &log;
    hooks.max_batches = o.max_batches;
    const auto res = training::fit(train_seqs, val_seqs, g, pm, cfg, o.out, hooks);
    sw::save_channel_stats(train_ds.stats, stats_path(res.checkpoint));
    {
        auto c = open_out(fs::path(o.out) / "train_config.txt");
        c << training::format_train_config(cfg);
    }
    for (const auto& h : res.history)
        err << "epoch " << h.epoch << " " << h.seconds << "s\n";
    out << "best epoch " << res.best_epoch << " of " << res.epochs_run << ", checkpoint " << res.checkpoint.string()
        << '\n';
    return 0;
}

int track(const Options& o, std::ostream& out) {
    const auto ds = sw::load_dataset(o.data);
    const auto g = graph_for(ds.spec.task);
    potentials::LearnedPotentials pm(g, shape_for(ds), 0);
    pm.load(o.checkpoint);
    const auto stats = sw::load_channel_stats(stats_path(o.checkpoint));

    TrackOptions topt;
    if (!o.config.empty()) {
        const auto cfg = training::parse_train_config(read_text(o.config));
        topt.inference.bandwidth = cfg.bandwidth;
        topt.inference.unary_samples = cfg.unary_samples;
        topt.inference.particles = cfg.val_particles;
        topt.passes = cfg.val_passes;
    }
    if (o.particles) topt.inference.particles = *o.particles;
    if (o.passes) topt.passes = *o.passes;

    fs::create_directories(o.out);
    auto report = open_out(fs::path(o.out) / "tracks.jsonl");
    std::vector<TrackedSequence> kept;
    const std::size_t n = o.limit ? std::min(o.limit, ds.sequences.size()) : ds.sequences.size();
    for (std::size_t s = 0; s < n; ++s) {
        const auto seq = sw::to_labeled(ds.sequences[s], stats);
        topt.seed = o.seed + s;
        auto tr = track_sequence(seq.frames, seq.truth, g, pm, topt);
        tr.result.decile = ds.sequences[s].bin;
        tr.result.image_size = ds.spec.image_size;
        write_track_jsonl(s, tr.result, report);
        if (o.dump_particles) kept.push_back(std::move(tr));
    }
    if (o.dump_particles) write_particle_dump(kept, fs::path(o.out) / "particles.ckpt");
    out << "tracked " << n << " sequences into " << (fs::path(o.out) / "tracks.jsonl").string() << '\n';
    return 0;
}

int eval(const Options& o, std::ostream& out) {
    std::ifstream in(o.tracks);
    if (!in) throw std::runtime_error("cannot read " + o.tracks);
    const auto results = read_track_jsonl(in);
    fs::create_directories(o.out);
    const auto task = o.task.empty() ? std::string("pendulum") : sw::to_string(sw::parse_task(o.task));

    const auto rows = avg_error_report(task, results);
    {
        auto f = open_out(fs::path(o.out) / "errors.csv");
        write_error_csv(rows, f);
    }
    std::map<std::size_t, Series> by_node;
    for (const auto& r : rows) {
        auto& s = by_node[r.node];
        s.label = "node " + std::to_string(r.node);
        s.x.push_back(r.decile);
        s.y.push_back(r.mean_error_px);
    }
    std::vector<Series> err_series;
    for (auto& [k, s] : by_node) err_series.push_back(std::move(s));
    {
        auto f = open_out(fs::path(o.out) / "errors.svg");
        write_line_plot_svg(err_series, task + " tracking error", "clutter decile", "mean error (px)", f);
    }

    const auto trace = entropy_trace(results);
    {
        auto f = open_out(fs::path(o.out) / "entropy.csv");
        write_entropy_csv(trace, f);
    }
    // Mean entropy per frame for each node.
    std::map<std::size_t, std::map<std::size_t, std::pair<double, std::size_t>>> acc;
    for (const auto& r : trace) {
        auto& a = acc[r.node][r.frame];
        a.first += r.entropy;
        ++a.second;
    }
    std::vector<Series> ent_series;
    for (const auto& [node, frames] : acc) {
        Series s{"node " + std::to_string(node), {}, {}};
        for (const auto& [t, a] : frames) {
            s.x.push_back(static_cast<double>(t));
            s.y.push_back(a.first / static_cast<double>(a.second));
        }
        ent_series.push_back(std::move(s));
    }
    {
        auto f = open_out(fs::path(o.out) / "entropy.svg");
        write_line_plot_svg(ent_series, task + " belief entropy", "frame", "entropy (nats)", f);
    }
    out << "wrote " << rows.size() << " error rows and " << trace.size() << " entropy rows to " << o.out << '\n';
    return 0;
}

int inspect(const Options& o, std::ostream& out) {
    const auto ds = sw::load_dataset(o.data);
    const auto g = graph_for(ds.spec.task);
    potentials::LearnedPotentials pm(g, shape_for(ds), 0);
    pm.load(o.checkpoint);
    std::vector<std::vector<double>> truth;
    for (const auto& s : ds.sequences) truth.insert(truth.end(), s.keypoints.begin(), s.keypoints.end());
    std::mt19937_64 rng(o.seed);
    const auto p = pairwise_inspection(truth, g, pm, o.edge, rng);
    write_inspection(p, o.out, "edge" + std::to_string(o.edge));
    out << "wrote inspection grids for edge " << o.edge << " to " << o.out << '\n';
    return 0;
}

std::string one_line(std::string s) {
    std::replace(s.begin(), s.end(), '\n', ' ');
    return s;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Differentiable nonparametric belief propagation: data, training, tracking, evaluation", "dnbp"};
    app.require_subcommand(1);
    Options o;

    auto* gen = app.add_subcommand("gen-data", "Generate a simulated dataset split");
    gen->add_option("--task", o.task, "pendulum or spider")->required();
    gen->add_option("--split", o.split, "train, val or test")->required();
    gen->add_option("--seed", o.seed, "master seed");
    gen->add_option("--out", o.out, "output dataset directory")->required();
    gen->add_option("--config", o.config, "dataset overrides (key = value)");

    auto* tr = app.add_subcommand("train", "Train potentials on a dataset");
    tr->add_option("--data", o.data, "training dataset directory")->required();
    tr->add_option("--val", o.val, "validation dataset directory")->required();
    tr->add_option("--config", o.config, "training config (key = value)");
    tr->add_option("--seed", o.seed, "parameter and batch seed");
    tr->add_option("--particles", o.particles, "particles per message");
    tr->add_option("--passes", o.passes, "message passes per step");
    tr->add_option("--max-batches", o.max_batches, "cap on batches per epoch");
    tr->add_option("--out", o.out, "output directory")->required();

    auto* tk = app.add_subcommand("track", "Track a dataset with trained potentials");
    tk->add_option("--checkpoint", o.checkpoint, "trained checkpoint")->required();
    tk->add_option("--data", o.data, "dataset directory")->required();
    tk->add_option("--config", o.config, "training config for inference settings");
    tk->add_option("--seed", o.seed, "inference seed");
    tk->add_option("--particles", o.particles, "particles per message");
    tk->add_option("--passes", o.passes, "message passes per frame");
    tk->add_option("--limit", o.limit, "track only the first n sequences");
    tk->add_flag("--dump-particles", o.dump_particles, "write every belief to particles.ckpt");
    tk->add_option("--out", o.out, "output directory")->required();

    auto* ev = app.add_subcommand("eval", "Error table and entropy plots from tracks");
    ev->add_option("--tracks", o.tracks, "tracks.jsonl from track")->required();
    ev->add_option("--task", o.task, "task name for the table");
    ev->add_option("--out", o.out, "output directory")->required();

    auto* in = app.add_subcommand("inspect", "Pairwise potential inspection grids");
    in->add_option("--checkpoint", o.checkpoint, "trained checkpoint")->required();
    in->add_option("--data", o.data, "dataset providing ground-truth translations")->required();
    in->add_option("--edge", o.edge, "edge index");
    in->add_option("--seed", o.seed, "sampler seed");
    in->add_option("--out", o.out, "output directory")->required();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << one_line(e.what()) << '\n' << app.help();
        return 2;
    }

    try {
        if (*gen) return gen_data(o, out);
        if (*tr) return train(o, out, err);
        if (*tk) return track(o, out);
        if (*ev) return eval(o, out);
        return inspect(o, out);
    } catch (const UsageError& e) {
        err << "error: " << one_line(e.what()) << '\n' << app.help();
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << one_line(e.what()) << '\n';
        return 1;
    }
}

}  // namespace dnbp::evalreport
