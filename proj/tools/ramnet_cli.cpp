// Command-line front end for training, evaluation, sweeps, gradient checks,
// access traces and the slot-cache simulator.
//
// Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "ramnet/harness.hpp"
#include "ramnet/kernels.hpp"

namespace fs = std::filesystem;
using namespace ramnet;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;

struct Common {
    std::string config;
    std::string preset_name;
    std::optional<std::uint64_t> seed;
    std::string out;
    int threads = 1;
};

void add_common(CLI::App* cmd, Common& c, bool with_out = true) {
    cmd->add_option("--config", c.config, "JSON run configuration");
    cmd->add_option("--preset", c.preset_name, "named preset used when no --config is given");
    cmd->add_option("--seed", c.seed, "random seed (overrides the config)");
    if (with_out) cmd->add_option("--out", c.out, "output directory");
    cmd->add_option("--threads", c.threads, "worker threads (1 = bit-reproducible serial mode)")
        ->check(CLI::PositiveNumber);
}

RunConfig resolve(const Common& c) {
    RunConfig cfg = c.config.empty() ? preset(c.preset_name.empty() ? "desk" : c.preset_name)
                                     : load_run_config(c.config);
    if (c.seed) cfg.seed = c.seed;
    if (!c.out.empty()) cfg.out_dir = c.out;
    cfg.threads = c.threads;
    cfg.validate();
    return cfg;
}

fs::path out_dir(const RunConfig& cfg) {
    if (cfg.out_dir.empty()) throw ConfigError("an output directory is required (--out)");
    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);
    if (ec) throw IoError("cannot create " + cfg.out_dir + ": " + ec.message());
    return cfg.out_dir;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stoull(item));
        } catch (const std::exception&) {
            throw ConfigError("bad seed list '" + s + "'");
        }
    }
    if (out.empty()) throw ConfigError("empty seed list");
    return out;
}

int cmd_train(const Common& c, int steps_override) {
    RunConfig cfg = resolve(c);
    if (steps_override > 0) cfg.steps = steps_override;
    const auto seed = cfg.require_seed();
    const auto dir = out_dir(cfg);
    write_json(dir / "config.json", to_json(cfg));
    Model model(cfg.model, seed);
    std::ofstream metrics(dir / "metrics.jsonl");
    if (!metrics) throw IoError("cannot open metrics file in " + dir.string());
    const auto result = train_mqar(model, cfg, [&](const StepMetrics& m) {
        metrics << m.to_json().dump() << '\n';
        if (m.eval_accuracy) {
            std::cerr << "step " << m.step << " loss " << m.loss << " eval " << *m.eval_accuracy << '\n';
        }
    });
    metrics.flush();
    if (!metrics) throw IoError("write failed: metrics.jsonl");
    save_checkpoint(dir / "checkpoint.json", model, result.steps_run);
    write_json(dir / "eval.json", result.final_eval.to_json());
    std::cout << result.final_eval.to_json().dump() << '\n';
    return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, int instances) {
    RunConfig cfg = resolve(c);
    const Model model = load_checkpoint(checkpoint);
    if (cfg.task.eval.empty()) throw ConfigError("no evaluation settings");
    for (const auto& s : cfg.task.eval) {
        if (s.vocab() > model.config().vocab) throw ConfigError("eval setting exceeds the checkpoint vocab");
    }
    const auto result = eval_mqar(model, cfg.task.eval, instances > 0 ? instances : cfg.task.eval_instances,
                                  cfg.require_seed(), cfg.engine);
    if (!cfg.out_dir.empty()) write_json(out_dir(cfg) / "eval.json", result.to_json());
    std::cout << result.to_json().dump() << '\n';
    return 0;
}

int cmd_sweep(const Common& c, const std::string& sweep, const std::string& seeds, int steps_override) {
    RunConfig cfg = resolve(c);
    if (steps_override > 0) cfg.steps = steps_override;
    const auto dir = out_dir(cfg);
    const auto points = sweep_preset(sweep, cfg);
    const auto seed_list = parse_seeds(seeds);
    const auto rows = run_sweep(points, seed_list, [&](const SweepRow& r) {
        std::cerr << r.label << " seed " << r.seed << " accuracy " << r.accuracy << '\n';
    });
    write_sweep_jsonl(dir / "sweep.jsonl", rows);
    write_plot_csv(dir / "plot.csv", plot_rows(rows));
    std::map<std::string, std::pair<double, int>> mean;
    for (const auto& r : rows) {
        mean[r.label].first += r.accuracy;
        mean[r.label].second += 1;
    }
    for (const auto& [label, acc] : mean) std::cout << label << " mean accuracy " << acc.first / acc.second << '\n';
    return 0;
}

int cmd_gradcheck(const std::vector<double>& gammas, std::uint64_t seed, bool exact, std::size_t max_coords,
                  double rel_tol, double abs_floor) {
    bool ok = true;
    for (const double g : gammas) {
        LayerGradCheckOptions o;
        o.gamma = g;
        o.seed = seed;
        o.max_coords = max_coords;
        o.rel_tol = rel_tol;
        o.abs_floor = abs_floor;
        if (exact) {
            o.eps_proxy = 0.0;
            o.surrogate = false;
        }
        const auto r = ramnet_layer_grad_check(o);
        std::cout << "gamma " << g << ": " << r.report.summary() << ", skipped " << r.tie_crossings
                  << " tie crossings\n";
        ok = ok && r.report.passed();
    }
    return ok ? 0 : kExitNumeric;
}

int cmd_trace(const Common& c, const std::string& checkpoint) {
    RunConfig cfg = resolve(c);
    const auto dir = out_dir(cfg);
    const Model model = checkpoint.empty() ? Model(cfg.model, cfg.require_seed()) : load_checkpoint(checkpoint);
    const auto& setting = cfg.task.eval.empty() ? cfg.task.train.front() : cfg.task.eval.front();
    const auto inst = generate_mqar(setting, cfg.require_seed());
    write_instances(dir / "instance.jsonl", std::span<const MqarInstance>(&inst, 1));
    const auto events = record_trace(model, inst.tokens);
    write_trace(dir / "trace.jsonl", events);
    write_heatmap_csv(dir / "heatmap.csv", trace_heatmap(events));
    std::cout << events.size() << " events written to " << (dir / "trace.jsonl").string() << '\n';
    return 0;
}

int cmd_cache(const std::string& trace, const CacheSimConfig& cfg, const std::string& out) {
    const auto events = read_trace(trace);
    const auto report = simulate_cache(events, cfg);
    if (!out.empty()) write_json(out, report.to_json());
    std::cout << "accesses " << report.accesses << " hits " << report.hits << " misses " << report.misses
              << " cold " << report.cold_misses << " evictions " << report.evictions << " hit_rate "
              << report.hit_rate() << '\n';
    return 0;
}

int cmd_plots(const std::string& sweep, const std::string& out) {
    const auto rows = read_sweep_jsonl(sweep);
    const auto plot = plot_rows(rows);
    write_plot_csv(out, plot);
    std::cout << plot.size() << " rows written to " << out << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"RAM-Net desk-scale toolkit"};
    app.require_subcommand(1);

    Common train_c, eval_c, sweep_c, trace_c;
    int train_steps = 0;
    auto* train = app.add_subcommand("train-mqar", "train a model on MQAR");
    add_common(train, train_c);
    train->add_option("--steps", train_steps, "override the step count");

    std::string eval_ckpt;
    int eval_instances = 0;
    auto* eval = app.add_subcommand("eval-mqar", "evaluate a checkpoint on the configured MQAR settings");
    add_common(eval, eval_c);
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint.json from train-mqar")->required();
    eval->add_option("--instances", eval_instances, "instances per setting");

    std::string sweep_name = "order";
    std::string sweep_seeds = "1,2,3";
    int sweep_steps = 0;
    auto* sweep = app.add_subcommand("sweep", "train and evaluate a named sweep over seeds");
    add_common(sweep, sweep_c);
    sweep->add_option("--sweep", sweep_name, "order, capacity or state-size");
    sweep->add_option("--seeds", sweep_seeds, "comma-separated seeds");
    sweep->add_option("--steps", sweep_steps, "override the step count");

    std::vector<double> gc_gammas = {0.0, 0.5, 1.0, 2.0};
    std::uint64_t gc_seed = 0;
    bool gc_exact = false;
    std::size_t gc_coords = 0;
    double gc_rel = 1e-4;
    double gc_floor = 1e-5;
    int gc_threads = 1;
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of a full RAM-Net layer");
    gc->add_option("--gamma", gc_gammas, "decay exponents to check");
    gc->add_option("--seed", gc_seed, "random seed");
    gc->add_flag("--exact", gc_exact, "check the exact decay derivative (proxy epsilon 0)");
    gc->add_option("--max-coords", gc_coords, "subsample coordinates (0 = all)");
    gc->add_option("--rel-tol", gc_rel, "relative error tolerance");
    gc->add_option("--abs-floor", gc_floor, "denominator floor of the relative error");
    gc->add_option("--threads", gc_threads, "worker threads")->check(CLI::PositiveNumber);

    std::string trace_ckpt;
    auto* trace = app.add_subcommand("trace", "record slot accesses of a model on one MQAR instance");
    add_common(trace, trace_c);
    trace->add_option("--checkpoint", trace_ckpt, "trained checkpoint (default: fresh model from config)");

    std::string cache_trace, cache_out;
    CacheSimConfig cache_cfg;
    auto* cache = app.add_subcommand("simulate-cache", "replay a trace through an LRU slot cache");
    cache->add_option("--trace", cache_trace, "trace.jsonl")->required();
    cache->add_option("--capacity", cache_cfg.capacity, "cache capacity in slots")->required();
    cache->add_option("--policy", cache_cfg.policy, "replacement policy (lru)");
    cache->add_option("--layer", cache_cfg.layer, "only this layer");
    cache->add_option("--head", cache_cfg.head, "only this head");
    cache->add_option("--out", cache_out, "report JSON path");

    std::string plots_sweep, plots_out;
    auto* plots = app.add_subcommand("emit-plots", "write state-size vs accuracy CSV from sweep results");
    plots->add_option("--sweep", plots_sweep, "sweep.jsonl")->required();
    plots->add_option("--out", plots_out, "CSV path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }

    try {
        if (*train) {
            kernels::set_threads(train_c.threads);
            return cmd_train(train_c, train_steps);
        }
        if (*eval) {
            kernels::set_threads(eval_c.threads);
            return cmd_eval(eval_c, eval_ckpt, eval_instances);
        }
        if (*sweep) {
            kernels::set_threads(sweep_c.threads);
            return cmd_sweep(sweep_c, sweep_name, sweep_seeds, sweep_steps);
        }
        if (*gc) {
            kernels::set_threads(gc_threads);
            return cmd_gradcheck(gc_gammas, gc_seed, gc_exact, gc_coords, gc_rel, gc_floor);
        }
        if (*trace) {
            kernels::set_threads(trace_c.threads);
            return cmd_trace(trace_c, trace_ckpt);
        }
        if (*cache) return cmd_cache(cache_trace, cache_cfg, cache_out);
        if (*plots) return cmd_plots(plots_sweep, plots_out);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const IoError& e) {
        std::cerr << "I/O failure: " << e.what() << '\n';
        return kExitIo;
    }
    return 0;
}
