#pragma once

// Training and evaluation harness: run configuration, AdamW with a warmup +
// cosine schedule, MQAR training and evaluation, checkpoints, access traces,
// the LRU slot-cache simulator and plot data.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "ramnet/autodiff.hpp"
#include "ramnet/model.hpp"
#include "ramnet/tasks.hpp"

namespace ramnet {

struct OptimConfig {
    double peak_lr = 3e-3;
    double min_lr = 3e-4;  // cosine floor, reached at the last step
    double warmup_frac = 0.05;
    double weight_decay = 0.1;
    double grad_clip = 1.0;  // global norm; 0 disables
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
};

struct TaskConfig {
    std::vector<MqarConfig> train;  // each batch lane draws one setting round-robin
    std::vector<MqarConfig> eval;
    int eval_instances = 64;  // per setting
};

struct RunConfig {
    static constexpr int kSchemaVersion = 1;

    std::string name = "desk";
    ModelConfig model;
    TaskConfig task;
    OptimConfig optim;
    int steps = 2000;
    int batch = 32;
    int eval_every = 0;  // 0: evaluate only at the end
    double target_accuracy = 0.0;  // >0: stop early once eval reaches it
    std::optional<std::uint64_t> seed;  // mandatory for training
    std::string out_dir;
    int threads = 1;
    Engine engine = Engine::segmented;

    void validate() const;
    std::uint64_t require_seed() const;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& cfg);
/// Unknown keys are rejected. A "preset" key selects the base that the
/// remaining keys override.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

/// Names: desk, desk-attention, desk-linear, toy, large-shape, large-train.
RunConfig preset(const std::string& name);
std::vector<std::string> preset_names();

/// Linear warmup from 0 over warmup steps, then cosine decay to min_lr at the
/// final step.
double learning_rate(const OptimConfig& cfg, int step, int total_steps);

class AdamW {
public:
    explicit AdamW(const ParamStore& params, OptimConfig cfg = {});
    /// Decoupled weight decay is applied to matrices only (gains, biases and
    /// the per-head alpha scalars are exempt).
    void step(ParamStore& params, const GradBuffer& grads, double lr);
    std::int64_t steps_taken() const noexcept { return t_; }

private:
    OptimConfig cfg_;
    std::vector<Matrix> m_, v_;
    std::vector<bool> decay_;
    std::int64_t t_ = 0;
};

/// Global L2 norm; scales the gradients in place when above max_norm > 0.
double clip_grad_norm(GradBuffer& grads, double max_norm);

struct StepMetrics {
    int step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;
    std::uint64_t touched_values = 0;
    std::uint64_t tokens = 0;
    std::uint64_t tie_points = 0;
    std::optional<double> eval_accuracy;

    nlohmann::json to_json() const;
};

struct EvalResult {
    std::vector<std::string> labels;
    std::vector<double> accuracy;
    double aggregate = 0.0;

    nlohmann::json to_json() const;
};

struct TrainResult {
    std::vector<StepMetrics> history;
    EvalResult final_eval;
    int steps_run = 0;
};

using MetricsSink = std::function<void(const StepMetrics&)>;

/// Loss and gradients of one MQAR batch. Lanes run under OpenMP when
/// threads > 1; lane gradients are summed in lane order, so results do not
/// depend on the thread count.
double batch_gradients(const Model& model, std::span<const MqarInstance> batch, GradBuffer& grads,
                       const ForwardOptions& opts, MixerStats* stats = nullptr);

/// Draws fresh instances each step. Aborts with NumericError naming the first
/// non-finite quantity.
TrainResult train_mqar(Model& model, const RunConfig& cfg, const MetricsSink& sink = {});

EvalResult eval_mqar(const Model& model, std::span<const MqarConfig> settings, int instances,
                     std::uint64_t seed, Engine engine = Engine::segmented);

/// JSON checkpoint: {"format", "version", "step", "model": config, "params": {name: {rows, cols, data}}}.
void save_checkpoint(const std::filesystem::path& path, const Model& model, int step);
Model load_checkpoint(const std::filesystem::path& path);

// Access traces (JSON lines: t, layer, head, kind, slot, weight).

std::vector<TraceEvent> record_trace(const Model& model, std::span<const int> tokens);
void write_trace(const std::filesystem::path& path, std::span<const TraceEvent> events);
std::vector<TraceEvent> read_trace(const std::filesystem::path& path);
/// Throws ConfigError when t decreases within a (layer, head).
void validate_trace(std::span<const TraceEvent> events);

struct HeatCell {
    int layer = 0;
    int head = 0;
    Slot slot = 0;
    std::int64_t t = 0;
    std::uint32_t reads = 0;
    std::uint32_t writes = 0;
};

/// Sparse (slot x time) access counts per head, sorted by (layer, head, slot, t).
std::vector<HeatCell> trace_heatmap(std::span<const TraceEvent> events);
void write_heatmap_csv(const std::filesystem::path& path, std::span<const HeatCell> cells);

struct CacheSimConfig {
    std::size_t capacity = 1;
    std::string policy = "lru";
    std::optional<int> layer;  // restrict to one layer / head when set
    std::optional<int> head;

    void validate() const;
};

struct CacheReport {
    std::uint64_t accesses = 0;
    std::uint64_t hits = 0;
    std::uint64_t misses = 0;
    std::uint64_t cold_misses = 0;
    std::uint64_t evictions = 0;
    double hit_rate() const noexcept {
        return accesses == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(accesses);
    }
    std::map<std::tuple<int, int, Slot>, std::uint64_t> touches;  // (layer, head, slot)

    nlohmann::json to_json() const;
};

/// LRU over slot ids; every event (read or write) is one access.
CacheReport simulate_cache(std::span<const TraceEvent> events, const CacheSimConfig& cfg);

// Finite-difference check of one full RAM-Net layer (norm, projections with
// the alpha scalars, sparse memory heads, output projection, residual).

struct LayerGradCheckOptions {
    double gamma = 1.0;
    std::uint64_t seed = 0;
    int steps = 8;
    int partitions = 2;
    int sub_dim = 4;
    int top_k = 2;
    int d_model = 12;
    int heads = 2;  // head 0 relative, the rest absolute
    int value_dim = 4;
    double eps_proxy = 0.01;
    // Differentiate the smoothed-decay forward, whose exact gradient is the proxy.
    bool surrogate = true;
    std::size_t max_coords = 0;
    double rel_tol = 1e-4;
    double abs_floor = 1e-8;
    int max_resamples = 20;
};

struct LayerGradCheckResult {
    GradCheckReport report;
    std::size_t tie_crossings = 0;  // coordinates whose +-h probe changed a Top-K set
    int resamples = 0;              // points rejected for sitting on a Top-K tie
};

LayerGradCheckResult ramnet_layer_grad_check(const LayerGradCheckOptions& opts);

// Sweeps and plot data.

struct SweepPoint {
    std::string label;
    RunConfig run;
};

struct SweepRow {
    std::string label;
    std::string model_kind;
    int partitions = 0;
    std::uint64_t capacity = 0;
    std::uint64_t seed = 0;
    std::uint64_t state_size = 0;
    double accuracy = 0.0;
    std::size_t parameters = 0;
};

/// Named sweeps: order (U at fixed M = 256), capacity (M at fixed U = 2),
/// state-size (all three model kinds).
std::vector<SweepPoint> sweep_preset(const std::string& name, const RunConfig& base);
std::vector<SweepRow> run_sweep(std::span<const SweepPoint> points, std::span<const std::uint64_t> seeds,
                                const std::function<void(const SweepRow&)>& on_row = {});

/// State size of a model configuration at the given sequence length.
std::uint64_t model_state_size(const ModelConfig& cfg, std::uint64_t seq_len);

struct PlotRow {
    std::uint64_t state_size = 0;
    double accuracy = 0.0;
    std::string model_kind;
};

std::vector<PlotRow> plot_rows(std::span<const SweepRow> rows);
void write_sweep_jsonl(const std::filesystem::path& path, std::span<const SweepRow> rows);
std::vector<SweepRow> read_sweep_jsonl(const std::filesystem::path& path);
/// Header: state_size,accuracy,model_kind
void write_plot_csv(const std::filesystem::path& path, std::span<const PlotRow> rows);
std::vector<PlotRow> read_plot_csv(const std::filesystem::path& path);

}  // namespace ramnet
