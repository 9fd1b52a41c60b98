#include <cmath>
#include <numbers>
#include <fstream>
#include <set>

#include "ramnet/harness.hpp"

namespace ramnet {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> known, const char* where) {
    if (!j.is_object()) throw ConfigError(std::string(where) + ": expected an object");
    const std::set<std::string> allowed(known.begin(), known.end());
    for (const auto& [key, _] : j.items()) {
        if (!allowed.contains(key)) throw ConfigError(std::string(where) + ": unknown key '" + key + "'");
    }
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        j.at(key).get_to(out);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config key '") + key + "': " + e.what());
    }
}

json modes_to_json(const std::vector<std::vector<AddressingMode>>& cape) {
    json out = json::array();
    for (const auto& layer : cape) {
        json row = json::array();
        for (auto m : layer) row.push_back(to_string(m));
        out.push_back(row);
    }
    return out;
}

json mqar_to_json(const MqarConfig& c) {
    return {{"pairs", c.pairs},   {"seq_len", c.seq_len},   {"key_lo", c.key_lo},
            {"key_hi", c.key_hi}, {"value_lo", c.value_lo}, {"value_hi", c.value_hi}};
}

MqarConfig mqar_from_json(const json& j) {
    // Either [pairs, seq_len, vocab] shorthand or a full object.
    if (j.is_array()) {
        if (j.size() != 3) throw ConfigError("mqar setting: expected [pairs, seq_len, vocab]");
        return MqarConfig::with_vocab(j[0].get<int>(), j[1].get<int>(), j[2].get<int>());
    }
    reject_unknown(j, {"pairs", "seq_len", "key_lo", "key_hi", "value_lo", "value_hi", "vocab"},
                   "mqar setting");
    MqarConfig c;
    if (j.contains("vocab")) {
        c = MqarConfig::with_vocab(j.at("pairs").get<int>(), j.at("seq_len").get<int>(),
                                   j.at("vocab").get<int>());
    }
    read_opt(j, "pairs", c.pairs);
    read_opt(j, "seq_len", c.seq_len);
    read_opt(j, "key_lo", c.key_lo);
    read_opt(j, "key_hi", c.key_hi);
    read_opt(j, "value_lo", c.value_lo);
    read_opt(j, "value_hi", c.value_hi);
    c.validate();
    return c;
}

const char* to_string(Engine e) { return e == Engine::segmented ? "segmented" : "sequential"; }

Engine parse_engine(const std::string& s) {
    if (s == "segmented") return Engine::segmented;
    if (s == "sequential") return Engine::sequential;
    throw ConfigError("unknown engine '" + s + "'");
}

}  // namespace

json to_json(const ModelConfig& c) {
    return {{"kind", to_string(c.kind)},
            {"vocab", c.vocab},
            {"layers", c.layers},
            {"d_model", c.d_model},
            {"heads", c.heads},
            {"partitions", c.partitions},
            {"sub_dim", c.sub_dim},
            {"top_k", c.top_k},
            {"tau", c.tau},
            {"renormalize", c.renormalize},
            {"key_dim", c.key_dim},
            {"value_dim", c.value_dim},
            {"gamma", c.gamma},
            {"eps", c.eps},
            {"eps_proxy", c.eps_proxy},
            {"mlp_hidden", c.mlp_hidden},
            {"tie_embeddings", c.tie_embeddings},
            {"rope", c.rope},
            {"cape", modes_to_json(c.cape)}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    reject_unknown(j,
                   {"kind", "vocab", "layers", "d_model", "heads", "partitions", "sub_dim", "top_k",
                    "tau", "renormalize", "key_dim", "value_dim", "gamma", "eps", "eps_proxy",
                    "mlp_hidden", "tie_embeddings", "rope", "cape"},
                   "model");
    if (j.contains("kind")) c.kind = parse_mixer_kind(j.at("kind").get<std::string>());
    read_opt(j, "vocab", c.vocab);
    read_opt(j, "layers", c.layers);
    read_opt(j, "d_model", c.d_model);
    read_opt(j, "heads", c.heads);
    read_opt(j, "partitions", c.partitions);
    read_opt(j, "sub_dim", c.sub_dim);
    read_opt(j, "top_k", c.top_k);
    read_opt(j, "tau", c.tau);
    read_opt(j, "renormalize", c.renormalize);
    read_opt(j, "key_dim", c.key_dim);
    read_opt(j, "value_dim", c.value_dim);
    read_opt(j, "gamma", c.gamma);
    read_opt(j, "eps", c.eps);
    read_opt(j, "eps_proxy", c.eps_proxy);
    read_opt(j, "mlp_hidden", c.mlp_hidden);
    read_opt(j, "tie_embeddings", c.tie_embeddings);
    read_opt(j, "rope", c.rope);
    if (j.contains("cape")) {
        c.cape.clear();
        for (const auto& layer : j.at("cape")) {
            std::vector<AddressingMode> row;
            for (const auto& m : layer) row.push_back(parse_addressing_mode(m.get<std::string>()));
            c.cape.push_back(std::move(row));
        }
    }
    return c;
}

json to_json(const RunConfig& c) {
    json train = json::array();
    for (const auto& m : c.task.train) train.push_back(mqar_to_json(m));
    json eval = json::array();
    for (const auto& m : c.task.eval) eval.push_back(mqar_to_json(m));
    json out = {{"version", RunConfig::kSchemaVersion},
                {"name", c.name},
                {"model", to_json(c.model)},
                {"task", {{"train", train}, {"eval", eval}, {"eval_instances", c.task.eval_instances}}},
                {"optim",
                 {{"peak_lr", c.optim.peak_lr},
                  {"min_lr", c.optim.min_lr},
                  {"warmup_frac", c.optim.warmup_frac},
                  {"weight_decay", c.optim.weight_decay},
                  {"grad_clip", c.optim.grad_clip},
                  {"beta1", c.optim.beta1},
                  {"beta2", c.optim.beta2},
                  {"adam_eps", c.optim.adam_eps}}},
                {"steps", c.steps},
                {"batch", c.batch},
                {"eval_every", c.eval_every},
                {"target_accuracy", c.target_accuracy},
                {"out_dir", c.out_dir},
                {"threads", c.threads},
                {"engine", to_string(c.engine)}};
    out["seed"] = c.seed ? json(*c.seed) : json(nullptr);
    return out;
}

RunConfig run_config_from_json(const json& j) {
    reject_unknown(j,
                   {"version", "preset", "name", "model", "task", "optim", "steps", "batch", "eval_every",
                    "target_accuracy", "seed", "out_dir", "threads", "engine"},
                   "run config");
    if (j.contains("version") && j.at("version").get<int>() != RunConfig::kSchemaVersion) {
        throw ConfigError("run config: unsupported schema version");
    }
    RunConfig c = j.contains("preset") ? preset(j.at("preset").get<std::string>()) : preset("desk");
    read_opt(j, "name", c.name);
    if (j.contains("model")) {
        // Overlay onto the preset's model.
        json merged = to_json(c.model);
        for (const auto& [k, v] : j.at("model").items()) merged[k] = v;
        if (!j.at("model").contains("cape") && (j.at("model").contains("layers") || j.at("model").contains("heads"))) {
            merged["cape"] = json::array();
        }
        c.model = model_config_from_json(merged);
    }
    if (j.contains("task")) {
        const auto& t = j.at("task");
        reject_unknown(t, {"train", "eval", "eval_instances"}, "task");
        if (t.contains("train")) {
            c.task.train.clear();
            for (const auto& m : t.at("train")) c.task.train.push_back(mqar_from_json(m));
        }
        if (t.contains("eval")) {
            c.task.eval.clear();
            for (const auto& m : t.at("eval")) c.task.eval.push_back(mqar_from_json(m));
        }
        read_opt(t, "eval_instances", c.task.eval_instances);
    }
    if (j.contains("optim")) {
        const auto& o = j.at("optim");
        reject_unknown(o,
                       {"peak_lr", "min_lr", "warmup_frac", "weight_decay", "grad_clip", "beta1", "beta2",
                        "adam_eps"},
                       "optim");
        read_opt(o, "peak_lr", c.optim.peak_lr);
        read_opt(o, "min_lr", c.optim.min_lr);
        read_opt(o, "warmup_frac", c.optim.warmup_frac);
        read_opt(o, "weight_decay", c.optim.weight_decay);
        read_opt(o, "grad_clip", c.optim.grad_clip);
        read_opt(o, "beta1", c.optim.beta1);
        read_opt(o, "beta2", c.optim.beta2);
        read_opt(o, "adam_eps", c.optim.adam_eps);
    }
    read_opt(j, "steps", c.steps);
    read_opt(j, "batch", c.batch);
    read_opt(j, "eval_every", c.eval_every);
    read_opt(j, "target_accuracy", c.target_accuracy);
    if (j.contains("seed")) {
        if (j.at("seed").is_null()) c.seed.reset();
        else c.seed = j.at("seed").get<std::uint64_t>();
    }
    read_opt(j, "out_dir", c.out_dir);
    read_opt(j, "threads", c.threads);
    if (j.contains("engine")) c.engine = parse_engine(j.at("engine").get<std::string>());
    c.validate();
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return run_config_from_json(j);
}

void RunConfig::validate() const {
    model.validate();
    if (steps < 1 || batch < 1) throw ConfigError("run config: steps and batch must be positive");
    if (threads < 1) throw ConfigError("run config: threads must be positive");
    if (task.train.empty()) throw ConfigError("run config: no training settings");
    if (task.eval_instances < 1) throw ConfigError("run config: eval_instances must be positive");
    for (const auto& m : task.train) {
        m.validate();
        if (m.vocab() > model.vocab) throw ConfigError("run config: task vocab exceeds model vocab");
    }
    for (const auto& m : task.eval) {
        m.validate();
        if (m.vocab() > model.vocab) throw ConfigError("run config: eval vocab exceeds model vocab");
    }
    const auto& o = optim;
    if (!(o.peak_lr > 0.0) || !(o.min_lr >= 0.0) || o.min_lr > o.peak_lr) {
        throw ConfigError("optim: need 0 <= min_lr <= peak_lr and peak_lr > 0");
    }
    if (!(o.warmup_frac >= 0.0 && o.warmup_frac < 1.0)) throw ConfigError("optim: warmup_frac in [0, 1)");
    if (!(o.weight_decay >= 0.0) || !(o.grad_clip >= 0.0)) {
        throw ConfigError("optim: weight_decay and grad_clip must be nonnegative");
    }
    if (!(o.beta1 >= 0.0 && o.beta1 < 1.0 && o.beta2 >= 0.0 && o.beta2 < 1.0)) {
        throw ConfigError("optim: betas must lie in [0, 1)");
    }
    if (!(o.adam_eps > 0.0)) throw ConfigError("optim: adam_eps must be positive");
}

std::uint64_t RunConfig::require_seed() const {
    if (!seed) throw ConfigError("run config: a seed is required");
    return *seed;
}

std::vector<std::string> preset_names() {
    return {"desk", "desk-attention", "desk-linear", "toy", "large-shape", "large-train"};
}

RunConfig preset(const std::string& name) {
    RunConfig c;
    c.name = name;
    // Desk-scale MQAR: d_m = 128, two layers, M = 4^4 = 256, Top-8.
    c.model.kind = MixerKind::ramnet;
    c.model.vocab = 64;
    c.model.layers = 2;
    c.model.d_model = 128;
    c.model.heads = 2;
    c.model.partitions = 4;
    c.model.sub_dim = 4;
    c.model.top_k = 8;
    c.model.value_dim = 32;
    c.model.key_dim = 16;
    c.model.mlp_hidden = 0;
    c.task.train = {MqarConfig::with_vocab(4, 64, 64)};
    c.task.eval = {MqarConfig::with_vocab(4, 64, 64)};
    c.task.eval_instances = 256;
    c.steps = 3000;
    c.batch = 32;
    c.eval_every = 250;
    c.optim.peak_lr = 1e-3;
    c.optim.min_lr = 1e-4;
    c.optim.warmup_frac = 0.05;
    c.optim.weight_decay = 0.1;
    c.optim.grad_clip = 1.0;

    if (name == "desk") return c;
    if (name == "desk-attention") {
        c.model.kind = MixerKind::full_attention;
        return c;
    }
    if (name == "desk-linear") {
        c.model.kind = MixerKind::linear_attention;
        return c;
    }
    if (name == "toy") {
        // U = 3, d_p = 2 gives M = 8 slots with a single active slot.
        c.model.vocab = 16;
        c.model.layers = 1;
        c.model.d_model = 16;
        c.model.heads = 1;
        c.model.partitions = 3;
        c.model.sub_dim = 2;
        c.model.top_k = 1;
        c.model.value_dim = 8;
        c.task.train = {MqarConfig::with_vocab(2, 16, 16)};
        c.task.eval = c.task.train;
        c.steps = 200;
        c.batch = 8;
        return c;
    }
    if (name == "large-shape" || name == "large-train") {
        // Width 1024, 27 layers, 16 heads, d_v = 64, U = 5, d_p = 4 (M = 1024), Top-8.
        c.model.vocab = 32000;
        c.model.layers = 27;
        c.model.d_model = 1024;
        c.model.heads = 16;
        c.model.partitions = 5;
        c.model.sub_dim = 4;
        c.model.top_k = 8;
        c.model.value_dim = 64;
        c.model.mlp_hidden = 4096;
        c.model.tie_embeddings = true;
        c.model.cape = staged_cape_schedule(27, 16);
        c.task.train = standard_mqar_settings(8192);
        c.task.eval = c.task.train;
        if (name == "large-train") {
            c.optim.peak_lr = 1e-3;
            c.optim.min_lr = 1e-4;
            c.optim.weight_decay = 0.1;
            c.optim.grad_clip = 1.0;
            c.optim.warmup_frac = 0.05;  // 500M of 10B tokens
        }
        return c;
    }
    throw ConfigError("unknown preset '" + name + "'");
}

double learning_rate(const OptimConfig& cfg, int step, int total_steps) {
    const int warmup = static_cast<int>(std::floor(cfg.warmup_frac * total_steps));
    if (step < warmup) return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
    const int span = total_steps - 1 - warmup;
    if (span <= 0) return step >= total_steps - 1 ? cfg.min_lr : cfg.peak_lr;
    const double progress = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(span));
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace ramnet
