#include <cmath>
#include <exception>
#include <fstream>

#include "ramnet/harness.hpp"
#include "ramnet/kernels.hpp"
#include "ramnet/ops.hpp"

namespace ramnet {

using nlohmann::json;

namespace {

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    return splitmix(splitmix(splitmix(seed) ^ a) ^ b);
}

constexpr std::uint64_t kEvalStream = 0x6576616cULL;

bool exempt_from_decay(const std::string& name) {
    for (const char* suffix : {"gain", "alpha_q", "alpha_k", ".bg"}) {
        if (name.ends_with(suffix)) return true;
    }
    return false;
}

}  // namespace

AdamW::AdamW(const ParamStore& params, OptimConfig cfg) : cfg_(cfg) {
    m_ = params.zeros_like();
    v_ = params.zeros_like();
    for (std::size_t i = 0; i < params.size(); ++i) decay_.push_back(!exempt_from_decay(params.name(i)));
}

void AdamW::step(ParamStore& params, const GradBuffer& grads, double lr) {
    if (grads.size() != params.size()) throw ConfigError("AdamW: gradient count mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto w = params.value(i).flat();
        const auto g = grads[i].flat();
        auto m = m_[i].flat();
        auto v = v_[i].flat();
        const double wd = decay_[i] ? cfg_.weight_decay : 0.0;
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
            const double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.adam_eps);
            w[j] -= lr * (update + wd * w[j]);
        }
    }
}

double clip_grad_norm(GradBuffer& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& g : grads) {
        for (double x : g.flat()) sq += x * x;
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (auto& g : grads) {
            for (double& x : g.flat()) x *= s;
        }
    }
    return norm;
}

json StepMetrics::to_json() const {
    json j = {{"step", step},
              {"loss", loss},
              {"lr", lr},
              {"grad_norm", grad_norm},
              {"touched_values", touched_values},
              {"tokens", tokens},
              {"tie_points", tie_points}};
    if (eval_accuracy) j["eval_accuracy"] = *eval_accuracy;
    return j;
}

json EvalResult::to_json() const {
    json settings = json::array();
    for (std::size_t i = 0; i < labels.size(); ++i) {
        settings.push_back({{"setting", labels[i]}, {"accuracy", accuracy[i]}});
    }
    return {{"settings", settings}, {"aggregate", aggregate}};
}

double batch_gradients(const Model& model, std::span<const MqarInstance> batch, GradBuffer& grads,
                       const ForwardOptions& opts, MixerStats* stats) {
    const auto lanes = static_cast<std::ptrdiff_t>(batch.size());
    std::vector<GradBuffer> lane_grads(batch.size());
    std::vector<double> lane_loss(batch.size(), 0.0);
    std::vector<MixerStats> lane_stats(batch.size());
    std::vector<std::exception_ptr> errors(batch.size());

#pragma omp parallel for schedule(dynamic, 1) if (kernels::max_threads() > 1)
    for (std::ptrdiff_t li = 0; li < lanes; ++li) {
        const auto l = static_cast<std::size_t>(li);
        try {
            const auto& inst = batch[l];
            Tape tape;
            ForwardOptions lane_opts = opts;
            lane_opts.logit_rows = inst.query_positions;
            lane_opts.stats = &lane_stats[l];
            lane_opts.trace = nullptr;
            const Var logits = model.forward(tape, lane_grads[l], inst.tokens, lane_opts);
            const Var loss = lm_loss(tape, logits, inst.answers);
            lane_loss[l] = tape.value(loss)(0, 0);
            tape.backward(loss);
        } catch (...) {
            errors[l] = std::current_exception();
        }
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }

    grads = model.params().zeros_like();
    const double scale = 1.0 / static_cast<double>(batch.size());
    double loss = 0.0;
    for (std::size_t l = 0; l < batch.size(); ++l) {
        loss += lane_loss[l];
        for (std::size_t p = 0; p < grads.size(); ++p) {
            auto dst = grads[p].flat();
            const auto src = lane_grads[l][p].flat();
            for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
        }
        if (stats) {
            stats->touched_values += lane_stats[l].touched_values;
            stats->tokens += lane_stats[l].tokens;
            stats->tie_points += lane_stats[l].tie_points;
        }
    }
    for (auto& g : grads) {
        for (double& x : g.flat()) x *= scale;
    }
    return loss * scale;
}

TrainResult train_mqar(Model& model, const RunConfig& cfg, const MetricsSink& sink) {
    cfg.validate();
    const std::uint64_t seed = cfg.require_seed();
    kernels::set_threads(cfg.threads);
    AdamW opt(model.params(), cfg.optim);
    ForwardOptions fopts;
    fopts.engine = cfg.engine;

    TrainResult result;
    std::vector<MqarInstance> batch(static_cast<std::size_t>(cfg.batch));
    GradBuffer grads;
    for (int step = 0; step < cfg.steps; ++step) {
        for (std::size_t l = 0; l < batch.size(); ++l) {
            const auto& setting = cfg.task.train[l % cfg.task.train.size()];
            batch[l] = generate_mqar(setting, mix(seed, static_cast<std::uint64_t>(step), l));
        }
        StepMetrics m;
        m.step = step;
        m.lr = learning_rate(cfg.optim, step, cfg.steps);
        MixerStats stats;
        m.loss = batch_gradients(model, batch, grads, fopts, &stats);
        if (!std::isfinite(m.loss)) {
            throw NumericError("non-finite loss at step " + std::to_string(step));
        }
        for (std::size_t p = 0; p < grads.size(); ++p) {
            for (double x : grads[p].flat()) {
                if (!std::isfinite(x)) {
                    throw NumericError("non-finite gradient in parameter '" + model.params().name(p) +
                                       "' at step " + std::to_string(step));
                }
            }
        }
        m.grad_norm = clip_grad_norm(grads, cfg.optim.grad_clip);
        opt.step(model.params(), grads, m.lr);
        m.touched_values = stats.touched_values;
        m.tokens = stats.tokens;
        m.tie_points = stats.tie_points;

        const bool last = step + 1 == cfg.steps;
        bool stop = false;
        if (!last && cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && !cfg.task.eval.empty()) {
            const auto ev = eval_mqar(model, cfg.task.eval, cfg.task.eval_instances,
                                      mix(seed, kEvalStream, static_cast<std::uint64_t>(step)), cfg.engine);
            m.eval_accuracy = ev.aggregate;
            stop = cfg.target_accuracy > 0.0 && ev.aggregate >= cfg.target_accuracy;
        }
        result.history.push_back(m);
        if (sink) sink(m);
        result.steps_run = step + 1;
        if (stop) break;
    }
    if (!cfg.task.eval.empty()) {
        result.final_eval = eval_mqar(model, cfg.task.eval, cfg.task.eval_instances,
                                      mix(seed, kEvalStream, ~0ULL), cfg.engine);
    }
    return result;
}

EvalResult eval_mqar(const Model& model, std::span<const MqarConfig> settings, int instances,
                     std::uint64_t seed, Engine engine) {
    EvalResult out;
    for (std::size_t s = 0; s < settings.size(); ++s) {
        const auto& setting = settings[s];
        std::vector<std::size_t> hits(static_cast<std::size_t>(instances), 0);
        std::vector<std::size_t> totals(static_cast<std::size_t>(instances), 0);
        std::vector<std::exception_ptr> errors(static_cast<std::size_t>(instances));
#pragma omp parallel for schedule(dynamic, 1) if (kernels::max_threads() > 1)
        for (int i = 0; i < instances; ++i) {
            const auto idx = static_cast<std::size_t>(i);
            try {
                const auto inst = generate_mqar(setting, mix(seed, s, idx));
                Tape tape;
                GradBuffer scratch;
                ForwardOptions opts;
                opts.engine = engine;
                opts.logit_rows = inst.query_positions;
                const Var logits = model.forward(tape, scratch, inst.tokens, opts);
                const auto pred = argmax_rows(tape.value(logits));
                for (std::size_t q = 0; q < pred.size(); ++q) hits[idx] += pred[q] == inst.answers[q];
                totals[idx] = pred.size();
            } catch (...) {
                errors[idx] = std::current_exception();
            }
        }
        for (const auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
        std::size_t h = 0;
        std::size_t n = 0;
        for (std::size_t i = 0; i < hits.size(); ++i) {
            h += hits[i];
            n += totals[i];
        }
        out.labels.push_back(setting.label());
        out.accuracy.push_back(n == 0 ? 0.0 : static_cast<double>(h) / static_cast<double>(n));
    }
    out.aggregate = aggregate_accuracy(out.accuracy);
    return out;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, int step) {
    json params = json::object();
    const auto& store = model.params();
    for (std::size_t i = 0; i < store.size(); ++i) {
        const auto& v = store.value(i);
        params[store.name(i)] = {{"rows", v.rows()},
                                 {"cols", v.cols()},
                                 {"data", std::vector<double>(v.flat().begin(), v.flat().end())}};
    }
    const json j = {{"format", "ramnet-checkpoint"},
                    {"version", 1},
                    {"step", step},
                    {"model", to_json(model.config())},
                    {"params", params}};
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << j.dump() << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw IoError(path.string() + ": " + e.what());
    }
    try {
        if (j.at("format") != "ramnet-checkpoint" || j.at("version") != 1) {
            throw ConfigError(path.string() + ": not a version 1 checkpoint");
        }
        const auto cfg = model_config_from_json(j.at("model"));
        ParamStore store;
        for (const auto& [name, p] : j.at("params").items()) {
            Matrix m(p.at("rows").get<std::size_t>(), p.at("cols").get<std::size_t>());
            const auto data = p.at("data").get<std::vector<double>>();
            if (data.size() != m.size()) throw ConfigError("checkpoint: size mismatch for " + name);
            std::copy(data.begin(), data.end(), m.data());
            store.add(name, std::move(m));
        }
        return Model(cfg, std::move(store));
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

}  // namespace ramnet
