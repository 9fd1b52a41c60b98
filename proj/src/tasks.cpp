#include "ramnet/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

namespace ramnet {

MqarConfig MqarConfig::with_vocab(int pairs, int seq_len, int vocab) {
    MqarConfig cfg;
    cfg.pairs = pairs;
    cfg.seq_len = seq_len;
    cfg.key_lo = 1;
    cfg.key_hi = 1 + (vocab - 1) / 2;
    cfg.value_lo = cfg.key_hi;
    cfg.value_hi = vocab;
    return cfg;
}

void MqarConfig::validate() const {
    if (pairs < 1) throw ConfigError("mqar: pairs must be positive");
    if (2 * pairs >= seq_len) throw ConfigError("mqar: need 2 * pairs < seq_len");
    if (key_lo < 1 || value_lo < 1) throw ConfigError("mqar: token 0 is reserved as filler");
    if (key_hi - key_lo < pairs) throw ConfigError("mqar: key range smaller than the pair count");
    if (value_hi - value_lo < pairs) throw ConfigError("mqar: value range smaller than the pair count");
    if (key_lo < value_hi && value_lo < key_hi) throw ConfigError("mqar: key and value ranges overlap");
}

std::string MqarConfig::label() const {
    return "(" + std::to_string(pairs) + ", " + std::to_string(seq_len) + ")";
}

std::vector<MqarConfig> standard_mqar_settings(int vocab) {
    const std::pair<int, int> shapes[] = {{4, 64},    {8, 64},    {16, 64},  {32, 128},
                                          {64, 256},  {128, 512}, {256, 1024}};
    std::vector<MqarConfig> out;
    for (const auto& [n, l] : shapes) out.push_back(MqarConfig::with_vocab(n, l, vocab));
    return out;
}

namespace {

std::vector<int> sample_distinct(int lo, int hi, int n, std::mt19937_64& rng) {
    std::vector<int> pool(static_cast<std::size_t>(hi - lo));
    std::iota(pool.begin(), pool.end(), lo);
    // Partial Fisher-Yates with an explicit uniform draw, so the sequence does
    // not depend on the standard library's shuffle.
    for (int i = 0; i < n; ++i) {
        std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i), pool.size() - 1);
        std::swap(pool[static_cast<std::size_t>(i)], pool[pick(rng)]);
    }
    pool.resize(static_cast<std::size_t>(n));
    return pool;
}

}  // namespace

MqarInstance generate_mqar(const MqarConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    const auto keys = sample_distinct(cfg.key_lo, cfg.key_hi, cfg.pairs, rng);
    const auto values = sample_distinct(cfg.value_lo, cfg.value_hi, cfg.pairs, rng);

    MqarInstance inst;
    inst.tokens.assign(static_cast<std::size_t>(cfg.seq_len), 0);
    for (int i = 0; i < cfg.pairs; ++i) {
        inst.tokens[static_cast<std::size_t>(2 * i)] = keys[static_cast<std::size_t>(i)];
        inst.tokens[static_cast<std::size_t>(2 * i + 1)] = values[static_cast<std::size_t>(i)];
    }

    const int room = (cfg.seq_len - 2 * cfg.pairs) / 2;
    const int queries = std::min(cfg.pairs, room);
    auto offsets = sample_distinct(0, room, queries, rng);
    std::sort(offsets.begin(), offsets.end());
    const auto order = sample_distinct(0, cfg.pairs, queries, rng);
    for (int j = 0; j < queries; ++j) {
        const auto pos = static_cast<std::size_t>(2 * cfg.pairs + 2 * offsets[static_cast<std::size_t>(j)]);
        const auto pair = static_cast<std::size_t>(order[static_cast<std::size_t>(j)]);
        inst.tokens[pos] = keys[pair];
        inst.query_positions.push_back(pos);
        inst.answers.push_back(values[pair]);
    }
    return inst;
}

std::vector<int> argmax_rows(const Matrix& logits) {
    std::vector<int> out(logits.rows());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        const auto row = logits.row(r);
        out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
}

double mqar_accuracy(std::span<const int> predictions, const MqarInstance& inst) {
    if (predictions.size() != inst.answers.size()) {
        throw ConfigError("mqar_accuracy: one prediction per query expected");
    }
    if (inst.answers.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) hits += predictions[i] == inst.answers[i];
    return static_cast<double>(hits) / static_cast<double>(inst.answers.size());
}

double mqar_accuracy(const Matrix& logits, const MqarInstance& inst) {
    const auto all = argmax_rows(logits);
    if (logits.rows() == inst.answers.size()) return mqar_accuracy(all, inst);
    if (logits.rows() != inst.tokens.size()) {
        throw ConfigError("mqar_accuracy: logits must have one row per query or per position");
    }
    std::vector<int> picked;
    for (auto p : inst.query_positions) picked.push_back(all[p]);
    return mqar_accuracy(picked, inst);
}

double aggregate_accuracy(std::span<const double> per_setting) {
    if (per_setting.empty()) return 0.0;
    return std::accumulate(per_setting.begin(), per_setting.end(), 0.0) /
           static_cast<double>(per_setting.size());
}

void write_instances(const std::filesystem::path& path, std::span<const MqarInstance> instances) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    for (const auto& inst : instances) {
        nlohmann::json j;
        j["tokens"] = inst.tokens;
        j["query_positions"] = inst.query_positions;
        j["answers"] = inst.answers;
        out << j.dump() << '\n';
    }
    if (!out) throw IoError("write failed: " + path.string());
}

std::vector<MqarInstance> read_instances(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<MqarInstance> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            MqarInstance inst;
            j.at("tokens").get_to(inst.tokens);
            j.at("query_positions").get_to(inst.query_positions);
            j.at("answers").get_to(inst.answers);
            if (inst.query_positions.size() != inst.answers.size()) {
                throw ConfigError("query_positions and answers differ in length");
            }
            for (auto p : inst.query_positions) {
                if (p >= inst.tokens.size()) throw ConfigError("query position out of range");
            }
            out.push_back(std::move(inst));
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

Matrix full_attention_forward(const Matrix& q, const Matrix& k, const Matrix& v, double scale) {
    const std::size_t T = q.rows();
    Matrix out(T, v.cols());
    std::vector<double> scores;
    for (std::size_t t = 0; t < T; ++t) {
        scores.assign(t + 1, 0.0);
        for (std::size_t s = 0; s <= t; ++s) {
            double acc = 0.0;
            for (std::size_t j = 0; j < q.cols(); ++j) acc += q(t, j) * k(s, j);
            scores[s] = scale * acc;
        }
        const double mx = *std::max_element(scores.begin(), scores.end());
        double total = 0.0;
        for (double& x : scores) total += (x = std::exp(x - mx));
        for (std::size_t s = 0; s <= t; ++s) {
            for (std::size_t j = 0; j < v.cols(); ++j) out(t, j) += scores[s] / total * v(s, j);
        }
    }
    return out;
}

Matrix linear_attention_forward(const Matrix& q, const Matrix& k, const Matrix& v,
                                std::span<const double> gates) {
    const std::size_t T = q.rows();
    if (gates.size() != T) throw ConfigError("linear_attention_forward: one gate per step expected");
    const auto relu = [](double x) { return x > 0.0 ? x : 0.0; };
    Matrix state(k.cols(), v.cols());
    Matrix out(T, v.cols());
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t a = 0; a < k.cols(); ++a) {
            for (std::size_t b = 0; b < v.cols(); ++b) {
                state(a, b) = gates[t] * state(a, b) + relu(k(t, a)) * v(t, b);
            }
        }
        for (std::size_t a = 0; a < q.cols(); ++a) {
            for (std::size_t b = 0; b < v.cols(); ++b) out(t, b) += relu(q(t, a)) * state(a, b);
        }
    }
    return out;
}

std::vector<double> dense_topk_mask(std::span<const double> dense, int k) {
    std::vector<std::size_t> order(dense.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dense[a] > dense[b]; });
    std::vector<double> out(dense.size(), 0.0);
    for (std::size_t i = 0; i < std::min<std::size_t>(static_cast<std::size_t>(k), order.size()); ++i) {
        out[order[i]] = dense[order[i]];
    }
    return out;
}

Matrix dense_ramnet_reference(const Matrix& q, const Matrix& k, const Matrix& v,
                              const DecoderConfig& cfg, const DenseRamNetOptions& opts) {
    const std::size_t M = cfg.capacity();
    if (M > opts.cap) throw ConfigError("dense_ramnet_reference: capacity above the materialization cap");
    const std::size_t T = q.rows();
    const std::size_t dv = v.cols();

    const auto address = [&](std::span<const double> x, std::size_t t) {
        auto a = dense_topk_mask(dense_product_softmax(x, cfg, opts.cap), cfg.top_k());
        if (cfg.renormalize()) {
            const double mass = std::accumulate(a.begin(), a.end(), 0.0);
            for (double& w : a) w /= mass;
        }
        if (opts.mode == AddressingMode::absolute) return a;
        // [P_t(a)]_i = a_{(i + t) mod M}
        std::vector<double> shifted(M);
        for (std::size_t i = 0; i < M; ++i) shifted[i] = a[(i + t) % M];
        return shifted;
    };

    Matrix S(M, dv);
    std::vector<double> z(M, 1.0 / static_cast<double>(M));
    Matrix out(T, dv);
    for (std::size_t t = 0; t < T; ++t) {
        const auto w = address(k.row(t), t);
        const auto r = address(q.row(t), t);
        for (std::size_t m = 0; m < M; ++m) {
            const double a = opts.decay(w[m]);
            for (std::size_t j = 0; j < dv; ++j) S(m, j) = a * S(m, j) + w[m] * v(t, j);
            z[m] = a * z[m] + w[m];
        }
        for (std::size_t m = 0; m < M; ++m) {
            for (std::size_t j = 0; j < dv; ++j) out(t, j) += r[m] * S(m, j) / (z[m] + opts.eps);
        }
    }
    return out;
}

const char* to_string(BaselineKind kind) noexcept {
    switch (kind) {
        case BaselineKind::full_attention: return "full_attention";
        case BaselineKind::linear_attention: return "linear_attention";
        case BaselineKind::ramnet: return "ramnet";
    }
    return "unknown";
}

std::uint64_t state_size(const BaselineSpec& spec, std::uint64_t seq_len) {
    std::uint64_t per_head = 0;
    switch (spec.kind) {
        case BaselineKind::full_attention: per_head = seq_len * (spec.key_dim + spec.value_dim); break;
        case BaselineKind::linear_attention: per_head = spec.key_dim * spec.value_dim; break;
        case BaselineKind::ramnet: per_head = spec.capacity * (spec.value_dim + 1); break;
    }
    return per_head * spec.heads * spec.layers;
}

std::uint64_t active_state_per_token(std::uint64_t top_k, std::uint64_t value_dim,
                                     std::uint64_t heads, std::uint64_t layers) {
    return 2 * top_k * (value_dim + 1) * heads * layers;
}

}  // namespace ramnet
