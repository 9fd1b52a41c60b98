#pragma once

// Desk-scale RAM-Net language model: embeddings, pre-norm residual blocks
// (sequence mixer + optional 2-layer MLP), final norm and output head.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ramnet/mixers.hpp"
#include "ramnet/tape.hpp"

namespace ramnet {

enum class MixerKind : std::uint8_t { ramnet, full_attention, linear_attention };

const char* to_string(MixerKind kind) noexcept;
MixerKind parse_mixer_kind(const std::string& s);

/// Per-layer view of the model configuration.
struct LayerConfig {
    int d_model = 0;
    int heads = 0;
    int key_dim = 0;
    int value_dim = 0;
    DecoderConfig decoder{1, 2, 1};
    double gamma = 1.0;
    std::vector<AddressingMode> modes;
};

struct ModelConfig {
    MixerKind kind = MixerKind::ramnet;
    int vocab = 0;
    int layers = 2;
    int d_model = 128;
    int heads = 2;
    // RAM-Net decoder; the key dimension is partitions * sub_dim.
    int partitions = 4;
    int sub_dim = 4;
    int top_k = 8;
    double tau = 1.0;
    bool renormalize = false;
    // Key dimension for the attention baselines.
    int key_dim = 16;
    int value_dim = 32;
    double gamma = 1.0;
    double eps = MemoryState::kDefaultEps;
    double eps_proxy = 0.01;
    int mlp_hidden = 256;  // 0 disables the MLP sub-block
    bool tie_embeddings = false;
    bool rope = true;      // full attention baseline only
    // cape[layer][head]; empty means layer 0 relative, the rest absolute.
    std::vector<std::vector<AddressingMode>> cape;

    void validate() const;
    DecoderConfig decoder() const;
    int head_key_dim() const;
    LayerConfig layer(int l) const;
    AddressingMode mode(int layer, int head) const;
};

/// Layer 0 relative on every head, every deeper layer absolute.
std::vector<std::vector<AddressingMode>> desk_cape_schedule(int layers, int heads);
/// All heads relative in the first four layers, half of the heads in the next
/// four, absolute elsewhere.
std::vector<std::vector<AddressingMode>> staged_cape_schedule(int layers, int heads);

class ParamStore {
public:
    std::size_t add(std::string name, Matrix init);
    std::size_t size() const noexcept { return values_.size(); }
    Matrix& value(std::size_t i) { return values_.at(i); }
    const Matrix& value(std::size_t i) const { return values_.at(i); }
    const std::string& name(std::size_t i) const { return names_.at(i); }
    std::size_t index(const std::string& name) const;  // throws ConfigError when absent
    bool contains(const std::string& name) const noexcept;
    std::size_t scalar_count() const noexcept;
    std::vector<Matrix> zeros_like() const;

private:
    std::vector<std::string> names_;
    std::vector<Matrix> values_;
};

using GradBuffer = std::vector<Matrix>;

/// W = exp(alpha[h]) * W' with one learnable alpha per head.
struct ReparamWeight {
    const Matrix* base = nullptr;
    const Matrix* alpha = nullptr;  // 1 x heads
    std::size_t head_cols = 0;

    Matrix effective() const;
};

struct ForwardOptions {
    std::span<const std::size_t> logit_rows{};  // empty: logits for every position
    std::vector<TraceEvent>* trace = nullptr;
    MixerStats* stats = nullptr;
    Engine engine = Engine::segmented;
    Exec exec = Exec::serial;
    bool surrogate_decay = false;  // forward with the smoothed decay (gradient checking)
};

struct Projections {
    Var q, k, v;
};

class Model {
public:
    Model(ModelConfig cfg, std::uint64_t seed);
    Model(ModelConfig cfg, ParamStore params);

    const ModelConfig& config() const noexcept { return cfg_; }
    ParamStore& params() noexcept { return params_; }
    const ParamStore& params() const noexcept { return params_; }

    /// Binds every parameter to the tape with its gradient sink.
    std::vector<Var> bind(Tape& tape, GradBuffer& grads) const;

    Projections project_qkv(Tape& tape, const std::vector<Var>& bound, Var normed, int layer) const;
    Var layer_forward(Tape& tape, const std::vector<Var>& bound, Var x, int layer,
                      const ForwardOptions& opts) const;
    Var embed(Tape& tape, const std::vector<Var>& bound, std::span<const int> tokens) const;
    Var head(Tape& tape, const std::vector<Var>& bound, Var x, const ForwardOptions& opts) const;

    /// Logits for the requested rows (all rows by default).
    Var forward(Tape& tape, GradBuffer& grads, std::span<const int> tokens,
                const ForwardOptions& opts = {}) const;

    /// Trainable scalars; embeddings (and a tied head) excluded when asked.
    std::size_t parameter_count(bool include_embeddings = true) const;
    /// Scalars belonging to the sequence-mixer sub-blocks.
    std::size_t mixer_parameter_count() const;

private:
    void init(std::uint64_t seed);
    std::size_t param(const std::string& name) const { return params_.index(name); }
    RamNetHeads ramnet_heads(int layer, const ForwardOptions& opts) const;

    ModelConfig cfg_;
    ParamStore params_;
};

Var lm_loss(Tape& tape, Var logits, std::span<const int> targets);

}  // namespace ramnet
