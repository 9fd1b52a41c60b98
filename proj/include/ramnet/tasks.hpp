#pragma once

// Multi-query associative recall (MQAR) instances and scoring, plus small
// plain-matrix reference implementations of the sequence mixers.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ramnet/address_decoder.hpp"
#include "ramnet/cape.hpp"
#include "ramnet/common.hpp"
#include "ramnet/pdma.hpp"

namespace ramnet {

/// Token 0 is the filler token. Keys are drawn from [key_lo, key_hi) and
/// values from [value_lo, value_hi); the two ranges must not overlap.
struct MqarConfig {
    int pairs = 4;
    int seq_len = 64;
    int key_lo = 1;
    int key_hi = 128;
    int value_lo = 128;
    int value_hi = 256;

    /// Splits [1, vocab) into a key half and a value half.
    static MqarConfig with_vocab(int pairs, int seq_len, int vocab);
    int vocab() const noexcept { return std::max(key_hi, value_hi); }
    void validate() const;
    std::string label() const;  // "(pairs, seq_len)"
};

/// The seven standard (pairs, length) settings.
std::vector<MqarConfig> standard_mqar_settings(int vocab);

struct MqarInstance {
    std::vector<int> tokens;
    std::vector<std::size_t> query_positions;  // ascending
    std::vector<int> answers;                  // answers[i] is predicted at query_positions[i]
};

/// Pairs occupy positions [0, 2N) as adjacent (key, value) tokens. Queries
/// take distinct random even offsets in the remainder; each query key is
/// followed by a filler token. Every key is queried once while room allows.
MqarInstance generate_mqar(const MqarConfig& cfg, std::uint64_t seed);

/// Argmax of each row (ties to the smaller column).
std::vector<int> argmax_rows(const Matrix& logits);

/// Fraction of queries answered correctly. `logits` has either one row per
/// query (in query order) or one row per sequence position.
double mqar_accuracy(const Matrix& logits, const MqarInstance& inst);
double mqar_accuracy(std::span<const int> predictions, const MqarInstance& inst);

/// Uniform mean over settings.
double aggregate_accuracy(std::span<const double> per_setting);

/// One JSON object per line: {"tokens": [...], "query_positions": [...], "answers": [...]}.
void write_instances(const std::filesystem::path& path, std::span<const MqarInstance> instances);
std::vector<MqarInstance> read_instances(const std::filesystem::path& path);

// Reference mixers over T x d matrices (one head, one sequence).

/// Causal softmax attention: o_t = softmax(scale * q_t K_t^T) V_t.
Matrix full_attention_forward(const Matrix& q, const Matrix& k, const Matrix& v, double scale = 1.0);

/// S_t = g_t S_{t-1} + relu(k_t)^T v_t, o_t = relu(q_t) S_t.
Matrix linear_attention_forward(const Matrix& q, const Matrix& k, const Matrix& v,
                                std::span<const double> gates);

struct DenseRamNetOptions {
    DecayRule decay{};
    double eps = MemoryState::kDefaultEps;
    AddressingMode mode = AddressingMode::absolute;
    std::size_t cap = 4096;  // refuses larger M
};

/// Dense RAM-Net recurrence over full M-vectors: product softmax, Top-K mask
/// by full sort, cyclic shift by its defining index equation, then
/// S_t = Diag(1 - w_t)^gamma S_{t-1} + w_t^T v_t and the normalized read.
Matrix dense_ramnet_reference(const Matrix& q, const Matrix& k, const Matrix& v,
                              const DecoderConfig& cfg, const DenseRamNetOptions& opts = {});

/// Dense Top-K mask with ties to the smaller index; entries outside are zeroed.
std::vector<double> dense_topk_mask(std::span<const double> dense, int k);

enum class BaselineKind : std::uint8_t { full_attention, linear_attention, ramnet };

const char* to_string(BaselineKind kind) noexcept;

struct BaselineSpec {
    BaselineKind kind = BaselineKind::ramnet;
    std::uint64_t key_dim = 0;
    std::uint64_t value_dim = 0;
    std::uint64_t capacity = 0;  // M, RAM-Net only
    std::uint64_t heads = 1;
    std::uint64_t layers = 1;
};

/// Recurrent state in scalars: T (d_k + d_v) for full attention at length T,
/// d_k d_v for linear attention and M (d_v + 1) for RAM-Net, per head per layer.
std::uint64_t state_size(const BaselineSpec& spec, std::uint64_t seq_len = 0);

/// Slot-values touched per token when every address is full K-hot.
std::uint64_t active_state_per_token(std::uint64_t top_k, std::uint64_t value_dim,
                                     std::uint64_t heads, std::uint64_t layers);

}  // namespace ramnet
