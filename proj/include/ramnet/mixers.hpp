#pragma once

// Sequence mixers recorded on a Tape. Inputs are T x (H * d) matrices with
// heads laid out as contiguous column blocks.

#include <cstdint>
#include <vector>

#include "ramnet/address_decoder.hpp"
#include "ramnet/autodiff.hpp"
#include "ramnet/cape.hpp"
#include "ramnet/pdma.hpp"
#include "ramnet/tape.hpp"

namespace ramnet {

enum class Engine : std::uint8_t {
    sequential,  // MemoryState + pdma_write/pdma_read, one step at a time
    segmented,   // slot-sorted segment kernel
};

struct RamNetHeads {
    int heads = 1;
    DecoderConfig decoder{2, 4, 2};
    int value_dim = 8;
    std::vector<AddressingMode> modes;  // one per head
    DecayRule decay{};
    double eps = MemoryState::kDefaultEps;
    ProxyGradSpec proxy{};
    Engine engine = Engine::segmented;
    Exec exec = Exec::serial;
};

/// Instrumentation filled by the RAM-Net mixer.
struct MixerStats {
    std::uint64_t touched_values = 0;  // slot-values read or written, (d_v + 1) per slot access
    std::uint64_t tokens = 0;          // sequence positions, counted by the model once per forward
    std::uint64_t tie_points = 0;      // decodes whose K-th weight ties the runner-up
};

struct TraceSink {
    std::vector<TraceEvent>* events = nullptr;
    int layer = 0;
};

Var ramnet_attention(Tape& tape, Var q, Var k, Var v, const RamNetHeads& spec,
                     const TraceSink* trace = nullptr, MixerStats* stats = nullptr);

/// Causal softmax attention, scores scaled by `scale`. With `rope` the keys and
/// queries are rotated by position before scoring.
Var full_attention(Tape& tape, Var q, Var k, Var v, int heads, double scale, bool rope,
                   double rope_base = 10000.0);

/// Gated linear attention S_t = g_t S_{t-1} + relu(k_t)^T v_t, o_t = relu(q_t) S_t,
/// g_t = sigmoid(gate_logits[t, h]).
Var linear_attention(Tape& tape, Var q, Var k, Var v, Var gate_logits, int heads);

/// Rotate consecutive pairs of each head block by position * base^(-2i/d).
/// `inverse` applies the transpose rotation.
void apply_rope(Matrix& x, int heads, double base, bool inverse);

}  // namespace ramnet
