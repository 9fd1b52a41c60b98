#pragma once

// Sparse address decoding: U-order product softmax followed by exact Top-K
// truncation. The production path never materializes the M-vector; it runs a
// log-domain beam search over the per-partition distributions.

#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "ramnet/common.hpp"

namespace ramnet {

class DecoderConfig {
public:
    /// Throws ConfigError when d_p^U overflows the slot index type, when
    /// K is outside [1, M] or when tau is not a positive finite number.
    DecoderConfig(int partitions, int sub_dim, int top_k, double tau = 1.0,
                  bool renormalize = false);

    int partitions() const noexcept { return partitions_; }
    int sub_dim() const noexcept { return sub_dim_; }
    int top_k() const noexcept { return top_k_; }
    double tau() const noexcept { return tau_; }
    bool renormalize() const noexcept { return renormalize_; }
    Slot capacity() const noexcept { return capacity_; }
    int key_dim() const noexcept { return partitions_ * sub_dim_; }

    DecoderConfig with_tau(double tau) const {
        return DecoderConfig(partitions_, sub_dim_, top_k_, tau, renormalize_);
    }

private:
    int partitions_;
    int sub_dim_;
    int top_k_;
    double tau_;
    bool renormalize_;
    Slot capacity_;
};

/// K-hot address over M slots. Indices strictly ascending; weights in (0, 1].
struct SparseAddress {
    std::vector<Slot> indices;
    std::vector<double> weights;
    Slot capacity = 0;

    std::size_t size() const noexcept { return indices.size(); }
    bool empty() const noexcept { return indices.empty(); }
    double mass() const noexcept;
    std::vector<double> dense() const;

    /// Throws NumericError naming the first violated invariant.
    void validate(std::size_t max_entries) const;
};

/// Partition of a length U*d_p vector into U contiguous blocks.
class SubVectorView {
public:
    SubVectorView(std::span<const double> vec, int partitions, int sub_dim);

    std::span<const double> block(int u) const noexcept {
        return vec_.subspan(static_cast<std::size_t>(u) * sub_dim_, sub_dim_);
    }
    int partitions() const noexcept { return partitions_; }
    int sub_dim() const noexcept { return sub_dim_; }

private:
    std::span<const double> vec_;
    int partitions_;
    int sub_dim_;
};

/// log softmax(sub / tau), max-subtracted. Throws NumericError on non-finite input.
std::vector<double> log_sub_softmax(std::span<const double> sub, double tau);

inline constexpr std::size_t kDefaultMaterializationCap = std::size_t{1} << 20;

/// Oracle path: the full M-vector of the product softmax. Partition u = 0 is the
/// most significant base-d_p digit of the flat index.
std::vector<double> dense_product_softmax(std::span<const double> key, const DecoderConfig& cfg,
                                          std::size_t cap = kDefaultMaterializationCap);

struct BeamStats {
    std::size_t candidate_ops = 0;
    std::size_t sort_comparisons = 0;
    std::size_t total() const noexcept { return candidate_ops + sort_comparisons; }
};

/// Activations kept for the backward pass through the decoder.
struct DecodeSaved {
    std::vector<double> sub_probs;  // U x d_p, row-major by partition
    // Raw (un-renormalized) weight of the best slot outside the Top-K; 0 when K == M.
    double runner_up = 0.0;
    double raw_mass = 0.0;  // sum of the kept raw weights
};

/// Exact Top-K of the product softmax, ties broken by smaller flat index.
SparseAddress beam_search_topk(std::span<const double> key, const DecoderConfig& cfg,
                               BeamStats* stats = nullptr, DecodeSaved* saved = nullptr);

/// Full address decoding. Weights are the raw truncated softmax values unless
/// the config asks for renormalization.
SparseAddress decode_address(std::span<const double> key, const DecoderConfig& cfg,
                             DecodeSaved* saved = nullptr);

/// Base-d_p digit of `flat` for partition u (u = 0 most significant).
int slot_digit(Slot flat, int u, const DecoderConfig& cfg) noexcept;

}  // namespace ramnet
