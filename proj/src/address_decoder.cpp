#include "ramnet/address_decoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace ramnet {

DecoderConfig::DecoderConfig(int partitions, int sub_dim, int top_k, double tau, bool renormalize)
    : partitions_(partitions),
      sub_dim_(sub_dim),
      top_k_(top_k),
      tau_(tau),
      renormalize_(renormalize),
      capacity_(0) {
    if (partitions < 1 || sub_dim < 1) {
        throw ConfigError("decoder: partitions and sub_dim must be positive");
    }
    if (!(tau > 0.0) || !std::isfinite(tau)) {
        throw ConfigError("decoder: tau must be positive and finite");
    }
    std::uint64_t m = 1;
    for (int u = 0; u < partitions; ++u) {
        m *= static_cast<std::uint64_t>(sub_dim);
        if (m > std::numeric_limits<Slot>::max()) {
            throw ConfigError("decoder: capacity d_p^U overflows the slot index type");
        }
    }
    capacity_ = static_cast<Slot>(m);
    if (top_k < 1 || static_cast<std::uint64_t>(top_k) > m) {
        throw ConfigError("decoder: top_k must lie in [1, M], got " + std::to_string(top_k) +
                          " with M = " + std::to_string(m));
    }
}

double SparseAddress::mass() const noexcept {
    double s = 0.0;
    for (double w : weights) s += w;
    return s;
}

std::vector<double> SparseAddress::dense() const {
    std::vector<double> out(capacity, 0.0);
    for (std::size_t i = 0; i < indices.size(); ++i) out[indices[i]] = weights[i];
    return out;
}

void SparseAddress::validate(std::size_t max_entries) const {
    if (indices.size() != weights.size()) {
        throw NumericError("address: indices/weights length mismatch");
    }
    if (indices.size() > max_entries) {
        throw NumericError("address: more than K active entries");
    }
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= capacity) throw NumericError("address: index out of range");
        if (i > 0 && indices[i] <= indices[i - 1]) {
            throw NumericError("address: indices not strictly ascending");
        }
        if (!(weights[i] > 0.0) || weights[i] > 1.0) {
            throw NumericError("address: weight outside (0, 1] at entry " + std::to_string(i));
        }
    }
    if (mass() > 1.0 + 1e-12) throw NumericError("address: total mass exceeds 1");
}

SubVectorView::SubVectorView(std::span<const double> vec, int partitions, int sub_dim)
    : vec_(vec), partitions_(partitions), sub_dim_(sub_dim) {
    if (partitions < 1 || sub_dim < 1 ||
        vec.size() != static_cast<std::size_t>(partitions) * static_cast<std::size_t>(sub_dim)) {
        throw ConfigError("sub-vector view: length " + std::to_string(vec.size()) +
                          " is not U * d_p = " + std::to_string(partitions) + " * " +
                          std::to_string(sub_dim));
    }
}

std::vector<double> log_sub_softmax(std::span<const double> sub, double tau) {
    if (!(tau > 0.0)) throw ConfigError("log_sub_softmax: tau must be positive");
    double mx = -std::numeric_limits<double>::infinity();
    for (double x : sub) {
        if (!std::isfinite(x)) {
            throw NumericError("log_sub_softmax: non-finite input (corrupted upstream activation)");
        }
        mx = std::max(mx, x);
    }
    std::vector<double> out(sub.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < sub.size(); ++i) {
        out[i] = (sub[i] - mx) / tau;
        sum += std::exp(out[i]);
    }
    const double log_sum = std::log(sum);
    for (double& v : out) v -= log_sum;
    return out;
}

std::vector<double> dense_product_softmax(std::span<const double> key, const DecoderConfig& cfg,
                                          std::size_t cap) {
    const SubVectorView view(key, cfg.partitions(), cfg.sub_dim());
    if (cfg.capacity() > cap) {
        throw ConfigError("dense_product_softmax: M = " + std::to_string(cfg.capacity()) +
                          " exceeds the materialization cap " + std::to_string(cap));
    }
    std::vector<double> out{1.0};
    for (int u = 0; u < cfg.partitions(); ++u) {
        const auto block = view.block(u);
        double mx = -std::numeric_limits<double>::infinity();
        for (double x : block) {
            if (!std::isfinite(x)) throw NumericError("dense_product_softmax: non-finite input");
            mx = std::max(mx, x);
        }
        std::vector<double> p(block.size());
        double sum = 0.0;
        for (std::size_t j = 0; j < block.size(); ++j) {
            p[j] = std::exp((block[j] - mx) / cfg.tau());
            sum += p[j];
        }
        for (double& v : p) v /= sum;
        // Kronecker product: earlier partitions are the more significant digits.
        std::vector<double> next(out.size() * p.size());
        for (std::size_t i = 0; i < out.size(); ++i) {
            for (std::size_t j = 0; j < p.size(); ++j) next[i * p.size() + j] = out[i] * p[j];
        }
        out = std::move(next);
    }
    return out;
}

int slot_digit(Slot flat, int u, const DecoderConfig& cfg) noexcept {
    Slot div = 1;
    for (int i = u + 1; i < cfg.partitions(); ++i) div *= static_cast<Slot>(cfg.sub_dim());
    return static_cast<int>((flat / div) % static_cast<Slot>(cfg.sub_dim()));
}

namespace {

struct Candidate {
    double log_weight;
    Slot index;
};

}  // namespace

SparseAddress beam_search_topk(std::span<const double> key, const DecoderConfig& cfg,
                               BeamStats* stats, DecodeSaved* saved) {
    const SubVectorView view(key, cfg.partitions(), cfg.sub_dim());
    const std::size_t k = static_cast<std::size_t>(cfg.top_k());
    // One extra beam entry exposes the runner-up for tie detection in backward.
    const std::size_t width = (saved != nullptr && k < cfg.capacity()) ? k + 1 : k;
    const auto d_p = static_cast<std::size_t>(cfg.sub_dim());

    std::size_t comparisons = 0;
    std::size_t candidate_ops = 0;
    const auto better = [&comparisons](const Candidate& a, const Candidate& b) {
        ++comparisons;
        return a.log_weight > b.log_weight || (a.log_weight == b.log_weight && a.index < b.index);
    };

    if (saved != nullptr) {
        saved->sub_probs.clear();
        saved->sub_probs.reserve(static_cast<std::size_t>(cfg.partitions()) * d_p);
    }

    std::vector<Candidate> beam{{0.0, 0}};
    std::vector<Candidate> digits(d_p);
    std::vector<Candidate> merged;
    for (int u = 0; u < cfg.partitions(); ++u) {
        const auto logp = log_sub_softmax(view.block(u), cfg.tau());
        for (std::size_t j = 0; j < d_p; ++j) {
            digits[j] = {logp[j], static_cast<Slot>(j)};
            if (saved != nullptr) saved->sub_probs.push_back(std::exp(logp[j]));
        }
        std::sort(digits.begin(), digits.end(), better);
        const std::size_t keep = std::min(width, d_p);

        merged.clear();
        merged.reserve(beam.size() * keep);
        for (const auto& b : beam) {
            for (std::size_t j = 0; j < keep; ++j) {
                merged.push_back({b.log_weight + digits[j].log_weight,
                                  b.index * static_cast<Slot>(d_p) + digits[j].index});
                ++candidate_ops;
            }
        }
        if (merged.size() > width) {
            std::nth_element(merged.begin(), merged.begin() + static_cast<std::ptrdiff_t>(width - 1),
                             merged.end(), better);
            merged.resize(width);
        }
        std::sort(merged.begin(), merged.end(), better);
        beam.swap(merged);
    }

    SparseAddress out;
    out.capacity = cfg.capacity();
    const std::size_t emit = std::min(k, beam.size());
    std::vector<Candidate> kept(beam.begin(), beam.begin() + static_cast<std::ptrdiff_t>(emit));
    std::sort(kept.begin(), kept.end(),
              [](const Candidate& a, const Candidate& b) { return a.index < b.index; });
    out.indices.reserve(emit);
    out.weights.reserve(emit);
    for (const auto& c : kept) {
        out.indices.push_back(c.index);
        out.weights.push_back(std::exp(c.log_weight));
    }
    if (saved != nullptr) {
        saved->runner_up = beam.size() > k ? std::exp(beam[k].log_weight) : 0.0;
        saved->raw_mass = out.mass();
    }
    if (stats != nullptr) {
        stats->candidate_ops += candidate_ops;
        stats->sort_comparisons += comparisons;
    }
    return out;
}

SparseAddress decode_address(std::span<const double> key, const DecoderConfig& cfg,
                             DecodeSaved* saved) {
    DecodeSaved local;
    DecodeSaved* sink = saved;
    if (sink == nullptr && cfg.renormalize()) sink = &local;
    auto addr = beam_search_topk(key, cfg, nullptr, sink);
    if (cfg.renormalize()) {
        const double mass = sink->raw_mass;
        for (double& w : addr.weights) w /= mass;
    }
    return addr;
}

}  // namespace ramnet
