#include "ramnet/cape.hpp"

#include <algorithm>

namespace ramnet {

Slot ShiftSpec::effective() const noexcept {
    const auto m = static_cast<std::int64_t>(capacity);
    auto r = step % m;
    if (r < 0) r += m;
    return static_cast<Slot>(r);
}

SparseAddress cyclic_shift(const SparseAddress& addr, std::int64_t t,
                           std::vector<std::size_t>& source_pos) {
    const Slot s = ShiftSpec{t, addr.capacity}.effective();
    const std::size_t n = addr.size();
    // Entries with index >= s keep their relative order and come first.
    const auto split = static_cast<std::size_t>(
        std::lower_bound(addr.indices.begin(), addr.indices.end(), s) - addr.indices.begin());

    SparseAddress out;
    out.capacity = addr.capacity;
    out.indices.resize(n);
    out.weights.resize(n);
    source_pos.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t src = (split + i) % n;
        const Slot j = addr.indices[src];
        out.indices[i] = j >= s ? j - s : j + (addr.capacity - s);
        out.weights[i] = addr.weights[src];
        source_pos[i] = src;
    }
    return out;
}

SparseAddress cyclic_shift(const SparseAddress& addr, std::int64_t t) {
    std::vector<std::size_t> unused;
    return cyclic_shift(addr, t, unused);
}

SparseAddress apply_positional(const SparseAddress& addr, std::int64_t t, AddressingMode mode) {
    return mode == AddressingMode::relative ? cyclic_shift(addr, t) : addr;
}

const char* to_string(AddressingMode mode) noexcept {
    return mode == AddressingMode::relative ? "relative" : "absolute";
}

AddressingMode parse_addressing_mode(const std::string& s) {
    if (s == "relative") return AddressingMode::relative;
    if (s == "absolute") return AddressingMode::absolute;
    throw ConfigError("unknown addressing mode '" + s + "'");
}

}  // namespace ramnet
