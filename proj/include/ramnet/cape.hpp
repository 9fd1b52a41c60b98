#pragma once

// Cyclic address positional embedding. The shift at step t is defined by
// [P_t(a)]_i = a_{(i + t) mod M}, so mass stored at index j moves to
// (j - t) mod M.

#include <cstdint>
#include <vector>

#include "ramnet/address_decoder.hpp"

namespace ramnet {

enum class AddressingMode : std::uint8_t { relative, absolute };

struct ShiftSpec {
    std::int64_t step = 0;
    Slot capacity = 1;

    /// t mod M, always in [0, M).
    Slot effective() const noexcept;
};

SparseAddress cyclic_shift(const SparseAddress& addr, std::int64_t t);

/// As cyclic_shift, also reporting for each output entry the position of the
/// input entry it came from. The shift of a sorted index set is a rotation, so
/// this is O(K).
SparseAddress cyclic_shift(const SparseAddress& addr, std::int64_t t,
                           std::vector<std::size_t>& source_pos);

SparseAddress apply_positional(const SparseAddress& addr, std::int64_t t, AddressingMode mode);

const char* to_string(AddressingMode mode) noexcept;
AddressingMode parse_addressing_mode(const std::string& s);

}  // namespace ramnet
