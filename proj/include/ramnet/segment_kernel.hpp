#pragma once

// Training-mode execution of the PDMA recurrence. Decay is diagonal, so every
// slot evolves independently: events are grouped by slot into time-ordered
// segments and each segment is scanned on its own. Segments run in parallel;
// read contributions are reduced per step in ascending slot order so the result
// is bit-identical to the sequential engine for any thread count.

#include <cstdint>
#include <span>
#include <vector>

#include "ramnet/common.hpp"
#include "ramnet/pdma.hpp"

namespace ramnet {

struct AccessEvent {
    Slot slot = 0;
    std::int64_t t = 0;
    AccessKind kind = AccessKind::write;
    double weight = 0.0;
    std::uint32_t entry = 0;  // caller-defined id, carried through untouched
};

struct SlotEvent {
    std::int64_t t = 0;
    AccessKind kind = AccessKind::write;
    double weight = 0.0;
    std::uint32_t entry = 0;
};

struct SlotSegment {
    Slot slot = 0;
    std::vector<SlotEvent> events;
};

enum class Exec : std::uint8_t { serial, parallel };

/// Stable sort by (slot, t). Event count is preserved.
std::vector<SlotSegment> build_segments(std::span<const AccessEvent> stream);

struct SegmentRunConfig {
    DecayRule decay{};
    double eps = MemoryState::kDefaultEps;
    double initial_z = 1.0;
};

/// Write events at step t add row t of `values`; read events accumulate into
/// row t of the returned steps x d_v matrix. Throws NumericError if a segment
/// is not ordered by (t, write-before-read).
Matrix run_segments(std::span<const SlotSegment> segments, const Matrix& values, std::size_t steps,
                    const SegmentRunConfig& cfg, Exec exec = Exec::parallel);

/// Total number of events across segments.
std::size_t event_count(std::span<const SlotSegment> segments) noexcept;

}  // namespace ramnet
