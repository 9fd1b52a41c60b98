#include "ramnet/segment_kernel.hpp"

#include <algorithm>
#include <numeric>
#include <string>
#include <tuple>

#include "ramnet/detail/slot_update.hpp"

namespace ramnet {

std::vector<SlotSegment> build_segments(std::span<const AccessEvent> stream) {
    std::vector<std::size_t> order(stream.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return std::tie(stream[a].slot, stream[a].t) < std::tie(stream[b].slot, stream[b].t);
    });

    std::vector<SlotSegment> segments;
    for (std::size_t idx : order) {
        const auto& e = stream[idx];
        if (segments.empty() || segments.back().slot != e.slot) segments.push_back({e.slot, {}});
        segments.back().events.push_back({e.t, e.kind, e.weight, e.entry});
    }
    return segments;
}

std::size_t event_count(std::span<const SlotSegment> segments) noexcept {
    std::size_t n = 0;
    for (const auto& s : segments) n += s.events.size();
    return n;
}

namespace {

struct ReadRef {
    std::int64_t t;
    Slot slot;
    std::size_t id;
};

void check_order(const SlotSegment& seg, std::size_t steps) {
    for (std::size_t i = 0; i < seg.events.size(); ++i) {
        const auto& e = seg.events[i];
        if (e.t < 0 || static_cast<std::size_t>(e.t) >= steps) {
            throw NumericError("run_segments: event time out of range in slot " +
                               std::to_string(seg.slot));
        }
        if (i == 0) continue;
        const auto& p = seg.events[i - 1];
        if (std::tie(p.t, p.kind) >= std::tie(e.t, e.kind)) {
            throw NumericError("run_segments: out-of-order events in slot " +
                               std::to_string(seg.slot) + " at t = " + std::to_string(e.t));
        }
    }
}

}  // namespace

Matrix run_segments(std::span<const SlotSegment> segments, const Matrix& values, std::size_t steps,
                    const SegmentRunConfig& cfg, Exec exec) {
    const std::size_t dim = values.cols();
    if (values.rows() < steps) throw ConfigError("run_segments: fewer value rows than steps");

    // Read ids are assigned in segment order; the reduction below re-sorts them.
    std::vector<std::size_t> first_read(segments.size() + 1, 0);
    std::vector<ReadRef> reads;
    for (std::size_t s = 0; s < segments.size(); ++s) {
        check_order(segments[s], steps);
        first_read[s] = reads.size();
        for (const auto& e : segments[s].events) {
            if (e.kind == AccessKind::read) reads.push_back({e.t, segments[s].slot, reads.size()});
        }
    }
    first_read[segments.size()] = reads.size();

    Matrix partial(reads.size(), dim);
    const auto n_seg = static_cast<std::ptrdiff_t>(segments.size());
#pragma omp parallel for schedule(dynamic, 8) if (exec == Exec::parallel)
    for (std::ptrdiff_t s = 0; s < n_seg; ++s) {
        const auto& seg = segments[static_cast<std::size_t>(s)];
        std::vector<double> row(dim, 0.0);
        double mass = cfg.initial_z;
        std::size_t read_id = first_read[static_cast<std::size_t>(s)];
        for (const auto& e : seg.events) {
            if (e.kind == AccessKind::write) {
                detail::slot_write(row.data(), mass, dim, cfg.decay(e.weight), e.weight,
                                   values.row(static_cast<std::size_t>(e.t)).data());
            } else {
                auto out = partial.row(read_id++);
                detail::slot_read_accumulate(out.data(), row.data(), dim,
                                             detail::read_scale(e.weight, mass, cfg.eps));
            }
        }
    }

    std::sort(reads.begin(), reads.end(), [](const ReadRef& a, const ReadRef& b) {
        return std::tie(a.t, a.slot) < std::tie(b.t, b.slot);
    });
    Matrix out(steps, dim);
    for (const auto& ref : reads) {
        auto dst = out.row(static_cast<std::size_t>(ref.t));
        const auto src = partial.row(ref.id);
        for (std::size_t j = 0; j < dim; ++j) dst[j] += src[j];
    }
    return out;
}

}  // namespace ramnet
