#pragma once

#include <cstddef>
#include <cstdint>

// Transient-allocation and multiply-add instrumentation.
//
// Both meters are thread-local: benchmark cells running on different
// threads never share a meter. The memory meter only tracks matrices
// constructed while it is enabled, so datasets and model parameters
// allocated beforehand are excluded from the peak.

namespace cmab {

struct MemoryMeter {
    std::int64_t current = 0;
    std::int64_t peak = 0;
    bool enabled = false;

    void reset() {
        current = 0;
        peak = 0;
    }
};

inline MemoryMeter& memory_meter() {
    thread_local MemoryMeter m;
    return m;
}

inline void meter_alloc(std::size_t bytes) {
    MemoryMeter& m = memory_meter();
    m.current += static_cast<std::int64_t>(bytes);
    if (m.current > m.peak) m.peak = m.current;
}

inline void meter_free(std::size_t bytes) {
    memory_meter().current -= static_cast<std::int64_t>(bytes);
}

struct FlopMeter {
    std::uint64_t count = 0;
};

inline FlopMeter& flop_meter() {
    thread_local FlopMeter f;
    return f;
}

// Counts multiply-add units (and unary transcendental evaluations).
inline void add_flops(std::uint64_t n) { flop_meter().count += n; }

}  // namespace cmab
