#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include "cmab/cmab.hpp"
#include "cmab/cmanp.hpp"

// Measured counterparts of the complexity claims: peak transient bytes
// and exact multiply-add counts per workload. Datasets, parameters, and
// pre-built streaming states are allocated before the meter is enabled,
// so the recorded peak covers only buffers acquired by the workload.

namespace cmab {

struct BenchRecord {
    std::string mode;
    std::int64_t n = 0;
    std::int64_t u = 0;
    std::uint64_t peak_bytes = 0;
    std::uint64_t flops = 0;
    std::uint64_t wall_ns = 0;
    std::string config;
    std::uint64_t seed = 0;
};

struct BenchConfig {
    std::string name;
    CmanpConfig cfg;
};

const std::vector<BenchConfig>& known_configs();
const BenchConfig& find_config(const std::string& name);  // throws, lists known

std::string bench_csv_header();
std::string bench_csv_row(const BenchRecord& r);

namespace bench_detail {

template <typename T>
Mat<T> random_mat(RngState& rng, int rows, int cols, double scl = 1.0) {
    Mat<T> m(rows, cols);
    for (T& v : m.data())
        v = static_cast<T>(scl * rng.next_uniform(-1.0, 1.0));
    return m;
}

struct Measurement {
    std::uint64_t peak_bytes = 0;
    std::uint64_t flops = 0;
    std::uint64_t wall_ns = 0;
};

template <typename Fn>
Measurement measure(Fn&& workload) {
    MemoryMeter& mm = memory_meter();
    mm.reset();
    mm.enabled = true;
    std::uint64_t f0 = flop_meter().count;
    auto t0 = std::chrono::steady_clock::now();
    workload();
    auto t1 = std::chrono::steady_clock::now();
    std::uint64_t f1 = flop_meter().count;
    mm.enabled = false;
    Measurement m;
    m.peak_bytes = static_cast<std::uint64_t>(mm.peak);
    m.flops = f1 - f0;
    m.wall_ns = static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count());
    return m;
}

}  // namespace bench_detail

// Workload kinds. "memory" runs the chunked forward, "naive" the
// single-pass forward (the linear-memory control arm), "update" one
// cmab_update of u rows on a state that has already absorbed n rows,
// "condition" the chunked conditioning of a K-block stack.
template <typename T>
BenchRecord run_bench_cell(const std::string& mode, std::int64_t n,
                           std::int64_t u, const BenchConfig& bc,
                           std::uint64_t seed) {
    using bench_detail::random_mat;
    const CmanpConfig& c = bc.cfg;
    RngState rng(seed);
    CmabParams<T> params = CmabParams<T>::init(rng, c.L_B, c.L_I, c.d,
                                               c.heads, c.d_ff);
    Mat<T> iemb = random_mat<T>(rng, c.L_I, c.d, 0.02);
    BenchRecord rec;
    rec.mode = mode;
    rec.n = n;
    rec.u = u;
    rec.config = bc.name;
    rec.seed = seed;

    bench_detail::Measurement m;
    if (mode == "memory" || mode == "naive") {
        std::vector<Mat<T>> chunks;
        if (mode == "memory") {
            for (std::int64_t r = 0; r < n; r += c.B_C)
                chunks.push_back(random_mat<T>(
                    rng, static_cast<int>(std::min<std::int64_t>(c.B_C, n - r)),
                    c.d));
            m = bench_detail::measure([&] {
                cmab_forward_chunked(params, iemb, chunks, c.B_C);
            });
        } else {
            Mat<T> data = random_mat<T>(rng, static_cast<int>(n), c.d);
            m = bench_detail::measure(
                [&] { cmab_forward_full(params, iemb, data); });
        }
    } else if (mode == "update") {
        Mat<T> history = random_mat<T>(rng, static_cast<int>(n), c.d);
        CmabState<T> state{&params, stream_init(params, history)};
        Mat<T> batch = random_mat<T>(rng, static_cast<int>(u), c.d);
        m = bench_detail::measure([&] { cmab_update(state, iemb, batch); });
    } else if (mode == "condition") {
        // K-block stack over raw (x, y) context rows embedded chunk by
        // chunk, mirroring the model's constant-memory conditioning.
        std::vector<CmabParams<T>> blocks;
        for (int k = 0; k < c.K; ++k)
            blocks.push_back(
                CmabParams<T>::init(rng, c.L_B, c.L_I, c.d, c.heads, c.d_ff));
        Mat<T> embed_w = random_mat<T>(rng, 2, c.d);
        Mat<T> ctx = random_mat<T>(rng, static_cast<int>(n), 2);
        Mat<T> lemb0 = random_mat<T>(rng, c.L_I, c.d, 0.02);
        m = bench_detail::measure([&] {
            Mat<T> lemb = lemb0;
            for (int k = 0; k < c.K; ++k) {
                CmabState<T> state{&blocks[k], {}};
                for (int r = 0; r < ctx.rows(); r += c.B_C) {
                    int r1 = std::min(ctx.rows(), r + c.B_C);
                    Mat<T> e = matmul(slice_rows(ctx, r, r1), embed_w);
                    if (r == 0)
                        state.stream = stream_init(blocks[k], e);
                    else
                        stream_update(state.stream, blocks[k], e);
                }
                lemb = cmab_downstream(blocks[k], lemb, state.stream, nullptr);
            }
        });
    } else {
        detail::contract_fail("run_bench_cell: unsupported mode '" + mode +
                              "' (known: memory, naive, update, condition)");
    }
    rec.peak_bytes = m.peak_bytes;
    rec.flops = m.flops;
    rec.wall_ns = m.wall_ns;
    return rec;
}

}  // namespace cmab
