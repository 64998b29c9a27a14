#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "cmab/attention.hpp"
#include "cmab/matrix.hpp"

// Constant Memory Attention Block.
//
// The block is SA2(CA2(IEMB, SA1(CA1(BEMB, INPUT)))). Only CA1 touches
// the input set; because its query side comes from the learned latents
// BEMB it is constant, so CA1's softmax attention can be maintained as a
// running (weighted value average, log-normalizer) pair per latent row
// and head. Absorbing u new datapoints costs O(u) per pair and never
// needs the previously absorbed data. All normalizers live in log space:
//   log C' = log C + softplus(T),  T = logsumexp(s_new - log C)
//   emb'   = exp(log C - log C') * emb + sum_i exp(s_i - log C') * v_i

namespace cmab {

template <typename T>
struct CmabParams {
    int L_B = 0;
    int L_I = 0;
    int d = 0;
    Mat<T> bemb;  // L_B x d, learned
    AttnParams<T> ca1, sa1, ca2, sa2;

    static CmabParams init(RngState& rng, int L_B, int L_I, int d, int heads,
                           int d_ff) {
        CmabParams p;
        p.L_B = L_B;
        p.L_I = L_I;
        p.d = d;
        p.bemb = init_matrix<T>(rng, L_B, d, InitScheme::Normal002);
        p.ca1 = AttnParams<T>::init(rng, d, heads, d_ff);
        p.sa1 = AttnParams<T>::init(rng, d, heads, d_ff);
        p.ca2 = AttnParams<T>::init(rng, d, heads, d_ff);
        p.sa2 = AttnParams<T>::init(rng, d, heads, d_ff);
        return p;
    }
};

// Running state of CA1 over everything absorbed so far. emb row j holds
// the per-head attended vectors for latent row j (heads stacked by
// column block); log_c(j, h) is the matching log-normalizer.
template <typename T>
struct StreamState {
    int heads = 0;
    int d_h = 0;
    std::int64_t n = 0;
    Mat<T> frozen_q;  // L_B x d, query projection of BEMB, computed once
    Mat<T> emb;       // L_B x d
    Mat<T> log_c;     // L_B x heads

    std::size_t bytes() const {
        return (frozen_q.size() + emb.size() + log_c.size()) * sizeof(T);
    }
};

template <typename T>
struct CmabState {
    const CmabParams<T>* params = nullptr;
    StreamState<T> stream;
};

// Per-stage multiply-add counts of the most recent block forward/update
// on this thread.
// ca1 covers only the input-touching work (key/value projection, scores,
// weighted sums), so it is exactly proportional to the batch size.
// ca1_tail is the constant-size output projection + feed-forward of CA1.
struct CmabStageFlops {
    std::uint64_t ca1 = 0;
    std::uint64_t ca1_tail = 0;
    std::uint64_t sa1 = 0;
    std::uint64_t ca2 = 0;
    std::uint64_t sa2 = 0;
    std::uint64_t total() const { return ca1 + ca1_tail + sa1 + ca2 + sa2; }
};

inline CmabStageFlops& last_cmab_stage_flops() {
    thread_local CmabStageFlops f;
    return f;
}

// The frozen query matrix may be supplied precomputed; it depends only
// on BEMB and is shared across chunks and updates.
template <typename T>
StreamState<T> stream_init(const CmabParams<T>& params, const Mat<T>& batch,
                           const Mat<T>* frozen_q = nullptr) {
    if (batch.rows() == 0)
        detail::contract_fail("stream_init: initial batch must be nonempty");
    const AttnParams<T>& a = params.ca1;
    StreamState<T> st;
    st.heads = a.heads;
    st.d_h = a.d_h;
    st.n = batch.rows();
    st.frozen_q = frozen_q ? *frozen_q : project_queries(a, params.bemb);
    st.emb = Mat<T>(params.L_B, params.d);
    st.log_c = Mat<T>(params.L_B, a.heads);
    ScoredKV<T> kv = project_kv(a, batch);
    const T inv_sqrt_dh = T(1) / std::sqrt(T(a.d_h));
    for (int j = 0; j < params.L_B; ++j) {
        for (int h = 0; h < a.heads; ++h) {
            attend_row(st.frozen_q.row(j) + h * a.d_h, kv, h, a.d_h,
                       inv_sqrt_dh, st.emb.row(j) + h * a.d_h,
                       &st.log_c.at(j, h));
        }
    }
    return st;
}

template <typename T>
void stream_update(StreamState<T>& st, const CmabParams<T>& params,
                   const Mat<T>& new_batch) {
    const int u = new_batch.rows();
    if (u == 0) return;
    const AttnParams<T>& a = params.ca1;
    ScoredKV<T> kv = project_kv(a, new_batch);
    const T inv_sqrt_dh = T(1) / std::sqrt(T(a.d_h));
    std::vector<T> s(static_cast<std::size_t>(u));
    for (int j = 0; j < params.L_B; ++j) {
        for (int h = 0; h < a.heads; ++h) {
            const T* q = st.frozen_q.row(j) + h * a.d_h;
            const int off = h * a.d_h;
            for (int i = 0; i < u; ++i) {
                const T* kr = kv.k.row(i) + off;
                T dot = T(0);
                for (int c = 0; c < a.d_h; ++c) dot += q[c] * kr[c];
                s[static_cast<std::size_t>(i)] = dot * inv_sqrt_dh;
            }
            add_flops(static_cast<std::uint64_t>(u) * (a.d_h + 1));
            T& log_c = st.log_c.at(j, h);
            std::vector<T> shifted(static_cast<std::size_t>(u));
            for (int i = 0; i < u; ++i)
                shifted[static_cast<std::size_t>(i)] =
                    s[static_cast<std::size_t>(i)] - log_c;
            T t = logsumexp(std::span<const T>(shifted));
            T log_c_new = log_c + softplus(t);
            T carry = std::exp(log_c - log_c_new);
            T* e = st.emb.row(j) + off;
            for (int c = 0; c < a.d_h; ++c) e[c] *= carry;
            for (int i = 0; i < u; ++i) {
                T w = std::exp(s[static_cast<std::size_t>(i)] - log_c_new);
                const T* vr = kv.v.row(i) + off;
                for (int c = 0; c < a.d_h; ++c) e[c] += w * vr[c];
            }
            add_flops(static_cast<std::uint64_t>(u) * (a.d_h + 3) + a.d_h + 4);
            log_c = log_c_new;
        }
    }
    st.n += u;
}

// SA1 / CA2 / SA2 applied on top of the cached CA1 state. Constant cost
// in the number of absorbed datapoints.
template <typename T>
Mat<T> cmab_downstream(const CmabParams<T>& params, const Mat<T>& iemb,
                       const StreamState<T>& st, CmabStageFlops* stages) {
    std::uint64_t cpre = flop_meter().count;
    Mat<T> ca1_out = attn_tail(params.ca1, params.bemb, st.emb);
    std::uint64_t c0 = flop_meter().count;
    if (stages) stages->ca1_tail = c0 - cpre;
    Mat<T> demb = self_attention(params.sa1, ca1_out);
    std::uint64_t c1 = flop_meter().count;
    Mat<T> ca2_out = cross_attention(params.ca2, iemb, project_kv(params.ca2, demb));
    std::uint64_t c2 = flop_meter().count;
    Mat<T> oemb = self_attention(params.sa2, ca2_out);
    std::uint64_t c3 = flop_meter().count;
    if (stages) {
        stages->sa1 = c1 - c0;
        stages->ca2 = c2 - c1;
        stages->sa2 = c3 - c2;
    }
    return oemb;
}

template <typename T>
struct CmabForwardResult {
    Mat<T> oemb;
    CmabState<T> state;
};

template <typename T>
CmabForwardResult<T> cmab_forward_full(const CmabParams<T>& params,
                                       const Mat<T>& iemb,
                                       const Mat<T>& input) {
    if (input.rows() == 0)
        detail::contract_fail("cmab_forward_full: input must be nonempty");
    if (iemb.rows() != params.L_I)
        detail::contract_fail("cmab_forward_full: iemb rows " +
                              iemb.shape_str() + " != L_I " +
                              std::to_string(params.L_I));
    CmabStageFlops stages;
    Mat<T> frozen_q = project_queries(params.ca1, params.bemb);
    std::uint64_t c0 = flop_meter().count;
    CmabState<T> state{&params, stream_init(params, input, &frozen_q)};
    stages.ca1 = flop_meter().count - c0;
    Mat<T> oemb = cmab_downstream(params, iemb, state.stream, &stages);
    last_cmab_stage_flops() = stages;
    return {std::move(oemb), std::move(state)};
}

template <typename T>
CmabForwardResult<T> cmab_forward_chunked(const CmabParams<T>& params,
                                          const Mat<T>& iemb,
                                          const std::vector<Mat<T>>& chunks,
                                          int B_C) {
    CmabStageFlops stages;
    Mat<T> frozen_q = project_queries(params.ca1, params.bemb);
    std::uint64_t c0 = flop_meter().count;
    CmabState<T> state{&params, {}};
    bool started = false;
    for (const Mat<T>& chunk : chunks) {
        if (chunk.rows() > B_C)
            detail::contract_fail("cmab_forward_chunked: chunk of " +
                                  std::to_string(chunk.rows()) +
                                  " rows exceeds B_C=" + std::to_string(B_C));
        if (chunk.rows() == 0) continue;
        if (!started) {
            state.stream = stream_init(params, chunk, &frozen_q);
            started = true;
        } else {
            stream_update(state.stream, params, chunk);
        }
    }
    if (!started)
        detail::contract_fail("cmab_forward_chunked: all chunks empty");
    stages.ca1 = flop_meter().count - c0;
    Mat<T> oemb = cmab_downstream(params, iemb, state.stream, &stages);
    last_cmab_stage_flops() = stages;
    return {std::move(oemb), std::move(state)};
}

template <typename T>
Mat<T> cmab_update(CmabState<T>& state, const Mat<T>& iemb,
                   const Mat<T>& new_batch) {
    CmabStageFlops stages;
    std::uint64_t c0 = flop_meter().count;
    stream_update(state.stream, *state.params, new_batch);
    stages.ca1 = flop_meter().count - c0;
    Mat<T> oemb = cmab_downstream(*state.params, iemb, state.stream, &stages);
    last_cmab_stage_flops() = stages;
    return oemb;
}

}  // namespace cmab
