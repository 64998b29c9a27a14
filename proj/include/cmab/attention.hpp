#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "cmab/matrix.hpp"
#include "cmab/rng.hpp"

// Multi-head attention blocks in pre-norm form:
//   out = x + MultiHead(LN(x), LN(kv_src))
//   out = out + FFN(LN(out))
// The query-side path depends only on the query rows, which is what lets
// the streaming code freeze its query matrix once.

namespace cmab {

template <typename T>
struct AttnParams {
    int heads = 0;
    int d = 0;
    int d_h = 0;
    int d_ff = 0;
    // Per-head projections stored stacked by column block: head h owns
    // columns [h*d_h, (h+1)*d_h).
    Mat<T> wq, wk, wv;  // d x d
    Mat<T> wo;          // d x d
    Mat<T> lnq_g, lnq_b, lnkv_g, lnkv_b;  // 1 x d
    Mat<T> w1, b1;  // d x d_ff, 1 x d_ff
    Mat<T> w2, b2;  // d_ff x d, 1 x d
    Mat<T> lnf_g, lnf_b;  // 1 x d

    static AttnParams init(RngState& rng, int d, int heads, int d_ff) {
        if (heads <= 0 || d % heads != 0)
            detail::contract_fail("AttnParams: heads must divide d");
        AttnParams p;
        p.heads = heads;
        p.d = d;
        p.d_h = d / heads;
        p.d_ff = d_ff;
        p.wq = init_matrix<T>(rng, d, d, InitScheme::UniformFanIn);
        p.wk = init_matrix<T>(rng, d, d, InitScheme::UniformFanIn);
        p.wv = init_matrix<T>(rng, d, d, InitScheme::UniformFanIn);
        p.wo = init_matrix<T>(rng, d, d, InitScheme::UniformFanIn);
        p.lnq_g = ones(d);
        p.lnq_b = init_matrix<T>(rng, 1, d, InitScheme::Zeros);
        p.lnkv_g = ones(d);
        p.lnkv_b = init_matrix<T>(rng, 1, d, InitScheme::Zeros);
        p.w1 = init_matrix<T>(rng, d, d_ff, InitScheme::UniformFanIn);
        p.b1 = init_matrix<T>(rng, 1, d_ff, InitScheme::Zeros);
        p.w2 = init_matrix<T>(rng, d_ff, d, InitScheme::UniformFanIn);
        p.b2 = init_matrix<T>(rng, 1, d, InitScheme::Zeros);
        p.lnf_g = ones(d);
        p.lnf_b = init_matrix<T>(rng, 1, d, InitScheme::Zeros);
        return p;
    }

private:
    static Mat<T> ones(int n) {
        Mat<T> m(1, n);
        for (T& v : m.data()) v = T(1);
        return m;
    }
};

// Per-head key/value embeddings of a datapoint set, n x d stacked by
// column block like the projections.
template <typename T>
struct ScoredKV {
    Mat<T> k;
    Mat<T> v;
    int rows() const { return k.rows(); }
};

template <typename T>
ScoredKV<T> project_kv(const AttnParams<T>& p, const Mat<T>& inputs) {
    if (inputs.cols() != p.d)
        detail::contract_fail("project_kv: input cols " +
                              inputs.shape_str() + " != model dim " +
                              std::to_string(p.d));
    if (inputs.rows() == 0) return {Mat<T>(0, p.d), Mat<T>(0, p.d)};
    Mat<T> xn = layer_norm(inputs, p.lnkv_g, p.lnkv_b, T(kLayerNormEps));
    return {matmul(xn, p.wk), matmul(xn, p.wv)};
}

// Softmax attention of one query row against one head's key/value block.
// Writes the attended d_h-vector and the score log-normalizer. This is
// the single code path shared by dense attention and the streaming
// initializer, so the two agree bitwise.
template <typename T>
void attend_row(const T* q, const ScoredKV<T>& kv, int head, int d_h,
                T inv_sqrt_dh, T* out, T* lse_out) {
    const int n = kv.k.rows();
    const int off = head * d_h;
    std::vector<T> s(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const T* kr = kv.k.row(i) + off;
        T dot = T(0);
        for (int c = 0; c < d_h; ++c) dot += q[c] * kr[c];
        s[static_cast<std::size_t>(i)] = dot * inv_sqrt_dh;
    }
    add_flops(static_cast<std::uint64_t>(n) * (d_h + 1));
    T lse = logsumexp(std::span<const T>(s));
    for (int c = 0; c < d_h; ++c) out[c] = T(0);
    for (int i = 0; i < n; ++i) {
        T w = std::exp(s[static_cast<std::size_t>(i)] - lse);
        const T* vr = kv.v.row(i) + off;
        for (int c = 0; c < d_h; ++c) out[c] += w * vr[c];
    }
    add_flops(static_cast<std::uint64_t>(n) * (d_h + 2));  // keep linear in n
    *lse_out = lse;
}

// Output projection, residual, and feed-forward applied to the
// concatenated head outputs. Shared between the dense path and the
// streaming reconstruction.
template <typename T>
Mat<T> attn_tail(const AttnParams<T>& p, const Mat<T>& queries,
                 const Mat<T>& heads_out) {
    Mat<T> out = add(queries, matmul(heads_out, p.wo));
    Mat<T> f = layer_norm(out, p.lnf_g, p.lnf_b, T(kLayerNormEps));
    Mat<T> h = relu(add(matmul(f, p.w1), p.b1));
    return add(out, add(matmul(h, p.w2), p.b2));
}

template <typename T>
Mat<T> project_queries(const AttnParams<T>& p, const Mat<T>& queries) {
    Mat<T> qn = layer_norm(queries, p.lnq_g, p.lnq_b, T(kLayerNormEps));
    return matmul(qn, p.wq);
}

template <typename T>
Mat<T> cross_attention(const AttnParams<T>& p, const Mat<T>& queries,
                       const ScoredKV<T>& kv) {
    if (queries.cols() != p.d)
        detail::contract_fail("cross_attention: query cols " +
                              queries.shape_str() + " != model dim " +
                              std::to_string(p.d));
    if (kv.rows() == 0)
        detail::contract_fail("cross_attention: empty key/value set");
    Mat<T> q = project_queries(p, queries);
    Mat<T> heads_out(queries.rows(), p.d);
    const T inv_sqrt_dh = T(1) / std::sqrt(T(p.d_h));
    for (int j = 0; j < queries.rows(); ++j) {
        for (int h = 0; h < p.heads; ++h) {
            T lse;
            attend_row(q.row(j) + h * p.d_h, kv, h, p.d_h, inv_sqrt_dh,
                       heads_out.row(j) + h * p.d_h, &lse);
        }
    }
    return attn_tail(p, queries, heads_out);
}

template <typename T>
Mat<T> self_attention(const AttnParams<T>& p, const Mat<T>& x) {
    if (x.rows() == 0)
        detail::contract_fail("self_attention: empty input");
    return cross_attention(p, x, project_kv(p, x));
}

}  // namespace cmab
