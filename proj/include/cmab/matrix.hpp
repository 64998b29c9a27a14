#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmab/meter.hpp"
#include "cmab/rng.hpp"

namespace cmab {

// Dense row-major matrix. Immutable shape after construction; all
// operations below are pure functions returning fresh matrices with a
// deterministic left-to-right accumulation order.
template <typename T>
class Mat {
public:
    Mat() = default;

    Mat(int rows, int cols)
        : rows_(rows), cols_(cols),
          data_(static_cast<std::size_t>(rows) * cols, T(0)) {
        track();
    }

    Mat(int rows, int cols, std::vector<T> values)
        : rows_(rows), cols_(cols), data_(std::move(values)) {
        if (data_.size() != static_cast<std::size_t>(rows) * cols)
            throw std::invalid_argument("Mat: data length " +
                                        std::to_string(data_.size()) +
                                        " != " + std::to_string(rows) + "x" +
                                        std::to_string(cols));
        track();
    }

    Mat(const Mat& o) : rows_(o.rows_), cols_(o.cols_), data_(o.data_) {
        track();
    }

    Mat(Mat&& o) noexcept
        : rows_(o.rows_), cols_(o.cols_), data_(std::move(o.data_)),
          metered_bytes_(o.metered_bytes_) {
        o.metered_bytes_ = 0;
        o.rows_ = o.cols_ = 0;
    }

    Mat& operator=(const Mat& o) {
        if (this != &o) {
            untrack();
            rows_ = o.rows_;
            cols_ = o.cols_;
            data_ = o.data_;
            track();
        }
        return *this;
    }

    Mat& operator=(Mat&& o) noexcept {
        if (this != &o) {
            untrack();
            rows_ = o.rows_;
            cols_ = o.cols_;
            data_ = std::move(o.data_);
            metered_bytes_ = o.metered_bytes_;
            o.metered_bytes_ = 0;
            o.rows_ = o.cols_ = 0;
        }
        return *this;
    }

    ~Mat() { untrack(); }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T& at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    const T& at(int r, int c) const {
        return data_[static_cast<std::size_t>(r) * cols_ + c];
    }

    T* row(int r) { return data_.data() + static_cast<std::size_t>(r) * cols_; }
    const T* row(int r) const {
        return data_.data() + static_cast<std::size_t>(r) * cols_;
    }

    std::vector<T>& data() { return data_; }
    const std::vector<T>& data() const { return data_; }

    std::string shape_str() const {
        return std::to_string(rows_) + "x" + std::to_string(cols_);
    }

    bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

private:
    void track() {
        if (memory_meter().enabled && !data_.empty()) {
            metered_bytes_ = data_.size() * sizeof(T);
            meter_alloc(metered_bytes_);
        }
    }
    void untrack() {
        if (metered_bytes_ != 0) {
            meter_free(metered_bytes_);
            metered_bytes_ = 0;
        }
    }

    int rows_ = 0;
    int cols_ = 0;
    std::vector<T> data_;
    std::size_t metered_bytes_ = 0;
};

using Matrix = Mat<double>;

constexpr double kLayerNormEps = 1e-5;

namespace detail {
inline void contract_fail(const std::string& msg) {
    throw std::invalid_argument(msg);
}
}  // namespace detail

template <typename T>
Mat<T> matmul(const Mat<T>& a, const Mat<T>& b) {
    if (a.cols() != b.rows())
        detail::contract_fail("matmul: shape mismatch " + a.shape_str() +
                              " x " + b.shape_str());
    Mat<T> out(a.rows(), b.cols());
    for (int i = 0; i < a.rows(); ++i) {
        const T* ar = a.row(i);
        T* orow = out.row(i);
        for (int k = 0; k < a.cols(); ++k) {
            const T aik = ar[k];
            const T* br = b.row(k);
            for (int j = 0; j < b.cols(); ++j) orow[j] += aik * br[j];
        }
    }
    add_flops(static_cast<std::uint64_t>(a.rows()) * a.cols() * b.cols());
    return out;
}

template <typename T>
Mat<T> transpose(const Mat<T>& m) {
    Mat<T> out(m.cols(), m.rows());
    for (int i = 0; i < m.rows(); ++i)
        for (int j = 0; j < m.cols(); ++j) out.at(j, i) = m.at(i, j);
    return out;
}

// Elementwise sum; also accepts a 1xC second operand broadcast over rows.
template <typename T>
Mat<T> add(const Mat<T>& a, const Mat<T>& b) {
    if (a.rows() == b.rows() && a.cols() == b.cols()) {
        Mat<T> out = a;
        for (std::size_t i = 0; i < out.size(); ++i)
            out.data()[i] += b.data()[i];
        add_flops(out.size());
        return out;
    }
    if (b.rows() == 1 && b.cols() == a.cols()) {
        Mat<T> out = a;
        for (int i = 0; i < a.rows(); ++i) {
            T* r = out.row(i);
            const T* br = b.row(0);
            for (int j = 0; j < a.cols(); ++j) r[j] += br[j];
        }
        add_flops(out.size());
        return out;
    }
    detail::contract_fail("add: shape mismatch " + a.shape_str() + " vs " +
                          b.shape_str());
    return {};
}

template <typename T>
Mat<T> scale(const Mat<T>& a, T s) {
    Mat<T> out = a;
    for (T& v : out.data()) v *= s;
    add_flops(out.size());
    return out;
}

template <typename T>
Mat<T> concat_rows(const Mat<T>& a, const Mat<T>& b) {
    if (a.cols() != b.cols() && !a.empty() && !b.empty())
        detail::contract_fail("concat_rows: column mismatch " + a.shape_str() +
                              " vs " + b.shape_str());
    int cols = a.empty() ? b.cols() : a.cols();
    Mat<T> out(a.rows() + b.rows(), cols);
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < cols; ++j) out.at(i, j) = a.at(i, j);
    for (int i = 0; i < b.rows(); ++i)
        for (int j = 0; j < cols; ++j) out.at(a.rows() + i, j) = b.at(i, j);
    return out;
}

// Rows [r0, r1).
template <typename T>
Mat<T> slice_rows(const Mat<T>& m, int r0, int r1) {
    if (r0 < 0 || r1 < r0 || r1 > m.rows())
        detail::contract_fail("slice_rows: bad range [" + std::to_string(r0) +
                              "," + std::to_string(r1) + ") of " +
                              m.shape_str());
    Mat<T> out(r1 - r0, m.cols());
    for (int i = r0; i < r1; ++i)
        for (int j = 0; j < m.cols(); ++j) out.at(i - r0, j) = m.at(i, j);
    return out;
}

template <typename T>
T logsumexp(std::span<const T> v) {
    if (v.empty()) detail::contract_fail("logsumexp: empty input");
    T mx = v[0];
    for (const T& x : v)
        if (x > mx) mx = x;
    T s = T(0);
    for (const T& x : v) s += std::exp(x - mx);
    add_flops(3 * v.size());
    return mx + std::log(s);
}

template <typename T>
T softplus(T x) {
    add_flops(3);
    if (x > T(0)) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

template <typename T>
Mat<T> softmax_rows(const Mat<T>& m) {
    Mat<T> out(m.rows(), m.cols());
    for (int i = 0; i < m.rows(); ++i) {
        const T* r = m.row(i);
        T* o = out.row(i);
        T mx = r[0];
        for (int j = 1; j < m.cols(); ++j)
            if (r[j] > mx) mx = r[j];
        T s = T(0);
        for (int j = 0; j < m.cols(); ++j) {
            o[j] = std::exp(r[j] - mx);
            s += o[j];
        }
        T inv = T(1) / s;
        for (int j = 0; j < m.cols(); ++j) o[j] *= inv;
    }
    add_flops(4 * m.size());
    return out;
}

// Per-row standardization (population variance) followed by affine.
template <typename T>
Mat<T> layer_norm(const Mat<T>& m, const Mat<T>& gain, const Mat<T>& bias,
                  T eps) {
    if (gain.size() != static_cast<std::size_t>(m.cols()) ||
        bias.size() != static_cast<std::size_t>(m.cols()))
        detail::contract_fail("layer_norm: gain/bias length must equal cols of " +
                              m.shape_str());
    if (!(eps > T(0))) detail::contract_fail("layer_norm: eps must be > 0");
    Mat<T> out(m.rows(), m.cols());
    const T* g = gain.data().data();
    const T* b = bias.data().data();
    for (int i = 0; i < m.rows(); ++i) {
        const T* r = m.row(i);
        T* o = out.row(i);
        T mean = T(0);
        for (int j = 0; j < m.cols(); ++j) mean += r[j];
        mean /= T(m.cols());
        T var = T(0);
        for (int j = 0; j < m.cols(); ++j) {
            T d = r[j] - mean;
            var += d * d;
        }
        var /= T(m.cols());
        T inv = T(1) / std::sqrt(var + eps);
        for (int j = 0; j < m.cols(); ++j)
            o[j] = (r[j] - mean) * inv * g[j] + b[j];
    }
    add_flops(6 * m.size());
    return out;
}

template <typename T>
Mat<T> relu(const Mat<T>& m) {
    Mat<T> out = m;
    for (T& v : out.data())
        if (v < T(0)) v = T(0);
    add_flops(out.size());
    return out;
}

template <typename T>
Mat<T> softplus_mat(const Mat<T>& m) {
    Mat<T> out(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.size(); ++i)
        out.data()[i] = softplus(m.data()[i]);
    return out;
}

template <typename T>
T mean_all(const Mat<T>& m) {
    if (m.empty()) detail::contract_fail("mean: empty matrix");
    T s = T(0);
    for (const T& v : m.data()) s += v;
    add_flops(m.size() + 1);
    return s / T(m.size());
}

enum class InitScheme { UniformFanIn, Normal002, Zeros };

template <typename T>
Mat<T> init_matrix(RngState& rng, int rows, int cols, InitScheme scheme) {
    Mat<T> out(rows, cols);
    switch (scheme) {
        case InitScheme::Zeros:
            break;
        case InitScheme::UniformFanIn: {
            double bound = std::sqrt(1.0 / static_cast<double>(rows));
            for (T& v : out.data())
                v = static_cast<T>(rng.next_uniform(-bound, bound));
            break;
        }
        case InitScheme::Normal002:
            for (T& v : out.data())
                v = static_cast<T>(0.02 * rng.next_normal());
            break;
    }
    return out;
}

}  // namespace cmab
