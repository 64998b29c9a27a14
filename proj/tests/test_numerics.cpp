#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cmab/matrix.hpp"
#include "cmab/rng.hpp"

using cmab::Matrix;
using cmab::RngState;

namespace {

Matrix random_mat(RngState& rng, int rows, int cols, double scl = 1.0) {
    Matrix m(rows, cols);
    for (double& v : m.data()) v = scl * rng.next_uniform(-1.0, 1.0);
    return m;
}

Matrix identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

}  // namespace

TEST_CASE("matmul identity and scalar product") {
    RngState rng(11);
    Matrix m = random_mat(rng, 3, 3);
    Matrix im = matmul(identity(3), m);
    for (std::size_t i = 0; i < m.size(); ++i)
        CHECK(im.data()[i] == m.data()[i]);

    Matrix a(1, 1, {2.0}), b(1, 1, {3.0});
    CHECK(matmul(a, b).at(0, 0) == 6.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
    RngState rng(12);
    Matrix a = random_mat(rng, 4, 5);
    Matrix b = random_mat(rng, 5, 3);
    Matrix c = matmul(a, b);
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 3; ++j) {
            double acc = 0.0;
            for (int k = 0; k < 5; ++k) acc += a.at(i, k) * b.at(k, j);
            CHECK(c.at(i, j) == doctest::Approx(acc).epsilon(1e-12));
        }
    }
}

TEST_CASE("matmul dimension mismatch names both shapes") {
    Matrix a(2, 3), b(2, 2);
    CHECK_THROWS_WITH_AS(matmul(a, b), "matmul: shape mismatch 2x3 x 2x2",
                         std::invalid_argument);
}

TEST_CASE("transpose round trip") {
    RngState rng(13);
    Matrix m = random_mat(rng, 3, 5);
    Matrix tt = transpose(transpose(m));
    for (std::size_t i = 0; i < m.size(); ++i)
        CHECK(tt.data()[i] == m.data()[i]);
}

TEST_CASE("add broadcasts a 1xC row") {
    Matrix a(2, 2, {1.0, 2.0, 3.0, 4.0});
    Matrix b(1, 2, {10.0, 20.0});
    Matrix s = add(a, b);
    CHECK(s.at(0, 0) == 11.0);
    CHECK(s.at(1, 1) == 24.0);
    CHECK_THROWS_AS(add(a, Matrix(3, 2)), std::invalid_argument);
}

TEST_CASE("logsumexp frozen values") {
    std::vector<double> one{0.0};
    CHECK(cmab::logsumexp(std::span<const double>(one)) == 0.0);

    // c + ln n for n equal entries.
    std::vector<double> two{1.0, 1.0};
    CHECK(cmab::logsumexp(std::span<const double>(two)) ==
          doctest::Approx(1.6931471805599453094).epsilon(1e-15));

    // mpmath 40-digit reference: lse(100, 100.5)
    std::vector<double> big{100.0, 100.5};
    CHECK(cmab::logsumexp(std::span<const double>(big)) ==
          doctest::Approx(100.97407698418010668).epsilon(1e-15));
}

TEST_CASE("logsumexp dominates max and is shift invariant") {
    RngState rng(14);
    for (int t = 0; t < 200; ++t) {
        int n = static_cast<int>(rng.next_int(1, 12));
        std::vector<double> v(static_cast<std::size_t>(n));
        double mx = -1e300;
        for (double& x : v) {
            x = rng.next_uniform(-50.0, 50.0);
            mx = std::max(mx, x);
        }
        double l = cmab::logsumexp(std::span<const double>(v));
        CHECK(l >= mx);
        double c = rng.next_uniform(-500.0, 500.0);
        std::vector<double> shifted = v;
        for (double& x : shifted) x += c;
        double ls = cmab::logsumexp(std::span<const double>(shifted));
        CHECK(ls == doctest::Approx(l + c).epsilon(1e-12));
    }
}

TEST_CASE("logsumexp rejects empty input") {
    std::vector<double> none;
    CHECK_THROWS_AS(cmab::logsumexp(std::span<const double>(none)),
                    std::invalid_argument);
}

TEST_CASE("softplus stable branches") {
    CHECK(cmab::softplus(0.0) ==
          doctest::Approx(0.69314718055994530942).epsilon(1e-15));
    // Large argument: asymptotically x, finite, no overflow.
    double sp50 = cmab::softplus(50.0);
    CHECK(std::isfinite(sp50));
    CHECK(sp50 == doctest::Approx(50.0).epsilon(1e-15));
    // mpmath 40-digit reference: softplus(-3)
    CHECK(cmab::softplus(-3.0) ==
          doctest::Approx(0.048587351573742058759).epsilon(1e-15));
    CHECK(cmab::softplus(-745.0) > 0.0);
    CHECK(std::isfinite(cmab::softplus(745.0)));
}

TEST_CASE("softmax_rows behavior") {
    Matrix c(1, 3, {7.5, 7.5, 7.5});
    Matrix sc = softmax_rows(c);
    for (double v : sc.data())
        CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    Matrix hot(1, 2, {0.0, 1000.0});
    Matrix sh = softmax_rows(hot);
    CHECK(sh.all_finite());
    CHECK(sh.at(0, 1) == doctest::Approx(1.0).epsilon(1e-12));

    RngState rng(15);
    Matrix m = random_mat(rng, 3, 4, 5.0);
    Matrix s = softmax_rows(m);
    for (int i = 0; i < 3; ++i) {
        double row_sum = 0.0, naive_sum = 0.0;
        for (int j = 0; j < 4; ++j) {
            row_sum += s.at(i, j);
            naive_sum += std::exp(m.at(i, j));
        }
        CHECK(row_sum == doctest::Approx(1.0).epsilon(1e-12));
        for (int j = 0; j < 4; ++j) {
            CHECK(s.at(i, j) > 0.0);
            CHECK(s.at(i, j) <= 1.0);
            CHECK(s.at(i, j) ==
                  doctest::Approx(std::exp(m.at(i, j)) / naive_sum)
                      .epsilon(1e-12));
        }
    }
}

TEST_CASE("softmax_rows shift invariance") {
    RngState rng(16);
    Matrix m = random_mat(rng, 4, 6, 3.0);
    Matrix shifted = m;
    for (int i = 0; i < 4; ++i) {
        double c = rng.next_uniform(-100.0, 100.0);
        for (int j = 0; j < 6; ++j) shifted.at(i, j) += c;
    }
    Matrix a = softmax_rows(m), b = softmax_rows(shifted);
    for (std::size_t i = 0; i < a.size(); ++i)
        CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-12));
}

TEST_CASE("layer_norm edge rows and oracle") {
    Matrix gain(1, 4, {1.0, 1.0, 1.0, 1.0});
    Matrix bias(1, 4);
    Matrix constant_row(1, 4, {3.0, 3.0, 3.0, 3.0});
    Matrix z = layer_norm(constant_row, gain, bias, 1e-5);
    for (double v : z.data()) CHECK(v == 0.0);

    Matrix zero_gain(1, 4);
    Matrix b2(1, 4, {1.0, 2.0, 3.0, 4.0});
    Matrix bb = layer_norm(constant_row, zero_gain, b2, 1e-5);
    for (int j = 0; j < 4; ++j) CHECK(bb.at(0, j) == b2.at(0, j));

    RngState rng(17);
    Matrix m = random_mat(rng, 1, 7, 4.0);
    Matrix g = random_mat(rng, 1, 7);
    Matrix b = random_mat(rng, 1, 7);
    Matrix out = layer_norm(m, g, b, 1e-5);
    // Two-pass mean/variance oracle.
    double mean = 0.0;
    for (double v : m.data()) mean += v;
    mean /= 7.0;
    double var = 0.0;
    for (double v : m.data()) var += (v - mean) * (v - mean);
    var /= 7.0;
    for (int j = 0; j < 7; ++j) {
        double want =
            (m.at(0, j) - mean) / std::sqrt(var + 1e-5) * g.at(0, j) + b.at(0, j);
        CHECK(out.at(0, j) == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("layer_norm standardizes before the affine") {
    RngState rng(18);
    Matrix m = random_mat(rng, 5, 16, 10.0);
    Matrix g(1, 16), b(1, 16);
    for (double& v : g.data()) v = 1.0;
    Matrix out = layer_norm(m, g, b, 1e-12);
    for (int i = 0; i < 5; ++i) {
        double mean = 0.0, var = 0.0;
        for (int j = 0; j < 16; ++j) mean += out.at(i, j);
        mean /= 16.0;
        for (int j = 0; j < 16; ++j)
            var += (out.at(i, j) - mean) * (out.at(i, j) - mean);
        var /= 16.0;
        CHECK(std::abs(mean) < 1e-10);
        CHECK(std::abs(var - 1.0) < 1e-10);
    }
}

TEST_CASE("init_matrix schemes") {
    RngState a(21), b(21);
    Matrix z = cmab::init_matrix<double>(a, 3, 3, cmab::InitScheme::Zeros);
    for (double v : z.data()) CHECK(v == 0.0);

    Matrix u1 = cmab::init_matrix<double>(a, 8, 8, cmab::InitScheme::UniformFanIn);
    cmab::init_matrix<double>(b, 3, 3, cmab::InitScheme::Zeros);
    Matrix u2 = cmab::init_matrix<double>(b, 8, 8, cmab::InitScheme::UniformFanIn);
    for (std::size_t i = 0; i < u1.size(); ++i)
        CHECK(u1.data()[i] == u2.data()[i]);  // same seed, bit-identical

    RngState c(22);
    Matrix big = cmab::init_matrix<double>(c, 64, 64, cmab::InitScheme::UniformFanIn);
    double bound = 1.0 / 8.0;  // sqrt(1/64)
    double sum = 0.0;
    for (double v : big.data()) {
        CHECK(std::abs(v) <= bound);
        sum += v;
    }
    // Mean of 4096 U[-1/8, 1/8] draws: sd = bound/sqrt(3)/64.
    double mean = sum / 4096.0;
    CHECK(std::abs(mean) <= 3.0 * bound / std::sqrt(3.0) / 64.0);

    RngState d(23);
    Matrix nm = cmab::init_matrix<double>(d, 50, 50, cmab::InitScheme::Normal002);
    double s2 = 0.0;
    for (double v : nm.data()) s2 += v * v;
    double sd = std::sqrt(s2 / 2500.0);
    CHECK(sd == doctest::Approx(0.02).epsilon(0.1));
}

TEST_CASE("rng determinism and splitting") {
    RngState a(99), b(99);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    // split() depends only on the seed, not on draws consumed.
    RngState c(99);
    CHECK(a.split(7).seed == c.split(7).seed);
    CHECK(a.split(7).seed != a.split(8).seed);

    RngState d(1);
    for (int i = 0; i < 1000; ++i) {
        double v = d.next_double();
        CHECK(v >= 0.0);
        CHECK(v < 1.0);
        double o = d.next_double_open();
        CHECK(o > 0.0);
        CHECK(o <= 1.0);
        std::int64_t k = d.next_int(-3, 5);
        CHECK(k >= -3);
        CHECK(k <= 5);
    }
}

TEST_CASE("concat and slice rows") {
    Matrix a(2, 2, {1.0, 2.0, 3.0, 4.0});
    Matrix b(1, 2, {5.0, 6.0});
    Matrix c = concat_rows(a, b);
    CHECK(c.rows() == 3);
    CHECK(c.at(2, 1) == 6.0);
    Matrix s = slice_rows(c, 1, 3);
    CHECK(s.rows() == 2);
    CHECK(s.at(0, 0) == 3.0);
    CHECK(s.at(1, 1) == 6.0);
    CHECK_THROWS_AS(slice_rows(c, 2, 4), std::invalid_argument);
}
