#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cmab/autograd.hpp"
#include "cmab/rng.hpp"

using cmab::Matrix;
using cmab::NodeId;
using cmab::ParamStore;
using cmab::RngState;
using cmab::Tape;

namespace {

Matrix random_mat(RngState& rng, int rows, int cols, double scl = 1.0) {
    Matrix m(rows, cols);
    for (double& v : m.data()) v = scl * rng.next_uniform(-1.0, 1.0);
    return m;
}

bool bitwise_equal(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a.data()[i] != b.data()[i]) return false;
    return true;
}

// Finite-difference gradient of a scalar-valued tape builder w.r.t. one
// leaf matrix, for spot checks below.
template <typename BuildFn>
Matrix fd_grad(const BuildFn& build, Matrix theta, double h) {
    Matrix g(theta.rows(), theta.cols());
    for (std::size_t i = 0; i < theta.size(); ++i) {
        double saved = theta.data()[i];
        theta.data()[i] = saved + h;
        double up = build(theta);
        theta.data()[i] = saved - h;
        double dn = build(theta);
        theta.data()[i] = saved;
        g.data()[i] = (up - dn) / (2.0 * h);
    }
    return g;
}

}  // namespace

TEST_CASE("taped forwards equal untaped numerics bitwise") {
    RngState rng(31);
    Matrix a = random_mat(rng, 3, 4, 2.0);
    Matrix b = random_mat(rng, 4, 5, 2.0);
    Matrix row = random_mat(rng, 1, 4, 2.0);
    Matrix g = random_mat(rng, 1, 4);
    Matrix bias = random_mat(rng, 1, 4);

    Tape t;
    NodeId na = t.leaf(a), nb = t.leaf(b), nrow = t.leaf(row);
    NodeId ng = t.leaf(g), nbias = t.leaf(bias);

    CHECK(bitwise_equal(t.value(t.matmul(na, nb)), matmul(a, b)));
    CHECK(bitwise_equal(t.value(t.add(na, nrow)), add(a, row)));
    CHECK(bitwise_equal(t.value(t.scale(na, 1.7)), scale(a, 1.7)));
    CHECK(bitwise_equal(t.value(t.transpose(na)), transpose(a)));
    CHECK(bitwise_equal(t.value(t.concat_rows(na, na)), concat_rows(a, a)));
    CHECK(bitwise_equal(t.value(t.slice_rows(na, 1, 3)), slice_rows(a, 1, 3)));
    CHECK(bitwise_equal(t.value(t.softmax_rows(na)), softmax_rows(a)));
    CHECK(bitwise_equal(t.value(t.layer_norm(na, ng, nbias)),
                        layer_norm(a, g, bias, cmab::kLayerNormEps)));
    CHECK(bitwise_equal(t.value(t.relu(na)), relu(a)));
    CHECK(bitwise_equal(t.value(t.softplus(na)), softplus_mat(a)));
    CHECK(t.value(t.mean(na)).at(0, 0) == mean_all(a));
}

TEST_CASE("generic record entry point") {
    Tape t;
    Matrix a(2, 2, {1.0, -2.0, 3.0, -4.0});
    NodeId na = t.leaf(a);
    NodeId r = t.record("relu", {na});
    CHECK(bitwise_equal(t.value(r), relu(a)));
    NodeId s = t.record("scale", {na}, 2.0);
    CHECK(t.value(s).at(0, 1) == -4.0);
    NodeId sl = t.record("slice-rows", {na}, 0.0, 0, 1);
    CHECK(t.value(sl).rows() == 1);
    CHECK_THROWS_AS(t.record("conv2d", {na}), std::invalid_argument);
}

TEST_CASE("backward of mean is uniform") {
    Tape t;
    Matrix a(3, 4);
    NodeId na = t.leaf(a);
    NodeId root = t.mean(na);
    auto grads = t.backward(root);
    for (double v : grads[na].data())
        CHECK(v == doctest::Approx(1.0 / 12.0).epsilon(1e-15));
}

TEST_CASE("backward ignores unreachable parameters") {
    Tape t;
    RngState rng(32);
    NodeId used = t.leaf(random_mat(rng, 2, 2));
    NodeId unused = t.leaf(random_mat(rng, 2, 2));
    NodeId root = t.mean(t.relu(used));
    auto grads = t.backward(root);
    CHECK(grads[unused].empty());
}

TEST_CASE("backward rejects non-scalar roots") {
    Tape t;
    NodeId na = t.leaf(Matrix(2, 2));
    CHECK_THROWS_AS(t.backward(na), std::invalid_argument);
}

TEST_CASE("per-op gradients match finite differences") {
    RngState rng(33);
    const double h = 1e-6;

    auto check_op = [&](auto&& forward, const Matrix& theta) {
        Tape t;
        NodeId p = t.leaf(theta);
        NodeId root = forward(t, p);
        auto grads = t.backward(root);
        Matrix fd = fd_grad(
            [&](const Matrix& th) {
                Tape ft;
                return ft.value(forward(ft, ft.leaf(th))).at(0, 0);
            },
            theta, h);
        for (std::size_t i = 0; i < fd.size(); ++i)
            CHECK(grads[p].data()[i] ==
                  doctest::Approx(fd.data()[i]).epsilon(1e-5));
    };

    Matrix m = random_mat(rng, 3, 4, 1.5);
    Matrix w = random_mat(rng, 4, 3);
    Matrix gain = random_mat(rng, 1, 4);
    Matrix bias = random_mat(rng, 1, 4);

    check_op([&](Tape& t, NodeId p) { return t.mean(t.matmul(p, t.constant(w))); }, m);
    check_op([&](Tape& t, NodeId p) { return t.mean(t.matmul(t.constant(m), p)); }, w);
    check_op([&](Tape& t, NodeId p) {
        return t.mean(t.softmax_rows(t.scale(p, 2.0)));
    }, m);
    check_op([&](Tape& t, NodeId p) {
        NodeId sm = t.softmax_rows(p);
        return t.mean(t.matmul(sm, t.constant(w)));
    }, m);
    check_op([&](Tape& t, NodeId p) {
        return t.mean(t.layer_norm(p, t.constant(gain), t.constant(bias)));
    }, m);
    check_op([&](Tape& t, NodeId p) {
        return t.mean(t.layer_norm(t.constant(m), p, t.constant(bias)));
    }, gain);
    check_op([&](Tape& t, NodeId p) {
        return t.mean(t.layer_norm(t.constant(m), t.constant(gain), p));
    }, bias);
    check_op([&](Tape& t, NodeId p) { return t.mean(t.softplus(p)); }, m);
    check_op([&](Tape& t, NodeId p) { return t.mean(t.transpose(p)); }, m);
    check_op([&](Tape& t, NodeId p) {
        return t.mean(t.concat_rows(p, t.slice_rows(p, 0, 2)));
    }, m);
    // Broadcast add: gradient of the 1xC operand is the column sums.
    check_op([&](Tape& t, NodeId p) {
        return t.mean(t.softmax_rows(t.add(t.constant(m), p)));
    }, bias);
}

TEST_CASE("gaussian_nll value and gradients") {
    Matrix mu(2, 1, {0.5, -1.0});
    Matrix sg(2, 1, {0.7, 1.3});
    Matrix y(2, 1, {0.9, -0.4});
    Tape t;
    NodeId nmu = t.leaf(mu), nsg = t.leaf(sg);
    NodeId root = t.gaussian_nll(nmu, nsg, t.constant(y));
    double want = 0.0;
    for (int i = 0; i < 2; ++i) {
        double z = (y.at(i, 0) - mu.at(i, 0)) / sg.at(i, 0);
        want += 0.91893853320467274178 + std::log(sg.at(i, 0)) + 0.5 * z * z;
    }
    want /= 2.0;
    CHECK(t.value(root).at(0, 0) == doctest::Approx(want).epsilon(1e-15));

    auto grads = t.backward(root);
    const double h = 1e-7;
    for (int i = 0; i < 2; ++i) {
        auto eval = [&](const Matrix& m2, const Matrix& s2) {
            Tape ft;
            return ft.value(ft.gaussian_nll(ft.leaf(m2), ft.leaf(s2),
                                            ft.constant(y))).at(0, 0);
        };
        Matrix mu_up = mu, mu_dn = mu;
        mu_up.at(i, 0) += h;
        mu_dn.at(i, 0) -= h;
        CHECK(grads[nmu].at(i, 0) ==
              doctest::Approx((eval(mu_up, sg) - eval(mu_dn, sg)) / (2 * h))
                  .epsilon(1e-5));
        Matrix sg_up = sg, sg_dn = sg;
        sg_up.at(i, 0) += h;
        sg_dn.at(i, 0) -= h;
        CHECK(grads[nsg].at(i, 0) ==
              doctest::Approx((eval(mu, sg_up) - eval(mu, sg_dn)) / (2 * h))
                  .epsilon(1e-5));
    }
}

TEST_CASE("differentiation is linear over subgraph sums") {
    RngState rng(34);
    Matrix theta = random_mat(rng, 3, 3);
    Matrix w1 = random_mat(rng, 3, 3);
    Matrix w2 = random_mat(rng, 3, 3);

    auto grad_of = [&](bool first, bool second) {
        Tape t;
        NodeId p = t.leaf(theta);
        NodeId acc = -1;
        if (first) acc = t.mean(t.relu(t.matmul(p, t.constant(w1))));
        if (second) {
            NodeId l2 = t.mean(t.softmax_rows(t.matmul(p, t.constant(w2))));
            acc = acc < 0 ? l2 : t.add(acc, l2);
        }
        return t.backward(acc)[p];
    };

    Matrix gsum = grad_of(true, true);
    Matrix g1 = grad_of(true, false);
    Matrix g2 = grad_of(false, true);
    for (std::size_t i = 0; i < gsum.size(); ++i)
        CHECK(gsum.data()[i] ==
              doctest::Approx(g1.data()[i] + g2.data()[i]).epsilon(1e-12));
}

TEST_CASE("grad_check on quadratic and linear losses") {
    RngState rng(35);
    ParamStore params;
    params.add("theta", random_mat(rng, 4, 3));
    params.add("phi", random_mat(rng, 2, 5));

    cmab::LossFn quadratic = [](const ParamStore& p) {
        cmab::LossEval ev;
        for (const auto& [name, m] : p.items()) {
            for (double v : m.data()) ev.loss += 0.5 * v * v;
            ev.grads.push_back(m);  // d(0.5 v^2)/dv = v
        }
        return ev;
    };
    CHECK(cmab::grad_check(quadratic, params, 1e-5, 200, 1) < 1e-9);

    cmab::LossFn linear = [](const ParamStore& p) {
        cmab::LossEval ev;
        for (const auto& [name, m] : p.items()) {
            for (double v : m.data()) ev.loss += v;
            Matrix g(m.rows(), m.cols());
            for (double& v : g.data()) v = 1.0;
            ev.grads.push_back(std::move(g));
        }
        return ev;
    };
    CHECK(cmab::grad_check(linear, params, 1e-5, 200, 2) < 1e-10);
}

TEST_CASE("grad_check reports non-finite losses by parameter") {
    ParamStore params;
    params.add("bad", Matrix(1, 1, {1.0}));
    // Finite at the base point, NaN under any perturbation: the failure
    // must name the perturbed parameter.
    cmab::LossFn nan_loss = [](const ParamStore& p) {
        cmab::LossEval ev;
        double v = p.get("bad").at(0, 0);
        ev.loss = v == 1.0 ? 0.5 : std::nan("");
        ev.grads.emplace_back(1, 1);
        return ev;
    };
    CHECK_THROWS_WITH_AS(cmab::grad_check(nan_loss, params, 1e-5, 10, 0),
                         doctest::Contains("bad"), std::invalid_argument);

    cmab::LossFn base_nan = [](const ParamStore&) {
        cmab::LossEval ev;
        ev.loss = std::nan("");
        ev.grads.emplace_back(1, 1);
        return ev;
    };
    CHECK_THROWS_AS(cmab::grad_check(base_nan, params, 1e-5, 10, 0),
                    std::invalid_argument);
}

TEST_CASE("adam zero gradient leaves parameters untouched") {
    RngState rng(36);
    ParamStore params;
    params.add("w", random_mat(rng, 3, 3));
    Matrix before = params.get("w");
    cmab::AdamState st = cmab::AdamState::init(params);
    std::vector<Matrix> zero{Matrix(3, 3)};
    cmab::adam_step(params, zero, st);
    CHECK(bitwise_equal(params.get("w"), before));
    CHECK(st.step == 1);
}

TEST_CASE("adam first step moves each entry by about lr") {
    RngState rng(37);
    ParamStore params;
    params.add("w", random_mat(rng, 2, 2));
    Matrix before = params.get("w");
    cmab::AdamState st = cmab::AdamState::init(params, 5e-4);
    Matrix g = random_mat(rng, 2, 2, 10.0);
    for (double& v : g.data())
        if (std::abs(v) < 0.1) v = 0.1;  // keep eps negligible
    cmab::adam_step(params, {g}, st);
    for (std::size_t i = 0; i < g.size(); ++i) {
        double step = before.data()[i] - params.get("w").data()[i];
        CHECK(std::abs(step) == doctest::Approx(5e-4).epsilon(1e-3));
        CHECK(step * g.data()[i] > 0.0);  // moves against the gradient
    }
}

TEST_CASE("adam descends a quadratic") {
    RngState rng(38);
    ParamStore params;
    params.add("w", random_mat(rng, 4, 4));
    cmab::AdamState st = cmab::AdamState::init(params, 1e-2);
    auto norm = [&] {
        double s = 0.0;
        for (double v : params.get("w").data()) s += v * v;
        return std::sqrt(s);
    };
    double n0 = norm();
    for (int i = 0; i < 100; ++i)
        cmab::adam_step(params, {params.get("w")}, st);
    CHECK(norm() < n0);
}

TEST_CASE("adam rejects mismatched gradient shapes") {
    ParamStore params;
    params.add("w", Matrix(2, 2));
    cmab::AdamState st = cmab::AdamState::init(params);
    std::vector<Matrix> bad{Matrix(3, 3, std::vector<double>(9, 1.0))};
    CHECK_THROWS_AS(cmab::adam_step(params, bad, st), std::invalid_argument);
}

TEST_CASE("param store enumeration is insertion ordered") {
    ParamStore p;
    p.add("zz", Matrix(1, 1));
    p.add("aa", Matrix(2, 2));
    CHECK(p.items()[0].first == "zz");
    CHECK(p.items()[1].first == "aa");
    CHECK(p.entry_count() == 5);
    CHECK(p.has("aa"));
    CHECK(!p.has("bb"));
    CHECK_THROWS_AS(p.add("aa", Matrix(1, 1)), std::invalid_argument);
}
