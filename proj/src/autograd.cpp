#include "cmab/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "cmab/rng.hpp"

namespace cmab {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;

Matrix zeros_like(const Matrix& m) { return Matrix(m.rows(), m.cols()); }

void accumulate(Matrix& into, const Matrix& g) {
    if (into.empty()) {
        into = g;
        return;
    }
    for (std::size_t i = 0; i < into.size(); ++i)
        into.data()[i] += g.data()[i];
}

}  // namespace

NodeId Tape::push(TapeNode n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::leaf(Matrix value, bool requires_grad) {
    TapeNode n;
    n.kind = OpKind::Leaf;
    n.val = std::move(value);
    n.requires_grad = requires_grad;
    return push(std::move(n));
}

NodeId Tape::matmul(NodeId a, NodeId b) {
    TapeNode n;
    n.kind = OpKind::Matmul;
    n.in = {a, b};
    n.val = cmab::matmul(nodes_[a].val, nodes_[b].val);
    return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
    TapeNode n;
    n.kind = OpKind::Add;
    n.in = {a, b};
    n.val = cmab::add(nodes_[a].val, nodes_[b].val);
    return push(std::move(n));
}

NodeId Tape::scale(NodeId a, double s) {
    TapeNode n;
    n.kind = OpKind::Scale;
    n.in = {a};
    n.scalar = s;
    n.val = cmab::scale(nodes_[a].val, s);
    return push(std::move(n));
}

NodeId Tape::transpose(NodeId a) {
    TapeNode n;
    n.kind = OpKind::Transpose;
    n.in = {a};
    n.val = cmab::transpose(nodes_[a].val);
    return push(std::move(n));
}

NodeId Tape::concat_rows(NodeId a, NodeId b) {
    TapeNode n;
    n.kind = OpKind::ConcatRows;
    n.in = {a, b};
    n.val = cmab::concat_rows(nodes_[a].val, nodes_[b].val);
    return push(std::move(n));
}

NodeId Tape::slice_rows(NodeId a, int r0, int r1) {
    TapeNode n;
    n.kind = OpKind::SliceRows;
    n.in = {a};
    n.r0 = r0;
    n.r1 = r1;
    n.val = cmab::slice_rows(nodes_[a].val, r0, r1);
    return push(std::move(n));
}

NodeId Tape::softmax_rows(NodeId a) {
    TapeNode n;
    n.kind = OpKind::SoftmaxRows;
    n.in = {a};
    n.val = cmab::softmax_rows(nodes_[a].val);
    return push(std::move(n));
}

NodeId Tape::layer_norm(NodeId x, NodeId gain, NodeId bias) {
    TapeNode n;
    n.kind = OpKind::LayerNorm;
    n.in = {x, gain, bias};
    n.val = cmab::layer_norm(nodes_[x].val, nodes_[gain].val, nodes_[bias].val,
                             kLayerNormEps);
    return push(std::move(n));
}

NodeId Tape::softplus(NodeId a) {
    TapeNode n;
    n.kind = OpKind::Softplus;
    n.in = {a};
    n.val = cmab::softplus_mat(nodes_[a].val);
    return push(std::move(n));
}

NodeId Tape::relu(NodeId a) {
    TapeNode n;
    n.kind = OpKind::Relu;
    n.in = {a};
    n.val = cmab::relu(nodes_[a].val);
    return push(std::move(n));
}

NodeId Tape::mean(NodeId a) {
    TapeNode n;
    n.kind = OpKind::Mean;
    n.in = {a};
    n.val = Matrix(1, 1, {cmab::mean_all(nodes_[a].val)});
    return push(std::move(n));
}

NodeId Tape::gaussian_nll(NodeId mu, NodeId sigma, NodeId y) {
    const Matrix& m = nodes_[mu].val;
    const Matrix& s = nodes_[sigma].val;
    const Matrix& t = nodes_[y].val;
    if (m.rows() != s.rows() || m.rows() != t.rows() || m.cols() != 1 ||
        s.cols() != 1 || t.cols() != 1)
        detail::contract_fail("gaussian_nll: expects matching mx1 inputs");
    double acc = 0.0;
    for (int i = 0; i < m.rows(); ++i) {
        double mu_i = m.at(i, 0), s_i = s.at(i, 0), y_i = t.at(i, 0);
        if (!(s_i > 0.0))
            detail::contract_fail("gaussian_nll: sigma must be positive");
        double z = (y_i - mu_i) / s_i;
        acc += kHalfLog2Pi + std::log(s_i) + 0.5 * z * z;
    }
    TapeNode n;
    n.kind = OpKind::GaussianNll;
    n.in = {mu, sigma, y};
    n.val = Matrix(1, 1, {acc / m.rows()});
    return push(std::move(n));
}

NodeId Tape::record(const std::string& op, const std::vector<NodeId>& in,
                    double scalar, int r0, int r1) {
    if (op == "matmul") return matmul(in.at(0), in.at(1));
    if (op == "add") return add(in.at(0), in.at(1));
    if (op == "scale") return scale(in.at(0), scalar);
    if (op == "slice-rows") return slice_rows(in.at(0), r0, r1);
    if (op == "concat-rows") return concat_rows(in.at(0), in.at(1));
    if (op == "softmax_rows") return softmax_rows(in.at(0));
    if (op == "layer_norm") return layer_norm(in.at(0), in.at(1), in.at(2));
    if (op == "softplus") return softplus(in.at(0));
    if (op == "relu") return relu(in.at(0));
    if (op == "mean") return mean(in.at(0));
    if (op == "transpose") return transpose(in.at(0));
    if (op == "gaussian_nll") return gaussian_nll(in.at(0), in.at(1), in.at(2));
    detail::contract_fail("record: unsupported op-kind '" + op + "'");
    return -1;
}

double Tape::min_abs_relu_input() const {
    double best = std::numeric_limits<double>::infinity();
    for (const TapeNode& n : nodes_) {
        if (n.kind != OpKind::Relu) continue;
        for (double v : nodes_[n.in[0]].val.data())
            best = std::min(best, std::abs(v));
    }
    return best;
}

std::vector<Matrix> Tape::backward(NodeId root) const {
    const TapeNode& r = nodes_[root];
    if (r.val.rows() != 1 || r.val.cols() != 1)
        detail::contract_fail("backward: root must be 1x1, got " +
                              r.val.shape_str());
    std::vector<Matrix> grad(nodes_.size());
    grad[root] = Matrix(1, 1, {1.0});

    for (NodeId id = root; id >= 0; --id) {
        const TapeNode& n = nodes_[id];
        if (grad[id].empty() || n.kind == OpKind::Leaf) continue;
        const Matrix& g = grad[id];
        switch (n.kind) {
            case OpKind::Matmul: {
                const Matrix& a = nodes_[n.in[0]].val;
                const Matrix& b = nodes_[n.in[1]].val;
                accumulate(grad[n.in[0]], cmab::matmul(g, cmab::transpose(b)));
                accumulate(grad[n.in[1]], cmab::matmul(cmab::transpose(a), g));
                break;
            }
            case OpKind::Add: {
                const Matrix& a = nodes_[n.in[0]].val;
                const Matrix& b = nodes_[n.in[1]].val;
                accumulate(grad[n.in[0]], g);
                if (b.rows() == a.rows()) {
                    accumulate(grad[n.in[1]], g);
                } else {
                    Matrix gb(1, b.cols());
                    for (int i = 0; i < g.rows(); ++i)
                        for (int j = 0; j < g.cols(); ++j)
                            gb.at(0, j) += g.at(i, j);
                    accumulate(grad[n.in[1]], gb);
                }
                break;
            }
            case OpKind::Scale:
                accumulate(grad[n.in[0]], cmab::scale(g, n.scalar));
                break;
            case OpKind::Transpose:
                accumulate(grad[n.in[0]], cmab::transpose(g));
                break;
            case OpKind::ConcatRows: {
                int ra = nodes_[n.in[0]].val.rows();
                accumulate(grad[n.in[0]], cmab::slice_rows(g, 0, ra));
                accumulate(grad[n.in[1]], cmab::slice_rows(g, ra, g.rows()));
                break;
            }
            case OpKind::SliceRows: {
                const Matrix& a = nodes_[n.in[0]].val;
                Matrix ga = zeros_like(a);
                for (int i = n.r0; i < n.r1; ++i)
                    for (int j = 0; j < a.cols(); ++j)
                        ga.at(i, j) = g.at(i - n.r0, j);
                accumulate(grad[n.in[0]], ga);
                break;
            }
            case OpKind::SoftmaxRows: {
                const Matrix& y = n.val;
                Matrix gx = zeros_like(y);
                for (int i = 0; i < y.rows(); ++i) {
                    double dot = 0.0;
                    for (int j = 0; j < y.cols(); ++j)
                        dot += g.at(i, j) * y.at(i, j);
                    for (int j = 0; j < y.cols(); ++j)
                        gx.at(i, j) = y.at(i, j) * (g.at(i, j) - dot);
                }
                accumulate(grad[n.in[0]], gx);
                break;
            }
            case OpKind::LayerNorm: {
                const Matrix& x = nodes_[n.in[0]].val;
                const Matrix& gain = nodes_[n.in[1]].val;
                const int c = x.cols();
                Matrix gx = zeros_like(x);
                Matrix ggain(1, c);
                Matrix gbias(1, c);
                for (int i = 0; i < x.rows(); ++i) {
                    double mean = 0.0;
                    for (int j = 0; j < c; ++j) mean += x.at(i, j);
                    mean /= c;
                    double var = 0.0;
                    for (int j = 0; j < c; ++j) {
                        double d = x.at(i, j) - mean;
                        var += d * d;
                    }
                    var /= c;
                    double inv = 1.0 / std::sqrt(var + kLayerNormEps);
                    // dxhat, plus gain/bias grads
                    std::vector<double> xhat(c), dxh(c);
                    double m1 = 0.0, m2 = 0.0;
                    for (int j = 0; j < c; ++j) {
                        xhat[j] = (x.at(i, j) - mean) * inv;
                        dxh[j] = g.at(i, j) * gain.at(0, j);
                        ggain.at(0, j) += g.at(i, j) * xhat[j];
                        gbias.at(0, j) += g.at(i, j);
                        m1 += dxh[j];
                        m2 += dxh[j] * xhat[j];
                    }
                    m1 /= c;
                    m2 /= c;
                    for (int j = 0; j < c; ++j)
                        gx.at(i, j) = inv * (dxh[j] - m1 - xhat[j] * m2);
                }
                accumulate(grad[n.in[0]], gx);
                accumulate(grad[n.in[1]], ggain);
                accumulate(grad[n.in[2]], gbias);
                break;
            }
            case OpKind::Softplus: {
                const Matrix& x = nodes_[n.in[0]].val;
                Matrix gx = zeros_like(x);
                for (std::size_t i = 0; i < x.size(); ++i) {
                    double s = 1.0 / (1.0 + std::exp(-x.data()[i]));
                    gx.data()[i] = g.data()[i] * s;
                }
                accumulate(grad[n.in[0]], gx);
                break;
            }
            case OpKind::Relu: {
                const Matrix& x = nodes_[n.in[0]].val;
                Matrix gx = zeros_like(x);
                for (std::size_t i = 0; i < x.size(); ++i)
                    gx.data()[i] = x.data()[i] > 0.0 ? g.data()[i] : 0.0;
                accumulate(grad[n.in[0]], gx);
                break;
            }
            case OpKind::Mean: {
                const Matrix& x = nodes_[n.in[0]].val;
                double w = g.at(0, 0) / static_cast<double>(x.size());
                Matrix gx(x.rows(), x.cols());
                for (double& v : gx.data()) v = w;
                accumulate(grad[n.in[0]], gx);
                break;
            }
            case OpKind::GaussianNll: {
                const Matrix& mu = nodes_[n.in[0]].val;
                const Matrix& sg = nodes_[n.in[1]].val;
                const Matrix& y = nodes_[n.in[2]].val;
                const double w = g.at(0, 0) / mu.rows();
                Matrix gmu(mu.rows(), 1);
                Matrix gsg(mu.rows(), 1);
                for (int i = 0; i < mu.rows(); ++i) {
                    double s = sg.at(i, 0);
                    double diff = y.at(i, 0) - mu.at(i, 0);
                    gmu.at(i, 0) = w * (-diff / (s * s));
                    gsg.at(i, 0) = w * (1.0 / s - diff * diff / (s * s * s));
                }
                accumulate(grad[n.in[0]], gmu);
                accumulate(grad[n.in[1]], gsg);
                break;
            }
            case OpKind::Leaf:
                break;
        }
    }
    return grad;
}

void ParamStore::add(const std::string& name, Matrix value) {
    if (index_.count(name))
        detail::contract_fail("ParamStore: duplicate name '" + name + "'");
    index_[name] = static_cast<int>(items_.size());
    items_.emplace_back(name, std::move(value));
}

Matrix& ParamStore::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end())
        detail::contract_fail("ParamStore: unknown name '" + name + "'");
    return items_[it->second].second;
}

const Matrix& ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
        detail::contract_fail("ParamStore: unknown name '" + name + "'");
    return items_[it->second].second;
}

bool ParamStore::has(const std::string& name) const {
    return index_.count(name) != 0;
}

std::size_t ParamStore::entry_count() const {
    std::size_t total = 0;
    for (const auto& [name, m] : items_) total += m.size();
    return total;
}

AdamState AdamState::init(const ParamStore& params, double lr) {
    AdamState s;
    s.lr = lr;
    for (const auto& [name, m] : params.items()) {
        s.m.emplace_back(m.rows(), m.cols());
        s.v.emplace_back(m.rows(), m.cols());
    }
    return s;
}

void adam_step(ParamStore& params, const std::vector<Matrix>& grads,
               AdamState& state) {
    if (grads.size() != params.count())
        detail::contract_fail("adam_step: gradient count mismatch");
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, state.step);
    const double bc2 = 1.0 - std::pow(state.beta2, state.step);
    for (std::size_t p = 0; p < params.count(); ++p) {
        Matrix& theta = params.items()[p].second;
        const Matrix& g = grads[p];
        if (g.empty()) continue;  // parameter unused by this loss
        if (g.rows() != theta.rows() || g.cols() != theta.cols())
            detail::contract_fail("adam_step: shape mismatch for '" +
                                  params.items()[p].first + "': " +
                                  theta.shape_str() + " vs " + g.shape_str());
        Matrix& m = state.m[p];
        Matrix& v = state.v[p];
        for (std::size_t i = 0; i < theta.size(); ++i) {
            double gi = g.data()[i];
            m.data()[i] = state.beta1 * m.data()[i] + (1.0 - state.beta1) * gi;
            v.data()[i] =
                state.beta2 * v.data()[i] + (1.0 - state.beta2) * gi * gi;
            double mhat = m.data()[i] / bc1;
            double vhat = v.data()[i] / bc2;
            theta.data()[i] -=
                state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

double grad_check(const LossFn& loss, const ParamStore& params, double h,
                  int max_entries, std::uint64_t seed) {
    if (!(h > 0.0)) detail::contract_fail("grad_check: h must be > 0");
    LossEval base = loss(params);
    if (!std::isfinite(base.loss))
        detail::contract_fail("grad_check: non-finite loss at base point");

    // Flatten (param index, entry index) space and sample from it.
    std::vector<std::pair<int, std::size_t>> all;
    for (std::size_t p = 0; p < params.count(); ++p)
        for (std::size_t i = 0; i < params.items()[p].second.size(); ++i)
            all.emplace_back(static_cast<int>(p), i);
    RngState rng(seed);
    std::vector<std::pair<int, std::size_t>> picked;
    if (static_cast<int>(all.size()) <= max_entries) {
        picked = all;
    } else {
        for (int k = 0; k < max_entries; ++k)
            picked.push_back(
                all[static_cast<std::size_t>(rng.next_int(0, all.size() - 1))]);
    }

    double worst = 0.0;
    for (auto [p, i] : picked) {
        ParamStore probe = params;
        double theta = probe.items()[p].second.data()[i];
        double step = h * std::max(1.0, std::abs(theta));
        probe.items()[p].second.data()[i] = theta + step;
        double lp = loss(probe).loss;
        probe.items()[p].second.data()[i] = theta - step;
        double lm = loss(probe).loss;
        if (!std::isfinite(lp) || !std::isfinite(lm))
            detail::contract_fail("grad_check: non-finite loss perturbing '" +
                                  params.items()[p].first + "'");
        double g_fd = (lp - lm) / (2.0 * step);
        double g_a = base.grads[p].empty() ? 0.0 : base.grads[p].data()[i];
        double rel =
            std::abs(g_a - g_fd) / std::max(1e-8, std::abs(g_a) + std::abs(g_fd));
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace cmab
