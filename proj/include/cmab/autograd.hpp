#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cmab/matrix.hpp"

// Reverse-mode differentiation over the numerics primitives. A Tape is
// built forward (each record() call evaluates through the same numerics
// functions inference uses) and differentiated backward from a single
// scalar root. Training-only; the streaming/chunked paths are never
// recorded.

namespace cmab {

enum class OpKind {
    Leaf,         // parameter or constant input
    Matmul,
    Add,          // elementwise, or broadcast of a 1xC second input
    Scale,
    Transpose,
    ConcatRows,
    SliceRows,
    SoftmaxRows,
    LayerNorm,    // inputs: x, gain, bias
    Softplus,
    Relu,
    Mean,
    GaussianNll,  // inputs: mu, sigma, y (y treated as data)
};

using NodeId = int;

struct TapeNode {
    OpKind kind = OpKind::Leaf;
    std::vector<NodeId> in;
    Matrix val;
    double scalar = 0.0;  // Scale factor
    int r0 = 0, r1 = 0;   // SliceRows bounds
    bool requires_grad = true;
};

class Tape {
public:
    NodeId leaf(Matrix value, bool requires_grad = true);
    NodeId constant(Matrix value) { return leaf(std::move(value), false); }

    NodeId matmul(NodeId a, NodeId b);
    NodeId add(NodeId a, NodeId b);
    NodeId scale(NodeId a, double s);
    NodeId transpose(NodeId a);
    NodeId concat_rows(NodeId a, NodeId b);
    NodeId slice_rows(NodeId a, int r0, int r1);
    NodeId softmax_rows(NodeId a);
    NodeId layer_norm(NodeId x, NodeId gain, NodeId bias);
    NodeId softplus(NodeId a);
    NodeId relu(NodeId a);
    NodeId mean(NodeId a);
    NodeId gaussian_nll(NodeId mu, NodeId sigma, NodeId y);

    // Generic entry point; op names match the OpKind list. Unsupported
    // names are a contract violation. scalar feeds "scale"; r0/r1 feed
    // "slice-rows".
    NodeId record(const std::string& op, const std::vector<NodeId>& inputs,
                  double scalar = 0.0, int r0 = 0, int r1 = 0);

    const Matrix& value(NodeId id) const { return nodes_[id].val; }
    std::size_t node_count() const { return nodes_.size(); }

    // Gradients of a 1x1 root w.r.t. every node (indexed by NodeId).
    // Entries for nodes the root does not depend on are empty matrices.
    std::vector<Matrix> backward(NodeId root) const;

    // Smallest |pre-activation| seen by any relu node; used to keep
    // finite-difference checks away from the kink.
    double min_abs_relu_input() const;

private:
    NodeId push(TapeNode n);
    std::vector<TapeNode> nodes_;
};

// Named parameter collection with deterministic enumeration order.
class ParamStore {
public:
    void add(const std::string& name, Matrix value);
    Matrix& get(const std::string& name);
    const Matrix& get(const std::string& name) const;
    bool has(const std::string& name) const;
    std::size_t count() const { return items_.size(); }
    std::size_t entry_count() const;  // total scalar entries
    const std::vector<std::pair<std::string, Matrix>>& items() const {
        return items_;
    }
    std::vector<std::pair<std::string, Matrix>>& items() { return items_; }

private:
    std::vector<std::pair<std::string, Matrix>> items_;
    std::map<std::string, int> index_;
};

struct AdamState {
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long step = 0;
    std::vector<Matrix> m;  // first moments, aligned with the ParamStore
    std::vector<Matrix> v;  // second moments

    static AdamState init(const ParamStore& params, double lr = 5e-4);
};

// One bias-corrected Adam step. grads is aligned with params.items().
void adam_step(ParamStore& params, const std::vector<Matrix>& grads,
               AdamState& state);

struct LossEval {
    double loss = 0.0;
    std::vector<Matrix> grads;  // aligned with the ParamStore, analytic
};

using LossFn = std::function<LossEval(const ParamStore&)>;

// Central-difference verification of analytic gradients. Samples up to
// max_entries parameter entries (seeded, all entries if fewer exist) and
// returns the max of |g_a - g_fd| / max(1e-8, |g_a| + |g_fd|). Step per
// entry is h * max(1, |theta|).
double grad_check(const LossFn& loss, const ParamStore& params, double h,
                  int max_entries = 200, std::uint64_t seed = 0);

}  // namespace cmab
