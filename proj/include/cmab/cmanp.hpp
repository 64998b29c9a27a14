#pragma once

#include <string>
#include <vector>

#include "cmab/autograd.hpp"
#include "cmab/cmab.hpp"

// Constant Memory Attentive Neural Process: stacked CMAB blocks encode a
// context set into fixed-size latents (conditioning), target points read
// them back through cross-attention (querying), and new context is
// absorbed through the blocks' streaming states (updating).

namespace cmab {

struct CmanpConfig {
    int K = 2;       // block depth
    int d = 32;      // model width
    int L_I = 8;     // input/output latent rows
    int L_B = 8;     // bottleneck latent rows
    int heads = 4;
    int d_ff = 64;   // 2*d
    int B_C = 128;   // chunk size for constant-memory conditioning

    static CmanpConfig desk() { return {}; }
    static CmanpConfig deployment() {
        return {2, 64, 128, 128, 8, 128, 128};
    }
};

// Deterministic parameter inventory for a config; names enumerate in the
// exact order the weight file stores tensors.
ParamStore init_cmanp_params(RngState& rng, const CmanpConfig& cfg);

struct CmanpModel {
    CmanpConfig cfg;
    Matrix ctx_w, ctx_b;  // (x, y) pair embedder, 2xd / 1xd
    Matrix x_w, x_b;      // target embedder, 1xd / 1xd
    Matrix lemb0;         // L_I x d, learned
    std::vector<CmabParams<double>> blocks;        // K
    std::vector<AttnParams<double>> query_blocks;  // K
    Matrix pred_w1, pred_b1;  // d x d, 1 x d
    Matrix pred_w2, pred_b2;  // d x 2, 1 x 2
};

// Materializes inference structures from a parameter store.
CmanpModel build_model(const CmanpConfig& cfg, const ParamStore& params);

struct ConditionedState {
    std::vector<CmabState<double>> states;  // per block, CA1 streams
    std::vector<Matrix> lembs;              // per block, L_I x d
    std::int64_t n = 0;
};

Matrix embed_context(const CmanpModel& model, const Matrix& ctx_x,
                     const Matrix& ctx_y);
Matrix embed_targets(const CmanpModel& model, const Matrix& tgt_x);

// chunk_size == 0 runs each block in a single pass; otherwise the
// context is consumed in chunks of at most chunk_size rows.
ConditionedState condition(const CmanpModel& model, const Matrix& ctx_x,
                           const Matrix& ctx_y, int chunk_size = 0);

// Predictions as an Mx2 matrix of (mean, std) rows. std has a 0.01 floor.
Matrix query(const CmanpModel& model, const ConditionedState& state,
             const Matrix& tgt_x);

// Absorbs new context pairs into every block's stream and refreshes the
// cached latents. No cost term in the historical context size.
void update_context(const CmanpModel& model, ConditionedState& state,
                    const Matrix& new_x, const Matrix& new_y);

// Mean negative Gaussian log-density of labels under (mean, std) rows.
double nll(const Matrix& predictions, const Matrix& labels);

struct Task {
    Matrix ctx_x, ctx_y;  // N x 1
    Matrix tgt_x, tgt_y;  // M x 1
};

// y = a*sin(x + p) + noise, a ~ U[0.5,1.5], p ~ U[0,pi], x ~ U[-2,2],
// noise ~ N(0, 0.05^2); N ~ U{3..47}, M ~ U{3..50-N}.
std::vector<Task> gen_sine_tasks(RngState& rng, int count);

// Per-task Gaussian fit to the context labels, scored on the targets.
// The reference point for the learning-signal check.
double context_marginal_baseline_nll(const std::vector<Task>& tasks);

// Single-pass taped forward of the full training objective for a batch
// of tasks. Returns the scalar root; leaf ids for the parameters are
// written to param_nodes (aligned with params.items()).
NodeId taped_batch_loss(Tape& tape, const ParamStore& params,
                        const CmanpConfig& cfg, const std::vector<Task>& batch,
                        std::vector<NodeId>& param_nodes);

LossEval eval_loss_and_grads(const ParamStore& params, const CmanpConfig& cfg,
                             const std::vector<Task>& batch);

struct TrainOptions {
    int steps = 5000;
    int batch_tasks = 8;
    double lr = 5e-4;
    int trace_every = 50;
};

struct TraceRow {
    int step;
    double nll;
};

// Adam training on synthetic sine tasks; deterministic given seed.
// Aborts with step index on a non-finite loss.
std::vector<TraceRow> train(ParamStore& params, const CmanpConfig& cfg,
                            RngState& rng, const TrainOptions& opts);

// Mean held-out NLL per point of the inference path over tasks.
double eval_model_nll(const CmanpModel& model, const std::vector<Task>& tasks);

}  // namespace cmab
