#include "cmab/cmanp.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cmab {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;
constexpr double kSigmaFloor = 0.01;
constexpr double kSigmaScale = 0.99;

Matrix ones_row(int n) {
    Matrix m(1, n);
    for (double& v : m.data()) v = 1.0;
    return m;
}

void add_attn_params(ParamStore& store, RngState& rng, const std::string& pfx,
                     int d, int d_ff) {
    store.add(pfx + ".wq", init_matrix<double>(rng, d, d, InitScheme::UniformFanIn));
    store.add(pfx + ".wk", init_matrix<double>(rng, d, d, InitScheme::UniformFanIn));
    store.add(pfx + ".wv", init_matrix<double>(rng, d, d, InitScheme::UniformFanIn));
    store.add(pfx + ".wo", init_matrix<double>(rng, d, d, InitScheme::UniformFanIn));
    store.add(pfx + ".lnq_g", ones_row(d));
    store.add(pfx + ".lnq_b", Matrix(1, d));
    store.add(pfx + ".lnkv_g", ones_row(d));
    store.add(pfx + ".lnkv_b", Matrix(1, d));
    store.add(pfx + ".w1", init_matrix<double>(rng, d, d_ff, InitScheme::UniformFanIn));
    store.add(pfx + ".b1", Matrix(1, d_ff));
    store.add(pfx + ".w2", init_matrix<double>(rng, d_ff, d, InitScheme::UniformFanIn));
    store.add(pfx + ".b2", Matrix(1, d));
    store.add(pfx + ".lnf_g", ones_row(d));
    store.add(pfx + ".lnf_b", Matrix(1, d));
}

AttnParams<double> attn_from_store(const ParamStore& s, const std::string& pfx,
                                   int d, int heads, int d_ff) {
    AttnParams<double> p;
    p.heads = heads;
    p.d = d;
    p.d_h = d / heads;
    p.d_ff = d_ff;
    p.wq = s.get(pfx + ".wq");
    p.wk = s.get(pfx + ".wk");
    p.wv = s.get(pfx + ".wv");
    p.wo = s.get(pfx + ".wo");
    p.lnq_g = s.get(pfx + ".lnq_g");
    p.lnq_b = s.get(pfx + ".lnq_b");
    p.lnkv_g = s.get(pfx + ".lnkv_g");
    p.lnkv_b = s.get(pfx + ".lnkv_b");
    p.w1 = s.get(pfx + ".w1");
    p.b1 = s.get(pfx + ".b1");
    p.w2 = s.get(pfx + ".w2");
    p.b2 = s.get(pfx + ".b2");
    p.lnf_g = s.get(pfx + ".lnf_g");
    p.lnf_b = s.get(pfx + ".lnf_b");
    return p;
}

Matrix pair_columns(const Matrix& x, const Matrix& y) {
    Matrix out(x.rows(), 2);
    for (int i = 0; i < x.rows(); ++i) {
        out.at(i, 0) = x.at(i, 0);
        out.at(i, 1) = y.at(i, 0);
    }
    return out;
}

}  // namespace

ParamStore init_cmanp_params(RngState& rng, const CmanpConfig& cfg) {
    if (cfg.heads <= 0 || cfg.d % cfg.heads != 0)
        detail::contract_fail("init_cmanp_params: heads must divide d");
    ParamStore s;
    s.add("embed.ctx.w", init_matrix<double>(rng, 2, cfg.d, InitScheme::UniformFanIn));
    s.add("embed.ctx.b", Matrix(1, cfg.d));
    s.add("embed.x.w", init_matrix<double>(rng, 1, cfg.d, InitScheme::UniformFanIn));
    s.add("embed.x.b", Matrix(1, cfg.d));
    s.add("lemb0", init_matrix<double>(rng, cfg.L_I, cfg.d, InitScheme::Normal002));
    for (int k = 0; k < cfg.K; ++k) {
        std::string b = "block" + std::to_string(k);
        s.add(b + ".bemb",
              init_matrix<double>(rng, cfg.L_B, cfg.d, InitScheme::Normal002));
        add_attn_params(s, rng, b + ".ca1", cfg.d, cfg.d_ff);
        add_attn_params(s, rng, b + ".sa1", cfg.d, cfg.d_ff);
        add_attn_params(s, rng, b + ".ca2", cfg.d, cfg.d_ff);
        add_attn_params(s, rng, b + ".sa2", cfg.d, cfg.d_ff);
    }
    for (int k = 0; k < cfg.K; ++k)
        add_attn_params(s, rng, "query" + std::to_string(k), cfg.d, cfg.d_ff);
    s.add("pred.w1", init_matrix<double>(rng, cfg.d, cfg.d, InitScheme::UniformFanIn));
    s.add("pred.b1", Matrix(1, cfg.d));
    s.add("pred.w2", init_matrix<double>(rng, cfg.d, 2, InitScheme::UniformFanIn));
    s.add("pred.b2", Matrix(1, 2));
    return s;
}

CmanpModel build_model(const CmanpConfig& cfg, const ParamStore& s) {
    CmanpModel m;
    m.cfg = cfg;
    m.ctx_w = s.get("embed.ctx.w");
    m.ctx_b = s.get("embed.ctx.b");
    m.x_w = s.get("embed.x.w");
    m.x_b = s.get("embed.x.b");
    m.lemb0 = s.get("lemb0");
    for (int k = 0; k < cfg.K; ++k) {
        std::string b = "block" + std::to_string(k);
        CmabParams<double> p;
        p.L_B = cfg.L_B;
        p.L_I = cfg.L_I;
        p.d = cfg.d;
        p.bemb = s.get(b + ".bemb");
        p.ca1 = attn_from_store(s, b + ".ca1", cfg.d, cfg.heads, cfg.d_ff);
        p.sa1 = attn_from_store(s, b + ".sa1", cfg.d, cfg.heads, cfg.d_ff);
        p.ca2 = attn_from_store(s, b + ".ca2", cfg.d, cfg.heads, cfg.d_ff);
        p.sa2 = attn_from_store(s, b + ".sa2", cfg.d, cfg.heads, cfg.d_ff);
        m.blocks.push_back(std::move(p));
    }
    for (int k = 0; k < cfg.K; ++k)
        m.query_blocks.push_back(attn_from_store(
            s, "query" + std::to_string(k), cfg.d, cfg.heads, cfg.d_ff));
    m.pred_w1 = s.get("pred.w1");
    m.pred_b1 = s.get("pred.b1");
    m.pred_w2 = s.get("pred.w2");
    m.pred_b2 = s.get("pred.b2");
    return m;
}

Matrix embed_context(const CmanpModel& model, const Matrix& ctx_x,
                     const Matrix& ctx_y) {
    return add(matmul(pair_columns(ctx_x, ctx_y), model.ctx_w), model.ctx_b);
}

Matrix embed_targets(const CmanpModel& model, const Matrix& tgt_x) {
    return add(matmul(tgt_x, model.x_w), model.x_b);
}

ConditionedState condition(const CmanpModel& model, const Matrix& ctx_x,
                           const Matrix& ctx_y, int chunk_size) {
    const int n = ctx_x.rows();
    if (n == 0) detail::contract_fail("condition: context must be nonempty");
    if (ctx_y.rows() != n)
        detail::contract_fail("condition: context x/y row mismatch");
    ConditionedState st;
    st.n = n;
    for (int k = 0; k < model.cfg.K; ++k) {
        const Matrix& iemb = k == 0 ? model.lemb0 : st.lembs[k - 1];
        if (chunk_size <= 0) {
            auto res = cmab_forward_full(model.blocks[k], iemb,
                                         embed_context(model, ctx_x, ctx_y));
            st.states.push_back(std::move(res.state));
            st.lembs.push_back(std::move(res.oemb));
        } else {
            // Each chunk is embedded on the fly so transient memory is
            // bounded by the chunk size, not the context size.
            CmabState<double> state{&model.blocks[k], {}};
            for (int r0 = 0; r0 < n; r0 += chunk_size) {
                int r1 = std::min(n, r0 + chunk_size);
                Matrix e = embed_context(model, slice_rows(ctx_x, r0, r1),
                                         slice_rows(ctx_y, r0, r1));
                if (r0 == 0)
                    state.stream = stream_init(model.blocks[k], e);
                else
                    stream_update(state.stream, model.blocks[k], e);
            }
            Matrix oemb =
                cmab_downstream(model.blocks[k], iemb, state.stream, nullptr);
            st.states.push_back(std::move(state));
            st.lembs.push_back(std::move(oemb));
        }
    }
    return st;
}

Matrix query(const CmanpModel& model, const ConditionedState& state,
             const Matrix& tgt_x) {
    if (tgt_x.rows() == 0)
        detail::contract_fail("query: target set must be nonempty");
    Matrix q = embed_targets(model, tgt_x);
    for (int k = 0; k < model.cfg.K; ++k)
        q = cross_attention(model.query_blocks[k], q,
                            project_kv(model.query_blocks[k], state.lembs[k]));
    Matrix h = relu(add(matmul(q, model.pred_w1), model.pred_b1));
    Matrix out = add(matmul(h, model.pred_w2), model.pred_b2);
    Matrix pred(tgt_x.rows(), 2);
    for (int i = 0; i < tgt_x.rows(); ++i) {
        pred.at(i, 0) = out.at(i, 0);
        pred.at(i, 1) = kSigmaFloor + kSigmaScale * softplus(out.at(i, 1));
    }
    return pred;
}

void update_context(const CmanpModel& model, ConditionedState& state,
                    const Matrix& new_x, const Matrix& new_y) {
    const int u = new_x.rows();
    Matrix e = u > 0 ? embed_context(model, new_x, new_y) : Matrix(0, model.cfg.d);
    for (int k = 0; k < model.cfg.K; ++k) {
        const Matrix& iemb = k == 0 ? model.lemb0 : state.lembs[k - 1];
        state.lembs[k] = cmab_update(state.states[k], iemb, e);
    }
    state.n += u;
}

double nll(const Matrix& predictions, const Matrix& labels) {
    if (predictions.rows() != labels.rows() || predictions.cols() != 2 ||
        labels.cols() != 1)
        detail::contract_fail("nll: expects Mx2 predictions and Mx1 labels");
    if (!predictions.all_finite() || !labels.all_finite())
        detail::contract_fail("nll: non-finite inputs");
    double acc = 0.0;
    for (int i = 0; i < labels.rows(); ++i) {
        double mu = predictions.at(i, 0);
        double sg = predictions.at(i, 1);
        if (!(sg > 0.0)) detail::contract_fail("nll: sigma must be positive");
        double z = (labels.at(i, 0) - mu) / sg;
        acc += kHalfLog2Pi + std::log(sg) + 0.5 * z * z;
    }
    return acc / labels.rows();
}

std::vector<Task> gen_sine_tasks(RngState& rng, int count) {
    std::vector<Task> tasks;
    tasks.reserve(static_cast<std::size_t>(count));
    for (int t = 0; t < count; ++t) {
        double a = rng.next_uniform(0.5, 1.5);
        double p = rng.next_uniform(0.0, 3.14159265358979323846);
        int n = static_cast<int>(rng.next_int(3, 47));
        int m = static_cast<int>(rng.next_int(3, 50 - n));
        Task task{Matrix(n, 1), Matrix(n, 1), Matrix(m, 1), Matrix(m, 1)};
        for (int i = 0; i < n; ++i) {
            double x = rng.next_uniform(-2.0, 2.0);
            task.ctx_x.at(i, 0) = x;
            task.ctx_y.at(i, 0) = a * std::sin(x + p) + 0.05 * rng.next_normal();
        }
        for (int i = 0; i < m; ++i) {
            double x = rng.next_uniform(-2.0, 2.0);
            task.tgt_x.at(i, 0) = x;
            task.tgt_y.at(i, 0) = a * std::sin(x + p) + 0.05 * rng.next_normal();
        }
        tasks.push_back(std::move(task));
    }
    return tasks;
}

double context_marginal_baseline_nll(const std::vector<Task>& tasks) {
    double acc = 0.0;
    std::int64_t points = 0;
    for (const Task& t : tasks) {
        double mu = 0.0;
        for (double y : t.ctx_y.data()) mu += y;
        mu /= t.ctx_y.rows();
        double var = 0.0;
        for (double y : t.ctx_y.data()) var += (y - mu) * (y - mu);
        var /= t.ctx_y.rows();
        double sg = std::max(std::sqrt(var), 1e-8);
        for (double y : t.tgt_y.data()) {
            double z = (y - mu) / sg;
            acc += kHalfLog2Pi + std::log(sg) + 0.5 * z * z;
        }
        points += t.tgt_y.rows();
    }
    return acc / static_cast<double>(points);
}

namespace {

struct AttnNodes {
    NodeId wq, wk, wv, wo;
    NodeId lnq_g, lnq_b, lnkv_g, lnkv_b;
    NodeId w1, b1, w2, b2, lnf_g, lnf_b;
};

struct TapedCmanp {
    Tape* tape;
    const CmanpConfig* cfg;
    std::vector<NodeId> sel;    // d x d_h head selectors (constants)
    std::vector<NodeId> sel_t;  // d_h x d
    NodeId col0, col1;          // 2 x 1 column pickers
    NodeId ctx_w, ctx_b, x_w, x_b, lemb0;
    std::vector<AttnNodes> ca1, sa1, ca2, sa2, qb;
    std::vector<NodeId> bemb;
    NodeId pred_w1, pred_b1, pred_w2, pred_b2;
};

AttnNodes attn_nodes(Tape& t, const ParamStore& s, const std::string& pfx,
                     std::vector<NodeId>& param_nodes) {
    auto grab = [&](const std::string& field) {
        NodeId id = t.leaf(s.get(pfx + "." + field));
        param_nodes.push_back(id);
        return id;
    };
    AttnNodes a;
    a.wq = grab("wq");
    a.wk = grab("wk");
    a.wv = grab("wv");
    a.wo = grab("wo");
    a.lnq_g = grab("lnq_g");
    a.lnq_b = grab("lnq_b");
    a.lnkv_g = grab("lnkv_g");
    a.lnkv_b = grab("lnkv_b");
    a.w1 = grab("w1");
    a.b1 = grab("b1");
    a.w2 = grab("w2");
    a.b2 = grab("b2");
    a.lnf_g = grab("lnf_g");
    a.lnf_b = grab("lnf_b");
    return a;
}

NodeId taped_attention(TapedCmanp& tc, const AttnNodes& a, NodeId queries,
                       NodeId kvsrc) {
    Tape& t = *tc.tape;
    const int heads = tc.cfg->heads;
    const int d_h = tc.cfg->d / heads;
    NodeId qn = t.layer_norm(queries, a.lnq_g, a.lnq_b);
    NodeId q = t.matmul(qn, a.wq);
    NodeId kn = t.layer_norm(kvsrc, a.lnkv_g, a.lnkv_b);
    NodeId k = t.matmul(kn, a.wk);
    NodeId v = t.matmul(kn, a.wv);
    NodeId attn = -1;
    for (int h = 0; h < heads; ++h) {
        NodeId qh = t.matmul(q, tc.sel[h]);
        NodeId kh = t.matmul(k, tc.sel[h]);
        NodeId vh = t.matmul(v, tc.sel[h]);
        NodeId scores =
            t.scale(t.matmul(qh, t.transpose(kh)), 1.0 / std::sqrt(d_h));
        NodeId weights = t.softmax_rows(scores);
        NodeId oh = t.matmul(weights, vh);
        NodeId partial = t.matmul(oh, t.matmul(tc.sel_t[h], a.wo));
        attn = h == 0 ? partial : t.add(attn, partial);
    }
    NodeId out = t.add(queries, attn);
    NodeId f = t.layer_norm(out, a.lnf_g, a.lnf_b);
    NodeId mid = t.relu(t.add(t.matmul(f, a.w1), a.b1));
    return t.add(out, t.add(t.matmul(mid, a.w2), a.b2));
}

NodeId taped_cmab(TapedCmanp& tc, int k, NodeId iemb, NodeId input) {
    NodeId ca1 = taped_attention(tc, tc.ca1[k], tc.bemb[k], input);
    NodeId demb = taped_attention(tc, tc.sa1[k], ca1, ca1);
    NodeId ca2 = taped_attention(tc, tc.ca2[k], iemb, demb);
    return taped_attention(tc, tc.sa2[k], ca2, ca2);
}

TapedCmanp build_taped(Tape& tape, const ParamStore& s, const CmanpConfig& cfg,
                       std::vector<NodeId>& param_nodes) {
    TapedCmanp tc;
    tc.tape = &tape;
    tc.cfg = &cfg;
    const int d_h = cfg.d / cfg.heads;
    for (int h = 0; h < cfg.heads; ++h) {
        Matrix e(cfg.d, d_h);
        for (int c = 0; c < d_h; ++c) e.at(h * d_h + c, c) = 1.0;
        tc.sel.push_back(tape.constant(e));
        tc.sel_t.push_back(tape.constant(transpose(e)));
    }
    tc.col0 = tape.constant(Matrix(2, 1, {1.0, 0.0}));
    tc.col1 = tape.constant(Matrix(2, 1, {0.0, 1.0}));

    auto grab = [&](const std::string& name) {
        NodeId id = tape.leaf(s.get(name));
        param_nodes.push_back(id);
        return id;
    };
    // Leaf creation order mirrors the store enumeration order.
    tc.ctx_w = grab("embed.ctx.w");
    tc.ctx_b = grab("embed.ctx.b");
    tc.x_w = grab("embed.x.w");
    tc.x_b = grab("embed.x.b");
    tc.lemb0 = grab("lemb0");
    for (int k = 0; k < cfg.K; ++k) {
        std::string b = "block" + std::to_string(k);
        tc.bemb.push_back(grab(b + ".bemb"));
        tc.ca1.push_back(attn_nodes(tape, s, b + ".ca1", param_nodes));
        tc.sa1.push_back(attn_nodes(tape, s, b + ".sa1", param_nodes));
        tc.ca2.push_back(attn_nodes(tape, s, b + ".ca2", param_nodes));
        tc.sa2.push_back(attn_nodes(tape, s, b + ".sa2", param_nodes));
    }
    for (int k = 0; k < cfg.K; ++k)
        tc.qb.push_back(
            attn_nodes(tape, s, "query" + std::to_string(k), param_nodes));
    tc.pred_w1 = grab("pred.w1");
    tc.pred_b1 = grab("pred.b1");
    tc.pred_w2 = grab("pred.w2");
    tc.pred_b2 = grab("pred.b2");
    return tc;
}

NodeId taped_task_loss(TapedCmanp& tc, const Task& task) {
    Tape& t = *tc.tape;
    const CmanpConfig& cfg = *tc.cfg;
    NodeId ctx = t.constant(pair_columns(task.ctx_x, task.ctx_y));
    NodeId e = t.add(t.matmul(ctx, tc.ctx_w), tc.ctx_b);
    std::vector<NodeId> lembs;
    NodeId lemb = tc.lemb0;
    for (int k = 0; k < cfg.K; ++k) {
        lemb = taped_cmab(tc, k, lemb, e);
        lembs.push_back(lemb);
    }
    NodeId q = t.add(t.matmul(t.constant(task.tgt_x), tc.x_w), tc.x_b);
    for (int k = 0; k < cfg.K; ++k)
        q = taped_attention(tc, tc.qb[k], q, lembs[k]);
    NodeId mid = t.relu(t.add(t.matmul(q, tc.pred_w1), tc.pred_b1));
    NodeId out = t.add(t.matmul(mid, tc.pred_w2), tc.pred_b2);
    NodeId mu = t.matmul(out, tc.col0);
    NodeId sraw = t.matmul(out, tc.col1);
    Matrix floor_mat(task.tgt_x.rows(), 1);
    for (double& v : floor_mat.data()) v = kSigmaFloor;
    NodeId sigma =
        t.add(t.scale(t.softplus(sraw), kSigmaScale), t.constant(floor_mat));
    return t.gaussian_nll(mu, sigma, t.constant(task.tgt_y));
}

}  // namespace

NodeId taped_batch_loss(Tape& tape, const ParamStore& params,
                        const CmanpConfig& cfg, const std::vector<Task>& batch,
                        std::vector<NodeId>& param_nodes) {
    if (batch.empty())
        detail::contract_fail("taped_batch_loss: empty task batch");
    TapedCmanp tc = build_taped(tape, params, cfg, param_nodes);
    NodeId stacked = -1;
    for (const Task& task : batch) {
        NodeId l = taped_task_loss(tc, task);
        stacked = stacked < 0 ? l : tape.concat_rows(stacked, l);
    }
    return tape.mean(stacked);
}

LossEval eval_loss_and_grads(const ParamStore& params, const CmanpConfig& cfg,
                             const std::vector<Task>& batch) {
    Tape tape;
    std::vector<NodeId> param_nodes;
    NodeId root = taped_batch_loss(tape, params, cfg, batch, param_nodes);
    std::vector<Matrix> all = tape.backward(root);
    LossEval ev;
    ev.loss = tape.value(root).at(0, 0);
    ev.grads.reserve(param_nodes.size());
    for (NodeId id : param_nodes) {
        if (all[id].empty())
            ev.grads.emplace_back(tape.value(id).rows(), tape.value(id).cols());
        else
            ev.grads.push_back(std::move(all[id]));
    }
    return ev;
}

std::vector<TraceRow> train(ParamStore& params, const CmanpConfig& cfg,
                            RngState& rng, const TrainOptions& opts) {
    if (opts.steps < 1) detail::contract_fail("train: steps must be >= 1");
    AdamState adam = AdamState::init(params, opts.lr);
    std::vector<TraceRow> trace;
    for (int step = 1; step <= opts.steps; ++step) {
        RngState task_rng = rng.split(static_cast<std::uint64_t>(step));
        std::vector<Task> batch = gen_sine_tasks(task_rng, opts.batch_tasks);
        LossEval ev = eval_loss_and_grads(params, cfg, batch);
        if (!std::isfinite(ev.loss)) {
            std::string diag = "train: non-finite loss at step " +
                               std::to_string(step);
            for (const auto& [name, m] : params.items())
                if (!m.all_finite()) diag += "; non-finite parameter " + name;
            throw std::runtime_error(diag);
        }
        adam_step(params, ev.grads, adam);
        if (step % opts.trace_every == 0 || step == 1)
            trace.push_back({step, ev.loss});
    }
    return trace;
}

double eval_model_nll(const CmanpModel& model, const std::vector<Task>& tasks) {
    double acc = 0.0;
    std::int64_t points = 0;
    for (const Task& t : tasks) {
        ConditionedState st = condition(model, t.ctx_x, t.ctx_y);
        Matrix pred = query(model, st, t.tgt_x);
        acc += nll(pred, t.tgt_y) * t.tgt_y.rows();
        points += t.tgt_y.rows();
    }
    return acc / static_cast<double>(points);
}

}  // namespace cmab
