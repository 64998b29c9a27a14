#include "cmab/checks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cmab/cmab.hpp"
#include "cmab/cmanp.hpp"

namespace cmab {

namespace {

Matrix random_mat(RngState& rng, int rows, int cols, double scl = 1.0) {
    Matrix m(rows, cols);
    for (double& v : m.data()) v = scl * rng.next_uniform(-1.0, 1.0);
    return m;
}

Matrix permute_rows(const Matrix& m, const std::vector<int>& perm) {
    Matrix out(m.rows(), m.cols());
    for (int i = 0; i < m.rows(); ++i)
        for (int j = 0; j < m.cols(); ++j) out.at(i, j) = m.at(perm[i], j);
    return out;
}

std::vector<int> random_perm(RngState& rng, int n) {
    std::vector<int> p(n);
    for (int i = 0; i < n; ++i) p[i] = i;
    for (int i = n - 1; i > 0; --i)
        std::swap(p[i], p[rng.next_int(0, i)]);
    return p;
}

struct RandomCmabInstance {
    CmabParams<double> params;
    Matrix iemb;
    Matrix data;
    Matrix extra;
};

RandomCmabInstance random_instance(RngState& rng) {
    static const int latents[] = {2, 4, 8};
    static const int dims[] = {8, 16, 32};
    static const int heads[] = {1, 2, 4};
    int L_B = latents[rng.next_int(0, 2)];
    int L_I = latents[rng.next_int(0, 2)];
    int d = dims[rng.next_int(0, 2)];
    int h = heads[rng.next_int(0, 2)];
    int n = static_cast<int>(rng.next_int(1, 64));
    int u = static_cast<int>(rng.next_int(0, 16));
    RandomCmabInstance inst{
        CmabParams<double>::init(rng, L_B, L_I, d, h, 2 * d),
        random_mat(rng, L_I, d, 0.1), random_mat(rng, n, d),
        random_mat(rng, u, d)};
    return inst;
}

}  // namespace

double max_rel_err(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        return std::numeric_limits<double>::infinity();
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double x = a.data()[i], y = b.data()[i];
        double err = std::abs(x - y) / std::max(1.0, std::abs(x) + std::abs(y));
        worst = std::max(worst, err);
    }
    return worst;
}

EquivalenceReport run_equivalence_suite(std::uint64_t seed, int trials,
                                        double tol,
                                        const CmanpConfig* model_cfg) {
    EquivalenceReport rep;
    PropertyResult upd{"cmab-update-vs-recompute", 0.0, tol, false};
    PropertyResult chunk{"cmab-chunking-invariance", 0.0, tol, false};
    PropertyResult perm{"cmab-permutation-invariance", 0.0, tol, false};
    PropertyResult assoc{"cmab-update-associativity", 0.0, tol, false};

    RngState root(seed);
    for (int t = 0; t < trials; ++t) {
        RngState rng = root.split(static_cast<std::uint64_t>(t));
        RandomCmabInstance inst = random_instance(rng);
        const int n = inst.data.rows();

        // Update then recompute over the union.
        auto fwd = cmab_forward_full(inst.params, inst.iemb, inst.data);
        Matrix updated = cmab_update(fwd.state, inst.iemb, inst.extra);
        Matrix unioned = concat_rows(inst.data, inst.extra);
        auto full = cmab_forward_full(inst.params, inst.iemb, unioned);
        upd.worst_err =
            std::max(upd.worst_err, max_rel_err(updated, full.oemb));

        // Random partition of the data into ordered chunks.
        std::vector<Mat<double>> chunks;
        int r = 0;
        while (r < n) {
            int len = static_cast<int>(rng.next_int(1, std::min(n - r, 16)));
            chunks.push_back(slice_rows(inst.data, r, r + len));
            r += len;
        }
        auto chunked = cmab_forward_chunked(inst.params, inst.iemb, chunks, 16);
        auto single = cmab_forward_full(inst.params, inst.iemb, inst.data);
        chunk.worst_err =
            std::max(chunk.worst_err, max_rel_err(chunked.oemb, single.oemb));

        // Row permutation of the input.
        Matrix shuffled = permute_rows(inst.data, random_perm(rng, n));
        auto permuted = cmab_forward_full(inst.params, inst.iemb, shuffled);
        perm.worst_err =
            std::max(perm.worst_err, max_rel_err(permuted.oemb, single.oemb));

        // update(update(S, A), B) vs update(S, A ∪ B).
        if (inst.extra.rows() >= 2) {
            int cut = static_cast<int>(rng.next_int(1, inst.extra.rows() - 1));
            auto s1 = cmab_forward_full(inst.params, inst.iemb, inst.data);
            cmab_update(s1.state, inst.iemb, slice_rows(inst.extra, 0, cut));
            Matrix two = cmab_update(s1.state, inst.iemb,
                                     slice_rows(inst.extra, cut,
                                                inst.extra.rows()));
            auto s2 = cmab_forward_full(inst.params, inst.iemb, inst.data);
            Matrix one = cmab_update(s2.state, inst.iemb, inst.extra);
            assoc.worst_err = std::max(assoc.worst_err, max_rel_err(two, one));
        }
    }
    rep.properties.push_back(upd);
    rep.properties.push_back(chunk);
    rep.properties.push_back(perm);
    rep.properties.push_back(assoc);

    // Model-level properties on small random CMANPs.
    PropertyResult ctxinv{"cmanp-context-invariance", 0.0, tol, false};
    PropertyResult updcons{"cmanp-update-consistency", 0.0, tol, false};
    PropertyResult tgteq{"cmanp-target-equivariance-bitwise", 0.0, 0.0, true};
    PropertyResult indep{"cmanp-per-target-independence-bitwise", 0.0, 0.0,
                         true};
    int model_trials = std::max(1, trials / 4);
    for (int t = 0; t < model_trials; ++t) {
        RngState rng = root.split(0x10000u + static_cast<std::uint64_t>(t));
        CmanpConfig cfg = model_cfg ? *model_cfg : CmanpConfig{2, 16, 4, 4, 2, 32, 8};
        ParamStore params = init_cmanp_params(rng, cfg);
        CmanpModel model = build_model(cfg, params);
        RngState task_rng = rng.split(99);
        std::vector<Task> tasks = gen_sine_tasks(task_rng, 1);
        const Task& task = tasks[0];

        ConditionedState st = condition(model, task.ctx_x, task.ctx_y);
        Matrix pred = query(model, st, task.tgt_x);

        // Permuted context.
        auto p = random_perm(rng, task.ctx_x.rows());
        ConditionedState stp = condition(model, permute_rows(task.ctx_x, p),
                                         permute_rows(task.ctx_y, p));
        ctxinv.worst_err = std::max(
            ctxinv.worst_err, max_rel_err(query(model, stp, task.tgt_x), pred));

        // Update vs recondition.
        RngState urng = rng.split(7);
        std::vector<Task> extra_tasks = gen_sine_tasks(urng, 1);
        const Matrix& ux = extra_tasks[0].ctx_x;
        const Matrix& uy = extra_tasks[0].ctx_y;
        ConditionedState stu = condition(model, task.ctx_x, task.ctx_y);
        update_context(model, stu, ux, uy);
        ConditionedState str =
            condition(model, concat_rows(task.ctx_x, ux),
                      concat_rows(task.ctx_y, uy));
        updcons.worst_err = std::max(
            updcons.worst_err, max_rel_err(query(model, stu, task.tgt_x),
                                           query(model, str, task.tgt_x)));

        // Permuted targets must permute predictions bitwise.
        auto tp = random_perm(rng, task.tgt_x.rows());
        Matrix pred_perm = query(model, st, permute_rows(task.tgt_x, tp));
        if (max_rel_err(pred_perm, permute_rows(pred, tp)) != 0.0)
            tgteq.worst_err = 1.0;

        // Row-at-a-time queries must match the joint query bitwise.
        for (int i = 0; i < task.tgt_x.rows(); ++i) {
            Matrix one = query(model, st, slice_rows(task.tgt_x, i, i + 1));
            if (one.at(0, 0) != pred.at(i, 0) || one.at(0, 1) != pred.at(i, 1))
                indep.worst_err = 1.0;
        }
    }
    rep.properties.push_back(ctxinv);
    rep.properties.push_back(updcons);
    rep.properties.push_back(tgteq);
    rep.properties.push_back(indep);
    return rep;
}

}  // namespace cmab
