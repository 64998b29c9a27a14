// Command-line front end: equivalence checks, scaling benchmarks,
// desk-scale training, prediction, and a streaming-update demo.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cmab/bench.hpp"
#include "cmab/checks.hpp"
#include "cmab/cmanp.hpp"
#include "cmab/weights_io.hpp"

namespace {

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// Strict CSV reader: header row, fixed column count, numeric cells.
// Errors carry 1-based line numbers.
std::vector<std::vector<double>> read_csv(const std::string& path,
                                          std::size_t columns) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::vector<std::vector<double>> rows;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (lineno == 1) continue;  // header
        if (line.empty()) continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            try {
                std::size_t used = 0;
                double v = std::stod(cell, &used);
                if (used != cell.size()) throw std::invalid_argument(cell);
                row.push_back(v);
            } catch (const std::exception&) {
                throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                         ": cannot parse '" + cell +
                                         "' as a number");
            }
        }
        if (row.size() != columns)
            throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                     ": expected " + std::to_string(columns) +
                                     " columns, got " +
                                     std::to_string(row.size()));
        rows.push_back(std::move(row));
    }
    return rows;
}

cmab::Matrix column(const std::vector<std::vector<double>>& rows, int col) {
    cmab::Matrix m(static_cast<int>(rows.size()), 1);
    for (std::size_t i = 0; i < rows.size(); ++i)
        m.at(static_cast<int>(i), 0) = rows[i][col];
    return m;
}

int cmd_check(std::uint64_t seed, int trials, const std::string& config,
              double tol) {
    const cmab::BenchConfig& bc = cmab::find_config(config);
    cmab::EquivalenceReport rep =
        cmab::run_equivalence_suite(seed, trials, tol, &bc.cfg);
    for (const auto& p : rep.properties) {
        std::cout << (p.passed() ? "PASS " : "FAIL ") << p.name
                  << " worst_err=" << fmt17(p.worst_err);
        if (!p.exact) std::cout << " tol=" << fmt17(p.tolerance);
        std::cout << "\n";
    }
    return rep.all_passed() ? 0 : 1;
}

int cmd_bench(const std::string& mode, const std::string& n_list,
              std::int64_t u, const std::string& config,
              const std::string& csv_path, std::uint64_t seed,
              bool zero_wall) {
    const cmab::BenchConfig& bc = cmab::find_config(config);
    std::vector<std::int64_t> ns;
    std::stringstream ss(n_list);
    std::string tok;
    while (std::getline(ss, tok, ',')) ns.push_back(std::stoll(tok));
    if (ns.empty()) throw std::runtime_error("bench: empty --n list");

    const char* prec = std::getenv("CMAB_PRECISION");
    bool f32 = prec && std::string(prec) == "f32";
    if (prec && !f32 && std::string(prec) != "f64")
        throw std::runtime_error("CMAB_PRECISION must be f64 or f32");
    if (f32 && mode == "condition")
        throw std::runtime_error("bench: condition mode is f64 only");

    std::ostringstream out;
    out << cmab::bench_csv_header() << "\n";
    for (std::int64_t n : ns) {
        cmab::BenchRecord rec =
            f32 ? cmab::run_bench_cell<float>(mode, n, u, bc, seed)
                : cmab::run_bench_cell<double>(mode, n, u, bc, seed);
        if (zero_wall) rec.wall_ns = 0;
        out << cmab::bench_csv_row(rec) << "\n";
    }
    if (csv_path.empty() || csv_path == "-") {
        std::cout << out.str();
    } else {
        std::ofstream f(csv_path, std::ios::binary);
        if (!f) throw std::runtime_error("cannot open " + csv_path);
        f << out.str();
    }
    return 0;
}

int cmd_train(const std::string& task, int steps, std::uint64_t seed,
              const std::string& out_path, const std::string& config) {
    if (task != "sine") throw std::runtime_error("unknown task '" + task + "'");
    const cmab::BenchConfig& bc = cmab::find_config(config);
    cmab::RngState rng(seed);
    cmab::ParamStore params = cmab::init_cmanp_params(rng, bc.cfg);
    cmab::TrainOptions opts;
    opts.steps = steps;
    std::cout << "step,nll\n";
    cmab::RngState train_rng = rng.split(0xF00D);
    std::vector<cmab::TraceRow> trace = cmab::train(params, bc.cfg, train_rng, opts);
    for (const auto& row : trace)
        std::cout << row.step << "," << fmt17(row.nll) << "\n";
    if (!out_path.empty()) cmab::save_weights(out_path, bc.cfg, params);
    return 0;
}

int cmd_predict(const std::string& weights, const std::string& context,
                const std::string& targets, const std::string& out_path) {
    cmab::LoadedWeights lw = cmab::load_weights(weights);
    cmab::CmanpModel model = cmab::build_model(lw.cfg, lw.params);
    auto ctx = read_csv(context, 2);
    if (ctx.empty()) throw std::runtime_error("context must be nonempty");
    auto tgt = read_csv(targets, 1);
    if (tgt.empty()) throw std::runtime_error("targets must be nonempty");
    cmab::ConditionedState st =
        cmab::condition(model, column(ctx, 0), column(ctx, 1), lw.cfg.B_C);
    cmab::Matrix pred = cmab::query(model, st, column(tgt, 0));
    std::ostringstream out;
    out << "x,mean,std\n";
    for (int i = 0; i < pred.rows(); ++i)
        out << fmt17(tgt[static_cast<std::size_t>(i)][0]) << ","
            << fmt17(pred.at(i, 0)) << "," << fmt17(pred.at(i, 1)) << "\n";
    if (out_path.empty() || out_path == "-") {
        std::cout << out.str();
    } else {
        std::ofstream f(out_path, std::ios::binary);
        if (!f) throw std::runtime_error("cannot open " + out_path);
        f << out.str();
    }
    return 0;
}

int cmd_update_demo(const std::string& weights, const std::string& context,
                    const std::string& stream, double probe) {
    cmab::LoadedWeights lw = cmab::load_weights(weights);
    cmab::CmanpModel model = cmab::build_model(lw.cfg, lw.params);
    auto ctx = read_csv(context, 2);
    if (ctx.empty()) throw std::runtime_error("context must be nonempty");
    auto extra = read_csv(stream, 2);
    cmab::ConditionedState st =
        cmab::condition(model, column(ctx, 0), column(ctx, 1), lw.cfg.B_C);
    cmab::Matrix probe_x(1, 1, {probe});
    cmab::Matrix pred = cmab::query(model, st, probe_x);
    std::cout << "step,n,mean,std,update_flops\n";
    std::cout << "0," << st.n << "," << fmt17(pred.at(0, 0)) << ","
              << fmt17(pred.at(0, 1)) << ",0\n";
    for (std::size_t i = 0; i < extra.size(); ++i) {
        cmab::Matrix nx(1, 1, {extra[i][0]});
        cmab::Matrix ny(1, 1, {extra[i][1]});
        std::uint64_t f0 = cmab::flop_meter().count;
        cmab::update_context(model, st, nx, ny);
        std::uint64_t flops = cmab::flop_meter().count - f0;
        pred = cmab::query(model, st, probe_x);
        std::cout << (i + 1) << "," << st.n << "," << fmt17(pred.at(0, 0))
                  << "," << fmt17(pred.at(0, 1)) << "," << flops << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Constant-memory attention block and neural process"};
    app.require_subcommand(1);

    // check equivalence
    auto* check = app.add_subcommand("check", "run oracle-equivalence suites");
    check->require_subcommand(1);
    auto* equiv = check->add_subcommand("equivalence");
    std::uint64_t c_seed = 0;
    int c_trials = 50;
    std::string c_config = "tiny";
    double c_tol = 1e-10;
    equiv->add_option("--seed", c_seed);
    equiv->add_option("--trials", c_trials);
    equiv->add_option("--config", c_config);
    equiv->add_option("--tol", c_tol);

    // bench
    auto* bench = app.add_subcommand("bench", "memory/FLOP scaling benchmarks");
    std::string b_mode = "memory", b_n = "512,1024,2048,4096,8192";
    std::int64_t b_u = 16;
    std::string b_config = "deployment", b_csv;
    std::uint64_t b_seed = 0;
    bool b_zero_wall = false;
    bench->add_option("--mode", b_mode, "memory|naive|update|condition");
    bench->add_option("--n", b_n, "comma-separated context sizes");
    bench->add_option("--u", b_u, "update batch size");
    bench->add_option("--config", b_config);
    bench->add_option("--csv", b_csv, "output path ('-' for stdout)");
    bench->add_option("--seed", b_seed);
    bench->add_flag("--zero-wall", b_zero_wall,
                    "report wall_ns as 0 for reproducible CSV bytes");

    // train
    auto* train = app.add_subcommand("train", "train the desk-scale model");
    std::string t_task = "sine", t_out, t_config = "desk";
    int t_steps = 5000;
    std::uint64_t t_seed = 0;
    train->add_option("--task", t_task);
    train->add_option("--steps", t_steps);
    train->add_option("--seed", t_seed);
    train->add_option("--out", t_out, "weight file path");
    train->add_option("--config", t_config);

    // predict
    auto* predict = app.add_subcommand("predict", "predict at target points");
    std::string p_weights, p_context, p_targets, p_out;
    predict->add_option("--weights", p_weights)->required();
    predict->add_option("--context", p_context)->required();
    predict->add_option("--targets", p_targets)->required();
    predict->add_option("--out", p_out);

    // update-demo
    auto* demo = app.add_subcommand("update-demo",
                                    "stream datapoints through updates");
    std::string d_weights, d_context, d_stream;
    double d_probe = 0.0;
    demo->add_option("--weights", d_weights)->required();
    demo->add_option("--context", d_context)->required();
    demo->add_option("--stream", d_stream)->required();
    demo->add_option("--probe", d_probe, "x value probed after each update");

    CLI11_PARSE(app, argc, argv);

    try {
        if (equiv->parsed()) return cmd_check(c_seed, c_trials, c_config, c_tol);
        if (bench->parsed())
            return cmd_bench(b_mode, b_n, b_u, b_config, b_csv, b_seed,
                             b_zero_wall);
        if (train->parsed())
            return cmd_train(t_task, t_steps, t_seed, t_out, t_config);
        if (predict->parsed())
            return cmd_predict(p_weights, p_context, p_targets, p_out);
        if (demo->parsed())
            return cmd_update_demo(d_weights, d_context, d_stream, d_probe);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
