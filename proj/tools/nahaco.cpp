#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "nahaco/aco.hpp"
#include "nahaco/bench.hpp"
#include "nahaco/nn.hpp"
#include "nahaco/training.hpp"
#include "nahaco/warehouse.hpp"

using namespace nahaco;

namespace {

struct GenTspArgs {
    std::uint32_t n = 20;
    std::uint64_t seed = 0;
    std::uint32_t k = 0;  // 0 = complete
    bool planar = false;
    std::string out;
};

struct GenWarehouseArgs {
    std::uint32_t sx = 10, sy = 25, levels = 2, cargo = 100;
    std::uint64_t seed = 0;
    std::string out;
};

struct SolveArgs {
    std::string instance;
    std::string heuristic = "expert";
    std::string model;
    std::string out;
    AcoParams aco;
    HeuristicWeights hw;
    bool open = false;
    int threads = 0;
};

int run_solve(const SolveArgs& a) {
    const WarehouseInstance inst = WarehouseInstance::load(a.instance);
    AcoParams ap = a.aco;
    ap.closed_tour = !a.open;
    Exec exec = Exec::Serial;
    if (a.threads > 0) {
        set_threads(a.threads);
        exec = Exec::OpenMP;
    }
    const HeuristicField cost_field = expert_heuristic(inst, a.hw);

    SolveResult res;
    const auto t0 = std::chrono::steady_clock::now();
    if (a.heuristic == "expert") {
        res = solve(inst, cost_field, cost_field, ap, exec);
    } else if (a.heuristic == "learned") {
        if (a.model.empty()) {
            std::cerr << "error: --heuristic learned needs --model\n";
            return 2;
        }
        ModelParams params = load_checkpoint(a.model);
        HeuristicField current;
        const EtaProvider provider = [&](std::uint32_t,
                                         const TrafficState& tr) -> const HeuristicField& {
            current = nn_forward(inst, tr, params, NnMode::Eval, exec);
            return current;
        };
        res = solve(inst, provider, cost_field, ap, exec, {});
    } else {
        std::cerr << "error: unknown heuristic '" << a.heuristic << "'\n";
        return 2;
    }
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    nlohmann::json j;
    j["order"] = res.best.visit_order;
    j["cost"] = res.best.cost;
    j["con"] = res.best_congestion;
    j["seconds"] = seconds;
    nlohmann::json curve = nlohmann::json::array();
    for (std::size_t i = 0; i < res.curve.size(); ++i)
        curve.push_back({{"iteration", i}, {"best", res.curve[i].best_cost},
                         {"mean", res.curve[i].mean_cost}});
    j["curve"] = curve;
    std::ofstream f(a.out, std::ios::trunc);
    if (!f) {
        std::cerr << "error: cannot write " << a.out << "\n";
        return 1;
    }
    f << j.dump(2) << "\n";
    std::printf("cost %.6f con %.6f in %.3fs -> %s\n", res.best.cost, res.best_congestion, seconds,
                a.out.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"congestion-aware AGV route planner"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen", "generate an instance file");
    gen->require_subcommand(1);

    GenTspArgs gt;
    auto* gen_tsp = gen->add_subcommand("tsp", "random TSP-style instance");
    gen_tsp->add_option("--n", gt.n, "node count")->required();
    gen_tsp->add_option("--seed", gt.seed, "rng seed");
    gen_tsp->add_option("--k", gt.k, "neighbors per node (0 = complete)");
    gen_tsp->add_flag("--planar", gt.planar, "keep z at 0");
    gen_tsp->add_option("--out", gt.out, "output path")->required();

    GenWarehouseArgs gw;
    auto* gen_wh = gen->add_subcommand("warehouse", "shelf-grid warehouse instance");
    gen_wh->add_option("--sx", gw.sx, "shelves along x")->required();
    gen_wh->add_option("--sy", gw.sy, "shelves along y")->required();
    gen_wh->add_option("--levels", gw.levels, "vertical levels")->required();
    gen_wh->add_option("--cargo", gw.cargo, "occupied slots")->required();
    gen_wh->add_option("--seed", gw.seed, "rng seed");
    gen_wh->add_option("--out", gw.out, "output path")->required();

    SolveArgs sa;
    auto* sol = app.add_subcommand("solve", "run the colony on an instance");
    sol->add_option("--instance", sa.instance, "instance json")->required();
    sol->add_option("--heuristic", sa.heuristic, "expert or learned");
    sol->add_option("--model", sa.model, "checkpoint for the learned heuristic");
    sol->add_option("--ants", sa.aco.n_ants, "ants per iteration");
    sol->add_option("--iters", sa.aco.n_iterations, "colony iterations");
    sol->add_option("--alpha", sa.aco.alpha, "pheromone exponent");
    sol->add_option("--beta", sa.aco.beta, "heuristic exponent");
    sol->add_option("--rho", sa.aco.rho, "evaporation rate");
    sol->add_option("--delta", sa.aco.delta, "congestion adjustment");
    sol->add_option("--seed", sa.aco.seed, "rng seed");
    sol->add_option("--alpha-h", sa.hw.alpha_h, "size weight of the expert heuristic");
    sol->add_option("--beta-h", sa.hw.beta_h, "weight weight of the expert heuristic");
    sol->add_option("--gamma-h", sa.hw.gamma_h, "scale of the expert heuristic");
    sol->add_flag("--open", sa.open, "open pickup path instead of a closed tour");
    sol->add_option("--threads", sa.threads, "worker threads (0 = serial)");
    sol->add_option("--out", sa.out, "result json")->required();

    std::string train_config, train_model, train_log;
    auto* tr = app.add_subcommand("train", "train the learned heuristic");
    tr->add_option("--config", train_config, "train config json")->required();
    tr->add_option("--out-model", train_model, "final checkpoint path")->required();
    tr->add_option("--log", train_log, "loss log csv");

    std::string suite_path, bench_out, bench_summary;
    auto* be = app.add_subcommand("bench", "run a benchmark suite");
    be->add_option("--suite", suite_path, "suite config json")->required();
    be->add_option("--out", bench_out, "results csv")->required();
    be->add_option("--summary", bench_summary, "summary csv (default <out>.summary.csv)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen_tsp->parsed()) {
            const std::uint32_t k = gt.k == 0 ? gt.n - 1 : gt.k;
            gen_tsp_instance(gt.n, gt.seed, k, gt.planar).save(gt.out);
            std::printf("wrote %s\n", gt.out.c_str());
        } else if (gen_wh->parsed()) {
            gen_warehouse_instance(gw.sx, gw.sy, gw.levels, gw.cargo, gw.seed).save(gw.out);
            std::printf("wrote %s\n", gw.out.c_str());
        } else if (sol->parsed()) {
            return run_solve(sa);
        } else if (tr->parsed()) {
            std::ifstream cf(train_config);
            if (!cf) {
                std::cerr << "error: cannot read " << train_config << "\n";
                return 1;
            }
            const TrainConfig cfg = TrainConfig::from_json(nlohmann::json::parse(cf));
            std::ofstream log;
            if (!train_log.empty()) {
                log.open(train_log, std::ios::trunc);
                if (!log) {
                    std::cerr << "error: cannot write " << train_log << "\n";
                    return 1;
                }
            }
            const TrainResult res = train(cfg, Exec::Serial, train_log.empty() ? nullptr : &log);
            save_checkpoint(res.params, train_model);
            std::printf("trained %zu epochs, final mean loss %.6g -> %s\n", res.history.size(),
                        res.history.back().mean_loss, train_model.c_str());
        } else if (be->parsed()) {
            std::ifstream sf(suite_path);
            if (!sf) {
                std::cerr << "error: cannot read " << suite_path << "\n";
                return 1;
            }
            const SuiteConfig cfg = SuiteConfig::from_json(nlohmann::json::parse(sf));
            const std::vector<BenchResult> rows = run_suite(cfg);
            write_results_csv(rows, bench_out);
            const std::vector<MethodSummary> sum = summarize(rows);
            const std::string spath =
                bench_summary.empty() ? bench_out + ".summary.csv" : bench_summary;
            write_summary_csv(sum, spath);
            std::fputs(format_summary_table(sum).c_str(), stdout);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
