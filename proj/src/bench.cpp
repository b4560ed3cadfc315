#include "nahaco/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>

#include "nahaco/nn.hpp"

namespace nahaco {

namespace {

void require_complete(const WarehouseInstance& inst) {
    for (NodeId i = 0; i < inst.n_nodes(); ++i)
        for (NodeId j = i + 1; j < inst.n_nodes(); ++j)
            if (!inst.find_edge(i, j))
                throw std::invalid_argument("exact search requires a complete instance");
}

Tour tour_from_order(const WarehouseInstance& inst, const std::vector<NodeId>& order) {
    Tour t;
    t.visit_order = order;
    t.closed = true;
    t.edge_list.reserve(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        const NodeId a = order[i];
        const NodeId b = order[(i + 1) % order.size()];
        t.edge_list.push_back(*inst.find_edge(a, b));
    }
    return t;
}

double walked_cost(const WarehouseInstance& inst, const Tour& t, const HeuristicField& cost_field,
                   double delta) {
    TrafficState tr = TrafficState::zero_for(inst);
    for (const EdgeId e : t.edge_list) tr.flow[e] += 1.0;
    return path_cost(inst, t, cost_field, tr, delta);
}

}  // namespace

Tour brute_force_tsp(const WarehouseInstance& inst, const HeuristicField& cost_field, double delta) {
    const std::size_t n = inst.n_nodes();
    if (cost_field.eta.size() != inst.n_edges())
        throw std::invalid_argument("cost field does not match instance");
    require_complete(inst);

    if (delta == 0.0) {
        if (n > 12) throw std::invalid_argument("exact search limited to 12 nodes when delta is 0");
        // Dynamic program over subsets of nodes 1..n-1; costs are 1/H.
        const std::size_t k = n - 1;
        auto edge_cost = [&](NodeId a, NodeId b) { return 1.0 / cost_field.eta[*inst.find_edge(a, b)]; };
        const std::size_t full = std::size_t{1} << k;
        std::vector<std::vector<double>> dp(full, std::vector<double>(k, HUGE_VAL));
        std::vector<std::vector<int>> parent(full, std::vector<int>(k, -1));
        for (std::size_t j = 0; j < k; ++j)
            dp[std::size_t{1} << j][j] = edge_cost(0, static_cast<NodeId>(j + 1));
        for (std::size_t mask = 1; mask < full; ++mask) {
            for (std::size_t j = 0; j < k; ++j) {
                if (!(mask & (std::size_t{1} << j)) || dp[mask][j] == HUGE_VAL) continue;
                for (std::size_t next = 0; next < k; ++next) {
                    if (mask & (std::size_t{1} << next)) continue;
                    const std::size_t nm = mask | (std::size_t{1} << next);
                    const double cand =
                        dp[mask][j] + edge_cost(static_cast<NodeId>(j + 1), static_cast<NodeId>(next + 1));
                    if (cand < dp[nm][next]) {
                        dp[nm][next] = cand;
                        parent[nm][next] = static_cast<int>(j);
                    }
                }
            }
        }
        double best = HUGE_VAL;
        std::size_t best_j = 0;
        for (std::size_t j = 0; j < k; ++j) {
            const double cand = dp[full - 1][j] + edge_cost(static_cast<NodeId>(j + 1), 0);
            if (cand < best) {
                best = cand;
                best_j = j;
            }
        }
        std::vector<NodeId> rev;
        std::size_t mask = full - 1, j = best_j;
        while (true) {
            rev.push_back(static_cast<NodeId>(j + 1));
            const int pj = parent[mask][j];
            mask &= ~(std::size_t{1} << j);
            if (pj < 0) break;
            j = static_cast<std::size_t>(pj);
        }
        std::vector<NodeId> order{0};
        order.insert(order.end(), rev.rbegin(), rev.rend());
        Tour t = tour_from_order(inst, order);
        t.cost = walked_cost(inst, t, cost_field, delta);
        return t;
    }

    if (n > 9) throw std::invalid_argument("exact search limited to 9 nodes when delta > 0");
    std::vector<NodeId> perm(n - 1);
    std::iota(perm.begin(), perm.end(), 1);
    Tour best;
    double best_cost = HUGE_VAL;
    do {
        std::vector<NodeId> order{0};
        order.insert(order.end(), perm.begin(), perm.end());
        Tour t = tour_from_order(inst, order);
        t.cost = walked_cost(inst, t, cost_field, delta);
        if (t.cost < best_cost) {
            best_cost = t.cost;
            best = std::move(t);
        }
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

SuiteConfig SuiteConfig::from_json(const nlohmann::json& j) {
    SuiteConfig c;
    c.methods = j.at("methods").get<std::vector<std::string>>();
    c.instances = j.at("instances").get<std::vector<std::string>>();
    c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    c.baseline = j.value("baseline", std::string{});
    c.model_path = j.value("model", std::string{});
    if (j.contains("aco")) {
        const auto& a = j.at("aco");
        c.aco.alpha = a.value("alpha", c.aco.alpha);
        c.aco.beta = a.value("beta", c.aco.beta);
        c.aco.rho = a.value("rho", c.aco.rho);
        c.aco.delta = a.value("delta", c.aco.delta);
        c.aco.n_ants = a.value("n_ants", c.aco.n_ants);
        c.aco.n_iterations = a.value("n_iterations", c.aco.n_iterations);
        c.aco.closed_tour = a.value("closed_tour", c.aco.closed_tour);
    }
    c.hw.alpha_h = j.value("alpha_h", c.hw.alpha_h);
    c.hw.beta_h = j.value("beta_h", c.hw.beta_h);
    c.hw.gamma_h = j.value("gamma_h", c.hw.gamma_h);
    return c;
}

std::vector<BenchResult> run_suite(const SuiteConfig& cfg, Exec exec) {
    if (cfg.methods.empty() || cfg.instances.empty() || cfg.seeds.empty())
        throw std::invalid_argument("suite needs methods, instances, and seeds");
    for (const std::string& m : cfg.methods)
        if (m != "expert" && m != "learned" && m != "brute_force")
            throw std::invalid_argument("unknown method: " + m);
    if (!cfg.baseline.empty() &&
        std::find(cfg.methods.begin(), cfg.methods.end(), cfg.baseline) == cfg.methods.end())
        throw std::invalid_argument("baseline method is not in the suite");

    std::vector<WarehouseInstance> instances;
    instances.reserve(cfg.instances.size());
    for (const std::string& path : cfg.instances) instances.push_back(WarehouseInstance::load(path));

    const bool wants_learned =
        std::find(cfg.methods.begin(), cfg.methods.end(), "learned") != cfg.methods.end();
    ModelParams learned_params;
    if (wants_learned) {
        if (cfg.model_path.empty())
            throw std::invalid_argument("learned method needs a model checkpoint");
        learned_params = load_checkpoint(cfg.model_path);
    }

    std::vector<BenchResult> rows;
    for (const std::string& method : cfg.methods) {
        for (std::size_t ii = 0; ii < instances.size(); ++ii) {
            const WarehouseInstance& inst = instances[ii];
            const HeuristicField cost_field = expert_heuristic(inst, cfg.hw);
            for (const std::uint64_t seed : cfg.seeds) {
                AcoParams ap = cfg.aco;
                ap.seed = seed;
                BenchResult r;
                r.method = method;
                r.instance = cfg.instances[ii];
                r.seed = seed;
                const auto t0 = std::chrono::steady_clock::now();
                if (method == "expert") {
                    const SolveResult s = solve(inst, cost_field, cost_field, ap, exec);
                    r.cost = s.best.cost;
                    r.con = s.best_congestion;
                } else if (method == "learned") {
                    HeuristicField current;
                    const EtaProvider provider =
                        [&](std::uint32_t, const TrafficState& tr) -> const HeuristicField& {
                        current = nn_forward(inst, tr, learned_params, NnMode::Eval, exec);
                        return current;
                    };
                    const SolveResult s = solve(inst, provider, cost_field, ap, exec);
                    r.cost = s.best.cost;
                    r.con = s.best_congestion;
                } else {
                    const Tour t = brute_force_tsp(inst, cost_field, ap.delta);
                    TrafficState tr = TrafficState::zero_for(inst);
                    for (const EdgeId e : t.edge_list) tr.flow[e] += 1.0;
                    r.cost = t.cost;
                    r.con = path_congestion(inst, t, tr, ap.delta);
                }
                r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                rows.push_back(std::move(r));
            }
        }
    }

    if (!cfg.baseline.empty()) {
        std::map<std::pair<std::string, std::uint64_t>, double> base;
        for (const BenchResult& r : rows)
            if (r.method == cfg.baseline) base[{r.instance, r.seed}] = r.cost;
        for (BenchResult& r : rows) {
            const auto it = base.find({r.instance, r.seed});
            if (it == base.end()) throw std::logic_error("baseline row missing");
            r.gap_pct = 100.0 * (r.cost - it->second) / it->second;
        }
    }
    return rows;
}

std::vector<MethodSummary> summarize(const std::vector<BenchResult>& results) {
    if (results.empty()) throw std::invalid_argument("no results to summarize");
    std::map<std::string, MethodSummary> acc;
    for (const BenchResult& r : results) {
        MethodSummary& s = acc[r.method];
        s.method = r.method;
        ++s.count;
        s.mean_seconds += r.seconds;
        s.mean_cost += r.cost;
        s.mean_con += r.con;
        s.mean_gap_pct += r.gap_pct;
    }
    std::vector<MethodSummary> out;
    for (auto& [name, s] : acc) {
        (void)name;
        const double inv = 1.0 / static_cast<double>(s.count);
        s.mean_seconds *= inv;
        s.mean_cost *= inv;
        s.mean_con *= inv;
        s.mean_gap_pct *= inv;
        out.push_back(s);
    }
    return out;
}

void write_results_csv(const std::vector<BenchResult>& results, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open results file: " + path);
    f << "method,instance,seed,seconds,cost,con,gap_pct\n";
    char line[512];
    for (const BenchResult& r : results) {
        std::snprintf(line, sizeof line, "%s,%s,%llu,%.3f,%.17g,%.17g,%.17g\n", r.method.c_str(),
                      r.instance.c_str(), static_cast<unsigned long long>(r.seed), r.seconds, r.cost,
                      r.con, r.gap_pct);
        f << line;
    }
}

void write_summary_csv(const std::vector<MethodSummary>& summary, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open summary file: " + path);
    f << "method,count,mean_seconds,mean_cost,mean_con,mean_gap_pct\n";
    char line[384];
    for (const MethodSummary& s : summary) {
        std::snprintf(line, sizeof line, "%s,%zu,%.3f,%.17g,%.17g,%.17g\n", s.method.c_str(), s.count,
                      s.mean_seconds, s.mean_cost, s.mean_con, s.mean_gap_pct);
        f << line;
    }
}

std::string format_summary_table(const std::vector<MethodSummary>& summary) {
    std::size_t name_w = 6;
    for (const MethodSummary& s : summary) name_w = std::max(name_w, s.method.size());
    std::string out;
    char line[384];
    std::snprintf(line, sizeof line, "%-*s %6s %12s %14s %12s %10s\n", static_cast<int>(name_w),
                  "method", "count", "mean_time_s", "mean_cost", "mean_con", "mean_gap%");
    out += line;
    for (const MethodSummary& s : summary) {
        std::snprintf(line, sizeof line, "%-*s %6zu %12.3f %14.6f %12.6f %10.3f\n",
                      static_cast<int>(name_w), s.method.c_str(), s.count, s.mean_seconds, s.mean_cost,
                      s.mean_con, s.mean_gap_pct);
        out += line;
    }
    return out;
}

}  // namespace nahaco
