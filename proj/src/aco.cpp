#include "nahaco/aco.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <queue>
#include <stdexcept>
#include <string>

namespace nahaco {

namespace {

void validate_params(const AcoParams& p) {
    if (p.alpha < 0 || p.beta < 0) throw std::invalid_argument("aco: alpha and beta must be >= 0");
    if (!(p.rho > 0.0) || !(p.rho < 1.0)) throw std::invalid_argument("aco: rho must lie in (0, 1)");
    if (!(p.q > 0)) throw std::invalid_argument("aco: q must be positive");
    if (p.delta < 0) throw std::invalid_argument("aco: delta must be >= 0");
    if (p.n_ants < 1) throw std::invalid_argument("aco: n_ants must be >= 1");
}

void validate_field(const WarehouseInstance& inst, const HeuristicField& f, const char* what) {
    if (f.eta.size() != inst.n_edges())
        throw std::invalid_argument(std::string(what) + ": field size does not match edge count");
    for (const double v : f.eta)
        if (!(v > 0) || !std::isfinite(v))
            throw std::invalid_argument(std::string(what) + ": entries must be finite and positive");
}

struct Candidates {
    std::vector<NodeId> nodes;
    std::vector<EdgeId> edges;
    std::vector<double> probs;
};

Candidates candidate_probs(const WarehouseInstance& inst, NodeId current,
                           const std::vector<char>& visited, const PheromoneField& tau,
                           const HeuristicField& eta, const AcoParams& params) {
    Candidates c;
    double sum = 0.0;
    for (const auto& [nb, e] : inst.neighbors(current)) {
        if (visited[nb]) continue;
        const double w = std::pow(tau.tau[e], params.alpha) * std::pow(eta.eta[e], params.beta);
        c.nodes.push_back(nb);
        c.edges.push_back(e);
        c.probs.push_back(w);
        sum += w;
    }
    if (c.nodes.empty())
        throw DeadEnd("no unvisited neighbor from node " + std::to_string(current));
    if (!(sum > 0) || !std::isfinite(sum))
        throw std::runtime_error("aco: degenerate transition weights at node " +
                                 std::to_string(current));
    for (double& p : c.probs) p /= sum;
    return c;
}

}  // namespace

HeuristicField expert_heuristic(const WarehouseInstance& inst, const HeuristicWeights& w) {
    if (!(w.gamma_h > 0)) throw std::invalid_argument("expert_heuristic: gamma must be positive");
    if (w.alpha_h < 0 || w.beta_h < 0)
        throw std::invalid_argument("expert_heuristic: alpha and beta must be >= 0");
    HeuristicField f;
    f.source = HeuristicField::Source::Expert;
    f.eta.resize(inst.n_edges());
    for (std::size_t e = 0; e < inst.n_edges(); ++e) {
        const Edge& ed = inst.edge(e);
        const Cargo& a = inst.node(ed.u);
        const Cargo& b = inst.node(ed.v);
        const double d = manhattan_distance(a, b);
        const double size_ij = a.size + b.size;
        const double wt_ij = a.weight + b.weight;
        const double sc_ij = 0.5 * (a.special + b.special);
        const double denom = d + w.alpha_h * size_ij + w.beta_h * wt_ij;
        if (!(denom > 0))
            throw std::domain_error("expert_heuristic: non-positive denominator on edge " +
                                    std::to_string(e));
        f.eta[e] = w.gamma_h * sc_ij / denom;
    }
    return f;
}

double congestion_term(double free_flow_time, double delta, double flow, double capacity) {
    if (!(capacity > 0)) throw std::invalid_argument("congestion_term: capacity must be positive");
    if (flow < 0) throw std::invalid_argument("congestion_term: flow must be >= 0");
    return free_flow_time * delta * (flow / capacity);
}

double congestion_term(const WarehouseInstance& inst, EdgeId e, const TrafficState& traffic,
                       double delta) {
    if (e >= inst.n_edges() || traffic.flow.size() != inst.n_edges())
        throw std::invalid_argument("congestion_term: edge/traffic mismatch");
    return congestion_term(traffic.free_flow_time[e], delta, traffic.flow[e], inst.edge(e).capacity);
}

namespace {

std::vector<EdgeId> edges_of_tour(const WarehouseInstance& inst, const Tour& tour) {
    if (!tour.edge_list.empty()) {
        for (const EdgeId e : tour.edge_list)
            if (e >= inst.n_edges())
                throw std::invalid_argument("path_cost: tour references a non-existent edge");
        return tour.edge_list;
    }
    std::vector<EdgeId> edges;
    const auto& vo = tour.visit_order;
    const std::size_t hops = vo.size() > 1 ? vo.size() - 1 + (tour.closed ? 1 : 0) : 0;
    for (std::size_t i = 0; i < hops; ++i) {
        const NodeId a = vo[i];
        const NodeId b = vo[(i + 1) % vo.size()];
        const auto e = inst.find_edge(a, b);
        if (!e)
            throw std::invalid_argument("path_cost: consecutive nodes " + std::to_string(a) + "," +
                                        std::to_string(b) + " are not an edge");
        edges.push_back(*e);
    }
    return edges;
}

}  // namespace

double path_cost(const WarehouseInstance& inst, const Tour& tour, const HeuristicField& cost_field,
                 const TrafficState& traffic, double delta) {
    validate_field(inst, cost_field, "path_cost");
    double c = 0.0;
    for (const EdgeId e : edges_of_tour(inst, tour))
        c += 1.0 / cost_field.eta[e] + congestion_term(inst, e, traffic, delta);
    return c;
}

double path_congestion(const WarehouseInstance& inst, const Tour& tour, const TrafficState& traffic,
                       double delta) {
    double c = 0.0;
    for (const EdgeId e : edges_of_tour(inst, tour)) c += congestion_term(inst, e, traffic, delta);
    return c;
}

std::vector<double> transition_probabilities(const WarehouseInstance& inst, NodeId current,
                                             const std::vector<char>& visited,
                                             const PheromoneField& tau, const HeuristicField& eta,
                                             const AcoParams& params,
                                             std::vector<NodeId>* candidates_out) {
    if (current >= inst.n_nodes() || visited.size() != inst.n_nodes())
        throw std::invalid_argument("transition_probabilities: bad current node or visited size");
    if (tau.tau.size() != inst.n_edges())
        throw std::invalid_argument("transition_probabilities: pheromone size mismatch");
    validate_field(inst, eta, "transition_probabilities");
    Candidates c = candidate_probs(inst, current, visited, tau, eta, params);
    if (candidates_out) *candidates_out = std::move(c.nodes);
    return std::move(c.probs);
}

namespace {

// Dijkstra from src by current traversal cost; returns the hop edges to the
// nearest goal node (ties broken toward the lowest node id).
std::vector<EdgeId> detour_path(const WarehouseInstance& inst, const HeuristicField& cost_field,
                                const TrafficState& traffic, double delta, NodeId src,
                                const std::vector<char>& goal) {
    const std::size_t n = inst.n_nodes();
    constexpr double kInf = std::numeric_limits<double>::infinity();
    std::vector<double> dist(n, kInf);
    std::vector<EdgeId> prev_edge(n, 0);
    std::vector<NodeId> prev_node(n, n);
    std::priority_queue<std::pair<double, NodeId>, std::vector<std::pair<double, NodeId>>,
                        std::greater<>>
        pq;
    dist[src] = 0.0;
    pq.emplace(0.0, src);
    while (!pq.empty()) {
        const auto [d, u] = pq.top();
        pq.pop();
        if (d > dist[u]) continue;
        for (const auto& [nb, e] : inst.neighbors(u)) {
            const double nd = d + 1.0 / cost_field.eta[e] + congestion_term(inst, e, traffic, delta);
            if (nd < dist[nb]) {
                dist[nb] = nd;
                prev_edge[nb] = e;
                prev_node[nb] = u;
                pq.emplace(nd, nb);
            }
        }
    }

    NodeId target = n;
    double best = kInf;
    for (NodeId v = 0; v < n; ++v) {
        if (v == src || !goal[v]) continue;
        if (dist[v] < best) {
            best = dist[v];
            target = v;
        }
    }
    if (target == n) throw std::logic_error("detour: no reachable goal (disconnected instance?)");

    std::vector<EdgeId> hops;
    for (NodeId v = target; v != src; v = prev_node[v]) hops.push_back(prev_edge[v]);
    std::reverse(hops.begin(), hops.end());
    return hops;
}

}  // namespace

Tour construct_tour(const WarehouseInstance& inst, const PheromoneField& tau,
                    const HeuristicField& eta, const HeuristicField& cost_field,
                    TrafficState& traffic, const AcoParams& params, Rng& rng) {
    validate_params(params);
    const std::size_t n = inst.n_nodes();
    Tour tour;
    tour.closed = params.closed_tour;
    tour.visit_order.reserve(n + 1);
    tour.visit_order.push_back(inst.depot());

    std::vector<char> visited(n, 0);
    visited[inst.depot()] = 1;
    std::size_t n_visited = 1;
    NodeId current = inst.depot();

    const auto walk = [&](EdgeId e, NodeId to) {
        traffic.flow[e] += 1.0;
        tour.edge_list.push_back(e);
        current = to;
    };

    while (n_visited < n) {
        Candidates cand;
        try {
            cand = candidate_probs(inst, current, visited, tau, eta, params);
        } catch (const DeadEnd&) {
            std::vector<char> goal(n);
            for (std::size_t v = 0; v < n; ++v) goal[v] = !visited[v];
            const std::vector<EdgeId> hops =
                detour_path(inst, cost_field, traffic, params.delta, current, goal);
            for (const EdgeId e : hops) {
                const Edge& ed = inst.edge(e);
                walk(e, ed.u == current ? ed.v : ed.u);
            }
            visited[current] = 1;
            ++n_visited;
            tour.visit_order.push_back(current);
            continue;
        }

        const double u = rng.uniform01();
        std::size_t pick = cand.nodes.size() - 1;
        double acc = 0.0;
        for (std::size_t i = 0; i < cand.probs.size(); ++i) {
            acc += cand.probs[i];
            if (u < acc) {
                pick = i;
                break;
            }
        }

        tour.log_selection_prob += std::log(cand.probs[pick]);
        if (params.record_eta_grad && params.beta != 0.0) {
            for (std::size_t i = 0; i < cand.nodes.size(); ++i) {
                const double indicator = i == pick ? 1.0 : 0.0;
                tour.eta_grad.push_back(
                    {cand.edges[i],
                     params.beta * (indicator - cand.probs[i]) / eta.eta[cand.edges[i]]});
            }
        }

        const NodeId next = cand.nodes[pick];
        walk(cand.edges[pick], next);
        visited[next] = 1;
        ++n_visited;
        tour.visit_order.push_back(next);
    }

    if (params.closed_tour && current != inst.depot()) {
        if (const auto e = inst.find_edge(current, inst.depot())) {
            walk(*e, inst.depot());
        } else {
            std::vector<char> goal(n, 0);
            goal[inst.depot()] = 1;
            for (const EdgeId e :
                 detour_path(inst, cost_field, traffic, params.delta, current, goal)) {
                const Edge& ed = inst.edge(e);
                walk(e, ed.u == current ? ed.v : ed.u);
            }
        }
    }

    tour.cost = path_cost(inst, tour, cost_field, traffic, params.delta);
    return tour;
}

void pheromone_update(PheromoneField& tau, const std::vector<Tour>& tours, const AcoParams& params) {
    validate_params(params);
    for (double& t : tau.tau) t *= 1.0 - params.rho;
    for (const Tour& tour : tours) {
        if (!(tour.cost > 0))
            throw std::invalid_argument("pheromone_update: tour cost must be positive");
        const double dep = params.q / tour.cost;
        for (const EdgeId e : tour.edge_list) {
            if (e >= tau.tau.size())
                throw std::invalid_argument("pheromone_update: tour references unknown edge");
            tau.tau[e] += dep;
        }
    }
}

double recompute_log_prob(const WarehouseInstance& inst, const Tour& tour,
                          const PheromoneField& tau, const HeuristicField& eta,
                          const AcoParams& params) {
    const std::size_t n = inst.n_nodes();
    std::vector<char> visited(n, 0);
    if (tour.visit_order.empty() || tour.visit_order.front() != inst.depot())
        throw std::invalid_argument("recompute_log_prob: tour does not start at the depot");
    visited[inst.depot()] = 1;
    NodeId current = inst.depot();
    double logp = 0.0;
    std::size_t ei = 0;

    for (std::size_t i = 1; i < tour.visit_order.size(); ++i) {
        const NodeId target = tour.visit_order[i];
        bool sampled = false;
        Candidates cand;
        try {
            cand = candidate_probs(inst, current, visited, tau, eta, params);
            sampled = true;
        } catch (const DeadEnd&) {
        }
        if (sampled) {
            const auto it = std::find(cand.nodes.begin(), cand.nodes.end(), target);
            if (it == cand.nodes.end())
                throw std::invalid_argument("recompute_log_prob: recorded move is not a candidate");
            logp += std::log(cand.probs[static_cast<std::size_t>(it - cand.nodes.begin())]);
            if (ei >= tour.edge_list.size())
                throw std::invalid_argument("recompute_log_prob: edge list too short");
            ++ei;
            current = target;
        } else {
            while (current != target) {
                if (ei >= tour.edge_list.size())
                    throw std::invalid_argument("recompute_log_prob: detour does not reach target");
                const Edge& ed = inst.edge(tour.edge_list[ei]);
                current = ed.u == current ? ed.v : ed.u;
                ++ei;
            }
        }
        visited[target] = 1;
    }
    return logp;
}

namespace {

SolveResult solve_impl(const WarehouseInstance& inst, const EtaProvider& eta_provider,
                       const HeuristicField& cost_field, const AcoParams& params, Exec exec,
                       const TourSink& sink) {
    validate_params(params);
    if (params.n_iterations < 1)
        throw std::invalid_argument("solve: n_iterations must be >= 1");
    validate_field(inst, cost_field, "solve cost field");

    PheromoneField tau;
    tau.tau.assign(inst.n_edges(), 1.0);
    TrafficState traffic = TrafficState::zero_for(inst);

    SolveResult res;
    double best_cost = std::numeric_limits<double>::infinity();

    for (std::uint32_t iter = 0; iter < params.n_iterations; ++iter) {
        const HeuristicField& eta = eta_provider(iter, traffic);
        validate_field(inst, eta, "solve eta field");
        traffic.reset();

        std::vector<Tour> tours(params.n_ants);
        if (params.delta == 0.0) {
            // Ants are mutually independent at delta = 0: give each a private
            // zero traffic state (identical to what the shared one would show)
            // and rebuild the shared counters afterwards. Same code path for
            // Serial and OpenMP, so results are bitwise identical.
            for_each_index(exec, static_cast<std::ptrdiff_t>(params.n_ants), [&](std::ptrdiff_t a) {
                TrafficState local = traffic;
                Rng ant_rng(derive_seed(params.seed, iter, static_cast<std::uint64_t>(a)));
                tours[a] = construct_tour(inst, tau, eta, cost_field, local, params, ant_rng);
            });
            for (const Tour& t : tours)
                for (const EdgeId e : t.edge_list) traffic.flow[e] += 1.0;
        } else {
            // delta > 0: ants share evolving traffic and must run in sequence.
            for (std::uint32_t a = 0; a < params.n_ants; ++a) {
                Rng ant_rng(derive_seed(params.seed, iter, a));
                tours[a] = construct_tour(inst, tau, eta, cost_field, traffic, params, ant_rng);
            }
        }

        IterationStat stat{std::numeric_limits<double>::infinity(), 0.0};
        for (const Tour& t : tours) {
            stat.best_cost = std::min(stat.best_cost, t.cost);
            stat.mean_cost += t.cost;
            if (t.cost < best_cost) {
                best_cost = t.cost;
                res.best = t;
            }
        }
        stat.mean_cost /= static_cast<double>(params.n_ants);
        res.curve.push_back(stat);

        pheromone_update(tau, tours, params);
        if (sink) sink(iter, std::move(tours));
    }

    res.best_congestion = path_congestion(inst, res.best, traffic, params.delta);
    return res;
}

}  // namespace

SolveResult solve(const WarehouseInstance& inst, const EtaProvider& eta_provider,
                  const HeuristicField& cost_field, const AcoParams& params, Exec exec,
                  const TourSink& sink) {
    return solve_impl(inst, eta_provider, cost_field, params, exec, sink);
}

SolveResult solve(const WarehouseInstance& inst, const HeuristicField& eta,
                  const HeuristicField& cost_field, const AcoParams& params, Exec exec) {
    return solve_impl(
        inst, [&eta](std::uint32_t, const TrafficState&) -> const HeuristicField& { return eta; },
        cost_field, params, exec, {});
}

}  // namespace nahaco
