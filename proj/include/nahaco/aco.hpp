#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "nahaco/parallel.hpp"
#include "nahaco/rng.hpp"
#include "nahaco/warehouse.hpp"

namespace nahaco {

struct AcoParams {
    double alpha = 1.0;   // pheromone exponent
    double beta = 2.0;    // heuristic exponent
    double rho = 0.1;     // evaporation in (0, 1)
    double q = 1.0;       // deposit numerator
    double delta = 0.5;   // congestion adjustment, >= 0
    std::uint32_t n_ants = 20;
    std::uint32_t n_iterations = 50;
    std::uint64_t seed = 0;
    bool closed_tour = true;       // closed tour (TSP) vs open pickup path
    bool record_eta_grad = false;  // keep d(log p)/d(eta) terms on each tour
};

// Weights of the expert desirability formula. gamma scales all values and
// therefore cancels out of the transition probabilities.
struct HeuristicWeights {
    double alpha_h = 0.1;
    double beta_h = 0.1;
    double gamma_h = 1.0;
};

struct PheromoneField {
    std::vector<double> tau;
};

struct HeuristicField {
    enum class Source { Expert, Learned };
    std::vector<double> eta;  // per undirected edge, > 0
    Source source = Source::Expert;
};

// One d(log p)/d(eta[edge]) contribution recorded while sampling.
struct EtaGradTerm {
    EdgeId edge;
    double coeff;
};

struct Tour {
    std::vector<NodeId> visit_order;  // starts at the depot
    std::vector<EdgeId> edge_list;    // edges actually walked, detours included
    double log_selection_prob = 0.0;
    double cost = 0.0;
    bool closed = true;
    std::vector<EtaGradTerm> eta_grad;  // only when AcoParams::record_eta_grad
};

struct DeadEnd : std::runtime_error {
    using std::runtime_error::runtime_error;
};

HeuristicField expert_heuristic(const WarehouseInstance& inst, const HeuristicWeights& w);

// Congestion term of one edge traversal: t * delta * (tc / cap).
double congestion_term(double free_flow_time, double delta, double flow, double capacity);
double congestion_term(const WarehouseInstance& inst, EdgeId e, const TrafficState& traffic,
                       double delta);

// Total cost of a walked tour: sum over edges of 1/H + congestion. Uses the
// tour's edge list when present, otherwise derives it from visit_order and
// errors if a consecutive pair is not an instance edge.
double path_cost(const WarehouseInstance& inst, const Tour& tour, const HeuristicField& cost_field,
                 const TrafficState& traffic, double delta);

// Congestion part only, for reporting.
double path_congestion(const WarehouseInstance& inst, const Tour& tour, const TrafficState& traffic,
                       double delta);

// Normalized transition probabilities over the unvisited neighbors of
// `current` (candidates returned alongside, sorted by node id). Throws
// DeadEnd when no unvisited neighbor exists.
std::vector<double> transition_probabilities(const WarehouseInstance& inst, NodeId current,
                                             const std::vector<char>& visited,
                                             const PheromoneField& tau, const HeuristicField& eta,
                                             const AcoParams& params,
                                             std::vector<NodeId>* candidates_out = nullptr);

// Samples one tour from the depot. Traffic counters are incremented on every
// traversed edge; when delta == 0 they do not feed back into this ant, so
// callers may construct ants in parallel against a shared zero state and
// rebuild the counts afterwards.
Tour construct_tour(const WarehouseInstance& inst, const PheromoneField& tau,
                    const HeuristicField& eta, const HeuristicField& cost_field,
                    TrafficState& traffic, const AcoParams& params, Rng& rng);

// Evaporate all trails by (1 - rho), then deposit q/cost on every edge each
// tour traversed.
void pheromone_update(PheromoneField& tau, const std::vector<Tour>& tours, const AcoParams& params);

struct IterationStat {
    double best_cost;
    double mean_cost;
};

struct SolveResult {
    Tour best;
    double best_congestion = 0.0;  // Con of best under the final iteration's traffic
    std::vector<IterationStat> curve;
};

// Per-iteration heuristic supplier. Receives the iteration index and the
// traffic state accumulated by the previous iteration's ants (all-zero for
// the first), and returns a field that must stay valid until the next call.
using EtaProvider = std::function<const HeuristicField&(std::uint32_t, const TrafficState&)>;

// Optional per-iteration tour collector (training uses this).
using TourSink = std::function<void(std::uint32_t, std::vector<Tour>&&)>;

SolveResult solve(const WarehouseInstance& inst, const EtaProvider& eta_provider,
                  const HeuristicField& cost_field, const AcoParams& params,
                  Exec exec = Exec::Serial, const TourSink& sink = {});

// Fixed-field convenience overload.
SolveResult solve(const WarehouseInstance& inst, const HeuristicField& eta,
                  const HeuristicField& cost_field, const AcoParams& params,
                  Exec exec = Exec::Serial);

// Recomputes a tour's log selection probability by replaying its moves
// against the given fields. Detour hops contribute nothing.
double recompute_log_prob(const WarehouseInstance& inst, const Tour& tour,
                          const PheromoneField& tau, const HeuristicField& eta,
                          const AcoParams& params);

}  // namespace nahaco
