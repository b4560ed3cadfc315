#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "nahaco/aco.hpp"
#include "nahaco/nn.hpp"

namespace nahaco {

// Below this, exp(log_selection_prob) is treated as numerically zero.
constexpr double kLogProbClamp = -60.0;

struct EpisodeRecord {
    Tour tour;
    std::uint32_t iteration;  // colony iteration that produced the tour
};

// One rollout's worth of tours: every ant of every iteration.
struct Episode {
    std::vector<EpisodeRecord> records;
    double cost_avg = 0.0;
};

// Mean over ants of |cost_i - cost_avg| * ln(1 + p_i) / ln 2.
double carl_loss(const Episode& ep);

// Per-iteration train-mode forward state captured during an episode rollout.
struct RolloutCaches {
    std::vector<ForwardCache> caches;
    std::vector<HeuristicField> etas;
};

// Rolls out ACO with the learned heuristic in train mode, recording
// d(log p)/d(eta) terms on every tour. Costs come from the expert field.
Episode collect_episode(const WarehouseInstance& inst, ModelParams& params, const AcoParams& aco,
                        const HeuristicWeights& hw, RolloutCaches& rc, Exec exec = Exec::Serial,
                        SolveResult* solve_out = nullptr);

// REINFORCE-style gradient of carl_loss: costs and deviation weights are
// constants, only ln(1 + p_i) is differentiated. Accumulates into grads.
void carl_gradient(const WarehouseInstance& inst, const Episode& ep, const ModelParams& params,
                   const RolloutCaches& rc, ModelParams& grads, Exec exec = Exec::Serial);

struct TrainConfig {
    std::uint32_t epochs = 200;
    std::uint32_t instances_per_epoch = 4;
    std::uint32_t n_min = 20, n_max = 50;  // nodes per sampled instance
    std::uint32_t knn = 0;                 // edges per node, 0 = complete graph

    double learning_rate = 1e-3;
    double clip_norm = 1.0;
    std::string optimizer = "adam";  // "sgd" or "adam"
    bool normalize_grad = true;      // rescale each epoch's gradient to unit norm
    double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-12;

    std::uint32_t n_ants = 10;
    std::uint32_t n_iterations = 5;
    double alpha = 1.0, beta = 2.0, rho = 0.1, delta = 0.0;
    HeuristicWeights hw;

    std::uint64_t seed = 0;
    std::uint32_t checkpoint_every = 0;  // epochs between snapshots, 0 = none
    std::string checkpoint_path;         // snapshot target when cadence is set
    ModelConfig model;

    static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochStat {
    double mean_loss = 0.0;
    double mean_best_cost = 0.0;
    double mean_con = 0.0;
    double wall_clock_s = 0.0;
};

struct TrainResult {
    ModelParams params;
    std::vector<EpochStat> history;
};

// Per epoch: sample instances, roll out episodes, average the CARL gradient,
// take one optimizer step. Writes CSV rows to log when given. Aborts with a
// diagnostic on non-finite loss or gradient. Deterministic given the seed.
TrainResult train(const TrainConfig& cfg, Exec exec = Exec::Serial, std::ostream* log = nullptr);

}  // namespace nahaco
