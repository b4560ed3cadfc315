#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "nahaco/aco.hpp"
#include "nahaco/matrix.hpp"
#include "nahaco/parallel.hpp"
#include "nahaco/warehouse.hpp"

namespace nahaco {

struct ModelConfig {
    std::uint32_t node_features = 6;   // x, y, z, size, weight, special (normalized)
    std::uint32_t edge_features = 4;   // distance, desirability, capacity, load ratio
    std::uint32_t width = 32;          // encoder embedding width
    std::uint32_t fusion_width = 64;   // attention projection width
    std::uint32_t n_layers = 12;
    std::uint32_t decoder_hidden = 32;
    double bn_eps = 1e-5;
    double bn_momentum = 0.1;
    double eta_floor = 1e-6;  // added to the sigmoid output so eta stays positive
};

struct BatchNormParams {
    Matrix gamma, beta;        // 1 x width
    Matrix run_mean, run_var;  // 1 x width, updated in train mode, never by the optimizer
};

struct GnnLayerParams {
    // Four parallel node maps: self branch, gated neighbor message, and the
    // two endpoint branches of the edge update. W_e maps the edge state.
    Matrix W_v1, W_v2, W_v3, W_v4, W_e;  // width x width
    BatchNormParams bn_node, bn_edge;
};

struct ModelParams {
    ModelConfig config;

    Matrix embed_node_W;  // width x node_features
    Matrix embed_edge_W;  // width x edge_features
    std::vector<GnnLayerParams> layers;

    Matrix fusion_W_s;  // fusion_width x (width + node_features)
    Matrix fusion_W_d;  // fusion_width x 3
    Matrix sigma;       // 1x1 RBF width, > 0
    Matrix w_T, b_T;    // 1x1 distance-conditioned score bias
    Matrix squeeze_W;   // width x fusion_width
    Matrix squeeze_b;   // 1 x width

    Matrix dec_W0, dec_b0;  // hidden x 3*width, 1 x hidden
    Matrix dec_W1, dec_b1;  // hidden x hidden,  1 x hidden
    Matrix dec_W2, dec_b2;  // 1 x hidden,       1 x 1
};

// Visits every parameter block in a fixed order. fn(name, matrix, trainable);
// this order is the checkpoint layout and the optimizer's pairing order.
template <class Params, class Fn>
void for_each_block(Params& p, Fn&& fn) {
    fn("embed.node.W", p.embed_node_W, true);
    fn("embed.edge.W", p.embed_edge_W, true);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        auto& lay = p.layers[l];
        const std::string base = "gnn." + std::to_string(l) + ".";
        fn(base + "W_v1", lay.W_v1, true);
        fn(base + "W_v2", lay.W_v2, true);
        fn(base + "W_v3", lay.W_v3, true);
        fn(base + "W_v4", lay.W_v4, true);
        fn(base + "W_e", lay.W_e, true);
        fn(base + "bn_node.gamma", lay.bn_node.gamma, true);
        fn(base + "bn_node.beta", lay.bn_node.beta, true);
        fn(base + "bn_node.run_mean", lay.bn_node.run_mean, false);
        fn(base + "bn_node.run_var", lay.bn_node.run_var, false);
        fn(base + "bn_edge.gamma", lay.bn_edge.gamma, true);
        fn(base + "bn_edge.beta", lay.bn_edge.beta, true);
        fn(base + "bn_edge.run_mean", lay.bn_edge.run_mean, false);
        fn(base + "bn_edge.run_var", lay.bn_edge.run_var, false);
    }
    fn("fusion.W_s", p.fusion_W_s, true);
    fn("fusion.W_d", p.fusion_W_d, true);
    fn("fusion.sigma", p.sigma, true);
    fn("fusion.w_T", p.w_T, true);
    fn("fusion.b_T", p.b_T, true);
    fn("fusion.squeeze.W", p.squeeze_W, true);
    fn("fusion.squeeze.b", p.squeeze_b, true);
    fn("decoder.0.W", p.dec_W0, true);
    fn("decoder.0.b", p.dec_b0, true);
    fn("decoder.1.W", p.dec_W1, true);
    fn("decoder.1.b", p.dec_b1, true);
    fn("decoder.2.W", p.dec_W2, true);
    fn("decoder.2.b", p.dec_b2, true);
}

// Weights uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], biases zero,
// batch-norm scale 1 / shift 0 / running stats (0, 1), sigma 1, w_T = b_T = 0.
ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);
ModelParams zeros_like(const ModelParams& p);

double global_grad_norm(const ModelParams& grads);

struct FeatureBundle {
    Matrix node_static;             // n x 6, min-max normalized per instance
    Matrix edge_static;             // m x 3: distance, expert H, capacity
    Matrix node_dynamic;            // n x 3: mean load, max load, depot flag
    Matrix edge_dynamic;            // m x 1: tc / cap
    std::vector<double> norm_dist;  // m, Manhattan distance / max over edges
};

FeatureBundle extract_features(const WarehouseInstance& inst, const TrafficState& traffic,
                               const HeuristicWeights& hw = {});

enum class NnMode { Train, Eval };

struct BnCache {
    std::vector<double> mean, var;  // per channel, batch statistics
};

struct LayerCache {
    Matrix node_pre;  // n  x width, pre-batch-norm sums
    Matrix edge_pre;  // 2m x width
    BnCache bn_node, bn_edge;
};

// Every intermediate the backward pass reads. Directed edge 2e runs u -> v of
// undirected edge e, and 2e+1 runs v -> u, so reversing a directed id is ^1.
struct ForwardCache {
    NnMode mode = NnMode::Eval;
    FeatureBundle features;

    std::vector<NodeId> dir_src, dir_dst;                  // 2m
    std::vector<std::vector<std::uint32_t>> out_edges;     // per node, adjacency order

    std::vector<Matrix> x_lv;  // n  x width, levels 0..L
    std::vector<Matrix> w_lv;  // 2m x width
    std::vector<LayerCache> layer;

    Matrix sfm_s;                          // n x (width + 6)
    Matrix q_s, q_d;                       // n x fusion_width
    std::vector<std::uint32_t> att_off;    // n+1 prefix offsets
    std::vector<std::uint32_t> att_nbr;    // flattened neighborhoods, self first
    std::vector<std::uint32_t> att_in_off; // n+1, incoming attention pairs
    std::vector<std::uint32_t> att_in;     // flattened indices into att_nbr space
    std::vector<double> att_dist;          // normalized distance per pair, 0 for self
    std::vector<double> att_s;             // raw scores
    std::vector<double> att_a;             // normalized attention weights
    Matrix fused_o;    // n x fusion_width
    Matrix node_out;   // n x width, post squeeze

    Matrix dec_in;                               // 2m x 3*width
    Matrix dec_h0_pre, dec_h0, dec_h1_pre, dec_h1;  // 2m x hidden
    std::vector<double> dec_logit, y_dir;        // 2m
    std::vector<double> y;                       // m, directed outputs averaged
};

inline double sigmoid(double u) { return 1.0 / (1.0 + std::exp(-u)); }
inline double silu(double u) { return u * sigmoid(u); }
inline double silu_grad(double u) {
    const double s = sigmoid(u);
    return s * (1.0 + u * (1.0 - s));
}

// Full pipeline: features -> embeddings -> message passing -> attention
// fusion -> decoder -> eta = y + floor. Train mode uses batch statistics and
// advances the running ones; eval mode reads the running statistics. Pass a
// cache to enable a later backward call.
HeuristicField nn_forward(const WarehouseInstance& inst, const TrafficState& traffic,
                          ModelParams& params, NnMode mode, Exec exec = Exec::Serial,
                          ForwardCache* cache = nullptr);

// Accumulates dL/d(block) into grads for upstream d_eta = dL/d(eta[e]) per
// undirected edge. Requires a train-mode cache.
void nn_backward(const WarehouseInstance& inst, const ForwardCache& cache,
                 const ModelParams& params, const std::vector<double>& d_eta, ModelParams& grads,
                 Exec exec = Exec::Serial);

// Row-normalized RBF attention over explicit neighborhoods:
// score(i,k) = -|q_s[i] - q_s[nbhd[i][k]]|^2 / (2 sigma^2) + tbias[i][k],
// fused[i] = q_d[i] + sum_k A[i][k] q_s[nbhd[i][k]].
void fuse_attention(const Matrix& q_s, const Matrix& q_d,
                    const std::vector<std::vector<std::uint32_t>>& nbhd,
                    const std::vector<std::vector<double>>& tbias, double sigma, Matrix& fused,
                    std::vector<std::vector<double>>& att);

void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

}  // namespace nahaco
