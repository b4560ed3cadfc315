#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nahaco/nn.hpp"
#include "nahaco/rng.hpp"

using namespace nahaco;

namespace {

// Zero every trainable weight of the message-passing layers, keeping the
// batch-norm scale/shift at their identity values.
void zero_gnn_layers(ModelParams& p) {
    for (GnnLayerParams& l : p.layers) {
        l.W_v1.fill(0.0);
        l.W_v2.fill(0.0);
        l.W_v3.fill(0.0);
        l.W_v4.fill(0.0);
        l.W_e.fill(0.0);
    }
}

void zero_decoder(ModelParams& p) {
    p.dec_W0.fill(0.0);
    p.dec_b0.fill(0.0);
    p.dec_W1.fill(0.0);
    p.dec_b1.fill(0.0);
    p.dec_W2.fill(0.0);
    p.dec_b2.fill(0.0);
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    REQUIRE(a.same_shape(b));
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.a[i] - b.a[i]));
    return m;
}

TrafficState random_traffic(const WarehouseInstance& inst, std::uint64_t seed) {
    TrafficState t = TrafficState::zero_for(inst);
    Rng rng(derive_seed(seed, 0xdeadULL));
    for (double& f : t.flow) f = std::floor(rng.uniform(0.0, 30.0));
    return t;
}

// Directional loss L = sum_e c[e] * eta[e] used by the finite-difference
// oracle; c is an arbitrary fixed vector.
double weighted_eta(const WarehouseInstance& inst, const TrafficState& traffic, ModelParams params,
                    const std::vector<double>& c) {
    const HeuristicField f = nn_forward(inst, traffic, params, NnMode::Train);
    double L = 0.0;
    for (std::size_t e = 0; e < f.eta.size(); ++e) L += c[e] * f.eta[e];
    return L;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("activation primitives: pinned values") {
    CHECK(silu(0.0) == 0.0);
    CHECK(silu(1.0) == doctest::Approx(0.7310585786300049).epsilon(1e-12));
    CHECK(sigmoid(0.0) == 0.5);
    CHECK(silu_grad(0.0) == 0.5);
    // silu_grad matches a central difference
    for (const double u : {-3.0, -0.7, 0.3, 2.5}) {
        const double h = 1e-6;
        const double fd = (silu(u + h) - silu(u - h)) / (2 * h);
        CHECK(silu_grad(u) == doctest::Approx(fd).epsilon(1e-6));
    }
}

TEST_CASE("feature extraction: shapes, ranges, pinned small case") {
    WarehouseInstance inst = gen_tsp_instance(10, 3, 9);
    TrafficState traffic = random_traffic(inst, 1);
    FeatureBundle f = extract_features(inst, traffic);

    REQUIRE(f.node_static.rows == inst.n_nodes());
    REQUIRE(f.node_static.cols == 6);
    REQUIRE(f.edge_static.rows == inst.n_edges());
    REQUIRE(f.edge_static.cols == 3);
    REQUIRE(f.node_dynamic.rows == inst.n_nodes());
    REQUIRE(f.node_dynamic.cols == 3);
    REQUIRE(f.edge_dynamic.rows == inst.n_edges());
    REQUIRE(f.edge_dynamic.cols == 1);
    REQUIRE(f.norm_dist.size() == inst.n_edges());
    for (const double v : f.node_static.a) {
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0);
    }
    for (const double v : f.edge_static.a) {
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0);
    }
    CHECK(f.node_dynamic(0, 2) == 1.0);  // depot flag
    for (NodeId i = 1; i < inst.n_nodes(); ++i) CHECK(f.node_dynamic(i, 2) == 0.0);

    {
        // two-node pinned case: degenerate columns collapse to zero
        std::vector<Cargo> nodes(2);
        nodes[1].x = 4.0;
        Edge e;
        e.u = 0;
        e.v = 1;
        WarehouseInstance tiny(nodes, {e});
        TrafficState t = TrafficState::zero_for(tiny);
        t.flow[0] = 10.0;
        FeatureBundle g = extract_features(tiny, t);
        CHECK(g.node_static(0, 0) == 0.0);
        CHECK(g.node_static(1, 0) == 1.0);
        CHECK(g.node_static(0, 3) == 0.0);  // equal sizes -> degenerate -> 0
        CHECK(g.edge_static(0, 0) == 1.0);  // d / d_max with one edge
        CHECK(g.edge_static(0, 1) == 0.0);  // degenerate H column
        CHECK(g.edge_dynamic(0, 0) == 0.5);
        CHECK(g.node_dynamic(0, 0) == 0.5);
        CHECK(g.node_dynamic(1, 1) == 0.5);
        CHECK(g.norm_dist[0] == 1.0);
    }

    TrafficState bad;
    bad.flow.assign(3, 0.0);
    bad.free_flow_time.assign(3, 1.0);
    CHECK_THROWS_AS(extract_features(inst, bad), std::invalid_argument);
}

TEST_CASE("init: shapes, ranges, determinism") {
    ModelConfig cfg;
    ModelParams p = init_params(cfg, 5);
    REQUIRE(p.layers.size() == 12);
    CHECK(p.embed_node_W.rows == 32);
    CHECK(p.embed_node_W.cols == 6);
    CHECK(p.fusion_W_s.rows == 64);
    CHECK(p.fusion_W_s.cols == 38);
    CHECK(p.fusion_W_d.cols == 3);
    CHECK(p.dec_W0.cols == 96);
    CHECK(p.sigma(0, 0) == 1.0);
    CHECK(p.w_T(0, 0) == 0.0);
    CHECK(p.b_T(0, 0) == 0.0);
    for (const GnnLayerParams& l : p.layers) {
        for (const double v : l.W_v1.a) REQUIRE(std::abs(v) <= 1.0 / std::sqrt(32.0));
        for (const double v : l.bn_node.gamma.a) REQUIRE(v == 1.0);
        for (const double v : l.bn_node.run_var.a) REQUIRE(v == 1.0);
        for (const double v : l.bn_node.run_mean.a) REQUIRE(v == 0.0);
    }
    for (const double v : p.embed_node_W.a) REQUIRE(std::abs(v) <= 1.0 / std::sqrt(6.0));

    ModelParams q = init_params(cfg, 5);
    CHECK(max_abs_diff(p.embed_node_W, q.embed_node_W) == 0.0);
    ModelParams r = init_params(cfg, 6);
    CHECK(max_abs_diff(p.embed_node_W, r.embed_node_W) > 0.0);
}

TEST_CASE("zero layer weights give an exact residual identity") {
    WarehouseInstance inst = gen_tsp_instance(9, 4, 8);
    TrafficState traffic = TrafficState::zero_for(inst);
    ModelParams p = init_params(ModelConfig{}, 2);
    zero_gnn_layers(p);

    ForwardCache cache;
    nn_forward(inst, traffic, p, NnMode::Train, Exec::Serial, &cache);
    REQUIRE(cache.x_lv.size() == 13);
    CHECK(max_abs_diff(cache.x_lv.back(), cache.x_lv.front()) <= 1e-9);
    CHECK(max_abs_diff(cache.w_lv.back(), cache.w_lv.front()) <= 1e-9);

    // eval mode at fresh running stats (mean 0, var 1) is also the identity
    ModelParams p2 = init_params(ModelConfig{}, 2);
    zero_gnn_layers(p2);
    ForwardCache cache2;
    nn_forward(inst, traffic, p2, NnMode::Eval, Exec::Serial, &cache2);
    CHECK(max_abs_diff(cache2.x_lv.back(), cache2.x_lv.front()) <= 1e-9);
}

TEST_CASE("attention fusion: pinned values") {
    {
        // single-element neighborhood: A = 1, O = Q_d + Q_s[j]
        Matrix q_s(2, 3), q_d(2, 3);
        for (std::size_t i = 0; i < q_s.size(); ++i) q_s.a[i] = 0.1 * (1.0 + i);
        for (std::size_t i = 0; i < q_d.size(); ++i) q_d.a[i] = -0.3 * (1.0 + i);
        std::vector<std::vector<std::uint32_t>> nbhd{{1}, {0}};
        std::vector<std::vector<double>> tbias{{0.0}, {0.0}};
        Matrix fused;
        std::vector<std::vector<double>> att;
        fuse_attention(q_s, q_d, nbhd, tbias, 1.0, fused, att);
        REQUIRE(att[0].size() == 1);
        CHECK(att[0][0] == doctest::Approx(1.0).epsilon(1e-15));
        for (std::size_t c = 0; c < 3; ++c) {
            CHECK(fused(0, c) == doctest::Approx(q_d(0, c) + q_s(1, c)).epsilon(1e-14));
            CHECK(fused(1, c) == doctest::Approx(q_d(1, c) + q_s(0, c)).epsilon(1e-14));
        }
    }
    {
        // identical Q_s rows, zero bias: uniform weights 1/|N|
        Matrix q_s(3, 2), q_d(3, 2);
        for (std::size_t r = 0; r < 3; ++r)
            for (std::size_t c = 0; c < 2; ++c) q_s(r, c) = 0.7;
        std::vector<std::vector<std::uint32_t>> nbhd{{0, 1, 2}, {0, 1}, {2}};
        std::vector<std::vector<double>> tbias{{0, 0, 0}, {0, 0}, {0}};
        Matrix fused;
        std::vector<std::vector<double>> att;
        fuse_attention(q_s, q_d, nbhd, tbias, 2.0, fused, att);
        for (const double a : att[0]) CHECK(a == doctest::Approx(1.0 / 3).epsilon(1e-14));
        for (const double a : att[1]) CHECK(a == doctest::Approx(0.5).epsilon(1e-14));
    }
    {
        // raw exponentiated scores (1, 3): A = (0.25, 0.75). Zero projections
        // make the RBF part vanish; the bias supplies ln 1 and ln 3.
        Matrix q_s(3, 2), q_d(3, 2);
        std::vector<std::vector<std::uint32_t>> nbhd{{1, 2}, {1}, {2}};
        std::vector<std::vector<double>> tbias{{0.0, std::log(3.0)}, {0.0}, {0.0}};
        Matrix fused;
        std::vector<std::vector<double>> att;
        fuse_attention(q_s, q_d, nbhd, tbias, 1.0, fused, att);
        CHECK(att[0][0] == doctest::Approx(0.25).epsilon(1e-12));
        CHECK(att[0][1] == doctest::Approx(0.75).epsilon(1e-12));
    }
    {
        Matrix q_s(2, 2), q_d(2, 2), fused;
        std::vector<std::vector<double>> att;
        std::vector<std::vector<std::uint32_t>> nbhd{{0}, {}};
        std::vector<std::vector<double>> tbias{{0.0}, {}};
        CHECK_THROWS_AS(fuse_attention(q_s, q_d, nbhd, tbias, 1.0, fused, att),
                        std::invalid_argument);
        std::vector<std::vector<std::uint32_t>> ok{{0}, {1}};
        std::vector<std::vector<double>> okb{{0.0}, {0.0}};
        CHECK_THROWS_AS(fuse_attention(q_s, q_d, ok, okb, 0.0, fused, att), std::domain_error);
    }
}

TEST_CASE("forward: eval determinism and immutability of running stats") {
    WarehouseInstance inst = gen_tsp_instance(11, 9, 6);
    TrafficState traffic = random_traffic(inst, 2);
    ModelParams p = init_params(ModelConfig{}, 3);

    // train once so the running stats are non-trivial
    nn_forward(inst, traffic, p, NnMode::Train);
    const Matrix stats_before = p.layers[0].bn_node.run_mean;
    CHECK(max_abs_diff(stats_before, Matrix(1, 32, 0.0)) > 0.0);

    const HeuristicField a = nn_forward(inst, traffic, p, NnMode::Eval);
    const HeuristicField b = nn_forward(inst, traffic, p, NnMode::Eval);
    REQUIRE(a.eta.size() == inst.n_edges());
    CHECK(a.eta == b.eta);
    CHECK(a.source == HeuristicField::Source::Learned);
    CHECK(max_abs_diff(p.layers[0].bn_node.run_mean, stats_before) == 0.0);
}

TEST_CASE("forward: zeroed dynamic weights make traffic invisible") {
    WarehouseInstance inst = gen_tsp_instance(10, 12, 9);
    ModelParams p = init_params(ModelConfig{}, 4);
    p.fusion_W_d.fill(0.0);
    for (std::size_t r = 0; r < p.embed_edge_W.rows; ++r) p.embed_edge_W(r, 3) = 0.0;

    TrafficState calm = TrafficState::zero_for(inst);
    TrafficState jam = random_traffic(inst, 3);
    const HeuristicField a = nn_forward(inst, calm, p, NnMode::Eval);
    const HeuristicField b = nn_forward(inst, jam, p, NnMode::Eval);
    CHECK(a.eta == b.eta);

    // control: with live dynamic weights the same traffic change moves eta
    ModelParams q = init_params(ModelConfig{}, 4);
    const HeuristicField c = nn_forward(inst, calm, q, NnMode::Eval);
    const HeuristicField d = nn_forward(inst, jam, q, NnMode::Eval);
    CHECK(c.eta != d.eta);
}

TEST_CASE("forward: one bounded eta per edge") {
    WarehouseInstance inst = gen_tsp_instance(8, 1, 7);
    TrafficState traffic = TrafficState::zero_for(inst);
    ModelParams p = init_params(ModelConfig{}, 5);
    const HeuristicField f = nn_forward(inst, traffic, p, NnMode::Eval);
    REQUIRE(f.eta.size() == inst.n_edges());
    for (const double v : f.eta) {
        REQUIRE(std::isfinite(v));
        REQUIRE(v >= 1e-6);
        REQUIRE(v < 1.0 + 1e-6);  // sigmoid output plus the floor
    }
}

TEST_CASE("forward: permutation equivariance") {
    const std::uint32_t n = 9;
    WarehouseInstance inst = gen_tsp_instance(n, 21, 5);
    TrafficState traffic = random_traffic(inst, 4);

    // permutation fixing the depot
    std::vector<NodeId> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(77);
    for (NodeId i = 1; i < n; ++i) {
        const NodeId j = 1 + static_cast<NodeId>(rng.uniform_int(i));  // shuffle 1..n-1
        std::swap(perm[i], perm[j]);
    }

    std::vector<Cargo> nodes2(n);
    for (NodeId i = 0; i < n; ++i) nodes2[perm[i]] = inst.node(i);
    std::vector<Edge> edges2;
    for (EdgeId e = 0; e < inst.n_edges(); ++e) {
        Edge ed = inst.edge(e);
        ed.u = perm[inst.edge(e).u];
        ed.v = perm[inst.edge(e).v];
        edges2.push_back(ed);
    }
    WarehouseInstance inst2(nodes2, edges2);
    TrafficState traffic2 = TrafficState::zero_for(inst2);
    for (EdgeId e = 0; e < inst.n_edges(); ++e) {
        const Edge& ed = inst.edge(e);
        traffic2.flow[*inst2.find_edge(perm[ed.u], perm[ed.v])] = traffic.flow[e];
    }

    ModelParams p = init_params(ModelConfig{}, 6);
    const HeuristicField f1 = nn_forward(inst, traffic, p, NnMode::Eval);
    const HeuristicField f2 = nn_forward(inst2, traffic2, p, NnMode::Eval);
    for (EdgeId e = 0; e < inst.n_edges(); ++e) {
        const Edge& ed = inst.edge(e);
        const EdgeId e2 = *inst2.find_edge(perm[ed.u], perm[ed.v]);
        REQUIRE(std::abs(f1.eta[e] - f2.eta[e2]) <= 1e-6);
    }
}

TEST_CASE("forward/backward: attention rows normalized, everything finite") {
    int cases = 0;
    Rng rng(31);
    while (cases < 100) {
        const std::uint32_t n = 5 + static_cast<std::uint32_t>(rng.uniform_int(8));
        const std::uint32_t k = 2 + static_cast<std::uint32_t>(rng.uniform_int(n - 2));
        WarehouseInstance inst = gen_tsp_instance(n, rng.next_u64(), k);
        TrafficState traffic = random_traffic(inst, rng.next_u64());
        ModelParams p = init_params(ModelConfig{}, rng.next_u64());

        ForwardCache cache;
        const HeuristicField f = nn_forward(inst, traffic, p, NnMode::Train, Exec::Serial, &cache);
        for (const double v : f.eta) REQUIRE(std::isfinite(v));
        for (const double v : cache.y) {
            REQUIRE(v > 0.0);
            REQUIRE(v < 1.0);
        }
        for (NodeId i = 0; i < n; ++i) {
            double sum = 0.0;
            for (std::uint32_t t = cache.att_off[i]; t < cache.att_off[i + 1]; ++t)
                sum += cache.att_a[t];
            REQUIRE(std::abs(sum - 1.0) <= 1e-6);
        }

        std::vector<double> d_eta(inst.n_edges());
        for (double& v : d_eta) v = rng.uniform(-1.0, 1.0);
        ModelParams grads = zeros_like(p);
        nn_backward(inst, cache, p, d_eta, grads, Exec::Serial);
        const double norm = global_grad_norm(grads);
        REQUIRE(std::isfinite(norm));
        REQUIRE(norm > 0.0);
        ++cases;
    }
}

TEST_CASE("backward: zero upstream gradient, missing cache, decoder bias at zero") {
    WarehouseInstance inst = gen_tsp_instance(7, 2, 6);
    TrafficState traffic = TrafficState::zero_for(inst);
    ModelParams p = init_params(ModelConfig{}, 7);

    ForwardCache cache;
    nn_forward(inst, traffic, p, NnMode::Train, Exec::Serial, &cache);
    {
        ModelParams grads = zeros_like(p);
        nn_backward(inst, cache, p, std::vector<double>(inst.n_edges(), 0.0), grads);
        CHECK(global_grad_norm(grads) == 0.0);
    }
    {
        ForwardCache eval_cache;
        nn_forward(inst, traffic, p, NnMode::Eval, Exec::Serial, &eval_cache);
        ModelParams grads = zeros_like(p);
        CHECK_THROWS_AS(
            nn_backward(inst, eval_cache, p, std::vector<double>(inst.n_edges(), 0.0), grads),
            std::logic_error);
    }
    {
        // zero decoder: y = 0.5 everywhere and d y / d b2 = sigmoid'(0) = 0.25
        ModelParams z = init_params(ModelConfig{}, 7);
        zero_decoder(z);
        ForwardCache c2;
        const HeuristicField f = nn_forward(inst, traffic, z, NnMode::Train, Exec::Serial, &c2);
        for (const double v : f.eta) CHECK(v == doctest::Approx(0.5 + 1e-6).epsilon(1e-15));

        std::vector<double> d_eta(inst.n_edges(), 0.0);
        d_eta[0] = 1.0;
        ModelParams grads = zeros_like(z);
        nn_backward(inst, c2, z, d_eta, grads);
        CHECK(grads.dec_b2(0, 0) == doctest::Approx(0.25).epsilon(1e-12));
    }
}

TEST_CASE("backward: analytic gradients match central finite differences") {
    const std::uint32_t n = 12;
    WarehouseInstance inst = gen_tsp_instance(n, 8, n - 1);
    TrafficState traffic = random_traffic(inst, 5);
    ModelParams base = init_params(ModelConfig{}, 8);

    Rng rng(123);
    std::vector<double> c(inst.n_edges());
    for (double& v : c) v = rng.uniform(-1.0, 1.0);

    ForwardCache cache;
    ModelParams fwd_params = base;
    nn_forward(inst, traffic, fwd_params, NnMode::Train, Exec::Serial, &cache);
    ModelParams grads = zeros_like(base);
    nn_backward(inst, cache, base, c, grads, Exec::Serial);

    // sample >= 50 trainable scalars spread over every block kind
    struct Pick {
        std::string name;
        std::size_t flat;
    };
    std::vector<Pick> picks;
    for_each_block(base, [&](const std::string& name, const Matrix& mat, bool trainable) {
        if (!trainable) return;
        const bool scalar_block = mat.size() == 1;
        const std::size_t take = scalar_block ? 1 : 2;
        for (std::size_t t = 0; t < take; ++t)
            picks.push_back({name, rng.uniform_int(mat.size())});
    });
    REQUIRE(picks.size() >= 50);

    const double h = 1e-4;
    for (const Pick& pick : picks) {
        double analytic = 0.0;
        for_each_block(grads, [&](const std::string& name, Matrix& mat, bool) {
            if (name == pick.name) analytic = mat.a[pick.flat];
        });

        ModelParams plus = base;
        ModelParams minus = base;
        for_each_block(plus, [&](const std::string& name, Matrix& mat, bool) {
            if (name == pick.name) mat.a[pick.flat] += h;
        });
        for_each_block(minus, [&](const std::string& name, Matrix& mat, bool) {
            if (name == pick.name) mat.a[pick.flat] -= h;
        });
        const double fd =
            (weighted_eta(inst, traffic, plus, c) - weighted_eta(inst, traffic, minus, c)) /
            (2 * h);

        const double scale = std::max({std::abs(fd), std::abs(analytic), 1e-6});
        INFO("block ", pick.name, " flat ", pick.flat, " analytic ", analytic, " fd ", fd);
        REQUIRE(std::abs(fd - analytic) / scale <= 1e-3);
    }
}

TEST_CASE("checkpoint: round trip, stability, and corruption detection") {
    ModelConfig cfg;
    cfg.width = 16;
    cfg.fusion_width = 24;
    cfg.n_layers = 3;
    cfg.decoder_hidden = 8;
    ModelParams p = init_params(cfg, 9);
    // make the running stats non-trivial so they are exercised too
    WarehouseInstance inst = gen_tsp_instance(7, 3, 6);
    TrafficState traffic = TrafficState::zero_for(inst);
    nn_forward(inst, traffic, p, NnMode::Train);

    const std::string path = "tmp_model_roundtrip.ckpt";
    save_checkpoint(p, path);
    ModelParams q = load_checkpoint(path);
    CHECK(q.config.width == 16);
    CHECK(q.config.fusion_width == 24);
    CHECK(q.config.n_layers == 3);
    CHECK(q.config.decoder_hidden == 8);
    for_each_block(p, [&](const std::string& name, const Matrix& mat, bool) {
        const Matrix* other = nullptr;
        for_each_block(q, [&](const std::string& n2, const Matrix& m2, bool) {
            if (n2 == name) other = &m2;
        });
        REQUIRE(other != nullptr);
        REQUIRE(other->same_shape(mat));
        for (std::size_t i = 0; i < mat.size(); ++i)
            REQUIRE(std::abs(mat.a[i] - other->a[i]) <=
                    1e-6 * std::max(1.0, std::abs(mat.a[i])));
    });

    // float32 storage is idempotent: a second save/load round trip is exact
    const std::string path2 = "tmp_model_roundtrip2.ckpt";
    save_checkpoint(q, path2);
    CHECK(slurp(path) == slurp(path2));

    {
        std::string bytes = slurp(path);
        bytes[0] = 'X';
        std::ofstream(path2, std::ios::binary) << bytes;
        CHECK_THROWS_AS(load_checkpoint(path2), std::runtime_error);
    }
    {
        const std::string bytes = slurp(path);
        std::ofstream(path2, std::ios::binary) << bytes.substr(0, bytes.size() / 2);
        CHECK_THROWS_AS(load_checkpoint(path2), std::runtime_error);
    }
    {
        std::string bytes = slurp(path);
        bytes[4] = 9;  // version field
        std::ofstream(path2, std::ios::binary) << bytes;
        CHECK_THROWS_AS(load_checkpoint(path2), std::runtime_error);
    }
    CHECK_THROWS_AS(load_checkpoint("no_such_checkpoint.ckpt"), std::runtime_error);
    std::remove(path.c_str());
    std::remove(path2.c_str());
}

TEST_CASE("forward: serial and parallel execution agree bitwise") {
    WarehouseInstance inst = gen_tsp_instance(13, 17, 8);
    TrafficState traffic = random_traffic(inst, 6);
    ModelParams p1 = init_params(ModelConfig{}, 10);
    ModelParams p2 = init_params(ModelConfig{}, 10);

    ForwardCache c1, c2;
    const HeuristicField a = nn_forward(inst, traffic, p1, NnMode::Train, Exec::Serial, &c1);
    const HeuristicField b = nn_forward(inst, traffic, p2, NnMode::Train, Exec::OpenMP, &c2);
    REQUIRE(a.eta == b.eta);

    std::vector<double> d_eta(inst.n_edges());
    Rng rng(55);
    for (double& v : d_eta) v = rng.uniform(-1.0, 1.0);
    ModelParams g1 = zeros_like(p1);
    ModelParams g2 = zeros_like(p2);
    nn_backward(inst, c1, p1, d_eta, g1, Exec::Serial);
    nn_backward(inst, c2, p2, d_eta, g2, Exec::OpenMP);
    for_each_block(g1, [&](const std::string& name, const Matrix& mat, bool) {
        for_each_block(g2, [&](const std::string& n2, const Matrix& m2, bool) {
            if (n2 == name) REQUIRE(mat.a == m2.a);
        });
    });
}
