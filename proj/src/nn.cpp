#include "nahaco/nn.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "nahaco/rng.hpp"

namespace nahaco {

namespace {

// Shapes only, all values zero. init_params fills in the defaults.
ModelParams make_params(const ModelConfig& cfg) {
    if (cfg.width == 0 || cfg.fusion_width == 0 || cfg.decoder_hidden == 0 || cfg.n_layers == 0)
        throw std::invalid_argument("model dimensions must be positive");
    ModelParams p;
    p.config = cfg;
    const std::size_t w = cfg.width;
    p.embed_node_W = Matrix(w, cfg.node_features);
    p.embed_edge_W = Matrix(w, cfg.edge_features);
    p.layers.resize(cfg.n_layers);
    for (auto& lay : p.layers) {
        lay.W_v1 = lay.W_v2 = lay.W_v3 = lay.W_v4 = lay.W_e = Matrix(w, w);
        for (BatchNormParams* bn : {&lay.bn_node, &lay.bn_edge}) {
            bn->gamma = bn->beta = bn->run_mean = bn->run_var = Matrix(1, w);
        }
    }
    p.fusion_W_s = Matrix(cfg.fusion_width, w + cfg.node_features);
    p.fusion_W_d = Matrix(cfg.fusion_width, 3);
    p.sigma = Matrix(1, 1);
    p.w_T = Matrix(1, 1);
    p.b_T = Matrix(1, 1);
    p.squeeze_W = Matrix(w, cfg.fusion_width);
    p.squeeze_b = Matrix(1, w);
    p.dec_W0 = Matrix(cfg.decoder_hidden, 3 * w);
    p.dec_b0 = Matrix(1, cfg.decoder_hidden);
    p.dec_W1 = Matrix(cfg.decoder_hidden, cfg.decoder_hidden);
    p.dec_b1 = Matrix(1, cfg.decoder_hidden);
    p.dec_W2 = Matrix(1, cfg.decoder_hidden);
    p.dec_b2 = Matrix(1, 1);
    return p;
}

void fill_uniform(Matrix& m, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(m.cols));
    for (double& v : m.a) v = rng.uniform(-bound, bound);
}

double minmax_norm(double v, double lo, double hi) { return hi > lo ? (v - lo) / (hi - lo) : 0.0; }

}  // namespace

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
    ModelParams p = make_params(cfg);
    Rng rng(derive_seed(seed, 0x6e6e696e69ULL));
    // Draw order is fixed: weight matrices in block order.
    fill_uniform(p.embed_node_W, rng);
    fill_uniform(p.embed_edge_W, rng);
    for (auto& lay : p.layers) {
        fill_uniform(lay.W_v1, rng);
        fill_uniform(lay.W_v2, rng);
        fill_uniform(lay.W_v3, rng);
        fill_uniform(lay.W_v4, rng);
        fill_uniform(lay.W_e, rng);
        for (BatchNormParams* bn : {&lay.bn_node, &lay.bn_edge}) {
            bn->gamma.fill(1.0);
            bn->run_var.fill(1.0);
        }
    }
    fill_uniform(p.fusion_W_s, rng);
    fill_uniform(p.fusion_W_d, rng);
    p.sigma(0, 0) = 1.0;
    fill_uniform(p.squeeze_W, rng);
    fill_uniform(p.dec_W0, rng);
    fill_uniform(p.dec_W1, rng);
    fill_uniform(p.dec_W2, rng);
    return p;
}

ModelParams zeros_like(const ModelParams& p) {
    ModelParams z = p;
    for_each_block(z, [](const std::string&, Matrix& m, bool) { m.fill(0.0); });
    return z;
}

double global_grad_norm(const ModelParams& grads) {
    double s = 0.0;
    for_each_block(const_cast<ModelParams&>(grads), [&](const std::string&, Matrix& m, bool trainable) {
        if (!trainable) return;
        for (double v : m.a) s += v * v;
    });
    return std::sqrt(s);
}

FeatureBundle extract_features(const WarehouseInstance& inst, const TrafficState& traffic,
                               const HeuristicWeights& hw) {
    const std::size_t n = inst.n_nodes(), m = inst.n_edges();
    if (traffic.flow.size() != m) throw std::invalid_argument("traffic state does not match instance");

    FeatureBundle f;
    f.node_static = Matrix(n, 6);
    for (std::size_t i = 0; i < n; ++i) {
        const Cargo& c = inst.node(i);
        double* r = f.node_static.row(i);
        r[0] = c.x;
        r[1] = c.y;
        r[2] = c.z;
        r[3] = c.size;
        r[4] = c.weight;
        r[5] = c.special;
    }
    for (std::size_t c = 0; c < 6; ++c) {
        double lo = f.node_static(0, c), hi = lo;
        for (std::size_t i = 1; i < n; ++i) {
            lo = std::min(lo, f.node_static(i, c));
            hi = std::max(hi, f.node_static(i, c));
        }
        for (std::size_t i = 0; i < n; ++i) f.node_static(i, c) = minmax_norm(f.node_static(i, c), lo, hi);
    }

    const HeuristicField expert = expert_heuristic(inst, hw);
    std::vector<double> dist(m);
    double d_max = 0.0;
    double h_lo = expert.eta[0], h_hi = expert.eta[0];
    double cap_lo = inst.edge(0).capacity, cap_hi = cap_lo;
    for (std::size_t e = 0; e < m; ++e) {
        const Edge& ed = inst.edge(e);
        dist[e] = manhattan_distance(inst.node(ed.u), inst.node(ed.v));
        d_max = std::max(d_max, dist[e]);
        h_lo = std::min(h_lo, expert.eta[e]);
        h_hi = std::max(h_hi, expert.eta[e]);
        cap_lo = std::min(cap_lo, ed.capacity);
        cap_hi = std::max(cap_hi, ed.capacity);
    }
    f.edge_static = Matrix(m, 3);
    f.edge_dynamic = Matrix(m, 1);
    f.norm_dist.resize(m);
    for (std::size_t e = 0; e < m; ++e) {
        f.norm_dist[e] = d_max > 0.0 ? dist[e] / d_max : 0.0;
        f.edge_static(e, 0) = f.norm_dist[e];
        f.edge_static(e, 1) = minmax_norm(expert.eta[e], h_lo, h_hi);
        f.edge_static(e, 2) = minmax_norm(inst.edge(e).capacity, cap_lo, cap_hi);
        f.edge_dynamic(e, 0) = traffic.flow[e] / inst.edge(e).capacity;
    }

    f.node_dynamic = Matrix(n, 3);
    for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0, mx = 0.0;
        const auto& nbrs = inst.neighbors(i);
        for (const auto& [j, e] : nbrs) {
            (void)j;
            const double r = traffic.flow[e] / inst.edge(e).capacity;
            sum += r;
            mx = std::max(mx, r);
        }
        f.node_dynamic(i, 0) = nbrs.empty() ? 0.0 : sum / static_cast<double>(nbrs.size());
        f.node_dynamic(i, 1) = mx;
        f.node_dynamic(i, 2) = (i == inst.depot()) ? 1.0 : 0.0;
    }
    return f;
}

namespace {

// Train mode normalizes with batch statistics and advances the running ones;
// eval mode normalizes with the running statistics. Statistics are computed
// one channel per task so results do not depend on the execution path.
void bn_forward(const Matrix& in, BatchNormParams& bn, double eps, double momentum, NnMode mode,
                Exec exec, Matrix& out, BnCache& cache) {
    const std::size_t batch = in.rows, width = in.cols;
    out = Matrix(batch, width);
    cache.mean.assign(width, 0.0);
    cache.var.assign(width, 0.0);
    for_each_index(exec, static_cast<std::ptrdiff_t>(width), [&](std::ptrdiff_t c) {
        double mean, var;
        if (mode == NnMode::Train) {
            double s = 0.0;
            for (std::size_t i = 0; i < batch; ++i) s += in(i, c);
            mean = s / static_cast<double>(batch);
            double v = 0.0;
            for (std::size_t i = 0; i < batch; ++i) {
                const double d = in(i, c) - mean;
                v += d * d;
            }
            var = v / static_cast<double>(batch);
            bn.run_mean(0, c) = (1.0 - momentum) * bn.run_mean(0, c) + momentum * mean;
            bn.run_var(0, c) = (1.0 - momentum) * bn.run_var(0, c) + momentum * var;
        } else {
            mean = bn.run_mean(0, c);
            var = bn.run_var(0, c);
        }
        cache.mean[c] = mean;
        cache.var[c] = var;
        const double inv = 1.0 / std::sqrt(var + eps);
        const double g = bn.gamma(0, c), b = bn.beta(0, c);
        for (std::size_t i = 0; i < batch; ++i) out(i, c) = g * (in(i, c) - mean) * inv + b;
    });
}

// Batch-statistics branch only. d_in is overwritten; dgamma/dbeta accumulate.
void bn_backward(const Matrix& in, const BnCache& st, const BatchNormParams& bn, double eps,
                 const Matrix& d_out, Exec exec, Matrix& d_in, Matrix& dgamma, Matrix& dbeta) {
    const std::size_t batch = in.rows, width = in.cols;
    d_in = Matrix(batch, width);
    for_each_index(exec, static_cast<std::ptrdiff_t>(width), [&](std::ptrdiff_t c) {
        const double mean = st.mean[c];
        const double inv = 1.0 / std::sqrt(st.var[c] + eps);
        const double g = bn.gamma(0, c);
        double s0 = 0.0, s1 = 0.0;
        for (std::size_t i = 0; i < batch; ++i) {
            const double xh = (in(i, c) - mean) * inv;
            const double dy = d_out(i, c);
            s0 += dy;
            s1 += dy * xh;
        }
        dgamma(0, c) += s1;
        dbeta(0, c) += s0;
        const double ib = 1.0 / static_cast<double>(batch);
        for (std::size_t i = 0; i < batch; ++i) {
            const double xh = (in(i, c) - mean) * inv;
            d_in(i, c) = g * inv * (d_out(i, c) - s0 * ib - xh * s1 * ib);
        }
    });
}

}  // namespace

HeuristicField nn_forward(const WarehouseInstance& inst, const TrafficState& traffic,
                          ModelParams& params, NnMode mode, Exec exec, ForwardCache* cache_out) {
    const ModelConfig& cfg = params.config;
    const std::size_t n = inst.n_nodes(), m = inst.n_edges(), md = 2 * m;
    const std::size_t w = cfg.width, fw = cfg.fusion_width, dh = cfg.decoder_hidden;
    const double sig = params.sigma(0, 0);
    if (!(sig > 0.0)) throw std::domain_error("rbf width must be positive");

    ForwardCache local;
    ForwardCache& c = cache_out ? *cache_out : local;
    c = ForwardCache{};
    c.mode = mode;
    c.features = extract_features(inst, traffic);

    // Directed layout: 2e runs u->v, 2e+1 runs v->u.
    c.dir_src.resize(md);
    c.dir_dst.resize(md);
    for (std::size_t e = 0; e < m; ++e) {
        const Edge& ed = inst.edge(e);
        c.dir_src[2 * e] = ed.u;
        c.dir_dst[2 * e] = ed.v;
        c.dir_src[2 * e + 1] = ed.v;
        c.dir_dst[2 * e + 1] = ed.u;
    }
    c.out_edges.assign(n, {});
    for (std::size_t i = 0; i < n; ++i) {
        for (const auto& [j, e] : inst.neighbors(i)) {
            (void)j;
            c.out_edges[i].push_back(2 * e + (inst.edge(e).u == i ? 0u : 1u));
        }
    }

    // Input embeddings.
    c.x_lv.reserve(cfg.n_layers + 1);
    c.w_lv.reserve(cfg.n_layers + 1);
    {
        Matrix x0(n, w), w0(md, w);
        for_each_index(exec, static_cast<std::ptrdiff_t>(n), [&](std::ptrdiff_t i) {
            matvec(params.embed_node_W, c.features.node_static.row(i), x0.row(i));
            for (std::size_t ch = 0; ch < w; ++ch) x0(i, ch) = silu(x0(i, ch));
        });
        for_each_index(exec, static_cast<std::ptrdiff_t>(md), [&](std::ptrdiff_t d) {
            const std::size_t e = static_cast<std::size_t>(d) >> 1;
            const double feat[4] = {c.features.edge_static(e, 0), c.features.edge_static(e, 1),
                                    c.features.edge_static(e, 2), c.features.edge_dynamic(e, 0)};
            matvec(params.embed_edge_W, feat, w0.row(d));
            for (std::size_t ch = 0; ch < w; ++ch) w0(d, ch) = silu(w0(d, ch));
        });
        c.x_lv.push_back(std::move(x0));
        c.w_lv.push_back(std::move(w0));
    }

    // Message-passing layers.
    c.layer.resize(cfg.n_layers);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const Matrix& x = c.x_lv[l];
        const Matrix& wl = c.w_lv[l];
        GnnLayerParams& lp = params.layers[l];
        LayerCache& lc = c.layer[l];

        Matrix xb1(n, w), xb2(n, w), xb3(n, w), xb4(n, w);
        for_each_index(exec, static_cast<std::ptrdiff_t>(n), [&](std::ptrdiff_t i) {
            matvec(lp.W_v1, x.row(i), xb1.row(i));
            matvec(lp.W_v2, x.row(i), xb2.row(i));
            matvec(lp.W_v3, x.row(i), xb3.row(i));
            matvec(lp.W_v4, x.row(i), xb4.row(i));
        });

        lc.node_pre = Matrix(n, w);
        for_each_index(exec, static_cast<std::ptrdiff_t>(n), [&](std::ptrdiff_t i) {
            const auto& oe = c.out_edges[i];
            const double inv = 1.0 / static_cast<double>(oe.size());
            double* u = lc.node_pre.row(i);
            for (std::size_t ch = 0; ch < w; ++ch) {
                double s = 0.0;
                for (const std::uint32_t d : oe) s += wl(d, ch) * xb2(c.dir_dst[d], ch);
                u[ch] = xb1(i, ch) + inv * s;
            }
        });

        lc.edge_pre = Matrix(md, w);
        for_each_index(exec, static_cast<std::ptrdiff_t>(md), [&](std::ptrdiff_t d) {
            double* v = lc.edge_pre.row(d);
            matvec(lp.W_e, wl.row(d), v);
            const double* a3 = xb3.row(c.dir_src[d]);
            const double* a4 = xb4.row(c.dir_dst[d]);
            for (std::size_t ch = 0; ch < w; ++ch) v[ch] += a3[ch] + a4[ch];
        });

        Matrix node_bn, edge_bn;
        bn_forward(lc.node_pre, lp.bn_node, cfg.bn_eps, cfg.bn_momentum, mode, exec, node_bn,
                   lc.bn_node);
        bn_forward(lc.edge_pre, lp.bn_edge, cfg.bn_eps, cfg.bn_momentum, mode, exec, edge_bn,
                   lc.bn_edge);

        Matrix x_next(n, w), w_next(md, w);
        for_each_index(exec, static_cast<std::ptrdiff_t>(n), [&](std::ptrdiff_t i) {
            for (std::size_t ch = 0; ch < w; ++ch) x_next(i, ch) = x(i, ch) + silu(node_bn(i, ch));
        });
        for_each_index(exec, static_cast<std::ptrdiff_t>(md), [&](std::ptrdiff_t d) {
            for (std::size_t ch = 0; ch < w; ++ch) w_next(d, ch) = wl(d, ch) + silu(edge_bn(d, ch));
        });
        c.x_lv.push_back(std::move(x_next));
        c.w_lv.push_back(std::move(w_next));
    }

    // Static-dynamic fusion.
    const Matrix& xf = c.x_lv[cfg.n_layers];
    c.sfm_s = Matrix(n, w + 6);
    for (std::size_t i = 0; i < n; ++i) {
        double* r = c.sfm_s.row(i);
        std::memcpy(r, xf.row(i), w * sizeof(double));
        std::memcpy(r + w, c.features.node_static.row(i), 6 * sizeof(double));
    }
    c.q_s = Matrix(n, fw);
    c.q_d = Matrix(n, fw);
    for_each_index(exec, static_cast<std::ptrdiff_t>(n), [&](std::ptrdiff_t i) {
        matvec(params.fusion_W_s, c.sfm_s.row(i), c.q_s.row(i));
        matvec(params.fusion_W_d, c.features.node_dynamic.row(i), c.q_d.row(i));
    });

    c.att_off.assign(n + 1, 0);
    for (std::size_t i = 0; i < n; ++i)
        c.att_off[i + 1] = c.att_off[i] + 1 + static_cast<std::uint32_t>(c.out_edges[i].size());
    const std::size_t n_pairs = c.att_off[n];
    c.att_nbr.resize(n_pairs);
    c.att_dist.resize(n_pairs);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t idx = c.att_off[i];
        c.att_nbr[idx] = static_cast<std::uint32_t>(i);  // self first
        c.att_dist[idx] = 0.0;
        ++idx;
        for (const std::uint32_t d : c.out_edges[i]) {
            c.att_nbr[idx] = c.dir_dst[d];
            c.att_dist[idx] = c.features.norm_dist[d >> 1];
            ++idx;
        }
    }
    // Incoming pair lists, for the per-node scatter in backward.
    {
        std::vector<std::uint32_t> counts(n, 0);
        for (std::size_t idx = 0; idx < n_pairs; ++idx) ++counts[c.att_nbr[idx]];
        c.att_in_off.assign(n + 1, 0);
        for (std::size_t i = 0; i < n; ++i) c.att_in_off[i + 1] = c.att_in_off[i] + counts[i];
        c.att_in.resize(n_pairs);
        std::vector<std::uint32_t> cursor(c.att_in_off.begin(), c.att_in_off.end() - 1);
        for (std::size_t idx = 0; idx < n_pairs; ++idx) c.att_in[cursor[c.att_nbr[idx]]++] = idx;
    }

    c.att_s.resize(n_pairs);
    c.att_a.resize(n_pairs);
    c.fused_o = Matrix(n, fw);
    const double wt = params.w_T(0, 0), bt = params.b_T(0, 0);
    const double inv2s2 = 1.0 / (2.0 * sig * sig);
    for_each_index(exec, static_cast<std::ptrdiff_t>(n), [&](std::ptrdiff_t i) {
        const std::size_t lo = c.att_off[i], hi = c.att_off[i + 1];
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t idx = lo; idx < hi; ++idx) {
            const std::uint32_t j = c.att_nbr[idx];
            double d2 = 0.0;
            const double* qi = c.q_s.row(i);
            const double* qj = c.q_s.row(j);
            for (std::size_t ch = 0; ch < fw; ++ch) {
                const double d = qi[ch] - qj[ch];
                d2 += d * d;
            }
            const double s = -d2 * inv2s2 + wt * c.att_dist[idx] + bt;
            c.att_s[idx] = s;
            mx = std::max(mx, s);
        }
        double denom = 0.0;
        for (std::size_t idx = lo; idx < hi; ++idx) {
            c.att_a[idx] = std::exp(c.att_s[idx] - mx);
            denom += c.att_a[idx];
        }
        double* o = c.fused_o.row(i);
        std::memcpy(o, c.q_d.row(i), fw * sizeof(double));
        for (std::size_t idx = lo; idx < hi; ++idx) {
            c.att_a[idx] /= denom;
            const double* qj = c.q_s.row(c.att_nbr[idx]);
            const double a = c.att_a[idx];
            for (std::size_t ch = 0; ch < fw; ++ch) o[ch] += a * qj[ch];
        }
    });

    c.node_out = Matrix(n, w);
    for_each_index(exec, static_cast<std::ptrdiff_t>(n), [&](std::ptrdiff_t i) {
        matvec(params.squeeze_W, c.fused_o.row(i), c.node_out.row(i));
        for (std::size_t ch = 0; ch < w; ++ch) c.node_out(i, ch) += params.squeeze_b(0, ch);
    });

    // Decoder over directed edges, then symmetrize.
    c.dec_in = Matrix(md, 3 * w);
    c.dec_h0_pre = Matrix(md, dh);
    c.dec_h0 = Matrix(md, dh);
    c.dec_h1_pre = Matrix(md, dh);
    c.dec_h1 = Matrix(md, dh);
    c.dec_logit.resize(md);
    c.y_dir.resize(md);
    for_each_index(exec, static_cast<std::ptrdiff_t>(md), [&](std::ptrdiff_t d) {
        double* in = c.dec_in.row(d);
        std::memcpy(in, c.node_out.row(c.dir_src[d]), w * sizeof(double));
        std::memcpy(in + w, c.node_out.row(c.dir_dst[d]), w * sizeof(double));
        std::memcpy(in + 2 * w, c.w_lv[cfg.n_layers].row(d), w * sizeof(double));
        matvec(params.dec_W0, in, c.dec_h0_pre.row(d));
        for (std::size_t ch = 0; ch < dh; ++ch) {
            c.dec_h0_pre(d, ch) += params.dec_b0(0, ch);
            c.dec_h0(d, ch) = silu(c.dec_h0_pre(d, ch));
        }
        matvec(params.dec_W1, c.dec_h0.row(d), c.dec_h1_pre.row(d));
        for (std::size_t ch = 0; ch < dh; ++ch) {
            c.dec_h1_pre(d, ch) += params.dec_b1(0, ch);
            c.dec_h1(d, ch) = silu(c.dec_h1_pre(d, ch));
        }
        double z = params.dec_b2(0, 0);
        const double* w2 = params.dec_W2.row(0);
        const double* h1 = c.dec_h1.row(d);
        for (std::size_t ch = 0; ch < dh; ++ch) z += w2[ch] * h1[ch];
        c.dec_logit[d] = z;
        c.y_dir[d] = sigmoid(z);
    });
    c.y.resize(m);
    for (std::size_t e = 0; e < m; ++e) c.y[e] = 0.5 * (c.y_dir[2 * e] + c.y_dir[2 * e + 1]);

    HeuristicField out;
    out.source = HeuristicField::Source::Learned;
    out.eta.resize(m);
    for (std::size_t e = 0; e < m; ++e) out.eta[e] = c.y[e] + cfg.eta_floor;
    return out;
}

void nn_backward(const WarehouseInstance& inst, const ForwardCache& c, const ModelParams& params,
                 const std::vector<double>& d_eta, ModelParams& grads, Exec exec) {
    if (c.mode != NnMode::Train)
        throw std::logic_error("backward requires a train-mode forward cache");
    const ModelConfig& cfg = params.config;
    const std::size_t n = inst.n_nodes(), m = inst.n_edges(), md = 2 * m;
    const std::size_t w = cfg.width, fw = cfg.fusion_width, dh = cfg.decoder_hidden;
    if (d_eta.size() != m) throw std::invalid_argument("upstream gradient size mismatch");

    // Decoder backward. eta = y + floor, y = mean of the two directed outputs.
    Matrix dh1_pre(md, dh), dh0_pre(md, dh), din(md, 3 * w);
    std::vector<double> dlogit(md);
    for_each_index(exec, static_cast<std::ptrdiff_t>(md), [&](std::ptrdiff_t d) {
        const double dy = 0.5 * d_eta[static_cast<std::size_t>(d) >> 1];
        const double yv = c.y_dir[d];
        dlogit[d] = dy * yv * (1.0 - yv);
        for (std::size_t ch = 0; ch < dh; ++ch)
            dh1_pre(d, ch) = params.dec_W2(0, ch) * dlogit[d] * silu_grad(c.dec_h1_pre(d, ch));
        double* g0 = dh0_pre.row(d);
        std::fill(g0, g0 + dh, 0.0);
        matvec_t_acc(params.dec_W1, dh1_pre.row(d), g0);
        for (std::size_t ch = 0; ch < dh; ++ch) g0[ch] *= silu_grad(c.dec_h0_pre(d, ch));
        double* gi = din.row(d);
        std::fill(gi, gi + 3 * w, 0.0);
        matvec_t_acc(params.dec_W0, g0, gi);
    });
    for_each_index(exec, static_cast<std::ptrdiff_t>(dh), [&](std::ptrdiff_t ch) {
        double s2 = 0.0, s1 = 0.0, s0 = 0.0;
        for (std::size_t d = 0; d < md; ++d) {
            s2 += dlogit[d] * c.dec_h1(d, ch);
            s1 += dh1_pre(d, ch);
            s0 += dh0_pre(d, ch);
        }
        grads.dec_W2(0, ch) += s2;
        grads.dec_b1(0, ch) += s1;
        grads.dec_b0(0, ch) += s0;
    });
    {
        double s = 0.0;
        for (std::size_t d = 0; d < md; ++d) s += dlogit[d];
        grads.dec_b2(0, 0) += s;
    }
    for_each_index(exec, static_cast<std::ptrdiff_t>(dh), [&](std::ptrdiff_t r) {
        for (std::size_t col = 0; col < dh; ++col) {
            double s = 0.0;
            for (std::size_t d = 0; d < md; ++d) s += dh1_pre(d, r) * c.dec_h0(d, col);
            grads.dec_W1(r, col) += s;
        }
        for (std::size_t col = 0; col < 3 * w; ++col) {
            double s = 0.0;
            for (std::size_t d = 0; d < md; ++d) s += dh0_pre(d, r) * c.dec_in(d, col);
            grads.dec_W0(r, col) += s;
        }
    });

    Matrix d_node_out(n, w);
    for_each_index(exec, static_cast<std::ptrdiff_t>(n), [&](std::ptrdiff_t p) {
        double* g = d_node_out.row(p);
        for (const std::uint32_t d : c.out_edges[p]) {
            const double* a = din.row(d);             // p as source, first block
            const double* b = din.row(d ^ 1u) + w;    // p as target, second block
            for (std::size_t ch = 0; ch < w; ++ch) g[ch] += a[ch] + b[ch];
        }
    });
    Matrix dw(md, w);  // gradient wrt final edge embeddings
    for_each_index(exec, static_cast<std::ptrdiff_t>(md), [&](std::ptrdiff_t d) {
        std::memcpy(dw.row(d), din.row(d) + 2 * w, w * sizeof(double));
    });

    // Squeeze backward.
    Matrix d_fused(n, fw);
    for_each_index(exec, static_cast<std::ptrdiff_t>(n), [&](std::ptrdiff_t i) {
        double* g = d_fused.row(i);
        std::fill(g, g + fw, 0.0);
        matvec_t_acc(params.squeeze_W, d_node_out.row(i), g);
    });
    for_each_index(exec, static_cast<std::ptrdiff_t>(w), [&](std::ptrdiff_t r) {
        double sb = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            sb += d_node_out(i, r);
            for (std::size_t col = 0; col < fw; ++col)
                grads.squeeze_W(r, col) += d_node_out(i, r) * c.fused_o(i, col);
        }
        grads.squeeze_b(0, r) += sb;
    });

    // Attention backward. O_i = q_d_i + sum_k A_ik q_s_k.
    const double sig = params.sigma(0, 0);
    const double inv_s2 = 1.0 / (sig * sig);
    const std::size_t n_pairs = c.att_nbr.size();
    std::vector<double> ds(n_pairs);
    for_each_index(exec, static_cast<std::ptrdiff_t>(n), [&](std::ptrdiff_t i) {
        const std::size_t lo = c.att_off[i], hi = c.att_off[i + 1];
        const double* gf = d_fused.row(i);
        double rowsum = 0.0;
        for (std::size_t idx = lo; idx < hi; ++idx) {
            const double* qj = c.q_s.row(c.att_nbr[idx]);
            double g = 0.0;
            for (std::size_t ch = 0; ch < fw; ++ch) g += gf[ch] * qj[ch];
            ds[idx] = g;  // holds dL/dA until the softmax step below
            rowsum += c.att_a[idx] * g;
        }
        for (std::size_t idx = lo; idx < hi; ++idx) ds[idx] = c.att_a[idx] * (ds[idx] - rowsum);
    });
    {
        // Scalar parameters: one global sum each, kept serial for determinism.
        double dsig = 0.0, dwt = 0.0, dbt = 0.0;
        const double inv_s3 = 1.0 / (sig * sig * sig);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t idx = c.att_off[i]; idx < c.att_off[i + 1]; ++idx) {
                const std::uint32_t j = c.att_nbr[idx];
                double d2 = 0.0;
                const double* qi = c.q_s.row(i);
                const double* qj = c.q_s.row(j);
                for (std::size_t ch = 0; ch < fw; ++ch) {
                    const double d = qi[ch] - qj[ch];
                    d2 += d * d;
                }
                dsig += ds[idx] * d2 * inv_s3;
                dwt += ds[idx] * c.att_dist[idx];
                dbt += ds[idx];
            }
        }
        grads.sigma(0, 0) += dsig;
        grads.w_T(0, 0) += dwt;
        grads.b_T(0, 0) += dbt;
    }
    std::vector<std::uint32_t> att_row(n_pairs);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t idx = c.att_off[i]; idx < c.att_off[i + 1]; ++idx)
            att_row[idx] = static_cast<std::uint32_t>(i);
    Matrix dq_s(n, fw);
    for_each_index(exec, static_cast<std::ptrdiff_t>(n), [&](std::ptrdiff_t p) {
        double* g = dq_s.row(p);
        const double* qp = c.q_s.row(p);
        // p as the attending row: score gradients through q_s[p].
        for (std::size_t idx = c.att_off[p]; idx < c.att_off[p + 1]; ++idx) {
            const double* qj = c.q_s.row(c.att_nbr[idx]);
            const double f = ds[idx] * inv_s2;
            for (std::size_t ch = 0; ch < fw; ++ch) g[ch] += f * (qj[ch] - qp[ch]);
        }
        // p as an attended neighbor: value and score pathways.
        for (std::size_t t = c.att_in_off[p]; t < c.att_in_off[p + 1]; ++t) {
            const std::size_t idx = c.att_in[t];
            const std::uint32_t i = att_row[idx];
            const double* gf = d_fused.row(i);
            const double* qi = c.q_s.row(i);
            const double a = c.att_a[idx];
            const double f = ds[idx] * inv_s2;
            for (std::size_t ch = 0; ch < fw; ++ch) g[ch] += a * gf[ch] + f * (qi[ch] - qp[ch]);
        }
    });
    for_each_index(exec, static_cast<std::ptrdiff_t>(fw), [&](std::ptrdiff_t r) {
        for (std::size_t col = 0; col < w + 6; ++col) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += dq_s(i, r) * c.sfm_s(i, col);
            grads.fusion_W_s(r, col) += s;
        }
        for (std::size_t col = 0; col < 3; ++col) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += d_fused(i, r) * c.features.node_dynamic(i, col);
            grads.fusion_W_d(r, col) += s;
        }
    });
    Matrix dx(n, w);
    for_each_index(exec, static_cast<std::ptrdiff_t>(n), [&](std::ptrdiff_t i) {
        std::vector<double> full(w + 6, 0.0);
        matvec_t_acc(params.fusion_W_s, dq_s.row(i), full.data());
        std::memcpy(dx.row(i), full.data(), w * sizeof(double));
    });

    // Message-passing layers in reverse.
    for (std::size_t l = cfg.n_layers; l-- > 0;) {
        const GnnLayerParams& lp = params.layers[l];
        GnnLayerParams& lg = grads.layers[l];
        const LayerCache& lc = c.layer[l];
        const Matrix& x_in = c.x_lv[l];
        const Matrix& w_in = c.w_lv[l];

        Matrix xb2(n, w);
        for_each_index(exec, static_cast<std::ptrdiff_t>(n), [&](std::ptrdiff_t i) {
            matvec(lp.W_v2, x_in.row(i), xb2.row(i));
        });

        // Through residual + silu + batch norm, node side.
        Matrix d_node_bn(n, w);
        for_each_index(exec, static_cast<std::ptrdiff_t>(n), [&](std::ptrdiff_t i) {
            for (std::size_t ch = 0; ch < w; ++ch) {
                const double inv = 1.0 / std::sqrt(lc.bn_node.var[ch] + cfg.bn_eps);
                const double xh = (lc.node_pre(i, ch) - lc.bn_node.mean[ch]) * inv;
                const double a = lp.bn_node.gamma(0, ch) * xh + lp.bn_node.beta(0, ch);
                d_node_bn(i, ch) = dx(i, ch) * silu_grad(a);
            }
        });
        Matrix du;
        bn_backward(lc.node_pre, lc.bn_node, lp.bn_node, cfg.bn_eps, d_node_bn, exec, du,
                    lg.bn_node.gamma, lg.bn_node.beta);

        // Edge side.
        Matrix d_edge_bn(md, w);
        for_each_index(exec, static_cast<std::ptrdiff_t>(md), [&](std::ptrdiff_t d) {
            for (std::size_t ch = 0; ch < w; ++ch) {
                const double inv = 1.0 / std::sqrt(lc.bn_edge.var[ch] + cfg.bn_eps);
                const double xh = (lc.edge_pre(d, ch) - lc.bn_edge.mean[ch]) * inv;
                const double a = lp.bn_edge.gamma(0, ch) * xh + lp.bn_edge.beta(0, ch);
                d_edge_bn(d, ch) = dw(d, ch) * silu_grad(a);
            }
        });
        Matrix dv;
        bn_backward(lc.edge_pre, lc.bn_edge, lp.bn_edge, cfg.bn_eps, d_edge_bn, exec, dv,
                    lg.bn_edge.gamma, lg.bn_edge.beta);

        // Per-node sums of the edge-branch gradients: m3 over outgoing ends,
        // m4 over incoming ends, m2 through the gated aggregation.
        Matrix m3(n, w), m4(n, w), m2(n, w);
        for_each_index(exec, static_cast<std::ptrdiff_t>(n), [&](std::ptrdiff_t i) {
            double* r3 = m3.row(i);
            double* r4 = m4.row(i);
            double* r2 = m2.row(i);
            for (const std::uint32_t d : c.out_edges[i]) {
                const double* gv = dv.row(d);
                const double* gr = dv.row(d ^ 1u);
                const std::uint32_t peer = c.dir_dst[d];
                const double invdeg = 1.0 / static_cast<double>(c.out_edges[peer].size());
                const double* dup = du.row(peer);
                const double* wrev = w_in.row(d ^ 1u);
                for (std::size_t ch = 0; ch < w; ++ch) {
                    r3[ch] += gv[ch];
                    r4[ch] += gr[ch];
                    r2[ch] += invdeg * dup[ch] * wrev[ch];
                }
            }
        });

        // New edge gradient: residual + linear map + gating.
        Matrix dw_next(md, w);
        for_each_index(exec, static_cast<std::ptrdiff_t>(md), [&](std::ptrdiff_t d) {
            double* g = dw_next.row(d);
            std::memcpy(g, dw.row(d), w * sizeof(double));
            matvec_t_acc(lp.W_e, dv.row(d), g);
            const std::uint32_t i = c.dir_src[d];
            const double invdeg = 1.0 / static_cast<double>(c.out_edges[i].size());
            const double* dui = du.row(i);
            const double* x2 = xb2.row(c.dir_dst[d]);
            for (std::size_t ch = 0; ch < w; ++ch) g[ch] += invdeg * dui[ch] * x2[ch];
        });

        // Weight gradients, one output row per task.
        for_each_index(exec, static_cast<std::ptrdiff_t>(w), [&](std::ptrdiff_t r) {
            for (std::size_t col = 0; col < w; ++col) {
                double s1 = 0.0, s2 = 0.0, s3 = 0.0, s4 = 0.0, se = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    s1 += du(i, r) * x_in(i, col);
                    s2 += m2(i, r) * x_in(i, col);
                    s3 += m3(i, r) * x_in(i, col);
                    s4 += m4(i, r) * x_in(i, col);
                }
                for (std::size_t d = 0; d < md; ++d) se += dv(d, r) * w_in(d, col);
                lg.W_v1(r, col) += s1;
                lg.W_v2(r, col) += s2;
                lg.W_v3(r, col) += s3;
                lg.W_v4(r, col) += s4;
                lg.W_e(r, col) += se;
            }
        });

        // New node gradient.
        Matrix dx_next(n, w);
        for_each_index(exec, static_cast<std::ptrdiff_t>(n), [&](std::ptrdiff_t i) {
            double* g = dx_next.row(i);
            std::memcpy(g, dx.row(i), w * sizeof(double));
            matvec_t_acc(lp.W_v1, du.row(i), g);
            matvec_t_acc(lp.W_v2, m2.row(i), g);
            matvec_t_acc(lp.W_v3, m3.row(i), g);
            matvec_t_acc(lp.W_v4, m4.row(i), g);
        });
        dx = std::move(dx_next);
        dw = std::move(dw_next);
    }

    // Input embeddings.
    Matrix dpre_n(n, w), dpre_e(md, w);
    for_each_index(exec, static_cast<std::ptrdiff_t>(n), [&](std::ptrdiff_t i) {
        std::vector<double> pre(w, 0.0);
        matvec(params.embed_node_W, c.features.node_static.row(i), pre.data());
        for (std::size_t ch = 0; ch < w; ++ch) dpre_n(i, ch) = dx(i, ch) * silu_grad(pre[ch]);
    });
    for_each_index(exec, static_cast<std::ptrdiff_t>(md), [&](std::ptrdiff_t d) {
        const std::size_t e = static_cast<std::size_t>(d) >> 1;
        const double feat[4] = {c.features.edge_static(e, 0), c.features.edge_static(e, 1),
                                c.features.edge_static(e, 2), c.features.edge_dynamic(e, 0)};
        std::vector<double> pre(w, 0.0);
        matvec(params.embed_edge_W, feat, pre.data());
        for (std::size_t ch = 0; ch < w; ++ch) dpre_e(d, ch) = dw(d, ch) * silu_grad(pre[ch]);
    });
    for_each_index(exec, static_cast<std::ptrdiff_t>(w), [&](std::ptrdiff_t r) {
        for (std::size_t col = 0; col < cfg.node_features; ++col) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += dpre_n(i, r) * c.features.node_static(i, col);
            grads.embed_node_W(r, col) += s;
        }
        for (std::size_t col = 0; col < cfg.edge_features; ++col) {
            double s = 0.0;
            for (std::size_t d = 0; d < md; ++d) {
                const std::size_t e = d >> 1;
                const double feat = col < 3 ? c.features.edge_static(e, col)
                                            : c.features.edge_dynamic(e, 0);
                s += dpre_e(d, r) * feat;
            }
            grads.embed_edge_W(r, col) += s;
        }
    });
}

void fuse_attention(const Matrix& q_s, const Matrix& q_d,
                    const std::vector<std::vector<std::uint32_t>>& nbhd,
                    const std::vector<std::vector<double>>& tbias, double sigma, Matrix& fused,
                    std::vector<std::vector<double>>& att) {
    if (!(sigma > 0.0)) throw std::domain_error("rbf width must be positive");
    if (!q_s.same_shape(q_d)) throw std::invalid_argument("projection shape mismatch");
    if (nbhd.size() != q_s.rows || tbias.size() != q_s.rows)
        throw std::invalid_argument("neighborhood shape mismatch");
    const std::size_t n = q_s.rows, fw = q_s.cols;
    const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    fused = Matrix(n, fw);
    att.assign(n, {});
    for (std::size_t i = 0; i < n; ++i) {
        if (nbhd[i].empty()) throw std::invalid_argument("empty attention neighborhood");
        if (tbias[i].size() != nbhd[i].size())
            throw std::invalid_argument("bias/neighborhood length mismatch");
        std::vector<double> s(nbhd[i].size());
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < nbhd[i].size(); ++k) {
            const std::uint32_t j = nbhd[i][k];
            if (j >= n) throw std::invalid_argument("neighbor index out of range");
            double d2 = 0.0;
            for (std::size_t ch = 0; ch < fw; ++ch) {
                const double d = q_s(i, ch) - q_s(j, ch);
                d2 += d * d;
            }
            s[k] = -d2 * inv2s2 + tbias[i][k];
            mx = std::max(mx, s[k]);
        }
        double denom = 0.0;
        for (double& v : s) {
            v = std::exp(v - mx);
            denom += v;
        }
        att[i].resize(s.size());
        double* o = fused.row(i);
        std::memcpy(o, q_d.row(i), fw * sizeof(double));
        for (std::size_t k = 0; k < s.size(); ++k) {
            att[i][k] = s[k] / denom;
            for (std::size_t ch = 0; ch < fw; ++ch) o[ch] += att[i][k] * q_s(nbhd[i][k], ch);
        }
    }
}

namespace {

constexpr char kMagic[4] = {'N', 'A', 'H', 'C'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void write_raw(std::ostream& f, T v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_raw(const std::vector<char>& buf, std::size_t& pos) {
    if (pos + sizeof(T) > buf.size()) throw std::runtime_error("checkpoint truncated");
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

struct BlockMeta {
    std::string name;
    std::uint64_t rows, cols;
};

}  // namespace

void save_checkpoint(const ModelParams& params, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path);

    std::vector<std::pair<std::string, const Matrix*>> blocks;
    for_each_block(const_cast<ModelParams&>(params),
                   [&](const std::string& name, Matrix& m, bool) { blocks.emplace_back(name, &m); });

    f.write(kMagic, 4);
    write_raw<std::uint32_t>(f, kVersion);
    write_raw<std::uint32_t>(f, static_cast<std::uint32_t>(blocks.size()));
    for (const auto& [name, m] : blocks) {
        write_raw<std::uint32_t>(f, static_cast<std::uint32_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_raw<std::uint64_t>(f, 2);
        write_raw<std::uint64_t>(f, m->rows);
        write_raw<std::uint64_t>(f, m->cols);
    }
    for (const auto& [name, m] : blocks) {
        (void)name;
        for (const double v : m->a) write_raw<float>(f, static_cast<float>(v));
    }
    if (!f) throw std::runtime_error("checkpoint write failed: " + path);
}

ModelParams load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    std::vector<char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    std::size_t pos = 0;
    if (buf.size() < 12 || std::memcmp(buf.data(), kMagic, 4) != 0)
        throw std::runtime_error("bad checkpoint magic");
    pos = 4;
    if (read_raw<std::uint32_t>(buf, pos) != kVersion)
        throw std::runtime_error("unsupported checkpoint version");
    const std::uint32_t count = read_raw<std::uint32_t>(buf, pos);

    std::vector<BlockMeta> meta(count);
    std::uint64_t total_values = 0;
    for (auto& b : meta) {
        const std::uint32_t len = read_raw<std::uint32_t>(buf, pos);
        if (pos + len > buf.size()) throw std::runtime_error("checkpoint truncated");
        b.name.assign(buf.data() + pos, len);
        pos += len;
        if (read_raw<std::uint64_t>(buf, pos) != 2)
            throw std::runtime_error("unexpected block rank");
        b.rows = read_raw<std::uint64_t>(buf, pos);
        b.cols = read_raw<std::uint64_t>(buf, pos);
        total_values += b.rows * b.cols;
    }
    if (buf.size() != pos + total_values * sizeof(float))
        throw std::runtime_error("checkpoint size mismatch");

    auto find = [&](const std::string& name) -> const BlockMeta* {
        for (const auto& b : meta)
            if (b.name == name) return &b;
        return nullptr;
    };
    const BlockMeta* en = find("embed.node.W");
    const BlockMeta* ee = find("embed.edge.W");
    const BlockMeta* ws = find("fusion.W_s");
    const BlockMeta* d0 = find("decoder.0.W");
    if (!en || !ee || !ws || !d0) throw std::runtime_error("checkpoint missing required blocks");
    ModelConfig cfg;
    cfg.width = static_cast<std::uint32_t>(en->rows);
    cfg.node_features = static_cast<std::uint32_t>(en->cols);
    cfg.edge_features = static_cast<std::uint32_t>(ee->cols);
    cfg.fusion_width = static_cast<std::uint32_t>(ws->rows);
    cfg.decoder_hidden = static_cast<std::uint32_t>(d0->rows);
    std::uint32_t n_layers = 0;
    for (const auto& b : meta)
        if (b.name.rfind("gnn.", 0) == 0 && b.name.size() > 5 &&
            b.name.substr(b.name.find_last_of('.')) == ".W_v1")
            ++n_layers;
    if (n_layers == 0) throw std::runtime_error("checkpoint has no encoder layers");
    cfg.n_layers = n_layers;

    ModelParams p = make_params(cfg);
    std::vector<std::pair<std::string, Matrix*>> blocks;
    for_each_block(p, [&](const std::string& name, Matrix& m, bool) { blocks.emplace_back(name, &m); });
    if (blocks.size() != meta.size()) throw std::runtime_error("checkpoint block count mismatch");
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        if (blocks[b].first != meta[b].name || blocks[b].second->rows != meta[b].rows ||
            blocks[b].second->cols != meta[b].cols)
            throw std::runtime_error("checkpoint block " + meta[b].name + " does not match layout");
        for (double& v : blocks[b].second->a) v = static_cast<double>(read_raw<float>(buf, pos));
    }
    for (const auto& [name, mptr] : blocks) {
        for (const double v : mptr->a)
            if (!std::isfinite(v)) throw std::runtime_error("non-finite value in block " + name);
    }
    if (!(p.sigma(0, 0) > 0.0)) throw std::runtime_error("checkpoint rbf width not positive");
    return p;
}

}  // namespace nahaco
