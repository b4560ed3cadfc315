#include "nahaco/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>

#include "nahaco/rng.hpp"

namespace nahaco {

double carl_loss(const Episode& ep) {
    if (ep.records.empty()) throw std::invalid_argument("episode has no records");
    const double ln2 = std::log(2.0);
    double sum = 0.0;
    for (const EpisodeRecord& r : ep.records) {
        if (r.tour.log_selection_prob > 1e-12)
            throw std::invalid_argument("log selection probability must be <= 0");
        const double lp = std::max(r.tour.log_selection_prob, kLogProbClamp);
        sum += std::abs(r.tour.cost - ep.cost_avg) * std::log1p(std::exp(lp)) / ln2;
    }
    return sum / static_cast<double>(ep.records.size());
}

Episode collect_episode(const WarehouseInstance& inst, ModelParams& params, const AcoParams& aco,
                        const HeuristicWeights& hw, RolloutCaches& rc, Exec exec,
                        SolveResult* solve_out) {
    AcoParams p = aco;
    p.record_eta_grad = true;

    const HeuristicField cost_field = expert_heuristic(inst, hw);
    rc.caches.clear();
    rc.etas.clear();
    rc.caches.reserve(p.n_iterations);
    rc.etas.reserve(p.n_iterations);

    Episode ep;
    const EtaProvider provider = [&](std::uint32_t, const TrafficState& t) -> const HeuristicField& {
        rc.caches.emplace_back();
        rc.etas.push_back(nn_forward(inst, t, params, NnMode::Train, exec, &rc.caches.back()));
        return rc.etas.back();
    };
    const TourSink sink = [&](std::uint32_t iter, std::vector<Tour>&& tours) {
        for (Tour& t : tours) ep.records.push_back({std::move(t), iter});
    };
    SolveResult res = solve(inst, provider, cost_field, p, exec, sink);
    if (solve_out) *solve_out = std::move(res);

    double sum = 0.0;
    for (const EpisodeRecord& r : ep.records) sum += r.tour.cost;
    ep.cost_avg = sum / static_cast<double>(ep.records.size());
    return ep;
}

void carl_gradient(const WarehouseInstance& inst, const Episode& ep, const ModelParams& params,
                   const RolloutCaches& rc, ModelParams& grads, Exec exec) {
    if (rc.caches.empty()) throw std::logic_error("carl_gradient requires rollout forward caches");
    if (ep.records.empty()) throw std::invalid_argument("episode has no records");
    const std::size_t m = inst.n_edges();
    const double ln2 = std::log(2.0);
    const double scale0 = 1.0 / (static_cast<double>(ep.records.size()) * ln2);

    std::vector<std::vector<double>> d_eta(rc.caches.size(), std::vector<double>(m, 0.0));
    std::vector<char> touched(rc.caches.size(), 0);
    for (const EpisodeRecord& r : ep.records) {
        if (r.iteration >= rc.caches.size()) throw std::logic_error("record outside cached rollout");
        const double w = std::abs(r.tour.cost - ep.cost_avg);
        const double lp = std::max(r.tour.log_selection_prob, kLogProbClamp);
        const double pi = std::exp(lp);
        const double g = scale0 * w * pi / (1.0 + pi);
        if (g == 0.0 || r.tour.eta_grad.empty()) continue;
        touched[r.iteration] = 1;
        auto& slot = d_eta[r.iteration];
        for (const EtaGradTerm& t : r.tour.eta_grad) slot[t.edge] += g * t.coeff;
    }
    for (std::size_t t = 0; t < rc.caches.size(); ++t) {
        if (!touched[t]) continue;
        nn_backward(inst, rc.caches[t], params, d_eta[t], grads, exec);
    }
}

namespace {

struct Optimizer {
    const TrainConfig& cfg;
    ModelParams m, v;  // adam moments, unused for sgd
    std::uint64_t t = 0;

    explicit Optimizer(const TrainConfig& c, const ModelParams& shape)
        : cfg(c), m(zeros_like(shape)), v(zeros_like(shape)) {}

    void step(ModelParams& params, ModelParams& grads) {
        const double norm = global_grad_norm(grads);
        if (!std::isfinite(norm)) throw std::runtime_error("non-finite gradient norm");
        double scale = 1.0;
        if (cfg.normalize_grad && norm > 0.0) scale = 1.0 / norm;
        const double scaled = norm * scale;
        if (scaled > cfg.clip_norm) scale *= cfg.clip_norm / scaled;
        ++t;

        std::vector<Matrix*> pb, gb, mb, vb;
        std::vector<char> trainable;
        for_each_block(params, [&](const std::string&, Matrix& mat, bool tr) {
            pb.push_back(&mat);
            trainable.push_back(tr);
        });
        for_each_block(grads, [&](const std::string&, Matrix& mat, bool) { gb.push_back(&mat); });
        for_each_block(m, [&](const std::string&, Matrix& mat, bool) { mb.push_back(&mat); });
        for_each_block(v, [&](const std::string&, Matrix& mat, bool) { vb.push_back(&mat); });

        const bool adam = cfg.optimizer == "adam";
        const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
        for (std::size_t b = 0; b < pb.size(); ++b) {
            if (!trainable[b]) continue;
            for (std::size_t i = 0; i < pb[b]->a.size(); ++i) {
                const double g = scale * gb[b]->a[i];
                if (adam) {
                    double& mm = mb[b]->a[i];
                    double& vv = vb[b]->a[i];
                    mm = cfg.adam_beta1 * mm + (1.0 - cfg.adam_beta1) * g;
                    vv = cfg.adam_beta2 * vv + (1.0 - cfg.adam_beta2) * g * g;
                    const double mhat = mm / bc1;
                    const double vhat = vv / bc2;
                    pb[b]->a[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
                } else {
                    pb[b]->a[i] -= cfg.learning_rate * g;
                }
            }
        }
        // The rbf width must stay positive for the next forward pass.
        params.sigma(0, 0) = std::max(params.sigma(0, 0), 1e-3);
    }
};

void validate(const TrainConfig& c) {
    if (c.epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (c.instances_per_epoch < 1) throw std::invalid_argument("instances_per_epoch must be >= 1");
    if (c.n_min < 2 || c.n_max < c.n_min) throw std::invalid_argument("bad instance size range");
    if (c.learning_rate < 0.0) throw std::invalid_argument("learning_rate must be >= 0");
    if (!(c.clip_norm > 0.0)) throw std::invalid_argument("clip_norm must be > 0");
    if (c.optimizer != "sgd" && c.optimizer != "adam")
        throw std::invalid_argument("optimizer must be sgd or adam");
    if (c.n_ants < 1 || c.n_iterations < 1) throw std::invalid_argument("bad rollout budget");
    if (c.checkpoint_every > 0 && c.checkpoint_path.empty())
        throw std::invalid_argument("checkpoint cadence set without a path");
}

}  // namespace

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.instances_per_epoch = j.value("instances_per_epoch", c.instances_per_epoch);
    c.n_min = j.value("n_min", c.n_min);
    c.n_max = j.value("n_max", c.n_max);
    c.knn = j.value("knn", c.knn);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.optimizer = j.value("optimizer", c.optimizer);
    c.normalize_grad = j.value("normalize_grad", c.normalize_grad);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.n_ants = j.value("n_ants", c.n_ants);
    c.n_iterations = j.value("n_iterations", c.n_iterations);
    c.alpha = j.value("alpha", c.alpha);
    c.beta = j.value("beta", c.beta);
    c.rho = j.value("rho", c.rho);
    c.delta = j.value("delta", c.delta);
    c.hw.alpha_h = j.value("alpha_h", c.hw.alpha_h);
    c.hw.beta_h = j.value("beta_h", c.hw.beta_h);
    c.hw.gamma_h = j.value("gamma_h", c.hw.gamma_h);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.checkpoint_path = j.value("checkpoint_path", c.checkpoint_path);
    if (j.contains("model")) {
        const auto& mj = j.at("model");
        c.model.width = mj.value("width", c.model.width);
        c.model.fusion_width = mj.value("fusion_width", c.model.fusion_width);
        c.model.n_layers = mj.value("n_layers", c.model.n_layers);
        c.model.decoder_hidden = mj.value("decoder_hidden", c.model.decoder_hidden);
    }
    validate(c);
    return c;
}

TrainResult train(const TrainConfig& cfg, Exec exec, std::ostream* log) {
    validate(cfg);
    TrainResult out;
    out.params = init_params(cfg.model, cfg.seed);
    Optimizer opt(cfg, out.params);

    if (log) *log << "epoch,mean_loss,mean_best_cost,mean_con,wall_clock_s\n";

    for (std::uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        ModelParams grads = zeros_like(out.params);
        double sum_loss = 0.0, sum_best = 0.0, sum_con = 0.0;

        for (std::uint32_t k = 0; k < cfg.instances_per_epoch; ++k) {
            const std::uint64_t iseed = derive_seed(cfg.seed, 0x747261696eULL, epoch, k);
            Rng size_rng(iseed);
            const std::uint32_t n =
                cfg.n_min + static_cast<std::uint32_t>(size_rng.uniform_int(cfg.n_max - cfg.n_min + 1));
            const std::uint32_t k_edges =
                cfg.knn == 0 ? n - 1 : std::min(cfg.knn, n - 1);
            const WarehouseInstance inst = gen_tsp_instance(n, derive_seed(iseed, 1), k_edges);

            AcoParams ap;
            ap.alpha = cfg.alpha;
            ap.beta = cfg.beta;
            ap.rho = cfg.rho;
            ap.delta = cfg.delta;
            ap.n_ants = cfg.n_ants;
            ap.n_iterations = cfg.n_iterations;
            ap.seed = derive_seed(iseed, 2);

            RolloutCaches rc;
            SolveResult sr;
            const Episode ep = collect_episode(inst, out.params, ap, cfg.hw, rc, exec, &sr);
            const double loss = carl_loss(ep);
            if (!std::isfinite(loss)) {
                char msg[128];
                std::snprintf(msg, sizeof msg, "non-finite loss at epoch %u instance %u", epoch, k);
                throw std::runtime_error(msg);
            }
            carl_gradient(inst, ep, out.params, rc, grads, exec);
            sum_loss += loss;
            sum_best += sr.best.cost;
            sum_con += sr.best_congestion;
        }

        // Mean gradient over the epoch's instances.
        const double inv = 1.0 / static_cast<double>(cfg.instances_per_epoch);
        for_each_block(grads, [&](const std::string&, Matrix& m, bool) {
            for (double& g : m.a) g *= inv;
        });
        if (!std::isfinite(global_grad_norm(grads))) {
            char msg[96];
            std::snprintf(msg, sizeof msg, "non-finite gradient at epoch %u", epoch);
            throw std::runtime_error(msg);
        }
        opt.step(out.params, grads);

        EpochStat st;
        st.mean_loss = sum_loss * inv;
        st.mean_best_cost = sum_best * inv;
        st.mean_con = sum_con * inv;
        st.wall_clock_s =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        out.history.push_back(st);

        if (log) {
            char line[192];
            std::snprintf(line, sizeof line, "%u,%.17g,%.17g,%.17g,%.3f\n", epoch, st.mean_loss,
                          st.mean_best_cost, st.mean_con, st.wall_clock_s);
            *log << line;
            log->flush();
        }
        if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0)
            save_checkpoint(out.params, cfg.checkpoint_path);
    }
    return out;
}

}  // namespace nahaco
