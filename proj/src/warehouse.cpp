#include "nahaco/warehouse.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "nahaco/rng.hpp"

namespace nahaco {

double manhattan_distance(const Cargo& a, const Cargo& b) {
    return std::abs(a.x - b.x) + std::abs(a.y - b.y) + std::abs(a.z - b.z);
}

WarehouseInstance::WarehouseInstance(std::vector<Cargo> nodes, std::vector<Edge> edges)
    : nodes_(std::move(nodes)), edges_(std::move(edges)) {
    validate_and_index();
}

void WarehouseInstance::validate_and_index() {
    const std::size_t n = nodes_.size();
    if (n < 2) throw std::invalid_argument("instance: need at least 2 nodes (depot + 1 cargo)");

    for (std::size_t i = 0; i < n; ++i) {
        const Cargo& c = nodes_[i];
        if (!std::isfinite(c.x) || !std::isfinite(c.y) || !std::isfinite(c.z))
            throw std::invalid_argument("instance: non-finite coordinate at node " + std::to_string(i));
        if (!(c.size > 0) || !(c.weight > 0))
            throw std::invalid_argument("instance: size and weight must be positive at node " +
                                        std::to_string(i));
        if (!(c.special > 0) || c.special > 1.0)
            throw std::invalid_argument("instance: special must lie in (0, 1] at node " +
                                        std::to_string(i));
    }

    for (Edge& e : edges_) {
        if (e.u == e.v) throw std::invalid_argument("instance: self-loop edge");
        if (e.u >= n || e.v >= n) throw std::invalid_argument("instance: edge endpoint out of range");
        if (e.u > e.v) std::swap(e.u, e.v);
        if (!(e.capacity > 0)) throw std::invalid_argument("instance: edge capacity must be positive");
        if (!(e.free_flow_time > 0))
            throw std::invalid_argument("instance: free_flow_time must be positive");
    }
    std::sort(edges_.begin(), edges_.end(),
              [](const Edge& a, const Edge& b) { return a.u != b.u ? a.u < b.u : a.v < b.v; });
    for (std::size_t e = 1; e < edges_.size(); ++e)
        if (edges_[e].u == edges_[e - 1].u && edges_[e].v == edges_[e - 1].v)
            throw std::invalid_argument("instance: duplicate edge");

    adj_.assign(n, {});
    for (std::size_t e = 0; e < edges_.size(); ++e) {
        adj_[edges_[e].u].emplace_back(edges_[e].v, static_cast<EdgeId>(e));
        adj_[edges_[e].v].emplace_back(edges_[e].u, static_cast<EdgeId>(e));
    }
    for (auto& nbrs : adj_)
        std::sort(nbrs.begin(), nbrs.end());

    // connectivity (BFS from the depot)
    std::vector<char> seen(n, 0);
    std::deque<NodeId> queue{0};
    seen[0] = 1;
    std::size_t reached = 1;
    while (!queue.empty()) {
        const NodeId c = queue.front();
        queue.pop_front();
        for (const auto& [nb, eid] : adj_[c]) {
            if (!seen[nb]) {
                seen[nb] = 1;
                ++reached;
                queue.push_back(nb);
            }
        }
    }
    if (reached != n) throw std::invalid_argument("instance: graph is not connected");
}

std::optional<EdgeId> WarehouseInstance::find_edge(NodeId u, NodeId v) const {
    if (u >= adj_.size() || v >= adj_.size() || u == v) return std::nullopt;
    const auto& nbrs = adj_[u];
    auto it = std::lower_bound(nbrs.begin(), nbrs.end(), v,
                               [](const std::pair<NodeId, EdgeId>& p, NodeId x) { return p.first < x; });
    if (it != nbrs.end() && it->first == v) return it->second;
    return std::nullopt;
}

nlohmann::json WarehouseInstance::to_json() const {
    nlohmann::json j;
    j["version"] = 1;
    nlohmann::json nodes = nlohmann::json::array();
    for (const Cargo& c : nodes_) {
        nodes.push_back({{"x", c.x},
                         {"y", c.y},
                         {"z", c.z},
                         {"size", c.size},
                         {"weight", c.weight},
                         {"special", c.special}});
    }
    j["nodes"] = std::move(nodes);
    nlohmann::json edges = nlohmann::json::array();
    for (const Edge& e : edges_) {
        edges.push_back({{"u", e.u},
                         {"v", e.v},
                         {"capacity", e.capacity},
                         {"free_flow_time", e.free_flow_time}});
    }
    j["edges"] = std::move(edges);
    j["depot"] = 0;
    return j;
}

WarehouseInstance WarehouseInstance::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw std::invalid_argument("instance json: not an object");
    if (!j.contains("version") || j.at("version").get<int>() != 1)
        throw std::invalid_argument("instance json: unsupported or missing version");
    if (!j.contains("nodes") || !j.contains("edges") || !j.contains("depot"))
        throw std::invalid_argument("instance json: missing nodes/edges/depot");
    if (j.at("depot").get<int>() != 0)
        throw std::invalid_argument("instance json: depot must be node 0");

    std::vector<Cargo> nodes;
    for (const auto& nj : j.at("nodes")) {
        Cargo c;
        c.x = nj.at("x").get<double>();
        c.y = nj.at("y").get<double>();
        c.z = nj.at("z").get<double>();
        c.size = nj.at("size").get<double>();
        c.weight = nj.at("weight").get<double>();
        c.special = nj.at("special").get<double>();
        nodes.push_back(c);
    }
    std::vector<Edge> edges;
    for (const auto& ej : j.at("edges")) {
        Edge e;
        e.u = ej.at("u").get<NodeId>();
        e.v = ej.at("v").get<NodeId>();
        e.capacity = ej.at("capacity").get<double>();
        e.free_flow_time = ej.at("free_flow_time").get<double>();
        edges.push_back(e);
    }
    return WarehouseInstance(std::move(nodes), std::move(edges));
}

void WarehouseInstance::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << to_json().dump() << "\n";
    if (!out) throw std::runtime_error("write failed: " + path);
}

WarehouseInstance WarehouseInstance::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open instance file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& ex) {
        throw std::invalid_argument("instance json parse error in " + path + ": " + ex.what());
    }
    return from_json(j);
}

TrafficState TrafficState::zero_for(const WarehouseInstance& inst) {
    TrafficState t;
    t.flow.assign(inst.n_edges(), 0.0);
    t.free_flow_time.resize(inst.n_edges());
    for (std::size_t e = 0; e < inst.n_edges(); ++e) t.free_flow_time[e] = inst.edge(e).free_flow_time;
    return t;
}

namespace {

struct Dsu {
    std::vector<NodeId> parent;
    explicit Dsu(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
    NodeId find(NodeId x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    }
    bool unite(NodeId a, NodeId b) {
        a = find(a);
        b = find(b);
        if (a == b) return false;
        parent[b] = a;
        return true;
    }
};

// Symmetrized k-nearest edge set plus greedy spanning repair: while the graph
// has several components, add the globally shortest edge that bridges two.
std::vector<Edge> knn_edges(const std::vector<Cargo>& nodes, std::uint32_t k,
                            const std::vector<std::vector<double>>& dist, double capacity) {
    const std::size_t n = nodes.size();
    std::set<std::pair<NodeId, NodeId>> picked;
    std::vector<std::pair<double, NodeId>> order;
    for (NodeId i = 0; i < n; ++i) {
        order.clear();
        for (NodeId j = 0; j < n; ++j)
            if (j != i) order.emplace_back(dist[i][j], j);
        std::sort(order.begin(), order.end());
        for (std::uint32_t t = 0; t < k && t < order.size(); ++t) {
            const NodeId j = order[t].second;
            picked.emplace(std::min(i, j), std::max(i, j));
        }
    }

    Dsu dsu(n);
    for (const auto& [u, v] : picked) dsu.unite(u, v);
    for (;;) {
        double best = std::numeric_limits<double>::infinity();
        std::pair<NodeId, NodeId> pick{0, 0};
        bool split = false;
        for (NodeId i = 0; i < n; ++i)
            for (NodeId j = i + 1; j < n; ++j)
                if (dsu.find(i) != dsu.find(j)) {
                    split = true;
                    if (dist[i][j] < best) {
                        best = dist[i][j];
                        pick = {i, j};
                    }
                }
        if (!split) break;
        picked.insert(pick);
        dsu.unite(pick.first, pick.second);
    }

    std::vector<Edge> edges;
    edges.reserve(picked.size());
    for (const auto& [u, v] : picked) {
        Edge e;
        e.u = u;
        e.v = v;
        e.capacity = capacity;
        e.free_flow_time = std::max(dist[u][v], 1e-12);
        edges.push_back(e);
    }
    return edges;
}

}  // namespace

WarehouseInstance gen_tsp_instance(std::uint32_t n, std::uint64_t seed, std::uint32_t k_neighbors,
                                   bool planar) {
    if (n < 2) throw std::invalid_argument("gen_tsp_instance: n must be >= 2");
    if (k_neighbors < 1 || k_neighbors >= n)
        throw std::invalid_argument("gen_tsp_instance: k_neighbors must be in [1, n-1]");

    Rng rng(derive_seed(seed, 0x7473703364ULL));
    std::vector<Cargo> nodes(n);
    for (Cargo& c : nodes) {
        c.x = rng.uniform01();
        c.y = rng.uniform01();
        c.z = planar ? 0.0 : rng.uniform01();
        c.size = c.weight = c.special = 1.0;
    }

    std::vector<std::vector<double>> dist(n, std::vector<double>(n, 0.0));
    for (NodeId i = 0; i < n; ++i)
        for (NodeId j = i + 1; j < n; ++j)
            dist[i][j] = dist[j][i] = manhattan_distance(nodes[i], nodes[j]);

    std::vector<Edge> edges = knn_edges(nodes, k_neighbors, dist, 20.0);
    return WarehouseInstance(std::move(nodes), std::move(edges));
}

WarehouseInstance gen_warehouse_instance(std::uint32_t shelves_x, std::uint32_t shelves_y,
                                         std::uint32_t levels, std::uint32_t n_cargo,
                                         std::uint64_t seed) {
    if (shelves_x < 1 || shelves_y < 1 || levels < 1)
        throw std::invalid_argument("gen_warehouse_instance: grid dimensions must be positive");
    const std::uint64_t slots =
        static_cast<std::uint64_t>(shelves_x) * shelves_y * levels;
    if (n_cargo < 1) throw std::invalid_argument("gen_warehouse_instance: n_cargo must be >= 1");
    if (n_cargo > slots)
        throw std::invalid_argument("gen_warehouse_instance: n_cargo exceeds shelf-slot count");

    const auto slot_id = [&](std::uint32_t x, std::uint32_t y, std::uint32_t l) -> std::uint32_t {
        return (l * shelves_y + y) * shelves_x + x;
    };
    const std::uint32_t depot_grid = static_cast<std::uint32_t>(slots);

    // grid graph: aisle runs along x; aisle changes and lifts only at the two
    // end columns; all steps unit length, so BFS hops are distances
    std::vector<std::vector<std::uint32_t>> grid(slots + 1);
    const auto link = [&](std::uint32_t a, std::uint32_t b) {
        grid[a].push_back(b);
        grid[b].push_back(a);
    };
    for (std::uint32_t l = 0; l < levels; ++l)
        for (std::uint32_t y = 0; y < shelves_y; ++y)
            for (std::uint32_t x = 0; x + 1 < shelves_x; ++x)
                link(slot_id(x, y, l), slot_id(x + 1, y, l));
    std::vector<std::uint32_t> end_cols{0};
    if (shelves_x > 1) end_cols.push_back(shelves_x - 1);
    for (const std::uint32_t c : end_cols) {
        for (std::uint32_t l = 0; l < levels; ++l)
            for (std::uint32_t y = 0; y + 1 < shelves_y; ++y)
                link(slot_id(c, y, l), slot_id(c, y + 1, l));
        for (std::uint32_t y = 0; y < shelves_y; ++y)
            for (std::uint32_t l = 0; l + 1 < levels; ++l)
                link(slot_id(c, y, l), slot_id(c, y, l + 1));
    }
    link(depot_grid, slot_id(0, 0, 0));

    Rng rng(derive_seed(seed, 0x77617265ULL));
    std::vector<std::uint32_t> ids(slots);
    std::iota(ids.begin(), ids.end(), 0);
    for (std::uint32_t i = 0; i < n_cargo; ++i) {
        const std::uint64_t j = i + rng.uniform_int(slots - i);
        std::swap(ids[i], ids[j]);
    }
    std::vector<std::uint32_t> chosen(ids.begin(), ids.begin() + n_cargo);
    std::sort(chosen.begin(), chosen.end());

    std::vector<Cargo> nodes(1 + n_cargo);
    nodes[0] = Cargo{};  // depot at the origin, unit attributes
    for (std::uint32_t i = 0; i < n_cargo; ++i) {
        const std::uint32_t s = chosen[i];
        const std::uint32_t x = s % shelves_x;
        const std::uint32_t y = (s / shelves_x) % shelves_y;
        const std::uint32_t l = s / (static_cast<std::uint64_t>(shelves_x) * shelves_y);
        Cargo c;
        c.x = x;
        c.y = y + 1.0;  // shelves sit one unit off the depot origin
        c.z = l;
        c.size = rng.uniform(0.5, 2.0);
        c.weight = rng.uniform(1.0, 10.0);
        c.special = rng.uniform01() < 0.8 ? 1.0 : 0.5;
        nodes[1 + i] = c;
    }

    // BFS per instance node over the grid -> pairwise travel distances
    std::vector<std::uint32_t> grid_of(1 + n_cargo);
    grid_of[0] = depot_grid;
    for (std::uint32_t i = 0; i < n_cargo; ++i) grid_of[1 + i] = chosen[i];

    const std::size_t m = nodes.size();
    std::vector<std::vector<double>> dist(m, std::vector<double>(m, 0.0));
    std::vector<std::int32_t> hops(slots + 1);
    for (std::size_t i = 0; i < m; ++i) {
        std::fill(hops.begin(), hops.end(), -1);
        std::deque<std::uint32_t> queue{grid_of[i]};
        hops[grid_of[i]] = 0;
        while (!queue.empty()) {
            const std::uint32_t c = queue.front();
            queue.pop_front();
            for (const std::uint32_t nb : grid[c])
                if (hops[nb] < 0) {
                    hops[nb] = hops[c] + 1;
                    queue.push_back(nb);
                }
        }
        for (std::size_t j = 0; j < m; ++j) dist[i][j] = hops[grid_of[j]];
    }

    const std::uint32_t k = std::min<std::uint32_t>(6, static_cast<std::uint32_t>(m - 1));
    std::vector<Edge> edges = knn_edges(nodes, k, dist, 20.0);
    return WarehouseInstance(std::move(nodes), std::move(edges));
}

}  // namespace nahaco
