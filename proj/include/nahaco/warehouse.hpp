#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace nahaco {

using NodeId = std::uint32_t;
using EdgeId = std::uint32_t;

// One warehouse node: 3D position plus the cargo attributes entering the
// expert heuristic. The depot is a node like any other with unit attributes.
struct Cargo {
    double x = 0, y = 0, z = 0;
    double size = 1.0;
    double weight = 1.0;
    double special = 1.0;  // handling factor in (0, 1]
};

struct Edge {
    NodeId u = 0, v = 0;  // canonical u < v
    double capacity = 20.0;
    double free_flow_time = 1.0;
};

double manhattan_distance(const Cargo& a, const Cargo& b);

// Undirected, connected instance graph. Node 0 is always the AGV depot.
class WarehouseInstance {
  public:
    static constexpr int kDimension = 3;

    WarehouseInstance(std::vector<Cargo> nodes, std::vector<Edge> edges);

    std::size_t n_nodes() const { return nodes_.size(); }
    std::size_t n_edges() const { return edges_.size(); }
    NodeId depot() const { return 0; }

    const Cargo& node(NodeId i) const { return nodes_[i]; }
    const Edge& edge(EdgeId e) const { return edges_[e]; }
    const std::vector<Cargo>& nodes() const { return nodes_; }
    const std::vector<Edge>& edges() const { return edges_; }

    // Sorted by neighbor id; this ordering is load-bearing for deterministic
    // sampling and must not change.
    const std::vector<std::pair<NodeId, EdgeId>>& neighbors(NodeId i) const { return adj_[i]; }

    std::optional<EdgeId> find_edge(NodeId u, NodeId v) const;

    nlohmann::json to_json() const;
    static WarehouseInstance from_json(const nlohmann::json& j);
    void save(const std::string& path) const;
    static WarehouseInstance load(const std::string& path);

  private:
    void validate_and_index();

    std::vector<Cargo> nodes_;
    std::vector<Edge> edges_;
    std::vector<std::vector<std::pair<NodeId, EdgeId>>> adj_;
};

// Per-edge traffic counters tc and free-flow times t. flow is reset at each
// colony iteration; free_flow_time is static instance data mirrored here so
// congestion lookups touch one struct.
struct TrafficState {
    std::vector<double> flow;
    std::vector<double> free_flow_time;

    static TrafficState zero_for(const WarehouseInstance& inst);
    void reset() { std::fill(flow.begin(), flow.end(), 0.0); }
};

// Random TSP-style instance: coordinates uniform in [0,1]^3 (z = 0 when
// planar), unit cargo attributes, k-nearest-neighbor edges by Manhattan
// distance plus a spanning repair pass. k = n-1 yields a complete graph.
WarehouseInstance gen_tsp_instance(std::uint32_t n, std::uint64_t seed, std::uint32_t k_neighbors,
                                   bool planar = false);

// Shelf-grid warehouse: sx*sy*levels slots, aisles along x, cross-aisle and
// lift moves at the aisle-end columns only, depot at the origin. n_cargo
// occupied slots are sampled without replacement.
WarehouseInstance gen_warehouse_instance(std::uint32_t shelves_x, std::uint32_t shelves_y,
                                         std::uint32_t levels, std::uint32_t n_cargo,
                                         std::uint64_t seed);

}  // namespace nahaco
