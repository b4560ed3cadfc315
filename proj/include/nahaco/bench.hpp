#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "nahaco/aco.hpp"

namespace nahaco {

struct BenchResult {
    std::string method;
    std::string instance;
    std::uint64_t seed = 0;
    double seconds = 0.0;  // wall clock around the solve call only
    double cost = 0.0;
    double con = 0.0;
    double gap_pct = 0.0;  // 100 * (cost - baseline) / baseline, 0 without a baseline
};

// Exact minimum-cost closed tour from the depot over a complete instance.
// delta == 0 uses dynamic programming over 1/H edge costs (n <= 12); delta > 0
// enumerates all permutations because flow accumulation is order-dependent
// (n <= 9). The tour's own traversal counts feed its congestion terms.
Tour brute_force_tsp(const WarehouseInstance& inst, const HeuristicField& cost_field, double delta);

struct SuiteConfig {
    std::vector<std::string> methods;    // expert | learned | brute_force
    std::vector<std::string> instances;  // instance file paths
    std::vector<std::uint64_t> seeds;
    AcoParams aco;  // seed field is overridden per cell
    HeuristicWeights hw;
    std::string baseline;    // method gaps are computed against, "" = none
    std::string model_path;  // checkpoint for the learned method

    static SuiteConfig from_json(const nlohmann::json& j);
};

std::vector<BenchResult> run_suite(const SuiteConfig& cfg, Exec exec = Exec::Serial);

struct MethodSummary {
    std::string method;
    std::size_t count = 0;
    double mean_seconds = 0.0;
    double mean_cost = 0.0;
    double mean_con = 0.0;
    double mean_gap_pct = 0.0;
};

// Arithmetic means per method, ordered by method name.
std::vector<MethodSummary> summarize(const std::vector<BenchResult>& results);

void write_results_csv(const std::vector<BenchResult>& results, const std::string& path);
void write_summary_csv(const std::vector<MethodSummary>& summary, const std::string& path);
std::string format_summary_table(const std::vector<MethodSummary>& summary);

}  // namespace nahaco
