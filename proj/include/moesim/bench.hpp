#pragma once

#include <cstdint>
#include <string>

#include "moesim/moe_layer.hpp"

namespace moesim {

struct TraceSpec {
  enum class Kind { Constant, Cycle, Random };
  Kind kind = Kind::Constant;
  double f = 1.0;                // constant
  std::vector<double> values;    // cycle
  double f_min = 1.0, f_max = 1.0;  // random (uniform)
};

std::vector<double> generate_workload_trace(const TraceSpec& spec, Index steps,
                                            std::uint64_t seed);

struct ScenarioSetting {
  std::string id;
  Dims dims;
};

struct Scenario {
  std::string name = "scenario";
  Index steps = 1;
  std::uint64_t seed = 1;
  std::vector<ScenarioSetting> settings;  // expanded dims grid
  TraceSpec trace;
  StrategyControl strategy;
  ParallelControl parallel;
  CostModelParams cost;
};

// Throws std::invalid_argument with a position diagnostic on malformed input.
Scenario parse_scenario_text(const std::string& text);
Scenario load_scenario(const std::string& path);

struct StepRecord {
  std::string scenario_id;
  Index step = 0;
  double f = 1.0;        // effective capacity factor
  Index capacity = 1;    // ΔC
  std::string strategy;
  std::string parallel;
  double sim_seconds = 0.0;
  double comm_bytes = 0.0;
  Index drop_count = 0;
};

// One record per (setting, step). Settings with world_size above
// ranks_materialize_max run payload-free on the cost model alone.
std::vector<StepRecord> run_scenario(const Scenario& scenario, Index ranks_materialize_max);

std::string records_csv(const std::vector<StepRecord>& records);
std::vector<StepRecord> parse_records_csv(const std::string& text);

// Per-scenario summary: per-step regret against the best time observed for
// the same capacity factor, plus speedups of the realized mix against the
// worst and the baseline (linear, degree 1) strategy means.
std::string emit_report(const std::vector<StepRecord>& records);

}  // namespace moesim
