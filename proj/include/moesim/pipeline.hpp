#pragma once

#include <functional>
#include <map>
#include <string>

#include "moesim/collectives.hpp"
#include "moesim/tensor.hpp"

namespace moesim {

struct Strategy {
  A2aAlgo algo = A2aAlgo::Linear;
  Index degree = 1;
};

bool operator==(const Strategy& a, const Strategy& b);
bool operator<(const Strategy& a, const Strategy& b);  // exploration order
std::string to_string(const Strategy& s);

// {Linear, TwoDH} x {1, 2, 4, 8} in deterministic exploration order: Linear
// before TwoDH, ascending degree.
const std::vector<Strategy>& strategy_space();

// Splits (E, ΔC, M) along the capacity axis into exactly d chunks of extent
// ceil(ΔC/d), zero-padding the tail. merge_chunks drops the padding.
std::vector<Tensor> partition_capacity(const Tensor& x, Index degree);
Tensor merge_chunks(const std::vector<Tensor>& chunks, Index original_capacity);

struct ChunkCosts {
  double a2a1 = 0.0;
  double ffn = 0.0;
  double a2a2 = 0.0;
};

struct TimelineInterval {
  Index chunk = 0;
  std::string stream;  // "comm" | "compute"
  std::string phase;   // "a2a1" | "ffn" | "a2a2"
  double start = 0.0;
  double end = 0.0;
};

struct Timeline {
  std::vector<TimelineInterval> intervals;
};

// CSV with header: step,chunk,stream,phase,start_s,end_s
std::string timeline_csv(const Timeline& timeline, Index step);

struct OverlapResult {
  Timeline timeline;
  double makespan = 0.0;
};

// Two-stream list scheduler. Comm stream runs every chunk's first all-to-all,
// then every chunk's second, in FIFO order; the compute stream runs the
// expert per chunk. A chunk's expert waits on its first all-to-all and its
// second all-to-all waits on the expert. While both streams are busy each
// progresses at rate 1/gamma (contention); makespan ends at the final
// barrier.
OverlapResult simulate_overlapped_step(const std::vector<ChunkCosts>& costs, double gamma);

// Online strategy search memo: exact per-f measurements plus greedy L-sized
// buckets of nearby capacity factors that share exploration progress. Bucket
// entries are normalized to the bucket's lowest f (time * f_lowest / f).
struct StrategyMemo {
  double bucket_length = 0.5;

  struct Bucket {
    double start = 0.0;
    std::vector<double> members;          // ascending
    std::map<Strategy, double> table;     // normalized times
  };

  std::map<double, std::map<Strategy, double>> per_f;
  std::vector<Bucket> buckets;            // sorted, disjoint
};

void recompute_buckets(StrategyMemo& memo, double f);
Strategy get_strategy(StrategyMemo& memo, double f);
void optimize_strategy(StrategyMemo& memo, double f, const Strategy& strategy, double seconds);

// One adaptive step: pick a strategy, run the step through the supplied
// executor (returns simulated seconds), record the measurement.
using StepExecutor = std::function<double(const Strategy&)>;
std::pair<Strategy, double> moe_step_and_optimize(StrategyMemo& memo, double f,
                                                  const StepExecutor& executor);

}  // namespace moesim
