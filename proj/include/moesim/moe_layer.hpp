#pragma once

#include "moesim/dispatch.hpp"
#include "moesim/gating.hpp"
#include "moesim/parallelism.hpp"
#include "moesim/pipeline.hpp"

namespace moesim {

enum class RouterKind { Linear, Cosine };

struct StrategyControl {
  bool adaptive = false;
  Strategy fixed{A2aAlgo::Linear, 1};
};

struct ParallelControl {
  bool adaptive = false;
  ParallelChoice fixed = ParallelChoice::P1;
};

struct MoELayerConfig {
  Dims dims;
  CapacityPolicy capacity = FixedCapacity{1.0};
  RouterKind router = RouterKind::Linear;
  bool bpr = false;
  StrategyControl strategy;
  ParallelControl parallel;
};

// All mutable per-layer state: weights plus the adaptive controllers. The
// driver thread is the only mutator between steps.
struct LayerState {
  MoELayerConfig config;
  RouterParams router;
  ExpertParams experts;
  StrategyMemo memo;
  CostModelParams cost;

  static LayerState init(const MoELayerConfig& config, const CostModelParams& cost, Rng& rng);
  Index tokens_total() const {
    return config.dims.world_size * config.dims.tokens_per_step;
  }
};

struct StepMetrics {
  double f = 1.0;
  Index capacity = 1;  // ΔC
  Strategy strategy;
  ParallelChoice parallel = ParallelChoice::P1;
  double sim_seconds = 0.0;
  double comm_bytes = 0.0;
  Index drop_count = 0;
};

// Everything backward needs, captured per rank during the forward pass.
struct SavedForward {
  GateOutput gate;
  Tensor x;
  Strategy strategy;
  ParallelChoice parallel = ParallelChoice::P1;
  std::vector<std::vector<Tensor>> expert_inputs;         // [rank][chunk]
  std::vector<std::vector<ExpertWeights>> rank_weights;   // [rank] full or slice
  std::vector<Tensor> combined;                           // [rank] (E, ΔC, M)
};

struct ForwardResult {
  Tensor y;  // (W*T, M)
  StepMetrics metrics;
  SavedForward saved;
};

// Full distributed step: gate globally, then encode / dispatch / expert /
// combine / decode across W simulated ranks with real payload movement.
ForwardResult forward(LayerState& state, const Tensor& x);

struct LayerGrads {
  Tensor dx;                            // (W*T, M)
  std::vector<ExpertWeights> d_experts; // full gradients, one per global expert
};

// Reverse mode through decode -> combine -> expert -> dispatch -> encode.
// Routing indices and gate values are frozen to the forward plan.
LayerGrads backward(LayerState& state, const SavedForward& saved, const Tensor& dy);

// Dense single-rank oracle over an explicit routing plan and full expert
// weights: y[t] += gate * ffn_e(x[t]) per kept assignment.
Tensor frozen_plan_forward(const Tensor& x, const GateOutput& gate, const Dims& dims,
                           const std::vector<ExpertWeights>& experts);

// Oracle with its own (identical, deterministic) gating.
Tensor reference_forward(const LayerState& state, const Tensor& x);

MatrixRM route_probabilities(const LayerState& state, const Tensor& x);

// Analytic step-time model: overlap-scheduled all-to-all + expert chunk
// costs, plus the P1 parameter gather. Used for strategy search and for
// payload-free runs at large W.
double predict_step_seconds(const Fabric& fabric, const Dims& dims, Index capacity,
                            const Strategy& strategy, ParallelChoice parallel);

// Per-rank bytes both all-to-alls move under a strategy-independent count.
double predict_comm_bytes(const Dims& dims, Index capacity, ParallelChoice parallel);

}  // namespace moesim
