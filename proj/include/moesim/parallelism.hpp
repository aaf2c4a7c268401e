#pragma once

#include "moesim/fabric.hpp"
#include "moesim/tensor.hpp"

namespace moesim {

enum class ParallelChoice { P1, P2 };

const char* to_string(ParallelChoice choice);

struct ExpertWeights {
  MatrixRM w1;  // (M, V)
  MatrixRM w2;  // (V, M)
};

// Two-layer expert parameters held as hidden-dim slices: w1 column slices and
// w2 row slices. Per-rank placement slices every expert W ways (rank q holds
// slice q of each expert); sharded placement slices each expert s ways across
// its sharing ranks. Concatenating the slices reproduces the full parameter
// bit-exactly, and the layout is the same whichever execution strategy runs.
struct ExpertParams {
  Dims dims;
  Index n_slices = 1;
  Index slice_hidden = 1;  // V / n_slices
  std::vector<std::vector<ExpertWeights>> slices;  // [expert][slice]

  static ExpertParams from_full(const Dims& dims, std::vector<ExpertWeights> full);
  static ExpertParams random(const Dims& dims, Rng& rng, double scale = 0.5);

  ExpertWeights assemble(Index expert) const;
  double param_bytes_per_expert() const {
    return 8.0 * 2.0 * static_cast<double>(dims.model_dim) * static_cast<double>(dims.hidden_dim);
  }
  // (expert, slice) pairs whose parameters live on `rank`.
  std::vector<std::pair<Index, Index>> held_slices(Index rank) const;
};

// y[e] = relu(x[e]·w1)·w2 over a (n, rows, M) batch; charges 2 flops per
// multiply-add of both matmuls when a context is given.
Tensor expert_ffn(const Tensor& x, const std::vector<ExpertWeights>& weights,
                  RankCtx* ctx = nullptr);

struct FfnGrads {
  Tensor dx;
  std::vector<ExpertWeights> dw;
};
FfnGrads expert_ffn_backward(const Tensor& x, const std::vector<ExpertWeights>& weights,
                             const Tensor& dy, RankCtx* ctx = nullptr);

// Weights of the experts this rank computes this step, reassembled from the
// distributed slices via one grouped exchange (the ZeRO-style all-gather).
// Per-rank placement: the rank's own experts; sharded: its single expert.
std::vector<ExpertWeights> gather_computed_experts(RankCtx& ctx, const ExpertParams& params);

struct ExpertRunState {
  std::vector<ExpertWeights> weights;  // full (P1) or this rank's slice (P2)
  Tensor input;
};

// P1: gather full weights, run the full expert on the local token shard.
Tensor run_expert_p1(RankCtx& ctx, const Tensor& tokens, const ExpertParams& params,
                     ExpertRunState* saved = nullptr);

// P2: run only this rank's hidden-dim slice; the caller sums the s partial
// outputs after the combine exchange. tokens is (1, rows, M).
Tensor run_expert_p2_partial(RankCtx& ctx, const Tensor& tokens, const ExpertParams& params,
                             ExpertRunState* saved = nullptr);

// P1 gradient reduce-scatter: full-expert gradients computed on their compute
// ranks are sliced and routed back onto the ranks holding the matching
// parameter slices (summed across sharded replicas). Returns this rank's
// held-slice gradients in held_slices() order.
std::vector<ExpertWeights> reduce_scatter_grads_p1(RankCtx& ctx, const ExpertParams& params,
                                                   const std::vector<ExpertWeights>& dw_full);

// Closed-form per-rank communication bytes of each strategy (token and
// parameter terms). local_experts may be fractional (1/s when sharded).
double comm_cost_p1(double local_experts, Index gathered_capacity, Index model_dim,
                    double param_bytes);
double comm_cost_p2(double local_experts, Index gathered_capacity, Index model_dim,
                    Index n_sharded);
ParallelChoice select_parallelism(double local_experts, Index gathered_capacity, Index model_dim,
                                  double param_bytes, Index n_sharded);

// ΔE as a rational count: experts_per_rank, or 1/ranks_per_expert.
double fractional_local_experts(const Dims& dims);
ParallelChoice select_parallelism(const Dims& dims, Index gathered_capacity);

}  // namespace moesim
