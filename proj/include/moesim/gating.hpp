#pragma once

#include <Eigen/Dense>

#include "moesim/core.hpp"
#include "moesim/tensor.hpp"

namespace moesim {

using IndexMatrix = Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Per-token routing decision. `locations` holds capacity slots; -1 marks a
// dropped (token, expert) assignment.
struct GateOutput {
  IndexMatrix idxs;       // (T, k) expert indices, distinct per row
  IndexMatrix locations;  // (T, k) in [-1, capacity)
  MatrixRM gates;         // (T, k) softmax probabilities of the chosen experts
  Index capacity = 1;     // effective ΔC

  Index tokens() const { return idxs.rows(); }
  Index top_k() const { return idxs.cols(); }
  Index drop_count() const;
};

struct RouterParams {
  MatrixRM linear_weight;  // (M, E)
  MatrixRM cosine_proj;    // (M, D)
  MatrixRM cosine_experts; // (E, D)
  double temperature = 1.0;  // clamped to >= 0.01
};

// x (T, M) * weight (M, E), then row-wise softmax. Returns probabilities.
MatrixRM gate_linear(const Tensor& x, const MatrixRM& weight);

// Cosine router: row-softmax of cos(proj(x), expert_e) / max(tau, 0.01).
MatrixRM gate_cosine(const Tensor& x, const RouterParams& params);

// Per row: the k largest probabilities in descending order, ties broken by
// lower expert index.
struct TopKResult {
  IndexMatrix idxs;
  MatrixRM gates;
};
TopKResult topk_select(const MatrixRM& probs, Index k);

// Assign capacity slots per expert in processing order. bpr=true processes
// tokens by descending max-gate (ties by token index); slots exhausted => -1.
IndexMatrix assign_locations(const IndexMatrix& idxs, const MatrixRM& gates, Index capacity,
                             bool bpr);

// Token counts per expert over the full (T, k) assignment.
std::vector<Index> expert_demand(const IndexMatrix& idxs, Index experts);

GateOutput run_gating(const MatrixRM& probs, Index k, const CapacityPolicy& policy,
                      const Dims& dims, bool bpr);

// Gating for a global batch whose rows are `blocks` equal contiguous blocks
// (one per source rank). Slots are assigned per block with the same capacity,
// so each block's kept tokens fit its own (E, ΔC, M) slab; Auto/Bounded
// capacity resolves against the max per-block demand. BPR orders tokens
// within a block only.
GateOutput run_gating_blocked(const MatrixRM& probs, Index blocks, Index k,
                              const CapacityPolicy& policy, const Dims& dims, bool bpr);

}  // namespace moesim
