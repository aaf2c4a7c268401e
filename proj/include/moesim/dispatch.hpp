#pragma once

#include "moesim/gating.hpp"
#include "moesim/tensor.hpp"

namespace moesim {

// Routing snapshot consumed by the sparse operators.
struct DispatchPlan {
  GateOutput gate;
  Index experts = 1;    // E
  Index model_dim = 1;  // M

  Index tokens() const { return gate.tokens(); }
  Index capacity() const { return gate.capacity; }
};

// Counts scalar multiply-adds / moves of an instrumented execution.
struct OpCounter {
  Index ops = 0;
};

// Dense einsum-style reference: dispatch_input[e,c,:] = sum_t mask[t,e,c] * x[t,:].
// O(T*E*ΔC*M) by construction.
Tensor encode_dense_reference(const Tensor& x, const DispatchPlan& plan,
                              OpCounter* counter = nullptr);

// Sparse scatter: Z[idxs[t,j], locations[t,j], :] = x[t,:] for kept slots.
// Carries raw token values; gates apply at decode only. O(T*k*M).
Tensor fast_encode(const Tensor& x, const DispatchPlan& plan, OpCounter* counter = nullptr);

// y[t,:] = sum_j gates[t,j] * Y[idxs[t,j], locations[t,j], :] over kept slots.
Tensor fast_decode(const Tensor& expert_out, const DispatchPlan& plan,
                   OpCounter* counter = nullptr);

Tensor decode_dense_reference(const Tensor& expert_out, const DispatchPlan& plan);

// Adjoint of the scatter: dx[t,:] = sum_j dZ[idxs[t,j], locations[t,j], :].
Tensor fast_encode_backward(const Tensor& d_encoded, const DispatchPlan& plan);

struct DecodeBackwardResult {
  Tensor d_expert_out;  // (E, ΔC, M)
  MatrixRM d_gates;     // (T, k)
};
DecodeBackwardResult fast_decode_backward(const Tensor& dy, const Tensor& expert_out,
                                          const DispatchPlan& plan);

// Restrictions to one token range [begin, end): only those tokens' slots /
// rows are touched. Used by the per-rank distributed path, where each rank
// owns a contiguous token block and its own (E, ΔC, M) slot tensor.
Tensor fast_encode_range(const Tensor& x, const DispatchPlan& plan, Index begin, Index end);
void fast_decode_range(const Tensor& expert_out, const DispatchPlan& plan, Index begin, Index end,
                       Tensor& y);
DecodeBackwardResult fast_decode_backward_range(const Tensor& dy, const Tensor& expert_out,
                                                const DispatchPlan& plan, Index begin, Index end);
void fast_encode_backward_range(const Tensor& d_encoded, const DispatchPlan& plan, Index begin,
                                Index end, Tensor& dx);

}  // namespace moesim
