#include "moesim/dispatch.hpp"

namespace moesim {

namespace {

void check_plan(const Tensor& x, const DispatchPlan& plan) {
  if (x.rank() != 2 || x.extent(0) != plan.tokens() || x.extent(1) != plan.model_dim)
    throw std::invalid_argument("dispatch: token tensor shape mismatch");
}

void check_expert_tensor(const Tensor& z, const DispatchPlan& plan) {
  if (z.rank() != 3 || z.extent(0) != plan.experts || z.extent(1) != plan.capacity() ||
      z.extent(2) != plan.model_dim)
    throw std::invalid_argument("dispatch: expert tensor shape mismatch");
}

}  // namespace

Tensor encode_dense_reference(const Tensor& x, const DispatchPlan& plan, OpCounter* counter) {
  check_plan(x, plan);
  const Index T = plan.tokens(), E = plan.experts, C = plan.capacity(), M = plan.model_dim;
  const Index k = plan.gate.top_k();
  // One-hot (token -> expert, location) indicator.
  std::vector<double> mask(static_cast<std::size_t>(T * E * C), 0.0);
  for (Index t = 0; t < T; ++t)
    for (Index j = 0; j < k; ++j) {
      Index loc = plan.gate.locations(t, j);
      if (loc >= 0) mask[static_cast<std::size_t>((t * E + plan.gate.idxs(t, j)) * C + loc)] = 1.0;
    }
  Tensor z = Tensor::zeros({E, C, M});
  for (Index e = 0; e < E; ++e)
    for (Index c = 0; c < C; ++c)
      for (Index t = 0; t < T; ++t) {
        double m = mask[static_cast<std::size_t>((t * E + e) * C + c)];
        for (Index d = 0; d < M; ++d) z.at(e, c, d) += m * x.at(t, d);
        if (counter) counter->ops += M;
      }
  return z;
}

Tensor fast_encode(const Tensor& x, const DispatchPlan& plan, OpCounter* counter) {
  check_plan(x, plan);
  if (counter)
    for (Index t = 0; t < plan.tokens(); ++t)
      for (Index j = 0; j < plan.gate.top_k(); ++j)
        if (plan.gate.locations(t, j) >= 0) counter->ops += plan.model_dim;
  return fast_encode_range(x, plan, 0, plan.tokens());
}

Tensor fast_encode_range(const Tensor& x, const DispatchPlan& plan, Index begin, Index end) {
  const Index E = plan.experts, C = plan.capacity(), M = plan.model_dim;
  Tensor z = Tensor::zeros({E, C, M});
  for (Index t = begin; t < end; ++t)
    for (Index j = 0; j < plan.gate.top_k(); ++j) {
      Index loc = plan.gate.locations(t, j);
      if (loc < 0) continue;
      Index e = plan.gate.idxs(t, j);
      for (Index d = 0; d < M; ++d) z.at(e, loc, d) = x.at(t, d);
    }
  return z;
}

Tensor fast_decode(const Tensor& expert_out, const DispatchPlan& plan, OpCounter* counter) {
  const Index T = plan.tokens(), M = plan.model_dim;
  Tensor y = Tensor::zeros({T, M});
  fast_decode_range(expert_out, plan, 0, T, y);
  if (counter)
    for (Index t = 0; t < T; ++t)
      for (Index j = 0; j < plan.gate.top_k(); ++j)
        if (plan.gate.locations(t, j) >= 0) counter->ops += 2 * M;
  return y;
}

void fast_decode_range(const Tensor& expert_out, const DispatchPlan& plan, Index begin, Index end,
                       Tensor& y) {
  check_expert_tensor(expert_out, plan);
  const Index M = plan.model_dim;
  for (Index t = begin; t < end; ++t)
    for (Index j = 0; j < plan.gate.top_k(); ++j) {
      Index loc = plan.gate.locations(t, j);
      if (loc < 0) continue;
      Index e = plan.gate.idxs(t, j);
      double g = plan.gate.gates(t, j);
      for (Index d = 0; d < M; ++d) y.at(t, d) += g * expert_out.at(e, loc, d);
    }
}

Tensor decode_dense_reference(const Tensor& expert_out, const DispatchPlan& plan) {
  check_expert_tensor(expert_out, plan);
  const Index T = plan.tokens(), E = plan.experts, C = plan.capacity(), M = plan.model_dim;
  const Index k = plan.gate.top_k();
  std::vector<double> weight(static_cast<std::size_t>(T * E * C), 0.0);
  for (Index t = 0; t < T; ++t)
    for (Index j = 0; j < k; ++j) {
      Index loc = plan.gate.locations(t, j);
      if (loc >= 0)
        weight[static_cast<std::size_t>((t * E + plan.gate.idxs(t, j)) * C + loc)] =
            plan.gate.gates(t, j);
    }
  Tensor y = Tensor::zeros({T, M});
  for (Index t = 0; t < T; ++t)
    for (Index e = 0; e < E; ++e)
      for (Index c = 0; c < C; ++c) {
        double w = weight[static_cast<std::size_t>((t * E + e) * C + c)];
        for (Index d = 0; d < M; ++d) y.at(t, d) += w * expert_out.at(e, c, d);
      }
  return y;
}

Tensor fast_encode_backward(const Tensor& d_encoded, const DispatchPlan& plan) {
  Tensor dx = Tensor::zeros({plan.tokens(), plan.model_dim});
  fast_encode_backward_range(d_encoded, plan, 0, plan.tokens(), dx);
  return dx;
}

void fast_encode_backward_range(const Tensor& d_encoded, const DispatchPlan& plan, Index begin,
                                Index end, Tensor& dx) {
  check_expert_tensor(d_encoded, plan);
  const Index M = plan.model_dim;
  for (Index t = begin; t < end; ++t)
    for (Index j = 0; j < plan.gate.top_k(); ++j) {
      Index loc = plan.gate.locations(t, j);
      if (loc < 0) continue;
      Index e = plan.gate.idxs(t, j);
      for (Index d = 0; d < M; ++d) dx.at(t, d) += d_encoded.at(e, loc, d);
    }
}

DecodeBackwardResult fast_decode_backward(const Tensor& dy, const Tensor& expert_out,
                                          const DispatchPlan& plan) {
  check_plan(dy, plan);
  return fast_decode_backward_range(dy, expert_out, plan, 0, plan.tokens());
}

DecodeBackwardResult fast_decode_backward_range(const Tensor& dy, const Tensor& expert_out,
                                                const DispatchPlan& plan, Index begin, Index end) {
  check_expert_tensor(expert_out, plan);
  const Index T = plan.tokens(), M = plan.model_dim;
  DecodeBackwardResult out;
  out.d_expert_out = Tensor::zeros(expert_out.shape);
  out.d_gates = MatrixRM::Zero(T, plan.gate.top_k());
  for (Index t = begin; t < end; ++t)
    for (Index j = 0; j < plan.gate.top_k(); ++j) {
      Index loc = plan.gate.locations(t, j);
      if (loc < 0) continue;
      Index e = plan.gate.idxs(t, j);
      double g = plan.gate.gates(t, j);
      double dot = 0.0;
      for (Index d = 0; d < M; ++d) {
        out.d_expert_out.at(e, loc, d) += g * dy.at(t, d);
        dot += expert_out.at(e, loc, d) * dy.at(t, d);
      }
      out.d_gates(t, j) = dot;
    }
  return out;
}

}  // namespace moesim
