#include "moesim/gating.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace moesim {

Index GateOutput::drop_count() const {
  Index n = 0;
  for (Index t = 0; t < locations.rows(); ++t)
    for (Index j = 0; j < locations.cols(); ++j)
      if (locations(t, j) < 0) ++n;
  return n;
}

namespace {

void softmax_rows(MatrixRM& logits) {
  for (Index t = 0; t < logits.rows(); ++t) {
    double mx = logits.row(t).maxCoeff();
    logits.row(t) = (logits.row(t).array() - mx).exp();
    logits.row(t) /= logits.row(t).sum();
  }
}

}  // namespace

MatrixRM gate_linear(const Tensor& x, const MatrixRM& weight) {
  if (x.rank() != 2 || x.extent(1) != weight.rows())
    throw std::invalid_argument("gate_linear: shape mismatch");
  MatrixRM logits = x.as_matrix() * weight;
  softmax_rows(logits);
  return logits;
}

MatrixRM gate_cosine(const Tensor& x, const RouterParams& params) {
  if (x.rank() != 2 || x.extent(1) != params.cosine_proj.rows())
    throw std::invalid_argument("gate_cosine: shape mismatch");
  if (params.cosine_proj.cols() != params.cosine_experts.cols())
    throw std::invalid_argument("gate_cosine: projection dim mismatch");
  const double tau = std::max(params.temperature, 0.01);
  MatrixRM proj = x.as_matrix() * params.cosine_proj;  // (T, D)
  Eigen::VectorXd tok_norm = proj.rowwise().norm();
  Eigen::VectorXd exp_norm = params.cosine_experts.rowwise().norm();
  for (Index t = 0; t < tok_norm.size(); ++t)
    if (tok_norm[t] == 0.0) throw std::invalid_argument("gate_cosine: zero-norm projected token");
  for (Index e = 0; e < exp_norm.size(); ++e)
    if (exp_norm[e] == 0.0) throw std::invalid_argument("gate_cosine: zero-norm expert row");
  MatrixRM logits = proj * params.cosine_experts.transpose();
  for (Index t = 0; t < logits.rows(); ++t)
    for (Index e = 0; e < logits.cols(); ++e)
      logits(t, e) /= tok_norm[t] * exp_norm[e] * tau;
  softmax_rows(logits);
  return logits;
}

TopKResult topk_select(const MatrixRM& probs, Index k) {
  const Index tokens = probs.rows();
  const Index experts = probs.cols();
  if (k < 1 || k > experts) throw std::invalid_argument("topk_select: k out of range");
  TopKResult out;
  out.idxs.resize(tokens, k);
  out.gates.resize(tokens, k);
  std::vector<Index> order(static_cast<std::size_t>(experts));
  for (Index t = 0; t < tokens; ++t) {
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
      if (probs(t, a) != probs(t, b)) return probs(t, a) > probs(t, b);
      return a < b;
    });
    for (Index j = 0; j < k; ++j) {
      out.idxs(t, j) = order[static_cast<std::size_t>(j)];
      out.gates(t, j) = probs(t, order[static_cast<std::size_t>(j)]);
    }
  }
  return out;
}

IndexMatrix assign_locations(const IndexMatrix& idxs, const MatrixRM& gates, Index capacity,
                             bool bpr) {
  if (capacity < 1) throw std::invalid_argument("assign_locations: capacity must be >= 1");
  const Index tokens = idxs.rows();
  const Index k = idxs.cols();
  Index experts = 0;
  for (Index t = 0; t < tokens; ++t)
    for (Index j = 0; j < k; ++j) experts = std::max(experts, idxs(t, j) + 1);

  std::vector<Index> token_order(static_cast<std::size_t>(tokens));
  std::iota(token_order.begin(), token_order.end(), Index{0});
  if (bpr) {
    std::stable_sort(token_order.begin(), token_order.end(), [&](Index a, Index b) {
      double ka = gates.row(a).maxCoeff();
      double kb = gates.row(b).maxCoeff();
      if (ka != kb) return ka > kb;
      return a < b;
    });
  }

  std::vector<Index> next_slot(static_cast<std::size_t>(experts), 0);
  IndexMatrix locations(tokens, k);
  for (Index t : token_order) {
    for (Index j = 0; j < k; ++j) {
      Index e = idxs(t, j);
      if (next_slot[static_cast<std::size_t>(e)] < capacity)
        locations(t, j) = next_slot[static_cast<std::size_t>(e)]++;
      else
        locations(t, j) = -1;
    }
  }
  return locations;
}

std::vector<Index> expert_demand(const IndexMatrix& idxs, Index experts) {
  std::vector<Index> demand(static_cast<std::size_t>(experts), 0);
  for (Index t = 0; t < idxs.rows(); ++t)
    for (Index j = 0; j < idxs.cols(); ++j) ++demand[static_cast<std::size_t>(idxs(t, j))];
  return demand;
}

GateOutput run_gating(const MatrixRM& probs, Index k, const CapacityPolicy& policy,
                      const Dims& dims, bool bpr) {
  TopKResult top = topk_select(probs, k);
  auto demand = expert_demand(top.idxs, dims.global_experts);
  Index capacity = resolve_capacity(policy, demand, dims);
  GateOutput out;
  out.idxs = std::move(top.idxs);
  out.gates = std::move(top.gates);
  out.capacity = capacity;
  out.locations = assign_locations(out.idxs, out.gates, capacity, bpr);
  return out;
}

GateOutput run_gating_blocked(const MatrixRM& probs, Index blocks, Index k,
                              const CapacityPolicy& policy, const Dims& dims, bool bpr) {
  if (blocks < 1 || probs.rows() % blocks != 0)
    throw std::invalid_argument("run_gating_blocked: rows must split into equal blocks");
  const Index block_rows = probs.rows() / blocks;
  TopKResult top = topk_select(probs, k);

  std::vector<Index> demand(static_cast<std::size_t>(dims.global_experts), 0);
  for (Index b = 0; b < blocks; ++b) {
    IndexMatrix sub = top.idxs.middleRows(b * block_rows, block_rows);
    auto block_demand = expert_demand(sub, dims.global_experts);
    for (std::size_t e = 0; e < demand.size(); ++e)
      demand[e] = std::max(demand[e], block_demand[e]);
  }
  Index capacity = resolve_capacity(policy, demand, dims);

  GateOutput out;
  out.idxs = std::move(top.idxs);
  out.gates = std::move(top.gates);
  out.capacity = capacity;
  out.locations.resize(probs.rows(), k);
  for (Index b = 0; b < blocks; ++b) {
    IndexMatrix sub_idx = out.idxs.middleRows(b * block_rows, block_rows);
    MatrixRM sub_gates = out.gates.middleRows(b * block_rows, block_rows);
    out.locations.middleRows(b * block_rows, block_rows) =
        assign_locations(sub_idx, sub_gates, capacity, bpr);
  }
  return out;
}

}  // namespace moesim
