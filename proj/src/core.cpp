#include "moesim/core.hpp"

#include <algorithm>
#include <cmath>

namespace moesim {

void Dims::validate() const {
  if (world_size < 1 || gpus_per_node < 1) throw std::invalid_argument("Dims: W and m must be >= 1");
  if (world_size % gpus_per_node != 0)
    throw std::invalid_argument("Dims: world size must be a multiple of gpus per node");
  if (global_experts < 1) throw std::invalid_argument("Dims: E must be >= 1");
  if (top_k < 1 || top_k > global_experts) throw std::invalid_argument("Dims: need 1 <= k <= E");
  if (model_dim < 1 || hidden_dim < 1 || tokens_per_step < 1)
    throw std::invalid_argument("Dims: M, V, T must be >= 1");
  if (auto* x = std::get_if<ExpertsPerRank>(&placement)) {
    if (x->count < 1) throw std::invalid_argument("Dims: experts per rank must be >= 1");
    if (global_experts != world_size * x->count)
      throw std::invalid_argument("Dims: ExpertsPerRank(x) requires E = W*x");
  } else {
    auto s = std::get<RanksPerExpert>(placement).count;
    if (s < 2) throw std::invalid_argument("Dims: RanksPerExpert(s) requires s >= 2");
    if (world_size != global_experts * s)
      throw std::invalid_argument("Dims: RanksPerExpert(s) requires W = E*s");
  }
}

Index expert_capacity(Index k, double f, Index tokens, Index experts) {
  if (k < 1 || tokens < 1 || experts < 1 || !(f > 0.0))
    throw std::invalid_argument("expert_capacity: inputs must be positive");
  double q = static_cast<double>(k) * f * static_cast<double>(tokens) / static_cast<double>(experts);
  // Guard against float noise pushing an exact integer over the next ceiling.
  auto cap = static_cast<Index>(std::ceil(q - 1e-9));
  return std::max<Index>(cap, 1);
}

ShapeSet derive_shapes(const Dims& dims, double f) {
  dims.validate();
  ShapeSet s;
  s.capacity = expert_capacity(dims.top_k, f, dims.tokens_per_step, dims.global_experts);
  s.gathered_capacity = dims.world_size * s.capacity;
  s.local_experts = dims.local_experts();
  s.n_sharded = dims.n_sharded();
  return s;
}

Index resolve_capacity(const CapacityPolicy& policy, const std::vector<Index>& demand,
                       const Dims& dims) {
  if (static_cast<Index>(demand.size()) != dims.global_experts)
    throw std::invalid_argument("resolve_capacity: demand must have E entries");
  Index max_demand = 1;
  for (Index d : demand) max_demand = std::max(max_demand, d);
  if (auto* fixed = std::get_if<FixedCapacity>(&policy))
    return expert_capacity(dims.top_k, fixed->factor, dims.tokens_per_step, dims.global_experts);
  if (std::holds_alternative<AutoCapacity>(policy)) return max_demand;
  auto bound = std::get<BoundedCapacity>(policy).max_factor;
  return std::min(max_demand,
                  expert_capacity(dims.top_k, bound, dims.tokens_per_step, dims.global_experts));
}

double capacity_to_factor(Index capacity, const Dims& dims) {
  return static_cast<double>(capacity) * static_cast<double>(dims.global_experts) /
         (static_cast<double>(dims.top_k) * static_cast<double>(dims.tokens_per_step));
}

std::uint64_t Rng::next_u64() {
  // splitmix64
  std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

Index Rng::uniform_index(Index lo, Index hi) {
  auto span = static_cast<std::uint64_t>(hi - lo + 1);
  return lo + static_cast<Index>(next_u64() % span);
}

double Rng::normal() {
  // Box-Muller; consumes two uniforms per call for a reproducible stream.
  double u1 = uniform();
  double u2 = uniform();
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

}  // namespace moesim
