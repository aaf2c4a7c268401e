#pragma once

#include <cstdint>
#include <stdexcept>
#include <variant>
#include <vector>

namespace moesim {

using Index = std::int64_t;

// Expert placement: either each rank owns `experts_per_rank` whole experts,
// or each expert is sliced across `ranks_per_expert` ranks (n-sharded).
struct ExpertsPerRank {
  Index count = 1;
};
struct RanksPerExpert {
  Index count = 2;
};
using ExpertPlacement = std::variant<ExpertsPerRank, RanksPerExpert>;

struct FixedCapacity {
  double factor = 1.0;
};
struct AutoCapacity {};
struct BoundedCapacity {
  double max_factor = 1.0;
};
using CapacityPolicy = std::variant<FixedCapacity, AutoCapacity, BoundedCapacity>;

// Problem dimensions shared by every module. Immutable after construction.
struct Dims {
  Index world_size = 1;       // W
  Index gpus_per_node = 1;    // m
  Index global_experts = 1;   // E
  Index model_dim = 1;        // M
  Index hidden_dim = 1;       // V
  Index tokens_per_step = 1;  // T
  Index top_k = 1;            // k
  ExpertPlacement placement = ExpertsPerRank{1};

  void validate() const;

  Index n_nodes() const { return world_size / gpus_per_node; }
  bool is_sharded() const { return std::holds_alternative<RanksPerExpert>(placement); }
  Index n_sharded() const {
    if (auto* s = std::get_if<RanksPerExpert>(&placement)) return s->count;
    return 1;
  }
  // Local experts per rank; 1 for sharded placement (each rank serves one
  // expert's slice). Fractional ΔE is handled by dims-aware cost functions.
  Index local_experts() const {
    if (auto* x = std::get_if<ExpertsPerRank>(&placement)) return x->count;
    return 1;
  }
};

// Derived per-step shape quantities.
struct ShapeSet {
  Index capacity = 1;        // ΔC: per-expert slots reserved per source rank
  Index gathered_capacity = 1;  // C = W * ΔC
  Index local_experts = 1;   // ΔE (1 when sharded)
  Index n_sharded = 1;
};

// Expert capacity formula: ceil(k*f*T/E), minimum 1. Ceiling keeps f=1.0
// lossless under perfectly even routing.
Index expert_capacity(Index k, double f, Index tokens, Index experts);

ShapeSet derive_shapes(const Dims& dims, double f);

// Effective per-expert capacity for a routing demand. `demand` has E entries.
Index resolve_capacity(const CapacityPolicy& policy, const std::vector<Index>& demand,
                       const Dims& dims);

// Capacity factor equivalent to a concrete capacity (used to key the
// pipelining memo when the policy is Auto/Bounded).
double capacity_to_factor(Index capacity, const Dims& dims);

// Deterministic counter-based generator (splitmix64). Identical streams on
// every platform for the same seed and call sequence.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();
  double uniform();                       // [0, 1)
  double uniform(double lo, double hi);   // [lo, hi)
  Index uniform_index(Index lo, Index hi);  // [lo, hi] inclusive
  double normal();

 private:
  std::uint64_t state_;
};

}  // namespace moesim
