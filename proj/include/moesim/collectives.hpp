#pragma once

#include <span>

#include "moesim/fabric.hpp"
#include "moesim/tensor.hpp"

namespace moesim {

enum class A2aAlgo { Linear, TwoDH };

const char* to_string(A2aAlgo algo);

// Chunk-level transpose: viewing `input` as a (cols, rows) grid of
// chunk_elems-sized chunks, output[r*cols + c] = input[c*rows + r].
void stride_memcpy(std::span<double> output, std::span<const double> input, Index chunk_elems,
                   Index rows, Index cols);

// One grouped exchange of W equal chunks; output chunk r = input chunk of
// this rank held by rank r.
std::vector<double> all2all_linear(RankCtx& ctx, const std::vector<double>& input);

// Same permutation via four phases: local align, intra-node exchange, local
// align, inter-node exchange. Byte-equal to the linear algorithm.
std::vector<double> all2all_2dh(RankCtx& ctx, const std::vector<double>& input);

std::vector<double> all2all(RankCtx& ctx, const std::vector<double>& input, A2aAlgo algo);

// Every rank ends up with all W shards concatenated in rank order.
std::vector<double> all_gather(RankCtx& ctx, const std::vector<double>& shard);

// Layout-preserving all-to-all:
//   concat=1, split=0: (E, ΔC, M) -> (ΔE, C, M) with C = W*ΔC (dispatch)
//   concat=0, split=1: (ΔE, C, M) -> (E, ΔC, M)              (combine)
// Entries for capacity slot c from source rank r land at column r*ΔC + c.
Tensor flex_all2all(RankCtx& ctx, const Tensor& input, int concat_dim, int split_dim,
                    A2aAlgo algo);

// Splits the gathered-capacity axis of (ΔE, C, M) into ceil(C/tile) tiles of
// extent `tile`, zero-padding the last. untile drops the padding.
std::vector<Tensor> tile_capacity(const Tensor& x, Index tile);
Tensor untile_capacity(const std::vector<Tensor>& tiles, Index original_capacity);

// Message bytes a rank posts for each algorithm, for the analytic mode.
// total_bytes is the rank's full payload (W chunks).
std::vector<std::pair<Index, double>> a2a_message_plan(const Topology& topo, Index rank,
                                                       double total_bytes, A2aAlgo algo,
                                                       int phase);

// Analytic completion time of one all-to-all (including 2DH local copies).
double a2a_time(const Fabric& fabric, double total_bytes_per_rank, A2aAlgo algo);

}  // namespace moesim
