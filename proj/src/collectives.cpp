#include "moesim/collectives.hpp"

#include <algorithm>
#include <cstring>

namespace moesim {

const char* to_string(A2aAlgo algo) { return algo == A2aAlgo::Linear ? "linear" : "2dh"; }

void stride_memcpy(std::span<double> output, std::span<const double> input, Index chunk_elems,
                   Index rows, Index cols) {
  if (chunk_elems < 1 || rows < 1 || cols < 1 ||
      static_cast<Index>(input.size()) != rows * cols * chunk_elems ||
      input.size() != output.size())
    throw std::invalid_argument("stride_memcpy: chunk grid does not divide the buffer");
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c)
      std::memcpy(output.data() + (r * cols + c) * chunk_elems,
                  input.data() + (c * rows + r) * chunk_elems,
                  static_cast<std::size_t>(chunk_elems) * sizeof(double));
}

namespace {

std::vector<double> exchange_chunks(RankCtx& ctx, const std::vector<double>& input,
                                    const std::vector<Index>& peers, Index chunk_elems) {
  // Chunk i of `input` goes to peers[i]; the result holds the chunk received
  // from peers[i] at slot i.
  std::vector<SendOp> sends;
  std::vector<RecvOp> recvs;
  sends.reserve(peers.size());
  recvs.reserve(peers.size());
  for (std::size_t i = 0; i < peers.size(); ++i) {
    auto begin = input.begin() + static_cast<std::ptrdiff_t>(i) * chunk_elems;
    sends.push_back({peers[i], std::vector<double>(begin, begin + chunk_elems)});
    recvs.push_back({peers[i], chunk_elems});
  }
  auto received = ctx.group(std::move(sends), std::move(recvs));
  std::vector<double> output(input.size());
  for (std::size_t i = 0; i < peers.size(); ++i)
    std::copy(received[i].begin(), received[i].end(),
              output.begin() + static_cast<std::ptrdiff_t>(i) * chunk_elems);
  return output;
}

}  // namespace

std::vector<double> all2all_linear(RankCtx& ctx, const std::vector<double>& input) {
  const Index W = ctx.world_size();
  if (input.empty() || static_cast<Index>(input.size()) % W != 0)
    throw std::invalid_argument("all2all_linear: input not divisible into W chunks");
  const Index chunk = static_cast<Index>(input.size()) / W;
  std::vector<Index> peers(static_cast<std::size_t>(W));
  for (Index r = 0; r < W; ++r) peers[static_cast<std::size_t>(r)] = r;
  return exchange_chunks(ctx, input, peers, chunk);
}

std::vector<double> all2all_2dh(RankCtx& ctx, const std::vector<double>& input) {
  const Topology& topo = ctx.topology();
  const Index W = topo.world_size;
  const Index m = topo.gpus_per_node;
  const Index n_nodes = topo.n_nodes();
  if (input.empty() || static_cast<Index>(input.size()) % W != 0)
    throw std::invalid_argument("all2all_2dh: input not divisible into W chunks");
  const Index chunk = static_cast<Index>(input.size()) / W;
  const Index node = topo.node_of(ctx.rank());
  const Index local = topo.local_rank(ctx.rank());
  const double bytes = 8.0 * static_cast<double>(input.size());

  // Phase 1: align chunks sharing a local destination GPU.
  std::vector<double> buffer(input.size());
  stride_memcpy(buffer, input, chunk, m, n_nodes);
  ctx.charge_memcpy(bytes);

  // Phase 2: intra-node exchange, m messages of n_nodes*chunk each.
  std::vector<Index> intra_peers(static_cast<std::size_t>(m));
  for (Index g = 0; g < m; ++g) intra_peers[static_cast<std::size_t>(g)] = node * m + g;
  std::vector<double> staged = exchange_chunks(ctx, buffer, intra_peers, n_nodes * chunk);

  // Phase 3: align chunks sharing a remote destination node.
  stride_memcpy(buffer, staged, chunk, n_nodes, m);
  ctx.charge_memcpy(bytes);

  // Phase 4: inter-node exchange, n_nodes messages of m*chunk each.
  std::vector<Index> inter_peers(static_cast<std::size_t>(n_nodes));
  for (Index n = 0; n < n_nodes; ++n) inter_peers[static_cast<std::size_t>(n)] = local + n * m;
  return exchange_chunks(ctx, buffer, inter_peers, m * chunk);
}

std::vector<double> all2all(RankCtx& ctx, const std::vector<double>& input, A2aAlgo algo) {
  return algo == A2aAlgo::Linear ? all2all_linear(ctx, input) : all2all_2dh(ctx, input);
}

std::vector<double> all_gather(RankCtx& ctx, const std::vector<double>& shard) {
  const Index W = ctx.world_size();
  const Index n = static_cast<Index>(shard.size());
  std::vector<SendOp> sends;
  std::vector<RecvOp> recvs;
  for (Index r = 0; r < W; ++r) {
    if (r == ctx.rank()) continue;
    sends.push_back({r, shard});
    recvs.push_back({r, n});
  }
  auto received = ctx.group(std::move(sends), std::move(recvs));
  std::vector<double> out(static_cast<std::size_t>(W * n));
  std::size_t cursor = 0;
  for (Index r = 0; r < W; ++r) {
    const std::vector<double>& src = (r == ctx.rank()) ? shard : received[cursor++];
    if (static_cast<Index>(src.size()) != n)
      throw std::invalid_argument("all_gather: shard size mismatch");
    std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  return out;
}

Tensor flex_all2all(RankCtx& ctx, const Tensor& input, int concat_dim, int split_dim,
                    A2aAlgo algo) {
  if (input.rank() != 3) throw std::invalid_argument("flex_all2all: rank-3 tensor expected");
  if (concat_dim == split_dim) throw std::invalid_argument("flex_all2all: concat_dim == split_dim");
  const Index W = ctx.world_size();
  const Index M = input.extent(2);

  if (concat_dim == 1 && split_dim == 0) {
    // (E, ΔC, M) -> (ΔE, C, M): split experts across ranks, concat capacity
    // in source-rank order.
    const Index E = input.extent(0), dC = input.extent(1);
    if (E % W != 0) throw std::invalid_argument("flex_all2all: expert axis not divisible by W");
    const Index dE = E / W;
    std::vector<double> flat(input.data.data(), input.data.data() + input.size());
    std::vector<double> received = all2all(ctx, flat, algo);
    // Received block r is (dE, dC, M); interleave along capacity.
    Tensor out = Tensor::zeros({dE, W * dC, M});
    for (Index r = 0; r < W; ++r) {
      const double* block = received.data() + r * dE * dC * M;
      for (Index e = 0; e < dE; ++e)
        for (Index c = 0; c < dC; ++c)
          std::memcpy(&out.at(e, r * dC + c, 0), block + (e * dC + c) * M,
                      static_cast<std::size_t>(M) * sizeof(double));
    }
    return out;
  }
  if (concat_dim == 0 && split_dim == 1) {
    // (ΔE, C, M) -> (E, ΔC, M): split capacity back to source ranks, concat
    // experts in rank order.
    const Index dE = input.extent(0), C = input.extent(1);
    if (C % W != 0) throw std::invalid_argument("flex_all2all: capacity axis not divisible by W");
    const Index dC = C / W;
    std::vector<double> flat(static_cast<std::size_t>(input.size()));
    for (Index r = 0; r < W; ++r) {
      double* block = flat.data() + r * dE * dC * M;
      for (Index e = 0; e < dE; ++e)
        for (Index c = 0; c < dC; ++c)
          std::memcpy(block + (e * dC + c) * M, &input.at(e, r * dC + c, 0),
                      static_cast<std::size_t>(M) * sizeof(double));
    }
    std::vector<double> received = all2all(ctx, flat, algo);
    return Tensor({W * dE, dC, M},
                  Eigen::Map<const Eigen::VectorXd>(received.data(),
                                                    static_cast<Index>(received.size())));
  }
  throw std::invalid_argument("flex_all2all: unsupported (concat_dim, split_dim)");
}

std::vector<Tensor> tile_capacity(const Tensor& x, Index tile) {
  if (x.rank() != 3) throw std::invalid_argument("tile_capacity: rank-3 tensor expected");
  if (tile < 1) throw std::invalid_argument("tile_capacity: tile size must be >= 1");
  const Index dE = x.extent(0), C = x.extent(1), M = x.extent(2);
  const Index n_tiles = (C + tile - 1) / tile;
  std::vector<Tensor> tiles;
  tiles.reserve(static_cast<std::size_t>(n_tiles));
  for (Index i = 0; i < n_tiles; ++i) {
    Tensor t = Tensor::zeros({dE, tile, M});
    for (Index e = 0; e < dE; ++e)
      for (Index c = 0; c < tile; ++c) {
        Index src = i * tile + c;
        if (src >= C) break;
        std::memcpy(&t.at(e, c, 0), &x.at(e, src, 0),
                    static_cast<std::size_t>(M) * sizeof(double));
      }
    tiles.push_back(std::move(t));
  }
  return tiles;
}

Tensor untile_capacity(const std::vector<Tensor>& tiles, Index original_capacity) {
  if (tiles.empty()) throw std::invalid_argument("untile_capacity: no tiles");
  const Index dE = tiles[0].extent(0), tile = tiles[0].extent(1), M = tiles[0].extent(2);
  Tensor out = Tensor::zeros({dE, original_capacity, M});
  for (std::size_t i = 0; i < tiles.size(); ++i)
    for (Index e = 0; e < dE; ++e)
      for (Index c = 0; c < tile; ++c) {
        Index dst = static_cast<Index>(i) * tile + c;
        if (dst >= original_capacity) break;
        std::memcpy(&out.at(e, dst, 0), &tiles[i].at(e, c, 0),
                    static_cast<std::size_t>(M) * sizeof(double));
      }
  return out;
}

std::vector<std::pair<Index, double>> a2a_message_plan(const Topology& topo, Index rank,
                                                       double total_bytes, A2aAlgo algo,
                                                       int phase) {
  const Index W = topo.world_size;
  std::vector<std::pair<Index, double>> plan;
  if (algo == A2aAlgo::Linear) {
    for (Index r = 0; r < W; ++r) plan.emplace_back(r, total_bytes / static_cast<double>(W));
    return plan;
  }
  const Index m = topo.gpus_per_node;
  const Index n_nodes = topo.n_nodes();
  if (phase == 2) {
    Index node = topo.node_of(rank);
    for (Index g = 0; g < m; ++g)
      plan.emplace_back(node * m + g, total_bytes / static_cast<double>(m));
  } else if (phase == 4) {
    Index local = topo.local_rank(rank);
    for (Index n = 0; n < n_nodes; ++n)
      plan.emplace_back(local + n * m, total_bytes / static_cast<double>(n_nodes));
  } else {
    throw std::invalid_argument("a2a_message_plan: 2DH phases are 2 and 4");
  }
  return plan;
}

double a2a_time(const Fabric& fabric, double total_bytes_per_rank, A2aAlgo algo) {
  const Topology& topo = fabric.topology();
  const CostModelParams& p = fabric.params();
  if (algo == A2aAlgo::Linear)
    return fabric.symmetric_group_time(0, a2a_message_plan(topo, 0, total_bytes_per_rank,
                                                           algo, 0));
  double copies = 2.0 * (p.launch_overhead + total_bytes_per_rank / p.memcpy_bandwidth);
  double intra = fabric.symmetric_group_time(
      0, a2a_message_plan(topo, 0, total_bytes_per_rank, algo, 2));
  double inter = fabric.symmetric_group_time(
      0, a2a_message_plan(topo, 0, total_bytes_per_rank, algo, 4));
  return copies + intra + inter;
}

}  // namespace moesim
