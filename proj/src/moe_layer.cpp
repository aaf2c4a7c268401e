#include "moesim/moe_layer.hpp"

#include <cmath>
#include <cstring>
#include <numeric>

namespace moesim {

namespace {

constexpr Index kCosineProjDim = 256;

// Sharded-placement exchanges. The shard group of expert e is the rank block
// [e*s, (e+1)*s); shard q of an expert serves source ranks [q*E, (q+1)*E)
// under P1 (W = E*s, so each shard covers E sources).

// P1 dispatch: source r forwards its per-expert slab to the shard covering r;
// as a compute rank this rank assembles its source range. (E, cc, M) ->
// (1, E*cc, M). Self-adjoint pair with combine below.
Tensor dispatch_sharded_p1(RankCtx& ctx, const Tensor& chunk, const Dims& dims) {
  const Index s = dims.n_sharded(), E = dims.global_experts, cc = chunk.extent(1),
              M = chunk.extent(2);
  const Index r = ctx.rank(), q_src = r / E, e_mine = r / s, q_mine = r % s;
  std::vector<SendOp> sends;
  std::vector<RecvOp> recvs;
  for (Index e = 0; e < E; ++e) {
    const double* slab = chunk.data.data() + e * cc * M;
    sends.push_back({e * s + q_src, std::vector<double>(slab, slab + cc * M)});
  }
  for (Index src = q_mine * E; src < (q_mine + 1) * E; ++src) recvs.push_back({src, cc * M});
  auto received = ctx.group(std::move(sends), std::move(recvs));
  Tensor out = Tensor::zeros({1, E * cc, M});
  for (Index i = 0; i < E; ++i)
    std::copy(received[static_cast<std::size_t>(i)].begin(),
              received[static_cast<std::size_t>(i)].end(), out.data.data() + i * cc * M);
  (void)e_mine;
  return out;
}

// P1 combine: return each source its slab. (1, E*cc, M) -> (E, cc, M).
Tensor combine_sharded_p1(RankCtx& ctx, const Tensor& shard_out, const Dims& dims, Index cc) {
  const Index s = dims.n_sharded(), E = dims.global_experts, M = shard_out.extent(2);
  const Index r = ctx.rank(), q_src = r / E, q_mine = r % s;
  std::vector<SendOp> sends;
  std::vector<RecvOp> recvs;
  for (Index i = 0; i < E; ++i) {
    const double* block = shard_out.data.data() + i * cc * M;
    sends.push_back({q_mine * E + i, std::vector<double>(block, block + cc * M)});
  }
  for (Index e = 0; e < E; ++e) recvs.push_back({e * s + q_src, cc * M});
  auto received = ctx.group(std::move(sends), std::move(recvs));
  Tensor out = Tensor::zeros({E, cc, M});
  for (Index e = 0; e < E; ++e)
    std::copy(received[static_cast<std::size_t>(e)].begin(),
              received[static_cast<std::size_t>(e)].end(), out.data.data() + e * cc * M);
  return out;
}

// P2 dispatch: repeat each slab to all s shards of its expert; assemble the
// full gathered capacity. (E, cc, M) -> (1, W*cc, M).
Tensor dispatch_sharded_p2(RankCtx& ctx, const Tensor& chunk, const Dims& dims) {
  const Index s = dims.n_sharded(), E = dims.global_experts, W = dims.world_size,
              cc = chunk.extent(1), M = chunk.extent(2);
  std::vector<SendOp> sends;
  std::vector<RecvOp> recvs;
  for (Index e = 0; e < E; ++e) {
    const double* slab = chunk.data.data() + e * cc * M;
    for (Index q = 0; q < s; ++q)
      sends.push_back({e * s + q, std::vector<double>(slab, slab + cc * M)});
  }
  for (Index src = 0; src < W; ++src) recvs.push_back({src, cc * M});
  auto received = ctx.group(std::move(sends), std::move(recvs));
  Tensor out = Tensor::zeros({1, W * cc, M});
  for (Index src = 0; src < W; ++src)
    std::copy(received[static_cast<std::size_t>(src)].begin(),
              received[static_cast<std::size_t>(src)].end(), out.data.data() + src * cc * M);
  return out;
}

// P2 combine: every shard returns its partial rows; sources sum the s
// partials per expert. (1, W*cc, M) -> (E, cc, M).
Tensor combine_sharded_p2(RankCtx& ctx, const Tensor& partial, const Dims& dims, Index cc) {
  const Index s = dims.n_sharded(), E = dims.global_experts, W = dims.world_size,
              M = partial.extent(2);
  const Index e_mine = ctx.rank() / s;
  std::vector<SendOp> sends;
  std::vector<RecvOp> recvs;
  for (Index src = 0; src < W; ++src) {
    const double* block = partial.data.data() + src * cc * M;
    sends.push_back({src, std::vector<double>(block, block + cc * M)});
  }
  (void)e_mine;
  for (Index e = 0; e < E; ++e)
    for (Index q = 0; q < s; ++q) recvs.push_back({e * s + q, cc * M});
  auto received = ctx.group(std::move(sends), std::move(recvs));
  Tensor out = Tensor::zeros({E, cc, M});
  for (Index e = 0; e < E; ++e)
    for (Index q = 0; q < s; ++q) {
      const auto& buf = received[static_cast<std::size_t>(e * s + q)];
      double* dst = out.data.data() + e * cc * M;
      for (std::size_t i = 0; i < buf.size(); ++i) dst[i] += buf[i];
    }
  return out;
}

struct ExchangeOps {
  std::function<Tensor(RankCtx&, const Tensor&)> dispatch;
  std::function<Tensor(RankCtx&, const Tensor&, Index cc)> combine;
};

ExchangeOps make_exchange(const Dims& dims, ParallelChoice parallel, A2aAlgo algo) {
  ExchangeOps ops;
  if (!dims.is_sharded()) {
    ops.dispatch = [algo](RankCtx& ctx, const Tensor& t) {
      return flex_all2all(ctx, t, 1, 0, algo);
    };
    ops.combine = [algo](RankCtx& ctx, const Tensor& t, Index) {
      return flex_all2all(ctx, t, 0, 1, algo);
    };
  } else if (parallel == ParallelChoice::P1) {
    ops.dispatch = [dims](RankCtx& ctx, const Tensor& t) {
      return dispatch_sharded_p1(ctx, t, dims);
    };
    ops.combine = [dims](RankCtx& ctx, const Tensor& t, Index cc) {
      return combine_sharded_p1(ctx, t, dims, cc);
    };
  } else {
    ops.dispatch = [dims](RankCtx& ctx, const Tensor& t) {
      return dispatch_sharded_p2(ctx, t, dims);
    };
    ops.combine = [dims](RankCtx& ctx, const Tensor& t, Index cc) {
      return combine_sharded_p2(ctx, t, dims, cc);
    };
  }
  return ops;
}

bool uses_param_gather(const Dims& dims, ParallelChoice parallel) {
  return parallel == ParallelChoice::P1 || !dims.is_sharded();
}

}  // namespace

LayerState LayerState::init(const MoELayerConfig& config, const CostModelParams& cost, Rng& rng) {
  config.dims.validate();
  cost.validate();
  LayerState state;
  state.config = config;
  state.cost = cost;
  const Dims& d = config.dims;
  state.router.linear_weight.resize(d.model_dim, d.global_experts);
  for (Index i = 0; i < state.router.linear_weight.size(); ++i)
    state.router.linear_weight.data()[i] = rng.uniform(-1.0, 1.0);
  state.router.cosine_proj.resize(d.model_dim, kCosineProjDim);
  for (Index i = 0; i < state.router.cosine_proj.size(); ++i)
    state.router.cosine_proj.data()[i] = rng.uniform(-1.0, 1.0);
  state.router.cosine_experts.resize(d.global_experts, kCosineProjDim);
  for (Index i = 0; i < state.router.cosine_experts.size(); ++i)
    state.router.cosine_experts.data()[i] = rng.uniform(-1.0, 1.0);
  state.router.temperature = 1.0;
  state.experts = ExpertParams::random(d, rng);
  return state;
}

MatrixRM route_probabilities(const LayerState& state, const Tensor& x) {
  if (state.config.router == RouterKind::Linear)
    return gate_linear(x, state.router.linear_weight);
  return gate_cosine(x, state.router);
}

ForwardResult forward(LayerState& state, const Tensor& x) {
  const Dims& dims = state.config.dims;
  const Index W = dims.world_size, T_local = dims.tokens_per_step, M = dims.model_dim;
  if (x.rank() != 2 || x.extent(0) != W * T_local || x.extent(1) != M)
    throw std::invalid_argument("forward: expected (W*T, M) input");

  MatrixRM probs = route_probabilities(state, x);
  GateOutput gate =
      run_gating_blocked(probs, W, dims.top_k, state.config.capacity, dims, state.config.bpr);
  const Index dC = gate.capacity;
  const Index C = W * dC;
  const double f = capacity_to_factor(dC, dims);

  ParallelChoice parallel = state.config.parallel.fixed;
  if (state.config.parallel.adaptive)
    parallel = dims.is_sharded() ? select_parallelism(dims, C) : ParallelChoice::P1;
  Strategy strategy = state.config.strategy.adaptive ? get_strategy(state.memo, f)
                                                     : state.config.strategy.fixed;

  Fabric fabric({dims.world_size, dims.gpus_per_node}, state.cost);
  DispatchPlan plan{gate, dims.global_experts, M};
  ExchangeOps ex = make_exchange(dims, parallel, strategy.algo);
  const bool p1 = uses_param_gather(dims, parallel);

  ForwardResult result;
  result.y = Tensor::zeros({W * T_local, M});
  result.saved.gate = gate;
  result.saved.x = x;
  result.saved.strategy = strategy;
  result.saved.parallel = parallel;
  result.saved.expert_inputs.resize(static_cast<std::size_t>(W));
  result.saved.rank_weights.resize(static_cast<std::size_t>(W));
  result.saved.combined.resize(static_cast<std::size_t>(W));

  const ExpertParams& experts = state.experts;
  fabric.run([&](RankCtx& ctx) {
    const Index r = ctx.rank(), base = r * T_local;
    Tensor z = fast_encode_range(x, plan, base, base + T_local);
    std::vector<ExpertWeights> weights;
    if (p1) {
      weights = gather_computed_experts(ctx, experts);
    } else {
      const Index s = dims.n_sharded();
      weights = {experts.slices[static_cast<std::size_t>(r / s)]
                               [static_cast<std::size_t>(r % s)]};
    }
    auto chunks = partition_capacity(z, strategy.degree);
    const Index cc = chunks[0].extent(1);
    std::vector<Tensor> combined_chunks;
    auto& inputs = result.saved.expert_inputs[static_cast<std::size_t>(r)];
    for (auto& chunk : chunks) {
      Tensor disp = ex.dispatch(ctx, chunk);
      Tensor yk = expert_ffn(disp, weights, &ctx);
      combined_chunks.push_back(ex.combine(ctx, yk, cc));
      inputs.push_back(std::move(disp));
    }
    Tensor combined = merge_chunks(combined_chunks, dC);
    fast_decode_range(combined, plan, base, base + T_local, result.y);
    result.saved.rank_weights[static_cast<std::size_t>(r)] = std::move(weights);
    result.saved.combined[static_cast<std::size_t>(r)] = std::move(combined);
  });

  result.metrics.f = f;
  result.metrics.capacity = dC;
  result.metrics.strategy = strategy;
  result.metrics.parallel = parallel;
  result.metrics.sim_seconds = predict_step_seconds(fabric, dims, dC, strategy, parallel);
  result.metrics.comm_bytes =
      std::accumulate(fabric.stats().sent_bytes.begin(), fabric.stats().sent_bytes.end(), 0.0);
  result.metrics.drop_count = gate.drop_count();
  if (state.config.strategy.adaptive)
    optimize_strategy(state.memo, f, strategy, result.metrics.sim_seconds);
  return result;
}

LayerGrads backward(LayerState& state, const SavedForward& saved, const Tensor& dy) {
  const Dims& dims = state.config.dims;
  const Index W = dims.world_size, T_local = dims.tokens_per_step, M = dims.model_dim;
  const Index E = dims.global_experts, dC = saved.gate.capacity;
  if (dy.rank() != 2 || dy.extent(0) != W * T_local || dy.extent(1) != M)
    throw std::invalid_argument("backward: expected (W*T, M) gradient");

  Fabric fabric({dims.world_size, dims.gpus_per_node}, state.cost);
  DispatchPlan plan{saved.gate, E, M};
  ExchangeOps ex = make_exchange(dims, saved.parallel, saved.strategy.algo);
  const bool p1 = uses_param_gather(dims, saved.parallel);
  const ExpertParams& experts = state.experts;

  LayerGrads grads;
  grads.dx = Tensor::zeros({W * T_local, M});
  // Slice-layout gradient store; each rank writes only the slices it holds.
  std::vector<std::vector<ExpertWeights>> slice_grads(
      static_cast<std::size_t>(E),
      std::vector<ExpertWeights>(static_cast<std::size_t>(experts.n_slices)));

  fabric.run([&](RankCtx& ctx) {
    const Index r = ctx.rank(), base = r * T_local;
    auto dec = fast_decode_backward_range(dy, saved.combined[static_cast<std::size_t>(r)], plan,
                                          base, base + T_local);
    auto d_chunks = partition_capacity(dec.d_expert_out, saved.strategy.degree);
    const Index cc = d_chunks[0].extent(1);
    const auto& weights = saved.rank_weights[static_cast<std::size_t>(r)];
    std::vector<ExpertWeights> dw_acc(weights.size());
    for (std::size_t i = 0; i < weights.size(); ++i) {
      dw_acc[i].w1 = MatrixRM::Zero(weights[i].w1.rows(), weights[i].w1.cols());
      dw_acc[i].w2 = MatrixRM::Zero(weights[i].w2.rows(), weights[i].w2.cols());
    }
    std::vector<Tensor> d_enc_chunks;
    for (std::size_t i = 0; i < d_chunks.size(); ++i) {
      Tensor d_yk = ex.dispatch(ctx, d_chunks[i]);  // adjoint of the combine exchange
      FfnGrads g = expert_ffn_backward(saved.expert_inputs[static_cast<std::size_t>(r)][i],
                                       weights, d_yk, &ctx);
      for (std::size_t e = 0; e < dw_acc.size(); ++e) {
        dw_acc[e].w1 += g.dw[e].w1;
        dw_acc[e].w2 += g.dw[e].w2;
      }
      d_enc_chunks.push_back(ex.combine(ctx, g.dx, cc));  // adjoint of the dispatch exchange
    }
    Tensor d_encoded = merge_chunks(d_enc_chunks, dC);
    fast_encode_backward_range(d_encoded, plan, base, base + T_local, grads.dx);

    if (p1) {
      auto held = reduce_scatter_grads_p1(ctx, experts, dw_acc);
      auto where = experts.held_slices(r);
      for (std::size_t i = 0; i < where.size(); ++i)
        slice_grads[static_cast<std::size_t>(where[i].first)]
                   [static_cast<std::size_t>(where[i].second)] = std::move(held[i]);
    } else {
      const Index s = dims.n_sharded();
      slice_grads[static_cast<std::size_t>(r / s)][static_cast<std::size_t>(r % s)] =
          std::move(dw_acc[0]);
    }
  });

  // Reassemble full per-expert gradients from the slice layout.
  grads.d_experts.resize(static_cast<std::size_t>(E));
  const Index h = experts.slice_hidden;
  for (Index e = 0; e < E; ++e) {
    auto& full = grads.d_experts[static_cast<std::size_t>(e)];
    full.w1 = MatrixRM::Zero(M, dims.hidden_dim);
    full.w2 = MatrixRM::Zero(dims.hidden_dim, M);
    for (Index q = 0; q < experts.n_slices; ++q) {
      const auto& part = slice_grads[static_cast<std::size_t>(e)][static_cast<std::size_t>(q)];
      full.w1.middleCols(q * h, h) = part.w1;
      full.w2.middleRows(q * h, h) = part.w2;
    }
  }
  return grads;
}

Tensor frozen_plan_forward(const Tensor& x, const GateOutput& gate, const Dims& dims,
                           const std::vector<ExpertWeights>& experts) {
  const Index T = x.extent(0), M = dims.model_dim;
  Tensor y = Tensor::zeros({T, M});
  for (Index t = 0; t < T; ++t) {
    auto row = x.as_matrix().row(t);
    for (Index j = 0; j < gate.top_k(); ++j) {
      if (gate.locations(t, j) < 0) continue;
      const ExpertWeights& w = experts[static_cast<std::size_t>(gate.idxs(t, j))];
      Eigen::RowVectorXd hidden = (row * w.w1).cwiseMax(0.0);
      y.as_matrix().row(t) += gate.gates(t, j) * (hidden * w.w2);
    }
  }
  return y;
}

Tensor reference_forward(const LayerState& state, const Tensor& x) {
  const Dims& dims = state.config.dims;
  MatrixRM probs = route_probabilities(state, x);
  GateOutput gate = run_gating_blocked(probs, dims.world_size, dims.top_k, state.config.capacity,
                                       dims, state.config.bpr);
  std::vector<ExpertWeights> full;
  for (Index e = 0; e < dims.global_experts; ++e) full.push_back(state.experts.assemble(e));
  return frozen_plan_forward(x, gate, dims, full);
}

double predict_step_seconds(const Fabric& fabric, const Dims& dims, Index capacity,
                            const Strategy& strategy, ParallelChoice parallel) {
  const CostModelParams& p = fabric.params();
  const Index W = dims.world_size, E = dims.global_experts, M = dims.model_dim,
              V = dims.hidden_dim;
  const Index d = strategy.degree;
  const Index cc = (capacity + d - 1) / d;
  const double dE = fractional_local_experts(dims);

  double a2a;
  if (!dims.is_sharded()) {
    a2a = a2a_time(fabric, 8.0 * static_cast<double>(E * cc * M), strategy.algo);
  } else {
    const Index s = dims.n_sharded();
    std::vector<std::pair<Index, double>> msgs;
    const double bytes = 8.0 * static_cast<double>(cc * M);
    if (parallel == ParallelChoice::P1) {
      for (Index e = 0; e < E; ++e) msgs.emplace_back(e * s, bytes);
    } else {
      for (Index e = 0; e < E; ++e)
        for (Index q = 0; q < s; ++q) msgs.emplace_back(e * s + q, bytes);
    }
    a2a = fabric.symmetric_group_time(0, msgs);
  }
  const double rows = dE * static_cast<double>(W * cc);
  const double ffn =
      p.launch_overhead + 4.0 * rows * static_cast<double>(M) * static_cast<double>(V) /
                              p.flop_rate;
  OverlapResult overlap = simulate_overlapped_step(
      std::vector<ChunkCosts>(static_cast<std::size_t>(d), {a2a, ffn, a2a}), p.gamma);

  double gather = 0.0;
  if (uses_param_gather(dims, parallel)) {
    const double param_bytes = 8.0 * 2.0 * static_cast<double>(M) * static_cast<double>(V);
    std::vector<std::pair<Index, double>> msgs;
    if (!dims.is_sharded()) {
      const double per_peer = dE * param_bytes / static_cast<double>(W);
      for (Index q = 0; q < W; ++q) msgs.emplace_back(q, per_peer);
    } else {
      const Index s = dims.n_sharded();
      for (Index q = 0; q < s; ++q) msgs.emplace_back(q, param_bytes / static_cast<double>(s));
    }
    gather = fabric.symmetric_group_time(0, msgs);
  }
  return gather + overlap.makespan;
}

double predict_comm_bytes(const Dims& dims, Index capacity, ParallelChoice parallel) {
  const double dE = fractional_local_experts(dims);
  const double C = static_cast<double>(dims.world_size * capacity);
  const double token_bytes =
      8.0 * dE * C * static_cast<double>(dims.model_dim) *
      (parallel == ParallelChoice::P2 && dims.is_sharded()
           ? static_cast<double>(dims.n_sharded())
           : 1.0);
  double param_bytes = 0.0;
  if (uses_param_gather(dims, parallel)) {
    const double single =
        8.0 * 2.0 * static_cast<double>(dims.model_dim) * static_cast<double>(dims.hidden_dim);
    param_bytes = dims.is_sharded() ? single : dE * single;
  }
  return 2.0 * token_bytes + param_bytes;
}

}  // namespace moesim
