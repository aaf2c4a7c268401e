#include "moesim/parallelism.hpp"

#include <algorithm>

namespace moesim {

const char* to_string(ParallelChoice choice) { return choice == ParallelChoice::P1 ? "p1" : "p2"; }

namespace {

// Flat slice layout: w1 block row-major, then w2 block row-major.
std::vector<double> pack_weights(const ExpertWeights& w) {
  std::vector<double> buf(static_cast<std::size_t>(w.w1.size() + w.w2.size()));
  std::copy(w.w1.data(), w.w1.data() + w.w1.size(), buf.begin());
  std::copy(w.w2.data(), w.w2.data() + w.w2.size(), buf.begin() + w.w1.size());
  return buf;
}

ExpertWeights unpack_weights(const double* buf, Index m, Index h) {
  ExpertWeights w;
  w.w1 = ConstMatMap(buf, m, h);
  w.w2 = ConstMatMap(buf + m * h, h, m);
  return w;
}

Index slice_elems(const ExpertParams& p) {
  return 2 * p.dims.model_dim * p.slice_hidden;
}

// Experts this rank runs: its own block under per-rank placement, its single
// shared expert under sharded placement.
std::pair<Index, Index> computed_range(const Dims& dims, Index rank) {
  if (dims.is_sharded()) {
    Index e = rank / dims.n_sharded();
    return {e, e + 1};
  }
  Index x = dims.local_experts();
  return {rank * x, (rank + 1) * x};
}

}  // namespace

ExpertParams ExpertParams::from_full(const Dims& dims, std::vector<ExpertWeights> full) {
  dims.validate();
  ExpertParams p;
  p.dims = dims;
  p.n_slices = dims.is_sharded() ? dims.n_sharded() : dims.world_size;
  if (dims.hidden_dim % p.n_slices != 0)
    throw std::invalid_argument("ExpertParams: hidden dim must divide into parameter slices");
  p.slice_hidden = dims.hidden_dim / p.n_slices;
  if (static_cast<Index>(full.size()) != dims.global_experts)
    throw std::invalid_argument("ExpertParams: one weight pair per global expert required");
  p.slices.resize(full.size());
  for (std::size_t e = 0; e < full.size(); ++e) {
    const ExpertWeights& w = full[e];
    if (w.w1.rows() != dims.model_dim || w.w1.cols() != dims.hidden_dim ||
        w.w2.rows() != dims.hidden_dim || w.w2.cols() != dims.model_dim)
      throw std::invalid_argument("ExpertParams: weight shape mismatch");
    p.slices[e].resize(static_cast<std::size_t>(p.n_slices));
    for (Index q = 0; q < p.n_slices; ++q) {
      auto& s = p.slices[e][static_cast<std::size_t>(q)];
      s.w1 = w.w1.middleCols(q * p.slice_hidden, p.slice_hidden);
      s.w2 = w.w2.middleRows(q * p.slice_hidden, p.slice_hidden);
    }
  }
  return p;
}

ExpertParams ExpertParams::random(const Dims& dims, Rng& rng, double scale) {
  std::vector<ExpertWeights> full(static_cast<std::size_t>(dims.global_experts));
  for (auto& w : full) {
    w.w1.resize(dims.model_dim, dims.hidden_dim);
    w.w2.resize(dims.hidden_dim, dims.model_dim);
    for (Index i = 0; i < w.w1.size(); ++i) w.w1.data()[i] = rng.uniform(-scale, scale);
    for (Index i = 0; i < w.w2.size(); ++i) w.w2.data()[i] = rng.uniform(-scale, scale);
  }
  return from_full(dims, std::move(full));
}

ExpertWeights ExpertParams::assemble(Index expert) const {
  const auto& parts = slices[static_cast<std::size_t>(expert)];
  ExpertWeights w;
  w.w1.resize(dims.model_dim, dims.hidden_dim);
  w.w2.resize(dims.hidden_dim, dims.model_dim);
  for (Index q = 0; q < n_slices; ++q) {
    w.w1.middleCols(q * slice_hidden, slice_hidden) = parts[static_cast<std::size_t>(q)].w1;
    w.w2.middleRows(q * slice_hidden, slice_hidden) = parts[static_cast<std::size_t>(q)].w2;
  }
  return w;
}

std::vector<std::pair<Index, Index>> ExpertParams::held_slices(Index rank) const {
  std::vector<std::pair<Index, Index>> held;
  if (dims.is_sharded()) {
    Index s = dims.n_sharded();
    held.emplace_back(rank / s, rank % s);
  } else {
    for (Index e = 0; e < dims.global_experts; ++e) held.emplace_back(e, rank);
  }
  return held;
}

Tensor expert_ffn(const Tensor& x, const std::vector<ExpertWeights>& weights, RankCtx* ctx) {
  if (x.rank() != 3 || x.extent(0) != static_cast<Index>(weights.size()))
    throw std::invalid_argument("expert_ffn: need one weight pair per leading slot");
  const Index n = x.extent(0), rows = x.extent(1), M = x.extent(2);
  Tensor y = Tensor::zeros(x.shape);
  double flops = 0.0;
  for (Index e = 0; e < n; ++e) {
    const ExpertWeights& w = weights[static_cast<std::size_t>(e)];
    if (w.w1.rows() != M || w.w2.cols() != M || w.w1.cols() != w.w2.rows())
      throw std::invalid_argument("expert_ffn: weight shape mismatch");
    ConstMatMap X(x.data.data() + e * rows * M, rows, M);
    MatrixRM h = (X * w.w1).cwiseMax(0.0);
    MatMap(y.data.data() + e * rows * M, rows, M) = h * w.w2;
    flops += 4.0 * static_cast<double>(rows) * static_cast<double>(M) *
             static_cast<double>(w.w1.cols());
  }
  if (ctx) ctx->charge_compute_flops(flops);
  return y;
}

FfnGrads expert_ffn_backward(const Tensor& x, const std::vector<ExpertWeights>& weights,
                             const Tensor& dy, RankCtx* ctx) {
  if (!x.same_shape(dy)) throw std::invalid_argument("expert_ffn_backward: shape mismatch");
  const Index n = x.extent(0), rows = x.extent(1), M = x.extent(2);
  FfnGrads g;
  g.dx = Tensor::zeros(x.shape);
  g.dw.resize(static_cast<std::size_t>(n));
  double flops = 0.0;
  for (Index e = 0; e < n; ++e) {
    const ExpertWeights& w = weights[static_cast<std::size_t>(e)];
    ConstMatMap X(x.data.data() + e * rows * M, rows, M);
    ConstMatMap dY(dy.data.data() + e * rows * M, rows, M);
    MatrixRM h = X * w.w1;
    MatrixRM a = h.cwiseMax(0.0);
    MatrixRM dh = (dY * w.w2.transpose()).cwiseProduct(
        (h.array() > 0.0).cast<double>().matrix());
    MatMap(g.dx.data.data() + e * rows * M, rows, M) = dh * w.w1.transpose();
    g.dw[static_cast<std::size_t>(e)].w1 = X.transpose() * dh;
    g.dw[static_cast<std::size_t>(e)].w2 = a.transpose() * dY;
    flops += 8.0 * static_cast<double>(rows) * static_cast<double>(M) *
             static_cast<double>(w.w1.cols());
  }
  if (ctx) ctx->charge_compute_flops(flops);
  return g;
}

std::vector<ExpertWeights> gather_computed_experts(RankCtx& ctx, const ExpertParams& params) {
  const Dims& dims = params.dims;
  const Index M = dims.model_dim, h = params.slice_hidden, elems = slice_elems(params);
  std::vector<SendOp> sends;
  std::vector<RecvOp> recvs;

  if (dims.is_sharded()) {
    // Gather the s slices of this rank's expert from its sharing group.
    const Index s = dims.n_sharded();
    const Index e = ctx.rank() / s, base = e * s, slot = ctx.rank() % s;
    std::vector<double> mine = pack_weights(params.slices[static_cast<std::size_t>(e)]
                                                         [static_cast<std::size_t>(slot)]);
    for (Index q = 0; q < s; ++q) {
      sends.push_back({base + q, mine});
      recvs.push_back({base + q, elems});
    }
    auto received = ctx.group(std::move(sends), std::move(recvs));
    ExpertWeights full;
    full.w1.resize(M, dims.hidden_dim);
    full.w2.resize(dims.hidden_dim, M);
    for (Index q = 0; q < s; ++q) {
      ExpertWeights part = unpack_weights(received[static_cast<std::size_t>(q)].data(), M, h);
      full.w1.middleCols(q * h, h) = part.w1;
      full.w2.middleRows(q * h, h) = part.w2;
    }
    return {std::move(full)};
  }

  // Per-rank placement: slice q of every expert lives on rank q; each rank
  // contributes its slice of every destination's experts in one exchange.
  const Index W = dims.world_size, x = dims.local_experts();
  for (Index dst = 0; dst < W; ++dst) {
    auto [lo, hi] = computed_range(dims, dst);
    std::vector<double> payload;
    payload.reserve(static_cast<std::size_t>((hi - lo) * elems));
    for (Index e = lo; e < hi; ++e) {
      auto part = pack_weights(params.slices[static_cast<std::size_t>(e)]
                                            [static_cast<std::size_t>(ctx.rank())]);
      payload.insert(payload.end(), part.begin(), part.end());
    }
    sends.push_back({dst, std::move(payload)});
    recvs.push_back({dst, x * elems});
  }
  auto received = ctx.group(std::move(sends), std::move(recvs));
  std::vector<ExpertWeights> full(static_cast<std::size_t>(x));
  for (Index i = 0; i < x; ++i) {
    full[static_cast<std::size_t>(i)].w1.resize(M, dims.hidden_dim);
    full[static_cast<std::size_t>(i)].w2.resize(dims.hidden_dim, M);
  }
  for (Index q = 0; q < W; ++q)
    for (Index i = 0; i < x; ++i) {
      ExpertWeights part =
          unpack_weights(received[static_cast<std::size_t>(q)].data() + i * elems, M, h);
      full[static_cast<std::size_t>(i)].w1.middleCols(q * h, h) = part.w1;
      full[static_cast<std::size_t>(i)].w2.middleRows(q * h, h) = part.w2;
    }
  return full;
}

Tensor run_expert_p1(RankCtx& ctx, const Tensor& tokens, const ExpertParams& params,
                     ExpertRunState* saved) {
  std::vector<ExpertWeights> weights = gather_computed_experts(ctx, params);
  Tensor y = expert_ffn(tokens, weights, &ctx);
  if (saved) {
    saved->weights = std::move(weights);
    saved->input = tokens;
  }
  return y;
}

Tensor run_expert_p2_partial(RankCtx& ctx, const Tensor& tokens, const ExpertParams& params,
                             ExpertRunState* saved) {
  const Dims& dims = params.dims;
  if (!dims.is_sharded()) return run_expert_p1(ctx, tokens, params, saved);
  const Index s = dims.n_sharded();
  const Index e = ctx.rank() / s, slot = ctx.rank() % s;
  std::vector<ExpertWeights> weights = {
      params.slices[static_cast<std::size_t>(e)][static_cast<std::size_t>(slot)]};
  Tensor y = expert_ffn(tokens, weights, &ctx);
  if (saved) {
    saved->weights = std::move(weights);
    saved->input = tokens;
  }
  return y;
}

std::vector<ExpertWeights> reduce_scatter_grads_p1(RankCtx& ctx, const ExpertParams& params,
                                                   const std::vector<ExpertWeights>& dw_full) {
  const Dims& dims = params.dims;
  const Index M = dims.model_dim, h = params.slice_hidden, elems = slice_elems(params);
  auto slice_of = [&](const ExpertWeights& w, Index q) {
    ExpertWeights part;
    part.w1 = w.w1.middleCols(q * h, h);
    part.w2 = w.w2.middleRows(q * h, h);
    return pack_weights(part);
  };
  std::vector<SendOp> sends;
  std::vector<RecvOp> recvs;

  if (dims.is_sharded()) {
    // Each replica slices its partial gradient; contributions for the same
    // slice are summed on the holder.
    const Index s = dims.n_sharded();
    const Index base = (ctx.rank() / s) * s;
    for (Index q = 0; q < s; ++q) {
      sends.push_back({base + q, slice_of(dw_full.at(0), q)});
      recvs.push_back({base + q, elems});
    }
    auto received = ctx.group(std::move(sends), std::move(recvs));
    std::vector<double> sum(static_cast<std::size_t>(elems), 0.0);
    for (const auto& part : received)
      for (std::size_t i = 0; i < part.size(); ++i) sum[i] += part[i];
    return {unpack_weights(sum.data(), M, h)};
  }

  // Per-rank placement: one contributor per expert; route slice q of every
  // computed expert's gradient to rank q.
  const Index W = dims.world_size, x = dims.local_experts();
  for (Index dst = 0; dst < W; ++dst) {
    std::vector<double> payload;
    payload.reserve(static_cast<std::size_t>(x * elems));
    for (Index i = 0; i < x; ++i) {
      auto part = slice_of(dw_full.at(static_cast<std::size_t>(i)), dst);
      payload.insert(payload.end(), part.begin(), part.end());
    }
    sends.push_back({dst, std::move(payload)});
    recvs.push_back({dst, x * elems});
  }
  auto received = ctx.group(std::move(sends), std::move(recvs));
  std::vector<ExpertWeights> out(static_cast<std::size_t>(dims.global_experts));
  for (Index src = 0; src < W; ++src) {
    auto [lo, hi] = computed_range(dims, src);
    for (Index e = lo; e < hi; ++e)
      out[static_cast<std::size_t>(e)] = unpack_weights(
          received[static_cast<std::size_t>(src)].data() + (e - lo) * elems, M, h);
  }
  return out;
}

double comm_cost_p1(double local_experts, Index gathered_capacity, Index model_dim,
                    double param_bytes) {
  return 8.0 * local_experts * static_cast<double>(gathered_capacity) *
             static_cast<double>(model_dim) +
         param_bytes;
}

double comm_cost_p2(double local_experts, Index gathered_capacity, Index model_dim,
                    Index n_sharded) {
  if (n_sharded < 1) throw std::invalid_argument("comm_cost_p2: n_sharded must be >= 1");
  return 8.0 * static_cast<double>(n_sharded) * local_experts *
         static_cast<double>(gathered_capacity) * static_cast<double>(model_dim);
}

ParallelChoice select_parallelism(double local_experts, Index gathered_capacity, Index model_dim,
                                  double param_bytes, Index n_sharded) {
  double p1 = comm_cost_p1(local_experts, gathered_capacity, model_dim, param_bytes);
  double p2 = comm_cost_p2(local_experts, gathered_capacity, model_dim, n_sharded);
  return p1 <= p2 ? ParallelChoice::P1 : ParallelChoice::P2;
}

double fractional_local_experts(const Dims& dims) {
  if (dims.is_sharded()) return 1.0 / static_cast<double>(dims.n_sharded());
  return static_cast<double>(dims.local_experts());
}

ParallelChoice select_parallelism(const Dims& dims, Index gathered_capacity) {
  double param_bytes =
      8.0 * 2.0 * static_cast<double>(dims.model_dim) * static_cast<double>(dims.hidden_dim);
  return select_parallelism(fractional_local_experts(dims), gathered_capacity, dims.model_dim,
                            param_bytes, dims.n_sharded());
}

}  // namespace moesim
