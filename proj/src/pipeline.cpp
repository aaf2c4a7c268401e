#include "moesim/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace moesim {

bool operator==(const Strategy& a, const Strategy& b) {
  return a.algo == b.algo && a.degree == b.degree;
}

bool operator<(const Strategy& a, const Strategy& b) {
  if (a.algo != b.algo) return a.algo == A2aAlgo::Linear;
  return a.degree < b.degree;
}

std::string to_string(const Strategy& s) {
  return std::string(to_string(s.algo)) + "x" + std::to_string(s.degree);
}

const std::vector<Strategy>& strategy_space() {
  static const std::vector<Strategy> space = [] {
    std::vector<Strategy> v;
    for (A2aAlgo algo : {A2aAlgo::Linear, A2aAlgo::TwoDH})
      for (Index d : {1, 2, 4, 8}) v.push_back({algo, d});
    return v;
  }();
  return space;
}

std::vector<Tensor> partition_capacity(const Tensor& x, Index degree) {
  if (degree < 1) throw std::invalid_argument("partition_capacity: degree must be >= 1");
  if (x.rank() != 3) throw std::invalid_argument("partition_capacity: rank-3 tensor expected");
  const Index E = x.extent(0), C = x.extent(1), M = x.extent(2);
  const Index chunk_c = (C + degree - 1) / degree;
  std::vector<Tensor> chunks;
  chunks.reserve(static_cast<std::size_t>(degree));
  for (Index i = 0; i < degree; ++i) {
    Tensor t = Tensor::zeros({E, chunk_c, M});
    for (Index e = 0; e < E; ++e)
      for (Index c = 0; c < chunk_c; ++c) {
        Index src = i * chunk_c + c;
        if (src >= C) break;
        std::memcpy(&t.at(e, c, 0), &x.at(e, src, 0), static_cast<std::size_t>(M) * sizeof(double));
      }
    chunks.push_back(std::move(t));
  }
  return chunks;
}

Tensor merge_chunks(const std::vector<Tensor>& chunks, Index original_capacity) {
  if (chunks.empty()) throw std::invalid_argument("merge_chunks: no chunks");
  const Index E = chunks[0].extent(0), chunk_c = chunks[0].extent(1), M = chunks[0].extent(2);
  Tensor out = Tensor::zeros({E, original_capacity, M});
  for (std::size_t i = 0; i < chunks.size(); ++i)
    for (Index e = 0; e < E; ++e)
      for (Index c = 0; c < chunk_c; ++c) {
        Index dst = static_cast<Index>(i) * chunk_c + c;
        if (dst >= original_capacity) break;
        std::memcpy(&out.at(e, dst, 0), &chunks[i].at(e, c, 0),
                    static_cast<std::size_t>(M) * sizeof(double));
      }
  return out;
}

std::string timeline_csv(const Timeline& timeline, Index step) {
  std::ostringstream os;
  os << "step,chunk,stream,phase,start_s,end_s\n";
  os.precision(12);
  for (const auto& iv : timeline.intervals)
    os << step << ',' << iv.chunk << ',' << iv.stream << ',' << iv.phase << ',' << iv.start << ','
       << iv.end << '\n';
  return os.str();
}

namespace {

struct QueueTask {
  Index chunk;
  int phase;  // 0 = a2a1, 1 = ffn, 2 = a2a2
  double cost;
};

const char* phase_name(int phase) { return phase == 0 ? "a2a1" : (phase == 1 ? "ffn" : "a2a2"); }

}  // namespace

OverlapResult simulate_overlapped_step(const std::vector<ChunkCosts>& costs, double gamma) {
  if (costs.empty()) throw std::invalid_argument("simulate_overlapped_step: no chunks");
  if (gamma < 1.0) throw std::invalid_argument("simulate_overlapped_step: gamma must be >= 1");
  const Index d = static_cast<Index>(costs.size());

  std::vector<QueueTask> comm_q, compute_q;
  for (Index c = 0; c < d; ++c) comm_q.push_back({c, 0, costs[static_cast<std::size_t>(c)].a2a1});
  for (Index c = 0; c < d; ++c)
    compute_q.push_back({c, 1, costs[static_cast<std::size_t>(c)].ffn});
  for (Index c = 0; c < d; ++c) comm_q.push_back({c, 2, costs[static_cast<std::size_t>(c)].a2a2});

  // done[phase][chunk]
  std::vector<std::vector<bool>> done(3, std::vector<bool>(static_cast<std::size_t>(d), false));
  auto dep_ready = [&](const QueueTask& t) -> bool {
    if (t.phase == 0) return true;
    return done[static_cast<std::size_t>(t.phase - 1)][static_cast<std::size_t>(t.chunk)];
  };

  struct Running {
    bool busy = false;
    QueueTask task{0, 0, 0.0};
    double remaining = 0.0;
    double start = 0.0;
  };
  Running comm, compute;
  std::size_t comm_head = 0, compute_head = 0;
  double now = 0.0;
  OverlapResult result;

  auto finish = [&](Running& r, const char* stream) {
    done[static_cast<std::size_t>(r.task.phase)][static_cast<std::size_t>(r.task.chunk)] = true;
    result.timeline.intervals.push_back(
        {r.task.chunk, stream, phase_name(r.task.phase), r.start, now});
    r.busy = false;
  };

  while (comm_head < comm_q.size() || compute_head < compute_q.size() || comm.busy ||
         compute.busy) {
    // Start whatever is ready; zero-cost tasks complete immediately, which can
    // unblock further starts in the same instant.
    bool progressed = true;
    while (progressed) {
      progressed = false;
      if (!comm.busy && comm_head < comm_q.size() && dep_ready(comm_q[comm_head])) {
        comm = {true, comm_q[comm_head++], 0.0, now};
        comm.remaining = comm.task.cost;
        progressed = true;
        if (comm.remaining <= 0.0) finish(comm, "comm");
      }
      if (!compute.busy && compute_head < compute_q.size() && dep_ready(compute_q[compute_head])) {
        compute = {true, compute_q[compute_head++], 0.0, now};
        compute.remaining = compute.task.cost;
        progressed = true;
        if (compute.remaining <= 0.0) finish(compute, "compute");
      }
    }
    if (!comm.busy && !compute.busy) {
      if (comm_head < comm_q.size() || compute_head < compute_q.size())
        throw std::logic_error("simulate_overlapped_step: scheduler stalled");
      break;
    }
    // Contention: both streams active share the device at rate 1/gamma.
    double rate = (comm.busy && compute.busy) ? 1.0 / gamma : 1.0;
    double dt = std::numeric_limits<double>::infinity();
    if (comm.busy) dt = std::min(dt, comm.remaining / rate);
    if (compute.busy) dt = std::min(dt, compute.remaining / rate);
    now += dt;
    if (comm.busy) {
      comm.remaining -= dt * rate;
      if (comm.remaining <= 1e-15 * comm.task.cost) finish(comm, "comm");
    }
    if (compute.busy) {
      compute.remaining -= dt * rate;
      if (compute.remaining <= 1e-15 * compute.task.cost) finish(compute, "compute");
    }
  }
  result.makespan = now;
  return result;
}

namespace {

StrategyMemo::Bucket* find_bucket(StrategyMemo& memo, double f) {
  for (auto& b : memo.buckets)
    if (std::find(b.members.begin(), b.members.end(), f) != b.members.end()) return &b;
  return nullptr;
}

}  // namespace

void recompute_buckets(StrategyMemo& memo, double f) {
  if (!(f > 0.0)) throw std::invalid_argument("recompute_buckets: f must be positive");
  memo.per_f.try_emplace(f);  // ordered map keeps the known-f list sorted
  memo.buckets.clear();
  StrategyMemo::Bucket* current = nullptr;
  for (const auto& [fv, table] : memo.per_f) {
    if (!current || fv - current->start > memo.bucket_length) {
      memo.buckets.push_back({fv, {}, {}});
      current = &memo.buckets.back();
    }
    current->members.push_back(fv);
    // Normalize member times to the bucket's lowest f; later members
    // overwrite earlier ones for shared keys (deterministic: ascending f).
    for (const auto& [strat, t] : table)
      current->table[strat] = t * current->start / fv;
  }
}

Strategy get_strategy(StrategyMemo& memo, double f) {
  if (memo.per_f.find(f) == memo.per_f.end()) recompute_buckets(memo, f);
  const auto& space = strategy_space();
  auto argmin = [&](const std::map<Strategy, double>& table) {
    Strategy best = space.front();
    double best_t = std::numeric_limits<double>::infinity();
    for (const Strategy& s : space) {  // exploration order breaks ties
      auto it = table.find(s);
      if (it != table.end() && it->second < best_t) {
        best = s;
        best_t = it->second;
      }
    }
    return best;
  };
  const auto& own = memo.per_f[f];
  if (own.size() == space.size()) return argmin(own);
  StrategyMemo::Bucket* bucket = find_bucket(memo, f);
  if (!bucket) throw std::logic_error("get_strategy: f missing from every bucket");
  if (bucket->table.size() == space.size()) return argmin(bucket->table);
  for (const Strategy& s : space)
    if (bucket->table.find(s) == bucket->table.end()) return s;
  return argmin(bucket->table);
}

void optimize_strategy(StrategyMemo& memo, double f, const Strategy& strategy, double seconds) {
  if (memo.per_f.find(f) == memo.per_f.end()) recompute_buckets(memo, f);
  memo.per_f[f][strategy] = seconds;
  StrategyMemo::Bucket* bucket = find_bucket(memo, f);
  if (!bucket) throw std::logic_error("optimize_strategy: f missing from every bucket");
  bucket->table[strategy] = seconds * bucket->start / f;
}

std::pair<Strategy, double> moe_step_and_optimize(StrategyMemo& memo, double f,
                                                  const StepExecutor& executor) {
  Strategy s = get_strategy(memo, f);
  double t = executor(s);
  optimize_strategy(memo, f, s, t);
  return {s, t};
}

}  // namespace moesim
