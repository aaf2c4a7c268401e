#include <algorithm>

#include "doctest.h"
#include "moesim/pipeline.hpp"

using namespace moesim;

TEST_CASE("strategy space enumerates linear before hierarchical, ascending degree") {
  const auto& space = strategy_space();
  REQUIRE(space.size() == 8);
  CHECK(space.front() == Strategy{A2aAlgo::Linear, 1});
  CHECK(space.back() == Strategy{A2aAlgo::TwoDH, 8});
  CHECK(std::is_sorted(space.begin(), space.end()));
  CHECK(to_string(space[1]) == "linearx2");
  CHECK(to_string(space[4]) == "2dhx1");
}

TEST_CASE("capacity partition produces exactly d padded chunks") {
  Rng rng(301);
  Tensor x = Tensor::random({2, 3, 4}, rng);
  auto chunks = partition_capacity(x, 2);
  REQUIRE(chunks.size() == 2);
  for (auto& c : chunks) CHECK(c.shape == std::vector<Index>{2, 2, 4});
  for (Index e = 0; e < 2; ++e)
    for (Index m = 0; m < 4; ++m) {
      CHECK(chunks[0].at(e, 0, m) == x.at(e, 0, m));
      CHECK(chunks[0].at(e, 1, m) == x.at(e, 1, m));
      CHECK(chunks[1].at(e, 0, m) == x.at(e, 2, m));
      CHECK(chunks[1].at(e, 1, m) == 0.0);  // tail padding
    }
  CHECK(max_abs_diff(merge_chunks(chunks, 3), x) == 0.0);
  // degree exceeding capacity still yields d chunks
  auto many = partition_capacity(x, 8);
  CHECK(many.size() == 8);
  CHECK(max_abs_diff(merge_chunks(many, 3), x) == 0.0);
  CHECK_THROWS_AS(partition_capacity(x, 0), std::invalid_argument);
}

TEST_CASE("overlap scheduler handles the serial degree-1 case") {
  // one chunk: a2a1 then ffn then a2a2, no overlap possible
  OverlapResult r = simulate_overlapped_step({{1.0, 2.0, 3.0}}, 1.5);
  CHECK(r.makespan == doctest::Approx(6.0));
  REQUIRE(r.timeline.intervals.size() == 3);
  CHECK(r.timeline.intervals[0].phase == "a2a1");
  CHECK(r.timeline.intervals[1].phase == "ffn");
  CHECK(r.timeline.intervals[2].phase == "a2a2");
  CHECK(r.timeline.intervals[2].end == doctest::Approx(6.0));
}

TEST_CASE("overlap scheduler pipelines two chunks") {
  // all unit costs, no contention: comm runs a1(0) a1(1) a2(0) a2(1) while
  // compute fills the gaps -> makespan 4, one unit saved over serial 6.
  std::vector<ChunkCosts> costs = {{1.0, 1.0, 1.0}, {1.0, 1.0, 1.0}};
  OverlapResult r = simulate_overlapped_step(costs, 1.0);
  CHECK(r.makespan == doctest::Approx(4.0));
  // contention slows concurrent intervals down
  OverlapResult slow = simulate_overlapped_step(costs, 2.0);
  CHECK(slow.makespan > 4.0);
  CHECK(slow.makespan <= doctest::Approx(6.0 * 2.0));
}

TEST_CASE("overlap makespan is bounded by stream totals and the serial sum") {
  Rng rng(302);
  for (int i = 0; i < 50; ++i) {
    Index d = rng.uniform_index(1, 6);
    std::vector<ChunkCosts> costs;
    double comm = 0.0, compute = 0.0, serial = 0.0;
    for (Index c = 0; c < d; ++c) {
      ChunkCosts cc{rng.uniform(), rng.uniform(), rng.uniform()};
      if (i % 7 == 0) cc.ffn = 0.0;  // exercise zero-cost tasks
      comm += cc.a2a1 + cc.a2a2;
      compute += cc.ffn;
      serial += cc.a2a1 + cc.ffn + cc.a2a2;
      costs.push_back(cc);
    }
    OverlapResult r = simulate_overlapped_step(costs, 1.0);
    CHECK(r.makespan >= std::max(comm, compute) - 1e-9);
    CHECK(r.makespan <= serial + 1e-9);
    // intervals never overlap within a stream
    double comm_end = 0.0, compute_end = 0.0;
    for (auto& iv : r.timeline.intervals) {
      double& prev = iv.stream == "comm" ? comm_end : compute_end;
      CHECK(iv.start >= prev - 1e-12);
      prev = iv.end;
    }
  }
  CHECK_THROWS_AS(simulate_overlapped_step({}, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(simulate_overlapped_step({{1, 1, 1}}, 0.5), std::invalid_argument);
}

TEST_CASE("timeline csv is stable") {
  OverlapResult r = simulate_overlapped_step({{1.0, 1.0, 1.0}}, 1.0);
  std::string csv = timeline_csv(r.timeline, 7);
  CHECK(csv.substr(0, csv.find('\n')) == "step,chunk,stream,phase,start_s,end_s");
  CHECK(csv.find("7,0,comm,a2a1,0,1") != std::string::npos);
  CHECK(csv.find("7,0,compute,ffn,1,2") != std::string::npos);
}

TEST_CASE("nearby capacity factors share a bucket, distant ones do not") {
  StrategyMemo memo;  // bucket_length 0.5
  recompute_buckets(memo, 1.0);
  recompute_buckets(memo, 1.1);
  recompute_buckets(memo, 4.0);
  REQUIRE(memo.buckets.size() == 2);
  CHECK(memo.buckets[0].members == std::vector<double>{1.0, 1.1});
  CHECK(memo.buckets[1].members == std::vector<double>{4.0});
  // greedy left-to-right: 1.0..1.5 absorbs, 1.6 starts anew even though it is
  // within 0.5 of 1.4
  StrategyMemo chain;
  for (double f : {1.0, 1.4, 1.6}) recompute_buckets(chain, f);
  REQUIRE(chain.buckets.size() == 2);
  CHECK(chain.buckets[0].members == std::vector<double>{1.0, 1.4});
  CHECK(chain.buckets[1].members == std::vector<double>{1.6});
}

TEST_CASE("bucket entries are normalized to the lowest member factor") {
  StrategyMemo memo;
  Strategy s{A2aAlgo::Linear, 1};
  optimize_strategy(memo, 2.0, s, 10.0);
  optimize_strategy(memo, 2.4, s, 24.0);  // same bucket, start 2.0
  auto* bucket = &memo.buckets[0];
  REQUIRE(bucket->members.size() == 2);
  // last write wins: 24.0 * 2.0 / 2.4 = 20.0
  CHECK(bucket->table[s] == doctest::Approx(20.0));
  CHECK(memo.per_f[2.0][s] == 10.0);  // raw measurement untouched
  CHECK(memo.per_f[2.4][s] == 24.0);
}

TEST_CASE("strategy search explores in order then exploits the argmin") {
  StrategyMemo memo;
  const auto& space = strategy_space();
  double f = 1.0;
  // executor: strategy i costs 10 - i, so the last explored is the best
  std::vector<Strategy> tried;
  for (std::size_t step = 0; step < space.size() + 3; ++step) {
    auto [s, t] = moe_step_and_optimize(memo, f, [&](const Strategy& s) {
      tried.push_back(s);
      auto it = std::find(space.begin(), space.end(), s);
      return 10.0 - double(it - space.begin());
    });
    (void)t;
  }
  // first 8 steps walk the space in exploration order
  for (std::size_t i = 0; i < space.size(); ++i) CHECK(tried[i] == space[i]);
  // afterwards it exploits the cheapest strategy
  for (std::size_t i = space.size(); i < tried.size(); ++i) CHECK(tried[i] == space.back());
}

TEST_CASE("bucket sharing lets nearby factors skip re-exploration") {
  StrategyMemo memo;
  const auto& space = strategy_space();
  // fully explore f = 1.0; 2dhx4 is made the winner
  for (const Strategy& s : space)
    optimize_strategy(memo, 1.0, s, s == Strategy{A2aAlgo::TwoDH, 4} ? 1.0 : 5.0);
  // f = 1.2 shares the bucket: no own measurements, but the bucket table is
  // complete, so it exploits immediately
  CHECK(get_strategy(memo, 1.2) == Strategy{A2aAlgo::TwoDH, 4});
  // a distant f starts exploration from scratch
  CHECK(get_strategy(memo, 3.0) == space.front());
}
