#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "moesim/core.hpp"

namespace moesim {

struct Topology {
  Index world_size = 1;
  Index gpus_per_node = 1;

  Index n_nodes() const { return world_size / gpus_per_node; }
  Index node_of(Index rank) const { return rank / gpus_per_node; }
  Index local_rank(Index rank) const { return rank % gpus_per_node; }
  bool same_node(Index a, Index b) const { return node_of(a) == node_of(b); }
  void validate() const {
    if (world_size < 1 || gpus_per_node < 1 || world_size % gpus_per_node != 0)
      throw std::invalid_argument("Topology: W must be a positive multiple of m");
  }
};

// Alpha-beta link model with a saturating efficiency curve.
struct LinkParams {
  double alpha = 0.0;      // seconds
  double beta = 1.0;       // bytes/second at full efficiency
  double eta_min = 0.05;   // efficiency floor for tiny messages
  double b_half = 1 << 19; // bytes at which efficiency reaches the midpoint
};

struct CostModelParams {
  LinkParams intra{2e-6, 200e9, 0.05, 64.0 * 1024};
  LinkParams inter{5e-6, 25e9, 0.05, 512.0 * 1024};
  double flop_rate = 100e12;         // flops/second
  double launch_overhead = 1e-6;     // seconds per kernel
  double memcpy_bandwidth = 100e9;   // bytes/second for local stride copies
  double gamma = 1.2;                // concurrent comm+compute interference

  void validate() const;
  static CostModelParams from_json_text(const std::string& text);
  std::string to_json_text() const;
};

double link_efficiency(const LinkParams& link, double bytes);
double p2p_cost(double bytes, const LinkParams& link);

// Per-rank virtual time plus per-stream totals.
struct SimClock {
  std::vector<double> rank_time;
  std::vector<double> comm_seconds;
  std::vector<double> compute_seconds;
};

struct FabricStats {
  std::vector<double> sent_bytes;  // per rank, self messages included
  std::vector<double> recv_bytes;
  std::vector<Index> messages;     // per rank, sends posted (self included)
  // bytes sent per (src, dst) pair, for conservation checks
  std::map<std::pair<Index, Index>, double> pair_bytes;
};

class Fabric;

struct SendOp {
  Index peer;
  std::vector<double> payload;
};
struct RecvOp {
  Index peer;
  Index count;
};

// Per-rank execution context. Valid only inside Fabric::run, on the owning
// rank's thread.
class RankCtx {
 public:
  Index rank() const { return rank_; }
  const Topology& topology() const;
  const CostModelParams& params() const;
  Index world_size() const { return topology().world_size; }

  void charge_compute_flops(double flops);
  void charge_compute_seconds(double seconds);
  // Local strided copy of `bytes`; charged to the comm stream (it is part of
  // a collective's critical path).
  void charge_memcpy(double bytes);

  // Bulk-synchronous grouped point-to-point exchange. All ranks must call
  // with matching send/recv pairs; returns received payloads in recv order.
  std::vector<std::vector<double>> group(std::vector<SendOp> sends, std::vector<RecvOp> recvs);

  double time() const;
  double comm_seconds() const;
  double compute_seconds() const;

 private:
  friend class Fabric;
  RankCtx(Fabric& fabric, Index rank) : fabric_(&fabric), rank_(rank) {}
  Fabric* fabric_;
  Index rank_;
};

// Deterministic multi-rank substrate. Payload movement is real; timing is
// charged analytically on the simulated clock.
class Fabric {
 public:
  Fabric(Topology topo, CostModelParams params);

  // Runs `program` once per rank on its own thread. A rank raising an error
  // aborts the run with the rank id attached.
  void run(const std::function<void(RankCtx&)>& program);

  const Topology& topology() const { return topo_; }
  const CostModelParams& params() const { return params_; }
  const SimClock& clock() const { return clock_; }
  const FabricStats& stats() const { return stats_; }

  // Completion time of a symmetric grouped exchange, computed from one rank's
  // message list. Used by the analytic (payload-free) execution mode.
  double symmetric_group_time(Index rank, const std::vector<std::pair<Index, double>>& send_bytes) const;

 private:
  friend class RankCtx;

  struct PendingSend {
    Index src, dst;
    std::vector<double> payload;
  };
  struct PendingRecv {
    Index src, dst;
    Index count;
    Index slot;  // position in the caller's recv list
  };

  std::vector<std::vector<double>> group_impl(Index rank, std::vector<SendOp> sends,
                                              std::vector<RecvOp> recvs);
  void finish_group_locked();  // called by the last arriver, lock held

  Topology topo_;
  CostModelParams params_;
  SimClock clock_;
  FabricStats stats_;

  std::mutex mu_;
  std::condition_variable cv_;
  Index arrivals_ = 0;
  Index finished_ = 0;
  std::uint64_t group_seq_ = 0;
  bool group_ready_ = false;
  std::vector<PendingSend> pending_sends_;
  std::vector<PendingRecv> pending_recvs_;
  std::vector<std::vector<std::vector<double>>> inboxes_;
  std::string error_;
  bool has_error_ = false;
};

}  // namespace moesim
