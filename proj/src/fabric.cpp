#include "moesim/fabric.hpp"

#include <algorithm>
#include <cmath>
#include <thread>
#include <tuple>

#include "json.hpp"

namespace moesim {

void CostModelParams::validate() const {
  auto check_link = [](const LinkParams& l, const char* name) {
    if (l.alpha < 0 || !(l.beta > 0) || !(l.eta_min > 0) || l.eta_min > 1 || !(l.b_half > 0))
      throw std::invalid_argument(std::string("CostModelParams: bad link params: ") + name);
  };
  check_link(intra, "intra");
  check_link(inter, "inter");
  if (!(flop_rate > 0) || launch_overhead < 0 || !(memcpy_bandwidth > 0) || gamma < 1.0)
    throw std::invalid_argument("CostModelParams: bad compute params");
}

namespace {

void link_from_json(const nlohmann::json& j, LinkParams& l) {
  if (j.contains("alpha")) l.alpha = j["alpha"].get<double>();
  if (j.contains("beta")) l.beta = j["beta"].get<double>();
  if (j.contains("eta_min")) l.eta_min = j["eta_min"].get<double>();
  if (j.contains("b_half")) l.b_half = j["b_half"].get<double>();
}

nlohmann::json link_to_json(const LinkParams& l) {
  return {{"alpha", l.alpha}, {"beta", l.beta}, {"eta_min", l.eta_min}, {"b_half", l.b_half}};
}

}  // namespace

CostModelParams CostModelParams::from_json_text(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  CostModelParams p;  // defaults, overridden field by field
  if (j.contains("intra")) link_from_json(j["intra"], p.intra);
  if (j.contains("inter")) link_from_json(j["inter"], p.inter);
  if (j.contains("flop_rate")) p.flop_rate = j["flop_rate"].get<double>();
  if (j.contains("launch_overhead")) p.launch_overhead = j["launch_overhead"].get<double>();
  if (j.contains("memcpy_bandwidth")) p.memcpy_bandwidth = j["memcpy_bandwidth"].get<double>();
  if (j.contains("gamma")) p.gamma = j["gamma"].get<double>();
  p.validate();
  return p;
}

std::string CostModelParams::to_json_text() const {
  nlohmann::json j = {{"intra", link_to_json(intra)},
                      {"inter", link_to_json(inter)},
                      {"flop_rate", flop_rate},
                      {"launch_overhead", launch_overhead},
                      {"memcpy_bandwidth", memcpy_bandwidth},
                      {"gamma", gamma}};
  return j.dump(2);
}

double link_efficiency(const LinkParams& link, double bytes) {
  return link.eta_min + (1.0 - link.eta_min) * bytes / (bytes + link.b_half);
}

double p2p_cost(double bytes, const LinkParams& link) {
  if (bytes < 0) throw std::invalid_argument("p2p_cost: negative bytes");
  if (bytes == 0) return link.alpha;
  return link.alpha + bytes / (link.beta * link_efficiency(link, bytes));
}

const Topology& RankCtx::topology() const { return fabric_->topology(); }
const CostModelParams& RankCtx::params() const { return fabric_->params(); }

void RankCtx::charge_compute_flops(double flops) {
  charge_compute_seconds(fabric_->params_.launch_overhead + flops / fabric_->params_.flop_rate);
}

void RankCtx::charge_compute_seconds(double seconds) {
  std::lock_guard<std::mutex> lk(fabric_->mu_);
  fabric_->clock_.rank_time[rank_] += seconds;
  fabric_->clock_.compute_seconds[rank_] += seconds;
}

void RankCtx::charge_memcpy(double bytes) {
  double seconds = fabric_->params_.launch_overhead + bytes / fabric_->params_.memcpy_bandwidth;
  std::lock_guard<std::mutex> lk(fabric_->mu_);
  fabric_->clock_.rank_time[rank_] += seconds;
  fabric_->clock_.comm_seconds[rank_] += seconds;
}

std::vector<std::vector<double>> RankCtx::group(std::vector<SendOp> sends,
                                                std::vector<RecvOp> recvs) {
  return fabric_->group_impl(rank_, std::move(sends), std::move(recvs));
}

double RankCtx::time() const {
  std::lock_guard<std::mutex> lk(fabric_->mu_);
  return fabric_->clock_.rank_time[rank_];
}
double RankCtx::comm_seconds() const {
  std::lock_guard<std::mutex> lk(fabric_->mu_);
  return fabric_->clock_.comm_seconds[rank_];
}
double RankCtx::compute_seconds() const {
  std::lock_guard<std::mutex> lk(fabric_->mu_);
  return fabric_->clock_.compute_seconds[rank_];
}

Fabric::Fabric(Topology topo, CostModelParams params)
    : topo_(topo), params_(std::move(params)) {
  topo_.validate();
  params_.validate();
}

void Fabric::run(const std::function<void(RankCtx&)>& program) {
  const Index W = topo_.world_size;
  clock_.rank_time.assign(static_cast<std::size_t>(W), 0.0);
  clock_.comm_seconds.assign(static_cast<std::size_t>(W), 0.0);
  clock_.compute_seconds.assign(static_cast<std::size_t>(W), 0.0);
  stats_.sent_bytes.assign(static_cast<std::size_t>(W), 0.0);
  stats_.recv_bytes.assign(static_cast<std::size_t>(W), 0.0);
  stats_.messages.assign(static_cast<std::size_t>(W), 0);
  stats_.pair_bytes.clear();
  arrivals_ = 0;
  finished_ = 0;
  group_seq_ = 0;
  pending_sends_.clear();
  pending_recvs_.clear();
  inboxes_.assign(static_cast<std::size_t>(W), {});
  error_.clear();
  has_error_ = false;

  std::vector<std::thread> threads;
  threads.reserve(static_cast<std::size_t>(W));
  for (Index r = 0; r < W; ++r) {
    threads.emplace_back([this, r, &program] {
      RankCtx ctx(*this, r);
      try {
        program(ctx);
        std::lock_guard<std::mutex> lk(mu_);
        ++finished_;
        if (arrivals_ > 0 && !has_error_) {
          has_error_ = true;
          error_ = "fabric deadlock: rank " + std::to_string(r) +
                   " exited while a grouped operation was pending";
        }
        cv_.notify_all();
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lk(mu_);
        ++finished_;
        if (!has_error_) {
          has_error_ = true;
          error_ = "rank " + std::to_string(r) + ": " + e.what();
        }
        cv_.notify_all();
      }
    });
  }
  for (auto& t : threads) t.join();
  if (has_error_) throw std::runtime_error(error_);
}

std::vector<std::vector<double>> Fabric::group_impl(Index rank, std::vector<SendOp> sends,
                                                    std::vector<RecvOp> recvs) {
  std::unique_lock<std::mutex> lk(mu_);
  if (has_error_) throw std::runtime_error(error_);
  if (finished_ > 0) {
    has_error_ = true;
    error_ = "fabric deadlock: rank " + std::to_string(rank) +
             " entered a grouped operation after another rank exited";
    cv_.notify_all();
    throw std::runtime_error(error_);
  }
  for (auto& s : sends) {
    if (s.peer < 0 || s.peer >= topo_.world_size)
      throw std::invalid_argument("group: send peer out of range");
    pending_sends_.push_back({rank, s.peer, std::move(s.payload)});
  }
  for (std::size_t i = 0; i < recvs.size(); ++i) {
    if (recvs[i].peer < 0 || recvs[i].peer >= topo_.world_size)
      throw std::invalid_argument("group: recv peer out of range");
    pending_recvs_.push_back({recvs[i].peer, rank, recvs[i].count, static_cast<Index>(i)});
  }
  inboxes_[static_cast<std::size_t>(rank)].assign(recvs.size(), {});
  std::uint64_t my_seq = group_seq_;
  ++arrivals_;
  if (arrivals_ == topo_.world_size) {
    finish_group_locked();
  } else {
    cv_.wait(lk, [&] { return group_seq_ != my_seq || has_error_; });
    if (has_error_) throw std::runtime_error(error_);
  }
  return std::move(inboxes_[static_cast<std::size_t>(rank)]);
}

void Fabric::finish_group_locked() {
  const Index W = topo_.world_size;
  // Deterministic matching order regardless of thread arrival order.
  std::stable_sort(pending_sends_.begin(), pending_sends_.end(),
                   [](const PendingSend& a, const PendingSend& b) {
                     return std::tie(a.src, a.dst) < std::tie(b.src, b.dst);
                   });
  std::stable_sort(pending_recvs_.begin(), pending_recvs_.end(),
                   [](const PendingRecv& a, const PendingRecv& b) {
                     return std::tie(a.dst, a.src) < std::tie(b.dst, b.src);
                   });

  std::map<std::pair<Index, Index>, std::vector<PendingSend*>> by_pair;
  for (auto& s : pending_sends_) by_pair[{s.src, s.dst}].push_back(&s);
  std::map<std::pair<Index, Index>, std::size_t> cursor;

  // Per-rank, per-link, per-direction busy time; full-duplex links.
  std::vector<double> intra_tx(static_cast<std::size_t>(W), 0.0),
      intra_rx(static_cast<std::size_t>(W), 0.0), inter_tx(static_cast<std::size_t>(W), 0.0),
      inter_rx(static_cast<std::size_t>(W), 0.0);

  auto fail = [&](const std::string& msg) {
    has_error_ = true;
    error_ = msg;
    ++group_seq_;
    pending_sends_.clear();
    pending_recvs_.clear();
    arrivals_ = 0;
    cv_.notify_all();
    throw std::runtime_error(error_);
  };

  // Match recvs to sends in posted order per (src, dst) pair.
  for (auto& r : pending_recvs_) {
    auto it = by_pair.find({r.src, r.dst});
    std::size_t& cur = cursor[{r.src, r.dst}];
    if (it == by_pair.end() || cur >= it->second.size())
      fail("fabric: recv from rank " + std::to_string(r.src) + " on rank " +
           std::to_string(r.dst) + " has no matching send");
    PendingSend* s = it->second[cur++];
    if (static_cast<Index>(s->payload.size()) != r.count)
      fail("fabric: send/recv size mismatch between ranks " + std::to_string(r.src) + " and " +
           std::to_string(r.dst));
    double bytes = 8.0 * static_cast<double>(s->payload.size());
    stats_.sent_bytes[static_cast<std::size_t>(s->src)] += bytes;
    stats_.recv_bytes[static_cast<std::size_t>(s->dst)] += bytes;
    stats_.messages[static_cast<std::size_t>(s->src)] += 1;
    stats_.pair_bytes[{s->src, s->dst}] += bytes;
    if (s->src != s->dst) {
      bool local = topo_.same_node(s->src, s->dst);
      const LinkParams& link = local ? params_.intra : params_.inter;
      double cost = p2p_cost(bytes, link);
      (local ? intra_tx : inter_tx)[static_cast<std::size_t>(s->src)] += cost;
      (local ? intra_rx : inter_rx)[static_cast<std::size_t>(s->dst)] += cost;
    }
    inboxes_[static_cast<std::size_t>(r.dst)][static_cast<std::size_t>(r.slot)] =
        std::move(s->payload);
    s->payload.clear();
  }
  for (auto& [pair, list] : by_pair)
    if (cursor[pair] != list.size())
      fail("fabric: send from rank " + std::to_string(pair.first) + " to rank " +
           std::to_string(pair.second) + " has no matching recv");

  double start = 0.0, duration = 0.0;
  for (Index r = 0; r < W; ++r) {
    start = std::max(start, clock_.rank_time[static_cast<std::size_t>(r)]);
    duration = std::max({duration, intra_tx[static_cast<std::size_t>(r)],
                         intra_rx[static_cast<std::size_t>(r)],
                         inter_tx[static_cast<std::size_t>(r)],
                         inter_rx[static_cast<std::size_t>(r)]});
  }
  for (Index r = 0; r < W; ++r) {
    clock_.rank_time[static_cast<std::size_t>(r)] = start + duration;
    clock_.comm_seconds[static_cast<std::size_t>(r)] += duration;
  }

  pending_sends_.clear();
  pending_recvs_.clear();
  arrivals_ = 0;
  ++group_seq_;
  cv_.notify_all();
}

double Fabric::symmetric_group_time(Index rank,
                                    const std::vector<std::pair<Index, double>>& send_bytes) const {
  double intra_sum = 0.0, inter_sum = 0.0;
  for (const auto& [peer, bytes] : send_bytes) {
    if (peer == rank) continue;
    if (topo_.same_node(rank, peer))
      intra_sum += p2p_cost(bytes, params_.intra);
    else
      inter_sum += p2p_cost(bytes, params_.inter);
  }
  return std::max(intra_sum, inter_sum);
}

}  // namespace moesim
