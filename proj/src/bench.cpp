#include "moesim/bench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <locale>
#include <map>
#include <sstream>
#include <tuple>

#include "json.hpp"

namespace moesim {

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os << std::setprecision(12) << v;
  return os.str();
}

[[noreturn]] void parse_fail(const std::string& text, std::size_t byte, const std::string& what) {
  std::size_t line = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i)
    if (text[i] == '\n') ++line;
  throw std::invalid_argument("scenario line " + std::to_string(line) + ": " + what);
}

std::vector<double> grid_values(const nlohmann::json& grid, const char* key,
                                std::vector<double> fallback) {
  if (!grid.contains(key)) return fallback;
  std::vector<double> out;
  for (const auto& v : grid[key]) out.push_back(v.get<double>());
  return out;
}

Dims make_dims(double W, double m, double T, double M, double V, double k, double experts_frac) {
  Dims d;
  d.world_size = static_cast<Index>(W);
  d.gpus_per_node = static_cast<Index>(m);
  d.tokens_per_step = static_cast<Index>(T);
  d.model_dim = static_cast<Index>(M);
  d.hidden_dim = static_cast<Index>(V);
  d.top_k = static_cast<Index>(k);
  if (experts_frac >= 1.0) {
    auto x = static_cast<Index>(std::llround(experts_frac));
    if (static_cast<double>(x) != experts_frac)
      throw std::invalid_argument("experts_per_rank >= 1 must be an integer");
    d.placement = ExpertsPerRank{x};
    d.global_experts = d.world_size * x;
  } else {
    auto s = static_cast<Index>(std::llround(1.0 / experts_frac));
    if (std::abs(1.0 / static_cast<double>(s) - experts_frac) > 1e-12)
      throw std::invalid_argument("experts_per_rank < 1 must be 1/s for integer s");
    d.placement = RanksPerExpert{s};
    if (d.world_size % s != 0)
      throw std::invalid_argument("experts_per_rank 1/s needs s to divide world_size");
    d.global_experts = d.world_size / s;
  }
  d.validate();
  return d;
}

}  // namespace

std::vector<double> generate_workload_trace(const TraceSpec& spec, Index steps,
                                            std::uint64_t seed) {
  if (steps < 1) throw std::invalid_argument("generate_workload_trace: steps must be >= 1");
  std::vector<double> trace;
  trace.reserve(static_cast<std::size_t>(steps));
  switch (spec.kind) {
    case TraceSpec::Kind::Constant:
      if (!(spec.f > 0.0)) throw std::invalid_argument("trace: constant f must be positive");
      trace.assign(static_cast<std::size_t>(steps), spec.f);
      break;
    case TraceSpec::Kind::Cycle: {
      if (spec.values.empty()) throw std::invalid_argument("trace: cycle needs values");
      for (double v : spec.values)
        if (!(v > 0.0)) throw std::invalid_argument("trace: cycle values must be positive");
      for (Index i = 0; i < steps; ++i)
        trace.push_back(spec.values[static_cast<std::size_t>(i) % spec.values.size()]);
      break;
    }
    case TraceSpec::Kind::Random: {
      if (!(spec.f_min > 0.0) || spec.f_max < spec.f_min)
        throw std::invalid_argument("trace: need 0 < f_min <= f_max");
      Rng rng(seed);
      for (Index i = 0; i < steps; ++i) trace.push_back(rng.uniform(spec.f_min, spec.f_max));
      break;
    }
  }
  return trace;
}

Scenario parse_scenario_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    parse_fail(text, e.byte, e.what());
  }
  Scenario sc;
  try {
    sc.name = j.value("name", std::string("scenario"));
    sc.steps = j.value("steps", Index{1});
    sc.seed = j.value("seed", std::uint64_t{1});
    if (sc.steps < 1) throw std::invalid_argument("steps must be >= 1");

    const nlohmann::json grid = j.value("grid", nlohmann::json::object());
    auto Ws = grid_values(grid, "world_size", {4});
    auto ms = grid_values(grid, "gpus_per_node", {2});
    auto Ts = grid_values(grid, "tokens_per_step", {16});
    auto Ms = grid_values(grid, "model_dim", {8});
    auto Vs = grid_values(grid, "hidden_dim", {8});
    auto ks = grid_values(grid, "top_k", {2});
    auto Es = grid_values(grid, "experts_per_rank", {1});
    if (Ws.empty() || ms.empty() || Ts.empty() || Ms.empty() || Vs.empty() || ks.empty() ||
        Es.empty())
      throw std::invalid_argument("grid lists must be non-empty");

    Index idx = 0;
    for (double W : Ws)
      for (double m : ms)
        for (double T : Ts)
          for (double M : Ms)
            for (double V : Vs)
              for (double k : ks)
                for (double e : Es) {
                  ScenarioSetting s;
                  s.id = sc.name + "#" + std::to_string(idx++);
                  s.dims = make_dims(W, m, T, M, V, k, e);
                  sc.settings.push_back(std::move(s));
                }

    if (j.contains("trace")) {
      const auto& t = j["trace"];
      std::string kind = t.value("kind", std::string("constant"));
      if (kind == "constant") {
        sc.trace.kind = TraceSpec::Kind::Constant;
        sc.trace.f = t.value("f", 1.0);
      } else if (kind == "cycle") {
        sc.trace.kind = TraceSpec::Kind::Cycle;
        for (const auto& v : t.value("values", nlohmann::json::array()))
          sc.trace.values.push_back(v.get<double>());
      } else if (kind == "random") {
        sc.trace.kind = TraceSpec::Kind::Random;
        sc.trace.f_min = t.value("f_min", 1.0);
        sc.trace.f_max = t.value("f_max", 1.0);
      } else {
        throw std::invalid_argument("trace kind must be constant|cycle|random");
      }
    }

    if (j.contains("strategy")) {
      const auto& s = j["strategy"];
      if (s.is_string() && s.get<std::string>() == "adaptive") {
        sc.strategy.adaptive = true;
      } else if (s.is_object()) {
        sc.strategy.adaptive = false;
        std::string algo = s.value("algo", std::string("linear"));
        if (algo != "linear" && algo != "2dh")
          throw std::invalid_argument("strategy algo must be linear|2dh");
        sc.strategy.fixed.algo = algo == "linear" ? A2aAlgo::Linear : A2aAlgo::TwoDH;
        sc.strategy.fixed.degree = s.value("degree", Index{1});
      } else {
        throw std::invalid_argument("strategy must be \"adaptive\" or an object");
      }
    }
    if (j.contains("parallel")) {
      std::string p = j["parallel"].get<std::string>();
      if (p == "adaptive")
        sc.parallel.adaptive = true;
      else if (p == "p1")
        sc.parallel.fixed = ParallelChoice::P1;
      else if (p == "p2")
        sc.parallel.fixed = ParallelChoice::P2;
      else
        throw std::invalid_argument("parallel must be adaptive|p1|p2");
    }
    if (j.contains("cost_model")) sc.cost = CostModelParams::from_json_text(j["cost_model"].dump());
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("scenario: ") + e.what());
  }
  return sc;
}

Scenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open scenario file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_scenario_text(buf.str());
}

namespace {

std::vector<StepRecord> run_setting(const Scenario& sc, const ScenarioSetting& setting,
                                    std::uint64_t seed, bool materialize) {
  const Dims& dims = setting.dims;
  std::vector<double> trace = generate_workload_trace(sc.trace, sc.steps, seed);
  std::vector<StepRecord> records;
  records.reserve(static_cast<std::size_t>(sc.steps));

  if (materialize) {
    Rng rng(seed);
    MoELayerConfig config;
    config.dims = dims;
    config.strategy = sc.strategy;
    config.parallel = sc.parallel;
    LayerState state = LayerState::init(config, sc.cost, rng);
    const Index rows = state.tokens_total();
    for (Index step = 0; step < sc.steps; ++step) {
      state.config.capacity = FixedCapacity{trace[static_cast<std::size_t>(step)]};
      Tensor x = Tensor::random({rows, dims.model_dim}, rng);
      ForwardResult res = forward(state, x);
      records.push_back({setting.id, step, res.metrics.f, res.metrics.capacity,
                         to_string(res.metrics.strategy), to_string(res.metrics.parallel),
                         res.metrics.sim_seconds, res.metrics.comm_bytes,
                         res.metrics.drop_count});
    }
    return records;
  }

  // Payload-free path: identical decisions, timing from the cost model only.
  Fabric fabric({dims.world_size, dims.gpus_per_node}, sc.cost);
  StrategyMemo memo;
  for (Index step = 0; step < sc.steps; ++step) {
    double f_req = trace[static_cast<std::size_t>(step)];
    Index dC = expert_capacity(dims.top_k, f_req, dims.tokens_per_step, dims.global_experts);
    double f = capacity_to_factor(dC, dims);
    ParallelChoice parallel = sc.parallel.fixed;
    if (sc.parallel.adaptive)
      parallel = dims.is_sharded() ? select_parallelism(dims, dims.world_size * dC)
                                   : ParallelChoice::P1;
    Strategy strategy;
    double seconds;
    auto executor = [&](const Strategy& s) {
      return predict_step_seconds(fabric, dims, dC, s, parallel);
    };
    if (sc.strategy.adaptive) {
      std::tie(strategy, seconds) = moe_step_and_optimize(memo, f, executor);
    } else {
      strategy = sc.strategy.fixed;
      seconds = executor(strategy);
    }
    double bytes = static_cast<double>(dims.world_size) * predict_comm_bytes(dims, dC, parallel);
    records.push_back({setting.id, step, f, dC, to_string(strategy), to_string(parallel), seconds,
                       bytes, 0});
  }
  return records;
}

}  // namespace

std::vector<StepRecord> run_scenario(const Scenario& scenario, Index ranks_materialize_max) {
  if (scenario.settings.empty()) throw std::invalid_argument("run_scenario: empty grid");
  std::vector<StepRecord> records;
  for (std::size_t i = 0; i < scenario.settings.size(); ++i) {
    const ScenarioSetting& setting = scenario.settings[i];
    std::uint64_t seed = scenario.seed + 0x9e3779b97f4a7c15ULL * (i + 1);
    bool materialize = setting.dims.world_size <= ranks_materialize_max;
    auto part = run_setting(scenario, setting, seed, materialize);
    records.insert(records.end(), part.begin(), part.end());
  }
  return records;
}

std::string records_csv(const std::vector<StepRecord>& records) {
  std::ostringstream os;
  os << "scenario_id,step,f,capacity,strategy,parallel,sim_seconds,comm_bytes,drop_count\n";
  for (const auto& r : records)
    os << r.scenario_id << ',' << r.step << ',' << fmt(r.f) << ',' << r.capacity << ','
       << r.strategy << ',' << r.parallel << ',' << fmt(r.sim_seconds) << ','
       << fmt(r.comm_bytes) << ',' << r.drop_count << '\n';
  return os.str();
}

std::vector<StepRecord> parse_records_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) ||
      line != "scenario_id,step,f,capacity,strategy,parallel,sim_seconds,comm_bytes,drop_count")
    throw std::invalid_argument("records: missing or unexpected header");
  std::vector<StepRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::istringstream ls(line);
    std::string col;
    while (std::getline(ls, col, ',')) cols.push_back(col);
    if (cols.size() != 9) throw std::invalid_argument("records: bad column count: " + line);
    StepRecord r;
    r.scenario_id = cols[0];
    r.step = std::stoll(cols[1]);
    r.f = std::stod(cols[2]);
    r.capacity = std::stoll(cols[3]);
    r.strategy = cols[4];
    r.parallel = cols[5];
    r.sim_seconds = std::stod(cols[6]);
    r.comm_bytes = std::stod(cols[7]);
    r.drop_count = std::stoll(cols[8]);
    records.push_back(std::move(r));
  }
  return records;
}

std::string emit_report(const std::vector<StepRecord>& records) {
  if (records.empty()) throw std::invalid_argument("emit_report: no records");
  std::vector<std::string> order;
  std::map<std::string, std::vector<const StepRecord*>> groups;
  for (const auto& r : records) {
    auto [it, fresh] = groups.try_emplace(r.scenario_id);
    if (fresh) order.push_back(r.scenario_id);
    it->second.push_back(&r);
  }
  std::ostringstream os;
  os << "scenario_id,steps,mean_s,best_strategy,best_mean_s,worst_mean_s,mean_regret_s,"
        "speedup_vs_worst,speedup_vs_baseline\n";
  for (const auto& id : order) {
    const auto& rs = groups[id];
    std::map<std::string, std::pair<double, Index>> per_strategy;  // sum, count
    std::map<double, double> best_by_f;
    double total = 0.0;
    for (const auto* r : rs) {
      auto& acc = per_strategy[r->strategy];
      acc.first += r->sim_seconds;
      acc.second += 1;
      auto it = best_by_f.find(r->f);
      if (it == best_by_f.end() || r->sim_seconds < it->second) best_by_f[r->f] = r->sim_seconds;
      total += r->sim_seconds;
    }
    std::string best_strategy;
    double best_mean = 0.0, worst_mean = 0.0;
    bool first = true;
    for (const auto& [name, acc] : per_strategy) {
      double mean = acc.first / static_cast<double>(acc.second);
      if (first || mean < best_mean) {
        best_mean = mean;
        best_strategy = name;
      }
      if (first || mean > worst_mean) worst_mean = mean;
      first = false;
    }
    double regret = 0.0;
    for (const auto* r : rs) regret += r->sim_seconds - best_by_f[r->f];
    double n = static_cast<double>(rs.size());
    double mean = total / n;
    auto base = per_strategy.find("linearx1");
    os << id << ',' << rs.size() << ',' << fmt(mean) << ',' << best_strategy << ','
       << fmt(best_mean) << ',' << fmt(worst_mean) << ',' << fmt(regret / n) << ','
       << fmt(worst_mean / mean) << ',';
    if (base != per_strategy.end())
      os << fmt(base->second.first / static_cast<double>(base->second.second) / mean);
    os << '\n';
  }
  return os.str();
}

}  // namespace moesim
