#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "moesim/bench.hpp"

namespace {

int cmd_run(const std::string& scenario_path, const std::string& out_dir, long long seed_override,
            long long ranks_materialize_max) {
  moesim::Scenario scenario = moesim::load_scenario(scenario_path);
  if (seed_override >= 0) scenario.seed = static_cast<std::uint64_t>(seed_override);
  auto records = moesim::run_scenario(scenario, ranks_materialize_max);

  std::filesystem::create_directories(out_dir);
  std::filesystem::path records_path = std::filesystem::path(out_dir) / "records.csv";
  std::ofstream out(records_path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + records_path.string());
  out << moesim::records_csv(records);
  out.close();
  std::cout << "wrote " << records.size() << " records to " << records_path.string() << "\n";
  return 0;
}

int cmd_report(const std::string& records_path) {
  std::ifstream in(records_path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + records_path);
  std::ostringstream buf;
  buf << in.rdbuf();
  std::cout << moesim::emit_report(moesim::parse_records_csv(buf.str()));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive MoE layer benchmark runner"};
  app.require_subcommand(1);

  std::string scenario_path, out_dir = ".", records_path;
  long long seed_override = -1, ranks_materialize_max = 64;

  CLI::App* run = app.add_subcommand("run", "Run a scenario file and write records.csv");
  run->add_option("scenario", scenario_path, "Scenario JSON file")->required();
  run->add_option("--out", out_dir, "Output directory");
  run->add_option("--seed", seed_override, "Override the scenario seed");
  run->add_option("--ranks-materialize-max", ranks_materialize_max,
                  "Largest world size that still moves real payloads");

  CLI::App* report = app.add_subcommand("report", "Summarize a records.csv");
  report->add_option("records", records_path, "records.csv produced by run")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (run->parsed()) return cmd_run(scenario_path, out_dir, seed_override, ranks_materialize_max);
    return cmd_report(records_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
