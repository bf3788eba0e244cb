// Command-line front end: generate traces, run single experiments, run the
// ablation suite, and summarize metrics CSVs.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "cmces/cmces.hpp"

namespace {

using namespace cmces;

struct Settings {
  std::string config_path;
  std::map<std::string, std::string> flags;  // only options given on the command line
};

void add_setting_flags(CLI::App* cmd, Settings& s) {
  cmd->add_option("--config", s.config_path, "key = value configuration file (flags override it)");
  for (const auto& key : setting_keys()) {
    cmd->add_option_function<std::string>(
        "--" + key, [&s, key](const std::string& v) { s.flags[key] = v; }, "configuration key '" + key + "'");
  }
}

ExperimentConfig resolve(const Settings& s) {
  ExperimentConfig cfg;
  if (!s.config_path.empty()) load_config(cfg, s.config_path);
  for (const auto& [k, v] : s.flags) apply_setting(cfg, k, v);
  return cfg;
}

void print_run_summary(const MetricsReport& rep) {
  for (const auto& run : rep.runs) {
    std::printf("%-10s seed=%-6llu online_hit_rate=%.4f overall_hit_rate=%.4f floats_sent=%llu\n",
                std::string(to_string(run.method)).c_str(), static_cast<unsigned long long>(run.seed),
                run.online_hit_rate(), run.pooled_hit_rate(0),
                static_cast<unsigned long long>(run.total_floats_sent()));
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Collaborative meta edge-caching simulator"};
  app.require_subcommand(1);

  Settings gen_s, run_s, abl_s;
  std::string gen_out = "trace.csv", run_out = "results", abl_out = "ablation";
  std::string report_in;
  std::uint32_t report_from = 0;

  auto* gen = app.add_subcommand("generate", "write a synthetic trace file");
  add_setting_flags(gen, gen_s);
  gen->add_option("--out", gen_out, "output trace path");

  auto* run = app.add_subcommand("run", "run one method over the configured seeds");
  add_setting_flags(run, run_s);
  run->add_option("--out", run_out, "output directory for metrics.csv and comms.csv");

  auto* abl = app.add_subcommand("ablate", "MetaOnly / MetaCollab / CMCES over the configured seeds");
  add_setting_flags(abl, abl_s);
  abl->add_option("--out", abl_out, "output directory for metrics.csv and comms.csv");

  auto* rep = app.add_subcommand("report", "summarize a metrics CSV");
  rep->add_option("metrics", report_in, "metrics.csv or a directory containing it")->required();
  rep->add_option("--from-day", report_from, "first day included in the summary");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.get_exit_code() ? e.get_exit_code() : 2;
  }

  try {
    if (*gen) {
      ExperimentConfig cfg = resolve(gen_s);
      SyntheticConfig w = cfg.workload;
      w.seed = cfg.seeds.front();
      const Trace t = generate_trace(w);
      write_trace(t, gen_out);
      std::printf("wrote %zu events to %s\n", t.events.size(), gen_out.c_str());
    } else if (*run) {
      const ExperimentConfig cfg = resolve(run_s);
      const MetricsReport r = run_experiment(cfg);
      const auto paths = write_report(r, run_out);
      print_run_summary(r);
      std::printf("wrote %s and %s\n", paths.metrics.string().c_str(), paths.comms.string().c_str());
    } else if (*abl) {
      ExperimentConfig cfg = resolve(abl_s);
      if (!abl_s.flags.count("seed") && !abl_s.flags.count("seeds") && cfg.seeds.size() == 1)
        cfg.seeds = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
      const AblationReport a = ablation_suite(cfg);
      const auto paths = write_report(a.runs, abl_out);
      std::printf("%-10s", "method");
      for (auto s : a.seeds) std::printf(" %8llu", static_cast<unsigned long long>(s));
      std::printf(" %8s\n", "median");
      for (std::size_t m = 0; m < a.methods.size(); ++m) {
        std::printf("%-10s", std::string(to_string(a.methods[m])).c_str());
        for (double v : a.online_hit_rate[m]) std::printf(" %8.4f", v);
        std::printf(" %8.4f\n", a.medians[m]);
      }
      std::printf("strictly ordered seeds: %zu/%zu\n", a.strictly_ordered_seeds(), a.seeds.size());
      for (const auto& [method, c] : comm_cost(a.runs))
        std::printf("%-10s floats_sent=%llu broadcast_floats=%llu\n", std::string(to_string(method)).c_str(),
                    static_cast<unsigned long long>(c.floats_sent),
                    static_cast<unsigned long long>(c.broadcast_floats));
      std::printf("wrote %s and %s\n", paths.metrics.string().c_str(), paths.comms.string().c_str());
    } else if (*rep) {
      std::filesystem::path p = report_in;
      if (std::filesystem::is_directory(p)) p /= "metrics.csv";
      std::ifstream in(p);
      if (!in) throw std::runtime_error("cannot open " + p.string());
      const auto rows = read_metrics_csv(in, p.string());
      std::printf("%-10s %6s %10s\n", "method", "seeds", "median");
      for (const auto& s : summarize(rows, report_from))
        std::printf("%-10s %6zu %10.4f\n", s.method.c_str(), s.per_seed.size(), s.median);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
