// Command-line front end: one subcommand per lifecycle stage plus `all`.

#include <atomic>
#include <cstdio>
#include <functional>
#include <iostream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "backflush/experiment.hpp"

namespace bf = backflush;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitStageFailure = 2;
constexpr int kExitConfigError = 3;

struct Options {
  std::string config_path;
  std::uint64_t seed = 0;
  std::size_t seeds = 1;
  std::size_t jobs = 1;
  std::string out = "runs";
};

std::filesystem::path run_dir(const Options& o, std::uint64_t seed) {
  if (o.seeds == 1) return o.out;
  return std::filesystem::path(o.out) / ("seed-" + std::to_string(seed));
}

void print_metrics(const bf::ExperimentReport& rep) {
  std::printf("seed %llu  status %s\n", static_cast<unsigned long long>(rep.seed), rep.ok() ? "ok" : "failed");
  for (const auto& s : rep.stages) {
    if (!s.metrics) continue;
    std::printf("  %-12s asr %.3f  cacc %.3f  ppl %.3f  wm %d%s\n", s.name.c_str(), s.metrics->asr, s.metrics->cacc,
                s.metrics->utility_ppl, s.metrics->watermark_bit ? 1 : 0, s.skipped ? "  (skipped)" : "");
  }
  if (rep.detection)
    std::printf("  detect       gap %.4f  tau %.4f  verdict %d\n", rep.detection->gap, rep.detection->tau,
                rep.detection->verdict ? 1 : 0);
  if (!rep.ok()) std::printf("  failed stage: %s\n", rep.failed_stage.c_str());
}

// Runs `stage` for every requested seed, fanning seeds out over `jobs` threads.
int run_seeds(const Options& o, const bf::ExperimentConfig& config,
              const std::function<void(bf::Pipeline&)>& stage) {
  std::atomic<std::size_t> next{0};
  std::atomic<int> worst{kExitOk};
  std::mutex print;
  auto worker = [&] {
    for (std::size_t i = next++; i < o.seeds; i = next++) {
      const std::uint64_t seed = o.seed + i;
      int code = kExitOk;
      try {
        bf::Pipeline p(config, seed, run_dir(o, seed));
        stage(p);
        p.write_report();
        const auto rep = p.report();
        if (!rep.ok()) code = kExitStageFailure;
        std::lock_guard lock(print);
        print_metrics(rep);
      } catch (const bf::ConfigError& e) {
        std::lock_guard lock(print);
        std::cerr << "config error: " << e.what() << '\n';
        code = kExitConfigError;
      } catch (const std::exception& e) {
        std::lock_guard lock(print);
        std::cerr << "seed " << seed << ": " << e.what() << '\n';
        code = kExitStageFailure;
      }
      int prev = worst.load();
      while (code > prev && !worst.compare_exchange_weak(prev, code)) {
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(o.jobs, o.seeds));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return worst.load();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Backdoor poisoning, detection and purification on a tiny language model"};
  app.require_subcommand(1);
  Options o;

  struct Command {
    const char* name;
    const char* help;
    std::function<void(bf::Pipeline&)> run;
  };
  const std::vector<Command> commands = {
      {"gen-data", "write every dataset role as JSONL", [](bf::Pipeline& p) { p.gen_data(); }},
      {"train", "train the clean model", [](bf::Pipeline& p) { p.train_clean(); }},
      {"watermark", "embed the owner signature", [](bf::Pipeline& p) { p.watermark(); }},
      {"attack", "implant a backdoor by poisoned fine-tuning", [](bf::Pipeline& p) { p.attack(); }},
      {"edit-attack", "implant a backdoor by closed-form weight editing", [](bf::Pipeline& p) { p.edit_attack(); }},
      {"detect", "probe-loss compromise test against clean baselines", [](bf::Pipeline& p) { p.detect(); }},
      {"purify", "detect, then inject and unlearn auxiliary data", [](bf::Pipeline& p) { p.purify(); }},
      {"eval", "evaluate every checkpoint in the run directory", [](bf::Pipeline& p) { p.eval(); }},
      {"report", "assemble report.json from the stage records", [](bf::Pipeline& p) { p.write_report(); }},
      {"all", "run the full pipeline", [](bf::Pipeline& p) { p.run_all(); }},
  };

  const std::function<void(bf::Pipeline&)>* chosen = nullptr;
  for (const auto& c : commands) {
    auto* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", o.config_path, "JSON config; defaults apply to anything it omits");
    sub->add_option("--seed", o.seed, "experiment seed (first seed with --seeds)");
    sub->add_option("--seeds", o.seeds, "number of consecutive seeds")->check(CLI::PositiveNumber);
    sub->add_option("--jobs", o.jobs, "seeds run in parallel")->check(CLI::PositiveNumber);
    sub->add_option("--out", o.out, "run directory (one subdirectory per seed with --seeds)");
    sub->callback([&chosen, &c] { chosen = &c.run; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfigError;
  }

  bf::ExperimentConfig config;
  try {
    if (!o.config_path.empty()) config = bf::load_config(o.config_path);
  } catch (const bf::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfigError;
  }
  return run_seeds(o, config, *chosen);
}
