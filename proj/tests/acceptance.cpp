// End-to-end acceptance run: one PASS/FAIL line per criterion, exit status 1
// if any criterion fails. Thresholds are fixed here, not read from config.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "CLI11.hpp"
#include "backflush/experiment.hpp"
#include "backflush/inference.hpp"

namespace bf = backflush;
namespace fs = std::filesystem;

namespace {

constexpr double kAttackAsr = 0.90;
constexpr double kAttackCaccPoints = 0.02;
constexpr double kAttackSeconds = 300;
constexpr double kStep0Share = 0.9;
constexpr double kVerdictAccuracy = 0.90;
constexpr double kPurifiedAsr = 0.05;
constexpr double kPurifyCaccPoints = 0.03;
constexpr double kPplShare = 0.8;
constexpr double kWatermarkShare = 0.9;
constexpr double kCosineStart = -0.9, kCosineEnd = 0.9;
constexpr double kRotationStart = 1.9, kRotationEnd = 0.1;
constexpr double kGradRelErr = 1e-4;
constexpr double kEditResidual = 1e-8;

int failures = 0;
std::vector<std::pair<int, std::string>> summary;

void verdict(int id, const std::string& title, bool pass, const std::string& detail) {
  char head[128];
  std::snprintf(head, sizeof head, "[%s] criterion %d %s", pass ? "PASS" : "FAIL", id, title.c_str());
  std::printf("%s: %s\n", head, detail.c_str());
  std::fflush(stdout);
  summary.emplace_back(id, head);
  if (!pass) ++failures;
}

void note(const std::string& line) {
  std::printf("    %s\n", line.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string list(const std::vector<double>& v, const char* f = "%.3f") {
  std::string out;
  for (double x : v) out += (out.empty() ? "" : " ") + fmt(f, x);
  return out;
}

const bf::Metrics& metrics_of(const bf::ExperimentReport& r, const std::string& stage) {
  const auto* s = r.stage(stage);
  if (!s || !s->metrics) throw std::runtime_error("report has no metrics for " + stage);
  return *s->metrics;
}

double seconds_of(const bf::ExperimentReport& r, std::initializer_list<const char*> stages) {
  double t = 0;
  for (const char* s : stages)
    if (const auto* rec = r.stage(s)) t += rec->seconds;
  return t;
}

void copy_run(const fs::path& from, const fs::path& to) {
  fs::remove_all(to);
  fs::create_directories(to);
  for (const char* sub : {"checkpoints", "keys", "stages", "datasets"})
    fs::copy(from / sub, to / sub, fs::copy_options::recursive);
  fs::remove(to / "checkpoints" / "purified.ckpt");
  fs::remove(to / "stages" / "purified.json");
  fs::remove(to / "stages" / "purified.result.json");
}

struct SeedRun {
  std::uint64_t seed = 0;
  fs::path dir;
  bf::ExperimentReport rope;
  bf::ExperimentReport ga;
  bf::DetectionResult clean_detection;  // the watermarked, never-attacked model as suspect
};

SeedRun run_seed(const bf::ExperimentConfig& base, std::uint64_t seed, const fs::path& work) {
  SeedRun s;
  s.seed = seed;
  s.dir = work / ("seed-" + std::to_string(seed));
  auto rope_cfg = base;
  rope_cfg.purify.variant = bf::Variant::Rope;
  bf::Pipeline rope(rope_cfg, seed, s.dir);
  s.rope = rope.run_all();

  auto ga_cfg = base;
  ga_cfg.purify.variant = bf::Variant::Ga;
  const fs::path ga_dir = work / ("seed-" + std::to_string(seed) + "-ga");
  if (s.rope.ok()) {
    copy_run(s.dir, ga_dir);
    bf::Pipeline ga(ga_cfg, seed, ga_dir);
    try {
      ga.purify();
      ga.eval();
    } catch (const bf::StageFailure&) {
    }
    ga.write_report();
    s.ga = ga.report();
    const auto wm = bf::load_checkpoint(s.dir / "checkpoints" / "watermarked.ckpt");
    s.clean_detection = bf::detect(wm, rope.baseline(), rope.world().probe, rope.calibration().tau,
                                   bf::curve_options(rope_cfg, seed));
  }
  return s;
}

// ---- criterion 6 helpers -------------------------------------------------

double gradient_check_worst(bf::LossKind kind) {
  bf::ModelConfig c;
  c.dim = 4;
  c.n_layers = 1;
  c.n_heads = 2;
  c.context_len = 16;
  c.mlp_ratio = 2;
  c.seed = 3;
  auto p = bf::init_parameters<double>(c);
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto& v : p.values)
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] += n(rng);
  bf::LossBatch<double> b;
  b.primary = {{"ab?", "cd", bf::Role::Benign}, {"what", "x.", bf::Role::Benign}};
  b.secondary = {{"zz q", "ok", bf::Role::Aux}, {"jy", "hm", bf::Role::Aux}, {"k", "'a", bf::Role::Aux}};
  if (kind == bf::LossKind::Rope) {
    b.rope_targets.resize(static_cast<Eigen::Index>(b.secondary.size()), c.dim);
    for (Eigen::Index i = 0; i < b.rope_targets.size(); ++i) b.rope_targets.data()[i] = n(rng);
  }
  bf::ParameterSet<double> grads;
  bf::composed_loss(c, p, kind, b, bf::LossWeights{}, &grads);
  auto total = [&] { return bf::composed_loss(c, p, kind, b, bf::LossWeights{}, nullptr).total; };
  const double eps = 1e-5;
  double worst = 0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    for (Eigen::Index i = 0; i < p.values[k].size(); ++i) {
      double& x = p.values[k].data()[i];
      const double saved = x;
      x = saved + eps;
      const double up = total();
      x = saved - eps;
      const double down = total();
      x = saved;
      const double numeric = (up - down) / (2 * eps);
      const double analytic = grads.values[k].data()[i];
      worst = std::max(worst, std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-3}));
    }
  }
  return worst;
}

Eigen::MatrixXd gaussian(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

void criterion6() {
  double grad_worst = 0;
  std::string per_kind;
  for (auto kind : {bf::LossKind::Sft, bf::LossKind::Phase1, bf::LossKind::Ga, bf::LossKind::Rope}) {
    const double w = gradient_check_worst(kind);
    grad_worst = std::max(grad_worst, w);
    per_kind += fmt(" %s=%.2e", std::string(bf::to_string(kind)).c_str(), w);
  }

  std::mt19937_64 rng(2025);
  std::uniform_int_distribution<int> dim(1, 64);
  std::uniform_real_distribution<double> scale(1e-3, 1e3);
  std::size_t rotation_bad = 0;
  for (int i = 0; i < 1000; ++i) {
    const int d = dim(rng);
    const Eigen::VectorXd h = gaussian(rng, d, 1), h0 = gaussian(rng, d, 1);
    const double loss = bf::rotation_loss({h}, {h0});
    const double oracle = 1.0 - h.dot(-h0) / (h.norm() * h0.norm());
    const bool ok = loss >= 0 && loss <= 2 && std::abs(loss - oracle) <= 1e-12 &&
                    std::abs(bf::rotation_loss({scale(rng) * h}, {h0}) - loss) <= 1e-12 &&
                    std::abs(bf::rotation_loss({h}, {scale(rng) * h0}) - loss) <= 1e-12 &&
                    std::abs(bf::rotation_loss({h}, {h}) - 2.0) <= 1e-12 &&
                    std::abs(bf::rotation_loss({-h}, {h})) <= 1e-12;
    rotation_bad += !ok;
  }

  std::mt19937_64 erng(2024);
  std::uniform_int_distribution<int> edim(2, 12);
  double residual_worst = 0, oracle_worst = 0;
  for (int t = 0; t < 100; ++t) {
    const int in = edim(erng), out = edim(erng);
    const int n = 1 + static_cast<int>(erng() % static_cast<std::uint64_t>(in));
    const auto w = gaussian(erng, out, in), k = gaussian(erng, in, n), v = gaussian(erng, out, n);
    const auto delta = bf::solve_edit(w, k, v);
    residual_worst = std::max(residual_worst, ((w + delta) * k - v).norm());
    const Eigen::MatrixXd gram = k.transpose() * k;
    const Eigen::MatrixXd normal =
        (v - w * k) * gram.ldlt().solve(Eigen::MatrixXd::Identity(gram.rows(), gram.cols())) * k.transpose();
    oracle_worst = std::max(oracle_worst, (delta - normal).norm() / (1 + delta.norm()));
  }

  verdict(6, "numerical core",
          grad_worst < kGradRelErr && rotation_bad == 0 && residual_worst <= kEditResidual &&
              oracle_worst <= kEditResidual,
          fmt("gradient max rel err %.2e (<%.0e;%s), rotation pairs failing %zu/1000, edit residual %.2e and "
              "oracle diff %.2e (<=%.0e)",
              grad_worst, kGradRelErr, per_kind.c_str(), rotation_bad, residual_worst, oracle_worst, kEditResidual));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria on the default configuration"};
  std::string work = "acceptance-work", config_path;
  std::size_t seeds = 10;
  std::uint64_t first_seed = 1;
  app.add_option("--work", work, "scratch directory for run directories (wiped first)");
  app.add_option("--config", config_path, "config to run instead of the defaults");
  app.add_option("--seeds", seeds, "seeds for the multi-seed criteria")->check(CLI::Range(2, 100));
  app.add_option("--first-seed", first_seed, "first seed");
  CLI11_PARSE(app, argc, argv);

  const bf::ExperimentConfig config = config_path.empty() ? bf::ExperimentConfig{} : bf::load_config(config_path);
  const fs::path root = work;
  fs::remove_all(root);
  fs::create_directories(root);
  const auto started = std::chrono::steady_clock::now();

  criterion6();

  std::vector<SeedRun> runs;
  for (std::size_t i = 0; i < seeds; ++i) {
    runs.push_back(run_seed(config, first_seed + i, root));
    const auto& r = runs.back();
    std::string line = fmt("seed %llu status %s", static_cast<unsigned long long>(r.seed), r.rope.ok() ? "ok" : "failed");
    if (r.rope.ok()) {
      const auto& d = *r.rope.detection;
      line += fmt("  poisoned asr %.3f  gap %.3f tau %.3f verdict %d  clean-suspect gap %.3f  rope asr %.3f",
                  metrics_of(r.rope, "poisoned").asr, d.gap, d.tau, d.verdict ? 1 : 0, r.clean_detection.gap,
                  metrics_of(r.rope, "purified").asr);
      if (r.ga.stage("purified") && r.ga.stage("purified")->metrics)
        line += fmt("  ga asr %.3f", metrics_of(r.ga, "purified").asr);
    } else {
      line += " at " + r.rope.failed_stage;
    }
    note(line);
  }
  std::vector<const SeedRun*> ok;
  for (const auto& r : runs)
    if (r.rope.ok()) ok.push_back(&r);
  note(fmt("%zu of %zu seed pipelines completed", ok.size(), runs.size()));

  // ---- 1: attack efficacy per trigger kind --------------------------------
  {
    bool pass = !ok.empty();
    std::string detail;
    for (auto kind : {bf::TriggerKind::Typo, bf::TriggerKind::Repeated, bf::TriggerKind::Pattern,
                      bf::TriggerKind::Phrase}) {
      auto cfg = config;
      cfg.attack.kind = kind;
      const fs::path dir = root / ("kind-" + std::string(bf::to_string(kind)));
      bf::Pipeline p(cfg, first_seed, dir);
      double asr = 0, clean_cacc = 0, cacc = 0, secs = 0;
      bool done = false;
      try {
        p.gen_data();
        p.train_clean();
        p.watermark();
        p.attack();
        const auto rep = p.report();
        asr = metrics_of(rep, "poisoned").asr;
        cacc = metrics_of(rep, "poisoned").cacc;
        clean_cacc = metrics_of(rep, "clean").cacc;
        secs = seconds_of(rep, {"gen-data", "clean", "watermarked", "poisoned"});
        done = true;
      } catch (const std::exception& e) {
        note(std::string(bf::to_string(kind)) + ": " + e.what());
      }
      const bool k_ok = done && asr >= kAttackAsr && std::abs(cacc - clean_cacc) <= kAttackCaccPoints + 1e-12 &&
                        secs <= kAttackSeconds;
      pass = pass && k_ok;
      detail += fmt("%s%s asr %.3f cacc %.3f vs clean %.3f %.0fs%s", detail.empty() ? "" : "; ",
                    std::string(bf::to_string(kind)).c_str(), asr, cacc, clean_cacc, secs, k_ok ? "" : " (miss)");
    }
    verdict(1, "attack efficacy", pass,
            detail + fmt("  [need asr>=%.2f, |cacc-clean|<=%.2f, <=%.0fs per kind]", kAttackAsr, kAttackCaccPoints,
                         kAttackSeconds));
  }

  // ---- 2: detection ---------------------------------------------------------
  {
    std::vector<double> step0;
    for (const auto* r : ok) step0.push_back(r->rope.detection->step0_gap);
    const std::size_t positive = std::count_if(step0.begin(), step0.end(), [](double g) { return g > 0; });
    const bool step0_ok = !ok.empty() && positive >= static_cast<std::size_t>(std::ceil(kStep0Share * runs.size()));

    // Labelled suspects: the first half of the seeds contribute their never-attacked
    // watermarked model, the second half their poisoned model.
    const std::size_t half = runs.size() / 2;
    std::size_t correct = 0, labelled = 0, all_correct = 0, all_labelled = 0;
    for (std::size_t i = 0; i < runs.size(); ++i) {
      const auto& r = runs[i];
      if (!r.rope.ok()) {
        ++labelled;
        continue;
      }
      const bool clean_right = !r.clean_detection.verdict, poisoned_right = r.rope.detection->verdict;
      all_correct += clean_right + poisoned_right;
      all_labelled += 2;
      ++labelled;
      correct += i < half ? clean_right : poisoned_right;
    }
    const double accuracy = labelled ? static_cast<double>(correct) / static_cast<double>(labelled) : 0.0;
    const bool verdict_ok = accuracy >= kVerdictAccuracy;

    // Backdoor-count sweep on the first seed with the pipeline's probe and tau.
    bool count_ok = false;
    std::string count_detail = "not run";
    if (!ok.empty()) {
      auto cfg = config;
      bf::Pipeline p(cfg, ok.front()->seed, ok.front()->dir);
      bf::BackdoorCountOptions o;
      o.attack_steps = cfg.attack.steps;
      o.poison_rate = cfg.attack.rate;
      o.kind = cfg.attack.kind;
      o.trigger_seed = ok.front()->seed * 0x9e37;
      o.train = bf::train_options(cfg, cfg.attack.lr, ok.front()->seed);
      o.curve = bf::curve_options(cfg, ok.front()->seed);
      const double tau = p.calibration().tau;
      const auto base = bf::load_checkpoint(ok.front()->dir / "checkpoints" / "watermarked.ckpt");
      const auto gaps = bf::gap_vs_backdoor_count(base, {0, 1, 3, 5}, p.world().train, p.world().probe, o);
      count_ok = gaps.size() == 4;
      count_detail = fmt("tau %.3f", tau);
      for (const auto& g : gaps) {
        count_detail += fmt(" c=%zu gap %.3f", g.count, g.gap);
        if (g.count > 0) count_ok = count_ok && g.gap > tau;
      }
    }

    std::vector<std::size_t> counts;
    {
      const auto probe = ok.empty() ? bf::gen_probe(1, 64, bf::make_trigger(bf::TriggerKind::Phrase, 1))
                                    : bf::Pipeline(config, ok.front()->seed, ok.front()->dir).world().probe;
      for (int vocab : {32, 64, 96}) {
        bf::ModelConfig mc = config.model;
        mc.vocab_size = vocab;
        mc.seed = 1;
        const auto s = bf::ModelCheckpoint::initialise(mc);
        mc.seed = 2;
        const auto c = bf::ModelCheckpoint::initialise(mc);
        counts.push_back(bf::detect(s, c, probe, 0.0, bf::curve_options(config, 1)).probe_eval_count);
      }
    }
    const bool forward_ok = counts[0] == counts[1] && counts[1] == counts[2];

    note("step-0 gaps: " + list(step0));
    note(fmt("all 2x%zu suspects: %zu/%zu verdicts correct", ok.size(), all_correct, all_labelled));
    verdict(2, "detection", step0_ok && verdict_ok && count_ok && forward_ok,
            fmt("step-0 gap > 0 in %zu/%zu (need >=%.0f%%); verdict accuracy %.2f on %zu clean + %zu poisoned (need "
                ">=%.2f); counts %s (need every c in {1,3,5} > tau); forward passes %zu/%zu/%zu for vocab 32/64/96",
                positive, runs.size(), kStep0Share * 100, accuracy, half, runs.size() - half, kVerdictAccuracy,
                count_detail.c_str(), counts[0], counts[1], counts[2]));
  }

  // ---- 3: purification -----------------------------------------------------
  {
    std::vector<double> pre, rope_asr, ga_asr, rope_drop, ga_drop;
    std::size_t ppl_wins = 0, pairs = 0;
    bool pre_ok = !ok.empty();
    for (const auto& r : runs) {
      if (!r.rope.ok()) {
        pre_ok = false;
        continue;
      }
      const auto& before = metrics_of(r.rope, "poisoned");
      pre.push_back(before.asr);
      pre_ok = pre_ok && before.asr >= kAttackAsr;
      const auto& after = metrics_of(r.rope, "purified");
      rope_asr.push_back(after.asr);
      rope_drop.push_back(before.cacc - after.cacc);
      if (r.ga.stage("purified") && r.ga.stage("purified")->metrics && !r.ga.stage("purified")->failed) {
        const auto& g = metrics_of(r.ga, "purified");
        ga_asr.push_back(g.asr);
        ga_drop.push_back(before.cacc - g.cacc);
        ++pairs;
        ppl_wins += after.utility_ppl <= g.utility_ppl;
      } else {
        ga_asr.push_back(1.0);
        ga_drop.push_back(1.0);
        note(fmt("seed %llu: GA purification failed: %s", static_cast<unsigned long long>(r.seed),
                 r.ga.failed_stage.empty() ? "no result" : r.ga.stage("purified")->reason.c_str()));
      }
    }
    note("pre asr " + list(pre));
    note("rope asr " + list(rope_asr) + " | cacc drop " + list(rope_drop));
    note("ga   asr " + list(ga_asr) + " | cacc drop " + list(ga_drop));
    const bool pass = pre_ok && median(rope_asr) <= kPurifiedAsr && median(ga_asr) <= kPurifiedAsr &&
                      median(rope_drop) <= kPurifyCaccPoints + 1e-12 && median(ga_drop) <= kPurifyCaccPoints + 1e-12 &&
                      ppl_wins >= static_cast<std::size_t>(std::ceil(kPplShare * runs.size()));
    verdict(3, "purification", pass,
            fmt("median asr rope %.3f ga %.3f (need <=%.2f, pre >= %.2f on every seed: %s); median cacc drop rope "
                "%.3f ga %.3f (need <=%.2f); ppl rope<=ga on %zu/%zu paired seeds (need >=%zu)",
                median(rope_asr), median(ga_asr), kPurifiedAsr, kAttackAsr, pre_ok ? "yes" : "no", median(rope_drop),
                median(ga_drop), kPurifyCaccPoints, ppl_wins, pairs,
                static_cast<std::size_t>(std::ceil(kPplShare * runs.size()))));
  }

  // ---- 4: watermark preservation ------------------------------------------
  {
    std::size_t wm = 0, poisoned = 0, rope = 0, ga = 0, purified_rope = 0;
    for (const auto* r : ok) {
      wm += metrics_of(r->rope, "watermarked").watermark_bit;
      poisoned += metrics_of(r->rope, "poisoned").watermark_bit;
      rope += metrics_of(r->rope, "purified").watermark_bit;
      purified_rope += !r->rope.stage("purified")->skipped;
      if (r->ga.stage("purified") && r->ga.stage("purified")->metrics) ga += metrics_of(r->ga, "purified").watermark_bit;
    }
    const std::size_t need = static_cast<std::size_t>(std::ceil(kWatermarkShare * runs.size()));
    verdict(4, "watermark preservation", wm >= need && poisoned >= need && rope >= need,
            fmt("verify=1 after watermarking %zu/%zu, after poisoning %zu/%zu, after RoPE %zu/%zu (need >=%zu each); "
                "GA %zu/%zu (recorded)",
                wm, runs.size(), poisoned, runs.size(), rope, runs.size(), need, ga, runs.size()));
    note(fmt("RoPE purification ran (detected) on %zu seeds", purified_rope));
  }

  // ---- 5: RoPE dynamics ----------------------------------------------------
  {
    std::size_t accepted = 0, good = 0, monotone = 0;
    std::string detail;
    for (const auto* r : ok) {
      const auto& p = r->rope.purification;
      if (!p || !p->detected || !p->ok || p->cosine_trace.empty()) continue;
      ++accepted;
      const auto& c = p->cosine_trace;
      const auto& l = p->loss_trace;
      const bool g = c.front() <= kCosineStart && c.back() >= kCosineEnd && l.front() >= kRotationStart &&
                     l.back() <= kRotationEnd;
      good += g;
      detail += fmt("%sseed %llu cos %.3f->%.3f loss %.3f->%.3f", detail.empty() ? "" : "; ",
                    static_cast<unsigned long long>(r->seed), c.front(), c.back(), l.front(), l.back());
      std::vector<double> avg;
      for (std::size_t i = 0; i + 5 <= c.size(); ++i) avg.push_back((c[i] + c[i + 1] + c[i + 2] + c[i + 3] + c[i + 4]) / 5);
      monotone += std::is_sorted(avg.begin(), avg.end());
    }
    note(fmt("5-step moving-average cosine non-decreasing on %zu/%zu accepted runs", monotone, accepted));
    verdict(5, "RoPE dynamics", accepted > 0 && good == accepted,
            fmt("%zu/%zu accepted runs start cos<=%.1f, loss>=%.1f and end cos>=%.1f, loss<=%.1f: %s", good, accepted,
                kCosineStart, kRotationStart, kCosineEnd, kRotationEnd, detail.c_str()));
  }

  // ---- 7: reproducibility --------------------------------------------------
  {
    bool same = false;
    std::string detail = "first seed did not complete";
    if (!runs.empty()) {
      auto cfg = config;
      cfg.purify.variant = bf::Variant::Rope;
      const auto again = bf::run_experiment(cfg, runs.front().seed, root / "repeat");
      same = bf::report_json(again, false) == bf::report_json(runs.front().rope, false);
      detail = fmt("seed %llu rerun from scratch: reports %s", static_cast<unsigned long long>(runs.front().seed),
                   same ? "byte-identical" : "differ");
    }
    verdict(7, "reproducibility", same, detail);
  }

  const double minutes =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count() / 60.0;
  std::sort(summary.begin(), summary.end());
  std::printf("\nsummary\n");
  for (const auto& [id, line] : summary) std::printf("%s\n", line.c_str());
  std::printf("%d criteria failed; %.1f minutes\n", failures, minutes);
  return failures == 0 ? 0 : 1;
}
