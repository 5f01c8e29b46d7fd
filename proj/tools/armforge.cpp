// armforge command-line driver: gen-data, train, verify, report.
//
// Exit status: 0 success, 1 verification failure, 2 usage, config or I/O error.

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <CLI11.hpp>

#include "armforge/armforge.hpp"

namespace fs = std::filesystem;
using namespace armforge;

namespace {

constexpr int kOk = 0;
constexpr int kVerifyFailed = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int worker_limit() {
  const char* env = std::getenv("ARMFORGE_THREADS");
  if (!env || !*env) return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) throw UsageError("ARMFORGE_THREADS must be a positive integer, got '" + std::string(env) + "'");
  return static_cast<int>(n);
}

RunConfig load(const std::string& path) { return path.empty() ? RunConfig{} : load_config(path); }

bool non_empty_dir(const fs::path& p) { return fs::is_directory(p) && !fs::is_empty(p); }

// ---------------------------------------------------------------------------

int cmd_gen_data(const std::string& config, std::optional<std::uint64_t> seed, const std::string& out, bool force) {
  auto rc = load(config);
  if (seed) rc.data.seed = *seed;
  const fs::path dir = !out.empty() ? fs::path(out) : !rc.data_dir.empty() ? fs::path(rc.data_dir) : fs::path("data");
  if (non_empty_dir(dir) && !force)
    throw UsageError(dir.string() + " exists and is not empty (use --force to overwrite)");
  const auto ds = build_dataset(rc.data);
  export_dataset(ds, dir, true);
  std::cout << "wrote " << ds.train.size() << " train + " << ds.val.size() << " val scenes to " << dir.string()
            << "\n"
            << "dataset " << hex64(ds.config.fingerprint()) << "  mislabel " << std::fixed << std::setprecision(4)
            << ds.train_mislabel_fraction << "  ignore " << ds.train_ignore_fraction << "\n";
  return kOk;
}

Dataset obtain_dataset(const RunConfig& rc) {
  if (rc.data_dir.empty()) return build_dataset(rc.data);
  auto ds = import_dataset(rc.data_dir);
  if (ds.config.fingerprint() != rc.data.fingerprint())
    throw UsageError("dataset in " + rc.data_dir + " has hash " + hex64(ds.config.fingerprint()) +
                     " but the config describes " + hex64(rc.data.fingerprint()));
  return ds;
}

struct Variant {
  std::string label;
  TrainConfig cfg;
};

std::vector<Variant> ablation_variants(const std::string& axis, const TrainConfig& base) {
  std::vector<Variant> out;
  auto add = [&](std::string label, auto edit) {
    TrainConfig c = base;
    edit(c);
    out.push_back({std::move(label), c});
  };
  if (axis.empty()) {
    out.push_back({"", base});
  } else if (axis == "detach") {
    add("detach=on", [](TrainConfig& c) { c.detach = true; });
    add("detach=off", [](TrainConfig& c) { c.detach = false; });
  } else if (axis == "norm") {
    for (double p : {1.0, 2.0, 3.0})
      add("p=" + std::to_string(static_cast<int>(p)), [p](TrainConfig& c) { c.strategy.p_norm = p; });
  } else if (axis == "sign") {
    add("ascent", [](TrainConfig& c) { c.arm_ascent = true; });
    add("descent", [](TrainConfig& c) { c.arm_ascent = false; });
  } else if (axis == "input") {
    for (auto k : {IndicatorKind::kVariance, IndicatorKind::kStd, IndicatorKind::kLogVariance, IndicatorKind::kEntropy})
      add("input=" + std::string(to_string(k)), [k](TrainConfig& c) { c.indicator = k; });
  } else {
    throw UsageError("unknown ablation axis '" + axis + "' (expected detach|norm|sign|input)");
  }
  return out;
}

int cmd_train(const std::string& config, std::optional<std::uint64_t> seed, const std::string& out, bool force,
              const std::string& ablate) {
  auto rc = load(config);
  if (seed) rc.train.seed = *seed;
  if (!out.empty()) rc.out_dir = out;
  rc.train.validate();
  const auto variants = ablation_variants(ablate, rc.train);
  for (const auto& v : variants) v.cfg.validate();
  const auto ds = obtain_dataset(rc);

  // Independent runs fan out over at most ARMFORGE_THREADS workers.
  const int workers = std::min<int>(worker_limit(), static_cast<int>(variants.size()));
  std::vector<std::optional<RunRecord>> records(variants.size());
  std::vector<std::exception_ptr> errors(variants.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next++) < variants.size();) {
      try {
        records[i] = run_experiment(variants[i].cfg, ds);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int k = 1; k < workers; ++k) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  std::vector<RunSummary> summaries;
  for (std::size_t i = 0; i < variants.size(); ++i) {
    const auto& v = variants[i];
    const auto label = v.label.empty() ? rc.label : (rc.label.empty() ? v.label : rc.label + " " + v.label);
    const auto stem = write_run(*records[i], v.cfg, ds.config, rc.out_dir, force, label);
    const auto& r = *records[i];
    std::cout << stem << (label.empty() ? "" : "  [" + label + "]") << "  mIoU " << std::fixed << std::setprecision(2)
              << r.final_scores.miou * 100 << "  aAcc " << r.final_scores.aacc * 100 << "  mAcc "
              << r.final_scores.macc * 100 << (r.collapsed ? "  COLLAPSED" : "") << "\n";
    summaries.push_back(read_summary(fs::path(rc.out_dir) / (stem + ".summary.json")));
  }
  if (summaries.size() > 1) std::cout << "\n" << make_report(summaries).text;
  return kOk;
}

int cmd_verify(const std::string& which) {
  std::vector<VerifyReport> reports;
  if (which == "toy_lp" || which == "all") reports.push_back(verify_toy_lp());
  if (which == "holder" || which == "all") reports.push_back(verify_holder());
  if (which == "gradients" || which == "all") reports.push_back(verify_gradients());
  bool ok = true;
  for (const auto& r : reports) {
    std::cout << "[" << r.suite << "]\n";
    for (const auto& l : r.lines) {
      std::cout << "  " << std::left << std::setw(48) << l.name << std::right << std::setw(14) << std::scientific
                << std::setprecision(3) << l.value << (l.upper ? "  < " : "  >= ") << l.threshold << "  "
                << (l.pass() ? "ok" : "FAIL") << "\n";
    }
    if (r.suite == "toy_lp") {
      const std::vector<double> loss = {1.2, 0.6, 0.1};
      for (double p : {1.0, 2.0, 3.0}) {
        const auto w = lp_toy_maximizer(loss, p);
        std::cout << "  p=" << static_cast<int>(p) << " w = (" << std::fixed << std::setprecision(4) << w[0] << ", "
                  << w[1] << ", " << w[2] << ")\n";
      }
    }
    ok = ok && r.passed();
  }
  std::cout << (ok ? "verify: PASS\n" : "verify: FAIL\n");
  return ok ? kOk : kVerifyFailed;
}

int cmd_report(const std::vector<std::string>& paths, const std::string& out) {
  std::vector<RunSummary> runs;
  for (const auto& p : paths)
    for (auto& s : collect_summaries(p)) runs.push_back(std::move(s));
  const auto tables = make_report(runs);
  std::cout << tables.text;
  if (!out.empty()) {
    std::ofstream os(out);
    if (!os) throw std::runtime_error("cannot write " + out);
    os << tables.csv;
  } else {
    std::cout << "\n" << tables.csv;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Per-step buffers are a few MB; keep them out of mmap/munmap churn.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"armforge: confidence-based adversarial reweighting on a synthetic noisy-label testbed"};
  app.require_subcommand(1);

  std::string config, out, ablate, which;
  std::optional<std::uint64_t> seed;
  bool force = false;
  std::vector<std::string> paths;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset and its manifest");
  gen->add_option("--config", config, "config file");
  gen->add_option("--seed", seed, "dataset master seed (overrides [data] seed)");
  gen->add_option("--out", out, "dataset directory (overrides [data] dir)");
  gen->add_flag("--force", force, "overwrite a non-empty target directory");

  auto* train = app.add_subcommand("train", "train one configuration (or an ablation pair/grid)");
  train->add_option("--config", config, "config file");
  train->add_option("--seed", seed, "training seed (overrides [train] seed)");
  train->add_option("--out", out, "run directory (overrides [output] dir)");
  train->add_flag("--force", force, "overwrite existing run files");
  train->add_option("--ablate", ablate, "ablation axis: detach|norm|sign|input");

  auto* verify = app.add_subcommand("verify", "run an oracle suite");
  verify->add_option("which", which, "holder|gradients|toy_lp|all")
      ->required()
      ->check(CLI::IsMember({"holder", "gradients", "toy_lp", "all"}));

  auto* report = app.add_subcommand("report", "compare runs against the first one");
  report->add_option("runs", paths, "run directories or summary files")->required();
  report->add_option("--out", out, "write the CSV table here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return cmd_gen_data(config, seed, out, force);
    if (*train) return cmd_train(config, seed, out, force, ablate);
    if (*verify) return cmd_verify(which);
    if (*report) return cmd_report(paths, out);
  } catch (const std::exception& e) {
    std::cerr << "armforge: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
