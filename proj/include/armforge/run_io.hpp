#pragma once

// Run artifacts. For a run with stem S = run_<confighash>_s<seed>:
//   S.jsonl         one JSON object per evaluation point
//   S.summary.json  final metrics, collapse diagnostics, histogram, weight curve
//   S.hist.csv      bin_center,count,mean_loss
//   S.curve.csv     v,w (reweighter strategies only)
//   S.arm / S.arm.txt / S.net   checkpoints
//   S.log           wall-clock timing; the only file that varies between reruns

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "armforge/dataset_io.hpp"
#include "armforge/trainer.hpp"

namespace armforge {

inline std::string config_hash(const TrainConfig& cfg, const DatasetConfig& data) {
  return hex64(fnv1a(cfg.canonical(false) + "--\n" + data.canonical()));
}

inline std::string run_stem(const TrainConfig& cfg, const DatasetConfig& data) {
  return "run_" + config_hash(cfg, data) + "_s" + std::to_string(cfg.seed);
}

namespace detail {

/// NaN is not representable in JSON; empty bins and undefined values become null.
inline nlohmann::json num_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

inline nlohmann::json vec_or_null(const std::vector<double>& xs) {
  auto a = nlohmann::json::array();
  for (double x : xs) a.push_back(num_or_null(x));
  return a;
}

}  // namespace detail

inline nlohmann::json eval_to_json(const EvalPoint& e) {
  return {{"iteration", e.iteration},
          {"lr", e.lr},
          {"aAcc", e.aacc},
          {"mAcc", e.macc},
          {"mIoU", e.miou},
          {"mean_loss", detail::num_or_null(e.mean_loss)},
          {"weight_entropy", detail::num_or_null(e.weight_entropy)},
          {"mean_raw_weight", detail::num_or_null(e.mean_raw_weight)}};
}

inline nlohmann::json summary_to_json(const RunRecord& r, const std::string& stem, const std::string& label) {
  nlohmann::json j;
  j["format"] = "armforge-run";
  j["version"] = 1;
  j["stem"] = stem;
  j["label"] = label;
  j["seed"] = r.seed;
  j["dataset_fingerprint"] = hex64(r.dataset_fingerprint);
  j["config"] = r.config_echo;
  j["final"] = {{"aAcc", r.final_scores.aacc},
                {"mAcc", r.final_scores.macc},
                {"mIoU", r.final_scores.miou},
                {"class_acc", detail::vec_or_null(r.final_scores.class_acc)},
                {"class_iou", detail::vec_or_null(r.final_scores.class_iou)}};
  j["tail_mean_raw_weight"] = r.tail_mean_raw_weight;
  j["tail_weight_entropy"] = r.tail_weight_entropy;
  j["aborted_steps"] = r.aborted_steps;
  j["collapsed"] = r.collapsed;
  j["histogram"] = {{"bins", r.histogram.bins},
                    {"count", r.histogram.count},
                    {"mean_loss", detail::vec_or_null(r.histogram.mean_loss)},
                    {"trend", histogram_trend(r.histogram)}};
  if (!r.weight_curve_v.empty()) j["weight_curve"] = {{"v", r.weight_curve_v}, {"w", r.weight_curve_w}};
  return j;
}

/// Writes every artifact of a run into `dir`; returns the stem. Existing files
/// for the same stem are an error unless `force` is set.
inline std::string write_run(const RunRecord& r, const TrainConfig& cfg, const DatasetConfig& data,
                             const fs::path& dir, bool force, const std::string& label = "") {
  const auto stem = run_stem(cfg, data);
  fs::create_directories(dir);
  const auto summary = dir / (stem + ".summary.json");
  if (fs::exists(summary) && !force) throw std::runtime_error(summary.string() + " already exists (use --force to overwrite)");
  detail::write_file(dir / (stem + ".jsonl"), [&](std::ostream& os) {
    for (const auto& e : r.evals) os << eval_to_json(e).dump() << "\n";
  });
  detail::write_file(dir / (stem + ".hist.csv"), [&](std::ostream& os) {
    os << std::setprecision(17);
    write_histogram_csv(os, r.histogram);
  });
  if (!r.weight_curve_v.empty()) {
    detail::write_file(dir / (stem + ".curve.csv"), [&](std::ostream& os) {
      os << std::setprecision(17) << "v,w\n";
      for (std::size_t i = 0; i < r.weight_curve_v.size(); ++i) os << r.weight_curve_v[i] << "," << r.weight_curve_w[i] << "\n";
    });
  }
  if (cfg.strategy.kind == StrategyKind::kArm) {
    detail::write_file(dir / (stem + ".arm"), [&](std::ostream& os) { write_arm_binary(os, r.arm); });
    detail::write_file(dir / (stem + ".arm.txt"), [&](std::ostream& os) { write_arm_text(os, r.arm); });
  }
  detail::write_file(dir / (stem + ".net"), [&](std::ostream& os) { write_toy_binary(os, r.net); });
  detail::write_file(dir / (stem + ".log"), [&](std::ostream& os) {
    os << "wall_seconds " << std::fixed << std::setprecision(3) << r.wall_seconds << "\n";
  });
  detail::write_file(summary, [&](std::ostream& os) { os << summary_to_json(r, stem, label).dump(2) << "\n"; });
  return stem;
}

struct RunSummary {
  std::string path;
  std::string stem;
  std::string label;
  std::string dataset_fingerprint;
  double aacc = 0, macc = 0, miou = 0;
  bool collapsed = false;
};

inline RunSummary read_summary(const fs::path& p) {
  auto is = detail::open_in(p);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(p.string() + ": " + e.what());
  }
  if (j.value("format", "") != "armforge-run") throw std::runtime_error(p.string() + ": not a run summary");
  RunSummary s;
  s.path = p.string();
  s.stem = j.at("stem").get<std::string>();
  s.label = j.value("label", "");
  s.dataset_fingerprint = j.at("dataset_fingerprint").get<std::string>();
  s.aacc = j.at("final").at("aAcc").get<double>();
  s.macc = j.at("final").at("mAcc").get<double>();
  s.miou = j.at("final").at("mIoU").get<double>();
  s.collapsed = j.at("collapsed").get<bool>();
  return s;
}

/// Summaries found at `p`: the file itself, or every *.summary.json in a
/// directory in name order.
inline std::vector<RunSummary> collect_summaries(const fs::path& p) {
  std::vector<RunSummary> out;
  if (fs::is_regular_file(p)) {
    out.push_back(read_summary(p));
    return out;
  }
  if (!fs::is_directory(p)) throw std::runtime_error(p.string() + ": no such run file or directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(p)) {
    const auto name = e.path().filename().string();
    if (name.size() > 13 && name.ends_with(".summary.json")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) out.push_back(read_summary(f));
  if (out.empty()) throw std::runtime_error(p.string() + ": contains no run summaries");
  return out;
}

inline std::string format_delta(double v, double base) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << "(" << (v - base >= 0 ? "+" : "") << (v - base) * 100.0 << ")";
  return os.str();
}

/// Comparison against the first run. Throws when dataset fingerprints differ.
struct ReportTables {
  std::string text;
  std::string csv;
};

inline ReportTables make_report(const std::vector<RunSummary>& runs) {
  if (runs.empty()) throw std::invalid_argument("report: no runs");
  for (const auto& r : runs)
    if (r.dataset_fingerprint != runs.front().dataset_fingerprint)
      throw std::runtime_error("report: dataset hash " + r.dataset_fingerprint + " (" + r.path +
                               ") differs from baseline " + runs.front().dataset_fingerprint + " (" +
                               runs.front().path + ")");
  const auto& b = runs.front();
  auto name = [](const RunSummary& r) { return r.label.empty() ? r.stem : r.label + " " + r.stem; };
  std::size_t w = 3;
  for (const auto& r : runs) w = std::max(w, name(r).size());
  std::ostringstream t, c;
  t << std::left << std::setw(static_cast<int>(w)) << "run" << "  " << std::right << std::setw(16) << "aAcc"
    << std::setw(16) << "mAcc" << std::setw(16) << "mIoU" << "\n";
  c << "run,aAcc,mAcc,mIoU,d_aAcc,d_mAcc,d_mIoU,collapsed\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& r = runs[i];
    auto cell = [&](double v, double base) {
      std::ostringstream os;
      os << std::fixed << std::setprecision(2) << v * 100.0;
      if (i > 0) os << " " << format_delta(v, base);
      return os.str();
    };
    t << std::left << std::setw(static_cast<int>(w)) << name(r) << "  " << std::right << std::setw(16)
      << cell(r.aacc, b.aacc) << std::setw(16) << cell(r.macc, b.macc) << std::setw(16) << cell(r.miou, b.miou)
      << (r.collapsed ? "  collapsed" : "") << "\n";
    c << std::fixed << std::setprecision(4) << name(r) << "," << r.aacc * 100 << "," << r.macc * 100 << ","
      << r.miou * 100 << "," << (r.aacc - b.aacc) * 100 << "," << (r.macc - b.macc) * 100 << ","
      << (r.miou - b.miou) * 100 << "," << (r.collapsed ? 1 : 0) << "\n";
  }
  return {t.str(), c.str()};
}

}  // namespace armforge
