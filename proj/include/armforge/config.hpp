#pragma once

// Flat key=value config with [sections]. '#' and ';' start comments. Every
// key is optional; unknown sections or keys are errors.
//
//   [data]      train_scenes val_scenes height width classes dim regions
//               sigma prototype_scale seed dir
//   [noise]     mode radius target tolerance intrusion_probability
//   [train]     iterations base_lr batch_size loss gce_q indicator detach
//               warmup_fraction warmup_freeze_arm arm_ascent momentum
//               weight_decay arm_init_scale hidden conv3x3 eval_interval
//               histogram_bins histogram_scenes seed
//   [strategy]  kind ohem_keep ohem_min_frac linear_k linear_b p_norm
//   [output]    dir label

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

#include "armforge/synth_data.hpp"
#include "armforge/trainer.hpp"

namespace armforge {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  DatasetConfig data;
  TrainConfig train;
  std::string data_dir;  ///< empty: generate the dataset in memory
  std::string out_dir = "runs";
  std::string label;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& v, const std::string& where) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError(where + ": '" + v + "' is not a valid number");
  return out;
}

inline bool parse_bool(const std::string& v, const std::string& where) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(where + ": '" + v + "' is not a boolean");
}

}  // namespace detail

/// Applies one `section.key = value` assignment.
inline void apply_config_value(RunConfig& c, const std::string& section, const std::string& key,
                               const std::string& value, const std::string& where) {
  using Setter = std::function<void(const std::string&)>;
  auto i32 = [&](int& dst) -> Setter { return [&, where](const std::string& v) { dst = detail::parse_number<int>(v, where); }; };
  auto u64 = [&](std::uint64_t& dst) -> Setter {
    return [&, where](const std::string& v) { dst = detail::parse_number<std::uint64_t>(v, where); };
  };
  auto f64 = [&](double& dst) -> Setter { return [&, where](const std::string& v) { dst = detail::parse_number<double>(v, where); }; };
  auto flag = [&](bool& dst) -> Setter { return [&, where](const std::string& v) { dst = detail::parse_bool(v, where); }; };
  auto text = [&](std::string& dst) -> Setter { return [&](const std::string& v) { dst = v; }; };
  auto wrap = [&](auto fn) -> Setter {
    return [fn, where](const std::string& v) {
      try {
        fn(v);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(where + ": " + e.what());
      }
    };
  };

  auto& d = c.data;
  auto& t = c.train;
  const std::map<std::string, std::map<std::string, Setter>> table = {
      {"data",
       {{"train_scenes", i32(d.train_scenes)},
        {"val_scenes", i32(d.val_scenes)},
        {"height", i32(d.height)},
        {"width", i32(d.width)},
        {"classes", i32(d.classes)},
        {"dim", i32(d.dim)},
        {"regions", i32(d.regions)},
        {"sigma", f64(d.sigma)},
        {"prototype_scale", f64(d.prototype_scale)},
        {"seed", u64(d.seed)},
        {"dir", text(c.data_dir)}}},
      {"noise",
       {{"mode", wrap([&](const std::string& v) { d.noise.mode = parse_noise_mode(v); })},
        {"radius", i32(d.noise.radius)},
        {"target", f64(d.noise.target_fraction)},
        {"tolerance", f64(d.noise.tolerance)},
        {"intrusion_probability", f64(d.noise.intrusion_probability)}}},
      {"train",
       {{"iterations", i32(t.iterations)},
        {"base_lr", f64(t.base_lr)},
        {"batch_size", i32(t.batch_size)},
        {"loss", wrap([&](const std::string& v) { t.loss.kind = parse_loss(v); })},
        {"gce_q", f64(t.loss.gce_q)},
        {"indicator", wrap([&](const std::string& v) { t.indicator = parse_indicator(v); })},
        {"detach", flag(t.detach)},
        {"warmup_fraction", f64(t.warmup_fraction)},
        {"warmup_freeze_arm", flag(t.warmup_freeze_arm)},
        {"arm_ascent", flag(t.arm_ascent)},
        {"momentum", f64(t.momentum)},
        {"weight_decay", f64(t.weight_decay)},
        {"arm_init_scale", f64(t.arm_init_scale)},
        {"hidden", i32(t.hidden)},
        {"conv3x3", flag(t.conv3x3)},
        {"eval_interval", i32(t.eval_interval)},
        {"histogram_bins", i32(t.histogram_bins)},
        {"histogram_scenes", i32(t.histogram_scenes)},
        {"seed", u64(t.seed)}}},
      {"strategy",
       {{"kind", wrap([&](const std::string& v) { t.strategy.kind = parse_strategy(v); })},
        {"ohem_keep", f64(t.strategy.ohem_keep)},
        {"ohem_min_frac", f64(t.strategy.ohem_min_frac)},
        {"linear_k", f64(t.strategy.linear.k)},
        {"linear_b", f64(t.strategy.linear.b)},
        {"p_norm", f64(t.strategy.p_norm)}}},
      {"output", {{"dir", text(c.out_dir)}, {"label", text(c.label)}}},
  };
  const auto sec = table.find(section);
  if (sec == table.end()) throw ConfigError(where + ": unknown section [" + section + "]");
  const auto it = sec->second.find(key);
  if (it == sec->second.end()) throw ConfigError(where + ": unknown key '" + key + "' in [" + section + "]");
  it->second(value);
}

inline RunConfig parse_config(std::istream& is, const std::string& name = "config") {
  RunConfig c;
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto where = name + ":" + std::to_string(lineno);
    const auto cut = line.find_first_of("#;");
    const auto s = detail::trim(cut == std::string::npos ? line : line.substr(0, cut));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw ConfigError(where + ": malformed section header");
      section = detail::trim(std::string_view(s).substr(1, s.size() - 2));
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const auto key = detail::trim(std::string_view(s).substr(0, eq));
    const auto value = detail::trim(std::string_view(s).substr(eq + 1));
    if (section.empty()) throw ConfigError(where + ": key '" + key + "' outside any section");
    if (key.empty() || value.empty()) throw ConfigError(where + ": empty key or value");
    apply_config_value(c, section, key, value, where);
  }
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path);
  return parse_config(is, path);
}

inline RunConfig parse_config_text(const std::string& text) {
  std::istringstream is(text);
  return parse_config(is);
}

}  // namespace armforge
