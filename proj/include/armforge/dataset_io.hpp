#pragma once

// On-disk dataset layout:
//   <dir>/manifest.json
//   <dir>/{train,val}/scene_NNNN.f64         H*W*D little-endian doubles, pixel-major
//   <dir>/{train,val}/scene_NNNN_fine.pgm    P5, maxval 255
//   <dir>/{train,val}/scene_NNNN_coarse.pgm
// Label palette: class id c is stored as gray value c; IGNORE is 255.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "armforge/arm.hpp"
#include "armforge/synth_data.hpp"

namespace armforge {

namespace fs = std::filesystem;

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline void write_pgm(std::ostream& os, const LabelMap& m) {
  std::string raster(m.labels.size(), '\0');
  for (std::size_t i = 0; i < raster.size(); ++i) {
    const int l = m.labels[i];
    if (l != kIgnore && (l < 0 || l > 254)) throw std::invalid_argument("write_pgm: label out of range");
    raster[i] = static_cast<char>(static_cast<unsigned char>(l));
  }
  os << "P5\n" << m.width << " " << m.height << "\n255\n";
  os.write(raster.data(), static_cast<std::streamsize>(raster.size()));
  if (!os) throw std::runtime_error("write_pgm: write failed");
}

namespace detail {

inline std::string pgm_token(std::istream& is) {
  std::string tok;
  while (is) {
    const int c = is.peek();
    if (c == '#') {
      std::string skip;
      std::getline(is, skip);
    } else if (std::isspace(c)) {
      is.get();
    } else {
      break;
    }
  }
  is >> tok;
  return tok;
}

}  // namespace detail

inline LabelMap read_pgm(std::istream& is) {
  if (detail::pgm_token(is) != "P5") throw std::runtime_error("read_pgm: not a binary graymap (P5)");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(detail::pgm_token(is));
    h = std::stoi(detail::pgm_token(is));
    maxval = std::stoi(detail::pgm_token(is));
  } catch (const std::exception&) {
    throw std::runtime_error("read_pgm: malformed header");
  }
  if (w < 1 || h < 1) throw std::runtime_error("read_pgm: bad dimensions");
  if (maxval != 255) throw std::runtime_error("read_pgm: maxval must be 255");
  is.get();  // single whitespace before the raster
  LabelMap m(h, w);
  std::string raster(m.labels.size(), '\0');
  is.read(raster.data(), static_cast<std::streamsize>(raster.size()));
  if (is.gcount() != static_cast<std::streamsize>(raster.size())) throw std::runtime_error("read_pgm: truncated raster");
  for (std::size_t i = 0; i < raster.size(); ++i) m.labels[i] = static_cast<unsigned char>(raster[i]);
  return m;
}

inline void write_features(std::ostream& os, const FeatureMap& f) {
  for (double v : f.values.data) detail::write_le(os, v);
  if (!os) throw std::runtime_error("write_features: write failed");
}

inline FeatureMap read_features(std::istream& is, int height, int width, int dim) {
  FeatureMap f;
  f.image_height = height;
  f.values = Grid<double>(height, width, dim);
  for (auto& v : f.values.data) v = detail::read_le<double>(is);
  if (!is) throw std::runtime_error("read_features: truncated feature file");
  if (is.peek() != std::char_traits<char>::eof()) throw std::runtime_error("read_features: trailing bytes");
  return f;
}

inline nlohmann::json config_to_json(const DatasetConfig& c) {
  return {{"train_scenes", c.train_scenes},
          {"val_scenes", c.val_scenes},
          {"height", c.height},
          {"width", c.width},
          {"classes", c.classes},
          {"dim", c.dim},
          {"regions", c.regions},
          {"sigma", c.sigma},
          {"prototype_scale", c.prototype_scale},
          {"noise_mode", std::string(to_string(c.noise.mode))},
          {"noise_radius", c.noise.radius},
          {"noise_target", c.noise.target_fraction},
          {"noise_tolerance", c.noise.tolerance},
          {"noise_intrusion_probability", c.noise.intrusion_probability},
          {"seed", c.seed}};
}

inline DatasetConfig config_from_json(const nlohmann::json& j) {
  DatasetConfig c;
  c.train_scenes = j.at("train_scenes").get<int>();
  c.val_scenes = j.at("val_scenes").get<int>();
  c.height = j.at("height").get<int>();
  c.width = j.at("width").get<int>();
  c.classes = j.at("classes").get<int>();
  c.dim = j.at("dim").get<int>();
  c.regions = j.at("regions").get<int>();
  c.sigma = j.at("sigma").get<double>();
  c.prototype_scale = j.at("prototype_scale").get<double>();
  c.noise.mode = parse_noise_mode(j.at("noise_mode").get<std::string>());
  c.noise.radius = j.at("noise_radius").get<int>();
  c.noise.target_fraction = j.at("noise_target").get<double>();
  c.noise.tolerance = j.at("noise_tolerance").get<double>();
  c.noise.intrusion_probability = j.at("noise_intrusion_probability").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

namespace detail {

inline std::string scene_stem(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04d", index);
  return buf;
}

inline void write_file(const fs::path& p, const auto& writer) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + p.string() + " for writing");
  writer(os);
}

inline std::ifstream open_in(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + p.string());
  return is;
}

}  // namespace detail

/// Writes the dataset under `dir`. An existing manifest is an error unless
/// `force` is set, in which case the split directories are replaced.
inline void export_dataset(const Dataset& ds, const fs::path& dir, bool force) {
  const auto manifest = dir / "manifest.json";
  if (fs::exists(manifest) && !force)
    throw std::runtime_error(manifest.string() + " already exists (use --force to overwrite)");
  fs::create_directories(dir);
  nlohmann::json j;
  j["format"] = "armforge-dataset";
  j["version"] = 1;
  j["params"] = config_to_json(ds.config);
  j["fingerprint"] = hex64(ds.config.fingerprint());
  j["intrusion_probability"] = ds.intrusion_probability;
  j["train_mislabel_fraction"] = ds.train_mislabel_fraction;
  j["train_ignore_fraction"] = ds.train_ignore_fraction;
  j["prototypes"] = ds.prototypes;
  j["palette"] = {{"class", "gray value equals class id"}, {"ignore", kIgnore}};
  for (const char* split : {"train", "val"}) {
    const auto& scenes = std::string(split) == "train" ? ds.train : ds.val;
    const auto sub = dir / split;
    if (force) fs::remove_all(sub);
    fs::create_directories(sub);
    auto& arr = j["splits"][split];
    arr = nlohmann::json::array();
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      const auto& s = scenes[i];
      const auto stem = detail::scene_stem(static_cast<int>(i));
      detail::write_file(sub / (stem + ".f64"), [&](std::ostream& os) { write_features(os, s.features); });
      detail::write_file(sub / (stem + "_fine.pgm"), [&](std::ostream& os) { write_pgm(os, s.fine); });
      detail::write_file(sub / (stem + "_coarse.pgm"), [&](std::ostream& os) { write_pgm(os, s.coarse); });
      arr.push_back({{"stem", stem},
                     {"seed", s.seed},
                     {"mislabel_fraction", s.mislabel_fraction},
                     {"ignore_fraction", s.ignore_fraction}});
    }
  }
  detail::write_file(manifest, [&](std::ostream& os) { os << j.dump(2) << "\n"; });
}

/// Reads a dataset written by export_dataset. Every scene is checked against
/// the manifest (shape, class range, recorded noise statistics).
inline Dataset import_dataset(const fs::path& dir) {
  auto is = detail::open_in(dir / "manifest.json");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("manifest: " + std::string(e.what()));
  }
  if (j.value("format", "") != "armforge-dataset") throw std::runtime_error("manifest: unknown format");
  Dataset ds;
  ds.config = config_from_json(j.at("params"));
  const auto fp = hex64(ds.config.fingerprint());
  if (j.at("fingerprint").get<std::string>() != fp)
    throw std::runtime_error("manifest: fingerprint " + j.at("fingerprint").get<std::string>() +
                             " does not match parameters (" + fp + ")");
  ds.prototypes = j.at("prototypes").get<std::vector<std::vector<double>>>();
  ds.intrusion_probability = j.at("intrusion_probability").get<double>();
  const auto& c = ds.config;
  for (const char* split : {"train", "val"}) {
    auto& scenes = std::string(split) == "train" ? ds.train : ds.val;
    const auto& arr = j.at("splits").at(split);
    const int expected = std::string(split) == "train" ? c.train_scenes : c.val_scenes;
    if (static_cast<int>(arr.size()) != expected)
      throw std::runtime_error(std::string("manifest: ") + split + " lists " + std::to_string(arr.size()) +
                               " scenes, expected " + std::to_string(expected));
    for (const auto& e : arr) {
      const auto stem = e.at("stem").get<std::string>();
      const auto base = dir / split / stem;
      SceneSample s;
      s.seed = e.at("seed").get<std::uint64_t>();
      auto fin = detail::open_in(base.string() + ".f64");
      s.features = read_features(fin, c.height, c.width, c.dim);
      auto fi = detail::open_in(base.string() + "_fine.pgm");
      s.fine = read_pgm(fi);
      auto co = detail::open_in(base.string() + "_coarse.pgm");
      s.coarse = read_pgm(co);
      if (s.fine.height != c.height || s.fine.width != c.width || s.coarse.height != c.height ||
          s.coarse.width != c.width)
        throw std::runtime_error(base.string() + ": label size differs from manifest");
      s.fine.validate(c.classes);
      s.coarse.validate(c.classes);
      for (auto lab : s.fine.labels)
        if (lab == kIgnore) throw std::runtime_error(base.string() + ": fine labels contain IGNORE");
      s.update_noise_stats();
      if (s.mislabel_fraction != e.at("mislabel_fraction").get<double>() ||
          s.ignore_fraction != e.at("ignore_fraction").get<double>())
        throw std::runtime_error(base.string() + ": noise statistics differ from manifest");
      scenes.push_back(std::move(s));
    }
  }
  ds.train_mislabel_fraction = j.at("train_mislabel_fraction").get<double>();
  ds.train_ignore_fraction = j.at("train_ignore_fraction").get<double>();
  return ds;
}

}  // namespace armforge
