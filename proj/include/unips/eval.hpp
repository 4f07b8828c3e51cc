#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "unips/model.hpp"
#include "unips/renderkit/dataset.hpp"
#include "unips/train.hpp"

namespace unips {

class EvalError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline Mask valid_intersection(const NormalMap& a, const NormalMap& b) {
  if (a.height() != b.height() || a.width() != b.width())
    throw EvalError("normal maps differ in size: " + std::to_string(a.height()) + "x" + std::to_string(a.width()) +
                    " vs " + std::to_string(b.height()) + "x" + std::to_string(b.width()));
  Mask m(a.height(), a.width());
  for (std::size_t i = 0; i < m.v.size(); ++i) m.v[i] = a.valid.v[i] && b.valid.v[i];
  return m;
}

/// Angle between two stored normals; atan2 keeps identical vectors at
/// exactly zero and ignores small departures from unit length.
inline double angle_degrees(const Image& a, const Image& b, int y, int x) {
  const double ax = a.at(y, x, 0), ay = a.at(y, x, 1), az = a.at(y, x, 2);
  const double bx = b.at(y, x, 0), by = b.at(y, x, 1), bz = b.at(y, x, 2);
  const double cx = ay * bz - az * by, cy = az * bx - ax * bz, cz = ax * by - ay * bx;
  const double dot = ax * bx + ay * by + az * bz;
  return std::atan2(std::sqrt(cx * cx + cy * cy + cz * cz), dot) * 180.0 / std::numbers::pi;
}

/// Mean angular error in degrees over pixels valid in both maps.
inline double mae_degrees(const NormalMap& pred, const NormalMap& gt) {
  const Mask m = valid_intersection(pred, gt);
  double sum = 0;
  std::int64_t n = 0;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m(y, x)) {
        sum += angle_degrees(pred.n, gt.n, y, x);
        ++n;
      }
  if (n == 0) throw EvalError("mae: no pixel is valid in both maps");
  return sum / static_cast<double>(n);
}

/// Per-pixel angular error in degrees (1 channel, 0 outside the shared mask).
inline Image angular_error_map(const NormalMap& pred, const NormalMap& gt) {
  const Mask m = valid_intersection(pred, gt);
  Image out(m.height, m.width, 1);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m(y, x)) out.at(y, x, 0) = static_cast<float>(angle_degrees(pred.n, gt.n, y, x));
  return out;
}

/// Blue-green-red ramp over [0, cap] degrees; background black.
inline Image colorize_error(const Image& err, const Mask& valid, double cap = 80.0) {
  Image out(err.height, err.width, 3);
  for (int y = 0; y < err.height; ++y)
    for (int x = 0; x < err.width; ++x) {
      if (!valid(y, x)) continue;
      const float t = static_cast<float>(std::clamp(err.at(y, x, 0) / cap, 0.0, 1.0));
      out.at(y, x, 0) = std::clamp(2.f * t - 1.f, 0.f, 1.f);
      out.at(y, x, 1) = 1.f - std::abs(2.f * t - 1.f);
      out.at(y, x, 2) = std::clamp(1.f - 2.f * t, 0.f, 1.f);
    }
  return out;
}

inline void write_error_png(const std::string& path, const NormalMap& pred, const NormalMap& gt, double cap = 80.0) {
  write_png8(path, colorize_error(angular_error_map(pred, gt), valid_intersection(pred, gt), cap));
}

// ------------------------------------------------------------------ report

struct EvalRow {
  std::string scene;
  std::string variant;
  double mae = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::string fingerprint;
  double seconds = 0;

  double mean() const {
    if (rows.empty()) throw EvalError("report: no rows");
    double s = 0;
    for (const auto& r : rows) s += r.mae;
    return s / static_cast<double>(rows.size());
  }

  /// Mean per lighting variant, keyed by variant name.
  std::map<std::string, double> variant_means() const {
    std::map<std::string, std::pair<double, int>> acc;
    for (const auto& r : rows) {
      acc[r.variant].first += r.mae;
      ++acc[r.variant].second;
    }
    std::map<std::string, double> out;
    for (const auto& [k, v] : acc) out[k] = v.first / v.second;
    return out;
  }
};

inline void write_report_csv(const std::string& path, const EvalReport& r) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << std::setprecision(8);
  os << "scene,variant,mae_deg\n";
  for (const auto& row : r.rows) os << row.scene << ',' << row.variant << ',' << row.mae << '\n';
  for (const auto& [v, m] : r.variant_means()) os << "mean," << v << ',' << m << '\n';
  os << "mean,all," << r.mean() << '\n';
  os << "# fingerprint=" << r.fingerprint << '\n';
}

/// 64-bit FNV-1a, stable across platforms.
inline std::string fingerprint(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// ------------------------------------------------------------ eval scenes

struct EvalScene {
  std::string name;
  std::string variant;
  std::vector<Image> images;
  NormalMap normals;
};

inline std::string read_variant(const std::filesystem::path& dir) {
  std::ifstream is(dir / "meta.json");
  if (!is) return "unknown";
  const auto j = nlohmann::json::parse(is, nullptr, false);
  if (j.is_discarded() || !j.contains("lighting_variant")) return "unknown";
  return j["lighting_variant"].get<std::string>();
}

inline std::vector<EvalScene> load_eval_scenes(const std::filesystem::path& root, int max_images = -1) {
  std::vector<EvalScene> out;
  for (const auto& dir : rk::list_scenes(root)) {
    auto sd = rk::read_scene(dir, max_images);
    out.push_back({sd.name, read_variant(dir), std::move(sd.images), std::move(sd.normals)});
  }
  if (out.empty()) throw IoError("no scenes under " + root.string());
  return out;
}

/// A predicted map: normal.pfm with mask.png, or nonzero normals as the mask.
inline NormalMap read_normal_map(const std::filesystem::path& dir) {
  const auto np = dir / "normal.pfm";
  if (!std::filesystem::exists(np)) throw IoError("missing " + np.string());
  NormalMap nm;
  nm.n = read_pfm(np.string());
  if (nm.n.channels != 3) throw IoError(np.string() + ": expected 3 channels");
  const auto mp = dir / "mask.png";
  if (std::filesystem::exists(mp)) {
    nm.valid = read_mask_png(mp.string());
  } else {
    nm.valid = Mask(nm.n.height, nm.n.width);
    for (int y = 0; y < nm.n.height; ++y)
      for (int x = 0; x < nm.n.width; ++x)
        nm.valid.set(y, x, nm.n.at(y, x, 0) != 0.f || nm.n.at(y, x, 1) != 0.f || nm.n.at(y, x, 2) != 0.f);
  }
  return nm;
}

/// Compares pred_root/<scene>/normal.pfm with every ground-truth scene.
inline EvalReport evaluate_directories(const std::filesystem::path& pred_root, const std::filesystem::path& gt_root,
                                       const std::string& error_png_dir = "") {
  const auto t0 = std::chrono::steady_clock::now();
  EvalReport rep;
  std::string ids;
  for (const auto& dir : rk::list_scenes(gt_root)) {
    const auto name = dir.filename().string();
    NormalMap gt;
    gt.n = read_pfm((dir / "normal.pfm").string());
    gt.valid = read_mask_png((dir / "mask.png").string());
    const auto pred = read_normal_map(pred_root / name);
    rep.rows.push_back({name, read_variant(dir), mae_degrees(pred, gt)});
    ids += name + ";";
    if (!error_png_dir.empty()) {
      std::filesystem::create_directories(error_png_dir);
      write_error_png((std::filesystem::path(error_png_dir) / (name + "_error.png")).string(), pred, gt);
    }
  }
  rep.fingerprint = fingerprint(pred_root.string() + "|" + ids);
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

/// Runs the model on the first `q` images (all when q <= 0) of each scene.
template <class T>
EvalReport evaluate_model(const Model<T>& model, const std::vector<EvalScene>& scenes, int q = -1,
                          int batch = 4096) {
  const auto t0 = std::chrono::steady_clock::now();
  EvalReport rep;
  for (const auto& s : scenes) {
    const auto n = q > 0 ? std::min<std::size_t>(static_cast<std::size_t>(q), s.images.size()) : s.images.size();
    const std::vector<Image> imgs(s.images.begin(), s.images.begin() + static_cast<std::ptrdiff_t>(n));
    const auto pred = infer_normal_map(model, imgs, s.normals.valid, batch);
    rep.rows.push_back({s.name, s.variant, mae_degrees(pred, s.normals)});
  }
  rep.fingerprint = fingerprint(to_json(model.config()).dump() + "|q=" + std::to_string(q));
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

// --------------------------------------------------------------- ablation

enum class AblationAxis { Placement, Canonical, Uniform, Aggregation, Q };

inline AblationAxis parse_axis(const std::string& s) {
  if (s == "placement") return AblationAxis::Placement;
  if (s == "canonical") return AblationAxis::Canonical;
  if (s == "uniform") return AblationAxis::Uniform;
  if (s == "aggregation") return AblationAxis::Aggregation;
  if (s == "q") return AblationAxis::Q;
  throw ConfigError("unknown ablation axis '" + s + "' (placement|canonical|uniform|aggregation|q)");
}

inline const char* axis_name(AblationAxis a) {
  switch (a) {
    case AblationAxis::Placement: return "placement";
    case AblationAxis::Canonical: return "canonical";
    case AblationAxis::Uniform: return "uniform";
    case AblationAxis::Aggregation: return "aggregation";
    case AblationAxis::Q: return "q";
  }
  return "?";
}

inline std::vector<std::string> default_axis_values(AblationAxis a) {
  switch (a) {
    case AblationAxis::Placement: return {"none", "during", "pre-fusion", "post-fusion"};
    case AblationAxis::Canonical: return {"32", "64", "128"};
    case AblationAxis::Uniform: return {"spatial", "uniform"};
    case AblationAxis::Aggregation: return {"pma", "maxpool"};
    case AblationAxis::Q: return {"1", "4", "8", "32"};
  }
  return {};
}

inline int parse_positive(const std::string& v, const char* what) {
  std::size_t used = 0;
  int n = 0;
  try {
    n = std::stoi(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || n < 1) throw ConfigError(std::string(what) + ": expected a positive integer, got '" + v + "'");
  return n;
}

/// Base config with one axis value applied. The q axis leaves it unchanged.
inline ModelConfig apply_axis_value(ModelConfig cfg, AblationAxis axis, const std::string& v) {
  switch (axis) {
    case AblationAxis::Placement: cfg.encoder.placement = parse_placement(v); break;
    case AblationAxis::Canonical: cfg.encoder.s = parse_positive(v, "canonical"); break;
    case AblationAxis::Uniform:
      if (v == "uniform" || v == "true" || v == "1") cfg.encoder.uniform = true;
      else if (v == "spatial" || v == "false" || v == "0") cfg.encoder.uniform = false;
      else throw ConfigError("uniform: expected spatial|uniform, got '" + v + "'");
      break;
    case AblationAxis::Aggregation: cfg.decoder.aggregation = parse_aggregation(v); break;
    case AblationAxis::Q: parse_positive(v, "q"); break;
  }
  cfg.validate();
  return cfg;
}

inline nlohmann::json to_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},   {"batch", t.batch},         {"lr", t.lr},         {"weight_decay", t.weight_decay},
          {"decay_factor", t.decay_factor}, {"decay_period", t.decay_period}, {"n_r", t.n_r}, {"q", t.q},
          {"augment", t.augment}, {"max_steps", t.max_steps}, {"seed", t.seed}};
}

struct AblationRow {
  std::string value;
  std::map<std::string, double> variant_mae;
  double mae = 0;  // mean over all test scenes
  double train_seconds = 0;
  double eval_seconds = 0;
  std::string fingerprint;
};

struct AblationSetup {
  AblationAxis axis = AblationAxis::Q;
  std::vector<std::string> values;
  ModelConfig model;
  TrainConfig train;
  int test_q = 32;
  std::string cache_dir;  // trained models are reused from here when present
  std::function<void(const std::string&)> log;
};

/// Trains (or loads from cache) the model for a config. Interrupted runs
/// resume from their last epoch checkpoint.
template <class T>
Model<T> trained_model(const ModelConfig& mc, const TrainConfig& tc, const std::vector<TrainScene>& train_set,
                       const std::string& data_id, const std::string& cache_dir, double* seconds,
                       const std::function<void(const std::string&)>& log) {
  const auto fp = fingerprint(to_json(mc).dump() + to_json(tc).dump() + data_id);
  Model<T> model(mc);
  const auto t0 = std::chrono::steady_clock::now();
  if (cache_dir.empty()) {
    train(model, train_set, tc);
  } else {
    const auto dir = std::filesystem::path(cache_dir) / fp;
    const auto done = dir / "complete";
    const auto latest = (dir / "model.upsw").string();
    if (std::filesystem::exists(done)) {
      if (log) log("cached model " + dir.string());
      model.load(latest);
    } else {
      TrainOptions opts;
      opts.out_dir = dir.string();
      if (std::filesystem::exists(optimizer_path(latest))) opts.resume = latest;
      if (log) {
        log((opts.resume.empty() ? "training " : "resuming ") + dir.string());
        opts.on_step = [&](const StepRecord& r) {
          if (r.step % 50 == 0) log("  step " + std::to_string(r.step) + " epoch " + std::to_string(r.epoch) +
                                    " loss " + std::to_string(r.loss));
        };
      }
      train(model, train_set, tc, opts);
      std::ofstream(done) << "ok\n";
    }
  }
  if (seconds) *seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return model;
}

/// One row per axis value, ranked by mean MAE (ascending).
template <class T>
std::vector<AblationRow> run_ablation(const AblationSetup& setup, const std::vector<TrainScene>& train_set,
                                      const std::vector<EvalScene>& test_set, const std::string& data_id = "") {
  if (setup.values.empty()) throw ConfigError("ablation: no values");
  std::vector<AblationRow> rows;
  std::unique_ptr<Model<T>> shared;  // the q axis evaluates one model
  double shared_seconds = 0;
  for (const auto& v : setup.values) {
    const auto mc = apply_axis_value(setup.model, setup.axis, v);
    AblationRow row;
    row.value = v;
    Model<T>* model = nullptr;
    std::unique_ptr<Model<T>> own;
    if (setup.axis == AblationAxis::Q) {
      if (!shared)
        shared = std::make_unique<Model<T>>(
            trained_model<T>(mc, setup.train, train_set, data_id, setup.cache_dir, &shared_seconds, setup.log));
      model = shared.get();
      row.train_seconds = shared_seconds;
    } else {
      own = std::make_unique<Model<T>>(
          trained_model<T>(mc, setup.train, train_set, data_id, setup.cache_dir, &row.train_seconds, setup.log));
      model = own.get();
    }
    const int q = setup.axis == AblationAxis::Q ? parse_positive(v, "q") : setup.test_q;
    const auto rep = evaluate_model(*model, test_set, q);
    row.variant_mae = rep.variant_means();
    row.mae = rep.mean();
    row.eval_seconds = rep.seconds;
    row.fingerprint = rep.fingerprint;
    if (setup.log)
      setup.log(std::string(axis_name(setup.axis)) + "=" + v + " mae " + std::to_string(row.mae) + " (train " +
                std::to_string(row.train_seconds) + " s, eval " + std::to_string(row.eval_seconds) + " s)");
    rows.push_back(std::move(row));
  }
  std::stable_sort(rows.begin(), rows.end(), [](const AblationRow& a, const AblationRow& b) { return a.mae < b.mae; });
  return rows;
}

inline void write_ablation_csv(const std::string& path, AblationAxis axis, const std::vector<AblationRow>& rows) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  std::vector<std::string> variants;
  for (const auto& r : rows)
    for (const auto& [k, _] : r.variant_mae)
      if (std::find(variants.begin(), variants.end(), k) == variants.end()) variants.push_back(k);
  std::sort(variants.begin(), variants.end());
  os << std::setprecision(8) << "rank," << axis_name(axis);
  for (const auto& v : variants) os << ",mae_" << v;
  os << ",mae_all\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    os << i + 1 << ',' << r.value;
    for (const auto& v : variants) {
      const auto it = r.variant_mae.find(v);
      os << ',';
      if (it != r.variant_mae.end()) os << it->second;
    }
    os << ',' << r.mae << '\n';
  }
}

}  // namespace unips
