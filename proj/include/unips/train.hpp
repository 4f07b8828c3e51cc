#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "unips/model.hpp"
#include "unips/numkit/adamw.hpp"
#include "unips/renderkit/dataset.hpp"

namespace unips {

struct TrainConfig {
  int epochs = 20;
  int batch = 3;  // scenes per step
  double lr = 1e-4;
  double weight_decay = 0.05;
  double decay_factor = 0.8;
  int decay_period = 3;  // epochs
  int n_r = 2500;        // random pixels per scene
  int q = 0;             // images per scene per step; 0 = all
  bool augment = true;
  std::int64_t max_steps = -1;  // stop early after this many steps overall
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1 || batch < 1 || decay_period < 1) throw ConfigError("train: epochs, batch, decay_period must be positive");
    if (!(lr > 0) || weight_decay < 0 || !(decay_factor > 0)) throw ConfigError("train: bad lr/decay settings");
    if (n_r < 0 || q < 0) throw ConfigError("train: n_r and q must be non-negative");
  }

  nk::StepDecay schedule() const { return {lr, decay_factor, decay_period}; }
};

class TrainError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ----------------------------------------------------------- pixel sampling

/// True when the center of pixel `x` (inside a crop starting at `lo` of
/// length `extent`) lands exactly on a canonical pixel center.
inline bool aligned_index(int x, int lo, int extent, int s) {
  const std::int64_t num = static_cast<std::int64_t>(2 * (x - lo) + 1) * s - extent;
  return num >= 0 && num % (2 * static_cast<std::int64_t>(extent)) == 0;
}

/// Masked pixels whose centers coincide with canonical pixel centers.
inline std::vector<std::array<int, 2>> aligned_pixels(const Mask& mask, const prep::Rect& rect, int s) {
  std::vector<int> rows, cols;
  for (int y = rect.row0; y <= rect.row1; ++y)
    if (aligned_index(y, rect.row0, rect.height(), s)) rows.push_back(y);
  for (int x = rect.col0; x <= rect.col1; ++x)
    if (aligned_index(x, rect.col0, rect.width(), s)) cols.push_back(x);
  std::vector<std::array<int, 2>> out;
  for (int y : rows)
    for (int x : cols)
      if (mask(y, x)) out.push_back({y, x});
  return out;
}

/// Aligned masked pixels plus up to n_r distinct random masked pixels,
/// sorted row-major without duplicates.
inline std::vector<std::array<int, 2>> sample_pixels(const Mask& mask, const prep::Rect& rect, int s, int n_r,
                                                     std::uint64_t seed) {
  auto all = mask_pixels(mask);
  if (all.empty()) throw prep::PrepError("sample_pixels: empty mask");
  auto out = aligned_pixels(mask, rect, s);
  const auto take = std::min<std::size_t>(static_cast<std::size_t>(n_r), all.size());
  nk::Rng rng(seed);
  for (std::size_t i = 0; i < take; ++i) {  // partial Fisher-Yates
    const auto j = i + static_cast<std::size_t>(rng.below(all.size() - i));
    std::swap(all[i], all[j]);
    out.push_back(all[i]);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

/// Ground-truth normals [P,3] at the listed pixels.
template <class T>
nk::Tensor<T> gather_normals(const NormalMap& gt, std::span<const std::array<int, 2>> pixels) {
  std::vector<T> v;
  v.reserve(pixels.size() * 3);
  for (const auto& p : pixels)
    for (int k = 0; k < 3; ++k) v.push_back(static_cast<T>(gt.n.at(p[0], p[1], k)));
  return nk::Tensor<T>::from({static_cast<std::int64_t>(pixels.size()), 3}, std::move(v));
}

/// Mean squared distance between predicted and true unit normals.
template <class T>
nk::Tensor<T> mse_loss(const nk::Tensor<T>& pred, const nk::Tensor<T>& gt) {
  return nk::mse_rows(pred, gt);
}

// ------------------------------------------------------------------ loop

struct TrainScene {
  std::vector<Image> images;
  NormalMap normals;  // normals.valid is the object mask
};

inline TrainScene to_train_scene(rk::SceneData sd) { return {std::move(sd.images), std::move(sd.normals)}; }
inline TrainScene to_train_scene(const rk::RenderedSample& s) { return {s.images, s.normals}; }

inline std::vector<TrainScene> load_train_scenes(const std::filesystem::path& root, int max_images = -1) {
  std::vector<TrainScene> out;
  for (const auto& dir : rk::list_scenes(root)) out.push_back(to_train_scene(rk::read_scene(dir, max_images)));
  if (out.empty()) throw IoError("no scenes under " + root.string());
  return out;
}

struct StepRecord {
  std::int64_t step;
  int epoch;
  double lr;
  double loss;
};

/// Optimizer sidecar written next to each checkpoint for --resume.
struct TrainState {
  int next_epoch = 0;
  std::int64_t step = 0;
};

namespace detail {

inline void write_f64s(std::ostream& os, const std::vector<double>& v) {
  const std::uint64_t n = v.size();
  os.write(reinterpret_cast<const char*>(&n), sizeof n);
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
}

inline std::vector<double> read_f64s(std::istream& is) {
  std::uint64_t n = 0;
  is.read(reinterpret_cast<char*>(&n), sizeof n);
  if (!is || n > (1ull << 34)) throw nk::CheckpointError("optimizer state truncated");
  std::vector<double> v(n);
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!is) throw nk::CheckpointError("optimizer state truncated");
  return v;
}

}  // namespace detail

inline std::string optimizer_path(const std::string& checkpoint) { return checkpoint + ".opt"; }

template <class T>
void save_optimizer(const std::string& path, const nk::AdamW<T>& opt, const TrainState& st) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw nk::CheckpointError("cannot write " + path);
  os.write("UPSO", 4);
  os.write(reinterpret_cast<const char*>(&st.next_epoch), sizeof st.next_epoch);
  os.write(reinterpret_cast<const char*>(&st.step), sizeof st.step);
  const std::int64_t steps = opt.step_count();
  os.write(reinterpret_cast<const char*>(&steps), sizeof steps);
  const std::uint64_t n = opt.first_moments().size();
  os.write(reinterpret_cast<const char*>(&n), sizeof n);
  for (std::size_t k = 0; k < n; ++k) {
    detail::write_f64s(os, opt.first_moments()[k]);
    detail::write_f64s(os, opt.second_moments()[k]);
  }
  if (!os) throw nk::CheckpointError("write failed: " + path);
}

template <class T>
TrainState load_optimizer(const std::string& path, nk::AdamW<T>& opt) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw nk::CheckpointError("cannot open optimizer state " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "UPSO") throw nk::CheckpointError("not an optimizer state file: " + path);
  TrainState st;
  std::int64_t steps = 0;
  std::uint64_t n = 0;
  is.read(reinterpret_cast<char*>(&st.next_epoch), sizeof st.next_epoch);
  is.read(reinterpret_cast<char*>(&st.step), sizeof st.step);
  is.read(reinterpret_cast<char*>(&steps), sizeof steps);
  is.read(reinterpret_cast<char*>(&n), sizeof n);
  if (!is || n > (1u << 20)) throw nk::CheckpointError("optimizer state truncated");
  std::vector<std::vector<double>> m(n), v(n);
  for (std::size_t k = 0; k < n; ++k) {
    m[k] = detail::read_f64s(is);
    v[k] = detail::read_f64s(is);
  }
  opt.restore(steps, std::move(m), std::move(v));
  return st;
}

struct TrainOptions {
  std::string out_dir;      // checkpoints + loss.csv; empty = keep in memory only
  std::string resume;       // checkpoint to resume from
  std::function<void(const StepRecord&)> on_step;  // progress hook
};

/// Scene order for an epoch: seeded shuffle.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  nk::Rng rng(nk::counter_key(seed, 101, static_cast<std::uint64_t>(epoch)));
  rng.shuffle(idx.begin(), idx.end());
  return idx;
}

/// One scene's contribution: augmentation, image subset, pixel sampling.
inline TrainScene prepare_training_view(const TrainScene& src, const TrainConfig& cfg, std::uint64_t key) {
  TrainScene view;
  if (cfg.augment) {
    rk::RenderedSample rs;
    rs.images = src.images;
    rs.normals = src.normals;
    rs = rk::augment(rs, nk::counter_key(key, 1, 0));
    view = {std::move(rs.images), std::move(rs.normals)};
  } else {
    view = src;
  }
  if (cfg.q > 0 && static_cast<std::size_t>(cfg.q) < view.images.size()) {
    std::vector<std::size_t> idx(view.images.size());
    std::iota(idx.begin(), idx.end(), 0);
    nk::Rng rng(nk::counter_key(key, 2, 0));
    rng.shuffle(idx.begin(), idx.end());
    idx.resize(static_cast<std::size_t>(cfg.q));
    std::sort(idx.begin(), idx.end());
    std::vector<Image> keep;
    for (auto i : idx) keep.push_back(std::move(view.images[i]));
    view.images = std::move(keep);
  }
  return view;
}

/// Loss of one scene under the current parameters (graph recorded).
template <class T>
nk::Tensor<T> scene_loss(const Model<T>& model, const TrainScene& scene, const TrainConfig& cfg,
                         const nk::ForwardCtx& ctx, std::uint64_t pixel_seed) {
  const auto prepared = model.prepare(scene.images, scene.normals.valid);
  const auto pixels = sample_pixels(scene.normals.valid, prepared.canonical.rect, model.config().encoder.s, cfg.n_r,
                                    pixel_seed);
  const auto contexts = model.encode(prepared, ctx);
  const auto pred = model.decode(prepared, contexts, pixels, ctx);
  return mse_loss(pred, gather_normals<T>(scene.normals, pixels));
}

/// Epoch loop with AdamW and step decay. Returns the per-step loss curve.
template <class T>
std::vector<StepRecord> train(Model<T>& model, const std::vector<TrainScene>& scenes, const TrainConfig& cfg,
                              const TrainOptions& opts = {}) {
  cfg.validate();
  if (scenes.empty()) throw TrainError("train: empty dataset");
  auto params = model.params();
  nk::AdamW<T> opt({cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  TrainState st;
  if (!opts.resume.empty()) {
    model.load(opts.resume);
    st = load_optimizer(optimizer_path(opts.resume), opt);
  }
  std::ofstream csv;
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    const auto path = std::filesystem::path(opts.out_dir) / "loss.csv";
    const bool append = !opts.resume.empty() && std::filesystem::exists(path);
    csv.open(path, append ? std::ios::app : std::ios::trunc);
    if (!csv) throw IoError("cannot write " + path.string());
    if (!append) csv << "step,epoch,lr,loss\n";
  }
  const auto schedule = cfg.schedule();
  std::vector<StepRecord> curve;
  std::string last_good = opts.resume;
  for (int epoch = st.next_epoch; epoch < cfg.epochs; ++epoch) {
    opt.set_lr(schedule.lr_at(epoch));
    const auto order = epoch_order(scenes.size(), cfg.seed, epoch);
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch)) {
      if (cfg.max_steps >= 0 && st.step >= cfg.max_steps) break;
      const auto b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch));
      const auto nb = static_cast<double>(b1 - b0);
      double loss_sum = 0;
      for (std::size_t b = b0; b < b1; ++b) {
        const auto key = nk::counter_key(cfg.seed, 200 + static_cast<std::uint64_t>(epoch), order[b]);
        const auto view = prepare_training_view(scenes[order[b]], cfg, key);
        const nk::ForwardCtx ctx{true, cfg.seed, static_cast<std::uint64_t>(st.step) * 1024 + (b - b0)};
        auto loss = scene_loss(model, view, cfg, ctx, nk::counter_key(key, 3, 0));
        const double lv = static_cast<double>(loss.item());
        if (!std::isfinite(lv))
          throw TrainError("non-finite loss at step " + std::to_string(st.step) +
                           (last_good.empty() ? std::string("; no checkpoint written yet")
                                              : "; last good checkpoint: " + last_good));
        loss_sum += lv;
        nk::scale(loss, static_cast<T>(1.0 / nb)).backward();
      }
      opt.step(params);
      const StepRecord rec{st.step, epoch, opt.lr(), loss_sum / nb};
      curve.push_back(rec);
      if (csv) csv << rec.step << ',' << rec.epoch << ',' << rec.lr << ',' << rec.loss << '\n' << std::flush;
      if (opts.on_step) opts.on_step(rec);
      ++st.step;
    }
    st.next_epoch = epoch + 1;
    if (!opts.out_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%03d.upsw", epoch);
      const auto ck = (std::filesystem::path(opts.out_dir) / name).string();
      model.save(ck);
      save_optimizer(optimizer_path(ck), opt, st);
      const auto latest = (std::filesystem::path(opts.out_dir) / "model.upsw").string();
      model.save(latest);
      save_optimizer(optimizer_path(latest), opt, st);
      write_model_config((std::filesystem::path(opts.out_dir) / "config.json").string(), model.config());
      last_good = ck;
    }
    if (cfg.max_steps >= 0 && st.step >= cfg.max_steps) break;
  }
  return curve;
}

}  // namespace unips
