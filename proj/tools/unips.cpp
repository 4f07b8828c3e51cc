#include <glob.h>

#include <boost/property_tree/ini_parser.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "unips/baseline.hpp"
#include "unips/eval.hpp"
#include "unips/selftest.hpp"

namespace fs = std::filesystem;
using namespace unips;

namespace {

constexpr int kUsage = 1;
constexpr int kRuntime = 2;

void log_line(const std::string& s) { std::cerr << s << std::endl; }

/// Model and training settings shared by `train` and `ablate`.
struct RunOptions {
  ModelConfig model;
  TrainConfig train;
  std::string placement = "pre-fusion";
  std::string aggregation = "pma";
  std::uint64_t seed = 0;
  CLI::Option* model_seed = nullptr;
  CLI::Option* train_seed = nullptr;

  void add(CLI::App* app) {
    auto& e = model.encoder;
    auto& d = model.decoder;
    app->add_option("--encoder.s", e.s, "canonical resolution (multiple of 32)")->capture_default_str();
    app->add_option("--encoder.c", e.c, "first-stage width")->capture_default_str();
    app->add_option("--encoder.d_e", e.d_e, "context width")->capture_default_str();
    app->add_option("--encoder.placement", placement, "image-axis communication placement")
        ->capture_default_str()
        ->check(CLI::IsMember({"none", "during", "pre-fusion", "post-fusion"}));
    app->add_option("--encoder.window", e.window, "attention window")->capture_default_str();
    app->add_option("--encoder.heads", e.heads, "communication heads")->capture_default_str();
    app->add_option("--encoder.head_dim", e.head_dim, "backbone head width")->capture_default_str();
    app->add_option("--encoder.blocks", e.blocks_per_stage, "blocks per stage")->capture_default_str();
    app->add_option("--encoder.comm_dropout", e.comm_dropout, "communication dropout")->capture_default_str();
    app->add_option("--encoder.uniform", e.uniform, "collapse contexts to their spatial mean")->capture_default_str();
    app->add_option("--decoder.depth", d.depth, "transformer layers over the image set")->capture_default_str();
    app->add_option("--decoder.d_t", d.d_t, "token width")->capture_default_str();
    app->add_option("--decoder.ff", d.ff, "feed-forward width")->capture_default_str();
    app->add_option("--decoder.heads", d.heads, "attention heads")->capture_default_str();
    app->add_option("--decoder.aggregation", aggregation, "set aggregation")
        ->capture_default_str()
        ->check(CLI::IsMember({"pma", "maxpool"}));
    app->add_option("--decoder.dropout", d.dropout, "dropout")->capture_default_str();
    model_seed = app->add_option("--model.seed", model.seed, "initialization seed (default: --seed)");
    app->add_option("--model.margin", model.margin, "bounding-box margin")->capture_default_str();
    app->add_option("--train.epochs", train.epochs, "epochs")->capture_default_str();
    app->add_option("--train.batch", train.batch, "scenes per step")->capture_default_str();
    app->add_option("--train.lr", train.lr, "base learning rate")->capture_default_str();
    app->add_option("--train.weight_decay", train.weight_decay, "AdamW weight decay")->capture_default_str();
    app->add_option("--train.decay_factor", train.decay_factor, "step decay factor")->capture_default_str();
    app->add_option("--train.decay_period", train.decay_period, "epochs per decay")->capture_default_str();
    app->add_option("--train.n_r", train.n_r, "random pixels per scene")->capture_default_str();
    app->add_option("--train.q", train.q, "images per scene per step (0 = all)")->capture_default_str();
    app->add_option("--train.augment", train.augment, "random flips, rotations, channel swaps")->capture_default_str();
    app->add_option("--train.max_steps", train.max_steps, "stop after this many steps (-1 = no limit)")
        ->capture_default_str();
    train_seed = app->add_option("--train.seed", train.seed, "sampling seed (default: --seed)");
  }

  /// Applies string-valued and fallback settings, then validates.
  void resolve() {
    model.encoder.placement = parse_placement(placement);
    model.decoder.aggregation = parse_aggregation(aggregation);
    model.decoder.d_e = model.encoder.d_e;
    for (auto* o : {model_seed, train_seed})
      if (o->count() == 0) {
        o->add_result(std::to_string(seed));
        o->run_callback();
      }
    model.validate();
    train.validate();
  }
};

/// Fills options not given on the command line from an INI file. Keys map
/// to `--section.key`; keys of `plain` sections and top-level keys map to
/// `--key`.
void apply_config_file(CLI::App* app, const std::string& path, const std::vector<std::string>& plain,
                       const std::vector<std::string>& args) {
  boost::property_tree::ptree pt;
  try {
    boost::property_tree::read_ini(path, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw CLI::ValidationError("--config", e.what());
  }
  auto set = [&](const std::string& key, const std::string& value, bool allow_plain) {
    CLI::Option* o = app->get_option_no_throw("--" + key);
    if (!o && allow_plain) o = app->get_option_no_throw("--" + key.substr(key.find('.') + 1));
    if (!o || key == "config") throw CLI::ValidationError("--config", "unknown key '" + key + "' in " + path);
    const auto flag = "--" + o->get_lnames().front();
    for (const auto& a : args)
      if (a == flag || a.rfind(flag + "=", 0) == 0) return;  // command line wins; env values do not
    o->clear();
    o->add_result(value);
    o->run_callback();
  };
  for (const auto& [sec, node] : pt) {
    if (node.empty()) {
      set(sec, node.data(), false);
      continue;
    }
    const bool allow_plain = std::find(plain.begin(), plain.end(), sec) != plain.end();
    for (const auto& [k, v] : node) set(sec + "." + k, v.data(), allow_plain);
  }
}

/// Effective option values as INI; the result is accepted by --config.
std::string resolved_config(const CLI::App* app) {
  std::map<std::string, std::vector<std::pair<std::string, std::string>>> sections;
  std::vector<std::pair<std::string, std::string>> top;
  for (const CLI::Option* o : app->get_options()) {
    if (o->get_lnames().empty()) continue;
    const auto& name = o->get_lnames().front();
    if (name == "help" || name == "help-all" || name == "config") continue;
    std::string value = o->count() > 0 ? CLI::detail::join(o->results(), " ") : o->get_default_str();
    if (value.empty()) continue;
    const auto dot = name.find('.');
    if (dot == std::string::npos)
      top.emplace_back(name, value);
    else
      sections[name.substr(0, dot)].emplace_back(name.substr(dot + 1), value);
  }
  std::ostringstream os;
  for (const auto& [k, v] : top) os << k << " = " << v << "\n";
  for (const auto& [sec, kv] : sections) {
    os << "\n[" << sec << "]\n";
    for (const auto& [k, v] : kv) os << k << " = " << v << "\n";
  }
  return os.str();
}

void write_text(const fs::path& p, const std::string& s) {
  if (!p.parent_path().empty()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot write " + p.string());
  os << s;
}

std::vector<std::string> expand_glob(const std::string& pattern) {
  glob_t g{};
  const int rc = ::glob(pattern.c_str(), 0, nullptr, &g);
  std::vector<std::string> out;
  if (rc == 0)
    for (std::size_t i = 0; i < g.gl_pathc; ++i) out.emplace_back(g.gl_pathv[i]);
  globfree(&g);
  if (out.empty()) throw IoError("no files match '" + pattern + "'");
  std::sort(out.begin(), out.end());
  return out;
}

Image read_any_image(const std::string& path) {
  const auto ext = fs::path(path).extension().string();
  if (ext == ".pfm") return read_pfm(path);
  if (ext == ".png") return read_png(path);
  throw IoError("unsupported image format: " + path + " (expected .pfm or .png)");
}

/// `ckpt` is a weights file (config.json beside it) or a run directory.
Model<float> load_model(const std::string& ckpt) {
  fs::path weights = ckpt;
  if (fs::is_directory(weights)) weights /= "model.upsw";
  if (!fs::exists(weights)) throw IoError("checkpoint not found: " + weights.string());
  const auto cfg = weights.parent_path() / "config.json";
  if (!fs::exists(cfg)) throw IoError("missing " + cfg.string() + " next to the checkpoint");
  Model<float> m(read_model_config(cfg.string()));
  m.load(weights.string());
  return m;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Universal photometric stereo: render, train, infer, evaluate."};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Expand help for every subcommand");
  int threads = 1;
  app.add_option("--threads", threads, "worker threads")
      ->envname("UNIPS_THREADS")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);

  // render
  auto* render = app.add_subcommand("render", "Render a synthetic dataset");
  std::string render_out, lighting = "directional", render_config;
  rk::DatasetConfig dc;
  rk::AssetPools pools;
  int res = 128;
  bool png16 = false;
  render->add_option("--out", render_out, "output directory")->required();
  render->add_option("--config", render_config, "INI file; [render] keys map to flags");
  render->add_option("--objects", dc.n_objects, "objects to draw")->capture_default_str()->check(CLI::PositiveNumber);
  render->add_option("--lighting", lighting, "lighting variant")
      ->capture_default_str()
      ->check(CLI::IsMember({"directional", "env", "environment", "mix", "mixture"}));
  render->add_option("--res", res, "image height and width")->capture_default_str()->check(CLI::PositiveNumber);
  render->add_option("--images", dc.q, "images per object")->capture_default_str()->check(CLI::PositiveNumber);
  render->add_option("--seed", dc.seed, "dataset seed")->envname("UNIPS_SEED")->capture_default_str();
  render->add_option("--env-samples", dc.env_samples, "environment light samples")->capture_default_str();
  render->add_option("--entropy", dc.entropy_threshold, "minimum mask-normal entropy (bits)")->capture_default_str();
  render->add_option("--textured", pools.textured, "spatially varying materials")->capture_default_str();
  render->add_option("--specular", pools.specular, "non-Lambertian materials")->capture_default_str();
  render->add_flag("--png16", png16, "also write 16-bit PNG images");

  // train
  auto* trn = app.add_subcommand("train", "Train a model on a rendered dataset");
  RunOptions run;
  std::string train_data, train_out, train_config, resume;
  int log_every = 10;
  trn->add_option("--data", train_data, "dataset root")->required();
  trn->add_option("--out", train_out, "run directory for checkpoints, loss.csv, config")->required();
  trn->add_option("--config", train_config, "INI file ([encoder] [decoder] [model] [train] [paths] sections)");
  trn->add_option("--resume", resume, "checkpoint to resume from");
  trn->add_option("--seed", run.seed, "seed for model and train when not set")->envname("UNIPS_SEED")->capture_default_str();
  trn->add_option("--log-every", log_every, "progress interval in steps")->capture_default_str();
  run.add(trn);

  // infer
  auto* inf = app.add_subcommand("infer", "Predict a normal map");
  std::string images_glob, mask_path, ckpt, infer_out, infer_data, infer_out_dir;
  bool infer_png = false;
  int batch = 4096, max_images = -1;
  inf->add_option("--ckpt", ckpt, "weights file or run directory")->required();
  auto* o_images = inf->add_option("--images", images_glob, "image glob (.pfm or .png), sorted by name");
  inf->add_option("--mask", mask_path, "object mask PNG (default: whole frame)");
  inf->add_option("--out", infer_out, "output normal map (.pfm)");
  auto* o_data = inf->add_option("--data", infer_data, "dataset root: predict every scene");
  inf->add_option("--out-dir", infer_out_dir, "output root for --data");
  inf->add_option("--max-images", max_images, "use the first N images (-1 = all)")->capture_default_str();
  inf->add_option("--batch", batch, "pixels per decode batch")->capture_default_str()->check(CLI::PositiveNumber);
  inf->add_flag("--png", infer_png, "also write an RGB visualization");
  o_images->excludes(o_data);

  // eval
  auto* ev = app.add_subcommand("eval", "Mean angular error of predictions against ground truth");
  std::string pred_dir, gt_dir, report, error_maps;
  ev->add_option("--pred", pred_dir, "predicted scene directories")->required();
  ev->add_option("--gt", gt_dir, "ground-truth scene directories")->required();
  ev->add_option("--report", report, "CSV report path")->required();
  ev->add_option("--error-maps", error_maps, "directory for per-scene error PNGs");

  // ablate
  auto* abl = app.add_subcommand("ablate", "Train and evaluate one model per axis value");
  RunOptions arun;
  std::string axis, values, abl_train, abl_test, abl_out, cache, abl_config;
  int test_q = 32;
  abl->add_option("--axis", axis, "ablation axis")
      ->required()
      ->check(CLI::IsMember({"placement", "canonical", "uniform", "aggregation", "q"}));
  abl->add_option("--values", values, "comma-separated values (default: all for the axis)");
  abl->add_option("--train-data", abl_train, "training dataset root")->required();
  abl->add_option("--test-data", abl_test, "test dataset root (one or more variant roots, comma-separated)")->required();
  abl->add_option("--out", abl_out, "output directory")->required();
  abl->add_option("--cache", cache, "trained-model cache (default: OUT/cache)");
  abl->add_option("--test-q", test_q, "test images per scene")->capture_default_str()->check(CLI::PositiveNumber);
  abl->add_option("--config", abl_config, "INI file, as for train");
  abl->add_option("--seed", arun.seed, "seed for model and train when not set")->envname("UNIPS_SEED")->capture_default_str();
  arun.add(abl);

  // baseline
  auto* base = app.add_subcommand("baseline", "Calibrated Lambertian least-squares normals");
  std::string base_data, base_out;
  double shadow = 0.01;
  base->add_option("--data", base_data, "dataset root with lights.txt per scene")->required();
  base->add_option("--out-dir", base_out, "output root")->required();
  base->add_option("--shadow", shadow, "shadow threshold relative to the image maximum")->capture_default_str();

  // selftest
  auto* st = app.add_subcommand("selftest", "Run the property suites");
  std::string st_out, scratch = (fs::temp_directory_path() / "unips_selftest").string();
  st->add_option("--out", st_out, "write the report here");
  st->add_option("--scratch", scratch, "scratch directory")->capture_default_str();

  try {
    app.parse(argc, argv);
    const std::vector<std::string> args(argv + 1, argv + argc);
    if (!train_config.empty()) apply_config_file(trn, train_config, {"paths"}, args);
    if (!abl_config.empty()) apply_config_file(abl, abl_config, {"paths"}, args);
    if (!render_config.empty()) apply_config_file(render, render_config, {"render"}, args);
    if (*inf && images_glob.empty() == infer_data.empty())
      throw CLI::ValidationError("infer", "give exactly one of --images or --data");
    if (*inf && !images_glob.empty() && infer_out.empty()) throw CLI::RequiredError("--out");
    if (*inf && !infer_data.empty() && infer_out_dir.empty()) throw CLI::RequiredError("--out-dir");
    if (*trn) run.resolve();
    if (*abl) arun.resolve();
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  }
  worker_threads() = threads;

  try {
    if (*render) {
      dc.height = dc.width = res;
      dc.lighting = lighting == "directional" ? rk::LightingVariant::Directional
                    : lighting.rfind("env", 0) == 0 ? rk::LightingVariant::Environment
                                                    : rk::LightingVariant::Mixture;
      log_line("resolved config:\n" + resolved_config(render));
      const auto ds = rk::generate_dataset(pools, dc, [](const std::string& m) { log_line(m); });
      for (std::size_t i = 0; i < ds.size(); ++i)
        rk::write_sample(fs::path(render_out) / rk::scene_dir_name(static_cast<int>(i)), ds[i], png16);
      log_line("wrote " + std::to_string(ds.size()) + " scenes to " + render_out);
      return ds.empty() ? kRuntime : 0;
    }

    if (*trn) {
      const auto resolved = resolved_config(trn);
      log_line("resolved config:\n" + resolved);
      write_text(fs::path(train_out) / "run_config.ini", resolved);
      const auto scenes = load_train_scenes(train_data);
      log_line("loaded " + std::to_string(scenes.size()) + " scenes");
      Model<float> model(run.model);
      TrainOptions opts;
      opts.out_dir = train_out;
      opts.resume = resume;
      const auto t0 = std::chrono::steady_clock::now();
      opts.on_step = [&](const StepRecord& r) {
        if (r.step % log_every != 0) return;
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        char buf[160];
        std::snprintf(buf, sizeof buf, "step %lld epoch %d lr %.3g loss %.5f (%.0f s)", static_cast<long long>(r.step),
                      r.epoch, r.lr, r.loss, s);
        log_line(buf);
      };
      train(model, scenes, run.train, opts);
      log_line("model written to " + (fs::path(train_out) / "model.upsw").string());
      return 0;
    }

    if (*inf) {
      const auto model = load_model(ckpt);
      auto predict = [&](const std::vector<Image>& imgs, const Mask& mask, const fs::path& out) {
        InferStats stats;
        const auto t0 = std::chrono::steady_clock::now();
        const auto nm = infer_normal_map(model, imgs, mask, batch, &stats);
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
        write_pfm(out.string(), nm.n);
        if (infer_png) write_png8(fs::path(out).replace_extension(".png").string(), normal_to_rgb(nm));
        char buf[200];
        std::snprintf(buf, sizeof buf, "%s: q=%zu %dx%d, %lld batches, %.2f s", out.string().c_str(), imgs.size(),
                      mask.height, mask.width, static_cast<long long>(stats.decode_batches), s);
        log_line(buf);
      };
      if (!images_glob.empty()) {
        std::vector<Image> imgs;
        for (const auto& p : expand_glob(images_glob)) {
          if (max_images >= 0 && static_cast<int>(imgs.size()) >= max_images) break;
          imgs.push_back(read_any_image(p));
        }
        const Mask mask = mask_path.empty() ? Mask(imgs[0].height, imgs[0].width, true) : read_mask_png(mask_path);
        predict(imgs, mask, infer_out);
      } else {
        for (const auto& dir : rk::list_scenes(infer_data)) {
          const auto sd = rk::read_scene(dir, max_images);
          predict(sd.images, sd.normals.valid, fs::path(infer_out_dir) / sd.name / "normal.pfm");
          write_mask_png((fs::path(infer_out_dir) / sd.name / "mask.png").string(), sd.normals.valid);
        }
      }
      return 0;
    }

    if (*ev) {
      const auto rep = evaluate_directories(pred_dir, gt_dir, error_maps);
      write_report_csv(report, rep);
      for (const auto& [v, m] : rep.variant_means()) std::printf("%-12s %.3f\n", v.c_str(), m);
      std::printf("%-12s %.3f\n", "mean", rep.mean());
      return 0;
    }

    if (*abl) {
      const auto resolved = resolved_config(abl);
      log_line("resolved config:\n" + resolved);
      write_text(fs::path(abl_out) / "run_config.ini", resolved);
      AblationSetup setup;
      setup.axis = parse_axis(axis);
      if (values.empty()) {
        setup.values = default_axis_values(setup.axis);
      } else {
        std::stringstream ss(values);
        for (std::string v; std::getline(ss, v, ',');)
          if (!v.empty()) setup.values.push_back(v);
      }
      setup.model = arun.model;
      setup.train = arun.train;
      setup.test_q = test_q;
      setup.cache_dir = cache.empty() ? (fs::path(abl_out) / "cache").string() : cache;
      setup.log = log_line;
      const auto train_set = load_train_scenes(abl_train);
      std::vector<EvalScene> test_set;
      std::stringstream roots(abl_test);
      for (std::string r; std::getline(roots, r, ',');) {
        auto part = load_eval_scenes(r, axis == "q" ? -1 : test_q);
        test_set.insert(test_set.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
      }
      log_line("train " + std::to_string(train_set.size()) + " scenes, test " + std::to_string(test_set.size()));
      const auto rows = run_ablation<float>(setup, train_set, test_set, fs::weakly_canonical(abl_train).string());
      const auto csv = fs::path(abl_out) / (std::string("ablation_") + axis + ".csv");
      write_ablation_csv(csv.string(), setup.axis, rows);
      std::cout << std::ifstream(csv).rdbuf();
      return 0;
    }

    if (*base) {
      for (const auto& dir : rk::list_scenes(base_data)) {
        const auto sd = rk::read_scene(dir);
        baseline::CalibratedProblem p;
        p.images = sd.images;
        p.lights = baseline::lights_from_rows(sd.lights);
        p.mask = sd.normals.valid;
        p.shadow_threshold = shadow;
        const auto r = baseline::solve_lambertian(p);
        const auto out = fs::path(base_out) / sd.name;
        fs::create_directories(out);
        write_pfm((out / "normal.pfm").string(), r.normals.n);
        write_mask_png((out / "mask.png").string(), r.normals.valid);
        log_line(out.string());
      }
      return 0;
    }

    if (*st) {
      const auto suites = selftest::run_all(scratch);
      const auto text = selftest::report(suites);
      std::cout << text;
      if (!st_out.empty()) write_text(st_out, text);
      bool ok = true;
      for (const auto& s : suites) ok = ok && s.pass();
      return ok ? 0 : kRuntime;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
