#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "unips/baseline.hpp"
#include "unips/eval.hpp"
#include "unips/model.hpp"
#include "unips/numkit/gradcheck.hpp"
#include "unips/renderkit/dataset.hpp"
#include "unips/train.hpp"

// Property suites shared by `unips selftest` and the acceptance runner.
// Details carry no timings so reports compare byte for byte.

namespace unips::selftest {

struct Check {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct Suite {
  std::string name;
  std::vector<Check> checks;

  bool pass() const {
    for (const auto& c : checks)
      if (!c.pass) return false;
    return !checks.empty();
  }

  void add(std::string n, bool ok, std::string d) { checks.push_back({std::move(n), ok, std::move(d)}); }

  /// Runs `body`; an exception fails the check with its message.
  void run(const std::string& n, const std::function<std::pair<bool, std::string>()>& body) {
    try {
      auto [ok, d] = body();
      add(n, ok, std::move(d));
    } catch (const std::exception& e) {
      add(n, false, std::string("exception: ") + e.what());
    }
  }
};

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

inline std::string report(const std::vector<Suite>& suites) {
  std::ostringstream os;
  for (const auto& s : suites) {
    os << "[" << (s.pass() ? "PASS" : "FAIL") << "] " << s.name << "\n";
    for (const auto& c : s.checks) os << "  " << (c.pass ? "ok  " : "FAIL") << " " << c.name << ": " << c.detail << "\n";
  }
  return os.str();
}

// ------------------------------------------------------------------ shared

using TD = nk::Tensor<double>;
using TF = nk::Tensor<float>;

inline std::vector<double> randn(nk::Rng& rng, std::int64_t n, double s = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = rng.normal() * s;
  return v;
}

inline TD rand_param(nk::Rng& rng, nk::Shape s, double scale = 1.0) {
  const auto n = nk::numel_of(s);
  return TD::parameter(std::move(s), randn(rng, n, scale));
}

/// Contracts every output element with fixed random weights.
inline TD probe_loss(const TD& out, std::uint64_t seed) {
  nk::Rng rng(seed ^ 0x5eedull);
  const auto w = TD::from(out.shape(), randn(rng, out.numel()));
  return nk::sum(nk::mul(out, w));
}

/// Smallest configuration that still exercises every stage.
inline ModelConfig micro_config(Placement p = Placement::PreFusion) {
  ModelConfig m;
  m.encoder.s = 32;
  m.encoder.c = 8;
  m.encoder.d_e = 8;
  m.encoder.placement = p;
  m.decoder.d_e = 8;
  m.decoder.d_t = 16;
  m.decoder.ff = 32;
  m.decoder.depth = 1;
  m.seed = 3;
  return m;
}

struct StackInput {
  std::vector<Image> images;
  Mask mask;
};

inline StackInput random_stack(int h, int w, int q, std::uint64_t seed) {
  nk::Rng rng(seed);
  StackInput s;
  s.mask = Mask(h, w);
  for (int y = h / 6; y < h - h / 5; ++y)
    for (int x = w / 5; x < w - w / 7; ++x) s.mask.set(y, x, true);
  for (int k = 0; k < q; ++k) {
    Image img(h, w, 3);
    for (auto& v : img.px) v = static_cast<float>(rng.uniform(0.05, 1.0));
    s.images.push_back(std::move(img));
  }
  return s;
}

// --------------------------------------------------------------- gradients

inline Suite gradient_suite(int seeds = 2) {
  constexpr double kLayerTol = 1e-4;
  Suite s{"gradient integrity", {}};
  auto layer = [&](const std::string& name, const std::function<double(int)>& worst) {
    s.run(name, [&] {
      double w = 0;
      for (int k = 1; k <= seeds; ++k) w = std::max(w, worst(k));
      return std::pair{w < kLayerTol, "max rel err " + fmt("%.2e", w)};
    });
  };
  layer("linear", [](int k) {
    nk::Rng rng(k);
    auto x = rand_param(rng, {3, 4, 5}), w = rand_param(rng, {5, 6}), b = rand_param(rng, {6});
    return nk::grad_check([&] { return probe_loss(nk::linear(x, w, b), k); }, {{"x", &x}, {"w", &w}, {"b", &b}}, k)
        .max_rel_error;
  });
  layer("layer_norm", [](int k) {
    nk::Rng rng(k);
    auto x = rand_param(rng, {4, 7}), g = rand_param(rng, {7}), b = rand_param(rng, {7});
    return nk::grad_check([&] { return probe_loss(nk::layer_norm(x, g, b), k); }, {{"x", &x}, {"g", &g}, {"b", &b}}, k)
        .max_rel_error;
  });
  layer("softmax/gelu/relu", [](int k) {
    nk::Rng rng(k);
    auto x = rand_param(rng, {3, 6});
    double w = nk::grad_check([&] { return probe_loss(nk::softmax_last(x), k); }, {{"x", &x}}, k).max_rel_error;
    w = std::max(w, nk::grad_check([&] { return probe_loss(nk::gelu(x), k); }, {{"x", &x}}, k).max_rel_error);
    return std::max(w, nk::grad_check([&] { return probe_loss(nk::relu(x), k); }, {{"x", &x}}, k).max_rel_error);
  });
  layer("conv2d", [](int k) {
    nk::Rng rng(k);
    auto x = rand_param(rng, {2, 6, 5, 3}), w = rand_param(rng, {3, 3, 3, 4}), b = rand_param(rng, {4});
    double worst = 0;
    for (int stride : {1, 2})
      worst = std::max(worst, nk::grad_check([&] { return probe_loss(nk::conv2d(x, w, b, stride, 1), k); },
                                             {{"x", &x}, {"w", &w}, {"b", &b}}, k)
                                  .max_rel_error);
    return worst;
  });
  layer("attention", [](int k) {
    nk::Rng rng(k);
    auto q = rand_param(rng, {3, 2, 8}), kk = rand_param(rng, {3, 5, 8}), v = rand_param(rng, {3, 5, 8});
    return nk::grad_check([&] { return probe_loss(nk::attention(q, kk, v, 2), k); }, {{"q", &q}, {"k", &kk}, {"v", &v}},
                          k)
        .max_rel_error;
  });
  layer("resize/grid_sample", [](int k) {
    nk::Rng rng(k);
    auto x = rand_param(rng, {2, 5, 4, 3});
    std::vector<std::array<double, 2>> pts;
    for (int i = 0; i < 6; ++i) pts.push_back({rng.uniform(-1, 5), rng.uniform(-1, 4)});
    double w = nk::grad_check([&] { return probe_loss(nk::resize_bilinear(x, 7, 9), k); }, {{"x", &x}}, k).max_rel_error;
    return std::max(w, nk::grad_check([&] { return probe_loss(nk::grid_sample<double>(x, pts), k); }, {{"x", &x}}, k)
                           .max_rel_error);
  });
  layer("normalize+mse", [](int k) {
    nk::Rng rng(k);
    auto x = rand_param(rng, {6, 3});
    const auto t = TD::from({6, 3}, randn(rng, 18));
    return nk::grad_check([&] { return nk::mse_rows(nk::l2_normalize_rows(x), t); }, {{"x", &x}}, k).max_rel_error;
  });
  layer("transformer+pma", [](int k) {
    nk::Builder b(k);
    nk::TransformerLayer<double> tl("tf", 8, 2, 16, 0.1, b);
    nk::AttentionPool<double> pool("pma", 8, 2, 16, 0.1, b);
    nk::Rng rng(k);
    auto x = rand_param(rng, {3, 4, 8});
    nk::ParamList<double> ps{{"x", &x}};
    tl.params(ps);
    pool.params(ps);
    const nk::ForwardCtx ctx{true, 5, 1};
    return nk::grad_check([&] { return probe_loss(pool(tl(x, ctx), ctx), k); }, ps, k, 150).max_rel_error;
  });
  layer("window block+merge", [](int k) {
    nk::Builder b(k);
    WindowBlock<double> blk("blk", 8, 2, 2, b);
    PatchMerge<double> merge("merge", 8, b);
    nk::Rng rng(k);
    auto x = rand_param(rng, {2, 4, 4, 8});
    nk::ParamList<double> ps{{"x", &x}};
    blk.params(ps);
    merge.params(ps);
    return nk::grad_check([&] { return probe_loss(merge(blk(x, {})), k); }, ps, k, 150).max_rel_error;
  });
  layer("image-axis communication", [](int k) {
    nk::Builder b(k);
    ImageAxisComm<double> comm("comm", 16, 2, 0.1, b);
    nk::Rng rng(k);
    auto x = rand_param(rng, {3, 2, 2, 16});
    nk::ParamList<double> ps{{"x", &x}};
    comm.params(ps);
    const nk::ForwardCtx ctx{true, 7, 2};
    return nk::grad_check([&] { return probe_loss(comm(x, ctx), k); }, ps, k, 150).max_rel_error;
  });
  s.run("end-to-end microconfig", [] {
    auto cfg = micro_config();
    cfg.encoder.comm_dropout = 0.0;
    Model<double> m(cfg);
    // Move the head off its near-zero init so normalization is well conditioned.
    nk::Rng rng(36);
    for (auto* l : {&m.decoder().head_fc1(), &m.decoder().head_fc2()}) {
      const double sd = 1.0 / std::sqrt(static_cast<double>(l->in_features()));
      for (auto& w : l->weight().data()) w = rng.normal() * sd;
    }
    const auto sc = random_stack(40, 40, 2, 34);
    const auto prepared = m.prepare(sc.images, sc.mask);
    const std::vector<std::array<int, 2>> pixels{{10, 12}, {20, 20}, {25, 9}, {14, 28}};
    const auto target = TD::from({4, 3}, {0, 0, 1, 0.6, 0, 0.8, 0, -0.6, 0.8, 0.36, 0.48, 0.8});
    const auto r = nk::grad_check(
        [&] {
          const auto g = m.encode(prepared, {});
          return nk::mse_rows(m.decode(prepared, g, pixels, {}), target);
        },
        m.params(), 35, 300, 1e-6);
    return std::pair{r.max_rel_error < 1e-3, "max rel err " + fmt("%.2e", r.max_rel_error) + " over " +
                                                 std::to_string(r.checked) + " coordinates"};
  });
  return s;
}

// -------------------------------------------------------------- invariants

inline double max_abs_diff(const NormalMap& a, const NormalMap& b) {
  double d = 0;
  for (std::size_t i = 0; i < a.n.px.size(); ++i) d = std::max(d, std::abs(double(a.n.px[i]) - b.n.px[i]));
  return d;
}

inline Suite invariants_suite() {
  Suite s{"architectural invariants", {}};
  for (auto p : {Placement::None, Placement::DuringExtraction, Placement::PreFusion, Placement::PostFusion}) {
    s.run(std::string("image-order permutation (") + placement_name(p) + ")", [p] {
      Model<float> m(micro_config(p));
      const auto sc = random_stack(40, 40, 5, 18);
      const auto a = infer_normal_map(m, sc.images, sc.mask, 256);
      auto shuffled = sc.images;
      std::swap(shuffled[0], shuffled[3]);
      std::swap(shuffled[1], shuffled[4]);
      std::swap(shuffled[2], shuffled[4]);
      const double d = max_abs_diff(a, infer_normal_map(m, shuffled, sc.mask, 256));
      return std::pair{d <= 1e-5, "max component diff " + fmt("%.2e", d)};
    });
  }
  s.run("per-image scale invariance", [] {
    Model<float> m(micro_config());
    const auto sc = random_stack(30, 30, 3, 19);
    const auto a = infer_normal_map(m, sc.images, sc.mask, 256);
    auto scaled = sc.images;
    for (auto& v : scaled[1].px) v *= 16.f;
    for (auto& v : scaled[2].px) v *= 0.125f;
    const auto b = infer_normal_map(m, scaled, sc.mask, 256);
    const bool exact = a.n == b.n;
    return std::pair{exact, exact ? std::string("bit-identical") : "max diff " + fmt("%.2e", max_abs_diff(a, b))};
  });
  s.run("unit-norm outputs", [] {
    Model<float> m(micro_config());
    const auto sc = random_stack(48, 40, 4, 20);
    const auto nm = infer_normal_map(m, sc.images, sc.mask, 512);
    double worst = 0;
    for (int y = 0; y < nm.height(); ++y)
      for (int x = 0; x < nm.width(); ++x) {
        if (!nm.valid(y, x)) continue;
        double n2 = 0;
        for (int k = 0; k < 3; ++k) n2 += double(nm.n.at(y, x, k)) * nm.n.at(y, x, k);
        worst = std::max(worst, std::abs(std::sqrt(n2) - 1.0));
      }
    return std::pair{worst <= 1e-6, "max |norm-1| " + fmt("%.2e", worst)};
  });
  s.run("q in {1,4,8,16,32} on one model", [] {
    Model<float> m(micro_config());
    std::string d;
    bool ok = true;
    for (int q : {1, 4, 8, 16, 32}) {
      const auto sc = random_stack(24, 24, q, 20 + q);
      const auto nm = infer_normal_map(m, sc.images, sc.mask, 512);
      ok = ok && nm.valid == sc.mask;
      d += std::to_string(q) + (nm.valid == sc.mask ? ":ok " : ":bad ");
    }
    return std::pair{ok, d};
  });
  return s;
}

// ------------------------------------------------------------- scalability

inline Suite scalability_suite() {
  Suite s{"scalability", {}};
  s.run("encoder peak activations 128 vs 512", [] {
    ModelConfig cfg;
    cfg.encoder.s = 64;
    cfg.seed = 1;
    Model<float> m(cfg);
    InferStats a, b;
    const auto sa = random_stack(128, 128, 2, 40), sb = random_stack(512, 512, 2, 41);
    infer_normal_map(m, sa.images, sa.mask, 2048, &a);
    infer_normal_map(m, sb.images, sb.mask, 2048, &b);
    return std::pair{a.encoder_peak == b.encoder_peak && a.encoder_peak > 0,
                     std::to_string(a.encoder_peak) + " vs " + std::to_string(b.encoder_peak) + " elements"};
  });
  s.run("decoder memory bounded by batch", [] {
    Model<float> m(micro_config());
    InferStats a, b;
    const auto sa = random_stack(64, 64, 4, 30), sb = random_stack(256, 256, 4, 31);
    infer_normal_map(m, sa.images, sa.mask, 256, &a);
    infer_normal_map(m, sb.images, sb.mask, 256, &b);
    return std::pair{a.decode_peak == b.decode_peak && b.decode_batches > 8 * a.decode_batches,
                     "peak " + std::to_string(a.decode_peak) + " vs " + std::to_string(b.decode_peak) + " over " +
                         std::to_string(a.decode_batches) + " vs " + std::to_string(b.decode_batches) + " batches"};
  });
  return s;
}

// ----------------------------------------------------------------- oracles

/// Lambertian unit sphere filling most of the frame under `q` lights.
inline baseline::CalibratedProblem lambertian_sphere_problem(int q, int h, int w, NormalMap* truth) {
  rk::SceneDescription scene;
  scene.object.shape = rk::SphereSet{{{rk::Vec3::Zero(), 1.0}}};
  scene.object.scale = 0.45;
  scene.object.translation = rk::Vec3(0.5, 0.5, 0.0);
  scene.material = rk::MaterialMaps::uniform(rk::Vec3(0.8, 0.6, 0.4), 1.0, 0.0);
  rk::RenderConfig cfg;
  cfg.height = h;
  cfg.width = w;
  baseline::CalibratedProblem p;
  nk::Rng rng(11);
  for (int k = 0; k < q; ++k) {
    const rk::Vec3 d = rk::random_upper_direction(rng, 0.5);
    const rk::Vec3 rgb = rk::random_light_color(rng);
    const auto r = rk::render_image(scene, rk::LightingCondition::make_directional({d, rgb}), cfg);
    p.images.push_back(r.image);
    p.lights.push_back({d, rgb * r.exposure});
  }
  const auto g = rk::trace_gbuffer(scene, h, w);
  p.mask = g.normals.valid;
  if (truth) *truth = g.normals;
  return p;
}

inline Suite oracle_suite() {
  Suite s{"oracle chain", {}};
  s.run("rendered Lambertian sphere + least squares", [] {
    NormalMap gt;
    const auto p = lambertian_sphere_problem(8, 96, 96, &gt);
    const auto r = baseline::solve_lambertian(p);
    const double mae = mae_degrees(r.normals, gt);
    return std::pair{mae < 0.5, "MAE " + fmt("%.4f", mae) + " deg"};
  });
  s.run("bilinear context sampler vs brute force", [] {
    const int R = 6, C = 3;
    nk::Rng rng(3);
    const auto g = TF::from({1, R, R, C}, [&] {
      std::vector<float> v(R * R * C);
      for (auto& x : v) x = static_cast<float>(rng.uniform(-1, 1));
      return v;
    }());
    std::vector<std::array<double, 2>> at;
    for (int i = 0; i < 200; ++i) at.push_back({rng.uniform(-1.0, R), rng.uniform(-1.0, R)});
    const auto out = sample_context(g, at);
    auto cell = [&](int r, int c, int k) {
      r = std::clamp(r, 0, R - 1);
      c = std::clamp(c, 0, R - 1);
      return double(g.data()[(r * R + c) * C + k]);
    };
    double worst = 0;
    for (int i = 0; i < 200; ++i) {
      const double y = std::clamp(at[i][0], 0.0, R - 1.0), x = std::clamp(at[i][1], 0.0, R - 1.0);
      const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
      const double fy = y - y0, fx = x - x0;
      for (int k = 0; k < C; ++k) {
        const double want = (1 - fy) * ((1 - fx) * cell(y0, x0, k) + fx * cell(y0, x0 + 1, k)) +
                            fy * ((1 - fx) * cell(y0 + 1, x0, k) + fx * cell(y0 + 1, x0 + 1, k));
        worst = std::max(worst, std::abs(out.data()[i * C + k] - want));
      }
    }
    return std::pair{worst <= 1e-5, "max abs err " + fmt("%.2e", worst)};
  });
  s.run("canonical resize vs brute force", [] {
    nk::Rng rng(4);
    Image img(37, 23, 3);
    for (auto& v : img.px) v = static_cast<float>(rng.uniform(0, 1));
    const int oh = 16, ow = 16;
    const auto out = prep::resize_bilinear(img, oh, ow);
    double worst = 0;
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        const double y = std::clamp((i + 0.5) * 37.0 / oh - 0.5, 0.0, 36.0);
        const double x = std::clamp((j + 0.5) * 23.0 / ow - 0.5, 0.0, 22.0);
        const int y0 = std::min(static_cast<int>(y), 35), x0 = std::min(static_cast<int>(x), 21);
        const double fy = y - y0, fx = x - x0;
        for (int c = 0; c < 3; ++c) {
          const double want = (1 - fy) * ((1 - fx) * img.at(y0, x0, c) + fx * img.at(y0, x0 + 1, c)) +
                              fy * ((1 - fx) * img.at(y0 + 1, x0, c) + fx * img.at(y0 + 1, x0 + 1, c));
          worst = std::max(worst, std::abs(out.at(i, j, c) - want));
        }
      }
    return std::pair{worst <= 1e-5, "max abs err " + fmt("%.2e", worst)};
  });
  s.run("multi-head attention vs brute force", [] {
    nk::Rng rng(5);
    const int B = 3, Lq = 4, Lk = 6, D = 8, H = 2, dh = D / H;
    auto mk = [&](int L) {
      std::vector<float> v(B * L * D);
      for (auto& x : v) x = static_cast<float>(rng.uniform(-2, 2));
      return TF::from({B, L, D}, v);
    };
    const auto q = mk(Lq), k = mk(Lk), v = mk(Lk);
    const auto out = nk::attention(q, k, v, H);
    double worst = 0;
    for (int b = 0; b < B; ++b)
      for (int h = 0; h < H; ++h)
        for (int i = 0; i < Lq; ++i) {
          std::vector<double> sc(Lk);
          double mx = -1e300;
          for (int j = 0; j < Lk; ++j) {
            double d = 0;
            for (int c = 0; c < dh; ++c)
              d += double(q.data()[(b * Lq + i) * D + h * dh + c]) * k.data()[(b * Lk + j) * D + h * dh + c];
            sc[j] = d / std::sqrt(double(dh));
            mx = std::max(mx, sc[j]);
          }
          double z = 0;
          for (auto& e : sc) z += (e = std::exp(e - mx));
          for (int c = 0; c < dh; ++c) {
            double want = 0;
            for (int j = 0; j < Lk; ++j) want += sc[j] / z * v.data()[(b * Lk + j) * D + h * dh + c];
            worst = std::max(worst, std::abs(out.data()[(b * Lq + i) * D + h * dh + c] - want));
          }
        }
    return std::pair{worst <= 1e-5, "max abs err " + fmt("%.2e", worst)};
  });
  return s;
}

// ------------------------------------------------------------- determinism

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// Concatenated bytes of every file under `root`, in sorted path order.
inline std::string tree_bytes(const std::filesystem::path& root) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string out;
  for (const auto& f : files) out += std::filesystem::relative(f, root).string() + "\n" + slurp(f);
  return out;
}

inline rk::DatasetConfig small_render_config(std::uint64_t seed, rk::LightingVariant v) {
  rk::DatasetConfig dc;
  dc.n_objects = 2;
  dc.q = 3;
  dc.height = 40;
  dc.width = 40;
  dc.env_samples = 16;
  dc.lighting = v;
  dc.seed = seed;
  dc.entropy_threshold = 2.0;
  return dc;
}

inline void render_to(const std::filesystem::path& dir, const rk::DatasetConfig& dc) {
  const auto ds = rk::generate_dataset(rk::AssetPools{}, dc);
  for (std::size_t i = 0; i < ds.size(); ++i) rk::write_sample(dir / rk::scene_dir_name(static_cast<int>(i)), ds[i]);
}

inline Suite determinism_suite(const std::filesystem::path& scratch) {
  Suite s{"determinism", {}};
  std::filesystem::remove_all(scratch);
  s.run("render twice", [&] {
    bool ok = true;
    for (auto v : {rk::LightingVariant::Directional, rk::LightingVariant::Environment, rk::LightingVariant::Mixture}) {
      const auto dc = small_render_config(7, v);
      render_to(scratch / "render_a" / rk::variant_name(v), dc);
      render_to(scratch / "render_b" / rk::variant_name(v), dc);
    }
    ok = tree_bytes(scratch / "render_a") == tree_bytes(scratch / "render_b");
    return std::pair{ok, ok ? "byte-identical directories" : "directories differ"};
  });
  s.run("train twice", [&] {
    std::vector<TrainScene> scenes;
    for (const auto& r : rk::generate_dataset(rk::AssetPools{}, small_render_config(8, rk::LightingVariant::Environment)))
      scenes.push_back(to_train_scene(r));
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch = 2;
    tc.n_r = 64;
    tc.lr = 1e-3;
    tc.seed = 9;
    for (const char* run : {"train_a", "train_b"}) {
      Model<float> m(micro_config());
      train(m, scenes, tc, {(scratch / run).string(), "", nullptr});
    }
    const bool ok = tree_bytes(scratch / "train_a") == tree_bytes(scratch / "train_b");
    return std::pair{ok, ok ? "byte-identical checkpoints and loss curves" : "artifacts differ"};
  });
  s.run("inference twice", [&] {
    Model<float> m(micro_config());
    const auto sc = random_stack(40, 40, 4, 50);
    const bool ok = infer_normal_map(m, sc.images, sc.mask).n == infer_normal_map(m, sc.images, sc.mask).n;
    return std::pair{ok, ok ? "bit-identical normal maps" : "normal maps differ"};
  });
  std::filesystem::remove_all(scratch);
  return s;
}

// ----------------------------------------------------------------- overfit

struct OverfitResult {
  double mae = 0;
  double first_loss = 0, last_loss = 0;
  double seconds = 0;
  int steps = 0;
};

/// Trains the default model on one environment-lit scene (s=64, q=8) and
/// measures MAE on that scene. One epoch is one step here, so the step decay
/// is pushed past the run.
inline OverfitResult overfit_run(int steps = 500, double lr = 1e-3, std::uint64_t scene_seed = 5,
                                 const std::function<void(const std::string&)>& log = {}) {
  rk::DatasetConfig dc;
  dc.n_objects = 1;
  dc.q = 8;
  dc.seed = scene_seed;
  dc.lighting = rk::LightingVariant::Environment;
  const auto ds = rk::generate_dataset(rk::AssetPools{}, dc);
  if (ds.empty()) throw std::runtime_error("overfit: scene rejected by the entropy filter");
  ModelConfig mc;
  mc.encoder.s = 64;
  mc.seed = 1;
  Model<float> m(mc);
  TrainConfig tc;
  tc.batch = 1;
  tc.epochs = steps;
  tc.decay_period = steps + 1;
  tc.lr = lr;
  tc.augment = false;
  const auto t0 = std::chrono::steady_clock::now();
  TrainOptions opts;
  if (log)
    opts.on_step = [&](const StepRecord& r) {
      if ((r.step + 1) % 50 == 0) log("  overfit step " + std::to_string(r.step + 1) + " loss " + fmt("%.5f", r.loss));
    };
  const auto curve = train(m, {to_train_scene(ds[0])}, tc, opts);
  OverfitResult r;
  r.steps = static_cast<int>(curve.size());
  r.first_loss = curve.front().loss;
  r.last_loss = curve.back().loss;
  r.mae = evaluate_model(m, {{"overfit", "environment", ds[0].images, ds[0].normals}}).mean();
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline std::vector<Suite> run_all(const std::filesystem::path& scratch) {
  return {gradient_suite(), invariants_suite(), scalability_suite(), oracle_suite(), determinism_suite(scratch)};
}

}  // namespace unips::selftest
