#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "unips/numkit/nn.hpp"
#include "unips/numkit/ops.hpp"
#include "unips/numkit/tensor.hpp"
#include "unips/prep.hpp"

// Image-set encoder: convolutional patch embedding, a four-stage windowed
// attention backbone, attention across the image axis at one of several
// placements, and pyramid fusion into per-image lighting context maps.

namespace unips {

enum class Placement { None, DuringExtraction, PreFusion, PostFusion };

inline const char* placement_name(Placement p) {
  switch (p) {
    case Placement::None: return "none";
    case Placement::DuringExtraction: return "during";
    case Placement::PreFusion: return "pre-fusion";
    case Placement::PostFusion: return "post-fusion";
  }
  return "?";
}

inline Placement parse_placement(const std::string& s) {
  if (s == "none") return Placement::None;
  if (s == "during" || s == "during-extraction") return Placement::DuringExtraction;
  if (s == "pre-fusion" || s == "pre") return Placement::PreFusion;
  if (s == "post-fusion" || s == "post") return Placement::PostFusion;
  throw std::invalid_argument("unknown placement '" + s + "' (none|during|pre-fusion|post-fusion)");
}

class ConfigError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

struct EncoderConfig {
  int s = 64;           // canonical resolution
  int c = 24;           // stage widths c, 2c, 4c, 8c
  int d_e = 64;         // context width
  Placement placement = Placement::PreFusion;
  int window = 4;
  int heads = 8;        // communication heads
  int head_dim = 8;     // backbone attention head width
  int blocks_per_stage = 2;
  double comm_dropout = 0.1;
  bool uniform = false;  // collapse contexts to their spatial mean

  int stage_res(int k) const { return s / (4 << k); }
  int stage_dim(int k) const { return c << k; }
  /// Effective window at a stage: clamped to the stage extent.
  int stage_window(int k) const { return std::min(window, stage_res(k)); }

  void validate() const {
    if (s < 32 || s % 32 != 0) throw ConfigError("encoder: s must be a positive multiple of 32, got " + std::to_string(s));
    if (c < 2 || c % 2 != 0) throw ConfigError("encoder: c must be even, got " + std::to_string(c));
    if (d_e < 1) throw ConfigError("encoder: d_e must be positive");
    if (window < 1) throw ConfigError("encoder: window must be positive");
    for (int k = 0; k < 4; ++k) {
      if (stage_res(k) % stage_window(k) != 0)
        throw ConfigError("encoder: window " + std::to_string(window) + " does not divide stage resolution " +
                          std::to_string(stage_res(k)));
      if (stage_dim(k) % head_dim != 0)
        throw ConfigError("encoder: stage width " + std::to_string(stage_dim(k)) + " not divisible by head_dim " +
                          std::to_string(head_dim));
    }
    const bool comm = placement != Placement::None;
    if (comm) {
      if (placement == Placement::PostFusion ? d_e % heads != 0 : c % heads != 0)
        throw ConfigError("encoder: communication width not divisible by " + std::to_string(heads) + " heads");
    }
  }
};

/// [N,H,W,C] -> [N*(H/w)*(W/w), w*w, C].
template <class T>
nk::Tensor<T> window_partition(const nk::Tensor<T>& x, int w) {
  const auto N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  auto t = nk::reshape(x, {N, H / w, w, W / w, w, C});
  t = nk::permute(t, {0, 1, 3, 2, 4, 5});
  return nk::reshape(t, {N * (H / w) * (W / w), std::int64_t(w) * w, C});
}

template <class T>
nk::Tensor<T> window_merge(const nk::Tensor<T>& x, int w, std::int64_t N, std::int64_t H, std::int64_t W) {
  const auto C = x.dim(2);
  auto t = nk::reshape(x, {N, H / w, W / w, w, w, C});
  t = nk::permute(t, {0, 1, 3, 2, 4, 5});
  return nk::reshape(t, {N, H, W, C});
}

/// Pre-norm transformer blocks applied inside non-overlapping windows.
template <class T>
class WindowBlock {
public:
  WindowBlock() = default;
  WindowBlock(const std::string& name, std::int64_t dim, int heads, int window, nk::Builder& b)
      : window_(window), layer_(name, dim, heads, 2 * dim, 0.0, b) {}

  nk::Tensor<T> operator()(const nk::Tensor<T>& x, const nk::ForwardCtx& ctx) const {
    const auto N = x.dim(0), H = x.dim(1), W = x.dim(2);
    return window_merge(layer_(window_partition(x, window_), ctx), window_, N, H, W);
  }

  void params(nk::ParamList<T>& out) { layer_.params(out); }
  nk::TransformerLayer<T>& layer() { return layer_; }

private:
  int window_ = 1;
  nk::TransformerLayer<T> layer_;
};

/// 2x2 neighborhood concat, LayerNorm, linear 4C -> 2C.
template <class T>
class PatchMerge {
public:
  PatchMerge() = default;
  PatchMerge(const std::string& name, std::int64_t dim, nk::Builder& b)
      : norm_(name + ".norm", 4 * dim), proj_(name + ".proj", 4 * dim, 2 * dim, b, false) {}

  nk::Tensor<T> operator()(const nk::Tensor<T>& x) const {
    const auto N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    auto t = nk::reshape(x, {N, H / 2, 2, W / 2, 2, C});
    t = nk::permute(t, {0, 1, 3, 2, 4, 5});
    t = nk::reshape(t, {N, H / 2, W / 2, 4 * C});
    return proj_(norm_(t));
  }

  void params(nk::ParamList<T>& out) {
    norm_.params(out);
    proj_.params(out);
  }

private:
  nk::LayerNorm<T> norm_;
  nk::Linear<T> proj_;
};

/// One transformer layer attending across the image axis at every location.
template <class T>
class ImageAxisComm {
public:
  ImageAxisComm() = default;
  ImageAxisComm(const std::string& name, std::int64_t dim, int heads, double drop, nk::Builder& b)
      : layer_(name, dim, heads, 2 * dim, drop, b) {}

  /// x: [q,H,W,C].
  nk::Tensor<T> operator()(const nk::Tensor<T>& x, const nk::ForwardCtx& ctx) const {
    const auto q = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    if (q < 1) throw nk::ShapeError("communicate: empty image set");
    auto t = nk::reshape(nk::permute(x, {1, 2, 0, 3}), {H * W, q, C});
    t = layer_(t, ctx);
    return nk::permute(nk::reshape(t, {H, W, q, C}), {2, 0, 1, 3});
  }

  void params(nk::ParamList<T>& out) { layer_.params(out); }
  nk::TransformerLayer<T>& layer() { return layer_; }

private:
  nk::TransformerLayer<T> layer_;
};

template <class T>
class Encoder {
public:
  explicit Encoder(const EncoderConfig& cfg, nk::Builder& b) : cfg_(cfg) {
    cfg_.validate();
    const int c = cfg.c;
    const std::array<int, 6> ch{4, c / 2, c / 2, c, c, c};
    const std::array<int, 5> stride{2, 1, 2, 1, 1};
    for (int k = 0; k < 5; ++k)
      embed_.emplace_back("encoder.embed." + std::to_string(k), ch[k], ch[k + 1], 3, stride[k], b);
    for (int k = 0; k < 4; ++k) {
      const std::string p = "encoder.stage" + std::to_string(k);
      const int dim = cfg.stage_dim(k);
      Stage st;
      if (k > 0) st.merge = PatchMerge<T>(p + ".merge", cfg.stage_dim(k - 1), b);
      for (int j = 0; j < cfg.blocks_per_stage; ++j)
        st.blocks.emplace_back(p + ".block" + std::to_string(j), dim, dim / cfg.head_dim, cfg.stage_window(k), b);
      st.norm = nk::LayerNorm<T>(p + ".norm", dim);
      stages_.push_back(std::move(st));
    }
    if (cfg.placement == Placement::DuringExtraction || cfg.placement == Placement::PreFusion)
      for (int k = 0; k < 4; ++k)
        comm_.emplace_back("encoder.comm" + std::to_string(k), cfg.stage_dim(k), cfg.heads, cfg.comm_dropout, b);
    if (cfg.placement == Placement::PostFusion)
      comm_.emplace_back("encoder.comm", cfg.d_e, cfg.heads, cfg.comm_dropout, b);
    for (int k = 0; k < 4; ++k) {
      lateral_.emplace_back("encoder.fuse.lateral" + std::to_string(k), cfg.stage_dim(k), cfg.d_e, 1, 1, b);
      smooth_.emplace_back("encoder.fuse.smooth" + std::to_string(k), cfg.d_e, cfg.d_e, 3, 1, b);
    }
    head_ = nk::Conv2d<T>("encoder.fuse.head", cfg.d_e, cfg.d_e, 3, 1, b);
  }

  const EncoderConfig& config() const { return cfg_; }

  /// [q,s,s,4] -> [q,s/4,s/4,c].
  nk::Tensor<T> patch_embed(const nk::Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.s || x.dim(2) != cfg_.s || x.dim(3) != 4)
      throw nk::ShapeError("patch_embed: expected [q," + std::to_string(cfg_.s) + "," + std::to_string(cfg_.s) +
                           ",4], got " + nk::to_string(x.shape()));
    auto h = x;
    for (std::size_t k = 0; k < embed_.size(); ++k) {
      h = embed_[k](h);
      if (k + 1 < embed_.size()) h = nk::relu(h);
    }
    return h;
  }

  /// Stage outputs at s/4, s/8, s/16, s/32. Communication runs after each
  /// stage in during-extraction mode.
  std::vector<nk::Tensor<T>> backbone(const nk::Tensor<T>& embedded, const nk::ForwardCtx& ctx) const {
    std::vector<nk::Tensor<T>> outs;
    auto h = embedded;
    for (std::size_t k = 0; k < stages_.size(); ++k) {
      const auto& st = stages_[k];
      if (k > 0) h = st.merge(h);
      for (const auto& blk : st.blocks) h = blk(h, ctx);
      if (cfg_.placement == Placement::DuringExtraction) h = comm_[k](h, ctx);
      outs.push_back(st.norm(h));
    }
    return outs;
  }

  nk::Tensor<T> fuse(const std::vector<nk::Tensor<T>>& stages) const {
    if (stages.size() != 4) throw nk::ShapeError("fuse_multiscale: expected 4 stage maps");
    const auto R = stages[0].dim(1);
    std::array<nk::Tensor<T>, 4> p;
    for (int k = 3; k >= 0; --k) {
      p[k] = lateral_[k](stages[k]);
      if (k < 3) p[k] = nk::add(p[k], nk::resize_bilinear(p[k + 1], p[k].dim(1), p[k].dim(2)));
    }
    nk::Tensor<T> acc;
    for (int k = 0; k < 4; ++k) {
      auto s = nk::relu(smooth_[k](p[k]));
      if (k > 0) s = nk::resize_bilinear(s, R, R);
      acc = k == 0 ? s : nk::add(acc, s);
    }
    return head_(acc);
  }

  /// [q,s,s,4] -> contexts [q,s/4,s/4,d_e] (or [q,1,1,d_e] when uniform).
  nk::Tensor<T> operator()(const nk::Tensor<T>& x, const nk::ForwardCtx& ctx) const {
    auto stages = backbone(patch_embed(x), ctx);
    if (cfg_.placement == Placement::PreFusion)
      for (std::size_t k = 0; k < stages.size(); ++k) stages[k] = comm_[k](stages[k], ctx);
    auto g = fuse(stages);
    if (cfg_.placement == Placement::PostFusion) g = comm_[0](g, ctx);
    if (cfg_.uniform) g = nk::mean_spatial(g);
    return g;
  }

  void params(nk::ParamList<T>& out) {
    for (auto& e : embed_) e.params(out);
    for (auto& st : stages_) {
      if (&st != &stages_.front()) st.merge.params(out);
      for (auto& blk : st.blocks) blk.params(out);
      st.norm.params(out);
    }
    for (auto& cm : comm_) cm.params(out);
    for (auto& l : lateral_) l.params(out);
    for (auto& s : smooth_) s.params(out);
    head_.params(out);
  }

  std::vector<nk::Conv2d<T>>& embed_layers() { return embed_; }
  std::vector<nk::Conv2d<T>>& lateral_layers() { return lateral_; }
  std::vector<nk::Conv2d<T>>& smooth_layers() { return smooth_; }
  nk::Conv2d<T>& head() { return head_; }
  std::vector<ImageAxisComm<T>>& comm_layers() { return comm_; }
  WindowBlock<T>& block(int stage, int j) { return stages_[stage].blocks[j]; }

private:
  struct Stage {
    PatchMerge<T> merge;
    std::vector<WindowBlock<T>> blocks;
    nk::LayerNorm<T> norm;
  };
  EncoderConfig cfg_;
  std::vector<nk::Conv2d<T>> embed_;
  std::vector<Stage> stages_;
  std::vector<ImageAxisComm<T>> comm_;
  std::vector<nk::Conv2d<T>> lateral_, smooth_;
  nk::Conv2d<T> head_;
};

/// Canonical stack as a [q,s,s,4] tensor.
template <class T>
nk::Tensor<T> stack_tensor(const prep::PreprocessedStack& p) {
  const auto q = static_cast<std::int64_t>(p.stack.size());
  std::vector<T> v;
  v.reserve(static_cast<std::size_t>(q) * p.s * p.s * 4);
  for (const auto& img : p.stack)
    for (float x : img.px) v.push_back(static_cast<T>(x));
  return nk::Tensor<T>::from({q, p.s, p.s, 4}, std::move(v));
}

}  // namespace unips
