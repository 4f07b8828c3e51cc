#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "unips/numkit/nn.hpp"
#include "unips/numkit/ops.hpp"
#include "unips/prep.hpp"

// Per-pixel decoder: samples each image's context at the pixel, pairs it with
// the pixel's observed RGB, aggregates the set over images and regresses a
// unit normal.

namespace unips {

enum class Aggregation { TransformerPMA, MaxPool };

inline const char* aggregation_name(Aggregation a) { return a == Aggregation::MaxPool ? "maxpool" : "pma"; }

inline Aggregation parse_aggregation(const std::string& s) {
  if (s == "pma" || s == "transformer" || s == "transformer+pma") return Aggregation::TransformerPMA;
  if (s == "maxpool" || s == "max-pool") return Aggregation::MaxPool;
  throw std::invalid_argument("unknown aggregation '" + s + "' (pma|maxpool)");
}

struct DecoderConfig {
  int d_e = 64;  // context width (matches the encoder)
  int depth = 3;
  int d_t = 96;
  int ff = 256;
  int heads = 8;
  Aggregation aggregation = Aggregation::TransformerPMA;
  double dropout = 0.0;

  void validate() const {
    if (d_e < 1 || d_t < 2 || ff < 1) throw std::invalid_argument("decoder: dims must be positive");
    if (aggregation == Aggregation::TransformerPMA) {
      if (depth < 1) throw std::invalid_argument("decoder: depth must be >= 1 in transformer mode");
      if (d_t % heads != 0) throw std::invalid_argument("decoder: d_t not divisible by heads");
    }
  }
};

/// Continuous context-grid coordinate of original pixel index `x` inside a
/// crop [lo, lo + extent): pixel centers align with cell centers.
inline double context_coord(int x, int lo, int extent, std::int64_t grid) {
  return (static_cast<double>(x - lo) + 0.5) / extent * static_cast<double>(grid) - 0.5;
}

/// Grid coordinates (row, col) of original pixels within `rect`.
inline std::vector<std::array<double, 2>> context_coords(std::span<const std::array<int, 2>> pixels,
                                                         const prep::Rect& rect, std::int64_t grid) {
  std::vector<std::array<double, 2>> out;
  out.reserve(pixels.size());
  for (const auto& p : pixels)
    out.push_back({context_coord(p[0], rect.row0, rect.height(), grid),
                   context_coord(p[1], rect.col0, rect.width(), grid)});
  return out;
}

/// contexts [q,R,R,d_e] sampled at grid coordinates -> [P,q,d_e].
template <class T>
nk::Tensor<T> sample_context(const nk::Tensor<T>& contexts, std::span<const std::array<double, 2>> coords) {
  return nk::grid_sample(contexts, coords);
}

template <class T>
class Decoder {
public:
  Decoder(const DecoderConfig& cfg, nk::Builder& b) : cfg_(cfg) {
    cfg_.validate();
    in_proj_ = nk::Linear<T>("decoder.in_proj", 3 + cfg.d_e, cfg.d_t, b);
    if (cfg.aggregation == Aggregation::TransformerPMA) {
      for (int k = 0; k < cfg.depth; ++k)
        layers_.emplace_back("decoder.layer" + std::to_string(k), cfg.d_t, cfg.heads, cfg.ff, cfg.dropout, b);
      pool_ = nk::AttentionPool<T>("decoder.pma", cfg.d_t, cfg.heads, cfg.ff, cfg.dropout, b);
    }
    fc1_ = nk::Linear<T>("decoder.head.fc1", cfg.d_t, cfg.d_t / 2, b);
    fc2_ = nk::Linear<T>("decoder.head.fc2", cfg.d_t / 2, 3, b);
  }

  const DecoderConfig& config() const { return cfg_; }

  /// set [P,q,3+d_e] -> [P,d_t].
  nk::Tensor<T> aggregate(const nk::Tensor<T>& set, const nk::ForwardCtx& ctx) const {
    if (set.rank() != 3 || set.dim(1) < 1)
      throw nk::ShapeError("aggregate: expected a non-empty set [P,q,3+d_e], got " + nk::to_string(set.shape()));
    auto h = in_proj_(set);
    if (cfg_.aggregation == Aggregation::MaxPool) return nk::max_over_set(h);
    for (const auto& l : layers_) h = l(h, ctx);
    return pool_(h, ctx);
  }

  /// [P,d_t] -> unit normals [P,3].
  nk::Tensor<T> predict_normal(const nk::Tensor<T>& feat) const {
    return nk::l2_normalize_rows(fc2_(nk::relu(fc1_(feat))));
  }

  nk::Tensor<T> operator()(const nk::Tensor<T>& set, const nk::ForwardCtx& ctx) const {
    return predict_normal(aggregate(set, ctx));
  }

  void params(nk::ParamList<T>& out) {
    in_proj_.params(out);
    for (auto& l : layers_) l.params(out);
    if (cfg_.aggregation == Aggregation::TransformerPMA) pool_.params(out);
    fc1_.params(out);
    fc2_.params(out);
  }

  nk::Linear<T>& in_proj() { return in_proj_; }
  nk::Linear<T>& head_fc1() { return fc1_; }
  nk::Linear<T>& head_fc2() { return fc2_; }

private:
  DecoderConfig cfg_;
  nk::Linear<T> in_proj_;
  std::vector<nk::TransformerLayer<T>> layers_;
  nk::AttentionPool<T> pool_;
  nk::Linear<T> fc1_, fc2_;
};

/// Per-pixel sets [P,q,3+d_e]: observed normalized RGB of every image at
/// each pixel, followed by that image's sampled context.
template <class T>
nk::Tensor<T> build_pixel_sets(const std::vector<Image>& normalized, std::span<const std::array<int, 2>> pixels,
                               const nk::Tensor<T>& contexts, const prep::Rect& rect) {
  const auto q = static_cast<std::int64_t>(normalized.size());
  const auto P = static_cast<std::int64_t>(pixels.size());
  if (q != contexts.dim(0)) throw nk::ShapeError("decoder: image count does not match contexts");
  std::vector<T> rgb(static_cast<std::size_t>(P * q * 3));
  for (std::int64_t p = 0; p < P; ++p)
    for (std::int64_t i = 0; i < q; ++i)
      for (int c = 0; c < 3; ++c)
        rgb[static_cast<std::size_t>((p * q + i) * 3 + c)] =
            static_cast<T>(normalized[static_cast<std::size_t>(i)].at(pixels[p][0], pixels[p][1], c));
  const auto coords = context_coords(pixels, rect, contexts.dim(1));
  return nk::concat_last(nk::Tensor<T>::from({P, q, 3}, std::move(rgb)), sample_context(contexts, coords));
}

}  // namespace unips
