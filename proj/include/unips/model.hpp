#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "unips/decoder.hpp"
#include "unips/encoder.hpp"
#include "unips/image.hpp"
#include "unips/numkit/checkpoint.hpp"
#include "unips/parallel.hpp"
#include "unips/prep.hpp"

namespace unips {

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  std::uint64_t seed = 0;
  int margin = 4;

  void validate() const {
    encoder.validate();
    decoder.validate();
    if (decoder.d_e != encoder.d_e) throw ConfigError("model: decoder d_e differs from encoder d_e");
  }
};

inline nlohmann::json to_json(const ModelConfig& m) {
  const auto& e = m.encoder;
  const auto& d = m.decoder;
  return {{"s", e.s},
          {"c", e.c},
          {"d_e", e.d_e},
          {"placement", placement_name(e.placement)},
          {"window", e.window},
          {"heads", e.heads},
          {"head_dim", e.head_dim},
          {"blocks_per_stage", e.blocks_per_stage},
          {"comm_dropout", e.comm_dropout},
          {"uniform", e.uniform},
          {"depth", d.depth},
          {"d_t", d.d_t},
          {"ff", d.ff},
          {"decoder_heads", d.heads},
          {"aggregation", aggregation_name(d.aggregation)},
          {"decoder_dropout", d.dropout},
          {"margin", m.margin},
          {"seed", m.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig m;
  auto& e = m.encoder;
  auto& d = m.decoder;
  e.s = j.at("s");
  e.c = j.at("c");
  e.d_e = j.at("d_e");
  e.placement = parse_placement(j.at("placement"));
  e.window = j.at("window");
  e.heads = j.at("heads");
  e.head_dim = j.at("head_dim");
  e.blocks_per_stage = j.at("blocks_per_stage");
  e.comm_dropout = j.at("comm_dropout");
  e.uniform = j.at("uniform");
  d.d_e = e.d_e;
  d.depth = j.at("depth");
  d.d_t = j.at("d_t");
  d.ff = j.at("ff");
  d.heads = j.at("decoder_heads");
  d.aggregation = parse_aggregation(j.at("aggregation"));
  d.dropout = j.at("decoder_dropout");
  m.margin = j.at("margin");
  m.seed = j.at("seed");
  m.validate();
  return m;
}

/// Encoder plus decoder with shared construction seed.
template <class T>
class Model {
public:
  explicit Model(const ModelConfig& cfg) : cfg_(cfg), builder_(cfg.seed) {
    cfg_.validate();
    encoder_ = std::make_unique<Encoder<T>>(cfg_.encoder, builder_);
    decoder_ = std::make_unique<Decoder<T>>(cfg_.decoder, builder_);
  }

  const ModelConfig& config() const { return cfg_; }
  Encoder<T>& encoder() { return *encoder_; }
  Decoder<T>& decoder() { return *decoder_; }
  const Encoder<T>& encoder() const { return *encoder_; }
  const Decoder<T>& decoder() const { return *decoder_; }

  nk::ParamList<T> params() {
    nk::ParamList<T> out;
    encoder_->params(out);
    decoder_->params(out);
    return out;
  }

  prep::Prepared prepare(const std::vector<Image>& images, const Mask& mask) const {
    return prep::preprocess(images, mask, cfg_.encoder.s, cfg_.margin);
  }

  nk::Tensor<T> encode(const prep::Prepared& p, const nk::ForwardCtx& ctx) const {
    return (*encoder_)(stack_tensor<T>(p.canonical), ctx);
  }

  /// Unit normals [P,3] for the listed (row, col) pixels.
  nk::Tensor<T> decode(const prep::Prepared& p, const nk::Tensor<T>& contexts,
                       std::span<const std::array<int, 2>> pixels, const nk::ForwardCtx& ctx) const {
    return (*decoder_)(build_pixel_sets(p.normalized, pixels, contexts, p.canonical.rect), ctx);
  }

  void save(const std::string& checkpoint_path) {
    nk::save_params(checkpoint_path, params());
  }

  void load(const std::string& checkpoint_path) {
    auto ps = params();
    nk::load_params(checkpoint_path, ps);
  }

private:
  ModelConfig cfg_;
  nk::Builder builder_;
  std::unique_ptr<Encoder<T>> encoder_;
  std::unique_ptr<Decoder<T>> decoder_;
};

inline void write_model_config(const std::string& path, const ModelConfig& cfg) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << to_json(cfg).dump(2) << '\n';
}

inline ModelConfig read_model_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  return model_config_from_json(nlohmann::json::parse(is));
}

/// Masked pixels in row-major order.
inline std::vector<std::array<int, 2>> mask_pixels(const Mask& m) {
  std::vector<std::array<int, 2>> out;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m(y, x)) out.push_back({y, x});
  return out;
}

struct InferStats {
  std::int64_t decode_batches = 0;
  std::int64_t encoder_peak = 0;  // activation elements
  std::int64_t decode_peak = 0;   // above the retained contexts
};

/// Full-resolution normal map: encode once, then decode masked pixels in
/// batches of at most `batch` (without gradient recording).
template <class T>
NormalMap infer_normal_map(const Model<T>& model, const std::vector<Image>& images, const Mask& mask,
                           int batch = 4096, InferStats* stats = nullptr) {
  NormalMap out(mask.height, mask.width);
  const auto pixels = mask_pixels(mask);
  if (pixels.empty()) return out;
  if (batch < 1) throw std::invalid_argument("infer: batch must be positive");
  nk::NoGradGuard ng;
  auto& counter = nk::ActivationCounter::local();
  const auto prepared = model.prepare(images, mask);
  const auto base = counter.live;
  counter.reset_peak();
  const auto contexts = model.encode(prepared, nk::ForwardCtx{});
  const auto enc_peak = counter.peak - base;
  const auto n_batches = (static_cast<std::int64_t>(pixels.size()) + batch - 1) / batch;
  std::vector<std::int64_t> batch_peaks(static_cast<std::size_t>(n_batches), 0);
  parallel_for(0, n_batches, [&](std::int64_t bi) {
    nk::NoGradGuard worker_ng;
    auto& c = nk::ActivationCounter::local();
    const auto lo = bi * batch;
    const auto hi = std::min<std::int64_t>(lo + batch, static_cast<std::int64_t>(pixels.size()));
    const std::span<const std::array<int, 2>> chunk(pixels.data() + lo, static_cast<std::size_t>(hi - lo));
    const auto live0 = c.live;
    c.reset_peak();
    const auto n = model.decode(prepared, contexts, chunk, nk::ForwardCtx{});
    batch_peaks[static_cast<std::size_t>(bi)] = c.peak - live0;
    auto nv = n.data();
    for (std::size_t p = 0; p < chunk.size(); ++p) {
      const auto [y, x] = chunk[p];
      out.valid.set(y, x, true);
      for (int k = 0; k < 3; ++k) out.n.at(y, x, k) = static_cast<float>(nv[p * 3 + k]);
    }
  });
  if (stats) {
    stats->decode_batches = n_batches;
    stats->encoder_peak = enc_peak;
    stats->decode_peak = *std::max_element(batch_peaks.begin(), batch_peaks.end());
  }
  return out;
}

/// 8-bit visualization: (n + 1) / 2 per channel, invalid pixels black.
inline Image normal_to_rgb(const NormalMap& nm) {
  Image out(nm.height(), nm.width(), 3);
  for (int y = 0; y < nm.height(); ++y)
    for (int x = 0; x < nm.width(); ++x)
      if (nm.valid(y, x))
        for (int k = 0; k < 3; ++k) out.at(y, x, k) = 0.5f * (nm.n.at(y, x, k) + 1.f);
  return out;
}

}  // namespace unips
