// SPDX-License-Identifier: Apache-2.0
#include "streamdec/quant.hpp"

namespace streamdec {

HalfVector dequant_group(const QuantGroup& g) {
  HalfVector out(static_cast<Eigen::Index>(g.codes.size()));
  const float s = static_cast<float>(g.scale);
  for (std::size_t i = 0; i < g.codes.size(); ++i)
    out(static_cast<Eigen::Index>(i)) = Half(static_cast<float>(static_cast<int>(g.codes[i]) - g.zero) * s);
  return out;
}

void KvQuantizer::observe(Half x) {
  const double v = static_cast<double>(static_cast<float>(x));
  if (!std::isfinite(v)) throw DomainError("kv_quantize: non-finite input");
  lo_ = std::min(lo_, v);
  hi_ = std::max(hi_, v);
  ++count_;
}

KvQuantParams KvQuantizer::finish_range() {
  if (count_ == 0) throw ShapeError("kv_quantize: empty input");
  params_.scale = half_ceil(std::max((hi_ - lo_) / 255.0, kHalfMinNormal));
  scale_ = static_cast<double>(static_cast<float>(params_.scale));
  zero_point_ = std::ceil(lo_ / scale_);  // in [-255, 0]
  params_.zero = static_cast<std::uint8_t>(-zero_point_);
  closed_ = true;
  return params_;
}

std::uint8_t KvQuantizer::encode(Half x) const {
  if (!closed_) throw Error("KvQuantizer::encode called before finish_range");
  const double q = std::nearbyint(static_cast<double>(static_cast<float>(x)) / scale_) - zero_point_;
  return static_cast<std::uint8_t>(std::clamp(q, 0.0, 255.0));
}

KvQuantized kv_quantize(std::span<const Half> x) {
  KvQuantizer qz;
  for (Half v : x) qz.observe(v);
  KvQuantized out;
  out.params = qz.finish_range();
  out.codes.reserve(x.size());
  for (Half v : x) out.codes.push_back(qz.encode(v));
  return out;
}

HalfVector kv_dequantize(std::span<const std::uint8_t> codes, const KvQuantParams& p) {
  HalfVector out(static_cast<Eigen::Index>(codes.size()));
  const float s = static_cast<float>(p.scale);
  for (std::size_t i = 0; i < codes.size(); ++i)
    out(static_cast<Eigen::Index>(i)) = Half(static_cast<float>(static_cast<int>(codes[i]) - p.zero) * s);
  return out;
}

}  // namespace streamdec
