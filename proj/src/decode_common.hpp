// SPDX-License-Identifier: Apache-2.0
// Arithmetic shared by the fused and the reference decoder. Both must go
// through exactly these helpers for their outputs to agree bit for bit.
#pragma once

#include "streamdec/model.hpp"
#include "streamdec/ops.hpp"
#include "streamdec/quant.hpp"

#include <vector>

namespace streamdec::detail {

inline HalfVector padded(const HalfVector& v, int length) {
  HalfVector out = HalfVector::Zero(length);
  out.head(v.size()) = v;
  return out;
}

/// Scaled q.k through the dot engine, both operands zero-extended to the
/// lane width.
inline Half head_logit(const HalfVector& q_rot, const HalfVector& k, const ModelConfig& cfg) {
  const int n = cfg.padded_head();
  return scale_logit(dot(padded(q_rot, n), padded(k, n), cfg.bus.dot_config()), cfg.head_dim);
}

/// sum_j p_j * v_j in float, in the order the terms are added.
class WeightedSum {
 public:
  explicit WeightedSum(int n) : acc_(static_cast<std::size_t>(n), 0.0f) {}
  void add(Half p, const HalfVector& v) {
    const float pf = static_cast<float>(p);
    for (std::size_t i = 0; i < acc_.size(); ++i) acc_[i] += pf * static_cast<float>(v(static_cast<Eigen::Index>(i)));
  }
  HalfVector result() const {
    HalfVector out(static_cast<Eigen::Index>(acc_.size()));
    for (std::size_t i = 0; i < acc_.size(); ++i) out(static_cast<Eigen::Index>(i)) = Half(acc_[i]);
    return out;
  }

 private:
  std::vector<float> acc_;
};

inline Half residual_add(Half x, Half o) { return Half(static_cast<float>(x) + static_cast<float>(o)); }

inline HalfVector embedding_row(const HalfMatrix& e, int token) {
  HalfVector x(e.cols());
  for (Eigen::Index i = 0; i < e.cols(); ++i) x(i) = e(token, i);
  return x;
}

inline void check_token(const ModelConfig& cfg, int token, int position) {
  if (token < 0 || token >= cfg.vocab_size)
    throw IndexError("token id " + std::to_string(token) + " outside vocabulary of " + std::to_string(cfg.vocab_size));
  if (position >= cfg.max_context)
    throw CapacityError("context full: position " + std::to_string(position) + " reaches max_context " +
                            std::to_string(cfg.max_context),
                        "kv_cache");
}

}  // namespace streamdec::detail
