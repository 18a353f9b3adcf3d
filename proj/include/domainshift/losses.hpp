#pragma once

// Differentiable losses on logits and feature vectors. Each loss comes with a
// `_grad` variant returning the value and the gradient with respect to its
// trainable argument.

#include <cmath>
#include <numbers>

#include "domainshift/divergence.hpp"
#include "domainshift/error.hpp"
#include "domainshift/nn.hpp"

namespace domainshift {

struct LossGrad {
  double value = 0.0;
  Vector grad;
};

/// Softmax with max-subtraction.
inline Vector softmax(const Vector& logits, double temperature = 1.0) {
  require(temperature > 0.0, ErrorKind::PreconditionFailed, "softmax temperature must be > 0");
  const Vector scaled = logits / temperature;
  const Vector e = (scaled.array() - scaled.maxCoeff()).exp().matrix();
  return e / e.sum();
}

/// log-softmax via log-sum-exp.
inline Vector log_softmax(const Vector& logits) {
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  return (logits.array() - lse).matrix();
}

/// -ln softmax(logits)[label]; gradient softmax - onehot.
inline LossGrad cross_entropy_grad(const Vector& logits, std::size_t label) {
  require(logits.size() >= 2, ErrorKind::PreconditionFailed, "cross entropy needs >= 2 classes");
  require(label < static_cast<std::size_t>(logits.size()), ErrorKind::LabelOutOfRange,
          "label " + std::to_string(label) + " out of range");
  const Vector logp = log_softmax(logits);
  Vector grad = logp.array().exp().matrix();
  grad(static_cast<Eigen::Index>(label)) -= 1.0;
  return {-logp(static_cast<Eigen::Index>(label)), std::move(grad)};
}

inline double cross_entropy(const Vector& logits, std::size_t label) {
  return cross_entropy_grad(logits, label).value;
}

/// How feature vectors become probability vectors for the grounding term.
enum class FeatureNormalization {
  /// softmax(z / T); blind to adding a constant to every feature.
  Softmax,
  /// softmax over (z / T, 0): a fixed zero logit pins the common offset.
  AnchoredSoftmax,
};

/// JS divergence (bits) between the normalized precursor features fs_out and
/// DG features f_out, with the gradient taken with respect to f_out only; the
/// precursor side is a constant.
///
/// For q = normalize(f_out) and m = (p + q) / 2, dJS/dq_k = log2(q_k / m_k) / 2;
/// the softmax Jacobian then gives dJS/dz = q * (g - <q, g>) / T, restricted
/// to the feature coordinates.
inline LossGrad grounding_js_grad(const Vector& fs_out, const Vector& f_out, double temperature = 1.0,
                                  FeatureNormalization norm = FeatureNormalization::Softmax) {
  require(fs_out.size() == f_out.size(), ErrorKind::DimensionMismatch,
          "precursor and DG features differ in dimension");
  require(f_out.size() >= 1, ErrorKind::DimensionMismatch, "features must be non-empty");
  require(temperature > 0.0, ErrorKind::PreconditionFailed, "temperature must be > 0");
  const Eigen::Index d = f_out.size();
  const bool anchored = norm == FeatureNormalization::AnchoredSoftmax;
  auto logits = [&](const Vector& z) {
    Vector out = Vector::Zero(anchored ? d + 1 : d);
    out.head(d) = z;
    return out;
  };
  const Vector p = softmax(logits(fs_out), temperature);
  const Vector q = softmax(logits(f_out), temperature);
  const auto n = static_cast<std::size_t>(p.size());
  double value = 0.0;
  if (n >= 2) value = js_divergence(std::span<const double>(p.data(), n), std::span<const double>(q.data(), n)).value;

  Vector g(q.size());
  for (Eigen::Index k = 0; k < q.size(); ++k) {
    const double m = 0.5 * (p(k) + q(k));
    g(k) = q(k) > 0.0 ? 0.5 * std::log2(q(k) / m) : 0.0;
  }
  const double qg = q.dot(g);
  Vector grad = (q.array() * (g.array() - qg)).matrix().head(d) / temperature;
  return {value, std::move(grad)};
}

inline double grounding_js(const Vector& fs_out, const Vector& f_out, double temperature = 1.0,
                           FeatureNormalization norm = FeatureNormalization::Softmax) {
  return grounding_js_grad(fs_out, f_out, temperature, norm).value;
}

/// KL(softmax(precursor_logits) || softmax(dg_logits)) in nats, with the
/// gradient taken with respect to dg_logits: softmax(dg) - softmax(precursor).
inline LossGrad kl_head_regularizer_grad(const Vector& precursor_logits, const Vector& dg_logits) {
  require(precursor_logits.size() == dg_logits.size(), ErrorKind::DimensionMismatch,
          "precursor and DG logits differ in dimension");
  const Vector logp = log_softmax(precursor_logits);
  const Vector logq = log_softmax(dg_logits);
  const Vector p = logp.array().exp().matrix();
  CompensatedSum kl;
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    if (p(k) > 0.0) kl.add(p(k) * (logp(k) - logq(k)));
  }
  Vector grad = logq.array().exp().matrix() - p;
  return {std::max(kl.value(), 0.0), std::move(grad)};
}

inline double kl_head_regularizer(const Vector& precursor_logits, const Vector& dg_logits) {
  return kl_head_regularizer_grad(precursor_logits, dg_logits).value;
}

}  // namespace domainshift
