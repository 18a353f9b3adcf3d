#pragma once

// KL and Jensen-Shannon divergences over discrete distributions, in bits.

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "domainshift/error.hpp"

namespace domainshift {

inline constexpr double kDistributionTolerance = 1e-9;
inline constexpr double kJsClampSlack = 1e-12;
inline constexpr int kLogBase = 2;

/// Neumaier-compensated running sum.
class CompensatedSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      carry_ += (sum_ - t) + x;
    } else {
      carry_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  CompensatedSum& operator+=(double x) {
    add(x);
    return *this;
  }
  double value() const { return sum_ + carry_; }

 private:
  double sum_ = 0.0;
  double carry_ = 0.0;
};

template <typename Range>
double compensated_total(const Range& values) {
  CompensatedSum s;
  for (double v : values) s.add(v);
  return s.value();
}

/// A validated probability vector: n >= 2, non-negative, sums to 1 within 1e-9.
class ProbVector {
 public:
  explicit ProbVector(std::vector<double> probs) : probs_(std::move(probs)) {
    require(probs_.size() >= 2, ErrorKind::NotADistribution, "need at least 2 outcomes");
    for (double p : probs_) {
      require(std::isfinite(p) && p >= 0.0, ErrorKind::NotADistribution,
              "negative or non-finite probability");
    }
    const double total = compensated_total(probs_);
    require(std::abs(total - 1.0) <= kDistributionTolerance, ErrorKind::NotADistribution,
            "probabilities sum to " + std::to_string(total));
  }

  std::span<const double> values() const { return probs_; }
  std::size_t size() const { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_[i]; }

 private:
  std::vector<double> probs_;
};

enum class DivergenceKind { KL, JS };

struct DivergenceValue {
  double value = 0.0;  // bits
  DivergenceKind kind = DivergenceKind::JS;

  bool infinite() const { return std::isinf(value); }
};

namespace detail {

inline void check_distribution(std::span<const double> p, const char* name) {
  require(p.size() >= 2, ErrorKind::NotADistribution, std::string(name) + " needs >= 2 outcomes");
  CompensatedSum total;
  for (double x : p) {
    require(std::isfinite(x) && x >= 0.0, ErrorKind::NotADistribution,
            std::string(name) + " has a negative or non-finite component");
    total.add(x);
  }
  require(std::abs(total.value() - 1.0) <= kDistributionTolerance, ErrorKind::NotADistribution,
          std::string(name) + " sums to " + std::to_string(total.value()));
}

// p * log2(p / q) with 0 * log(0 / q) = 0.
inline double kl_term(double p, double q) {
  if (p == 0.0) return 0.0;
  if (q == 0.0) return std::numeric_limits<double>::infinity();
  return p * std::log2(p / q);
}

}  // namespace detail

/// KL(p || q) in bits. With smoothing eps > 0, both inputs are first replaced
/// by (x + eps) / (1 + n * eps). With eps = 0 the result is +inf whenever q
/// vanishes on the support of p.
inline DivergenceValue kl_divergence(std::span<const double> p, std::span<const double> q,
                                     double smoothing = 0.0) {
  require(p.size() == q.size(), ErrorKind::LengthMismatch, "distributions differ in length");
  require(smoothing >= 0.0 && std::isfinite(smoothing), ErrorKind::PreconditionFailed,
          "smoothing must be finite and >= 0");
  detail::check_distribution(p, "p");
  detail::check_distribution(q, "q");
  const double norm = 1.0 + static_cast<double>(p.size()) * smoothing;
  CompensatedSum total;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = smoothing > 0.0 ? (p[i] + smoothing) / norm : p[i];
    const double qi = smoothing > 0.0 ? (q[i] + smoothing) / norm : q[i];
    const double term = detail::kl_term(pi, qi);
    if (std::isinf(term)) return {std::numeric_limits<double>::infinity(), DivergenceKind::KL};
    total.add(term);
  }
  return {total.value(), DivergenceKind::KL};
}

inline DivergenceValue kl_divergence(const ProbVector& p, const ProbVector& q, double smoothing = 0.0) {
  return kl_divergence(p.values(), q.values(), smoothing);
}

/// Jensen-Shannon divergence in bits, bounded by [0, 1]. Float excess of at
/// most 1e-12 outside the bounds is clamped; anything larger is an internal
/// error.
inline DivergenceValue js_divergence(std::span<const double> p, std::span<const double> q) {
  require(p.size() == q.size(), ErrorKind::LengthMismatch, "distributions differ in length");
  detail::check_distribution(p, "p");
  detail::check_distribution(q, "q");
  CompensatedSum total;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (m == 0.0) continue;
    total.add(detail::kl_term(p[i], m));
    total.add(detail::kl_term(q[i], m));
  }
  double js = 0.5 * total.value();
  if (js < 0.0) {
    require(js >= -kJsClampSlack, ErrorKind::Internal, "JS divergence below 0 beyond tolerance");
    js = 0.0;
  } else if (js > 1.0) {
    require(js <= 1.0 + kJsClampSlack, ErrorKind::Internal, "JS divergence above 1 beyond tolerance");
    js = 1.0;
  }
  return {js, DivergenceKind::JS};
}

inline DivergenceValue js_divergence(const ProbVector& p, const ProbVector& q) {
  return js_divergence(p.values(), q.values());
}

}  // namespace domainshift
