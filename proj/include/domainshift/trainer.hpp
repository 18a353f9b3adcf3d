#pragma once

// Two-phase grounded training at desk scale. Phase one fits a precursor
// featurizer + head by cross-entropy; phase two freezes it and trains a
// DG model on  l_erm + lambda * l_js (+ lambda_kl * l_kl),
// where l_js is the JS divergence between softmax-normalized precursor and
// DG features and l_kl is the KL divergence between the two heads' softmax
// outputs. l_s (precursor cross-entropy) is still evaluated when precursor
// samples are supplied, so every step reports the full objective.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "domainshift/adam.hpp"
#include "domainshift/divergence.hpp"
#include "domainshift/error.hpp"
#include "domainshift/losses.hpp"
#include "domainshift/nn.hpp"
#include "domainshift/rng.hpp"

namespace domainshift {

struct Sample {
  Vector x;
  std::size_t label = 0;
};

using LabeledSet = std::vector<Sample>;

struct DomainSamples {
  std::string name;
  LabeledSet samples;
};

struct Model {
  ToyFeaturizer featurizer;
  LinearHead head;

  Vector logits(const Vector& x) const { return head.forward(featurizer.forward(x)); }
  std::size_t predict(const Vector& x) const {
    Eigen::Index best = 0;
    logits(x).maxCoeff(&best);
    return static_cast<std::size_t>(best);
  }
  friend bool operator==(const Model&, const Model&) = default;
};

struct ModelGrad {
  std::vector<double> featurizer;
  std::vector<double> head;

  static ModelGrad zeros_like(const Model& m) {
    return {std::vector<double>(m.featurizer.parameter_count(), 0.0),
            std::vector<double>(m.head.parameter_count(), 0.0)};
  }
};

struct TrainConfig {
  double lambda = 0.1;
  double lambda_kl = 0.0;
  double lr = 1e-2;
  std::size_t batch_size = 16;
  std::size_t steps = 500;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Softmax temperature used to turn features into distributions for l_js.
  double temperature = 1.0;
  FeatureNormalization normalization = FeatureNormalization::Softmax;
  InitMode init = KaimingInit{};

  void check() const {
    require(lr > 0.0, ErrorKind::PreconditionFailed, "lr must be > 0");
    require(batch_size >= 1, ErrorKind::PreconditionFailed, "batch_size must be >= 1");
    require(steps >= 1, ErrorKind::PreconditionFailed, "steps must be >= 1");
    require(lambda >= 0.0 && lambda_kl >= 0.0, ErrorKind::PreconditionFailed,
            "loss coefficients must be >= 0");
    require(temperature > 0.0, ErrorKind::PreconditionFailed, "temperature must be > 0");
  }
  AdamConfig adam() const { return {lr, beta1, beta2, adam_eps}; }
};

struct LossBreakdown {
  double l_s = 0.0;
  double l_erm = 0.0;
  double l_js = 0.0;
  double l_kl = 0.0;
  double total = 0.0;

  static LossBreakdown compose(double l_s, double l_erm, double l_js, double l_kl, double lambda,
                               double lambda_kl) {
    return {l_s, l_erm, l_js, l_kl, l_s + l_erm + lambda * l_js + lambda_kl * l_kl};
  }
  friend bool operator==(const LossBreakdown&, const LossBreakdown&) = default;
};

/// Epoch-wise shuffled index stream; each epoch reshuffles with its own key.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed, std::string_view stream)
      : n_(n), key_(derive_key(seed, hash_name(stream))) {
    require(n > 0, ErrorKind::PreconditionFailed, "cannot sample batches from an empty set");
    reshuffle();
  }

  std::vector<std::size_t> next(std::size_t batch_size) {
    std::vector<std::size_t> out;
    out.reserve(batch_size);
    while (out.size() < batch_size) {
      if (cursor_ == order_.size()) {
        ++epoch_;
        reshuffle();
      }
      out.push_back(order_[cursor_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    order_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
    CounterRng rng(derive_key(key_, epoch_));
    shuffle(std::span<std::size_t>(order_), rng);
    cursor_ = 0;
  }

  std::size_t n_;
  std::uint64_t key_;
  std::uint64_t epoch_ = 0;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

inline LabeledSet gather(const LabeledSet& data, const std::vector<std::size_t>& idx) {
  LabeledSet out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(data[i]);
  return out;
}

inline LabeledSet pool_domains(const std::vector<DomainSamples>& domains) {
  LabeledSet out;
  for (const auto& d : domains) out.insert(out.end(), d.samples.begin(), d.samples.end());
  return out;
}

/// Mean cross-entropy of `model` over `batch`; accumulates its gradient when asked.
inline double mean_cross_entropy(std::span<const Sample> batch, const Model& model,
                                 ModelGrad* grad = nullptr) {
  require(!batch.empty(), ErrorKind::PreconditionFailed, "empty batch");
  const double inv = 1.0 / static_cast<double>(batch.size());
  CompensatedSum total;
  ForwardCache f_cache, g_cache;
  for (const auto& s : batch) {
    const Vector feat = model.featurizer.forward(s.x, &f_cache);
    const Vector logits = model.head.forward(feat, &g_cache);
    const auto ce = cross_entropy_grad(logits, s.label);
    total.add(ce.value);
    if (grad) {
      Vector d_logits = ce.grad;
      d_logits *= inv;
      const Vector d_feat = model.head.backward(g_cache, d_logits, grad->head);
      model.featurizer.backward(f_cache, d_feat, grad->featurizer);
    }
  }
  return total.value() * inv;
}

/// The grounded objective over one batch. `precursor` is read-only; gradients
/// (when requested) are accumulated for `model` only. An empty
/// `precursor_batch` reports l_s = 0.
inline LossBreakdown smos_total_loss(std::span<const Sample> batch,
                                     std::span<const Sample> precursor_batch, const Model& precursor,
                                     const Model& model, const TrainConfig& config,
                                     ModelGrad* grad = nullptr) {
  require(!batch.empty(), ErrorKind::PreconditionFailed, "empty batch");
  require(precursor.featurizer.feat_dim() == model.featurizer.feat_dim(), ErrorKind::ShapeMismatch,
          "precursor and DG featurizers must share the feature dimension");
  const bool heads_match = precursor.head.n_classes() == model.head.n_classes();
  require(heads_match || config.lambda_kl == 0.0, ErrorKind::ShapeMismatch,
          "last-layer KL needs matching class counts");

  const double l_s = precursor_batch.empty() ? 0.0 : mean_cross_entropy(precursor_batch, precursor);

  const double inv = 1.0 / static_cast<double>(batch.size());
  CompensatedSum erm, js, kl;
  ForwardCache f_cache, g_cache;
  for (const auto& s : batch) {
    const Vector feat = model.featurizer.forward(s.x, &f_cache);
    const Vector logits = model.head.forward(feat, &g_cache);
    const Vector pre_feat = precursor.featurizer.forward(s.x);
    const auto ce = cross_entropy_grad(logits, s.label);
    const auto ground = grounding_js_grad(pre_feat, feat, config.temperature, config.normalization);
    erm.add(ce.value);
    js.add(ground.value);
    LossGrad head_kl{0.0, Vector::Zero(logits.size())};
    if (heads_match) head_kl = kl_head_regularizer_grad(precursor.head.forward(pre_feat), logits);
    kl.add(head_kl.value);
    if (grad) {
      Vector d_logits = ce.grad;
      if (config.lambda_kl != 0.0) d_logits += config.lambda_kl * head_kl.grad;
      d_logits *= inv;
      Vector d_feat = model.head.backward(g_cache, d_logits, grad->head);
      d_feat += (config.lambda * inv) * ground.grad;
      model.featurizer.backward(f_cache, d_feat, grad->featurizer);
    }
  }
  return LossBreakdown::compose(l_s, erm.value() * inv, js.value() * inv, kl.value() * inv,
                                config.lambda, config.lambda_kl);
}

inline double accuracy(const Model& model, std::span<const Sample> data) {
  require(!data.empty(), ErrorKind::PreconditionFailed, "empty evaluation set");
  std::size_t hits = 0;
  for (const auto& s : data) hits += model.predict(s.x) == s.label ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

/// Mean grounding JS between two featurizers over a sample set.
inline double mean_grounding_js(const ToyFeaturizer& precursor, const ToyFeaturizer& featurizer,
                                std::span<const Sample> data, double temperature = 1.0,
                                FeatureNormalization norm = FeatureNormalization::Softmax) {
  require(!data.empty(), ErrorKind::PreconditionFailed, "empty evaluation set");
  CompensatedSum total;
  for (const auto& s : data) {
    total.add(grounding_js(precursor.forward(s.x), featurizer.forward(s.x), temperature, norm));
  }
  return total.value() / static_cast<double>(data.size());
}

inline void check_labels(const LabeledSet& data, std::size_t n_classes, std::size_t in_dim) {
  for (const auto& s : data) {
    require(s.label < n_classes, ErrorKind::LabelOutOfRange,
            "label " + std::to_string(s.label) + " out of range");
    require(static_cast<std::size_t>(s.x.size()) == in_dim, ErrorKind::DimensionMismatch,
            "sample dimension differs from the network input");
  }
}

inline Model init_model(const std::vector<std::size_t>& dims, std::size_t n_classes,
                        const TrainConfig& config) {
  Model m{init_featurizer(dims, config.init, config.seed), LinearHead()};
  m.head = LinearHead(m.featurizer.feat_dim(), n_classes);
  kaiming_init(m.head, config.seed, "head");
  return m;
}

struct PrecursorResult {
  Model model;
  /// Mini-batch cross-entropy before each update.
  std::vector<double> loss_curve;
};

/// Phase one: minibatch Adam on the precursor's cross-entropy.
inline PrecursorResult train_precursor(const LabeledSet& data, const std::vector<std::size_t>& dims,
                                       std::size_t n_classes, const TrainConfig& config) {
  config.check();
  require(n_classes >= 2, ErrorKind::PreconditionFailed, "need >= 2 classes");
  require(!data.empty(), ErrorKind::PreconditionFailed, "empty precursor data");
  PrecursorResult result{init_model(dims, n_classes, config), {}};
  check_labels(data, n_classes, result.model.featurizer.in_dim());

  BatchSampler sampler(data.size(), config.seed, "precursor-batches");
  AdamState f_state, g_state;
  const auto adam = config.adam();
  for (std::size_t step = 0; step < config.steps; ++step) {
    const auto batch = gather(data, sampler.next(config.batch_size));
    auto grad = ModelGrad::zeros_like(result.model);
    result.loss_curve.push_back(mean_cross_entropy(batch, result.model, &grad));
    adam_step(result.model.featurizer.params(), grad.featurizer, f_state, adam);
    adam_step(result.model.head.params(), grad.head, g_state, adam);
  }
  return result;
}

struct GroundedResult {
  Model model;
  std::vector<LossBreakdown> history;
};

/// Plain empirical risk minimization over the pooled training domains.
inline GroundedResult train_erm(const std::vector<DomainSamples>& domains,
                                const std::vector<std::size_t>& dims, std::size_t n_classes,
                                const TrainConfig& config) {
  config.check();
  const LabeledSet data = pool_domains(domains);
  require(!data.empty(), ErrorKind::PreconditionFailed, "no training samples");
  GroundedResult result{init_model(dims, n_classes, config), {}};
  check_labels(data, n_classes, result.model.featurizer.in_dim());

  BatchSampler sampler(data.size(), config.seed, "dg-batches");
  AdamState f_state, g_state;
  const auto adam = config.adam();
  for (std::size_t step = 0; step < config.steps; ++step) {
    const auto batch = gather(data, sampler.next(config.batch_size));
    auto grad = ModelGrad::zeros_like(result.model);
    const double l_erm = mean_cross_entropy(batch, result.model, &grad);
    result.history.push_back(LossBreakdown::compose(0.0, l_erm, 0.0, 0.0, 0.0, 0.0));
    adam_step(result.model.featurizer.params(), grad.featurizer, f_state, adam);
    adam_step(result.model.head.params(), grad.head, g_state, adam);
  }
  return result;
}

/// Phase two: train f and g against a frozen precursor. When `precursor_data`
/// is given, a precursor batch is drawn each step (from its own stream) to
/// report l_s.
inline GroundedResult train_grounded(const std::vector<DomainSamples>& domains, const Model& precursor,
                                     const std::vector<std::size_t>& dims, std::size_t n_classes,
                                     const TrainConfig& config,
                                     const LabeledSet* precursor_data = nullptr) {
  config.check();
  const LabeledSet data = pool_domains(domains);
  require(!data.empty(), ErrorKind::PreconditionFailed, "no training samples");
  GroundedResult result{init_model(dims, n_classes, config), {}};
  check_labels(data, n_classes, result.model.featurizer.in_dim());
  require(precursor.featurizer.feat_dim() == result.model.featurizer.feat_dim(),
          ErrorKind::ShapeMismatch, "precursor feature dimension differs from the DG featurizer");
  require(precursor.featurizer.in_dim() == result.model.featurizer.in_dim(),
          ErrorKind::ShapeMismatch, "precursor input dimension differs from the DG featurizer");

  BatchSampler sampler(data.size(), config.seed, "dg-batches");
  std::optional<BatchSampler> precursor_sampler;
  if (precursor_data && !precursor_data->empty()) {
    precursor_sampler.emplace(precursor_data->size(), config.seed, "precursor-report-batches");
  }
  AdamState f_state, g_state;
  const auto adam = config.adam();
  for (std::size_t step = 0; step < config.steps; ++step) {
    const auto batch = gather(data, sampler.next(config.batch_size));
    LabeledSet precursor_batch;
    if (precursor_sampler) precursor_batch = gather(*precursor_data, precursor_sampler->next(config.batch_size));
    auto grad = ModelGrad::zeros_like(result.model);
    result.history.push_back(
        smos_total_loss(batch, precursor_batch, precursor, result.model, config, &grad));
    adam_step(result.model.featurizer.params(), grad.featurizer, f_state, adam);
    adam_step(result.model.head.params(), grad.head, g_state, adam);
  }
  return result;
}

}  // namespace domainshift
