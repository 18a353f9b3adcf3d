#pragma once

// Intra-class variation (ICV) and inter-domain dissimilarity (IDD).
//
// ICV(D) is the mean over classes of JS(P_i, Q_i), where P_i and Q_i are the
// pooled channel histograms of two equal, randomly drawn halves of class i,
// averaged over several seeded trials. IDD(A, B) is the JS divergence between
// the pooled channel histograms of two whole domains. Both are in bits, so
// they lie in [0, 1].

#include <algorithm>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "domainshift/corpus.hpp"
#include "domainshift/divergence.hpp"
#include "domainshift/error.hpp"
#include "domainshift/histogram.hpp"
#include "domainshift/image.hpp"
#include "domainshift/nn.hpp"
#include "domainshift/rng.hpp"

namespace domainshift {

/// Anything that maps a sample path to its channel counts.
template <typename S>
concept CountSource = requires(S& source, const std::string& path) {
  { source.counts(path) } -> std::convertible_to<const ChannelCounts&>;
};

/// Decodes image files on first use and memoizes their channel counts.
class FileCountSource {
 public:
  const ChannelCounts& counts(const std::string& path) {
    if (auto it = cache_.find(path); it != cache_.end()) return it->second;
    return cache_.emplace(path, count_channels(decode_image(path))).first->second;
  }

  /// Decode every path not yet cached, spread across `threads` workers.
  void warm(const std::vector<std::string>& paths, unsigned threads = std::thread::hardware_concurrency()) {
    std::vector<std::string> todo;
    for (const auto& p : paths)
      if (!cache_.count(p)) todo.push_back(p);
    std::sort(todo.begin(), todo.end());
    todo.erase(std::unique(todo.begin(), todo.end()), todo.end());
    std::vector<std::optional<ChannelCounts>> results(todo.size());
    std::optional<Error> failure;
    std::mutex failure_mutex;
    const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(todo.size())));
    {
      std::vector<std::jthread> pool;
      for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
          for (std::size_t i = w; i < todo.size(); i += workers) {
            try {
              results[i] = count_channels(decode_image(todo[i]));
            } catch (const Error& e) {
              std::lock_guard lock(failure_mutex);
              if (!failure) failure = e;
            }
          }
        });
      }
    }
    if (failure) throw *failure;
    for (std::size_t i = 0; i < todo.size(); ++i) cache_.emplace(todo[i], *results[i]);
  }

  std::size_t cached() const { return cache_.size(); }

 private:
  std::unordered_map<std::string, ChannelCounts> cache_;
};

/// In-memory images keyed by an arbitrary path string.
class MemoryCountSource {
 public:
  void add(const std::string& path, const PixelGrid& grid) { cache_[path] = count_channels(grid); }
  const ChannelCounts& counts(const std::string& path) const {
    auto it = cache_.find(path);
    require(it != cache_.end(), ErrorKind::DecodeError, "no image registered under this path", path);
    return it->second;
  }

 private:
  std::unordered_map<std::string, ChannelCounts> cache_;
};

// ---------------------------------------------------------------------------
// ICV

struct IcvOptions {
  std::size_t trials = 3;
  std::uint64_t seed = 0;
  /// Per-class cap applied after each trial's shuffle, so capped trials also
  /// resample which images take part. Unset: every trial re-splits all images.
  std::optional<std::size_t> sample_cap;
  PoolMode pool = PoolMode::PixelWeighted;
};

struct IcvReport {
  std::string domain;
  std::vector<std::string> classes;
  std::map<std::string, double> per_class;
  double icv = 0.0;
  std::size_t trials = 0;
  std::uint64_t seed = 0;
  std::optional<std::size_t> sample_cap;
  /// per_trial[t][i]: JS of class classes[i] in trial t
  std::vector<std::vector<double>> per_trial;
  /// shuffle key of each (trial, class) cell
  std::vector<std::vector<std::uint64_t>> trial_keys;
  std::vector<Warning> warnings;
};

/// Shuffle key for one ICV trial of one class.
inline std::uint64_t icv_trial_key(std::uint64_t seed, std::size_t trial, const std::string& cls) {
  return derive_key(seed, static_cast<std::uint64_t>(trial), hash_name(cls));
}

template <CountSource Source>
IcvReport intra_class_variation(const DomainSpec& domain, Source& source, const IcvOptions& options = {}) {
  require(options.trials >= 1, ErrorKind::PreconditionFailed, "trials must be >= 1");
  require(!options.sample_cap || *options.sample_cap >= 2, ErrorKind::PreconditionFailed,
          "sample cap must be >= 2 for ICV");
  IcvReport report;
  report.domain = domain.name;
  report.trials = options.trials;
  report.seed = options.seed;
  report.sample_cap = options.sample_cap;
  for (const auto& [cls, paths] : domain.classes) {
    if (paths.size() >= 2) {
      report.classes.push_back(cls);
    } else {
      report.warnings.push_back({"class has fewer than 2 samples; excluded from ICV", domain.name + "/" + cls});
    }
  }
  require(!report.classes.empty(), ErrorKind::NoUsableClass,
          "no class has the two samples needed for a split", domain.name);

  report.per_trial.assign(options.trials, std::vector<double>(report.classes.size(), 0.0));
  report.trial_keys.assign(options.trials, std::vector<std::uint64_t>(report.classes.size(), 0));
  for (std::size_t t = 0; t < options.trials; ++t) {
    for (std::size_t i = 0; i < report.classes.size(); ++i) {
      const auto& cls = report.classes[i];
      std::vector<std::string> order = domain.classes.at(cls);
      const std::uint64_t key = icv_trial_key(options.seed, t, cls);
      CounterRng rng(key);
      shuffle(std::span<std::string>(order), rng);
      if (options.sample_cap && order.size() > *options.sample_cap) order.resize(*options.sample_cap);
      const std::size_t half = order.size() / 2;  // odd counts drop the last shuffled sample
      std::vector<ChannelCounts> first, second;
      for (std::size_t k = 0; k < half; ++k) {
        first.push_back(source.counts(order[k]));
        second.push_back(source.counts(order[half + k]));
      }
      const auto p = pool_counts(first, options.pool);
      const auto q = pool_counts(second, options.pool);
      report.per_trial[t][i] = js_divergence(p.probs(), q.probs()).value;
      report.trial_keys[t][i] = key;
    }
  }
  CompensatedSum class_total;
  for (std::size_t i = 0; i < report.classes.size(); ++i) {
    CompensatedSum trial_total;
    for (std::size_t t = 0; t < options.trials; ++t) trial_total.add(report.per_trial[t][i]);
    const double mean = trial_total.value() / static_cast<double>(options.trials);
    report.per_class[report.classes[i]] = mean;
    class_total.add(mean);
  }
  report.icv = class_total.value() / static_cast<double>(report.classes.size());
  return report;
}

inline nlohmann::json to_json(const IcvReport& r) {
  nlohmann::json warnings = nlohmann::json::array();
  for (const auto& w : r.warnings) warnings.push_back(to_json(w));
  return {{"domain", r.domain},
          {"classes", r.classes},
          {"per_class", r.per_class},
          {"icv", r.icv},
          {"trials", r.trials},
          {"seed", r.seed},
          {"sample_cap", r.sample_cap ? nlohmann::json(*r.sample_cap) : nlohmann::json(nullptr)},
          {"per_trial", r.per_trial},
          {"trial_keys", r.trial_keys},
          {"warnings", warnings},
          {"log_base", kLogBase}};
}

// ---------------------------------------------------------------------------
// IDD

struct IddOptions {
  /// Per-domain image cap; a seeded subset is drawn when a domain is larger.
  std::optional<std::size_t> sample_cap;
  std::uint64_t seed = 0;
  PoolMode pool = PoolMode::PixelWeighted;
};

struct PooledDomain {
  ChannelDistribution distribution;
  std::size_t images = 0;
};

template <CountSource Source>
PooledDomain pooled_domain(const DomainSpec& domain, Source& source, const IddOptions& options = {}) {
  std::vector<std::string> paths = domain.all_paths();
  require(!paths.empty(), ErrorKind::EmptyDomain, "domain has no samples", domain.name);
  if (options.sample_cap && paths.size() > *options.sample_cap) {
    CounterRng rng(derive_key(options.seed, hash_name("idd-cap"), hash_name(domain.name)));
    shuffle(std::span<std::string>(paths), rng);
    paths.resize(*options.sample_cap);
  }
  require(!paths.empty(), ErrorKind::EmptyDomain, "sample cap leaves no samples", domain.name);
  std::vector<ChannelCounts> counts;
  counts.reserve(paths.size());
  for (const auto& p : paths) counts.push_back(source.counts(p));
  return {pool_counts(counts, options.pool), paths.size()};
}

template <CountSource Source>
double inter_domain_dissimilarity(const DomainSpec& a, const DomainSpec& b, Source& source,
                                  const IddOptions& options = {}) {
  const auto pa = pooled_domain(a, source, options);
  const auto pb = pooled_domain(b, source, options);
  return js_divergence(pa.distribution.probs(), pb.distribution.probs()).value;
}

struct IddMatrix {
  std::vector<std::string> domain_names;
  std::vector<std::vector<double>> values;
  /// images (or feature samples) used per domain
  std::vector<std::size_t> sample_counts;
  std::optional<std::size_t> sample_cap;
  std::uint64_t seed = 0;
  /// Index of the reference row/column, when one was supplied.
  std::optional<std::size_t> reference_index;
};

/// Symmetric JS matrix over precomputed distributions; the diagonal is exactly 0.
inline std::vector<std::vector<double>> pairwise_js(const std::vector<std::vector<double>>& dists) {
  const std::size_t n = dists.size();
  std::vector<std::vector<double>> values(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      values[i][j] = values[j][i] = js_divergence(dists[i], dists[j]).value;
    }
  }
  return values;
}

/// Pairwise IDD over `domains`, plus a trailing reference row/column when
/// `reference` is given.
template <CountSource Source>
IddMatrix idd_matrix(const std::vector<DomainSpec>& domains, const DomainSpec* reference, Source& source,
                     const IddOptions& options = {}) {
  IddMatrix m;
  m.sample_cap = options.sample_cap;
  m.seed = options.seed;
  std::vector<std::vector<double>> dists;
  auto add = [&](const DomainSpec& d) {
    const auto pooled = pooled_domain(d, source, options);
    m.domain_names.push_back(d.name);
    m.sample_counts.push_back(pooled.images);
    dists.emplace_back(pooled.distribution.probs().begin(), pooled.distribution.probs().end());
  };
  for (const auto& d : domains) add(d);
  if (reference) {
    m.reference_index = m.domain_names.size();
    add(*reference);
  }
  m.values = pairwise_js(dists);
  return m;
}

inline nlohmann::json to_json(const IddMatrix& m) {
  return {{"domain_names", m.domain_names},
          {"values", m.values},
          {"sample_counts", m.sample_counts},
          {"sample_cap", m.sample_cap ? nlohmann::json(*m.sample_cap) : nlohmann::json(nullptr)},
          {"seed", m.seed},
          {"reference_index", m.reference_index ? nlohmann::json(*m.reference_index) : nlohmann::json(nullptr)},
          {"log_base", kLogBase}};
}

// ---------------------------------------------------------------------------
// Representation-space IDD

inline constexpr std::size_t kDefaultFeatureBins = 32;

struct FeatureDomain {
  std::string name;
  std::vector<Vector> inputs;
};

struct RepresentationIddOptions {
  std::size_t bins = kDefaultFeatureBins;
  std::uint64_t seed = 0;
  /// Overrides the joint min-max range shared by all domains.
  std::optional<RangePolicy> range;
};

inline std::vector<std::vector<double>> extract_features(const ToyFeaturizer& featurizer,
                                                         const std::vector<Vector>& inputs) {
  std::vector<std::vector<double>> out;
  out.reserve(inputs.size());
  for (const auto& x : inputs) {
    const Vector f = featurizer.forward(x);
    out.emplace_back(f.data(), f.data() + f.size());
  }
  return out;
}

/// IDD between domains in the featurizer's output space: each domain's
/// features are binned per dimension over one range shared by all domains.
inline IddMatrix representation_idd(const ToyFeaturizer& featurizer,
                                    const std::vector<FeatureDomain>& domains,
                                    const RepresentationIddOptions& options = {}) {
  require(!domains.empty(), ErrorKind::EmptyDomain, "no domains given");
  std::vector<std::vector<std::vector<double>>> features;
  std::vector<std::vector<double>> all;
  for (const auto& d : domains) {
    require(!d.inputs.empty(), ErrorKind::EmptyDomain, "domain has no samples", d.name);
    features.push_back(extract_features(featurizer, d.inputs));
    all.insert(all.end(), features.back().begin(), features.back().end());
  }
  const RangePolicy policy = options.range ? *options.range : RangePolicy(PerDimensionRange{min_max_ranges(all)});

  IddMatrix m;
  m.seed = options.seed;
  std::vector<std::vector<double>> dists;
  for (std::size_t i = 0; i < domains.size(); ++i) {
    m.domain_names.push_back(domains[i].name);
    m.sample_counts.push_back(domains[i].inputs.size());
    dists.push_back(feature_histogram(features[i], options.bins, policy).probs);
  }
  m.values = pairwise_js(dists);
  return m;
}

/// Mean IDD between `target` and every other domain of the matrix.
inline double mean_idd_to(const IddMatrix& m, std::size_t target) {
  require(m.values.size() >= 2, ErrorKind::PreconditionFailed, "need at least two domains");
  CompensatedSum total;
  for (std::size_t j = 0; j < m.values.size(); ++j)
    if (j != target) total.add(m.values[target][j]);
  return total.value() / static_cast<double>(m.values.size() - 1);
}

}  // namespace domainshift
