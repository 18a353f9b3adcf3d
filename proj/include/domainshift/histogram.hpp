#pragma once

// Binned probability estimates: 3 x 256 RGB channel histograms from pixel
// grids, and per-dimension histograms from real-valued feature vectors.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <variant>
#include <vector>

#include "json.hpp"

#include "domainshift/divergence.hpp"
#include "domainshift/error.hpp"
#include "domainshift/image.hpp"

namespace domainshift {

inline constexpr std::size_t kBinsPerChannel = 256;
inline constexpr std::size_t kChannelOutcomes = 3 * kBinsPerChannel;
inline constexpr double kChannelWeight = 1.0 / 3.0;

/// Raw bin counts for R, G, B; merging is plain addition, so pooling is
/// associative and order-independent.
struct ChannelCounts {
  std::array<std::uint64_t, kChannelOutcomes> bins{};
  std::uint64_t pixels = 0;

  ChannelCounts& operator+=(const ChannelCounts& other) {
    for (std::size_t i = 0; i < kChannelOutcomes; ++i) bins[i] += other.bins[i];
    pixels += other.pixels;
    return *this;
  }
  friend bool operator==(const ChannelCounts&, const ChannelCounts&) = default;
};

inline ChannelCounts count_channels(const PixelGrid& grid) {
  ChannelCounts counts;
  const auto& data = grid.data();
  for (std::size_t i = 0; i < data.size(); i += 3) {
    ++counts.bins[data[i]];
    ++counts.bins[kBinsPerChannel + data[i + 1]];
    ++counts.bins[2 * kBinsPerChannel + data[i + 2]];
  }
  counts.pixels = grid.pixel_count();
  return counts;
}

/// 768-outcome distribution R || G || B; each channel block carries mass 1/3.
class ChannelDistribution {
 public:
  ChannelDistribution() : probs_(kChannelOutcomes, 0.0) {}

  static ChannelDistribution from_counts(const ChannelCounts& counts) {
    require(counts.pixels > 0, ErrorKind::EmptyPool, "no pixels to normalize");
    ChannelDistribution d;
    const double denom = 3.0 * static_cast<double>(counts.pixels);
    for (std::size_t i = 0; i < kChannelOutcomes; ++i) {
      d.probs_[i] = static_cast<double>(counts.bins[i]) / denom;
    }
    return d;
  }

  /// Adopt an existing 768-vector after checking the block invariants.
  static ChannelDistribution from_probs(std::vector<double> probs) {
    require(probs.size() == kChannelOutcomes, ErrorKind::LengthMismatch,
            "channel distribution needs 768 components");
    ChannelDistribution d;
    d.probs_ = std::move(probs);
    for (std::size_t c = 0; c < 3; ++c) {
      CompensatedSum block;
      for (std::size_t v = 0; v < kBinsPerChannel; ++v) {
        const double p = d.probs_[c * kBinsPerChannel + v];
        require(std::isfinite(p) && p >= 0.0, ErrorKind::NotADistribution, "negative component");
        block.add(p);
      }
      require(std::abs(block.value() - kChannelWeight) <= kDistributionTolerance,
              ErrorKind::NotADistribution, "channel block does not sum to 1/3");
    }
    return d;
  }

  std::span<const double> probs() const { return probs_; }
  double operator[](std::size_t i) const { return probs_[i]; }
  static constexpr std::size_t bins_per_channel() { return kBinsPerChannel; }
  static constexpr double channel_weight() { return kChannelWeight; }

  /// Mass in block `channel` (0 = R, 1 = G, 2 = B).
  std::span<const double> channel(std::size_t channel) const {
    return std::span<const double>(probs_).subspan(channel * kBinsPerChannel, kBinsPerChannel);
  }

  friend bool operator==(const ChannelDistribution&, const ChannelDistribution&) = default;

 private:
  std::vector<double> probs_;
};

inline ChannelDistribution image_histogram(const PixelGrid& grid) {
  return ChannelDistribution::from_counts(count_channels(grid));
}

enum class PoolMode {
  PixelWeighted,  // pool counts over all pixels, then normalize once
  ImageAveraged,  // mean of per-image distributions
};

inline ChannelDistribution pool_counts(std::span<const ChannelCounts> per_image,
                                       PoolMode mode = PoolMode::PixelWeighted) {
  require(!per_image.empty(), ErrorKind::EmptyPool, "cannot pool an empty set of images");
  if (mode == PoolMode::PixelWeighted) {
    ChannelCounts total;
    for (const auto& c : per_image) total += c;
    return ChannelDistribution::from_counts(total);
  }
  std::vector<CompensatedSum> acc(kChannelOutcomes);
  for (const auto& c : per_image) {
    const auto d = ChannelDistribution::from_counts(c);
    for (std::size_t i = 0; i < kChannelOutcomes; ++i) acc[i].add(d[i]);
  }
  std::vector<double> probs(kChannelOutcomes);
  const double n = static_cast<double>(per_image.size());
  for (std::size_t i = 0; i < kChannelOutcomes; ++i) probs[i] = acc[i].value() / n;
  return ChannelDistribution::from_probs(std::move(probs));
}

inline ChannelDistribution pool_histogram(std::span<const PixelGrid> grids,
                                          PoolMode mode = PoolMode::PixelWeighted) {
  require(!grids.empty(), ErrorKind::EmptyPool, "cannot pool an empty set of images");
  std::vector<ChannelCounts> counts;
  counts.reserve(grids.size());
  for (const auto& g : grids) counts.push_back(count_channels(g));
  return pool_counts(counts, mode);
}

inline nlohmann::json to_json(const ChannelDistribution& d) {
  return {{"bins_per_channel", kBinsPerChannel},
          {"probs", std::vector<double>(d.probs().begin(), d.probs().end())}};
}

// ---------------------------------------------------------------------------
// Feature histograms

struct BinRange {
  double lo = 0.0;
  double hi = 1.0;
  friend bool operator==(const BinRange&, const BinRange&) = default;
};

struct GlobalMinMax {};
struct FixedRange {
  BinRange range;
};
struct PerDimensionRange {
  std::vector<BinRange> ranges;
};

using RangePolicy = std::variant<GlobalMinMax, FixedRange, PerDimensionRange>;

/// d blocks of b bins; every block carries mass 1/d.
struct FeatureDistribution {
  std::vector<double> probs;
  std::size_t dims = 0;
  std::size_t bins = 0;
  std::vector<BinRange> ranges;
  /// Dimensions with zero spread, collapsed to a delta in bin 0.
  std::vector<std::size_t> degenerate_dims;
};

/// Per-dimension minimum and maximum over a set of vectors.
inline std::vector<BinRange> min_max_ranges(const std::vector<std::vector<double>>& features) {
  require(!features.empty(), ErrorKind::EmptyPool, "no feature vectors");
  const std::size_t d = features.front().size();
  std::vector<BinRange> ranges(d, {std::numeric_limits<double>::infinity(),
                                   -std::numeric_limits<double>::infinity()});
  for (const auto& v : features) {
    require(v.size() == d, ErrorKind::DimensionMismatch, "feature vectors differ in dimension");
    for (std::size_t k = 0; k < d; ++k) {
      ranges[k].lo = std::min(ranges[k].lo, v[k]);
      ranges[k].hi = std::max(ranges[k].hi, v[k]);
    }
  }
  return ranges;
}

/// Uniform bin index over [lo, hi]; hi lands in the last bin and values
/// outside the range clamp to the edge bins.
inline std::size_t bin_index(double value, BinRange range, std::size_t bins) {
  if (!(range.hi > range.lo)) return 0;
  const double t = (value - range.lo) / (range.hi - range.lo) * static_cast<double>(bins);
  if (!(t > 0.0)) return 0;
  const auto idx = static_cast<std::size_t>(std::floor(t));
  return std::min(idx, bins - 1);
}

inline FeatureDistribution feature_histogram(const std::vector<std::vector<double>>& features,
                                             std::size_t bins,
                                             const RangePolicy& policy = GlobalMinMax{}) {
  require(!features.empty(), ErrorKind::EmptyPool, "feature histogram needs at least one vector");
  require(bins >= 2, ErrorKind::PreconditionFailed, "feature histogram needs >= 2 bins");
  const std::size_t d = features.front().size();
  require(d >= 1, ErrorKind::DimensionMismatch, "feature vectors must have dimension >= 1");
  for (const auto& v : features) {
    require(v.size() == d, ErrorKind::DimensionMismatch, "feature vectors differ in dimension");
    for (double x : v) require(std::isfinite(x), ErrorKind::PreconditionFailed, "non-finite feature value");
  }

  FeatureDistribution out;
  out.dims = d;
  out.bins = bins;
  if (std::holds_alternative<GlobalMinMax>(policy)) {
    out.ranges = min_max_ranges(features);
  } else if (const auto* fixed = std::get_if<FixedRange>(&policy)) {
    require(fixed->range.hi > fixed->range.lo, ErrorKind::PreconditionFailed,
            "fixed range needs hi > lo");
    out.ranges.assign(d, fixed->range);
  } else {
    const auto& per = std::get<PerDimensionRange>(policy).ranges;
    require(per.size() == d, ErrorKind::DimensionMismatch, "range count differs from dimension");
    out.ranges = per;
  }
  for (std::size_t k = 0; k < d; ++k) {
    if (!(out.ranges[k].hi > out.ranges[k].lo)) out.degenerate_dims.push_back(k);
  }

  std::vector<std::uint64_t> counts(d * bins, 0);
  for (const auto& v : features) {
    for (std::size_t k = 0; k < d; ++k) ++counts[k * bins + bin_index(v[k], out.ranges[k], bins)];
  }
  const double denom = static_cast<double>(d) * static_cast<double>(features.size());
  out.probs.resize(d * bins);
  for (std::size_t i = 0; i < counts.size(); ++i) out.probs[i] = static_cast<double>(counts[i]) / denom;
  return out;
}

inline nlohmann::json to_json(const FeatureDistribution& d) {
  nlohmann::json ranges = nlohmann::json::array();
  for (const auto& r : d.ranges) ranges.push_back({r.lo, r.hi});
  return {{"dims", d.dims}, {"bins", d.bins}, {"ranges", ranges}, {"probs", d.probs}};
}

}  // namespace domainshift
