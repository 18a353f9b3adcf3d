#pragma once

// Seeded synthetic data: solid-color and noise images for corpus tests, and a
// color-shifted two-class blob task for the trainer.
//
// Blob task inputs are x = (u, v, r, g, b): (u, v) carries the class (two
// Gaussian blobs), (r, g, b) is a per-domain tint plus noise that is
// independent of the label.

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "domainshift/error.hpp"
#include "domainshift/image.hpp"
#include "domainshift/rng.hpp"
#include "domainshift/trainer.hpp"

namespace domainshift::synthetic {

inline PixelGrid solid(std::size_t w, std::size_t h, Rgb color) { return PixelGrid(w, h, color); }

inline PixelGrid noise(std::size_t w, std::size_t h, std::uint64_t key) {
  CounterRng rng(key);
  PixelGrid g(w, h);
  for (std::size_t i = 0; i < g.pixel_count(); ++i) {
    g.set(i, Rgb{static_cast<std::uint8_t>(rng.below(256)), static_cast<std::uint8_t>(rng.below(256)),
                 static_cast<std::uint8_t>(rng.below(256))});
  }
  return g;
}

/// Image whose pixels scatter around `base` by up to +-spread per channel.
inline PixelGrid tinted(std::size_t w, std::size_t h, Rgb base, int spread, std::uint64_t key) {
  CounterRng rng(key);
  PixelGrid g(w, h);
  auto jitter = [&](std::uint8_t c) {
    const int v = static_cast<int>(c) + static_cast<int>(rng.below(2 * spread + 1)) - spread;
    return static_cast<std::uint8_t>(std::clamp(v, 0, 255));
  };
  for (std::size_t i = 0; i < g.pixel_count(); ++i) g.set(i, Rgb{jitter(base.r), jitter(base.g), jitter(base.b)});
  return g;
}

/// Two linearly separable Gaussian blobs in 2-D, centred at -+(2, 2).
inline LabeledSet blobs(std::size_t per_class, double stddev, std::uint64_t seed) {
  CounterRng rng(derive_key(seed, hash_name("blobs")));
  LabeledSet out;
  for (std::size_t i = 0; i < per_class; ++i) {
    for (std::size_t label = 0; label < 2; ++label) {
      const double c = label == 0 ? -2.0 : 2.0;
      Vector x(2);
      x << c + stddev * rng.normal(), c + stddev * rng.normal();
      out.push_back({std::move(x), label});
    }
  }
  return out;
}

struct TintedDomain {
  std::string name;
  std::array<double, 3> tint{};
  double tint_noise = 0.1;
};

/// Blob samples for one tinted domain. With 2 classes the blobs sit at
/// -+(1, 1); with 4 classes at the four (+-1, +-1) corners.
inline DomainSamples tinted_blobs(const TintedDomain& domain, std::size_t n_classes, std::size_t per_class,
                                  double blob_stddev, std::uint64_t seed) {
  require(n_classes == 2 || n_classes == 4, ErrorKind::PreconditionFailed,
          "tinted blobs support 2 or 4 classes");
  CounterRng rng(derive_key(seed, hash_name("tinted-blobs"), hash_name(domain.name)));
  DomainSamples out{domain.name, {}};
  for (std::size_t i = 0; i < per_class; ++i) {
    for (std::size_t label = 0; label < n_classes; ++label) {
      const double cu = n_classes == 2 ? (label == 0 ? -1.0 : 1.0) : (label & 1 ? 1.0 : -1.0);
      const double cv = n_classes == 2 ? cu : (label & 2 ? 1.0 : -1.0);
      Vector x(5);
      x(0) = cu + blob_stddev * rng.normal();
      x(1) = cv + blob_stddev * rng.normal();
      for (int k = 0; k < 3; ++k) x(2 + k) = domain.tint[static_cast<std::size_t>(k)] + domain.tint_noise * rng.normal();
      out.samples.push_back({std::move(x), label});
    }
  }
  return out;
}

struct ShiftTask {
  /// Precursor data: 4 classes, many tints, strong within-domain tint noise.
  std::vector<DomainSamples> precursor;
  std::size_t precursor_classes = 4;
  /// DG data: 2 classes; training domains followed by the held-out domain (last).
  std::vector<DomainSamples> dg;
  std::size_t dg_classes = 2;
};

/// Three-domain color-shifted task plus precursor domains.
inline ShiftTask color_shift_task(std::uint64_t seed, std::size_t per_class = 64, double dg_tint_noise = 0.7) {
  ShiftTask task;
  const std::vector<TintedDomain> precursor_domains = {
      {"pre-warm", {1.5, 0.0, -1.5}, 1.5},
      {"pre-cool", {-1.5, 0.0, 1.5}, 1.5},
      {"pre-green", {0.0, 1.5, 0.0}, 1.5},
      {"pre-dark", {-1.0, -1.0, -1.0}, 1.5},
  };
  for (const auto& d : precursor_domains) {
    task.precursor.push_back(tinted_blobs(d, task.precursor_classes, per_class, 0.4, seed));
  }
  const std::vector<TintedDomain> dg_domains = {
      {"red", {2.0, 0.0, 0.0}, dg_tint_noise},
      {"green", {0.0, 2.0, 0.0}, dg_tint_noise},
      {"blue", {0.0, 0.0, 2.0}, dg_tint_noise},
  };
  for (const auto& d : dg_domains) task.dg.push_back(tinted_blobs(d, task.dg_classes, per_class, 0.5, seed));
  return task;
}

}  // namespace domainshift::synthetic
