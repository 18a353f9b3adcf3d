#pragma once

// Helpers shared by the test binaries: scratch directories and random
// generators for hand-rolled property tests.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "domainshift/image.hpp"
#include "domainshift/rng.hpp"

namespace testsupport {

namespace fs = std::filesystem;

/// A fresh directory under the system temp dir, removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    const auto stamp = domainshift::derive_key(
        static_cast<std::uint64_t>(reinterpret_cast<std::uintptr_t>(this)), ++counter,
        domainshift::hash_name(tag));
    path_ = fs::temp_directory_path() / ("ds-" + tag + "-" + std::to_string(stamp));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  fs::path path_;
};

/// Random probability vector; roughly a third of the draws get zeroed
/// components so that sparse supports are exercised.
inline std::vector<double> random_distribution(domainshift::CounterRng& rng, std::size_t n) {
  std::vector<double> p(n);
  const bool sparse = rng.below(3) == 0;
  double total = 0.0;
  for (auto& x : p) {
    x = (sparse && rng.below(2) == 0) ? 0.0 : -std::log(1.0 - rng.uniform());
    total += x;
  }
  if (total == 0.0) {
    p[rng.below(n)] = 1.0;
    return p;
  }
  for (auto& x : p) x /= total;
  return p;
}

inline domainshift::PixelGrid random_grid(domainshift::CounterRng& rng, std::size_t w, std::size_t h) {
  domainshift::PixelGrid g(w, h);
  for (std::size_t i = 0; i < g.pixel_count(); ++i) {
    g.set(i, {static_cast<std::uint8_t>(rng.below(256)), static_cast<std::uint8_t>(rng.below(256)),
              static_cast<std::uint8_t>(rng.below(256))});
  }
  return g;
}

/// Writes `grid` as PNG at root/rel, creating parent directories.
inline void write_png(const fs::path& root, const std::string& rel, const domainshift::PixelGrid& grid) {
  const auto path = root / rel;
  fs::create_directories(path.parent_path());
  domainshift::write_bytes(path, domainshift::encode_png(grid));
}

}  // namespace testsupport
