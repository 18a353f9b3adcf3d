#pragma once

// Central finite-difference verification of analytic gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "domainshift/error.hpp"
#include "domainshift/rng.hpp"

namespace domainshift {

/// A named contiguous slice of the parameter vector.
struct ParamBlock {
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Coordinates sampled per block; 0 checks every coordinate.
  std::size_t max_coords_per_block = 0;
  /// Denominator floor so that near-zero gradients are judged absolutely.
  double abs_floor = 1e-6;
  std::uint64_t seed = 0;
};

struct BlockCheck {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<BlockCheck> blocks;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return max_rel_error < tolerance; }
};

inline double relative_error(double analytic, double numeric, double abs_floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), abs_floor});
  return std::abs(analytic - numeric) / scale;
}

/// Compare `analytic` against (L(theta + h e_i) - L(theta - h e_i)) / 2h.
/// `params` is perturbed in place and restored before returning.
inline GradCheckReport finite_diff_check(const std::function<double(std::span<const double>)>& loss,
                                         std::span<double> params, std::span<const double> analytic,
                                         std::vector<ParamBlock> blocks,
                                         const GradCheckOptions& options = {}) {
  require(options.step > 0.0 && std::isfinite(options.step), ErrorKind::PreconditionFailed,
          "finite-difference step must be > 0");
  require(analytic.size() == params.size(), ErrorKind::ShapeMismatch,
          "analytic gradient size differs from parameter count");
  if (blocks.empty()) blocks.push_back({"all", 0, params.size()});

  GradCheckReport report;
  report.tolerance = options.tolerance;
  CounterRng rng(derive_key(options.seed, hash_name("gradcheck")));
  for (const auto& block : blocks) {
    require(block.offset + block.size <= params.size(), ErrorKind::ShapeMismatch,
            "parameter block out of range", block.name);
    std::vector<std::size_t> coords(block.size);
    std::iota(coords.begin(), coords.end(), block.offset);
    if (options.max_coords_per_block > 0 && coords.size() > options.max_coords_per_block) {
      shuffle(std::span<std::size_t>(coords), rng);
      coords.resize(options.max_coords_per_block);
      std::sort(coords.begin(), coords.end());
    }
    BlockCheck result{block.name, coords.size(), 0.0, block.offset, 0.0, 0.0};
    for (std::size_t i : coords) {
      const double saved = params[i];
      params[i] = saved + options.step;
      const double up = loss(params);
      params[i] = saved - options.step;
      const double down = loss(params);
      params[i] = saved;
      require(std::isfinite(up) && std::isfinite(down), ErrorKind::NonFiniteLoss,
              "loss is not finite near coordinate " + std::to_string(i), block.name);
      const double numeric = (up - down) / (2.0 * options.step);
      const double err = relative_error(analytic[i], numeric, options.abs_floor);
      if (err >= result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_index = i;
        result.analytic = analytic[i];
        result.numeric = numeric;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, result.max_rel_error);
    report.blocks.push_back(std::move(result));
  }
  return report;
}

inline nlohmann::json to_json(const GradCheckReport& report) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : report.blocks) {
    blocks.push_back({{"name", b.name},
                      {"checked", b.checked},
                      {"max_rel_error", b.max_rel_error},
                      {"worst_index", b.worst_index},
                      {"analytic", b.analytic},
                      {"numeric", b.numeric}});
  }
  return {{"blocks", blocks},
          {"max_rel_error", report.max_rel_error},
          {"tolerance", report.tolerance},
          {"passed", report.passed()}};
}

}  // namespace domainshift
