#pragma once

// Small dense networks with a flat parameter buffer and hand-written
// backpropagation. Featurizers apply ReLU after every hidden layer and leave
// the output layer linear; heads are a single linear layer.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "domainshift/canonical_json.hpp"
#include "domainshift/error.hpp"
#include "domainshift/rng.hpp"

namespace domainshift {

using Vector = Eigen::VectorXd;
using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct LayerShape {
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t weight_offset = 0;  // out x in, row-major
  std::size_t bias_offset = 0;
};

/// Activations recorded by a forward pass, consumed by backward().
struct ForwardCache {
  std::vector<Vector> inputs;       // input to each layer
  std::vector<Vector> preactivations;
};

class DenseStack {
 public:
  DenseStack() = default;

  /// dims = (in, h1, ..., out). A single entry (d) means one linear d -> d map.
  explicit DenseStack(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
    require(!dims_.empty(), ErrorKind::PreconditionFailed, "network needs at least one layer size");
    for (auto d : dims_) require(d > 0, ErrorKind::PreconditionFailed, "layer sizes must be positive");
    std::vector<std::size_t> sizes = dims_;
    if (sizes.size() == 1) sizes.push_back(sizes.front());
    std::size_t offset = 0;
    for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
      LayerShape s{sizes[i], sizes[i + 1], offset, offset + sizes[i] * sizes[i + 1]};
      offset = s.bias_offset + s.out;
      shapes_.push_back(s);
    }
    params_.assign(offset, 0.0);
  }

  const std::vector<std::size_t>& dims() const { return dims_; }
  const std::vector<LayerShape>& shapes() const { return shapes_; }
  std::size_t layer_count() const { return shapes_.size(); }
  std::size_t in_dim() const { return shapes_.front().in; }
  std::size_t out_dim() const { return shapes_.back().out; }
  std::size_t parameter_count() const { return params_.size(); }

  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }

  Eigen::Map<RowMajorMatrix> weight(std::size_t layer) {
    const auto& s = shapes_.at(layer);
    return {params_.data() + s.weight_offset, static_cast<Eigen::Index>(s.out),
            static_cast<Eigen::Index>(s.in)};
  }
  Eigen::Map<const RowMajorMatrix> weight(std::size_t layer) const {
    const auto& s = shapes_.at(layer);
    return {params_.data() + s.weight_offset, static_cast<Eigen::Index>(s.out),
            static_cast<Eigen::Index>(s.in)};
  }
  Eigen::Map<Vector> bias(std::size_t layer) {
    const auto& s = shapes_.at(layer);
    return {params_.data() + s.bias_offset, static_cast<Eigen::Index>(s.out)};
  }
  Eigen::Map<const Vector> bias(std::size_t layer) const {
    const auto& s = shapes_.at(layer);
    return {params_.data() + s.bias_offset, static_cast<Eigen::Index>(s.out)};
  }

  Vector forward(const Vector& x, ForwardCache* cache = nullptr) const {
    require(static_cast<std::size_t>(x.size()) == in_dim(), ErrorKind::DimensionMismatch,
            "input has dimension " + std::to_string(x.size()) + ", network expects " +
                std::to_string(in_dim()));
    if (cache) {
      cache->inputs.clear();
      cache->preactivations.clear();
    }
    Vector a = x;
    for (std::size_t i = 0; i < shapes_.size(); ++i) {
      Vector z = weight(i) * a + bias(i);
      if (cache) {
        cache->inputs.push_back(a);
        cache->preactivations.push_back(z);
      }
      if (i + 1 < shapes_.size()) {
        a = z.cwiseMax(0.0);
      } else {
        a = std::move(z);
      }
    }
    return a;
  }

  /// Accumulates dL/dparams into `grad` (same layout as params()) and returns dL/dx.
  Vector backward(const ForwardCache& cache, const Vector& d_out, std::span<double> grad) const {
    require(grad.size() == params_.size(), ErrorKind::ShapeMismatch, "gradient buffer size mismatch");
    require(cache.inputs.size() == shapes_.size(), ErrorKind::PreconditionFailed,
            "backward needs the cache of a forward pass through this network");
    Vector delta = d_out;
    for (std::size_t i = shapes_.size(); i-- > 0;) {
      if (i + 1 < shapes_.size()) {
        delta = delta.cwiseProduct((cache.preactivations[i].array() > 0.0).cast<double>().matrix());
      }
      const auto& s = shapes_[i];
      Eigen::Map<RowMajorMatrix> gw(grad.data() + s.weight_offset, static_cast<Eigen::Index>(s.out),
                                    static_cast<Eigen::Index>(s.in));
      Eigen::Map<Vector> gb(grad.data() + s.bias_offset, static_cast<Eigen::Index>(s.out));
      gw.noalias() += delta * cache.inputs[i].transpose();
      gb += delta;
      delta = weight(i).transpose() * delta;
    }
    return delta;
  }

  bool all_finite() const {
    for (double p : params_)
      if (!std::isfinite(p)) return false;
    return true;
  }

  friend bool operator==(const DenseStack& a, const DenseStack& b) {
    return a.dims_ == b.dims_ && a.params_ == b.params_;
  }

 private:
  std::vector<std::size_t> dims_;
  std::vector<LayerShape> shapes_;
  std::vector<double> params_;
};

/// Feature extractor: ReLU hidden layers, linear output.
class ToyFeaturizer : public DenseStack {
 public:
  ToyFeaturizer() = default;
  explicit ToyFeaturizer(std::vector<std::size_t> dims) : DenseStack(std::move(dims)) {}
  std::size_t feat_dim() const { return out_dim(); }
};

/// Linear classifier feat_dim -> n_classes.
class LinearHead : public DenseStack {
 public:
  LinearHead() = default;
  LinearHead(std::size_t feat_dim, std::size_t n_classes) : DenseStack({feat_dim, n_classes}) {
    require(n_classes >= 2, ErrorKind::PreconditionFailed, "a classifier needs >= 2 classes");
  }
  std::size_t n_classes() const { return out_dim(); }
};

/// Zero-mean Gaussian weights with variance 2 / fan_in, zero biases.
/// `stream` separates networks initialized from the same seed.
inline void kaiming_init(DenseStack& net, std::uint64_t seed, std::string_view stream = "featurizer") {
  CounterRng rng(derive_key(seed, hash_name("kaiming"), hash_name(stream)));
  for (std::size_t i = 0; i < net.layer_count(); ++i) {
    auto w = net.weight(i);
    const double scale = std::sqrt(2.0 / static_cast<double>(net.shapes()[i].in));
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = scale * rng.normal();
    net.bias(i).setZero();
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: {"dims": [...], "layers": [{"w": [[...]], "b": [...]}], "head": {"w", "b"}}

inline nlohmann::json layer_to_json(const DenseStack& net, std::size_t i) {
  const auto w = net.weight(i);
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(w.cols()));
    for (Eigen::Index c = 0; c < w.cols(); ++c) row[static_cast<std::size_t>(c)] = w(r, c);
    rows.push_back(row);
  }
  const auto b = net.bias(i);
  return {{"w", rows}, {"b", std::vector<double>(b.data(), b.data() + b.size())}};
}

inline void layer_from_json(DenseStack& net, std::size_t i, const nlohmann::json& j,
                            const std::string& where) {
  const auto& s = net.shapes()[i];
  auto fail = [&] {
    throw Error(ErrorKind::ShapeMismatch,
                "expected " + std::to_string(s.out) + "x" + std::to_string(s.in) + " layer", where);
  };
  if (!j.is_object() || !j.contains("w") || !j.contains("b")) fail();
  const auto& w = j.at("w");
  const auto& b = j.at("b");
  if (!w.is_array() || w.size() != s.out || !b.is_array() || b.size() != s.out) fail();
  auto weight = net.weight(i);
  auto bias = net.bias(i);
  for (std::size_t r = 0; r < s.out; ++r) {
    if (!w[r].is_array() || w[r].size() != s.in) fail();
    for (std::size_t c = 0; c < s.in; ++c) {
      require(w[r][c].is_number(), ErrorKind::ParseError, "weight must be a number", where);
      weight(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = w[r][c].get<double>();
    }
    require(b[r].is_number(), ErrorKind::ParseError, "bias must be a number", where);
    bias(static_cast<Eigen::Index>(r)) = b[r].get<double>();
  }
}

struct Checkpoint {
  ToyFeaturizer featurizer;
  std::optional<LinearHead> head;
};

inline nlohmann::json to_json(const Checkpoint& ckpt) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t i = 0; i < ckpt.featurizer.layer_count(); ++i) {
    layers.push_back(layer_to_json(ckpt.featurizer, i));
  }
  nlohmann::json j = {{"dims", ckpt.featurizer.dims()}, {"layers", layers}};
  if (ckpt.head) j["head"] = layer_to_json(*ckpt.head, 0);
  return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  require(j.is_object() && j.contains("dims") && j.at("dims").is_array() && j.contains("layers") &&
              j.at("layers").is_array(),
          ErrorKind::ParseError, "checkpoint needs 'dims' and 'layers' arrays");
  std::vector<std::size_t> dims;
  for (const auto& d : j.at("dims")) {
    require(d.is_number_unsigned(), ErrorKind::ParseError, "dims must be positive integers", "dims");
    dims.push_back(d.get<std::size_t>());
  }
  Checkpoint ckpt{ToyFeaturizer(dims), std::nullopt};
  const auto& layers = j.at("layers");
  require(layers.size() == ckpt.featurizer.layer_count(), ErrorKind::ShapeMismatch,
          "layer count does not match dims", "layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layer_from_json(ckpt.featurizer, i, layers[i], "layers[" + std::to_string(i) + "]");
  }
  if (j.contains("head")) {
    const auto& h = j.at("head");
    require(h.is_object() && h.contains("b") && h.at("b").is_array(), ErrorKind::ParseError,
            "head needs 'w' and 'b'", "head");
    LinearHead head(ckpt.featurizer.feat_dim(), h.at("b").size());
    layer_from_json(head, 0, h, "head");
    ckpt.head = std::move(head);
  }
  require(ckpt.featurizer.all_finite() && (!ckpt.head || ckpt.head->all_finite()),
          ErrorKind::ParseError, "checkpoint contains non-finite parameters");
  return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_canonical(path.string(), to_json(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::ParseError, "cannot open checkpoint", path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ParseError, e.what(), path.string());
  }
  return checkpoint_from_json(j);
}

struct KaimingInit {};
struct FromWeights {
  std::filesystem::path path;
};
using InitMode = std::variant<KaimingInit, FromWeights>;

/// Build a featurizer with the given layer sizes, either freshly Kaiming-drawn
/// or loaded from a checkpoint whose dims must match.
inline ToyFeaturizer init_featurizer(const std::vector<std::size_t>& dims, const InitMode& mode,
                                     std::uint64_t seed) {
  if (const auto* from = std::get_if<FromWeights>(&mode)) {
    auto ckpt = load_checkpoint(from->path);
    require(ckpt.featurizer.dims() == dims, ErrorKind::ShapeMismatch,
            "checkpoint dims differ from requested dims", from->path.string());
    return std::move(ckpt.featurizer);
  }
  ToyFeaturizer f(dims);
  kaiming_init(f, seed);
  return f;
}

}  // namespace domainshift
