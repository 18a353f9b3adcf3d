#pragma once

// The `domainshift` command line. run_command() does all the work so it can be
// driven in-process; tools/domainshift.cpp only forwards argv.
//
// Every run resolves its flags into a JSON config (defaults filled in, paths
// made absolute) that is echoed in the report. `--config report.json` replays
// a prior run from that echo; explicitly passed flags override echoed values.

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "domainshift/canonical_json.hpp"
#include "domainshift/corpus.hpp"
#include "domainshift/dataset.hpp"
#include "domainshift/error.hpp"
#include "domainshift/gradcheck.hpp"
#include "domainshift/image.hpp"
#include "domainshift/losses.hpp"
#include "domainshift/nn.hpp"
#include "domainshift/shift_metrics.hpp"
#include "domainshift/synthetic.hpp"
#include "domainshift/trainer.hpp"

namespace domainshift::cli {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr const char* kSeedEnv = "DOMAINSHIFT_SEED";

using nlohmann::json;

// ---------------------------------------------------------------------------
// CSV

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

inline std::string csv_number(double v) {
  std::string out;
  detail::append_double(out, v);
  return out;
}

class CsvWriter {
 public:
  explicit CsvWriter(const std::vector<std::string>& header) { row(header); }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) text_ += ',';
      text_ += csv_field(cells[i]);
    }
    text_ += '\n';
  }
  const std::string& text() const { return text_; }

 private:
  std::string text_;
};

/// Matrix as CSV: header "domain,<names>", then one row per domain.
inline std::string matrix_csv(const IddMatrix& m) {
  std::vector<std::string> header{"domain"};
  header.insert(header.end(), m.domain_names.begin(), m.domain_names.end());
  CsvWriter csv(header);
  for (std::size_t i = 0; i < m.values.size(); ++i) {
    std::vector<std::string> row{m.domain_names[i]};
    for (double v : m.values[i]) row.push_back(csv_number(v));
    csv.row(row);
  }
  return csv.text();
}

inline json history_json(const std::vector<LossBreakdown>& history) {
  json arr = json::array();
  for (std::size_t i = 0; i < history.size(); ++i) {
    const auto& h = history[i];
    arr.push_back({{"step", i}, {"l_s", h.l_s}, {"l_erm", h.l_erm}, {"l_js", h.l_js}, {"l_kl", h.l_kl},
                   {"total", h.total}});
  }
  return arr;
}

inline std::string history_csv(const std::vector<LossBreakdown>& history) {
  CsvWriter csv({"step", "l_s", "l_erm", "l_js", "l_kl", "total"});
  for (std::size_t i = 0; i < history.size(); ++i) {
    const auto& h = history[i];
    csv.row({std::to_string(i), csv_number(h.l_s), csv_number(h.l_erm), csv_number(h.l_js),
             csv_number(h.l_kl), csv_number(h.total)});
  }
  return csv.text();
}

// ---------------------------------------------------------------------------
// Option tables

enum class OptKind { Uint, OptionalUint, Double, String, Path, OptionalPath, UintList, Choice };

struct OptSpec {
  std::string name;
  OptKind kind;
  json fallback;  // default; null for "unset"
  std::string help;
  std::vector<std::string> choices = {};
  bool required = false;
};

struct CommandOutput {
  json results;
  std::string csv;
  std::vector<Warning> warnings;
  /// Non-zero when the command ran but its verdict is negative (grad-check).
  int exit_code = 0;
};

struct Command {
  std::string name;
  std::string help;
  std::vector<OptSpec> options;
  std::function<CommandOutput(const json& config)> run;
};

/// Typed storage for one parsed subcommand.
struct ParsedValues {
  std::map<std::string, std::uint64_t> uints;
  std::map<std::string, double> doubles;
  std::map<std::string, std::string> strings;
  std::map<std::string, std::vector<std::size_t>> lists;
  std::map<std::string, CLI::Option*> handles;
};

inline std::string absolute_path(const std::string& p) {
  if (p.empty()) return p;
  return std::filesystem::absolute(p).lexically_normal().string();
}

inline std::uint64_t parse_seed_text(const std::string& text, const std::string& where) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(text, &used, 10);
  } catch (const std::exception&) {
    used = 0;
  }
  require(used == text.size() && !text.empty() && text.front() != '-', ErrorKind::UsageError,
          "seed must be an unsigned 64-bit integer", where);
  return static_cast<std::uint64_t>(v);
}

inline json parsed_value(const OptSpec& spec, const ParsedValues& v) {
  switch (spec.kind) {
    case OptKind::Uint:
    case OptKind::OptionalUint:
      return v.uints.at(spec.name);
    case OptKind::Double:
      return v.doubles.at(spec.name);
    case OptKind::String:
    case OptKind::Choice:
      return v.strings.at(spec.name);
    case OptKind::Path:
    case OptKind::OptionalPath:
      return absolute_path(v.strings.at(spec.name));
    case OptKind::UintList:
      return v.lists.at(spec.name);
  }
  return nullptr;
}

/// Check a config value against its option entry; returns the normalized value.
inline json check_config_value(const OptSpec& spec, const json& value) {
  const std::string where = "config." + spec.name;
  if (value.is_null()) {
    const bool nullable = spec.kind == OptKind::OptionalUint || spec.kind == OptKind::OptionalPath;
    require(nullable && !spec.required, ErrorKind::UsageError, "missing required value", where);
    return value;
  }
  switch (spec.kind) {
    case OptKind::Uint:
    case OptKind::OptionalUint:
      require(value.is_number_unsigned() || (value.is_number_integer() && value.get<std::int64_t>() >= 0),
              ErrorKind::UsageError, "expected an unsigned integer", where);
      return value.get<std::uint64_t>();
    case OptKind::Double:
      require(value.is_number(), ErrorKind::UsageError, "expected a number", where);
      return value.get<double>();
    case OptKind::String:
    case OptKind::Path:
    case OptKind::OptionalPath:
      require(value.is_string(), ErrorKind::UsageError, "expected a string", where);
      break;
    case OptKind::Choice: {
      require(value.is_string(), ErrorKind::UsageError, "expected a string", where);
      bool ok = false;
      for (const auto& c : spec.choices) ok = ok || c == value.get<std::string>();
      require(ok, ErrorKind::UsageError, "unsupported value '" + value.get<std::string>() + "'", where);
      break;
    }
    case OptKind::UintList:
    {
      require(value.is_array(), ErrorKind::UsageError, "expected a list", where);
      json list = json::array();
      for (const auto& e : value) {
        require(e.is_number_integer() && (e.is_number_unsigned() || e.get<std::int64_t>() >= 0),
                ErrorKind::UsageError, "expected unsigned integers", where);
        list.push_back(e.get<std::uint64_t>());
      }
      return list;
    }
  }
  return value;
}

// ---------------------------------------------------------------------------
// Shared helpers for command bodies

inline std::uint64_t cfg_u(const json& c, const char* k) { return c.at(k).get<std::uint64_t>(); }
inline double cfg_d(const json& c, const char* k) { return c.at(k).get<double>(); }
inline std::string cfg_s(const json& c, const char* k) { return c.at(k).is_null() ? "" : c.at(k).get<std::string>(); }
inline std::optional<std::size_t> cfg_opt_u(const json& c, const char* k) {
  if (c.at(k).is_null()) return std::nullopt;
  return c.at(k).get<std::size_t>();
}
inline std::vector<std::size_t> cfg_list(const json& c, const char* k) {
  return c.at(k).get<std::vector<std::size_t>>();
}

inline PoolMode pool_mode(const std::string& s) {
  return s == "image" ? PoolMode::ImageAveraged : PoolMode::PixelWeighted;
}

/// Accepts a bare manifest or a `scan` report that embeds one.
inline CorpusManifest load_manifest_or_report(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::ParseError, "cannot open manifest", path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::ParseError, e.what(), path);
  }
  const auto base = std::filesystem::absolute(path).parent_path();
  if (j.is_object() && j.contains("command") && j.contains("results") && j.at("results").contains("manifest"))
    return manifest_from_json(j.at("results").at("manifest"), base);
  return manifest_from_json(j, base);
}

inline std::vector<DomainSpec> resolved_domains(const CorpusManifest& m) {
  std::vector<DomainSpec> out;
  for (const auto& d : m.domains) out.push_back(resolve_paths(d, m.root));
  return out;
}

inline void warm_all(FileCountSource& source, const std::vector<DomainSpec>& domains, unsigned threads) {
  std::vector<std::string> paths;
  for (const auto& d : domains) {
    auto p = d.all_paths();
    paths.insert(paths.end(), p.begin(), p.end());
  }
  source.warm(paths, threads);
}

inline std::vector<FeatureDomain> feature_domains(const VectorDataset& data) {
  std::vector<FeatureDomain> out;
  for (const auto& d : data.domains) {
    FeatureDomain f{d.name, {}};
    for (const auto& s : d.samples) f.inputs.push_back(s.x);
    out.push_back(std::move(f));
  }
  return out;
}

inline std::size_t domain_index(const IddMatrix& m, const std::string& name) {
  for (std::size_t i = 0; i < m.domain_names.size(); ++i)
    if (m.domain_names[i] == name) return i;
  throw Error(ErrorKind::UsageError, "unknown domain '" + name + "'", name);
}

inline InitMode init_mode(const std::string& s) {
  if (s == "kaiming") return KaimingInit{};
  return FromWeights{s};
}

inline std::string init_text(const std::string& s) { return s == "kaiming" ? s : absolute_path(s); }

inline TrainConfig train_config(const json& c) {
  TrainConfig t;
  t.seed = cfg_u(c, "seed");
  t.steps = cfg_u(c, "steps");
  t.lr = cfg_d(c, "lr");
  t.batch_size = cfg_u(c, "batch-size");
  t.init = init_mode(cfg_s(c, "init"));
  if (c.contains("lambda")) t.lambda = cfg_d(c, "lambda");
  if (c.contains("lambda-kl")) t.lambda_kl = cfg_d(c, "lambda-kl");
  if (c.contains("temperature")) t.temperature = cfg_d(c, "temperature");
  if (c.contains("normalization") && cfg_s(c, "normalization") == "anchored")
    t.normalization = FeatureNormalization::AnchoredSoftmax;
  return t;
}

/// Unsigned thread count used for decoding; not part of the echoed config
/// because it cannot change results.
inline unsigned& decode_threads() {
  static unsigned threads = std::max(1u, std::thread::hardware_concurrency());
  return threads;
}

// ---------------------------------------------------------------------------
// Commands

inline CommandOutput run_scan(const json& c) {
  auto scan = scan_tree(cfg_s(c, "root"));
  scan.manifest.seed = cfg_u(c, "seed");
  const auto manifest_out = cfg_s(c, "manifest-out");
  if (!manifest_out.empty()) save_manifest(scan.manifest, manifest_out);
  CommandOutput out;
  json warnings = json::array();
  for (const auto& w : scan.warnings) warnings.push_back(to_json(w));
  std::size_t samples = 0;
  for (const auto& d : scan.manifest.domains) samples += d.sample_count();
  out.results = {{"manifest", to_json(scan.manifest)},
                 {"domains", scan.manifest.domains.size()},
                 {"samples", samples},
                 {"warnings", warnings}};
  CsvWriter csv({"domain", "class", "path"});
  for (const auto& d : scan.manifest.domains)
    for (const auto& [cls, paths] : d.classes)
      for (const auto& p : paths) csv.row({d.name, cls, p});
  out.csv = csv.text();
  out.warnings = std::move(scan.warnings);
  return out;
}

inline CommandOutput run_icv(const json& c) {
  const auto manifest = load_manifest_or_report(cfg_s(c, "manifest"));
  const auto domains = resolved_domains(manifest);
  const std::string only = cfg_s(c, "domain");
  std::vector<DomainSpec> chosen;
  for (const auto& d : domains)
    if (only.empty() || d.name == only) chosen.push_back(d);
  require(!chosen.empty(), ErrorKind::UsageError, "manifest has no domain named '" + only + "'", only);

  IcvOptions opts;
  opts.trials = cfg_u(c, "trials");
  opts.seed = cfg_u(c, "seed");
  opts.sample_cap = cfg_opt_u(c, "sample-cap");
  opts.pool = pool_mode(cfg_s(c, "pool"));

  FileCountSource source;
  warm_all(source, chosen, decode_threads());
  CommandOutput out;
  json reports = json::array();
  CsvWriter csv({"domain", "class", "trial", "trial_key", "js"});
  for (const auto& d : chosen) {
    auto r = intra_class_variation(d, source, opts);
    for (std::size_t t = 0; t < r.trials; ++t)
      for (std::size_t i = 0; i < r.classes.size(); ++i)
        csv.row({r.domain, r.classes[i], std::to_string(t), std::to_string(r.trial_keys[t][i]),
                 csv_number(r.per_trial[t][i])});
    out.warnings.insert(out.warnings.end(), r.warnings.begin(), r.warnings.end());
    reports.push_back(to_json(r));
  }
  out.results = {{"reports", reports}};
  out.csv = csv.text();
  return out;
}

inline CommandOutput run_idd(const json& c) {
  const auto manifest = load_manifest_or_report(cfg_s(c, "manifest"));
  const auto domains = resolved_domains(manifest);
  std::optional<DomainSpec> reference;
  const std::string ref_path = cfg_s(c, "reference");
  if (!ref_path.empty()) {
    const auto ref_manifest = load_manifest_or_report(ref_path);
    const std::string want = cfg_s(c, "reference-domain");
    const DomainSpec* chosen = want.empty() ? &ref_manifest.domains.front() : ref_manifest.find_domain(want);
    require(chosen != nullptr, ErrorKind::UsageError, "reference has no domain named '" + want + "'", want);
    reference = resolve_paths(*chosen, ref_manifest.root);
    reference->name = "ref:" + reference->name;
  }
  IddOptions opts;
  opts.seed = cfg_u(c, "seed");
  opts.sample_cap = cfg_opt_u(c, "sample-cap");
  opts.pool = pool_mode(cfg_s(c, "pool"));

  FileCountSource source;
  auto all = domains;
  if (reference) all.push_back(*reference);
  warm_all(source, all, decode_threads());
  const auto m = idd_matrix(domains, reference ? &*reference : nullptr, source, opts);
  return {to_json(m), matrix_csv(m), {}, 0};
}

inline CommandOutput run_rep_idd(const json& c) {
  const auto ckpt = load_checkpoint(cfg_s(c, "checkpoint"));
  const auto data = load_vector_dataset(cfg_s(c, "data"));
  RepresentationIddOptions opts;
  opts.bins = cfg_u(c, "bins");
  opts.seed = cfg_u(c, "seed");
  const auto m = representation_idd(ckpt.featurizer, feature_domains(data), opts);
  json results = {{"matrix", to_json(m)}};
  const std::string held_out = cfg_s(c, "held-out");
  if (!held_out.empty()) {
    results["held_out"] = held_out;
    results["mean_idd_held_out"] = mean_idd_to(m, domain_index(m, held_out));
  }
  return {results, matrix_csv(m), {}, 0};
}

inline CommandOutput run_train_precursor(const json& c) {
  const auto data = load_vector_dataset(cfg_s(c, "data"));
  const auto config = train_config(c);
  const auto samples = pool_domains(data.domains);
  const auto result = train_precursor(samples, cfg_list(c, "dims"), data.n_classes, config);
  const auto ckpt_out = cfg_s(c, "checkpoint-out");
  if (!ckpt_out.empty()) save_checkpoint({result.model.featurizer, result.model.head}, ckpt_out);

  std::vector<LossBreakdown> history;
  for (double l : result.loss_curve) history.push_back(LossBreakdown::compose(l, 0.0, 0.0, 0.0, 0.0, 0.0));
  CommandOutput out;
  out.results = {{"history", history_json(history)},
                 {"initial_loss", result.loss_curve.front()},
                 {"final_loss", result.loss_curve.back()},
                 {"train_accuracy", accuracy(result.model, samples)},
                 {"checkpoint", ckpt_out.empty() ? json(nullptr) : json(ckpt_out)}};
  out.csv = history_csv(history);
  return out;
}

inline CommandOutput run_train_smos(const json& c) {
  const auto data = load_vector_dataset(cfg_s(c, "data"));
  const auto pre_ckpt = load_checkpoint(cfg_s(c, "precursor"));
  require(pre_ckpt.head.has_value(), ErrorKind::ParseError, "precursor checkpoint has no head",
          cfg_s(c, "precursor"));
  const Model precursor{pre_ckpt.featurizer, *pre_ckpt.head};
  std::optional<LabeledSet> precursor_data;
  if (const auto p = cfg_s(c, "precursor-data"); !p.empty())
    precursor_data = pool_domains(load_vector_dataset(p).domains);

  const std::string held_out = cfg_s(c, "held-out");
  std::vector<DomainSamples> train;
  const DomainSamples* test = nullptr;
  for (const auto& d : data.domains) {
    if (!held_out.empty() && d.name == held_out) {
      test = &d;
    } else {
      train.push_back(d);
    }
  }
  require(held_out.empty() || test, ErrorKind::UsageError, "dataset has no domain named '" + held_out + "'",
          held_out);

  const auto config = train_config(c);
  const auto result = train_grounded(train, precursor, cfg_list(c, "dims"), data.n_classes, config,
                                     precursor_data ? &*precursor_data : nullptr);
  const auto ckpt_out = cfg_s(c, "checkpoint-out");
  if (!ckpt_out.empty()) save_checkpoint({result.model.featurizer, result.model.head}, ckpt_out);

  const auto train_pool = pool_domains(train);
  RepresentationIddOptions rep;
  rep.bins = cfg_u(c, "bins");
  rep.seed = config.seed;
  const auto m = representation_idd(result.model.featurizer, feature_domains(data), rep);
  json results = {{"history", history_json(result.history)},
                  {"train_accuracy", accuracy(result.model, train_pool)},
                  {"mean_l_js_train",
                   mean_grounding_js(precursor.featurizer, result.model.featurizer, train_pool,
                                     config.temperature, config.normalization)},
                  {"representation_idd", to_json(m)},
                  {"checkpoint", ckpt_out.empty() ? json(nullptr) : json(ckpt_out)}};
  if (test) {
    results["held_out"] = held_out;
    results["held_out_accuracy"] = accuracy(result.model, test->samples);
    results["mean_idd_held_out"] = mean_idd_to(m, domain_index(m, held_out));
  }
  return {results, history_csv(result.history), {}, 0};
}

/// Check every differentiable loss on random small networks.
inline CommandOutput run_grad_check(const json& c) {
  const auto dims = cfg_list(c, "dims");
  const std::size_t classes = cfg_u(c, "classes");
  const std::size_t batch_n = cfg_u(c, "batch");
  const std::uint64_t seed = cfg_u(c, "seed");
  require(batch_n >= 1, ErrorKind::UsageError, "batch must be >= 1", "batch");
  GradCheckOptions opts;
  opts.step = cfg_d(c, "step");
  opts.tolerance = cfg_d(c, "tolerance");
  opts.max_coords_per_block = cfg_u(c, "max-coords");
  opts.seed = seed;

  TrainConfig config;
  config.seed = seed;
  config.lambda = cfg_d(c, "lambda");
  config.lambda_kl = cfg_d(c, "lambda-kl");
  const Model precursor = init_model(dims, classes, config);
  TrainConfig other = config;
  other.seed = derive_key(seed, hash_name("grad-check-model"));
  Model model = init_model(dims, classes, other);

  CounterRng rng(derive_key(seed, hash_name("grad-check-data")));
  const std::size_t in = model.featurizer.in_dim();
  const std::size_t feat = model.featurizer.feat_dim();
  auto random_vector = [&](std::size_t n) {
    Vector v(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = rng.normal();
    return v;
  };
  LabeledSet batch;
  for (std::size_t i = 0; i < batch_n; ++i) batch.push_back({random_vector(in), rng.below(classes)});

  json checks = json::object();
  bool passed = true;
  auto record = [&](const std::string& name, const GradCheckReport& r) {
    checks[name] = to_json(r);
    passed = passed && r.passed();
  };

  {  // cross-entropy w.r.t. logits
    Vector logits = random_vector(classes);
    const std::size_t label = rng.below(classes);
    const auto g = cross_entropy_grad(logits, label);
    record("cross_entropy",
           finite_diff_check(
               [&](std::span<const double> p) {
                 return cross_entropy(Eigen::Map<const Vector>(p.data(), static_cast<Eigen::Index>(p.size())), label);
               },
               std::span<double>(logits.data(), classes), std::span<const double>(g.grad.data(), classes),
               {{"logits", 0, classes}}, opts));
  }
  {  // grounding JS w.r.t. DG features
    const Vector fs = random_vector(feat);
    Vector f = random_vector(feat);
    const auto g = grounding_js_grad(fs, f);
    record("grounding_js",
           finite_diff_check(
               [&](std::span<const double> p) {
                 return grounding_js(fs, Eigen::Map<const Vector>(p.data(), static_cast<Eigen::Index>(p.size())));
               },
               std::span<double>(f.data(), feat), std::span<const double>(g.grad.data(), feat),
               {{"features", 0, feat}}, opts));
  }
  {  // last-layer KL w.r.t. DG logits
    const Vector pre = random_vector(classes);
    Vector dg = random_vector(classes);
    const auto g = kl_head_regularizer_grad(pre, dg);
    record("kl_head_regularizer",
           finite_diff_check(
               [&](std::span<const double> p) {
                 return kl_head_regularizer(pre,
                                            Eigen::Map<const Vector>(p.data(), static_cast<Eigen::Index>(p.size())));
               },
               std::span<double>(dg.data(), classes), std::span<const double>(g.grad.data(), classes),
               {{"logits", 0, classes}}, opts));
  }
  {  // full objective w.r.t. every parameter of f and g
    auto grad = ModelGrad::zeros_like(model);
    smos_total_loss(batch, {}, precursor, model, config, &grad);
    const std::size_t nf = model.featurizer.parameter_count();
    const std::size_t ng = model.head.parameter_count();
    std::vector<double> params(nf + ng), analytic(nf + ng);
    std::copy(model.featurizer.params().begin(), model.featurizer.params().end(), params.begin());
    std::copy(model.head.params().begin(), model.head.params().end(), params.begin() + static_cast<std::ptrdiff_t>(nf));
    std::copy(grad.featurizer.begin(), grad.featurizer.end(), analytic.begin());
    std::copy(grad.head.begin(), grad.head.end(), analytic.begin() + static_cast<std::ptrdiff_t>(nf));
    Model probe = model;
    auto loss = [&](std::span<const double> p) {
      std::copy(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(nf), probe.featurizer.params().begin());
      std::copy(p.begin() + static_cast<std::ptrdiff_t>(nf), p.end(), probe.head.params().begin());
      return smos_total_loss(batch, {}, precursor, probe, config).total;
    };
    std::vector<ParamBlock> blocks;
    for (std::size_t i = 0; i < model.featurizer.layer_count(); ++i) {
      const auto& s = model.featurizer.shapes()[i];
      blocks.push_back({"f.w" + std::to_string(i), s.weight_offset, s.in * s.out});
      blocks.push_back({"f.b" + std::to_string(i), s.bias_offset, s.out});
    }
    const auto& hs = model.head.shapes()[0];
    blocks.push_back({"g.w", nf + hs.weight_offset, hs.in * hs.out});
    blocks.push_back({"g.b", nf + hs.bias_offset, hs.out});
    record("smos_total_loss", finite_diff_check(loss, params, analytic, blocks, opts));
  }

  CommandOutput out;
  out.results = {{"checks", checks}, {"passed", passed}};
  CsvWriter csv({"loss", "block", "checked", "max_rel_error", "worst_index", "analytic", "numeric"});
  for (auto it = checks.begin(); it != checks.end(); ++it)
    for (const auto& b : it.value().at("blocks"))
      csv.row({it.key(), b.at("name").get<std::string>(), std::to_string(b.at("checked").get<std::size_t>()),
               csv_number(b.at("max_rel_error").get<double>()),
               std::to_string(b.at("worst_index").get<std::size_t>()), csv_number(b.at("analytic").get<double>()),
               csv_number(b.at("numeric").get<double>())});
  out.csv = csv.text();
  out.exit_code = passed ? 0 : 1;
  return out;
}

/// Writes a synthetic image corpus or the color-shift vector task.
inline CommandOutput run_synth(const json& c) {
  namespace fs = std::filesystem;
  const fs::path dir = cfg_s(c, "out-dir");
  const std::uint64_t seed = cfg_u(c, "seed");
  const std::size_t per_class = cfg_u(c, "per-class");
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorKind::IoError, "cannot create directory: " + ec.message(), dir.string());
  std::vector<std::string> written;

  if (cfg_s(c, "kind") == "corpus") {
    const std::size_t side = cfg_u(c, "size");
    require(side >= 1, ErrorKind::UsageError, "size must be >= 1", "size");
    struct Style {
      const char* name;
      Rgb base;
    };
    const Style styles[] = {{"red", {200, 40, 40}}, {"green", {40, 200, 40}}, {"blue", {40, 40, 200}}};
    const struct {
      const char* name;
      int spread;
    } classes[] = {{"calm", 8}, {"busy", 40}};
    for (const auto& s : styles) {
      for (const auto& cls : classes) {
        const fs::path cell = dir / s.name / cls.name;
        fs::create_directories(cell, ec);
        require(!ec, ErrorKind::IoError, "cannot create directory: " + ec.message(), cell.string());
        for (std::size_t k = 0; k < per_class; ++k) {
          const auto key = derive_key(seed, hash_name(s.name), hash_name(cls.name), k);
          char file[32];
          std::snprintf(file, sizeof file, "img_%04zu.png", k);
          const auto path = cell / file;
          write_bytes(path, encode_png(synthetic::tinted(side, side, s.base, cls.spread, key)));
          written.push_back(path.string());
        }
      }
    }
  } else {
    const auto task = synthetic::color_shift_task(seed, per_class);
    const auto pre = (dir / "precursor.json").string();
    const auto dg = (dir / "dg.json").string();
    save_vector_dataset({task.precursor_classes, task.precursor}, pre);
    save_vector_dataset({task.dg_classes, task.dg}, dg);
    written = {pre, dg};
  }
  CommandOutput out;
  out.results = {{"written", written}};
  CsvWriter csv({"path"});
  for (const auto& w : written) csv.row({w});
  out.csv = csv.text();
  return out;
}

inline const std::vector<Command>& commands() {
  static const std::vector<Command> table = [] {
    const OptSpec seed{"seed", OptKind::Uint, 0, "RNG seed (env DOMAINSHIFT_SEED when absent)"};
    const OptSpec sample_cap{"sample-cap", OptKind::OptionalUint, nullptr, "cap on images per domain/class"};
    const OptSpec pool{"pool", OptKind::Choice, "pixel", "histogram pooling: pixel|image", {"pixel", "image"}};
    const OptSpec init{"init", OptKind::String, "kaiming", "featurizer init: kaiming or a checkpoint path"};
    const OptSpec steps{"steps", OptKind::Uint, 500, "optimizer steps"};
    const OptSpec lr{"lr", OptKind::Double, 1e-2, "Adam learning rate"};
    const OptSpec batch{"batch-size", OptKind::Uint, 16, "minibatch size"};
    const OptSpec ckpt_out{"checkpoint-out", OptKind::OptionalPath, nullptr, "write the trained model here"};
    return std::vector<Command>{
        {"scan",
         "index root/<domain>/<class>/<images> into a manifest",
         {{"root", OptKind::Path, nullptr, "corpus root directory", {}, true},
          {"manifest-out", OptKind::OptionalPath, nullptr, "also write the bare manifest here"},
          seed},
         run_scan},
        {"icv",
         "intra-class variation per domain",
         {{"manifest", OptKind::Path, nullptr, "manifest (or scan report) file", {}, true},
          {"domain", OptKind::String, "", "only this domain (default: all)"},
          {"trials", OptKind::Uint, 3, "random half-splits averaged per class"},
          sample_cap,
          pool,
          seed},
         run_icv},
        {"idd",
         "inter-domain dissimilarity matrix",
         {{"manifest", OptKind::Path, nullptr, "manifest (or scan report) file", {}, true},
          {"reference", OptKind::OptionalPath, nullptr, "manifest holding a reference domain"},
          {"reference-domain", OptKind::String, "", "domain of --reference to use (default: first)"},
          sample_cap,
          pool,
          seed},
         run_idd},
        {"rep-idd",
         "IDD in a featurizer's output space",
         {{"checkpoint", OptKind::Path, nullptr, "featurizer checkpoint", {}, true},
          {"data", OptKind::Path, nullptr, "vector dataset", {}, true},
          {"bins", OptKind::Uint, 32, "bins per feature dimension"},
          {"held-out", OptKind::String, "", "report the mean IDD of this domain to the rest"},
          seed},
         run_rep_idd},
        {"train-precursor",
         "fit the precursor featurizer + head by cross-entropy",
         {{"data", OptKind::Path, nullptr, "vector dataset", {}, true},
          {"dims", OptKind::UintList, nullptr, "featurizer layer sizes, e.g. 5,16,3", {}, true},
          steps,
          lr,
          batch,
          init,
          ckpt_out,
          seed},
         run_train_precursor},
        {"train-smos",
         "train a DG model grounded on a frozen precursor",
         {{"data", OptKind::Path, nullptr, "vector dataset of DG domains", {}, true},
          {"precursor", OptKind::Path, nullptr, "precursor checkpoint (with head)", {}, true},
          {"precursor-data", OptKind::OptionalPath, nullptr, "precursor samples, to report l_s"},
          {"held-out", OptKind::String, "", "domain excluded from training and evaluated"},
          {"dims", OptKind::UintList, nullptr, "featurizer layer sizes", {}, true},
          {"lambda", OptKind::Double, 0.1, "grounding coefficient"},
          {"lambda-kl", OptKind::Double, 0.0, "last-layer KL coefficient"},
          {"temperature", OptKind::Double, 1.0, "softmax temperature for grounding"},
          {"normalization", OptKind::Choice, "softmax", "feature normalization: softmax|anchored",
           {"softmax", "anchored"}},
          {"bins", OptKind::Uint, 32, "bins per feature dimension for the IDD summary"},
          steps,
          lr,
          batch,
          init,
          ckpt_out,
          seed},
         run_train_smos},
        {"grad-check",
         "finite-difference check of every differentiable loss",
         {{"dims", OptKind::UintList, std::vector<std::size_t>{4, 8, 3}, "featurizer layer sizes"},
          {"classes", OptKind::Uint, 3, "classifier outputs"},
          {"batch", OptKind::Uint, 2, "samples in the objective's batch"},
          {"lambda", OptKind::Double, 0.1, "grounding coefficient"},
          {"lambda-kl", OptKind::Double, 0.1, "last-layer KL coefficient"},
          {"step", OptKind::Double, 1e-5, "central-difference step h"},
          {"tolerance", OptKind::Double, 1e-4, "max relative error allowed"},
          {"max-coords", OptKind::Uint, 0, "coordinates sampled per block (0: all)"},
          seed},
         run_grad_check},
        {"synth",
         "write synthetic data: an image corpus or the color-shift vector task",
         {{"kind", OptKind::Choice, "corpus", "corpus|vectors", {"corpus", "vectors"}},
          {"out-dir", OptKind::Path, nullptr, "output directory", {}, true},
          {"per-class", OptKind::Uint, 8, "samples per (domain, class)"},
          {"size", OptKind::Uint, 8, "image side in pixels (corpus)"},
          seed},
         run_synth},
    };
  }();
  return table;
}

inline const Command* find_command(const std::string& name) {
  for (const auto& c : commands())
    if (c.name == name) return &c;
  return nullptr;
}

inline void emit_error(std::ostream& out, const std::string& kind, const std::string& message,
                       const std::string& where) {
  out << dump_canonical(json{{"error", kind}, {"message", message}, {"where", where}}) << '\n';
}

/// Parse `args` (without the program name), run, emit. Returns the exit code:
/// 0 success, 1 domain error (or a failed gradient check), 2 usage error.
inline int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Domain-shift measures and grounded training", "domainshift"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(0, 1);

  std::string config_path, format, out_path;
  bool timing = false;
  unsigned threads = decode_threads();
  auto add_emission = [&](CLI::App& a) {
    a.add_option("--config", config_path, "replay the config echo of a prior report");
    a.add_option("--format", format, "json|csv (default: from --out extension, else json)")
        ->check(CLI::IsMember({"json", "csv"}));
    a.add_option("--out", out_path, "write the report here instead of stdout");
    a.add_flag("--timing", timing, "include wall_time in the report");
    a.add_option("--threads", threads, "decoder threads")->check(CLI::PositiveNumber);
  };
  add_emission(app);

  std::map<std::string, ParsedValues> values;
  std::map<std::string, CLI::App*> subs;
  for (const auto& cmd : commands()) {
    auto* sub = app.add_subcommand(cmd.name, cmd.help);
    subs[cmd.name] = sub;
    auto& v = values[cmd.name];
    for (const auto& o : cmd.options) {
      const std::string flag = "--" + o.name;
      CLI::Option* opt = nullptr;
      switch (o.kind) {
        case OptKind::Uint:
        case OptKind::OptionalUint:
          opt = sub->add_option(flag, v.uints[o.name], o.help);
          break;
        case OptKind::Double:
          opt = sub->add_option(flag, v.doubles[o.name], o.help);
          break;
        case OptKind::Choice:
          opt = sub->add_option(flag, v.strings[o.name], o.help)->check(CLI::IsMember(o.choices));
          break;
        case OptKind::String:
        case OptKind::Path:
        case OptKind::OptionalPath:
          opt = sub->add_option(flag, v.strings[o.name], o.help);
          break;
        case OptKind::UintList:
          opt = sub->add_option(flag, v.lists[o.name], o.help)->delimiter(',');
          break;
      }
      v.handles[o.name] = opt;
    }
    add_emission(*sub);
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return 0;
  } catch (const CLI::CallForVersion& e) {
    app.exit(e, out, err);
    return 0;
  } catch (const CLI::ParseError& e) {
    emit_error(out, "UsageError", e.what(), "");
    err << app.help() << '\n';
    return 2;
  }

  try {
    const auto started = std::chrono::steady_clock::now();
    const Command* cmd = nullptr;
    for (const auto& c : commands())
      if (subs[c.name]->parsed()) cmd = &c;

    json replay;
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      require(static_cast<bool>(in), ErrorKind::ParseError, "cannot open config", config_path);
      json j;
      try {
        in >> j;
      } catch (const json::exception& e) {
        throw Error(ErrorKind::ParseError, e.what(), config_path);
      }
      require(j.is_object(), ErrorKind::ParseError, "config must be a JSON object", config_path);
      if (j.contains("command") && j.contains("config_echo")) {
        const auto named = j.at("command").get<std::string>();
        const Command* from_file = find_command(named);
        require(from_file != nullptr, ErrorKind::UsageError, "unknown command '" + named + "'", config_path);
        require(cmd == nullptr || cmd == from_file, ErrorKind::UsageError,
                "config was produced by '" + named + "'", config_path);
        cmd = from_file;
        replay = j.at("config_echo");
      } else {
        replay = j;
      }
    }
    require(cmd != nullptr, ErrorKind::UsageError, "no subcommand given (try --help)");
    decode_threads() = threads;

    // Defaults, then the replayed config, then explicit flags.
    const auto& v = values[cmd->name];
    json config = json::object();
    for (const auto& o : cmd->options) config[o.name] = o.fallback;
    if (const char* env = std::getenv(kSeedEnv); env && replay.is_null())
      config["seed"] = parse_seed_text(env, kSeedEnv);
    if (!replay.is_null()) {
      for (auto it = replay.begin(); it != replay.end(); ++it) {
        require(config.contains(it.key()), ErrorKind::UsageError,
                "unknown config key for '" + cmd->name + "'", it.key());
        config[it.key()] = it.value();
      }
    }
    for (const auto& o : cmd->options) {
      if (v.handles.at(o.name)->count() > 0) config[o.name] = parsed_value(o, v);
      config[o.name] = check_config_value(o, config[o.name]);
    }
    if (config.contains("init")) config["init"] = init_text(config["init"].get<std::string>());

    CommandOutput result = cmd->run(config);
    for (const auto& w : result.warnings) err << dump_canonical(to_json(w)) << '\n';

    std::string fmt = format;
    if (fmt.empty()) fmt = std::filesystem::path(out_path).extension() == ".csv" ? "csv" : "json";
    std::string text;
    if (fmt == "csv") {
      text = result.csv;
    } else {
      json report = {{"command", cmd->name},
                     {"config_echo", config},
                     {"results", result.results},
                     {"tool_version", kToolVersion},
                     {"log_base", kLogBase}};
      if (timing)
        report["wall_time"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
      text = dump_canonical(report, 2) + '\n';
    }
    if (out_path.empty()) {
      out << text;
    } else {
      write_text_file(out_path, text);
    }
    return result.exit_code;
  } catch (const Error& e) {
    emit_error(out, std::string(to_string(e.kind())), e.detail(), e.where());
    return e.kind() == ErrorKind::UsageError ? 2 : 1;
  } catch (const std::exception& e) {
    emit_error(out, "Internal", e.what(), "");
    return 1;
  }
}

}  // namespace domainshift::cli
