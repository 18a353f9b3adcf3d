#pragma once

// Multi-domain corpus index: directory scanning, manifest files, and seeded
// per-cell train/test splits.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "domainshift/canonical_json.hpp"
#include "domainshift/error.hpp"
#include "domainshift/image.hpp"
#include "domainshift/rng.hpp"

namespace domainshift {

/// Non-fatal diagnostic. Emitted on stderr by the CLI as {"warn": ..., "path": ...}.
struct Warning {
  std::string message;
  std::string path;
  friend bool operator==(const Warning&, const Warning&) = default;
};

inline nlohmann::json to_json(const Warning& w) { return {{"warn", w.message}, {"path", w.path}}; }

struct DomainSpec {
  std::string name;
  /// class name -> sample paths (relative to the corpus root)
  std::map<std::string, std::vector<std::string>> classes;

  std::size_t sample_count() const {
    std::size_t n = 0;
    for (const auto& [_, paths] : classes) n += paths.size();
    return n;
  }

  /// All samples, class-major, in stored order.
  std::vector<std::string> all_paths() const {
    std::vector<std::string> out;
    out.reserve(sample_count());
    for (const auto& [_, paths] : classes) out.insert(out.end(), paths.begin(), paths.end());
    return out;
  }

  friend bool operator==(const DomainSpec&, const DomainSpec&) = default;
};

struct CorpusManifest {
  std::string corpus_name;
  std::string root;
  std::uint64_t seed = 0;
  std::vector<DomainSpec> domains;

  const DomainSpec* find_domain(const std::string& name) const {
    for (const auto& d : domains)
      if (d.name == name) return &d;
    return nullptr;
  }

  friend bool operator==(const CorpusManifest&, const CorpusManifest&) = default;
};

/// Throws InvariantViolation naming the offending key or path.
inline void validate(const CorpusManifest& manifest) {
  require(!manifest.domains.empty(), ErrorKind::InvariantViolation, "manifest has no domains",
          "domains");
  std::set<std::string> domain_names;
  std::map<std::string, std::string> owner;  // path -> "domain/class"
  const auto& reference = manifest.domains.front();
  for (const auto& domain : manifest.domains) {
    require(domain_names.insert(domain.name).second, ErrorKind::InvariantViolation,
            "duplicate domain name", domain.name);
    bool same_labels = domain.classes.size() == reference.classes.size() &&
                       std::equal(domain.classes.begin(), domain.classes.end(),
                                  reference.classes.begin(),
                                  [](const auto& a, const auto& b) { return a.first == b.first; });
    require(same_labels, ErrorKind::InvariantViolation, "label space mismatch", domain.name);
    bool has_pair = false;
    for (const auto& [cls, paths] : domain.classes) {
      has_pair = has_pair || paths.size() >= 2;
      for (const auto& path : paths) {
        const auto [it, fresh] = owner.emplace(path, domain.name + "/" + cls);
        require(fresh, ErrorKind::InvariantViolation,
                "duplicate sample path (also in " + it->second + ")", path);
      }
    }
    require(has_pair, ErrorKind::InvariantViolation,
            "domain needs at least one class with two or more samples", domain.name);
  }
}

inline nlohmann::json to_json(const CorpusManifest& manifest) {
  nlohmann::json domains = nlohmann::json::array();
  for (const auto& d : manifest.domains) {
    nlohmann::json classes = nlohmann::json::object();
    for (const auto& [cls, paths] : d.classes) classes[cls] = paths;
    domains.push_back({{"name", d.name}, {"classes", classes}});
  }
  return {{"corpus_name", manifest.corpus_name},
          {"seed", manifest.seed},
          {"root", manifest.root},
          {"domains", domains}};
}

/// Parse a manifest JSON value. `base_dir` resolves a relative root.
inline CorpusManifest manifest_from_json(const nlohmann::json& j,
                                         const std::filesystem::path& base_dir = {}) {
  auto field = [&](const nlohmann::json& obj, const char* key, auto check, const std::string& where) {
    require(obj.is_object() && obj.contains(key) && check(obj.at(key)), ErrorKind::ParseError,
            std::string("missing or mistyped key '") + key + "'", where);
    return obj.at(key);
  };
  auto is_string = [](const nlohmann::json& v) { return v.is_string(); };
  auto is_u64 = [](const nlohmann::json& v) { return v.is_number_unsigned(); };
  auto is_array = [](const nlohmann::json& v) { return v.is_array(); };
  auto is_object = [](const nlohmann::json& v) { return v.is_object(); };

  CorpusManifest m;
  m.corpus_name = field(j, "corpus_name", is_string, "corpus_name").get<std::string>();
  m.seed = j.contains("seed") ? field(j, "seed", is_u64, "seed").get<std::uint64_t>() : 0;
  std::filesystem::path root = field(j, "root", is_string, "root").get<std::string>();
  if (root.is_relative() && !base_dir.empty()) root = base_dir / root;
  m.root = root.lexically_normal().string();
  const auto& domains = field(j, "domains", is_array, "domains");
  for (std::size_t i = 0; i < domains.size(); ++i) {
    const std::string where = "domains[" + std::to_string(i) + "]";
    DomainSpec d;
    d.name = field(domains[i], "name", is_string, where + ".name").get<std::string>();
    const auto& classes = field(domains[i], "classes", is_object, where + ".classes");
    for (const auto& [cls, paths] : classes.items()) {
      require(paths.is_array(), ErrorKind::ParseError, "class entry must be an array",
              where + ".classes." + cls);
      auto& out = d.classes[cls];
      for (const auto& p : paths) {
        require(p.is_string(), ErrorKind::ParseError, "sample path must be a string",
                where + ".classes." + cls);
        out.push_back(p.get<std::string>());
      }
    }
    m.domains.push_back(std::move(d));
  }
  validate(m);
  return m;
}

inline CorpusManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::ParseError, "cannot open manifest", path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ParseError, e.what(), path.string());
  }
  return manifest_from_json(j, std::filesystem::absolute(path).parent_path());
}

inline void save_manifest(const CorpusManifest& manifest, const std::filesystem::path& path) {
  write_canonical(path.string(), to_json(manifest), 2);
}

struct ScanResult {
  CorpusManifest manifest;
  std::vector<Warning> warnings;
};

/// Index root/<domain>/<class>/<image files>. Only files that decode as PNG or
/// JPEG are kept; classes missing from any domain are dropped with a
/// warning. Ordering is lexicographic throughout.
inline ScanResult scan_tree(const std::filesystem::path& root_path) {
  namespace fs = std::filesystem;
  std::error_code ec;
  require(fs::is_directory(root_path, ec), ErrorKind::EmptyCorpus, "corpus root is not a directory",
          root_path.string());
  const fs::path root = fs::canonical(root_path);

  ScanResult result;
  auto sorted_entries = [](const fs::path& dir) {
    std::vector<fs::directory_entry> entries(fs::directory_iterator(dir), fs::directory_iterator{});
    std::sort(entries.begin(), entries.end(),
              [](const auto& a, const auto& b) { return a.path().filename() < b.path().filename(); });
    return entries;
  };

  std::vector<DomainSpec> domains;
  for (const auto& domain_entry : sorted_entries(root)) {
    if (!domain_entry.is_directory()) continue;
    DomainSpec domain{domain_entry.path().filename().string(), {}};
    for (const auto& class_entry : sorted_entries(domain_entry.path())) {
      if (!class_entry.is_directory()) continue;
      std::vector<std::string> paths;
      for (const auto& file : sorted_entries(class_entry.path())) {
        if (!file.is_regular_file()) continue;
        const std::string rel = fs::relative(file.path(), root).generic_string();
        if (!looks_like_image(file.path())) {
          result.warnings.push_back({"skipped non-image file", rel});
          continue;
        }
        try {
          decode_image(file.path());
          paths.push_back(rel);
        } catch (const Error& e) {
          result.warnings.push_back({"skipped undecodable image: " + e.detail(), rel});
        }
      }
      domain.classes.emplace(class_entry.path().filename().string(), std::move(paths));
    }
    domains.push_back(std::move(domain));
  }
  require(!domains.empty(), ErrorKind::EmptyCorpus, "no domain directories found", root.string());

  std::set<std::string> shared;
  for (const auto& [cls, _] : domains.front().classes) shared.insert(cls);
  for (const auto& d : domains) {
    std::set<std::string> here;
    for (const auto& [cls, _] : d.classes)
      if (shared.count(cls)) here.insert(cls);
    shared = std::move(here);
  }
  require(!shared.empty(), ErrorKind::ClassMismatch, "no class is shared by every domain",
          root.string());

  // One warning per dropped class, pointing at its first occurrence.
  std::map<std::string, std::string> dropped;
  for (auto& d : domains) {
    for (auto it = d.classes.begin(); it != d.classes.end();) {
      if (shared.count(it->first)) {
        ++it;
      } else {
        dropped.emplace(it->first, (root / d.name / it->first).string());
        it = d.classes.erase(it);
      }
    }
  }
  for (const auto& [cls, where] : dropped)
    result.warnings.push_back({"class '" + cls + "' missing from some domain; dropped", where});

  result.manifest.corpus_name = root.filename().string();
  result.manifest.root = root.string();
  result.manifest.seed = 0;
  result.manifest.domains = std::move(domains);
  validate(result.manifest);
  return result;
}

/// Fraction of each cell assigned to training, as an exact rational.
struct SplitSpec {
  std::uint64_t numerator = 4;
  std::uint64_t denominator = 5;
  std::uint64_t seed = 0;

  void check() const {
    require(denominator > 0 && numerator > 0 && numerator < denominator,
            ErrorKind::PreconditionFailed, "train fraction must lie strictly between 0 and 1");
  }
  std::size_t train_count(std::size_t n) const {
    return static_cast<std::size_t>((static_cast<unsigned __int128>(n) * numerator) / denominator);
  }
};

struct SampleRef {
  std::string domain;
  std::string class_name;
  std::string path;
  friend bool operator==(const SampleRef&, const SampleRef&) = default;
  friend auto operator<=>(const SampleRef&, const SampleRef&) = default;
};

struct SplitResult {
  std::vector<SampleRef> train;
  std::vector<SampleRef> test;
  std::vector<Warning> warnings;
};

/// Shuffle stream for one (seed, domain, class) cell.
inline CounterRng cell_stream(std::uint64_t seed, const std::string& domain, const std::string& cls) {
  return CounterRng(derive_key(seed, hash_name(domain), hash_name(cls)));
}

/// Per (domain, class) cell: seeded shuffle, then the first floor(fraction * n)
/// samples train and the rest test.
inline SplitResult split_corpus(const CorpusManifest& manifest, const SplitSpec& spec) {
  spec.check();
  SplitResult out;
  for (const auto& domain : manifest.domains) {
    for (const auto& [cls, paths] : domain.classes) {
      std::vector<std::string> order = paths;
      auto rng = cell_stream(spec.seed, domain.name, cls);
      shuffle(std::span<std::string>(order), rng);
      const std::size_t n_train = spec.train_count(order.size());
      if (n_train == 0 || n_train == order.size()) {
        out.warnings.push_back({"cell of " + std::to_string(order.size()) +
                                    " samples leaves one side of the split empty",
                                domain.name + "/" + cls});
      }
      for (std::size_t i = 0; i < order.size(); ++i) {
        auto& side = i < n_train ? out.train : out.test;
        side.push_back({domain.name, cls, order[i]});
      }
    }
  }
  return out;
}

inline nlohmann::json to_json(const SplitResult& split) {
  auto side = [](const std::vector<SampleRef>& refs) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : refs) arr.push_back({{"domain", r.domain}, {"class", r.class_name}, {"path", r.path}});
    return arr;
  };
  return {{"train", side(split.train)}, {"test", side(split.test)}};
}

/// Copy of `domain` whose paths are joined onto `root`.
inline DomainSpec resolve_paths(const DomainSpec& domain, const std::filesystem::path& root) {
  DomainSpec out{domain.name, {}};
  for (const auto& [cls, paths] : domain.classes) {
    auto& dst = out.classes[cls];
    for (const auto& p : paths) dst.push_back((root / p).lexically_normal().string());
  }
  return out;
}

}  // namespace domainshift
