#pragma once

// Labeled vector datasets on disk:
//   {"n_classes": k, "domains": [{"name": str, "x": [[f64, ...], ...], "y": [u64, ...]}]}

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "domainshift/canonical_json.hpp"
#include "domainshift/error.hpp"
#include "domainshift/trainer.hpp"

namespace domainshift {

struct VectorDataset {
  std::size_t n_classes = 2;
  std::vector<DomainSamples> domains;
};

inline nlohmann::json to_json(const VectorDataset& data) {
  nlohmann::json domains = nlohmann::json::array();
  for (const auto& d : data.domains) {
    nlohmann::json xs = nlohmann::json::array();
    std::vector<std::size_t> ys;
    for (const auto& s : d.samples) {
      xs.push_back(std::vector<double>(s.x.data(), s.x.data() + s.x.size()));
      ys.push_back(s.label);
    }
    domains.push_back({{"name", d.name}, {"x", xs}, {"y", ys}});
  }
  return {{"n_classes", data.n_classes}, {"domains", domains}};
}

inline VectorDataset vector_dataset_from_json(const nlohmann::json& j) {
  require(j.is_object() && j.contains("n_classes") && j.at("n_classes").is_number_unsigned() &&
              j.contains("domains") && j.at("domains").is_array(),
          ErrorKind::ParseError, "dataset needs 'n_classes' and 'domains'");
  VectorDataset data;
  data.n_classes = j.at("n_classes").get<std::size_t>();
  for (std::size_t i = 0; i < j.at("domains").size(); ++i) {
    const auto& d = j.at("domains")[i];
    const std::string where = "domains[" + std::to_string(i) + "]";
    require(d.is_object() && d.contains("name") && d.at("name").is_string() && d.contains("x") &&
                d.at("x").is_array() && d.contains("y") && d.at("y").is_array() &&
                d.at("x").size() == d.at("y").size(),
            ErrorKind::ParseError, "domain needs 'name' and equally long 'x' and 'y'", where);
    DomainSamples out{d.at("name").get<std::string>(), {}};
    for (std::size_t k = 0; k < d.at("x").size(); ++k) {
      const auto& row = d.at("x")[k];
      const auto& y = d.at("y")[k];
      require(row.is_array() && y.is_number_unsigned(), ErrorKind::ParseError,
              "samples need numeric rows and non-negative integer labels", where);
      Vector x(static_cast<Eigen::Index>(row.size()));
      for (std::size_t c = 0; c < row.size(); ++c) {
        require(row[c].is_number(), ErrorKind::ParseError, "feature must be a number", where);
        x(static_cast<Eigen::Index>(c)) = row[c].get<double>();
      }
      out.samples.push_back({std::move(x), y.get<std::size_t>()});
    }
    data.domains.push_back(std::move(out));
  }
  return data;
}

inline VectorDataset load_vector_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::ParseError, "cannot open dataset", path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ParseError, e.what(), path.string());
  }
  return vector_dataset_from_json(j);
}

inline void save_vector_dataset(const VectorDataset& data, const std::filesystem::path& path) {
  write_canonical(path.string(), to_json(data));
}

}  // namespace domainshift
