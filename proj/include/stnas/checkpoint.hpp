#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "stnas/tensor.hpp"

namespace stnas {

/// A directory holding manifest.json (tensor index + metadata), tensors.bin (little-endian float64)
/// and optionally genotype.json.
struct Checkpoint {
  std::map<std::string, Tensor> tensors;
  std::vector<std::string> order;  // tensor names in file order
  nlohmann::json meta;
  std::string genotype_json;

  const Tensor& tensor(const std::string& name) const;
};

/// Writes to a sibling temporary directory and renames it over `dir`.
void write_checkpoint(const std::filesystem::path& dir, const std::vector<std::pair<std::string, const Tensor*>>& tensors,
                      const nlohmann::json& meta, const std::string& genotype_json = {});

Checkpoint read_checkpoint(const std::filesystem::path& dir);

}  // namespace stnas
