#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "stnas/operators.hpp"

namespace stnas {

/// Raised for malformed genotype documents; the message names the offending field.
class GenotypeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kOpsetVersion = "autocts-v1";
/// Backbone source index standing for the embedding layer; blocks are numbered from 1.
inline constexpr std::int64_t kEmbed = 0;

struct GenotypeEdge {
  std::int64_t src = 0;
  OperatorKind op = OperatorKind::IDENTITY;

  bool operator==(const GenotypeEdge&) const = default;
};

/// nodes[j - 1] lists the retained incoming edges of hidden node j, mandatory edge (from j - 1) first.
struct BlockGenotype {
  std::vector<std::vector<GenotypeEdge>> nodes;

  std::int64_t micro_nodes() const { return static_cast<std::int64_t>(nodes.size()) + 1; }
  bool operator==(const BlockGenotype&) const = default;
};

struct BackboneEdge {
  std::int64_t src = kEmbed;  // kEmbed or a block index < dst
  std::int64_t dst = 1;       // 1-based block index

  bool operator==(const BackboneEdge&) const = default;
};

struct GenotypeMeta {
  std::int64_t micro_nodes = 5;
  std::int64_t blocks = 4;
  std::int64_t hidden = 32;
  std::string opset = kOpsetVersion;
  std::string dataset;

  bool operator==(const GenotypeMeta&) const = default;
};

struct Genotype {
  GenotypeMeta meta;
  std::vector<BlockGenotype> blocks;
  std::vector<BackboneEdge> backbone;

  /// Throws GenotypeError if any structural invariant is violated. Reference-only operators
  /// are rejected unless `allow_reference_ops` is set.
  void validate(bool allow_reference_ops = false) const;
  bool operator==(const Genotype&) const = default;
};

std::string genotype_to_json(const Genotype& g);
Genotype genotype_from_json(const std::string& text);
Genotype load_genotype(const std::string& path);
void save_genotype(const Genotype& g, const std::string& path);
/// Fingerprint of the canonical JSON form.
std::uint64_t genotype_hash(const Genotype& g);

/// Chain backbone EMBED -> b_1 -> ... -> b_B.
std::vector<BackboneEdge> chain_backbone(std::int64_t blocks);
/// Every node j keeps (j-1, op) and, for j >= 2, (0, op); all operators `op`.
Genotype uniform_genotype(std::int64_t micro_nodes, std::int64_t blocks, std::int64_t hidden, OperatorKind op);
/// Uniformly random valid genotype over the searchable operator set.
Genotype random_genotype(std::int64_t micro_nodes, std::int64_t blocks, std::int64_t hidden, std::uint64_t seed);

}  // namespace stnas
