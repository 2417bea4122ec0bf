#pragma once

#include <string>

#include "stnas/search.hpp"

namespace stnas {

/// Test MAE of four single-operator models trained under one protocol:
/// DGCN vs CHEBY_GCN behind a GDCC temporal scaffold, INF_T vs TRANSFORMER_T behind a DGCN spatial scaffold.
struct OplabResult {
  double dgcn = 0.0;
  double cheby_gcn = 0.0;
  double inf_t = 0.0;
  double transformer_t = 0.0;

  std::string to_table() const;
  std::string to_json() const;
};

/// One-block genotype: node 1 = scaffold, node 2 = candidate on node 1 plus an identity skip from the input.
Genotype scaffold_genotype(OperatorKind scaffold, OperatorKind candidate, std::int64_t hidden);

OplabResult run_oplab(const DatasetSplits& splits, const GraphContext& graph, TrainConfig cfg, std::int64_t hidden);

}  // namespace stnas
