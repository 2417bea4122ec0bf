#include "stnas/oplab.hpp"

#include <iomanip>
#include <sstream>

namespace stnas {

Genotype scaffold_genotype(OperatorKind scaffold, OperatorKind candidate, std::int64_t hidden) {
  Genotype g;
  g.meta.micro_nodes = 3;
  g.meta.blocks = 1;
  g.meta.hidden = hidden;
  g.meta.dataset = "oplab";
  g.blocks.push_back(BlockGenotype{{{{0, scaffold}}, {{1, candidate}, {0, OperatorKind::IDENTITY}}}});
  g.backbone = chain_backbone(1);
  return g;
}

OplabResult run_oplab(const DatasetSplits& splits, const GraphContext& graph, TrainConfig cfg, std::int64_t hidden) {
  cfg.allow_reference_ops = true;
  auto test_mae = [&](OperatorKind scaffold, OperatorKind candidate) {
    return train_from_scratch(scaffold_genotype(scaffold, candidate, hidden), splits, graph, cfg).report.average().mae;
  };
  OplabResult r;
  r.dgcn = test_mae(OperatorKind::GDCC, OperatorKind::DGCN);
  r.cheby_gcn = test_mae(OperatorKind::GDCC, OperatorKind::CHEBY_GCN);
  r.inf_t = test_mae(OperatorKind::DGCN, OperatorKind::INF_T);
  r.transformer_t = test_mae(OperatorKind::DGCN, OperatorKind::TRANSFORMER_T);
  return r;
}

std::string OplabResult::to_table() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << std::left << std::setw(12) << "family" << std::setw(16) << "variant" << std::right << std::setw(10) << "MAE"
     << '\n';
  os << std::left << std::setw(12) << "GCN" << std::setw(16) << "DGCN" << std::right << std::setw(10) << dgcn << '\n';
  os << std::left << std::setw(12) << "GCN" << std::setw(16) << "CHEBY_GCN" << std::right << std::setw(10) << cheby_gcn
     << '\n';
  os << std::left << std::setw(12) << "Attention" << std::setw(16) << "INF_T" << std::right << std::setw(10) << inf_t
     << '\n';
  os << std::left << std::setw(12) << "Attention" << std::setw(16) << "TRANSFORMER_T" << std::right << std::setw(10)
     << transformer_t << '\n';
  return os.str();
}

std::string OplabResult::to_json() const {
  nlohmann::ordered_json j;
  j["GCN"] = {{"DGCN", dgcn}, {"CHEBY_GCN", cheby_gcn}};
  j["Attention"] = {{"INF_T", inf_t}, {"TRANSFORMER_T", transformer_t}};
  return j.dump(2);
}

}  // namespace stnas
