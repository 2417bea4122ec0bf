#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "stnas/genotype.hpp"
#include "stnas/model.hpp"

namespace stnas {

class SuperNet;

/// Plain-value snapshot of one block's {alpha, beta}.
struct MicroValues {
  std::vector<std::vector<double>> alpha;  // indexed by micro_edge_index(i, j)
  std::vector<std::vector<double>> beta;   // beta[j - 1], length j

  std::int64_t micro_nodes() const { return static_cast<std::int64_t>(beta.size()) + 1; }
};

/// gamma[j - 2] has length j: index 0 is the embedding, index i >= 1 is block i.
using MacroValues = std::vector<std::vector<double>>;

struct DerivationOptions {
  bool forbid_zero_on_mandatory_edge = false;
};

std::vector<double> softmax_values(std::span<const double> v, double tau = 1.0);

/// softmax(beta_j)_i * softmax(alpha_ij)_o.
double edge_weight(std::span<const double> alpha_ij, std::span<const double> beta_j, std::size_t i, std::size_t o);

BlockGenotype derive_st_block(const MicroValues& micro, DerivationOptions options = {});
std::vector<BackboneEdge> derive_backbone(const MacroValues& gamma, std::int64_t blocks);

MicroValues micro_values(const SuperNet& net, std::size_t block);
MacroValues macro_values(const SuperNet& net);

/// True when the argmax of softmax(alpha / tau) agrees with the untempered argmax on every edge.
bool tempered_ranking_agrees(const MicroValues& micro, double tau);

/// Full genotype of a supernet. A shared-micro supernet yields B copies of its block on a chain backbone.
Genotype derive_genotype(const SuperNet& net, const std::string& dataset, DerivationOptions options = {});

/// Discrete network built from a genotype: every hidden node sums its retained edges.
class DiscreteNet : public ForecastModel {
 public:
  DiscreteNet(const Genotype& genotype, const NetworkSpec& spec, GraphContext graph, std::uint64_t seed,
              bool allow_reference_ops = false);

  ag::Var forward(const Tensor& inputs, bool training) override;
  ParamList weights() const override;
  BufferList buffers() override;
  const NetworkSpec& spec() const override { return spec_; }
  const Genotype& genotype() const { return genotype_; }

 private:
  struct Block {
    // ops[j - 1][e] applies to edge genotype.blocks[b].nodes[j - 1][e]
    std::vector<std::vector<Operator>> ops;
  };

  ag::Var block_forward(std::size_t b, const ag::Var& h0, bool training);

  Genotype genotype_;
  NetworkSpec spec_;
  GraphContext graph_;
  Dense embedding_;
  std::vector<Block> blocks_;
  Dense head_;
};

/// Fresh-weight model for a genotype; full channels. Throws GenotypeError on invalid input.
std::unique_ptr<DiscreteNet> build_discrete_model(const Genotype& genotype, NetworkSpec spec, GraphContext graph,
                                                  std::uint64_t seed, bool allow_reference_ops = false);

}  // namespace stnas
