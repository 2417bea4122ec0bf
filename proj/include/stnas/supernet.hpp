#pragma once

// Continuous relaxation of the joint search space.
//
// Each block is a micro-DAG over M hidden nodes. Edge (i, j) mixes all
// searchable operators with weights softmax(alpha_ij / tau); node j mixes its
// incoming edges with softmax(beta_j). Blocks are wired by a macro-DAG whose
// block j (j >= 2) reads softmax(gamma_j)-weighted outputs of the embedding
// and blocks 1..j-1. All block outputs are summed into the output head.

#include <cstdint>
#include <memory>
#include <vector>

#include "stnas/model.hpp"

namespace stnas {

/// Index of edge (i, j), i < j, in the per-block alpha list.
inline std::size_t micro_edge_index(std::int64_t i, std::int64_t j) {
  return static_cast<std::size_t>(j * (j - 1) / 2 + i);
}

struct MicroArchParams {
  std::vector<ag::Var> alpha;  // M(M-1)/2 vectors of length |O|
  std::vector<ag::Var> beta;   // beta[j-1] has length j, j = 1..M-1

  static MicroArchParams random(std::int64_t micro_nodes, std::size_t n_ops, Initializer& init);
  std::int64_t micro_nodes() const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct MacroArchParams {
  std::vector<ag::Var> gamma;  // gamma[j-2] has length j (embedding + blocks 1..j-1), j = 2..B

  static MacroArchParams random(std::int64_t blocks, Initializer& init);
  void collect(const std::string& prefix, ParamList& out) const;
};

double anneal_temperature(double tau, double factor, double floor);
/// Number of operator assignments over the M(M-1)/2 edges of a micro-DAG: |O|^(M(M-1)/2).
std::uint64_t count_micro_space(std::int64_t micro_nodes, std::uint64_t n_ops);
/// Channel permutation applied after a partial-channel mixture.
std::vector<std::int64_t> channel_shuffle_permutation(std::int64_t channels, std::int64_t mixed);
/// h_j = sum_i softmax(beta_j)_i * f_ij.
ag::Var node_aggregate(const std::vector<ag::Var>& transforms, const ag::Var& beta);

/// All searchable operators on one micro-DAG edge.
class MixedEdge {
 public:
  MixedEdge(std::int64_t channels, double partial_fraction, const OperatorHyper& hyper, Initializer& init);

  /// f_ij = sum_o weights[o] * o(h_i), weights already normalized.
  ag::Var forward(const ag::Var& h, const ag::Var& weights, const GraphContext& graph, bool training);

  std::int64_t mixed_channels() const noexcept { return mixed_; }
  std::vector<Operator>& ops() { return ops_; }
  void collect_params(const std::string& prefix, ParamList& out) const;
  void collect_buffers(const std::string& prefix, BufferList& out);

 private:
  std::int64_t channels_;
  std::int64_t mixed_;
  std::vector<Operator> ops_;
  std::vector<std::int64_t> shuffle_;
};

class SuperBlock {
 public:
  SuperBlock(std::int64_t micro_nodes, std::int64_t channels, double partial_fraction, const OperatorHyper& hyper,
             bool residual, Initializer& init);

  /// Evaluates nodes 1..M-1 and returns h_{M-1} (+ h_0 with residual on).
  ag::Var forward(const ag::Var& h0, const MicroArchParams& arch, double tau, const GraphContext& graph,
                  bool training);

  std::int64_t micro_nodes() const noexcept { return micro_nodes_; }
  std::vector<MixedEdge>& edges() { return edges_; }
  void collect_params(const std::string& prefix, ParamList& out) const;
  void collect_buffers(const std::string& prefix, BufferList& out);

 private:
  std::int64_t micro_nodes_;
  bool residual_;
  std::vector<MixedEdge> edges_;
};

struct SuperNetOptions {
  /// One {alpha, beta} shared by every block and a fixed chain backbone.
  bool shared_micro = false;
};

class SuperNet : public ForecastModel {
 public:
  SuperNet(const NetworkSpec& spec, GraphContext graph, std::uint64_t seed, SuperNetOptions options = {});

  ag::Var forward(const Tensor& inputs, bool training) override;
  ParamList weights() const override;
  BufferList buffers() override;
  const NetworkSpec& spec() const override { return spec_; }

  ParamList arch_params() const;

  double tau() const noexcept { return tau_; }
  void set_tau(double tau);

  bool shared_micro() const noexcept { return options_.shared_micro; }
  /// Micro parameters used by block b (0-based).
  const MicroArchParams& micro(std::size_t block) const;
  MicroArchParams& micro(std::size_t block);
  std::size_t micro_param_sets() const noexcept { return micro_.size(); }
  MacroArchParams& macro() { return macro_; }
  const MacroArchParams& macro() const { return macro_; }

  Dense& embedding() { return embedding_; }
  Dense& head() { return head_; }
  std::vector<SuperBlock>& blocks() { return blocks_; }
  const GraphContext& graph() const { return graph_; }

  /// Block inputs for block j (1-based) given the embedding and earlier block outputs.
  ag::Var block_input(std::size_t j, const ag::Var& embedded, const std::vector<ag::Var>& outputs) const;

  /// Mean over all alpha edges of max_o softmax(alpha / tau)_o.
  double sharpness() const;

 private:
  NetworkSpec spec_;
  GraphContext graph_;
  SuperNetOptions options_;
  double tau_ = 1.0;
  Dense embedding_;
  std::vector<SuperBlock> blocks_;
  std::vector<MicroArchParams> micro_;
  MacroArchParams macro_;
  Dense head_;
};

}  // namespace stnas
