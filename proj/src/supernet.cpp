#include "stnas/supernet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace stnas {

namespace {

constexpr double kArchInitStd = 1e-3;

}  // namespace

ag::Var head_forward(const Dense& head, const ag::Var& features) {
  const std::int64_t last = features.dim(2) - 1;
  return head.forward(ag::select_axis2(ag::relu(features), last));
}

MicroArchParams MicroArchParams::random(std::int64_t micro_nodes, std::size_t n_ops, Initializer& init) {
  if (micro_nodes < 2) throw std::invalid_argument("micro-DAG needs at least 2 nodes");
  MicroArchParams p;
  for (std::int64_t j = 1; j < micro_nodes; ++j)
    for (std::int64_t i = 0; i < j; ++i) p.alpha.push_back(init.normal(Shape{static_cast<std::int64_t>(n_ops)}, kArchInitStd));
  for (std::int64_t j = 1; j < micro_nodes; ++j) p.beta.push_back(init.normal(Shape{j}, kArchInitStd));
  return p;
}

std::int64_t MicroArchParams::micro_nodes() const { return static_cast<std::int64_t>(beta.size()) + 1; }

void MicroArchParams::collect(const std::string& prefix, ParamList& out) const {
  const std::int64_t m = micro_nodes();
  for (std::int64_t j = 1; j < m; ++j)
    for (std::int64_t i = 0; i < j; ++i)
      out.push_back({prefix + "alpha_" + std::to_string(i) + "_" + std::to_string(j), alpha[micro_edge_index(i, j)]});
  for (std::int64_t j = 1; j < m; ++j) out.push_back({prefix + "beta_" + std::to_string(j), beta[static_cast<std::size_t>(j - 1)]});
}

MacroArchParams MacroArchParams::random(std::int64_t blocks, Initializer& init) {
  MacroArchParams p;
  for (std::int64_t j = 2; j <= blocks; ++j) p.gamma.push_back(init.normal(Shape{j}, kArchInitStd));
  return p;
}

void MacroArchParams::collect(const std::string& prefix, ParamList& out) const {
  for (std::size_t k = 0; k < gamma.size(); ++k) out.push_back({prefix + "gamma_" + std::to_string(k + 2), gamma[k]});
}

double anneal_temperature(double tau, double factor, double floor) {
  if (!(factor > 0.0 && factor < 1.0)) throw std::invalid_argument("anneal factor must be in (0, 1)");
  if (!(floor > 0.0)) throw std::invalid_argument("temperature floor must be positive");
  return std::max(tau * factor, floor);
}

std::uint64_t count_micro_space(std::int64_t micro_nodes, std::uint64_t n_ops) {
  const std::int64_t edges = micro_nodes * (micro_nodes - 1) / 2;
  std::uint64_t total = 1;
  for (std::int64_t e = 0; e < edges; ++e) total *= n_ops;
  return total;
}

std::vector<std::int64_t> channel_shuffle_permutation(std::int64_t channels, std::int64_t mixed) {
  std::vector<std::int64_t> perm(static_cast<std::size_t>(channels));
  if (mixed <= 0 || mixed >= channels) {
    std::iota(perm.begin(), perm.end(), 0);
    return perm;
  }
  if (channels % mixed == 0) {
    // groups of `mixed` channels, interleaved
    const std::int64_t groups = channels / mixed;
    for (std::int64_t g = 0; g < groups; ++g)
      for (std::int64_t i = 0; i < mixed; ++i) perm[static_cast<std::size_t>(i * groups + g)] = g * mixed + i;
  } else {
    for (std::int64_t c = 0; c < channels; ++c) perm[static_cast<std::size_t>(c)] = (c + mixed) % channels;
  }
  return perm;
}

ag::Var node_aggregate(const std::vector<ag::Var>& transforms, const ag::Var& beta) {
  if (beta.value().size() != transforms.size()) {
    throw std::invalid_argument("node_aggregate: beta length " + std::to_string(beta.value().size()) + " != " +
                                std::to_string(transforms.size()) + " predecessors");
  }
  return ag::weighted_sum(transforms, ag::softmax(beta, 1.0));
}

MixedEdge::MixedEdge(std::int64_t channels, double partial_fraction, const OperatorHyper& hyper, Initializer& init)
    : channels_(channels) {
  if (!(partial_fraction > 0.0 && partial_fraction <= 1.0)) {
    throw std::invalid_argument("partial channel fraction must be in (0, 1]");
  }
  mixed_ = std::clamp<std::int64_t>(
      static_cast<std::int64_t>(std::ceil(partial_fraction * static_cast<double>(channels) - 1e-9)), 1, channels);
  for (OperatorKind kind : searchable_operators()) ops_.emplace_back(kind, mixed_, hyper, init);
  shuffle_ = channel_shuffle_permutation(channels_, mixed_);
}

ag::Var MixedEdge::forward(const ag::Var& h, const ag::Var& weights, const GraphContext& graph, bool training) {
  const bool partial = mixed_ < channels_;
  ag::Var x = partial ? ag::slice_last(h, 0, mixed_) : h;
  std::vector<ag::Var> outs;
  outs.reserve(ops_.size());
  for (auto& op : ops_) outs.push_back(op.kind() == OperatorKind::ZERO ? ag::Var() : op.forward(x, graph, training));
  ag::Var mixed = ag::weighted_sum(outs, weights);
  if (!partial) return mixed;
  ag::Var rest = ag::slice_last(h, mixed_, channels_ - mixed_);
  return ag::permute_last(ag::concat_last({mixed, rest}), shuffle_);
}

void MixedEdge::collect_params(const std::string& prefix, ParamList& out) const {
  for (const auto& op : ops_) op.collect_params(prefix + std::string(to_string(op.kind())) + ".", out);
}

void MixedEdge::collect_buffers(const std::string& prefix, BufferList& out) {
  for (auto& op : ops_) op.collect_buffers(prefix + std::string(to_string(op.kind())) + ".", out);
}

SuperBlock::SuperBlock(std::int64_t micro_nodes, std::int64_t channels, double partial_fraction,
                       const OperatorHyper& hyper, bool residual, Initializer& init)
    : micro_nodes_(micro_nodes), residual_(residual) {
  if (micro_nodes < 2) throw std::invalid_argument("micro-DAG needs at least 2 nodes");
  for (std::int64_t j = 1; j < micro_nodes; ++j)
    for (std::int64_t i = 0; i < j; ++i) edges_.emplace_back(channels, partial_fraction, hyper, init);
}

ag::Var SuperBlock::forward(const ag::Var& h0, const MicroArchParams& arch, double tau, const GraphContext& graph,
                            bool training) {
  if (arch.micro_nodes() != micro_nodes_) throw std::invalid_argument("micro parameters do not match block size");
  std::vector<ag::Var> h{h0};
  for (std::int64_t j = 1; j < micro_nodes_; ++j) {
    std::vector<ag::Var> transforms;
    for (std::int64_t i = 0; i < j; ++i) {
      const std::size_t e = micro_edge_index(i, j);
      transforms.push_back(edges_[e].forward(h[static_cast<std::size_t>(i)], ag::softmax(arch.alpha[e], tau), graph, training));
    }
    h.push_back(node_aggregate(transforms, arch.beta[static_cast<std::size_t>(j - 1)]));
  }
  return residual_ ? ag::add(h.back(), h0) : h.back();
}

void SuperBlock::collect_params(const std::string& prefix, ParamList& out) const {
  for (std::int64_t j = 1; j < micro_nodes_; ++j)
    for (std::int64_t i = 0; i < j; ++i)
      edges_[micro_edge_index(i, j)].collect_params(prefix + "edge_" + std::to_string(i) + "_" + std::to_string(j) + ".", out);
}

void SuperBlock::collect_buffers(const std::string& prefix, BufferList& out) {
  for (std::int64_t j = 1; j < micro_nodes_; ++j)
    for (std::int64_t i = 0; i < j; ++i)
      edges_[micro_edge_index(i, j)].collect_buffers(prefix + "edge_" + std::to_string(i) + "_" + std::to_string(j) + ".", out);
}

SuperNet::SuperNet(const NetworkSpec& spec, GraphContext graph, std::uint64_t seed, SuperNetOptions options)
    : spec_(spec), graph_(std::move(graph)), options_(options) {
  if (spec_.blocks < 1) throw std::invalid_argument("supernet needs at least one block");
  if (graph_.n_nodes() != spec_.n_nodes) throw std::invalid_argument("graph size does not match node count");
  Initializer init(seed);
  embedding_ = Dense(spec_.n_features, spec_.hidden, init);
  for (std::int64_t b = 0; b < spec_.blocks; ++b)
    blocks_.emplace_back(spec_.micro_nodes, spec_.hidden, spec_.partial_channel_fraction, spec_.hyper, spec_.residual, init);
  head_ = Dense(spec_.hidden, spec_.output_len, init);
  const std::size_t sets = options_.shared_micro ? 1 : static_cast<std::size_t>(spec_.blocks);
  for (std::size_t s = 0; s < sets; ++s)
    micro_.push_back(MicroArchParams::random(spec_.micro_nodes, searchable_operators().size(), init));
  if (!options_.shared_micro) macro_ = MacroArchParams::random(spec_.blocks, init);
}

void SuperNet::set_tau(double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("temperature must be positive");
  tau_ = tau;
}

const MicroArchParams& SuperNet::micro(std::size_t block) const { return micro_[options_.shared_micro ? 0 : block]; }
MicroArchParams& SuperNet::micro(std::size_t block) { return micro_[options_.shared_micro ? 0 : block]; }

ag::Var SuperNet::block_input(std::size_t j, const ag::Var& embedded, const std::vector<ag::Var>& outputs) const {
  if (j == 1) return embedded;
  if (options_.shared_micro) return outputs[j - 2];
  std::vector<ag::Var> preds{embedded};
  preds.insert(preds.end(), outputs.begin(), outputs.begin() + static_cast<std::ptrdiff_t>(j - 1));
  return ag::weighted_sum(preds, ag::softmax(macro_.gamma[j - 2], 1.0));
}

ag::Var SuperNet::forward(const Tensor& inputs, bool training) {
  if (inputs.rank() != 4 || inputs.dim(1) != spec_.n_nodes || inputs.dim(3) != spec_.n_features) {
    throw std::invalid_argument("supernet: input shape " + shape_str(inputs.shape()) + " does not match network");
  }
  ag::Var z = embedding_.forward(ag::Var(inputs));
  std::vector<ag::Var> outputs;
  for (std::size_t j = 1; j <= blocks_.size(); ++j) {
    ag::Var in = block_input(j, z, outputs);
    outputs.push_back(blocks_[j - 1].forward(in, micro(j - 1), tau_, graph_, training));
  }
  return head_forward(head_, ag::sum_n(outputs));
}

ParamList SuperNet::weights() const {
  ParamList out;
  embedding_.collect("embedding.", out);
  for (std::size_t b = 0; b < blocks_.size(); ++b) blocks_[b].collect_params("block" + std::to_string(b + 1) + ".", out);
  head_.collect("head.", out);
  return out;
}

ParamList SuperNet::arch_params() const {
  ParamList out;
  for (std::size_t s = 0; s < micro_.size(); ++s) micro_[s].collect("arch.block" + std::to_string(s + 1) + ".", out);
  macro_.collect("arch.", out);
  return out;
}

BufferList SuperNet::buffers() {
  BufferList out;
  for (std::size_t b = 0; b < blocks_.size(); ++b) blocks_[b].collect_buffers("block" + std::to_string(b + 1) + ".", out);
  return out;
}

double SuperNet::sharpness() const {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& m : micro_) {
    for (const auto& a : m.alpha) {
      const Tensor w = ag::softmax(a, tau_).value();
      total += *std::max_element(w.values().begin(), w.values().end());
      ++count;
    }
  }
  return count ? total / static_cast<double>(count) : 1.0;
}

}  // namespace stnas
