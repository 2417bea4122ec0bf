#include "stnas/derivation.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <stdexcept>

#include "stnas/supernet.hpp"

namespace stnas {

namespace {

std::vector<double> to_vector(const ag::Var& v) { return v.value().storage(); }

std::size_t argmax_lowest(std::span<const double> w, std::optional<std::size_t> excluded = std::nullopt) {
  std::size_t best = w.size();
  for (std::size_t o = 0; o < w.size(); ++o) {
    if (excluded && *excluded == o) continue;
    if (best == w.size() || w[o] > w[best]) best = o;
  }
  return best;
}

}  // namespace

std::vector<double> softmax_values(std::span<const double> v, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("softmax: temperature must be positive");
  std::vector<double> out(v.begin(), v.end());
  if (out.empty()) return out;
  double mx = -INFINITY;
  for (double x : out) mx = std::max(mx, x / tau);
  double z = 0.0;
  for (double& x : out) {
    x = std::exp(x / tau - mx);
    z += x;
  }
  for (double& x : out) x /= z;
  return out;
}

double edge_weight(std::span<const double> alpha_ij, std::span<const double> beta_j, std::size_t i, std::size_t o) {
  if (i >= beta_j.size()) throw std::out_of_range("edge_weight: source index out of range");
  if (o >= alpha_ij.size()) throw std::out_of_range("edge_weight: operator index out of range");
  return softmax_values(beta_j)[i] * softmax_values(alpha_ij)[o];
}

BlockGenotype derive_st_block(const MicroValues& micro, DerivationOptions options) {
  const std::int64_t m = micro.micro_nodes();
  if (m < 2) throw std::invalid_argument("derive_st_block: need M >= 2");
  const auto& ops = searchable_operators();
  const auto zero_index = searchable_index(OperatorKind::ZERO);
  BlockGenotype block;
  for (std::int64_t j = 1; j < m; ++j) {
    const auto sb = softmax_values(micro.beta[static_cast<std::size_t>(j - 1)]);
    std::vector<GenotypeEdge> edges;
    {
      const auto sa = softmax_values(micro.alpha[micro_edge_index(j - 1, j)]);
      const std::size_t o = argmax_lowest(sa, options.forbid_zero_on_mandatory_edge ? zero_index : std::nullopt);
      edges.push_back({j - 1, ops[o]});
    }
    if (j >= 2) {
      std::int64_t best_src = -1;
      std::size_t best_op = 0;
      double best_w = -1.0;
      for (std::int64_t i = 0; i <= j - 2; ++i) {
        const auto sa = softmax_values(micro.alpha[micro_edge_index(i, j)]);
        const std::size_t o = argmax_lowest(sa);
        const double w = sb[static_cast<std::size_t>(i)] * sa[o];
        if (best_src < 0 || w > best_w || (w == best_w && o < best_op)) {
          best_src = i;
          best_op = o;
          best_w = w;
        }
      }
      edges.push_back({best_src, ops[best_op]});
    }
    block.nodes.push_back(std::move(edges));
  }
  return block;
}

std::vector<BackboneEdge> derive_backbone(const MacroValues& gamma, std::int64_t blocks) {
  if (blocks < 1) throw std::invalid_argument("derive_backbone: need B >= 1");
  if (static_cast<std::int64_t>(gamma.size()) != blocks - 1) throw std::invalid_argument("derive_backbone: gamma count");
  std::vector<BackboneEdge> out{{kEmbed, 1}};
  for (std::int64_t j = 2; j <= blocks; ++j) {
    const auto& g = gamma[static_cast<std::size_t>(j - 2)];
    if (static_cast<std::int64_t>(g.size()) != j) throw std::invalid_argument("derive_backbone: gamma length");
    out.push_back({static_cast<std::int64_t>(argmax_lowest(g)), j});
  }
  return out;
}

MicroValues micro_values(const SuperNet& net, std::size_t block) {
  const auto& p = net.micro(block);
  MicroValues v;
  for (const auto& a : p.alpha) v.alpha.push_back(to_vector(a));
  for (const auto& b : p.beta) v.beta.push_back(to_vector(b));
  return v;
}

MacroValues macro_values(const SuperNet& net) {
  MacroValues v;
  for (const auto& g : net.macro().gamma) v.push_back(to_vector(g));
  return v;
}

bool tempered_ranking_agrees(const MicroValues& micro, double tau) {
  for (const auto& a : micro.alpha) {
    if (argmax_lowest(softmax_values(a, tau)) != argmax_lowest(softmax_values(a))) return false;
  }
  return true;
}

Genotype derive_genotype(const SuperNet& net, const std::string& dataset, DerivationOptions options) {
  const NetworkSpec& spec = net.spec();
  Genotype g;
  g.meta.micro_nodes = spec.micro_nodes;
  g.meta.blocks = spec.blocks;
  g.meta.hidden = spec.hidden;
  g.meta.dataset = dataset;
  for (std::int64_t b = 0; b < spec.blocks; ++b) {
    const MicroValues mv = micro_values(net, static_cast<std::size_t>(b));
    if (!tempered_ranking_agrees(mv, net.tau())) {
      std::cerr << "warning: tempered and untempered operator rankings differ in block " << (b + 1) << '\n';
    }
    g.blocks.push_back(derive_st_block(mv, options));
  }
  g.backbone = net.shared_micro() ? chain_backbone(spec.blocks) : derive_backbone(macro_values(net), spec.blocks);
  g.validate();
  return g;
}

DiscreteNet::DiscreteNet(const Genotype& genotype, const NetworkSpec& spec, GraphContext graph, std::uint64_t seed,
                         bool allow_reference_ops)
    : genotype_(genotype), spec_(spec), graph_(std::move(graph)) {
  genotype_.validate(allow_reference_ops);
  spec_.micro_nodes = genotype_.meta.micro_nodes;
  spec_.blocks = genotype_.meta.blocks;
  spec_.hidden = genotype_.meta.hidden;
  if (graph_.n_nodes() != spec_.n_nodes) throw std::invalid_argument("graph size does not match node count");
  Initializer init(seed);
  embedding_ = Dense(spec_.n_features, spec_.hidden, init);
  for (const auto& bg : genotype_.blocks) {
    Block block;
    for (const auto& edges : bg.nodes) {
      std::vector<Operator> ops;
      for (const auto& e : edges) ops.emplace_back(e.op, spec_.hidden, spec_.hyper, init);
      block.ops.push_back(std::move(ops));
    }
    blocks_.push_back(std::move(block));
  }
  head_ = Dense(spec_.hidden, spec_.output_len, init);
}

ag::Var DiscreteNet::block_forward(std::size_t b, const ag::Var& h0, bool training) {
  const auto& bg = genotype_.blocks[b];
  std::vector<ag::Var> h{h0};
  for (std::size_t k = 0; k < bg.nodes.size(); ++k) {
    std::vector<ag::Var> terms;
    for (std::size_t e = 0; e < bg.nodes[k].size(); ++e) {
      terms.push_back(blocks_[b].ops[k][e].forward(h[static_cast<std::size_t>(bg.nodes[k][e].src)], graph_, training));
    }
    h.push_back(ag::sum_n(terms));
  }
  return spec_.residual ? ag::add(h.back(), h0) : h.back();
}

ag::Var DiscreteNet::forward(const Tensor& inputs, bool training) {
  if (inputs.rank() != 4 || inputs.dim(1) != spec_.n_nodes || inputs.dim(3) != spec_.n_features) {
    throw std::invalid_argument("model: input shape " + shape_str(inputs.shape()) + " does not match network");
  }
  std::vector<std::int64_t> src_of(static_cast<std::size_t>(spec_.blocks + 1), kEmbed);
  for (const auto& e : genotype_.backbone) src_of[static_cast<std::size_t>(e.dst)] = e.src;
  ag::Var z = embedding_.forward(ag::Var(inputs));
  std::vector<ag::Var> outputs;
  for (std::int64_t j = 1; j <= spec_.blocks; ++j) {
    const std::int64_t src = src_of[static_cast<std::size_t>(j)];
    const ag::Var& in = src == kEmbed ? z : outputs[static_cast<std::size_t>(src - 1)];
    outputs.push_back(block_forward(static_cast<std::size_t>(j - 1), in, training));
  }
  return head_forward(head_, ag::sum_n(outputs));
}

ParamList DiscreteNet::weights() const {
  ParamList out;
  embedding_.collect("embedding.", out);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    for (std::size_t k = 0; k < blocks_[b].ops.size(); ++k) {
      for (std::size_t e = 0; e < blocks_[b].ops[k].size(); ++e) {
        blocks_[b].ops[k][e].collect_params(
            "block" + std::to_string(b + 1) + ".node" + std::to_string(k + 1) + ".edge" + std::to_string(e) + ".", out);
      }
    }
  }
  head_.collect("head.", out);
  return out;
}

BufferList DiscreteNet::buffers() {
  BufferList out;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    for (std::size_t k = 0; k < blocks_[b].ops.size(); ++k) {
      for (std::size_t e = 0; e < blocks_[b].ops[k].size(); ++e) {
        blocks_[b].ops[k][e].collect_buffers(
            "block" + std::to_string(b + 1) + ".node" + std::to_string(k + 1) + ".edge" + std::to_string(e) + ".", out);
      }
    }
  }
  return out;
}

std::unique_ptr<DiscreteNet> build_discrete_model(const Genotype& genotype, NetworkSpec spec, GraphContext graph,
                                                  std::uint64_t seed, bool allow_reference_ops) {
  genotype.validate(allow_reference_ops);
  spec.partial_channel_fraction = 1.0;
  return std::make_unique<DiscreteNet>(genotype, spec, std::move(graph), seed, allow_reference_ops);
}

}  // namespace stnas
