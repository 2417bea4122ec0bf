#pragma once

// Spatio-temporal operators over hidden tensors [B, N, T, D].
//
// Temporal operators act on each series independently along T; spatial
// operators act on each timestamp independently across the N nodes. Every
// operator is shape preserving. Searchable operators are GDCC, INF_T, DGCN,
// INF_S, ZERO and IDENTITY; CHEBY_GCN and the dense TRANSFORMER variants
// exist only for the operator comparison harness.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "stnas/autograd.hpp"
#include "stnas/nn.hpp"

namespace stnas {

enum class OperatorKind {
  GDCC,
  INF_T,
  DGCN,
  INF_S,
  ZERO,
  IDENTITY,
  CHEBY_GCN,
  TRANSFORMER_T,
  TRANSFORMER_S,
};

std::string_view to_string(OperatorKind kind);
/// Throws std::invalid_argument naming the tag when unknown.
OperatorKind operator_from_string(std::string_view tag);

/// The searchable set, in mixing/derivation index order.
const std::array<OperatorKind, 6>& searchable_operators();
std::optional<std::size_t> searchable_index(OperatorKind kind);
bool is_parametric(OperatorKind kind);

struct OperatorHyper {
  std::int64_t kernel_size = 2;
  std::int64_t dilation = 1;
  std::int64_t diffusion_order = 2;
  /// Number of Chebyshev terms T_0 .. T_{cheby_terms-1}.
  std::int64_t cheby_terms = 3;
  std::int64_t heads = 1;
  double sampling_factor = 1.0;
};

/// Constant graph operators shared by all spatial operators of a model.
struct GraphContext {
  std::vector<Tensor> supports;  // [D_O^-1 A, D_I^-1 A^T]
  std::vector<Tensor> chebyshev;  // T_k(L~), k = 0 .. cheby_terms-1 (may be empty)

  static GraphContext from_adjacency(const Tensor& adjacency, std::int64_t cheby_terms);
  std::int64_t n_nodes() const { return supports.empty() ? 0 : supports.front().dim(0); }
};

struct GdccWeights {
  ag::Var w_filter;  // [k, D, D]
  ag::Var b_filter;  // [D]
  ag::Var w_gate;    // [k, D, D]
  ag::Var b_gate;    // [D]
  std::int64_t dilation = 1;
};

struct AttentionWeights {
  ag::Var wq, wk, wv;  // [D, D]
  std::int64_t heads = 1;
  double sampling_factor = 1.0;
  std::uint64_t seed = 0;
};

struct DiffusionWeights {
  std::vector<ag::Var> forward_hops;   // K + 1 matrices [D, D]
  std::vector<ag::Var> backward_hops;  // K + 1 matrices [D, D]
};

struct ChebyWeights {
  std::vector<ag::Var> terms;  // [D, D] per Chebyshev term
};

ag::Var zero_forward(const ag::Var& z);
ag::Var identity_forward(const ag::Var& z);
ag::Var gdcc_forward(const GdccWeights& w, const ag::Var& z);
ag::Var inf_t_forward(const AttentionWeights& w, const ag::Var& z);
ag::Var inf_s_forward(const AttentionWeights& w, const ag::Var& z);
ag::Var transformer_t_forward(const AttentionWeights& w, const ag::Var& z);
ag::Var transformer_s_forward(const AttentionWeights& w, const ag::Var& z);
ag::Var dgcn_forward(const DiffusionWeights& w, const ag::Var& z, const std::vector<Tensor>& supports);
ag::Var cheby_gcn_forward(const ChebyWeights& w, const ag::Var& z, const std::vector<Tensor>& chebyshev);

/// max(1, ceil(c * ln(len))).
std::int64_t sparse_query_count(std::int64_t len, double factor);

/// Query selection flags ([G][head][L]) for sparse attention; empty when every query is kept.
///
/// For each group and head, u keys are drawn without replacement from a
/// stream seeded by (seed, group, head); each query is scored by the max
/// minus the mean of its scaled dot products with those keys and the u
/// highest-scoring queries are kept (ties to the lower position).
std::vector<std::uint8_t> select_sparse_queries(const Tensor& q, const Tensor& k, std::int64_t heads, double factor,
                                                std::uint64_t seed);

/// Scaled normalized Laplacian 2L/lambda_max - I of the symmetrized graph.
Tensor scaled_laplacian(const Tensor& adjacency);
/// Largest eigenvalue of a symmetric matrix by power iteration (tolerance 1e-4, at most 100 iterations).
double power_iteration_lambda_max(const Tensor& sym);
/// T_0 = I, T_1 = L~, T_k = 2 L~ T_{k-1} - T_{k-2}.
std::vector<Tensor> chebyshev_basis(const Tensor& scaled_lap, std::int64_t terms);

/// One operator with its weights. Parametric operators run as ReLU -> op -> BatchNorm.
class Operator {
 public:
  Operator(OperatorKind kind, std::int64_t channels, const OperatorHyper& hyper, Initializer& init);

  OperatorKind kind() const noexcept { return kind_; }
  std::int64_t channels() const noexcept { return channels_; }

  ag::Var forward(const ag::Var& z, const GraphContext& graph, bool training);
  /// The bare operator without the activation/normalization wrapper.
  ag::Var core_forward(const ag::Var& z, const GraphContext& graph) const;

  void collect_params(const std::string& prefix, ParamList& out) const;
  void collect_buffers(const std::string& prefix, BufferList& out);

  GdccWeights& gdcc() { return gdcc_; }
  AttentionWeights& attention() { return attention_; }
  DiffusionWeights& diffusion() { return diffusion_; }
  ChebyWeights& cheby() { return cheby_; }

 private:
  OperatorKind kind_;
  std::int64_t channels_;
  GdccWeights gdcc_;
  AttentionWeights attention_;
  DiffusionWeights diffusion_;
  ChebyWeights cheby_;
  BatchNorm norm_;
};

}  // namespace stnas
