#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "stnas/tensor.hpp"

namespace stnas {

/// Raised for malformed or inconsistent dataset input.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// N correlated series over T timestamps with F features each.
struct CtsDataset {
  Tensor values;  // [N, T, F]
  std::vector<std::int64_t> timestamps;
  std::optional<Tensor> adjacency;  // [N, N], nonnegative
  std::string name;

  std::int64_t n_nodes() const { return values.dim(0); }
  std::int64_t n_steps() const { return values.dim(1); }
  std::int64_t n_features() const { return values.dim(2); }

  /// Throws DataError if the invariants do not hold.
  void validate() const;
};

enum class ForecastMode { MultiStep, SingleStep };

std::string to_string(ForecastMode mode);
ForecastMode forecast_mode_from_string(const std::string& s);

struct WindowSet {
  Tensor inputs;   // [S, N, P, F], standardized
  Tensor targets;  // [S, N, Q or 1, 1], original units of feature 0
  std::int64_t input_len = 0;
  std::int64_t horizon = 0;
  ForecastMode mode = ForecastMode::MultiStep;
  /// Absolute timestamp index of each window's first input step.
  std::vector<std::int64_t> offsets;

  std::int64_t count() const { return inputs.empty() ? 0 : inputs.dim(0); }
  std::int64_t n_nodes() const { return inputs.dim(1); }
  std::int64_t n_features() const { return inputs.dim(3); }
  std::int64_t target_len() const { return targets.dim(2); }

  /// Windows [begin, begin + n) as a new set.
  WindowSet slice(std::int64_t begin, std::int64_t n) const;
  Tensor gather_inputs(std::span<const std::int64_t> idx) const;
  Tensor gather_targets(std::span<const std::int64_t> idx) const;
};

struct SplitSpec {
  std::array<double, 3> ratios{0.7, 0.1, 0.2};
  double pseudo_split = 0.5;

  void validate() const;
};

/// Per-feature z-score transform.
struct Scaler {
  std::vector<double> mean;
  std::vector<double> std;

  double transform(double x, std::size_t feature) const { return (x - mean[feature]) / std[feature]; }
  double inverse_transform(double z, std::size_t feature) const { return z * std[feature] + mean[feature]; }
};

struct DatasetSplits {
  WindowSet train;
  WindowSet val;
  WindowSet test;
  Scaler scaler;
};

enum class SyntheticProcess { Diffusion, Seasonal };

SyntheticProcess synthetic_process_from_string(const std::string& s);

CtsDataset load_dataset(const std::filesystem::path& dir);
void write_dataset(const CtsDataset& ds, const std::filesystem::path& dir);

CtsDataset generate_synthetic(std::int64_t n_nodes, std::int64_t n_steps, std::uint64_t seed,
                              SyntheticProcess process);

DatasetSplits split_and_window(const CtsDataset& ds, const SplitSpec& spec, std::int64_t input_len,
                               std::int64_t horizon, ForecastMode mode);

/// Chronological partition; the first part receives ceil(fraction * S) windows.
std::pair<WindowSet, WindowSet> pseudo_split(const WindowSet& train, double fraction);

/// Random-walk transition matrices [D_O^-1 A, D_I^-1 A^T]; zero-degree rows stay zero.
std::vector<Tensor> build_supports(const Tensor& adjacency);

/// Supports for a dataset; datasets without a graph get identity supports.
std::vector<Tensor> dataset_supports(const CtsDataset& ds);

/// FNV-1a over shape, values and adjacency.
std::uint64_t dataset_hash(const CtsDataset& ds);

}  // namespace stnas
