#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "stnas/data.hpp"
#include "stnas/model.hpp"

namespace stnas {

class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Optional validity mask: empty means every entry counts, otherwise mask[i] != 0 keeps entry i.
using Mask = std::span<const std::uint8_t>;

double mae(std::span<const double> pred, std::span<const double> truth, Mask mask = {});
double rmse(std::span<const double> pred, std::span<const double> truth, Mask mask = {});
/// Percentage; entries with zero truth are always excluded.
double mape(std::span<const double> pred, std::span<const double> truth, Mask mask = {});
/// sqrt(sum (p - y)^2 / sum (y - mean y)^2) over every entry.
double rrse(std::span<const double> pred, std::span<const double> truth);
/// Mean over nodes of the Pearson correlation across windows; data laid out [windows, n_nodes].
double corr(std::span<const double> pred, std::span<const double> truth, std::int64_t n_nodes);

/// Mask with 1 where truth != 0.
std::vector<std::uint8_t> nonzero_mask(std::span<const double> truth);

struct MetricsRow {
  std::int64_t horizon = 0;  // 1-based step; 0 for the all-step average
  double mae = 0.0;
  double rmse = 0.0;
  double mape = 0.0;
};

struct MetricsReport {
  std::string dataset;
  std::string genotype_hash;
  std::string mode;
  std::int64_t n_windows = 0;
  bool mape_masks_zeros = true;
  bool mask_zeros_all = false;
  std::vector<MetricsRow> rows;  // requested horizons in order, then the average row
  std::optional<double> rrse;
  std::optional<double> corr;

  const MetricsRow& average() const { return rows.back(); }
  /// True when MAE <= RMSE on every row.
  bool consistent() const;
  std::string to_json() const;
  std::string to_table() const;
};

MetricsReport metrics_report_from_json(const std::string& text);

struct EvalOptions {
  std::vector<std::int64_t> horizons{3, 6, 12};
  /// Also drop zero-truth entries from MAE and RMSE.
  bool mask_zeros_all = false;
  std::int64_t batch_size = 64;
};

/// Forecasts (original units) for every window: [S, N, Q] row-major.
std::vector<double> predict(ForecastModel& model, const WindowSet& windows, const Scaler& scaler,
                            std::int64_t batch_size = 64);

/// Metrics of `model` on `windows`. Horizons beyond the forecast length raise MetricError.
MetricsReport evaluate(ForecastModel& model, const WindowSet& windows, const Scaler& scaler,
                       const EvalOptions& options = {});

/// Metrics of precomputed original-unit forecasts [S, N, Q] against windows.targets.
MetricsReport evaluate_predictions(std::span<const double> pred, const WindowSet& windows, const EvalOptions& options = {});

}  // namespace stnas
