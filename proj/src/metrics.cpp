#include "stnas/metrics.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "stnas/nn.hpp"

namespace stnas {

namespace {

void check_sizes(std::span<const double> pred, std::span<const double> truth, Mask mask) {
  if (pred.size() != truth.size()) throw MetricError("metrics: prediction and truth sizes differ");
  if (!mask.empty() && mask.size() != truth.size()) throw MetricError("metrics: mask size differs from truth");
}

bool keep(Mask mask, std::size_t i) { return mask.empty() || mask[i] != 0; }

}  // namespace

double mae(std::span<const double> pred, std::span<const double> truth, Mask mask) {
  check_sizes(pred, truth, mask);
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!keep(mask, i)) continue;
    total += std::abs(pred[i] - truth[i]);
    ++n;
  }
  if (n == 0) throw MetricError("no valid entries");
  return total / static_cast<double>(n);
}

double rmse(std::span<const double> pred, std::span<const double> truth, Mask mask) {
  check_sizes(pred, truth, mask);
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!keep(mask, i)) continue;
    const double d = pred[i] - truth[i];
    total += d * d;
    ++n;
  }
  if (n == 0) throw MetricError("no valid entries");
  return std::sqrt(total / static_cast<double>(n));
}

double mape(std::span<const double> pred, std::span<const double> truth, Mask mask) {
  check_sizes(pred, truth, mask);
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!keep(mask, i) || truth[i] == 0.0) continue;
    total += std::abs(pred[i] - truth[i]) / std::abs(truth[i]);
    ++n;
  }
  if (n == 0) throw MetricError("no valid entries");
  return 100.0 * total / static_cast<double>(n);
}

double rrse(std::span<const double> pred, std::span<const double> truth) {
  check_sizes(pred, truth, {});
  if (truth.empty()) throw MetricError("no valid entries");
  double mean = 0.0;
  for (double y : truth) mean += y;
  mean /= static_cast<double>(truth.size());
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    num += (pred[i] - truth[i]) * (pred[i] - truth[i]);
    den += (truth[i] - mean) * (truth[i] - mean);
  }
  if (den == 0.0) throw MetricError("rrse: truth has zero variance");
  return std::sqrt(num / den);
}

double corr(std::span<const double> pred, std::span<const double> truth, std::int64_t n_nodes) {
  check_sizes(pred, truth, {});
  if (n_nodes < 1 || truth.size() % static_cast<std::size_t>(n_nodes) != 0) {
    throw MetricError("corr: size is not a multiple of the node count");
  }
  const auto nodes = static_cast<std::size_t>(n_nodes);
  const std::size_t windows = truth.size() / nodes;
  if (windows < 2) throw MetricError("corr: need at least 2 windows");
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t n = 0; n < nodes; ++n) {
    double mp = 0.0, my = 0.0;
    for (std::size_t s = 0; s < windows; ++s) {
      mp += pred[s * nodes + n];
      my += truth[s * nodes + n];
    }
    mp /= static_cast<double>(windows);
    my /= static_cast<double>(windows);
    double cov = 0.0, vp = 0.0, vy = 0.0;
    for (std::size_t s = 0; s < windows; ++s) {
      const double dp = pred[s * nodes + n] - mp;
      const double dy = truth[s * nodes + n] - my;
      cov += dp * dy;
      vp += dp * dp;
      vy += dy * dy;
    }
    if (vy == 0.0) continue;
    // a constant forecast has no defined correlation; count it as 0
    total += vp == 0.0 ? 0.0 : cov / std::sqrt(vp * vy);
    ++used;
  }
  if (used == 0) throw MetricError("corr: every node has zero variance");
  return total / static_cast<double>(used);
}

std::vector<std::uint8_t> nonzero_mask(std::span<const double> truth) {
  std::vector<std::uint8_t> m(truth.size());
  for (std::size_t i = 0; i < truth.size(); ++i) m[i] = truth[i] != 0.0;
  return m;
}

bool MetricsReport::consistent() const {
  for (const auto& r : rows) {
    if (r.mae > r.rmse * (1.0 + 1e-12)) return false;
  }
  return true;
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json doc;
  doc["dataset"] = dataset;
  doc["genotype_hash"] = genotype_hash;
  doc["mode"] = mode;
  doc["n_windows"] = n_windows;
  doc["mape_masks_zeros"] = mape_masks_zeros;
  doc["mask_zeros_all"] = mask_zeros_all;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json jr;
    if (r.horizon == 0) {
      jr["horizon"] = "average";
    } else {
      jr["horizon"] = r.horizon;
    }
    jr["mae"] = r.mae;
    jr["rmse"] = r.rmse;
    jr["mape"] = r.mape;
    arr.push_back(jr);
  }
  doc["rows"] = arr;
  if (rrse) doc["rrse"] = *rrse;
  if (corr) doc["corr"] = *corr;
  return doc.dump(2);
}

MetricsReport metrics_report_from_json(const std::string& text) {
  const auto doc = nlohmann::json::parse(text);
  MetricsReport r;
  r.dataset = doc.at("dataset").get<std::string>();
  r.genotype_hash = doc.at("genotype_hash").get<std::string>();
  r.mode = doc.at("mode").get<std::string>();
  r.n_windows = doc.at("n_windows").get<std::int64_t>();
  r.mape_masks_zeros = doc.at("mape_masks_zeros").get<bool>();
  r.mask_zeros_all = doc.at("mask_zeros_all").get<bool>();
  for (const auto& jr : doc.at("rows")) {
    MetricsRow row;
    row.horizon = jr.at("horizon").is_string() ? 0 : jr.at("horizon").get<std::int64_t>();
    row.mae = jr.at("mae").get<double>();
    row.rmse = jr.at("rmse").get<double>();
    row.mape = jr.at("mape").get<double>();
    r.rows.push_back(row);
  }
  if (doc.contains("rrse")) r.rrse = doc["rrse"].get<double>();
  if (doc.contains("corr")) r.corr = doc["corr"].get<double>();
  return r;
}

std::string MetricsReport::to_table() const {
  std::ostringstream os;
  os << "dataset " << dataset << "  windows " << n_windows;
  if (!genotype_hash.empty()) os << "  genotype " << genotype_hash;
  os << '\n';
  os << std::left << std::setw(10) << "horizon" << std::right << std::setw(12) << "MAE" << std::setw(12) << "RMSE"
     << std::setw(12) << "MAPE(%)" << '\n';
  os << std::fixed << std::setprecision(4);
  for (const auto& r : rows) {
    os << std::left << std::setw(10) << (r.horizon == 0 ? std::string("average") : std::to_string(r.horizon))
       << std::right << std::setw(12) << r.mae << std::setw(12) << r.rmse << std::setw(12) << r.mape << '\n';
  }
  if (rrse) os << "RRSE " << *rrse << '\n';
  if (corr) os << "CORR " << *corr << '\n';
  return os.str();
}

std::vector<double> predict(ForecastModel& model, const WindowSet& windows, const Scaler& scaler,
                            std::int64_t batch_size) {
  const std::int64_t s_count = windows.count();
  const std::int64_t n = windows.n_nodes();
  const std::int64_t q = model.spec().output_len;
  std::vector<double> out(static_cast<std::size_t>(s_count * n * q));
  const ParamList params = model.weights();
  std::vector<bool> was(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) was[i] = params[i].var.requires_grad();
  set_requires_grad(params, false);
  try {
    for (std::int64_t b = 0; b < s_count; b += batch_size) {
      const std::int64_t len = std::min(batch_size, s_count - b);
      std::vector<std::int64_t> idx(static_cast<std::size_t>(len));
      for (std::int64_t i = 0; i < len; ++i) idx[static_cast<std::size_t>(i)] = b + i;
      const Tensor y = model.forward(windows.gather_inputs(idx), false).value();
      for (std::size_t i = 0; i < y.size(); ++i) {
        out[static_cast<std::size_t>(b * n * q) + i] = scaler.inverse_transform(y[i], 0);
      }
    }
  } catch (...) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i].var.node()->requires_grad = was[i];
    throw;
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i].var.node()->requires_grad = was[i];
  return out;
}

MetricsReport evaluate_predictions(std::span<const double> pred, const WindowSet& windows, const EvalOptions& options) {
  const std::int64_t s_count = windows.count();
  const std::int64_t n = windows.n_nodes();
  const std::int64_t q = windows.target_len();
  if (pred.size() != windows.targets.size()) throw MetricError("metrics: forecast length does not match windows");
  for (std::int64_t h : options.horizons) {
    if (h < 1 || h > q) {
      throw MetricError("horizon " + std::to_string(h) + " outside forecast length " + std::to_string(q));
    }
  }
  const auto truth = windows.targets.values();
  MetricsReport r;
  r.mode = to_string(windows.mode);
  r.n_windows = s_count;
  r.mask_zeros_all = options.mask_zeros_all;

  auto row_for = [&](std::span<const double> p, std::span<const double> y, std::int64_t horizon) {
    const auto nz = nonzero_mask(y);
    const Mask m = options.mask_zeros_all ? Mask(nz) : Mask();
    return MetricsRow{horizon, mae(p, y, m), rmse(p, y, m), mape(p, y)};
  };
  for (std::int64_t h : options.horizons) {
    std::vector<double> p, y;
    for (std::int64_t s = 0; s < s_count; ++s) {
      for (std::int64_t k = 0; k < n; ++k) {
        const auto i = static_cast<std::size_t>((s * n + k) * q + h - 1);
        p.push_back(pred[i]);
        y.push_back(truth[i]);
      }
    }
    r.rows.push_back(row_for(p, y, h));
  }
  r.rows.push_back(row_for(pred, truth, 0));
  if (q == 1) {
    r.rrse = rrse(pred, truth);
    r.corr = corr(pred, truth, n);
  }
  return r;
}

MetricsReport evaluate(ForecastModel& model, const WindowSet& windows, const Scaler& scaler, const EvalOptions& options) {
  if (model.spec().output_len != windows.target_len()) {
    throw MetricError("model forecast length does not match the windows");
  }
  for (std::int64_t h : options.horizons) {
    if (h < 1 || h > windows.target_len()) {
      throw MetricError("horizon " + std::to_string(h) + " outside forecast length " + std::to_string(windows.target_len()));
    }
  }
  const auto pred = predict(model, windows, scaler, options.batch_size);
  return evaluate_predictions(pred, windows, options);
}

}  // namespace stnas
