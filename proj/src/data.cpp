#include "stnas/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include <json.hpp>

#include "stnas/hash.hpp"

namespace stnas {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kLayout = "row-major N×T×F";

// Synthetic diffusion process constants.
constexpr double kDiffusionRho = 0.6;
constexpr double kNoiseStd = 0.05;
constexpr double kKernelThreshold = 0.1;
constexpr double kSeasonOffset = 1.0;
constexpr double kSeasonAmplitude = 0.5;
constexpr double kSeasonPeriod = 24.0;
constexpr std::int64_t kBurnIn = 200;

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  return out;
}

double parse_real(const std::string& cell, const fs::path& file, std::size_t row) {
  try {
    std::size_t used = 0;
    double v = std::stod(cell, &used);
    while (used < cell.size() && std::isspace(static_cast<unsigned char>(cell[used]))) ++used;
    if (used != cell.size()) throw std::invalid_argument(cell);
    return v;
  } catch (const std::exception&) {
    throw DataError(file.string() + ": row " + std::to_string(row + 1) + ": cannot parse '" + cell + "'");
  }
}

std::vector<std::vector<double>> read_csv(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot open " + file.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> row;
    for (const auto& cell : split_csv_line(line)) row.push_back(parse_real(cell, file, rows.size()));
    rows.push_back(std::move(row));
  }
  return rows;
}

float to_float_le(const unsigned char* p) {
  std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                       (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

void from_float_le(float f, unsigned char* p) {
  auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) p[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
}

std::int64_t split_windows(std::int64_t len, std::int64_t p, std::int64_t q) { return len - p - q + 1; }

WindowSet make_windows(const CtsDataset& ds, const Scaler& scaler, std::int64_t begin, std::int64_t len,
                       std::int64_t p, std::int64_t q, ForecastMode mode) {
  const std::int64_t n = ds.n_nodes(), t_all = ds.n_steps(), f = ds.n_features();
  const std::int64_t s = split_windows(len, p, q);
  const std::int64_t tq = mode == ForecastMode::MultiStep ? q : 1;
  WindowSet w;
  w.input_len = p;
  w.horizon = q;
  w.mode = mode;
  w.inputs = Tensor(Shape{s, n, p, f});
  w.targets = Tensor(Shape{s, n, tq, 1});
  w.offsets.resize(static_cast<std::size_t>(s));
  const double* v = ds.values.data();
  for (std::int64_t i = 0; i < s; ++i) {
    const std::int64_t t0 = begin + i;
    w.offsets[static_cast<std::size_t>(i)] = t0;
    for (std::int64_t node = 0; node < n; ++node) {
      for (std::int64_t k = 0; k < p; ++k) {
        for (std::int64_t c = 0; c < f; ++c) {
          w.inputs[static_cast<std::size_t>(((i * n + node) * p + k) * f + c)] =
              scaler.transform(v[(node * t_all + t0 + k) * f + c], static_cast<std::size_t>(c));
        }
      }
      for (std::int64_t k = 0; k < tq; ++k) {
        const std::int64_t tt = mode == ForecastMode::MultiStep ? t0 + p + k : t0 + p + q - 1;
        w.targets[static_cast<std::size_t>((i * n + node) * tq + k)] = v[(node * t_all + tt) * f];
      }
    }
  }
  return w;
}

}  // namespace

void CtsDataset::validate() const {
  if (values.rank() != 3) throw DataError("values must be a rank-3 [N, T, F] tensor");
  if (!values.all_finite()) throw DataError("values contain NaN or Inf");
  if (adjacency) {
    const Tensor& a = *adjacency;
    if (a.rank() != 2 || a.dim(0) != a.dim(1) || a.dim(0) != n_nodes()) {
      throw DataError("adjacency shape mismatch: expected " + std::to_string(n_nodes()) + "x" +
                      std::to_string(n_nodes()) + ", got " + shape_str(a.shape()));
    }
    for (double x : a.values()) {
      if (!std::isfinite(x) || x < 0.0) throw DataError("adjacency entries must be finite and nonnegative");
    }
  }
  if (!timestamps.empty()) {
    if (static_cast<std::int64_t>(timestamps.size()) != n_steps()) throw DataError("timestamps length mismatch");
    for (std::size_t i = 1; i < timestamps.size(); ++i) {
      if (timestamps[i] <= timestamps[i - 1]) throw DataError("timestamps must be strictly increasing");
    }
  }
}

std::string to_string(ForecastMode mode) { return mode == ForecastMode::MultiStep ? "multi_step" : "single_step"; }

ForecastMode forecast_mode_from_string(const std::string& s) {
  if (s == "multi_step") return ForecastMode::MultiStep;
  if (s == "single_step") return ForecastMode::SingleStep;
  throw std::invalid_argument("unknown forecast mode '" + s + "'");
}

SyntheticProcess synthetic_process_from_string(const std::string& s) {
  if (s == "diffusion") return SyntheticProcess::Diffusion;
  if (s == "seasonal") return SyntheticProcess::Seasonal;
  throw std::invalid_argument("unknown synthetic process '" + s + "'");
}

WindowSet WindowSet::slice(std::int64_t begin, std::int64_t n) const {
  if (begin < 0 || n < 0 || begin + n > count()) throw std::out_of_range("window slice out of range");
  WindowSet out;
  out.input_len = input_len;
  out.horizon = horizon;
  out.mode = mode;
  Shape in_shape = inputs.shape();
  Shape tg_shape = targets.shape();
  const std::int64_t in_stride = shape_numel(in_shape) / in_shape[0];
  const std::int64_t tg_stride = shape_numel(tg_shape) / tg_shape[0];
  in_shape[0] = n;
  tg_shape[0] = n;
  out.inputs = Tensor(in_shape,
                      std::vector<double>(inputs.data() + begin * in_stride,
                                          inputs.data() + (begin + n) * in_stride));
  out.targets = Tensor(tg_shape,
                       std::vector<double>(targets.data() + begin * tg_stride,
                                           targets.data() + (begin + n) * tg_stride));
  out.offsets.assign(offsets.begin() + begin, offsets.begin() + begin + n);
  return out;
}

namespace {

Tensor gather_rows(const Tensor& t, std::span<const std::int64_t> idx) {
  Shape shape = t.shape();
  const std::int64_t stride = shape_numel(shape) / shape[0];
  shape[0] = static_cast<std::int64_t>(idx.size());
  Tensor out(shape);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= t.dim(0)) throw std::out_of_range("window index out of range");
    std::copy_n(t.data() + idx[i] * stride, stride, out.data() + static_cast<std::int64_t>(i) * stride);
  }
  return out;
}

}  // namespace

Tensor WindowSet::gather_inputs(std::span<const std::int64_t> idx) const { return gather_rows(inputs, idx); }
Tensor WindowSet::gather_targets(std::span<const std::int64_t> idx) const { return gather_rows(targets, idx); }

void SplitSpec::validate() const {
  double total = 0.0;
  for (double r : ratios) {
    if (!(r >= 0.0)) throw std::invalid_argument("split ratios must be nonnegative");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("split ratios must sum to 1");
  if (!(pseudo_split > 0.0 && pseudo_split < 1.0)) throw std::invalid_argument("pseudo split must be in (0, 1)");
}

CtsDataset load_dataset(const fs::path& dir) {
  const fs::path meta_path = dir / "meta.json";
  std::ifstream meta_in(meta_path);
  if (!meta_in) throw DataError("missing file " + meta_path.string());
  json meta;
  try {
    meta_in >> meta;
  } catch (const json::exception& e) {
    throw DataError(meta_path.string() + ": " + e.what());
  }
  for (const char* key : {"name", "n_nodes", "n_steps", "n_features", "has_adjacency"}) {
    if (!meta.contains(key)) throw DataError(meta_path.string() + ": missing key '" + key + "'");
  }
  if (meta.contains("dtype") && meta["dtype"] != "float32") throw DataError("unsupported dtype " + meta["dtype"].dump());

  CtsDataset ds;
  ds.name = meta["name"].get<std::string>();
  const auto n = meta["n_nodes"].get<std::int64_t>();
  const auto t = meta["n_steps"].get<std::int64_t>();
  const auto f = meta["n_features"].get<std::int64_t>();
  if (n <= 0 || t <= 0 || f <= 0) throw DataError("dataset dimensions must be positive");
  ds.values = Tensor(Shape{n, t, f});
  const std::size_t count = static_cast<std::size_t>(n * t * f);

  const fs::path bin = dir / "values.bin";
  const fs::path csv = dir / "values.csv";
  if (fs::exists(bin)) {
    const auto bytes = fs::file_size(bin);
    if (bytes != count * 4) {
      throw DataError("shape mismatch: values.bin holds " + std::to_string(bytes / 4) + " floats, descriptor needs " +
                      std::to_string(count));
    }
    std::ifstream in(bin, std::ios::binary);
    std::vector<unsigned char> raw(count * 4);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!in) throw DataError("failed reading " + bin.string());
    for (std::size_t i = 0; i < count; ++i) ds.values[i] = static_cast<double>(to_float_le(raw.data() + 4 * i));
  } else if (fs::exists(csv)) {
    auto rows = read_csv(csv);
    if (static_cast<std::int64_t>(rows.size()) != t) {
      throw DataError("shape mismatch: values.csv has " + std::to_string(rows.size()) + " rows, expected " +
                      std::to_string(t));
    }
    for (std::int64_t ti = 0; ti < t; ++ti) {
      const auto& row = rows[static_cast<std::size_t>(ti)];
      if (static_cast<std::int64_t>(row.size()) != n * f) {
        throw DataError("shape mismatch: values.csv row " + std::to_string(ti + 1) + " has " +
                        std::to_string(row.size()) + " columns, expected " + std::to_string(n * f));
      }
      for (std::int64_t node = 0; node < n; ++node)
        for (std::int64_t c = 0; c < f; ++c)
          ds.values[static_cast<std::size_t>((node * t + ti) * f + c)] =
              static_cast<double>(static_cast<float>(row[static_cast<std::size_t>(node * f + c)]));
    }
  } else {
    throw DataError("missing file " + bin.string() + " (and no values.csv fallback)");
  }

  if (meta["has_adjacency"].get<bool>()) {
    const fs::path adj_path = dir / "adj.csv";
    if (!fs::exists(adj_path)) throw DataError("missing file " + adj_path.string());
    auto rows = read_csv(adj_path);
    const auto side = static_cast<std::int64_t>(rows.size());
    for (const auto& r : rows) {
      if (static_cast<std::int64_t>(r.size()) != side) throw DataError("adjacency shape mismatch: matrix is not square");
    }
    if (side != n) {
      throw DataError("adjacency shape mismatch: " + std::to_string(side) + "x" + std::to_string(side) + " for " +
                      std::to_string(n) + " nodes");
    }
    Tensor a(Shape{n, n});
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < n; ++j) a[static_cast<std::size_t>(i * n + j)] = rows[i][j];
    ds.adjacency = std::move(a);
  }
  ds.validate();
  return ds;
}

void write_dataset(const CtsDataset& ds, const fs::path& dir) {
  ds.validate();
  fs::create_directories(dir);
  json meta;
  meta["name"] = ds.name;
  meta["n_nodes"] = ds.n_nodes();
  meta["n_steps"] = ds.n_steps();
  meta["n_features"] = ds.n_features();
  meta["has_adjacency"] = ds.adjacency.has_value();
  meta["dtype"] = "float32";
  meta["layout"] = kLayout;
  {
    std::ofstream out(dir / "meta.json");
    out << meta.dump(2) << '\n';
  }
  {
    std::vector<unsigned char> raw(ds.values.size() * 4);
    for (std::size_t i = 0; i < ds.values.size(); ++i) from_float_le(static_cast<float>(ds.values[i]), raw.data() + 4 * i);
    std::ofstream out(dir / "values.bin", std::ios::binary);
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) throw DataError("failed writing values.bin");
  }
  if (ds.adjacency) {
    std::ofstream out(dir / "adj.csv");
    out << std::setprecision(17);
    const std::int64_t n = ds.n_nodes();
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t j = 0; j < n; ++j) {
        if (j) out << ',';
        out << (*ds.adjacency)[static_cast<std::size_t>(i * n + j)];
      }
      out << '\n';
    }
  }
}

CtsDataset generate_synthetic(std::int64_t n_nodes, std::int64_t n_steps, std::uint64_t seed,
                              SyntheticProcess process) {
  if (n_nodes < 2) throw std::invalid_argument("generate_synthetic: need at least 2 nodes");
  if (n_steps < 64) throw std::invalid_argument("generate_synthetic: n_steps too small to form one window (need >= 64)");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, kNoiseStd);
  const double two_pi = 2.0 * std::acos(-1.0);

  CtsDataset ds;
  ds.values = Tensor(Shape{n_nodes, n_steps, 1});
  ds.timestamps.resize(static_cast<std::size_t>(n_steps));
  for (std::int64_t t = 0; t < n_steps; ++t) ds.timestamps[static_cast<std::size_t>(t)] = t;

  if (process == SyntheticProcess::Diffusion) {
    ds.name = "synthetic-diffusion";
    std::vector<double> px(n_nodes), py(n_nodes);
    for (std::int64_t i = 0; i < n_nodes; ++i) {
      px[i] = unit(rng);
      py[i] = unit(rng);
    }
    std::vector<double> dist(static_cast<std::size_t>(n_nodes * n_nodes));
    double mean = 0.0, sq = 0.0;
    std::int64_t cnt = 0;
    for (std::int64_t i = 0; i < n_nodes; ++i)
      for (std::int64_t j = 0; j < n_nodes; ++j) {
        const double d = std::hypot(px[i] - px[j], py[i] - py[j]);
        dist[i * n_nodes + j] = d;
        if (i != j) {
          mean += d;
          sq += d * d;
          ++cnt;
        }
      }
    mean /= static_cast<double>(cnt);
    const double sigma = std::sqrt(std::max(sq / static_cast<double>(cnt) - mean * mean, 1e-12));
    Tensor adj(Shape{n_nodes, n_nodes});
    for (std::size_t k = 0; k < dist.size(); ++k) {
      const double w = std::exp(-(dist[k] * dist[k]) / (sigma * sigma));
      adj[k] = w >= kKernelThreshold ? w : 0.0;
    }
    const Tensor trans = build_supports(adj)[0];

    std::vector<double> x(n_nodes, kSeasonOffset), next(n_nodes);
    for (std::int64_t step = -kBurnIn; step < n_steps; ++step) {
      const double s = kSeasonOffset + kSeasonAmplitude * std::sin(two_pi * static_cast<double>(step) / kSeasonPeriod);
      for (std::int64_t i = 0; i < n_nodes; ++i) {
        double acc = 0.0;
        for (std::int64_t j = 0; j < n_nodes; ++j) acc += trans[static_cast<std::size_t>(i * n_nodes + j)] * x[j];
        next[i] = kDiffusionRho * acc + s + noise(rng);
      }
      x.swap(next);
      if (step >= 0) {
        for (std::int64_t i = 0; i < n_nodes; ++i)
          ds.values[static_cast<std::size_t>(i * n_steps + step)] = static_cast<double>(static_cast<float>(x[i]));
      }
    }
    ds.adjacency = std::move(adj);
  } else {
    ds.name = "synthetic-seasonal";
    for (std::int64_t i = 0; i < n_nodes; ++i) {
      const double phase = two_pi * unit(rng);
      const double amp = kSeasonAmplitude * (0.5 + unit(rng));
      for (std::int64_t t = 0; t < n_steps; ++t) {
        const double v = kSeasonOffset / (1.0 - kDiffusionRho) +
                         amp * std::sin(two_pi * static_cast<double>(t) / kSeasonPeriod + phase) + noise(rng);
        ds.values[static_cast<std::size_t>(i * n_steps + t)] = static_cast<double>(static_cast<float>(v));
      }
    }
  }
  return ds;
}

DatasetSplits split_and_window(const CtsDataset& ds, const SplitSpec& spec, std::int64_t input_len,
                               std::int64_t horizon, ForecastMode mode) {
  spec.validate();
  ds.validate();
  if (input_len < 1 || horizon < 1) throw std::invalid_argument("input length and horizon must be >= 1");
  const std::int64_t t = ds.n_steps();
  const auto n_train = static_cast<std::int64_t>(std::floor(spec.ratios[0] * static_cast<double>(t) + 1e-9));
  const auto n_val = static_cast<std::int64_t>(std::floor(spec.ratios[1] * static_cast<double>(t) + 1e-9));
  const std::int64_t n_test = t - n_train - n_val;
  const std::array<std::int64_t, 3> lens{n_train, n_val, n_test};
  const std::array<const char*, 3> names{"train", "val", "test"};
  for (std::size_t k = 0; k < 3; ++k) {
    if (split_windows(lens[k], input_len, horizon) < 1) {
      throw DataError(std::string(names[k]) + " split of length " + std::to_string(lens[k]) +
                      " too short for one window (P + Q = " + std::to_string(input_len + horizon) + ")");
    }
  }

  const std::int64_t n = ds.n_nodes(), f = ds.n_features();
  Scaler scaler;
  scaler.mean.assign(static_cast<std::size_t>(f), 0.0);
  scaler.std.assign(static_cast<std::size_t>(f), 0.0);
  for (std::int64_t c = 0; c < f; ++c) {
    double s = 0.0;
    for (std::int64_t node = 0; node < n; ++node)
      for (std::int64_t ti = 0; ti < n_train; ++ti) s += ds.values[static_cast<std::size_t>((node * t + ti) * f + c)];
    const double mu = s / static_cast<double>(n * n_train);
    double v = 0.0;
    for (std::int64_t node = 0; node < n; ++node)
      for (std::int64_t ti = 0; ti < n_train; ++ti) {
        const double d = ds.values[static_cast<std::size_t>((node * t + ti) * f + c)] - mu;
        v += d * d;
      }
    const double sd = std::sqrt(v / static_cast<double>(n * n_train));
    scaler.mean[static_cast<std::size_t>(c)] = mu;
    scaler.std[static_cast<std::size_t>(c)] = sd > 1e-12 ? sd : 1.0;
  }

  DatasetSplits out;
  out.scaler = scaler;
  out.train = make_windows(ds, scaler, 0, n_train, input_len, horizon, mode);
  out.val = make_windows(ds, scaler, n_train, n_val, input_len, horizon, mode);
  out.test = make_windows(ds, scaler, n_train + n_val, n_test, input_len, horizon, mode);
  return out;
}

std::pair<WindowSet, WindowSet> pseudo_split(const WindowSet& train, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw std::invalid_argument("pseudo_split: fraction must be in (0, 1)");
  const std::int64_t s = train.count();
  if (s < 2) throw DataError("pseudo_split: need at least 2 training windows, have " + std::to_string(s));
  auto first = static_cast<std::int64_t>(std::ceil(fraction * static_cast<double>(s) - 1e-9));
  first = std::clamp<std::int64_t>(first, 1, s - 1);
  return {train.slice(0, first), train.slice(first, s - first)};
}

namespace {

Tensor row_normalize(const Tensor& a) {
  const std::int64_t n = a.dim(0);
  Tensor out(a.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    double deg = 0.0;
    for (std::int64_t j = 0; j < n; ++j) deg += a[static_cast<std::size_t>(i * n + j)];
    if (deg <= 0.0) continue;
    for (std::int64_t j = 0; j < n; ++j)
      out[static_cast<std::size_t>(i * n + j)] = a[static_cast<std::size_t>(i * n + j)] / deg;
  }
  return out;
}

}  // namespace

std::vector<Tensor> build_supports(const Tensor& adjacency) {
  if (adjacency.rank() != 2 || adjacency.dim(0) != adjacency.dim(1)) {
    throw DataError("adjacency shape mismatch: expected a square matrix, got " + shape_str(adjacency.shape()));
  }
  for (double x : adjacency.values()) {
    if (!(x >= 0.0)) throw DataError("adjacency has negative or NaN entries");
  }
  const std::int64_t n = adjacency.dim(0);
  Tensor transposed(adjacency.shape());
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      transposed[static_cast<std::size_t>(j * n + i)] = adjacency[static_cast<std::size_t>(i * n + j)];
  return {row_normalize(adjacency), row_normalize(transposed)};
}

std::vector<Tensor> dataset_supports(const CtsDataset& ds) {
  if (ds.adjacency) return build_supports(*ds.adjacency);
  const std::int64_t n = ds.n_nodes();
  Tensor eye(Shape{n, n});
  for (std::int64_t i = 0; i < n; ++i) eye[static_cast<std::size_t>(i * n + i)] = 1.0;
  return build_supports(eye);
}

std::uint64_t dataset_hash(const CtsDataset& ds) {
  Fnv1a h;
  h.update(ds.name);
  for (auto d : ds.values.shape()) h.update_u64(static_cast<std::uint64_t>(d));
  h.update(ds.values.data(), ds.values.size() * sizeof(double));
  if (ds.adjacency) h.update(ds.adjacency->data(), ds.adjacency->size() * sizeof(double));
  return h.digest();
}

}  // namespace stnas
