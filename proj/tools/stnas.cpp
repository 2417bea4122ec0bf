// stnas: command-line driver for data generation, architecture search, training and evaluation.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <json.hpp>

#include "stnas/checkpoint.hpp"
#include "stnas/data.hpp"
#include "stnas/derivation.hpp"
#include "stnas/genotype.hpp"
#include "stnas/hash.hpp"
#include "stnas/metrics.hpp"
#include "stnas/oplab.hpp"
#include "stnas/report.hpp"
#include "stnas/search.hpp"

namespace fs = std::filesystem;
using namespace stnas;
using json = nlohmann::ordered_json;

namespace {

constexpr const char* kVersion = "1.0.0";

enum ExitCode { kOk = 0, kFailure = 1, kUsage = 2, kData = 3, kDivergence = 4 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Windowing settings shared by every command that reads a dataset.
struct DataSettings {
  std::int64_t input_len = 12;
  std::int64_t horizon = 12;
  ForecastMode mode = ForecastMode::MultiStep;
  SplitSpec split;

  static bool knows(const std::string& k) {
    return k == "input_len" || k == "horizon" || k == "mode" || k == "train_ratio" || k == "val_ratio" ||
           k == "test_ratio";
  }
  void apply(const KeyValues& kv) {
    for (const auto& [k, v] : kv) {
      if (k == "input_len") input_len = std::stoll(v);
      else if (k == "horizon") horizon = std::stoll(v);
      else if (k == "mode") mode = forecast_mode_from_string(v);
      else if (k == "train_ratio") split.ratios[0] = std::stod(v);
      else if (k == "val_ratio") split.ratios[1] = std::stod(v);
      else if (k == "test_ratio") split.ratios[2] = std::stod(v);
    }
    if (input_len < 1 || horizon < 1) throw std::invalid_argument("input_len and horizon must be >= 1");
    split.validate();
  }
  json to_json() const {
    return {{"input_len", input_len},
            {"horizon", horizon},
            {"mode", to_string(mode)},
            {"train_ratio", split.ratios[0]},
            {"val_ratio", split.ratios[1]},
            {"test_ratio", split.ratios[2]}};
  }
  static DataSettings from_json(const nlohmann::json& j) {
    DataSettings d;
    d.input_len = j.at("input_len").get<std::int64_t>();
    d.horizon = j.at("horizon").get<std::int64_t>();
    d.mode = forecast_mode_from_string(j.at("mode").get<std::string>());
    d.split.ratios = {j.at("train_ratio").get<double>(), j.at("val_ratio").get<double>(),
                      j.at("test_ratio").get<double>()};
    return d;
  }
};

/// Flags bound to config keys; only flags given on the command line override the config file.
class Overrides {
 public:
  void option(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    opts_.push_back({app->add_option(flag, values_[key], help), key});
  }
  void flag(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    flags_.push_back({app->add_flag(flag, help), key});
  }
  /// Config file (if any) overlaid with explicit flags.
  KeyValues merged(const std::string& config_path) const {
    KeyValues kv;
    if (!config_path.empty()) {
      kv = read_key_values(config_path);
      for (const auto& [k, _] : kv) {
        if (!SearchConfig::knows(k) && !TrainConfig::knows(k) && !DataSettings::knows(k)) {
          throw UsageError("config: unknown key '" + k + "'");
        }
      }
    }
    for (const auto& [opt, key] : opts_) {
      if (opt->count() > 0) kv[key] = values_.at(key);
    }
    for (const auto& [opt, key] : flags_) {
      if (opt->count() > 0) kv[key] = "true";
    }
    return kv;
  }

 private:
  std::map<std::string, std::string> values_;
  std::vector<std::pair<CLI::Option*, std::string>> opts_;
  std::vector<std::pair<CLI::Option*, std::string>> flags_;
};

struct Common {
  std::string data;
  std::string config;
  std::string out;
  bool force = false;
};

void prepare_out_dir(const fs::path& out, bool force) {
  if (out.empty()) throw UsageError("--out is required");
  if (fs::exists(out) && !fs::is_directory(out)) throw UsageError(out.string() + " exists and is not a directory");
  if (fs::exists(out) && !fs::is_empty(out)) {
    if (!force) throw UsageError("output directory " + out.string() + " is not empty (use --force to overwrite)");
    fs::remove_all(out);
  }
  fs::create_directories(out);
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
  if (!text.empty() && text.back() != '\n') out << '\n';
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot open " + p.string());
  return nlohmann::json::parse(in);
}

class RunManifest {
 public:
  explicit RunManifest(std::string command) : start_(std::chrono::steady_clock::now()) { doc_["command"] = command; }

  json& operator[](const char* key) { return doc_[key]; }
  void output(const fs::path& p) { outputs_.push_back(p.string()); }

  void write(const fs::path& dir) {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    doc_["outputs"] = outputs_;
    doc_["wall_clock_seconds"] = secs;
    doc_["versions"] = {{"stnas", kVersion},
                        {"opset", kOpsetVersion},
                        {"compiler", __VERSION__},
                        {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                      std::to_string(EIGEN_MINOR_VERSION)}};
    write_text(dir / "manifest.json", doc_.dump(2));
  }

 private:
  json doc_;
  std::vector<std::string> outputs_;
  std::chrono::steady_clock::time_point start_;
};

json dataset_json(const std::string& path, const CtsDataset& ds) {
  return {{"path", path},
          {"name", ds.name},
          {"hash", hex64(dataset_hash(ds))},
          {"n_nodes", ds.n_nodes()},
          {"n_steps", ds.n_steps()},
          {"n_features", ds.n_features()}};
}

json kv_json(const KeyValues& kv) {
  json j = json::object();
  for (const auto& [k, v] : kv) j[k] = v;
  return j;
}

CtsDataset require_dataset(const std::string& path) {
  if (path.empty()) throw UsageError("--data is required");
  return load_dataset(path);
}

// ---------------------------------------------------------------------------

int cmd_generate(const Common& c, std::int64_t nodes, std::int64_t steps, std::uint64_t seed, const std::string& process) {
  const SyntheticProcess proc = synthetic_process_from_string(process);
  prepare_out_dir(c.out, c.force);
  CtsDataset ds = generate_synthetic(nodes, steps, seed, proc);
  ds.name = fs::path(c.out).filename().string();
  write_dataset(ds, c.out);
  RunManifest m("generate");
  m["config"] = {{"nodes", nodes}, {"steps", steps}, {"process", process}};
  m["seed"] = seed;
  m["dataset"] = dataset_json(c.out, ds);
  m["genotype_hash"] = nullptr;
  for (const auto& e : fs::directory_iterator(c.out)) m.output(e.path());
  m.write(c.out);
  std::cout << "wrote " << ds.n_nodes() << "x" << ds.n_steps() << " dataset to " << c.out << '\n';
  return kOk;
}

int cmd_search(const Common& c, const Overrides& ov, bool resume) {
  const KeyValues kv = ov.merged(c.config);
  SearchConfig cfg;
  cfg.apply(kv);
  cfg.validate();
  DataSettings data;
  data.apply(kv);
  const CtsDataset ds = require_dataset(c.data);
  const fs::path out = c.out;
  if (resume) {
    if (!fs::exists(out / "checkpoint" / "manifest.json")) throw UsageError("--resume: no checkpoint under " + c.out);
  } else {
    prepare_out_dir(out, c.force);
  }
  const DatasetSplits splits = split_and_window(ds, data.split, data.input_len, data.horizon, data.mode);
  const GraphContext graph = dataset_graph(ds);

  const fs::path log_path = out / "search_log.jsonl";
  if (!resume) std::ofstream(log_path, std::ios::trunc);
  SearchRunOptions opts;
  opts.dataset_name = ds.name;
  opts.checkpoint_dir = out / "checkpoint";
  opts.resume = resume;
  opts.on_epoch = [&](const SearchLogRecord& r) {
    std::ofstream(log_path, std::ios::app) << log_record_to_json(r) << '\n';
    std::cerr << "epoch " << r.epoch << " tau " << r.tau << " train " << r.loss_train << " val " << r.loss_val
              << " sharpness " << r.sharpness << '\n';
  };
  const SearchResult result = joint_search(splits, graph, cfg, opts);
  {
    std::ofstream log(log_path, std::ios::trunc);
    for (const auto& r : result.log) log << log_record_to_json(r) << '\n';
  }
  save_genotype(result.genotype, out / "genotype.json");

  RunManifest m("search");
  auto cfg_kv = cfg.to_key_values();
  m["config"] = kv_json(cfg_kv);
  m["data_settings"] = data.to_json();
  m["seed"] = cfg.seed;
  m["dataset"] = dataset_json(c.data, ds);
  m["n_features"] = ds.n_features();
  m["genotype_hash"] = hex64(genotype_hash(result.genotype));
  m["best_epoch"] = result.best_epoch;
  m["best_val_loss"] = result.best_val_loss;
  m["final_sharpness"] = result.final_sharpness;
  m.output(out / "genotype.json");
  m.output(log_path);
  m.output(out / "checkpoint");
  m.write(out);
  std::cout << genotype_to_json(result.genotype) << '\n';
  return kOk;
}

int cmd_derive(const Common& c, const std::string& run, bool forbid_zero) {
  if (run.empty()) throw UsageError("--run is required");
  const auto search_manifest = read_json(fs::path(run) / "manifest.json");
  const std::string data_path = c.data.empty() ? search_manifest.at("dataset").at("path").get<std::string>() : c.data;
  const CtsDataset ds = require_dataset(data_path);
  const Checkpoint ck = read_checkpoint(fs::path(run) / "checkpoint");
  SearchConfig cfg;
  cfg.apply(ck.meta.at("config").get<KeyValues>());
  const DataSettings data = DataSettings::from_json(search_manifest.at("data_settings"));
  const DatasetSplits splits = split_and_window(ds, data.split, data.input_len, data.horizon, data.mode);
  SearchState state(cfg, search_network_spec(cfg, splits.train), dataset_graph(ds), splits.scaler);
  for (auto& [name, t] : state.tensors()) *t = ck.tensor(name);
  // derive from Theta at the best pseudo-validation epoch, as the search itself does
  for (const auto& p : state.net().arch_params()) {
    if (ck.tensors.count("best/theta/" + p.name)) {
      ag::Var v = p.var;
      v.mutable_value() = ck.tensor("best/theta/" + p.name);
    }
  }
  state.net().set_tau(ck.meta.at("tau").get<double>());
  const Genotype g = derive_genotype(state.net(), ds.name, DerivationOptions{forbid_zero});

  prepare_out_dir(c.out, c.force);
  save_genotype(g, fs::path(c.out) / "genotype.json");
  RunManifest m("derive");
  m["config"] = {{"run", run}, {"forbid_zero_on_mandatory_edge", forbid_zero}};
  m["seed"] = cfg.seed;
  m["dataset"] = dataset_json(data_path, ds);
  m["n_features"] = ds.n_features();
  m["genotype_hash"] = hex64(genotype_hash(g));
  m.output(fs::path(c.out) / "genotype.json");
  m.write(c.out);
  std::cout << genotype_to_json(g) << '\n';
  return kOk;
}

void check_features(std::int64_t expected, std::int64_t actual) {
  if (expected != actual) {
    throw DataError("feature dimension mismatch: model expects F=" + std::to_string(expected) + ", dataset has F=" +
                    std::to_string(actual));
  }
}

int cmd_train(const Common& c, const Overrides& ov, const std::string& genotype_path) {
  if (genotype_path.empty()) throw UsageError("--genotype is required");
  const KeyValues kv = ov.merged(c.config);
  TrainConfig cfg;
  cfg.apply(kv);
  cfg.validate();
  DataSettings data;
  data.apply(kv);
  const Genotype g = load_genotype(genotype_path);
  const CtsDataset ds = require_dataset(c.data);
  if (const fs::path gm = fs::path(genotype_path).parent_path() / "manifest.json"; fs::exists(gm)) {
    const auto doc = read_json(gm);
    if (doc.contains("n_features")) check_features(doc["n_features"].get<std::int64_t>(), ds.n_features());
  }
  prepare_out_dir(c.out, c.force);
  const DatasetSplits splits = split_and_window(ds, data.split, data.input_len, data.horizon, data.mode);
  TrainResult r = train_from_scratch(g, splits, dataset_graph(ds), cfg);
  r.report.dataset = ds.name;
  if (!r.report.consistent()) throw std::logic_error("metrics report violates MAE <= RMSE");

  const fs::path out = c.out;
  nlohmann::json meta;
  meta["n_nodes"] = ds.n_nodes();
  meta["n_features"] = ds.n_features();
  meta["data_settings"] = data.to_json();
  meta["dataset"] = dataset_json(c.data, ds);
  meta["train_config"] = cfg.to_key_values();
  meta["best_epoch"] = r.best_epoch;
  save_model(*r.model, out / "model", meta, genotype_to_json(g));
  write_text(out / "report.json", r.report.to_json());
  write_text(out / "report.txt", r.report.to_table());
  {
    std::ofstream log(out / "train_log.jsonl");
    for (const auto& e : r.history) {
      log << json{{"epoch", e.epoch}, {"loss_train", e.loss_train}, {"loss_val", e.loss_val}}.dump() << '\n';
    }
  }
  RunManifest m("train");
  m["config"] = kv_json(cfg.to_key_values());
  m["data_settings"] = data.to_json();
  m["seed"] = cfg.seed;
  m["dataset"] = dataset_json(c.data, ds);
  m["n_features"] = ds.n_features();
  m["genotype_hash"] = hex64(genotype_hash(g));
  m["best_epoch"] = r.best_epoch;
  m["diverged"] = r.diverged;
  for (const char* f : {"model", "report.json", "report.txt", "train_log.jsonl"}) m.output(out / f);
  m.write(out);
  std::cout << r.report.to_table();
  if (r.diverged) std::cerr << "warning: training diverged; reported the best validation checkpoint\n";
  return kOk;
}

int cmd_eval(const Common& c, const std::string& model_dir, const std::string& horizons) {
  if (model_dir.empty()) throw UsageError("--model is required");
  const Checkpoint ck = read_checkpoint(model_dir);
  const Genotype g = genotype_from_json(ck.genotype_json);
  const std::string data_path = c.data.empty() ? ck.meta.at("dataset").at("path").get<std::string>() : c.data;
  const CtsDataset ds = require_dataset(data_path);
  check_features(ck.meta.at("n_features").get<std::int64_t>(), ds.n_features());
  if (ck.meta.at("n_nodes").get<std::int64_t>() != ds.n_nodes()) throw DataError("node count mismatch");
  const DataSettings data = DataSettings::from_json(ck.meta.at("data_settings"));
  const DatasetSplits splits = split_and_window(ds, data.split, data.input_len, data.horizon, data.mode);
  NetworkSpec spec;
  spec.n_nodes = ds.n_nodes();
  spec.n_features = ds.n_features();
  spec.input_len = data.input_len;
  spec.output_len = splits.test.target_len();
  TrainConfig tc;
  tc.apply(ck.meta.at("train_config").get<KeyValues>());
  // the construction seed also fixes the sparse-attention key samples, so it must match training
  auto model = build_discrete_model(g, spec, dataset_graph(ds), tc.seed);
  load_model_weights(*model, ck);
  if (!horizons.empty()) tc.apply({{"horizons", horizons}});
  EvalOptions eo;
  eo.horizons = data.mode == ForecastMode::MultiStep ? tc.horizons : std::vector<std::int64_t>{};
  MetricsReport report = evaluate(*model, splits.test, splits.scaler, eo);
  report.dataset = ds.name;
  report.genotype_hash = hex64(genotype_hash(g));
  if (!report.consistent()) throw std::logic_error("metrics report violates MAE <= RMSE");

  prepare_out_dir(c.out, c.force);
  const fs::path out = c.out;
  write_text(out / "report.json", report.to_json());
  write_text(out / "report.txt", report.to_table());
  RunManifest m("eval");
  m["config"] = {{"model", model_dir}, {"horizons", eo.horizons}};
  m["seed"] = tc.seed;
  m["dataset"] = dataset_json(data_path, ds);
  m["genotype_hash"] = report.genotype_hash;
  m.output(out / "report.json");
  m.output(out / "report.txt");
  m.write(out);
  std::cout << report.to_table();
  return kOk;
}

int cmd_oplab(const Common& c, const Overrides& ov, std::int64_t hidden) {
  const KeyValues kv = ov.merged(c.config);
  TrainConfig cfg;
  cfg.apply(kv);
  cfg.validate();
  DataSettings data;
  data.apply(kv);
  if (hidden < 1) throw UsageError("--D must be >= 1");
  const CtsDataset ds = require_dataset(c.data);
  prepare_out_dir(c.out, c.force);
  const DatasetSplits splits = split_and_window(ds, data.split, data.input_len, data.horizon, data.mode);
  const OplabResult r = run_oplab(splits, dataset_graph(ds), cfg, hidden);
  const fs::path out = c.out;
  write_text(out / "oplab.json", r.to_json());
  write_text(out / "oplab.txt", r.to_table());
  RunManifest m("oplab");
  m["config"] = kv_json(cfg.to_key_values());
  m["data_settings"] = data.to_json();
  m["hidden"] = hidden;
  m["seed"] = cfg.seed;
  m["dataset"] = dataset_json(c.data, ds);
  m["genotype_hash"] = nullptr;
  m.output(out / "oplab.json");
  m.output(out / "oplab.txt");
  m.write(out);
  std::cout << r.to_table();
  return kOk;
}

int cmd_report(const Common& c, const std::string& log_arg) {
  if (log_arg.empty()) throw UsageError("--log is required");
  fs::path log_path = log_arg;
  if (fs::is_directory(log_path)) log_path /= "search_log.jsonl";
  if (!fs::exists(log_path)) throw DataError("missing search log " + log_path.string());
  const auto log = read_search_log(log_path);
  if (log.empty()) throw DataError("search log " + log_path.string() + " is empty");
  prepare_out_dir(c.out, c.force);
  RunManifest m("report");
  m["config"] = {{"log", log_path.string()}};
  m["seed"] = nullptr;
  m["dataset"] = nullptr;
  m["genotype_hash"] = nullptr;
  for (const auto& p : write_search_report(log, c.out)) m.output(p);
  m.write(c.out);
  std::cout << search_summary(log);
  return kOk;
}

void add_common(CLI::App* sub, Common& c, bool data, bool config) {
  if (data) sub->add_option("--data", c.data, "dataset directory");
  if (config) sub->add_option("--config", c.config, "key=value config file");
  sub->add_option("--out", c.out, "output directory")->required();
  sub->add_flag("--force", c.force, "overwrite a non-empty output directory");
}

void add_data_overrides(CLI::App* sub, Overrides& ov) {
  ov.option(sub, "--input-len", "input_len", "input window length P");
  ov.option(sub, "--horizon", "horizon", "forecast length Q (multi-step) or offset (single-step)");
  ov.option(sub, "--mode", "mode", "multi_step or single_step");
  ov.option(sub, "--seed", "seed", "random seed");
}

void add_train_overrides(CLI::App* sub, Overrides& ov) {
  ov.option(sub, "--train-epochs", "train_epochs", "maximum training epochs");
  ov.option(sub, "--patience", "patience", "early-stopping patience in epochs");
  ov.option(sub, "--train-batch-size", "train_batch_size", "training batch size");
  ov.option(sub, "--train-lr", "train_lr", "training learning rate");
  ov.option(sub, "--horizons", "horizons", "comma-separated report horizons");
  ov.option(sub, "--loss", "loss", "mae or mse");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint micro/macro architecture search for correlated time series forecasting"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  Common common;

  auto* gen = app.add_subcommand("generate", "write a synthetic dataset");
  std::int64_t nodes = 8, steps = 2048;
  std::uint64_t gen_seed = 7;
  std::string process = "diffusion";
  add_common(gen, common, false, false);
  gen->add_option("--nodes", nodes, "number of series");
  gen->add_option("--steps", steps, "number of timestamps");
  gen->add_option("--seed", gen_seed, "random seed");
  gen->add_option("--process", process, "diffusion or seasonal");

  Overrides search_ov;
  bool resume = false;
  auto* search = app.add_subcommand("search", "joint architecture search");
  add_common(search, common, true, true);
  add_data_overrides(search, search_ov);
  search_ov.option(search, "--M", "M", "nodes per ST-block micro-DAG");
  search_ov.option(search, "--B", "B", "number of ST-blocks");
  search_ov.option(search, "--D", "D", "hidden channels");
  search_ov.option(search, "--epochs", "epochs", "search epochs");
  search_ov.option(search, "--batch-size", "batch_size", "search batch size");
  search_ov.option(search, "--loss", "loss", "mae or mse");
  search_ov.flag(search, "--no-temperature", "no_temperature", "ablation: keep the softmax temperature at 1");
  search_ov.flag(search, "--no-macro", "no_macro", "ablation: one shared ST-block on a chain backbone");
  search->add_flag("--resume", resume, "continue from the checkpoint in --out");

  std::string run_dir;
  bool forbid_zero = false;
  auto* derive = app.add_subcommand("derive", "derive a genotype from a search checkpoint");
  add_common(derive, common, true, false);
  derive->add_option("--run", run_dir, "search output directory")->required();
  derive->add_flag("--forbid-zero", forbid_zero, "never pick ZERO on a node's mandatory edge");

  Overrides train_ov;
  std::string genotype_path;
  auto* train = app.add_subcommand("train", "train a genotype from scratch and report test metrics");
  add_common(train, common, true, true);
  add_data_overrides(train, train_ov);
  add_train_overrides(train, train_ov);
  train->add_option("--genotype", genotype_path, "genotype JSON")->required();

  std::string model_dir, eval_horizons;
  auto* eval = app.add_subcommand("eval", "evaluate a trained model on the test split");
  add_common(eval, common, true, false);
  eval->add_option("--model", model_dir, "model directory written by train")->required();
  eval->add_option("--horizons", eval_horizons, "comma-separated report horizons");

  Overrides oplab_ov;
  std::int64_t oplab_hidden = 32;
  auto* oplab = app.add_subcommand("oplab", "compare GCN and attention operator variants");
  add_common(oplab, common, true, true);
  add_data_overrides(oplab, oplab_ov);
  add_train_overrides(oplab, oplab_ov);
  oplab->add_option("--D", oplab_hidden, "hidden channels");

  std::string log_arg;
  auto* report = app.add_subcommand("report", "plot a search log");
  add_common(report, common, false, false);
  report->add_option("--log", log_arg, "search_log.jsonl or a search output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return cmd_generate(common, nodes, steps, gen_seed, process);
    if (*search) return cmd_search(common, search_ov, resume);
    if (*derive) return cmd_derive(common, run_dir, forbid_zero);
    if (*train) return cmd_train(common, train_ov, genotype_path);
    if (*eval) return cmd_eval(common, model_dir, eval_horizons);
    if (*oplab) return cmd_oplab(common, oplab_ov, oplab_hidden);
    if (*report) return cmd_report(common, log_arg);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDivergence;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const GenotypeError& e) {
    std::cerr << "genotype error: " << e.what() << '\n';
    return kData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}
