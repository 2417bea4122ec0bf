#include "stnas/search.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "stnas/hash.hpp"

namespace stnas {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kSearchStream = 0x5ea4c4;
constexpr std::uint64_t kTrainStream = 0x7a1a;

std::vector<std::int64_t> batch_indices(const std::vector<std::int64_t>& order, std::int64_t batch, std::int64_t size) {
  const auto begin = static_cast<std::size_t>(batch * size);
  const auto end = std::min(order.size(), begin + static_cast<std::size_t>(size));
  return {order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(end)};
}

std::int64_t batch_count(std::int64_t n, std::int64_t size) { return (n + size - 1) / size; }

std::vector<std::int64_t> shuffled(std::int64_t n, std::mt19937_64& rng) {
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void set_rng_state(std::mt19937_64& rng, const std::string& s) {
  std::istringstream is(s);
  is >> rng;
  if (!is) throw std::runtime_error("checkpoint: bad rng state");
}

std::vector<Tensor> snapshot(const std::vector<std::pair<std::string, Tensor*>>& ts) {
  std::vector<Tensor> out;
  out.reserve(ts.size());
  for (const auto& [_, t] : ts) out.push_back(*t);
  return out;
}

void restore(const std::vector<std::pair<std::string, Tensor*>>& ts, const std::vector<Tensor>& snap) {
  for (std::size_t i = 0; i < ts.size(); ++i) *ts[i].second = snap[i];
}

std::vector<std::pair<std::string, const Tensor*>> const_view(const std::vector<std::pair<std::string, Tensor*>>& ts) {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (const auto& [n, t] : ts) out.emplace_back(n, t);
  return out;
}

std::vector<std::pair<std::string, Tensor*>> model_tensors(ForecastModel& model) {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (const auto& p : model.weights()) out.emplace_back("w/" + p.name, &p.var.node()->value);
  for (const auto& b : model.buffers()) out.emplace_back("buf/" + b.name, b.tensor);
  return out;
}

double finite_mean(double total, std::int64_t n) { return n > 0 ? total / static_cast<double>(n) : 0.0; }

}  // namespace

double tau_at_epoch(const SearchConfig& cfg, std::int64_t epoch) {
  if (cfg.no_temperature) return 1.0;
  return std::max(cfg.tau_init * std::pow(cfg.tau_decay, static_cast<double>(epoch)), cfg.tau_floor);
}

std::string log_record_to_json(const SearchLogRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["tau"] = r.tau;
  j["loss_train"] = r.loss_train;
  j["loss_val"] = r.loss_val;
  j["sharpness"] = r.sharpness;
  j["skipped_steps"] = r.skipped_steps;
  return j.dump();
}

SearchLogRecord log_record_from_json(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  SearchLogRecord r;
  r.epoch = j.at("epoch").get<std::int64_t>();
  r.tau = j.at("tau").get<double>();
  r.loss_train = j.at("loss_train").get<double>();
  r.loss_val = j.at("loss_val").get<double>();
  r.sharpness = j.at("sharpness").get<double>();
  r.skipped_steps = j.value("skipped_steps", std::int64_t{0});
  return r;
}

std::vector<SearchLogRecord> read_search_log(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open search log " + path.string());
  std::vector<SearchLogRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(log_record_from_json(line));
  }
  return out;
}

ag::Var forecast_loss(const ag::Var& standardized_pred, const Tensor& targets, const Scaler& scaler, LossKind kind) {
  const ag::Var pred = ag::affine(standardized_pred, scaler.std[0], scaler.mean[0]);
  return kind == LossKind::MAE ? ag::mean_abs_error(pred, targets) : ag::mean_squared_error(pred, targets);
}

GraphContext dataset_graph(const CtsDataset& ds, const OperatorHyper& hyper) {
  if (ds.adjacency) return GraphContext::from_adjacency(*ds.adjacency, hyper.cheby_terms);
  Tensor eye(Shape{ds.n_nodes(), ds.n_nodes()});
  for (std::int64_t i = 0; i < ds.n_nodes(); ++i) eye.at({i, i}) = 1.0;
  return GraphContext::from_adjacency(eye, hyper.cheby_terms);
}

NetworkSpec search_network_spec(const SearchConfig& cfg, const WindowSet& windows) {
  NetworkSpec spec;
  spec.n_nodes = windows.n_nodes();
  spec.n_features = windows.n_features();
  spec.input_len = windows.input_len;
  spec.output_len = windows.target_len();
  spec.hidden = cfg.hidden;
  spec.micro_nodes = cfg.micro_nodes;
  spec.blocks = cfg.blocks;
  spec.partial_channel_fraction = cfg.partial_channel_fraction;
  spec.residual = cfg.residual;
  return spec;
}

SearchState::SearchState(const SearchConfig& cfg, const NetworkSpec& spec, const GraphContext& graph, const Scaler& scaler)
    : cfg_(cfg),
      scaler_(scaler),
      net_(std::make_unique<SuperNet>(spec, graph, cfg.seed, SuperNetOptions{cfg.no_macro})),
      theta_opt_(net_->arch_params(), AdamConfig{cfg.theta_lr, cfg.theta_beta1, cfg.theta_beta2, 1e-8, cfg.theta_weight_decay}),
      w_opt_(net_->weights(), AdamConfig{cfg.w_lr, 0.9, 0.999, 1e-8, cfg.w_weight_decay}) {
  net_->set_tau(tau_at_epoch(cfg_, 0));
}

double SearchState::step(Adam& opt, const ParamList& active, const ParamList& frozen, const Tensor& inputs,
                         const Tensor& targets, bool clip) {
  set_requires_grad(frozen, false);
  set_requires_grad(active, true);
  opt.zero_grad();
  double value = 0.0;
  try {
    const ag::Var loss = forecast_loss(net_->forward(inputs, true), targets, scaler_, cfg_.loss);
    value = loss.value()[0];
    if (!std::isfinite(value)) throw DivergenceError("non-finite loss during search");
    ag::backward(loss);
  } catch (...) {
    set_requires_grad(frozen, true);
    throw;
  }
  if (clip) clip_grad_norm(active, cfg_.grad_clip);
  if (!opt.step()) ++skipped_;
  set_requires_grad(frozen, true);
  return value;
}

double SearchState::theta_step(const Tensor& inputs, const Tensor& targets) {
  return step(theta_opt_, theta_opt_.params(), w_opt_.params(), inputs, targets, true);
}

double SearchState::w_step(const Tensor& inputs, const Tensor& targets) {
  return step(w_opt_, w_opt_.params(), theta_opt_.params(), inputs, targets, true);
}

std::vector<std::pair<std::string, Tensor*>> SearchState::tensors() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (const auto& p : net_->weights()) out.emplace_back("w/" + p.name, &p.var.node()->value);
  for (const auto& p : net_->arch_params()) out.emplace_back("theta/" + p.name, &p.var.node()->value);
  for (const auto& b : net_->buffers()) out.emplace_back("buf/" + b.name, b.tensor);
  BufferList opt_state;
  theta_opt_.collect_state("opt_theta/", opt_state);
  w_opt_.collect_state("opt_w/", opt_state);
  for (const auto& b : opt_state) out.emplace_back(b.name, b.tensor);
  return out;
}

SearchResult joint_search(const DatasetSplits& splits, const GraphContext& graph, const SearchConfig& cfg,
                          const SearchRunOptions& options) {
  cfg.validate();
  if (splits.train.count() < 2) throw DataError("search: need at least 2 training windows for the pseudo split");
  const auto [ptrain, pval] = pseudo_split(splits.train, cfg.pseudo_split);
  if (ptrain.count() == 0 || pval.count() == 0) throw DataError("search: empty pseudo split");

  SearchState state(cfg, search_network_spec(cfg, splits.train), graph, splits.scaler);
  std::mt19937_64 rng(mix_seed(cfg.seed, kSearchStream));
  auto tensors = state.tensors();

  SearchResult result;
  result.best_val_loss = INFINITY;
  // Theta at the best pseudo-validation epoch, saved as "best/theta/..." so derive can reproduce the genotype
  std::vector<std::pair<std::string, Tensor>> best_theta;
  auto capture_best = [&] {
    best_theta.clear();
    for (const auto& p : state.net().arch_params()) best_theta.emplace_back("best/theta/" + p.name, p.var.value());
  };
  std::int64_t start_epoch = 0;
  std::int64_t skipped_before = 0;

  if (options.resume && !options.checkpoint_dir.empty() && fs::exists(options.checkpoint_dir / "manifest.json")) {
    const Checkpoint ck = read_checkpoint(options.checkpoint_dir);
    const auto& meta = ck.meta;
    if (meta.at("config").get<KeyValues>() != cfg.to_key_values()) {
      throw std::invalid_argument("resume: checkpoint was written with a different search configuration");
    }
    for (auto& [name, t] : tensors) {
      const Tensor& saved = ck.tensor(name);
      if (!saved.same_shape(*t)) throw std::runtime_error("resume: shape mismatch for " + name);
      *t = saved;
    }
    start_epoch = meta.at("epoch").get<std::int64_t>();
    state.theta_optimizer().set_steps(meta.at("theta_steps").get<std::int64_t>());
    state.w_optimizer().set_steps(meta.at("w_steps").get<std::int64_t>());
    set_rng_state(rng, meta.at("rng").get<std::string>());
    for (const auto& line : meta.at("log")) result.log.push_back(log_record_from_json(line.get<std::string>()));
    result.best_epoch = meta.at("best_epoch").get<std::int64_t>();
    result.best_val_loss = meta.at("best_val_loss").get<double>();
    skipped_before = meta.at("skipped_steps").get<std::int64_t>();
    if (!ck.genotype_json.empty()) result.genotype = genotype_from_json(ck.genotype_json);
    if (result.best_epoch >= 0) {
      for (const auto& p : state.net().arch_params()) {
        best_theta.emplace_back("best/theta/" + p.name, ck.tensor("best/theta/" + p.name));
      }
    }
  }

  auto save = [&](std::int64_t completed) {
    if (options.checkpoint_dir.empty()) return;
    nlohmann::json meta;
    meta["epoch"] = completed;
    meta["tau"] = state.net().tau();
    meta["theta_steps"] = state.theta_optimizer().steps();
    meta["w_steps"] = state.w_optimizer().steps();
    meta["rng"] = rng_state(rng);
    meta["config"] = cfg.to_key_values();
    meta["dataset"] = options.dataset_name;
    meta["best_epoch"] = result.best_epoch;
    meta["best_val_loss"] = std::isfinite(result.best_val_loss) ? result.best_val_loss : -1.0;
    meta["skipped_steps"] = skipped_before + state.skipped_steps();
    auto log = nlohmann::json::array();
    for (const auto& r : result.log) log.push_back(log_record_to_json(r));
    meta["log"] = log;
    auto view = const_view(tensors);
    for (const auto& [name, t] : best_theta) view.emplace_back(name, &t);
    write_checkpoint(options.checkpoint_dir, view, meta,
                     result.best_epoch >= 0 ? genotype_to_json(result.genotype) : std::string());
  };

  std::vector<Tensor> last_good = snapshot(tensors);
  const std::int64_t bs = cfg.batch_size;
  const std::int64_t n_iter = batch_count(ptrain.count(), bs);
  const std::int64_t n_val_batches = batch_count(pval.count(), bs);

  for (std::int64_t e = start_epoch; e < cfg.epochs; ++e) {
    if (options.stop_after >= 0 && e >= options.stop_after) break;
    state.net().set_tau(tau_at_epoch(cfg, e));
    const auto train_order = shuffled(ptrain.count(), rng);
    const auto val_order = shuffled(pval.count(), rng);
    const std::int64_t skipped_start = state.skipped_steps();
    double sum_train = 0.0, sum_val = 0.0;
    try {
      for (std::int64_t it = 0; it < n_iter; ++it) {
        const auto vi = batch_indices(val_order, it % n_val_batches, bs);
        sum_val += state.theta_step(pval.gather_inputs(vi), pval.gather_targets(vi));
        const auto ti = batch_indices(train_order, it, bs);
        sum_train += state.w_step(ptrain.gather_inputs(ti), ptrain.gather_targets(ti));
      }
    } catch (const DivergenceError&) {
      restore(tensors, last_good);
      save(e);
      throw DivergenceError("search diverged in epoch " + std::to_string(e) + "; restored the state after epoch " +
                            std::to_string(e - 1));
    }
    SearchLogRecord rec;
    rec.epoch = e;
    rec.tau = state.net().tau();
    rec.loss_train = finite_mean(sum_train, n_iter);
    rec.loss_val = finite_mean(sum_val, n_iter);
    rec.sharpness = state.net().sharpness();
    rec.skipped_steps = state.skipped_steps() - skipped_start;
    result.log.push_back(rec);
    if (rec.loss_val < result.best_val_loss) {
      result.best_val_loss = rec.loss_val;
      result.best_epoch = e;
      result.genotype = derive_genotype(state.net(), options.dataset_name);
      capture_best();
    }
    last_good = snapshot(tensors);
    save(e + 1);
    if (options.on_epoch) options.on_epoch(rec);
  }
  if (result.best_epoch < 0) result.genotype = derive_genotype(state.net(), options.dataset_name);
  result.final_sharpness = state.net().sharpness();
  return result;
}

SearchResult search_no_macro(const DatasetSplits& splits, const GraphContext& graph, SearchConfig cfg,
                             const SearchRunOptions& options) {
  cfg.no_macro = true;
  return joint_search(splits, graph, cfg, options);
}

double validation_loss(ForecastModel& model, const WindowSet& windows, const Scaler& scaler, LossKind kind) {
  const auto pred = predict(model, windows, scaler);
  const auto truth = windows.targets.values();
  if (kind == LossKind::MAE) return mae(pred, truth);
  const double r = rmse(pred, truth);
  return r * r;
}

TrainResult train_from_scratch(const Genotype& genotype, const DatasetSplits& splits, const GraphContext& graph,
                               const TrainConfig& cfg, const OperatorHyper& hyper) {
  cfg.validate();
  genotype.validate(cfg.allow_reference_ops);
  if (splits.train.count() == 0 || splits.val.count() == 0 || splits.test.count() == 0) {
    throw DataError("train: every split needs at least one window");
  }
  NetworkSpec spec;
  spec.n_nodes = splits.train.n_nodes();
  spec.n_features = splits.train.n_features();
  spec.input_len = splits.train.input_len;
  spec.output_len = splits.train.target_len();
  spec.hyper = hyper;
  spec.residual = cfg.residual;
  TrainResult result;
  result.model = build_discrete_model(genotype, spec, graph, cfg.seed, cfg.allow_reference_ops);
  DiscreteNet& model = *result.model;
  Adam opt(model.weights(), AdamConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  std::mt19937_64 rng(mix_seed(cfg.seed, kTrainStream));
  auto tensors = model_tensors(model);
  std::vector<Tensor> best = snapshot(tensors);
  result.best_val_loss = INFINITY;

  const WindowSet& train = splits.train;
  const std::int64_t n_batches = batch_count(train.count(), cfg.batch_size);
  std::int64_t since_best = 0;
  for (std::int64_t e = 0; e < cfg.max_epochs; ++e) {
    const auto order = shuffled(train.count(), rng);
    double total = 0.0;
    for (std::int64_t b = 0; b < n_batches && !result.diverged; ++b) {
      const auto idx = batch_indices(order, b, cfg.batch_size);
      opt.zero_grad();
      const ag::Var loss =
          forecast_loss(model.forward(train.gather_inputs(idx), true), train.gather_targets(idx), splits.scaler, cfg.loss);
      const double v = loss.value()[0];
      if (!std::isfinite(v)) {
        result.diverged = true;
        break;
      }
      total += v;
      ag::backward(loss);
      clip_grad_norm(opt.params(), cfg.grad_clip);
      opt.step();
    }
    if (result.diverged) break;
    const double val = validation_loss(model, splits.val, splits.scaler, cfg.loss);
    if (!std::isfinite(val)) {
      result.diverged = true;
      break;
    }
    result.history.push_back({e, total / static_cast<double>(n_batches), val});
    if (val < result.best_val_loss) {
      result.best_val_loss = val;
      result.best_epoch = e;
      best = snapshot(tensors);
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  if (result.best_epoch < 0) throw DivergenceError("training diverged in the first epoch");
  restore(tensors, best);

  EvalOptions eo;
  if (splits.test.mode == ForecastMode::MultiStep) eo.horizons = cfg.horizons;
  else eo.horizons.clear();
  result.report = evaluate(model, splits.test, splits.scaler, eo);
  for (const auto& row : result.report.rows) {
    if (!std::isfinite(row.mae) || !std::isfinite(row.rmse)) {
      throw DivergenceError("non-finite test metrics at the best validation epoch " + std::to_string(result.best_epoch));
    }
  }
  result.report.dataset = genotype.meta.dataset;
  result.report.genotype_hash = hex64(genotype_hash(genotype));
  return result;
}

void save_model(ForecastModel& model, const fs::path& dir, const nlohmann::json& meta, const std::string& genotype_json) {
  write_checkpoint(dir, const_view(model_tensors(model)), meta, genotype_json);
}

void load_model_weights(ForecastModel& model, const Checkpoint& ck) {
  for (auto& [name, t] : model_tensors(model)) {
    const Tensor& saved = ck.tensor(name);
    if (!saved.same_shape(*t)) throw std::runtime_error("model checkpoint: shape mismatch for " + name);
    *t = saved;
  }
}

}  // namespace stnas
