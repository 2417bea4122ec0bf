#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "stnas/checkpoint.hpp"
#include "stnas/data.hpp"
#include "stnas/derivation.hpp"
#include "stnas/genotype.hpp"
#include "stnas/metrics.hpp"
#include "stnas/optim.hpp"
#include "stnas/supernet.hpp"

namespace stnas {

/// Raised when a loss turns non-finite. Carries the last finite state's summary.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LossKind { MAE, MSE };

LossKind loss_kind_from_string(const std::string& s);
std::string to_string(LossKind k);

/// Flat key=value view used by config files and flag overrides.
using KeyValues = std::map<std::string, std::string>;

/// Parses "key = value" lines; '#' starts a comment.
KeyValues read_key_values(const std::filesystem::path& path);

struct SearchConfig {
  std::int64_t epochs = 60;
  std::int64_t batch_size = 32;
  double theta_lr = 3e-4;
  double theta_beta1 = 0.5;
  double theta_beta2 = 0.999;
  double theta_weight_decay = 1e-3;
  double w_lr = 1e-3;
  double w_weight_decay = 1e-4;
  double tau_init = 5.0;
  double tau_decay = 0.9;
  double tau_floor = 0.001;
  double grad_clip = 5.0;
  std::int64_t micro_nodes = 5;  // M
  std::int64_t blocks = 4;       // B
  std::int64_t hidden = 32;      // D
  double partial_channel_fraction = 0.25;
  /// Residual h_0 + h_{M-1} around every block.
  bool residual = true;
  /// Share of the training windows used as pseudo-training data; the rest is pseudo-validation.
  double pseudo_split = 0.5;
  std::uint64_t seed = 7;
  bool no_temperature = false;
  bool no_macro = false;
  LossKind loss = LossKind::MAE;

  void validate() const;
  /// Applies the keys this config knows; others are ignored. Throws std::invalid_argument on bad values.
  void apply(const KeyValues& kv);
  KeyValues to_key_values() const;
  static bool knows(const std::string& key);
};

/// max(tau_init * decay^epoch, floor), the temperature used during epoch `epoch` (0-based).
double tau_at_epoch(const SearchConfig& cfg, std::int64_t epoch);

struct SearchLogRecord {
  std::int64_t epoch = 0;
  double tau = 0.0;
  double loss_train = 0.0;
  double loss_val = 0.0;
  double sharpness = 0.0;
  std::int64_t skipped_steps = 0;
};

std::string log_record_to_json(const SearchLogRecord& r);
SearchLogRecord log_record_from_json(const std::string& line);
std::vector<SearchLogRecord> read_search_log(const std::filesystem::path& path);

struct SearchResult {
  Genotype genotype;
  std::vector<SearchLogRecord> log;
  std::int64_t best_epoch = -1;
  double best_val_loss = 0.0;
  double final_sharpness = 0.0;
};

struct SearchRunOptions {
  std::string dataset_name;
  /// Checkpoint directory written after every epoch; empty disables checkpointing.
  std::filesystem::path checkpoint_dir;
  /// Continue from checkpoint_dir if it holds a checkpoint.
  bool resume = false;
  /// Stop after this many completed epochs (for interrupted runs); negative means run to the end.
  std::int64_t stop_after = -1;
  std::function<void(const SearchLogRecord&)> on_epoch;
};

/// Loss between standardized model output and original-unit targets.
ag::Var forecast_loss(const ag::Var& standardized_pred, const Tensor& targets, const Scaler& scaler, LossKind kind);

/// Supernet, optimizers and bookkeeping for one search run.
class SearchState {
 public:
  SearchState(const SearchConfig& cfg, const NetworkSpec& spec, const GraphContext& graph, const Scaler& scaler);

  /// One update of Theta on a pseudo-validation batch with w frozen. Returns the batch loss.
  double theta_step(const Tensor& inputs, const Tensor& targets);
  /// One update of w on a pseudo-training batch with Theta frozen. Returns the batch loss.
  double w_step(const Tensor& inputs, const Tensor& targets);

  SuperNet& net() { return *net_; }
  const SuperNet& net() const { return *net_; }
  Adam& theta_optimizer() { return theta_opt_; }
  Adam& w_optimizer() { return w_opt_; }
  const SearchConfig& config() const { return cfg_; }
  /// Steps skipped because of non-finite gradients.
  std::int64_t skipped_steps() const { return skipped_; }

  std::vector<std::pair<std::string, Tensor*>> tensors();

 private:
  double step(Adam& opt, const ParamList& active, const ParamList& frozen, const Tensor& inputs, const Tensor& targets,
              bool clip);

  SearchConfig cfg_;
  Scaler scaler_;
  std::unique_ptr<SuperNet> net_;
  Adam theta_opt_;
  Adam w_opt_;
  std::int64_t skipped_ = 0;
};

/// Graph operators of a dataset; a dataset without adjacency is treated as a graph of isolated self-loops.
GraphContext dataset_graph(const CtsDataset& ds, const OperatorHyper& hyper = {});

NetworkSpec search_network_spec(const SearchConfig& cfg, const WindowSet& windows);

/// Alternating first-order search over the pseudo split of `splits.train`.
SearchResult joint_search(const DatasetSplits& splits, const GraphContext& graph, const SearchConfig& cfg,
                          const SearchRunOptions& options = {});

/// Searches a single shared ST-block and stacks it on a chain backbone.
SearchResult search_no_macro(const DatasetSplits& splits, const GraphContext& graph, SearchConfig cfg,
                             const SearchRunOptions& options = {});

struct TrainConfig {
  std::int64_t max_epochs = 100;
  std::int64_t patience = 15;
  std::int64_t batch_size = 32;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double grad_clip = 5.0;
  std::uint64_t seed = 7;
  LossKind loss = LossKind::MAE;
  std::vector<std::int64_t> horizons{3, 6, 12};
  bool residual = true;
  /// Lets genotypes use the reference-only operators (operator comparison runs).
  bool allow_reference_ops = false;

  void validate() const;
  void apply(const KeyValues& kv);
  KeyValues to_key_values() const;
  static bool knows(const std::string& key);
};

struct TrainEpoch {
  std::int64_t epoch = 0;
  double loss_train = 0.0;
  double loss_val = 0.0;
};

struct TrainResult {
  std::unique_ptr<DiscreteNet> model;
  MetricsReport report;
  std::vector<TrainEpoch> history;
  std::int64_t best_epoch = -1;
  double best_val_loss = 0.0;
  bool diverged = false;
};

/// Validation loss (original units) of a model over a whole window set.
double validation_loss(ForecastModel& model, const WindowSet& windows, const Scaler& scaler, LossKind kind);

/// Fresh weights trained on splits.train with early stopping on splits.val; test metrics of the best epoch.
TrainResult train_from_scratch(const Genotype& genotype, const DatasetSplits& splits, const GraphContext& graph,
                               const TrainConfig& cfg, const OperatorHyper& hyper = {});

/// Saves or restores every weight and buffer of a model.
void save_model(ForecastModel& model, const std::filesystem::path& dir, const nlohmann::json& meta,
                const std::string& genotype_json);
void load_model_weights(ForecastModel& model, const Checkpoint& ck);

}  // namespace stnas
