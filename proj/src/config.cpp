#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "stnas/search.hpp"

namespace stnas {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw std::invalid_argument("config: " + key + " expects a number, got '" + v + "'");
  return out;
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  std::int64_t out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw std::invalid_argument("config: " + key + " expects an integer, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("config: " + key + " expects a boolean, got '" + v + "'");
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

const std::set<std::string> kSearchKeys{"epochs",     "batch_size", "theta_lr",     "theta_beta1",  "theta_beta2",
                                        "theta_weight_decay",       "w_lr",         "w_weight_decay",
                                        "tau_init",   "tau_factor",  "tau_floor",    "grad_clip",    "M",
                                        "B",          "D",          "partial_channel_fraction",     "pseudo_split", "residual", "merge",
                                        "seed",       "no_temperature",             "no_macro",     "loss"};

const std::set<std::string> kTrainKeys{"train_epochs",       "patience",        "train_batch_size", "train_lr",
                                       "train_weight_decay", "train_grad_clip", "seed",             "loss",
                                       "horizons",           "residual"};

}  // namespace

LossKind loss_kind_from_string(const std::string& s) {
  if (s == "mae") return LossKind::MAE;
  if (s == "mse") return LossKind::MSE;
  throw std::invalid_argument("unknown loss '" + s + "' (expected mae or mse)");
}

std::string to_string(LossKind k) { return k == LossKind::MAE ? "mae" : "mse"; }

KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file " + path.string());
  KeyValues kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    }
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

void SearchConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("search: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("search: batch_size must be >= 1");
  if (!(theta_lr > 0.0) || !(w_lr > 0.0)) throw std::invalid_argument("search: learning rates must be positive");
  if (!(theta_beta1 >= 0.0 && theta_beta1 < 1.0 && theta_beta2 >= 0.0 && theta_beta2 < 1.0)) {
    throw std::invalid_argument("search: betas must be in [0, 1)");
  }
  if (theta_weight_decay < 0.0 || w_weight_decay < 0.0) throw std::invalid_argument("search: weight decay must be >= 0");
  if (!(tau_init > 0.0) || !(tau_floor > 0.0)) throw std::invalid_argument("search: temperatures must be positive");
  if (!(tau_decay > 0.0 && tau_decay < 1.0)) throw std::invalid_argument("search: tau_factor must be in (0, 1)");
  if (!(grad_clip > 0.0)) throw std::invalid_argument("search: grad_clip must be positive");
  if (micro_nodes < 2) throw std::invalid_argument("search: M must be >= 2");
  if (blocks < 1) throw std::invalid_argument("search: B must be >= 1");
  if (hidden < 1) throw std::invalid_argument("search: D must be >= 1");
  if (!(partial_channel_fraction > 0.0 && partial_channel_fraction <= 1.0)) {
    throw std::invalid_argument("search: partial_channel_fraction must be in (0, 1]");
  }
  if (!(pseudo_split > 0.0 && pseudo_split < 1.0)) throw std::invalid_argument("search: pseudo_split must be in (0, 1)");
}

bool SearchConfig::knows(const std::string& key) { return kSearchKeys.count(key) > 0; }

void SearchConfig::apply(const KeyValues& kv) {
  for (const auto& [k, v] : kv) {
    if (k == "epochs") epochs = parse_int(k, v);
    else if (k == "batch_size") batch_size = parse_int(k, v);
    else if (k == "theta_lr") theta_lr = parse_double(k, v);
    else if (k == "theta_beta1") theta_beta1 = parse_double(k, v);
    else if (k == "theta_beta2") theta_beta2 = parse_double(k, v);
    else if (k == "theta_weight_decay") theta_weight_decay = parse_double(k, v);
    else if (k == "w_lr") w_lr = parse_double(k, v);
    else if (k == "w_weight_decay") w_weight_decay = parse_double(k, v);
    else if (k == "tau_init") tau_init = parse_double(k, v);
    else if (k == "tau_factor") tau_decay = parse_double(k, v);
    else if (k == "tau_floor") tau_floor = parse_double(k, v);
    else if (k == "grad_clip") grad_clip = parse_double(k, v);
    else if (k == "M") micro_nodes = parse_int(k, v);
    else if (k == "B") blocks = parse_int(k, v);
    else if (k == "D") hidden = parse_int(k, v);
    else if (k == "partial_channel_fraction") partial_channel_fraction = parse_double(k, v);
    else if (k == "residual") residual = parse_bool(k, v);
    else if (k == "merge") {
      if (v != "sum") throw std::invalid_argument("config: merge supports only 'sum'");
    }
    else if (k == "pseudo_split") pseudo_split = parse_double(k, v);
    else if (k == "seed") seed = static_cast<std::uint64_t>(parse_int(k, v));
    else if (k == "no_temperature") no_temperature = parse_bool(k, v);
    else if (k == "no_macro") no_macro = parse_bool(k, v);
    else if (k == "loss") loss = loss_kind_from_string(v);
  }
}

KeyValues SearchConfig::to_key_values() const {
  return {{"epochs", std::to_string(epochs)},
          {"batch_size", std::to_string(batch_size)},
          {"theta_lr", fmt(theta_lr)},
          {"theta_beta1", fmt(theta_beta1)},
          {"theta_beta2", fmt(theta_beta2)},
          {"theta_weight_decay", fmt(theta_weight_decay)},
          {"w_lr", fmt(w_lr)},
          {"w_weight_decay", fmt(w_weight_decay)},
          {"tau_init", fmt(tau_init)},
          {"tau_factor", fmt(tau_decay)},
          {"tau_floor", fmt(tau_floor)},
          {"grad_clip", fmt(grad_clip)},
          {"M", std::to_string(micro_nodes)},
          {"B", std::to_string(blocks)},
          {"D", std::to_string(hidden)},
          {"partial_channel_fraction", fmt(partial_channel_fraction)},
          {"residual", residual ? "true" : "false"},
          {"merge", "sum"},
          {"pseudo_split", fmt(pseudo_split)},
          {"seed", std::to_string(seed)},
          {"no_temperature", no_temperature ? "true" : "false"},
          {"no_macro", no_macro ? "true" : "false"},
          {"loss", to_string(loss)}};
}

void TrainConfig::validate() const {
  if (max_epochs < 1) throw std::invalid_argument("train: train_epochs must be >= 1");
  if (patience < 1) throw std::invalid_argument("train: patience must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("train: train_batch_size must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("train: train_lr must be positive");
  if (weight_decay < 0.0) throw std::invalid_argument("train: train_weight_decay must be >= 0");
  if (!(grad_clip > 0.0)) throw std::invalid_argument("train: train_grad_clip must be positive");
  for (auto h : horizons) {
    if (h < 1) throw std::invalid_argument("train: horizons must be >= 1");
  }
}

bool TrainConfig::knows(const std::string& key) { return kTrainKeys.count(key) > 0; }

void TrainConfig::apply(const KeyValues& kv) {
  for (const auto& [k, v] : kv) {
    if (k == "train_epochs") max_epochs = parse_int(k, v);
    else if (k == "patience") patience = parse_int(k, v);
    else if (k == "train_batch_size") batch_size = parse_int(k, v);
    else if (k == "train_lr") lr = parse_double(k, v);
    else if (k == "train_weight_decay") weight_decay = parse_double(k, v);
    else if (k == "train_grad_clip") grad_clip = parse_double(k, v);
    else if (k == "seed") seed = static_cast<std::uint64_t>(parse_int(k, v));
    else if (k == "loss") loss = loss_kind_from_string(v);
    else if (k == "residual") residual = parse_bool(k, v);
    else if (k == "horizons") {
      horizons.clear();
      std::stringstream ss(v);
      std::string item;
      while (std::getline(ss, item, ',')) {
        if (!trim(item).empty()) horizons.push_back(parse_int(k, trim(item)));
      }
    }
  }
}

KeyValues TrainConfig::to_key_values() const {
  std::string hs;
  for (std::size_t i = 0; i < horizons.size(); ++i) hs += (i ? "," : "") + std::to_string(horizons[i]);
  return {{"train_epochs", std::to_string(max_epochs)},
          {"patience", std::to_string(patience)},
          {"train_batch_size", std::to_string(batch_size)},
          {"train_lr", fmt(lr)},
          {"train_weight_decay", fmt(weight_decay)},
          {"train_grad_clip", fmt(grad_clip)},
          {"seed", std::to_string(seed)},
          {"loss", to_string(loss)},
          {"horizons", hs},
          {"residual", residual ? "true" : "false"}};
}

}  // namespace stnas
