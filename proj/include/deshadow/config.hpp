#pragma once

// Line-oriented "key = value" training configuration and the phase plan
// derived from it.

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "deshadow/cascade.hpp"
#include "deshadow/losses.hpp"
#include "deshadow/optim.hpp"
#include "deshadow/schedule.hpp"
#include "deshadow/synth.hpp"

namespace deshadow {

class ConfigError : public Error {
 public:
  using Error::Error;
};

inline constexpr int kFullAdaptEpochs = 100;
inline const std::vector<int> kFullEnsembleEpochs{35, 40, 45, 65, 80};

/// Maps the reference ensemble epochs onto an adaptation run of `length`
/// epochs. Collisions after rounding move to the next free epoch.
inline std::vector<int> scale_ensemble_epochs(const std::vector<int>& epochs,
                                              int reference_length, int length) {
  if (length < static_cast<int>(epochs.size())) {
    throw ConfigError("adaptation run of " + std::to_string(length) +
                      " epochs cannot hold " + std::to_string(epochs.size()) +
                      " distinct ensemble checkpoints");
  }
  std::vector<int> out;
  int last = 0;
  for (int e : epochs) {
    int s = static_cast<int>(std::lround(static_cast<double>(e) * length /
                                         static_cast<double>(reference_length)));
    s = std::max({s, 1, last + 1});
    out.push_back(s);
    last = s;
  }
  // Pull back from the end if bumping ran past the last epoch.
  for (int i = static_cast<int>(out.size()) - 1, cap = length; i >= 0; --i, --cap) {
    out[static_cast<std::size_t>(i)] = std::min(out[static_cast<std::size_t>(i)], cap);
  }
  return out;
}

enum class DataSource { misaligned, aligned, adaptation };

inline std::string to_string(DataSource d) {
  switch (d) {
    case DataSource::misaligned: return "misaligned";
    case DataSource::aligned: return "aligned";
    case DataSource::adaptation: return "adaptation";
  }
  return "?";
}

struct PhaseSpec {
  std::string tag;
  std::size_t stages = 1;
  DataSource data = DataSource::aligned;
  std::size_t epochs = 1;
  Schedule schedule;
  LossWeights weights;
  // Adaptation phases keep snapshots at these (1-based) epochs.
  std::vector<int> ensemble_epochs;
};

using PhasePlan = std::vector<PhaseSpec>;

struct TrainConfig {
  std::uint64_t seed = 7;
  std::size_t k_stages = 3;
  ArchConfig arch;

  std::size_t crop_size = 64;
  std::size_t batch_size = 0;  // 0: 4 for K <= 3, 2 for K >= 4

  LossWeights weights;
  AdamWConfig adamw;

  // Restart schedule for the phases before adaptation.
  Schedule schedule = restart_schedule();
  // Adaptation: single cosine decay.
  double adapt_lr_peak = 5e-5;
  double adapt_lr_min = 1e-6;

  std::string epoch_scale = "desk";  // desk | full
  std::size_t epochs_phase1 = 50;
  std::size_t epochs_phase2 = 150;
  std::size_t epochs_phase3 = 50;
  std::size_t epochs_adapt = 10;
  std::size_t epochs_ablate = 10;
  double ablate_lr_peak = 5e-5;
  double ablate_lr_min = 1e-6;
  std::vector<int> ensemble_epochs;  // empty: scaled reference epochs

  // Synthetic data, used for any dataset_* left empty.
  std::uint64_t data_seed = 11;
  std::size_t scene_size = 128;
  std::size_t train_pairs = 200;
  std::size_t val_pairs = 40;
  double misalign_px = 2.0;

  std::string dataset_misaligned;
  std::string dataset_aligned;
  std::string dataset_adapt;

  std::size_t batch_for(std::size_t k) const {
    if (batch_size) return batch_size;
    return k <= 3 ? 4 : 2;
  }

  std::vector<int> resolved_ensemble_epochs() const {
    if (!ensemble_epochs.empty()) return ensemble_epochs;
    return scale_ensemble_epochs(kFullEnsembleEpochs, kFullAdaptEpochs,
                                 static_cast<int>(epochs_adapt));
  }

  void set(const std::string& key, const std::string& value);
  std::vector<std::pair<std::string, std::string>> entries() const;
  void validate() const;
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Shortest text that parses back to the same double.
inline std::string fmt_double(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    auto d = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a nonnegative integer, got '" +
                      v + "'");
  }
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(static_cast<int>(parse_uint(key, item)));
  }
  return out;
}

}  // namespace detail

inline void TrainConfig::set(const std::string& key, const std::string& raw) {
  const std::string v = detail::trim(raw);
  auto num = [&] { return detail::parse_double(key, v); };
  auto uint = [&] { return detail::parse_uint(key, v); };
  if (key == "seed") seed = uint();
  else if (key == "k_stages") k_stages = uint();
  else if (key == "width") arch.width = uint();
  else if (key == "semantic_channels") arch.semantic_channels = uint();
  else if (key == "guidance") arch.guidance = static_cast<unsigned>(uint());
  else if (key == "crop_size") crop_size = uint();
  else if (key == "batch_size") batch_size = uint();
  else if (key == "lambda_mse") weights.mse = num();
  else if (key == "lambda_perc") weights.perc = num();
  else if (key == "lambda_hessian") weights.hessian = num();
  else if (key == "lambda_stage") weights.stage = num();
  else if (key == "lambda_contraction") weights.contraction = num();
  else if (key == "loss_reduction") {
    if (v != "sum" && v != "mean") {
      throw ConfigError("config key 'loss_reduction': expected sum or mean, got '" + v + "'");
    }
    weights.reduction = parse_reduction(v);
  }
  else if (key == "beta1") adamw.beta1 = num();
  else if (key == "beta2") adamw.beta2 = num();
  else if (key == "weight_decay") adamw.weight_decay = num();
  else if (key == "clip_norm") adamw.clip_norm = num();
  else if (key == "lr_peak") schedule.peak_lr = num();
  else if (key == "lr_min") schedule.min_lr = num();
  else if (key == "lr_period") schedule.period_epochs = num();
  else if (key == "lr_warmup") schedule.warmup_epochs = num();
  else if (key == "lr_warmup_start") schedule.warmup_start_lr = num();
  else if (key == "adapt_lr_peak") adapt_lr_peak = num();
  else if (key == "adapt_lr_min") adapt_lr_min = num();
  else if (key == "epoch_scale") {
    if (v != "desk" && v != "full") {
      throw ConfigError("config key 'epoch_scale': expected desk or full, got '" + v + "'");
    }
    epoch_scale = v;
    if (v == "full") {
      epochs_phase1 = 500;
      epochs_phase2 = 1500;
      epochs_phase3 = 500;
      epochs_adapt = 100;
      schedule.period_epochs = 200;
      schedule.warmup_epochs = 5;
    }
  }
  else if (key == "epochs_phase1") epochs_phase1 = uint();
  else if (key == "epochs_phase2") epochs_phase2 = uint();
  else if (key == "epochs_phase3") epochs_phase3 = uint();
  else if (key == "epochs_adapt") epochs_adapt = uint();
  else if (key == "epochs_ablate") epochs_ablate = uint();
  else if (key == "ablate_lr_peak") ablate_lr_peak = num();
  else if (key == "ablate_lr_min") ablate_lr_min = num();
  else if (key == "ensemble_epochs") ensemble_epochs = detail::parse_int_list(key, v);
  else if (key == "data_seed") data_seed = uint();
  else if (key == "scene_size") scene_size = uint();
  else if (key == "train_pairs") train_pairs = uint();
  else if (key == "val_pairs") val_pairs = uint();
  else if (key == "misalign_px") misalign_px = num();
  else if (key == "dataset_misaligned") dataset_misaligned = v;
  else if (key == "dataset_aligned") dataset_aligned = v;
  else if (key == "dataset_adapt") dataset_adapt = v;
  else throw ConfigError("unknown config key '" + key + "'");
}

inline std::vector<std::pair<std::string, std::string>> TrainConfig::entries() const {
  using detail::fmt_double;
  std::string ens;
  for (int e : resolved_ensemble_epochs()) ens += (ens.empty() ? "" : ",") + std::to_string(e);
  return {
      {"seed", std::to_string(seed)},
      {"k_stages", std::to_string(k_stages)},
      {"width", std::to_string(arch.width)},
      {"semantic_channels", std::to_string(arch.semantic_channels)},
      {"guidance", std::to_string(arch.guidance)},
      {"crop_size", std::to_string(crop_size)},
      {"batch_size", std::to_string(batch_size)},
      {"lambda_mse", fmt_double(weights.mse)},
      {"lambda_perc", fmt_double(weights.perc)},
      {"lambda_hessian", fmt_double(weights.hessian)},
      {"lambda_stage", fmt_double(weights.stage)},
      {"lambda_contraction", fmt_double(weights.contraction)},
      {"loss_reduction", to_string(weights.reduction)},
      {"beta1", fmt_double(adamw.beta1)},
      {"beta2", fmt_double(adamw.beta2)},
      {"weight_decay", fmt_double(adamw.weight_decay)},
      {"clip_norm", fmt_double(adamw.clip_norm)},
      {"lr_peak", fmt_double(schedule.peak_lr)},
      {"lr_min", fmt_double(schedule.min_lr)},
      {"lr_period", fmt_double(schedule.period_epochs)},
      {"lr_warmup", fmt_double(schedule.warmup_epochs)},
      {"lr_warmup_start", fmt_double(schedule.warmup_start_lr)},
      {"adapt_lr_peak", fmt_double(adapt_lr_peak)},
      {"adapt_lr_min", fmt_double(adapt_lr_min)},
      {"epoch_scale", epoch_scale},
      {"epochs_phase1", std::to_string(epochs_phase1)},
      {"epochs_phase2", std::to_string(epochs_phase2)},
      {"epochs_phase3", std::to_string(epochs_phase3)},
      {"epochs_adapt", std::to_string(epochs_adapt)},
      {"epochs_ablate", std::to_string(epochs_ablate)},
      {"ablate_lr_peak", fmt_double(ablate_lr_peak)},
      {"ablate_lr_min", fmt_double(ablate_lr_min)},
      {"ensemble_epochs", ens},
      {"data_seed", std::to_string(data_seed)},
      {"scene_size", std::to_string(scene_size)},
      {"train_pairs", std::to_string(train_pairs)},
      {"val_pairs", std::to_string(val_pairs)},
      {"misalign_px", fmt_double(misalign_px)},
      {"dataset_misaligned", dataset_misaligned},
      {"dataset_aligned", dataset_aligned},
      {"dataset_adapt", dataset_adapt},
  };
}

inline void TrainConfig::validate() const {
  if (k_stages == 0) throw ConfigError("k_stages must be at least 1");
  if (arch.width == 0 || arch.semantic_channels == 0) {
    throw ConfigError("width and semantic_channels must be positive");
  }
  if (arch.guidance > guidance_mask::all) throw ConfigError("guidance mask out of range");
  if (crop_size == 0 || crop_size % kSpatialMultiple) {
    throw ConfigError("crop_size must be a positive multiple of 32");
  }
  if (crop_size > scene_size && (dataset_aligned.empty() || dataset_misaligned.empty())) {
    throw ConfigError("crop_size exceeds scene_size");
  }
  if (scene_size % kSpatialMultiple) throw ConfigError("scene_size must be a multiple of 32");
  try {
    weights.validate();
    schedule.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (!(adapt_lr_min <= adapt_lr_peak)) throw ConfigError("adapt_lr_min exceeds adapt_lr_peak");
  if (!(ablate_lr_min <= ablate_lr_peak)) throw ConfigError("ablate_lr_min exceeds ablate_lr_peak");
  if (epochs_phase1 == 0 || epochs_adapt == 0 || epochs_ablate == 0 ||
      (k_stages >= 2 && epochs_phase2 == 0) || (k_stages >= 3 && epochs_phase3 == 0)) {
    throw ConfigError("every scheduled phase needs at least one epoch");
  }
  for (int e : resolved_ensemble_epochs()) {
    if (e < 1 || e > static_cast<int>(epochs_adapt)) {
      throw ConfigError("ensemble epoch " + std::to_string(e) +
                        " outside the adaptation run of " + std::to_string(epochs_adapt) +
                        " epochs");
    }
  }
}

inline TrainConfig parse_config(const std::string& text, TrainConfig cfg = {}) {
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    cfg.set(detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return cfg;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

inline std::string render_config(const TrainConfig& cfg) {
  std::string out;
  for (const auto& [k, v] : cfg.entries()) out += k + " = " + v + "\n";
  return out;
}

/// Phase 1: single stage on misaligned pairs (L_pre only).
/// Phase 2: two stages on aligned pairs. Phase 3: k_stages on aligned pairs.
/// Adaptation: cosine decay on the adaptation split with ensemble snapshots.
inline PhasePlan build_plan(const TrainConfig& cfg) {
  PhasePlan plan;
  LossWeights pre = cfg.weights;
  pre.hessian = 0.0;
  plan.push_back({"phase1", 1, DataSource::misaligned, cfg.epochs_phase1, cfg.schedule, pre, {}});
  if (cfg.k_stages >= 2) {
    plan.push_back({"phase2", 2, DataSource::aligned, cfg.epochs_phase2, cfg.schedule,
                    cfg.weights, {}});
  }
  if (cfg.k_stages >= 3) {
    plan.push_back({"phase3", cfg.k_stages, DataSource::aligned, cfg.epochs_phase3,
                    cfg.schedule, cfg.weights, {}});
  }
  Schedule anneal = anneal_schedule(static_cast<double>(cfg.epochs_adapt));
  anneal.peak_lr = anneal.warmup_start_lr = cfg.adapt_lr_peak;
  anneal.min_lr = cfg.adapt_lr_min;
  plan.push_back({"adapt", cfg.k_stages, DataSource::adaptation, cfg.epochs_adapt, anneal,
                  cfg.weights, cfg.resolved_ensemble_epochs()});
  return plan;
}

}  // namespace deshadow
