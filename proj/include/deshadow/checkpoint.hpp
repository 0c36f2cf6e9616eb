#pragma once

// Checkpoint directory layout:
//   meta                     key=value text
//   <parameter name>.rtn     one RTN1 blob per parameter tensor
//   opt_m.<name>.rtn, opt_v.<name>.rtn   optional AdamW moments

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "deshadow/cascade.hpp"
#include "deshadow/optim.hpp"
#include "deshadow/rtn.hpp"
#include "deshadow/schedule.hpp"

namespace deshadow {

inline constexpr const char* kCheckpointFormat = "deshadow-checkpoint-1";

struct OptimizerSnapshot {
  std::uint64_t steps = 0;
  std::vector<std::vector<double>> m, v;

  static OptimizerSnapshot of(const AdamW& opt) {
    return {opt.steps(), opt.first_moments(), opt.second_moments()};
  }
  bool operator==(const OptimizerSnapshot&) const = default;
};

struct Checkpoint {
  Cascade model;
  std::string phase;
  std::size_t epoch = 0;
  std::uint64_t seed = 0;
  Schedule schedule;
  double val_psnr = 0.0;
  double val_ssim = 0.0;
  std::optional<OptimizerSnapshot> optimizer;

  std::size_t stages() const { return model.size(); }

  /// Stable label, e.g. "adapt-e007".
  std::string id() const {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%03zu", epoch);
    return phase + "-e" + buf;
  }
};

namespace detail {

inline std::string meta_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::map<std::string, std::string> read_meta(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read checkpoint meta " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError(path.string() + ": malformed line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

inline const std::string& meta_get(const std::map<std::string, std::string>& kv,
                                   const std::string& key,
                                   const std::filesystem::path& dir) {
  auto it = kv.find(key);
  if (it == kv.end()) throw IoError("checkpoint " + dir.string() + ": meta lacks '" + key + "'");
  return it->second;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ck) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const ArchConfig& a = ck.model.arch();
  std::ofstream os(dir / "meta");
  if (!os) throw IoError("cannot write checkpoint meta in " + dir.string());
  os << "format=" << kCheckpointFormat << '\n'
     << "stages=" << ck.model.size() << '\n'
     << "width=" << a.width << '\n'
     << "semantic_channels=" << a.semantic_channels << '\n'
     << "guidance=" << a.guidance << '\n'
     << "phase=" << ck.phase << '\n'
     << "epoch=" << ck.epoch << '\n'
     << "seed=" << ck.seed << '\n'
     << "schedule_kind=" << to_string(ck.schedule.kind) << '\n'
     << "schedule_peak_lr=" << detail::meta_double(ck.schedule.peak_lr) << '\n'
     << "schedule_min_lr=" << detail::meta_double(ck.schedule.min_lr) << '\n'
     << "schedule_period=" << detail::meta_double(ck.schedule.period_epochs) << '\n'
     << "schedule_warmup=" << detail::meta_double(ck.schedule.warmup_epochs) << '\n'
     << "schedule_warmup_start=" << detail::meta_double(ck.schedule.warmup_start_lr) << '\n'
     << "val_psnr=" << detail::meta_double(ck.val_psnr) << '\n'
     << "val_ssim=" << detail::meta_double(ck.val_ssim) << '\n';
  if (ck.optimizer) os << "optimizer_steps=" << ck.optimizer->steps << '\n';
  os.close();
  if (!os) throw IoError("write failed for " + (dir / "meta").string());
  const auto params = ck.model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    save_rtn(dir / (params[i].name + ".rtn"), params[i].value);
    if (ck.optimizer) {
      const Shape& s = params[i].value.shape();
      save_rtn(dir / ("opt_m." + params[i].name + ".rtn"), Tensor(s, ck.optimizer->m.at(i)));
      save_rtn(dir / ("opt_v." + params[i].name + ".rtn"), Tensor(s, ck.optimizer->v.at(i)));
    }
  }
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("checkpoint directory " + dir.string() + " not found");
  const auto kv = detail::read_meta(dir / "meta");
  auto get = [&](const std::string& k) -> const std::string& { return detail::meta_get(kv, k, dir); };
  auto num = [&](const std::string& k) {
    try {
      return std::stod(get(k));
    } catch (const std::invalid_argument&) {
      throw IoError("checkpoint " + dir.string() + ": bad value for " + k);
    }
  };
  auto uint = [&](const std::string& k) {
    try {
      return static_cast<std::uint64_t>(std::stoull(get(k)));
    } catch (const std::invalid_argument&) {
      throw IoError("checkpoint " + dir.string() + ": bad value for " + k);
    }
  };
  if (get("format") != kCheckpointFormat) {
    throw IoError("checkpoint " + dir.string() + ": unsupported format '" + get("format") + "'");
  }
  ArchConfig arch;
  arch.width = uint("width");
  arch.semantic_channels = uint("semantic_channels");
  arch.guidance = static_cast<unsigned>(uint("guidance"));
  const std::size_t K = uint("stages");
  if (K == 0) throw IoError("checkpoint " + dir.string() + ": zero stages");

  std::vector<StageNet> stages(K, StageNet(arch));
  Cascade model(arch, std::move(stages));
  const auto params = model.parameters();
  std::optional<OptimizerSnapshot> opt;
  if (kv.count("optimizer_steps")) {
    opt.emplace();
    opt->steps = uint("optimizer_steps");
  }
  for (const auto& p : params) {
    const Tensor t = load_rtn(dir / (p.name + ".rtn"));
    if (t.shape() != p.value.shape()) {
      throw ShapeError("checkpoint " + dir.string() + ": parameter " + p.name + " has shape " +
                       shape_str(t.shape()) + ", expected " + shape_str(p.value.shape()));
    }
    Tensor dst = p.value;
    auto d = dst.mutable_data();
    std::copy(t.data().begin(), t.data().end(), d.begin());
    if (opt) {
      opt->m.push_back(load_rtn(dir / ("opt_m." + p.name + ".rtn")).values());
      opt->v.push_back(load_rtn(dir / ("opt_v." + p.name + ".rtn")).values());
      if (opt->m.back().size() != p.value.numel() || opt->v.back().size() != p.value.numel()) {
        throw ShapeError("checkpoint " + dir.string() + ": optimizer moments for " + p.name +
                         " do not match the parameter");
      }
    }
  }

  Checkpoint ck;
  ck.model = std::move(model);
  ck.phase = get("phase");
  ck.epoch = uint("epoch");
  ck.seed = uint("seed");
  ck.schedule.kind = parse_schedule_kind(get("schedule_kind"));
  ck.schedule.peak_lr = num("schedule_peak_lr");
  ck.schedule.min_lr = num("schedule_min_lr");
  ck.schedule.period_epochs = num("schedule_period");
  ck.schedule.warmup_epochs = num("schedule_warmup");
  ck.schedule.warmup_start_lr = num("schedule_warmup_start");
  ck.val_psnr = num("val_psnr");
  ck.val_ssim = num("val_ssim");
  ck.optimizer = std::move(opt);
  return ck;
}

}  // namespace deshadow
