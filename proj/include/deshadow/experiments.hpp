#pragma once

// Ablation suites: every variant is fine-tuned from one shared single-stage
// pretrained checkpoint with the same seed, data and schedule.

#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "deshadow/checkpoint.hpp"
#include "deshadow/config.hpp"
#include "deshadow/image_io.hpp"
#include "deshadow/metrics.hpp"
#include "deshadow/trainer.hpp"

namespace deshadow {

struct Variant {
  std::string name;
  std::size_t stages = 3;
  LossWeights weights;
  unsigned guidance = guidance_mask::all;
};

inline std::vector<Variant> stage_suite(const LossWeights& w, std::size_t max_k = 5) {
  std::vector<Variant> v;
  for (std::size_t k = 1; k <= max_k; ++k) v.push_back({"K=" + std::to_string(k), k, w, guidance_mask::all});
  return v;
}

inline std::vector<Variant> component_suite(const LossWeights& w, std::size_t k = 3) {
  LossWeights no_c = w;
  no_c.contraction = 0.0;
  using namespace guidance_mask;
  return {
      {"full", k, w, all},
      {"w/o contraction", k, no_c, all},
      {"w/o semantic", k, w, depth | geometry},
      {"w/o depth & normals", k, w, semantic},
      {"w/o depth", k, w, semantic | geometry},
  };
}

struct AblationSettings {
  std::size_t epochs = 10;
  Schedule schedule = anneal_schedule(10);
  std::size_t crop_size = 64;
  std::size_t batch_size = 0;  // 0: 4 for K <= 3, 2 for K >= 4
  AdamWConfig adamw;
  std::uint64_t seed = 7;
  std::ostream* progress = nullptr;

  static AblationSettings from(const TrainConfig& cfg) {
    AblationSettings s;
    s.epochs = cfg.epochs_ablate;
    s.schedule = anneal_schedule(static_cast<double>(cfg.epochs_ablate));
    s.schedule.peak_lr = s.schedule.warmup_start_lr = cfg.ablate_lr_peak;
    s.schedule.min_lr = cfg.ablate_lr_min;
    s.crop_size = cfg.crop_size;
    s.batch_size = cfg.batch_size;
    s.adamw = cfg.adamw;
    s.seed = cfg.seed;
    return s;
  }
};

struct VariantResult {
  Variant variant;
  Checkpoint best;
  double psnr = 0.0;
  double ssim = 0.0;
  StageProfile profile;
  std::uint64_t init_fingerprint = 0;
  std::vector<Tensor> predictions;                 // clamped final outputs on val
  std::vector<std::vector<Tensor>> stage_outputs;  // per val sample, per stage (raw)
};

/// Starting model for a variant: the pretrained single stage, expanded to
/// the variant's depth, with the variant's guidance inputs.
inline Cascade variant_init(const Cascade& pretrained, const Variant& v) {
  Cascade base = v.stages > pretrained.size() ? expand_cascade(pretrained, v.stages) : pretrained;
  if (base.size() != v.stages) {
    throw Error("variant " + v.name + " needs " + std::to_string(v.stages) +
                " stages but the pretrained model has " + std::to_string(pretrained.size()));
  }
  ArchConfig arch = base.arch();
  arch.guidance = v.guidance;
  std::vector<StageNet> stages;
  for (std::size_t k = 0; k < base.size(); ++k) stages.push_back(base.stage(k));
  return Cascade(arch, std::move(stages));
}

inline VariantResult run_variant(const Cascade& pretrained, const Variant& v, const Dataset& data,
                                 const AblationSettings& s) {
  VariantResult r;
  r.variant = v;
  r.init_fingerprint = pretrained.fingerprint_parameters();
  PhaseSpec spec{v.name, v.stages, DataSource::aligned, s.epochs, s.schedule, v.weights, {}};
  TrainOptions t;
  t.crop_size = s.crop_size;
  t.batch_size = s.batch_size ? s.batch_size : (v.stages <= 3 ? 4 : 2);
  t.adamw = s.adamw;
  t.progress = s.progress;
  PhaseResult pr = train_phase(spec, data, variant_init(pretrained, v), s.seed, t);
  r.best = std::move(pr.best);

  const ReferenceProvider provider(r.best.model.arch().semantic_channels);
  const ValidationSet val(data.val, provider);
  r.predictions.resize(data.val.size());
  r.stage_outputs.resize(data.val.size());
  std::vector<StageErrors> errs(data.val.size());
  parallel_for(data.val.size(), [&](std::size_t i) {
    NoGradGuard no_grad;
    auto preds = r.best.model.forward_all(data.val[i].shadowed, val.bundles()[i]);
    errs[i] = stage_errors(preds, data.val[i].clean);
    r.predictions[i] = clamp(preds.back(), 0.0, 1.0);
    r.stage_outputs[i] = std::move(preds);
  });
  const MetricReport m = evaluate_pairs(r.predictions, val.targets());
  r.psnr = m.mean_psnr;
  r.ssim = m.mean_ssim;
  r.profile = summarize_stage_errors(errs);
  return r;
}

inline std::string variant_slug(const std::string& name) {
  std::string s;
  for (char c : name) {
    if (std::isalnum(static_cast<unsigned char>(c))) s.push_back(static_cast<char>(std::tolower(c)));
    else if (!s.empty() && s.back() != '_') s.push_back('_');
  }
  while (!s.empty() && s.back() == '_') s.pop_back();
  return s;
}

inline std::string ablation_header() {
  return "variant\tstages\tpsnr\tssim\tmonotone_fraction\tmean_d_first\tmean_d_last\tinit_fingerprint";
}

inline std::string ablation_row(const VariantResult& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s\t%zu\t%s\t%.6f\t%.6f\t%.6f\t%.6f\t%016llx",
                r.variant.name.c_str(), r.variant.stages, format_metric(r.psnr).c_str(), r.ssim,
                r.profile.monotone_fraction, r.profile.mean_d.front(), r.profile.mean_d.back(),
                static_cast<unsigned long long>(r.init_fingerprint));
  return buf;
}

/// Writes <dir>/pred/<id>.rtn and <dir>/stages/<id>_s<k>.rtn for a variant,
/// where ids are "val_0000", "val_0001", ...
inline void save_variant_outputs(const std::filesystem::path& dir, const VariantResult& r) {
  std::filesystem::create_directories(dir / "pred");
  std::filesystem::create_directories(dir / "stages");
  for (std::size_t i = 0; i < r.predictions.size(); ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "val_%04zu", i);
    save_rtn(dir / "pred" / (std::string(id) + ".rtn"), r.predictions[i]);
    for (std::size_t k = 0; k < r.stage_outputs[i].size(); ++k) {
      save_rtn(dir / "stages" / (std::string(id) + "_s" + std::to_string(k + 1) + ".rtn"),
               r.stage_outputs[i][k]);
    }
  }
}

}  // namespace deshadow
