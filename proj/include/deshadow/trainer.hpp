#pragma once

// Phase training loop, per-epoch validation with best-PSNR selection, and
// the multi-phase pipeline with warm-start expansion between phases.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "deshadow/cascade.hpp"
#include "deshadow/checkpoint.hpp"
#include "deshadow/config.hpp"
#include "deshadow/losses.hpp"
#include "deshadow/metrics.hpp"
#include "deshadow/optim.hpp"
#include "deshadow/parallel.hpp"
#include "deshadow/schedule.hpp"
#include "deshadow/synth.hpp"

namespace deshadow {

class PhaseError : public Error {
 public:
  PhaseError(const std::string& tag, const std::string& what)
      : Error("phase " + tag + ": " + what), tag_(tag) {}
  const std::string& tag() const { return tag_; }

 private:
  std::string tag_;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_psnr = 0.0;
  double val_ssim = 0.0;
  double lr = 0.0;
};

/// "epoch<TAB>train_loss<TAB>val_psnr<TAB>val_ssim<TAB>lr"
inline std::string format_epoch_line(const EpochRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu\t%.10g\t%s\t%s\t%.6e", r.epoch, r.train_loss,
                format_metric(r.val_psnr).c_str(), format_metric(r.val_ssim).c_str(), r.lr);
  return buf;
}

struct ValScore {
  double psnr = 0.0;
  double ssim = 0.0;
};

using Validator = std::function<ValScore(const Cascade&, std::size_t epoch)>;

/// Frozen validation split with its guidance computed once.
class ValidationSet {
 public:
  ValidationSet(const std::vector<ScenePair>& pairs, const GuidanceProvider& provider)
      : pairs_(&pairs) {
    std::vector<std::optional<GuidanceBundle>> tmp(pairs.size());
    parallel_for(pairs.size(), [&](std::size_t i) { tmp[i].emplace(provider.compute(pairs[i].shadowed)); });
    for (auto& b : tmp) bundles_.push_back(std::move(*b));
  }

  std::vector<Tensor> predict(const Cascade& model) const {
    std::vector<Tensor> out(pairs_->size());
    parallel_for(out.size(), [&](std::size_t i) {
      out[i] = model.predict((*pairs_)[i].shadowed, bundles_[i]);
    });
    return out;
  }

  std::vector<Tensor> targets() const {
    std::vector<Tensor> t;
    for (const auto& p : *pairs_) t.push_back(p.clean);
    return t;
  }

  ValScore score(const Cascade& model) const {
    const MetricReport r = evaluate_pairs(predict(model), targets());
    return {r.mean_psnr, r.mean_ssim};
  }

  std::vector<StageErrors> stage_errors_of(const Cascade& model) const {
    std::vector<StageErrors> errs(pairs_->size());
    parallel_for(errs.size(), [&](std::size_t i) {
      NoGradGuard no_grad;
      errs[i] = stage_errors(model.forward_all((*pairs_)[i].shadowed, bundles_[i]),
                             (*pairs_)[i].clean);
    });
    return errs;
  }

  const std::vector<ScenePair>& pairs() const { return *pairs_; }
  const std::vector<GuidanceBundle>& bundles() const { return bundles_; }

 private:
  const std::vector<ScenePair>* pairs_;
  std::vector<GuidanceBundle> bundles_;
};

struct TrainOptions {
  std::size_t crop_size = 64;
  std::size_t batch_size = 4;
  AdamWConfig adamw;
  const GuidanceProvider* provider = nullptr;  // default: ReferenceProvider
  Validator validator;                         // default: PSNR/SSIM on data.val
  std::filesystem::path log_path;              // per-epoch metrics log
  bool keep_optimizer_state = false;
  std::ostream* progress = nullptr;
};

struct PhaseResult {
  Checkpoint best;
  Cascade last;
  std::vector<EpochRecord> log;
  std::vector<Checkpoint> snapshots;  // at spec.ensemble_epochs
};

namespace detail {

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(i - 1)));
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

}  // namespace detail

/// One optimizer step over a batch. Each sample runs on a private replica of
/// the model; replica gradients are summed into `model` in batch order, so
/// the result does not depend on the worker count. Returns the summed loss.
inline double train_batch(Cascade& model, AdamW& opt, const std::vector<ScenePair>& batch,
                          const GuidanceProvider& provider, const LossWeights& weights,
                          double lr) {
  const std::size_t B = batch.size();
  std::vector<Cascade> replicas(B);
  std::vector<double> losses(B, 0.0);
  parallel_for(B, [&](std::size_t i) {
    replicas[i] = model;
    const GuidanceBundle g = provider.compute(batch[i].shadowed);
    const auto preds = replicas[i].forward_all(batch[i].shadowed, g);
    const LossTerms t = total_loss(preds, batch[i].clean, weights);
    losses[i] = t.total.item();
    backward(scale(t.total, 1.0 / static_cast<double>(B)));
  });
  opt.zero_grad();
  auto params = model.parameters();
  for (std::size_t i = 0; i < B; ++i) {
    const auto rp = replicas[i].parameters();
    for (std::size_t j = 0; j < params.size(); ++j) {
      if (!rp[j].value.has_grad()) continue;
      auto dst = params[j].value.mutable_grad();
      const auto src = rp[j].value.grad();
      for (std::size_t q = 0; q < dst.size(); ++q) dst[q] += src[q];
    }
  }
  opt.step(lr);
  return std::accumulate(losses.begin(), losses.end(), 0.0);
}

/// Trains `model` for spec.epochs epochs and returns the checkpoint with the
/// highest validation PSNR (earliest epoch on ties).
inline PhaseResult train_phase(const PhaseSpec& spec, const Dataset& data, Cascade model,
                               std::uint64_t seed, const TrainOptions& opts = {}) {
  if (data.train.empty()) throw PhaseError(spec.tag, "empty training split");
  if (!opts.validator && data.val.empty()) throw PhaseError(spec.tag, "empty validation split");
  if (spec.epochs == 0) throw PhaseError(spec.tag, "phase has zero epochs");
  if (model.size() != spec.stages) {
    throw PhaseError(spec.tag, "model has " + std::to_string(model.size()) +
                                   " stages, phase expects " + std::to_string(spec.stages));
  }
  if (opts.batch_size == 0) throw PhaseError(spec.tag, "batch size must be positive");
  spec.schedule.validate();
  spec.weights.validate();

  const ReferenceProvider fallback(model.arch().semantic_channels);
  const GuidanceProvider& provider = opts.provider ? *opts.provider : fallback;
  std::optional<ValidationSet> val;
  if (!opts.validator) val.emplace(data.val, provider);

  std::ofstream log;
  if (!opts.log_path.empty()) {
    if (opts.log_path.has_parent_path()) std::filesystem::create_directories(opts.log_path.parent_path());
    log.open(opts.log_path);
    if (!log) throw PhaseError(spec.tag, "cannot write metrics log " + opts.log_path.string());
  }

  AdamW opt(model.parameters(), opts.adamw);
  PhaseResult result;
  const std::size_t N = data.train.size(), B = std::min(opts.batch_size, N);
  const std::size_t steps = (N + B - 1) / B;

  for (std::size_t epoch = 1; epoch <= spec.epochs; ++epoch) {
    const std::uint64_t epoch_seed = mix_seed(seed, epoch);
    const auto order = detail::epoch_order(N, mix_seed(epoch_seed, 0));
    double loss_sum = 0.0;
    double lr = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
      std::vector<ScenePair> batch;
      for (std::size_t q = s * B; q < std::min(N, (s + 1) * B); ++q) {
        batch.push_back(random_crop(data.train[order[q]], opts.crop_size,
                                    mix_seed(epoch_seed, q + 1)));
      }
      lr = lr_at(spec.schedule, static_cast<double>(epoch - 1) +
                                    static_cast<double>(s) / static_cast<double>(steps));
      loss_sum += train_batch(model, opt, batch, provider, spec.weights, lr);
    }

    const ValScore score = opts.validator ? opts.validator(model, epoch) : val->score(model);
    EpochRecord rec{epoch, loss_sum / static_cast<double>(N), score.psnr, score.ssim, lr};
    result.log.push_back(rec);
    if (log) {
      log << format_epoch_line(rec) << '\n';
      log.flush();
    }
    if (opts.progress) {
      *opts.progress << spec.tag << " " << format_epoch_line(rec) << std::endl;
    }

    auto snapshot = [&] {
      Checkpoint ck;
      ck.model = model;
      ck.phase = spec.tag;
      ck.epoch = epoch;
      ck.seed = seed;
      ck.schedule = spec.schedule;
      ck.val_psnr = score.psnr;
      ck.val_ssim = score.ssim;
      if (opts.keep_optimizer_state) ck.optimizer = OptimizerSnapshot::of(opt);
      return ck;
    };
    if (epoch == 1 || score.psnr > result.best.val_psnr) result.best = snapshot();
    for (int e : spec.ensemble_epochs) {
      if (static_cast<std::size_t>(e) == epoch) result.snapshots.push_back(snapshot());
    }
  }
  result.last = std::move(model);
  return result;
}

struct PipelineOptions {
  ArchConfig arch;
  std::size_t crop_size = 64;
  std::size_t batch_size = 0;  // 0: 4 for K <= 3, 2 for K >= 4
  AdamWConfig adamw;
  const GuidanceProvider* provider = nullptr;
  std::filesystem::path out_dir;  // empty: nothing written
  std::ostream* progress = nullptr;
  // Starting model for the first phase; default is a fresh seeded cascade.
  std::optional<Cascade> init;

  static PipelineOptions from(const TrainConfig& cfg) {
    PipelineOptions o;
    o.arch = cfg.arch;
    o.crop_size = cfg.crop_size;
    o.batch_size = cfg.batch_size;
    o.adamw = cfg.adamw;
    return o;
  }
};

struct PipelineResult {
  std::vector<PhaseResult> phases;
  std::vector<Checkpoint> final_set;
};

using PipelineData = std::map<DataSource, const Dataset*>;

inline std::filesystem::path phase_dir(const std::filesystem::path& out, const std::string& tag) {
  return out / tag;
}

/// Runs the phases in order. A phase that asks for more stages than the
/// current model has starts from expand_cascade of the previous best.
/// The final set is the adaptation snapshots when there are any, otherwise
/// the last phase's best checkpoint.
inline PipelineResult run_pipeline(const PhasePlan& plan, const PipelineData& datasets,
                                   std::uint64_t seed, const PipelineOptions& opts = {}) {
  if (plan.empty()) throw Error("run_pipeline: empty phase plan");
  PipelineResult out;
  Cascade model = opts.init ? *opts.init : Cascade(opts.arch, plan[0].stages, mix_seed(seed, 0));
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const PhaseSpec& spec = plan[i];
    try {
      auto it = datasets.find(spec.data);
      if (it == datasets.end() || !it->second) {
        throw Error("no " + to_string(spec.data) + " dataset supplied");
      }
      if (spec.stages > model.size()) {
        model = expand_cascade(model, spec.stages);
      } else if (spec.stages < model.size()) {
        throw Error("phase asks for " + std::to_string(spec.stages) +
                    " stages but the incoming model has " + std::to_string(model.size()));
      }
      TrainOptions t;
      t.crop_size = opts.crop_size;
      t.batch_size = opts.batch_size ? opts.batch_size : (spec.stages <= 3 ? 4 : 2);
      t.adamw = opts.adamw;
      t.provider = opts.provider;
      t.progress = opts.progress;
      if (!opts.out_dir.empty()) t.log_path = phase_dir(opts.out_dir, spec.tag) / "metrics.tsv";
      PhaseResult r = train_phase(spec, *it->second, model, mix_seed(seed, i + 1), t);
      if (!opts.out_dir.empty()) {
        const auto dir = phase_dir(opts.out_dir, spec.tag);
        save_checkpoint(dir / "best", r.best);
        for (const auto& ck : r.snapshots) save_checkpoint(dir / "ensemble" / ck.id(), ck);
      }
      model = r.best.model;
      out.phases.push_back(std::move(r));
    } catch (const PhaseError&) {
      throw;
    } catch (const std::exception& e) {
      throw PhaseError(spec.tag, e.what());
    }
  }
  const PhaseResult& last = out.phases.back();
  out.final_set = last.snapshots.empty() ? std::vector<Checkpoint>{last.best} : last.snapshots;
  return out;
}

}  // namespace deshadow
