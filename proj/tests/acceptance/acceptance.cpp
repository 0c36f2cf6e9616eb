// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <bit>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "deshadow/experiments.hpp"
#include "oracles.hpp"

using namespace deshadow;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

const Shape kImg{3, 8, 8};

std::vector<Tensor> slice_preds(const Tensor& stacked, std::size_t K) {
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < K; ++k) out.push_back(crop(stacked, 8 * k, 0, 8, 8));
  return out;
}

std::vector<oracle::Img> imgs_of(const Tensor& stacked, std::size_t K) {
  std::vector<oracle::Img> out;
  for (std::size_t k = 0; k < K; ++k) out.emplace_back(crop(stacked, 8 * k, 0, 8, 8).clone());
  return out;
}

// Predictions at exact distances d from y = 0, one coordinate each.
std::vector<Tensor> at_distances(const std::vector<double>& d) {
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < d.size(); ++k) {
    Tensor t = Tensor::zeros(kImg);
    t.mutable_data()[k % t.numel()] = d[k];
    out.push_back(t);
  }
  return out;
}

Outcome gradient_suite() {
  Outcome o;
  const auto t0 = Clock::now();
  Rng rng(1001);
  const LossWeights w;
  const int trials = 100;
  using PairFn = std::function<Tensor(const Tensor&, const Tensor&)>;
  const std::vector<std::pair<std::string, PairFn>> pair_terms{
      {"mse", mse_loss},
      {"perceptual", perceptual_proxy},
      {"hessian", hessian_loss},
      {"pre", [&](const Tensor& a, const Tensor& b) { return loss_pre(a, b, w); }},
  };
  double worst_all = 0.0;
  for (const auto& [name, fn] : pair_terms) {
    double worst = 0.0;
    for (int t = 0; t < trials; ++t) {
      const Tensor p = oracle::random_tensor(rng, kImg);
      const Tensor y = oracle::random_tensor(rng, kImg);
      worst = std::max(worst, oracle::grad_check([&](const Tensor& x) { return fn(x, y); }, p));
    }
    o.require(worst < 1e-5, name + " rel err " + fmt("%.3g", worst));
    worst_all = std::max(worst_all, worst);
  }

  const std::size_t K = 3;
  double ws = 0.0, wc = 0.0, wt = 0.0;
  for (int t = 0; t < trials; ++t) {
    const Tensor y = oracle::random_tensor(rng, kImg, 0, 1);
    const oracle::Img yi(y);
    const Tensor flat = oracle::random_tensor(rng, {3, 8 * K, 8}, 0, 1);
    const auto frozen = imgs_of(flat, K);
    auto fd = [&](auto&& f) {
      return oracle::numeric_grad(
          [&](const std::vector<double>& v) { return f(imgs_of(Tensor(Shape{3, 8 * K, 8}, v), K)); },
          flat.values());
    };
    auto ad = [&](auto&& f) {
      return oracle::autodiff_grad([&](const Tensor& x) { return f(slice_preds(x, K)); }, flat);
    };
    ws = std::max(ws, oracle::rel_error(ad([&](const auto& p) { return stage_loss(p, y); }),
                                        fd([&](const auto& p) { return oracle::stage(p, yi); })));
    wc = std::max(wc, oracle::rel_error(ad([&](const auto& p) { return contraction_loss(p, y); }),
                                        fd([&](const auto& p) { return oracle::contraction(p, frozen, yi); })));
    wt = std::max(wt, oracle::rel_error(ad([&](const auto& p) { return total_loss(p, y, w).total; }),
                                        fd([&](const auto& p) { return oracle::total(p, frozen, yi, w); })));
  }
  o.require(ws < 1e-5, "stage rel err " + fmt("%.3g", ws));
  o.require(wc < 1e-5, "contraction rel err " + fmt("%.3g", wc));
  o.require(wt < 1e-5, "total rel err " + fmt("%.3g", wt));
  worst_all = std::max({worst_all, ws, wc, wt});
  const double secs = seconds_since(t0);
  o.require(secs < 60.0, "runtime " + fmt("%.1fs", secs));
  if (o.pass) o.detail = "7 terms x 100 trials, max rel err " + fmt("%.2e", worst_all) + ", " + fmt("%.1fs", secs);
  return o;
}

Outcome stop_gradient_law() {
  Outcome o;
  Rng rng(1002);
  int cases = 0;
  for (int t = 0; t < 100; ++t) {
    const Tensor y = oracle::random_tensor(rng, kImg, 0, 1);
    Tensor p1 = add_scalar(y, 0.01 * rng.uniform(-1, 1));
    Tensor p2 = oracle::random_tensor(rng, kImg, 0, 1);
    p1.set_requires_grad();
    p2.set_requires_grad();
    const StageErrors e = stage_errors({p1, p2}, y);
    if (!(e.d[1] > e.d[0])) continue;
    ++cases;
    backward(contraction_loss({p1, p2}, y));
    for (double g : p1.grad()) o.require(std::bit_cast<std::uint64_t>(g) == 0u, "nonzero gradient into stage k-1");
    const double inv = 1.0 / e.d[1];
    for (std::size_t i = 0; i < p2.numel(); ++i) {
      o.require(p2.grad()[i] == (p2[i] - y[i]) * inv, "stage k gradient differs from (p-y)/d");
    }
    if (!o.pass) break;
  }
  o.require(cases >= 50, "too few constructed instances");
  if (o.pass) o.detail = std::to_string(cases) + " instances, exact";
  return o;
}

Outcome contraction_semantics() {
  Outcome o;
  const Tensor y = Tensor::zeros(kImg);
  o.require(contraction_loss(at_distances({2, 1, 3}), y).item() == 2.0, "(2,1,3) != 2");
  int checked = 0;
  // Every profile over {1,2,3}^3, and over {0,1,2,3}^3 which has 4^3 entries.
  for (int lo : {1, 0}) {
    for (int a = lo; a <= 3; ++a) {
      for (int b = lo; b <= 3; ++b) {
        for (int c = lo; c <= 3; ++c) {
          const std::vector<double> d{double(a), double(b), double(c)};
          const double got = contraction_loss(at_distances(d), y).item();
          o.require(got == oracle::contraction_of_d(d), "mismatch at " + std::to_string(a * 100 + b * 10 + c));
          if (a >= b && b >= c) o.require(got == 0.0, "non-increasing profile with nonzero loss");
          ++checked;
        }
      }
    }
  }
  if (o.pass) o.detail = std::to_string(checked) + " profiles vs brute force";
  return o;
}

Cascade identity_model(const ArchConfig& arch, std::size_t K) {
  Cascade c(arch, K, 1);
  for (std::size_t k = 0; k < K; ++k) c.stage(k).zero_output_head();
  return c;
}

Outcome tiling_partition() {
  Outcome o;
  Rng rng(1004);
  double worst = 0.0;
  for (int trial = 0; trial < 50 && o.pass; ++trial) {
    const std::size_t H = static_cast<std::size_t>(rng.integer(1, 300));
    const std::size_t W = static_cast<std::size_t>(rng.integer(1, 300));
    const std::size_t s = static_cast<std::size_t>(rng.integer(2, 160));
    const std::size_t ov = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(s) - 1));
    const TilePlan p = plan_tiles(H, W, s, ov);
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        double sum = 0.0;
        for (std::size_t t = 0; t < p.tiles.size(); ++t) sum += p.normalized(t, y, x);
        worst = std::max(worst, std::abs(sum - 1.0));
      }
    }
    o.require(worst <= 1e-12, "weight sum off by " + fmt("%.3g", worst));
  }
  const Cascade id = identity_model(ArchConfig{4, 4, guidance_mask::all}, 2);
  const ReferenceProvider provider(4);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t H = 32 * static_cast<std::size_t>(rng.integer(2, 4)) + static_cast<std::size_t>(rng.integer(0, 8));
    const std::size_t W = 32 * static_cast<std::size_t>(rng.integer(2, 4)) + static_cast<std::size_t>(rng.integer(0, 8));
    const Tensor x = oracle::random_tensor(rng, {3, H, W}, 0, 1);
    o.require(infer_tiled(id, x, provider, plan_tiles(H, W, 64, 16)).values() == x.values(),
              "identity model changed the input");
  }
  if (o.pass) o.detail = "50 plans, max |sum-1| " + fmt("%.2e", worst) + ", identity exact";
  return o;
}

Checkpoint as_checkpoint(const Cascade& m, std::size_t epoch) {
  Checkpoint ck;
  ck.model = m;
  ck.phase = "adapt";
  ck.epoch = epoch;
  return ck;
}

Outcome ensemble_laws() {
  Outcome o;
  Rng rng(1005);
  const ArchConfig arch{4, 4, guidance_mask::all};
  const ReferenceProvider provider(4);
  const Tensor x = oracle::random_tensor(rng, {3, 64, 96}, 0, 1);
  const Cascade c(arch, 2, 8);
  const EnsembleSet equals = EnsembleSet::of({as_checkpoint(c, 4), as_checkpoint(c, 5), as_checkpoint(c, 6)});
  o.require(infer_ensemble(equals, x, InferMode::whole, provider).values() == c.predict(x, provider.compute(x)).values(),
            "mean of equals differs (whole)");
  o.require(infer_ensemble(equals, x, InferMode::tiled, provider).values() ==
                infer_tiled(c, x, provider, plan_tiles(64, 96, 64, 16)).values(),
            "mean of equals differs (tiled)");
  std::vector<Checkpoint> cks;
  for (std::size_t e = 1; e <= 4; ++e) cks.push_back(as_checkpoint(Cascade(arch, 2, 100 + e), e));
  const auto ref = infer_ensemble(EnsembleSet::of(cks), x, InferMode::whole, provider).values();
  std::vector<std::size_t> perm{0, 1, 2, 3};
  int perms = 1;
  while (std::next_permutation(perm.begin(), perm.end())) {
    std::vector<Checkpoint> shuffled;
    for (std::size_t i : perm) shuffled.push_back(cks[i]);
    o.require(infer_ensemble(EnsembleSet::of(shuffled), x, InferMode::whole, provider).values() == ref,
              "order changed the ensemble output");
    ++perms;
  }
  if (o.pass) o.detail = "equals identity, " + std::to_string(perms) + " orders bitwise equal";
  return o;
}

Outcome schedule_values() {
  Outcome o;
  // 5e-5 -> 1e-4 restarts, period 200 including a 5-epoch warmup from 1e-5.
  const Schedule s = restart_schedule();
  const double mid = 5.0 + (200.0 - 5.0) / 2.0;
  const std::vector<std::pair<double, double>> hand{
      {0.0, 1e-5}, {5.0, 1e-4}, {mid, 7.5e-5}, {200.0, 1e-5}, {205.0, 1e-4}, {2.5, 5.5e-5}};
  for (const auto& [e, want] : hand) {
    const double got = lr_at(s, e);
    o.require(std::abs(got - want) <= 1e-15, "lr_at(" + fmt("%g", e) + ") = " + fmt("%.17g", got));
  }
  for (double e = 0.0; e < 200.0; e += 0.37) {
    for (int c = 1; c <= 3; ++c) {
      o.require(std::abs(lr_at(s, e) - lr_at(s, e + 200.0 * c)) <= 1e-15, "not periodic at " + fmt("%g", e));
    }
  }
  if (o.pass) o.detail = "hand values to 1e-15, periodic over 3 cycles";
  return o;
}

Dataset tiny_dataset(std::uint64_t seed, double misalign) {
  DataSpec d;
  d.seed = seed;
  d.train = 6;
  d.val = 2;
  d.scene_size = 32;
  d.misalign_px = misalign;
  return make_dataset(d);
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Outcome expansion_fidelity() {
  Outcome o;
  Rng rng(1007);
  const ArchConfig arch{4, 4, guidance_mask::all};
  const ReferenceProvider provider(4);
  const Tensor x = oracle::random_tensor(rng, {3, 32, 32}, 0, 1);
  const GuidanceBundle g = provider.compute(x);
  const Cascade one(arch, 1, 3);
  const Cascade two = expand_cascade(one, 2);
  const Cascade three = expand_cascade(two, 3);
  const auto first = one.forward_all(x, g)[0].values();
  o.require(two.forward_all(x, g)[0].values() == first, "1->2 changed stage 1");
  o.require(three.forward_all(x, g)[0].values() == first, "2->3 changed stage 1");

  TrainConfig cfg;
  cfg.arch = arch;
  cfg.k_stages = 3;
  cfg.crop_size = 32;
  cfg.batch_size = 2;
  cfg.epochs_phase1 = 2;
  cfg.epochs_phase2 = 1;
  cfg.epochs_phase3 = 1;
  cfg.epochs_adapt = 5;
  const PhasePlan plan = build_plan(cfg);
  const Dataset mis = tiny_dataset(21, 2.0), al = tiny_dataset(22, 0.0);
  const PipelineData data{{DataSource::misaligned, &mis}, {DataSource::aligned, &al}, {DataSource::adaptation, &al}};
  std::vector<std::string> trees;
  std::vector<std::uint64_t> fps;
  for (int run = 0; run < 2; ++run) {
    const fs::path dir = fs::temp_directory_path() / ("deshadow_accept_repro_" + std::to_string(run));
    fs::remove_all(dir);
    PipelineOptions opts = PipelineOptions::from(cfg);
    opts.out_dir = dir;
    const PipelineResult r = run_pipeline(plan, data, 7, opts);
    std::uint64_t fp = 0;
    for (const auto& ck : r.final_set) fp = mix_seed(fp, ck.model.fingerprint_parameters());
    fps.push_back(fp);
    std::string tree;
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
      if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir));
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) tree += f.generic_string() + "\n" + slurp(dir / f);
    trees.push_back(std::move(tree));
    fs::remove_all(dir);
  }
  o.require(fps[0] == fps[1], "final models differ between runs");
  o.require(trees[0] == trees[1], "written checkpoints or logs differ between runs");
  if (o.pass) o.detail = "stage 1 bitwise after 1->2->3, 4-phase pipeline reproduced bitwise";
  return o;
}

// Desk-scale protocol shared by the training-trend and contraction criteria.
struct DeskConfig {
  std::size_t width = 8;
  std::size_t semantic = 8;
  std::uint64_t data_seed = 11;
  double misalign_px = 2.0;
  std::uint64_t seed = 7;
  std::size_t pretrain_epochs = 40;
  double pretrain_lr = 1e-3;
  std::size_t finetune_epochs = 30;
  double finetune_lr = 5e-4;
  Reduction reduction = Reduction::sum;
};

struct DeskResults {
  double input_psnr = 0.0;
  VariantResult k1, k3, k3_free;
  double seconds = 0.0;
};

DeskResults run_desk(const DeskConfig& dc) {
  const auto t0 = Clock::now();
  DataSpec ds;
  ds.seed = dc.data_seed;
  ds.misalign_px = dc.misalign_px;
  const Dataset mis = make_dataset(ds);
  ds.misalign_px = 0.0;
  const Dataset al = make_dataset(ds);

  DeskResults out;
  for (const auto& p : al.val) out.input_psnr += psnr(p.shadowed, p.clean);
  out.input_psnr /= static_cast<double>(al.val.size());

  Schedule s = restart_schedule();
  s.peak_lr = dc.pretrain_lr;
  s.min_lr = dc.pretrain_lr / 2;
  s.warmup_start_lr = dc.pretrain_lr / 10;
  s.period_epochs = static_cast<double>(dc.pretrain_epochs);
  s.warmup_epochs = 1;
  LossWeights w_pre;
  w_pre.hessian = 0.0;
  const PhaseSpec spec{"phase1", 1, DataSource::misaligned, dc.pretrain_epochs, s, w_pre, {}};
  const ReferenceProvider provider(dc.semantic);
  const ValidationSet val(al.val, provider);
  TrainOptions t;
  t.validator = [&](const Cascade& m, std::size_t) { return val.score(m); };
  const ArchConfig arch{dc.width, dc.semantic, guidance_mask::all};
  const PhaseResult pre = train_phase(spec, mis, Cascade(arch, 1, mix_seed(dc.seed, 0)), mix_seed(dc.seed, 1), t);
  std::cout << "  pretrain: best epoch " << pre.best.epoch << " val psnr " << format_metric(pre.best.val_psnr)
            << " (" << fmt("%.0fs", seconds_since(t0)) << ")\n";

  AblationSettings a;
  a.epochs = dc.finetune_epochs;
  a.schedule = anneal_schedule(static_cast<double>(dc.finetune_epochs));
  a.schedule.peak_lr = a.schedule.warmup_start_lr = dc.finetune_lr;
  a.schedule.min_lr = dc.finetune_lr / 50;
  a.seed = dc.seed;
  LossWeights w;
  w.reduction = dc.reduction;
  LossWeights free = w;
  free.contraction = 0.0;
  auto run = [&](const Variant& v) {
    VariantResult r = run_variant(pre.best.model, v, al, a);
    std::cout << "  " << v.name << ": val psnr " << format_metric(r.psnr) << " monotone "
              << fmt("%.3f", r.profile.monotone_fraction) << " mean d";
    for (double d : r.profile.mean_d) std::cout << " " << fmt("%.4f", d);
    std::cout << " (" << fmt("%.0fs", seconds_since(t0)) << ")\n";
    return r;
  };
  out.k1 = run({"K=1", 1, w, guidance_mask::all});
  out.k3 = run({"K=3", 3, w, guidance_mask::all});
  out.k3_free = run({"K=3 w/o contraction", 3, free, guidance_mask::all});
  out.seconds = seconds_since(t0);
  return out;
}

Outcome training_trend(const DeskResults& r) {
  Outcome o;
  const double need = r.input_psnr + 3.0;
  o.require(r.k1.psnr >= need, "K=1 " + fmt("%.3f", r.k1.psnr) + " < input+3 " + fmt("%.3f", need));
  o.require(r.k3.psnr >= need, "K=3 " + fmt("%.3f", r.k3.psnr) + " < input+3 " + fmt("%.3f", need));
  o.require(r.k3.psnr >= r.k1.psnr - 0.1, "K=3 " + fmt("%.3f", r.k3.psnr) + " < K=1 - 0.1");
  o.require(r.seconds < 1800.0, "runtime " + fmt("%.0fs", r.seconds));
  if (o.pass) {
    o.detail = "input " + fmt("%.3f", r.input_psnr) + " K=1 " + fmt("%.3f", r.k1.psnr) + " K=3 " +
               fmt("%.3f", r.k3.psnr) + " dB, " + fmt("%.0fs", r.seconds);
  }
  return o;
}

Outcome contraction_effect(const DeskResults& r) {
  Outcome o;
  const StageProfile& on = r.k3.profile;
  const StageProfile& off = r.k3_free.profile;
  o.require(on.monotone_fraction >= off.monotone_fraction,
            "monotone " + fmt("%.3f", on.monotone_fraction) + " < " + fmt("%.3f", off.monotone_fraction));
  o.require(on.mean_d.back() <= on.mean_d.front() * 1.05,
            "mean d_K " + fmt("%.4f", on.mean_d.back()) + " > 1.05 * mean d_1 " + fmt("%.4f", on.mean_d.front()));
  if (o.pass) {
    o.detail = "monotone " + fmt("%.3f", on.monotone_fraction) + " vs " + fmt("%.3f", off.monotone_fraction) +
               ", mean d_1 " + fmt("%.4f", on.mean_d.front()) + " d_K " + fmt("%.4f", on.mean_d.back());
  }
  return o;
}

Outcome metric_axioms() {
  Outcome o;
  Rng rng(1010);
  const Tensor a = oracle::random_tensor(rng, {3, 32, 32}, 0, 1);
  o.require(ssim(a, a) == 1.0, "ssim(a,a) = " + fmt("%.17g", ssim(a, a)));
  const Tensor zero = Tensor::zeros({3, 16, 16});
  o.require(psnr(Tensor::full({3, 16, 16}, 1.0), zero) == 0.0, "psnr at mse 1 != 0 dB");
  o.require(std::abs(psnr(Tensor::full({3, 16, 16}, 0.1), zero) - 20.0) <= 1e-12, "psnr at mse 0.01 != 20 dB");
  double worst = 0.0;
  for (int t = 0; t < 10; ++t) {
    const Tensor x = oracle::random_tensor(rng, {3, 24, 28}, 0, 1);
    const Tensor y = oracle::random_tensor(rng, {3, 24, 28}, 0, 1);
    worst = std::max(worst, std::abs(ssim(x, y) - oracle::ssim_bruteforce(x, y)));
  }
  o.require(worst <= 1e-9, "ssim vs brute force off by " + fmt("%.3g", worst));
  if (o.pass) o.detail = "ssim identity exact, 0/20 dB, brute-force SSIM within " + fmt("%.1e", worst);
  return o;
}

Outcome guarded(const std::function<Outcome()>& f) {
  try {
    return f();
  } catch (const std::exception& e) {
    return Outcome{false, std::string("exception: ") + e.what()};
  }
}

}  // namespace

int main() {
  int failures = 0;
  auto report = [&](int id, const std::string& name, const Outcome& o) {
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << id << " " << name;
    if (!o.detail.empty()) std::cout << ": " << o.detail;
    std::cout << std::endl;
    failures += !o.pass;
  };
  report(1, "gradient suite", guarded(gradient_suite));
  report(2, "stop-gradient law", guarded(stop_gradient_law));
  report(3, "contraction semantics", guarded(contraction_semantics));
  report(4, "tiling partition of unity", guarded(tiling_partition));
  report(5, "ensemble laws", guarded(ensemble_laws));
  report(6, "schedule values", guarded(schedule_values));
  report(7, "expansion fidelity and reproducibility", guarded(expansion_fidelity));

  const DeskConfig dc;
  std::cout << "desk-scale training: 200 train / 40 val pairs, 64x64 crops, width " << dc.width << ", pretrain "
            << dc.pretrain_epochs << " epochs, fine-tune " << dc.finetune_epochs << " epochs, "
            << to_string(dc.reduction) << " reduction" << std::endl;
  DeskResults desk;
  std::string desk_error;
  try {
    desk = run_desk(dc);
  } catch (const std::exception& e) {
    desk_error = e.what();
  }
  if (desk_error.empty()) {
    report(8, "training trend", training_trend(desk));
    report(9, "contraction effect", contraction_effect(desk));
  } else {
    report(8, "training trend", Outcome{false, "exception: " + desk_error});
    report(9, "contraction effect", Outcome{false, "exception: " + desk_error});
  }
  report(10, "metric axioms", guarded(metric_axioms));
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
