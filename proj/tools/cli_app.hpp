#pragma once

// deshadow command-line driver. Kept in a header so tests can call run_cli.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "deshadow/deshadow.hpp"

namespace deshadow::cli {

namespace fs = std::filesystem;

struct Common {
  std::string workdir = ".";
  std::string config;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;

  fs::path rel(const std::string& p) const {
    const fs::path fp(p);
    return fp.is_absolute() ? fp : fs::path(workdir) / fp;
  }

  TrainConfig resolve() const {
    TrainConfig cfg;
    if (!config.empty()) {
      const fs::path p = rel(config);
      if (!fs::exists(p)) throw ConfigError("config file not found: " + p.string());
      cfg = load_config(p.string());
    }
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      cfg.set(detail::trim(s.substr(0, eq)), s.substr(eq + 1));
    }
    if (seed) cfg.seed = *seed;
    cfg.validate();
    return cfg;
  }
};

inline void add_common(CLI::App* app, Common& c) {
  app->add_option("--workdir", c.workdir, "Root for all relative paths")->capture_default_str();
  app->add_option("--config", c.config, "Config file (key = value lines)");
  app->add_option("--seed", c.seed, "Override the config seed");
  app->add_option("--set", c.sets, "Override one config key (key=value), repeatable");
}

inline void print_config(std::ostream& out, const TrainConfig& cfg) {
  out << "# resolved config\n" << render_config(cfg) << "# seed " << cfg.seed << "\n";
}

/// Loads a manifest into train and val splits. Shadow fields are unknown
/// for external data and set to 1.
inline Dataset load_manifest_dataset(const fs::path& manifest) {
  if (!fs::exists(manifest)) throw IoError("dataset manifest not found: " + manifest.string());
  Dataset d;
  for (const auto& e : read_manifest(manifest)) {
    ScenePair p;
    for (const auto* f : {&e.clean, &e.shadowed}) {
      if (!fs::exists(*f)) throw IoError("dataset file not found: " + f->string());
    }
    p.clean = read_image(e.clean);
    p.shadowed = read_image(e.shadowed);
    if (p.clean.shape() != p.shadowed.shape()) {
      throw ShapeError("pair " + e.id + ": clean " + shape_str(p.clean.shape()) +
                       " vs shadowed " + shape_str(p.shadowed.shape()));
    }
    p.shadow_field = Tensor::full({1, p.clean.dim(1), p.clean.dim(2)}, 1.0);
    if (e.split == "train") d.train.push_back(std::move(p));
    else if (e.split == "val") d.val.push_back(std::move(p));
    else throw IoError(manifest.string() + ": unknown split '" + e.split + "' for " + e.id);
  }
  return d;
}

inline DataSpec synthetic_spec(const TrainConfig& cfg, DataSource src) {
  DataSpec s;
  s.seed = mix_seed(cfg.data_seed, src == DataSource::misaligned ? 101 : 102);
  s.train = cfg.train_pairs;
  s.val = cfg.val_pairs;
  s.scene_size = cfg.scene_size;
  s.misalign_px = src == DataSource::misaligned ? cfg.misalign_px : 0.0;
  return s;
}

/// Named manifest if configured, otherwise the synthetic corpus. The
/// adaptation source falls back to the aligned one.
inline Dataset resolve_dataset(const Common& c, const TrainConfig& cfg, DataSource src) {
  const std::string& path = src == DataSource::misaligned ? cfg.dataset_misaligned
                            : src == DataSource::aligned  ? cfg.dataset_aligned
                                                          : cfg.dataset_adapt;
  if (!path.empty()) return load_manifest_dataset(c.rel(path));
  if (src == DataSource::adaptation) return resolve_dataset(c, cfg, DataSource::aligned);
  return make_dataset(synthetic_spec(cfg, src));
}

inline void write_split(const fs::path& dir, const std::string& prefix,
                        const std::vector<ScenePair>& pairs, const std::string& split,
                        const std::string& format, std::vector<ManifestEntry>& entries) {
  fs::create_directories(dir / split);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    char id[64];
    std::snprintf(id, sizeof id, "%s%s_%04zu", prefix.c_str(), split.c_str(), i);
    const fs::path clean = fs::path(split) / (std::string(id) + "_clean." + format);
    const fs::path shadowed = fs::path(split) / (std::string(id) + "_shadowed." + format);
    if (format == "rtn") {
      save_rtn(dir / clean, pairs[i].clean);
      save_rtn(dir / shadowed, pairs[i].shadowed);
    } else {
      write_ppm(dir / clean, pairs[i].clean);
      write_ppm(dir / shadowed, pairs[i].shadowed);
    }
    entries.push_back({id, clean, shadowed, split});
  }
}

inline void write_dataset(const fs::path& dir, const Dataset& d, const std::string& format,
                          const std::string& prefix = "") {
  std::vector<ManifestEntry> entries;
  write_split(dir, prefix, d.train, "train", format, entries);
  write_split(dir, prefix, d.val, "val", format, entries);
  write_manifest(dir / "manifest.tsv", entries);
}

inline std::vector<fs::path> split_list(const Common& c, const std::vector<std::string>& items) {
  std::vector<fs::path> out;
  for (const auto& s : items) out.push_back(c.rel(s));
  return out;
}

inline std::string stem_of(const fs::path& p) { return p.stem().string(); }

inline int run_cli(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cascaded shadow removal: data generation, training, inference, evaluation"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  Common c;
  std::string format = "rtn";
  auto* gen = app.add_subcommand("gen-data", "Write the synthetic misaligned and aligned corpora");
  add_common(gen, c);
  std::string gen_out = "data";
  gen->add_option("--out", gen_out, "Output directory")->capture_default_str();
  gen->add_option("--format", format, "Image format")->check(CLI::IsMember({"rtn", "ppm"}))->capture_default_str();

  auto* train = app.add_subcommand("train", "Run the training phases");
  add_common(train, c);
  std::string phase = "all";
  std::string train_out = "runs/train";
  train->add_option("--phase", phase, "1, 2, 3, adapt or all")
      ->check(CLI::IsMember({"1", "2", "3", "adapt", "all"}))->capture_default_str();
  train->add_option("--out", train_out, "Run directory")->capture_default_str();

  std::vector<std::string> checkpoints, inputs;
  std::string infer_out = "out", mode = "whole", infer_format = "ppm";
  std::size_t tile = 64, overlap = 16;
  auto add_infer = [&](CLI::App* sub) {
    add_common(sub, c);
    sub->add_option("--checkpoints", checkpoints, "Checkpoint directories (a,b,c)")
        ->delimiter(',')->required();
    sub->add_option("--input", inputs, "Input images (.ppm or .rtn)")->delimiter(',')->required();
    sub->add_option("--out", infer_out, "Output directory")->capture_default_str();
    sub->add_option("--mode", mode, "whole or tiled")->check(CLI::IsMember({"whole", "tiled"}))->capture_default_str();
    sub->add_option("--tile", tile, "Tile size")->capture_default_str();
    sub->add_option("--overlap", overlap, "Tile overlap")->capture_default_str();
    sub->add_option("--format", infer_format, "Output format")
        ->check(CLI::IsMember({"ppm", "rtn"}))->capture_default_str();
  };
  auto* infer = app.add_subcommand("infer", "Restore images with one checkpoint");
  add_infer(infer);
  auto* ensemble = app.add_subcommand("ensemble", "Restore images with a checkpoint ensemble");
  add_infer(ensemble);

  auto* eval = app.add_subcommand("eval", "Score saved predictions against a manifest");
  add_common(eval, c);
  std::string pred_dir, truth, stages_dir, split = "val", report;
  eval->add_option("--pred", pred_dir, "Directory of <id>.rtn or <id>.ppm predictions")->required();
  eval->add_option("--truth", truth, "Manifest with the targets")->required();
  eval->add_option("--split", split, "Manifest split to score")->capture_default_str();
  eval->add_option("--stages", stages_dir, "Directory of <id>_s<k>.rtn stage outputs");
  eval->add_option("--report", report, "Write the summary to this file");

  auto* ablate = app.add_subcommand("ablate", "Fine-tune ablation variants from a shared pretrained model");
  add_common(ablate, c);
  std::string suite = "stages", pretrained = "runs/train/phase1/best", ablate_out;
  ablate->add_option("--suite", suite, "stages or components")
      ->check(CLI::IsMember({"stages", "components"}))->capture_default_str();
  ablate->add_option("--pretrained", pretrained, "Shared single-stage checkpoint")->capture_default_str();
  ablate->add_option("--out", ablate_out, "Output directory (default runs/ablate/<suite>)");

  std::vector<const char*> args;
  args.push_back("deshadow");
  for (const auto& a : argv) args.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(args.size()), args.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    if (!app.get_subcommands().empty()) err << app.get_subcommands().front()->help();
    return 1;
  }

  try {
    const TrainConfig cfg = c.resolve();
    print_config(out, cfg);

    if (gen->parsed()) {
      const fs::path dir = c.rel(gen_out);
      for (DataSource src : {DataSource::misaligned, DataSource::aligned}) {
        write_dataset(dir / to_string(src), make_dataset(synthetic_spec(cfg, src)), format);
        out << "wrote " << (dir / to_string(src) / "manifest.tsv").string() << "\n";
      }
      return 0;
    }

    if (train->parsed()) {
      PhasePlan plan = build_plan(cfg);
      PipelineOptions opts = PipelineOptions::from(cfg);
      opts.out_dir = c.rel(train_out);
      opts.progress = &out;
      if (phase != "all") {
        const std::string tag = phase == "adapt" ? "adapt" : "phase" + phase;
        std::size_t idx = plan.size();
        for (std::size_t i = 0; i < plan.size(); ++i) {
          if (plan[i].tag == tag) idx = i;
        }
        if (idx == plan.size()) {
          throw ConfigError("phase " + phase + " is not part of a k_stages=" +
                            std::to_string(cfg.k_stages) + " plan");
        }
        if (idx > 0) {
          const fs::path prev = opts.out_dir / plan[idx - 1].tag / "best";
          if (!fs::exists(prev / "meta")) {
            throw ConfigError("phase " + phase + " starts from " + prev.string() +
                              ", which does not exist; run the previous phase first");
          }
          opts.init = load_checkpoint(prev).model;
        }
        plan = PhasePlan{plan[idx]};
      }
      PipelineData data;
      std::map<DataSource, Dataset> store;
      for (const auto& p : plan) {
        if (!store.count(p.data)) store.emplace(p.data, resolve_dataset(c, cfg, p.data));
        data[p.data] = &store.at(p.data);
      }
      const PipelineResult r = run_pipeline(plan, data, cfg.seed, opts);
      for (std::size_t i = 0; i < plan.size(); ++i) {
        const Checkpoint& b = r.phases[i].best;
        out << plan[i].tag << " best epoch " << b.epoch << " val_psnr " << format_metric(b.val_psnr)
            << " val_ssim " << format_metric(b.val_ssim) << "\n";
      }
      std::ofstream list(opts.out_dir / "final_set.txt");
      for (const auto& ck : r.final_set) {
        const fs::path dir = ck.phase == plan.back().tag && !plan.back().ensemble_epochs.empty()
                                 ? opts.out_dir / ck.phase / "ensemble" / ck.id()
                                 : opts.out_dir / ck.phase / "best";
        list << dir.string() << "\n";
        out << "final " << dir.string() << "\n";
      }
      return 0;
    }

    if (infer->parsed() || ensemble->parsed()) {
      if (infer->parsed() && checkpoints.size() != 1) {
        throw ConfigError("infer takes exactly one checkpoint; use ensemble for several");
      }
      const EnsembleSet ens = EnsembleSet::load(split_list(c, checkpoints));
      const ReferenceProvider provider(ens.arch().semantic_channels);
      const InferMode m = parse_infer_mode(mode);
      const fs::path dir = c.rel(infer_out);
      fs::create_directories(dir);
      const std::string& ofmt = infer_format;
      for (const auto& in : split_list(c, inputs)) {
        if (!fs::exists(in)) throw IoError("input image not found: " + in.string());
        const Tensor x = read_image(in);
        const Tensor y = infer_ensemble(ens, x, m, provider, {tile, overlap});
        const fs::path dst = dir / (stem_of(in) + "." + ofmt);
        if (ofmt == "rtn") save_rtn(dst, y);
        else write_ppm(dst, y);
        out << "wrote " << dst.string() << "\n";
      }
      return 0;
    }

    if (eval->parsed()) {
      const fs::path pdir = c.rel(pred_dir);
      std::vector<Tensor> preds, targets;
      std::vector<std::string> ids;
      std::vector<StageErrors> errs;
      for (const auto& e : read_manifest(c.rel(truth))) {
        if (e.split != split) continue;
        fs::path p = pdir / (e.id + ".rtn");
        if (!fs::exists(p)) p = pdir / (e.id + ".ppm");
        if (!fs::exists(p)) throw IoError("no prediction for " + e.id + " in " + pdir.string());
        preds.push_back(read_image(p));
        targets.push_back(read_image(e.clean));
        ids.push_back(e.id);
        if (!stages_dir.empty()) {
          std::vector<Tensor> st;
          for (std::size_t k = 1;; ++k) {
            const fs::path sp = c.rel(stages_dir) / (e.id + "_s" + std::to_string(k) + ".rtn");
            if (!fs::exists(sp)) break;
            st.push_back(load_rtn(sp));
          }
          if (st.empty()) throw IoError("no stage outputs for " + e.id);
          errs.push_back(stage_errors(st, targets.back()));
        }
      }
      if (preds.empty()) throw IoError("split '" + split + "' is empty in " + truth);
      const MetricReport r = evaluate_pairs(preds, targets);
      std::ostringstream summary;
      for (std::size_t i = 0; i < ids.size(); ++i) {
        out << ids[i] << "\t" << format_metric(r.psnr_db[i]) << "\t" << format_metric(r.ssim[i]) << "\n";
      }
      summary << "psnr\t" << format_metric(r.mean_psnr) << "\n"
              << "ssim\t" << format_metric(r.mean_ssim) << "\n";
      if (!errs.empty()) {
        const StageProfile prof = summarize_stage_errors(errs);
        summary << "monotone_fraction\t" << format_metric(prof.monotone_fraction) << "\n";
        for (std::size_t k = 0; k < prof.mean_d.size(); ++k) {
          summary << "mean_d" << (k + 1) << "\t" << format_metric(prof.mean_d[k]) << "\n";
        }
      }
      out << summary.str();
      if (!report.empty()) {
        std::ofstream os(c.rel(report));
        if (!os) throw IoError("cannot write report " + report);
        os << summary.str();
      }
      return 0;
    }

    if (ablate->parsed()) {
      const fs::path pre = c.rel(pretrained);
      if (!fs::exists(pre / "meta")) {
        throw ConfigError("pretrained checkpoint not found: " + pre.string() +
                          " (run `train --phase 1` first)");
      }
      const Checkpoint base = load_checkpoint(pre);
      if (base.stages() != 1) {
        throw ConfigError("pretrained checkpoint " + pre.string() + " has " +
                          std::to_string(base.stages()) + " stages, expected 1");
      }
      const fs::path dir = c.rel(ablate_out.empty() ? "runs/ablate/" + suite : ablate_out);
      const Dataset data = resolve_dataset(c, cfg, DataSource::aligned);
      write_dataset(dir / "truth", Dataset{{}, data.val}, "rtn");
      AblationSettings s = AblationSettings::from(cfg);
      s.progress = &out;
      const auto variants = suite == "stages" ? stage_suite(cfg.weights)
                                              : component_suite(cfg.weights, cfg.k_stages);
      std::ofstream rep(dir / "report.tsv");
      if (!rep) throw IoError("cannot write " + (dir / "report.tsv").string());
      rep << ablation_header() << "\n";
      out << ablation_header() << "\n";
      for (const Variant& v : variants) {
        const VariantResult r = run_variant(base.model, v, data, s);
        save_variant_outputs(dir / variant_slug(v.name), r);
        save_checkpoint(dir / variant_slug(v.name) / "best", r.best);
        rep << ablation_row(r) << "\n";
        rep.flush();
        out << ablation_row(r) << "\n";
      }
      return 0;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}

}  // namespace deshadow::cli
