// pedseg command-line driver: train, predict, ensemble, postprocess,
// evaluate, report, plus a synthetic phantom generator.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <yaml-cpp/yaml.h>

#include "pedseg/pedseg.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using namespace pedseg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitSchema = 2;
constexpr int kExitMissingCheckpoint = 3;
constexpr int kExitCaseMismatch = 4;

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string output;
  bool dry_run = false;
  bool resume = false;
  std::vector<std::string> overrides;
};

json yaml_to_json(const YAML::Node& n) {
  switch (n.Type()) {
    case YAML::NodeType::Null:
    case YAML::NodeType::Undefined:
      return nullptr;
    case YAML::NodeType::Sequence: {
      json a = json::array();
      for (const auto& item : n) a.push_back(yaml_to_json(item));
      return a;
    }
    case YAML::NodeType::Map: {
      json o = json::object();
      for (const auto& kv : n) o[kv.first.as<std::string>()] = yaml_to_json(kv.second);
      return o;
    }
    case YAML::NodeType::Scalar:
      break;
  }
  const std::string s = n.Scalar();
  if (n.Tag() == "!") return s;  // quoted
  if (s == "true" || s == "True") return true;
  if (s == "false" || s == "False") return false;
  if (s == "null" || s == "~") return nullptr;
  json parsed = json::parse(s, nullptr, false);
  if (!parsed.is_discarded() && parsed.is_number()) return parsed;
  return s;
}

json read_config_document(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorCode::MissingFile, "config " + path.string());
  const auto ext = path.extension().string();
  if (ext == ".yaml" || ext == ".yml") {
    try {
      return yaml_to_json(YAML::LoadFile(path.string()));
    } catch (const YAML::Exception& e) {
      throw Error(ErrorCode::InvalidConfig, path.string() + ": " + e.what());
    }
  }
  return read_json_file(path);
}

PipelineConfig load_pipeline(const GlobalOptions& g) {
  if (g.config.empty()) throw Error(ErrorCode::InvalidConfig, "--config is required");
  const fs::path path = g.config;
  std::vector<std::string> overrides = g.overrides;
  if (g.seed) overrides.push_back("seed=" + std::to_string(*g.seed));
  if (!g.output.empty()) overrides.push_back("output=" + json(g.output).dump());
  return parse_pipeline_config(read_config_document(path), path.parent_path(), overrides);
}

DatasetManifest load_pipeline_manifest(const PipelineConfig& cfg) {
  if (!cfg.manifest) throw Error(ErrorCode::InvalidConfig, "data.manifest is required for this command");
  return load_manifest(*cfg.manifest);
}

// --cases absent: every manifest entry (optionally one split). Present but
// empty: nothing.
std::vector<const ManifestEntry*> select_cases(const DatasetManifest& m, const std::optional<std::string>& cases,
                                               const std::string& split) {
  std::vector<const ManifestEntry*> out;
  if (cases) {
    std::stringstream ss(*cases);
    std::string id;
    std::vector<std::string> missing;
    while (std::getline(ss, id, ',')) {
      if (id.empty()) continue;
      const ManifestEntry* e = m.find(id);
      if (e == nullptr) missing.push_back(id);
      else out.push_back(e);
    }
    if (!missing.empty()) {
      std::string list;
      for (const auto& s : missing) list += (list.empty() ? "" : ", ") + s;
      throw Error(ErrorCode::CaseMismatch, "cases not in manifest: " + list);
    }
    return out;
  }
  for (const auto& e : m.entries)
    if (split.empty() || e.split == split) out.push_back(&e);
  return out;
}

void write_case_masks(const RegionMaskSet& rm, const RegionMapping& mapping, const fs::path& dir,
                      const std::string& case_id) {
  save_region_masks(rm, dir);
  // Raw predictions need not be nested; the label export uses the closure.
  const LabelMap lm = regions_to_labels(post::enforce_hierarchy(rm), mapping, case_id);
  save_label_map(lm, dir / "labels.nii.gz");
}

std::vector<std::string> prediction_cases(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorCode::MissingFile, "prediction directory " + dir.string());
  std::vector<std::string> out;
  for (const auto& d : fs::directory_iterator(dir))
    if (d.is_directory() && fs::exists(d.path() / "et.nii.gz")) out.push_back(d.path().filename().string());
  std::sort(out.begin(), out.end());
  return out;
}

void print_plan(const std::string& command, const PipelineConfig& cfg, ordered_json extra) {
  ordered_json plan;
  plan["command"] = command;
  plan["output"] = cfg.output_dir.generic_string();
  plan["seed"] = cfg.seed;
  if (cfg.manifest) plan["manifest"] = cfg.manifest->generic_string();
  for (auto& [k, v] : extra.items()) plan[k] = v;
  plan["config"] = cfg.resolved;
  std::cout << plan.dump(2) << '\n';
}

SlidingWindowConfig window_for(const PipelineConfig& cfg) { return cfg.inference; }

// ---------------------------------------------------------------- train

int cmd_train(const GlobalOptions& g) {
  const PipelineConfig cfg = load_pipeline(g);
  const fs::path resume_path = cfg.output_dir / "checkpoints" / "last.ckpt";
  if (g.dry_run) {
    print_plan("train", cfg,
               {{"model", cfg.train.spec.variant_name},
                {"parameters", nn::Model(cfg.train.spec, 0).parameter_count()},
                {"resume_from", g.resume ? ordered_json(resume_path.generic_string()) : ordered_json(nullptr)}});
    return kExitOk;
  }
  const DatasetManifest manifest = load_pipeline_manifest(cfg);
  TrainOptions opts;
  opts.output_dir = cfg.output_dir;
  if (g.resume) {
    if (!fs::exists(resume_path)) throw Error(ErrorCode::MissingCheckpoint, "nothing to resume: " + resume_path.string());
    opts.resume_from = resume_path;
  }
  const TrainResult r = train(cfg.train, manifest, opts);
  log_info("train_done", {{"steps", r.last.step},
                          {"best_score", r.best.best_score},
                          {"stopped_early", r.stopped_early},
                          {"checkpoint", (cfg.output_dir / "checkpoints" / "best.ckpt").generic_string()}});
  return kExitOk;
}

// ---------------------------------------------------------------- predict / ensemble

struct CaseSelection {
  std::optional<std::string> cases;
  std::string split;
};

int run_prediction(const GlobalOptions& g, const CaseSelection& sel, const EnsembleConfig& ens, const char* command) {
  const PipelineConfig cfg = load_pipeline(g);
  for (const auto& group : ens.groups)
    for (const auto& p : group)
      if (!fs::exists(p)) throw Error(ErrorCode::MissingCheckpoint, p.string());
  if (g.dry_run) {
    print_plan(command, cfg, {{"ensemble", to_json(ens)}});
    return kExitOk;
  }
  const DatasetManifest manifest = load_pipeline_manifest(cfg);
  const auto cases = select_cases(manifest, sel.cases, sel.split);
  if (cases.empty()) {
    log_info("no_cases", {{"command", command}});
    return kExitOk;
  }
  // Each distinct checkpoint is loaded once for the whole run.
  std::map<std::string, ModelHandle> models;
  for (const auto& group : ens.groups)
    for (const auto& p : group) {
      const auto key = p.lexically_normal().generic_string();
      if (!models.contains(key)) models.emplace(key, load_model(p));
    }
  for (const ManifestEntry* e : cases) {
    const MultiModalVolume vol = normalize_intensities(load_volume(*e));
    std::map<std::string, LogitsVolume> cache;
    std::vector<std::vector<LogitsVolume>> logits;
    for (const auto& group : ens.groups) {
      std::vector<LogitsVolume> lg;
      for (const auto& p : group) {
        const auto key = p.lexically_normal().generic_string();
        auto it = cache.find(key);
        if (it == cache.end()) it = cache.emplace(key, predict_logits(models.at(key), vol, window_for(cfg))).first;
        lg.push_back(it->second);
      }
      logits.push_back(std::move(lg));
    }
    const RegionMaskSet rm = ensemble_from_logits(logits, ens.logit_threshold(), ens.tie_break);
    write_case_masks(rm, cfg.region_mapping, cfg.output_dir / e->case_id, e->case_id);
    log_info("predicted", {{"command", command}, {"case_id", e->case_id}});
  }
  return kExitOk;
}

int cmd_predict(const GlobalOptions& g, const std::string& checkpoint, const CaseSelection& sel) {
  EnsembleConfig single = EnsembleConfig::one_model_per_group({checkpoint});
  return run_prediction(g, sel, single, "predict");
}

int cmd_ensemble(const GlobalOptions& g, const std::string& members, const CaseSelection& sel) {
  EnsembleConfig ens;
  if (!members.empty()) {
    const fs::path p = members;
    ens = ensemble_config_from_json(read_json_file(p), p.parent_path());
  } else {
    const PipelineConfig cfg = load_pipeline(g);
    if (!cfg.ensemble) throw Error(ErrorCode::InvalidConfig, "no --members file and no 'ensemble' section in config");
    ens = *cfg.ensemble;
  }
  return run_prediction(g, sel, ens, "ensemble");
}

// ---------------------------------------------------------------- postprocess

int cmd_postprocess(const GlobalOptions& g, const std::string& input) {
  const PipelineConfig cfg = load_pipeline(g);
  if (g.dry_run) {
    print_plan("postprocess", cfg, {{"input", input}});
    return kExitOk;
  }
  for (const auto& id : prediction_cases(input)) {
    const RegionMaskSet raw = load_region_masks(fs::path(input) / id);
    const RegionMaskSet out = post::postprocess_case(raw, cfg.postprocess);
    write_case_masks(out, cfg.region_mapping, cfg.output_dir / id, id);
    log_info("postprocessed", {{"case_id", id}});
  }
  return kExitOk;
}

// ---------------------------------------------------------------- evaluate

int cmd_evaluate(const GlobalOptions& g, const std::string& predictions, const std::string& split) {
  const PipelineConfig cfg = load_pipeline(g);
  if (g.dry_run) {
    print_plan("evaluate", cfg, {{"predictions", predictions}});
    return kExitOk;
  }
  const DatasetManifest manifest = load_pipeline_manifest(cfg);
  std::set<std::string> gt_ids;
  for (const auto& e : manifest.entries)
    if (e.label && (split.empty() || e.split == split)) gt_ids.insert(e.case_id);
  const auto pred_list = prediction_cases(predictions);
  const std::set<std::string> pred_ids(pred_list.begin(), pred_list.end());
  std::vector<std::string> missing, extra;
  std::set_difference(gt_ids.begin(), gt_ids.end(), pred_ids.begin(), pred_ids.end(), std::back_inserter(missing));
  std::set_difference(pred_ids.begin(), pred_ids.end(), gt_ids.begin(), gt_ids.end(), std::back_inserter(extra));
  if (!missing.empty() || !extra.empty()) {
    ordered_json fields{{"missing_predictions", missing}, {"unknown_cases", extra}};
    log(LogLevel::Error, "case_mismatch", fields);
    std::string msg = "case ids differ between predictions and ground truth";
    for (const auto& id : missing) msg += "; no prediction for " + id;
    for (const auto& id : extra) msg += "; no ground truth for " + id;
    throw Error(ErrorCode::CaseMismatch, msg);
  }
  if (gt_ids.empty()) throw Error(ErrorCode::EmptyCohort, "no labeled cases to evaluate");

  std::set<std::int32_t> vocab{0};
  vocab.insert(cfg.region_mapping.wt_labels.begin(), cfg.region_mapping.wt_labels.end());
  std::vector<metrics::CaseReport> reports;
  for (const auto& id : gt_ids) {
    const ManifestEntry* e = manifest.find(id);
    const LabelMap lm = load_label_map(*e->label, vocab, id);
    const RegionMaskSet gt = labels_to_regions(lm, cfg.region_mapping);
    RegionMaskSet pred = load_region_masks(fs::path(predictions) / id);
    pred.spacing = gt.spacing;
    reports.push_back(metrics::evaluate_case(pred, gt, id, cfg.metrics));
    log_info("evaluated", {{"case_id", id}});
  }
  const auto cohort = metrics::aggregate(std::move(reports));
  fs::create_directories(cfg.output_dir);
  {
    std::ofstream csv(cfg.output_dir / "metrics.csv", std::ios::binary);
    metrics::write_csv(cohort, csv);
  }
  {
    std::ofstream js(cfg.output_dir / "metrics.json", std::ios::binary);
    js << metrics::to_json(cohort).dump(2) << '\n';
  }
  return kExitOk;
}

// ---------------------------------------------------------------- report

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

void write_table(std::ostream& md, const ordered_json& rows, const std::vector<std::string>& names) {
  md << "| Region | LW Dice | Dice | LW HD95 | HD95 | Sensitivity | Specificity |\n";
  md << "|---|---|---|---|---|---|---|\n";
  for (const auto& r : names) {
    const auto& s = rows.at(r);
    md << "| " << r << " | " << fixed(s["lw_dice"], 4) << " | " << fixed(s["dice"], 4) << " | "
       << fixed(s["lw_hd95"], 2) << " | " << fixed(s["hd95"], 2) << " | " << fixed(s["sensitivity"], 4) << " | "
       << fixed(s["specificity"], 4) << " |\n";
  }
}

// Binary PPM with the FLAIR slice in grey and WT/TC/ET tinted green/yellow/red.
void write_overlay(const fs::path& path, const MultiModalVolume& vol, const RegionMaskSet& rm, int axis, int index) {
  const Shape3& s = vol.shape();
  const int u_axis = axis == 0 ? 1 : 0;
  const int v_axis = axis == 2 ? 1 : 2;
  const int w = s[u_axis], h = s[v_axis];
  auto voxel = [&](int u, int v) {
    std::array<int, 3> p{};
    p[axis] = index;
    p[u_axis] = u;
    p[v_axis] = h - 1 - v;  // image rows run top to bottom
    return p;
  };
  const auto flair = vol.data.channel(static_cast<int>(Modality::Flair));
  float lo = 0.0f, hi = 0.0f;
  bool first = true;
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) {
      const auto p = voxel(u, v);
      const float x = flair[s.index(p[0], p[1], p[2])];
      lo = first ? x : std::min(lo, x);
      hi = first ? x : std::max(hi, x);
      first = false;
    }
  std::ofstream out(path, std::ios::binary);
  out << "P6\n" << w << ' ' << h << "\n255\n";
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) {
      const auto p = voxel(u, v);
      const std::size_t i = s.index(p[0], p[1], p[2]);
      const double grey = hi > lo ? (flair[i] - lo) / (hi - lo) : 0.0;
      std::array<double, 3> rgb{grey, grey, grey};
      std::optional<std::array<double, 3>> tint;
      if (rm.et[i]) tint = std::array<double, 3>{1.0, 0.0, 0.0};
      else if (rm.tc[i]) tint = std::array<double, 3>{1.0, 0.9, 0.0};
      else if (rm.wt[i]) tint = std::array<double, 3>{0.0, 0.8, 0.0};
      if (tint)
        for (int c = 0; c < 3; ++c) rgb[c] = 0.5 * rgb[c] + 0.5 * (*tint)[c];
      for (double c : rgb) out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(c, 0.0, 1.0) * 255.0))));
    }
}

int cmd_report(const GlobalOptions& g, const std::string& metrics_path, const std::string& predictions) {
  const PipelineConfig cfg = load_pipeline(g);
  if (g.dry_run) {
    print_plan("report", cfg, {{"metrics", metrics_path}, {"predictions", predictions}});
    return kExitOk;
  }
  std::ifstream in(metrics_path);
  if (!in) throw Error(ErrorCode::MissingFile, metrics_path);
  const ordered_json m = ordered_json::parse(in);
  const std::vector<std::string> regions{"ET", "TC", "WT"};
  fs::create_directories(cfg.output_dir);
  std::ofstream md(cfg.output_dir / "report.md", std::ios::binary);
  md << "# Segmentation report\n\n";
  md << "Mean over " << m.at("num_cases").get<int>() << " cases.\n\n";
  write_table(md, m.at("aggregate"), regions);
  for (const auto& c : m.at("cases")) {
    md << "\n## " << c.at("case_id").get<std::string>() << "\n\n";
    write_table(md, c, regions);
  }

  if (!predictions.empty()) {
    const DatasetManifest manifest = load_pipeline_manifest(cfg);
    const fs::path overlay_dir = cfg.output_dir / "overlays";
    fs::create_directories(overlay_dir);
    md << "\n## Overlays\n\n";
    for (const auto& id : prediction_cases(predictions)) {
      const ManifestEntry* e = manifest.find(id);
      if (e == nullptr) continue;
      const MultiModalVolume vol = load_volume(*e);
      const RegionMaskSet rm = load_region_masks(fs::path(predictions) / id);
      // Slices through the centre of the predicted whole tumour, or the
      // volume centre when nothing was predicted.
      std::array<double, 3> centre{};
      std::size_t n = 0;
      const Shape3& s = rm.wt.shape();
      for (int z = 0; z < s.nz; ++z)
        for (int y = 0; y < s.ny; ++y)
          for (int x = 0; x < s.nx; ++x)
            if (rm.wt(x, y, z)) {
              centre[0] += x;
              centre[1] += y;
              centre[2] += z;
              ++n;
            }
      for (int a = 0; a < 3; ++a) centre[a] = n > 0 ? centre[a] / static_cast<double>(n) : (s[a] - 1) / 2.0;
      const std::array<std::pair<const char*, int>, 3> views{{{"sagittal", 0}, {"coronal", 1}, {"axial", 2}}};
      for (const auto& [name, axis] : views) {
        const std::string file = id + "_" + name + ".ppm";
        write_overlay(overlay_dir / file, vol, rm, axis, static_cast<int>(std::lround(centre[axis])));
        md << "- " << id << " " << name << ": overlays/" << file << "\n";
      }
    }
  }
  return kExitOk;
}

// ---------------------------------------------------------------- phantom

int cmd_phantom(const GlobalOptions& g, int count, int size, const std::string& split, std::uint64_t seed) {
  const fs::path out = g.output.empty() ? fs::path("phantoms") : fs::path(g.output);
  if (count < 0 || size < 4) throw Error(ErrorCode::InvalidConfig, "phantom needs count >= 0 and size >= 4");
  if (g.dry_run) {
    std::cout << ordered_json{{"command", "phantom"}, {"output", out.generic_string()}, {"count", count}, {"size", size}}.dump(2)
              << '\n';
    return kExitOk;
  }
  ordered_json manifest = ordered_json::array();
  for (int i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "phantom_%03d", i);
    PhantomOptions opt;
    opt.shape = {size, size, size};
    const Phantom p = make_phantom(seed + static_cast<std::uint64_t>(i), opt, id);
    std::array<fs::path, kModalities> paths;
    ordered_json entry{{"case_id", id}};
    for (int c = 0; c < kModalities; ++c) {
      paths[c] = out / id / (std::string(kModalityNames[c]) + ".nii.gz");
      entry[kModalityNames[c]] = (fs::path(id) / (std::string(kModalityNames[c]) + ".nii.gz")).generic_string();
    }
    save_volume(p.volume, paths);
    save_label_map(p.labels, out / id / "label.nii.gz");
    entry["label"] = (fs::path(id) / "label.nii.gz").generic_string();
    entry["split"] = split;
    manifest.push_back(entry);
  }
  fs::create_directories(out);
  std::ofstream(out / "manifest.json", std::ios::binary) << manifest.dump(2) << '\n';
  log_info("phantoms_written", {{"count", count}, {"manifest", (out / "manifest.json").generic_string()}});
  return kExitOk;
}

int exit_code_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::InvalidConfig:
    case ErrorCode::InvalidMapping:
    case ErrorCode::InvalidSpec:
    case ErrorCode::UnknownVariant:
    case ErrorCode::IndivisibleShape:
      return kExitSchema;
    case ErrorCode::MissingCheckpoint:
      return kExitMissingCheckpoint;
    case ErrorCode::CaseMismatch:
      return kExitCaseMismatch;
    default:
      return kExitFailure;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pediatric brain tumour segmentation pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalOptions g;
  app.add_option("--config", g.config, "Pipeline config (JSON or YAML)");
  app.add_option("--seed", g.seed, "Override the config seed");
  app.add_option("--output", g.output, "Override the output directory");
  app.add_flag("--dry-run", g.dry_run, "Validate the config and print the plan without touching data");
  app.add_flag("--resume", g.resume, "Continue training from <output>/checkpoints/last.ckpt");
  app.add_option("--set", g.overrides, "Override a config key, e.g. --set train.max_steps=10");

  CaseSelection sel;
  std::string checkpoint, members, input, predictions, metrics_path, split_filter, phantom_split = "train";
  int count = 3, size = 32;
  std::uint64_t phantom_seed = 0;

  auto* train_cmd = app.add_subcommand("train", "Train one model");
  auto* predict_cmd = app.add_subcommand("predict", "Single-model prediction");
  predict_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  auto* ensemble_cmd = app.add_subcommand("ensemble", "Grouped logit fusion and majority vote");
  ensemble_cmd->add_option("--members", members, "Ensemble membership JSON");
  for (auto* cmd : {predict_cmd, ensemble_cmd}) {
    cmd->add_option("--cases", sel.cases, "Comma-separated case ids (default: all manifest cases)");
    cmd->add_option("--split", sel.split, "Restrict to one manifest split");
  }
  auto* post_cmd = app.add_subcommand("postprocess", "Size filtering, smoothing and hierarchy repair");
  post_cmd->add_option("--input", input, "Directory of raw predictions")->required();
  auto* eval_cmd = app.add_subcommand("evaluate", "Score predictions against the manifest labels");
  eval_cmd->add_option("--predictions", predictions, "Directory of predictions")->required();
  eval_cmd->add_option("--split", split_filter, "Restrict ground truth to one manifest split");
  auto* report_cmd = app.add_subcommand("report", "Markdown tables and slice overlays");
  report_cmd->add_option("--metrics", metrics_path, "metrics.json written by evaluate")->required();
  report_cmd->add_option("--predictions", predictions, "Prediction directory for overlays");
  auto* phantom_cmd = app.add_subcommand("phantom", "Write synthetic phantom cases and a manifest");
  phantom_cmd->add_option("--count", count, "Number of cases");
  phantom_cmd->add_option("--size", size, "Cube edge length in voxels");
  phantom_cmd->add_option("--split", phantom_split, "Split recorded in the manifest");
  phantom_cmd->add_option("--phantom-seed", phantom_seed, "Seed of the first phantom");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitSchema;
  }

  try {
    if (*train_cmd) return cmd_train(g);
    if (*predict_cmd) return cmd_predict(g, checkpoint, sel);
    if (*ensemble_cmd) return cmd_ensemble(g, members, sel);
    if (*post_cmd) return cmd_postprocess(g, input);
    if (*eval_cmd) return cmd_evaluate(g, predictions, split_filter);
    if (*report_cmd) return cmd_report(g, metrics_path, predictions);
    if (*phantom_cmd) return cmd_phantom(g, count, size, phantom_split, phantom_seed);
  } catch (const Error& e) {
    log(LogLevel::Error, "failed", {{"code", to_string(e.code())}, {"message", e.what()}});
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    log(LogLevel::Error, "failed", {{"message", e.what()}});
    return kExitFailure;
  }
  return kExitFailure;
}
