// imbseg: desk-scale pipeline for extremely imbalanced 3D segmentation.
// Subcommands: synth, preprocess, train, select, predict, evaluate.
//
// Exit codes: 0 success, 2 config/usage error, 3 missing artifact,
// 4 numerical failure.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstring>
#include <exception>
#include <functional>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "imbseg/imbseg.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace imbseg;

namespace {

// ---------------------------------------------------------------------------
// Small shared helpers
// ---------------------------------------------------------------------------

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

json load_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw missing_artifact("cannot open " + path);
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw config_error("invalid JSON in " + path + ": " + e.what());
  }
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw io_error("cannot write " + path);
  f << j.dump(2) << "\n";
}

// Runs fn(0..n-1) on up to `jobs` worker threads. Work items must be
// independent; completion order never affects outputs.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex err_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  const int n_threads = std::min<int>(jobs, static_cast<int>(n));
  pool.reserve(n_threads);
  for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

Index3 parse_triple(const std::vector<int>& v, const std::string& flag) {
  if (v.size() == 1) return Index3{v[0], v[0], v[0]};
  if (v.size() != 3) throw config_error(flag + " needs one or three comma-separated values");
  return Index3{v[0], v[1], v[2]};
}

Spacing3 parse_spacing(const std::vector<double>& v, const std::string& flag) {
  if (v.size() == 1) return Spacing3{v[0], v[0], v[0]};
  if (v.size() != 3) throw config_error(flag + " needs one or three comma-separated values");
  return Spacing3{v[0], v[1], v[2]};
}

// A dataset directory entry: image path plus optional mask, keyed by case id.
struct CaseFile {
  std::string id;
  std::string image;
  std::string mask;  // empty when absent
};

std::string strip_image_suffix(const std::string& name) {
  for (const char* suf : {"_image.nii.gz", "_image.nii"}) {
    if (name.size() > std::strlen(suf) && name.ends_with(suf)) return name.substr(0, name.size() - std::strlen(suf));
  }
  return {};
}

// Uses manifest.json when present, otherwise globs *_image.nii[.gz] and pairs
// masks by filename convention. Sorted by id either way.
std::vector<CaseFile> list_dataset_cases(const std::string& dir) {
  if (!fs::is_directory(dir)) throw missing_artifact("dataset directory not found: " + dir);
  std::vector<CaseFile> cases;
  const fs::path manifest = fs::path(dir) / "manifest.json";
  if (fs::exists(manifest)) {
    const json m = load_json_file(manifest.string());
    for (const auto& e : m.at("cases")) {
      CaseFile c;
      c.id = e.at("id").get<std::string>();
      c.image = (fs::path(dir) / e.at("image").get<std::string>()).string();
      if (e.contains("mask")) {
        const fs::path mp = fs::path(dir) / e.at("mask").get<std::string>();
        if (fs::exists(mp)) c.mask = mp.string();
      }
      cases.push_back(std::move(c));
    }
  } else {
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (!entry.is_regular_file()) continue;
      const std::string id = strip_image_suffix(entry.path().filename().string());
      if (id.empty()) continue;
      CaseFile c;
      c.id = id;
      c.image = entry.path().string();
      for (const char* suf : {"_mask.nii.gz", "_mask.nii"}) {
        const fs::path mp = fs::path(dir) / (id + suf);
        if (fs::exists(mp)) {
          c.mask = mp.string();
          break;
        }
      }
      cases.push_back(std::move(c));
    }
    std::sort(cases.begin(), cases.end(), [](const CaseFile& a, const CaseFile& b) { return a.id < b.id; });
  }
  if (cases.empty()) throw missing_artifact("no cases found in " + dir);
  return cases;
}

json config_section(const json& cfg, const char* key) {
  if (cfg.contains(key)) return cfg.at(key);
  return json::object();
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out;
  std::string config;
  int cases = 0;
  std::uint64_t seed = 0;
  double free_fraction = 0.18;
  std::vector<int> dims;
  int jobs = 1;
};

int cmd_synth(const SynthArgs& a, const CLI::App* sub) {
  json cfg = a.config.empty() ? json::object() : load_json_file(a.config);
  const json scfg = config_section(cfg, "synth");

  SynthSpec spec;
  spec.seed = sub->count("--seed") ? a.seed : scfg.value("seed", a.seed);
  int cases = sub->count("--cases") ? a.cases : scfg.value("cases", a.cases);
  double fraction =
      sub->count("--free-fraction") ? a.free_fraction : scfg.value("free_fraction", a.free_fraction);
  if (sub->count("--dims"))
    spec.dims = parse_triple(a.dims, "--dims");
  else if (scfg.contains("dims"))
    scfg.at("dims").get_to(spec.dims);

  if (cases < 1) throw config_error("cases must be ≥ 1");
  validate(spec);

  const std::vector<bool> free_flag = aneurysm_free_flags(cases, fraction);
  fs::create_directories(a.out);
  std::vector<json> entries(cases);
  parallel_for(static_cast<std::size_t>(cases), a.jobs, [&](std::size_t i) {
    const SynthCase c = generate_dataset_case(spec, static_cast<int>(i), free_flag[i]);
    write_volume(c.image, (fs::path(a.out) / (c.id + "_image.nii.gz")).string());
    write_mask(c.mask, (fs::path(a.out) / (c.id + "_mask.nii.gz")).string());
    entries[i] = manifest_entry(c);
  });

  json manifest;
  manifest["seed"] = spec.seed;
  manifest["dims"] = spec.dims;
  manifest["spacing"] = spec.spacing;
  manifest["cases"] = entries;
  write_json_file((fs::path(a.out) / "manifest.json").string(), manifest);
  std::cout << "wrote " << cases << " cases to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// preprocess
// ---------------------------------------------------------------------------

struct PreprocessArgs {
  std::string dataset;
  std::string work;
  std::string config;
  std::vector<double> target_spacing;
  int jobs = 1;
};

int cmd_preprocess(const PreprocessArgs& a, const CLI::App* sub) {
  json cfg = a.config.empty() ? json::object() : load_json_file(a.config);
  const auto cases = list_dataset_cases(a.dataset);

  // Target spacing: flag, then config, then per-axis median over the inputs.
  Spacing3 target{};
  std::vector<NiftiVolume> loaded(cases.size());
  for (std::size_t i = 0; i < cases.size(); ++i) loaded[i] = read_volume_full(cases[i].image);
  if (sub->count("--target-spacing")) {
    target = parse_spacing(a.target_spacing, "--target-spacing");
  } else if (cfg.contains("target_spacing")) {
    cfg.at("target_spacing").get_to(target);
  } else {
    for (int axis = 0; axis < 3; ++axis) {
      std::vector<double> sp;
      sp.reserve(loaded.size());
      for (const auto& lv : loaded) sp.push_back(lv.volume.spacing[axis]);
      std::sort(sp.begin(), sp.end());
      target[axis] = sp[(sp.size() - 1) / 2];  // lower median, deterministic
    }
  }
  for (double s : target)
    if (!(s > 0.0)) throw config_error("target spacing must be positive");

  const fs::path out_dir = fs::path(a.work) / "preprocessed";
  fs::create_directories(out_dir);
  parallel_for(cases.size(), a.jobs, [&](std::size_t i) {
    if (cases[i].mask.empty()) throw missing_artifact("no mask for case " + cases[i].id + " in " + a.dataset);
    const LabelMask mask = read_mask(cases[i].mask);
    const PreprocessedCase pc = preprocess_case(loaded[i].volume, &mask, target);
    write_volume(pc.image, (out_dir / (cases[i].id + "_image.nii.gz")).string());
    write_mask(*pc.mask, (out_dir / (cases[i].id + "_mask.nii.gz")).string());
    json rec = pc.record;
    rec["id"] = cases[i].id;
    write_json_file((out_dir / (cases[i].id + "_record.json")).string(), rec);
  });

  json index;
  index["target_spacing"] = target;
  json list = json::array();
  for (const auto& c : cases)
    list.push_back({{"id", c.id},
                    {"image", c.id + "_image.nii.gz"},
                    {"mask", c.id + "_mask.nii.gz"},
                    {"record", c.id + "_record.json"}});
  index["cases"] = list;
  write_json_file((out_dir / "index.json").string(), index);
  std::cout << "preprocessed " << cases.size() << " cases to " << out_dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string work;
  std::string config;
  int fold = -1;
  std::string loss;
  int folds = 5;
  int iterations = -1;
  int eval_interval = -1;
  std::uint64_t seed = 0;
  std::vector<int> patch;
  int batch_size = -1;
  double lr0 = -1.0;
  double momentum = -1.0;
  double oversample = -1.0;
  double grad_clip = -1.0;
  int net_base = -1;
  int net_levels = -1;
};

std::vector<TrainCase> load_preprocessed(const std::string& work, json* index_out) {
  const fs::path dir = fs::path(work) / "preprocessed";
  const fs::path index_path = dir / "index.json";
  if (!fs::exists(index_path))
    throw missing_artifact("preprocessed index not found: " + index_path.string() + " (run preprocess first)");
  const json index = load_json_file(index_path.string());
  std::vector<TrainCase> cases;
  for (const auto& e : index.at("cases")) {
    const std::string id = e.at("id").get<std::string>();
    Volume img = read_volume((dir / e.at("image").get<std::string>()).string());
    LabelMask mask = read_mask((dir / e.at("mask").get<std::string>()).string());
    cases.push_back(make_train_case(id, std::move(img), std::move(mask)));
  }
  if (index_out) *index_out = index;
  return cases;
}

std::string checkpoint_stem(int fold, const std::string& loss) {
  return "fold" + std::to_string(fold) + "_" + loss;
}

int cmd_train(const TrainArgs& a, const CLI::App* sub) {
  json cfg = a.config.empty() ? json::object() : load_json_file(a.config);

  NetConfig net;
  if (cfg.contains("net")) cfg.at("net").get_to(net);
  if (a.net_base > 0) net.base_channels = a.net_base;
  if (a.net_levels > 0) net.levels = a.net_levels;
  validate(net);

  TrainConfig tc;
  if (cfg.contains("train")) cfg.at("train").get_to(tc);
  tc.loss.kind = loss_kind_from_string(a.loss);
  if (sub->count("--iterations")) tc.iterations = a.iterations;
  if (sub->count("--eval-interval")) tc.eval_interval = a.eval_interval;
  if (sub->count("--seed")) tc.seed = a.seed;
  if (sub->count("--patch-size")) tc.patch_size = parse_triple(a.patch, "--patch-size");
  if (sub->count("--batch-size")) tc.batch_size = a.batch_size;
  if (sub->count("--lr")) tc.lr0 = a.lr0;
  if (sub->count("--momentum")) tc.momentum = a.momentum;
  if (sub->count("--oversample")) tc.oversample_fraction = a.oversample;
  if (sub->count("--grad-clip")) tc.grad_clip_norm = a.grad_clip;
  validate(tc);
  if (tc.iterations < 1) throw config_error("train: iterations must be >= 1");

  const int n_folds = a.folds;
  if (n_folds < 1) throw config_error("folds must be >= 1");
  if (a.fold < 0 || a.fold >= n_folds)
    throw config_error("fold must be in [0, " + std::to_string(n_folds) + ")");

  const auto dataset = load_preprocessed(a.work, nullptr);
  std::vector<std::string> ids;
  ids.reserve(dataset.size());
  for (const auto& c : dataset) ids.push_back(c.id);
  const auto folds = make_folds(ids, n_folds, tc.seed);
  const FoldSplit& fold = folds[a.fold];

  std::cout << "training fold " << a.fold << " (" << fold.train_case_ids.size() << " train / "
            << fold.val_case_ids.size() << " val) with " << a.loss << " for " << tc.iterations << " iterations\n";
  const TrainResult res = train_fold(dataset, fold, net, tc);

  const fs::path ckpt_dir = fs::path(a.work) / "checkpoints";
  fs::create_directories(ckpt_dir);
  const std::string stem = checkpoint_stem(a.fold, a.loss);
  save_checkpoint((ckpt_dir / (stem + ".ckpt")).string(), net, res.best_params);

  std::ofstream log(ckpt_dir / (stem + "_log.csv"));
  if (!log) throw io_error("cannot write training log");
  log << "iteration,loss,lr,val_dsc\n";
  for (const auto& row : res.log) {
    log << row.iteration << "," << fmt_double(row.loss) << "," << fmt_double(row.lr) << ",";
    if (!std::isnan(row.val_dsc)) log << fmt_double(row.val_dsc);
    log << "\n";
  }
  log.close();

  double final_val = std::numeric_limits<double>::quiet_NaN();
  for (auto it = res.log.rbegin(); it != res.log.rend(); ++it)
    if (!std::isnan(it->val_dsc)) {
      final_val = it->val_dsc;
      break;
    }
  json summary;
  summary["fold"] = a.fold;
  summary["loss"] = a.loss;
  summary["checkpoint"] = stem + ".ckpt";
  summary["best_val_dsc"] = res.best_val_dsc;
  summary["best_iteration"] = res.best_iteration;
  summary["final_val_dsc"] = final_val;
  summary["iterations"] = tc.iterations;
  summary["seed"] = tc.seed;
  summary["patch_size"] = tc.patch_size;
  summary["net"] = net;
  summary["train"] = tc;
  write_json_file((ckpt_dir / (stem + "_summary.json")).string(), summary);
  std::cout << "fold " << a.fold << " " << a.loss << ": best val DSC " << fmt_double(res.best_val_dsc)
            << " at iteration " << res.best_iteration << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// select
// ---------------------------------------------------------------------------

struct SelectArgs {
  std::string work;
  int folds = 5;
  std::string losses = "dice_ce,dice_topk";
};

int cmd_select(const SelectArgs& a, const CLI::App*) {
  std::vector<std::string> groups;
  std::stringstream ss(a.losses);
  for (std::string tok; std::getline(ss, tok, ',');)
    if (!tok.empty()) groups.push_back(tok);
  if (groups.empty()) throw config_error("losses must name at least one group");
  std::vector<LossKind> kinds;
  for (const auto& g : groups) kinds.push_back(loss_kind_from_string(g));

  const fs::path ckpt_dir = fs::path(a.work) / "checkpoints";
  std::vector<std::vector<double>> table(a.folds, std::vector<double>(groups.size()));
  std::vector<json> summaries(static_cast<std::size_t>(a.folds) * groups.size());
  for (int f = 0; f < a.folds; ++f)
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const fs::path p = ckpt_dir / (checkpoint_stem(f, groups[g]) + "_summary.json");
      if (!fs::exists(p)) throw missing_artifact("training summary not found: " + p.string());
      const json s = load_json_file(p.string());
      if (!s.contains("best_val_dsc") || s.at("best_val_dsc").is_null())
        throw config_error("summary lacks best_val_dsc: " + p.string());
      table[f][g] = s.at("best_val_dsc").get<double>();
      summaries[f * groups.size() + g] = s;
    }

  const std::vector<LossKind> winners = select_best_per_fold(kinds, table);

  json ensemble;
  ensemble["members"] = json::array();
  json patch_size;
  for (int f = 0; f < a.folds; ++f) {
    const auto it = std::find(kinds.begin(), kinds.end(), winners[f]);
    const std::size_t g = static_cast<std::size_t>(it - kinds.begin());
    const json& s = summaries[f * groups.size() + g];
    ensemble["members"].push_back({{"fold", f},
                                   {"loss", groups[g]},
                                   {"checkpoint", s.at("checkpoint").get<std::string>()},
                                   {"val_dsc", table[f][g]}});
    if (patch_size.is_null())
      patch_size = s.at("patch_size");
    else if (patch_size != s.at("patch_size"))
      throw config_error("selected checkpoints disagree on patch_size");
    std::cout << "fold " << f << ": ";
    for (std::size_t k = 0; k < groups.size(); ++k)
      std::cout << groups[k] << "=" << fmt_double(table[f][k]) << (k + 1 < groups.size() ? " " : "");
    std::cout << " -> " << groups[g] << "\n";
  }
  ensemble["patch_size"] = patch_size;
  write_json_file((ckpt_dir / "ensemble.json").string(), ensemble);
  std::cout << "wrote " << (ckpt_dir / "ensemble.json").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

struct PredictArgs {
  std::string work;
  std::string input;
  std::string out;
  std::string ensemble_file;
  std::string checkpoint;
  std::vector<int> patch;
  std::vector<double> target_spacing;
  std::size_t min_size = 11;
  int connectivity = 26;
  bool no_postprocess = false;
  int jobs = 1;
};

int cmd_predict(const PredictArgs& a, const CLI::App* sub) {
  // Resolve members: one explicit checkpoint, or the ensemble manifest.
  std::vector<std::string> member_paths;
  Index3 patch{32, 32, 32};
  if (!a.checkpoint.empty()) {
    member_paths.push_back(a.checkpoint);
  } else {
    fs::path epath = a.ensemble_file.empty() ? fs::path(a.work) / "checkpoints" / "ensemble.json"
                                             : fs::path(a.ensemble_file);
    if (!fs::exists(epath)) throw missing_artifact("ensemble manifest not found: " + epath.string());
    const json e = load_json_file(epath.string());
    for (const auto& m : e.at("members")) {
      fs::path c = m.at("checkpoint").get<std::string>();
      if (c.is_relative()) c = epath.parent_path() / c;
      member_paths.push_back(c.string());
    }
    if (e.contains("patch_size")) e.at("patch_size").get_to(patch);
  }
  if (sub->count("--patch-size")) patch = parse_triple(a.patch, "--patch-size");

  Spacing3 target{1.0, 1.0, 1.0};
  if (sub->count("--target-spacing")) {
    target = parse_spacing(a.target_spacing, "--target-spacing");
  } else {
    const fs::path index_path = fs::path(a.work) / "preprocessed" / "index.json";
    if (fs::exists(index_path)) load_json_file(index_path.string()).at("target_spacing").get_to(target);
  }

  const auto members = load_ensemble(member_paths);
  const auto cases = list_dataset_cases(a.input);
  const fs::path out_dir = a.out.empty() ? fs::path(a.work) / "predictions" : fs::path(a.out);
  fs::create_directories(out_dir);

  std::vector<std::string> notes(cases.size());
  parallel_for(cases.size(), a.jobs, [&](std::size_t i) {
    const NiftiVolume nv = read_volume_full(cases[i].image);
    const PreprocessedCase pc = preprocess_case(nv.volume, nullptr, target);
    EnsembleResult er = ensemble_predict(members, pc.image, patch);
    LabelMask restored = restore_to_original(er.mask, pc.record);
    int removed = 0;
    if (!a.no_postprocess) {
      RemoveSmallResult rs = remove_small_components(restored, a.min_size, a.connectivity);
      restored = std::move(rs.mask);
      removed = rs.removed_count;
    }
    write_mask(restored, (out_dir / (cases[i].id + "_pred.nii.gz")).string(), &nv.header);
    notes[i] = cases[i].id + ": " + std::to_string(restored.foreground_count()) + " fg voxels" +
               (a.no_postprocess ? "" : " (" + std::to_string(removed) + " components removed)");
  });
  for (const auto& n : notes) std::cout << n << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct EvaluateArgs {
  std::string work;
  std::string pred;
  std::string ref;
  std::string out;
  int jobs = 1;
};

int cmd_evaluate(const EvaluateArgs& a, const CLI::App*) {
  const auto cases = list_dataset_cases(a.ref);
  const fs::path out_dir = a.out.empty() ? fs::path(a.work) / "metrics" : fs::path(a.out);
  fs::create_directories(out_dir);

  std::vector<CaseMetrics> results(cases.size());
  parallel_for(cases.size(), a.jobs, [&](std::size_t i) {
    if (cases[i].mask.empty()) throw missing_artifact("no reference mask for case " + cases[i].id);
    const fs::path pred_path = fs::path(a.pred) / (cases[i].id + "_pred.nii.gz");
    if (!fs::exists(pred_path)) throw missing_artifact("prediction not found: " + pred_path.string());
    const LabelMask pred = read_mask(pred_path.string());
    const LabelMask ref = read_mask(cases[i].mask);
    results[i] = evaluate_case(pred, ref);
    results[i].case_id = cases[i].id;
  });

  std::ofstream csv(out_dir / "case_metrics.csv");
  if (!csv) throw io_error("cannot write case_metrics.csv");
  csv << "case_id,dsc,hd95,vs,pred_components,ref_components,flags\n";
  for (const auto& m : results) {
    csv << m.case_id << "," << fmt_double(m.dsc) << ",";
    if (m.hd95_defined) csv << fmt_double(m.hd95);
    csv << "," << fmt_double(m.volumetric_similarity) << "," << m.pred_components << "," << m.ref_components << ",";
    std::vector<std::string> flags;
    if (m.empty_pred) flags.push_back("empty_pred");
    if (m.empty_ref) flags.push_back("empty_ref");
    for (std::size_t k = 0; k < flags.size(); ++k) csv << (k ? ";" : "") << flags[k];
    csv << "\n";
  }
  csv.close();

  const MetricsSummary s = aggregate(results);
  json summary;
  summary["n_cases"] = s.n_cases;
  summary["mean_dsc"] = s.mean_dsc;
  summary["mean_vs"] = s.mean_vs;
  summary["mean_hd95_defined"] = s.mean_hd95_defined;
  summary["hd95_defined_count"] = s.hd95_defined_count;
  summary["hd95_undefined_count"] = s.hd95_undefined_count;
  write_json_file((out_dir / "summary.json").string(), summary);
  std::cout << "mean DSC " << fmt_double(s.mean_dsc) << ", mean VS " << fmt_double(s.mean_vs)
            << ", mean HD95 " << fmt_double(s.mean_hd95_defined) << " (" << s.hd95_undefined_count
            << " undefined) over " << s.n_cases << " cases\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale loss-ensemble pipeline for extremely imbalanced 3D segmentation"};
  app.require_subcommand(1);

  SynthArgs sy;
  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth->add_option("--out", sy.out, "Output dataset directory")->required();
  synth->add_option("--cases", sy.cases, "Number of cases")->required();
  synth->add_option("--seed", sy.seed, "Master seed");
  synth->add_option("--free-fraction", sy.free_fraction, "Fraction of aneurysm-free cases");
  synth->add_option("--dims", sy.dims, "Case dims (one value or x,y,z)")->delimiter(',');
  synth->add_option("--jobs", sy.jobs, "Worker threads");
  synth->add_option("--config", sy.config, "JSON config file");

  PreprocessArgs pp;
  CLI::App* prep = app.add_subcommand("preprocess", "Crop, resample, and normalize a dataset");
  prep->add_option("--dataset", pp.dataset, "Input dataset directory")->required();
  prep->add_option("--work", pp.work, "Work directory")->required();
  prep->add_option("--target-spacing", pp.target_spacing, "Target spacing mm (one value or x,y,z)")->delimiter(',');
  prep->add_option("--jobs", pp.jobs, "Worker threads");
  prep->add_option("--config", pp.config, "JSON config file");

  TrainArgs tr;
  CLI::App* train = app.add_subcommand("train", "Train one fold with one loss group");
  train->add_option("--work", tr.work, "Work directory")->required();
  train->add_option("--fold", tr.fold, "Fold index (0-based)")->required();
  train->add_option("--loss", tr.loss, "Loss group (dice_ce or dice_topk)")->required();
  train->add_option("--folds", tr.folds, "Number of folds");
  train->add_option("--iterations", tr.iterations, "Training iterations");
  train->add_option("--eval-interval", tr.eval_interval, "Validate every N iterations (0: only at the end)");
  train->add_option("--seed", tr.seed, "Experiment seed (keep identical across folds and groups)");
  train->add_option("--patch-size", tr.patch, "Patch size (one value or x,y,z)")->delimiter(',');
  train->add_option("--batch-size", tr.batch_size, "Patches per iteration");
  train->add_option("--lr", tr.lr0, "Initial learning rate (poly decay)");
  train->add_option("--momentum", tr.momentum, "Nesterov momentum");
  train->add_option("--oversample", tr.oversample, "Forced-foreground patch fraction");
  train->add_option("--grad-clip", tr.grad_clip, "Gradient norm clip (0 disables)");
  train->add_option("--net-base", tr.net_base, "Base channels");
  train->add_option("--net-levels", tr.net_levels, "U-Net levels");
  train->add_option("--config", tr.config, "JSON config file");

  SelectArgs se;
  CLI::App* select = app.add_subcommand("select", "Pick the best loss group per fold");
  select->add_option("--work", se.work, "Work directory")->required();
  select->add_option("--folds", se.folds, "Number of folds");
  select->add_option("--losses", se.losses, "Comma-separated loss groups (first listed wins ties)");

  PredictArgs pr;
  CLI::App* predict = app.add_subcommand("predict", "Ensemble prediction with post-processing");
  predict->add_option("--work", pr.work, "Work directory");
  predict->add_option("--input", pr.input, "Input dataset directory")->required();
  predict->add_option("--out", pr.out, "Output directory (default <work>/predictions)");
  predict->add_option("--ensemble", pr.ensemble_file, "Ensemble manifest (default <work>/checkpoints/ensemble.json)");
  predict->add_option("--checkpoint", pr.checkpoint, "Single checkpoint instead of an ensemble");
  predict->add_option("--patch-size", pr.patch, "Sliding-window patch size")->delimiter(',');
  predict->add_option("--target-spacing", pr.target_spacing, "Target spacing mm")->delimiter(',');
  predict->add_option("--min-size", pr.min_size, "Minimum surviving component size in voxels");
  predict->add_option("--connectivity", pr.connectivity, "Component connectivity (6, 18, or 26)");
  predict->add_flag("--no-postprocess", pr.no_postprocess, "Skip small-component removal");
  predict->add_option("--jobs", pr.jobs, "Worker threads");

  EvaluateArgs ev;
  CLI::App* evaluate = app.add_subcommand("evaluate", "Score predictions against reference masks");
  evaluate->add_option("--work", ev.work, "Work directory");
  evaluate->add_option("--pred", ev.pred, "Predictions directory")->required();
  evaluate->add_option("--ref", ev.ref, "Reference dataset directory")->required();
  evaluate->add_option("--out", ev.out, "Output directory (default <work>/metrics)");
  evaluate->add_option("--jobs", ev.jobs, "Worker threads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) return cmd_synth(sy, synth);
    if (prep->parsed()) return cmd_preprocess(pp, prep);
    if (train->parsed()) return cmd_train(tr, train);
    if (select->parsed()) return cmd_select(se, select);
    if (predict->parsed()) return cmd_predict(pr, predict);
    if (evaluate->parsed()) return cmd_evaluate(ev, evaluate);
  } catch (const config_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const missing_artifact& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const numeric_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
