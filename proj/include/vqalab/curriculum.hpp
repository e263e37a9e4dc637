#pragma once

// Run orchestration: a base policy, optional SFT, then GRPO stages in plan
// order, each inheriting the previous stage's weights. Everything a run writes
// lives under one directory:
//
//   manifest.json          resolved configuration (written first)
//   checkpoints/*.ckpt     base, stage-sft, stage-A, ...
//   metrics/*.jsonl        base.jsonl, sft.jsonl, grpo-A.jsonl, ...
//   evals/*.jsonl          prediction dumps
//   report.json            stage summaries and evaluations
//   COMPLETE               completion marker

#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vqalab/config.hpp"
#include "vqalab/evaluation.hpp"
#include "vqalab/grpo.hpp"
#include "vqalab/sft.hpp"

namespace vqalab {

namespace fs = std::filesystem;

inline constexpr const char* kCompleteMarker = "COMPLETE";

// ----------------------------- file helpers -----------------------------

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InputError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes via a temporary file and a rename so readers never see partial files.
inline void write_file(const fs::path& p, std::string_view content) {
  fs::create_directories(p.parent_path());
  const fs::path tmp = p.string() + ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw InputError("write failed for " + tmp.string());
  }
  fs::rename(tmp, p);
}

/// Append-only JSONL stream that becomes visible under its final name on close().
class JsonlWriter {
 public:
  explicit JsonlWriter(fs::path p) : path_(std::move(p)), tmp_(path_.string() + ".partial") {
    fs::create_directories(path_.parent_path());
    out_.open(tmp_, std::ios::binary | std::ios::trunc);
    if (!out_) throw InputError("cannot write " + tmp_.string());
  }
  void line(const std::string& s) {
    out_ << s << '\n';
    out_.flush();
  }
  void close() {
    out_.close();
    fs::rename(tmp_, path_);
  }

 private:
  fs::path path_, tmp_;
  std::ofstream out_;
};

// ----------------------------- datasets -----------------------------

/// Generates the dataset (or reads it from data.path) and checks the manifest
/// fingerprint when one is recorded.
inline Dataset load_dataset(RunManifest& m) {
  Dataset ds;
  ds.config = m.data.gen;
  if (m.data.path) ds.samples = read_samples_jsonl(*m.data.path);
  else ds = generate_dataset(m.data.gen);
  const std::string fp = dataset_fingerprint(ds);
  if (!m.dataset_fingerprint.empty() && m.dataset_fingerprint != fp)
    throw ConfigError("dataset fingerprint " + fp + " does not match manifest " + m.dataset_fingerprint);
  m.dataset_fingerprint = fp;
  return ds;
}

inline std::vector<const VqaSample*> require_split(const Dataset& ds, Split s) {
  auto out = ds.split(s);
  if (out.empty()) throw ConfigError("dataset split '" + std::string(to_string(s)) + "' is empty");
  return out;
}

// ----------------------------- results -----------------------------

struct StageRecord {
  std::string name;        // "sft", "A", "B", "C"
  std::string checkpoint;  // relative to the run directory
  std::size_t steps = 0;
  nlohmann::ordered_json summary = nlohmann::ordered_json::object();
  std::vector<EvalReport> evals;  // one per configured mode
};

struct CurriculumResult {
  RunManifest manifest;
  std::vector<StageRecord> stages;
  Model final_model;
};

struct RunOptions {
  bool resume = false;
  bool sft_only = false;  // stop after the SFT phase
  std::function<void(const std::string&)> log;
};

inline nlohmann::ordered_json to_json(const StageRecord& s) {
  nlohmann::ordered_json j;
  j["stage"] = s.name;
  j["checkpoint"] = s.checkpoint;
  j["steps"] = s.steps;
  j["summary"] = s.summary;
  nlohmann::ordered_json ev = nlohmann::ordered_json::array();
  for (const auto& e : s.evals) ev.push_back(to_json(e));
  j["evals"] = ev;
  return j;
}

inline nlohmann::ordered_json grpo_summary(const std::vector<GrpoMetrics>& ms, const DynamicsConfig& dc) {
  nlohmann::ordered_json j;
  if (ms.empty()) return j;
  double f = 0, a = 0, k = 0;
  for (const auto& m : ms) f += m.reward_format_mean, a += m.reward_acc_mean, k += m.kl;
  const double n = static_cast<double>(ms.size());
  j["reward_format_mean"] = f / n;
  j["reward_acc_mean"] = a / n;
  j["kl_mean"] = k / n;
  j["dynamics"] = to_json(analyze_dynamics(ms, dc));
  return j;
}

// ----------------------------- curriculum -----------------------------

namespace detail {

inline std::string stage_ckpt(const std::string& name) { return "checkpoints/stage-" + name + ".ckpt"; }

inline std::vector<GrpoMetrics> read_grpo_metrics(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw InputError("cannot read " + p.string());
  return read_metrics_jsonl(in);
}

inline std::vector<EvalReport> run_evals(const Model& model, const Vocab& vocab, const Dataset& ds,
                                         const RunManifest& m, const fs::path& dir, const std::string& name) {
  std::vector<EvalReport> out;
  const auto test = require_split(ds, Split::test);
  const auto im = std::make_shared<InferenceModel>(model);
  for (PromptMode mode : m.eval.modes) {
    auto res = evaluate(greedy_responder(im, vocab, mode, m.eval.max_len), test, mode, "stage-" + name);
    write_file(dir / "evals" / ("stage-" + name + "." + std::string(to_string(mode)) + ".jsonl"),
               predictions_to_jsonl(res.predictions));
    out.push_back(std::move(res.report));
  }
  return out;
}

}  // namespace detail

/// Runs (or resumes) one curriculum into `dir`.
inline CurriculumResult run_curriculum(RunManifest m, const fs::path& dir, const RunOptions& opt = {}) {
  auto log = [&](const std::string& s) {
    if (opt.log) opt.log(s);
  };
  m.validate();
  const Dataset ds = load_dataset(m);
  if (opt.sft_only && m.route != Route::sft_grpo) throw ConfigError("an SFT-only run needs route sft_grpo");
  const bool sft_phase = m.route == Route::sft_grpo;
  std::vector<std::pair<Stage, std::vector<const VqaSample*>>> rl;
  if (!opt.sft_only)
    for (Stage s : m.plan) rl.emplace_back(s, require_split(ds, rl_split_of(s)));
  const auto sft_split = require_split(ds, m.sft.split);
  require_split(ds, Split::test);

  const std::string manifest_text = to_json(m).dump(2) + "\n";
  if (opt.resume && fs::exists(dir / "manifest.json")) {
    if (read_file(dir / "manifest.json") != manifest_text)
      throw ConfigError("cannot resume: manifest differs from the one in " + dir.string());
  } else {
    write_file(dir / "manifest.json", manifest_text);
  }

  const Vocab vocab = Vocab::standard();
  PolicyConfig pc = m.policy;
  pc.vocab_size = vocab.size();
  pc.validate();
  auto have = [&](const std::string& rel) { return opt.resume && fs::exists(dir / rel); };
  auto save = [&](const std::string& rel, const Model& model, nlohmann::ordered_json meta) {
    meta["code_version"] = kCodeVersion;
    meta["dataset_fingerprint"] = m.dataset_fingerprint;
    write_file(dir / rel, checkpoint_bytes(Checkpoint{model, vocab.hash(), std::move(meta)}));
  };
  auto load = [&](const std::string& rel) { return load_checkpoint((dir / rel).string(), vocab.hash()).model; };

  CurriculumResult res;

  // Initial policy: a given checkpoint or the format-prior warm-up.
  Model model;
  std::string init_from;
  if (m.init_checkpoint) {
    model = load_checkpoint(*m.init_checkpoint, vocab.hash()).model;
    if (model.base.config.context != pc.context || model.base.config.width != pc.width)
      log("note: init checkpoint shape overrides the model section");
    init_from = *m.init_checkpoint;
  } else if (have("checkpoints/base.ckpt")) {
    log("resume: base");
    model = load("checkpoints/base.ckpt");
    init_from = "checkpoints/base.ckpt";
  } else {
    log("base warm-up");
    JsonlWriter w(dir / "metrics" / "base.jsonl");
    auto r = warmup_base(init_params(pc, m.init_seed()), sft_split, vocab, m.base,
                         [&](const LossRecord& x) { w.line(to_jsonl(x)); });
    w.close();
    model = std::move(r.model);
    save("checkpoints/base.ckpt", model, {{"stage", "base"}, {"steps", r.steps}});
    init_from = "checkpoints/base.ckpt";
  }

  if (sft_phase) {
    StageRecord rec{"sft", detail::stage_ckpt("sft"), 0, {}, {}};
    if (have(rec.checkpoint)) {
      log("resume: sft");
      auto ck = load_checkpoint((dir / rec.checkpoint).string(), vocab.hash());
      model = std::move(ck.model);
      rec.steps = ck.meta.at("steps").get<std::size_t>();
      rec.summary = ck.meta.at("summary");
    } else {
      log("sft");
      Model start = model;
      if (start.adapter) start = Model{apply_adapter(start.base, *start.adapter), std::nullopt};
      JsonlWriter w(dir / "metrics" / "sft.jsonl");
      auto r = run_sft(start.base, sft_split, vocab, m.sft, [&](const LossRecord& x) { w.line(to_jsonl(x)); });
      w.close();
      model = std::move(r.model);
      nlohmann::ordered_json meta{{"stage", "sft"}, {"steps", r.steps}, {"early_stopped", r.early_stopped},
                                  {"init", init_from}};
      meta["best_val_loss"] = r.best_val_loss ? nlohmann::ordered_json(*r.best_val_loss) : nlohmann::ordered_json();
      rec.steps = r.steps;
      rec.summary = {{"early_stopped", r.early_stopped}, {"final_train_loss", r.curve.empty() ? 0.0 : r.curve.back().loss}};
      meta["summary"] = rec.summary;
      save(rec.checkpoint, model, meta);
    }
    if (m.eval.each_stage || opt.sft_only) rec.evals = detail::run_evals(model, vocab, ds, m, dir, rec.name);
    res.stages.push_back(std::move(rec));
    init_from = detail::stage_ckpt("sft");
  }

  for (std::size_t k = 0; k < rl.size(); ++k) {
    const auto& [stage, prompts] = rl[k];
    StageRecord rec{std::string(to_string(stage)), detail::stage_ckpt(std::string(to_string(stage))), 0, {}, {}};
    const fs::path metrics = dir / "metrics" / ("grpo-" + rec.name + ".jsonl");
    std::vector<GrpoMetrics> ms;
    if (have(rec.checkpoint) && fs::exists(metrics)) {
      log("resume: stage " + rec.name);
      model = load(rec.checkpoint);
      ms = detail::read_grpo_metrics(metrics);
    } else {
      log("grpo stage " + rec.name);
      // GRPO optimizes the full policy: fold any adapter into the base first.
      const bool merged = model.adapter.has_value();
      if (merged) model = Model{apply_adapter(model.base, *model.adapter), std::nullopt};
      JsonlWriter w(metrics);
      GrpoStageResult r;
      try {
        r = train_grpo_stage(std::move(model), prompts, m.grpo, stage, vocab,
                             [&](const GrpoMetrics& x) { w.line(to_json(x).dump()); });
      } catch (const NumericalError& e) {
        write_file(dir / "metrics" / ("failure-" + rec.name + ".jsonl"), e.dump);
        throw;
      }
      w.close();
      model = std::move(r.model);
      ms = std::move(r.metrics);
      nlohmann::ordered_json init{{"from", init_from}, {"adapter_merged", merged}};
      save(rec.checkpoint, model, {{"stage", rec.name}, {"steps", ms.size()}, {"init", init}});
    }
    rec.steps = ms.size();
    rec.summary = grpo_summary(ms, m.dynamics);
    if (m.eval.each_stage || k + 1 == rl.size()) rec.evals = detail::run_evals(model, vocab, ds, m, dir, rec.name);
    res.stages.push_back(std::move(rec));
    init_from = detail::stage_ckpt(res.stages.back().name);
  }

  nlohmann::ordered_json report;
  report["route"] = to_string(m.route);
  report["dataset_fingerprint"] = m.dataset_fingerprint;
  report["code_version"] = kCodeVersion;
  nlohmann::ordered_json stages = nlohmann::ordered_json::array();
  for (const auto& s : res.stages) stages.push_back(to_json(s));
  report["stages"] = stages;
  write_file(dir / "report.json", report.dump(2) + "\n");
  write_file(dir / kCompleteMarker, m.dataset_fingerprint + "\n");
  res.manifest = std::move(m);
  res.final_model = std::move(model);
  return res;
}

// ----------------------------- ablation -----------------------------

struct AblationRow {
  Route route;
  std::vector<Stage> trained;  // prefix of the plan
  std::array<std::optional<double>, 3> stage_accuracy;
  double overall = 0.0;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::string dataset_fingerprint;
  nlohmann::ordered_json report;
};

inline std::string plan_label(const std::vector<Stage>& p) {
  std::string s;
  for (Stage x : p) s += (s.empty() ? "" : "+") + std::string(to_string(x));
  return s;
}

/// Both routes with matched seeds and plans; one row per route and plan prefix
/// (stage checkpoints are inherited, so the prefix rows come from one run).
inline AblationResult run_ablation(RunManifest base, const fs::path& dir, const RunOptions& opt = {}) {
  base.eval.each_stage = true;
  AblationResult out;
  std::map<Route, CurriculumResult> runs;
  for (Route r : {Route::grpo_direct, Route::sft_grpo}) {
    RunManifest m = base;
    m.route = r;
    if (opt.log) opt.log("ablation route " + to_string(r));
    runs.emplace(r, run_curriculum(m, dir / ("route-" + to_string(r)), opt));
  }
  if (runs.at(Route::grpo_direct).manifest.dataset_fingerprint != runs.at(Route::sft_grpo).manifest.dataset_fingerprint)
    throw InternalError("ablation routes saw different datasets");
  out.dataset_fingerprint = runs.at(Route::sft_grpo).manifest.dataset_fingerprint;

  nlohmann::ordered_json rows = nlohmann::ordered_json::array(), deltas = nlohmann::ordered_json::array();
  for (Route r : {Route::grpo_direct, Route::sft_grpo}) {
    const auto& run = runs.at(r);
    std::vector<Stage> trained;
    for (const auto& st : run.stages) {
      if (st.name == "sft") continue;
      trained.push_back(stage_from_string(st.name));
      AblationRow row{r, trained, {}, st.evals.front().overall_accuracy()};
      for (std::size_t s = 0; s < 3; ++s) row.stage_accuracy[s] = st.evals.front().per_stage[s].accuracy();
      out.rows.push_back(row);
    }
  }
  auto opt_json = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(); };
  for (const auto& row : out.rows) {
    nlohmann::ordered_json j;
    j["route"] = to_string(row.route);
    j["trained"] = plan_label(row.trained);
    j["A"] = opt_json(row.stage_accuracy[0]);
    j["B"] = opt_json(row.stage_accuracy[1]);
    j["C"] = opt_json(row.stage_accuracy[2]);
    j["overall"] = row.overall;
    rows.push_back(j);
  }
  const std::size_t half = out.rows.size() / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const auto& r1 = out.rows[i];
    const auto& r2 = out.rows[half + i];
    nlohmann::ordered_json j;
    j["trained"] = plan_label(r1.trained);
    for (std::size_t s = 0; s < 3; ++s) {
      const auto& a = r1.stage_accuracy[s];
      const auto& b = r2.stage_accuracy[s];
      j[std::string(to_string(static_cast<Stage>(s)))] = a && b ? nlohmann::ordered_json(*b - *a) : nlohmann::ordered_json();
    }
    j["overall"] = r2.overall - r1.overall;
    deltas.push_back(j);
  }
  out.report["dataset_fingerprint"] = out.dataset_fingerprint;
  out.report["mode"] = to_string(base.eval.modes.front());
  out.report["rows"] = rows;
  out.report["deltas_route2_minus_route1"] = deltas;
  write_file(dir / "ablation.json", out.report.dump(2) + "\n");
  return out;
}

// ----------------------------- cross-task -----------------------------

/// Single-stage runs for A, B and C under the manifest's route, evaluated on the full test split.
inline CrossTaskMatrix run_cross_task(RunManifest base, const fs::path& dir, const RunOptions& opt = {}) {
  std::vector<std::pair<Stage, Responder>> policies;
  Dataset ds;
  const Vocab vocab = Vocab::standard();
  for (Stage s : {Stage::A, Stage::B, Stage::C}) {
    RunManifest m = base;
    m.plan = {s};
    m.eval.each_stage = false;
    if (opt.log) opt.log("cross-task stage " + std::string(to_string(s)));
    auto r = run_curriculum(m, dir / ("trained-" + std::string(to_string(s))), opt);
    if (ds.samples.empty()) ds = load_dataset(r.manifest);
    policies.emplace_back(s, greedy_responder(std::make_shared<InferenceModel>(r.final_model), vocab,
                                              base.eval.modes.front(), base.eval.max_len));
  }
  auto mat = cross_task_matrix(policies, require_split(ds, Split::test), base.eval.modes.front());
  write_file(dir / "cross_task.json", to_json(mat).dump(2) + "\n");
  return mat;
}

}  // namespace vqalab
