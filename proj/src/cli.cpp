#include "linearlens/cli.hpp"

#include <cstdlib>
#include <iostream>
#include <numeric>

#include <CLI11.hpp>
#include <json.hpp>

#include "linearlens/checkpoint.hpp"
#include "linearlens/csv.hpp"
#include "linearlens/dump.hpp"
#include "linearlens/error.hpp"
#include "linearlens/io.hpp"
#include "linearlens/linearity.hpp"
#include "linearlens/probing.hpp"
#include "linearlens/pruning.hpp"
#include "linearlens/report.hpp"
#include "linearlens/training.hpp"

namespace linearlens {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string out;
  bool force = false;
};

void add_common(CLI::App* cmd, Common& c, const std::string& default_out) {
  c.out = default_out;
  cmd->add_option("-o,--out", c.out, "Output (report bundle) directory")->capture_default_str();
  cmd->add_flag("--force", c.force, "Overwrite a non-empty output directory");
}

// Fails before any work is done rather than after.
void check_out(const fs::path& out, bool force) {
  std::error_code ec;
  require(force || !fs::exists(out, ec) || fs::is_empty(out, ec), ErrorCode::kIo,
          "output directory " + out.string() + " is not empty (pass --force to overwrite)");
}

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("LINEARLENS_SEED");
  if (!s || !*s) return std::nullopt;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s, &end, 10);
  require(*end == '\0', ErrorCode::kInvalidArgument, std::string("LINEARLENS_SEED is not an integer: ") + s);
  return v;
}

// Explicit flag, then LINEARLENS_SEED, then the configured value.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, std::uint64_t configured) {
  if (flag) return *flag;
  if (auto e = env_seed()) return *e;
  return configured;
}

json parse_json_file(const fs::path& p) {
  require(fs::exists(p), ErrorCode::kIo, "no such file: " + p.string());
  try {
    return json::parse(read_file(p));
  } catch (const json::parse_error& e) {
    fail(ErrorCode::kFormat, p.string() + " is not valid JSON: " + e.what());
  }
}

// "a.b.c=value"; the value is parsed as JSON and falls back to a string.
void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  require(eq != std::string::npos && eq > 0, ErrorCode::kInvalidArgument,
          "--set expects key=value, got '" + assignment + "'");
  std::string pointer = "/" + assignment.substr(0, eq);
  std::replace(pointer.begin(), pointer.end(), '.', '/');
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  j[json::json_pointer(pointer)] = value;
}

TrainConfig checkpoint_train_config(const LoadedCheckpoint& ck) {
  if (ck.metadata.contains("train_config")) return TrainConfig::from_json(ck.metadata["train_config"]);
  TrainConfig c;
  c.model = ck.model.config();
  return c;
}

std::vector<std::int32_t> train_stream(const TrainConfig& c) {
  return story_token_stream(c.corpus_seed, c.corpus_stories);
}

std::string summary_json(const json& j) { return j.dump(2) + "\n"; }

std::string loss_csv(const std::vector<LossBreakdown>& losses) {
  CsvWriter csv({"step", "lm", "reg", "total"});
  for (std::size_t i = 0; i < losses.size(); ++i)
    csv.row({std::to_string(i + 1), format_number(losses[i].lm), format_number(losses[i].reg),
             format_number(losses[i].total)});
  return csv.str();
}

std::string snapshots_csv(const std::vector<Snapshot>& snaps) {
  CsvWriter csv({"step", "mean_score_resid", "mean_score_noresid", "mean_cos"});
  for (const auto& s : snaps)
    csv.row({std::to_string(s.step), format_number(s.mean_score_resid), format_number(s.mean_score_noresid),
             format_number(s.mean_cosine)});
  return csv.str();
}

json dump_summary(const EmbeddingTrace& trace, const LinearityProfile& prof) {
  const MeanLinearity with = mean_linearity(prof, ScoreColumn::kWithResidual);
  const MeanLinearity without = mean_linearity(prof, ScoreColumn::kWithoutResidual);
  std::vector<double> scores;
  for (const auto& p : prof.pairs)
    if (p.score_with_residual) scores.push_back(*p.score_with_residual);
  std::sort(scores.begin(), scores.end());
  json median = nullptr;
  if (!scores.empty()) {
    const std::size_t m = scores.size() / 2;
    median = scores.size() % 2 ? scores[m] : 0.5 * (scores[m - 1] + scores[m]);
  }
  return {{"model_id", trace.provenance.model_id},
          {"corpus_id", trace.provenance.corpus_id},
          {"sampling_seed", trace.provenance.sampling_seed},
          {"n_layers", trace.transitions()},
          {"n_tokens", trace.tokens()},
          {"d_model", trace.dim()},
          {"mean_score_resid", with.used ? json(with.mean) : json(nullptr)},
          {"mean_score_noresid", without.used ? json(without.mean) : json(nullptr)},
          {"median_score_resid", median},
          {"degenerate_pairs", with.excluded}};
}

void collect_warnings(const std::vector<std::string>& w, ReportBundle& b, std::ostream& err) {
  for (const auto& s : w) {
    err << "warning: " << s << "\n";
    b.warnings.push_back(s);
  }
}

// ---------------- commands ----------------

json cmd_analyze(const std::string& dump, const Common& c, bool full, bool serial, std::ostream&) {
  check_out(c.out, c.force);
  const EmbeddingTrace trace = read_dump(dump);
  const LinearityProfile prof = profile(trace, {.parallel = !serial});
  ReportBundle b;
  b.command = full ? "profile" : "analyze";
  b.config = {{"dump", fs::path(dump).filename().string()}, {"manifest_crc32", crc32_hex(crc32_of(read_file(fs::path(dump) / "manifest.json")))}};
  b.seed = trace.provenance.sampling_seed;
  b.timestamp = report_timestamp();
  b.tables["linearity.csv"] = profile_to_csv(prof);
  b.tables["summary.json"] = summary_json(dump_summary(trace, prof));
  if (full) {
    b.tables["linearity.json"] = summary_json(profile_to_json(prof));
    CsvWriter csv({"layer_pair", "token", "l2_error"});
    for (std::size_t i = 0; i + 1 < trace.layers.size(); ++i) {
      const std::string pair = std::to_string(i) + "-" + std::to_string(i + 1);
      std::vector<double> errors;
      try {
        errors = l2_error_distribution(trace.layers[i], trace.layers[i + 1]);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kDegenerate) throw;
        b.warnings.push_back("pair " + pair + " is degenerate; no error distribution");
        continue;
      }
      for (std::size_t t = 0; t < errors.size(); ++t) csv.row({pair, std::to_string(t), format_number(errors[t])});
    }
    b.tables["l2_errors.csv"] = csv.str();
  }
  write_bundle(b, c.out, c.force);
  return {{"pairs", prof.pairs.size()}};
}

json cmd_train(const std::string& config_path, const std::vector<std::string>& sets,
               const std::optional<std::uint64_t>& seed_flag, const Common& c, std::ostream& err) {
  check_out(c.out, c.force);
  json cj = config_path.empty() ? TrainConfig{}.to_json() : parse_json_file(config_path);
  for (const auto& s : sets) apply_override(cj, s);
  TrainConfig config = TrainConfig::from_json(cj);
  config.seed = resolve_seed(seed_flag, config.seed);
  config.validate();
  const TrainRun run = pretrain(config);
  ReportBundle b;
  b.command = "train";
  b.config = config.to_json();
  b.seed = config.seed;
  b.timestamp = report_timestamp();
  b.tables["loss.csv"] = loss_csv(run.losses);
  b.tables["snapshots.csv"] = snapshots_csv(run.snapshots);
  for (const auto& s : run.snapshots)
    b.tables["profile_step" + std::to_string(s.step) + ".csv"] = profile_to_csv(s.profile);
  b.tables["train_config.json"] = summary_json(config.to_json());
  write_bundle(b, c.out, c.force);
  save_checkpoint(run.model, fs::path(c.out) / "checkpoint", {{"train_config", config.to_json()}});
  err << "trained " << config.steps << " steps; final lm loss " << run.losses.back().lm << "\n";
  return {{"steps", config.steps}, {"final_lm", run.losses.back().lm}, {"final_total", run.losses.back().total}};
}

json cmd_trace(const std::string& ckpt, std::size_t windows, const Common& c) {
  check_out(c.out, c.force);
  const LoadedCheckpoint ck = load_checkpoint(ckpt);
  TrainConfig tc = checkpoint_train_config(ck);
  if (windows) tc.measure_windows = windows;
  EmbeddingTrace trace = forward(ck.model, measurement_batch(tc), {.compute_logits = false}).trace();
  trace.provenance = {fs::path(ckpt).lexically_normal().string(),
                      "stories:" + std::to_string(tc.corpus_seed) + ":heldout", tc.corpus_seed};
  const DumpManifest m = write_dump(trace, fs::path(c.out) / "dump");
  ReportBundle b;
  b.command = "dump";
  b.config = {{"checkpoint", ck.model.config().to_json()}, {"measure_windows", tc.measure_windows}};
  b.seed = tc.corpus_seed;
  b.timestamp = report_timestamp();
  b.tables["dump_manifest.json"] = summary_json(m.to_json());
  write_bundle(b, c.out, true);
  return {{"dump", (fs::path(c.out) / "dump").string()}, {"n_tokens", m.n_tokens}, {"n_layers", m.n_layers}};
}

struct PruneArgs {
  std::size_t k = 1;
  std::string mode = "linear_replace";
  bool sweep = false;
  std::vector<std::size_t> ks;
  std::size_t calibration_tokens = 8192;
  std::string distill_config;
  std::optional<std::size_t> distill_steps;
  std::string probe_task = "sentiment";
  std::size_t probe_examples = 400;
  std::optional<std::uint64_t> seed;
  bool reprofile = false;
};

DistillConfig load_distill_config(const std::string& path, const std::optional<std::size_t>& steps) {
  DistillConfig d = path.empty() ? DistillConfig{} : DistillConfig::from_json(parse_json_file(path));
  if (steps) d.steps = *steps;
  return d;
}

json cmd_prune(const std::string& ckpt, const PruneArgs& a, const Common& c, std::ostream& err) {
  check_out(c.out, c.force);
  const LoadedCheckpoint ck = load_checkpoint(ckpt);
  const TrainConfig tc = checkpoint_train_config(ck);
  PipelineConfig pc;
  pc.seed = resolve_seed(a.seed, 0);
  pc.calibration_tokens = a.calibration_tokens;
  pc.seq_len = std::min<std::size_t>(tc.seq_len, ck.model.config().max_seq_len);
  pc.distill = load_distill_config(a.distill_config, a.distill_steps);
  pc.distill.seq_len = pc.seq_len;
  pc.distill.seed = pc.seed;
  pc.probe_task = task_kind_from_string(a.probe_task);
  pc.probe_examples = a.probe_examples;
  pc.reprofile = a.reprofile;
  if (a.sweep) {
    pc.ks = a.ks.empty() ? std::vector<std::size_t>{0, 1, 2} : a.ks;
  } else {
    pc.modes = {prune_mode_from_string(a.mode)};
    pc.ks = {0, a.k};
  }
  for (std::size_t k : pc.ks)
    require(k < ck.model.n_layers(), ErrorCode::kInvalidArgument,
            "k=" + std::to_string(k) + " must be below the layer count " + std::to_string(ck.model.n_layers()));
  std::vector<std::string> warnings;
  std::optional<StudentModel> kept;
  const auto rows = evaluate_pipeline(ck.model, train_stream(tc), heldout_stream(tc), pc, &warnings,
                                      [&](const PipelineRow&, const StudentModel& s) {
                                        if (!a.sweep) kept = s;
                                      });
  ReportBundle b;
  b.command = "prune";
  b.config = {{"k", a.k},
              {"mode", a.mode},
              {"sweep", a.sweep},
              {"reprofile", a.reprofile},
              {"ks", pc.ks},
              {"calibration_tokens", pc.calibration_tokens},
              {"distill", pc.distill.to_json()},
              {"probe_task", a.probe_task},
              {"probe_examples", a.probe_examples},
              {"teacher", ck.model.config().to_json()}};
  b.seed = pc.seed;
  b.timestamp = report_timestamp();
  b.tables["pruning.csv"] = pipeline_to_csv(rows);
  collect_warnings(warnings, b, err);
  json result = {{"rows", rows.size()}};
  if (kept) {
    json plan = {{"removed", kept->removed}, {"teacher_layer", kept->teacher_layer}, {"mode", a.mode}};
    b.tables["plan.json"] = summary_json(plan);
  }
  write_bundle(b, c.out, c.force);
  if (kept) {
    json meta = ck.metadata;
    meta["pruned"] = {{"removed", kept->removed}, {"mode", a.mode}};
    save_checkpoint(kept->model, fs::path(c.out) / "student", meta);
    result["student"] = (fs::path(c.out) / "student").string();
  }
  return result;
}

json cmd_distill(const std::string& teacher_path, const std::string& student_path, const std::string& config_path,
                 const std::optional<std::size_t>& steps, bool train_all, const std::optional<std::uint64_t>& seed,
                 const Common& c) {
  check_out(c.out, c.force);
  const LoadedCheckpoint teacher = load_checkpoint(teacher_path);
  const LoadedCheckpoint student = load_checkpoint(student_path);
  const TrainConfig tc = checkpoint_train_config(teacher);
  DistillConfig dc = load_distill_config(config_path, steps);
  if (train_all) dc.train_all = true;
  dc.seed = resolve_seed(seed, dc.seed);
  dc.seq_len = std::min(dc.seq_len, teacher.model.config().max_seq_len);
  DecoderModel s = student.model;
  if (!dc.train_all) {
    s.set_trainable_all(false);
    for (std::size_t i = 0; i < s.tensors().size(); ++i)
      if (s.tensors()[i].name.find("replacement") != std::string::npos) s.set_trainable(i, true);
  }
  const DistillResult r = distill(s, teacher.model, train_stream(tc), dc);
  const auto eval = heldout_stream(tc);
  ReportBundle b;
  b.command = "distill";
  b.config = dc.to_json();
  b.seed = dc.seed;
  b.timestamp = report_timestamp();
  CsvWriter csv({"step", "total"});
  for (std::size_t i = 0; i < r.losses.size(); ++i) csv.row({std::to_string(i + 1), format_number(r.losses[i])});
  b.tables["distill_loss.csv"] = csv.str();
  const double ppl_teacher = perplexity(teacher.model, eval), ppl_before = perplexity(student.model, eval),
               ppl_after = perplexity(r.model, eval);
  require(std::isfinite(ppl_after), ErrorCode::kNumeric, "distilled student perplexity is not finite");
  const json summary = {{"initial", {{"mse", r.initial.mse}, {"lm", r.initial.lm}, {"total", r.initial.total}}},
                        {"final", {{"mse", r.final.mse}, {"lm", r.final.lm}, {"total", r.final.total}}},
                        {"ppl_teacher", ppl_teacher},
                        {"ppl_student_before", ppl_before},
                        {"ppl_student_after", ppl_after}};
  b.tables["summary.json"] = summary_json(summary);
  write_bundle(b, c.out, c.force);
  save_checkpoint(r.model, fs::path(c.out) / "student", student.metadata);
  return summary;
}

json cmd_probe(const std::string& ckpt, const std::string& task, std::size_t examples, double l2,
               const std::optional<std::uint64_t>& seed_flag, const Common& c) {
  check_out(c.out, c.force);
  const LoadedCheckpoint ck = load_checkpoint(ckpt);
  const std::uint64_t seed = resolve_seed(seed_flag, 0);
  const TaskKind kind = task_kind_from_string(task);
  ProbeOptions opts;
  opts.l2 = l2;
  const auto results = probe_profile(ck.model, generate_task(kind, seed, examples), seed, opts);
  ReportBundle b;
  b.command = "probe";
  b.config = {{"task", task}, {"examples", examples}, {"l2", l2}, {"model", ck.model.config().to_json()}};
  b.seed = seed;
  b.timestamp = report_timestamp();
  b.tables["probe.csv"] = probe_to_csv(results);
  json detail = json::array();
  for (const auto& r : results) {
    if (!r.converged) b.warnings.push_back("probe at layer " + std::to_string(r.layer) + " hit the iteration cap");
    char hash[17];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(r.split_hash));
    detail.push_back({{"layer", r.layer},
                      {"accuracy", r.accuracy},
                      {"weight_norm", r.weight_norm},
                      {"loss", r.loss},
                      {"iterations", r.iterations},
                      {"converged", r.converged},
                      {"split_hash", hash}});
  }
  b.tables["probe.json"] = summary_json(detail);
  write_bundle(b, c.out, c.force);
  return {{"layers", results.size()}, {"last_accuracy", results.back().accuracy}};
}

json cmd_report(const std::string& run_dir, const Common& c) {
  require(fs::is_directory(run_dir), ErrorCode::kIo, run_dir + " is not a directory");
  const fs::path out = fs::weakly_canonical(c.out.empty() ? fs::path(run_dir) / "report" : fs::path(c.out));
  check_out(out, c.force);
  std::vector<fs::path> found;
  for (const auto& p : find_bundles(run_dir))
    if (fs::weakly_canonical(p) != out) found.push_back(p);
  require(!found.empty(), ErrorCode::kIo,
          "no report bundles (directories with metadata.json) in " + run_dir + " or its subdirectories");
  CsvWriter csv({"bundle", "command", "config_hash", "seed", "tables"});
  json list = json::array();
  for (const auto& p : found) {
    const ReportBundle rb = read_bundle(p);
    const std::string name = fs::relative(p, run_dir).lexically_normal().string();
    std::string tables;
    for (const auto& [t, _] : rb.tables) tables += (tables.empty() ? "" : ";") + t;
    csv.row({name, rb.command, config_hash(rb.config), std::to_string(rb.seed), tables});
    json entry = {{"bundle", name}, {"command", rb.command}, {"config_hash", config_hash(rb.config)},
                  {"seed", rb.seed},   {"warnings", rb.warnings}};
    if (auto it = rb.tables.find("summary.json"); it != rb.tables.end()) entry["summary"] = json::parse(it->second);
    list.push_back(entry);
  }
  ReportBundle b;
  b.command = "report";
  b.config = {{"bundles", found.size()}};
  b.timestamp = report_timestamp();
  b.tables["runs.csv"] = csv.str();
  b.tables["runs.json"] = summary_json(list);
  write_bundle(b, out, c.force);
  return {{"bundles", found.size()}, {"out", out.string()}};
}

void error_json(std::ostream& err, std::string_view code, const std::string& message, int exit_code,
                const std::string& command) {
  err << json{{"error", {{"code", code}, {"message", message}, {"command", command}}}, {"exit_code", exit_code}}.dump()
      << "\n";
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"linearlens: linearity analysis, regularized pretraining, pruning and probing of decoder models"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "linearlens 0.1.0");

  std::string dump_dir, ckpt, config_path, task = "sentiment", teacher, student, run_dir, distill_config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  bool serial = false, print_config = false, train_all = false;
  std::size_t windows = 0, probe_examples = 400;
  std::optional<std::size_t> steps;
  double l2 = ProbeOptions{}.l2;
  PruneArgs pa;
  std::string export_model, export_corpus;
  std::size_t export_tokens = 4096;
  Common c_an, c_pr, c_tr, c_du, c_pn, c_di, c_pb, c_re, c_ex;

  auto* analyze = app.add_subcommand("analyze", "Linearity scores of every layer pair of an EMB1 dump");
  analyze->add_option("dump", dump_dir, "EMB1 directory")->required();
  add_common(analyze, c_an, "runs/analyze");
  analyze->add_flag("--serial", serial, "Use the serial reference path");

  auto* prof = app.add_subcommand("profile", "Full linearity profile with per-token error distributions");
  prof->add_option("dump", dump_dir, "EMB1 directory")->required();
  add_common(prof, c_pr, "runs/profile");
  prof->add_flag("--serial", serial, "Use the serial reference path");

  auto* train = app.add_subcommand("train", "Pretrain a decoder from a JSON config");
  train->add_option("config", config_path, "Training config JSON (defaults when omitted)");
  train->add_option("--set", sets, "Override a config field, e.g. --set regularizer.lambda=0.5");
  train->add_option("--seed", seed, "Seed (beats LINEARLENS_SEED and the config)");
  train->add_flag("--print-config", print_config, "Print the effective config and exit");
  add_common(train, c_tr, "runs/train");

  auto* dump = app.add_subcommand("dump", "Write an EMB1 dump of a checkpoint's residual stream on held-out text");
  dump->add_option("checkpoint", ckpt, "Checkpoint directory")->required();
  dump->add_option("--windows", windows, "Held-out windows (default: measure_windows of the run)");
  add_common(dump, c_du, "runs/dump");

  auto* prune_cmd = app.add_subcommand("prune", "Prune the most linear blocks of a checkpoint");
  prune_cmd->add_option("checkpoint", ckpt, "Teacher checkpoint directory")->required();
  prune_cmd->add_option("-k", pa.k, "Blocks to remove")->capture_default_str();
  prune_cmd->add_option("--mode", pa.mode, "drop | linear_replace | linear_replace_distill")
      ->check(CLI::IsMember({"drop", "linear_replace", "linear_replace_distill"}))
      ->capture_default_str();
  prune_cmd->add_flag("--sweep", pa.sweep, "Evaluate every mode over --ks instead of writing one student");
  prune_cmd->add_option("--ks", pa.ks, "k values for --sweep (default 0 1 2)");
  prune_cmd->add_flag("--reprofile", pa.reprofile, "Re-profile after each removal instead of ranking once");
  prune_cmd->add_option("--calibration-tokens", pa.calibration_tokens)->capture_default_str();
  prune_cmd->add_option("--distill-config", pa.distill_config, "Distillation config JSON");
  prune_cmd->add_option("--distill-steps", pa.distill_steps);
  prune_cmd->add_option("--probe-task", pa.probe_task)->check(CLI::IsMember({"sentiment", "marker"}));
  prune_cmd->add_option("--probe-examples", pa.probe_examples)->capture_default_str();
  prune_cmd->add_option("--seed", pa.seed);
  add_common(prune_cmd, c_pn, "runs/prune");

  auto* distill_cmd = app.add_subcommand("distill", "Distill a student checkpoint toward its teacher");
  distill_cmd->add_option("teacher", teacher, "Teacher checkpoint directory")->required();
  distill_cmd->add_option("student", student, "Student checkpoint directory")->required();
  distill_cmd->add_option("--config", distill_config, "Distillation config JSON");
  distill_cmd->add_option("--steps", steps);
  distill_cmd->add_flag("--train-all", train_all, "Update every tensor, not only replacements");
  distill_cmd->add_option("--seed", seed);
  add_common(distill_cmd, c_di, "runs/distill");

  auto* probe = app.add_subcommand("probe", "Per-layer logistic probes on a synthetic task");
  probe->add_option("checkpoint", ckpt, "Checkpoint directory")->required();
  probe->add_option("task", task, "sentiment | marker")->required()->check(CLI::IsMember({"sentiment", "marker"}));
  probe->add_option("--examples", probe_examples)->capture_default_str();
  probe->add_option("--l2", l2)->capture_default_str();
  probe->add_option("--seed", seed);
  add_common(probe, c_pb, "runs/probe");

  auto* report = app.add_subcommand("report", "Index the report bundles of a run directory");
  report->add_option("run-dir", run_dir, "Directory holding bundles")->required();
  report->add_flag("--force", c_re.force, "Overwrite an existing index");
  report->add_option("-o,--out", c_re.out, "Output directory (default <run-dir>/report)");

  auto* exp = app.add_subcommand("export", "Export hidden states of a hub model as EMB1 (separate Python tool)");
  exp->add_option("--model", export_model)->required();
  exp->add_option("--corpus", export_corpus)->required();
  exp->add_option("--tokens", export_tokens)->capture_default_str();
  exp->add_option("--seed", seed);
  exp->add_option("--out", c_ex.out)->required();

  std::string command;
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    const auto subs = app.get_subcommands();
    error_json(err, "usage", e.what(), kExitUsage, subs.empty() ? "" : subs.front()->get_name());
    return kExitUsage;
  }

  command = app.get_subcommands().front()->get_name();
  try {
    json result;
    if (command == "analyze") result = cmd_analyze(dump_dir, c_an, false, serial, err);
    else if (command == "profile") result = cmd_analyze(dump_dir, c_pr, true, serial, err);
    else if (command == "train") {
      if (print_config) {
        json cj = config_path.empty() ? TrainConfig{}.to_json() : parse_json_file(config_path);
        for (const auto& s : sets) apply_override(cj, s);
        TrainConfig tc = TrainConfig::from_json(cj);
        tc.seed = resolve_seed(seed, tc.seed);
        tc.validate();
        out << tc.to_json().dump(2) << "\n";
        return kExitOk;
      }
      result = cmd_train(config_path, sets, seed, c_tr, err);
    } else if (command == "dump") result = cmd_trace(ckpt, windows, c_du);
    else if (command == "prune") result = cmd_prune(ckpt, pa, c_pn, err);
    else if (command == "distill") result = cmd_distill(teacher, student, distill_config, steps, train_all, seed, c_di);
    else if (command == "probe") result = cmd_probe(ckpt, task, probe_examples, l2, seed, c_pb);
    else if (command == "report") result = cmd_report(run_dir, c_re);
    else if (command == "export")
      fail(ErrorCode::kUnsupported,
           "export runs in the Python hub exporter (not part of this build); it writes EMB1 dumps readable by "
           "`linearlens analyze`");
    out << json{{"status", "ok"}, {"command", command}, {"result", result}}.dump() << "\n";
    return kExitOk;
  } catch (const Error& e) {
    const int code = e.code() == ErrorCode::kInvalidArgument ? kExitUsage : kExitData;
    error_json(err, to_string(e.code()), e.what(), code, command);
    return code;
  } catch (const json::exception& e) {
    error_json(err, "format", e.what(), kExitData, command);
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    error_json(err, "io", e.what(), kExitData, command);
    return kExitData;
  }
}

}  // namespace linearlens
