#include "fusionreid/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "fusionreid/image_io.hpp"

namespace fusionreid {

PreparedRun prepare_run(RunConfig cfg, Dataset data) {
  resolve_data_dependent(cfg, data);
  cfg.validate();
  cfg.model.validate();
  return {std::move(cfg), std::move(data)};
}

PreparedRun prepare_run(const std::optional<std::filesystem::path>& config_file,
                        const std::vector<std::string>& overrides) {
  RunConfig cfg = resolve_config(config_file, overrides, std::getenv("FUSIONREID_SEED"));
  Dataset data = load_run_dataset(cfg);
  return prepare_run(std::move(cfg), std::move(data));
}

std::unique_ptr<FusionReid> build_model(const RunConfig& cfg, const Dataset& data) {
  auto model = std::make_unique<FusionReid>(cfg.model);
  const auto train = data.indices(Split::train);
  if (train.empty()) throw DataError("the train split is empty");
  ChannelStats stats = channel_stats(data, train);
  for (double& s : stats.stddev) s = std::max(s, 1e-3);
  model->set_input_normalization(stats.mean, stats.stddev);
  return model;
}

namespace {

// Keys that may change between a checkpoint and the run resuming from it.
bool resume_may_differ(const std::string& key) {
  return key == "train.max_steps" || key == "train.checkpoint_every" || key.rfind("eval.", 0) == 0;
}

std::filesystem::path make_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  return dir;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write '" + path.string() + "'");
  return f;
}

std::string step_name(std::size_t step) {
  std::ostringstream s;
  s << "step_" << std::setw(6) << std::setfill('0') << step << ".bin";
  return s.str();
}

}  // namespace

TrainOutcome train_model(FusionReid& model, const RunConfig& cfg, const Dataset& data, const TrainOptions& opts) {
  Trainer trainer(model, data, cfg.optim, cfg.train, cfg.seed);
  if (opts.resume) {
    FlatConfig saved, now;
    for (const auto& [k, v] : opts.resume->config) {
      if (!resume_may_differ(k)) saved[k] = v;
    }
    for (const auto& [k, v] : to_flat(cfg)) {
      if (!resume_may_differ(k)) now[k] = v;
    }
    const auto diff = diff_flat(saved, now);
    if (!diff.empty()) {
      std::string msg = "cannot resume: run config differs from the checkpoint:";
      for (const auto& d : diff) msg += "\n  " + d;
      throw ConfigError(msg);
    }
    restore_state(*opts.resume, model, &trainer.optimizer());
    trainer.set_step(opts.resume->step);
  }

  std::ofstream log, head_log;
  if (opts.out_dir) {
    make_dir(*opts.out_dir);
    log = open_out(*opts.out_dir / "train_log.csv");
    head_log = open_out(*opts.out_dir / "head_log.csv");
    write_log_header(log, head_names(cfg.model.arch));
    write_head_header(head_log);
  }

  TrainOutcome outcome;
  while (!trainer.done()) {
    StepMetrics m = trainer.step();
    if (opts.out_dir) {
      write_log_row(log, m);
      write_head_rows(head_log, m);
    }
    const std::size_t done = trainer.current_step();
    if (opts.progress && opts.progress_every > 0 && (done % opts.progress_every == 0 || trainer.done())) {
      *opts.progress << "step " << done << "/" << trainer.total_steps() << "  lr " << m.lr << "  loss " << m.total
                     << "  (ce " << m.ce_sum << ", tri " << m.tri_sum << ")\n";
    }
    if (opts.out_dir && cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every == 0 && !trainer.done()) {
      checkpoint_save(capture_state(cfg, model, &trainer.optimizer(), done),
                      *opts.out_dir / "checkpoints" / step_name(done));
    }
    outcome.final_loss = m.total;
    outcome.log.push_back(std::move(m));
  }
  outcome.final_step = trainer.current_step();
  if (opts.out_dir) {
    checkpoint_save(capture_state(cfg, model, &trainer.optimizer(), outcome.final_step),
                    *opts.out_dir / "checkpoint.bin");
  }
  return outcome;
}

EvalReport evaluate_model(FusionReid& model, const RunConfig& cfg, const Dataset& data) {
  const Split qsplit = cfg.eval_policy == EvalPolicy::train_vs_gallery ? Split::train : Split::query;
  const auto qidx = data.indices(qsplit);
  const auto gidx = data.indices(Split::gallery);
  if (qidx.empty()) throw DataError("eval: the " + to_string(qsplit) + " split used as queries is empty");
  if (gidx.empty()) throw DataError("eval: the gallery split is empty");
  const auto queries = extract_features(model, data, qidx, cfg.eval_batch);
  const auto gallery = extract_features(model, data, gidx, cfg.eval_batch);
  return evaluate(queries, gallery, 10);
}

std::string eval_summary(const EvalReport& report) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(4);
  s << "mAP      " << report.mAP << '\n';
  for (std::size_t r : {1, 5, 10}) {
    if (r <= report.cmc.size()) s << "Rank-" << std::left << std::setw(3) << r << std::right << report.cmc[r - 1] << '\n';
  }
  s << "queries  " << report.num_queries << " (" << report.skipped << " skipped)\n";
  return s.str();
}

// ---------------------------------------------------------------------------
// Ablation

std::vector<std::string> ablation_presets() {
  return {"variants", "structure", "sharing", "depth", "width", "pooling", "harness"};
}

namespace {

AblationCell cell_of(std::vector<std::string> overrides) {
  AblationCell c;
  for (const auto& o : overrides) c.label += (c.label.empty() ? "" : ";") + o;
  c.overrides = std::move(overrides);
  return c;
}

std::vector<AblationCell> axis_cells(const std::string& key, const std::vector<std::string>& values) {
  std::vector<AblationCell> out;
  for (const auto& v : values) out.push_back(cell_of({key + "=" + v}));
  return out;
}

}  // namespace

std::vector<AblationCell> preset_cells(const std::string& name) {
  if (name == "variants") {
    return axis_cells("model.dmf.variant", {"seu_then_mfu", "mfu_then_seu", "seu_only", "mfu_only"});
  }
  if (name == "structure") return axis_cells("model.dmf.variant", {"seu_then_mfu", "seu_only", "mfu_only"});
  if (name == "sharing") {
    std::vector<AblationCell> out;
    for (const char* s : {"true", "false"})
      for (const char* m : {"true", "false"})
        out.push_back(cell_of({std::string("model.dmf.seu_shared=") + s, std::string("model.dmf.mfu_shared=") + m}));
    return out;
  }
  if (name == "depth") return axis_cells("model.dmf.layers", {"1", "2", "3", "4", "5", "6"});
  if (name == "width") return axis_cells("model.dmf.dim", {"32", "64", "96", "128"});
  if (name == "pooling") return axis_cells("model.dmf.pooling", {"gem", "average"});
  if (name == "harness") {
    auto out = preset_cells("variants");
    for (auto& c : preset_cells("sharing")) out.push_back(std::move(c));
    return out;
  }
  std::string known;
  for (const auto& p : ablation_presets()) known += (known.empty() ? "" : ", ") + p;
  throw ConfigError("unknown ablation preset '" + name + "' (known: " + known + ")");
}

std::vector<AblationCell> grid_cells(const std::vector<std::string>& axes) {
  std::vector<std::vector<std::string>> choices;
  for (const auto& axis : axes) {
    const auto eq = axis.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == axis.size()) {
      throw ConfigError("grid axis '" + axis + "' is not of the form key=v1,v2,...");
    }
    const std::string key = axis.substr(0, eq);
    std::vector<std::string> opts;
    std::istringstream in(axis.substr(eq + 1));
    std::string v;
    while (std::getline(in, v, ',')) opts.push_back(key + "=" + v);
    choices.push_back(std::move(opts));
  }
  std::vector<std::vector<std::string>> combos{{}};
  for (const auto& opts : choices) {
    std::vector<std::vector<std::string>> next;
    for (const auto& prefix : combos)
      for (const auto& o : opts) {
        auto c = prefix;
        c.push_back(o);
        next.push_back(std::move(c));
      }
    combos = std::move(next);
  }
  std::vector<AblationCell> out;
  if (axes.empty()) return out;
  for (auto& c : combos) out.push_back(cell_of(std::move(c)));
  return out;
}

std::vector<AblationRow> run_ablation(const std::vector<AblationCell>& cells,
                                      const std::optional<std::filesystem::path>& base_config,
                                      const std::vector<std::string>& base_overrides, bool train,
                                      const std::optional<std::filesystem::path>& out_dir, std::ostream* progress) {
  std::vector<AblationRow> rows;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    AblationRow row;
    row.cell = cells[i];
    if (progress) *progress << "[" << i + 1 << "/" << cells.size() << "] " << row.cell.label << '\n';
    std::vector<std::string> overrides = base_overrides;
    overrides.insert(overrides.end(), row.cell.overrides.begin(), row.cell.overrides.end());
    std::unique_ptr<FusionReid> model;
    std::optional<PreparedRun> run;
    try {
      run = prepare_run(base_config, overrides);
      model = build_model(run->config, run->data);
    } catch (const Error& e) {
      row.status = "skipped";
      row.reason = e.what();
      if (progress) *progress << "  skipped: " << row.reason << '\n';
      rows.push_back(std::move(row));
      continue;
    }
    row.params_total = model->store().num_scalars();
    if (Dmf* dmf = model->dmf()) {
      row.params_htm = model->store().num_scalars("dmf.htm");
      DmfConfig dc = dmf->config();
      dc.grid = dmf->grid();
      row.flops_htm = htm_flops(dc);
    }
    row.status = "ok";
    if (train) {
      std::optional<std::filesystem::path> cell_dir;
      if (out_dir) {
        std::ostringstream name;
        name << "cell_" << std::setw(2) << std::setfill('0') << i;
        cell_dir = *out_dir / "cells" / name.str();
        write_resolved_config(run->config, *cell_dir);
      }
      try {
        TrainOptions opts;
        opts.out_dir = cell_dir;
        const TrainOutcome outcome = train_model(*model, run->config, run->data, opts);
        row.final_loss = outcome.final_loss;
        const EvalReport rep = evaluate_model(*model, run->config, run->data);
        row.mAP = rep.mAP;
        row.rank1 = rep.cmc.empty() ? 0.0 : rep.cmc[0];
      } catch (const NumericalError& e) {
        row.status = "failed";
        row.reason = e.what();
      } catch (const Error& e) {
        row.status = "skipped";
        row.reason = e.what();
      }
    }
    if (progress) {
      *progress << "  " << row.status << "  params_htm " << row.params_htm << "  params_total " << row.params_total;
      if (train && row.status == "ok") *progress << "  loss " << row.final_loss << "  mAP " << row.mAP << "  rank1 " << row.rank1;
      *progress << '\n';
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

std::string num17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows) {
  out << "cell,params_htm,params_total,flops_htm,final_loss,mAP,rank1,status,reason\n";
  for (const auto& r : rows) {
    out << csv_field(r.cell.label) << ',' << r.params_htm << ',' << r.params_total << ',' << num17(r.flops_htm) << ','
        << num17(r.final_loss) << ',' << num17(r.mAP) << ',' << num17(r.rank1) << ',' << r.status << ','
        << csv_field(r.reason) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Commands

namespace {

template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

void write_diagnostics(const NonFiniteLoss& e, const std::filesystem::path& path) {
  nlohmann::json j;
  j["message"] = e.what();
  j["step"] = e.diagnostics.step;
  j["lr"] = e.diagnostics.lr;
  j["batch"] = e.diagnostics.batch;
  nlohmann::json norms = nlohmann::json::object();
  for (const auto& [p, n] : e.diagnostics.grad_norms) norms[p] = std::isfinite(n) ? nlohmann::json(n) : nlohmann::json(nullptr);
  j["grad_norms_previous_step"] = norms;
  nlohmann::json heads = nlohmann::json::array();
  for (const auto& h : e.diagnostics.heads) {
    heads.push_back({{"head", h.name},
                     {"ce", std::isfinite(h.ce) ? nlohmann::json(h.ce) : nlohmann::json(nullptr)},
                     {"tri", std::isfinite(h.tri) ? nlohmann::json(h.tri) : nlohmann::json(nullptr)}});
  }
  j["heads"] = heads;
  open_out(path) << j.dump(2) << '\n';
}

// Config for commands that start from a checkpoint: the checkpoint's own
// config, or a config file when given, then overrides.
RunConfig checkpoint_run_config(const CommonArgs& args, const CheckpointState& st) {
  FlatConfig flat = st.config;
  if (args.config) {
    flat = read_config_file(*args.config);
    if (const char* env = std::getenv("FUSIONREID_SEED"); env && *env) flat["seed"] = env;
  }
  apply_overrides(flat, args.overrides);
  return from_flat(flat);
}

}  // namespace

int cmd_train(const CommonArgs& args, const std::optional<std::filesystem::path>& resume, std::ostream& out,
              std::ostream& err) {
  return guarded(err, [&] {
    PreparedRun run = prepare_run(args.config, args.overrides);
    make_dir(args.out);
    write_resolved_config(run.config, args.out);
    std::optional<CheckpointState> state;
    if (resume) state = checkpoint_load(*resume);
    auto model = build_model(run.config, run.data);
    out << "training " << to_string(run.config.model.arch) << " on " << run.data.indices(Split::train).size()
        << " train images, " << model->store().num_scalars() << " parameters\n";
    TrainOptions opts;
    opts.out_dir = args.out;
    opts.resume = state ? &*state : nullptr;
    opts.progress = &out;
    TrainOutcome outcome;
    try {
      outcome = train_model(*model, run.config, run.data, opts);
    } catch (const NonFiniteLoss& e) {
      const auto diag = args.out / "diagnostics.json";
      write_diagnostics(e, diag);
      err << "error: " << e.what() << "\ndiagnostics written to " << diag.string() << '\n';
      return kExitNumerical;
    }
    out << "finished at step " << outcome.final_step << ", final loss " << outcome.final_loss << '\n';
    out << "log: " << (args.out / "train_log.csv").string() << '\n';
    out << "checkpoint: " << (args.out / "checkpoint.bin").string() << '\n';
    return kExitOk;
  });
}

int cmd_eval(const CommonArgs& args, const std::filesystem::path& checkpoint, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const CheckpointState st = checkpoint_load(checkpoint);
    RunConfig cfg = checkpoint_run_config(args, st);
    PreparedRun run = prepare_run(cfg, load_run_dataset(cfg));
    make_dir(args.out);
    write_resolved_config(run.config, args.out);
    FusionReid model(run.config.model);
    restore_state(st, model, nullptr);
    const EvalReport report = evaluate_model(model, run.config, run.data);
    open_out(args.out / "eval_report.json") << report.to_json() << '\n';
    const std::string summary = eval_summary(report);
    open_out(args.out / "eval_summary.txt") << summary;
    out << summary;
    return kExitOk;
  });
}

int cmd_ablate(const CommonArgs& args, const std::string& preset, const std::vector<std::string>& grid, bool train,
               std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (preset.empty() == grid.empty()) throw ConfigError("ablate needs exactly one of --preset or --grid");
    const auto cells = preset.empty() ? grid_cells(grid) : preset_cells(preset);
    // Validates the base config before any cell runs.
    PreparedRun base = prepare_run(args.config, args.overrides);
    make_dir(args.out);
    write_resolved_config(base.config, args.out);
    const auto rows = run_ablation(cells, args.config, args.overrides, train, args.out, &out);
    const auto csv = args.out / "ablation.csv";
    {
      std::ofstream f = open_out(csv);
      write_ablation_csv(f, rows);
    }
    std::size_t ok = 0;
    for (const auto& r : rows) ok += r.status == "ok" ? 1 : 0;
    out << ok << "/" << rows.size() << " cells ok; results in " << csv.string() << '\n';
    return kExitOk;
  });
}

int cmd_export_attention(const CommonArgs& args, const std::filesystem::path& checkpoint,
                         const std::filesystem::path& image, std::size_t cam_id, std::ostream& out,
                         std::ostream& err) {
  return guarded(err, [&] {
    if (!std::filesystem::exists(image)) throw IoError("image '" + image.string() + "' not found");
    const CheckpointState st = checkpoint_load(checkpoint);
    const RunConfig cfg = checkpoint_run_config(args, st);
    cfg.model.validate();
    if (cam_id >= cfg.model.vit.num_cameras) {
      throw DataError("cam_id " + std::to_string(cam_id) + " out of range for " +
                      std::to_string(cfg.model.vit.num_cameras) + " cameras");
    }
    make_dir(args.out);
    write_resolved_config(cfg, args.out);
    FusionReid model(cfg.model);
    restore_state(st, model, nullptr);
    Tensor img = read_ppm(image);
    if (img.size(1) != cfg.model.image_h || img.size(2) != cfg.model.image_w) {
      img = resize_bilinear(img, cfg.model.image_h, cfg.model.image_w);
    }
    auto files = export_attention(model, img, cam_id, args.out);
    std::sort(files.begin(), files.end());
    std::size_t maps = 0;
    for (const auto& f : files) {
      maps += f.extension() == ".pgm" ? 1 : 0;
      out << f.string() << '\n';
    }
    out << maps << " attention maps written to " << args.out.string() << '\n';
    return kExitOk;
  });
}

int cmd_synth_data(const CommonArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = resolve_config(args.config, args.overrides, std::getenv("FUSIONREID_SEED"));
    cfg.synth.validate();
    Dataset data = synth_generate(cfg.synth);
    make_dir(args.out);
    write_resolved_config(cfg, args.out);
    write_dataset(data, args.out);
    out << "wrote " << data.samples.size() << " images (" << data.indices(Split::train).size() << " train, "
        << data.indices(Split::gallery).size() << " gallery) for " << cfg.synth.num_pids << " pids\n";
    out << "manifest: " << (args.out / "manifest.csv").string() << '\n';
    return kExitOk;
  });
}

std::string describe_config_keys() {
  std::ostringstream s;
  std::size_t width = 0;
  for (const auto& k : config_keys()) width = std::max(width, k.key.size() + k.default_value.size() + 3);
  for (const auto& k : config_keys()) {
    const std::string head = k.key + " = " + k.default_value;
    s << "  " << std::left << std::setw(static_cast<int>(width)) << head << "  " << k.help << '\n';
  }
  return s.str();
}

}  // namespace fusionreid
