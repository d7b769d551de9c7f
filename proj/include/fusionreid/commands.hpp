#pragma once

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fusionreid/checkpoint.hpp"
#include "fusionreid/config.hpp"
#include "fusionreid/data.hpp"
#include "fusionreid/evaluator.hpp"
#include "fusionreid/model.hpp"

namespace fusionreid {

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 2;
inline constexpr int kExitNumerical = 3;

// ---------------------------------------------------------------------------
// Building blocks shared by the commands and the tests

struct PreparedRun {
  RunConfig config;  // data-dependent fields resolved and validated
  Dataset data;
};
PreparedRun prepare_run(const std::optional<std::filesystem::path>& config_file,
                        const std::vector<std::string>& overrides);
// Resolves data-dependent fields against `data` and validates.
PreparedRun prepare_run(RunConfig cfg, Dataset data);

// New model whose input normalization uses the train-split channel statistics.
std::unique_ptr<FusionReid> build_model(const RunConfig& cfg, const Dataset& data);

struct TrainOutcome {
  std::vector<StepMetrics> log;
  std::size_t final_step = 0;
  double final_loss = 0.0;  // loss of the last executed step
};

struct TrainOptions {
  // When set: train_log.csv, head_log.csv, periodic checkpoints under
  // checkpoints/ and the final checkpoint.bin.
  std::optional<std::filesystem::path> out_dir;
  const CheckpointState* resume = nullptr;
  std::ostream* progress = nullptr;
  std::size_t progress_every = 50;
};
TrainOutcome train_model(FusionReid& model, const RunConfig& cfg, const Dataset& data, const TrainOptions& opts = {});

// Query/gallery selection follows cfg.eval_policy.
EvalReport evaluate_model(FusionReid& model, const RunConfig& cfg, const Dataset& data);

std::string eval_summary(const EvalReport& report);

// ---------------------------------------------------------------------------
// Ablation

struct AblationCell {
  std::string label;
  std::vector<std::string> overrides;  // "key=value"
};

struct AblationRow {
  AblationCell cell;
  std::size_t params_htm = 0;
  std::size_t params_total = 0;
  double flops_htm = 0.0;
  double final_loss = 0.0;
  double mAP = 0.0;
  double rank1 = 0.0;
  std::string status;  // ok | skipped | failed
  std::string reason;
};

// Named grids: variants, structure, sharing, depth, width, pooling, harness
// (variants followed by sharing).
std::vector<std::string> ablation_presets();
std::vector<AblationCell> preset_cells(const std::string& name);
// Cartesian product of "key=v1,v2,..." axes, first axis slowest.
std::vector<AblationCell> grid_cells(const std::vector<std::string>& axes);

// Runs every cell on top of the base config. A cell whose config does not
// validate is recorded as skipped; a numerical failure as failed.
std::vector<AblationRow> run_ablation(const std::vector<AblationCell>& cells,
                                      const std::optional<std::filesystem::path>& base_config,
                                      const std::vector<std::string>& base_overrides, bool train,
                                      const std::optional<std::filesystem::path>& out_dir, std::ostream* progress);
void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows);

// ---------------------------------------------------------------------------
// Commands. Each returns an exit code and reports errors on `err`.

struct CommonArgs {
  std::optional<std::filesystem::path> config;
  std::vector<std::string> overrides;
  std::filesystem::path out;
};

int cmd_train(const CommonArgs& args, const std::optional<std::filesystem::path>& resume, std::ostream& out,
              std::ostream& err);
int cmd_eval(const CommonArgs& args, const std::filesystem::path& checkpoint, std::ostream& out, std::ostream& err);
int cmd_ablate(const CommonArgs& args, const std::string& preset, const std::vector<std::string>& grid, bool train,
               std::ostream& out, std::ostream& err);
int cmd_export_attention(const CommonArgs& args, const std::filesystem::path& checkpoint,
                         const std::filesystem::path& image, std::size_t cam_id, std::ostream& out,
                         std::ostream& err);
int cmd_synth_data(const CommonArgs& args, std::ostream& out, std::ostream& err);

// Text for `config-keys` / --help: every key with its default.
std::string describe_config_keys();

}  // namespace fusionreid
