#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fusionreid/commands.hpp"

namespace fr = fusionreid;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;

  fr::CommonArgs args() const {
    fr::CommonArgs a;
    if (!config.empty()) a.config = config;
    a.overrides = overrides;
    a.out = out;
    return a;
  }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "config file ([section] + key = value lines)");
  cmd->add_option("--override", c.overrides, "key=value, applied after the config file (repeatable)");
  cmd->add_option("--out", c.out, "output directory (created if absent)")->required();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FusionReID toy trainer: CNN + ViT features fused by multi-head cross attention"};
  app.require_subcommand(1);
  app.footer("Config keys and defaults (FUSIONREID_SEED overrides `seed`):\n" + fr::describe_config_keys() +
             "\nExit codes: 0 ok, 2 invalid config or input, 3 numerical failure.");

  Common train_c, eval_c, ablate_c, export_c, synth_c;

  auto* train = app.add_subcommand("train", "train a model; writes log, checkpoints and the resolved config");
  add_common(train, train_c);
  std::string resume;
  train->add_option("--resume", resume, "continue from a checkpoint written by an identical run");

  auto* eval = app.add_subcommand("eval", "retrieval mAP / CMC of a checkpoint");
  add_common(eval, eval_c);
  std::string eval_ckpt;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();

  auto* ablate = app.add_subcommand("ablate", "train and evaluate a grid of fusion-module settings");
  add_common(ablate, ablate_c);
  std::string preset;
  std::vector<std::string> grid;
  bool params_only = false;
  ablate->add_option("--preset", preset, "variants | structure | sharing | depth | width | pooling | harness");
  ablate->add_option("--grid", grid, "axis key=v1,v2,... (repeatable; cartesian product)");
  ablate->add_flag("--params-only", params_only, "count parameters and FLOPs without training");

  auto* exp = app.add_subcommand("export-attention", "per-head attention maps of the fusion units for one image");
  add_common(exp, export_c);
  std::string exp_ckpt, image;
  std::size_t cam_id = 0;
  exp->add_option("--checkpoint", exp_ckpt, "checkpoint file")->required();
  exp->add_option("--image", image, "binary PPM (P6) image")->required();
  exp->add_option("--cam-id", cam_id, "camera id of the image");

  auto* synth = app.add_subcommand("synth-data", "write the synthetic dataset as PPM files plus manifest.csv");
  add_common(synth, synth_c);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : fr::kExitInput;
  }

  if (*train) {
    std::optional<std::filesystem::path> r;
    if (!resume.empty()) r = resume;
    return fr::cmd_train(train_c.args(), r, std::cout, std::cerr);
  }
  if (*eval) return fr::cmd_eval(eval_c.args(), eval_ckpt, std::cout, std::cerr);
  if (*ablate) return fr::cmd_ablate(ablate_c.args(), preset, grid, !params_only, std::cout, std::cerr);
  if (*exp) return fr::cmd_export_attention(export_c.args(), exp_ckpt, image, cam_id, std::cout, std::cerr);
  if (*synth) return fr::cmd_synth_data(synth_c.args(), std::cout, std::cerr);
  return fr::kExitInput;
}
