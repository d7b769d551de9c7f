#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "fusionreid/commands.hpp"
#include "fusionreid/config.hpp"
#include "fusionreid/image_io.hpp"

using namespace fusionreid;
namespace fs = std::filesystem;

namespace {

const fs::path kToyConfig = fs::path(FUSIONREID_SOURCE_DIR) / "configs" / "toy.toml";

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fusionreid_test_config_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

CommonArgs args(const fs::path& out, std::vector<std::string> overrides = {}, bool toy = true) {
  CommonArgs a;
  if (toy) a.config = kToyConfig;
  a.overrides = std::move(overrides);
  a.out = out;
  return a;
}

// Small model so command tests stay fast.
const std::vector<std::string> kSmall = {"model.dmf.dim=16",        "model.dmf.heads=2",    "model.vit.embed_dim=16",
                                         "model.vit.heads=2",       "model.vit.depth=1",
                                         "model.cnn.stage_channels=[4, 8, 8]"};

std::vector<std::string> small(std::vector<std::string> extra) {
  auto o = kSmall;
  o.insert(o.end(), extra.begin(), extra.end());
  return o;
}

}  // namespace

TEST_CASE("config text parsing") {
  const FlatConfig f = parse_config_text(
      "seed = 3  # trailing comment\n"
      "# full comment\n"
      "[model.dmf]\n"
      "variant = \"seu_only\"\n"
      "layers=4\n"
      "\n"
      "[model.cnn]\n"
      "stage_channels = [8, 16]\n");
  CHECK(f.at("seed") == "3");
  CHECK(f.at("model.dmf.variant") == "seu_only");
  CHECK(f.at("model.dmf.layers") == "4");
  CHECK(f.at("model.cnn.stage_channels") == "[8, 16]");

  CHECK_THROWS_AS(parse_config_text("[model\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("just words\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("a = 1\na = 2\n"), ConfigError);
  try {
    parse_config_text("x = 1\nbroken\n", "f.toml");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("f.toml:2") != std::string::npos);
  }
}

TEST_CASE("flat config round trip") {
  RunConfig cfg = resolve_config(kToyConfig, {"model.dmf.variant=mfu_then_seu", "optim.min_lr=1e-06"}, nullptr);
  const FlatConfig flat = to_flat(cfg);
  CHECK(flat.at("model.dmf.variant") == "mfu_then_seu");
  const RunConfig back = from_flat(parse_config_text(to_config_text(cfg)));
  CHECK(to_flat(back) == flat);
  CHECK(back.optim.min_lr == 1e-6);
  CHECK(back.model.init_seed == back.seed);
  CHECK(back.synth.seed == back.seed);

  // Every registered key appears in the help text with its default.
  const std::string help = describe_config_keys();
  for (const auto& k : config_keys()) CHECK(help.find(k.key + " = " + k.default_value) != std::string::npos);
  CHECK(config_keys().size() == flat.size());
}

TEST_CASE("invalid keys and values name the field") {
  try {
    resolve_config(std::nullopt, {"model.dmf.layerz=2"}, nullptr);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("model.dmf.layerz") != std::string::npos);
  }
  try {
    resolve_config(std::nullopt, {"train.p=four"}, nullptr);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("train.p") != std::string::npos);
  }
  CHECK_THROWS_AS(resolve_config(std::nullopt, {"model.bnneck=yes"}, nullptr), ConfigError);
  CHECK_THROWS_AS(resolve_config(std::nullopt, {"novalue"}, nullptr), ConfigError);
  CHECK_THROWS_AS(resolve_config(fs::path("/nonexistent/cfg.toml"), {}, nullptr), ConfigError);
  CHECK_THROWS_AS(resolve_config(std::nullopt, {}, "abc"), ConfigError);
}

TEST_CASE("precedence: defaults < file < FUSIONREID_SEED < overrides") {
  CHECK(resolve_config(std::nullopt, {}, nullptr).seed == 0);
  CHECK(resolve_config(kToyConfig, {}, nullptr).seed == 7);
  CHECK(resolve_config(kToyConfig, {}, "99").seed == 99);
  CHECK(resolve_config(kToyConfig, {"seed=5"}, "99").seed == 5);
  CHECK(resolve_config(kToyConfig, {"optim.total_epochs=3"}, nullptr).optim.total_epochs == 3.0);
}

TEST_CASE("data-dependent fields") {
  RunConfig cfg = resolve_config(kToyConfig, {}, nullptr);
  CHECK(cfg.model.num_classes == 0);
  PreparedRun run = prepare_run(cfg, load_run_dataset(cfg));
  CHECK(run.config.model.num_classes == 8);
  CHECK(run.config.model.vit.num_cameras == 2);
  CHECK(run.config.train.augmentation.fill == channel_stats(run.data, run.data.indices(Split::train)).mean);
}

TEST_CASE("train command: smoke, resolved config, determinism") {
  const fs::path a = scratch("train_a"), b = scratch("train_b");
  std::ostringstream out, err;
  REQUIRE(cmd_train(args(a, small({"optim.total_epochs=1"})), std::nullopt, out, err) == kExitOk);
  CHECK(fs::exists(a / "train_log.csv"));
  CHECK(fs::exists(a / "checkpoint.bin"));
  CHECK(fs::exists(a / "resolved_config.toml"));
  REQUIRE(cmd_train(args(b, small({"optim.total_epochs=1"})), std::nullopt, out, err) == kExitOk);
  CHECK(slurp(a / "train_log.csv") == slurp(b / "train_log.csv"));

  // The resolved config alone recreates the run.
  const fs::path c = scratch("train_c");
  CommonArgs again;
  again.config = a / "resolved_config.toml";
  again.out = c;
  REQUIRE(cmd_train(again, std::nullopt, out, err) == kExitOk);
  CHECK(slurp(a / "train_log.csv") == slurp(c / "train_log.csv"));
}

TEST_CASE("train command: errors map to exit codes") {
  std::ostringstream out, err;
  SUBCASE("missing dataset path") {
    const int code = cmd_train(args(scratch("bad1"), {"data.source=manifest", "data.manifest=/no/such/manifest.csv"}),
                               std::nullopt, out, err);
    CHECK(code == kExitInput);
    CHECK(err.str().find("data.manifest") != std::string::npos);
  }
  SUBCASE("invalid config value") {
    CHECK(cmd_train(args(scratch("bad2"), {"optim.warmup_epochs=20"}), std::nullopt, out, err) == kExitInput);
    CHECK(err.str().find("warmup_epochs") != std::string::npos);
  }
  SUBCASE("divergence exits 3 with a diagnostics file") {
    const fs::path dir = scratch("bad3");
    const int code = cmd_train(args(dir, small({"optim.base_lr=1e30", "optim.peak_lr=1e30", "optim.grad_clip=0",
                                                "train.max_steps=20"})),
                               std::nullopt, out, err);
    CHECK(code == kExitNumerical);
    CHECK(fs::exists(dir / "diagnostics.json"));
    CHECK(err.str().find("diagnostics.json") != std::string::npos);
    const auto j = nlohmann::json::parse(slurp(dir / "diagnostics.json"));
    CHECK(j.contains("batch"));
    CHECK(j.contains("lr"));
    CHECK(j.contains("grad_norms_previous_step"));
  }
}

TEST_CASE("eval and export-attention commands") {
  const fs::path run = scratch("eval_run");
  std::ostringstream out, err;
  REQUIRE(cmd_train(args(run, {"train.max_steps=2"}), std::nullopt, out, err) == kExitOk);

  const fs::path ev = scratch("eval_out");
  std::ostringstream eout;
  REQUIRE(cmd_eval(args(ev, {}, false), run / "checkpoint.bin", eout, err) == kExitOk);
  const auto j = nlohmann::json::parse(slurp(ev / "eval_report.json"));
  CHECK(j.at("cmc").size() == 10);
  CHECK(eout.str().find("Rank-1") != std::string::npos);
  CHECK(eout.str().find("Rank-10") != std::string::npos);
  CHECK(fs::exists(ev / "resolved_config.toml"));

  std::ostringstream e2;
  CHECK(cmd_eval(args(scratch("eval_q"), {"eval.policy=query_vs_gallery"}, false), run / "checkpoint.bin", out, e2) ==
        kExitInput);
  std::ostringstream e3;
  CHECK(cmd_eval(args(scratch("eval_mismatch"), {"model.dmf.layers=3"}, false), run / "checkpoint.bin", out, e3) ==
        kExitInput);
  CHECK(e3.str().find("model.dmf.layers: 2 != 3") != std::string::npos);

  SynthConfig s;
  const Dataset d = synth_generate(s);
  const fs::path img = scratch("img") / "a.ppm";
  write_ppm(img, d.samples[0].image);
  const fs::path ex = scratch("export") / "fresh";
  std::ostringstream xout;
  REQUIRE(cmd_export_attention(args(ex, {}, false), run / "checkpoint.bin", img, 1, xout, err) == kExitOk);
  std::size_t pgm = 0;
  for (const auto& f : fs::directory_iterator(ex)) pgm += f.path().extension() == ".pgm" ? 1 : 0;
  CHECK(pgm == 32);
  CHECK(xout.str().find("32 attention maps") != std::string::npos);
  std::ostringstream e4;
  CHECK(cmd_export_attention(args(scratch("export2"), {}, false), run / "checkpoint.bin", "/no/image.ppm", 0, out,
                             e4) == kExitInput);
}

TEST_CASE("synth-data writes a dataset the manifest source can train on") {
  const fs::path dir = scratch("synth");
  std::ostringstream out, err;
  REQUIRE(cmd_synth_data(args(dir), out, err) == kExitOk);
  CHECK(fs::exists(dir / "manifest.csv"));
  RunConfig cfg = resolve_config(kToyConfig, {"data.source=manifest", "data.manifest=" + (dir / "manifest.csv").string()},
                                 nullptr);
  const Dataset from_disk = load_run_dataset(cfg);
  const Dataset direct = synth_generate(resolve_config(kToyConfig, {}, nullptr).synth);
  REQUIRE(from_disk.size() == direct.size());
  for (std::size_t i = 0; i < direct.size(); ++i) {
    REQUIRE(from_disk.samples[i].pid == direct.samples[i].pid);
    for (std::size_t k = 0; k < direct.samples[i].image.numel(); ++k)
      REQUIRE(from_disk.samples[i].image[k] == direct.samples[i].image[k]);
  }
}

TEST_CASE("ablation grids") {
  CHECK(preset_cells("variants").size() == 4);
  CHECK(preset_cells("sharing").size() == 4);
  CHECK(preset_cells("harness").size() == 8);
  CHECK(preset_cells("depth").size() == 6);
  CHECK_THROWS_AS(preset_cells("nope"), ConfigError);
  const auto g = grid_cells({"model.dmf.layers=1,2", "model.dmf.variant=seu_only,mfu_only,seu_then_mfu"});
  REQUIRE(g.size() == 6);
  CHECK(g[0].label == "model.dmf.layers=1;model.dmf.variant=seu_only");
  CHECK(g[5].label == "model.dmf.layers=2;model.dmf.variant=seu_then_mfu");
  CHECK_THROWS_AS(grid_cells({"model.dmf.layers"}), ConfigError);

  SUBCASE("sharing: shared-shared has half the stack parameters of unshared-unshared") {
    const auto rows = run_ablation(preset_cells("sharing"), kToyConfig, {}, false, std::nullopt, nullptr);
    REQUIRE(rows.size() == 4);
    for (const auto& r : rows) CHECK(r.status == "ok");
    CHECK(2 * rows[0].params_htm == rows[3].params_htm);
  }
  SUBCASE("depth sweep parameter counts increase") {
    const auto rows = run_ablation(preset_cells("depth"), kToyConfig, {}, false, std::nullopt, nullptr);
    for (std::size_t i = 1; i < rows.size(); ++i) {
      CHECK(rows[i].params_htm > rows[i - 1].params_htm);
      CHECK(rows[i].flops_htm > rows[i - 1].flops_htm);
    }
  }
  SUBCASE("invalid cells are skipped with a reason") {
    const auto rows =
        run_ablation(grid_cells({"model.dmf.dim=64,30"}), kToyConfig, {}, false, std::nullopt, nullptr);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].status == "ok");
    CHECK(rows[1].status == "skipped");
    CHECK_FALSE(rows[1].reason.empty());
    std::ostringstream csv;
    write_ablation_csv(csv, rows);
    std::istringstream lines(csv.str());
    std::string header;
    std::getline(lines, header);
    CHECK(header == "cell,params_htm,params_total,flops_htm,final_loss,mAP,rank1,status,reason");
  }
  SUBCASE("ablate command writes the CSV") {
    const fs::path dir = scratch("ablate");
    std::ostringstream out, err;
    REQUIRE(cmd_ablate(args(dir, small({"train.max_steps=2"})), "pooling", {}, true, out, err) == kExitOk);
    const std::string csv = slurp(dir / "ablation.csv");
    std::size_t lines = 0;
    for (char c : csv) lines += c == '\n' ? 1 : 0;
    CHECK(lines == 3);
    CHECK(fs::exists(dir / "cells" / "cell_00" / "train_log.csv"));
    CHECK(cmd_ablate(args(dir), "", {}, false, out, err) == kExitInput);
  }
}
