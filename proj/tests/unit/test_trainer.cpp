#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "fusionreid/checkpoint.hpp"
#include "fusionreid/commands.hpp"
#include "fusionreid/trainer.hpp"

using namespace fusionreid;
namespace fs = std::filesystem;

namespace {

const fs::path kToyConfig = fs::path(FUSIONREID_SOURCE_DIR) / "configs" / "toy.toml";

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fusionreid_test_trainer_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// A small fusion model on the toy data, fast enough for many steps.
PreparedRun small_run(std::vector<std::string> extra = {}) {
  std::vector<std::string> o = {"model.dmf.dim=16", "model.dmf.heads=2", "model.vit.embed_dim=16",
                                "model.vit.heads=2", "model.vit.depth=1", "model.cnn.stage_channels=[4, 8, 8]"};
  o.insert(o.end(), extra.begin(), extra.end());
  RunConfig cfg = resolve_config(kToyConfig, o, nullptr);
  Dataset data = load_run_dataset(cfg);
  return prepare_run(std::move(cfg), std::move(data));
}

}  // namespace

TEST_CASE("sgd hand cases") {
  ParamStore store;
  Tensor w = store.add_param("lin.weight", Tensor({2}, {1.0, -2.0}, true));
  Sgd sgd(store);
  auto set_grad = [&](double g) {
    store.zero_grad();
    backward(sum(scale(w, g)));
  };

  SUBCASE("momentum 0, wd 0: param -= lr * grad") {
    set_grad(0.5);
    sgd.step(0.1, 0.0, 0.0);
    CHECK(w[0] == doctest::Approx(1.0 - 0.05).epsilon(1e-15));
    CHECK(w[1] == doctest::Approx(-2.0 - 0.05).epsilon(1e-15));
  }
  SUBCASE("zero gradient, zero velocity: unchanged") {
    set_grad(0.0);
    sgd.step(0.1, 0.9, 0.0);
    CHECK(w[0] == 1.0);
    CHECK(w[1] == -2.0);
  }
  SUBCASE("two momentum steps on a constant gradient move lr*g*(1 + 1.9)") {
    const double lr = 0.01, g = 3.0;
    set_grad(g);
    sgd.step(lr, 0.9, 0.0);
    set_grad(g);
    sgd.step(lr, 0.9, 0.0);
    CHECK(w[0] == doctest::Approx(1.0 - lr * g * 2.9).epsilon(1e-14));
  }
  SUBCASE("weight decay is added to the gradient") {
    set_grad(0.0);
    sgd.step(0.1, 0.0, 0.5);
    CHECK(w[0] == doctest::Approx(1.0 - 0.1 * 0.5 * 1.0).epsilon(1e-15));
  }
  SUBCASE("global norm clipping") {
    set_grad(3.0);  // grad (3, 3), norm 3*sqrt(2)
    const double norm = sgd.step(1.0, 0.0, 0.0, std::sqrt(2.0));
    CHECK(norm == doctest::Approx(3.0 * std::sqrt(2.0)));
    CHECK(w[0] == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("missing gradient is a contract error") {
    store.add_param("other.weight", Tensor({1}, {0.0}, true));
    Sgd sgd2(store);
    set_grad(1.0);
    CHECK_THROWS_AS(sgd2.step(0.1, 0.0, 0.0), UsageError);
  }
}

TEST_CASE("weight decay exemptions") {
  CHECK(weight_decay_exempt("cnn.stem.bn.gamma"));
  CHECK(weight_decay_exempt("dmf.lru_c.proj.bias"));
  CHECK(weight_decay_exempt("vit.cls_token"));
  CHECK(weight_decay_exempt("vit.pos_embed"));
  CHECK(weight_decay_exempt("cnn.gem.p"));
  CHECK(weight_decay_exempt("head.c_hat.classifier"));
  CHECK_FALSE(weight_decay_exempt("vit.camera_embed"));
  CHECK_FALSE(weight_decay_exempt("dmf.htm0.mfu_c.mhca.q.weight"));

  FusionReid model(ModelConfig{});
  std::size_t exempt = 0;
  for (const auto& [path, t] : model.store().params()) exempt += weight_decay_exempt(path) ? 1 : 0;
  CHECK(exempt > 0);
  CHECK(exempt < model.store().params().size());
}

TEST_CASE("learning-rate schedule anchors") {
  const OptimConfig cfg;
  CHECK(lr_schedule(0.0, cfg) == 5e-4);
  CHECK(lr_schedule(10.0, cfg) == 5e-3);
  CHECK(lr_schedule(180.0, cfg) == 0.0);
  const double before = lr_schedule(std::nextafter(10.0, 0.0), cfg);
  CHECK(std::abs(before - 5e-3) < 1e-15);
  CHECK(lr_schedule(5.0, cfg) == doctest::Approx(2.75e-3).epsilon(1e-14));
  CHECK(lr_schedule(95.0, cfg) == doctest::Approx(2.5e-3).epsilon(1e-14));
  CHECK_THROWS_AS(lr_schedule(-0.1, cfg), UsageError);
  CHECK_THROWS_AS(lr_schedule(180.5, cfg), UsageError);

  OptimConfig bad;
  bad.warmup_epochs = 200;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = OptimConfig{};
  bad.base_lr = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("first step is finite and positive; loss sequence is reproducible") {
  auto run = [] {
    PreparedRun r = small_run({"train.max_steps=6"});
    auto model = build_model(r.config, r.data);
    return train_model(*model, r.config, r.data);
  };
  const TrainOutcome a = run();
  const TrainOutcome b = run();
  REQUIRE(a.log.size() == 6);
  CHECK(std::isfinite(a.log[0].total));
  CHECK(a.log[0].total > 0.0);
  CHECK(a.log[0].heads.size() == 6);
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].total == b.log[i].total);
    CHECK(a.log[i].grad_norm == b.log[i].grad_norm);
  }
}

TEST_CASE("non-finite loss aborts before the update") {
  PreparedRun r = small_run();
  auto model = build_model(r.config, r.data);
  Sgd sgd(model->store());
  const auto before = model->store().param("dmf.htm0.mfu_c.mhca.q.weight").clone();
  const auto idx = r.data.indices(Split::train);
  std::vector<std::size_t> batch(idx.begin(), idx.begin() + 4);
  Tensor images = stack_images(r.data, batch);
  images.data()[0] = std::numeric_limits<double>::quiet_NaN();
  const std::vector<std::size_t> cams(4, 0), labels{0, 0, 1, 1};
  const std::vector<int> pids{0, 0, 1, 1};
  try {
    train_step(*model, sgd, images, cams, labels, pids, 0.01, r.config.optim);
    FAIL("expected NonFiniteLoss");
  } catch (const NonFiniteLoss& e) {
    CHECK(e.diagnostics.lr == 0.01);
    CHECK(e.diagnostics.heads.size() == 6);
    CHECK_FALSE(e.diagnostics.grad_norms.empty());
  }
  const auto after = model->store().param("dmf.htm0.mfu_c.mhca.q.weight");
  for (std::size_t i = 0; i < before.numel(); ++i) REQUIRE(after[i] == before[i]);
}

TEST_CASE("toy config: loss after 200 steps is below a quarter of the first") {
  RunConfig cfg = resolve_config(kToyConfig, {"train.max_steps=200"}, nullptr);
  PreparedRun r = prepare_run(cfg, load_run_dataset(cfg));
  auto model = build_model(r.config, r.data);
  const TrainOutcome out = train_model(*model, r.config, r.data);
  REQUIRE(out.log.size() == 200);
  const double first = out.log.front().total;
  // Mean of the last 10 steps damps single-batch noise.
  double tail = 0.0;
  for (std::size_t i = 190; i < 200; ++i) tail += out.log[i].total;
  tail /= 10.0;
  MESSAGE("initial " << first << ", last step " << out.log.back().total << ", last-10 mean " << tail);
  CHECK(out.log.back().total < 0.25 * first);
  CHECK(tail < 0.25 * first);
}

TEST_CASE("checkpoint round trip") {
  PreparedRun r = small_run({"train.max_steps=3"});
  auto model = build_model(r.config, r.data);
  const fs::path dir = scratch("roundtrip");
  train_model(*model, r.config, r.data, TrainOptions{dir, nullptr, nullptr, 0});
  const CheckpointState st = checkpoint_load(dir / "checkpoint.bin");
  CHECK(st.step == 3);
  CHECK(st.seed == r.config.seed);
  CHECK(st.config == to_flat(r.config));
  REQUIRE(st.params.size() == model->store().params().size());
  for (const auto& [path, t] : model->store().params()) {
    const Tensor& s = st.params.at(path);
    REQUIRE(s.shape() == t.shape());
    for (std::size_t i = 0; i < t.numel(); ++i) REQUIRE(s[i] == t[i]);
  }
  CHECK(st.buffers.size() == model->store().buffers().size());
  CHECK(st.momentum.size() == st.params.size());

  FusionReid fresh(r.config.model);
  restore_state(st, fresh, nullptr);
  for (const auto& [path, t] : fresh.store().params()) {
    for (std::size_t i = 0; i < t.numel(); ++i) REQUIRE(st.params.at(path)[i] == t[i]);
  }
  for (const auto& [path, t] : fresh.store().buffers()) {
    for (std::size_t i = 0; i < t.numel(); ++i) REQUIRE(st.buffers.at(path)[i] == t[i]);
  }
  CHECK_FALSE(fs::exists(dir / "checkpoint.bin.tmp"));
}

TEST_CASE("checkpoint load errors") {
  PreparedRun r = small_run();
  FusionReid model(r.config.model);
  const fs::path dir = scratch("errors");
  checkpoint_save(capture_state(r.config, model, nullptr, 0), dir / "c.bin");
  std::ifstream in(dir / "c.bin", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  auto write = [&](const std::string& name, const std::string& b) {
    std::ofstream(dir / name, std::ios::binary) << b;
    return dir / name;
  };
  SUBCASE("truncated") {
    try {
      checkpoint_load(write("t.bin", bytes.substr(0, bytes.size() / 2)));
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("truncated") != std::string::npos);
    }
  }
  SUBCASE("version mismatch") {
    std::string b = bytes;
    b[8] = 7;
    try {
      checkpoint_load(write("v.bin", b));
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("version 7") != std::string::npos);
    }
  }
  SUBCASE("bad magic") {
    std::string b = bytes;
    b[0] = 'X';
    CHECK_THROWS_AS(checkpoint_load(write("m.bin", b)), DataError);
  }
  SUBCASE("flipped data byte fails the checksum") {
    std::string b = bytes;
    b[b.size() - 20] ^= 0x10;
    CHECK_THROWS_AS(checkpoint_load(write("c2.bin", b)), DataError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(checkpoint_load(dir / "none.bin"), IoError); }
  SUBCASE("model config mismatch is reported field by field") {
    const CheckpointState st = checkpoint_load(dir / "c.bin");
    ModelConfig other = r.config.model;
    other.dmf.layers = 3;
    other.dmf.mfu_shared = true;
    FusionReid m2(other);
    try {
      restore_state(st, m2, nullptr);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("model.dmf.layers: 2 != 3") != std::string::npos);
      CHECK(msg.find("model.dmf.mfu_shared: false != true") != std::string::npos);
    }
  }
}

TEST_CASE("resume mid-epoch reproduces the uninterrupted run") {
  const fs::path dir = scratch("resume");
  PreparedRun r = small_run({"train.max_steps=7", "train.checkpoint_every=3"});
  auto full = build_model(r.config, r.data);
  const TrainOutcome a = train_model(*full, r.config, r.data, TrainOptions{dir / "a", nullptr, nullptr, 0});
  REQUIRE(a.log.size() == 7);
  REQUIRE(fs::exists(dir / "a" / "checkpoints" / "step_000003.bin"));

  const CheckpointState st = checkpoint_load(dir / "a" / "checkpoints" / "step_000003.bin");
  CHECK(st.step == 3);
  auto resumed = build_model(r.config, r.data);
  const TrainOutcome b = train_model(*resumed, r.config, r.data, TrainOptions{dir / "b", &st, nullptr, 0});
  REQUIRE(b.log.size() == 4);
  for (std::size_t i = 0; i < b.log.size(); ++i) {
    CHECK(b.log[i].step == a.log[i + 3].step);
    CHECK(b.log[i].total == a.log[i + 3].total);
  }
  for (const auto& [path, t] : full->store().params()) {
    const Tensor u = resumed->store().param(path);
    for (std::size_t i = 0; i < t.numel(); ++i) REQUIRE(u[i] == t[i]);
  }

  PreparedRun changed = small_run({"train.max_steps=7", "optim.peak_lr=0.03"});
  auto m = build_model(changed.config, changed.data);
  CHECK_THROWS_AS(train_model(*m, changed.config, changed.data, TrainOptions{dir / "c", &st, nullptr, 0}),
                  ConfigError);
}

TEST_CASE("training log layout") {
  const fs::path dir = scratch("log");
  PreparedRun r = small_run({"train.max_steps=2"});
  auto model = build_model(r.config, r.data);
  train_model(*model, r.config, r.data, TrainOptions{dir, nullptr, nullptr, 0});
  std::ifstream log(dir / "train_log.csv");
  std::string header, row;
  std::getline(log, header);
  CHECK(header.rfind("step,epoch,lr,total,ce_sum,tri_sum,c_hat_ce,c_hat_tri,", 0) == 0);
  std::size_t rows = 0;
  while (std::getline(log, row)) ++rows;
  CHECK(rows == 2);
  std::ifstream heads(dir / "head_log.csv");
  std::getline(heads, header);
  CHECK(header == "step,head,ce,tri");
  rows = 0;
  while (std::getline(heads, row)) ++rows;
  CHECK(rows == 12);
}

TEST_CASE("trainer configuration errors") {
  PreparedRun r = small_run();
  auto model = build_model(r.config, r.data);
  TrainConfig t = r.config.train;
  t.k = 1;
  CHECK_THROWS_AS(Trainer(*model, r.data, r.config.optim, t, 0), ConfigError);
  t = r.config.train;
  t.p = 9;
  CHECK_THROWS_AS(Trainer(*model, r.data, r.config.optim, t, 0), ConfigError);
  ModelConfig few = r.config.model;
  few.num_classes = 4;
  FusionReid small(few);
  CHECK_THROWS_AS(Trainer(small, r.data, r.config.optim, r.config.train, 0), ConfigError);
}
