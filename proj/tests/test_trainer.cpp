#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "tvl/model_check.hpp"
#include "tvl/trainer.hpp"

using namespace tvl;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("tvl_trainer_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

TrainConfig tiny_config(std::uint64_t seed = 0) {
  TrainConfig c;
  c.model.image_size = 16;
  c.model.patch_size = 4;
  c.model.embed_dim = 32;
  c.model.num_heads = 4;
  c.model.depth = 2;
  c.model.num_classes = 2;
  c.epochs = 4;
  c.batch_size = 16;
  c.warmup_epochs = 1;
  c.seed = seed;
  return c;
}

Dataset tiny_blobs(std::size_t n, std::uint64_t seed) {
  SyntheticOptions o;
  o.image_size = 16;
  return synthetic_dataset(SyntheticKind::two_class_blobs, n, seed, o);
}

// Ten classes of eight 16x16 images each, class-major.
Dataset ten_class_set() {
  Dataset ds = tiny_blobs(80, 4);
  ds.num_classes = 10;
  for (std::size_t i = 0; i < ds.size(); ++i) ds.labels[i] = static_cast<std::uint8_t>(i / 8);
  return ds;
}

}  // namespace

TEST_CASE("config text parsing and precedence") {
  const auto kv = parse_kv_text("# tiny\n dim = 64 \n\nheads=4  # trailing\nmla=q\n");
  CHECK(kv.size() == 3);
  CHECK(kv.at("dim") == "64");
  CHECK(kv.at("heads") == "4");
  CHECK_THROWS_AS(parse_kv_text("dim 64\n"), ConfigError);

  TrainConfig c;
  apply_kv(c, kv);
  CHECK(c.model.embed_dim == 64);
  CHECK(c.model.mla.variant == MlaVariant::q);
  apply_kv(c, {{"dim", "96"}});  // later values override earlier ones
  CHECK(c.model.embed_dim == 96);
  CHECK_THROWS_AS(apply_kv(c, {{"colour", "red"}}), ConfigError);
  CHECK_THROWS_AS(apply_kv(c, {{"epochs", "-3"}}), ConfigError);
  CHECK_THROWS_AS(apply_kv(c, {{"mla", "qq"}}), ConfigError);
  CHECK_THROWS_AS(apply_kv(c, {{"aa", "maybe"}}), ConfigError);

  TrainConfig back;
  apply_kv(back, parse_kv_text(c.to_text()));
  CHECK(back.to_kv() == c.to_kv());

  const fs::path dir = scratch_dir("kv");
  std::ofstream(dir / "a.cfg") << "epochs=3\nlr=0.01\n";
  CHECK(read_kv_file(dir / "a.cfg").at("lr") == "0.01");
  CHECK_THROWS_AS(read_kv_file(dir / "missing.cfg"), ConfigError);
  CHECK(parse_size_list("1,32,256") == std::vector<std::size_t>{1, 32, 256});
  CHECK_THROWS_AS(parse_size_list(""), ConfigError);
}

TEST_CASE("train config validation and derived values") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.optim_hyper().lr_peak == 2e-3);
  c.optimizer = OptimizerKind::lion;
  CHECK(c.optim_hyper().lr_peak == 2e-4);
  c.lr = 1e-3;
  CHECK(c.optim_hyper().lr_peak == 1e-3);
  c.workers = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.workers = 4;
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  TrainConfig w;
  CHECK(w.effective_warmup_epochs() == 10);
  w.epochs = 5;
  CHECK(w.effective_warmup_epochs() == 0);
  w.epochs = 40;
  CHECK(w.effective_warmup_epochs() == 10);
}

TEST_CASE("metrics rows are self-contained and appended") {
  MetricsRecord r;
  r.epoch = 3;
  r.train_loss = 1.25;
  r.val_acc = 0.5;
  r.lr = 1e-3;
  r.batch_size = 64;
  const auto kv = parse_row(r.to_row());
  CHECK(kv.at("epoch") == "3");
  CHECK(std::stod(kv.at("val_acc")) == 0.5);
  CHECK(kv.at("batch_size") == "64");
  for (const char* k : {"train_loss", "lr", "images_per_sec", "peak_activation_bytes",
                        "wall_seconds", "workers"})
    CHECK(kv.count(k) == 1);
  MetricsRecord no_eval;
  CHECK(parse_row(no_eval.to_row()).count("val_acc") == 0);
  CHECK_THROWS_AS(parse_row("epoch=1 junk"), ValidationError);

  const fs::path file = scratch_dir("metrics") / "metrics.log";
  std::ostringstream echo;
  {
    MetricsSink sink(&echo, file);
    sink.write(r.to_row());
  }
  {
    MetricsSink sink(nullptr, file);
    sink.write(no_eval.to_row());
    // No close: the row is already flushed.
    std::ifstream in(file);
    std::size_t lines = 0;
    for (std::string line; std::getline(in, line); ++lines) CHECK_NOTHROW(parse_row(line));
    CHECK(lines == 2);
  }
  CHECK(echo.str() == r.to_row() + "\n");
}

TEST_CASE("evaluation counts argmax hits with ties to the lower index") {
  const Dataset ds = ten_class_set();
  TrainConfig c = tiny_config();
  c.model.num_classes = 10;
  Model<float> m = initial_model(c, &ds);
  auto& w = m.params.at("head.fc2.weight");
  auto& b = m.params.at("head.fc2.bias");
  std::fill(w.data().begin(), w.data().end(), 0.0f);
  std::fill(b.data().begin(), b.data().end(), 0.0f);
  CHECK(evaluate(m, ds) == doctest::Approx(0.1));  // all logits tie
  b[0] = 1.0f;
  CHECK(evaluate(m, ds) == doctest::Approx(0.1));
  b[7] = 2.0f;
  CHECK(evaluate(m, ds, 7) == doctest::Approx(0.1));

  Dataset empty = ds;
  empty.pixels.clear();
  empty.labels.clear();
  CHECK_THROWS_AS(evaluate(m, empty), ValidationError);
}

TEST_CASE("evaluation is independent of dataset order and batch size") {
  const Dataset ds = tiny_blobs(60, 2);
  const Model<float> m = initial_model(tiny_config(), &ds);
  Dataset rev = ds;
  const std::size_t bytes = ds.image_bytes();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::size_t j = ds.size() - 1 - i;
    rev.labels[i] = ds.labels[j];
    std::copy_n(ds.pixels.begin() + static_cast<std::ptrdiff_t>(j * bytes), bytes,
                rev.pixels.begin() + static_cast<std::ptrdiff_t>(i * bytes));
  }
  const double a = evaluate(m, ds);
  CHECK(evaluate(m, rev) == a);
  CHECK(evaluate(m, ds, 7) == a);
  CHECK(evaluate(m, ds, 1) == a);
}

TEST_CASE("one worker is the serial step bitwise") {
  const auto cc = make_model_check_case(grad_check_model_config(MlaVariant::qk, 2), 4, 3);
  const auto serial = compute_gradients(cc.model, cc.images, cc.targets, nullptr);
  const auto one = parallel_gradients(cc.model, cc.images, cc.targets, nullptr, 1);
  CHECK(one.loss == serial.loss);
  for (const auto& [k, g] : serial.grads) CHECK(one.grads.at(k).storage() == g.storage());
}

TEST_CASE("sharded gradients equal full-batch gradients at double precision") {
  for (std::size_t workers : {2, 4})
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const auto variant = static_cast<MlaVariant>(seed % 6);
      auto cc = make_model_check_case(grad_check_model_config(variant, 1 + seed % 2), 8, seed);
      Rng drop_rng(seed);
      cc.model.config.drop_path_rate = 0.2;
      const DropPlan plan = make_drop_plan(cc.model.config, 8, drop_rng);
      const auto serial = compute_gradients(cc.model, cc.images, cc.targets, &plan);
      const auto par = parallel_gradients(cc.model, cc.images, cc.targets, &plan, workers);
      CHECK(std::abs(par.loss - serial.loss) <= 1e-12);
      double worst = 0;
      for (const auto& [k, g] : serial.grads)
        for (std::size_t i = 0; i < g.size(); ++i)
          worst = std::max(worst, std::abs(par.grads.at(k)[i] - g[i]));
      CHECK(worst <= 1e-10);
    }
  const auto cc = make_model_check_case(grad_check_model_config(MlaVariant::none, 1), 6, 0);
  CHECK_THROWS_AS(parallel_gradients(cc.model, cc.images, cc.targets, nullptr, 4), ConfigError);
}

TEST_CASE("training step applies the averaged gradient once") {
  auto cc = make_model_check_case(grad_check_model_config(MlaVariant::kv, 1), 4, 5);
  Model<double> a = cc.model, b = cc.model;
  OptimState<double> sa, sb;
  sa.hyper = sb.hyper = OptimHyper::defaults(OptimizerKind::adamw);
  const auto g = compute_gradients(a, cc.images, cc.targets, nullptr);
  optimizer_step(a.params, g.grads, sa, 1e-3);
  parallel_train_step(b, cc.images, cc.targets, nullptr, 2, sb, 1e-3);
  CHECK(sb.step == 1);
  for (const auto& [k, v] : a.params)
    for (std::size_t i = 0; i < v.size(); ++i) REQUIRE(b.params.at(k)[i] == doctest::Approx(v[i]).epsilon(1e-9));
}

TEST_CASE("training is deterministic and learns separable blobs") {
  const Dataset tr = tiny_blobs(256, 1), te = tiny_blobs(128, 2);
  TrainConfig c = tiny_config(7);
  c.epochs = 5;
  const TrainResult a = train(c, tr, &te);
  const TrainResult b = train(c, tr, &te);
  CHECK(a.step_losses.size() == 5 * 16);
  CHECK(a.step_losses == b.step_losses);
  CHECK(a.model.params == b.model.params);
  REQUIRE(a.records.size() == 5);
  CHECK(*a.records.back().val_acc >= 0.95);
  for (std::size_t e = 1; e < a.records.size(); ++e)
    CHECK(a.records[e].wall_seconds >= a.records[e - 1].wall_seconds);
  for (const auto& r : a.records) {
    CHECK(*r.val_acc >= 0.0);
    CHECK(*r.val_acc <= 1.0);
  }

  TrainConfig other = c;
  other.seed = 8;
  CHECK(train(other, tr, nullptr).step_losses != a.step_losses);
}

TEST_CASE("resumed run reproduces the uninterrupted loss sequence bitwise") {
  const Dataset tr = tiny_blobs(96, 3);
  TrainConfig c = tiny_config(11);
  c.epochs = 4;
  const TrainResult full = train(c, tr, nullptr);

  const fs::path ck = scratch_dir("resume") / "ck.tvlb";
  TrainOptions first;
  first.stop_after_epochs = 2;
  first.checkpoint_path = ck;
  const TrainResult head = train(c, tr, nullptr, first);
  CHECK(head.epochs_done == 2);
  const Checkpoint loaded = load_checkpoint(ck);
  CHECK(loaded.epoch == 2);
  TrainOptions second;
  second.resume = &loaded;
  const TrainResult tail = train(c, tr, nullptr, second);

  std::vector<double> joined = head.step_losses;
  joined.insert(joined.end(), tail.step_losses.begin(), tail.step_losses.end());
  CHECK(joined == full.step_losses);
  CHECK(tail.model.params == full.model.params);
  CHECK(tail.steps_done == full.steps_done);

  TrainConfig wider = c;
  wider.model.embed_dim = 64;
  CHECK_THROWS_AS(train(wider, tr, nullptr, second), ConfigError);
}

TEST_CASE("checkpoint restores the model and its configuration") {
  const Dataset tr = tiny_blobs(32, 0);
  TrainConfig c = tiny_config();
  c.model.mla.variant = MlaVariant::qkv;
  c.model.mla.d_c = 8;
  c.model.pos_embed = PosEmbed::sinusoidal;
  c.epochs = 1;
  const TrainResult r = train(c, tr, nullptr);
  TrainConfig back;
  const Model<float> m = model_from_checkpoint(decode_checkpoint(encode_checkpoint(r.checkpoint)), &back);
  CHECK(back.to_kv() == c.to_kv());
  CHECK(m.params == r.model.params);
  CHECK(evaluate(m, tr) == evaluate(r.model, tr));

  Checkpoint broken = r.checkpoint;
  broken.tensors.erase("head.fc2.bias");
  CHECK_THROWS_AS(model_from_checkpoint(broken), CheckpointError);
}

TEST_CASE("training rejects mismatched data and diverging runs") {
  TrainConfig c = tiny_config();
  CHECK_THROWS_AS(train(c, ten_class_set(), nullptr), ConfigError);
  CHECK_THROWS_AS(train(c, tiny_blobs(8, 0), nullptr), ConfigError);
  c.lr = 1e30;
  c.warmup_epochs = 0;
  c.epochs = 3;
  c.augment = AugmentConfig::none();
  CHECK_THROWS_AS(train(c, tiny_blobs(64, 0), nullptr), NumericError);
}

TEST_CASE("an overfit micro-run memorises its samples") {
  Dataset ds = tiny_blobs(10, 9);
  for (std::size_t i = 0; i < ds.size(); ++i) ds.labels[i] = static_cast<std::uint8_t>((i * 7 / 3) % 2);
  TrainConfig c = tiny_config(2);
  c.batch_size = 10;
  c.epochs = 300;
  c.warmup_epochs = 5;
  c.lr = 3e-3;
  c.augment = AugmentConfig::none();
  c.model.drop_path_rate = 0.0;
  const TrainResult r = train(c, ds, &ds);
  CHECK(*r.records.back().val_acc == 1.0);
}

TEST_CASE("profiler phases account for the whole step") {
  TrainConfig c = tiny_config();
  c.batch_size = 8;
  const StepProfile p = profile_step(c, tiny_blobs(16, 0), 10, 3);
  CHECK(p.steps == 10);
  CHECK(p.batch_size == 8);
  const double sum = p.forward_ms + p.backward_ms + p.optim_ms + p.other_ms;
  CHECK(std::abs(sum - p.total_ms) <= 0.01 * p.total_ms);
  CHECK(p.backward_ms > 0.0);
  const auto kv = parse_row(p.to_row());
  for (const char* k : {"forward_ms", "backward_ms", "optim_ms", "other_ms", "total_ms"})
    CHECK(kv.count(k) == 1);
}

TEST_CASE("bench emits one row per batch size with linear activation estimates") {
  ModelConfig m = tiny_config().model;
  const std::vector<std::size_t> sizes{4, 1, 8, 2};
  BenchOptions o;
  o.batches = 2;
  o.warmup = 1;
  o.memory_budget_bytes = estimate_activation_bytes(m, 4);
  const auto rows = benchmark_throughput(m, sizes, o);
  REQUIRE(rows.size() == 4);
  const std::size_t one = estimate_activation_bytes(m, 1);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(rows[i].batch_size == sizes[i]);
    CHECK(rows[i].activation_bytes == sizes[i] * one);
    CHECK(rows[i].skipped == (sizes[i] > 4));
    CHECK(parse_row(rows[i].to_row()).at("status") == (rows[i].skipped ? "skipped" : "ok"));
    if (!rows[i].skipped) CHECK(rows[i].images_per_sec > 0.0);
  }
  const std::string table = bench_table(rows);
  CHECK(std::count(table.begin(), table.end(), '\n') == 5);
}
