// tinyvit: train / eval / bench / profile / grad-check front end.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "tvl/checkpoint.hpp"
#include "tvl/data.hpp"
#include "tvl/grad_check.hpp"
#include "tvl/model_check.hpp"
#include "tvl/kernels.hpp"
#include "tvl/trainer.hpp"

namespace fs = std::filesystem;
using namespace tvl;

namespace {

struct Common {
  std::string config;
  std::string data_dir;
  std::string out = "runs/latest";
  std::string resume;
  std::map<std::string, std::string> kv;  // flags given on the command line
  std::optional<std::size_t> eval_subset;
};

/// Registers the shared flags; values land in `c.kv` only when given.
void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "key=value config file (flags override it)");
  app->add_option("--data-dir", c.data_dir, "CIFAR-10 binary directory (default $DATA_DIR)");
  app->add_option("--out", c.out, "output directory")->capture_default_str();
  app->add_option("--resume", c.resume, "checkpoint to resume from / evaluate");

  struct Flag {
    const char* name;
    const char* key;
    const char* help;
  };
  static const Flag valued[] = {
      {"--epochs", "epochs", "training epochs"},
      {"--batch-size", "batch_size", "global batch size"},
      {"--workers", "workers", "data-parallel worker threads K"},
      {"--optimizer", "optimizer", "adamw|lion"},
      {"--lr", "lr", "peak learning rate"},
      {"--weight-decay", "weight_decay", "decoupled weight decay"},
      {"--warmup-epochs", "warmup_epochs", "linear warmup length"},
      {"--mla", "mla", "none|q|k|qk|kv|qkv"},
      {"--dc", "dc", "latent width of factored projections"},
      {"--num-cls", "num_cls", "number of CLS tokens"},
      {"--dim", "dim", "embedding width C"},
      {"--heads", "heads", "attention heads"},
      {"--depth", "depth", "transformer blocks"},
      {"--pos-embed", "pos_embed", "learnable|sin|none"},
      {"--patch-init", "patch_init", "random|whiten"},
      {"--drop-path", "drop_path", "stochastic depth rate of the last block"},
      {"--seed", "seed", "random seed"},
      {"--subset-per-class", "subset_per_class", "first K training images per class"},
      {"--eval-every", "eval_every", "evaluate every N epochs"},
  };
  for (const auto& f : valued) {
    const std::string key = f.key;
    app->add_option_function<std::string>(
        f.name, [&c, key](const std::string& v) { c.kv[key] = v; }, f.help);
  }
  static const Flag negated[] = {
      {"--no-aa", "aa", "disable AutoAugment"},
      {"--no-mixup", "mixup", "disable MixUp"},
      {"--no-cutmix", "cutmix", "disable CutMix"},
      {"--no-erase", "random_erase", "disable random erasing"},
  };
  for (const auto& f : negated) {
    const std::string key = f.key;
    app->add_flag_callback(f.name, [&c, key] { c.kv[key] = "false"; }, f.help);
  }
  app->add_flag_callback("--decay-all", [&c] { c.kv["decay_all"] = "true"; },
                         "decay every parameter");
  app->add_flag_callback("--scale-lr", [&c] { c.kv["scale_lr"] = "true"; },
                         "scale lr by batch_size/256");
  app->add_option_function<std::size_t>(
      "--eval-subset-per-class", [&c](std::size_t v) { c.eval_subset = v; },
      "first K test images per class");
}

TrainConfig resolve_config(const Common& c) {
  TrainConfig cfg;
  if (!c.config.empty()) apply_kv(cfg, read_kv_file(c.config));
  apply_kv(cfg, c.kv);
  if (const char* t = std::getenv("THREADS"); t && *t) apply_kv(cfg, {{"threads", t}});
  return cfg;
}

fs::path data_dir(const Common& c) { return c.data_dir.empty() ? default_data_dir() : fs::path(c.data_dir); }

void require_cifar(const fs::path& dir) {
  if (!cifar10_available(dir))
    throw ConfigError("CIFAR-10 binary files not found under '" + dir.string() +
                      "' (set --data-dir or DATA_DIR)");
}

Dataset eval_split(const Common& c, const fs::path& dir) {
  Dataset test = load_cifar10(dir, Split::test);
  if (c.eval_subset) test = subset_per_class(test, *c.eval_subset);
  return test;
}

int run_train(const Common& c) {
  TrainConfig cfg = resolve_config(c);
  const Checkpoint* resume = nullptr;
  Checkpoint ck;
  if (!c.resume.empty()) {
    ck = load_checkpoint(c.resume);
    TrainConfig stored;
    apply_kv(stored, parse_kv_text(ck.config));
    // The stored run configuration is the base; explicit flags still win.
    if (!c.config.empty()) apply_kv(stored, read_kv_file(c.config));
    apply_kv(stored, c.kv);
    stored.threads = cfg.threads;
    cfg = stored;
    resume = &ck;
  }
  cfg.validate();
  const fs::path dir = data_dir(c);
  require_cifar(dir);
  Dataset train_set = load_cifar10(dir, Split::train);
  if (cfg.subset_per_class) train_set = subset_per_class(train_set, *cfg.subset_per_class);
  const Dataset test = eval_split(c, dir);

  const fs::path out = c.out;
  fs::create_directories(out);
  {
    std::ofstream conf(out / "config.txt");
    conf << cfg.to_text();
  }
  MetricsSink sink(&std::cout, out / "metrics.log");
  TrainOptions opts;
  opts.sink = &sink;
  opts.resume = resume;
  opts.checkpoint_path = out / "checkpoint.tvlb";
  const TrainResult res = train(cfg, train_set, &test, opts);
  std::cout << "checkpoint=" << opts.checkpoint_path.string() << " epochs=" << res.epochs_done
            << " steps=" << res.steps_done << "\n";
  return 0;
}

int run_eval(const Common& c) {
  TrainConfig cfg = resolve_config(c);
  Model<float> model;
  const fs::path dir = data_dir(c);
  require_cifar(dir);
  if (!c.resume.empty()) {
    model = model_from_checkpoint(load_checkpoint(c.resume), &cfg);
  } else {
    cfg.validate();
    const Dataset train_set = load_cifar10(dir, Split::train);
    model = initial_model(cfg, &train_set);
  }
  const Dataset test = eval_split(c, dir);
  const double acc = evaluate(model, test);
  const std::string row = "split=test images=" + std::to_string(test.size()) +
                          " val_acc=" + std::to_string(acc) +
                          " checkpoint=" + (c.resume.empty() ? std::string("none") : c.resume);
  std::cout << row << "\n";
  fs::create_directories(c.out);
  MetricsSink(nullptr, fs::path(c.out) / "metrics.log").write(row);
  return 0;
}

int run_bench(const Common& c, const std::string& sizes, const BenchOptions& opts) {
  const TrainConfig cfg = resolve_config(c);
  cfg.model.validate();
  const auto batch_sizes = parse_size_list(sizes);
  const auto rows = benchmark_throughput(cfg.model, batch_sizes, opts);
  std::cout << bench_table(rows);
  fs::create_directories(c.out);
  MetricsSink sink(nullptr, fs::path(c.out) / "bench.log");
  for (const auto& r : rows) sink.write(r.to_row());
  return 0;
}

int run_profile(const Common& c, std::size_t steps, std::size_t warmup) {
  const TrainConfig cfg = resolve_config(c);
  cfg.validate();
  Dataset ds;
  const fs::path dir = data_dir(c);
  if (cifar10_available(dir)) {
    ds = load_cifar10(dir, Split::test);
  } else {
    std::cerr << "note: CIFAR-10 not found, profiling on synthetic images\n";
    ds = synthetic_dataset(SyntheticKind::striped_patches, std::max<std::size_t>(cfg.batch_size, 2),
                           cfg.seed, {cfg.model.image_size});
    ds.num_classes = cfg.model.num_classes;
  }
  const StepProfile prof = profile_step(cfg, ds, steps, warmup);
  std::cout << prof.to_row() << "\n";
  fs::create_directories(c.out);
  MetricsSink(nullptr, fs::path(c.out) / "profile.log").write(prof.to_row());
  return 0;
}

int run_grad_check(const Common& c, double h, std::size_t sample, std::size_t per_param,
                   std::size_t batch, bool all_variants) {
  const TrainConfig cfg = resolve_config(c);
  std::vector<MlaVariant> variants{cfg.model.mla.variant};
  std::vector<std::size_t> cls{cfg.model.num_cls_tokens};
  if (all_variants) {
    variants.assign(std::begin(kAllMlaVariants), std::end(kAllMlaVariants));
    cls = {1, 2};
  }
  GradCheckOptions opts;
  opts.h = h;
  opts.sample = sample;
  opts.per_param = per_param;
  opts.seed = cfg.seed;
  bool ok = true;
  for (MlaVariant v : variants)
    for (std::size_t n : cls) {
      const ModelConfig m = grad_check_model_config(v, n);
      const auto t0 = std::chrono::steady_clock::now();
      const GradCheckReport rep = model_grad_check(make_model_check_case(m, batch, cfg.seed), opts);
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      const bool pass = rep.max_rel_error < 1e-4;
      ok = ok && pass;
      std::cout << "mla=" << to_string(v) << " num_cls=" << n << " dim=" << m.embed_dim
                << " depth=" << m.depth << " checked=" << rep.checked
                << " max_rel_error=" << rep.max_rel_error << " worst=" << rep.worst
                << " seconds=" << secs << " status=" << (pass ? "ok" : "FAIL") << std::endl;
    }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tiny vision transformer trainer for 32x32 images"};
  app.require_subcommand(1);

  Common tc, ec, bc, pc, gc;
  auto* train_cmd = app.add_subcommand("train", "train a model and write metrics/checkpoints");
  add_common(train_cmd, tc);
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint (or a fresh model)");
  add_common(eval_cmd, ec);

  auto* bench_cmd = app.add_subcommand("bench", "forward-only throughput per batch size");
  add_common(bench_cmd, bc);
  std::string sizes = "32,64,128,256,512,1024";
  BenchOptions bopts;
  double budget_gb = 8.0;
  bench_cmd->add_option("--batch-sizes", sizes, "comma-separated batch sizes")->capture_default_str();
  bench_cmd->add_option("--batches", bopts.batches, "timed batches per size")->capture_default_str();
  bench_cmd->add_option("--budget-gb", budget_gb, "activation memory budget")->capture_default_str();

  auto* profile_cmd = app.add_subcommand("profile", "per-phase timing of training steps");
  add_common(profile_cmd, pc);
  std::size_t steps = 10, warmup = 3;
  profile_cmd->add_option("--steps", steps, "timed steps")->capture_default_str();
  profile_cmd->add_option("--warmup", warmup, "discarded steps")->capture_default_str();

  auto* gc_cmd = app.add_subcommand("grad-check", "finite-difference check of the full model");
  add_common(gc_cmd, gc);
  double h = 1e-5;
  std::size_t sample = 0, per_param = 64, gc_batch = 1;
  bool all_variants = false;
  gc_cmd->add_option("--fd-step", h, "central-difference step")->capture_default_str();
  gc_cmd->add_option("--sample", sample, "coordinates to check in total (0 = all)");
  gc_cmd->add_option("--per-param", per_param, "coordinates per parameter tensor (0 = all)")
      ->capture_default_str();
  gc_cmd->add_option("--gc-batch", gc_batch, "images in the checked batch")->capture_default_str();
  gc_cmd->add_flag("--all", all_variants, "every MLA variant with 1 and 2 CLS tokens");

  CLI11_PARSE(app, argc, argv);

  try {
    if (const char* t = std::getenv("THREADS"); t && *t)
      kernels::par::set_max_threads(std::atoi(t));
    if (*train_cmd) return run_train(tc);
    if (*eval_cmd) return run_eval(ec);
    if (*bench_cmd) {
      bopts.memory_budget_bytes = static_cast<std::size_t>(budget_gb * 1e9);
      return run_bench(bc, sizes, bopts);
    }
    if (*profile_cmd) return run_profile(pc, steps, warmup);
    if (*gc_cmd) return run_grad_check(gc, h, sample, per_param, gc_batch, all_variants);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
