#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "tvl/augment.hpp"
#include "tvl/checkpoint.hpp"
#include "tvl/data.hpp"
#include "tvl/model.hpp"
#include "tvl/optim.hpp"

namespace tvl {

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  ModelConfig model;
  AugmentConfig augment;
  std::size_t epochs = 100;
  std::size_t batch_size = 256;
  std::size_t workers = 1;
  OptimizerKind optimizer = OptimizerKind::adamw;
  /// Unset: the optimizer's default (AdamW 2e-3 / 0.05, Lion 2e-4 / 0.5).
  std::optional<double> lr;
  std::optional<double> weight_decay;
  double lr_min = kLrMin;
  std::size_t warmup_epochs = 10;
  std::size_t eval_every = 1;
  std::uint64_t seed = 0;
  std::optional<std::size_t> subset_per_class;
  bool decay_all = false;
  /// Multiply the peak lr by batch_size / 256.
  bool scale_lr = false;
  std::size_t prefetch = 2;
  std::size_t threads = 0;  // OpenMP threads in total; 0 = runtime default

  void validate() const;
  OptimHyper optim_hyper() const;
  /// Warmup used for a run of `epochs`: warmup_epochs, or epochs / 10 when
  /// warmup_epochs does not fit.
  std::size_t effective_warmup_epochs() const;

  std::map<std::string, std::string> to_kv() const;
  std::string to_text() const;
};

/// Flat key=value lines; '#' starts a comment.
std::map<std::string, std::string> parse_kv_text(std::string_view text);
std::map<std::string, std::string> read_kv_file(const std::filesystem::path& path);
/// Applies known keys; unknown keys or bad values raise ConfigError.
void apply_kv(TrainConfig& cfg, const std::map<std::string, std::string>& kv);
/// Comma-separated extents, e.g. "1,32,256".
std::vector<std::size_t> parse_size_list(const std::string& s);

// ---------------------------------------------------------------------------
// Metrics

struct MetricsRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_acc;
  double lr = 0.0;
  double images_per_sec = 0.0;
  std::size_t peak_activation_bytes = 0;
  double wall_seconds = 0.0;
  std::size_t workers = 1;
  std::size_t batch_size = 0;

  std::string to_row() const;
};

/// Parses one space-separated key=value row.
std::map<std::string, std::string> parse_row(std::string_view row);

/// Echoes rows to an optional stream and appends them, flushed, to a file.
class MetricsSink {
 public:
  MetricsSink(std::ostream* echo, const std::filesystem::path& file);
  void write(const std::string& row);

 private:
  std::ostream* echo_;
  std::ofstream file_;
};

// ---------------------------------------------------------------------------
// Steps

template <typename T>
struct StepResult {
  double loss = 0.0;
  ParamMap<T> grads;
};

/// Serial forward + backward over the whole batch; `plan` may be null.
template <typename T>
StepResult<T> compute_gradients(const Model<T>& model, const Tensor<T>& images,
                                const Tensor<T>& targets, const DropPlan* plan);

/// Shards the batch contiguously over K threads, runs compute_gradients on
/// each shard and averages losses and gradients in ascending worker order.
template <typename T>
StepResult<T> parallel_gradients(const Model<T>& model, const Tensor<T>& images,
                                 const Tensor<T>& targets, const DropPlan* plan,
                                 std::size_t workers, int threads_per_worker = 0);

/// parallel_gradients followed by one optimizer step.
template <typename T>
StepResult<T> parallel_train_step(Model<T>& model, const Tensor<T>& images,
                                  const Tensor<T>& targets, const DropPlan* plan,
                                  std::size_t workers, OptimState<T>& optim, double lr,
                                  const DecayRule& decay = {}, int threads_per_worker = 0);

template <typename T>
double grad_norm(const ParamMap<T>& grads);

// ---------------------------------------------------------------------------
// Training and evaluation

/// Argmax accuracy, ties to the lower class index. Eval mode, normalise only.
double evaluate(const Model<float>& model, const Dataset& ds, std::size_t batch = 256);

struct TrainOptions {
  MetricsSink* sink = nullptr;
  const Checkpoint* resume = nullptr;
  /// Stop after this many epochs in total (0 = run to cfg.epochs); the
  /// checkpoint then resumes where the run stopped.
  std::size_t stop_after_epochs = 0;
  /// Written after every epoch when non-empty.
  std::filesystem::path checkpoint_path;
};

struct TrainResult {
  Model<float> model;
  OptimState<float> optim;
  std::vector<double> step_losses;
  std::vector<MetricsRecord> records;
  std::size_t epochs_done = 0;
  std::uint64_t steps_done = 0;
  Checkpoint checkpoint;
};

/// The whole procedure: seeded shuffling, augmented batches from a prefetch
/// thread, K-way data-parallel steps, warmup + cosine schedule, per-epoch
/// metrics and checkpoints. `eval` may be null.
TrainResult train(const TrainConfig& cfg, const Dataset& train_set, const Dataset* eval,
                  const TrainOptions& opts = {});

/// Fresh model for `cfg`; whitening samples patches from `train_set`.
Model<float> initial_model(const TrainConfig& cfg, const Dataset* train_set);

Checkpoint make_checkpoint(const TrainConfig& cfg, const Model<float>& model,
                           const OptimState<float>& optim, const Rng& shuffle_rng,
                           std::size_t epoch, std::uint64_t step);
/// Model stored in a checkpoint, with the configuration from its CONF section.
Model<float> model_from_checkpoint(const Checkpoint& ck, TrainConfig* cfg_out = nullptr);

// ---------------------------------------------------------------------------
// Profiling and benchmarking

struct StepProfile {
  double forward_ms = 0.0;
  double backward_ms = 0.0;
  double optim_ms = 0.0;
  double other_ms = 0.0;  // batch assembly and tape setup
  double total_ms = 0.0;
  std::size_t steps = 0;
  std::size_t batch_size = 0;

  std::string to_row() const;
};

/// Averages `steps` timed training steps after discarding `warmup`.
StepProfile profile_step(const TrainConfig& cfg, const Dataset& ds, std::size_t steps = 10,
                         std::size_t warmup = 3);

struct BenchRow {
  std::size_t batch_size = 0;
  double images_per_sec = 0.0;
  std::size_t activation_bytes = 0;
  bool skipped = false;

  std::string to_row() const;
};

struct BenchOptions {
  std::size_t batches = 20;
  std::size_t warmup = 2;
  std::size_t memory_budget_bytes = std::size_t{8} << 30;
  std::uint64_t seed = 0;
};

/// Forward-only images/sec per batch size plus the analytic activation
/// estimate; rows over the memory budget are marked skipped.
std::vector<BenchRow> benchmark_throughput(const ModelConfig& cfg,
                                           std::span<const std::size_t> batch_sizes,
                                           const BenchOptions& opts = {});
std::string bench_table(std::span<const BenchRow> rows);

}  // namespace tvl
