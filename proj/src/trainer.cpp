#include "tvl/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <exception>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "tvl/kernels.hpp"

namespace tvl {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0, Clock::time_point t1) {
  return std::chrono::duration<double, std::milli>(t1 - t0).count();
}

std::string fmt(double v, const char* format = "%.6g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

std::string exact(double v) { return fmt(v, "%.17g"); }

// Stream tags for derive_rng.
constexpr std::uint64_t kInitTag = 0x1417;
constexpr std::uint64_t kShuffleTag = 0x5417;
constexpr std::uint64_t kBatchTag = 1;
constexpr std::uint64_t kDropTag = 2;

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void TrainConfig::validate() const {
  model.validate();
  augment.validate();
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (workers < 1) throw ConfigError("workers must be >= 1");
  if (batch_size % workers != 0)
    throw ConfigError("batch_size " + std::to_string(batch_size) +
                      " is not divisible by workers " + std::to_string(workers));
  if (augment.use_repeated_augment && batch_size % augment.repeated_factor != 0)
    throw ConfigError("repeated augment factor " + std::to_string(augment.repeated_factor) +
                      " does not divide batch_size " + std::to_string(batch_size));
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (prefetch < 1) throw ConfigError("prefetch must be >= 1");
  if (lr && *lr < 0.0) throw ConfigError("lr must be >= 0");
  if (weight_decay && *weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
}

OptimHyper TrainConfig::optim_hyper() const {
  OptimHyper h = OptimHyper::defaults(optimizer);
  if (lr) h.lr_peak = *lr;
  if (weight_decay) h.weight_decay = *weight_decay;
  if (scale_lr) h.lr_peak *= static_cast<double>(batch_size) / 256.0;
  return h;
}

std::size_t TrainConfig::effective_warmup_epochs() const {
  return warmup_epochs < epochs ? warmup_epochs : epochs / 10;
}

std::map<std::string, std::string> TrainConfig::to_kv() const {
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  auto n = [](std::size_t v) { return std::to_string(v); };
  std::map<std::string, std::string> kv{
      {"image_size", n(model.image_size)},
      {"patch_size", n(model.patch_size)},
      {"dim", n(model.embed_dim)},
      {"heads", n(model.num_heads)},
      {"depth", n(model.depth)},
      {"ffn_ratio", n(model.ffn_ratio)},
      {"num_classes", n(model.num_classes)},
      {"num_cls", n(model.num_cls_tokens)},
      {"pos_embed", to_string(model.pos_embed)},
      {"patch_init", to_string(model.patch_init)},
      {"mla", to_string(model.mla.variant)},
      {"dc", n(model.mla.d_c)},
      {"drop_path", exact(model.drop_path_rate)},
      {"ln_eps", exact(model.ln_eps)},
      {"crop_flip", b(augment.use_crop_flip)},
      {"aa", b(augment.use_autoaugment)},
      {"mixup", b(augment.use_mixup)},
      {"cutmix", b(augment.use_cutmix)},
      {"random_erase", b(augment.use_random_erasing)},
      {"repeated_augment", b(augment.use_repeated_augment)},
      {"mixup_alpha", exact(augment.mixup_alpha)},
      {"cutmix_alpha", exact(augment.cutmix_alpha)},
      {"erase_prob", exact(augment.erase_prob)},
      {"label_smoothing", exact(augment.label_smoothing)},
      {"repeated_factor", n(augment.repeated_factor)},
      {"epochs", n(epochs)},
      {"batch_size", n(batch_size)},
      {"workers", n(workers)},
      {"optimizer", to_string(optimizer)},
      {"lr_min", exact(lr_min)},
      {"warmup_epochs", n(warmup_epochs)},
      {"eval_every", n(eval_every)},
      {"seed", std::to_string(seed)},
      {"decay_all", b(decay_all)},
      {"scale_lr", b(scale_lr)},
      {"prefetch", n(prefetch)},
  };
  if (lr) kv["lr"] = exact(*lr);
  if (weight_decay) kv["weight_decay"] = exact(*weight_decay);
  if (subset_per_class) kv["subset_per_class"] = n(*subset_per_class);
  return kv;
}

std::string TrainConfig::to_text() const {
  std::string out;
  for (const auto& [k, v] : to_kv()) out += k + "=" + v + "\n";
  return out;
}

std::map<std::string, std::string> parse_kv_text(std::string_view text) {
  std::map<std::string, std::string> kv;
  std::istringstream in{std::string(text)};
  std::size_t line_no = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  };
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

std::map<std::string, std::string> read_kv_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_kv_text(ss.str());
}

namespace {

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long out = 0;
  try {
    out = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty() || v[0] == '-')
    throw ConfigError("config: " + key + "=" + v + " is not a non-negative integer");
  return static_cast<std::size_t>(out);
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double out = 0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty())
    throw ConfigError("config: " + key + "=" + v + " is not a number");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config: " + key + "=" + v + " is not a boolean");
}

}  // namespace

void apply_kv(TrainConfig& cfg, const std::map<std::string, std::string>& kv) {
  for (const auto& [k, v] : kv) {
    auto& m = cfg.model;
    auto& a = cfg.augment;
    try {
      if (k == "image_size") m.image_size = to_size(k, v);
      else if (k == "patch_size") m.patch_size = to_size(k, v);
      else if (k == "dim") m.embed_dim = to_size(k, v);
      else if (k == "heads") m.num_heads = to_size(k, v);
      else if (k == "depth") m.depth = to_size(k, v);
      else if (k == "ffn_ratio") m.ffn_ratio = to_size(k, v);
      else if (k == "num_classes") m.num_classes = to_size(k, v);
      else if (k == "num_cls") m.num_cls_tokens = to_size(k, v);
      else if (k == "pos_embed") m.pos_embed = parse_pos_embed(v);
      else if (k == "patch_init") m.patch_init = parse_patch_init(v);
      else if (k == "mla") m.mla.variant = parse_mla_variant(v);
      else if (k == "dc") m.mla.d_c = to_size(k, v);
      else if (k == "drop_path") m.drop_path_rate = to_double(k, v);
      else if (k == "ln_eps") m.ln_eps = to_double(k, v);
      else if (k == "crop_flip") a.use_crop_flip = to_bool(k, v);
      else if (k == "aa") a.use_autoaugment = to_bool(k, v);
      else if (k == "mixup") a.use_mixup = to_bool(k, v);
      else if (k == "cutmix") a.use_cutmix = to_bool(k, v);
      else if (k == "random_erase") a.use_random_erasing = to_bool(k, v);
      else if (k == "repeated_augment") a.use_repeated_augment = to_bool(k, v);
      else if (k == "mixup_alpha") a.mixup_alpha = to_double(k, v);
      else if (k == "cutmix_alpha") a.cutmix_alpha = to_double(k, v);
      else if (k == "erase_prob") a.erase_prob = to_double(k, v);
      else if (k == "label_smoothing") a.label_smoothing = to_double(k, v);
      else if (k == "repeated_factor") a.repeated_factor = to_size(k, v);
      else if (k == "epochs") cfg.epochs = to_size(k, v);
      else if (k == "batch_size") cfg.batch_size = to_size(k, v);
      else if (k == "workers") cfg.workers = to_size(k, v);
      else if (k == "optimizer") cfg.optimizer = parse_optimizer(v);
      else if (k == "lr") cfg.lr = to_double(k, v);
      else if (k == "weight_decay") cfg.weight_decay = to_double(k, v);
      else if (k == "lr_min") cfg.lr_min = to_double(k, v);
      else if (k == "warmup_epochs") cfg.warmup_epochs = to_size(k, v);
      else if (k == "eval_every") cfg.eval_every = to_size(k, v);
      else if (k == "seed") cfg.seed = to_size(k, v);
      else if (k == "subset_per_class") cfg.subset_per_class = to_size(k, v);
      else if (k == "decay_all") cfg.decay_all = to_bool(k, v);
      else if (k == "scale_lr") cfg.scale_lr = to_bool(k, v);
      else if (k == "prefetch") cfg.prefetch = to_size(k, v);
      else if (k == "threads") cfg.threads = to_size(k, v);
      else throw ConfigError("config: unknown key '" + k + "'");
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError("config: " + k + "=" + v + ": " + e.what());
    }
  }
}

std::vector<std::size_t> parse_size_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (item.empty()) continue;
    out.push_back(to_size("list", item));
  }
  if (out.empty()) throw ConfigError("empty list '" + s + "'");
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

std::string MetricsRecord::to_row() const {
  std::string row = "epoch=" + std::to_string(epoch) + " train_loss=" + fmt(train_loss, "%.6f");
  if (val_acc) row += " val_acc=" + fmt(*val_acc, "%.4f");
  row += " lr=" + fmt(lr) + " images_per_sec=" + fmt(images_per_sec, "%.2f") +
         " peak_activation_bytes=" + std::to_string(peak_activation_bytes) +
         " wall_seconds=" + fmt(wall_seconds, "%.3f") + " workers=" + std::to_string(workers) +
         " batch_size=" + std::to_string(batch_size);
  return row;
}

std::map<std::string, std::string> parse_row(std::string_view row) {
  std::map<std::string, std::string> out;
  std::istringstream in{std::string(row)};
  for (std::string tok; in >> tok;) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ValidationError("metrics row: bad field '" + tok + "'");
    out[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return out;
}

MetricsSink::MetricsSink(std::ostream* echo, const std::filesystem::path& file) : echo_(echo) {
  if (!file.empty()) {
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    file_.open(file, std::ios::app);
    if (!file_) throw ConfigError("cannot open metrics file " + file.string());
  }
}

void MetricsSink::write(const std::string& row) {
  if (echo_) *echo_ << row << std::endl;
  if (file_.is_open()) file_ << row << std::endl;
}

// ---------------------------------------------------------------------------
// Steps

namespace {

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& t, std::size_t begin, std::size_t count) {
  Shape shape = t.shape();
  const std::size_t row = t.size() / shape[0];
  shape[0] = count;
  std::vector<T> data(t.data().begin() + begin * row, t.data().begin() + (begin + count) * row);
  return Tensor<T>(std::move(shape), std::move(data));
}

}  // namespace

template <typename T>
StepResult<T> compute_gradients(const Model<T>& model, const Tensor<T>& images,
                                const Tensor<T>& targets, const DropPlan* plan) {
  Tape<T> tape;
  const BoundParams p = bind_params(tape, model, true);
  const Var logits = forward(tape, model, p, images, plan);
  const Var loss = ops::cross_entropy(tape, logits, targets);
  tape.backward(loss);
  StepResult<T> res;
  res.loss = static_cast<double>(tape.value(loss).item());
  for (const auto& [path, var] : p.vars) res.grads.emplace(path, tape.grad_tensor(var));
  return res;
}

template <typename T>
StepResult<T> parallel_gradients(const Model<T>& model, const Tensor<T>& images,
                                 const Tensor<T>& targets, const DropPlan* plan,
                                 std::size_t workers, int threads_per_worker) {
  const std::size_t b = images.dim(0);
  if (workers < 1 || b % workers != 0)
    throw ConfigError("parallel step: batch " + std::to_string(b) +
                      " is not divisible by workers " + std::to_string(workers));
  if (workers == 1) {
    if (threads_per_worker > 0) kernels::par::set_max_threads(threads_per_worker);
    return compute_gradients(model, images, targets, plan);
  }
  const std::size_t shard = b / workers;
  std::vector<StepResult<T>> parts(workers);
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          if (threads_per_worker > 0) kernels::par::set_max_threads(threads_per_worker);
          const Tensor<T> x = slice_rows(images, w * shard, shard);
          const Tensor<T> y = slice_rows(targets, w * shard, shard);
          std::optional<DropPlan> sub;
          if (plan) sub = plan->slice(w * shard, shard);
          parts[w] = compute_gradients(model, x, y, sub ? &*sub : nullptr);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  StepResult<T> out = std::move(parts[0]);
  for (std::size_t w = 1; w < workers; ++w) {
    out.loss += parts[w].loss;
    for (auto& [path, g] : out.grads) {
      const Tensor<T>& other = parts[w].grads.at(path);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += other[i];
    }
  }
  const T k = static_cast<T>(workers);
  out.loss /= static_cast<double>(workers);
  for (auto& [path, g] : out.grads)
    for (auto& v : g.data()) v /= k;
  return out;
}

template <typename T>
StepResult<T> parallel_train_step(Model<T>& model, const Tensor<T>& images,
                                  const Tensor<T>& targets, const DropPlan* plan,
                                  std::size_t workers, OptimState<T>& optim, double lr,
                                  const DecayRule& decay, int threads_per_worker) {
  StepResult<T> res = parallel_gradients(model, images, targets, plan, workers, threads_per_worker);
  optimizer_step(model.params, res.grads, optim, lr, decay);
  return res;
}

template <typename T>
double grad_norm(const ParamMap<T>& grads) {
  double acc = 0.0;
  for (const auto& [path, g] : grads)
    for (T v : g.data()) acc += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(acc);
}

// ---------------------------------------------------------------------------
// Evaluation

double evaluate(const Model<float>& model, const Dataset& ds, std::size_t batch) {
  if (ds.size() == 0) throw ValidationError("evaluate: empty dataset '" + ds.name + "'");
  if (batch < 1) throw ConfigError("evaluate: batch must be >= 1");
  std::size_t correct = 0;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < ds.size(); start += batch) {
    const std::size_t n = std::min(batch, ds.size() - start);
    rows.resize(n);
    std::iota(rows.begin(), rows.end(), start);
    const Tensor<float> logits = predict(model, normalized_images<float>(ds, rows));
    const std::size_t k = logits.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < k; ++c)
        if (logits[i * k + c] > logits[i * k + best]) best = c;
      correct += best == ds.labels[start + i];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

// ---------------------------------------------------------------------------
// Training

Model<float> initial_model(const TrainConfig& cfg, const Dataset* train_set) {
  Rng rng = derive_rng(cfg.seed, {kInitTag});
  if (cfg.model.patch_init != PatchInit::whitening) return init_model<float>(cfg.model, rng);
  if (!train_set || train_set->size() == 0)
    throw ConfigError("whitening init needs training images");
  const std::size_t images = std::min<std::size_t>(train_set->size(), 256);
  std::vector<std::size_t> rows(images);
  std::iota(rows.begin(), rows.end(), 0);
  const Tensor<double> sample = patchify_batch(normalized_images<double>(*train_set, rows),
                                               cfg.model.patch_size);
  return init_model<float>(cfg.model, rng, &sample);
}

Checkpoint make_checkpoint(const TrainConfig& cfg, const Model<float>& model,
                           const OptimState<float>& optim, const Rng& shuffle_rng,
                           std::size_t epoch, std::uint64_t step) {
  Checkpoint ck;
  ck.config = cfg.to_text();
  ck.tensors = model.params;
  ck.optim = optim;
  ck.rng = rng_state(shuffle_rng);
  ck.epoch = epoch;
  ck.step = step;
  return ck;
}

Model<float> model_from_checkpoint(const Checkpoint& ck, TrainConfig* cfg_out) {
  TrainConfig cfg;
  apply_kv(cfg, parse_kv_text(ck.config));
  cfg.model.validate();
  Model<float> model;
  model.config = cfg.model;
  model.params = ck.tensors;
  if (cfg.model.pos_embed == PosEmbed::sinusoidal)
    model.fixed_pos =
        tensor_cast<float>(sinusoidal_table(cfg.model.num_patches(), cfg.model.embed_dim));
  // Shapes must match a fresh model of the stored configuration.
  ModelConfig probe = cfg.model;
  probe.patch_init = PatchInit::random;
  Rng rng(0);
  const Model<float> fresh = init_model<float>(probe, rng);
  for (const auto& [path, t] : fresh.params) {
    const auto it = model.params.find(path);
    if (it == model.params.end() || it->second.shape() != t.shape())
      throw CheckpointError(CheckpointError::Kind::format,
                            "checkpoint: tensor '" + path + "' missing or mis-shaped");
  }
  if (model.params.size() != fresh.params.size())
    throw CheckpointError(CheckpointError::Kind::format, "checkpoint: unexpected tensors");
  if (cfg_out) *cfg_out = cfg;
  return model;
}

namespace {

template <typename Item>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t cap) : cap_(cap) {}

  bool push(Item item) {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return items_.size() < cap_ || closed_; });
    if (closed_) return false;
    items_.push_back(std::move(item));
    cv_.notify_all();
    return true;
  }
  std::optional<Item> pop() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return !items_.empty() || closed_; });
    if (items_.empty()) return std::nullopt;
    Item item = std::move(items_.front());
    items_.pop_front();
    cv_.notify_all();
    return item;
  }
  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    cv_.notify_all();
  }

 private:
  std::size_t cap_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Item> items_;
  bool closed_ = false;
};

std::string model_kv_text(const TrainConfig& cfg) {
  static const char* keys[] = {"image_size", "patch_size", "dim",       "heads",
                               "depth",      "ffn_ratio",  "num_classes", "num_cls",
                               "pos_embed",  "mla",        "dc"};
  const auto kv = cfg.to_kv();
  std::string out;
  for (const char* k : keys) out += std::string(k) + "=" + kv.at(k) + "\n";
  return out;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const Dataset& train_set, const Dataset* eval,
                  const TrainOptions& opts) {
  cfg.validate();
  train_set.validate();
  if (train_set.num_classes != cfg.model.num_classes ||
      train_set.image_size != cfg.model.image_size)
    throw ConfigError("train: dataset '" + train_set.name + "' has " +
                      std::to_string(train_set.num_classes) + " classes of side " +
                      std::to_string(train_set.image_size) + ", model expects " +
                      std::to_string(cfg.model.num_classes) + " of side " +
                      std::to_string(cfg.model.image_size));
  const std::size_t n = train_set.size(), bs = cfg.batch_size;
  if (n < bs)
    throw ConfigError("train: " + std::to_string(n) + " samples cannot fill one batch of " +
                      std::to_string(bs));
  const std::size_t steps_per_epoch = n / bs;
  const std::uint64_t total_steps = steps_per_epoch * cfg.epochs;
  const std::uint64_t warmup_steps = steps_per_epoch * cfg.effective_warmup_epochs();
  const DecayRule decay{cfg.decay_all};

  TrainResult res;
  Rng shuffle_rng;
  std::size_t start_epoch = 0;
  if (opts.resume) {
    TrainConfig stored;
    res.model = model_from_checkpoint(*opts.resume, &stored);
    if (model_kv_text(stored) != model_kv_text(cfg))
      throw ConfigError("resume: checkpoint model configuration differs from the requested one");
    if (!opts.resume->optim) throw CheckpointError(CheckpointError::Kind::format,
                                                   "resume: checkpoint has no optimizer state");
    res.optim = *opts.resume->optim;
    set_rng_state(shuffle_rng, opts.resume->rng);
    start_epoch = opts.resume->epoch;
    res.steps_done = opts.resume->step;
  } else {
    res.model = initial_model(cfg, &train_set);
    res.optim.hyper = cfg.optim_hyper();
    shuffle_rng = derive_rng(cfg.seed, {kShuffleTag});
  }
  const double lr_peak = res.optim.hyper.lr_peak;

  const int total_threads =
      cfg.threads > 0 ? static_cast<int>(cfg.threads) : kernels::par::max_threads();
  const int per_worker = std::max(1, total_threads / static_cast<int>(cfg.workers));
  const std::size_t peak_bytes = estimate_activation_bytes(cfg.model, bs);
  const std::size_t end_epoch =
      opts.stop_after_epochs > 0 ? std::min(opts.stop_after_epochs, cfg.epochs) : cfg.epochs;
  const auto run_start = Clock::now();

  std::vector<std::size_t> order(n);
  for (std::size_t epoch = start_epoch; epoch < end_epoch; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    BoundedQueue<SoftBatch> queue(cfg.prefetch);
    std::exception_ptr producer_error;
    std::jthread producer([&](std::stop_token stop) {
      try {
        for (std::size_t b = 0; b < steps_per_epoch && !stop.stop_requested(); ++b) {
          Rng rng = derive_rng(cfg.seed, {epoch, b, kBatchTag});
          SoftBatch batch;
          if (cfg.augment.use_repeated_augment) {
            const std::size_t m = cfg.augment.repeated_factor, distinct = bs / m;
            batch = repeated_augment(
                train_set, std::span<const std::size_t>(order).subspan(b * distinct, distinct),
                bs, m, cfg.augment, rng);
          } else {
            batch = make_batch(train_set,
                               std::span<const std::size_t>(order).subspan(b * bs, bs),
                               cfg.augment, rng);
          }
          if (!queue.push(std::move(batch))) break;
        }
      } catch (...) {
        producer_error = std::current_exception();
      }
      queue.close();
    });

    const auto epoch_start = Clock::now();
    double loss_sum = 0.0, lr = 0.0;
    try {
      for (std::size_t b = 0; b < steps_per_epoch; ++b) {
        std::optional<SoftBatch> batch = queue.pop();
        if (!batch) break;
        Rng drop_rng = derive_rng(cfg.seed, {epoch, b, kDropTag});
        const DropPlan plan = make_drop_plan(cfg.model, bs, drop_rng);
        lr = lr_schedule(res.steps_done + 1, total_steps, warmup_steps, lr_peak, cfg.lr_min);
        StepResult<float> step = parallel_gradients(res.model, batch->images, batch->targets,
                                                    &plan, cfg.workers, per_worker);
        if (!std::isfinite(step.loss))
          throw NumericError("non-finite training loss at epoch " + std::to_string(epoch + 1) +
                             " step " + std::to_string(res.steps_done + 1) +
                             " (lr=" + fmt(lr) + ", grad_norm=" + fmt(grad_norm(step.grads)) +
                             ")");
        optimizer_step(res.model.params, step.grads, res.optim, lr, decay);
        ++res.steps_done;
        loss_sum += step.loss;
        res.step_losses.push_back(step.loss);
      }
    } catch (...) {
      producer.request_stop();
      queue.close();
      throw;
    }
    producer.join();
    if (producer_error) std::rethrow_exception(producer_error);
    const double train_seconds = ms_since(epoch_start, Clock::now()) / 1000.0;

    MetricsRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = loss_sum / static_cast<double>(steps_per_epoch);
    rec.lr = lr;
    rec.images_per_sec = static_cast<double>(steps_per_epoch * bs) / std::max(train_seconds, 1e-9);
    rec.peak_activation_bytes = peak_bytes;
    rec.workers = cfg.workers;
    rec.batch_size = bs;
    if (eval && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs))
      rec.val_acc = evaluate(res.model, *eval);
    rec.wall_seconds = ms_since(run_start, Clock::now()) / 1000.0;
    if (opts.sink) opts.sink->write(rec.to_row());
    res.records.push_back(rec);
    res.epochs_done = epoch + 1;

    res.checkpoint = make_checkpoint(cfg, res.model, res.optim, shuffle_rng, epoch + 1,
                                     res.steps_done);
    if (!opts.checkpoint_path.empty()) save_checkpoint(opts.checkpoint_path, res.checkpoint);
  }
  if (res.epochs_done == 0) {
    res.epochs_done = start_epoch;
    res.checkpoint =
        make_checkpoint(cfg, res.model, res.optim, shuffle_rng, start_epoch, res.steps_done);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Profiling

std::string StepProfile::to_row() const {
  return "batch_size=" + std::to_string(batch_size) + " steps=" + std::to_string(steps) +
         " forward_ms=" + fmt(forward_ms, "%.3f") + " backward_ms=" + fmt(backward_ms, "%.3f") +
         " optim_ms=" + fmt(optim_ms, "%.3f") + " other_ms=" + fmt(other_ms, "%.3f") +
         " total_ms=" + fmt(total_ms, "%.3f");
}

StepProfile profile_step(const TrainConfig& cfg, const Dataset& ds, std::size_t steps,
                         std::size_t warmup) {
  cfg.validate();
  if (steps < 1) throw ConfigError("profile: steps must be >= 1");
  if (ds.size() == 0) throw ValidationError("profile: empty dataset");
  Model<float> model = initial_model(cfg, &ds);
  OptimState<float> optim;
  optim.hyper = cfg.optim_hyper();
  const DecayRule decay{cfg.decay_all};
  const std::size_t bs = cfg.batch_size;
  std::vector<std::size_t> rows(bs);

  StepProfile prof;
  prof.batch_size = bs;
  for (std::size_t s = 0; s < warmup + steps; ++s) {
    const auto t0 = Clock::now();
    for (std::size_t i = 0; i < bs; ++i) rows[i] = (s * bs + i) % ds.size();
    Rng rng = derive_rng(cfg.seed, {s, kBatchTag});
    const SoftBatch batch = make_batch(ds, rows, cfg.augment, rng);
    const DropPlan plan = make_drop_plan(cfg.model, bs, rng);
    Tape<float> tape;
    const BoundParams p = bind_params(tape, model, true);
    const auto t1 = Clock::now();
    const Var logits = forward(tape, model, p, batch.images, &plan);
    const Var loss = ops::cross_entropy(tape, logits, batch.targets);
    const auto t2 = Clock::now();
    tape.backward(loss);
    ParamMap<float> grads;
    for (const auto& [path, var] : p.vars) grads.emplace(path, tape.grad_tensor(var));
    const auto t3 = Clock::now();
    optimizer_step(model.params, grads, optim, optim.hyper.lr_peak, decay);
    const auto t4 = Clock::now();
    if (s < warmup) continue;
    prof.other_ms += ms_since(t0, t1);
    prof.forward_ms += ms_since(t1, t2);
    prof.backward_ms += ms_since(t2, t3);
    prof.optim_ms += ms_since(t3, t4);
    prof.total_ms += ms_since(t0, t4);
  }
  const double k = static_cast<double>(steps);
  prof.steps = steps;
  prof.other_ms /= k;
  prof.forward_ms /= k;
  prof.backward_ms /= k;
  prof.optim_ms /= k;
  prof.total_ms /= k;
  return prof;
}

// ---------------------------------------------------------------------------
// Benchmark

std::string BenchRow::to_row() const {
  return "batch_size=" + std::to_string(batch_size) +
         " images_per_sec=" + (skipped ? std::string("NA") : fmt(images_per_sec, "%.2f")) +
         " activation_bytes=" + std::to_string(activation_bytes) +
         " status=" + (skipped ? "skipped" : "ok");
}

std::vector<BenchRow> benchmark_throughput(const ModelConfig& cfg,
                                           std::span<const std::size_t> batch_sizes,
                                           const BenchOptions& opts) {
  cfg.validate();
  if (opts.batches < 1) throw ConfigError("bench: batches must be >= 1");
  ModelConfig probe = cfg;
  probe.patch_init = PatchInit::random;
  Rng rng = derive_rng(opts.seed, {kInitTag});
  const Model<float> model = init_model<float>(probe, rng);
  const std::size_t per_sample = estimate_activation_bytes(cfg, 1);

  std::vector<BenchRow> rows;
  for (std::size_t bs : batch_sizes) {
    if (bs < 1) throw ConfigError("bench: batch sizes must be >= 1");
    BenchRow row;
    row.batch_size = bs;
    row.activation_bytes = per_sample * bs;
    if (row.activation_bytes > opts.memory_budget_bytes) {
      row.skipped = true;
      rows.push_back(row);
      continue;
    }
    Tensor<float> images({bs, 3, cfg.image_size, cfg.image_size});
    for (auto& v : images.data()) v = static_cast<float>(standard_normal(rng));
    for (std::size_t i = 0; i < opts.warmup; ++i) predict(model, images);
    const auto t0 = Clock::now();
    for (std::size_t i = 0; i < opts.batches; ++i) predict(model, images);
    const double secs = ms_since(t0, Clock::now()) / 1000.0;
    row.images_per_sec = static_cast<double>(bs * opts.batches) / std::max(secs, 1e-9);
    rows.push_back(row);
  }
  return rows;
}

std::string bench_table(std::span<const BenchRow> rows) {
  std::ostringstream out;
  out << std::setw(10) << "batch" << std::setw(16) << "images/sec" << std::setw(18)
      << "activation_bytes" << std::setw(14) << "activation_GB" << std::setw(10) << "status"
      << "\n";
  for (const auto& r : rows)
    out << std::setw(10) << r.batch_size << std::setw(16)
        << (r.skipped ? std::string("-") : fmt(r.images_per_sec, "%.2f")) << std::setw(18)
        << r.activation_bytes << std::setw(14)
        << fmt(static_cast<double>(r.activation_bytes) / 1e9, "%.3f") << std::setw(10)
        << (r.skipped ? "skipped" : "ok") << "\n";
  return out.str();
}

#define TVL_TRAINER(T)                                                                      \
  template StepResult<T> compute_gradients<T>(const Model<T>&, const Tensor<T>&,            \
                                              const Tensor<T>&, const DropPlan*);           \
  template StepResult<T> parallel_gradients<T>(const Model<T>&, const Tensor<T>&,           \
                                               const Tensor<T>&, const DropPlan*,           \
                                               std::size_t, int);                           \
  template StepResult<T> parallel_train_step<T>(Model<T>&, const Tensor<T>&,                \
                                                const Tensor<T>&, const DropPlan*,          \
                                                std::size_t, OptimState<T>&, double,        \
                                                const DecayRule&, int);                     \
  template double grad_norm<T>(const ParamMap<T>&);
TVL_TRAINER(float)
TVL_TRAINER(double)
#undef TVL_TRAINER

}  // namespace tvl
