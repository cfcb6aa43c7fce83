#pragma once

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffseg/checkpoint.hpp"
#include "diffseg/cotrain.hpp"
#include "diffseg/csv.hpp"
#include "diffseg/data.hpp"
#include "diffseg/image_io.hpp"
#include "diffseg/inference.hpp"
#include "diffseg/metrics.hpp"
#include "diffseg/plot.hpp"
#include "diffseg/pretrain.hpp"

namespace diffseg {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ScheduleConfig {
  int steps = 1000;
  double beta_start = 0.0001;
  double beta_end = 0.02;
};

struct DatasetConfig {
  std::string type = "synth";  // "synth" or "folder"
  int synth_train = 200;
  int synth_test = 50;
  int synth_size = 64;
  uint64_t synth_seed = 77;
  std::string root;  // folder type: expects <root>/train and <root>/test
  int num_classes = 2;
};

struct ExperimentConfig {
  DatasetConfig data;
  DenoiserConfig model;
  ScheduleConfig schedule;
  PretrainConfig pretrain;
  CotrainConfig cotrain;
  std::vector<double> fractions = {0.01, 0.02, 0.05, 0.1, 0.2};
  std::vector<uint64_t> seeds = {1, 2, 3};
  int eval_ensemble = 4;
  bool pretrain_teacher = true;
  bool deterministic = false;
  int workers = 1;
  std::string out_dir = "runs";

  void validate() const {
    require(data.type == "synth" || data.type == "folder",
            "config: dataset type must be synth or folder");
    if (data.type == "synth") {
      require(data.synth_train >= 2 && data.synth_test >= 1, "config: synth sizes");
      require(data.synth_size >= 8, "config: synth size too small");
    } else {
      require(!data.root.empty(), "config: folder dataset needs a root");
    }
    require(data.num_classes >= 2, "config: num_classes must be >= 2");
    model.validate();
    require(schedule.steps >= 1, "config: schedule steps");
    pretrain.validate();
    cotrain.validate();
    require(!fractions.empty() && !seeds.empty(), "config: fractions/seeds empty");
    for (double f : fractions) require(f > 0.0 && f <= 1.0, "config: fraction range");
    require(eval_ensemble >= 1, "config: eval_ensemble");
    require(workers >= 1, "config: workers");
  }
};

inline void to_json(nlohmann::json& j, const ScheduleConfig& c) {
  j = {{"steps", c.steps}, {"beta_start", c.beta_start}, {"beta_end", c.beta_end}};
}
inline void from_json(const nlohmann::json& j, ScheduleConfig& c) {
  c.steps = j.value("steps", c.steps);
  c.beta_start = j.value("beta_start", c.beta_start);
  c.beta_end = j.value("beta_end", c.beta_end);
}

inline void to_json(nlohmann::json& j, const DatasetConfig& c) {
  j = {{"type", c.type},           {"synth_train", c.synth_train},
       {"synth_test", c.synth_test}, {"synth_size", c.synth_size},
       {"synth_seed", c.synth_seed}, {"root", c.root},
       {"num_classes", c.num_classes}};
}
inline void from_json(const nlohmann::json& j, DatasetConfig& c) {
  c.type = j.value("type", c.type);
  c.synth_train = j.value("synth_train", c.synth_train);
  c.synth_test = j.value("synth_test", c.synth_test);
  c.synth_size = j.value("synth_size", c.synth_size);
  c.synth_seed = j.value("synth_seed", c.synth_seed);
  c.root = j.value("root", c.root);
  c.num_classes = j.value("num_classes", c.num_classes);
}

inline void to_json(nlohmann::json& j, const AugmentConfig& c) {
  j = {{"p_hflip", c.p_hflip}, {"p_vflip", c.p_vflip},
       {"max_rotate_deg", c.max_rotate_deg}};
}
inline void from_json(const nlohmann::json& j, AugmentConfig& c) {
  c.p_hflip = j.value("p_hflip", c.p_hflip);
  c.p_vflip = j.value("p_vflip", c.p_vflip);
  c.max_rotate_deg = j.value("max_rotate_deg", c.max_rotate_deg);
}

inline void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"lr_decay_every", c.lr_decay_every},
       {"lr_decay_factor", c.lr_decay_factor},
       {"weight_decay", c.weight_decay},
       {"use_augment", c.use_augment},
       {"augment", c.augment},
       {"checkpoint_every", c.checkpoint_every}};
}
inline void from_json(const nlohmann::json& j, PretrainConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.lr_decay_every = j.value("lr_decay_every", c.lr_decay_every);
  c.lr_decay_factor = j.value("lr_decay_factor", c.lr_decay_factor);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.use_augment = j.value("use_augment", c.use_augment);
  if (j.contains("augment")) c.augment = j.at("augment").get<AugmentConfig>();
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
}

inline void to_json(nlohmann::json& j, const CotrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"lr_decay_every", c.lr_decay_every},
       {"lr_decay_factor", c.lr_decay_factor},
       {"weight_decay", c.weight_decay},
       {"lambda_max", c.lambda_max},
       {"rounds", c.rounds},
       {"use_augment", c.use_augment},
       {"augment", c.augment},
       {"val_ensemble", c.val_ensemble}};
}
inline void from_json(const nlohmann::json& j, CotrainConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.lr_decay_every = j.value("lr_decay_every", c.lr_decay_every);
  c.lr_decay_factor = j.value("lr_decay_factor", c.lr_decay_factor);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.lambda_max = j.value("lambda_max", c.lambda_max);
  c.rounds = j.value("rounds", c.rounds);
  c.use_augment = j.value("use_augment", c.use_augment);
  if (j.contains("augment")) c.augment = j.at("augment").get<AugmentConfig>();
  c.val_ensemble = j.value("val_ensemble", c.val_ensemble);
}

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"data", c.data},
       {"model", denoiser_config_to_json(c.model)},
       {"schedule", c.schedule},
       {"pretrain", c.pretrain},
       {"cotrain", c.cotrain},
       {"fractions", c.fractions},
       {"seeds", c.seeds},
       {"eval_ensemble", c.eval_ensemble},
       {"pretrain_teacher", c.pretrain_teacher},
       {"deterministic", c.deterministic},
       {"workers", c.workers},
       {"out_dir", c.out_dir}};
}
inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  if (j.contains("data")) c.data = j.at("data").get<DatasetConfig>();
  if (j.contains("model")) c.model = denoiser_config_from_json(j.at("model"));
  if (j.contains("schedule")) c.schedule = j.at("schedule").get<ScheduleConfig>();
  if (j.contains("pretrain")) c.pretrain = j.at("pretrain").get<PretrainConfig>();
  if (j.contains("cotrain")) c.cotrain = j.at("cotrain").get<CotrainConfig>();
  if (j.contains("fractions")) c.fractions = j.at("fractions").get<std::vector<double>>();
  if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<uint64_t>>();
  c.eval_ensemble = j.value("eval_ensemble", c.eval_ensemble);
  c.pretrain_teacher = j.value("pretrain_teacher", c.pretrain_teacher);
  c.deterministic = j.value("deterministic", c.deterministic);
  c.workers = j.value("workers", c.workers);
  c.out_dir = j.value("out_dir", c.out_dir);
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  require_data(is.good(), "config: cannot open ", path.string());
  nlohmann::json j = nlohmann::json::parse(is);
  ExperimentConfig cfg = j.get<ExperimentConfig>();
  cfg.validate();
  return cfg;
}

// FNV-1a over the canonical JSON dump (object keys are sorted by the JSON
// library, so the hash changes iff a field value changes).
inline std::string config_hash(const ExperimentConfig& cfg) {
  nlohmann::json j = cfg;
  std::string dump = j.dump();
  uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : dump) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Output root override for relative paths.
inline std::filesystem::path resolve_out_dir(const std::string& out_dir) {
  std::filesystem::path p(out_dir);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("DIFFSEG_OUT_ROOT"))
    return std::filesystem::path(root) / p;
  return p;
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

struct RunRecord {
  std::string method;  // "cotrain" or "supervised"
  double fraction = 0.0;
  uint64_t seed = 0;
  std::string cfg_hash;
  std::string dataset;
  std::vector<double> pretrain_loss;
  std::vector<double> cotrain_total;
  std::vector<double> cotrain_lambda;
  double student_dc = -1, student_ji = -1;
  double teacher_dc = -1, teacher_ji = -1;
  double wall_seconds = 0;
  std::string teacher_checkpoint, student_checkpoint;
  std::string error;

  bool ok() const { return error.empty(); }
};

inline void to_json(nlohmann::json& j, const RunRecord& r) {
  j = {{"method", r.method},
       {"fraction", r.fraction},
       {"seed", r.seed},
       {"config_hash", r.cfg_hash},
       {"dataset", r.dataset},
       {"pretrain_loss", r.pretrain_loss},
       {"cotrain_total", r.cotrain_total},
       {"cotrain_lambda", r.cotrain_lambda},
       {"student_dc", r.student_dc},
       {"student_ji", r.student_ji},
       {"teacher_dc", r.teacher_dc},
       {"teacher_ji", r.teacher_ji},
       {"wall_seconds", r.wall_seconds},
       {"teacher_checkpoint", r.teacher_checkpoint},
       {"student_checkpoint", r.student_checkpoint},
       {"error", r.error}};
}
inline void from_json(const nlohmann::json& j, RunRecord& r) {
  r.method = j.value("method", r.method);
  r.fraction = j.value("fraction", r.fraction);
  r.seed = j.value("seed", r.seed);
  r.cfg_hash = j.value("config_hash", r.cfg_hash);
  r.dataset = j.value("dataset", r.dataset);
  r.pretrain_loss = j.value("pretrain_loss", r.pretrain_loss);
  r.cotrain_total = j.value("cotrain_total", r.cotrain_total);
  r.cotrain_lambda = j.value("cotrain_lambda", r.cotrain_lambda);
  r.student_dc = j.value("student_dc", r.student_dc);
  r.student_ji = j.value("student_ji", r.student_ji);
  r.teacher_dc = j.value("teacher_dc", r.teacher_dc);
  r.teacher_ji = j.value("teacher_ji", r.teacher_ji);
  r.wall_seconds = j.value("wall_seconds", r.wall_seconds);
  r.teacher_checkpoint = j.value("teacher_checkpoint", r.teacher_checkpoint);
  r.student_checkpoint = j.value("student_checkpoint", r.student_checkpoint);
  r.error = j.value("error", r.error);
}

inline void save_record(const RunRecord& r, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  require_data(os.good(), "record: cannot write ", path.string());
  nlohmann::json j = r;
  os << j.dump(2) << "\n";
}

inline std::vector<RunRecord> load_records(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  if (std::filesystem::is_directory(dir))
    for (const auto& e : std::filesystem::directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ".json")
        files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<RunRecord> out;
  for (const auto& f : files) {
    std::ifstream is(f);
    out.push_back(nlohmann::json::parse(is).get<RunRecord>());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset loading and evaluation
// ---------------------------------------------------------------------------

struct DatasetPair {
  std::vector<SegmentationSample> train;
  std::vector<SegmentationSample> test;
  std::string name;
};

inline DatasetPair load_dataset(const DatasetConfig& cfg) {
  DatasetPair out;
  if (cfg.type == "synth") {
    out.train = synth_shapes(cfg.synth_train, cfg.synth_size, cfg.synth_seed);
    out.test = synth_shapes(cfg.synth_test, cfg.synth_size, cfg.synth_seed + 1);
    // ids carry the generator seed; make split membership explicit anyway
    for (auto& s : out.train) s.id = "train-" + s.id;
    for (auto& s : out.test) s.id = "test-" + s.id;
    out.name = "synth" + std::to_string(cfg.synth_size);
  } else {
    out.train = load_folder_dataset(std::filesystem::path(cfg.root) / "train",
                                    cfg.num_classes);
    out.test = load_folder_dataset(std::filesystem::path(cfg.root) / "test",
                                   cfg.num_classes);
    for (auto& s : out.train) s.id = "train-" + s.id;
    for (auto& s : out.test) s.id = "test-" + s.id;
    out.name = std::filesystem::path(cfg.root).filename().string();
  }
  std::set<std::string> train_ids, test_ids;
  for (const auto& s : out.train) train_ids.insert(s.id);
  for (const auto& s : out.test) {
    require_data(!train_ids.count(s.id), "dataset: id ", s.id, " in both splits");
    test_ids.insert(s.id);
  }
  return out;
}

// Mean foreground-class dice/jaccard of generated masks over a labeled set.
template <typename T>
EvalResult evaluate_model(DualPathwayDenoiser<T>& model,
                          const std::vector<SegmentationSample>& test,
                          const NoiseSchedule& s, int ensemble, uint64_t eval_seed) {
  EvalResult res;
  int num_classes = model.config().num_classes;
  for (const auto& smp : test) {
    if (!smp.label) continue;
    Rng rng(Rng::mix(eval_seed, std::hash<std::string>{}(smp.id)));
    auto img = smp.image.template cast<T>();
    auto pred = generate_mask(model, img, s, ensemble, rng);
    double dc = 0, ji = 0;
    for (int cls = 1; cls < num_classes; ++cls) {
      dc += dice(pred, *smp.label, cls);
      ji += jaccard(pred, *smp.label, cls);
    }
    res.dice_per_sample.push_back(dc / (num_classes - 1));
    res.jaccard_per_sample.push_back(ji / (num_classes - 1));
  }
  require_data(!res.dice_per_sample.empty(), "evaluate: no labeled test samples");
  res.dice_mean = mean(res.dice_per_sample);
  res.jaccard_mean = mean(res.jaccard_per_sample);
  return res;
}

// ---------------------------------------------------------------------------
// Supervised baseline trainer
// ---------------------------------------------------------------------------

// Single student-architecture model trained with the student's cross-entropy
// term only, on the labeled subset.
template <typename T>
TrainingHistory train_supervised(DualPathwayDenoiser<T>& model,
                                 const std::vector<SegmentationSample>& labeled,
                                 const CotrainConfig& cfg, const NoiseSchedule& s) {
  cfg.validate();
  require(!labeled.empty(), "supervised: labeled set must not be empty");
  Rng rng(Rng::mix(cfg.seed, 0x5afeull));
  AdamOptimizer<T> opt(cfg.learning_rate, 0.9, 0.99, cfg.weight_decay);
  int k = model.config().num_classes;

  TrainingHistory history;
  std::vector<size_t> order(labeled.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    opt.set_learning_rate(
        decayed_lr(cfg.learning_rate, epoch, cfg.lr_decay_every, cfg.lr_decay_factor));
    shuffle_indices(order, rng);
    double loss_sum = 0;
    int64_t count = 0;
    for (size_t pos = 0; pos < order.size(); pos += static_cast<size_t>(cfg.batch_size)) {
      size_t bn = std::min(static_cast<size_t>(cfg.batch_size), order.size() - pos);
      std::vector<SegmentationSample> staged;
      for (size_t i = 0; i < bn; ++i) {
        const auto& smp = labeled[order[pos + i]];
        staged.push_back(cfg.use_augment ? augment(smp, cfg.augment, rng) : smp);
      }
      std::vector<const Tensor<float>*> imgs;
      for (const auto& smp : staged) imgs.push_back(&smp.image);
      auto batch = stack_images<T>(imgs);
      int64_t h = batch.dim(2), w = batch.dim(3);
      Tensor<int32_t> labels({static_cast<int64_t>(bn), h, w});
      for (size_t i = 0; i < bn; ++i)
        std::memcpy(labels.data() + static_cast<int64_t>(i) * h * w,
                    staged[i].label->data(), sizeof(int32_t) * static_cast<size_t>(h * w));

      auto ts = sample_timesteps(rng, s.steps, bn);
      auto noise = pure_noise_batch<T>({static_cast<int64_t>(bn), k, h, w}, ts, s, rng);
      auto logits = model.mask_pathway(Value<T>::constant(batch),
                                       Value<T>::constant(noise), ts);
      auto loss = mean_of(ce_per_sample(logits, labels));
      double lv = loss.scalar();
      if (!std::isfinite(lv))
        throw TrainingError("supervised: non-finite loss at epoch " +
                            std::to_string(epoch));
      model.params().zero_grad();
      backward(loss);
      opt.step(model.params());
      loss_sum += lv * static_cast<double>(bn);
      count += static_cast<int64_t>(bn);
    }
    history.epoch_loss.push_back(loss_sum / static_cast<double>(count));
    history.epoch_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  return history;
}

// ---------------------------------------------------------------------------
// Sweep cells
// ---------------------------------------------------------------------------

inline std::string cell_name(const std::string& method, double fraction, uint64_t seed) {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "%s_f%.4f_s%llu", method.c_str(), fraction,
                static_cast<unsigned long long>(seed));
  return buf;
}

// One (fraction, seed) cell of the semi-supervised pipeline:
// split -> pretrain teacher on all training images (unlabeled view) ->
// co-train the pair -> evaluate on the held-out test split. A non-empty
// teacher_ckpt path replaces the pretraining phase with loaded weights.
inline RunRecord run_cotrain_cell(const ExperimentConfig& cfg, const DatasetPair& data,
                                  double fraction, uint64_t seed,
                                  const std::string& teacher_ckpt = {}) {
  auto t0 = std::chrono::steady_clock::now();
  RunRecord rec;
  rec.method = "cotrain";
  rec.fraction = fraction;
  rec.seed = seed;
  rec.cfg_hash = config_hash(cfg);
  rec.dataset = data.name;
  try {
    auto out_root = resolve_out_dir(cfg.out_dir);
    auto cell_dir = out_root / "cells" / cell_name("cotrain", fraction, seed);
    std::filesystem::create_directories(cell_dir);

    auto schedule = build_linear_schedule(cfg.schedule.steps, cfg.schedule.beta_start,
                                          cfg.schedule.beta_end);
    auto split = split_label_scarcity(data.train, fraction, seed);

    Rng teacher_init(Rng::mix(seed, 0x7eacull));
    Rng student_init(Rng::mix(seed, 0x57edull));
    auto teacher = init_parameters<float>(cfg.model, teacher_init);
    auto student = init_parameters<float>(cfg.model, student_init);

    if (!teacher_ckpt.empty()) {
      auto loaded = load_checkpoint<float>(teacher_ckpt);
      require(loaded.model.config() == cfg.model,
              "cotrain cell: teacher checkpoint config differs from experiment config");
      teacher = std::move(loaded.model);
    } else if (cfg.pretrain_teacher) {
      PretrainConfig pc = cfg.pretrain;
      pc.seed = seed;
      pc.csv_log = (cell_dir / "pretrain.csv").string();
      auto hist = pretrain(teacher, make_image_views(data.train), schedule, pc);
      rec.pretrain_loss = hist.epoch_loss;
    }

    CotrainConfig cc = cfg.cotrain;
    cc.seed = seed;
    cc.csv_log = (cell_dir / "cotrain.csv").string();
    cc.checkpoint_dir_teacher = (cell_dir / "teacher").string();
    cc.checkpoint_dir_student = (cell_dir / "student").string();
    auto hist = cotrain(teacher, student, split.labeled, split.unlabeled, cc, schedule,
                        &data.test);
    for (const auto& e : hist.epochs) {
      rec.cotrain_total.push_back(e.total);
      rec.cotrain_lambda.push_back(e.lambda);
    }
    rec.teacher_checkpoint = (cell_dir / "teacher" / "final").string();
    rec.student_checkpoint = (cell_dir / "student" / "final").string();

    auto se = evaluate_model(student, data.test, schedule, cfg.eval_ensemble,
                             Rng::mix(seed, 0xe0a1ull));
    auto te = evaluate_model(teacher, data.test, schedule, cfg.eval_ensemble,
                             Rng::mix(seed, 0xe0a2ull));
    rec.student_dc = se.dice_mean;
    rec.student_ji = se.jaccard_mean;
    rec.teacher_dc = te.dice_mean;
    rec.teacher_ji = te.jaccard_mean;
  } catch (const std::exception& e) {
    rec.error = e.what();
  }
  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

inline RunRecord run_supervised_cell(const ExperimentConfig& cfg, const DatasetPair& data,
                                     double fraction, uint64_t seed) {
  auto t0 = std::chrono::steady_clock::now();
  RunRecord rec;
  rec.method = "supervised";
  rec.fraction = fraction;
  rec.seed = seed;
  rec.cfg_hash = config_hash(cfg);
  rec.dataset = data.name;
  try {
    auto out_root = resolve_out_dir(cfg.out_dir);
    auto cell_dir = out_root / "cells" / cell_name("supervised", fraction, seed);
    std::filesystem::create_directories(cell_dir);

    auto schedule = build_linear_schedule(cfg.schedule.steps, cfg.schedule.beta_start,
                                          cfg.schedule.beta_end);
    auto split = split_label_scarcity(data.train, fraction, seed);

    Rng init(Rng::mix(seed, 0x57edull));
    auto model = init_parameters<float>(cfg.model, init);
    CotrainConfig cc = cfg.cotrain;
    cc.seed = seed;
    auto hist = train_supervised(model, split.labeled, cc, schedule);
    rec.cotrain_total = hist.epoch_loss;

    save_checkpoint(model, cell_dir / "model" / "final", 0, "");
    rec.student_checkpoint = (cell_dir / "model" / "final").string();

    auto se = evaluate_model(model, data.test, schedule, cfg.eval_ensemble,
                             Rng::mix(seed, 0xe0a1ull));
    rec.student_dc = se.dice_mean;
    rec.student_ji = se.jaccard_mean;
  } catch (const std::exception& e) {
    rec.error = e.what();
  }
  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

namespace detail {

// Runs cells over a small thread pool; each cell is independent and
// deterministic, records land in disjoint files.
template <typename F>
void run_cells(int workers, int count, F&& run_one) {
  if (workers <= 1) {
    for (int i = 0; i < count; ++i) run_one(i);
    return;
  }
  std::mutex mu;
  int next = 0;
  auto worker = [&] {
    for (;;) {
      int mine;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= count) return;
        mine = next++;
      }
      run_one(mine);
    }
  };
  std::vector<std::thread> threads;
  int n = std::min(workers, count);
  threads.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
}

}  // namespace detail

// Full sweep: every (fraction, seed) cell of the two-phase pipeline. Cell
// failures are recorded and do not stop the sweep.
inline std::vector<RunRecord> run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  auto data = load_dataset(cfg.data);
  struct Cell {
    double fraction;
    uint64_t seed;
  };
  std::vector<Cell> cells;
  for (double f : cfg.fractions)
    for (uint64_t s : cfg.seeds) cells.push_back({f, s});
  std::vector<RunRecord> records(cells.size());
  detail::run_cells(cfg.workers, static_cast<int>(cells.size()), [&](int i) {
    records[static_cast<size_t>(i)] =
        run_cotrain_cell(cfg, data, cells[static_cast<size_t>(i)].fraction,
                         cells[static_cast<size_t>(i)].seed);
    const auto& r = records[static_cast<size_t>(i)];
    save_record(r, resolve_out_dir(cfg.out_dir) / "records" /
                       (cell_name(r.method, r.fraction, r.seed) + ".json"));
  });
  return records;
}

inline std::vector<RunRecord> run_supervised_baseline(const ExperimentConfig& cfg) {
  cfg.validate();
  auto data = load_dataset(cfg.data);
  struct Cell {
    double fraction;
    uint64_t seed;
  };
  std::vector<Cell> cells;
  for (double f : cfg.fractions)
    for (uint64_t s : cfg.seeds) cells.push_back({f, s});
  std::vector<RunRecord> records(cells.size());
  detail::run_cells(cfg.workers, static_cast<int>(cells.size()), [&](int i) {
    records[static_cast<size_t>(i)] =
        run_supervised_cell(cfg, data, cells[static_cast<size_t>(i)].fraction,
                            cells[static_cast<size_t>(i)].seed);
    const auto& r = records[static_cast<size_t>(i)];
    save_record(r, resolve_out_dir(cfg.out_dir) / "records" /
                       (cell_name(r.method, r.fraction, r.seed) + ".json"));
  });
  return records;
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

// metrics.csv, table.md (mean with 90% CI per fraction x method cell) and a
// DC-vs-fraction plot. Byte-stable for identical inputs.
inline void write_report(const std::vector<RunRecord>& records_in,
                         const std::filesystem::path& out_dir) {
  require(!records_in.empty(), "report: empty record set");
  auto records = records_in;
  std::sort(records.begin(), records.end(), [](const RunRecord& a, const RunRecord& b) {
    if (a.fraction != b.fraction) return a.fraction < b.fraction;
    if (a.method != b.method) return a.method < b.method;
    return a.seed < b.seed;
  });
  std::filesystem::create_directories(out_dir);

  {
    std::ofstream csv(out_dir / "metrics.csv");
    csv << "dataset,method,labeled_fraction,seed,DC,JI\n";
    for (const auto& r : records) {
      if (!r.ok()) continue;
      csv << r.dataset << ',' << r.method << ',' << csv_num(r.fraction, 4) << ','
          << r.seed << ',' << csv_num(r.student_dc, 4) << ',' << csv_num(r.student_ji, 4)
          << "\n";
    }
  }

  struct CellStats {
    std::vector<double> dc, ji;
  };
  std::map<std::pair<double, std::string>, CellStats> cells;
  for (const auto& r : records)
    if (r.ok()) {
      auto& c = cells[{r.fraction, r.method}];
      c.dc.push_back(r.student_dc);
      c.ji.push_back(r.student_ji);
    }

  {
    std::ofstream md(out_dir / "table.md");
    md << "| labeled % | method | DC (%) | JI (%) | runs |\n";
    md << "|---|---|---|---|---|\n";
    for (const auto& [key, c] : cells) {
      auto fmt = [](const std::vector<double>& v) {
        if (v.size() == 1) return csv_num(v[0], 2);
        auto [m, hw] = mean_ci(v, 0.9);
        return csv_num(m, 2) + " ± " + csv_num(hw, 2);
      };
      md << "| " << csv_num(key.first * 100.0, 1) << " | " << key.second << " | "
         << fmt(c.dc) << " | " << fmt(c.ji) << " | " << c.dc.size() << " |\n";
    }
  }

  std::map<std::string, PlotSeries> series;
  for (const auto& [key, c] : cells) {
    auto& s = series[key.second];
    s.name = key.second;
    s.x.push_back(key.first);
    if (c.dc.size() > 1) {
      auto [m, hw] = mean_ci(c.dc, 0.9);
      s.y.push_back(m);
      s.err.push_back(hw);
    } else {
      s.y.push_back(c.dc[0]);
      s.err.push_back(0.0);
    }
  }
  std::vector<PlotSeries> plot_series;
  for (auto& [name, s] : series) plot_series.push_back(s);
  render_line_plot(out_dir / "plots" / "dc_vs_fraction.png", "DC vs labeled fraction",
                   "labeled fraction", "DC (%)", plot_series);
}

}  // namespace diffseg
