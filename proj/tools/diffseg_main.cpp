#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "diffseg/diffseg.hpp"

namespace fs = std::filesystem;
using namespace diffseg;

namespace {

struct CommonOpts {
  std::string config_path;
  uint64_t seed = 0;
  bool seed_set = false;
  double fraction = 0.0;
  bool fraction_set = false;
  std::string out;
  bool deterministic = false;
};

ExperimentConfig load_config(const CommonOpts& opts) {
  ExperimentConfig cfg;
  if (!opts.config_path.empty()) cfg = load_experiment_config(opts.config_path);
  if (opts.seed_set) cfg.seeds = {opts.seed};
  if (opts.fraction_set) cfg.fractions = {opts.fraction};
  if (!opts.out.empty()) cfg.out_dir = opts.out;
  if (opts.deterministic) {
    cfg.deterministic = true;
    cfg.workers = 1;
  }
  cfg.validate();
  return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& opts, bool with_fraction = true) {
  cmd->add_option("--config", opts.config_path, "JSON experiment config file");
  cmd->add_option("--seed", opts.seed, "override the seed list with one seed")
      ->each([&](const std::string&) { opts.seed_set = true; });
  if (with_fraction)
    cmd->add_option("--fraction", opts.fraction,
                    "override the labeled-fraction list with one value")
        ->each([&](const std::string&) { opts.fraction_set = true; });
  cmd->add_option("--out", opts.out, "output directory (DIFFSEG_OUT_ROOT prefixes relative paths)");
  cmd->add_flag("--deterministic", opts.deterministic,
                "single-worker fully reproducible mode");
}

void print_record(const RunRecord& r) {
  if (!r.ok()) {
    std::printf("[%s f=%.4f seed=%llu] FAILED: %s\n", r.method.c_str(), r.fraction,
                static_cast<unsigned long long>(r.seed), r.error.c_str());
    return;
  }
  std::printf("[%s f=%.4f seed=%llu] student DC=%.2f JI=%.2f", r.method.c_str(),
              r.fraction, static_cast<unsigned long long>(r.seed), r.student_dc,
              r.student_ji);
  if (r.teacher_dc >= 0) std::printf("  teacher DC=%.2f JI=%.2f", r.teacher_dc, r.teacher_ji);
  std::printf("  (%.1fs)\n", r.wall_seconds);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"diffseg: teacher-student diffusion segmentation"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic shapes dataset");
  std::string synth_out = "synth_data";
  int synth_n = 200, synth_size = 64;
  uint64_t synth_seed = 77;
  synth->add_option("--out", synth_out, "target folder (images/ + masks/)");
  synth->add_option("--n", synth_n, "number of images");
  synth->add_option("--size", synth_size, "square image size");
  synth->add_option("--seed", synth_seed, "generator seed");

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "unsupervised teacher pretraining");
  CommonOpts pre_opts;
  add_common(pre, pre_opts, /*with_fraction=*/false);

  // cotrain
  auto* cot = app.add_subcommand("cotrain", "two-phase semi-supervised pipeline for one cell");
  CommonOpts cot_opts;
  std::string teacher_ckpt;
  add_common(cot, cot_opts);
  cot->add_option("--teacher-ckpt", teacher_ckpt,
                  "start from this teacher checkpoint instead of pretraining");

  // baseline
  auto* base = app.add_subcommand("baseline", "supervised-only baseline for one cell");
  CommonOpts base_opts;
  add_common(base, base_opts);

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "evaluate a checkpoint on the test split");
  CommonOpts eval_opts;
  std::string eval_ckpt, eval_method = "evaluate";
  add_common(eval, eval_opts);
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint directory")->required();
  eval->add_option("--method", eval_method, "method name recorded in the CSV row");

  // report
  auto* rep = app.add_subcommand("report", "aggregate records into tables and plots");
  std::string rep_records, rep_out = "report";
  rep->add_option("--records", rep_records, "directory of RunRecord JSON files")->required();
  rep->add_option("--out", rep_out, "report output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      auto samples = synth_shapes(synth_n, synth_size, synth_seed);
      export_folder_dataset(resolve_out_dir(synth_out), samples);
      std::printf("wrote %d images to %s\n", synth_n,
                  resolve_out_dir(synth_out).string().c_str());
      return 0;
    }

    if (*pre) {
      auto cfg = load_config(pre_opts);
      auto data = load_dataset(cfg.data);
      auto schedule = build_linear_schedule(cfg.schedule.steps, cfg.schedule.beta_start,
                                            cfg.schedule.beta_end);
      uint64_t seed = cfg.seeds.front();
      Rng init(Rng::mix(seed, 0x7eacull));
      auto teacher = init_parameters<float>(cfg.model, init);
      PretrainConfig pc = cfg.pretrain;
      pc.seed = seed;
      auto out_root = resolve_out_dir(cfg.out_dir);
      pc.csv_log = (out_root / "pretrain.csv").string();
      pc.checkpoint_dir = (out_root / "teacher").string();
      auto hist = pretrain(teacher, make_image_views(data.train), schedule, pc);
      std::printf("pretrained %d epochs; first loss %.4f, last loss %.4f\n",
                  static_cast<int>(hist.epoch_loss.size()), hist.epoch_loss.front(),
                  hist.epoch_loss.back());
      std::printf("teacher checkpoint: %s\n",
                  (out_root / "teacher" / "final").string().c_str());
      return 0;
    }

    if (*cot) {
      auto cfg = load_config(cot_opts);
      auto data = load_dataset(cfg.data);
      auto rec = run_cotrain_cell(cfg, data, cfg.fractions.front(), cfg.seeds.front(),
                                  teacher_ckpt);
      save_record(rec, resolve_out_dir(cfg.out_dir) / "records" /
                           (cell_name(rec.method, rec.fraction, rec.seed) + ".json"));
      print_record(rec);
      return rec.ok() ? 0 : 1;
    }

    if (*base) {
      auto cfg = load_config(base_opts);
      auto data = load_dataset(cfg.data);
      auto rec = run_supervised_cell(cfg, data, cfg.fractions.front(), cfg.seeds.front());
      save_record(rec, resolve_out_dir(cfg.out_dir) / "records" /
                           (cell_name(rec.method, rec.fraction, rec.seed) + ".json"));
      print_record(rec);
      return rec.ok() ? 0 : 1;
    }

    if (*eval) {
      auto cfg = load_config(eval_opts);
      auto data = load_dataset(cfg.data);
      auto schedule = build_linear_schedule(cfg.schedule.steps, cfg.schedule.beta_start,
                                            cfg.schedule.beta_end);
      auto loaded = load_checkpoint<float>(eval_ckpt);
      uint64_t seed = cfg.seeds.front();
      auto res = evaluate_model(loaded.model, data.test, schedule, cfg.eval_ensemble,
                                Rng::mix(seed, 0xe0a1ull));
      std::printf("DC=%.2f JI=%.2f over %zu test samples\n", res.dice_mean,
                  res.jaccard_mean, res.dice_per_sample.size());
      auto out_root = resolve_out_dir(eval_opts.out.empty() ? cfg.out_dir : eval_opts.out);
      CsvLogger csv((out_root / "metrics.csv").string(),
                    "dataset,method,labeled_fraction,seed,DC,JI");
      csv.row({data.name, eval_method, csv_num(cfg.fractions.front(), 4),
               std::to_string(seed), csv_num(res.dice_mean, 4),
               csv_num(res.jaccard_mean, 4)});
      return 0;
    }

    if (*rep) {
      auto records = load_records(rep_records);
      require_data(!records.empty(), "report: no records found in ", rep_records);
      write_report(records, resolve_out_dir(rep_out));
      std::printf("report written to %s\n", resolve_out_dir(rep_out).string().c_str());
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
