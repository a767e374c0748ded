// Command-line front end: synth, train, eval, pseudolabel, sweep, plot, defaults.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "vlseg/config.hpp"
#include "vlseg/error.hpp"
#include "vlseg/guidance.hpp"
#include "vlseg/image_io.hpp"
#include "vlseg/metrics.hpp"
#include "vlseg/results.hpp"
#include "vlseg/safetensors.hpp"
#include "vlseg/sweep.hpp"
#include "vlseg/synthetic.hpp"
#include "vlseg/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace vlseg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

struct TrainArgs {
  std::string config;
  std::string output;
  std::string resume;
  std::string data_root;
  int64_t max_steps = -1;
  int64_t epochs = -1;
  int64_t seed = -1;
};

TrainConfig load_with_overrides(const TrainArgs& a) {
  auto cfg = load_train_config(a.config);
  if (!a.output.empty()) cfg.output_dir = a.output;
  if (!a.resume.empty()) cfg.resume = a.resume;
  if (!a.data_root.empty()) cfg.data.root = a.data_root;
  if (a.max_steps >= 0) cfg.max_steps = a.max_steps;
  if (a.epochs >= 0) cfg.epochs = a.epochs;
  if (a.seed >= 0) cfg.seed = static_cast<std::uint64_t>(a.seed);
  cfg.validate();
  return cfg;
}

int run_train(const TrainArgs& a) {
  auto cfg = load_with_overrides(a);
  auto result = fit(cfg);
  json summary = {{"steps", result.steps},
                  {"last_checkpoint", result.last_checkpoint.string()},
                  {"best_checkpoint", result.best_checkpoint.string()}};
  if (result.final_report) summary["final_miou"] = result.final_report->miou;
  std::cout << summary.dump() << '\n';
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string split;
  std::string root;
  int64_t window = 0;
  int64_t stride = 0;
  std::string export_dir;
  std::string out;
};

int run_eval(const EvalArgs& a) {
  auto ckpt = load_checkpoint(a.checkpoint);
  const fs::path root = a.root.empty() ? ckpt.config.data.root : fs::path(a.root);
  const int64_t window = a.window > 0 ? a.window : ckpt.config.eval_window();
  const int64_t stride = a.stride > 0 ? a.stride : (a.window > 0 ? std::max<int64_t>(1, window / 2) : ckpt.config.eval_stride());
  const auto ids = read_id_list(a.split);
  const auto num_classes = static_cast<int64_t>(ckpt.info.class_names.size());
  ConfusionMatrix cm(num_classes);
  const auto palette = voc_palette();
  for (const auto& id : ids) {
    auto sample = load_sample(root, id, true);
    validate_sample(sample, num_classes);
    auto probs = sliding_window_infer(sample.image, window, stride, ckpt.model, ckpt.text_embeds);
    cm.accumulate(probs.argmax(0), *sample.mask);
    if (!a.export_dir.empty()) export_mask(probs, palette, fs::path(a.export_dir) / (id + ".png"));
  }
  MetricsRecord rec;
  rec.epoch = ckpt.info.epoch;
  rec.step = ckpt.info.step;
  rec.split = fs::path(a.split).stem().string();
  rec.report = iou_report(cm);
  rec.class_names = ckpt.info.class_names;
  auto j = rec.to_json();
  j["confusion"] = cm.to_json();
  if (!a.out.empty()) {
    std::ofstream out(a.out, std::ios::app);
    out << j.dump() << '\n';
  }
  std::cout << j.dump() << '\n';
  return kExitOk;
}

struct PseudolabelArgs {
  std::string config;
  std::string defs;
  std::string out;
  std::string split;
  std::string data_root;
};

int run_pseudolabel(const PseudolabelArgs& a) {
  auto cfg = load_train_config(a.config);
  cfg.data.class_definitions = a.defs;
  if (!a.data_root.empty()) cfg.data.root = a.data_root;
  auto inputs = prepare_model_inputs(cfg);
  const fs::path list = a.split.empty() ? cfg.data.root / "unlabeled.txt" : fs::path(a.split);
  std::vector<SegSample> samples;
  for (const auto& id : read_id_list(list)) samples.push_back(load_sample(cfg.data.root, id, false));
  if (cfg.guidance_cache.empty()) cfg.guidance_cache = fs::path(a.out) / "cache";
  auto labels = precompute_guidance(cfg, inputs, samples);
  const auto palette = voc_palette();
  json summary = {{"zeta", cfg.loss.zeta}, {"images", json::array()}};
  for (const auto& sample : samples) {
    const auto& label = labels.at(sample.id);
    export_mask(label.probs, palette, fs::path(a.out) / (sample.id + ".png"));
    summary["images"].push_back({{"id", sample.id}, {"confident_fraction", label.confident_fraction(cfg.loss.zeta)}});
  }
  atomic_write(fs::path(a.out) / "summary.json", summary.dump(2) + "\n");
  std::cout << "wrote " << samples.size() << " guidance labels to " << a.out << '\n';
  return kExitOk;
}

struct SweepArgs {
  TrainArgs train;
  std::string param;
  std::vector<double> values;
};

int run_sweep_cmd(const SweepArgs& a) {
  auto cfg = load_with_overrides(a.train);
  auto result = run_sweep(cfg, a.param, a.values);
  for (const auto& c : result.cells) {
    std::cout << a.param << '=' << c.value << " miou=" << c.miou << " guide_pixels=" << c.guide_pixels << '\n';
  }
  if (result.zeta_monotone)
    std::cout << "zeta mask cardinality non-increasing: " << (*result.zeta_monotone ? "yes" : "no") << '\n';
  return result.zeta_monotone.value_or(true) ? kExitOk : kExitFailure;
}

struct PlotArgs {
  std::string tables;
  std::string out;
  std::string dataset;
  std::string title;
};

int run_plot(const PlotArgs& a) {
  auto table = read_results_table(a.tables);
  if (!a.dataset.empty()) table = table.filter_dataset(a.dataset);
  auto outputs = plot_label_curves(table, a.out, a.title);
  std::cout << "wrote " << outputs.svg.string() << " and " << outputs.data.string() << '\n';
  return kExitOk;
}

struct SynthArgs {
  std::string out;
  SyntheticSpec spec;
};

int run_synth(const SynthArgs& a) {
  auto split = generate_synthetic_corpus(a.out, a.spec);
  std::cout << "wrote " << split.labeled_ids.size() << " labeled and " << split.unlabeled_ids.size()
            << " unlabeled images to " << a.out << '\n';
  return kExitOk;
}

void add_train_options(CLI::App* cmd, TrainArgs& a) {
  cmd->add_option("--config", a.config, "run config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--output", a.output, "override output_dir");
  cmd->add_option("--resume", a.resume, "continue from a checkpoint");
  cmd->add_option("--data-root", a.data_root, "override data.root");
  cmd->add_option("--max-steps", a.max_steps, "stop after this many global steps");
  cmd->add_option("--epochs", a.epochs, "override epochs");
  cmd->add_option("--seed", a.seed, "override seed");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vlseg: semi-supervised semantic segmentation with vision-language guidance"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "log progress");

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "train a model from a config file");
  add_train_options(train, train_args);

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  eval->add_option("--checkpoint", eval_args.checkpoint)->required()->check(CLI::ExistingFile);
  eval->add_option("--split", eval_args.split, "file with one image id per line")->required()->check(CLI::ExistingFile);
  eval->add_option("--root", eval_args.root, "corpus root (default: the checkpoint's data.root)");
  eval->add_option("--window", eval_args.window, "sliding window size");
  eval->add_option("--stride", eval_args.stride, "sliding window stride");
  eval->add_option("--export", eval_args.export_dir, "write colorized predictions here");
  eval->add_option("--out", eval_args.out, "append the metrics record to this file");

  PseudolabelArgs pl_args;
  auto* pseudo = app.add_subcommand("pseudolabel", "write frozen-VLM guidance labels");
  pseudo->add_option("--config", pl_args.config, "run config naming backbone and corpus")->required()->check(CLI::ExistingFile);
  pseudo->add_option("--defs", pl_args.defs, "class-definition file")->required()->check(CLI::ExistingFile);
  pseudo->add_option("--out", pl_args.out)->required();
  pseudo->add_option("--split", pl_args.split, "id list (default: unlabeled.txt)");
  pseudo->add_option("--data-root", pl_args.data_root, "override data.root");

  SweepArgs sweep_args;
  auto* sweep = app.add_subcommand("sweep", "train once per value of a guidance hyperparameter");
  add_train_options(sweep, sweep_args.train);
  sweep->add_option("--param", sweep_args.param, "lambda_dc0, zeta or tau")->required();
  sweep->add_option("--values", sweep_args.values)->required()->expected(1, -1);

  PlotArgs plot_args;
  auto* plot = app.add_subcommand("plot", "plot mIoU against label count");
  plot->add_option("--tables", plot_args.tables, "results CSV")->required()->check(CLI::ExistingFile);
  plot->add_option("--out", plot_args.out, "SVG path; the data CSV goes next to it")->required();
  plot->add_option("--dataset", plot_args.dataset, "keep rows of this dataset only");
  plot->add_option("--title", plot_args.title);

  SynthArgs synth_args;
  auto* synth = app.add_subcommand("synth", "generate the synthetic shapes corpus");
  synth->add_option("--out", synth_args.out)->required();
  synth->add_option("--labeled", synth_args.spec.num_labeled);
  synth->add_option("--unlabeled", synth_args.spec.num_unlabeled);
  synth->add_option("--val", synth_args.spec.num_val);
  synth->add_option("--size", synth_args.spec.image_size);
  synth->add_option("--shape-kinds", synth_args.spec.shape_kinds);
  synth->add_option("--seed", synth_args.spec.seed);

  auto* defaults = app.add_subcommand("defaults", "print the default run config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }
  set_verbose(verbose);

  try {
    if (*train) return run_train(train_args);
    if (*eval) return run_eval(eval_args);
    if (*pseudo) return run_pseudolabel(pl_args);
    if (*sweep) return run_sweep_cmd(sweep_args);
    if (*plot) return run_plot(plot_args);
    if (*synth) return run_synth(synth_args);
    if (*defaults) {
      TrainConfig cfg;
      cfg.data.root = "data/voc";
      std::cout << cfg.to_json().dump(2) << '\n';
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}
