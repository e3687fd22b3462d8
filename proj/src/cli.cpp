#include "multifuse/cli.hpp"

#include "multifuse/ablation.hpp"
#include "multifuse/cv.hpp"
#include "multifuse/dataset.hpp"
#include "multifuse/fusenet.hpp"
#include "multifuse/pipelines.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>

namespace multifuse::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

std::uint64_t default_seed() {
  if (const char* env = std::getenv("MULTIFUSE_SEED")) {
    try {
      return std::stoull(env);
    } catch (...) {
      throw ConfigError("MULTIFUSE_SEED is not an integer");
    }
  }
  return 0;
}

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config: " + path);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw IoError("config parse error: " + std::string(e.what()));
  }
  return j;
}

// Flat "key=value" overrides on top of the config file; values parse as JSON
// scalars when possible, strings otherwise.
void apply_overrides(json& config, const std::vector<std::string>& sets) {
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("--set expects key=value, got '" + kv + "'");
    }
    const std::string key = kv.substr(0, eq);
    const std::string raw = kv.substr(eq + 1);
    try {
      config[key] = json::parse(raw);
    } catch (const json::exception&) {
      config[key] = raw;
    }
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
}

void write_run_record(const fs::path& dir, const std::string& command,
                      const json& config, std::uint64_t seed) {
  json j;
  j["command"] = command;
  j["config"] = config;
  j["digest"] = pipeline::config_digest(config);
  j["seed"] = seed;
  write_text(dir / "run.json", j.dump(2) + "\n");
}

json metrics_to_json(const eval::Metrics& m) {
  json j;
  j["weighted_f1"] = m.weighted_f1;
  j["unweighted_f1"] = m.unweighted_f1;
  j["accuracy"] = m.accuracy;
  j["per_class_f1"] = m.f1;
  j["per_class_precision"] = m.precision;
  j["per_class_recall"] = m.recall;
  j["unparsed"] = m.unparsed;
  std::vector<std::vector<std::int64_t>> confusion;
  for (Index i = 0; i < m.confusion.rows(); ++i) {
    std::vector<std::int64_t> row;
    for (Index k = 0; k < m.confusion.cols(); ++k) row.push_back(m.confusion(i, k));
    confusion.push_back(std::move(row));
  }
  j["confusion"] = confusion;
  return j;
}

void print_metrics_line(const eval::Metrics& m) {
  std::cout << "W_F1=" << m.weighted_f1 << " U_F1=" << m.unweighted_f1
            << " acc=" << m.accuracy << "\n";
}

struct SynthArgs {
  std::string track = "elderly";
  std::string task = "binary";
  Index n = 0;
  double delta = 1.0;
  double sigma_spk = 0.25;
  std::string audio_kind = "wav2vec2";
  std::string visual_kind = "densenet";
  int window = 5;
  Index frames_min = 8;
  Index frames_max = 30;
  Index audio_dim = 0, visual_dim = 0, text_dim = 0;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

int cmd_synth(const SynthArgs& args) {
  data::SynthConfig cfg;
  cfg.track = args.track;
  cfg.task = args.task;
  cfg.total_samples = args.n;
  cfg.delta = args.delta;
  cfg.sigma_speaker = args.sigma_spk;
  cfg.audio_kind = args.audio_kind;
  cfg.visual_kind = args.visual_kind;
  cfg.window_seconds = args.window;
  cfg.frames_min = args.frames_min;
  cfg.frames_max = args.frames_max;
  cfg.audio_dim = args.audio_dim;
  cfg.visual_dim = args.visual_dim;
  cfg.text_dim = args.text_dim;
  cfg.seed = args.seed_given ? args.seed : default_seed();

  data::Dataset ds = data::synth_generate(cfg);
  std::error_code ec;
  fs::create_directories(args.out, ec);
  if (ec) throw IoError("cannot create output dir: " + args.out);
  data::save_dataset(ds, args.out);

  json config{{"track", cfg.track},
              {"task", cfg.task},
              {"n", ds.size()},
              {"delta", cfg.delta},
              {"sigma_spk", cfg.sigma_speaker},
              {"audio_kind", cfg.audio_kind},
              {"visual_kind", cfg.visual_kind},
              {"window", cfg.window_seconds},
              {"frames_min", cfg.frames_min},
              {"frames_max", cfg.frames_max},
              {"seed", cfg.seed}};
  write_run_record(args.out, "synth", config, cfg.seed);
  std::cout << "wrote " << ds.size() << " samples ("
            << ds.speakers().size() << " speakers) to " << args.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string model;
  std::string data_dir;
  std::string config_path;
  std::string out;
  std::string task;
  double dev_fraction = 0.1;
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool dry_run = false;
  std::vector<std::string> sets;
};

int cmd_train(const TrainArgs& args) {
  const std::uint64_t seed = args.seed_given ? args.seed : default_seed();
  json config = load_config_file(args.config_path);
  apply_overrides(config, args.sets);
  if (!args.task.empty()) config["task"] = args.task;

  // Validates the config shape up front (unknown keys, ranges).
  std::string task;
  if (args.model == "gbt") {
    task = pipeline::GbtPipelineConfig::from_json(config).task;
  } else if (args.model == "fusenet") {
    task = pipeline::FusenetPipelineConfig::from_json(config).task;
  } else if (args.model == "llm-toy") {
    task = pipeline::LlmPipelineConfig::from_json(config).task;
  } else {
    throw ConfigError("unknown model: " + args.model);
  }

  if (args.dry_run) {
    std::cout << "config ok, digest " << pipeline::config_digest(config) << "\n";
    return 0;
  }

  data::Dataset ds = data::load_dataset(args.data_dir);
  auto [train_set, dev_set] =
      data::split_by_speaker(ds, args.dev_fraction, seed);

  std::error_code ec;
  fs::create_directories(args.out, ec);
  if (ec) throw IoError("cannot create output dir: " + args.out);

  eval::Metrics metrics;
  if (args.model == "gbt") {
    auto run = pipeline::run_gbt(train_set, dev_set,
                                 pipeline::GbtPipelineConfig::from_json(config),
                                 seed);
    pipeline::save_gbt_run(run, args.out);
    metrics = run.dev_metrics;
  } else if (args.model == "fusenet") {
    auto run = pipeline::run_fusenet(
        train_set, dev_set, pipeline::FusenetPipelineConfig::from_json(config),
        seed);
    pipeline::save_fusenet_run(run, args.out);
    metrics = run.dev_metrics;
  } else {
    auto run = pipeline::run_llm(
        train_set, dev_set, pipeline::LlmPipelineConfig::from_json(config), seed);
    pipeline::save_llm_run(run, args.out);
    metrics = run.dev_metrics;
  }

  write_text(args.out + "/metrics.json", metrics_to_json(metrics).dump(2) + "\n");
  write_run_record(args.out, "train:" + args.model, config, seed);
  print_metrics_line(metrics);
  return 0;
}

struct EvalArgs {
  std::string model;
  std::string checkpoint;
  std::string data_dir;
  std::string split = "dev";
  double dev_fraction = 0.1;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

int cmd_eval(const EvalArgs& args) {
  const std::uint64_t seed = args.seed_given ? args.seed : default_seed();
  data::Dataset ds = data::load_dataset(args.data_dir);

  data::Dataset target = ds;
  if (args.split == "dev" || args.split == "train") {
    auto [train_set, dev_set] =
        data::split_by_speaker(ds, args.dev_fraction, seed);
    target = args.split == "dev" ? std::move(dev_set) : std::move(train_set);
  } else if (args.split != "all") {
    throw ConfigError("--split must be train, dev or all");
  }

  std::vector<int> preds;
  std::string task;
  if (args.model == "gbt") {
    auto run = pipeline::load_gbt_run(args.checkpoint);
    task = run.config.task;
    preds = pipeline::gbt_predict(run, target);
  } else if (args.model == "fusenet") {
    auto model = pipeline::load_fusenet_model(args.checkpoint, &task);
    preds = model->predict(target, task);
  } else if (args.model == "llm-toy") {
    auto model = pipeline::load_llm_model(args.checkpoint, target.manifest, &task);
    preds.reserve(static_cast<std::size_t>(target.size()));
    for (const auto& s : target.samples) preds.push_back(model->classify(s));
  } else {
    throw ConfigError("unknown model: " + args.model);
  }

  const int num_classes = target.manifest.task(task).num_classes();
  eval::Metrics metrics =
      eval::compute_metrics(preds, target.labels(task), num_classes);
  print_metrics_line(metrics);

  if (!args.out.empty()) {
    std::error_code ec;
    fs::create_directories(args.out, ec);
    write_text(args.out + "/metrics.json", metrics_to_json(metrics).dump(2) + "\n");
    write_text(args.out + "/confusion.csv", metrics.confusion_csv());
    json config{{"model", args.model},
                {"checkpoint", args.checkpoint},
                {"split", args.split},
                {"dev_fraction", args.dev_fraction}};
    write_run_record(args.out, "eval", config, seed);
  }
  return 0;
}

struct CvArgs {
  std::string model;
  std::string data_dir;
  std::string config_path;
  std::string out;
  std::string task;
  int k = 10;
  int jobs = 1;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::vector<std::string> sets;
};

int cmd_cv(const CvArgs& args) {
  const std::uint64_t seed = args.seed_given ? args.seed : default_seed();
  json config = load_config_file(args.config_path);
  apply_overrides(config, args.sets);
  data::Dataset ds = data::load_dataset(args.data_dir);
  const std::string task =
      !args.task.empty()
          ? args.task
          : (config.contains("task") ? config.at("task").get<std::string>()
                                     : std::string("binary"));
  config["task"] = task;

  const auto trainer = pipeline::make_fold_trainer(args.model, config, task);
  const eval::CvResult cv =
      eval::run_cv(ds, task, args.k, trainer, seed, args.jobs);

  std::cout << "pooled: ";
  print_metrics_line(cv.pooled);
  std::cout << "per-fold wf1 " << cv.mean_wf1 << " +- " << cv.std_wf1
            << ", uf1 " << cv.mean_uf1 << " +- " << cv.std_uf1 << "\n";
  for (std::size_t f = 0; f < cv.per_fold.size(); ++f) {
    std::cout << "fold " << f << ": W_F1=" << cv.per_fold[f].weighted_f1
              << " U_F1=" << cv.per_fold[f].unweighted_f1 << "\n";
  }

  if (!args.out.empty()) {
    std::error_code ec;
    fs::create_directories(args.out, ec);
    json j;
    j["pooled"] = metrics_to_json(cv.pooled);
    j["mean_wf1"] = cv.mean_wf1;
    j["std_wf1"] = cv.std_wf1;
    j["mean_uf1"] = cv.mean_uf1;
    j["std_uf1"] = cv.std_uf1;
    j["mean_acc"] = cv.mean_acc;
    j["std_acc"] = cv.std_acc;
    json folds = json::array();
    for (const auto& m : cv.per_fold) folds.push_back(metrics_to_json(m));
    j["folds"] = folds;
    write_text(args.out + "/cv.json", j.dump(2) + "\n");
    config["k"] = args.k;
    write_run_record(args.out, "cv:" + args.model, config, seed);
  }
  return 0;
}

struct AblateArgs {
  std::string suite_path;
  std::string data_dir;
  std::string out;
  int jobs = 1;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

int cmd_ablate(const AblateArgs& args) {
  const std::uint64_t seed = args.seed_given ? args.seed : default_seed();
  const json suite_json = load_config_file(args.suite_path);
  const auto suite = eval::AblationSuite::from_json(suite_json);
  data::Dataset ds = data::load_dataset(args.data_dir);

  const auto report = eval::run_ablation(suite, ds, seed, args.jobs);
  std::cout << report.to_text();

  if (!args.out.empty()) {
    std::error_code ec;
    fs::create_directories(args.out, ec);
    write_text(args.out + "/report.txt", report.to_text());
    write_text(args.out + "/report.csv", report.to_csv());
    write_run_record(args.out, "ablate", suite_json, seed);
  }
  return 0;
}

struct GradcheckArgs {
  double epsilon = 1e-5;
  int coords = 200;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

int cmd_gradcheck(const GradcheckArgs& args) {
  const std::uint64_t seed = args.seed_given ? args.seed : default_seed();

  fusenet::FusionConfig cfg;
  cfg.latent_dim = 8;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.dropout = 0.0;
  cfg.head_hidden1 = 16;
  cfg.head_hidden2 = 8;
  cfg.seed = seed;
  fusenet::FusionModel model(5, 4, 6, 2, cfg);

  Rng rng = Rng(seed).substream("gradcheck_data");
  std::vector<fusenet::MixedSample> batch;
  for (int b = 0; b < 2; ++b) {
    fusenet::MixedSample s;
    s.audio.resize(3, 5);
    s.visual.resize(3, 4);
    s.text.resize(6);
    for (Index i = 0; i < s.audio.size(); ++i) s.audio.data()[i] = rng.normal();
    for (Index i = 0; i < s.visual.size(); ++i) s.visual.data()[i] = rng.normal();
    for (Index i = 0; i < 6; ++i) s.text(i) = rng.normal();
    s.soft_label = Vector::Zero(2);
    if (b == 0) {
      s.soft_label(0) = 1.0;
    } else {
      s.soft_label(0) = 0.3;  // soft labels exercise the mixup loss path
      s.soft_label(1) = 0.7;
    }
    batch.push_back(std::move(s));
  }

  const double err =
      fusenet::grad_check(model, batch, args.epsilon, args.coords, seed);
  std::cout << "max relative gradient error: " << err << "\n";
  if (err > 1e-4) {
    std::cerr << "gradcheck failed: " << err << " > 1e-4\n";
    return kExitNumeric;
  }
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"multimodal depression-detection toolkit"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset");
  synth_cmd->add_option("--track", synth.track, "elderly | young");
  synth_cmd->add_option("--task", synth.task, "binary | ternary | quinary");
  synth_cmd->add_option("--n", synth.n, "total samples (0 = table default)");
  synth_cmd->add_option("--delta", synth.delta, "class separability");
  synth_cmd->add_option("--sigma-spk", synth.sigma_spk, "speaker effect scale");
  synth_cmd->add_option("--audio-kind", synth.audio_kind);
  synth_cmd->add_option("--visual-kind", synth.visual_kind);
  synth_cmd->add_option("--window", synth.window, "1 or 5 seconds");
  synth_cmd->add_option("--frames-min", synth.frames_min);
  synth_cmd->add_option("--frames-max", synth.frames_max);
  synth_cmd->add_option("--audio-dim", synth.audio_dim,
                        "dim override for non-catalog kinds");
  synth_cmd->add_option("--visual-dim", synth.visual_dim);
  synth_cmd->add_option("--text-dim", synth.text_dim);
  synth_cmd->add_option("--out", synth.out)->required();
  auto* synth_seed = synth_cmd->add_option("--seed", synth.seed);

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "train one model family");
  train_cmd->add_option("--model", train.model, "gbt | fusenet | llm-toy")
      ->required();
  train_cmd->add_option("--data", train.data_dir)->required();
  train_cmd->add_option("--config", train.config_path, "JSON config file");
  train_cmd->add_option("--set", train.sets, "flat key=value override")
      ->take_all();
  train_cmd->add_option("--task", train.task, "task override");
  train_cmd->add_option("--dev-fraction", train.dev_fraction);
  train_cmd->add_option("--out", train.out);
  train_cmd->add_flag("--dry-run", train.dry_run, "validate config and exit");
  auto* train_seed = train_cmd->add_option("--seed", train.seed);

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "re-score a checkpoint");
  eval_cmd->add_option("--model", eval_args.model)->required();
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint)->required();
  eval_cmd->add_option("--data", eval_args.data_dir)->required();
  eval_cmd->add_option("--split", eval_args.split, "train | dev | all");
  eval_cmd->add_option("--dev-fraction", eval_args.dev_fraction);
  eval_cmd->add_option("--out", eval_args.out);
  auto* eval_seed = eval_cmd->add_option("--seed", eval_args.seed);

  CvArgs cv;
  auto* cv_cmd = app.add_subcommand("cv", "speaker-independent k-fold run");
  cv_cmd->add_option("--model", cv.model)->required();
  cv_cmd->add_option("--data", cv.data_dir)->required();
  cv_cmd->add_option("--config", cv.config_path);
  cv_cmd->add_option("--set", cv.sets)->take_all();
  cv_cmd->add_option("--task", cv.task);
  cv_cmd->add_option("--k", cv.k);
  cv_cmd->add_option("--jobs", cv.jobs);
  cv_cmd->add_option("--out", cv.out);
  auto* cv_seed = cv_cmd->add_option("--seed", cv.seed);

  AblateArgs ablate;
  auto* ablate_cmd = app.add_subcommand("ablate", "run an ablation suite file");
  ablate_cmd->add_option("--suite", ablate.suite_path)->required();
  ablate_cmd->add_option("--data", ablate.data_dir)->required();
  ablate_cmd->add_option("--jobs", ablate.jobs);
  ablate_cmd->add_option("--out", ablate.out);
  auto* ablate_seed = ablate_cmd->add_option("--seed", ablate.seed);

  GradcheckArgs gradcheck;
  auto* grad_cmd =
      app.add_subcommand("gradcheck", "verify fusenet gradients numerically");
  grad_cmd->add_option("--epsilon", gradcheck.epsilon);
  grad_cmd->add_option("--coords", gradcheck.coords);
  auto* grad_seed = grad_cmd->add_option("--seed", gradcheck.seed);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << e.what() << "\n";
    return kExitConfig;
  }

  try {
    synth.seed_given = synth_seed->count() > 0;
    train.seed_given = train_seed->count() > 0;
    eval_args.seed_given = eval_seed->count() > 0;
    cv.seed_given = cv_seed->count() > 0;
    ablate.seed_given = ablate_seed->count() > 0;
    gradcheck.seed_given = grad_seed->count() > 0;

    if (synth_cmd->parsed()) return cmd_synth(synth);
    if (train_cmd->parsed()) return cmd_train(train);
    if (eval_cmd->parsed()) return cmd_eval(eval_args);
    if (cv_cmd->parsed()) return cmd_cv(cv);
    if (ablate_cmd->parsed()) return cmd_ablate(ablate);
    if (grad_cmd->parsed()) return cmd_gradcheck(gradcheck);
    return kExitConfig;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DimensionError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const TrainError& e) {
    std::cerr << "training error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ConvergenceError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
}

}  // namespace multifuse::cli
