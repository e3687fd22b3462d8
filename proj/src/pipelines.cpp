#include "multifuse/pipelines.hpp"

#include <algorithm>
#include <fstream>
#include <limits>

namespace multifuse::pipeline {

using nlohmann::json;
namespace fs = std::filesystem;

std::string config_digest(const json& config) {
  // nlohmann::json stores object keys sorted, so dump() is canonical.
  return hex64(fnv1a64(config.dump()));
}

void require_known_keys(const json& config,
                        const std::vector<std::string>& allowed,
                        const std::string& context) {
  if (!config.is_object()) {
    throw ConfigError(context + ": config must be a JSON object");
  }
  for (const auto& [key, value] : config.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError(context + ": unknown config key '" + key + "'");
    }
  }
}

namespace {

void write_json(const json& j, const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  return j;
}

}  // namespace

// --------------------------------------------------------------------------
// GBT

GbtPipelineConfig GbtPipelineConfig::from_json(const json& j) {
  require_known_keys(
      j,
      {"task", "use_pca", "pca_k", "class_weighting", "per_frame",
       "learning_rates", "max_depth", "subsample", "colsample_bytree", "rounds",
       "early_stopping_rounds", "lambda", "min_child_hessian", "seed"},
      "gbt config");
  GbtPipelineConfig cfg;
  cfg.task = j.value("task", cfg.task);
  cfg.use_pca = j.value("use_pca", cfg.use_pca);
  cfg.pca_k = j.value("pca_k", cfg.pca_k);
  cfg.class_weighting = j.value("class_weighting", cfg.class_weighting);
  cfg.per_frame = j.value("per_frame", cfg.per_frame);
  cfg.learning_rates =
      j.value("learning_rates", cfg.learning_rates);
  cfg.params.max_depth = j.value("max_depth", cfg.params.max_depth);
  cfg.params.subsample = j.value("subsample", cfg.params.subsample);
  cfg.params.colsample_bytree =
      j.value("colsample_bytree", cfg.params.colsample_bytree);
  cfg.params.rounds = j.value("rounds", cfg.params.rounds);
  cfg.params.early_stopping_rounds =
      j.value("early_stopping_rounds", cfg.params.early_stopping_rounds);
  cfg.params.lambda = j.value("lambda", cfg.params.lambda);
  cfg.params.min_child_hessian =
      j.value("min_child_hessian", cfg.params.min_child_hessian);
  cfg.params.seed = j.value("seed", cfg.params.seed);
  if (cfg.learning_rates.empty()) {
    throw ConfigError("gbt config: learning_rates must not be empty");
  }
  return cfg;
}

json GbtPipelineConfig::to_json() const {
  return json{{"task", task},
              {"use_pca", use_pca},
              {"pca_k", pca_k},
              {"class_weighting", class_weighting},
              {"per_frame", per_frame},
              {"learning_rates", learning_rates},
              {"max_depth", params.max_depth},
              {"subsample", params.subsample},
              {"colsample_bytree", params.colsample_bytree},
              {"rounds", params.rounds},
              {"early_stopping_rounds", params.early_stopping_rounds},
              {"lambda", params.lambda},
              {"min_child_hessian", params.min_child_hessian},
              {"seed", params.seed}};
}

namespace {

// Per-sample featurization: mean-pool each modality, optional PCA, concat.
Matrix featurize_pooled(const data::Dataset& ds,
                        const std::optional<feat::PCAModel>& pca_a,
                        const std::optional<feat::PCAModel>& pca_v) {
  const Index n = ds.size();
  std::vector<Vector> rows;
  rows.reserve(static_cast<std::size_t>(n));
  Index dim = 0;
  for (const auto& s : ds.samples) {
    Vector a = feat::mean_pool(s.audio);
    Vector v = feat::mean_pool(s.visual);
    if (pca_a) a = feat::pca_transform(*pca_a, a.transpose()).row(0).transpose();
    if (pca_v) v = feat::pca_transform(*pca_v, v.transpose()).row(0).transpose();
    Vector fused = feat::fuse_concat(a, v);
    dim = fused.size();
    rows.push_back(std::move(fused));
  }
  Matrix x(n, dim);
  for (Index i = 0; i < n; ++i) x.row(i) = rows[static_cast<std::size_t>(i)].transpose();
  return x;
}

Matrix pooled_modality_matrix(const data::Dataset& ds, bool audio) {
  const Index n = ds.size();
  const Index d = audio ? ds.samples[0].audio.dim() : ds.samples[0].visual.dim();
  Matrix x(n, d);
  for (Index i = 0; i < n; ++i) {
    const auto& s = ds.samples[static_cast<std::size_t>(i)];
    x.row(i) = (audio ? feat::mean_pool(s.audio) : feat::mean_pool(s.visual))
                   .transpose();
  }
  return x;
}

// Per-frame rows: audio and visual frames aligned by truncation to the
// shorter stream of each sample.
Matrix featurize_frames(const data::Dataset& ds,
                        const std::optional<feat::PCAModel>& pca_a,
                        const std::optional<feat::PCAModel>& pca_v,
                        const std::string& task, std::vector<int>* labels,
                        std::vector<Index>* sample_of_row) {
  std::vector<Vector> rows;
  for (Index si = 0; si < ds.size(); ++si) {
    const auto& s = ds.samples[static_cast<std::size_t>(si)];
    const Index t = std::min(s.audio.frames(), s.visual.frames());
    Matrix a = s.audio.values.topRows(t);
    Matrix v = s.visual.values.topRows(t);
    if (pca_a) a = feat::pca_transform(*pca_a, a);
    if (pca_v) v = feat::pca_transform(*pca_v, v);
    for (Index f = 0; f < t; ++f) {
      rows.push_back(
          feat::fuse_concat(a.row(f).transpose(), v.row(f).transpose()));
      if (labels) labels->push_back(s.label(task));
      if (sample_of_row) sample_of_row->push_back(si);
    }
  }
  Matrix x(static_cast<Index>(rows.size()), rows.empty() ? 0 : rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    x.row(static_cast<Index>(i)) = rows[i].transpose();
  }
  return x;
}

Matrix frame_modality_matrix(const data::Dataset& ds, bool audio) {
  std::vector<Index> offsets;
  Index total = 0;
  for (const auto& s : ds.samples) {
    total += std::min(s.audio.frames(), s.visual.frames());
  }
  const Index d = audio ? ds.samples[0].audio.dim() : ds.samples[0].visual.dim();
  Matrix x(total, d);
  Index row = 0;
  for (const auto& s : ds.samples) {
    const Index t = std::min(s.audio.frames(), s.visual.frames());
    x.middleRows(row, t) =
        audio ? s.audio.values.topRows(t) : s.visual.values.topRows(t);
    row += t;
  }
  return x;
}

feat::PCAModel fit_pca_clamped(const Matrix& x, Index requested_k) {
  const Index k = std::min({requested_k, x.rows() - 1, x.cols()});
  if (k < 1) throw DataError("pca: not enough rows to fit any component");
  return feat::pca_fit(x, k);
}

std::vector<int> majority_vote(const std::vector<int>& frame_preds,
                               const std::vector<Index>& sample_of_row,
                               Index num_samples, int num_classes) {
  std::vector<std::vector<int>> counts(
      static_cast<std::size_t>(num_samples),
      std::vector<int>(static_cast<std::size_t>(num_classes), 0));
  for (std::size_t r = 0; r < frame_preds.size(); ++r) {
    counts[static_cast<std::size_t>(sample_of_row[r])]
          [static_cast<std::size_t>(frame_preds[r])]++;
  }
  std::vector<int> out(static_cast<std::size_t>(num_samples), 0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<int>(std::max_element(counts[i].begin(), counts[i].end()) -
                              counts[i].begin());
  }
  return out;
}

}  // namespace

GbtRunResult run_gbt(const data::Dataset& train_set,
                     const data::Dataset& dev_set,
                     const GbtPipelineConfig& cfg, std::uint64_t seed) {
  if (train_set.size() < 2) throw DataError("gbt pipeline: train set too small");
  const int num_classes = train_set.manifest.task(cfg.task).num_classes();

  GbtRunResult result;
  result.config = cfg;

  if (cfg.use_pca) {
    if (cfg.per_frame) {
      result.pca_audio =
          fit_pca_clamped(frame_modality_matrix(train_set, true), cfg.pca_k);
      result.pca_visual =
          fit_pca_clamped(frame_modality_matrix(train_set, false), cfg.pca_k);
    } else {
      result.pca_audio =
          fit_pca_clamped(pooled_modality_matrix(train_set, true), cfg.pca_k);
      result.pca_visual =
          fit_pca_clamped(pooled_modality_matrix(train_set, false), cfg.pca_k);
    }
  }

  Matrix x_train, x_dev;
  std::vector<int> y_train, y_dev;
  std::vector<Index> dev_rows;
  if (cfg.per_frame) {
    x_train = featurize_frames(train_set, result.pca_audio, result.pca_visual,
                               cfg.task, &y_train, nullptr);
    x_dev = featurize_frames(dev_set, result.pca_audio, result.pca_visual,
                             cfg.task, &y_dev, &dev_rows);
  } else {
    x_train = featurize_pooled(train_set, result.pca_audio, result.pca_visual);
    y_train = train_set.labels(cfg.task);
    x_dev = featurize_pooled(dev_set, result.pca_audio, result.pca_visual);
    y_dev = dev_set.labels(cfg.task);
  }

  Vector weights;
  if (cfg.class_weighting) {
    const Vector per_class = feat::class_weights(y_train, num_classes);
    weights.resize(static_cast<Index>(y_train.size()));
    for (std::size_t i = 0; i < y_train.size(); ++i) {
      weights(static_cast<Index>(i)) = per_class(y_train[i]);
    }
  }

  // Learning-rate selection by dev mlogloss at the early-stopping optimum;
  // candidates run with the same seed.
  double best_loss = std::numeric_limits<double>::infinity();
  for (double lr : cfg.learning_rates) {
    gbt::GbtParams params = cfg.params;
    params.learning_rate = lr;
    params.seed = seed;
    gbt::TrainLog log;
    gbt::BoostedEnsemble model = gbt::train(x_train, y_train, weights, x_dev,
                                            y_dev, num_classes, params, &log);
    double dev_loss = std::numeric_limits<double>::infinity();
    if (!log.dev_mlogloss.empty()) {
      dev_loss = log.dev_mlogloss[static_cast<std::size_t>(
          std::max(0, model.best_round - 1))];
    }
    result.dev_loss_by_lr.emplace_back(lr, dev_loss);
    if (dev_loss < best_loss || !std::isfinite(best_loss)) {
      best_loss = dev_loss;
      result.model = std::move(model);
      result.chosen_lr = lr;
    }
  }

  if (dev_set.size() > 0) {
    result.dev_preds = gbt_predict(result, dev_set);
    result.dev_metrics =
        eval::compute_metrics(result.dev_preds, dev_set.labels(cfg.task),
                              num_classes);
  }
  return result;
}

std::vector<int> gbt_predict(const GbtRunResult& run, const data::Dataset& ds) {
  if (run.config.per_frame) {
    std::vector<int> frame_labels;
    std::vector<Index> sample_of_row;
    Matrix x = featurize_frames(ds, run.pca_audio, run.pca_visual,
                                run.config.task, nullptr, &sample_of_row);
    const auto frame_preds = run.model.predict(x);
    return majority_vote(frame_preds, sample_of_row, ds.size(),
                         run.model.num_classes);
  }
  Matrix x = featurize_pooled(ds, run.pca_audio, run.pca_visual);
  return run.model.predict(x);
}

void save_gbt_run(const GbtRunResult& run, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  gbt::save_model(run.model, dir / "model.json");
  if (run.pca_audio) feat::save_pca(*run.pca_audio, dir, "pca_audio");
  if (run.pca_visual) feat::save_pca(*run.pca_visual, dir, "pca_visual");
  json j;
  j["config"] = run.config.to_json();
  j["digest"] = config_digest(run.config.to_json());
  j["chosen_lr"] = run.chosen_lr;
  json losses = json::array();
  for (const auto& [lr, loss] : run.dev_loss_by_lr) {
    losses.push_back({{"lr", lr}, {"dev_mlogloss", loss}});
  }
  j["lr_candidates"] = losses;
  write_json(j, dir / "pipeline.json");
}

GbtRunResult load_gbt_run(const fs::path& dir) {
  GbtRunResult run;
  const json j = read_json(dir / "pipeline.json");
  run.config = GbtPipelineConfig::from_json(j.at("config"));
  run.chosen_lr = j.value("chosen_lr", 0.0);
  run.model = gbt::load_model(dir / "model.json");
  if (run.config.use_pca) {
    run.pca_audio = feat::load_pca(dir, "pca_audio");
    run.pca_visual = feat::load_pca(dir, "pca_visual");
  }
  return run;
}

// --------------------------------------------------------------------------
// Fusenet

FusenetPipelineConfig FusenetPipelineConfig::from_json(const json& j) {
  require_known_keys(
      j,
      {"task", "latent_dim", "layers", "heads", "dropout", "head_hidden1",
       "head_hidden2", "learning_rate", "batch_size", "max_epochs", "patience",
       "warmup_epochs", "clip_norm", "weight_decay", "focal_gamma",
       "focal_alpha", "use_mixup", "mixup_prob", "mixup_beta",
       "use_positional_encoding", "seed"},
      "fusenet config");
  FusenetPipelineConfig cfg;
  cfg.task = j.value("task", cfg.task);
  auto& f = cfg.fusion;
  f.latent_dim = j.value("latent_dim", f.latent_dim);
  f.layers = j.value("layers", f.layers);
  f.heads = j.value("heads", f.heads);
  f.dropout = j.value("dropout", f.dropout);
  f.head_hidden1 = j.value("head_hidden1", f.head_hidden1);
  f.head_hidden2 = j.value("head_hidden2", f.head_hidden2);
  f.learning_rate = j.value("learning_rate", f.learning_rate);
  f.batch_size = j.value("batch_size", f.batch_size);
  f.max_epochs = j.value("max_epochs", f.max_epochs);
  f.patience = j.value("patience", f.patience);
  f.warmup_epochs = j.value("warmup_epochs", f.warmup_epochs);
  f.clip_norm = j.value("clip_norm", f.clip_norm);
  f.weight_decay = j.value("weight_decay", f.weight_decay);
  f.focal_gamma = j.value("focal_gamma", f.focal_gamma);
  f.focal_alpha = j.value("focal_alpha", f.focal_alpha);
  f.use_mixup = j.value("use_mixup", f.use_mixup);
  f.mixup_prob = j.value("mixup_prob", f.mixup_prob);
  f.mixup_beta = j.value("mixup_beta", f.mixup_beta);
  f.use_positional_encoding =
      j.value("use_positional_encoding", f.use_positional_encoding);
  f.seed = j.value("seed", f.seed);
  return cfg;
}

json FusenetPipelineConfig::to_json() const {
  const auto& f = fusion;
  return json{{"task", task},
              {"latent_dim", f.latent_dim},
              {"layers", f.layers},
              {"heads", f.heads},
              {"dropout", f.dropout},
              {"head_hidden1", f.head_hidden1},
              {"head_hidden2", f.head_hidden2},
              {"learning_rate", f.learning_rate},
              {"batch_size", f.batch_size},
              {"max_epochs", f.max_epochs},
              {"patience", f.patience},
              {"warmup_epochs", f.warmup_epochs},
              {"clip_norm", f.clip_norm},
              {"weight_decay", f.weight_decay},
              {"focal_gamma", f.focal_gamma},
              {"focal_alpha", f.focal_alpha},
              {"use_mixup", f.use_mixup},
              {"mixup_prob", f.mixup_prob},
              {"mixup_beta", f.mixup_beta},
              {"use_positional_encoding", f.use_positional_encoding},
              {"seed", f.seed}};
}

FusenetRunResult run_fusenet(const data::Dataset& train_set,
                             const data::Dataset& dev_set,
                             const FusenetPipelineConfig& cfg,
                             std::uint64_t seed) {
  FusenetRunResult result;
  result.config = cfg;
  fusenet::FusionConfig fusion = cfg.fusion;
  fusion.seed = seed;
  result.model = std::make_unique<fusenet::FusionModel>(
      fusenet::train(train_set, dev_set, cfg.task, fusion, &result.history));
  if (dev_set.size() > 0) {
    result.dev_preds = result.model->predict(dev_set, cfg.task);
    result.dev_metrics = eval::compute_metrics(
        result.dev_preds, dev_set.labels(cfg.task),
        train_set.manifest.task(cfg.task).num_classes());
  }
  return result;
}

void save_fusenet_run(const FusenetRunResult& run, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  run.model->params().save(dir / "checkpoint");
  json j;
  j["config"] = run.config.to_json();
  j["digest"] = config_digest(run.config.to_json());
  j["audio_dim"] = run.model->audio_dim();
  j["visual_dim"] = run.model->visual_dim();
  j["text_dim"] = run.model->text_dim();
  j["num_classes"] = run.model->num_classes();
  j["seed"] = run.model->config().seed;
  j["parameters"] = run.model->params().total_parameters();
  write_json(j, dir / "config.json");
  std::ofstream hist(dir / "history.csv");
  if (!hist) throw IoError("cannot write history.csv");
  hist << run.history.to_csv();
}

std::unique_ptr<fusenet::FusionModel> load_fusenet_model(const fs::path& dir,
                                                         std::string* task) {
  const json j = read_json(dir / "config.json");
  FusenetPipelineConfig cfg = FusenetPipelineConfig::from_json(j.at("config"));
  fusenet::FusionConfig fusion = cfg.fusion;
  fusion.seed = j.value("seed", fusion.seed);
  auto model = std::make_unique<fusenet::FusionModel>(
      j.at("audio_dim").get<Index>(), j.at("visual_dim").get<Index>(),
      j.at("text_dim").get<Index>(), j.at("num_classes").get<int>(), fusion);
  model->params().load(dir / "checkpoint");
  if (task) *task = cfg.task;
  return model;
}

// --------------------------------------------------------------------------
// Toy LLM

LlmPipelineConfig LlmPipelineConfig::from_json(const json& j) {
  require_known_keys(
      j,
      {"task", "stages", "embed_dim", "layers", "heads", "lora_rank",
       "lora_alpha", "lr_stage1", "epochs_stage1", "lr_lora", "lr_proj",
       "epochs_stage2", "batch_size", "pooled_tokens", "seed"},
      "llm config");
  LlmPipelineConfig cfg;
  cfg.task = j.value("task", cfg.task);
  cfg.stages = j.value("stages", cfg.stages);
  auto& l = cfg.llm;
  l.embed_dim = j.value("embed_dim", l.embed_dim);
  l.layers = j.value("layers", l.layers);
  l.heads = j.value("heads", l.heads);
  l.lora_rank = j.value("lora_rank", l.lora_rank);
  l.lora_alpha = j.value("lora_alpha", l.lora_alpha);
  l.lr_stage1 = j.value("lr_stage1", l.lr_stage1);
  l.epochs_stage1 = j.value("epochs_stage1", l.epochs_stage1);
  l.lr_lora = j.value("lr_lora", l.lr_lora);
  l.lr_proj = j.value("lr_proj", l.lr_proj);
  l.epochs_stage2 = j.value("epochs_stage2", l.epochs_stage2);
  l.batch_size = j.value("batch_size", l.batch_size);
  l.pooled_tokens = j.value("pooled_tokens", l.pooled_tokens);
  l.seed = j.value("seed", l.seed);
  if (cfg.stages < 0 || cfg.stages > 2) {
    throw ConfigError("llm config: stages must be 0, 1 or 2");
  }
  return cfg;
}

json LlmPipelineConfig::to_json() const {
  const auto& l = llm;
  return json{{"task", task},
              {"stages", stages},
              {"embed_dim", l.embed_dim},
              {"layers", l.layers},
              {"heads", l.heads},
              {"lora_rank", l.lora_rank},
              {"lora_alpha", l.lora_alpha},
              {"lr_stage1", l.lr_stage1},
              {"epochs_stage1", l.epochs_stage1},
              {"lr_lora", l.lr_lora},
              {"lr_proj", l.lr_proj},
              {"epochs_stage2", l.epochs_stage2},
              {"batch_size", l.batch_size},
              {"pooled_tokens", l.pooled_tokens},
              {"seed", l.seed}};
}

LlmRunResult run_llm(const data::Dataset& train_set,
                     const data::Dataset& dev_set, const LlmPipelineConfig& cfg,
                     std::uint64_t seed) {
  LlmRunResult result;
  result.config = cfg;
  llm::LlmConfig llm_cfg = cfg.llm;
  llm_cfg.seed = seed;
  result.model =
      std::make_unique<llm::ToyLlm>(train_set.manifest, cfg.task, llm_cfg);
  if (cfg.stages >= 1) result.model->stage1_train(train_set);
  if (cfg.stages >= 2) result.model->stage2_train(train_set);

  if (dev_set.size() > 0) {
    result.dev_preds.reserve(static_cast<std::size_t>(dev_set.size()));
    for (const auto& s : dev_set.samples) {
      result.dev_preds.push_back(result.model->classify(s));
    }
    result.dev_metrics = eval::compute_metrics(
        result.dev_preds, dev_set.labels(cfg.task),
        train_set.manifest.task(cfg.task).num_classes());
  }
  return result;
}

void save_llm_run(const LlmRunResult& run, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  run.model->params().save(dir / "checkpoint");
  json j;
  j["config"] = run.config.to_json();
  j["digest"] = config_digest(run.config.to_json());
  j["seed"] = run.model->config().seed;
  j["parameters"] = run.model->params().total_parameters();
  write_json(j, dir / "config.json");
}

std::unique_ptr<llm::ToyLlm> load_llm_model(const fs::path& dir,
                                            const data::DatasetManifest& manifest,
                                            std::string* task) {
  const json j = read_json(dir / "config.json");
  LlmPipelineConfig cfg = LlmPipelineConfig::from_json(j.at("config"));
  llm::LlmConfig llm_cfg = cfg.llm;
  llm_cfg.seed = j.value("seed", llm_cfg.seed);
  auto model = std::make_unique<llm::ToyLlm>(manifest, cfg.task, llm_cfg);
  if (cfg.stages >= 2) model->inject_lora();
  model->params().load(dir / "checkpoint");
  if (task) *task = cfg.task;
  return model;
}

eval::FoldTrainer make_fold_trainer(const std::string& model,
                                    const json& config,
                                    const std::string& task) {
  if (model == "gbt") {
    GbtPipelineConfig cfg = GbtPipelineConfig::from_json(config);
    cfg.task = task;
    return [cfg](const data::Dataset& train, const data::Dataset& dev,
                 std::uint64_t seed) {
      return run_gbt(train, dev, cfg, seed).dev_preds;
    };
  }
  if (model == "fusenet") {
    FusenetPipelineConfig cfg = FusenetPipelineConfig::from_json(config);
    cfg.task = task;
    return [cfg](const data::Dataset& train, const data::Dataset& dev,
                 std::uint64_t seed) {
      return run_fusenet(train, dev, cfg, seed).dev_preds;
    };
  }
  if (model == "llm-toy") {
    LlmPipelineConfig cfg = LlmPipelineConfig::from_json(config);
    cfg.task = task;
    return [cfg](const data::Dataset& train, const data::Dataset& dev,
                 std::uint64_t seed) {
      return run_llm(train, dev, cfg, seed).dev_preds;
    };
  }
  throw ConfigError("unknown model: " + model);
}

}  // namespace multifuse::pipeline
