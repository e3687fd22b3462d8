#pragma once

#include "multifuse/cv.hpp"
#include "multifuse/dataset.hpp"
#include "multifuse/features.hpp"
#include "multifuse/fusenet.hpp"
#include "multifuse/gbt.hpp"
#include "multifuse/llm_toy.hpp"
#include "multifuse/metrics.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>

namespace multifuse::pipeline {

// Stable digest of a config: FNV-1a over the canonical (key-sorted) JSON
// dump, so key order in the input file cannot change it.
std::string config_digest(const nlohmann::json& config);

// Rejects keys outside the allowlist; typo'd experiment configs fail loudly.
void require_known_keys(const nlohmann::json& config,
                        const std::vector<std::string>& allowed,
                        const std::string& context);

// ---------------------------------------------------------------------------
// GBT pipeline: mean-pool (or per-frame align), per-modality PCA, fused
// vector, class weighting, boosted trees with dev-based lr selection.

struct GbtPipelineConfig {
  std::string task = "binary";
  bool use_pca = true;
  Index pca_k = 50;
  bool class_weighting = true;
  bool per_frame = false;  // per-frame rows + majority vote at inference
  std::vector<double> learning_rates = {0.01, 0.05};
  gbt::GbtParams params;  // learning_rate overridden per candidate

  static GbtPipelineConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct GbtRunResult {
  GbtPipelineConfig config;
  gbt::BoostedEnsemble model;
  std::optional<feat::PCAModel> pca_audio;
  std::optional<feat::PCAModel> pca_visual;
  double chosen_lr = 0.0;
  std::vector<std::pair<double, double>> dev_loss_by_lr;
  std::vector<int> dev_preds;
  eval::Metrics dev_metrics;
};

GbtRunResult run_gbt(const data::Dataset& train_set,
                     const data::Dataset& dev_set,
                     const GbtPipelineConfig& cfg, std::uint64_t seed);

std::vector<int> gbt_predict(const GbtRunResult& run, const data::Dataset& ds);

void save_gbt_run(const GbtRunResult& run, const std::filesystem::path& dir);
GbtRunResult load_gbt_run(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Fusenet pipeline.

struct FusenetPipelineConfig {
  std::string task = "binary";
  fusenet::FusionConfig fusion;

  static FusenetPipelineConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct FusenetRunResult {
  FusenetPipelineConfig config;
  std::unique_ptr<fusenet::FusionModel> model;
  fusenet::TrainHistory history;
  std::vector<int> dev_preds;
  eval::Metrics dev_metrics;
};

FusenetRunResult run_fusenet(const data::Dataset& train_set,
                             const data::Dataset& dev_set,
                             const FusenetPipelineConfig& cfg,
                             std::uint64_t seed);

void save_fusenet_run(const FusenetRunResult& run,
                      const std::filesystem::path& dir);
// Rebuilds the model from the saved config and tensor files; the dataset is
// only needed for prediction afterwards.
std::unique_ptr<fusenet::FusionModel> load_fusenet_model(
    const std::filesystem::path& dir, std::string* task = nullptr);

// ---------------------------------------------------------------------------
// Toy LLM pipeline.

struct LlmPipelineConfig {
  std::string task = "binary";
  int stages = 2;  // 0 none, 1 stage-1 only, 2 both
  llm::LlmConfig llm;

  static LlmPipelineConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct LlmRunResult {
  LlmPipelineConfig config;
  std::unique_ptr<llm::ToyLlm> model;
  std::vector<int> dev_preds;
  eval::Metrics dev_metrics;
};

LlmRunResult run_llm(const data::Dataset& train_set,
                     const data::Dataset& dev_set,
                     const LlmPipelineConfig& cfg, std::uint64_t seed);

void save_llm_run(const LlmRunResult& run, const std::filesystem::path& dir);
std::unique_ptr<llm::ToyLlm> load_llm_model(const std::filesystem::path& dir,
                                            const data::DatasetManifest& manifest,
                                            std::string* task = nullptr);

// Uniform fold trainer for run_cv; model is "gbt", "fusenet" or "llm-toy".
eval::FoldTrainer make_fold_trainer(const std::string& model,
                                    const nlohmann::json& config,
                                    const std::string& task);

}  // namespace multifuse::pipeline
