#pragma once

#include "multifuse/common.hpp"
#include "multifuse/rng.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace multifuse::data {

// One modality stream for one subject recording: frames x dim, embeddings
// per 1s or 5s hopping window.
struct FeatureSequence {
  Matrix values;  // frames x dim
  int window_seconds = 5;

  Index frames() const { return values.rows(); }
  Index dim() const { return values.cols(); }
};

struct Sample {
  std::string sample_id;
  std::string speaker_id;
  FeatureSequence audio;
  FeatureSequence visual;
  Vector text;  // personalized feature, one vector per subject
  std::map<std::string, int> labels;  // task name -> class index

  int label(const std::string& task) const;
};

struct TaskSpec {
  std::string name;
  std::vector<std::string> class_names;

  int num_classes() const { return static_cast<int>(class_names.size()); }
};

struct FeatureSpec {
  std::string modality;  // "audio" | "visual" | "text"
  std::string kind;      // e.g. "mfcc", "densenet", "roberta"
  Index dim = 0;
};

struct SampleEntry {
  std::string id;
  std::string speaker;
  std::map<std::string, std::string> files;  // modality -> relative path
  std::map<std::string, int> labels;
};

struct DatasetManifest {
  std::string track;  // "elderly" | "young"
  int window_seconds = 5;
  std::vector<TaskSpec> tasks;
  std::vector<FeatureSpec> features;
  std::vector<SampleEntry> samples;

  const TaskSpec& task(const std::string& name) const;
  const FeatureSpec& feature(const std::string& modality) const;
  bool has_task(const std::string& name) const;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Sample> samples;  // parallel to manifest.samples

  Index size() const { return static_cast<Index>(samples.size()); }
  std::vector<std::string> speakers() const;  // unique, sorted
  std::vector<int> labels(const std::string& task) const;
  Dataset subset(const std::vector<Index>& indices) const;
};

struct SynthConfig {
  std::string track = "elderly";
  std::string task = "binary";
  Index total_samples = 0;  // 0 = Table-1 default for (track, task)
  std::vector<double> class_proportions;  // empty = dataset-table ratios
  std::vector<Index> speakers_per_class;  // empty = dataset-table counts
  Index frames_min = 8;
  Index frames_max = 30;
  std::string audio_kind = "wav2vec2";
  std::string visual_kind = "densenet";
  std::string text_kind = "roberta";
  int window_seconds = 5;
  double delta = 1.0;          // class-mean separation along fixed directions
  double sigma_speaker = 0.25;  // per-speaker offset scale
  std::uint64_t seed = 0;
  // Explicit dims for kinds outside the catalog (tests use tiny dims).
  Index audio_dim = 0;
  Index visual_dim = 0;
  Index text_dim = 0;
};

// Catalog of known feature kinds and their dims per track; 0 when unknown.
Index catalog_dim(const std::string& modality, const std::string& kind,
                  const std::string& track);

// Canonical class names per task ("binary" -> Normal/Depressed, ...).
std::vector<std::string> task_class_names(const std::string& task);

// Throws ConfigError for unknown track/task or quinary outside elderly.
void validate_track_task(const std::string& track, const std::string& task);

// Default per-class sample counts and speaker counts for (track, task).
std::vector<Index> default_class_counts(const std::string& track,
                                        const std::string& task);
std::vector<Index> default_speaker_counts(const std::string& track,
                                          const std::string& task);

// floor(p*n) then distribute the deficit by descending remainder; reproduces
// integer class counts from published ratios.
std::vector<Index> largest_remainder_counts(const std::vector<double>& p,
                                            Index n);

DatasetManifest load_manifest(const std::filesystem::path& manifest_path);
Dataset load_dataset(const std::filesystem::path& dir);
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);

Dataset synth_generate(const SynthConfig& cfg);

// Speaker-independent partition; dev speaker count = round(f * speakers),
// clamped to [1, speakers-1]. Deterministic for a fixed seed.
std::pair<Dataset, Dataset> split_by_speaker(const Dataset& ds,
                                             double dev_fraction,
                                             std::uint64_t seed);

// k speaker folds, sizes within 1 of each other; element i is
// (train, dev) with dev = fold i.
std::vector<std::pair<Dataset, Dataset>> kfold_by_speaker(const Dataset& ds,
                                                          int k,
                                                          std::uint64_t seed);

}  // namespace multifuse::data
