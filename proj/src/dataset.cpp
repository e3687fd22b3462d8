#include "multifuse/dataset.hpp"

#include "multifuse/mpf.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

namespace multifuse::data {

using nlohmann::json;
namespace fs = std::filesystem;

int Sample::label(const std::string& task) const {
  auto it = labels.find(task);
  if (it == labels.end()) {
    throw ConfigError("sample " + sample_id + " has no label for task " + task);
  }
  return it->second;
}

const TaskSpec& DatasetManifest::task(const std::string& name) const {
  for (const auto& t : tasks) {
    if (t.name == name) return t;
  }
  throw ConfigError("unknown task: " + name);
}

bool DatasetManifest::has_task(const std::string& name) const {
  return std::any_of(tasks.begin(), tasks.end(),
                     [&](const TaskSpec& t) { return t.name == name; });
}

const FeatureSpec& DatasetManifest::feature(const std::string& modality) const {
  for (const auto& f : features) {
    if (f.modality == modality) return f;
  }
  throw ConfigError("manifest declares no " + modality + " feature");
}

std::vector<std::string> Dataset::speakers() const {
  std::set<std::string> uniq;
  for (const auto& s : samples) uniq.insert(s.speaker_id);
  return {uniq.begin(), uniq.end()};
}

std::vector<int> Dataset::labels(const std::string& task) const {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.label(task));
  return out;
}

Dataset Dataset::subset(const std::vector<Index>& indices) const {
  Dataset out;
  out.manifest = manifest;
  out.manifest.samples.clear();
  out.samples.reserve(indices.size());
  for (Index i : indices) {
    out.samples.push_back(samples[static_cast<std::size_t>(i)]);
    if (static_cast<std::size_t>(i) < manifest.samples.size()) {
      out.manifest.samples.push_back(manifest.samples[static_cast<std::size_t>(i)]);
    }
  }
  return out;
}

Index catalog_dim(const std::string& modality, const std::string& kind,
                  const std::string& track) {
  if (modality == "audio") {
    if (kind == "mfcc") return 64;
    if (kind == "opensmile") return 6373;
    if (kind == "wav2vec2") return 512;
  } else if (modality == "visual") {
    if (kind == "densenet") return track == "young" ? 1000 : 1024;
    if (kind == "resnet") return 1000;
    if (kind == "openface") return 709;
  } else if (modality == "text") {
    if (kind == "roberta") return 1024;
  }
  return 0;
}

std::vector<std::string> task_class_names(const std::string& task) {
  if (task == "binary") return {"Normal", "Depressed"};
  if (task == "ternary") return {"Normal", "Mild", "Severe"};
  if (task == "quinary") {
    return {"Normal", "Mild", "Moderate", "Severe", "Very Severe"};
  }
  throw ConfigError("unknown task: " + task);
}

void validate_track_task(const std::string& track, const std::string& task) {
  if (track != "elderly" && track != "young") {
    throw ConfigError("unknown track: " + track);
  }
  task_class_names(task);  // throws on unknown task
  if (task == "quinary" && track != "elderly") {
    throw ConfigError("task quinary is only defined for track elderly");
  }
}

std::vector<Index> default_class_counts(const std::string& track,
                                        const std::string& task) {
  validate_track_task(track, task);
  if (track == "elderly") {
    if (task == "binary") return {258, 79};
    if (task == "ternary") return {138, 120, 79};
    return {235, 68, 23, 8, 3};
  }
  if (task == "binary") return {135, 129};
  return {135, 99, 30};
}

std::vector<Index> default_speaker_counts(const std::string& track,
                                          const std::string& task) {
  validate_track_task(track, task);
  if (track == "elderly") {
    if (task == "binary") return {68, 21};
    if (task == "ternary") return {37, 31, 21};
    return {62, 18, 6, 2, 1};
  }
  if (task == "binary") return {45, 43};
  return {45, 33, 10};
}

std::vector<Index> largest_remainder_counts(const std::vector<double>& p,
                                            Index n) {
  double sum = std::accumulate(p.begin(), p.end(), 0.0);
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ConfigError("class proportions must sum to 1");
  }
  std::vector<Index> counts(p.size());
  std::vector<std::pair<double, std::size_t>> rem;
  Index assigned = 0;
  for (std::size_t c = 0; c < p.size(); ++c) {
    if (p[c] < 0.0) throw ConfigError("negative class proportion");
    const double exact = p[c] * static_cast<double>(n);
    counts[c] = static_cast<Index>(std::floor(exact));
    assigned += counts[c];
    rem.emplace_back(exact - std::floor(exact), c);
  }
  // Largest remainder first; ties to the lower class index.
  std::sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (Index i = 0; i < n - assigned; ++i) {
    counts[rem[static_cast<std::size_t>(i) % rem.size()].second] += 1;
  }
  return counts;
}

namespace {

std::string require_string(const json& j, const char* key,
                           const std::string& ctx) {
  if (!j.contains(key) || !j.at(key).is_string()) {
    throw IoError("manifest: missing string field '" + std::string(key) +
                  "' in " + ctx);
  }
  return j.at(key).get<std::string>();
}

void validate_manifest(const DatasetManifest& m, const fs::path& base_dir,
                       bool check_files) {
  if (m.track != "elderly" && m.track != "young") {
    throw ConfigError("unknown track: " + m.track);
  }
  if (m.window_seconds != 1 && m.window_seconds != 5) {
    throw ConfigError("window_seconds must be 1 or 5");
  }
  if (m.tasks.empty()) throw ConfigError("manifest declares no tasks");
  for (const auto& t : m.tasks) {
    validate_track_task(m.track, t.name);
    const auto expected = task_class_names(t.name);
    if (t.class_names.size() != expected.size()) {
      throw ConfigError("task " + t.name + " must have " +
                        std::to_string(expected.size()) + " classes, got " +
                        std::to_string(t.class_names.size()));
    }
  }
  for (const char* modality : {"audio", "visual", "text"}) {
    const auto& f = m.feature(modality);
    if (f.dim <= 0) {
      throw ConfigError(std::string("feature ") + modality +
                        " has non-positive dim");
    }
    const Index cat = catalog_dim(modality, f.kind, m.track);
    if (cat != 0 && cat != f.dim) {
      throw DimensionError("feature " + f.kind + " declares dim " +
                           std::to_string(f.dim) + " but the catalog says " +
                           std::to_string(cat));
    }
  }
  for (const auto& e : m.samples) {
    if (e.id.empty() || e.speaker.empty()) {
      throw ConfigError("sample entry with empty id or speaker");
    }
    for (const auto& t : m.tasks) {
      auto it = e.labels.find(t.name);
      if (it == e.labels.end()) {
        throw ConfigError("sample " + e.id + " lacks a label for task " +
                          t.name);
      }
      if (it->second < 0 || it->second >= t.num_classes()) {
        throw ConfigError("sample " + e.id + " label " +
                          std::to_string(it->second) + " out of range for " +
                          t.name);
      }
    }
    for (const char* modality : {"audio", "visual", "text"}) {
      auto it = e.files.find(modality);
      if (it == e.files.end()) {
        throw ConfigError("sample " + e.id + " lacks a " +
                          std::string(modality) + " file");
      }
      if (!check_files) continue;
      const fs::path p = base_dir / it->second;
      if (!fs::exists(p)) {
        throw IoError("missing feature file: " + p.string());
      }
      const auto [rows, cols] = mpf::read_header(p);
      const Index want = m.feature(modality).dim;
      if (static_cast<Index>(cols) != want) {
        throw DimensionError("file " + p.string() + " has " +
                             std::to_string(cols) + " cols, manifest declares " +
                             std::to_string(want));
      }
      if (rows < 1) throw DataError("empty feature file: " + p.string());
      if (std::string(modality) == "text" && rows != 1) {
        throw DimensionError("text vector must be 1 x d, got " +
                             std::to_string(rows) + " rows in " + p.string());
      }
    }
  }
}

json manifest_to_json(const DatasetManifest& m) {
  json j;
  j["track"] = m.track;
  j["window_seconds"] = m.window_seconds;
  j["tasks"] = json::array();
  for (const auto& t : m.tasks) {
    j["tasks"].push_back({{"name", t.name}, {"classes", t.class_names}});
  }
  j["features"] = json::array();
  for (const auto& f : m.features) {
    j["features"].push_back(
        {{"modality", f.modality}, {"kind", f.kind}, {"dim", f.dim}});
  }
  j["samples"] = json::array();
  for (const auto& e : m.samples) {
    j["samples"].push_back({{"id", e.id},
                            {"speaker", e.speaker},
                            {"files", e.files},
                            {"labels", e.labels}});
  }
  return j;
}

DatasetManifest manifest_from_json(const json& j) {
  DatasetManifest m;
  m.track = require_string(j, "track", "manifest");
  if (!j.contains("window_seconds")) {
    throw IoError("manifest: missing window_seconds");
  }
  m.window_seconds = j.at("window_seconds").get<int>();
  for (const auto& t : j.value("tasks", json::array())) {
    TaskSpec spec;
    spec.name = require_string(t, "name", "task");
    spec.class_names = t.value("classes", std::vector<std::string>{});
    if (spec.class_names.empty()) spec.class_names = task_class_names(spec.name);
    m.tasks.push_back(std::move(spec));
  }
  for (const auto& f : j.value("features", json::array())) {
    FeatureSpec spec;
    spec.modality = require_string(f, "modality", "feature");
    spec.kind = require_string(f, "kind", "feature");
    spec.dim = f.value("dim", Index{0});
    m.features.push_back(std::move(spec));
  }
  for (const auto& s : j.value("samples", json::array())) {
    SampleEntry e;
    e.id = require_string(s, "id", "sample");
    e.speaker = require_string(s, "speaker", "sample");
    if (s.contains("files")) {
      e.files = s.at("files").get<std::map<std::string, std::string>>();
    }
    if (s.contains("labels")) {
      e.labels = s.at("labels").get<std::map<std::string, int>>();
    }
    m.samples.push_back(std::move(e));
  }
  return m;
}

}  // namespace

DatasetManifest load_manifest(const fs::path& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw IoError("cannot open manifest: " + manifest_path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw IoError("manifest parse error: " + std::string(e.what()));
  }
  DatasetManifest m = manifest_from_json(j);
  validate_manifest(m, manifest_path.parent_path(), /*check_files=*/true);
  return m;
}

Dataset load_dataset(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  Dataset ds;
  ds.manifest = load_manifest(manifest_path);
  ds.samples.reserve(ds.manifest.samples.size());
  for (const auto& e : ds.manifest.samples) {
    Sample s;
    s.sample_id = e.id;
    s.speaker_id = e.speaker;
    s.labels = e.labels;
    s.audio.values = mpf::read_matrix(dir / e.files.at("audio"));
    s.audio.window_seconds = ds.manifest.window_seconds;
    s.visual.values = mpf::read_matrix(dir / e.files.at("visual"));
    s.visual.window_seconds = ds.manifest.window_seconds;
    const Matrix text = mpf::read_matrix(dir / e.files.at("text"));
    s.text = text.row(0).transpose();
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

void save_dataset(const Dataset& ds, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir / "features", ec);
  if (ec) throw IoError("cannot create " + (dir / "features").string());

  DatasetManifest m = ds.manifest;
  m.samples.clear();
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Sample& s = ds.samples[i];
    SampleEntry e;
    e.id = s.sample_id;
    e.speaker = s.speaker_id;
    e.labels = s.labels;
    e.files["audio"] = "features/" + s.sample_id + "_audio.mpf";
    e.files["visual"] = "features/" + s.sample_id + "_visual.mpf";
    e.files["text"] = "features/" + s.sample_id + "_text.mpf";
    mpf::write_matrix(dir / e.files["audio"], s.audio.values);
    mpf::write_matrix(dir / e.files["visual"], s.visual.values);
    mpf::write_matrix(dir / e.files["text"], s.text.transpose());
    m.samples.push_back(std::move(e));
  }

  std::ofstream os(dir / "manifest.json");
  if (!os) throw IoError("cannot write manifest in " + dir.string());
  os << manifest_to_json(m).dump(2) << "\n";
}

namespace {

// Orthonormal class directions when dim allows; random unit vectors
// otherwise. Deterministic in the rng stream.
Matrix class_directions(Index dim, int num_classes, Rng& rng) {
  Matrix g(dim, num_classes);
  for (Index i = 0; i < dim; ++i) {
    for (int c = 0; c < num_classes; ++c) g(i, c) = rng.normal();
  }
  if (dim >= num_classes) {
    Eigen::HouseholderQR<Matrix> qr(g);
    Matrix q = qr.householderQ() * Matrix::Identity(dim, num_classes);
    return q;
  }
  for (int c = 0; c < num_classes; ++c) g.col(c).normalize();
  return g;
}

Matrix gaussian_matrix(Index rows, Index cols, Rng& rng) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) m(i, j) = rng.normal();
  }
  return m;
}

}  // namespace

Dataset synth_generate(const SynthConfig& cfg) {
  validate_track_task(cfg.track, cfg.task);
  if (cfg.delta < 0.0) throw ConfigError("separability delta must be >= 0");
  if (cfg.sigma_speaker < 0.0) throw ConfigError("sigma_speaker must be >= 0");
  if (cfg.frames_min < 1 || cfg.frames_max < cfg.frames_min) {
    throw ConfigError("invalid frame range");
  }

  const auto class_names = task_class_names(cfg.task);
  const int num_classes = static_cast<int>(class_names.size());

  const auto table_counts = default_class_counts(cfg.track, cfg.task);
  const Index table_total =
      std::accumulate(table_counts.begin(), table_counts.end(), Index{0});
  const Index n = cfg.total_samples > 0 ? cfg.total_samples : table_total;

  std::vector<double> props = cfg.class_proportions;
  if (props.empty()) {
    for (Index c : table_counts) {
      props.push_back(static_cast<double>(c) / static_cast<double>(table_total));
    }
  }
  if (static_cast<int>(props.size()) != num_classes) {
    throw ConfigError("class_proportions size does not match task classes");
  }
  const auto counts = largest_remainder_counts(props, n);

  std::vector<Index> spk_counts = cfg.speakers_per_class;
  if (spk_counts.empty()) {
    spk_counts = default_speaker_counts(cfg.track, cfg.task);
    for (std::size_t c = 0; c < spk_counts.size(); ++c) {
      spk_counts[c] = std::min(spk_counts[c], std::max<Index>(counts[c], 1));
    }
  }
  if (static_cast<int>(spk_counts.size()) != num_classes) {
    throw ConfigError("speakers_per_class size does not match task classes");
  }
  for (std::size_t c = 0; c < spk_counts.size(); ++c) {
    if (spk_counts[c] <= 0) {
      throw ConfigError("speakers per class must be positive (class " +
                        std::to_string(c) + ")");
    }
  }

  const Index d_a = cfg.audio_dim > 0
                        ? cfg.audio_dim
                        : catalog_dim("audio", cfg.audio_kind, cfg.track);
  const Index d_v = cfg.visual_dim > 0
                        ? cfg.visual_dim
                        : catalog_dim("visual", cfg.visual_kind, cfg.track);
  const Index d_t = cfg.text_dim > 0
                        ? cfg.text_dim
                        : catalog_dim("text", cfg.text_kind, cfg.track);
  if (d_a <= 0) throw ConfigError("unknown audio kind " + cfg.audio_kind +
                                  " and no audio_dim given");
  if (d_v <= 0) throw ConfigError("unknown visual kind " + cfg.visual_kind +
                                  " and no visual_dim given");
  if (d_t <= 0) throw ConfigError("unknown text kind " + cfg.text_kind +
                                  " and no text_dim given");

  Rng rng = Rng(cfg.seed).substream("synth");

  const Matrix dir_a = class_directions(d_a, num_classes, rng);
  const Matrix dir_v = class_directions(d_v, num_classes, rng);
  const Matrix dir_t = class_directions(d_t, num_classes, rng);

  // One offset triple per speaker; a speaker belongs to exactly one class.
  struct SpeakerProfile {
    std::string id;
    Vector off_a, off_v, off_t;
  };
  std::vector<std::vector<SpeakerProfile>> speakers(
      static_cast<std::size_t>(num_classes));
  for (int c = 0; c < num_classes; ++c) {
    for (Index k = 0; k < spk_counts[static_cast<std::size_t>(c)]; ++k) {
      SpeakerProfile sp;
      std::ostringstream id;
      id << "spk_c" << c << "_" << k;
      sp.id = id.str();
      sp.off_a = cfg.sigma_speaker * gaussian_matrix(d_a, 1, rng).col(0);
      sp.off_v = cfg.sigma_speaker * gaussian_matrix(d_v, 1, rng).col(0);
      sp.off_t = cfg.sigma_speaker * gaussian_matrix(d_t, 1, rng).col(0);
      speakers[static_cast<std::size_t>(c)].push_back(std::move(sp));
    }
  }

  Dataset ds;
  ds.manifest.track = cfg.track;
  ds.manifest.window_seconds = cfg.window_seconds;
  ds.manifest.tasks.push_back({cfg.task, class_names});
  ds.manifest.features.push_back({"audio", cfg.audio_kind, d_a});
  ds.manifest.features.push_back({"visual", cfg.visual_kind, d_v});
  ds.manifest.features.push_back({"text", cfg.text_kind, d_t});

  Index sample_index = 0;
  for (int c = 0; c < num_classes; ++c) {
    const Vector mean_a = cfg.delta * dir_a.col(c);
    const Vector mean_v = cfg.delta * dir_v.col(c);
    const Vector mean_t = cfg.delta * dir_t.col(c);
    const auto& class_speakers = speakers[static_cast<std::size_t>(c)];
    for (Index j = 0; j < counts[static_cast<std::size_t>(c)]; ++j) {
      const auto& spk = class_speakers[static_cast<std::size_t>(j) %
                                       class_speakers.size()];
      Sample s;
      std::ostringstream id;
      id << "samp_" << std::setw(4) << std::setfill('0') << sample_index++;
      s.sample_id = id.str();
      s.speaker_id = spk.id;
      s.labels[cfg.task] = c;

      const Index ta = cfg.frames_min +
                       static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(
                           cfg.frames_max - cfg.frames_min + 1)));
      const Index tv = cfg.frames_min +
                       static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(
                           cfg.frames_max - cfg.frames_min + 1)));

      s.audio.window_seconds = cfg.window_seconds;
      s.audio.values = gaussian_matrix(ta, d_a, rng);
      s.audio.values.rowwise() += (mean_a + spk.off_a).transpose();

      s.visual.window_seconds = cfg.window_seconds;
      s.visual.values = gaussian_matrix(tv, d_v, rng);
      s.visual.values.rowwise() += (mean_v + spk.off_v).transpose();

      s.text = mean_t + spk.off_t + gaussian_matrix(d_t, 1, rng).col(0);

      SampleEntry e;
      e.id = s.sample_id;
      e.speaker = s.speaker_id;
      e.labels = s.labels;
      e.files["audio"] = "features/" + s.sample_id + "_audio.mpf";
      e.files["visual"] = "features/" + s.sample_id + "_visual.mpf";
      e.files["text"] = "features/" + s.sample_id + "_text.mpf";
      ds.manifest.samples.push_back(std::move(e));
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

namespace {

std::pair<std::vector<Index>, std::vector<Index>> partition_by_speaker_set(
    const Dataset& ds, const std::set<std::string>& dev_speakers) {
  std::vector<Index> train_idx, dev_idx;
  for (Index i = 0; i < ds.size(); ++i) {
    if (dev_speakers.count(ds.samples[static_cast<std::size_t>(i)].speaker_id)) {
      dev_idx.push_back(i);
    } else {
      train_idx.push_back(i);
    }
  }
  return {train_idx, dev_idx};
}

}  // namespace

std::pair<Dataset, Dataset> split_by_speaker(const Dataset& ds,
                                             double dev_fraction,
                                             std::uint64_t seed) {
  if (dev_fraction <= 0.0 || dev_fraction >= 1.0) {
    throw ConfigError("dev_fraction must be in (0, 1)");
  }
  auto speakers = ds.speakers();
  if (speakers.size() < 2) {
    throw DataError("split_by_speaker needs at least 2 speakers, got " +
                    std::to_string(speakers.size()));
  }
  Rng rng = Rng(seed).substream("split");
  rng.shuffle(speakers);
  const auto total = static_cast<long>(speakers.size());
  long dev_count =
      std::lround(dev_fraction * static_cast<double>(total));
  dev_count = std::clamp(dev_count, 1l, total - 1);

  std::set<std::string> dev_speakers(speakers.begin(),
                                     speakers.begin() + dev_count);
  auto [train_idx, dev_idx] = partition_by_speaker_set(ds, dev_speakers);
  return {ds.subset(train_idx), ds.subset(dev_idx)};
}

std::vector<std::pair<Dataset, Dataset>> kfold_by_speaker(const Dataset& ds,
                                                          int k,
                                                          std::uint64_t seed) {
  if (k < 2) throw ConfigError("k must be >= 2");
  auto speakers = ds.speakers();
  if (static_cast<int>(speakers.size()) < k) {
    throw DataError("k=" + std::to_string(k) + " exceeds speaker count " +
                    std::to_string(speakers.size()));
  }
  Rng rng = Rng(seed).substream("kfold");
  rng.shuffle(speakers);

  std::vector<std::pair<Dataset, Dataset>> folds;
  folds.reserve(static_cast<std::size_t>(k));
  for (int f = 0; f < k; ++f) {
    std::set<std::string> dev_speakers;
    for (std::size_t i = static_cast<std::size_t>(f); i < speakers.size();
         i += static_cast<std::size_t>(k)) {
      dev_speakers.insert(speakers[i]);
    }
    auto [train_idx, dev_idx] = partition_by_speaker_set(ds, dev_speakers);
    folds.emplace_back(ds.subset(train_idx), ds.subset(dev_idx));
  }
  return folds;
}

}  // namespace multifuse::data
