#include <doctest.h>

#include "multifuse/dataset.hpp"
#include "multifuse/mpf.hpp"
#include "multifuse/rng.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace multifuse;
using namespace multifuse::data;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("multifuse_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

SynthConfig tiny_config(std::uint64_t seed = 1) {
  SynthConfig cfg;
  cfg.track = "elderly";
  cfg.task = "binary";
  cfg.total_samples = 40;
  cfg.speakers_per_class = {6, 4};
  cfg.audio_kind = "toy";
  cfg.audio_dim = 6;
  cfg.visual_kind = "toy";
  cfg.visual_dim = 5;
  cfg.text_kind = "toy";
  cfg.text_dim = 7;
  cfg.frames_min = 3;
  cfg.frames_max = 8;
  cfg.delta = 1.0;
  cfg.seed = seed;
  return cfg;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

// Mean-pooled nearest-centroid classifier; the independent separability
// oracle used before crediting any learner.
double centroid_oracle_accuracy(const Dataset& train, const Dataset& dev,
                                const std::string& task) {
  const int C = train.manifest.task(task).num_classes();
  const Index d = train.samples[0].audio.dim() + train.samples[0].visual.dim() +
                  train.samples[0].text.size();
  Matrix centroids = Matrix::Zero(C, d);
  std::vector<int> counts(static_cast<std::size_t>(C), 0);
  auto featurize = [&](const Sample& s) {
    Vector v(d);
    v << s.audio.values.colwise().mean().transpose(),
        s.visual.values.colwise().mean().transpose(), s.text;
    return v;
  };
  for (const auto& s : train.samples) {
    centroids.row(s.label(task)) += featurize(s).transpose();
    counts[static_cast<std::size_t>(s.label(task))]++;
  }
  for (int c = 0; c < C; ++c) centroids.row(c) /= std::max(1, counts[static_cast<std::size_t>(c)]);
  int correct = 0;
  for (const auto& s : dev.samples) {
    const Vector v = featurize(s);
    int best = 0;
    double best_d = (centroids.row(0).transpose() - v).squaredNorm();
    for (int c = 1; c < C; ++c) {
      const double dist = (centroids.row(c).transpose() - v).squaredNorm();
      if (dist < best_d) {
        best_d = dist;
        best = c;
      }
    }
    correct += best == s.label(task);
  }
  return static_cast<double>(correct) / static_cast<double>(dev.size());
}

}  // namespace

TEST_CASE("mpf1 round trip is bit exact") {
  Rng rng(17);
  Matrix m(5, 3);
  for (Index i = 0; i < 5; ++i) {
    for (Index j = 0; j < 3; ++j) m(i, j) = rng.normal();
  }
  const fs::path dir = temp_dir("mpf");
  mpf::write_matrix(dir / "a.mpf", m);
  Matrix back = mpf::read_matrix(dir / "a.mpf");
  mpf::write_matrix(dir / "b.mpf", back);
  CHECK(file_bytes(dir / "a.mpf") == file_bytes(dir / "b.mpf"));
  // Values already quantized to f32 round-trip to identical doubles.
  Matrix back2 = mpf::read_matrix(dir / "b.mpf");
  CHECK((back - back2).cwiseAbs().maxCoeff() == 0.0);
  CHECK(mpf::read_header(dir / "a.mpf") ==
        std::pair<std::uint32_t, std::uint32_t>{5, 3});
}

TEST_CASE("mpf1 rejects garbage") {
  const fs::path dir = temp_dir("mpf_bad");
  std::ofstream(dir / "x.mpf") << "not a matrix";
  CHECK_THROWS_AS(mpf::read_matrix(dir / "x.mpf"), IoError);
  CHECK_THROWS_AS(mpf::read_matrix(dir / "missing.mpf"), IoError);
}

TEST_CASE("largest remainder reproduces table counts") {
  auto counts = largest_remainder_counts({258.0 / 337.0, 79.0 / 337.0}, 337);
  CHECK(counts[0] == 258);
  CHECK(counts[1] == 79);
  auto ternary = largest_remainder_counts(
      {138.0 / 337.0, 120.0 / 337.0, 79.0 / 337.0}, 337);
  CHECK(ternary[0] == 138);
  CHECK(ternary[1] == 120);
  CHECK(ternary[2] == 79);
  CHECK_THROWS_AS(largest_remainder_counts({0.5, 0.4}, 10), ConfigError);
}

TEST_CASE("synth elderly binary defaults match the class distribution") {
  SynthConfig cfg;
  cfg.track = "elderly";
  cfg.task = "binary";
  cfg.audio_kind = "mfcc";
  cfg.visual_kind = "toy";
  cfg.visual_dim = 8;
  cfg.text_kind = "toy";
  cfg.text_dim = 6;
  cfg.frames_min = 2;
  cfg.frames_max = 4;
  cfg.seed = 3;
  Dataset ds = synth_generate(cfg);
  CHECK(ds.size() == 337);
  const auto labels = ds.labels("binary");
  CHECK(std::count(labels.begin(), labels.end(), 0) == 258);
  CHECK(std::count(labels.begin(), labels.end(), 1) == 79);
  CHECK(ds.speakers().size() == 89);
  CHECK(ds.samples[0].audio.dim() == 64);  // mfcc catalog dim

  // Speakers never straddle classes.
  std::map<std::string, std::set<int>> spk_classes;
  for (const auto& s : ds.samples) {
    spk_classes[s.speaker_id].insert(s.label("binary"));
  }
  for (const auto& [spk, classes] : spk_classes) CHECK(classes.size() == 1);
}

TEST_CASE("synth rejects bad configs") {
  SynthConfig cfg = tiny_config();
  cfg.track = "young";
  cfg.task = "quinary";
  CHECK_THROWS_AS(synth_generate(cfg), ConfigError);

  cfg = tiny_config();
  cfg.speakers_per_class = {0, 3};
  CHECK_THROWS_AS(synth_generate(cfg), ConfigError);

  cfg = tiny_config();
  cfg.delta = -1.0;
  CHECK_THROWS_AS(synth_generate(cfg), ConfigError);
}

TEST_CASE("delta=4 sigma=0 data is separable for the centroid oracle") {
  SynthConfig cfg = tiny_config(21);
  cfg.total_samples = 200;
  cfg.delta = 4.0;
  cfg.sigma_speaker = 0.0;
  Dataset ds = synth_generate(cfg);
  auto [train, dev] = split_by_speaker(ds, 0.3, 5);
  CHECK(centroid_oracle_accuracy(train, dev, "binary") >= 0.99);
}

TEST_CASE("delta=0 gives chance-level data") {
  SynthConfig cfg = tiny_config(22);
  cfg.total_samples = 600;
  cfg.speakers_per_class = {30, 20};
  cfg.delta = 0.0;
  cfg.sigma_speaker = 0.0;
  Dataset ds = synth_generate(cfg);
  auto [train, dev] = split_by_speaker(ds, 0.4, 6);
  // The majority predictor attains the majority proportion; the centroid
  // oracle cannot beat it on signal-free data.
  const auto dev_labels = dev.labels("binary");
  const double majority =
      static_cast<double>(std::count(dev_labels.begin(), dev_labels.end(), 0)) /
      static_cast<double>(dev_labels.size());
  CHECK(std::abs(majority - 258.0 / 337.0) < 0.1);
  CHECK(centroid_oracle_accuracy(train, dev, "binary") <= majority + 0.03);
}

TEST_CASE("dataset save/load round trip") {
  SynthConfig cfg = tiny_config(9);
  Dataset ds = synth_generate(cfg);
  const fs::path dir = temp_dir("roundtrip");
  save_dataset(ds, dir);
  Dataset back = load_dataset(dir);
  REQUIRE(back.size() == ds.size());
  CHECK(back.manifest.track == "elderly");
  CHECK(back.samples[0].sample_id == ds.samples[0].sample_id);
  CHECK(back.samples[0].labels == ds.samples[0].labels);
  // f32 on disk: loaded values match to float precision and a second
  // save/load round trip is exact.
  save_dataset(back, dir / "again");
  Dataset back2 = load_dataset(dir / "again");
  for (Index i = 0; i < back.size(); ++i) {
    const auto si = static_cast<std::size_t>(i);
    CHECK((back.samples[si].audio.values - back2.samples[si].audio.values)
              .cwiseAbs()
              .maxCoeff() == 0.0);
  }
}

TEST_CASE("load_manifest validation errors") {
  SynthConfig cfg = tiny_config(13);
  cfg.total_samples = 4;
  cfg.speakers_per_class = {1, 1};
  Dataset ds = synth_generate(cfg);
  const fs::path dir = temp_dir("manifest_bad");
  save_dataset(ds, dir);

  SUBCASE("valid manifest loads with all entries") {
    auto m = load_manifest(dir / "manifest.json");
    CHECK(m.samples.size() == 4);
  }

  SUBCASE("missing feature file") {
    fs::remove(dir / ds.manifest.samples[0].files.at("audio"));
    fs::remove(dir / "features" / (ds.samples[0].sample_id + "_audio.mpf"));
    CHECK_THROWS_AS(load_manifest(dir / "manifest.json"), IoError);
  }

  SUBCASE("dimension mismatch against declaration") {
    // Overwrite one audio file with the wrong number of columns.
    mpf::write_matrix(dir / "features" / (ds.samples[0].sample_id + "_audio.mpf"),
                      Matrix::Zero(3, 2));
    CHECK_THROWS_AS(load_manifest(dir / "manifest.json"), DimensionError);
  }

  SUBCASE("quinary on young is rejected") {
    std::ifstream is(dir / "manifest.json");
    std::stringstream buf;
    buf << is.rdbuf();
    std::string text = buf.str();
    const auto pos = text.find("\"elderly\"");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 9, "\"young\"");
    const auto bpos = text.find("\"binary\"");
    while (text.find("\"binary\"") != std::string::npos) {
      text.replace(text.find("\"binary\""), 8, "\"quinary\"");
    }
    (void)bpos;
    std::ofstream(dir / "manifest.json") << text;
    CHECK_THROWS(load_manifest(dir / "manifest.json"));
  }

  SUBCASE("catalog dim is enforced") {
    std::ifstream is(dir / "manifest.json");
    std::stringstream buf;
    buf << is.rdbuf();
    std::string text = buf.str();
    // Claim the 6-dim toy audio feature is mfcc (catalog says 64).
    const auto pos = text.find("\"toy\"");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 5, "\"mfcc\"");
    std::ofstream(dir / "manifest.json") << text;
    CHECK_THROWS_AS(load_manifest(dir / "manifest.json"), DimensionError);
  }
}

TEST_CASE("split_by_speaker contract") {
  SynthConfig cfg = tiny_config(31);
  cfg.total_samples = 60;
  cfg.speakers_per_class = {6, 4};
  Dataset ds = synth_generate(cfg);
  REQUIRE(ds.speakers().size() == 10);

  auto [train, dev] = split_by_speaker(ds, 0.1, 77);
  CHECK(dev.speakers().size() == 1);
  CHECK(train.speakers().size() == 9);
  CHECK(train.size() + dev.size() == ds.size());

  // Disjoint speakers.
  const auto train_speakers = train.speakers();
    std::set<std::string> ts(train_speakers.begin(), train_speakers.end());
  for (const auto& s : dev.speakers()) CHECK(ts.count(s) == 0);

  // Determinism.
  auto [train2, dev2] = split_by_speaker(ds, 0.1, 77);
  REQUIRE(dev2.size() == dev.size());
  for (Index i = 0; i < dev.size(); ++i) {
    CHECK(dev.samples[static_cast<std::size_t>(i)].sample_id ==
          dev2.samples[static_cast<std::size_t>(i)].sample_id);
  }

  CHECK_THROWS_AS(split_by_speaker(ds, 0.0, 1), ConfigError);
  CHECK_THROWS_AS(split_by_speaker(ds, 1.0, 1), ConfigError);

  SynthConfig solo = tiny_config(32);
  solo.total_samples = 4;
  solo.class_proportions = {1.0, 0.0};
  solo.speakers_per_class = {1, 1};
  Dataset one = synth_generate(solo);
  CHECK(one.speakers().size() == 1);
  CHECK_THROWS_AS(split_by_speaker(one, 0.5, 1), DataError);
}

TEST_CASE("kfold_by_speaker contract") {
  SynthConfig cfg = tiny_config(41);
  cfg.total_samples = 60;
  cfg.speakers_per_class = {6, 4};
  Dataset ds = synth_generate(cfg);

  auto folds = kfold_by_speaker(ds, 10, 5);
  REQUIRE(folds.size() == 10);
  std::set<std::string> seen;
  Index dev_total = 0;
  std::set<std::string> dev_ids;
  for (const auto& [train, dev] : folds) {
    CHECK(dev.speakers().size() == 1);  // 10 speakers, k=10
    for (const auto& s : dev.speakers()) {
      CHECK(seen.insert(s).second);  // each speaker in exactly one dev fold
    }
    const auto train_speakers = train.speakers();
    std::set<std::string> ts(train_speakers.begin(), train_speakers.end());
    for (const auto& s : dev.speakers()) CHECK(ts.count(s) == 0);
    dev_total += dev.size();
    for (const auto& s : dev.samples) CHECK(dev_ids.insert(s.sample_id).second);
  }
  CHECK(seen.size() == 10);
  CHECK(dev_total == ds.size());

  // Balance rule: 5 speakers, k=2 -> 3 and 2.
  SynthConfig small = tiny_config(42);
  small.total_samples = 20;
  small.speakers_per_class = {3, 2};
  Dataset ds5 = synth_generate(small);
  auto folds2 = kfold_by_speaker(ds5, 2, 9);
  std::multiset<std::size_t> sizes{folds2[0].second.speakers().size(),
                                   folds2[1].second.speakers().size()};
  CHECK(sizes == std::multiset<std::size_t>{2, 3});

  CHECK_THROWS_AS(kfold_by_speaker(ds5, 6, 1), DataError);
}

TEST_CASE("speaker leakage fuzz across random draws") {
  Rng rng(1234);
  SynthConfig cfg = tiny_config(50);
  cfg.total_samples = 30;
  cfg.speakers_per_class = {4, 3};
  Dataset ds = synth_generate(cfg);
  for (int trial = 0; trial < 200; ++trial) {
    const std::uint64_t seed = rng.uniform_int(1u << 30);
    const double f = 0.1 + 0.8 * rng.uniform();
    auto [train, dev] = split_by_speaker(ds, f, seed);
    const auto train_speakers = train.speakers();
    std::set<std::string> ts(train_speakers.begin(), train_speakers.end());
    for (const auto& s : dev.speakers()) REQUIRE(ts.count(s) == 0);
  }
}
