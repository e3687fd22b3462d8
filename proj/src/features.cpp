#include "multifuse/features.hpp"

#include "multifuse/linalg.hpp"
#include "multifuse/mpf.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <vector>

namespace multifuse::feat {

PCAModel pca_fit(const Eigen::Ref<const Matrix>& x, Index k) {
  const Index n = x.rows();
  const Index d = x.cols();
  if (n < 2) throw ConfigError("pca_fit needs at least 2 rows");
  if (k < 1 || k > std::min(n - 1, d)) {
    throw ConfigError("pca_fit: k=" + std::to_string(k) +
                      " out of range [1, " + std::to_string(std::min(n - 1, d)) +
                      "]");
  }

  PCAModel model;
  model.mean = x.colwise().mean();
  const Matrix centered = x.rowwise() - model.mean.transpose();
  const double denom = static_cast<double>(n - 1);

  Vector eigenvalues;
  Matrix vectors;
  if (d <= n) {
    const Matrix cov = centered.transpose() * centered / denom;
    auto eig = sym_eig(cov);
    eigenvalues = std::move(eig.values);
    vectors = std::move(eig.vectors);
  } else {
    // Gram trick: the n x n matrix shares the covariance's nonzero spectrum;
    // eigenvectors map back through X^T.
    const Matrix gram = centered * centered.transpose() / denom;
    auto eig = sym_eig(gram);
    eigenvalues = eig.values;
    vectors.resize(d, eig.vectors.cols());
    for (Index i = 0; i < eig.vectors.cols(); ++i) {
      Vector v = centered.transpose() * eig.vectors.col(i);
      const double norm = v.norm();
      if (norm > 0.0) v /= norm;
      vectors.col(i) = v;
    }
  }

  const double top = std::max(eigenvalues.size() > 0 ? eigenvalues(0) : 0.0, 0.0);
  const double rank_tol = std::max(1e-12, 1e-10 * top);
  Index rank = 0;
  while (rank < eigenvalues.size() && eigenvalues(rank) > rank_tol) ++rank;
  if (rank == 0) {
    throw DataError("pca_fit: zero-variance data (rank 0)");
  }
  if (k > rank) {
    std::cerr << "pca_fit: requested k=" << k << " exceeds data rank " << rank
              << ", clamping\n";
    k = rank;
  }

  model.k = k;
  model.eigenvalues = eigenvalues.head(k).cwiseMax(0.0);
  model.components = vectors.leftCols(k);
  return model;
}

Matrix pca_transform(const PCAModel& model, const Eigen::Ref<const Matrix>& x) {
  if (x.cols() != model.dim()) {
    throw DimensionError("pca_transform: input has " + std::to_string(x.cols()) +
                         " cols, model expects " + std::to_string(model.dim()));
  }
  return (x.rowwise() - model.mean.transpose()) * model.components;
}

Vector mean_pool(const data::FeatureSequence& seq) {
  if (seq.frames() < 1) throw DataError("mean_pool: empty sequence");
  return seq.values.colwise().mean();
}

Vector fuse_concat(const Vector& z_audio, const Vector& z_visual) {
  Vector out(z_audio.size() + z_visual.size());
  out.head(z_audio.size()) = z_audio;
  out.tail(z_visual.size()) = z_visual;
  return out;
}

Vector class_weights(const std::vector<int>& labels, int num_classes) {
  if (num_classes < 1) throw ConfigError("class_weights: num_classes < 1");
  std::vector<Index> counts(static_cast<std::size_t>(num_classes), 0);
  for (int y : labels) {
    if (y < 0 || y >= num_classes) {
      throw DataError("class_weights: label " + std::to_string(y) +
                      " out of range");
    }
    counts[static_cast<std::size_t>(y)]++;
  }
  const Index n_max = *std::max_element(counts.begin(), counts.end());
  Vector w(num_classes);
  for (int c = 0; c < num_classes; ++c) {
    if (counts[static_cast<std::size_t>(c)] == 0) {
      throw DataError("class_weights: class " + std::to_string(c) +
                      " is absent from the labels");
    }
    w(c) = static_cast<double>(n_max) /
           static_cast<double>(counts[static_cast<std::size_t>(c)]);
  }
  return w;
}

void save_pca(const PCAModel& model, const std::filesystem::path& dir,
              const std::string& name) {
  mpf::write_matrix(dir / (name + "_mean.mpf"), model.mean.transpose());
  mpf::write_matrix(dir / (name + "_components.mpf"), model.components);
  nlohmann::json j;
  j["k"] = model.k;
  j["eigenvalues"] = std::vector<double>(
      model.eigenvalues.data(), model.eigenvalues.data() + model.eigenvalues.size());
  std::ofstream os(dir / (name + "_pca.json"));
  if (!os) throw IoError("cannot write PCA sidecar for " + name);
  os << j.dump(2) << "\n";
}

PCAModel load_pca(const std::filesystem::path& dir, const std::string& name) {
  PCAModel model;
  const Matrix mean = mpf::read_matrix(dir / (name + "_mean.mpf"));
  model.mean = mean.row(0).transpose();
  model.components = mpf::read_matrix(dir / (name + "_components.mpf"));
  std::ifstream is(dir / (name + "_pca.json"));
  if (!is) throw IoError("cannot read PCA sidecar for " + name);
  nlohmann::json j;
  is >> j;
  model.k = j.at("k").get<Index>();
  const auto ev = j.at("eigenvalues").get<std::vector<double>>();
  model.eigenvalues = Eigen::Map<const Vector>(ev.data(),
                                               static_cast<Index>(ev.size()));
  return model;
}

}  // namespace multifuse::feat
