#pragma once

#include "multifuse/common.hpp"
#include "multifuse/dataset.hpp"

#include <filesystem>

namespace multifuse::feat {

// Per-modality PCA: mean, top-k orthonormal eigenvectors of the sample
// covariance, eigenvalues descending. The train-fit model is reused verbatim
// for dev/test projection.
struct PCAModel {
  Vector mean;
  Matrix components;   // d x k, orthonormal columns
  Vector eigenvalues;  // k, descending, non-negative
  Index k = 0;

  Index dim() const { return mean.size(); }
};

// Fit on rows of X (n x d). k is clamped to the numerical rank of the
// centered data (with a note on stderr) but must satisfy
// 1 <= k <= min(n-1, d) up front. When d > n the eigenvectors are recovered
// from the n x n Gram matrix instead of the d x d covariance.
PCAModel pca_fit(const Eigen::Ref<const Matrix>& x, Index k);

// (X - mean) * components
Matrix pca_transform(const PCAModel& model, const Eigen::Ref<const Matrix>& x);

// Arithmetic mean over frames.
Vector mean_pool(const data::FeatureSequence& seq);

// [z_a || z_v], audio block first.
Vector fuse_concat(const Vector& z_audio, const Vector& z_visual);

// w_c = N_max / N_c. Reproduces the binary rule w_pos = N_neg/N_pos with
// majority weight 1; every class must be present.
Vector class_weights(const std::vector<int>& labels, int num_classes);

void save_pca(const PCAModel& model, const std::filesystem::path& dir,
              const std::string& name);
PCAModel load_pca(const std::filesystem::path& dir, const std::string& name);

}  // namespace multifuse::feat
