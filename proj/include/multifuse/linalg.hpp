#pragma once

#include "multifuse/common.hpp"

#include <utility>

namespace multifuse {

struct EigResult {
  Vector values;   // descending
  Matrix vectors;  // orthonormal columns, vectors.col(i) pairs with values(i)
};

// Symmetric eigendecomposition. Input must be square and symmetric within
// 1e-9 relative tolerance; eigenvalues come back sorted descending with
// matching orthonormal eigenvector columns.
EigResult sym_eig(const Eigen::Ref<const Matrix>& a);

}  // namespace multifuse
