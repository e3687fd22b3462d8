#include "multifuse/linalg.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <string>

namespace multifuse {

EigResult sym_eig(const Eigen::Ref<const Matrix>& a) {
  if (a.rows() != a.cols()) {
    throw DimensionError("sym_eig: matrix is not square (" +
                         std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + ")");
  }
  const double scale = a.cwiseAbs().maxCoeff();
  const double asym = (a - a.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-9 * std::max(1.0, scale)) {
    throw DimensionError("sym_eig: matrix is not symmetric (max asymmetry " +
                         std::to_string(asym) + ")");
  }

  Eigen::SelfAdjointEigenSolver<Matrix> solver(0.5 * (a + a.transpose()));
  if (solver.info() != Eigen::Success) {
    throw ConvergenceError("sym_eig: eigensolver did not converge");
  }

  // Eigen returns ascending order; the PCA contract wants descending.
  EigResult out;
  out.values = solver.eigenvalues().reverse();
  out.vectors = solver.eigenvectors().rowwise().reverse();
  return out;
}

}  // namespace multifuse
