#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

#include "omnifield/core.hpp"

namespace omnifield {

/// Projects `count` feature vectors onto their top-3 principal components and
/// maps each component affinely to [0, 1]. Component signs are fixed so the
/// largest-magnitude loading is positive. Returns count x 3 values.
inline std::vector<double> pca_colorize(std::span<const double> features, std::size_t count, std::size_t dim) {
  require(features.size() == count * dim, "pca_colorize: size mismatch");
  std::vector<double> rgb(count * 3, 0.5);
  if (count == 0 || dim == 0) return rgb;
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> X(features.data(), static_cast<Eigen::Index>(count),
                                                                                             static_cast<Eigen::Index>(dim));
  const Eigen::RowVectorXd mean = X.colwise().mean();
  const Eigen::MatrixXd centered = X.rowwise() - mean;
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(count);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::Index comps = std::min<Eigen::Index>(3, static_cast<Eigen::Index>(dim));
  for (Eigen::Index c = 0; c < comps; ++c) {
    Eigen::VectorXd axis = eig.eigenvectors().col(static_cast<Eigen::Index>(dim) - 1 - c);  // ascending eigenvalue order
    Eigen::Index arg;
    axis.cwiseAbs().maxCoeff(&arg);
    if (axis[arg] < 0) axis = -axis;
    const Eigen::VectorXd proj = centered * axis;
    const double lo = proj.minCoeff(), hi = proj.maxCoeff();
    for (std::size_t i = 0; i < count; ++i)
      rgb[i * 3 + static_cast<std::size_t>(c)] = hi > lo ? (proj[static_cast<Eigen::Index>(i)] - lo) / (hi - lo) : 0.5;
  }
  return rgb;
}

}  // namespace omnifield
