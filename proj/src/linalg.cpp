#include "fastref/linalg.hpp"

#include "fastref/error.hpp"

#include <string>

namespace fastref {

Vector row_squared_norms(const Matrix &m) {
  Vector out = Vector::Zero(m.rows());
  for (Eigen::Index k = 0; k < m.cols(); ++k) out.array() += m.col(k).array().square();
  return out;
}

Matrix normalize_rows(const Matrix &m) {
  const Vector norms = m.rowwise().norm();
  for (Eigen::Index i = 0; i < norms.size(); ++i) {
    if (!(norms(i) > 0.0)) {
      fail(ErrorCode::invalid_input, "row " + std::to_string(i) + " has zero norm");
    }
  }
  return norms.cwiseInverse().asDiagonal() * m;
}

}  // namespace fastref
