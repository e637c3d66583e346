#pragma once

#include "fastref/tensor_io.hpp"

#include <Eigen/Dense>

namespace fastref {

// All numerics run in double; f32 is the storage format only.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline Matrix to_matrix(const RowMatrixF &m) { return m.cast<double>(); }
inline Matrix to_matrix(const FlatFeatures &f) { return f.matrix().cast<double>(); }
inline Matrix to_matrix(const PrototypeBank &b) { return b.matrix().cast<double>(); }

inline RowMatrixF to_row_float(const Matrix &m) { return m.cast<float>(); }

// ||m_i||^2 for every row, accumulated column by column.
Vector row_squared_norms(const Matrix &m);

// Scales every row to unit L2 norm; zero rows are an invalid-input error.
Matrix normalize_rows(const Matrix &m);

}  // namespace fastref
