#pragma once

// Independent reference implementations used only by tests. Each one is
// written for clarity, not speed, and shares no code with the library.

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

namespace oracle {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

Matrix random_matrix(std::mt19937_64 &rng, Eigen::Index rows, Eigen::Index cols,
                     double scale = 1.0);
Matrix random_uniform(std::mt19937_64 &rng, Eigen::Index rows, Eigen::Index cols, double lo,
                      double hi);

// Greedy farthest-first trace recomputing every min-distance from scratch.
std::vector<std::size_t> greedy_coreset(const Matrix &points, std::size_t target,
                                        std::size_t start);

// s_j = min_r dis(q_j, r), double loop over rows.
std::vector<double> nearest_scores(const Matrix &query, const Matrix &refined, bool cosine);

// Fraction of (positive, negative) pairs ranked correctly, ties 1/2.
double pairwise_auroc(const std::vector<double> &scores, const std::vector<int> &labels);

// Central-difference gradient of f at x, entry by entry.
Matrix numeric_gradient(const std::function<double(const Matrix &)> &f, const Matrix &x,
                        double step);

// ||F - W M||^2 + lambda * sum_ij T_ij ||(W M)_i - M_j||^2 + eps sum T ln T
double refine_objective(const Matrix &f, const Matrix &m, const Matrix &w, const Matrix &t,
                        double lambda, double eps);

// sum_i ||F_i - W_i M||^2 + lambda ||mu_M - mean_i (W M)_i||^2
double ttt_objective(const Matrix &f, const Matrix &m, const Matrix &w, double lambda);

// Stationary point of ttt_objective with (G + rho I) in place of G, solved
// directly: the row mean of W satisfies one n x n system, after which every
// row is independent.
Matrix ttt_closed_form(const Matrix &f, const Matrix &m, double lambda, double rho);

// Unregularized OT value with uniform marginals 1/m, 1/n. Each row is split
// into n copies and each column into m, turning the problem into an
// mn x mn assignment solved by dynamic programming over column subsets.
// Requires m * n <= 20.
double uniform_ot_by_assignment(const Matrix &cost);

// Entropic plan for C = [[0, 1], [1, 0]] with uniform marginals.
Matrix symmetric_two_by_two_plan(double eps);

}  // namespace oracle
