#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

namespace synthcount::ranking {

enum class Space { label, prediction, feature };

struct SimilarityMatrix {
    Eigen::MatrixXd values;
    Space space = Space::label;

    Eigen::Index size() const { return values.rows(); }
};

// Permutation of 1..n; rank 1 is the largest entry.
using RankVector = Eigen::VectorXi;

// [S]_ij = -|y_i - y_j|
SimilarityMatrix label_similarity(std::span<const int> labels);
SimilarityMatrix pred_similarity(const Eigen::VectorXd& predictions);

// Cosine similarity between rows of `features` (n x d). Throws ZeroVector.
SimilarityMatrix feature_similarity(const Eigen::MatrixXd& features);

// Descending ranks with ties broken by lower index first.
RankVector rk(const Eigen::VectorXd& v);

// Blackbox interpolation gradient of rk at v for the upstream signal dL/drk:
//   -(rk(v) - rk(v + lambda_bb * upstream)) / lambda_bb
Eigen::VectorXd rk_grad(const Eigen::VectorXd& v, const Eigen::VectorXd& upstream,
                        double lambda_bb);

struct SortLoss {
    double total = 0.0;
    double l_y = 0.0;
    double l_z = 0.0;
    // d total / d S^yhat and d total / d S^z, row by row through rk_grad.
    Eigen::MatrixXd grad_pred;
    Eigen::MatrixXd grad_feat;
};

// total = l_y + lambda_weight * l_z, where each term sums the squared rank differences
// between rows of S^y and the matching rows of S^yhat (resp. S^z).
SortLoss sort_loss(const SimilarityMatrix& s_y, const SimilarityMatrix& s_yhat,
                   const SimilarityMatrix& s_z, double lambda_weight, double lambda_bb = 0.5);

// Chain rule through the similarity constructions.
Eigen::VectorXd pred_similarity_backward(const Eigen::VectorXd& predictions,
                                         const Eigen::MatrixXd& grad_s);
Eigen::MatrixXd feature_similarity_backward(const Eigen::MatrixXd& features,
                                            const Eigen::MatrixXd& grad_s);

// Spearman rank correlation (average ranks for ties).
double spearman(std::span<const double> a, std::span<const double> b);

}  // namespace synthcount::ranking
