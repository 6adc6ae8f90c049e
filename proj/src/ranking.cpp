#include "synthcount/ranking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "synthcount/errors.hpp"

namespace synthcount::ranking {

SimilarityMatrix label_similarity(std::span<const int> labels) {
    const auto n = static_cast<Eigen::Index>(labels.size());
    if (n < 2) throw Error(ErrorCode::InvalidArgument, "need at least two labels");
    SimilarityMatrix s{Eigen::MatrixXd(n, n), Space::label};
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            s.values(i, j) = -std::abs(static_cast<double>(labels[static_cast<size_t>(i)]) -
                                       labels[static_cast<size_t>(j)]);
        }
    }
    return s;
}

SimilarityMatrix pred_similarity(const Eigen::VectorXd& predictions) {
    const auto n = predictions.size();
    if (n < 2) throw Error(ErrorCode::InvalidArgument, "need at least two predictions");
    SimilarityMatrix s{Eigen::MatrixXd(n, n), Space::prediction};
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            s.values(i, j) = -std::abs(predictions(i) - predictions(j));
        }
    }
    return s;
}

SimilarityMatrix feature_similarity(const Eigen::MatrixXd& features) {
    const auto n = features.rows();
    const Eigen::VectorXd norms = features.rowwise().norm();
    for (Eigen::Index i = 0; i < n; ++i) {
        if (!(norms(i) > 0.0)) throw Error(ErrorCode::ZeroVector, "feature row has zero norm");
    }
    SimilarityMatrix s{Eigen::MatrixXd(n, n), Space::feature};
    for (Eigen::Index i = 0; i < n; ++i) {
        s.values(i, i) = 1.0;
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const double c = features.row(i).dot(features.row(j)) / (norms(i) * norms(j));
            s.values(i, j) = s.values(j, i) = std::clamp(c, -1.0, 1.0);
        }
    }
    return s;
}

RankVector rk(const Eigen::VectorXd& v) {
    const auto n = v.size();
    std::vector<Eigen::Index> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&v](Eigen::Index a, Eigen::Index b) { return v(a) > v(b); });
    RankVector ranks(n);
    for (Eigen::Index pos = 0; pos < n; ++pos) {
        ranks(order[static_cast<size_t>(pos)]) = static_cast<int>(pos) + 1;
    }
    return ranks;
}

Eigen::VectorXd rk_grad(const Eigen::VectorXd& v, const Eigen::VectorXd& upstream,
                        double lambda_bb) {
    if (!(lambda_bb > 0.0)) throw Error(ErrorCode::BadLambda, "lambda_bb must be positive");
    if (upstream.size() != v.size()) {
        throw Error(ErrorCode::ShapeMismatch, "upstream gradient length differs from input");
    }
    const Eigen::VectorXd perturbed = v + lambda_bb * upstream;
    const Eigen::VectorXd base = rk(v).cast<double>();
    const Eigen::VectorXd moved = rk(perturbed).cast<double>();
    return -(base - moved) / lambda_bb;
}

namespace {

void require_square(const SimilarityMatrix& s, Eigen::Index n, const char* name) {
    if (s.values.rows() != n || s.values.cols() != n) {
        throw Error(ErrorCode::ShapeMismatch, std::string(name) + " must be " +
                                                  std::to_string(n) + "x" + std::to_string(n));
    }
}

// Adds one loss term; returns its value and writes the row gradients of `weight * term`.
double rank_term(const Eigen::MatrixXd& target, const Eigen::MatrixXd& estimate, double weight,
                 double lambda_bb, Eigen::MatrixXd& grad) {
    const auto n = target.rows();
    grad.setZero(n, n);
    double term = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::VectorXd row = estimate.row(i).transpose();
        const Eigen::VectorXd r_target = rk(target.row(i).transpose()).cast<double>();
        const Eigen::VectorXd r_est = rk(row).cast<double>();
        const Eigen::VectorXd diff = r_target - r_est;
        term += diff.squaredNorm();
        if (weight != 0.0) {
            const Eigen::VectorXd upstream = -2.0 * weight * diff;
            grad.row(i) = rk_grad(row, upstream, lambda_bb).transpose();
        }
    }
    return term;
}

}  // namespace

SortLoss sort_loss(const SimilarityMatrix& s_y, const SimilarityMatrix& s_yhat,
                   const SimilarityMatrix& s_z, double lambda_weight, double lambda_bb) {
    const auto n = s_y.values.rows();
    require_square(s_y, n, "S^y");
    require_square(s_yhat, n, "S^yhat");
    require_square(s_z, n, "S^z");
    if (!(lambda_bb > 0.0)) throw Error(ErrorCode::BadLambda, "lambda_bb must be positive");
    SortLoss out;
    out.l_y = rank_term(s_y.values, s_yhat.values, 1.0, lambda_bb, out.grad_pred);
    out.l_z = rank_term(s_y.values, s_z.values, lambda_weight, lambda_bb, out.grad_feat);
    out.total = out.l_y + lambda_weight * out.l_z;
    return out;
}

Eigen::VectorXd pred_similarity_backward(const Eigen::VectorXd& predictions,
                                         const Eigen::MatrixXd& grad_s) {
    const auto n = predictions.size();
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            if (i == j) continue;
            const double d = predictions(i) - predictions(j);
            const double sign = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
            // S_ij = -|p_i - p_j|
            grad(i) -= grad_s(i, j) * sign;
            grad(j) += grad_s(i, j) * sign;
        }
    }
    return grad;
}

Eigen::MatrixXd feature_similarity_backward(const Eigen::MatrixXd& features,
                                            const Eigen::MatrixXd& grad_s) {
    const auto n = features.rows();
    const Eigen::VectorXd norms = features.rowwise().norm();
    Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(n, features.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            if (i == j || grad_s(i, j) == 0.0) continue;
            const double inv = 1.0 / (norms(i) * norms(j));
            const double cos = features.row(i).dot(features.row(j)) * inv;
            grad.row(i) += grad_s(i, j) *
                           (features.row(j) * inv - cos * features.row(i) / (norms(i) * norms(i)));
            grad.row(j) += grad_s(i, j) *
                           (features.row(i) * inv - cos * features.row(j) / (norms(j) * norms(j)));
        }
    }
    return grad;
}

namespace {

std::vector<double> average_ranks(std::span<const double> x) {
    std::vector<size_t> order(x.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(), [&x](size_t a, size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(x.size());
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.size() < 2) {
        throw Error(ErrorCode::ShapeMismatch, "spearman needs two equal-length series");
    }
    const auto ra = average_ranks(a);
    const auto rb = average_ranks(b);
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
    double cov = 0.0;
    double va = 0.0;
    double vb = 0.0;
    for (size_t i = 0; i < ra.size(); ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (va == 0.0 || vb == 0.0) return 0.0;
    return cov / std::sqrt(va * vb);
}

}  // namespace synthcount::ranking
