#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace mortdef {

/// Jitter ladder exhausted without a positive-definite factorization.
class NotPositiveDefinite : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class KernelVariant { SqExpAge, SqExpYear, SqExp2D };

/// Squared-exponential kernels over raw ages and calendar years.
///
/// Input points are rows of a matrix: one column (age or year) for the 1D
/// variants, two columns (age, year) for the separable 2D variant.
template <typename Scalar>
struct KernelSpec {
  KernelVariant variant = KernelVariant::SqExpAge;
  Scalar process_variance = 1;
  std::optional<Scalar> lengthscale_age;
  std::optional<Scalar> lengthscale_year;

  static KernelSpec age(Scalar variance, Scalar lengthscale) {
    return {KernelVariant::SqExpAge, variance, lengthscale, std::nullopt};
  }
  static KernelSpec year(Scalar variance, Scalar lengthscale) {
    return {KernelVariant::SqExpYear, variance, std::nullopt, lengthscale};
  }
  static KernelSpec separable(Scalar variance, Scalar lengthscale_age, Scalar lengthscale_year) {
    return {KernelVariant::SqExp2D, variance, lengthscale_age, lengthscale_year};
  }

  Eigen::Index input_dim() const { return variant == KernelVariant::SqExp2D ? 2 : 1; }

  void validate() const {
    auto ok = [](Scalar v) { return std::isfinite(static_cast<double>(v)) && v > Scalar(0); };
    if (!ok(process_variance)) throw std::invalid_argument("kernel: process variance must be positive");
    const bool need_age = variant != KernelVariant::SqExpYear;
    const bool need_year = variant != KernelVariant::SqExpAge;
    if (need_age != lengthscale_age.has_value() || need_year != lengthscale_year.has_value())
      throw std::invalid_argument("kernel: lengthscales do not match variant");
    if (need_age && !ok(*lengthscale_age)) throw std::invalid_argument("kernel: age lengthscale must be positive");
    if (need_year && !ok(*lengthscale_year))
      throw std::invalid_argument("kernel: year lengthscale must be positive");
  }

  /// Squared distance scaled by the lengthscales, halved.
  template <typename A, typename B>
  Scalar scaled_half_sqdist(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) const {
    switch (variant) {
      case KernelVariant::SqExpAge: {
        const Scalar d = (a(0) - b(0)) / *lengthscale_age;
        return d * d / 2;
      }
      case KernelVariant::SqExpYear: {
        const Scalar d = (a(0) - b(0)) / *lengthscale_year;
        return d * d / 2;
      }
      case KernelVariant::SqExp2D: {
        const Scalar da = (a(0) - b(0)) / *lengthscale_age;
        const Scalar dy = (a(1) - b(1)) / *lengthscale_year;
        return (da * da + dy * dy) / 2;
      }
    }
    return Scalar(0);
  }
};

template <typename Scalar>
using PointMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar, typename A, typename B>
Scalar kernel_eval(const KernelSpec<Scalar>& k, const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  if (a.size() != k.input_dim() || b.size() != k.input_dim())
    throw std::invalid_argument("kernel_eval: point dimension does not match kernel variant");
  using std::exp;
  return k.process_variance * exp(-k.scaled_half_sqdist(a, b));
}

template <typename Scalar, typename A, typename B>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> cross_covariance(const KernelSpec<Scalar>& k,
                                                                       const Eigen::MatrixBase<A>& rows,
                                                                       const Eigen::MatrixBase<B>& cols) {
  if (rows.cols() != k.input_dim() || cols.cols() != k.input_dim())
    throw std::invalid_argument("covariance: point dimension does not match kernel variant");
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> c(rows.rows(), cols.rows());
  using std::exp;
  for (Eigen::Index j = 0; j < cols.rows(); ++j)
    for (Eigen::Index i = 0; i < rows.rows(); ++i)
      c(i, j) = k.process_variance * exp(-k.scaled_half_sqdist(rows.row(i), cols.row(j)));
  return c;
}

template <typename Scalar, typename P>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> build_covariance(const KernelSpec<Scalar>& k,
                                                                       const Eigen::MatrixBase<P>& points) {
  if (points.rows() == 0) throw std::invalid_argument("build_covariance: empty point list");
  auto c = cross_covariance(k, points, points);
  // exact symmetry and an exact sigma^2 diagonal
  c.template triangularView<Eigen::StrictlyUpper>() = c.transpose().template triangularView<Eigen::StrictlyUpper>();
  c.diagonal().setConstant(k.process_variance);
  return c;
}

template <typename Scalar>
struct CholeskyFactor {
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> lower;
  Scalar jitter_used = 0;

  Eigen::Index size() const { return lower.rows(); }
  /// log det(L L^T)
  Scalar log_det() const { return 2 * lower.diagonal().array().log().sum(); }
  /// (L L^T)^{-1} b
  template <typename Rhs>
  auto solve(const Eigen::MatrixBase<Rhs>& b) const {
    using Result = Eigen::Matrix<Scalar, Eigen::Dynamic, Rhs::ColsAtCompileTime>;
    Result x = b;
    lower.template triangularView<Eigen::Lower>().solveInPlace(x);
    lower.transpose().template triangularView<Eigen::Upper>().solveInPlace(x);
    return x;
  }
};

/// Jitter ladder {0, 1e-10, 1e-9, ..., 1e-4}, added to the diagonal.
template <typename Scalar, typename M>
CholeskyFactor<Scalar> cholesky_with_jitter(const Eigen::MatrixBase<M>& matrix) {
  if (matrix.rows() != matrix.cols()) throw std::invalid_argument("cholesky: matrix must be square");
  if (((matrix - matrix.transpose()).cwiseAbs().maxCoeff()) > Scalar(1e-10))
    throw std::invalid_argument("cholesky: matrix is not symmetric");
  const Eigen::Index n = matrix.rows();
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> work(n, n);
  Scalar jitter = 0;
  for (int step = 0; step <= 7; ++step) {
    jitter = step == 0 ? Scalar(0) : Scalar(std::pow(10.0, -11 + step));
    work = matrix;
    work.diagonal().array() += jitter;
    Eigen::LLT<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>> llt(work);
    if (llt.info() == Eigen::Success && (llt.matrixL().toDenseMatrix().diagonal().array() > Scalar(0)).all())
      return {llt.matrixL(), jitter};
  }
  throw NotPositiveDefinite("matrix is not positive definite even with jitter 1e-4");
}

/// mean + L z. With z ~ N(0, I) the result is ~ N(mean, L L^T).
template <typename Scalar, typename Mean, typename Z>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> whiten_transform(const Eigen::MatrixBase<Mean>& mean,
                                                          const CholeskyFactor<Scalar>& chol,
                                                          const Eigen::MatrixBase<Z>& z) {
  if (mean.size() != chol.size() || z.size() != chol.size())
    throw std::invalid_argument("whiten_transform: dimension mismatch");
  return mean + chol.lower.template triangularView<Eigen::Lower>() * z;
}

template <typename Scalar>
using MeanFunction = std::function<Scalar(const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>&)>;

template <typename Scalar, typename P>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> evaluate_mean(const MeanFunction<Scalar>& mean_fn,
                                                       const Eigen::MatrixBase<P>& points) {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> m(points.rows());
  for (Eigen::Index i = 0; i < points.rows(); ++i) m(i) = mean_fn(points.row(i));
  return m;
}

template <typename Scalar>
struct GpPosterior {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> mean;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> covariance;
};

/// Noise-free conditioning of GP(mean_fn, k) on exact observations.
template <typename Scalar, typename Ptrain, typename Vals, typename Ptest>
GpPosterior<Scalar> gp_condition(const KernelSpec<Scalar>& k, const MeanFunction<Scalar>& mean_fn,
                                 const Eigen::MatrixBase<Ptrain>& train_points,
                                 const Eigen::MatrixBase<Vals>& train_values,
                                 const Eigen::MatrixBase<Ptest>& test_points) {
  if (train_points.rows() != train_values.size())
    throw std::invalid_argument("gp_condition: train points and values differ in length");
  if (!train_values.allFinite()) throw std::invalid_argument("gp_condition: non-finite training values");
  GpPosterior<Scalar> post;
  post.mean = evaluate_mean(mean_fn, test_points);
  post.covariance = build_covariance(k, test_points);
  if (train_points.rows() == 0) return post;

  const auto chol = cholesky_with_jitter<Scalar>(build_covariance(k, train_points));
  const auto k_cross = cross_covariance(k, train_points, test_points); // n_train x n_test
  const auto resid = (train_values - evaluate_mean(mean_fn, train_points)).eval();
  post.mean += k_cross.transpose() * chol.solve(resid);
  const auto v = chol.lower.template triangularView<Eigen::Lower>().solve(k_cross).eval();
  post.covariance -= v.transpose() * v;
  post.covariance = ((post.covariance + post.covariance.transpose()) / 2).eval();
  return post;
}

/// log N(values; mean, C + noise I).
template <typename Scalar, typename P, typename Vals>
Scalar gp_log_marginal_likelihood(const KernelSpec<Scalar>& k, Scalar noise_variance,
                                  const MeanFunction<Scalar>& mean_fn, const Eigen::MatrixBase<P>& points,
                                  const Eigen::MatrixBase<Vals>& values) {
  if (noise_variance < 0) throw std::invalid_argument("gp_log_marginal_likelihood: negative noise");
  if (points.rows() != values.size()) throw std::invalid_argument("gp_log_marginal_likelihood: size mismatch");
  auto cov = build_covariance(k, points);
  cov.diagonal().array() += noise_variance;
  const auto chol = cholesky_with_jitter<Scalar>(cov);
  const auto resid = (values - evaluate_mean(mean_fn, points)).eval();
  const auto alpha = chol.lower.template triangularView<Eigen::Lower>().solve(resid).eval();
  const Scalar n = static_cast<Scalar>(points.rows());
  return -alpha.squaredNorm() / 2 - chol.log_det() / 2 - n * Scalar(0.91893853320467274178);
}

} // namespace mortdef
