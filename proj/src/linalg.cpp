#include "dmtrl/linalg.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "dmtrl/errors.hpp"

namespace dmtrl {

namespace {

using ColMatrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct JacobiOutput {
  ColMatrix u;
  Eigen::VectorXd s;
  ColMatrix v;
};

// Hestenes one-sided Jacobi on a matrix with rows >= cols. On return the
// columns of `b` are mutually orthogonal and b = a · v.
void orthogonalise_columns(ColMatrix& b, ColMatrix& v, const SvdOptions& options) {
  const Eigen::Index rows = b.rows();
  const Eigen::Index n = b.cols();
  v.setIdentity(n, n);
  Eigen::VectorXd norms(n);
  // Columns at rounding level relative to the whole matrix cannot be
  // orthogonalised meaningfully and are left alone.
  const double eps = std::numeric_limits<double>::epsilon();
  const double negligible = eps * eps * b.squaredNorm();

  for (std::size_t sweep = 0;; ++sweep) {
    if (sweep == options.max_sweeps)
      throw ConvergenceError("Jacobi SVD did not converge after " + std::to_string(sweep) + " sweeps", sweep);
    for (Eigen::Index k = 0; k < n; ++k) norms[k] = b.col(k).squaredNorm();

    bool rotated = false;
    for (Eigen::Index p = 0; p + 1 < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        double* bp = b.col(p).data();
        double* bq = b.col(q).data();
        double gamma = 0.0;
        for (Eigen::Index i = 0; i < rows; ++i) gamma += bp[i] * bq[i];
        const double alpha = norms[p], beta = norms[q];
        if (gamma == 0.0 || std::abs(gamma) <= options.tolerance * std::sqrt(alpha * beta)) continue;
        if (alpha <= negligible || beta <= negligible) continue;
        rotated = true;

        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (Eigen::Index i = 0; i < rows; ++i) {
          const double x = bp[i], y = bq[i];
          bp[i] = c * x - s * y;
          bq[i] = s * x + c * y;
        }
        double* vp = v.col(p).data();
        double* vq = v.col(q).data();
        for (Eigen::Index i = 0; i < n; ++i) {
          const double x = vp[i], y = vq[i];
          vp[i] = c * x - s * y;
          vq[i] = s * x + c * y;
        }
        norms[p] = alpha - t * gamma;
        norms[q] = beta + t * gamma;
        if (norms[p] < 0.0) norms[p] = b.col(p).squaredNorm();
        if (norms[q] < 0.0) norms[q] = b.col(q).squaredNorm();
      }
    }
    if (!rotated) return;
  }
}

// Replaces the listed columns of `u` by unit vectors orthogonal to every
// other column (already orthonormal ones first, then each completed one).
void complete_basis(ColMatrix& u, const std::vector<bool>& valid) {
  const Eigen::Index m = u.rows();
  std::vector<Eigen::Index> done;
  for (Eigen::Index j = 0; j < u.cols(); ++j)
    if (valid[static_cast<std::size_t>(j)]) done.push_back(j);
  Eigen::Index next_candidate = 0;
  for (Eigen::Index j = 0; j < u.cols(); ++j) {
    if (valid[static_cast<std::size_t>(j)]) continue;
    Eigen::VectorXd w;
    for (;; ++next_candidate) {
      if (next_candidate == m) throw std::logic_error("basis completion ran out of candidates");
      w = Eigen::VectorXd::Unit(m, next_candidate);
      for (int pass = 0; pass < 2; ++pass)
        for (auto k : done) w -= u.col(k).dot(w) * u.col(k);
      if (w.squaredNorm() > 1.0 / static_cast<double>(m + 1)) break;
    }
    ++next_candidate;
    u.col(j) = w.normalized();
    done.push_back(j);
  }
}

// SVD of a matrix with rows >= cols.
JacobiOutput svd_tall(const ColMatrix& a, const SvdOptions& options) {
  const Eigen::Index m = a.rows();
  const Eigen::Index n = a.cols();
  ColMatrix work;
  ColMatrix q_thin;
  const bool reduce = m > n;
  if (reduce) {
    Eigen::HouseholderQR<ColMatrix> qr(a);
    work = qr.matrixQR().topRows(n).triangularView<Eigen::Upper>();
    q_thin = qr.householderQ() * ColMatrix::Identity(m, n);
  } else {
    work = a;
  }

  ColMatrix v;
  orthogonalise_columns(work, v, options);

  Eigen::VectorXd sigma(n);
  for (Eigen::Index k = 0; k < n; ++k) sigma[k] = work.col(k).norm();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return sigma[x] > sigma[y]; });

  JacobiOutput out;
  out.s.resize(n);
  ColMatrix u_small(work.rows(), n);
  out.v.resize(n, n);
  const double sigma_max = n > 0 ? sigma[order.front()] : 0.0;
  const double cutoff = sigma_max * std::numeric_limits<double>::epsilon() * static_cast<double>(std::max(m, n));
  std::vector<bool> valid(static_cast<std::size_t>(n));
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto src = order[static_cast<std::size_t>(k)];
    out.s[k] = sigma[src];
    out.v.col(k) = v.col(src);
    const bool ok = sigma[src] > cutoff && sigma[src] > 0.0;
    valid[static_cast<std::size_t>(k)] = ok;
    if (ok)
      u_small.col(k) = work.col(src) / sigma[src];
    else
      u_small.col(k).setZero();
  }
  complete_basis(u_small, valid);
  out.u = reduce ? ColMatrix(q_thin * u_small) : u_small;
  return out;
}

Tensor to_tensor(const ColMatrix& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  Eigen::Map<RowMatrix>(t.data().data(), m.rows(), m.cols()) = m;
  return t;
}

}  // namespace

SvdResult thin_svd(const Tensor& m, const SvdOptions& options) {
  const std::size_t rows = m.rows(), cols = m.cols();
  for (double x : m.data())
    if (!std::isfinite(x)) throw std::invalid_argument("thin_svd: input has non-finite entries");

  Eigen::Map<const RowMatrix> view(m.data().data(), rows, cols);
  const bool wide = rows < cols;
  JacobiOutput j = wide ? svd_tall(view.transpose(), options) : svd_tall(view, options);
  if (wide) std::swap(j.u, j.v);

  for (Eigen::Index k = 0; k < j.u.cols(); ++k) {
    Eigen::Index arg = 0;
    j.u.col(k).cwiseAbs().maxCoeff(&arg);
    if (j.u(arg, k) < 0.0) {
      j.u.col(k) *= -1.0;
      j.v.col(k) *= -1.0;
    }
  }

  SvdResult out;
  out.u = to_tensor(j.u);
  out.v = to_tensor(j.v);
  out.s.assign(j.s.data(), j.s.data() + j.s.size());
  return out;
}

std::size_t rank_for_error(std::span<const double> s, double epsilon) {
  if (s.empty()) throw std::invalid_argument("rank_for_error: no singular values");
  if (!(epsilon >= 0.0 && epsilon < 1.0)) throw std::invalid_argument("rank_for_error: epsilon must lie in [0, 1)");
  std::vector<double> tail(s.size() + 1, 0.0);
  for (std::size_t i = s.size(); i-- > 0;) tail[i] = tail[i + 1] + s[i] * s[i];
  const double total = tail[0];
  if (total == 0.0) return 1;
  for (std::size_t k = 1; k <= s.size(); ++k)
    if (std::sqrt(tail[k]) <= epsilon * std::sqrt(total)) return k;
  return s.size();
}

SvdResult truncate(const SvdResult& svd, std::size_t k) {
  const std::size_t r = svd.s.size();
  if (k == 0 || k > r) throw std::invalid_argument("truncate: rank out of range");
  auto leading = [k](const Tensor& m) {
    Tensor out({m.rows(), k});
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < k; ++j) out(i, j) = m(i, j);
    return out;
  };
  return SvdResult{leading(svd.u), std::vector<double>(svd.s.begin(), svd.s.begin() + static_cast<long>(k)),
                   leading(svd.v)};
}

Tensor reconstruct(const SvdResult& svd) {
  Tensor scaled = svd.u;
  const std::size_t r = svd.s.size();
  for (std::size_t i = 0; i < scaled.rows(); ++i)
    for (std::size_t j = 0; j < r; ++j) scaled(i, j) *= svd.s[j];
  return matmul(scaled, svd.v, false, true);
}

}  // namespace dmtrl
