#ifndef GSC_STATS_HPP
#define GSC_STATS_HPP

#include <vector>

#include "gsc/linalg.hpp"

namespace gsc {

/// Posterior expectations <s>, <s s^T>, <s⊙z>, <(s⊙z)(s⊙z)^T> for one point
/// or summed over points, plus the data cross-moment Σ_n y_n <s⊙z>_n^T the
/// M-step needs for W.
template <typename Scalar>
struct SufficientStats {
  VectorX<Scalar> Es;
  MatrixX<Scalar> Ess;
  VectorX<Scalar> Esz;
  MatrixX<Scalar> Eszsz;
  MatrixX<Scalar> YEsz;       // D x H
  Scalar log_norm_sum = 0;    // Σ_n log Σ_{s∈K_n} p(y_n, s)
  long n_count = 0;
  long n_fallback = 0;        // points whose weights underflowed to uniform

  static SufficientStats zeros(int D, int H) {
    SufficientStats s;
    s.Es = VectorX<Scalar>::Zero(H);
    s.Ess = MatrixX<Scalar>::Zero(H, H);
    s.Esz = VectorX<Scalar>::Zero(H);
    s.Eszsz = MatrixX<Scalar>::Zero(H, H);
    s.YEsz = MatrixX<Scalar>::Zero(D, H);
    return s;
  }

  SufficientStats& operator+=(const SufficientStats& o) {
    Es += o.Es;
    Ess += o.Ess;
    Esz += o.Esz;
    Eszsz += o.Eszsz;
    YEsz += o.YEsz;
    log_norm_sum += o.log_norm_sum;
    n_count += o.n_count;
    n_fallback += o.n_fallback;
    return *this;
  }
};

/// Pairwise (tree) reduction in index order. The bracketing depends only on
/// parts.size(), never on how the parts were scheduled.
template <typename Scalar>
SufficientStats<Scalar> tree_reduce(std::vector<SufficientStats<Scalar>> parts) {
  if (parts.empty()) return {};
  for (std::size_t stride = 1; stride < parts.size(); stride *= 2)
    for (std::size_t i = 0; i + stride < parts.size(); i += 2 * stride) parts[i] += parts[i + stride];
  return std::move(parts.front());
}

}  // namespace gsc

#endif  // GSC_STATS_HPP
