#pragma once

#include <lapacke.h>

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace vppha::detail {

struct Triplet {
  std::size_t row, col;
  double value;
};

/// Square banded system solved with LAPACK's partial-pivoting band LU.
class BandedSystem {
 public:
  /// Bandwidths are fixed from the first sparsity pattern seen.
  void assemble(std::size_t n, const std::vector<Triplet>& entries) {
    if (n != n_ || !shaped_) {
      n_ = n;
      kl_ = ku_ = 0;
      for (const auto& t : entries) {
        if (t.row > t.col) kl_ = std::max(kl_, t.row - t.col);
        else ku_ = std::max(ku_, t.col - t.row);
      }
      ldab_ = 2 * kl_ + ku_ + 1;
      shaped_ = true;
    }
    ab_.assign(ldab_ * n_, 0.0);
    for (const auto& t : entries) {
      if ((t.row > t.col && t.row - t.col > kl_) || (t.col > t.row && t.col - t.row > ku_))
        throw std::logic_error("BandedSystem: entry outside band");
      ab_[(kl_ + ku_ + t.row - t.col) + t.col * ldab_] += t.value;
    }
  }

  /// Solves in place; returns false when the matrix is numerically singular.
  bool solve(std::vector<double>& rhs) {
    ipiv_.resize(n_);
    const lapack_int info = LAPACKE_dgbsv(LAPACK_COL_MAJOR, static_cast<lapack_int>(n_), static_cast<lapack_int>(kl_),
                                          static_cast<lapack_int>(ku_), 1, ab_.data(), static_cast<lapack_int>(ldab_),
                                          ipiv_.data(), rhs.data(), static_cast<lapack_int>(n_));
    return info == 0;
  }

  std::size_t lower_bandwidth() const { return kl_; }
  std::size_t upper_bandwidth() const { return ku_; }

 private:
  std::size_t n_ = 0, kl_ = 0, ku_ = 0, ldab_ = 0;
  bool shaped_ = false;
  std::vector<double> ab_;
  std::vector<lapack_int> ipiv_;
};

}  // namespace vppha::detail
