#pragma once

// Differentiable dense linear algebra: products, Cholesky factorisation and
// triangular solves. Explicit inverses are never formed.

#include <cmath>
#include <string>

#include "autodiff.hpp"

namespace gibayes {

namespace detail {

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + " needs a matrix, got " + shape_str(t.shape()));
}

inline void require_square(const Tensor& t, const char* op) {
  require_matrix(t, op);
  if (t.rows() != t.cols()) throw ShapeError(std::string(op) + " needs a square matrix, got " + shape_str(t.shape()));
}

inline Tensor tril(Tensor t) {
  const std::size_t n = t.rows(), m = t.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < m; ++j) t(i, j) = 0.0;
  return t;
}

// Plain Cholesky of the symmetrised input; throws with the failing pivot.
inline Tensor cholesky_factor(const Tensor& a) {
  const std::size_t n = a.rows();
  Tensor l({n, n});
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0) || !std::isfinite(d)) throw NotPositiveDefinite(j);
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = 0.5 * (a(i, j) + a(j, i));
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

inline void check_lower_diag(const Tensor& l) {
  for (std::size_t i = 0; i < l.rows(); ++i)
    if (l(i, i) == 0.0) throw SingularError("triangular matrix has zero diagonal entry at " + std::to_string(i));
}

// Solves l x = b (transpose=false) or lᵀ x = b (transpose=true).
inline Tensor lower_solve(const Tensor& l, const Tensor& b, bool transpose) {
  Tensor x = b;
  auto xm = x.mat();
  if (transpose)
    l.mat().transpose().triangularView<Eigen::Upper>().solveInPlace(xm);
  else
    l.mat().triangularView<Eigen::Lower>().solveInPlace(xm);
  return x;
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  detail::require_matrix(a.value(), "matmul");
  detail::require_matrix(b.value(), "matmul");
  if (a.cols() != b.rows())
    throw ShapeError("matmul inner extents disagree: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor out({a.rows(), b.cols()});
  out.mat().noalias() = a.value().mat() * b.value().mat();
  return Var::from_op(std::move(out), {a, b}, [](detail::Node& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) {
      Tensor g(pa.value.shape());
      g.mat().noalias() = n.grad.mat() * pb.value.mat().transpose();
      pa.accumulate(std::move(g));
    }
    if (pb.requires_grad) {
      Tensor g(pb.value.shape());
      g.mat().noalias() = pa.value.mat().transpose() * n.grad.mat();
      pb.accumulate(std::move(g));
    }
  });
}

/// Lower Cholesky factor of (a + aᵀ)/2.
inline Var cholesky(const Var& a) {
  detail::require_square(a.value(), "cholesky");
  Tensor l = detail::cholesky_factor(a.value());
  return Var::from_op(std::move(l), {a}, [](detail::Node& n) {
    // Ā = L⁻ᵀ Φ(Lᵀ L̄) L⁻¹, symmetrised; Φ keeps the lower triangle and halves
    // the diagonal.
    auto& p = *n.parents[0];
    const Tensor& L = n.value;
    const std::size_t sz = L.rows();
    Tensor phi({sz, sz});
    phi.mat().noalias() = L.mat().transpose() * n.grad.mat();
    for (std::size_t i = 0; i < sz; ++i) {
      phi(i, i) *= 0.5;
      for (std::size_t j = i + 1; j < sz; ++j) phi(i, j) = 0.0;
    }
    // X = L⁻ᵀ Φ, then Ā = (L⁻ᵀ Xᵀ)ᵀ = X L⁻¹
    Tensor x = detail::lower_solve(L, phi, true);
    Tensor xt({sz, sz});
    xt.mat() = x.mat().transpose();
    Tensor y = detail::lower_solve(L, xt, true);  // = L⁻ᵀ Xᵀ = (X L⁻¹)ᵀ
    Tensor g({sz, sz});
    g.mat() = 0.5 * (y.mat() + y.mat().transpose());
    p.accumulate(std::move(g));
  });
}

/// Solves l x = b for lower-triangular l (or lᵀ x = b when transpose is set).
inline Var triangular_solve(const Var& l, const Var& b, bool transpose = false) {
  detail::require_square(l.value(), "triangular_solve");
  detail::require_matrix(b.value(), "triangular_solve");
  if (l.rows() != b.rows())
    throw ShapeError("triangular_solve extents disagree: " + shape_str(l.shape()) + " vs " + shape_str(b.shape()));
  detail::check_lower_diag(l.value());
  Tensor x = detail::lower_solve(l.value(), b.value(), transpose);
  return Var::from_op(std::move(x), {l, b}, [transpose](detail::Node& n) {
    auto& pl = *n.parents[0];
    auto& pb = *n.parents[1];
    Tensor bbar = detail::lower_solve(pl.value, n.grad, !transpose);
    if (pl.requires_grad) {
      Tensor g(pl.value.shape());
      if (transpose)
        g.mat().noalias() = -(n.value.mat() * bbar.mat().transpose());
      else
        g.mat().noalias() = -(bbar.mat() * n.value.mat().transpose());
      pl.accumulate(detail::tril(std::move(g)));
    }
    if (pb.requires_grad) pb.accumulate(std::move(bbar));
  });
}

/// Main diagonal of a square matrix as a vector.
inline Var diag(const Var& a) {
  detail::require_square(a.value(), "diag");
  const std::size_t n = a.rows();
  Tensor d({n});
  for (std::size_t i = 0; i < n; ++i) d[i] = a.value()(i, i);
  return Var::from_op(std::move(d), {a}, [n](detail::Node& nd) {
    auto& p = *nd.parents[0];
    Tensor g({n, n});
    for (std::size_t i = 0; i < n; ++i) g(i, i) = nd.grad[i];
    p.accumulate(std::move(g));
  });
}

/// Square matrix with the given vector on its diagonal.
inline Var diag_embed(const Var& v) {
  const std::size_t n = v.size();
  Tensor m({n, n});
  for (std::size_t i = 0; i < n; ++i) m(i, i) = v.value()[i];
  return Var::from_op(std::move(m), {v}, [n](detail::Node& nd) {
    auto& p = *nd.parents[0];
    Tensor g(p.value.shape());
    for (std::size_t i = 0; i < n; ++i) g[i] = nd.grad(i, i);
    p.accumulate(std::move(g));
  });
}

inline Var trace(const Var& a) { return sum(diag(a)); }

/// I_copies ⊗ a: block-diagonal matrix repeating `a`.
inline Var kron_identity(std::size_t copies, const Var& a) {
  detail::require_square(a.value(), "kron_identity");
  const std::size_t m = a.rows();
  const std::size_t n = copies * m;
  Tensor out({n, n});
  for (std::size_t c = 0; c < copies; ++c)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) out(c * m + i, c * m + j) = a.value()(i, j);
  return Var::from_op(std::move(out), {a}, [copies, m](detail::Node& nd) {
    auto& p = *nd.parents[0];
    Tensor g({m, m});
    for (std::size_t c = 0; c < copies; ++c)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j) g(i, j) += nd.grad(c * m + i, c * m + j);
    p.accumulate(std::move(g));
  });
}

/// log|A| from a Cholesky factor L of A.
inline Var logdet_from_chol(const Var& l) { return scale(sum(log(diag(l))), 2.0); }

/// Squared Frobenius norm.
inline Var sum_squares(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v * v;
  return Var::from_op(Tensor::scalar(s), {x}, [](detail::Node& n) {
    auto& p = *n.parents[0];
    Tensor g(p.value.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = 2.0 * n.grad[0] * p.value[i];
    p.accumulate(std::move(g));
  });
}

/// Mean of the diagonal, as a plain number (used to size jitter).
inline double mean_diagonal(const Tensor& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) s += a(i, i);
  return a.rows() ? s / static_cast<double>(a.rows()) : 0.0;
}

/// a + c·I where c is a constant.
inline Var add_identity(const Var& a, double c) {
  detail::require_square(a.value(), "add_identity");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.rows(); ++i) out(i, i) += c;
  return Var::from_op(std::move(out), {a}, [](detail::Node& n) { n.parents[0]->accumulate(n.grad); });
}

/// Cholesky with a jitter ladder: tries a + rel·mean(diag a)·I for each
/// relative jitter in turn. The jitter scales with a and is differentiated
/// through, so the factor is a smooth function of a within one rung.
inline Var jittered_cholesky(const Var& a, std::initializer_list<double> ladder = {1e-8, 1e-6, 1e-4}) {
  detail::require_square(a.value(), "jittered_cholesky");
  const bool relative = mean_diagonal(a.value()) > 0.0;
  const Var eye = Var::constant(Tensor::eye(a.rows()));
  std::size_t pivot = 0;
  for (double rel : ladder) {
    try {
      if (rel == 0.0) return cholesky(a);
      return cholesky(relative ? a + scale(mean(diag(a)), rel) * eye : add_identity(a, rel));
    } catch (const NotPositiveDefinite& e) {
      pivot = e.pivot();
    }
  }
  throw NotPositiveDefinite(pivot);
}

}  // namespace gibayes
