#pragma once

// Recovery curves: a known level S at t = 0, an instantaneous drop at the
// event, then a monotone exponential rise toward an asymptote <= S.
//
//   g(t; A, B, C) = (1 - A) * (1 - B * exp(-t / C))     t > 0
//   f(t; S, A, B, C) = S            t = 0
//                    = S * g(t)     t > 0

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/math/tools/minima.hpp>

namespace recovery {

/// (A, B, C) of a scaled recovery trajectory.
///   A: asymptotic proportional drop, in [0, 1]
///   B: initial proportional drop in excess of the asymptotic drop, in [0, 1]
///   C: recovery time constant in months, > 0
struct ShapeParams {
  double A = 0.0;
  double B = 0.0;
  double C = 1.0;

  bool is_valid() const noexcept {
    return A >= 0.0 && A <= 1.0 && B >= 0.0 && B <= 1.0 && C > 0.0 &&
           std::isfinite(C);
  }
};

struct RecoveryCurve {
  double S = 1.0;  // pre-treatment level in [0, 1]
  ShapeParams shape;
};

class FitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

// Unchecked closed form. Used in hot loops where the caller guarantees t > 0.
inline double shape_value(double A, double B, double C, double t) noexcept {
  return (1.0 - A) * (1.0 - B * std::exp(-t / C));
}

inline void require_valid(const ShapeParams& s, const char* who) {
  if (!s.is_valid()) {
    throw std::domain_error(std::string(who) +
                            ": shape requires A,B in [0,1] and C > 0");
  }
}

}  // namespace detail

inline double eval_shape(const ShapeParams& shape, double t) {
  detail::require_valid(shape, "eval_shape");
  if (!std::isfinite(t) || t <= 0.0) {
    throw std::domain_error("eval_shape: t must be finite and > 0");
  }
  return detail::shape_value(shape.A, shape.B, shape.C, t);
}

inline double eval_curve(const RecoveryCurve& curve, double t) {
  if (!(curve.S >= 0.0 && curve.S <= 1.0)) {
    throw std::domain_error("eval_curve: S must lie in [0,1]");
  }
  if (std::isnan(t) || t < 0.0) {
    throw std::domain_error("eval_curve: t must be >= 0");
  }
  if (t == 0.0) return curve.S;
  if (std::isinf(t)) {
    detail::require_valid(curve.shape, "eval_curve");
    return curve.S * (1.0 - curve.shape.A);
  }
  return curve.S * eval_shape(curve.shape, t);
}

/// Scaled level approached as t -> infinity.
inline double asymptote(const ShapeParams& shape) {
  detail::require_valid(shape, "asymptote");
  return 1.0 - shape.A;
}

/// Scaled level immediately after the event (t -> 0+).
inline double value_at_zero_plus(const ShapeParams& shape) {
  detail::require_valid(shape, "value_at_zero_plus");
  return (1.0 - shape.A) * (1.0 - shape.B);
}

// ---------------------------------------------------------------------------
// Least-squares fitting
// ---------------------------------------------------------------------------

struct CurvePoint {
  double t = 0.0;
  double v = 0.0;
};

/// Whether the fitted asymptote 1 - A is capped at 1 (A in [0,1]) or only
/// bounded below (A in (-inf, 1]).
enum class Asymptote { constrained, free };

struct ShapeFit {
  double A = 0.0;
  double B = 0.0;
  double C = 1.0;
  double residual = 0.0;  // sum of squared residuals

  double operator()(double t) const noexcept {
    return detail::shape_value(A, B, C, t);
  }
  /// Only meaningful when A >= 0, i.e. always for a constrained fit.
  ShapeParams params() const { return ShapeParams{A, B, C}; }
};

struct FitOptions {
  Asymptote asymptote = Asymptote::constrained;
  double c_min = 1e-2;
  double c_max = 1e4;
  std::size_t grid_points = 241;
  // C reported when B is unidentified (geometric midpoint of [0.5, 96]).
  double c_tie = std::sqrt(0.5 * 96.0);
};

namespace detail {

struct ProfilePoint {
  double u = 0.0;  // 1 - A
  double w = 0.0;  // (1 - A) * B
  double rss = std::numeric_limits<double>::infinity();
};

inline double profile_rss(std::span<const CurvePoint> pts,
                          std::span<const double> e, double u, double w) {
  double rss = 0.0;
  for (std::size_t j = 0; j < pts.size(); ++j) {
    const double r = pts[j].v - (u - w * e[j]);
    rss += r * r;
  }
  return rss;
}

// For a fixed C the model u - w*e(t) is linear in (u, w). Minimises the
// squared error over the feasible polygon 0 <= w <= u (<= 1 when capped).
// The problem is a convex QP, so the optimum is either the unconstrained
// solution or lies on one of the polygon edges.
inline ProfilePoint solve_linear_part(std::span<const CurvePoint> pts,
                                      std::span<const double> e,
                                      double u_max) {
  const double n = static_cast<double>(pts.size());
  double se = 0, see = 0, sv = 0, sve = 0;
  double s1e2 = 0, sv1e = 0;
  for (std::size_t j = 0; j < pts.size(); ++j) {
    const double v = pts[j].v;
    se += e[j];
    see += e[j] * e[j];
    sv += v;
    sve += v * e[j];
    const double one_minus = 1.0 - e[j];
    s1e2 += one_minus * one_minus;
    sv1e += v * one_minus;
  }

  auto feasible = [u_max](double u, double w) {
    constexpr double tol = 1e-14;
    return u >= -tol && u <= u_max + tol && w >= -tol && w <= u + tol;
  };

  ProfilePoint best;
  auto consider = [&](double u, double w) {
    u = std::clamp(u, 0.0, u_max);
    w = std::clamp(w, 0.0, u);
    const double rss = profile_rss(pts, e, u, w);
    if (rss < best.rss) best = ProfilePoint{u, w, rss};
  };

  // Unconstrained: minimise ||v - u + w e||^2.
  //   [ n   -se ] [u]   [ sv  ]
  //   [ -se see ] [w] = [ -sve]
  const double det = n * see - se * se;
  if (std::abs(det) > 1e-12 * std::max(1.0, n * see)) {
    const double u = (sv * see - se * sve) / det;
    const double w = (se * sv - n * sve) / det;
    if (feasible(u, w)) consider(u, w);
  }
  // w = 0: flat at u.
  consider(sv / n, 0.0);
  // u = u_max: w free in [0, u_max].
  if (std::isfinite(u_max)) {
    const double w = see > 0.0 ? (u_max * se - sve) / see : 0.0;
    consider(u_max, w);
  }
  // w = u: g = u (1 - e).
  if (s1e2 > 0.0) {
    const double u = std::clamp(sv1e / s1e2, 0.0, u_max);
    const double rss = profile_rss(pts, e, u, u);
    if (rss < best.rss) best = ProfilePoint{u, u, rss};
  }
  return best;
}

}  // namespace detail

/// Least-squares fit of the recovery shape to (t, v) points.
///
/// Variable projection: the model is linear in ((1-A), (1-A)B) once C is
/// fixed, so the linear part is solved exactly under the box constraints
/// and the remaining one-dimensional profile in log C is searched on a
/// log grid, with every local grid minimum refined by Brent's method.
/// Deterministic for a given input.
inline ShapeFit fit_shape(std::span<const CurvePoint> points,
                          const FitOptions& opts = {}) {
  if (points.size() < 3) {
    throw FitError("fit_shape: need at least 3 points");
  }
  double t_lo = std::numeric_limits<double>::infinity();
  double t_hi = -t_lo;
  for (const auto& p : points) {
    if (!std::isfinite(p.t) || p.t <= 0.0 || !std::isfinite(p.v)) {
      throw FitError("fit_shape: times must be finite and > 0, values finite");
    }
    t_lo = std::min(t_lo, p.t);
    t_hi = std::max(t_hi, p.t);
  }
  if (t_hi - t_lo <= 0.0) {
    throw FitError("fit_shape: all points share the same time");
  }

  const double u_max = opts.asymptote == Asymptote::constrained
                           ? 1.0
                           : std::numeric_limits<double>::infinity();
  std::vector<double> e(points.size());

  auto profile = [&](double log_c) {
    const double c = std::exp(log_c);
    for (std::size_t j = 0; j < points.size(); ++j) {
      e[j] = std::exp(-points[j].t / c);
    }
    return detail::solve_linear_part(points, e, u_max);
  };

  const double lo = std::log(opts.c_min);
  const double hi = std::log(opts.c_max);
  const std::size_t n_grid = std::max<std::size_t>(opts.grid_points, 3);
  std::vector<double> grid(n_grid);
  std::vector<double> rss(n_grid);
  for (std::size_t i = 0; i < n_grid; ++i) {
    grid[i] = lo + (hi - lo) * static_cast<double>(i) /
                       static_cast<double>(n_grid - 1);
    rss[i] = profile(grid[i]).rss;
  }

  double best_log_c = grid[0];
  double best_rss = rss[0];
  for (std::size_t i = 0; i < n_grid; ++i) {
    if (rss[i] < best_rss) {
      best_rss = rss[i];
      best_log_c = grid[i];
    }
  }

  // Refine the deepest local minima of the grid profile.
  std::vector<std::size_t> minima;
  for (std::size_t i = 0; i < n_grid; ++i) {
    const bool left_ok = i == 0 || rss[i] <= rss[i - 1];
    const bool right_ok = i + 1 == n_grid || rss[i] <= rss[i + 1];
    const bool strict = (i > 0 && rss[i] < rss[i - 1]) ||
                        (i + 1 < n_grid && rss[i] < rss[i + 1]);
    if (left_ok && right_ok && strict) minima.push_back(i);
  }
  std::stable_sort(minima.begin(), minima.end(),
                   [&](std::size_t a, std::size_t b) { return rss[a] < rss[b]; });
  if (minima.size() > 6) minima.resize(6);
  for (std::size_t i : minima) {
    const double a = grid[i == 0 ? 0 : i - 1];
    const double b = grid[i + 1 == n_grid ? i : i + 1];
    const auto [x, fx] = boost::math::tools::brent_find_minima(
        [&](double log_c) { return profile(log_c).rss; }, a, b, 52);
    if (fx < best_rss) {
      best_rss = fx;
      best_log_c = x;
    }
  }

  const auto lin = profile(best_log_c);
  ShapeFit fit;
  fit.A = 1.0 - lin.u;
  fit.C = std::exp(best_log_c);
  fit.B = lin.u > 0.0 ? std::clamp(lin.w / lin.u, 0.0, 1.0) : 0.0;
  // Unidentified B or C: report the smallest B and a fixed C.
  constexpr double unidentified = 1e-12;
  if (lin.u <= unidentified || lin.w <= unidentified) {
    fit.B = 0.0;
    fit.C = opts.c_tie;
    if (lin.u <= unidentified) fit.A = 1.0;
  }
  fit.residual = 0.0;
  for (const auto& p : points) {
    const double r = p.v - fit(p.t);
    fit.residual += r * r;
  }
  return fit;
}

inline ShapeFit fit_shape(std::span<const CurvePoint> points,
                          Asymptote asymptote) {
  FitOptions opts;
  opts.asymptote = asymptote;
  return fit_shape(points, opts);
}

}  // namespace recovery
