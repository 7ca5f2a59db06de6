// Copyright 2026 The RepSF Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "repsf/assignment.hpp"
#include "repsf/density.hpp"
#include "repsf/error.hpp"
#include "repsf/exact_sum.hpp"
#include "repsf/parallel.hpp"

namespace repsf {

/// Entropic OT between two maps normalized to unit mass. The ground cost
/// is the squared distance between pixel centres divided by h^2 + w^2.
struct SinkhornConfig {
  double epsilon = 0.01;
  int max_iters = 500;
  double tol = 1e-6;  // L1 marginal violation on both sides
  bool log_domain = true;
  double relaxation = 1.0;     // over-relaxation weight in [1, 2), log domain only
  double anneal_factor = 0.5;  // > 0 starts at max cost and shrinks epsilon by this factor
  bool newton = true;          // Newton steps on the dual near convergence or when Sinkhorn stalls

  void validate() const {
    if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ConfigError("epsilon: must be positive");
    if (!(relaxation >= 1.0 && relaxation < 2.0)) throw ConfigError("relaxation: must be in [1, 2)");
    if (!(anneal_factor == 0.0 || (anneal_factor > 0.0 && anneal_factor < 1.0)))
      throw ConfigError("anneal_factor: must be 0 or in (0, 1)");
    if (max_iters < 1) throw ConfigError("max_iters: must be >= 1");
    if (!(tol > 0.0) || !std::isfinite(tol)) throw ConfigError("tol: must be positive");
  }
};

struct OtResult {
  double value = 0.0;      // <P, C>
  double objective = 0.0;  // <a, f> + <b, g>, the regularized optimum
  int iterations = 0;
  double violation = 0.0;  // max of the row and column L1 violations
  bool converged = false;
  std::vector<double> f;  // potential of the first map, on every pixel
  std::vector<double> g;  // potential of the second map, on every pixel
};

namespace detail {

inline double grid_cost(std::size_t i, std::size_t j, std::size_t h, std::size_t w) {
  const double dr = static_cast<double>(i / w) - static_cast<double>(j / w);
  const double dc = static_cast<double>(i % w) - static_cast<double>(j % w);
  return (dr * dr + dc * dc) / static_cast<double>(h * h + w * w);
}

inline std::vector<double> unit_mass(const DensityMap& m, const char* which, double* mass) {
  try {
    m.validate();
  } catch (const Error& e) {
    throw ValidationError(std::string(which) + ": " + e.what());
  }
  const double s = m.count();
  if (!(s > 0.0)) throw DegenerateInputError(std::string(which) + " has zero mass");
  std::vector<double> p(m.values.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = m.values[i] / s;
  if (mass) *mass = s;
  return p;
}

inline double log_sum_exp(const double* x, std::size_t n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, x[i]);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(x[i] - mx);
  return mx + std::log(s);
}

template <typename Body>
void rows_parallel(std::size_t count, std::size_t work, Body&& body) {
  if (work < (1u << 16)) {
    for (std::size_t i = 0; i < count; ++i) body(i);
  } else {
    parallel_for(count, body);
  }
}

struct Support {
  std::vector<std::size_t> idx;
  std::vector<double> mass;
  std::vector<double> log_mass;
};

inline Support support_of(const std::vector<double>& p) {
  Support s;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) {
      s.idx.push_back(i);
      s.mass.push_back(p[i]);
      s.log_mass.push_back(std::log(p[i]));
    }
  return s;
}

}  // namespace detail

/// Sinkhorn restricted to the two supports. Potentials follow
///   f_i = -eps log sum_j b_j exp((g_j - C_ij) / eps)
///   g_j = -eps log sum_i a_i exp((f_i - C_ij) / eps)
/// and the plan is P_ij = a_i b_j exp((f_i + g_j - C_ij) / eps). Both
/// potentials are extended to every pixel by the same formulas.
inline OtResult ot_loss(const DensityMap& pred, const DensityMap& gt, const SinkhornConfig& cfg) {
  cfg.validate();
  if (pred.h != gt.h || pred.w != gt.w)
    throw ShapeError("ot_loss maps differ: " + std::to_string(pred.h) + "x" +
                     std::to_string(pred.w) + " vs " + std::to_string(gt.h) + "x" +
                     std::to_string(gt.w));
  const std::vector<double> a = detail::unit_mass(pred, "prediction", nullptr);
  const std::vector<double> b = detail::unit_mass(gt, "ground truth", nullptr);
  const std::size_t H = pred.h, W = pred.w, P = H * W;
  const detail::Support sa = detail::support_of(a), sb = detail::support_of(b);
  const std::size_t na = sa.idx.size(), nb = sb.idx.size();
  constexpr std::size_t kMaxPairs = std::size_t{1} << 24;
  if (na * nb > kMaxPairs)
    throw ValidationError("ot_loss support " + std::to_string(na) + "x" + std::to_string(nb) +
                          " exceeds the dense limit; align maps to the output stride first");
  const double eps = cfg.epsilon;
  std::vector<double> C(na * nb), CT(na * nb);
  for (std::size_t i = 0; i < na; ++i)
    for (std::size_t j = 0; j < nb; ++j)
      CT[j * na + i] = C[i * nb + j] = detail::grid_cost(sa.idx[i], sb.idx[j], H, W);

  std::vector<double> f(na, 0.0), g(nb, 0.0);
  auto update_f = [&](double e, double w) {
    detail::rows_parallel(na, na * nb, [&](std::size_t i) {
      std::vector<double> t(nb);
      for (std::size_t j = 0; j < nb; ++j) t[j] = sb.log_mass[j] + (g[j] - C[i * nb + j]) / e;
      f[i] = (1.0 - w) * f[i] - w * e * detail::log_sum_exp(t.data(), nb);
    });
  };
  auto update_g = [&](double e, double w) {
    detail::rows_parallel(nb, na * nb, [&](std::size_t j) {
      std::vector<double> t(na);
      for (std::size_t i = 0; i < na; ++i) t[i] = sa.log_mass[i] + (f[i] - CT[j * na + i]) / e;
      g[j] = (1.0 - w) * g[j] - w * e * detail::log_sum_exp(t.data(), na);
    });
  };
  auto plan = [&](std::size_t i, std::size_t j) {
    return std::exp(sa.log_mass[i] + sb.log_mass[j] + (f[i] + g[j] - C[i * nb + j]) / eps);
  };
  auto violation = [&] {
    std::vector<double> rv(na), cv(nb);
    detail::rows_parallel(na, na * nb, [&](std::size_t i) {
      double s = 0.0;
      for (std::size_t j = 0; j < nb; ++j) s += plan(i, j);
      rv[i] = std::abs(s - sa.mass[i]);
    });
    detail::rows_parallel(nb, na * nb, [&](std::size_t j) {
      double s = 0.0;
      for (std::size_t i = 0; i < na; ++i) s += plan(i, j);
      cv[j] = std::abs(s - sb.mass[j]);
    });
    double r = 0.0, c = 0.0;
    for (double v : rv) r += v;
    for (double v : cv) c += v;
    return std::max(r, c);
  };

  OtResult res;
  // Solves [[diag(r), P], [P^T, diag(c)]] d = eps (a - r, b - c) by Jacobi
  // preconditioned CG.
  constexpr std::size_t kMaxNewtonPairs = std::size_t{1} << 20;
  auto newton_direction = [&](std::vector<double>& x, std::vector<double>& rhs) -> bool {
    if (na * nb > kMaxNewtonPairs) return false;
    const std::size_t n = na + nb;
    std::vector<double> Pm(na * nb), r(na, 0.0), c(nb, 0.0);
    for (std::size_t i = 0; i < na; ++i)
      for (std::size_t j = 0; j < nb; ++j) {
        const double p = plan(i, j);
        Pm[i * nb + j] = p;
        r[i] += p;
        c[j] += p;
      }
    std::vector<double> diag(n);
    rhs.assign(n, 0.0);
    for (std::size_t i = 0; i < na; ++i) {
      diag[i] = r[i];
      rhs[i] = eps * (sa.mass[i] - r[i]);
    }
    for (std::size_t j = 0; j < nb; ++j) {
      diag[na + j] = c[j];
      rhs[na + j] = eps * (sb.mass[j] - c[j]);
    }
    for (double d : diag)
      if (!(d > 0.0)) return false;
    // The system is singular along (1, -1); pinning the last g entry removes it.
    rhs[n - 1] = 0.0;
    auto apply = [&](const std::vector<double>& x, std::vector<double>& y) {
      for (std::size_t i = 0; i < na; ++i) {
        double s = r[i] * x[i];
        for (std::size_t j = 0; j < nb; ++j) s += Pm[i * nb + j] * x[na + j];
        y[i] = s;
      }
      for (std::size_t j = 0; j < nb; ++j) y[na + j] = c[j] * x[na + j];
      for (std::size_t i = 0; i < na; ++i)
        for (std::size_t j = 0; j < nb; ++j) y[na + j] += Pm[i * nb + j] * x[i];
      y[n - 1] = 0.0;
    };
    auto dot = [](const std::vector<double>& u, const std::vector<double>& v) {
      double s = 0.0;
      for (std::size_t k = 0; k < u.size(); ++k) s += u[k] * v[k];
      return s;
    };
    x.assign(n, 0.0);
    std::vector<double> res_v = rhs, z(n), q(n), Ap(n);
    for (std::size_t k = 0; k < n; ++k) z[k] = res_v[k] / diag[k];
    z[n - 1] = 0.0;
    q = z;
    double rz = dot(res_v, z);
    const double stop = 1e-24 * dot(rhs, rhs);
    for (std::size_t k = 0; k < std::min<std::size_t>(2 * n, 1000) && dot(res_v, res_v) > stop; ++k) {
      apply(q, Ap);
      const double qAq = dot(q, Ap);
      if (!(qAq > 0.0)) break;
      const double alpha = rz / qAq;
      for (std::size_t m = 0; m < n; ++m) {
        x[m] += alpha * q[m];
        res_v[m] -= alpha * Ap[m];
      }
      for (std::size_t m = 0; m < n; ++m) z[m] = res_v[m] / diag[m];
      z[n - 1] = 0.0;
      const double rz_next = dot(res_v, z);
      for (std::size_t m = 0; m < n; ++m) q[m] = z[m] + rz_next / rz * q[m];
      rz = rz_next;
    }
    return true;
  };
  // Backtracks on the concave dual eps-objective, which the direction ascends.
  auto newton_step = [&]() -> bool {
    std::vector<double> x, rhs;
    if (!newton_direction(x, rhs)) return false;
    const std::size_t n = na + nb;
    auto dual = [&] {
      double d = 0.0, mass = 0.0;
      for (std::size_t i = 0; i < na; ++i) d += sa.mass[i] * f[i];
      for (std::size_t j = 0; j < nb; ++j) d += sb.mass[j] * g[j];
      for (std::size_t i = 0; i < na; ++i)
        for (std::size_t j = 0; j < nb; ++j) mass += plan(i, j);
      return d - eps * mass;
    };
    const double d0 = dual();
    double slope = 0.0;
    for (std::size_t k = 0; k < n; ++k) slope += rhs[k] / eps * x[k];
    if (!(slope > 0.0)) return false;
    const std::vector<double> f0 = f, g0 = g;
    for (double t = 1.0; t > 1e-8; t *= 0.5) {
      for (std::size_t i = 0; i < na; ++i) f[i] = f0[i] + t * x[i];
      for (std::size_t j = 0; j < nb; ++j) g[j] = g0[j] + t * x[na + j];
      const double d = dual();
      if (std::isfinite(d) && d >= d0 + 1e-4 * t * slope) return true;
    }
    f = f0;
    g = g0;
    return false;
  };

  if (cfg.log_domain) {
    int it = 1;
    if (cfg.anneal_factor > 0.0) {
      double e = 0.0;
      for (double c : C) e = std::max(e, c);
      for (e *= cfg.anneal_factor; e > eps && it < cfg.max_iters; e *= cfg.anneal_factor, ++it) {
        update_f(e, 1.0);
        update_g(e, 1.0);
      }
    }
    double previous = INFINITY;
    for (; it <= cfg.max_iters; ++it) {
      const bool try_newton =
          cfg.newton && res.iterations > 0 && (res.violation < 1e-2 || res.violation > 0.99 * previous);
      previous = res.violation;
      if (try_newton) newton_step();
      update_f(eps, cfg.relaxation);
      update_g(eps, cfg.relaxation);
      res.iterations = it;
      res.violation = violation();
      if (res.violation <= cfg.tol) {
        res.converged = true;
        break;
      }
    }
    // Polish past the tolerance so the result does not depend on where it
    // stopped. Near the optimum the dual is flat to rounding, so steps are
    // judged by the violation after a sweep.
    for (int k = 0; k < 6 && res.converged && cfg.newton && res.violation > 0.0; ++k) {
      std::vector<double> x, rhs;
      if (!newton_direction(x, rhs)) break;
      const std::vector<double> f0 = f, g0 = g;
      bool improved = false;
      for (double t = 1.0; t > 1e-3 && !improved; t *= 0.5) {
        for (std::size_t i = 0; i < na; ++i) f[i] = f0[i] + t * x[i];
        for (std::size_t j = 0; j < nb; ++j) g[j] = g0[j] + t * x[na + j];
        update_f(eps, 1.0);
        update_g(eps, 1.0);
        const double v = violation();
        if (v < res.violation) {
          res.violation = v;
          improved = true;
        }
      }
      if (!improved) {
        f = f0;
        g = g0;
        break;
      }
    }
  } else {
    std::vector<double> K(na * nb), u(na, 1.0), v(nb, 1.0);
    for (std::size_t k = 0; k < K.size(); ++k) K[k] = std::exp(-C[k] / eps);
    for (int it = 1; it <= cfg.max_iters; ++it) {
      for (std::size_t i = 0; i < na; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < nb; ++j) s += K[i * nb + j] * v[j];
        u[i] = sa.mass[i] / s;
      }
      for (std::size_t j = 0; j < nb; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < na; ++i) s += K[i * nb + j] * u[i];
        v[j] = sb.mass[j] / s;
      }
      for (std::size_t i = 0; i < na; ++i) f[i] = eps * std::log(u[i] / sa.mass[i]);
      for (std::size_t j = 0; j < nb; ++j) g[j] = eps * std::log(v[j] / sb.mass[j]);
      for (double x : f)
        if (!std::isfinite(x))
          throw NumericError("kernel underflow at epsilon " + std::to_string(eps) +
                             "; use the log-domain solver");
      for (double x : g)
        if (!std::isfinite(x))
          throw NumericError("kernel underflow at epsilon " + std::to_string(eps) +
                             "; use the log-domain solver");
      res.iterations = it;
      res.violation = violation();
      if (res.violation <= cfg.tol) {
        res.converged = true;
        break;
      }
    }
  }

  double value = 0.0;
  for (std::size_t i = 0; i < na; ++i)
    for (std::size_t j = 0; j < nb; ++j) value += plan(i, j) * C[i * nb + j];
  res.value = std::max(0.0, value);
  double obj = 0.0;
  for (std::size_t i = 0; i < na; ++i) obj += sa.mass[i] * f[i];
  for (std::size_t j = 0; j < nb; ++j) obj += sb.mass[j] * g[j];
  res.objective = obj;
  if (!std::isfinite(res.value) || !std::isfinite(res.objective))
    throw NumericError("Sinkhorn produced a non-finite result");

  res.f.assign(P, 0.0);
  res.g.assign(P, 0.0);
  detail::rows_parallel(P, P * std::max(na, nb), [&](std::size_t k) {
    std::vector<double> t(std::max(na, nb));
    for (std::size_t j = 0; j < nb; ++j)
      t[j] = sb.log_mass[j] + (g[j] - detail::grid_cost(k, sb.idx[j], H, W)) / eps;
    res.f[k] = -eps * detail::log_sum_exp(t.data(), nb);
    for (std::size_t i = 0; i < na; ++i)
      t[i] = sa.log_mass[i] + (f[i] - detail::grid_cost(sa.idx[i], k, H, W)) / eps;
    res.g[k] = -eps * detail::log_sum_exp(t.data(), na);
  });
  return res;
}

/// Gradient of the regularized objective with respect to the unnormalized
/// prediction z: (f_k - <f, z / |z|>) / |z|. It is orthogonal to z.
inline DensityMap ot_gradient(const DensityMap& pred, const OtResult& res) {
  double mass = 0.0;
  const std::vector<double> a = detail::unit_mass(pred, "prediction", &mass);
  if (res.f.size() != a.size()) throw ShapeError("potential does not match the prediction");
  ExactSum mean;
  for (std::size_t k = 0; k < a.size(); ++k) mean.add(a[k] * res.f[k]);
  const double fbar = mean.value();
  DensityMap grad(pred.h, pred.w);
  for (std::size_t k = 0; k < a.size(); ++k) grad.values[k] = (res.f[k] - fbar) / mass;
  return grad;
}

inline DensityMap ot_gradient(const DensityMap& pred, const DensityMap& gt,
                              const SinkhornConfig& cfg) {
  return ot_gradient(pred, ot_loss(pred, gt, cfg));
}

/// Unregularized OT for maps whose normalized masses are multiples of 1/N
/// for some N <= kMaxAtoms: both sides are split into N equal atoms and
/// matched by an exact assignment.
inline double exact_ot_oracle(const DensityMap& pred, const DensityMap& gt) {
  constexpr std::size_t kMaxSupport = 32;
  constexpr std::size_t kMaxAtoms = 512;
  if (pred.h != gt.h || pred.w != gt.w) throw ShapeError("exact_ot_oracle maps differ in shape");
  const std::vector<double> a = detail::unit_mass(pred, "prediction", nullptr);
  const std::vector<double> b = detail::unit_mass(gt, "ground truth", nullptr);
  const detail::Support sa = detail::support_of(a), sb = detail::support_of(b);
  if (sa.idx.size() > kMaxSupport || sb.idx.size() > kMaxSupport)
    throw UnsupportedInstanceError("support larger than " + std::to_string(kMaxSupport) + " pixels");
  auto atoms_for = [](const std::vector<double>& mass, std::size_t n, std::vector<std::size_t>& out) {
    out.clear();
    std::size_t total = 0;
    for (double m : mass) {
      const double x = m * static_cast<double>(n);
      const double r = std::round(x);
      if (r < 1.0 || std::abs(x - r) > 1e-9 * static_cast<double>(n)) return false;
      out.push_back(static_cast<std::size_t>(r));
      total += static_cast<std::size_t>(r);
    }
    return total == n;
  };
  std::vector<std::size_t> ca, cb;
  std::size_t n = 0;
  for (std::size_t cand = 1; cand <= kMaxAtoms; ++cand)
    if (atoms_for(sa.mass, cand, ca) && atoms_for(sb.mass, cand, cb)) {
      n = cand;
      break;
    }
  if (n == 0)
    throw UnsupportedInstanceError("masses are not multiples of 1/N for any N <= " +
                                   std::to_string(kMaxAtoms));
  std::vector<std::size_t> pa, pb;
  for (std::size_t i = 0; i < ca.size(); ++i) pa.insert(pa.end(), ca[i], sa.idx[i]);
  for (std::size_t j = 0; j < cb.size(); ++j) pb.insert(pb.end(), cb[j], sb.idx[j]);
  std::vector<double> cost(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) cost[i * n + j] = detail::grid_cost(pa[i], pb[j], pred.h, pred.w);
  return solve_assignment(cost, n, n).cost / static_cast<double>(n);
}

}  // namespace repsf
