"""Parametric nonlinear programming: interior-point solver and KKT sensitivity.

Solves problems of the form::

    min  phi(z; theta)
    s.t. c(z; theta) = 0
         z[i] >= 0  for i in the bounded set

by a monotone barrier (Fiacco-McCormick) primal-dual interior-point method
with an l1-penalty merit line search and inertia-corrected symmetric
indefinite KKT factorizations. The factorization of the final KKT matrix is
retained on the solution object so that first-order solution updates for
perturbed parameters cost one backsolve.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    EvaluationFailure,
    LineSearchFailure,
    MaxIterations,
    SingularKkt,
)

__all__ = [
    "Nlp",
    "FunctionNlp",
    "IpmOptions",
    "NlpSolution",
    "SensitivityDirection",
    "ipm_solve",
    "kkt_residual",
    "sensitivity_step",
    "build_sensitivity_direction",
    "check_derivatives",
]


# ---------------------------------------------------------------------------
# problem container
# ---------------------------------------------------------------------------

class Nlp:
    """Abstract parametric NLP with analytic evaluators.

    Subclasses provide the evaluators below. ``bounded`` is a boolean mask
    selecting the entries of ``z`` constrained to be nonnegative; all other
    entries are free. General bounds are expected to be pre-shifted into
    this form by the caller.
    """

    n_z: int
    n_c: int
    n_theta: int
    bounded: np.ndarray

    def objective(self, z, theta) -> float:
        raise NotImplementedError

    def gradient(self, z, theta) -> np.ndarray:
        raise NotImplementedError

    def constraints(self, z, theta) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, z, theta):
        """Constraint Jacobian, shape (n_c, n_z); dense or scipy.sparse."""
        raise NotImplementedError

    def hessian(self, z, theta, lam, obj_weight: float = 1.0):
        """Lagrangian Hessian ``obj_weight * d2phi + sum lam_j d2c_j``."""
        raise NotImplementedError

    def theta_jacobians(self, z, theta, lam):
        """Parameter derivatives ``(d2L/dz dtheta, dc/dtheta)``.

        Shapes (n_z, n_theta) and (n_c, n_theta). Required only for
        sensitivity analysis.
        """
        raise NotImplementedError


class FunctionNlp(Nlp):
    """NLP assembled from plain callables (used by the test corpus)."""

    def __init__(self, n_z, objective, gradient, hessian,
                 constraints=None, jacobian=None, con_hessian=None,
                 bounded=None, n_theta=0, theta_jacobians=None, name=""):
        self.n_z = n_z
        self._f = objective
        self._g = gradient
        self._h = hessian
        self._c = constraints
        self._j = jacobian
        self._ch = con_hessian
        self.n_c = 0 if constraints is None else len(np.atleast_1d(
            constraints(np.ones(n_z), np.zeros(n_theta))))
        self.n_theta = n_theta
        self._tj = theta_jacobians
        self.name = name
        if bounded is None:
            bounded = np.zeros(n_z, dtype=bool)
        self.bounded = np.asarray(bounded, dtype=bool)

    def objective(self, z, theta):
        return float(self._f(z, theta))

    def gradient(self, z, theta):
        return np.asarray(self._g(z, theta), dtype=float)

    def constraints(self, z, theta):
        if self._c is None:
            return np.zeros(0)
        return np.atleast_1d(np.asarray(self._c(z, theta), dtype=float))

    def jacobian(self, z, theta):
        if self._j is None:
            return np.zeros((0, self.n_z))
        return np.atleast_2d(np.asarray(self._j(z, theta), dtype=float))

    def hessian(self, z, theta, lam, obj_weight=1.0):
        H = obj_weight * np.asarray(self._h(z, theta), dtype=float)
        if self._ch is not None and len(lam):
            H = H + self._ch(z, theta, lam)
        return H

    def theta_jacobians(self, z, theta, lam):
        if self._tj is None:
            return np.zeros((self.n_z, self.n_theta)), np.zeros((self.n_c, self.n_theta))
        return self._tj(z, theta, lam)


# ---------------------------------------------------------------------------
# options / results
# ---------------------------------------------------------------------------

@dataclass
class IpmOptions:
    tol: float = 1e-6
    mu_init: float = 0.1
    mu_min: float = 1e-9
    mu_shrink: float = 0.1
    mu_theta: float = 1.0     # >1 enables superlinear barrier decrease
    max_iter: int = 400
    tau: float = 0.995
    kappa_eps: float = 10.0
    armijo: float = 1e-4
    bound_push: float = 1e-6
    kappa_sigma: float = 1e10
    dense_threshold: int = 2600
    log_path: Optional[str] = None

    def next_mu(self, mu: float) -> float:
        target = mu * self.mu_shrink
        if self.mu_theta > 1.0:
            target = min(target, mu ** self.mu_theta)
        return max(target, self.mu_min)


@dataclass
class SensitivityDirection:
    """Parameter Jacobian of the KKT conditions at the base solution.

    ``matrix`` has one row per KKT equation, stacked as (stationarity,
    primal feasibility, complementarity-over-bounded), and one column per
    parameter.
    """

    matrix: np.ndarray


@dataclass
class NlpSolution:
    z: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    status: str
    objective: float
    mu_final: float
    iterations: int
    theta: np.ndarray
    kkt: Optional["KktFactors"] = None
    info: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


# ---------------------------------------------------------------------------
# symmetric indefinite factorization helpers
# ---------------------------------------------------------------------------

_LWORK_CACHE: dict = {}


class _DenseLdl:
    """Bunch-Kaufman LDL^T factorization with inertia and repeated solves."""

    def __init__(self, K: np.ndarray):
        n = K.shape[0]
        lwork = _LWORK_CACHE.get(n)
        if lwork is None:
            lwork, _ = scipy.linalg.lapack.dsytrf_lwork(n, lower=1)
            _LWORK_CACHE[n] = lwork
        self._scale = max(1.0, float(np.max(np.abs(K)))) if n else 1.0
        ldu, ipiv, info = scipy.linalg.lapack.dsytrf(K, lower=1, lwork=lwork)
        if info < 0:
            raise RuntimeError(f"dsytrf: illegal argument {-info}")
        self._singular = info > 0
        self._ldu = ldu
        self._ipiv = ipiv

    def inertia(self):
        # count pivot signs; "zero" only on exact factorization breakdown,
        # since the barrier term makes pivot magnitudes span many decades
        ldu, ipiv = self._ldu, self._ipiv
        n = ldu.shape[0]
        diag = np.diag(ldu)
        pos = neg = zero = 0
        k = 0
        while k < n:
            if ipiv[k] >= 0:
                d = diag[k]
                if d == 0.0:
                    zero += 1
                elif d > 0:
                    pos += 1
                else:
                    neg += 1
                k += 1
            else:
                a, c = diag[k], diag[k + 1]
                b = ldu[k + 1, k]
                tr = a + c
                det = a * c - b * b
                disc = math.sqrt(max(tr * tr / 4.0 - det, 0.0))
                for ev in (tr / 2.0 + disc, tr / 2.0 - disc):
                    if ev == 0.0:
                        zero += 1
                    elif ev > 0:
                        pos += 1
                    else:
                        neg += 1
                k += 2
        if self._singular:
            zero = max(zero, 1)
        return pos, neg, zero

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self._singular:
            raise RuntimeError("singular LDL factorization")
        x, info = scipy.linalg.lapack.dsytrs(self._ldu, self._ipiv, b, lower=1)
        if info != 0:
            raise RuntimeError(f"dsytrs failed: info={info}")
        return x


class _SparseLu:
    """Sparse LU fallback for large condensed KKT systems (no inertia)."""

    def __init__(self, K):
        self._lu = spla.splu(K.tocsc())

    def inertia(self):
        return None

    def solve(self, b):
        return self._lu.solve(b)


class KktFactors:
    """Reusable factorization of the (condensed) barrier KKT matrix.

    The full three-block system (Hessian / Jacobian / complementarity rows)
    is solved by eliminating the bound-multiplier block against the
    retained condensed factors, so sensitivity updates are single
    backsolves.
    """

    def __init__(self, factor, W, J, z_b, nu_b, bounded_idx, n, m, regularized):
        self._factor = factor
        self.W = W
        self.J = J
        self.z_b = z_b
        self.nu_b = nu_b
        self.bounded_idx = bounded_idx
        self.n = n
        self.m = m
        self.regularized = regularized

    @property
    def dim(self) -> int:
        """Dimension of the unreduced KKT system."""
        return self.n + self.m + len(self.bounded_idx)

    def solve_condensed(self, r1, r2):
        out = self._factor.solve(np.concatenate([r1, r2]))
        return out[:self.n], out[self.n:]

    def solve_unreduced(self, r1, r2, r3):
        """Solve the 3-block system M [dz, dlam, dnu] = [r1, r2, r3]."""
        bidx = self.bounded_idx
        rz = r1.copy()
        rz[bidx] += r3 / self.z_b
        dz, dlam = self.solve_condensed(rz, r2)
        dnu = (r3 - self.nu_b * dz[bidx]) / self.z_b
        return dz, dlam, dnu

    def unreduced_matrix(self) -> np.ndarray:
        """Dense reconstruction of the three-block KKT matrix (for tests)."""
        nb = len(self.bounded_idx)
        n, m = self.n, self.m
        M = np.zeros((n + m + nb, n + m + nb))
        W = self.W.toarray() if sp.issparse(self.W) else np.asarray(self.W)
        J = self.J.toarray() if sp.issparse(self.J) else np.asarray(self.J)
        M[:n, :n] = W
        M[:n, n:n + m] = J.T
        for k, i in enumerate(self.bounded_idx):
            M[i, n + m + k] = -1.0
            M[n + m + k, i] = self.nu_b[k]
            M[n + m + k, n + m + k] = self.z_b[k]
        M[n:n + m, :n] = J
        return M


def _assemble_condensed(W, J, sigma, delta_w, delta_c, n, m, dense):
    if dense:
        K = np.zeros((n + m, n + m))
        K[:n, :n] = W.toarray() if sp.issparse(W) else np.asarray(W)
        K[:n, :n] += np.diag(sigma + delta_w)
        Jd = J.toarray() if sp.issparse(J) else np.asarray(J)
        K[:n, n:] = Jd.T
        K[n:, :n] = Jd
        if delta_c > 0:
            K[n:, n:] = -delta_c * np.eye(m)
        return K
    Ws = W.tocsr() if sp.issparse(W) else sp.csr_matrix(np.asarray(W))
    Js = J if sp.issparse(J) else sp.csr_matrix(np.asarray(J))
    D = sp.diags(sigma + delta_w)
    lower = -delta_c * sp.identity(m) if delta_c > 0 else sp.csr_matrix((m, m))
    return sp.bmat([[Ws + D, Js.T], [Js, lower]], format="csc")


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------

def _check_finite(*arrays):
    for a in arrays:
        a = np.asarray(a, dtype=float)
        if a.size and not np.all(np.isfinite(a)):
            return False
    return True


def ipm_solve(nlp: Nlp, theta, init, opts: IpmOptions = None,
              lam0=None, nu0=None) -> NlpSolution:
    """Solve a parametric NLP by the barrier interior-point method.

    ``init`` is the primal guess; bounded entries are pushed strictly
    inside. ``lam0``/``nu0`` enable warm starts (pair them with a reduced
    ``opts.mu_init``). The returned solution keeps the factored KKT system
    for sensitivity reuse.
    """
    opts = opts or IpmOptions()
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    n, m = nlp.n_z, nlp.n_c
    bounded = np.asarray(nlp.bounded, dtype=bool)
    bidx = np.flatnonzero(bounded)

    z = np.array(init, dtype=float).copy()
    if z.shape != (n,):
        raise ValueError(f"init has shape {z.shape}, expected ({n},)")
    z[bidx] = np.maximum(z[bidx], opts.bound_push)

    mu = opts.mu_init
    lam = np.zeros(m) if lam0 is None else np.array(lam0, dtype=float)
    if nu0 is None:
        nu_b = np.maximum(mu / z[bidx], 1e-8)
    else:
        nu_b = np.maximum(np.array(nu0, dtype=float)[bidx], 1e-8)

    f = nlp.objective(z, theta)
    g = nlp.gradient(z, theta)
    c = nlp.constraints(z, theta)
    J = nlp.jacobian(z, theta)
    if not _check_finite([f], g, c):
        raise EvaluationFailure("non-finite values at the initial point")

    rho = 1.0
    delta_w_last = 0.0
    log_rows = []
    status = "maxiter"
    it = 0
    use_dense = (n + m) <= opts.dense_threshold

    def _jt(Jmat, vec):
        return Jmat.T @ vec

    s_max = 100.0

    def residuals(g, c, z, nu_b, mu_val):
        # dual/complementarity scaling as in standard IP practice, so the
        # stopping test stays meaningful when multipliers are large
        nd = m + len(bidx)
        lam_sum = float(np.sum(np.abs(lam))) + float(np.sum(np.abs(nu_b)))
        s_d = max(s_max, lam_sum / max(1, nd)) / s_max
        s_c = max(s_max, float(np.sum(np.abs(nu_b))) / max(1, len(bidx))) / s_max
        r_d = g + _jt(J, lam)
        r_d[bidx] -= nu_b
        comp = z[bidx] * nu_b - mu_val
        terms = [np.max(np.abs(r_d)) / s_d if n else 0.0,
                 np.max(np.abs(c)) if m else 0.0,
                 np.max(np.abs(comp)) / s_c if len(bidx) else 0.0]
        return max(terms), r_d

    for it in range(1, opts.max_iter + 1):
        E0, r_d = residuals(g, c, z, nu_b, 0.0)
        if E0 <= opts.tol:
            status = "converged"
            break
        Emu, _ = residuals(g, c, z, nu_b, mu)
        while Emu <= opts.kappa_eps * mu and mu > opts.mu_min:
            mu = opts.next_mu(mu)
            Emu, _ = residuals(g, c, z, nu_b, mu)

        try:
            W = nlp.hessian(z, theta, lam)
        except FloatingPointError as exc:
            raise EvaluationFailure(str(exc)) from None

        # search direction with inertia correction
        sigma = np.zeros(n)
        sigma[bidx] = nu_b / z[bidx]
        rhs1 = -(g + _jt(J, lam))
        rhs1[bidx] += mu / z[bidx]
        rhs2 = -c

        def _direction(delta_w, delta_c):
            for _ in range(40):
                try:
                    K = _assemble_condensed(W, J, sigma, delta_w, delta_c,
                                            n, m, use_dense)
                    factor = _DenseLdl(K) if use_dense else _SparseLu(K)
                    inertia = factor.inertia()
                    if inertia is not None:
                        pos, neg, zero = inertia
                        if zero > 0:
                            delta_c = (1e-8 * max(1.0, mu ** 0.25)
                                       if delta_c == 0.0 else delta_c * 100.0)
                            if delta_c > 1e8:
                                raise SingularKkt("constraint regularization diverged")
                            continue
                        if pos != n or neg != m:
                            delta_w = (1e-4 if delta_w == 0.0 else delta_w * 10.0)
                            if delta_w > 1e12:
                                raise SingularKkt("inertia correction diverged")
                            continue
                    step = factor.solve(np.concatenate([rhs1, rhs2]))
                    if not np.all(np.isfinite(step)):
                        raise RuntimeError("non-finite step")
                    return step[:n], step[n:], delta_w, delta_c
                except (RuntimeError, scipy.linalg.LinAlgError):
                    delta_w = (1e-4 if delta_w == 0.0 else delta_w * 10.0)
                    if delta_w > 1e12:
                        raise SingularKkt("KKT factorization failed") from None
            raise SingularKkt("no search direction found")

        dw0 = max(1e-20, delta_w_last / 3.0) if delta_w_last > 0.0 else 0.0
        dz, dlam, delta_w, delta_c = _direction(dw0, 0.0)
        delta_w_last = delta_w if delta_w > 0 else delta_w_last
        dnu = (mu / z[bidx] - nu_b) - sigma[bidx] * dz[bidx]

        # fraction-to-boundary step limits
        alpha_p = 1.0
        neg_p = dz[bidx] < 0
        if np.any(neg_p):
            alpha_p = min(1.0, float(np.min(
                -opts.tau * z[bidx][neg_p] / dz[bidx][neg_p])))
        alpha_d = 1.0
        neg_d = dnu < 0
        if np.any(neg_d):
            alpha_d = min(1.0, float(np.min(
                -opts.tau * nu_b[neg_d] / dnu[neg_d])))

        # l1 merit line search; penalty from the minimal exact-penalty rule
        # (quadratic-model based), far smaller than multiplier-norm rules
        c_l1 = float(np.sum(np.abs(c)))
        dphi = float(g @ dz) - mu * float(np.sum(dz[bidx] / z[bidx]))
        if c_l1 > 1e-12:
            Wdz = W @ dz
            quad = max(0.0, 0.5 * float(dz @ Wdz) + 0.5 * float(
                (sigma * dz) @ dz))
            rho = max((dphi + quad) / (0.9 * c_l1), 1e-4)
        merit0 = f - (mu * float(np.sum(np.log(z[bidx]))) if len(bidx) else 0.0) \
            + rho * c_l1
        dmerit = dphi - rho * c_l1

        def _line_search(dz, dlam, dnu, alpha):
            """Armijo on the merit; the leading trial may instead be accepted
            on a plain primal-dual residual decrease (Newton behavior)."""
            first = True
            for _ in range(40):
                z_t = z + alpha * dz
                try:
                    f_t = nlp.objective(z_t, theta)
                    c_t = nlp.constraints(z_t, theta)
                except (FloatingPointError, ValueError):
                    alpha *= 0.5
                    first = False
                    continue
                if not _check_finite([f_t], c_t):
                    alpha *= 0.5
                    first = False
                    continue
                if len(bidx) and np.any(z_t[bidx] <= 0.0):
                    alpha *= 0.5
                    first = False
                    continue
                barrier_t = -mu * float(np.sum(np.log(z_t[bidx]))) if len(bidx) else 0.0
                merit_t = f_t + barrier_t + rho * float(np.sum(np.abs(c_t)))
                if merit_t <= merit0 + opts.armijo * alpha * min(dmerit, 0.0) \
                        + 1e-12 * abs(merit0):
                    return alpha
                if first:
                    first = False
                    try:
                        g_t = nlp.gradient(z_t, theta)
                        J_t = nlp.jacobian(z_t, theta)
                        lam_t = lam + alpha * dlam
                        nu_t = nu_b + min(alpha_d, 1.0) * dnu
                        r_t = g_t + J_t.T @ lam_t
                        r_t[bidx] -= nu_t
                        E_t = max(np.max(np.abs(r_t)) if n else 0.0,
                                  np.max(np.abs(c_t)) if m else 0.0,
                                  np.max(np.abs(z_t[bidx] * nu_t - mu))
                                  if len(bidx) else 0.0)
                        if np.isfinite(E_t) and E_t <= (1.0 - 1e-4 * alpha) * Emu_raw:
                            return alpha
                    except (FloatingPointError, ValueError):
                        pass
                alpha *= 0.5
            return None

        # unscaled mu-residual for the fallback acceptance test
        r_raw = g + _jt(J, lam)
        r_raw[bidx] -= nu_b
        Emu_raw = max(np.max(np.abs(r_raw)) if n else 0.0,
                      np.max(np.abs(c)) if m else 0.0,
                      np.max(np.abs(z[bidx] * nu_b - mu)) if len(bidx) else 0.0)

        alpha = _line_search(dz, dlam, dnu, alpha_p)
        accepted = alpha is not None
        if not accepted:
            # retry once with a heavily damped direction (covers the sparse
            # path, where inertia is unavailable)
            try:
                dz2, dlam2, dw2, _ = _direction(max(1e-4, delta_w * 100.0), delta_c)
                dnu2 = (mu / z[bidx] - nu_b) - sigma[bidx] * dz2[bidx]
                ap2 = 1.0
                neg2 = dz2[bidx] < 0
                if np.any(neg2):
                    ap2 = min(1.0, float(np.min(
                        -opts.tau * z[bidx][neg2] / dz2[bidx][neg2])))
                ad2 = 1.0
                negd2 = dnu2 < 0
                if np.any(negd2):
                    ad2 = min(1.0, float(np.min(
                        -opts.tau * nu_b[negd2] / dnu2[negd2])))
                alpha2 = _line_search(dz2, dlam2, dnu2, ap2)
                if alpha2 is not None:
                    dz, dlam, dnu = dz2, dlam2, dnu2
                    delta_w_last = dw2
                    alpha_d = ad2
                    alpha = alpha2
                    accepted = True
            except SingularKkt:
                pass
        if not accepted:
            raise LineSearchFailure(
                f"no acceptable step at iteration {it} (mu={mu:.2e})")

        z = z + alpha * dz
        lam = lam + alpha * dlam
        nu_b = nu_b + min(alpha_d, 1.0) * dnu
        # keep multipliers consistent with the barrier scale
        lo = mu / (opts.kappa_sigma * z[bidx])
        hi = opts.kappa_sigma * mu / z[bidx]
        nu_b = np.minimum(np.maximum(nu_b, lo), hi)

        f = nlp.objective(z, theta)
        g = nlp.gradient(z, theta)
        c = nlp.constraints(z, theta)
        J = nlp.jacobian(z, theta)
        if not _check_finite([f], g, c):
            raise EvaluationFailure(f"non-finite evaluation at iteration {it}")

        log_rows.append((it, mu, E0, float(np.max(np.abs(c))) if m else 0.0,
                         alpha, delta_w))

    E0, _ = residuals(g, c, z, nu_b, 0.0)
    if E0 <= opts.tol:
        status = "converged"

    nu_full = np.zeros(n)
    nu_full[bidx] = nu_b

    kkt = None
    if status == "converged":
        W = nlp.hessian(z, theta, lam)
        sigma = np.zeros(n)
        sigma[bidx] = nu_b / z[bidx]
        regularized = False
        try:
            K = _assemble_condensed(W, J, sigma, 0.0, 0.0, n, m, use_dense)
            factor = _DenseLdl(K) if use_dense else _SparseLu(K)
            inertia = factor.inertia()
            if inertia is not None and inertia[2] > 0:
                raise RuntimeError("singular final KKT")
        except (RuntimeError, scipy.linalg.LinAlgError):
            K = _assemble_condensed(W, J, sigma, 1e-8, 1e-8, n, m, use_dense)
            factor = _DenseLdl(K) if use_dense else _SparseLu(K)
            regularized = True
        kkt = KktFactors(factor, W, J, z[bidx].copy(), nu_b.copy(),
                         bidx, n, m, regularized)

    if opts.log_path:
        with open(opts.log_path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["iter", "mu", "kkt_residual", "con_violation",
                         "step_size", "delta_w"])
            wr.writerows(log_rows)

    sol = NlpSolution(
        z=z, lam=lam, nu=nu_full, status=status,
        objective=nlp.objective(z, theta), mu_final=mu, iterations=it,
        theta=theta.copy(), kkt=kkt,
        info={"kkt_residual": E0,
              "con_violation": float(np.max(np.abs(c))) if m else 0.0,
              "log": log_rows},
    )
    if status == "maxiter":
        sol.info["error"] = f"max iterations ({opts.max_iter}) reached, E0={E0:.3e}"
    return sol


def kkt_residual(nlp: Nlp, theta, z, lam, nu) -> float:
    """Max-norm KKT residual (stationarity, feasibility, complementarity) at mu=0."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    z = np.asarray(z, dtype=float)
    lam = np.asarray(lam, dtype=float)
    nu = np.asarray(nu, dtype=float)
    g = nlp.gradient(z, theta)
    c = nlp.constraints(z, theta)
    J = nlp.jacobian(z, theta)
    if not _check_finite(g, c):
        raise EvaluationFailure("non-finite evaluation in kkt_residual")
    r_d = g + J.T @ lam - nu
    terms = [np.max(np.abs(r_d)) if nlp.n_z else 0.0,
             np.max(np.abs(c)) if nlp.n_c else 0.0]
    b = np.asarray(nlp.bounded, dtype=bool)
    if b.any():
        terms.append(np.max(np.abs(z[b] * nu[b])))
    return float(max(terms))


# ---------------------------------------------------------------------------
# sensitivity
# ---------------------------------------------------------------------------

def build_sensitivity_direction(nlp: Nlp, sol: NlpSolution) -> SensitivityDirection:
    """Assemble the parameter Jacobian of the KKT conditions at the solution."""
    if sol.kkt is None:
        raise SingularKkt("solution has no retained KKT factors")
    dLdztheta, dcdtheta = nlp.theta_jacobians(sol.z, sol.theta, sol.lam)
    nb = len(sol.kkt.bounded_idx)
    N = np.zeros((nlp.n_z + nlp.n_c + nb, nlp.n_theta))
    N[:nlp.n_z] = np.asarray(dLdztheta, dtype=float)
    N[nlp.n_z:nlp.n_z + nlp.n_c] = np.asarray(dcdtheta, dtype=float)
    return SensitivityDirection(matrix=N)


def sensitivity_step(sol: NlpSolution, direction: SensitivityDirection, dtheta):
    """First-order update of the primal-dual solution for ``theta0 + dtheta``.

    Solves ``M ds = -N dtheta`` with the retained factorization and returns
    ``(z, lam, nu)`` arrays of the predicted solution.
    """
    if not sol.converged or sol.kkt is None:
        raise SingularKkt("sensitivity requires a converged solution with factors")
    dtheta = np.atleast_1d(np.asarray(dtheta, dtype=float))
    rhs = -direction.matrix @ dtheta
    n, m = sol.kkt.n, sol.kkt.m
    dz, dlam, dnu = sol.kkt.solve_unreduced(rhs[:n], rhs[n:n + m], rhs[n + m:])
    if not np.all(np.isfinite(dz)):
        raise SingularKkt("sensitivity backsolve produced non-finite values")
    z_new = sol.z + dz
    lam_new = sol.lam + dlam
    nu_new = sol.nu.copy()
    nu_new[sol.kkt.bounded_idx] += dnu
    return z_new, lam_new, nu_new


# ---------------------------------------------------------------------------
# derivative checking harness (tests and selftest)
# ---------------------------------------------------------------------------

def check_derivatives(nlp: Nlp, theta, points, h: float = 1e-6) -> float:
    """Max relative error of gradient/Jacobian vs central finite differences."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    worst = 0.0
    for z in points:
        z = np.asarray(z, dtype=float)
        g = nlp.gradient(z, theta)
        J = nlp.jacobian(z, theta)
        J = J.toarray() if sp.issparse(J) else np.asarray(J)
        scale_g = max(1.0, float(np.max(np.abs(g)))) if g.size else 1.0
        scale_J = max(1.0, float(np.max(np.abs(J)))) if J.size else 1.0
        for k in range(nlp.n_z):
            e = np.zeros(nlp.n_z)
            step = h * max(1.0, abs(z[k]))
            e[k] = step
            fp = nlp.objective(z + e, theta)
            fm = nlp.objective(z - e, theta)
            worst = max(worst, abs((fp - fm) / (2 * step) - g[k]) / scale_g)
            if nlp.n_c:
                cp = nlp.constraints(z + e, theta)
                cm = nlp.constraints(z - e, theta)
                col = (cp - cm) / (2 * step)
                worst = max(worst, float(np.max(np.abs(col - J[:, k]))) / scale_J)
    return worst
