"""Built-in verification corpus: NLPs with known optima and cross-checks.

Used by the ``selftest`` CLI command and by the test suite. Every problem
carries its analytic optimum so the solver can be checked end to end
without external references.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass

import numpy as np

from .nlp import FunctionNlp, IpmOptions, check_derivatives, ipm_solve


@dataclass
class CorpusProblem:
    name: str
    nlp: FunctionNlp
    z0: np.ndarray
    z_star: np.ndarray
    f_star: float
    lam_star: np.ndarray | None = None


def solver_corpus() -> list[CorpusProblem]:
    """Analytic-optimum NLPs covering bounds, equalities and nonconvexity."""
    problems = []

    # 1. bound-constrained scalar quadratic, interior optimum
    problems.append(CorpusProblem(
        name="scalar_quadratic_bound",
        nlp=FunctionNlp(
            1,
            objective=lambda z, th: (z[0] - 2.0) ** 2,
            gradient=lambda z, th: np.array([2.0 * (z[0] - 2.0)]),
            hessian=lambda z, th: np.array([[2.0]]),
            bounded=[True],
        ),
        z0=np.array([0.5]),
        z_star=np.array([2.0]),
        f_star=0.0,
    ))

    # 2. equality-constrained QP with known multiplier
    problems.append(CorpusProblem(
        name="equality_qp",
        nlp=FunctionNlp(
            2,
            objective=lambda z, th: z[0] ** 2 + z[1] ** 2,
            gradient=lambda z, th: 2.0 * z,
            hessian=lambda z, th: 2.0 * np.eye(2),
            constraints=lambda z, th: np.array([z[0] + z[1] - 1.0]),
            jacobian=lambda z, th: np.array([[1.0, 1.0]]),
        ),
        z0=np.array([3.0, -1.0]),
        z_star=np.array([0.5, 0.5]),
        f_star=0.5,
        lam_star=np.array([-1.0]),
    ))

    # 3. linear objective on the unit circle, first quadrant
    problems.append(CorpusProblem(
        name="circle_linear",
        nlp=FunctionNlp(
            2,
            objective=lambda z, th: -z[0] - z[1],
            gradient=lambda z, th: np.array([-1.0, -1.0]),
            hessian=lambda z, th: np.zeros((2, 2)),
            constraints=lambda z, th: np.array([z[0] ** 2 + z[1] ** 2 - 1.0]),
            jacobian=lambda z, th: np.array([[2.0 * z[0], 2.0 * z[1]]]),
            con_hessian=lambda z, th, lam: lam[0] * 2.0 * np.eye(2),
            bounded=[True, True],
        ),
        z0=np.array([0.3, 0.8]),
        z_star=np.array([math.sqrt(0.5), math.sqrt(0.5)]),
        f_star=-math.sqrt(2.0),
        lam_star=np.array([1.0 / math.sqrt(2.0)]),
    ))

    # 4. entropy on the simplex (active barrier, interior optimum)
    n = 5
    problems.append(CorpusProblem(
        name="entropy_simplex",
        nlp=FunctionNlp(
            n,
            objective=lambda z, th: float(np.sum(z * np.log(z))),
            gradient=lambda z, th: np.log(z) + 1.0,
            hessian=lambda z, th: np.diag(1.0 / z),
            constraints=lambda z, th: np.array([float(np.sum(z)) - 1.0]),
            jacobian=lambda z, th: np.ones((1, n)),
            bounded=[True] * n,
        ),
        z0=np.full(n, 0.5),
        z_star=np.full(n, 1.0 / n),
        f_star=-math.log(n),
        lam_star=np.array([math.log(n) - 1.0]),
    ))

    # 5. shifted QP with equality and bounds
    problems.append(CorpusProblem(
        name="shifted_qp",
        nlp=FunctionNlp(
            2,
            objective=lambda z, th: (z[0] - 1.0) ** 2 + (z[1] - 2.0) ** 2,
            gradient=lambda z, th: np.array([2.0 * (z[0] - 1.0), 2.0 * (z[1] - 2.0)]),
            hessian=lambda z, th: 2.0 * np.eye(2),
            constraints=lambda z, th: np.array([z[0] + z[1] - 2.0]),
            jacobian=lambda z, th: np.array([[1.0, 1.0]]),
            bounded=[True, True],
        ),
        z0=np.array([1.0, 1.0]),
        z_star=np.array([0.5, 1.5]),
        f_star=0.5,
        lam_star=np.array([1.0]),
    ))

    # 6. Rosenbrock valley restricted to the nonnegative quadrant
    def rosen_h(z, th):
        return np.array([
            [2.0 + 1200.0 * z[0] ** 2 - 400.0 * z[1], -400.0 * z[0]],
            [-400.0 * z[0], 200.0],
        ])

    problems.append(CorpusProblem(
        name="rosenbrock_bounded",
        nlp=FunctionNlp(
            2,
            objective=lambda z, th: (1.0 - z[0]) ** 2 + 100.0 * (z[1] - z[0] ** 2) ** 2,
            gradient=lambda z, th: np.array([
                -2.0 * (1.0 - z[0]) - 400.0 * z[0] * (z[1] - z[0] ** 2),
                200.0 * (z[1] - z[0] ** 2),
            ]),
            hessian=rosen_h,
            bounded=[True, True],
        ),
        z0=np.array([0.2, 0.8]),
        z_star=np.array([1.0, 1.0]),
        f_star=0.0,
    ))

    return problems


def parametric_qp() -> FunctionNlp:
    """``min 0.5 (x - theta)^2, x >= 0``; solution x*(theta) = theta for theta > 0."""
    return FunctionNlp(
        1,
        objective=lambda z, th: 0.5 * (z[0] - th[0]) ** 2,
        gradient=lambda z, th: np.array([z[0] - th[0]]),
        hessian=lambda z, th: np.array([[1.0]]),
        bounded=[True],
        n_theta=1,
        theta_jacobians=lambda z, th, lam: (np.array([[-1.0]]), np.zeros((0, 1))),
    )


def brute_force_assignment(R: np.ndarray):
    """Exhaustive minimum-cost bijection; oracle for the Hungarian method."""
    n = R.shape[0]
    best_cost = math.inf
    best_perm = None
    for perm in itertools.permutations(range(n)):
        cost = sum(R[i, perm[i]] for i in range(n))
        if cost < best_cost - 1e-12 or (
                abs(cost - best_cost) <= 1e-12 and (best_perm is None or perm < best_perm)):
            best_cost = cost
            best_perm = perm
    return list(best_perm), best_cost


def run_selftest(verbose: bool = True) -> list[tuple[str, bool, str]]:
    """Run the built-in checks; returns (name, passed, detail) rows."""
    from .allocation import hungarian
    from .nlp import build_sensitivity_direction, sensitivity_step

    results = []
    rng = np.random.default_rng(7)

    # solver corpus
    for prob in solver_corpus():
        sol = ipm_solve(prob.nlp, np.zeros(0), prob.z0, IpmOptions())
        err = float(np.max(np.abs(sol.z - prob.z_star)))
        ok = sol.converged and err < 1e-5 and sol.info["kkt_residual"] <= 1e-6
        results.append((f"corpus:{prob.name}", ok,
                        f"|z-z*|={err:.2e}, kkt={sol.info['kkt_residual']:.2e}"))

    # derivative checks on the corpus
    for prob in solver_corpus():
        pts = [np.abs(prob.z0 + 0.3 * rng.standard_normal(prob.nlp.n_z)) + 0.2
               for _ in range(10)]
        worst = check_derivatives(prob.nlp, np.zeros(0), pts)
        results.append((f"derivatives:{prob.name}", worst < 1e-5,
                        f"max rel err={worst:.2e}"))

    # Hungarian vs brute force
    worst_gap = 0.0
    ok = True
    for _ in range(50):
        n = int(rng.integers(2, 8))
        R = rng.uniform(0, 10, size=(n, n))
        a = hungarian(R)
        _, bf_cost = brute_force_assignment(R)
        worst_gap = max(worst_gap, abs(a.total - bf_cost))
        if abs(a.total - bf_cost) > 1e-9:
            ok = False
    results.append(("hungarian:brute_force", ok, f"max cost gap={worst_gap:.2e}"))

    # sensitivity on the parametric QP: exact for a quadratic model
    qp = parametric_qp()
    base = ipm_solve(qp, np.array([2.0]), np.array([1.0]), IpmOptions())
    direction = build_sensitivity_direction(qp, base)
    z_pred, _, _ = sensitivity_step(base, direction, np.array([0.5]))
    err_qp = abs(z_pred[0] - 2.5)
    results.append(("sensitivity:parametric_qp", err_qp < 1e-6,
                    f"|x_pred - x*|={err_qp:.2e}"))

    if verbose:
        for name, ok, detail in results:
            print(f"{'PASS' if ok else 'FAIL'}  {name:32s} {detail}")
    return results
