"""Landing-point allocation: sensitivity-based costing and optimal assignment.

Each parafoil solves the fixed-point landing problem once for the area
center, then prices every candidate landing point with a single KKT
backsolve. The resulting control-energy cost matrix feeds a minimum-cost
assignment solved by the Hungarian method.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFinite, SingularKkt
from .nlp import (
    NlpSolution,
    build_sensitivity_direction,
    ipm_solve,
    sensitivity_step,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class LandingPointSet:
    """Area center, candidate points, ground altitude and area radius."""

    center: tuple
    points: list
    z_f: float = 0.0
    d_f: float = 300.0

    def __post_init__(self):
        self.center = (float(self.center[0]), float(self.center[1]))
        self.points = [(float(p[0]), float(p[1])) for p in self.points]
        for p in self.points:
            if math.hypot(p[0] - self.center[0], p[1] - self.center[1]) > self.d_f + 1e-9:
                raise ValueError(f"landing point {p} outside area radius {self.d_f}")

    @classmethod
    def circle(cls, center=(0.0, 0.0), n=6, radius=100.0, z_f=0.0, d_f=300.0,
               phase=0.0) -> "LandingPointSet":
        """Evenly spaced points on a circle around the area center."""
        pts = [(center[0] + radius * math.cos(phase + 2 * math.pi * k / n),
                center[1] + radius * math.sin(phase + 2 * math.pi * k / n))
               for k in range(n)]
        return cls(center=center, points=pts, z_f=z_f, d_f=d_f)

    def __len__(self):
        return len(self.points)


@dataclass
class CostMatrix:
    """Control-energy matrix; entry (i, k) prices parafoil i on point k."""

    R: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float)
        if self.R.ndim != 2 or self.R.shape[0] != self.R.shape[1]:
            raise ValueError("cost matrix must be square")
        if not np.all(np.isfinite(self.R)):
            raise NonFinite("cost matrix has non-finite entries")


@dataclass
class Assignment:
    """Parafoil-to-landing-point bijection with its total cost."""

    perm: list
    total: float

    def pairs(self):
        return [(i, k) for i, k in enumerate(self.perm)]


# ---------------------------------------------------------------------------
# Hungarian method
# ---------------------------------------------------------------------------

def _assignment_cost(R: np.ndarray) -> tuple[list[int], float]:
    """O(n^3) shortest-augmenting-path assignment (potentials form)."""
    n = R.shape[0]
    INF = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)      # p[j]: row matched to column j (1-based)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [INF] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = -1
            for j in range(1, n + 1):
                if not used[j]:
                    cur = R[i0 - 1][j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    perm = [0] * n
    for j in range(1, n + 1):
        perm[p[j] - 1] = j - 1
    total = float(sum(R[i][perm[i]] for i in range(n)))
    return perm, total


def hungarian(R) -> Assignment:
    """Minimum-cost bijection between rows and columns of a square matrix.

    Deterministic: among cost-equal optima the lexicographically smallest
    permutation is returned.

    Raises
    ------
    NonFinite
        If the matrix contains NaN or infinite entries.
    """
    if isinstance(R, CostMatrix):
        R = R.R
    R = np.asarray(R, dtype=float)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise ValueError("cost matrix must be square")
    if not np.all(np.isfinite(R)):
        raise NonFinite("cost matrix has non-finite entries")
    n = R.shape[0]
    if n == 0:
        return Assignment(perm=[], total=0.0)
    _, best = _assignment_cost(R)
    tol = 1e-9 * max(1.0, abs(best))

    # lexicographic refinement: lock the smallest column per row that still
    # admits an optimal completion
    rows = list(range(n))
    cols = list(range(n))
    perm = [0] * n
    prefix = 0.0
    for i in rows:
        chosen = None
        for k in sorted(cols):
            rest_rows = [r for r in rows if r > i]
            rest_cols = [c for c in cols if c != k]
            if rest_rows:
                sub = R[np.ix_(rest_rows, rest_cols)]
                _, sub_cost = _assignment_cost(sub)
            else:
                sub_cost = 0.0
            if prefix + R[i, k] + sub_cost <= best + tol:
                chosen = k
                break
        if chosen is None:  # numerical safety net
            chosen = min(cols)
        perm[i] = chosen
        prefix += R[i, chosen]
        cols.remove(chosen)
    return Assignment(perm=perm, total=float(sum(R[i, perm[i]] for i in range(n))))


# ---------------------------------------------------------------------------
# sensitivity-based point evaluation
# ---------------------------------------------------------------------------

def evaluate_landing_points(nlp, base: NlpSolution, points) -> np.ndarray:
    """Predicted control energy of one parafoil at each candidate point.

    ``base`` must be a converged solve of the landing problem at the area
    center. Each point costs one backsolve with the retained KKT factors;
    the energy is the quadrature term of the objective evaluated at the
    sensitivity-updated primal. Linearization can produce slightly negative
    energies; those are clamped to zero with a warning.
    """
    if not base.converged or base.kkt is None:
        raise SingularKkt("base solution is not converged with factors")
    direction = build_sensitivity_direction(nlp, base)
    theta0 = base.theta
    out = np.empty(len(points))
    updates = []
    for idx, point in enumerate(points):
        dtheta = np.asarray(point, dtype=float) - theta0
        z_new, lam_new, nu_new = sensitivity_step(base, direction, dtheta)
        energy = nlp.energy(z_new) if hasattr(nlp, "energy") else nlp.objective(
            z_new, theta0 + dtheta)
        if energy < 0.0:
            log.warning("clamping negative predicted energy %.3e at point %s",
                        energy, point)
            energy = 0.0
        out[idx] = energy
        updates.append((z_new, lam_new, nu_new))
    return out, updates


@dataclass
class AllocationResult:
    cost_matrix: CostMatrix
    assignment: Assignment
    trajectories: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    base_solutions: list = field(default_factory=list)


def allocate(parafoil_states, kin_params, points: LandingPointSet,
             mesh=None, beta: float = 100.0, w_x: float = 0.0,
             alpha_anti_wind: float = math.pi, solver_opts=None) -> AllocationResult:
    """Full allocation round: base solves, sensitivity costing, assignment.

    For every parafoil a base landing solve at the area center prices all
    candidate points via KKT sensitivity; the Hungarian assignment then
    fixes the terminal constraint of each parafoil, and the final reference
    trajectory is a full re-solve at the assigned point warm-started from
    the sensitivity-updated primal.
    """
    from .transcription import (
        Mesh, extract_trajectory, initial_guess, transcribe_landing)
    from .nlp import IpmOptions

    mesh = mesh or Mesh()
    solver_opts = solver_opts or IpmOptions()
    n = len(parafoil_states)
    if n != len(points):
        raise ValueError("need exactly one landing point per parafoil")

    R = np.zeros((n, n))
    bases = []
    all_updates = []
    center = np.asarray(points.center, dtype=float)
    for i, (x0, kp) in enumerate(zip(parafoil_states, kin_params)):
        nlp = transcribe_landing(kp, x0, center, points.z_f, alpha_anti_wind,
                                 mesh, beta, w_x=w_x)
        guess = initial_guess(nlp, x0, center, points.z_f)
        sol = ipm_solve(nlp, center, guess, solver_opts)
        if not sol.converged:
            raise SingularKkt(f"base landing solve failed for parafoil {i}")
        row, updates = evaluate_landing_points(nlp, sol, points.points)
        R[i] = row
        bases.append((nlp, sol))
        all_updates.append(updates)

    assignment = hungarian(R)

    trajectories = []
    energies = []
    warm_opts = IpmOptions(mu_init=1e-4, tol=solver_opts.tol,
                           max_iter=solver_opts.max_iter)
    for i, k in enumerate(assignment.perm):
        nlp, base = bases[i]
        target = np.asarray(points.points[k], dtype=float)
        z_w, lam_w, nu_w = all_updates[i][k]
        sol = ipm_solve(nlp, target, z_w, warm_opts, lam0=lam_w, nu0=nu_w)
        if not sol.converged:
            sol = ipm_solve(nlp, target,
                            initial_guess(nlp, parafoil_states[i], target, points.z_f),
                            solver_opts)
        if not sol.converged:
            raise SingularKkt(f"assigned-point solve failed for parafoil {i}")
        traj = extract_trajectory(sol, nlp)
        trajectories.append(traj)
        energies.append(traj.energy)

    return AllocationResult(
        cost_matrix=CostMatrix(R), assignment=assignment,
        trajectories=trajectories, energies=energies,
        base_solutions=[b for _, b in bases],
    )
