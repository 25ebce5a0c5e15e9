"""Direct Radau collocation transcriptions of the guidance and control problems.

Four continuous-time problems become parametric NLPs in the ``z >= 0``
standard form of :mod:`parafleet.nlp`:

* fixed-point landing with l1-relaxed terminal conditions (kinematic model,
  free final time),
* the same problem with hard frozen-trajectory separation constraints
  (collision-free replanning),
* receding-horizon trajectory tracking with the 6-DOF model,
* moving-horizon correction of the kinematic speed offsets.

Two-sided boxes (turn rate, final time, tracking controls, correction
offsets) are shifted to lower bounds at zero plus a slack equality for the
upper side, so every bound seen by the solver reads ``z_i >= 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import models
from .errors import (
    AltitudeBelowTarget,
    HistoryTooShort,
    InvalidMesh,
    NotConverged,
    ReferenceTooShort,
)
from .models import KinParams, KinState, ParafoilParams
from .nlp import Nlp, NlpSolution

__all__ = [
    "Mesh",
    "Trajectory",
    "transcribe_landing",
    "transcribe_replan",
    "transcribe_nmpc",
    "transcribe_mhc",
    "extract_trajectory",
    "initial_guess",
    "lift_kinematic_reference",
]


# ---------------------------------------------------------------------------
# Radau machinery
# ---------------------------------------------------------------------------

_RADAU_POINTS = {
    1: (1.0,),
    2: (1.0 / 3.0, 1.0),
    3: ((4.0 - math.sqrt(6.0)) / 10.0, (4.0 + math.sqrt(6.0)) / 10.0, 1.0),
}


def _lagrange_diff_matrix(nodes: np.ndarray) -> np.ndarray:
    """D[l, j] = derivative of the j-th Lagrange basis at node l (l >= 1)."""
    n = len(nodes)
    D = np.zeros((n - 1, n))
    for li in range(1, n):
        t_l = nodes[li]
        for j in range(n):
            if j == li:
                D[li - 1, j] = sum(1.0 / (t_l - nodes[k])
                                   for k in range(n) if k != li)
            else:
                prod = 1.0 / (nodes[j] - t_l)
                for k in range(n):
                    if k != j and k != li:
                        prod *= (t_l - nodes[k]) / (nodes[j] - nodes[k])
                D[li - 1, j] = prod
    return D


def _radau_weights(taus: np.ndarray) -> np.ndarray:
    """Quadrature weights over [0, 1] exact for degree len(taus)-1 monomials."""
    c = len(taus)
    V = np.vander(taus, c, increasing=True).T
    rhs = 1.0 / np.arange(1, c + 1)
    return np.linalg.solve(V, rhs)


@dataclass
class Mesh:
    """Collocation mesh: K uniform elements with C Radau points each."""

    K: int = 30
    C: int = 3

    def __post_init__(self):
        if self.K < 1 or self.C not in _RADAU_POINTS:
            raise InvalidMesh(f"K={self.K}, C={self.C} unsupported")
        self.taus = np.array(_RADAU_POINTS[self.C])
        self.nodes = np.concatenate([[0.0], self.taus])
        self.D = _lagrange_diff_matrix(self.nodes)
        self.weights = _radau_weights(self.taus)

    @property
    def n_nodes(self) -> int:
        return self.K * self.C


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

class Trajectory:
    """Time-stamped state/control profile on a collocation or sample grid.

    States may be 4-dim (guidance: x, y, altitude, heading) or 12-dim (full
    plant state). Position queries hold the first/last value outside the
    time span, so landed vehicles keep occupying their touchdown point.
    """

    def __init__(self, times, states, controls, energy: float = 0.0,
                 elements=None, meta=None):
        self.times = np.asarray(times, dtype=float)
        self.states = np.atleast_2d(np.asarray(states, dtype=float))
        self.controls = np.atleast_2d(np.asarray(controls, dtype=float))
        if self.times[0] >= self.times[-1]:
            raise ValueError("times must be strictly increasing")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        self.energy = float(energy)
        self._elements = elements  # (t0, tf, K, coeff arrays) for polynomial eval
        self.meta = meta or {}

    @property
    def t0(self) -> float:
        return float(self.times[0])

    @property
    def tf(self) -> float:
        return float(self.times[-1])

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def _positions_raw(self):
        if self.dim == 4:
            return self.states[:, 0:3]
        return np.column_stack([self.states[:, 0], self.states[:, 1],
                                -self.states[:, 2]])

    def state(self, t: float) -> np.ndarray:
        """State at time t; held constant outside the span."""
        return self.state_many(np.array([t]))[0]

    def state_many(self, ts) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        if self._elements is not None:
            return self._poly_eval(ts, 0)
        tc = np.clip(ts, self.t0, self.tf)
        out = np.empty((len(ts), self.dim))
        for d in range(self.dim):
            out[:, d] = np.interp(tc, self.times, self.states[:, d])
        return out

    def control(self, t: float) -> np.ndarray:
        tc = np.clip(t, self.t0, self.tf)
        out = np.empty(self.controls.shape[1])
        for d in range(self.controls.shape[1]):
            out[d] = np.interp(tc, self.times, self.controls[:, d])
        return out

    def position_many(self, ts) -> np.ndarray:
        """Ground positions (x, y, altitude) at the query times."""
        st = self.state_many(ts)
        if self.dim == 4:
            return st[:, 0:3]
        return np.column_stack([st[:, 0], st[:, 1], -st[:, 2]])

    def position_with_derivs(self, ts):
        """Positions plus first/second time derivatives (zero when held)."""
        ts = np.asarray(ts, dtype=float)
        if self._elements is not None:
            p = self._poly_eval(ts, 0)[:, 0:3]
            v = self._poly_eval(ts, 1)[:, 0:3]
            a = self._poly_eval(ts, 2)[:, 0:3]
            return p, v, a
        p = self.position_many(ts)
        v = np.zeros_like(p)
        a = np.zeros_like(p)
        inside = (ts > self.t0) & (ts < self.tf)
        if np.any(inside):
            dt = 1e-3
            pp = self.position_many(ts[inside] + dt)
            pm = self.position_many(ts[inside] - dt)
            v[inside] = (pp - pm) / (2 * dt)
            a[inside] = (pp - 2 * p[inside] + pm) / dt ** 2
        return p, v, a

    def _deriv_coeffs(self, deriv: int) -> np.ndarray:
        """Element polynomial coefficients of the deriv-th derivative."""
        if not hasattr(self, "_dcache"):
            self._dcache = {0: self._elements[3]}
        while deriv not in self._dcache:
            prev = self._dcache[max(self._dcache)]
            deg = prev.shape[-1] - 1
            if deg == 0:
                nxt = np.zeros(prev.shape[:-1] + (1,))
            else:
                nxt = prev[..., :-1] * np.arange(deg, 0, -1)
            self._dcache[max(self._dcache) + 1] = nxt
        return self._dcache[deriv]

    def _poly_eval(self, ts, deriv: int) -> np.ndarray:
        t0, tf, K, _ = self._elements
        span = tf - t0
        s = np.clip((ts - t0) / span, 0.0, 1.0)
        kk = np.minimum((s * K).astype(int), K - 1)
        tau = s * K - kk
        cfs = self._deriv_coeffs(deriv)[kk]          # (M, dim, deg+1)
        out = np.array(cfs[..., 0])
        for i in range(1, cfs.shape[-1]):
            out = out * tau[:, None] + cfs[..., i]
        out *= (K / span) ** deriv
        held_lo = ts <= t0
        held_hi = ts >= tf
        if deriv == 0:
            out[held_lo] = self.states[0]
            out[held_hi] = self.states[-1]
        else:
            out[held_lo] = 0.0
            out[held_hi] = 0.0
        return out


# ---------------------------------------------------------------------------
# kinematic landing / replanning NLP
# ---------------------------------------------------------------------------

class KinematicNlp(Nlp):
    """Collocated fixed-point landing problem, optionally with separation
    constraints against frozen trajectories.

    Parameter vector theta = (theta_x, theta_y): the landing point enters
    only the two terminal residual equations.
    """

    NS = 4

    def __init__(self, kp: KinParams, x0: KinState, z_f: float,
                 alpha_target: float, mesh: Mesh, beta: float,
                 w_x: float = 0.0, frozen: Sequence[Trajectory] = (),
                 d_s: float = 0.0, t_start: float = 0.0,
                 tf_bounds: Optional[tuple] = None):
        if x0.z <= z_f:
            raise AltitudeBelowTarget(f"start altitude {x0.z} <= target {z_f}")
        self.kp = kp
        self.x0 = x0
        self.z_f = float(z_f)
        self.alpha_target = float(alpha_target)
        self.mesh = mesh
        self.beta = float(beta)
        self.w_x = float(w_x)
        self.frozen = list(frozen)
        self.d_s = float(d_s)
        self.t_start = float(t_start)

        K, C = mesh.K, mesh.C
        self.tf_nominal = (x0.z - z_f) / kp.v_d_eff
        if tf_bounds is None:
            tf_bounds = (0.5 * self.tf_nominal, 2.0 * self.tf_nominal)
        self.t_lo, self.t_hi = float(tf_bounds[0]), float(tf_bounds[1])
        self.h = 1.0 / K

        NS = self.NS
        nf = len(self.frozen)
        self.i_x0 = 0
        self.i_S = 4
        self.i_u = self.i_S + NS * K * C
        self.i_wu = self.i_u + K * C
        self.i_tf = self.i_wu + K * C
        self.i_wt = self.i_tf + 1
        self.i_p = self.i_wt + 1
        self.i_n = self.i_p + 4
        self.i_sig = self.i_n + 4
        self.n_z = self.i_sig + nf * K * C
        self.n_theta = 2

        self.c_init = 0
        self.c_col = 4
        self.c_box = self.c_col + NS * K * C
        self.c_tbox = self.c_box + K * C
        self.c_term = self.c_tbox + 1
        self.c_dist = self.c_term + 4
        self.n_c = self.c_dist + nf * K * C

        self.bounded = np.zeros(self.n_z, dtype=bool)
        self.bounded[self.i_u:self.n_z] = True

        # logical (pre-slack) sizes, for reporting and tests
        self.meta = {
            "logical_vars": K * C * (NS + 1) + NS + 1 + 8,
            "distance_constraints": nf * K * C,
        }

        # node fractions s in [0, 1] for every (k, l)
        kk = np.repeat(np.arange(K), C)
        self.s_nodes = (kk + np.tile(mesh.taus, K)) / K
        self._build_patterns()

    # -- variable views ----------------------------------------------------

    def _S_full(self, z):
        """States at element nodes incl. the left endpoint, (K, C+1, 4)."""
        K, C = self.mesh.K, self.mesh.C
        S = z[self.i_S:self.i_S + 4 * K * C].reshape(K, C, 4)
        Sf = np.empty((K, C + 1, 4))
        Sf[:, 1:] = S
        Sf[0, 0] = z[self.i_x0:self.i_x0 + 4]
        Sf[1:, 0] = S[:-1, -1]
        return Sf

    def _controls(self, z):
        K, C = self.mesh.K, self.mesh.C
        return z[self.i_u:self.i_u + K * C].reshape(K, C) - self.kp.psi_dot_max

    def _tf(self, z):
        return z[self.i_tf] + self.t_lo

    def energy(self, z) -> float:
        """Control-energy quadrature (objective without penalty terms)."""
        K = self.mesh.K
        u = self._controls(z)
        w = self.mesh.weights
        return float(self._tf(z) * self.h * np.sum(u ** 2 @ w))

    # -- index plumbing ----------------------------------------------------

    def _state_col(self, k, j):
        """Column indices (4) of the j-th node state of element k (j=0..C)."""
        if j == 0:
            if k == 0:
                return np.arange(self.i_x0, self.i_x0 + 4)
            return self._state_col(k - 1, self.mesh.C)
        return self.i_S + 4 * ((k * self.mesh.C) + (j - 1)) + np.arange(4)

    def _build_patterns(self):
        K, C = self.mesh.K, self.mesh.C
        D = self.mesh.D
        rows, cols, const = [], [], []

        # init rows
        for s in range(4):
            rows.append(self.c_init + s)
            cols.append(self.i_x0 + s)
            const.append(1.0)

        # collocation D-pattern (constant entries)
        for k in range(K):
            node_cols = [self._state_col(k, j) for j in range(C + 1)]
            for l in range(C):
                r0 = self.c_col + 4 * (k * C + l)
                for j in range(C + 1):
                    for s in range(4):
                        rows.append(r0 + s)
                        cols.append(node_cols[j][s])
                        const.append(D[l, j])
        self._n_const = len(rows)

        # variable entries: order matters, data recomputed each call
        var_rows, var_cols = [], []
        # (a) -h tf df/dpsi in rows x, y at psi col of node (k,l)
        for k in range(K):
            for l in range(C):
                r0 = self.c_col + 4 * (k * C + l)
                psi_col = self._state_col(k, l + 1)[3]
                var_rows += [r0 + 0, r0 + 1]
                var_cols += [psi_col, psi_col]
        # (b) -h tf on (row psi, col u)
        for k in range(K):
            for l in range(C):
                var_rows.append(self.c_col + 4 * (k * C + l) + 3)
                var_cols.append(self.i_u + k * C + l)
        # (c) -h f on col t_hat
        for k in range(K):
            for l in range(C):
                r0 = self.c_col + 4 * (k * C + l)
                var_rows += [r0, r0 + 1, r0 + 2, r0 + 3]
                var_cols += [self.i_tf] * 4
        rows += var_rows
        cols += var_cols

        # control box rows: u + wu = 2 psi_dot_max
        for i in range(K * C):
            rows += [self.c_box + i, self.c_box + i]
            cols += [self.i_u + i, self.i_wu + i]
            const_extra = [1.0, 1.0]
            const += const_extra
        # tf box row
        rows += [self.c_tbox, self.c_tbox]
        cols += [self.i_tf, self.i_wt]
        const += [1.0, 1.0]
        # terminal rows: X_end - target = p - n
        end_cols = self._state_col(K - 1, C)
        for s in range(4):
            rows += [self.c_term + s] * 3
            cols += [end_cols[s], self.i_p + s, self.i_n + s]
            const += [1.0, -1.0, 1.0]

        # distance rows: var entries (3 pos cols, t_hat, sigma const -1)
        nf = len(self.frozen)
        dist_var_rows, dist_var_cols = [], []
        if nf:
            for fi in range(nf):
                for i in range(K * C):
                    r = self.c_dist + fi * K * C + i
                    k, l = divmod(i, C)
                    pcols = self._state_col(k, l + 1)[0:3]
                    dist_var_rows += [r, r, r, r]
                    dist_var_cols += [pcols[0], pcols[1], pcols[2], self.i_tf]
                    rows.append(r)
                    cols.append(self.i_sig + fi * K * C + i)
                    const.append(-1.0)

        # assemble: constants come from `const` but we interleaved; rebuild
        self._jac_rows = np.array(rows + dist_var_rows, dtype=np.int32)
        self._jac_cols = np.array(cols + dist_var_cols, dtype=np.int32)
        self._jac_const = np.array(const, dtype=float)
        n_var_mid = len(var_rows)
        self._split_const_end = len(const)  # within `rows` the const data covers
        self._n_var_mid = n_var_mid
        # layout of the final data vector:
        #   [const block (init + D)] [var mid (a, b, c)] [const tail (box..term, sigma)]
        #   [dist var block]
        # To keep it simple, recompute full data each call into a template:
        self._data_template = np.zeros(len(self._jac_rows))
        # positions: first self._n_const constants, then var mid, then the tail
        self._tail_start = self._n_const + n_var_mid
        n_tail = len(const) - self._n_const
        self._data_template[:self._n_const] = self._jac_const[:self._n_const]
        self._data_template[self._tail_start:self._tail_start + n_tail] = \
            self._jac_const[self._n_const:]
        self._n_tail = n_tail
        self._dist_start = self._tail_start + n_tail

        # Hessian pattern (both triangles)
        K_, C_ = K, C
        hr, hc = [], []
        # objective: u-u diagonal, u-t cross
        for i in range(K_ * C_):
            hr.append(self.i_u + i)
            hc.append(self.i_u + i)
        for i in range(K_ * C_):
            hr += [self.i_u + i, self.i_tf]
            hc += [self.i_tf, self.i_u + i]
        # collocation: psi-psi, psi-t
        for k in range(K_):
            for l in range(C_):
                pc = self._state_col(k, l + 1)[3]
                hr.append(pc)
                hc.append(pc)
        for k in range(K_):
            for l in range(C_):
                pc = self._state_col(k, l + 1)[3]
                hr += [pc, self.i_tf]
                hc += [self.i_tf, pc]
        # collocation: u-t cross (from -h tf u term in psi row)
        for i in range(K_ * C_):
            hr += [self.i_u + i, self.i_tf]
            hc += [self.i_tf, self.i_u + i]
        # distance rows: rr diag(3), r-t cross, t-t
        if nf:
            for fi in range(nf):
                for i in range(K_ * C_):
                    k, l = divmod(i, C_)
                    pcols = self._state_col(k, l + 1)[0:3]
                    for s in range(3):
                        hr.append(pcols[s])
                        hc.append(pcols[s])
                    for s in range(3):
                        hr += [pcols[s], self.i_tf]
                        hc += [self.i_tf, pcols[s]]
                    hr.append(self.i_tf)
                    hc.append(self.i_tf)
        self._hess_rows = np.array(hr, dtype=np.int32)
        self._hess_cols = np.array(hc, dtype=np.int32)

    # -- frozen trajectory sampling ----------------------------------------

    def _frozen_eval(self, z):
        """Positions/derivatives of each frozen trajectory at node times."""
        tf = self._tf(z)
        ts = self.t_start + tf * self.s_nodes
        out = []
        for tr in self.frozen:
            out.append(tr.position_with_derivs(ts))
        return out

    # -- NLP interface -------------------------------------------------------

    def objective(self, z, theta):
        pn = z[self.i_p:self.i_p + 8]
        return self.energy(z) + self.beta * float(np.sum(pn))

    def gradient(self, z, theta):
        K, C = self.mesh.K, self.mesh.C
        g = np.zeros(self.n_z)
        u = self._controls(z)
        tf = self._tf(z)
        w = self.mesh.weights
        g[self.i_u:self.i_u + K * C] = (2.0 * tf * self.h) * (u * w).ravel()
        g[self.i_tf] = self.h * float(np.sum(u ** 2 @ w))
        g[self.i_p:self.i_p + 8] = self.beta
        return g

    def _kin_f(self, Scol, u):
        """Kinematic rhs at the collocation nodes; Scol (K, C, 4), u (K, C)."""
        psi = Scol[:, :, 3]
        vh = self.kp.v_h_eff
        vd = self.kp.v_d_eff
        f = np.empty_like(Scol)
        f[:, :, 0] = vh * np.cos(psi) + self.w_x
        f[:, :, 1] = vh * np.sin(psi)
        f[:, :, 2] = -vd
        f[:, :, 3] = u
        return f

    def constraints(self, z, theta):
        K, C = self.mesh.K, self.mesh.C
        c = np.empty(self.n_c)
        Sf = self._S_full(z)
        u = self._controls(z)
        tf = self._tf(z)
        c[self.c_init:self.c_init + 4] = z[self.i_x0:self.i_x0 + 4] - self.x0.as_array()
        dS = np.einsum("lj,kjs->kls", self.mesh.D, Sf)
        f = self._kin_f(Sf[:, 1:], u)
        c[self.c_col:self.c_col + 4 * K * C] = (dS - self.h * tf * f).reshape(-1)
        c[self.c_box:self.c_box + K * C] = (
            z[self.i_u:self.i_u + K * C] + z[self.i_wu:self.i_wu + K * C]
            - 2.0 * self.kp.psi_dot_max)
        c[self.c_tbox] = z[self.i_tf] + z[self.i_wt] - (self.t_hi - self.t_lo)
        end = Sf[K - 1, C]
        target = np.array([theta[0], theta[1], self.z_f, self.alpha_target])
        p = z[self.i_p:self.i_p + 4]
        nn = z[self.i_n:self.i_n + 4]
        c[self.c_term:self.c_term + 4] = end - target - p + nn
        if self.frozen:
            pos = Sf[:, 1:, 0:3].reshape(-1, 3)
            sig = z[self.i_sig:]
            d2 = self.d_s ** 2
            for fi, (P, V, A) in enumerate(self._frozen_eval(z)):
                e = pos - P
                c[self.c_dist + fi * K * C:self.c_dist + (fi + 1) * K * C] = (
                    np.sum(e * e, axis=1) - d2
                    - sig[fi * K * C:(fi + 1) * K * C])
        return c

    def jacobian(self, z, theta):
        K, C = self.mesh.K, self.mesh.C
        Sf = self._S_full(z)
        u = self._controls(z)
        tf = self._tf(z)
        psi = Sf[:, 1:, 3]
        vh = self.kp.v_h_eff
        data = self._data_template.copy()
        pos = self._n_const
        # (a) rows x,y wrt psi: -h tf (-vh sin, vh cos)
        a = np.empty((K, C, 2))
        a[:, :, 0] = -self.h * tf * (-vh * np.sin(psi))
        a[:, :, 1] = -self.h * tf * (vh * np.cos(psi))
        na = 2 * K * C
        data[pos:pos + na] = a.reshape(-1)
        pos += na
        # (b) row psi wrt u: -h tf
        data[pos:pos + K * C] = -self.h * tf
        pos += K * C
        # (c) all rows wrt t_hat: -h f
        f = self._kin_f(Sf[:, 1:], u)
        data[pos:pos + 4 * K * C] = (-self.h * f).reshape(-1)
        if self.frozen:
            pos_nodes = Sf[:, 1:, 0:3].reshape(-1, 3)
            blocks = []
            for fi, (P, V, A) in enumerate(self._frozen_eval(z)):
                e = pos_nodes - P
                de = 2.0 * e                                   # wrt r (3)
                dt = -2.0 * np.sum(e * V, axis=1) * self.s_nodes  # wrt t_hat
                blk = np.column_stack([de, dt])
                blocks.append(blk.reshape(-1))
            data[self._dist_start:] = np.concatenate(blocks)
        return sp.coo_matrix(
            (data, (self._jac_rows, self._jac_cols)),
            shape=(self.n_c, self.n_z)).tocsr()

    def hessian(self, z, theta, lam, obj_weight: float = 1.0):
        K, C = self.mesh.K, self.mesh.C
        KC = K * C
        Sf = self._S_full(z)
        u = self._controls(z)
        tf = self._tf(z)
        psi = Sf[:, 1:, 3]
        vh = self.kp.v_h_eff
        w = self.mesh.weights
        lam_col = lam[self.c_col:self.c_col + 4 * KC].reshape(K, C, 4)
        lx, ly, lpsi = lam_col[:, :, 0], lam_col[:, :, 1], lam_col[:, :, 3]

        parts = []
        # objective u-u diag
        parts.append(obj_weight * (2.0 * tf * self.h) * np.tile(w, K))
        # objective u-t cross (both triangles)
        ut = obj_weight * (2.0 * self.h) * (u * w).reshape(-1)
        parts.append(np.repeat(ut, 2))
        # collocation psi-psi
        pp = self.h * tf * vh * (np.cos(psi) * lx + np.sin(psi) * ly)
        parts.append(pp.reshape(-1))
        # collocation psi-t (both)
        pt = self.h * vh * (np.sin(psi) * lx - np.cos(psi) * ly)
        parts.append(np.repeat(pt.reshape(-1), 2))
        # collocation u-t (both)
        utc = -self.h * lpsi.reshape(-1)
        parts.append(np.repeat(utc, 2))
        if self.frozen:
            pos_nodes = Sf[:, 1:, 0:3].reshape(-1, 3)
            for fi, (P, V, A) in enumerate(self._frozen_eval(z)):
                lam_d = lam[self.c_dist + fi * KC:self.c_dist + (fi + 1) * KC]
                e = pos_nodes - P
                rr = np.repeat(2.0 * lam_d, 3)                     # diag rr
                rt = (-2.0 * V * (lam_d * self.s_nodes)[:, None])  # cross (node, 3)
                tt = 2.0 * self.s_nodes ** 2 * lam_d * (
                    np.sum(V * V, axis=1) - np.sum(e * A, axis=1))
                node_parts = np.empty(KC * 7)
                for i in range(KC):
                    base = i * 7
                    node_parts[base:base + 3] = rr[3 * i:3 * i + 3]
                    node_parts[base + 3:base + 6] = np.repeat(rt[i], 1)
                    node_parts[base + 6] = tt[i]
                # expand cross terms to both triangles
                full = np.empty(KC * 10)
                for i in range(KC):
                    b10 = i * 10
                    b7 = i * 7
                    full[b10:b10 + 3] = node_parts[b7:b7 + 3]
                    full[b10 + 3] = node_parts[b7 + 3]
                    full[b10 + 4] = node_parts[b7 + 3]
                    full[b10 + 5] = node_parts[b7 + 4]
                    full[b10 + 6] = node_parts[b7 + 4]
                    full[b10 + 7] = node_parts[b7 + 5]
                    full[b10 + 8] = node_parts[b7 + 5]
                    full[b10 + 9] = node_parts[b7 + 6]
                parts.append(full)
        data = np.concatenate(parts)
        return sp.coo_matrix(
            (data, (self._hess_rows, self._hess_cols)),
            shape=(self.n_z, self.n_z)).tocsr()

    def theta_jacobians(self, z, theta, lam):
        dL = np.zeros((self.n_z, 2))
        dc = np.zeros((self.n_c, 2))
        dc[self.c_term + 0, 0] = -1.0
        dc[self.c_term + 1, 1] = -1.0
        return dL, dc


def transcribe_landing(kp: KinParams, x0: KinState, theta, z_f: float,
                       alpha_target: float, mesh: Mesh, beta: float = 100.0,
                       w_x: float = 0.0, t_start: float = 0.0,
                       tf_bounds=None) -> KinematicNlp:
    """Fixed-point landing problem; ``theta`` fixes the nominal point only
    through the NLP parameter vector, not the problem structure."""
    return KinematicNlp(kp, x0, z_f, alpha_target, mesh, beta, w_x=w_x,
                        t_start=t_start, tf_bounds=tf_bounds)


def transcribe_replan(kp: KinParams, x0: KinState, theta, frozen,
                      d_s: float, mesh: Mesh, beta: float = 100.0,
                      z_f: float = 0.0, alpha_target: float = math.pi,
                      w_x: float = 0.0, t_start: float = 0.0,
                      tf_bounds=None) -> KinematicNlp:
    """Landing problem plus hard separation constraints against frozen
    trajectories at every collocation node (never penalized)."""
    return KinematicNlp(kp, x0, z_f, alpha_target, mesh, beta, w_x=w_x,
                        frozen=frozen, d_s=d_s, t_start=t_start,
                        tf_bounds=tf_bounds)


# ---------------------------------------------------------------------------
# initial guess and extraction
# ---------------------------------------------------------------------------

def initial_guess(nlp: KinematicNlp, x0: KinState, theta, z_f: float) -> np.ndarray:
    """Straight-line descent guess with zero turn rate and interior slacks."""
    K, C = nlp.mesh.K, nlp.mesh.C
    z = np.zeros(nlp.n_z)
    start = x0.as_array()
    end = np.array([theta[0], theta[1], z_f, nlp.alpha_target])
    z[nlp.i_x0:nlp.i_x0 + 4] = start
    S = start[None, :] + nlp.s_nodes[:, None] * (end - start)[None, :]
    z[nlp.i_S:nlp.i_S + 4 * K * C] = S.reshape(-1)
    z[nlp.i_u:nlp.i_u + K * C] = nlp.kp.psi_dot_max        # u = 0 shifted
    z[nlp.i_wu:nlp.i_wu + K * C] = nlp.kp.psi_dot_max
    tf_guess = min(max(nlp.tf_nominal, nlp.t_lo + 1e-3), nlp.t_hi - 1e-3)
    z[nlp.i_tf] = tf_guess - nlp.t_lo
    z[nlp.i_wt] = (nlp.t_hi - nlp.t_lo) - z[nlp.i_tf]
    z[nlp.i_p:nlp.i_p + 8] = 0.1
    if nlp.frozen:
        # make distance slacks consistent (and strictly positive)
        c = nlp.constraints(z, np.asarray(theta, dtype=float))
        resid = c[nlp.c_dist:] + z[nlp.i_sig:]
        z[nlp.i_sig:] = np.maximum(resid, 1.0)
    return z


def extract_trajectory(sol: NlpSolution, nlp: KinematicNlp,
                       t_start: Optional[float] = None) -> Trajectory:
    """Grid trajectory plus per-element interpolating polynomials."""
    if not sol.converged:
        raise NotConverged(f"solution status: {sol.status}")
    K, C = nlp.mesh.K, nlp.mesh.C
    z = sol.z
    t0 = nlp.t_start if t_start is None else float(t_start)
    tf = nlp._tf(z)
    Sf = nlp._S_full(z)
    u = nlp._controls(z)

    times = t0 + tf * np.concatenate([[0.0], nlp.s_nodes])
    states = np.vstack([Sf[0, 0][None, :], Sf[:, 1:].reshape(-1, 4)])
    controls = np.concatenate([[u[0, 0]], u.reshape(-1)])[:, None]

    # per-element polynomial coefficients in local tau (polyval order)
    nodes = nlp.mesh.nodes
    coeffs = np.empty((K, 4, C + 1))
    V = np.vander(nodes, C + 1, increasing=False)
    for k in range(K):
        coeffs[k] = np.linalg.solve(V, Sf[k]).T
    return Trajectory(times, states, controls, energy=nlp.energy(z),
                      elements=(t0, t0 + tf, K, coeffs),
                      meta={"tf_rel": tf, "objective": sol.objective})


# ---------------------------------------------------------------------------
# centralized (coupled) multi-parafoil planning NLP
# ---------------------------------------------------------------------------

class CentralizedKinematicNlp(Nlp):
    """All parafoils in one coupled problem with index-paired separation.

    Pairwise constraints compare collocation node ``m`` of vehicle ``i``
    against node ``m`` of vehicle ``j`` even though their free final times
    differ, so the physical times generally disagree -- the structural
    weakness of the coupled formulation that the decoupled replanner
    avoids. Used as the comparison baseline only.
    """

    def __init__(self, subs: list, targets: list, d_s: float):
        if len({(s.mesh.K, s.mesh.C) for s in subs}) != 1:
            raise InvalidMesh("all subproblems must share one mesh")
        self.subs = subs
        self.targets = [np.asarray(t, dtype=float) for t in targets]
        self.d_s = float(d_s)
        N = len(subs)
        KC = subs[0].mesh.n_nodes
        self.KC = KC
        self.pairs = [(i, j) for i in range(N) for j in range(i + 1, N)]
        self.z_off = np.cumsum([0] + [s.n_z for s in subs])
        self.c_off = np.cumsum([0] + [s.n_c for s in subs])
        self.i_sig = int(self.z_off[-1])
        self.c_pair = int(self.c_off[-1])
        self.n_z = self.i_sig + len(self.pairs) * KC
        self.n_c = self.c_pair + len(self.pairs) * KC
        self.n_theta = 0
        self.bounded = np.concatenate(
            [s.bounded for s in subs] + [np.ones(len(self.pairs) * KC, dtype=bool)])
        # position columns per sub, (KC, 3)
        self.pos_cols = []
        for si, s in enumerate(subs):
            cols = np.empty((KC, 3), dtype=np.int64)
            for m in range(KC):
                k, l = divmod(m, s.mesh.C)
                cols[m] = s._state_col(k, l + 1)[0:3] + self.z_off[si]
            self.pos_cols.append(cols)

    def _sub_z(self, z, i):
        return z[self.z_off[i]:self.z_off[i + 1]]

    def objective(self, z, theta):
        return sum(s.objective(self._sub_z(z, i), self.targets[i])
                   for i, s in enumerate(self.subs))

    def gradient(self, z, theta):
        g = np.zeros(self.n_z)
        for i, s in enumerate(self.subs):
            g[self.z_off[i]:self.z_off[i + 1]] = s.gradient(
                self._sub_z(z, i), self.targets[i])
        return g

    def constraints(self, z, theta):
        c = np.empty(self.n_c)
        for i, s in enumerate(self.subs):
            c[self.c_off[i]:self.c_off[i + 1]] = s.constraints(
                self._sub_z(z, i), self.targets[i])
        d2 = self.d_s ** 2
        for pi, (i, j) in enumerate(self.pairs):
            ri = z[self.pos_cols[i]]
            rj = z[self.pos_cols[j]]
            e = ri - rj
            sig = z[self.i_sig + pi * self.KC:self.i_sig + (pi + 1) * self.KC]
            c[self.c_pair + pi * self.KC:self.c_pair + (pi + 1) * self.KC] = (
                np.sum(e * e, axis=1) - d2 - sig)
        return c

    def jacobian(self, z, theta):
        blocks = [s.jacobian(self._sub_z(z, i), self.targets[i])
                  for i, s in enumerate(self.subs)]
        rows, cols, data = [], [], []
        for pi, (i, j) in enumerate(self.pairs):
            ri = z[self.pos_cols[i]]
            rj = z[self.pos_cols[j]]
            e = 2.0 * (ri - rj)
            r0 = pi * self.KC
            for m in range(self.KC):
                rr = r0 + m
                rows += [rr] * 7
                cols += list(self.pos_cols[i][m]) + list(self.pos_cols[j][m]) \
                    + [self.i_sig + pi * self.KC + m]
                data += list(e[m]) + list(-e[m]) + [-1.0]
        pair_jac = sp.coo_matrix(
            (data, (rows, cols)),
            shape=(len(self.pairs) * self.KC, self.n_z)).tocsr()
        top = sp.block_diag(blocks, format="csr")
        top = sp.hstack([top, sp.csr_matrix(
            (top.shape[0], len(self.pairs) * self.KC))], format="csr")
        return sp.vstack([top, pair_jac], format="csr")

    def hessian(self, z, theta, lam, obj_weight: float = 1.0):
        blocks = []
        for i, s in enumerate(self.subs):
            lam_i = lam[self.c_off[i]:self.c_off[i + 1]]
            blocks.append(s.hessian(self._sub_z(z, i), self.targets[i],
                                    lam_i, obj_weight))
        H = sp.block_diag(blocks, format="coo")
        rows = list(H.row)
        cols = list(H.col)
        data = list(H.data)
        for pi, (i, j) in enumerate(self.pairs):
            lam_p = lam[self.c_pair + pi * self.KC:self.c_pair + (pi + 1) * self.KC]
            for m in range(self.KC):
                lm = 2.0 * lam_p[m]
                for s3 in range(3):
                    ci = self.pos_cols[i][m][s3]
                    cj = self.pos_cols[j][m][s3]
                    rows += [ci, cj, ci, cj]
                    cols += [ci, cj, cj, ci]
                    data += [lm, lm, -lm, -lm]
        return sp.coo_matrix((data, (rows, cols)),
                             shape=(self.n_z, self.n_z)).tocsr()

    def theta_jacobians(self, z, theta, lam):
        return np.zeros((self.n_z, 0)), np.zeros((self.n_c, 0))

    def initial_guess(self, states, z_f):
        parts = [initial_guess(s, states[i], self.targets[i], z_f)
                 for i, s in enumerate(self.subs)]
        z = np.concatenate(parts + [np.ones(len(self.pairs) * self.KC)])
        c = self.constraints(z, np.zeros(0))
        resid = c[self.c_pair:] + z[self.i_sig:]
        z[self.i_sig:] = np.maximum(resid, 1.0)
        return z

    def extract(self, sol: NlpSolution):
        out = []
        for i, s in enumerate(self.subs):
            sub_sol = NlpSolution(
                z=self._sub_z(sol.z, i).copy(), lam=np.zeros(s.n_c),
                nu=np.zeros(s.n_z), status="converged",
                objective=s.objective(self._sub_z(sol.z, i), self.targets[i]),
                mu_final=sol.mu_final, iterations=sol.iterations,
                theta=self.targets[i])
            out.append(extract_trajectory(sub_sol, s))
        return out


# ---------------------------------------------------------------------------
# NMPC tracking NLP (6-DOF model)
# ---------------------------------------------------------------------------

def lift_kinematic_reference(traj: Trajectory, ts, k_turn: float = 0.22,
                             delta_max: float = 1.0, fill=None,
                             brake: float = 0.1):
    """Lift a guidance trajectory to full-state references at sample times.

    States the guidance model does not carry come from ``fill`` (a 12-dim
    template, typically the trimmed glide state) or are left at zero. The
    turn-rate profile maps to an asymmetric-deflection feedforward via the
    calibrated ``k_turn`` slope.
    """
    ts = np.asarray(ts, dtype=float)
    if traj.dim == 12:
        xr = traj.state_many(ts)
        ur = np.vstack([traj.control(t) for t in ts[:-1]])
        return xr, ur
    st = traj.state_many(ts)
    xr = np.zeros((len(ts), 12)) if fill is None else np.tile(
        np.asarray(fill, dtype=float), (len(ts), 1))
    xr[:, 0] = st[:, 0]
    xr[:, 1] = st[:, 1]
    xr[:, 2] = -st[:, 2]
    xr[:, 5] = st[:, 3]
    ur = np.zeros((len(ts) - 1, 2))
    ur[:, 1] = brake
    for i, t in enumerate(ts[:-1]):
        upsi = traj.control(t)[0]
        ur[i, 0] = np.clip(upsi / k_turn, -(delta_max - brake), delta_max - brake)
    return xr, ur


class TrackingNlp(Nlp):
    """Receding-horizon tracking of a reference with the 6-DOF plant model."""

    NS = 12

    def __init__(self, params: ParafoilParams, x_init, x_ref, u_ref,
                 Q, R, Q_f, T: float, mesh_C: int = 2, wind=None):
        self.params = params
        self.x_init = np.asarray(x_init, dtype=float)
        self.x_ref = np.asarray(x_ref, dtype=float)
        self.u_ref = np.asarray(u_ref, dtype=float)
        self.N = self.u_ref.shape[0]
        if self.x_ref.shape != (self.N + 1, 12):
            raise ReferenceTooShort(
                f"reference shape {self.x_ref.shape} for horizon {self.N}")
        self.Q = np.asarray(Q, dtype=float)
        self.Rm = np.asarray(R, dtype=float)
        self.Qf = np.asarray(Q_f, dtype=float)
        self.T = float(T)
        self.wind = np.zeros(3) if wind is None else np.asarray(wind, dtype=float)
        if mesh_C not in _RADAU_POINTS:
            raise InvalidMesh(f"C={mesh_C}")
        self.C = mesh_C
        self.taus = np.array(_RADAU_POINTS[mesh_C])
        nodes = np.concatenate([[0.0], self.taus])
        self.D = _lagrange_diff_matrix(nodes)

        N, C, NS = self.N, self.C, self.NS
        self.i_x0 = 0
        self.i_S = NS
        self.i_da = self.i_S + NS * N * C    # asymmetric, free
        self.i_ds = self.i_da + N            # symmetric, >= 0
        self.i_sp = self.i_ds + N            # slack: ds + da + sp = dmax
        self.i_sm = self.i_sp + N            # slack: ds - da + sm = dmax
        self.n_z = self.i_sm + N
        self.n_c = NS + NS * N * C + 2 * N
        self.c_init = 0
        self.c_col = NS
        self.c_boxp = self.c_col + NS * N * C
        self.c_boxm = self.c_boxp + N
        self.n_theta = 0
        self.bounded = np.zeros(self.n_z, dtype=bool)
        self.bounded[self.i_ds:] = True
        self._build()

    def _state_col(self, k, j):
        NS, C = self.NS, self.C
        if j == 0:
            if k == 0:
                return np.arange(0, NS)
            return self._state_col(k - 1, C)
        return self.i_S + NS * (k * C + (j - 1)) + np.arange(NS)

    def _build(self):
        N, C, NS = self.N, self.C, self.NS
        rows, cols, const = [], [], []
        for s in range(NS):
            rows.append(self.c_init + s)
            cols.append(self.i_x0 + s)
            const.append(1.0)
        for k in range(N):
            node_cols = [self._state_col(k, j) for j in range(C + 1)]
            for l in range(C):
                r0 = self.c_col + NS * (k * C + l)
                for j in range(C + 1):
                    for s in range(NS):
                        rows.append(r0 + s)
                        cols.append(node_cols[j][s])
                        const.append(self.D[l, j])
        self._n_const_head = len(rows)
        # variable: -T df/dx (dense 12x12 per stage) and -T df/du (12x2)
        var_rows, var_cols = [], []
        for k in range(N):
            for l in range(C):
                r0 = self.c_col + NS * (k * C + l)
                scols = self._state_col(k, l + 1)
                for s in range(NS):
                    for j in range(NS):
                        var_rows.append(r0 + s)
                        var_cols.append(scols[j])
                for s in range(NS):
                    var_rows += [r0 + s, r0 + s]
                    var_cols += [self.i_da + k, self.i_ds + k]
        rows += var_rows
        cols += var_cols
        # box rows
        for k in range(N):
            rows += [self.c_boxp + k] * 3
            cols += [self.i_ds + k, self.i_da + k, self.i_sp + k]
            const += [1.0, 1.0, 1.0]
            rows += [self.c_boxm + k] * 3
            cols += [self.i_ds + k, self.i_da + k, self.i_sm + k]
            const += [1.0, -1.0, 1.0]
        self._jac_rows = np.array(rows, dtype=np.int32)
        self._jac_cols = np.array(cols, dtype=np.int32)
        self._template = np.zeros(len(rows))
        self._template[:self._n_const_head] = const[:self._n_const_head]
        tail = len(const) - self._n_const_head
        self._var_start = self._n_const_head
        self._var_len = len(var_rows)
        self._template[self._var_start + self._var_len:] = const[self._n_const_head:]

        # objective Hessian (constant, Gauss-Newton)
        H = sp.lil_matrix((self.n_z, self.n_z))
        for l in range(self.N):
            ic = self._state_col(l, 0) if l == 0 else self._state_col(l - 1, C)
            H[np.ix_(ic, ic)] += 2.0 * self.Q
        icN = self._state_col(self.N - 1, C)
        H[np.ix_(icN, icN)] += 2.0 * self.Qf
        for k in range(self.N):
            uc = [self.i_da + k, self.i_ds + k]
            H[np.ix_(uc, uc)] += 2.0 * self.Rm
        self._obj_hess = H.tocsr()

    def _tick_states(self, z):
        """States at tick boundaries, (N+1, 12)."""
        out = np.empty((self.N + 1, self.NS))
        out[0] = z[0:self.NS]
        for k in range(self.N):
            out[k + 1] = z[self._state_col(k, self.C)]
        return out

    def _stage_states(self, z):
        return z[self.i_S:self.i_S + self.NS * self.N * self.C].reshape(
            self.N, self.C, self.NS)

    def controls_from(self, z):
        return np.column_stack([z[self.i_da:self.i_da + self.N],
                                z[self.i_ds:self.i_ds + self.N]])

    def objective(self, z, theta):
        xs = self._tick_states(z)
        us = self.controls_from(z)
        dx = xs[:-1] - self.x_ref[:-1]
        du = us - self.u_ref
        val = float(np.einsum("li,ij,lj->", dx, self.Q, dx))
        val += float(np.einsum("li,ij,lj->", du, self.Rm, du))
        dN = xs[-1] - self.x_ref[-1]
        val += float(dN @ self.Qf @ dN)
        return val

    def gradient(self, z, theta):
        g = np.zeros(self.n_z)
        xs = self._tick_states(z)
        us = self.controls_from(z)
        for l in range(self.N):
            ic = np.arange(0, self.NS) if l == 0 else self._state_col(l - 1, self.C)
            g[ic] += 2.0 * self.Q @ (xs[l] - self.x_ref[l])
        icN = self._state_col(self.N - 1, self.C)
        g[icN] += 2.0 * self.Qf @ (xs[self.N] - self.x_ref[self.N])
        gu = 2.0 * (us - self.u_ref) @ self.Rm
        g[self.i_da:self.i_da + self.N] += gu[:, 0]
        g[self.i_ds:self.i_ds + self.N] += gu[:, 1]
        return g

    def constraints(self, z, theta):
        N, C, NS = self.N, self.C, self.NS
        c = np.empty(self.n_c)
        c[:NS] = z[:NS] - self.x_init
        Sf = np.empty((N, C + 1, NS))
        Sf[:, 1:] = self._stage_states(z)
        Sf[0, 0] = z[:NS]
        Sf[1:, 0] = Sf[:-1, C]
        dS = np.einsum("lj,kjs->kls", self.D, Sf)
        us = self.controls_from(z)
        f = models.dynamics_rhs_batch(
            Sf[:, 1:].reshape(-1, NS), np.repeat(us, C, axis=0),
            self.wind, self.params).reshape(N, C, NS)
        c[self.c_col:self.c_col + NS * N * C] = (dS - self.T * f).reshape(-1)
        da = z[self.i_da:self.i_da + N]
        ds = z[self.i_ds:self.i_ds + N]
        dmax = self.params.delta_max
        c[self.c_boxp:self.c_boxp + N] = ds + da + z[self.i_sp:self.i_sp + N] - dmax
        c[self.c_boxm:self.c_boxm + N] = ds - da + z[self.i_sm:self.i_sm + N] - dmax
        return c

    def jacobian(self, z, theta):
        N, C, NS = self.N, self.C, self.NS
        Sf = np.empty((N, C + 1, NS))
        Sf[:, 1:] = self._stage_states(z)
        Sf[0, 0] = z[:NS]
        Sf[1:, 0] = Sf[:-1, C]
        us = self.controls_from(z)
        data = self._template.copy()
        pos = self._var_start
        Jx, Ju = models.dynamics_jacobians_batch(
            Sf[:, 1:].reshape(-1, NS), np.repeat(us, C, axis=0),
            self.wind, self.params)
        blk = np.concatenate([(-self.T * Jx).reshape(N * C, -1),
                              (-self.T * Ju).reshape(N * C, -1)], axis=1)
        data[pos:pos + self._var_len] = blk.reshape(-1)
        return sp.coo_matrix((data, (self._jac_rows, self._jac_cols)),
                             shape=(self.n_c, self.n_z)).tocsr()

    def hessian(self, z, theta, lam, obj_weight: float = 1.0):
        """Lagrangian Hessian: exact objective block plus stagewise dynamics
        curvature obtained by differencing the analytic Jacobians.

        The curvature of ``lam' f(x_stage, u_tick)`` is block-local to the
        14 variables of each collocation stage, so 14 batched Jacobian
        evaluations recover it to machine-level accuracy.
        """
        N, C, NS = self.N, self.C, self.NS
        Sf = np.empty((N, C + 1, NS))
        Sf[:, 1:] = self._stage_states(z)
        Sf[0, 0] = z[:NS]
        Sf[1:, 0] = Sf[:-1, C]
        X = Sf[:, 1:].reshape(-1, NS)
        U = np.repeat(self.controls_from(z), C, axis=0)
        lam_col = lam[self.c_col:self.c_col + NS * N * C].reshape(N * C, NS)
        if not np.any(lam_col):
            return obj_weight * self._obj_hess
        h = 1e-6
        Jx0, Ju0 = models.dynamics_jacobians_batch(X, U, self.wind, self.params)
        g0 = np.concatenate([np.einsum("nij,ni->nj", Jx0, lam_col),
                             np.einsum("nij,ni->nj", Ju0, lam_col)], axis=1)
        Hloc = np.zeros((N * C, 14, 14))
        for i in range(14):
            Xp, Up = X.copy(), U.copy()
            if i < NS:
                Xp[:, i] += h
            else:
                Up[:, i - NS] += h
            Jxp, Jup = models.dynamics_jacobians_batch(Xp, Up, self.wind, self.params)
            gp = np.concatenate([np.einsum("nij,ni->nj", Jxp, lam_col),
                                 np.einsum("nij,ni->nj", Jup, lam_col)], axis=1)
            Hloc[:, :, i] = (gp - g0) / h
        Hloc = -self.T * 0.5 * (Hloc + Hloc.transpose(0, 2, 1))
        rows, cols, data = [], [], []
        for k in range(N):
            for l in range(C):
                mth = k * C + l
                lc = np.concatenate([self._state_col(k, l + 1),
                                     [self.i_da + k, self.i_ds + k]])
                rows.append(np.repeat(lc, 14))
                cols.append(np.tile(lc, 14))
                data.append(Hloc[mth].reshape(-1))
        Hc = sp.coo_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_z, self.n_z)).tocsr()
        return obj_weight * self._obj_hess + Hc


def transcribe_nmpc(params: ParafoilParams, x0, ref, Q, R, Q_f,
                    N_track: int, T_track: float, t_n: float = 0.0,
                    wind=None, k_turn: float = 0.22, mesh_C: int = 2,
                    ref_fill=None, brake: float = 0.1) -> TrackingNlp:
    """Tracking problem over ``N_track`` ticks of length ``T_track``.

    ``ref`` may be a :class:`Trajectory` (4- or 12-dim; guidance profiles
    are lifted, filling unreferenced states from ``ref_fill``) or a
    pre-sampled ``(x_ref, u_ref)`` pair.
    """
    x0 = x0.as_array() if hasattr(x0, "as_array") else np.asarray(x0, dtype=float)
    lifted = False
    if isinstance(ref, Trajectory):
        if ref.t0 > t_n + 1e-9:
            raise ReferenceTooShort(
                f"reference starts at {ref.t0}, after horizon start {t_n}")
        ts = t_n + T_track * np.arange(N_track + 1)
        lifted = ref.dim == 4
        x_ref, u_ref = lift_kinematic_reference(
            ref, ts, k_turn=k_turn, delta_max=params.delta_max, fill=ref_fill,
            brake=brake)
    else:
        x_ref, u_ref = ref
    nlp = TrackingNlp(params, x0, x_ref, u_ref, Q, R, Q_f, T_track,
                      mesh_C=mesh_C, wind=wind)
    nlp.ref_lifted = lifted
    return nlp


# ---------------------------------------------------------------------------
# moving-horizon correction NLP
# ---------------------------------------------------------------------------

class CorrectionNlp(Nlp):
    """Windowed fit of the kinematic speed offsets to measured states."""

    NS = 4

    def __init__(self, kp: KinParams, meas, u_hist, T: float,
                 Q_cor, R_cor, w_x: float = 0.0, mesh_C: int = 3,
                 lam_bound_frac: float = 0.5):
        meas = np.asarray(meas, dtype=float)
        u_hist = np.asarray(u_hist, dtype=float)
        if meas.ndim != 2 or meas.shape[0] < 2:
            raise HistoryTooShort(f"need >= 2 samples, got {meas.shape}")
        self.kp = kp
        self.meas = meas
        self.u_hist = u_hist
        self.N = meas.shape[0] - 1
        if len(u_hist) < self.N:
            raise HistoryTooShort("need one applied turn rate per interval")
        self.T = float(T)
        self.Q_cor = np.asarray(Q_cor, dtype=float)
        self.R_cor = np.asarray(R_cor, dtype=float)
        self.w_x = float(w_x)
        self.C = mesh_C
        self.taus = np.array(_RADAU_POINTS[mesh_C])
        self.D = _lagrange_diff_matrix(np.concatenate([[0.0], self.taus]))
        self.lam_h_max = lam_bound_frac * kp.v_h
        self.lam_d_max = lam_bound_frac * kp.v_d

        N, C, NS = self.N, self.C, self.NS
        self.i_lam = 0        # shifted: lam_hat = lam + lam_max, in [0, 2 lam_max]
        self.i_wlam = 2
        self.i_x0 = 4
        self.i_S = 8
        self.n_z = 8 + NS * N * C
        self.n_c = 2 + NS + NS * N * C
        self.c_lbox = 0
        self.c_init = 2
        self.c_col = 2 + NS
        self.n_theta = 0
        self.bounded = np.zeros(self.n_z, dtype=bool)
        self.bounded[0:4] = True
        self._build()

    def lam_from(self, z):
        return np.array([z[0] - self.lam_h_max, z[1] - self.lam_d_max])

    def _state_col(self, k, j):
        NS, C = self.NS, self.C
        if j == 0:
            if k == 0:
                return np.arange(self.i_x0, self.i_x0 + NS)
            return self._state_col(k - 1, C)
        return self.i_S + NS * (k * C + (j - 1)) + np.arange(NS)

    def _build(self):
        N, C, NS = self.N, self.C, self.NS
        rows, cols, const = [], [], []
        rows += [0, 0, 1, 1]
        cols += [0, self.i_wlam, 1, self.i_wlam + 1]
        const += [1.0, 1.0, 1.0, 1.0]
        for s in range(NS):
            rows.append(self.c_init + s)
            cols.append(self.i_x0 + s)
            const.append(1.0)
        for k in range(N):
            node_cols = [self._state_col(k, j) for j in range(C + 1)]
            for l in range(C):
                r0 = self.c_col + NS * (k * C + l)
                for j in range(C + 1):
                    for s in range(NS):
                        rows.append(r0 + s)
                        cols.append(node_cols[j][s])
                        const.append(self.D[l, j])
        self._n_head = len(rows)
        var_rows, var_cols = [], []
        for k in range(N):
            for l in range(C):
                r0 = self.c_col + NS * (k * C + l)
                psi_col = self._state_col(k, l + 1)[3]
                # rows x, y wrt psi; rows x, y wrt lam_h; row z wrt lam_d
                var_rows += [r0, r0 + 1, r0, r0 + 1, r0 + 2]
                var_cols += [psi_col, psi_col, self.i_lam, self.i_lam,
                             self.i_lam + 1]
        rows += var_rows
        cols += var_cols
        self._jac_rows = np.array(rows, dtype=np.int32)
        self._jac_cols = np.array(cols, dtype=np.int32)
        self._template = np.zeros(len(rows))
        self._template[:self._n_head] = const
        self._var_start = self._n_head

        hr, hc = [], []
        # objective: state-state blocks and lam-lam
        for l in range(1, N + 1):
            ic = self._state_col(l - 1, C)
            for sa in range(NS):
                for sb in range(NS):
                    hr.append(ic[sa])
                    hc.append(ic[sb])
        for sa in range(2):
            for sb in range(2):
                hr.append(self.i_lam + sa)
                hc.append(self.i_lam + sb)
        # constraints: psi-psi, psi-lam_h cross (x2)
        for k in range(N):
            for l in range(C):
                pc = self._state_col(k, l + 1)[3]
                hr.append(pc)
                hc.append(pc)
                hr += [pc, self.i_lam]
                hc += [self.i_lam, pc]
        self._hess_rows = np.array(hr, dtype=np.int32)
        self._hess_cols = np.array(hc, dtype=np.int32)

    def _tick_states(self, z):
        out = np.empty((self.N + 1, self.NS))
        out[0] = z[self.i_x0:self.i_x0 + 4]
        for k in range(self.N):
            out[k + 1] = z[self._state_col(k, self.C)]
        return out

    def objective(self, z, theta):
        lam = self.lam_from(z)
        xs = self._tick_states(z)
        d = xs[1:] - self.meas[1:]
        return float(np.einsum("li,ij,lj->", d, self.Q_cor, d)
                     + lam @ self.R_cor @ lam)

    def gradient(self, z, theta):
        g = np.zeros(self.n_z)
        lam = self.lam_from(z)
        xs = self._tick_states(z)
        for l in range(1, self.N + 1):
            ic = self._state_col(l - 1, self.C)
            g[ic] += 2.0 * self.Q_cor @ (xs[l] - self.meas[l])
        g[0:2] += 2.0 * self.R_cor @ lam
        return g

    def constraints(self, z, theta):
        N, C, NS = self.N, self.C, self.NS
        c = np.empty(self.n_c)
        c[0] = z[0] + z[self.i_wlam] - 2.0 * self.lam_h_max
        c[1] = z[1] + z[self.i_wlam + 1] - 2.0 * self.lam_d_max
        c[self.c_init:self.c_init + NS] = z[self.i_x0:self.i_x0 + 4] - self.meas[0]
        Sf = np.empty((N, C + 1, NS))
        Sf[:, 1:] = z[self.i_S:].reshape(N, C, NS)
        Sf[0, 0] = z[self.i_x0:self.i_x0 + 4]
        Sf[1:, 0] = Sf[:-1, C]
        dS = np.einsum("lj,kjs->kls", self.D, Sf)
        lam = self.lam_from(z)
        vh = self.kp.v_h + lam[0]
        vd = self.kp.v_d + lam[1]
        psi = Sf[:, 1:, 3]
        f = np.empty((N, C, NS))
        f[:, :, 0] = vh * np.cos(psi) + self.w_x
        f[:, :, 1] = vh * np.sin(psi)
        f[:, :, 2] = -vd
        f[:, :, 3] = self.u_hist[:self.N, None]
        c[self.c_col:] = (dS - self.T * f).reshape(-1)
        return c

    def jacobian(self, z, theta):
        N, C = self.N, self.C
        Sf = np.empty((N, C + 1, self.NS))
        Sf[:, 1:] = z[self.i_S:].reshape(N, C, self.NS)
        Sf[0, 0] = z[self.i_x0:self.i_x0 + 4]
        Sf[1:, 0] = Sf[:-1, C]
        psi = Sf[:, 1:, 3]
        lam = self.lam_from(z)
        vh = self.kp.v_h + lam[0]
        data = self._template.copy()
        blk = np.empty((N, C, 5))
        blk[:, :, 0] = -self.T * (-vh * np.sin(psi))
        blk[:, :, 1] = -self.T * (vh * np.cos(psi))
        blk[:, :, 2] = -self.T * np.cos(psi)
        blk[:, :, 3] = -self.T * np.sin(psi)
        blk[:, :, 4] = self.T
        data[self._var_start:] = blk.reshape(-1)
        return sp.coo_matrix((data, (self._jac_rows, self._jac_cols)),
                             shape=(self.n_c, self.n_z)).tocsr()

    def hessian(self, z, theta, lam, obj_weight: float = 1.0):
        N, C = self.N, self.C
        parts = []
        Qblk = (2.0 * obj_weight) * self.Q_cor.reshape(-1)
        for l in range(1, N + 1):
            parts.append(Qblk)
        parts.append((2.0 * obj_weight) * self.R_cor.reshape(-1))
        Sf = np.empty((N, C + 1, self.NS))
        Sf[:, 1:] = z[self.i_S:].reshape(N, C, self.NS)
        Sf[0, 0] = z[self.i_x0:self.i_x0 + 4]
        Sf[1:, 0] = Sf[:-1, C]
        psi = Sf[:, 1:, 3]
        lam_vec = self.lam_from(z)
        vh = self.kp.v_h + lam_vec[0]
        lam_col = lam[self.c_col:].reshape(N, C, self.NS)
        lx, ly = lam_col[:, :, 0], lam_col[:, :, 1]
        blk = np.empty((N, C, 3))
        blk[:, :, 0] = self.T * vh * (np.cos(psi) * lx + np.sin(psi) * ly)
        cross = self.T * (np.sin(psi) * lx - np.cos(psi) * ly)
        blk[:, :, 1] = cross
        blk[:, :, 2] = cross
        parts.append(blk.reshape(-1))
        data = np.concatenate(parts)
        return sp.coo_matrix((data, (self._hess_rows, self._hess_cols)),
                             shape=(self.n_z, self.n_z)).tocsr()


def transcribe_mhc(kp: KinParams, meas, u_hist, T_track: float,
                   Q_cor=None, R_cor=None, w_x: float = 0.0) -> CorrectionNlp:
    """Correction problem over the latest measurement window."""
    Q_cor = np.eye(4) if Q_cor is None else Q_cor
    R_cor = 0.01 * np.eye(2) if R_cor is None else R_cor
    return CorrectionNlp(kp, meas, u_hist, T_track, Q_cor, R_cor, w_x=w_x)
