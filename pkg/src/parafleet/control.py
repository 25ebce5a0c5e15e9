"""Per-parafoil control layer: NMPC tracking and kinematic-model correction."""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import models
from .errors import HistoryTooShort, NlpError
from .models import KinParams, ParafoilParams
from .nlp import IpmOptions, ipm_solve
from .transcription import Trajectory, transcribe_mhc, transcribe_nmpc

log = logging.getLogger(__name__)


def _default_q():
    return np.diag([10.0, 10.0, 10.0, 1.0, 1.0, 1.0,
                    0.1, 0.1, 0.1, 0.1, 0.1, 0.1])


@dataclass
class TrackerConfig:
    """NMPC weights and horizon.

    ``k_turn`` maps turn rate to asymmetric deflection for reference
    feedforward (calibrated on the trimmed model). ``ref_fill`` is the
    12-dim template filling states a guidance reference does not carry;
    when set (normally to the trimmed glide state) the full weights stay
    active, which keeps the tracking Hessian well conditioned. Without it
    the unreferenced states are zero-filled and zero-weighted.
    """

    Q: np.ndarray = field(default_factory=_default_q)
    R: np.ndarray = field(default_factory=lambda: np.eye(2))
    Q_f: np.ndarray = field(default_factory=lambda: 10.0 * _default_q())
    N_track: int = 10
    T_track: float = 1.0
    mesh_C: int = 2
    k_turn: float = 0.22
    brake: float = 0.1
    ref_fill: np.ndarray | None = None

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        self.Q_f = np.asarray(self.Q_f, dtype=float)
        for name, M in (("Q", self.Q), ("Q_f", self.Q_f)):
            if np.min(np.linalg.eigvalsh(0.5 * (M + M.T))) < -1e-10:
                raise ValueError(f"{name} must be positive semidefinite")
        if np.min(np.linalg.eigvalsh(0.5 * (self.R + self.R.T))) <= 0:
            raise ValueError("R must be positive definite")
        if self.N_track < 1:
            raise ValueError("N_track must be >= 1")

    def lifted_weights(self):
        """Weights for tracking a 4-state guidance reference."""
        if self.ref_fill is not None:
            return self.Q, self.Q_f
        mask = np.zeros(12)
        mask[[0, 1, 2, 5]] = 1.0
        Q = self.Q * np.outer(mask, mask)
        Qf = self.Q_f * np.outer(mask, mask)
        return Q, Qf


@dataclass
class CorrectionConfig:
    """Moving-horizon correction weights and window length."""

    Q_cor: np.ndarray = field(default_factory=lambda: np.eye(4))
    R_cor: np.ndarray = field(default_factory=lambda: 0.01 * np.eye(2))
    N_real: int = 10

    def __post_init__(self):
        self.Q_cor = np.asarray(self.Q_cor, dtype=float)
        self.R_cor = np.asarray(self.R_cor, dtype=float)
        for name, M in (("Q_cor", self.Q_cor), ("R_cor", self.R_cor)):
            if np.min(np.linalg.eigvalsh(0.5 * (M + M.T))) <= 0:
                raise ValueError(f"{name} must be positive definite")
        if self.N_real < 2:
            raise ValueError("N_real must be >= 2")


class MeasurementWindow:
    """Ring buffer of the latest kinematic measurements and applied turn rates."""

    def __init__(self, n_real: int, t_spacing: float):
        self.n_real = n_real
        self.t_spacing = float(t_spacing)
        self._samples = deque(maxlen=n_real + 1)

    def push(self, kin_state, u_psi: float):
        self._samples.append((np.asarray(
            kin_state.as_array() if hasattr(kin_state, "as_array") else kin_state,
            dtype=float), float(u_psi)))

    @property
    def full(self) -> bool:
        return len(self._samples) == self.n_real + 1

    def __len__(self):
        return len(self._samples)

    def arrays(self):
        """(states (M, 4), applied turn rates (M,)) oldest first."""
        if len(self._samples) < 2:
            raise HistoryTooShort(f"{len(self._samples)} samples in window")
        states = np.array([s for s, _ in self._samples])
        us = np.array([u for _, u in self._samples])
        return states, us


def predict_state(x_now, u_applied, wind_estimate, T_track: float,
                  params: ParafoilParams, dt: float = 0.02):
    """Forward-integrate the plant model by one tick under the held control."""
    x = x_now.as_array() if hasattr(x_now, "as_array") else np.asarray(x_now, dtype=float)
    x = x.copy()
    if T_track <= 0:
        return models.RigidState.from_array(x)
    u = np.asarray(u_applied, dtype=float)
    w = np.zeros(3) if wind_estimate is None else np.asarray(wind_estimate, dtype=float)
    steps = max(1, int(round(T_track / dt)))
    h = T_track / steps
    rhs = lambda xx, uu, ww: models.dynamics_rhs_array(xx, uu, ww, params)
    for _ in range(steps):
        x = models.integrate_step(rhs, x, u, w, h)
    return models.RigidState.from_array(x)


@dataclass
class NmpcResult:
    u_sequence: np.ndarray          # (N_track, 2) controls over the horizon
    states: np.ndarray              # (N_track + 1, 12) predicted states
    objective: float
    status: str
    solution: object = None
    nlp: object = None


def nmpc_step(x_pred, ref, cfg: TrackerConfig, params: ParafoilParams,
              t_n: float = 0.0, wind=None, warm=None,
              opts: IpmOptions = None) -> NmpcResult:
    """One receding-horizon solve; first control applies at ``t_n``.

    ``warm`` is the previous :class:`NmpcResult`; its shifted primal seeds
    the solver. Control bounds hold at every tick by construction.
    """
    if isinstance(ref, Trajectory) and ref.dim == 4:
        Q, Qf = cfg.lifted_weights()
    else:
        Q, Qf = cfg.Q, cfg.Q_f
    nlp = transcribe_nmpc(params, x_pred, ref, Q, cfg.R, Qf,
                          cfg.N_track, cfg.T_track, t_n=t_n, wind=wind,
                          k_turn=cfg.k_turn, mesh_C=cfg.mesh_C,
                          ref_fill=cfg.ref_fill, brake=cfg.brake)
    x0 = x_pred.as_array() if hasattr(x_pred, "as_array") else np.asarray(x_pred)

    z0 = np.zeros(nlp.n_z)
    lam0 = nu0 = None
    mu0 = 1e-4
    if warm is not None and warm.solution is not None and warm.nlp is not None \
            and warm.nlp.N == nlp.N and warm.nlp.C == nlp.C:
        z0 = _shift_warm_start(warm, nlp, x0)
        lam0, nu0 = _shift_warm_duals(warm, nlp)
    else:
        z0 = _guess_from_reference(nlp, x0)
        mu0 = 1e-2
    opts = opts or IpmOptions(mu_init=mu0, tol=1e-6, max_iter=120,
                              mu_shrink=0.2, mu_theta=1.5, mu_min=1e-8)

    try:
        sol = ipm_solve(nlp, np.zeros(0), z0, opts, lam0=lam0, nu0=nu0)
    except NlpError as exc:
        log.warning("nmpc solve raised %s", exc)
        sol = None
    if sol is None or not sol.converged:
        # half-tolerance retry from the reference guess before giving up
        try:
            sol = ipm_solve(nlp, np.zeros(0), _guess_from_reference(nlp, x0),
                            IpmOptions(mu_init=1e-2, tol=1e-4, max_iter=60,
                                       mu_shrink=0.2, mu_theta=1.5, mu_min=1e-8))
        except NlpError:
            sol = None
    if sol is None or not sol.converged:
        return _fallback_result(nlp, warm)

    us = nlp.controls_from(sol.z)
    return NmpcResult(u_sequence=us, states=nlp._tick_states(sol.z),
                      objective=sol.objective, status="converged",
                      solution=sol, nlp=nlp)


def _guess_from_reference(nlp, x0):
    """Cold-start primal: roll the plant out under the reference feedforward
    so the stage guess is dynamically consistent."""
    z0 = np.zeros(nlp.n_z)
    z0[:12] = x0
    rhs = lambda xx, uu, ww: models.dynamics_rhs_array(xx, uu, ww, nlp.params)
    x = np.asarray(x0, dtype=float).copy()
    dmax = nlp.params.delta_max
    for k in range(nlp.N):
        ds_k = min(max(nlp.u_ref[k, 1], 0.01), dmax - 0.01)
        da_k = np.clip(nlp.u_ref[k, 0], -(dmax - ds_k), dmax - ds_k)
        u = np.array([da_k, ds_k])
        z0[nlp.i_da + k] = da_k
        z0[nlp.i_ds + k] = ds_k
        tau_prev = 0.0
        for l in range(nlp.C):
            gap = (nlp.taus[l] - tau_prev) * nlp.T
            tau_prev = nlp.taus[l]
            sub = max(1, int(math.ceil(gap / 0.25)))
            for _ in range(sub):
                x = models.integrate_step(rhs, x, u, nlp.wind, gap / sub)
            z0[nlp.i_S + 12 * (k * nlp.C + l):
               nlp.i_S + 12 * (k * nlp.C + l) + 12] = x
    da = z0[nlp.i_da:nlp.i_da + nlp.N]
    ds = z0[nlp.i_ds:nlp.i_ds + nlp.N]
    z0[nlp.i_sp:nlp.i_sp + nlp.N] = np.maximum(dmax - ds - da, 1e-3)
    z0[nlp.i_sm:nlp.i_sm + nlp.N] = np.maximum(dmax - ds + da, 1e-3)
    return z0


def _shift_warm_start(warm, nlp, x0):
    """Shift the previous horizon one tick; roll out the appended tick."""
    zp = warm.solution.z
    pn = warm.nlp
    z0 = np.zeros(nlp.n_z)
    z0[:12] = x0
    N, C = nlp.N, nlp.C
    for k in range(N - 1):
        for l in range(C):
            dst = nlp.i_S + 12 * (k * C + l)
            s = pn.i_S + 12 * ((k + 1) * C + l)
            z0[dst:dst + 12] = zp[s:s + 12]
    # final tick: propagate from the shifted horizon end under the held control
    u_last = np.array([zp[pn.i_da + pn.N - 1], zp[pn.i_ds + pn.N - 1]])
    x = zp[pn.i_S + 12 * (pn.N * C - 1):pn.i_S + 12 * pn.N * C].copy()
    rhs = lambda xx, uu, ww: models.dynamics_rhs_array(xx, uu, ww, nlp.params)
    tau_prev = 0.0
    for l in range(C):
        gap = (nlp.taus[l] - tau_prev) * nlp.T
        tau_prev = nlp.taus[l]
        sub = max(1, int(math.ceil(gap / 0.25)))
        for _ in range(sub):
            x = models.integrate_step(rhs, x, u_last, nlp.wind, gap / sub)
        dst = nlp.i_S + 12 * ((N - 1) * C + l)
        z0[dst:dst + 12] = x
    ua = np.append(zp[pn.i_da + 1:pn.i_da + pn.N], u_last[0])
    us = np.append(zp[pn.i_ds + 1:pn.i_ds + pn.N], u_last[1])
    z0[nlp.i_da:nlp.i_da + N] = ua
    z0[nlp.i_ds:nlp.i_ds + N] = np.maximum(us, 1e-4)
    dmax = nlp.params.delta_max
    z0[nlp.i_sp:nlp.i_sp + N] = np.maximum(dmax - us - ua, 1e-4)
    z0[nlp.i_sm:nlp.i_sm + N] = np.maximum(dmax - us + ua, 1e-4)
    return z0


def _shift_warm_duals(warm, nlp):
    """Shift equality multipliers and bound duals one tick forward."""
    pn = warm.nlp
    sol = warm.solution
    N, C, NS = nlp.N, nlp.C, nlp.NS
    lam0 = np.zeros(nlp.n_c)
    lam0[:NS] = sol.lam[:NS]
    lam_col = sol.lam[pn.c_col:pn.c_col + NS * pn.N * C].reshape(pn.N, C, NS)
    shifted = np.vstack([lam_col[1:], lam_col[-1:]])
    lam0[nlp.c_col:nlp.c_col + NS * N * C] = shifted.reshape(-1)[:NS * N * C]
    for block_new, block_old in ((nlp.c_boxp, pn.c_boxp), (nlp.c_boxm, pn.c_boxm)):
        src = np.append(sol.lam[block_old + 1:block_old + pn.N],
                        sol.lam[block_old + pn.N - 1])
        lam0[block_new:block_new + N] = src[:N]
    nu0 = np.zeros(nlp.n_z)
    for inew, iold in ((nlp.i_ds, pn.i_ds), (nlp.i_sp, pn.i_sp),
                       (nlp.i_sm, pn.i_sm)):
        src = np.append(sol.nu[iold + 1:iold + pn.N], sol.nu[iold + pn.N - 1])
        nu0[inew:inew + N] = src[:N]
    return lam0, nu0


def _fallback_result(nlp, warm):
    """Shifted previous sequence if available, else reference feedforward."""
    N = nlp.N
    if warm is not None and warm.u_sequence is not None and len(warm.u_sequence) >= 2:
        us = np.vstack([warm.u_sequence[1:], warm.u_sequence[-1:]])[:N]
        status = "fallback_shifted"
    else:
        us = nlp.u_ref.copy()
        status = "fallback_reference"
    us[:, 1] = np.clip(us[:, 1], 0.0, nlp.params.delta_max)
    us[:, 0] = np.clip(us[:, 0], -(nlp.params.delta_max - us[:, 1]),
                       nlp.params.delta_max - us[:, 1])
    return NmpcResult(u_sequence=us, states=nlp.x_ref.copy(), objective=math.nan,
                      status=status, solution=None, nlp=None)


class NmpcTracker:
    """Stateful wrapper carrying the warm start between ticks."""

    def __init__(self, cfg: TrackerConfig, params: ParafoilParams):
        self.cfg = cfg
        self.params = params
        self._last: NmpcResult | None = None

    def step(self, x_pred, ref, t_n: float, wind=None) -> NmpcResult:
        res = nmpc_step(x_pred, ref, self.cfg, self.params, t_n=t_n,
                        wind=wind, warm=self._last)
        self._last = res if res.solution is not None else None
        return res

    def reset(self):
        self._last = None


def mhc_update(window: MeasurementWindow, cfg: CorrectionConfig,
               kp: KinParams, w_x: float = 0.0) -> tuple[KinParams, np.ndarray]:
    """Fit the speed offsets to the window; returns updated parameters.

    On solver failure the previous correction is kept. A correction pinned
    at its bound signals severe model mismatch and is logged.
    """
    meas, us = window.arrays()
    base = KinParams(v_h=kp.v_h, v_d=kp.v_d, psi_dot_max=kp.psi_dot_max)
    nlp = transcribe_mhc(base, meas, us, window.t_spacing,
                         Q_cor=cfg.Q_cor, R_cor=cfg.R_cor, w_x=w_x)
    z0 = np.zeros(nlp.n_z)
    z0[0] = nlp.lam_h_max + kp.lam_h
    z0[1] = nlp.lam_d_max + kp.lam_d
    z0[nlp.i_wlam] = 2 * nlp.lam_h_max - z0[0]
    z0[nlp.i_wlam + 1] = 2 * nlp.lam_d_max - z0[1]
    z0[nlp.i_x0:nlp.i_x0 + 4] = meas[0]
    for k in range(nlp.N):
        for l in range(nlp.C):
            tau = nlp.taus[l]
            xi = (1 - tau) * meas[k] + tau * meas[k + 1]
            z0[nlp.i_S + 4 * (k * nlp.C + l):nlp.i_S + 4 * (k * nlp.C + l) + 4] = xi
    try:
        sol = ipm_solve(nlp, np.zeros(0), z0, IpmOptions(mu_init=1e-3, max_iter=150))
    except NlpError as exc:
        log.warning("mhc solve failed (%s); keeping previous correction", exc)
        return kp, np.array([kp.lam_h, kp.lam_d])
    if not sol.converged:
        log.warning("mhc did not converge; keeping previous correction")
        return kp, np.array([kp.lam_h, kp.lam_d])
    lam = nlp.lam_from(sol.z)
    if abs(lam[0]) > 0.98 * nlp.lam_h_max or abs(lam[1]) > 0.98 * nlp.lam_d_max:
        log.warning("correction at its bound (%.3f, %.3f): severe model mismatch",
                    lam[0], lam[1])
    return kp.with_correction(lam[0], lam[1]), lam
