"""Closed-loop multi-parafoil landing simulation.

Timeline: landing points are allocated once at mission start; guidance
trajectories refresh at ``f_guide`` (with moving-horizon correction and, on
detected conflicts, sequential replanning); NMPC commands update at
``f_track``; the 6-DOF plant integrates in between under constant wind plus
per-parafoil Dryden turbulence. Everything is deterministic under the
scenario seed.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import models
from .allocation import AllocationResult, LandingPointSet, allocate, hungarian
from .control import (
    CorrectionConfig,
    MeasurementWindow,
    NmpcTracker,
    TrackerConfig,
    mhc_update,
    predict_state,
)
from .coordination import (
    Coordinator,
    coordinator_loop,
    detect_collisions,
    min_pairwise_distance,
)
from .errors import ParafleetError, ReplanFailed
from .models import KinParams, KinState, ParafoilParams, RigidState, WindField
from .nlp import IpmOptions, ipm_solve
from .transcription import (
    CentralizedKinematicNlp,
    Mesh,
    Trajectory,
    extract_trajectory,
    initial_guess,
    transcribe_landing,
    transcribe_replan,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# scenario
# ---------------------------------------------------------------------------

@dataclass
class ParafoilSpec:
    state: RigidState
    params: ParafoilParams = field(default_factory=ParafoilParams)
    kin: KinParams = field(default_factory=KinParams)


@dataclass
class Scenario:
    parafoils: list
    landing: LandingPointSet
    wind: WindField = field(default_factory=WindField)
    d_s: float = 50.0
    f_guide: float = 0.1
    f_track: float = 1.0
    seed: int = 0
    mesh: Mesh = field(default_factory=Mesh)
    beta: float = 100.0
    alpha_anti_wind: float = math.pi
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    correction: CorrectionConfig = field(default_factory=CorrectionConfig)
    aero_perturbation: float = 0.05

    def __post_init__(self):
        if not (self.f_track >= self.f_guide > 0):
            raise ValueError("need f_track >= f_guide > 0")
        if len(self.parafoils) != len(self.landing):
            raise ValueError("parafoil count must equal landing point count")


@dataclass
class SimOptions:
    enable_mhc: bool = True
    enable_replan: bool = True
    plant_dt: float = 0.01
    record_dt: float = 0.1
    replan_margin: float = 1.06
    min_guidance_altitude: float = 30.0
    turbulence: bool = True


@dataclass
class LandingRecord:
    index: int
    t: float
    position: tuple
    error_to_point: float
    error_to_center: float


@dataclass
class SimResult:
    flown: list
    landings: list
    allocation: AllocationResult
    min_pairwise_distance: float
    events: list
    timings: dict
    options: SimOptions

    def metrics(self) -> dict:
        """Deterministic metric dictionary (wall-clock values live in timings)."""
        return {
            "landing_errors_to_point": [r.error_to_point for r in self.landings],
            "landing_errors_to_center": [r.error_to_center for r in self.landings],
            "max_dispersion": max(r.error_to_point for r in self.landings),
            "max_distance_to_center": max(r.error_to_center for r in self.landings),
            "min_pairwise_distance": self.min_pairwise_distance,
            "touchdown_times": [r.t for r in self.landings],
            "assignment": list(self.allocation.assignment.perm),
            "assignment_cost": self.allocation.assignment.total,
        }


# ---------------------------------------------------------------------------
# agent
# ---------------------------------------------------------------------------

class ParafoilAgent:
    """One parafoil: plant, tracker, corrector, and its guidance solves."""

    def __init__(self, index: int, spec: ParafoilSpec, sc: Scenario,
                 options: SimOptions, dryden_seed):
        self.index = index
        self.sc = sc
        self.options = options
        self.params = spec.params
        self.kp = replace(spec.kin)
        self.x = spec.state.as_array().copy()
        self.t = 0.0
        self.T = 1.0 / sc.f_track
        tracker_cfg = sc.tracker
        if tracker_cfg.ref_fill is None:
            # lift guidance references onto this airframe's trimmed glide
            trim, _ = models.find_trim(self.params,
                                       control=(0.0, tracker_cfg.brake))
            tracker_cfg = replace(tracker_cfg, ref_fill=trim.as_array())
        self.tracker = NmpcTracker(tracker_cfg, self.params)
        self.window = MeasurementWindow(sc.correction.N_real, self.T)
        self.gen = sc.wind.make_generator(dryden_seed) if options.turbulence else None
        self.target = None
        self.traj: Trajectory | None = None
        self.energy = math.nan
        self.touched_down = False
        self.touchdown_position = (math.nan, math.nan)
        self.touchdown_time = math.nan
        self.u_cmd = np.zeros(2)
        self._u_next = None
        self._psi_prev = None
        self._last_sol = None
        self.timings = {"guidance": [], "mhc": [], "nmpc": []}
        self.flown_times = [0.0]
        self.flown_states = [self.x.copy()]
        self.flown_controls = [self.u_cmd.copy()]
        self.lam_history = []

    # -- measurements ------------------------------------------------------

    def measured_kin(self) -> KinState:
        return models.kin_from_rigid(RigidState.from_array(self.x))

    @property
    def altitude(self) -> float:
        return -self.x[2]

    # -- guidance solves -----------------------------------------------------

    def _solve_landing(self, theta, warm_traj=None, t_start=None):
        t_start = self.t if t_start is None else t_start
        x0 = self.measured_kin()
        nlp = transcribe_landing(self.kp, x0, theta, self.sc.landing.z_f,
                                 self.sc.alpha_anti_wind, self.sc.mesh,
                                 self.sc.beta, w_x=self.sc.wind.w_c,
                                 t_start=t_start)
        guess = initial_guess(nlp, x0, theta, self.sc.landing.z_f)
        if warm_traj is not None:
            guess = _guess_from_traj(nlp, warm_traj, x0, guess)
        sol = ipm_solve(nlp, theta, guess, IpmOptions())
        if not sol.converged:
            raise ParafleetError(f"guidance solve failed for parafoil {self.index}")
        return nlp, sol

    def base_solve(self):
        """Allocation-phase solve at the area center plus sensitivity row."""
        from .allocation import evaluate_landing_points
        center = np.asarray(self.sc.landing.center, dtype=float)
        t0 = time.perf_counter()
        nlp, sol = self._solve_landing(center)
        row, updates = evaluate_landing_points(nlp, sol, self.sc.landing.points)
        self.timings["guidance"].append(time.perf_counter() - t0)
        self._base = (nlp, sol, updates)
        return row

    def start_mission(self, point_index: int):
        """Full solve at the assigned point, warm from the sensitivity update."""
        nlp, sol, updates = self._base
        target = np.asarray(self.sc.landing.points[point_index], dtype=float)
        self.target = target
        z_w, lam_w, nu_w = updates[point_index]
        t0 = time.perf_counter()
        warm = ipm_solve(nlp, target, z_w, IpmOptions(mu_init=1e-4),
                         lam0=lam_w, nu0=nu_w)
        if not warm.converged:
            warm = ipm_solve(nlp, target,
                             initial_guess(nlp, self.measured_kin(), target,
                                           self.sc.landing.z_f), IpmOptions())
        self.timings["guidance"].append(time.perf_counter() - t0)
        self.traj = extract_trajectory(warm, nlp)
        self.energy = self.traj.energy
        self._last_sol = warm
        self.u_cmd = _feedforward(self.traj, 0.0, self.sc.tracker.k_turn,
                                  self.params.delta_max)

    # -- coordination protocol ----------------------------------------------

    def report_trajectory(self) -> Trajectory:
        return self.traj

    def accept_trajectory(self, traj: Trajectory):
        self.traj = traj
        self.energy = traj.energy

    def replan(self, frozen, d_s: float) -> Trajectory:
        x0 = self.measured_kin()
        if x0.z - self.sc.landing.z_f < self.options.min_guidance_altitude:
            raise ReplanFailed(self.index, "too low to replan")
        nlp = transcribe_replan(self.kp, x0, self.target, frozen, d_s,
                                self.sc.mesh, self.sc.beta,
                                z_f=self.sc.landing.z_f,
                                alpha_target=self.sc.alpha_anti_wind,
                                w_x=self.sc.wind.w_c, t_start=self.t)
        guess = initial_guess(nlp, x0, self.target, self.sc.landing.z_f)
        if self.traj is not None:
            guess = _guess_from_traj(nlp, self.traj, x0, guess)
        t0 = time.perf_counter()
        sol = ipm_solve(nlp, self.target, guess, IpmOptions(max_iter=300))
        self.timings["guidance"].append(time.perf_counter() - t0)
        if not sol.converged:
            raise ReplanFailed(self.index, f"solver status {sol.status}")
        traj = extract_trajectory(sol, nlp)
        self.traj = traj
        self.energy = traj.energy
        return traj

    def refresh_plan(self, t: float):
        """Guidance-tick work: correction update, then re-optimized landing."""
        if self.touched_down:
            return
        if self.options.enable_mhc and self.window.full:
            t0 = time.perf_counter()
            self.kp, lam = mhc_update(self.window, self.sc.correction, self.kp,
                                      w_x=self.sc.wind.w_c)
            self.timings["mhc"].append(time.perf_counter() - t0)
            self.lam_history.append((t, float(lam[0]), float(lam[1])))
        if self.altitude - self.sc.landing.z_f < self.options.min_guidance_altitude:
            return
        t0 = time.perf_counter()
        try:
            nlp, sol = self._solve_landing(self.target, warm_traj=self.traj)
            self.traj = extract_trajectory(sol, nlp)
            self.energy = self.traj.energy
            self._last_sol = sol
        except ParafleetError:
            log.warning("parafoil %d: guidance refresh failed, keeping plan",
                        self.index)
        self.timings["guidance"].append(time.perf_counter() - t0)

    # -- flight ---------------------------------------------------------------

    def advance_to(self, t_target: float):
        """Fly control ticks until ``t_target`` or touchdown."""
        while not self.touched_down and self.t < t_target - 1e-9:
            self._control_tick()

    def _control_tick(self):
        t_n = self.t
        psi_now = self.x[5]
        if self._psi_prev is not None:
            dpsi = _wrap_angle(psi_now - self._psi_prev)
            self.window.push(self.measured_kin(), dpsi / self.T)
        else:
            self.window.push(self.measured_kin(), 0.0)
        self._psi_prev = psi_now

        if self._u_next is not None:
            self.u_cmd = self._u_next

        # command for the NEXT tick, from the one-tick-ahead prediction
        t0 = time.perf_counter()
        x_pred = predict_state(self.x, self.u_cmd, self.sc.wind.constant(),
                               self.T, self.params)
        res = self.tracker.step(x_pred, self.traj, t_n + self.T,
                                wind=self.sc.wind.constant())
        self.timings["nmpc"].append(time.perf_counter() - t0)
        self._u_next = res.u_sequence[0]

        # integrate the plant over [t_n, t_n + T] under the current command
        dt = self.options.plant_dt
        steps = max(1, int(round(self.T / dt)))
        rec_every = max(1, int(round(self.options.record_dt / dt)))
        rhs = lambda xx, uu, ww: models.dynamics_rhs_array(xx, uu, ww, self.params)
        w_const = self.sc.wind.constant()
        for s in range(steps):
            w = w_const + (self.gen.sample(dt) if self.gen is not None else 0.0)
            x_new = models.integrate_step(rhs, self.x, self.u_cmd, w, dt)
            t_new = t_n + (s + 1) * dt
            if -x_new[2] <= self.sc.landing.z_f:
                frac = (self.altitude - self.sc.landing.z_f) / max(
                    self.altitude - (-x_new[2]), 1e-12)
                x_td = self.x + frac * (x_new - self.x)
                t_td = self.t + frac * dt
                self.x = x_td
                self.t = t_td
                self._record()
                self._touchdown()
                return
            self.x = x_new
            self.t = t_new
            if (s + 1) % rec_every == 0:
                self._record()

    def _record(self):
        self.flown_times.append(self.t)
        self.flown_states.append(self.x.copy())
        self.flown_controls.append(self.u_cmd.copy())

    def _touchdown(self):
        self.touched_down = True
        self.touchdown_position = (float(self.x[0]), float(self.x[1]))
        self.touchdown_time = self.t
        log.info("parafoil %d touched down at t=%.2f (%.1f, %.1f)",
                 self.index, self.t, *self.touchdown_position)

    def flown_trajectory(self) -> Trajectory:
        return Trajectory(np.array(self.flown_times),
                          np.array(self.flown_states),
                          np.array(self.flown_controls),
                          energy=self.energy,
                          meta={"touchdown": self.touchdown_time})


def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def _feedforward(traj: Trajectory, t: float, k_turn: float, dmax: float):
    u_psi = traj.control(t)[0]
    return np.array([np.clip(u_psi / k_turn, -dmax, dmax), 0.0])


def _guess_from_traj(nlp, traj: Trajectory, x0: KinState, base_guess):
    """Warm-start primal: sample the previous trajectory on the new mesh."""
    z = base_guess.copy()
    t_rem = traj.tf - nlp.t_start
    if t_rem < nlp.t_lo or t_rem > nlp.t_hi:
        return z
    ts = nlp.t_start + t_rem * nlp.s_nodes
    states = traj.state_many(ts)
    K, C = nlp.mesh.K, nlp.mesh.C
    z[nlp.i_x0:nlp.i_x0 + 4] = x0.as_array()
    z[nlp.i_S:nlp.i_S + 4 * K * C] = states.reshape(-1)
    us = np.array([traj.control(t)[0] for t in ts])
    us = np.clip(us, -0.98 * nlp.kp.psi_dot_max, 0.98 * nlp.kp.psi_dot_max)
    z[nlp.i_u:nlp.i_u + K * C] = us + nlp.kp.psi_dot_max
    z[nlp.i_wu:nlp.i_wu + K * C] = 2 * nlp.kp.psi_dot_max - z[nlp.i_u:nlp.i_u + K * C]
    z[nlp.i_tf] = t_rem - nlp.t_lo
    z[nlp.i_wt] = (nlp.t_hi - nlp.t_lo) - z[nlp.i_tf]
    if nlp.frozen:
        c = nlp.constraints(z, np.zeros(2))
        resid = c[nlp.c_dist:] + z[nlp.i_sig:]
        z[nlp.i_sig:] = np.maximum(resid, 1.0)
    return z


# ---------------------------------------------------------------------------
# closed loop
# ---------------------------------------------------------------------------

def run_closed_loop(sc: Scenario, options: SimOptions = None) -> SimResult:
    """Allocation at mission start, then the guidance/control/plant loop."""
    options = options or SimOptions()
    n = len(sc.parafoils)
    root = np.random.SeedSequence(sc.seed)
    dryden_seeds = root.spawn(n)
    aero_rng = np.random.default_rng(root.spawn(1)[0])

    agents = []
    for i, spec in enumerate(sc.parafoils):
        params = replace(spec.params)
        params.aero = spec.params.aero.perturbed(aero_rng, sc.aero_perturbation)
        params.__post_init__()
        agents.append(ParafoilAgent(
            i, ParafoilSpec(spec.state, params, spec.kin), sc, options,
            dryden_seeds[i]))

    coord = Coordinator(sc.d_s, dt_c=1.0, replan_margin=options.replan_margin)
    wall0 = time.perf_counter()

    # allocation round at t0
    rows = []
    for a in agents:
        row = a.base_solve()
        rows.append(row)
        coord.post("SensitivityReport", a.index, 0.0,
                   {"costs": [float(v) for v in row]})
    R = np.vstack(rows)
    assignment = hungarian(R)
    for a, k in zip(agents, assignment.perm):
        coord.post("AllocationResult", a.index, 0.0,
                   {"point": int(k),
                    "target": [float(v) for v in sc.landing.points[k]]})
        a.start_mission(k)

    if options.enable_replan:
        coord.guidance_round(agents, 0.0)

    from .allocation import CostMatrix
    alloc = AllocationResult(
        cost_matrix=CostMatrix(R), assignment=assignment,
        trajectories=[a.traj for a in agents],
        energies=[a.energy for a in agents])

    # guidance loop
    t_guide = 1.0 / sc.f_guide
    if options.enable_replan:
        coordinator_loop(agents, _ticks(t_guide), sc.d_s,
                         replan_margin=options.replan_margin, coordinator=coord)
    else:
        for t in _ticks(t_guide):
            for a in agents:
                if not a.touched_down:
                    a.advance_to(t)
                    if a.touched_down:
                        coord.post("Touchdown", a.index, t,
                                   {"position": list(a.touchdown_position)})
            if all(a.touched_down for a in agents):
                break
            for a in agents:
                if not a.touched_down:
                    a.refresh_plan(t)

    flown = [a.flown_trajectory() for a in agents]
    landings = _landing_records(agents, sc)
    min_dist = min_pairwise_distance(flown, dt_c=options.record_dt,
                                     common_only=True)
    timings = {
        "total_wall": time.perf_counter() - wall0,
        "guidance_max": max((max(a.timings["guidance"], default=0.0)
                             for a in agents), default=0.0),
        "guidance_mean": float(np.mean([t for a in agents
                                        for t in a.timings["guidance"]] or [0.0])),
        "mhc_max": max((max(a.timings["mhc"], default=0.0)
                        for a in agents), default=0.0),
        "nmpc_max": max((max(a.timings["nmpc"], default=0.0)
                         for a in agents), default=0.0),
        "nmpc_mean": float(np.mean([t for a in agents
                                    for t in a.timings["nmpc"]] or [0.0])),
    }
    return SimResult(flown=flown, landings=landings, allocation=alloc,
                     min_pairwise_distance=min_dist, events=coord.log,
                     timings=timings, options=options)


def _ticks(dt: float, t0: float = 0.0, limit: int = 10000):
    t = t0
    for _ in range(limit):
        t += dt
        yield t


def _landing_records(agents, sc: Scenario):
    cx, cy = sc.landing.center
    out = []
    for a in agents:
        px, py = a.touchdown_position
        tx, ty = a.target
        out.append(LandingRecord(
            index=a.index, t=a.touchdown_time, position=(px, py),
            error_to_point=float(np.hypot(px - tx, py - ty)),
            error_to_center=float(np.hypot(px - cx, py - cy))))
    return out


def compute_metrics(result: SimResult, sc: Scenario) -> dict:
    """Metric dictionary from a finished run (see SimResult.metrics)."""
    m = result.metrics()
    m["n_parafoils"] = len(sc.parafoils)
    m["d_s"] = sc.d_s
    m["d_f"] = sc.landing.d_f
    m["seed"] = sc.seed
    return m


# ---------------------------------------------------------------------------
# centralized baseline
# ---------------------------------------------------------------------------

def run_centralized_baseline(sc: Scenario, targets=None, alloc=None) -> dict:
    """Single coupled planning solve for the Table-style comparison.

    Plans all parafoils at once with index-paired separation constraints.
    Also runs the decoupled pipeline (per-parafoil solves plus sequential
    replanning) on identical targets and reports both timings. A solver
    failure is reported in the result, not raised.
    """
    n = len(sc.parafoils)
    kins = [models.kin_from_rigid(p.state) for p in sc.parafoils]
    kps = [p.kin for p in sc.parafoils]

    if targets is None:
        if alloc is None:
            alloc = allocate(kins, kps, sc.landing, mesh=sc.mesh, beta=sc.beta,
                             w_x=sc.wind.w_c, alpha_anti_wind=sc.alpha_anti_wind)
        targets = [np.asarray(sc.landing.points[k], dtype=float)
                   for k in alloc.assignment.perm]

    # decoupled: per-parafoil solves, then sequential replanning
    t0 = time.perf_counter()
    trajs = []
    for i in range(n):
        nlp = transcribe_landing(kps[i], kins[i], targets[i], sc.landing.z_f,
                                 sc.alpha_anti_wind, sc.mesh, sc.beta,
                                 w_x=sc.wind.w_c)
        sol = ipm_solve(nlp, targets[i],
                        initial_guess(nlp, kins[i], targets[i], sc.landing.z_f),
                        IpmOptions())
        trajs.append(extract_trajectory(sol, nlp))
    from .coordination import replan_round, sort_conflicts

    conflicts = detect_collisions(trajs, sc.d_s)
    if not conflicts.empty:
        order = sort_conflicts(conflicts, [tr.energy for tr in trajs])

        def solve_fn(b, frozen):
            nlp = transcribe_replan(kps[b], kins[b], targets[b], frozen,
                                    sc.d_s * 1.06, sc.mesh, sc.beta,
                                    z_f=sc.landing.z_f,
                                    alpha_target=sc.alpha_anti_wind,
                                    w_x=sc.wind.w_c)
            guess = initial_guess(nlp, kins[b], targets[b], sc.landing.z_f)
            sol = ipm_solve(nlp, targets[b], guess, IpmOptions(max_iter=300))
            if not sol.converged:
                raise ReplanFailed(b, sol.status)
            return extract_trajectory(sol, nlp)

        trajs, _ = replan_round(trajs, order, sc.d_s, solve_fn)
    t_decoupled = time.perf_counter() - t0
    dec_min = min_pairwise_distance(trajs)
    dec_energy = float(sum(tr.energy for tr in trajs))

    # centralized: one coupled solve
    subs = [transcribe_landing(kps[i], kins[i], targets[i], sc.landing.z_f,
                               sc.alpha_anti_wind, sc.mesh, sc.beta,
                               w_x=sc.wind.w_c) for i in range(n)]
    big = CentralizedKinematicNlp(subs, targets, sc.d_s)
    guess = big.initial_guess(kins, sc.landing.z_f)
    t0 = time.perf_counter()
    status = "converged"
    cen_trajs = []
    cen_min = math.nan
    cen_energy = math.nan
    try:
        sol = ipm_solve(big, np.zeros(0), guess, IpmOptions(max_iter=500))
        status = sol.status
        if sol.converged:
            cen_trajs = big.extract(sol)
            cen_min = min_pairwise_distance(cen_trajs)
            cen_energy = float(sum(tr.energy for tr in cen_trajs))
    except ParafleetError as exc:
        status = f"failed: {exc}"
    t_central = time.perf_counter() - t0

    return {
        "decoupled": {"opt_time": t_decoupled, "min_distance": dec_min,
                      "energy": dec_energy, "trajectories": trajs},
        "centralized": {"opt_time": t_central, "min_distance": cen_min,
                        "energy": cen_energy, "status": status,
                        "trajectories": cen_trajs},
        "targets": [list(map(float, t)) for t in targets],
    }
