"""Collision detection, energy-ordered sequential replanning, and the
coordinator/agent message protocol.

The protocol runs in-process with JSON-serializable message payloads so the
distributed structure stays testable without networking. Agents are
duck-typed: anything exposing ``index``, ``touched_down``, ``energy``,
``report_trajectory()``, ``replan(frozen, d_s)``, ``advance_to(t)`` and
``refresh_plan(t)`` can join the loop.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ReplanFailed
from .transcription import Trajectory

log = logging.getLogger(__name__)

MESSAGE_KINDS = (
    "TrajectoryReport", "ReplanRequest", "ReplanResult",
    "SensitivityReport", "AllocationResult", "Touchdown",
)


@dataclass
class ConflictPair:
    i: int
    j: int
    min_distance: float
    t_closest: float


@dataclass
class ConflictSet:
    members: set
    pairs: list

    @property
    def empty(self) -> bool:
        return not self.members


@dataclass
class ReplanOrder:
    """Conflicted parafoils in ascending control-energy order."""

    sequence: list


@dataclass
class CoordMessage:
    kind: str
    sender: int
    t: float
    payload: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MESSAGE_KINDS:
            raise ValueError(f"unknown message kind {self.kind}")

    def to_json(self) -> str:
        return json.dumps({"t": self.t, "kind": self.kind,
                           "sender": self.sender, "summary": self.payload},
                          sort_keys=True)


def _traj_summary(traj: Trajectory) -> dict:
    return {"t0": traj.t0, "tf": traj.tf, "energy": traj.energy,
            "n": len(traj.times)}


def detect_collisions(trajs, d_s: float, dt_c: float = 1.0) -> ConflictSet:
    """Pairwise 3-D separation check on a common time grid.

    Positions are interpolated from each trajectory and held at the
    endpoints, so a landed parafoil keeps occupying its landing point.
    """
    trajs = list(trajs)
    n = len(trajs)
    if n < 2:
        return ConflictSet(members=set(), pairs=[])
    t_lo = min(tr.t0 for tr in trajs)
    t_hi = max(tr.tf for tr in trajs)
    ts = np.arange(t_lo, t_hi + dt_c * 0.5, dt_c)
    pos = np.stack([tr.position_many(ts) for tr in trajs])
    members = set()
    pairs = []
    for i in range(n):
        for j in range(i + 1, n):
            d = np.linalg.norm(pos[i] - pos[j], axis=1)
            k = int(np.argmin(d))
            if d[k] < d_s:
                members.add(i)
                members.add(j)
                pairs.append(ConflictPair(i=i, j=j, min_distance=float(d[k]),
                                          t_closest=float(ts[k])))
    return ConflictSet(members=members, pairs=pairs)


def min_pairwise_distance(trajs, dt_c: float = 1.0,
                          common_only: bool = False) -> float:
    """Smallest 3-D separation over the sampled grid; inf for < 2 trajectories.

    With ``common_only`` the sweep stops at the earliest terminal time, i.e.
    only intervals where all vehicles are still flying count.
    """
    trajs = list(trajs)
    if len(trajs) < 2:
        return math.inf
    t_lo = min(tr.t0 for tr in trajs)
    t_hi = min(tr.tf for tr in trajs) if common_only else max(tr.tf for tr in trajs)
    ts = np.arange(t_lo, t_hi + dt_c * 0.5, dt_c)
    pos = np.stack([tr.position_many(ts) for tr in trajs])
    best = math.inf
    for i in range(len(trajs)):
        for j in range(i + 1, len(trajs)):
            best = min(best, float(np.min(np.linalg.norm(pos[i] - pos[j], axis=1))))
    return best


def sort_conflicts(cs: ConflictSet, energies) -> ReplanOrder:
    """Ascending control energy; ties break toward the lower index."""
    seq = sorted(cs.members, key=lambda i: (energies[i], i))
    return ReplanOrder(sequence=seq)


def replan_round(trajs, order: ReplanOrder, d_s: float, solve_fn,
                 dt_c: float = 1.0, max_passes: int = 3):
    """Sequentially replan each conflicted parafoil against frozen others.

    ``solve_fn(i, frozen)`` returns the new trajectory for parafoil ``i``
    with every other current trajectory frozen. A failed subproblem keeps
    the previous trajectory and is reported; the rest of the order still
    runs. Because each subproblem constrains only against the trajectories
    current at its turn, a defensive re-check runs after the pass and
    residual conflicts trigger at most ``max_passes - 1`` extra passes.
    """
    trajs = list(trajs)
    failures = []
    seq = list(order.sequence)
    for pass_no in range(max_passes):
        for b in seq:
            frozen = [tr for idx, tr in enumerate(trajs) if idx != b]
            try:
                trajs[b] = solve_fn(b, frozen)
            except ReplanFailed as exc:
                log.warning("pass %d: %s", pass_no, exc)
                failures.append(exc)
        residual = detect_collisions(trajs, d_s, dt_c)
        if residual.empty:
            break
        seq = sort_conflicts(residual, [tr.energy for tr in trajs]).sequence
        log.info("residual conflicts after pass %d: %s", pass_no, residual.pairs)
    return trajs, failures


class Coordinator:
    """Message hub implementing the allocation and replanning rounds."""

    def __init__(self, d_s: float, dt_c: float = 1.0, replan_margin: float = 1.06):
        self.d_s = float(d_s)
        self.dt_c = float(dt_c)
        self.replan_margin = float(replan_margin)
        self.log: list[CoordMessage] = []
        self.flagged: set = set()

    def post(self, kind: str, sender: int, t: float, payload=None):
        msg = CoordMessage(kind=kind, sender=sender, t=t, payload=payload or {})
        self.log.append(msg)
        return msg

    def guidance_round(self, agents, t: float):
        """Collect reports, detect conflicts, drive the sequential replan."""
        flying = [a for a in agents if not a.touched_down]
        if not flying:
            return
        reports = {}
        for a in flying:
            traj = a.report_trajectory()
            reports[a.index] = traj
            self.post("TrajectoryReport", a.index, t, _traj_summary(traj))
        idxs = sorted(reports)
        trajs = [reports[i] for i in idxs]
        conflicts = detect_collisions(trajs, self.d_s, self.dt_c)
        if conflicts.empty:
            return
        energies = [reports[i].energy for i in idxs]
        order = sort_conflicts(conflicts, energies)
        agents_by_index = {a.index: a for a in agents}
        fail_counts = {i: 0 for i in idxs}

        def solve_fn(local_b, frozen):
            idx = idxs[local_b]
            agent = agents_by_index[idx]
            if idx in self.flagged:
                raise ReplanFailed(idx, "agent flagged unresponsive")
            self.post("ReplanRequest", idx, t,
                      {"n_frozen": len(frozen), "d_s": self.d_s})
            try:
                traj = agent.replan(frozen, self.d_s * self.replan_margin)
            except Exception as exc:
                fail_counts[idx] += 1
                if fail_counts[idx] >= 2:
                    self.flagged.add(idx)
                    log.error("agent %d unresponsive; trajectory frozen", idx)
                raise ReplanFailed(idx, str(exc)) from None
            self.post("ReplanResult", idx, t, _traj_summary(traj))
            return traj

        new_trajs, failures = replan_round(trajs, order, self.d_s, solve_fn,
                                           dt_c=self.dt_c)
        for local_i, idx in enumerate(idxs):
            agents_by_index[idx].accept_trajectory(new_trajs[local_i])
        return failures

    def write_events(self, path):
        with open(path, "w") as fh:
            for msg in self.log:
                fh.write(msg.to_json() + "\n")


def coordinator_loop(agents, schedule, d_s: float, dt_c: float = 1.0,
                     replan_margin: float = 1.06,
                     coordinator: Coordinator = None) -> list[CoordMessage]:
    """Drive guidance ticks until every agent reports touchdown.

    ``schedule`` yields guidance tick times. Each tick: agents advance
    their flight to the tick, refresh their plans, then the coordinator
    runs collision detection and the sequential replan. Returns the
    message log.
    """
    coord = coordinator or Coordinator(d_s, dt_c, replan_margin)
    last_t = None
    for t in schedule:
        for a in agents:
            if not a.touched_down:
                a.advance_to(t)
                if a.touched_down:
                    coord.post("Touchdown", a.index, t,
                               {"position": list(map(float, a.touchdown_position))})
        if all(a.touched_down for a in agents):
            break
        for a in agents:
            if not a.touched_down:
                a.refresh_plan(t)
        coord.guidance_round(agents, t)
        last_t = t
    return coord.log
