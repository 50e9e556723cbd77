"""Leader layer: the finite design game over the action lattice.

Every leader profile maps to one follower-layer solve (cooperative or
equilibrium, depending on the configured follower behavior).  Those solves
are memoized in a ResponseCache so that best-response dynamics, exhaustive
equilibrium enumeration and the cooperative argmin all draw on the same
record per profile.  Infeasible profiles are memoized with +inf cost and
can never be returned as equilibria or minimizers.
"""

from __future__ import annotations

import csv
import itertools
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import GameConfig
from .errors import AllProfilesInfeasible, FollowerInfeasible, FollowerSolveFailed, \
    LatticeTooLarge, NoEquilibriumFound
from .followers import FollowerEquilibriumCert, FollowerTrajectorySet, \
    follower_nash, solve_cooperative
from .model import CostParams, DesignSpace, LeaderProfile, NetworkModel, Scenario

log = logging.getLogger("stackgame")

COOPERATIVE = "cooperative"
NASH = "nash"


def operating_cost(costs: CostParams, u: dict[str, np.ndarray]) -> float:
    """Total priced input cost sum_i sum_k alpha_i[k] . u_i[k] (the part of
    the follower bill that leaders also pay; excludes smoothing)."""
    total = 0.0
    for f, u_f in u.items():
        if u_f.size:
            total += float(np.sum(costs.alpha[f] * u_f))
    return total


def leader_cost(design: DesignSpace, costs: CostParams, a: LeaderProfile,
                follower_operating_cost: float) -> np.ndarray:
    """Per-leader cost vector J(a): design term a'Q_j a + v_j.a plus the
    shared follower operating cost."""
    av = np.asarray(a, dtype=float)
    out = np.empty(design.n_leaders)
    for j, lid in enumerate(design.leader_ids):
        g = float(av @ costs.Q_leader[lid] @ av + costs.v_leader[lid] @ av)
        out[j] = g + follower_operating_cost
    return out


@dataclass(eq=False)
class ResponseRecord:
    profile: LeaderProfile
    feasible: bool
    status: str                                  # optimal | infeasible | failed | costs_only
    J: np.ndarray                                # (L,), +inf when infeasible
    total_V: float
    V: dict[str, float] = field(default_factory=dict)
    trajectories: FollowerTrajectorySet | None = None
    follower_cert: FollowerEquilibriumCert | None = None

    @property
    def total_J(self) -> float:
        return float(np.sum(self.J))


class ResponseCache:
    """Memoized follower responses per leader profile, safe for concurrent
    lookups.  Results are pure functions of the profile, so cache hits can
    never depend on evaluation order."""

    def __init__(self, model: NetworkModel, design: DesignSpace,
                 costs: CostParams, scenario: Scenario, behavior: str,
                 cfg: GameConfig | None = None):
        if behavior not in (COOPERATIVE, NASH):
            raise ValueError(f"behavior must be '{COOPERATIVE}' or '{NASH}'")
        self.model, self.design, self.costs, self.scenario = \
            model, design, costs, scenario
        self.behavior = behavior
        self.cfg = cfg or GameConfig()
        self._records: dict[tuple[int, ...], ResponseRecord] = {}
        self._lock = threading.Lock()
        self._inflight: dict[tuple[int, ...], threading.Event] = {}
        self.fills = 0
        self.hits = 0

    # -- core ---------------------------------------------------------------

    def _solve(self, idx: tuple[int, ...]) -> ResponseRecord:
        a = self.design.profile_from_indices(idx)
        try:
            if self.behavior == COOPERATIVE:
                ts = solve_cooperative(self.model, self.design, self.costs,
                                       self.scenario, a, self.cfg)
                cert = None
            else:
                ts, cert = follower_nash(self.model, self.design, self.costs,
                                         self.scenario, a, self.cfg)
        except FollowerInfeasible:
            L = self.design.n_leaders
            return ResponseRecord(a, False, "infeasible", np.full(L, np.inf),
                                  np.inf)
        except FollowerSolveFailed as e:
            # uncertified solve: excluded from optima like an infeasible
            # profile, but labeled distinctly
            log.warning("solve failed at %s: %s", a, e)
            L = self.design.n_leaders
            return ResponseRecord(a, False, "failed", np.full(L, np.inf), np.inf)
        J = leader_cost(self.design, self.costs, a,
                        operating_cost(self.costs, ts.u))
        return ResponseRecord(a, True, "optimal", J, ts.total_V, dict(ts.V),
                              ts, cert)

    def get(self, idx: tuple[int, ...]) -> ResponseRecord:
        idx = tuple(int(i) for i in idx)
        while True:
            with self._lock:
                rec = self._records.get(idx)
                if rec is not None:
                    self.hits += 1
                    return rec
                ev = self._inflight.get(idx)
                if ev is None:
                    ev = threading.Event()
                    self._inflight[idx] = ev
                    break
            ev.wait()
        try:
            rec = self._solve(idx)
            with self._lock:
                self._records[idx] = rec
                self.fills += 1
        finally:
            with self._lock:
                self._inflight.pop(idx).set()
        return rec

    def get_profile(self, a: LeaderProfile) -> ResponseRecord:
        return self.get(self.design.profile_indices(a))

    def leader_costs(self, idx: tuple[int, ...]) -> np.ndarray:
        return self.get(idx).J

    def total_cost(self, idx: tuple[int, ...]) -> float:
        return self.get(idx).total_J

    def ensure_trajectories(self, idx: tuple[int, ...]) -> ResponseRecord:
        """Re-solve a costs-only record (e.g. loaded from a spill file) so
        callers can read trajectories."""
        rec = self.get(idx)
        if rec.trajectories is None and rec.feasible:
            fresh = self._solve(tuple(int(i) for i in idx))
            with self._lock:
                self._records[tuple(int(i) for i in idx)] = fresh
            return fresh
        return rec

    # -- bulk ---------------------------------------------------------------

    def all_indices(self):
        sets = [range(len(self.design.action_sets[l]))
                for l in self.design.leader_ids]
        return itertools.product(*sets)

    def prefill(self, jobs: int = 1):
        """Evaluate the whole lattice; results are identical for any job
        count because each profile's solve is independent and pure."""
        size = self.design.lattice_size
        if size > self.cfg.lattice_cap:
            raise LatticeTooLarge(
                f"lattice has {size} profiles, cap is {self.cfg.lattice_cap}")
        todo = [idx for idx in self.all_indices()]
        if jobs <= 1:
            for i, idx in enumerate(todo):
                self.get(idx)
                if (i + 1) % 50 == 0:
                    log.info("profiles evaluated: %d / %d", i + 1, size)
        else:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                done = 0
                for _ in pool.map(self.get, todo):
                    done += 1
                    if done % 50 == 0:
                        log.info("profiles evaluated: %d / %d", done, size)

    # -- spill / resume -----------------------------------------------------

    def spill(self, path) -> None:
        """One CSV record per evaluated profile (costs and certificate
        summary; trajectories are not stored)."""
        path = Path(path)
        lids = self.design.leader_ids
        fids = self.model.follower_ids
        header = ([f"action_{l}" for l in lids] + ["feasible", "status"]
                  + [f"J_{l}" for l in lids] + ["total_J", "total_V"]
                  + [f"V_{f}" for f in fids]
                  + ["cert_converged", "cert_max_gain", "cert_sweeps"])
        with self._lock:
            items = sorted(self._records.items())
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for idx, rec in items:
                cert = rec.follower_cert
                row = [repr(v) for v in rec.profile]
                row += [str(rec.feasible).lower(), rec.status]
                row += [repr(float(v)) for v in rec.J]
                row += [repr(rec.total_J), repr(float(rec.total_V))]
                row += [repr(float(rec.V.get(f, np.nan))) for f in fids]
                if cert is None:
                    row += ["", "", ""]
                else:
                    row += [str(cert.converged).lower(), repr(cert.max_gain),
                            str(cert.sweeps)]
                w.writerow(row)

    def load_spill(self, path) -> int:
        """Seed the cache with costs-only records from a spill file.
        Returns the number of records loaded."""
        path = Path(path)
        lids = self.design.leader_ids
        fids = self.model.follower_ids
        loaded = 0
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            header = next(rd)
            for row in rd:
                vals = dict(zip(header, row))
                a = tuple(float(vals[f"action_{l}"]) for l in lids)
                idx = self.design.profile_indices(a)
                feasible = vals["feasible"] == "true"
                J = np.array([float(vals[f"J_{l}"]) for l in lids])
                status = vals["status"] if not feasible else "costs_only"
                rec = ResponseRecord(
                    a, feasible, status, J, float(vals["total_V"]),
                    {f: float(vals[f"V_{f}"]) for f in fids})
                with self._lock:
                    if idx not in self._records:
                        self._records[idx] = rec
                        loaded += 1
        return loaded


@dataclass
class LeaderEquilibriumCert:
    epsilon: float
    max_gain: float
    rounds: int
    converged: bool
    visited: int
    note: str = ""


def get_response(cache: ResponseCache, a: LeaderProfile) -> ResponseRecord:
    """Memoized follower response at profile a; infeasibility is encoded as
    +inf cost, never raised."""
    return cache.get_profile(a)


def _candidate_indices(design: DesignSpace, idx: tuple[int, ...], j: int):
    for s in range(len(design.action_sets[design.leader_ids[j]])):
        yield idx[:j] + (s,) + idx[j + 1:]


def _gain(cur: float, best: float) -> float:
    if np.isinf(cur) and np.isinf(best):
        return 0.0
    return cur - best


def leader_nash(cache: ResponseCache, cfg: GameConfig | None = None,
                init: LeaderProfile | None = None
                ) -> tuple[LeaderProfile, LeaderEquilibriumCert]:
    """Cyclic best-response dynamics over the action lattice.

    Each leader in turn jumps to the lexicographically first argmin of its
    own cost, but only when that improves by more than eps_leader; ties
    keep the incumbent.  A full round without moves certifies the profile
    (every leader was then tested against the final profile).  Revisiting a
    round-end profile without converging means a cycle; enumeration takes
    over when the lattice is within the cap.
    """
    cfg = cfg or cache.cfg
    design = cache.design
    eps = cfg.eps_leader
    idx = design.profile_indices(init) if init is not None \
        else design.profile_indices(design.nominal_profile())

    visited = {idx}
    rounds = 0
    converged = False
    max_gain = np.inf
    note = ""
    while rounds < max(cfg.max_rounds, 1):
        rounds += 1
        moved = False
        round_gain = 0.0
        for j in range(design.n_leaders):
            cur_cost = cache.leader_costs(idx)[j]
            best_s, best_cost = None, np.inf
            for cand in _candidate_indices(design, idx, j):
                c = cache.leader_costs(cand)[j]
                if c < best_cost:
                    best_s, best_cost = cand[j], c
            if best_s is None:
                continue
            gain = _gain(cur_cost, best_cost)
            round_gain = max(round_gain, min(gain, np.inf))
            if gain > eps and best_s != idx[j]:
                idx = idx[:j] + (best_s,) + idx[j + 1:]
                moved = True
        max_gain = round_gain
        if not moved:
            if np.all(np.isfinite(cache.leader_costs(idx))):
                converged = True
            else:
                # an infeasible profile is never an equilibrium, even if no
                # single deviation escapes it
                note = "stuck at infeasible profile"
            break
        if idx in visited:
            note = "cycle detected"
            break
        visited.add(idx)

    if not converged and rounds >= cfg.max_rounds and not note:
        note = "round cap reached"

    if not converged and design.lattice_size <= cfg.lattice_cap:
        # deterministic fallback: exhaustive check, lexicographically first
        equilibria = enumerate_pure_nash(cache, cfg)
        if equilibria:
            idx = design.profile_indices(equilibria[0])
            cert = LeaderEquilibriumCert(eps, 0.0, rounds, True,
                                         len(visited),
                                         note + "; resolved by enumeration")
            return design.profile_from_indices(idx), cert
        note += "; no pure equilibrium exists"

    cert = LeaderEquilibriumCert(eps, float(max_gain), rounds, converged,
                                 len(visited), note)
    return design.profile_from_indices(idx), cert


def enumerate_pure_nash(cache: ResponseCache, cfg: GameConfig | None = None
                        ) -> list[LeaderProfile]:
    """All pure eps-equilibria of the leader game, in lexicographic
    action-index order.  Infeasible profiles are never equilibria;
    deviations to infeasible profiles never improve."""
    cfg = cfg or cache.cfg
    design = cache.design
    if design.lattice_size > cfg.lattice_cap:
        raise LatticeTooLarge(
            f"lattice has {design.lattice_size} profiles, "
            f"cap is {cfg.lattice_cap}")
    eps = cfg.eps_leader
    out = []
    for idx in cache.all_indices():
        J = cache.leader_costs(idx)
        if not np.all(np.isfinite(J)):
            continue
        is_ne = True
        for j in range(design.n_leaders):
            best = min(cache.leader_costs(cand)[j]
                       for cand in _candidate_indices(design, idx, j))
            if J[j] > best + eps:
                is_ne = False
                break
        if is_ne:
            out.append(design.profile_from_indices(idx))
    return out


def leader_cooperative(cache: ResponseCache, cfg: GameConfig | None = None
                       ) -> tuple[LeaderProfile, float]:
    """Exhaustive argmin of the total leader cost; ties break to the
    lexicographically first profile in action-index order."""
    cfg = cfg or cache.cfg
    design = cache.design
    if design.lattice_size > cfg.lattice_cap:
        raise LatticeTooLarge(
            f"lattice has {design.lattice_size} profiles, "
            f"cap is {cfg.lattice_cap}")
    best_idx, best_val = None, np.inf
    for idx in cache.all_indices():
        total = cache.total_cost(idx)
        if total < best_val:
            best_idx, best_val = idx, total
    if best_idx is None or not np.isfinite(best_val):
        raise AllProfilesInfeasible(
            "every profile on the lattice is infeasible")
    return design.profile_from_indices(best_idx), float(best_val)
