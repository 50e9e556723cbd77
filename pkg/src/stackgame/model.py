"""Problem data containers and structural validation.

A problem bundle has four parts:

* NetworkModel   -- linear flow dynamics, balance structure, input/state boxes
* DesignSpace    -- leaders, their finite action sets, and which storage
                    state each leader's scale factor applies to
* CostParams     -- follower prices and smoothing weights, leader design costs
* Scenario       -- horizon, initial state, demand series, pre-horizon inputs

Arrays are converted to read-only float64 on construction so bundles can be
shared freely across worker threads.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ActionNotInSet, DimensionMismatch

LeaderProfile = tuple[float, ...]


def _freeze(arr) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


def _freeze_map(d) -> dict:
    return {k: _freeze(v) for k, v in d.items()}


@dataclass(eq=False)
class NetworkModel:
    """Linear network dynamics with per-step balance coupling.

    State update:   x[k+1] = A x[k] + sum_i B_i u_i[k] + B_demand d[k]
    Balance rows:   sum_i E_i u_i[k] + E_demand d[k] = 0
    Boxes:          u_min_i <= u_i[k] <= u_max_i,
                    x_min <= x[k] <= scaled storage caps (see DesignSpace)

    Parameters
    ----------
    follower_ids : ordered follower names; all per-follower dicts are keyed
        by these.
    A : (n_x, n_x) state matrix.
    B_blocks : follower id -> (n_x, n_ui) input-to-state matrix.
    B_demand : (n_x, n_d) direct demand-to-state matrix.
    E_blocks : follower id -> (n_e, n_ui) balance coefficients.
    E_demand : (n_e, n_d) demand coefficients in the balance rows.
    x_min : (n_x,) state floor.
    x_cap_base : (n_x,) nominal storage caps, rescaled per design profile.
    u_min_blocks, u_max_blocks : follower id -> (n_ui,) input boxes.
    units : free-form unit strings, carried as metadata only.
    """

    follower_ids: list[str]
    A: np.ndarray
    B_blocks: dict[str, np.ndarray]
    B_demand: np.ndarray
    E_blocks: dict[str, np.ndarray]
    E_demand: np.ndarray
    x_min: np.ndarray
    x_cap_base: np.ndarray
    u_min_blocks: dict[str, np.ndarray]
    u_max_blocks: dict[str, np.ndarray]
    units: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.follower_ids = list(self.follower_ids)
        self.A = _freeze(self.A)
        self.B_blocks = _freeze_map(self.B_blocks)
        self.B_demand = _freeze(self.B_demand)
        self.E_blocks = _freeze_map(self.E_blocks)
        self.E_demand = _freeze(self.E_demand)
        self.x_min = _freeze(self.x_min)
        self.x_cap_base = _freeze(self.x_cap_base)
        self.u_min_blocks = _freeze_map(self.u_min_blocks)
        self.u_max_blocks = _freeze_map(self.u_max_blocks)

    @property
    def n_x(self) -> int:
        return self.A.shape[0] if self.A.ndim == 2 else 0

    @property
    def n_d(self) -> int:
        return self.B_demand.shape[1] if self.B_demand.ndim == 2 else 0

    @property
    def n_e(self) -> int:
        return self.E_demand.shape[0] if self.E_demand.ndim == 2 else 0

    @property
    def n_followers(self) -> int:
        return len(self.follower_ids)

    def n_u(self, fid: str) -> int:
        return self.B_blocks[fid].shape[1]

    @property
    def n_u_total(self) -> int:
        return sum(self.n_u(f) for f in self.follower_ids)

    def u_slice(self, fid: str) -> slice:
        """Slice of follower fid inside the stacked per-step input vector."""
        off = 0
        for f in self.follower_ids:
            w = self.n_u(f)
            if f == fid:
                return slice(off, off + w)
            off += w
        raise KeyError(fid)

    def stacked_B(self) -> np.ndarray:
        return np.hstack([self.B_blocks[f] for f in self.follower_ids]) \
            if self.follower_ids else np.zeros((self.n_x, 0))

    def stacked_E(self) -> np.ndarray:
        return np.hstack([self.E_blocks[f] for f in self.follower_ids]) \
            if self.follower_ids else np.zeros((self.n_e, 0))

    def stacked_u_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.concatenate([self.u_min_blocks[f] for f in self.follower_ids]) \
            if self.follower_ids else np.zeros(0)
        hi = np.concatenate([self.u_max_blocks[f] for f in self.follower_ids]) \
            if self.follower_ids else np.zeros(0)
        return lo, hi


@dataclass(eq=False)
class DesignSpace:
    """Leaders, finite action sets, and the storage state each one scales.

    Profiles are tuples ordered like leader_ids.  Action sets must be
    strictly increasing so that index order (used for deterministic
    tie-breaking) is well defined.
    """

    leader_ids: list[str]
    action_sets: dict[str, tuple[float, ...]]
    state_of_leader: dict[str, int]

    def __post_init__(self):
        self.leader_ids = list(self.leader_ids)
        self.action_sets = {k: tuple(float(v) for v in vs)
                            for k, vs in self.action_sets.items()}
        self.state_of_leader = {k: int(v) for k, v in self.state_of_leader.items()}

    @property
    def n_leaders(self) -> int:
        return len(self.leader_ids)

    @property
    def lattice_size(self) -> int:
        size = 1
        for lid in self.leader_ids:
            size *= len(self.action_sets[lid])
        return size

    def profiles(self):
        """All profiles in lexicographic action-index order."""
        sets = [self.action_sets[lid] for lid in self.leader_ids]
        return itertools.product(*sets)

    def action_index(self, lid: str, value: float) -> int:
        acts = self.action_sets[lid]
        for i, v in enumerate(acts):
            if v == value:
                return i
        # tolerate parsing roundoff from hand-written inputs
        for i, v in enumerate(acts):
            if v != 0.0 and abs(value - v) <= 1e-12 * abs(v):
                return i
        raise ActionNotInSet(f"leader {lid}: action {value!r} not in {acts}")

    def profile_indices(self, a: LeaderProfile) -> tuple[int, ...]:
        if len(a) != self.n_leaders:
            raise ActionNotInSet(
                f"profile length {len(a)} != number of leaders {self.n_leaders}")
        return tuple(self.action_index(lid, float(v))
                     for lid, v in zip(self.leader_ids, a))

    def profile_from_indices(self, idx: tuple[int, ...]) -> LeaderProfile:
        return tuple(self.action_sets[lid][i]
                     for lid, i in zip(self.leader_ids, idx))

    def nominal_profile(self) -> LeaderProfile:
        """Per leader, the action closest to 1 (lower index wins ties)."""
        out = []
        for lid in self.leader_ids:
            acts = self.action_sets[lid]
            best = min(range(len(acts)), key=lambda i: (abs(acts[i] - 1.0), i))
            out.append(acts[best])
        return tuple(out)


@dataclass(eq=False)
class CostParams:
    """Follower stage costs and leader design costs.

    Follower i pays   sum_k  alpha_i[k] . u_i[k]  +  du_i[k]' R_i du_i[k]
    with du_i[k] = u_i[k] - u_i[k-1] and u_i[-1] taken from the scenario.
    Leader j pays     a' Q_j a + v_j . a  +  sum_i sum_k alpha_i[k] . u_i[k].
    """

    R_blocks: dict[str, np.ndarray]
    alpha: dict[str, np.ndarray]          # follower id -> (T, n_ui)
    Q_leader: dict[str, np.ndarray]       # leader id -> (L, L)
    v_leader: dict[str, np.ndarray]       # leader id -> (L,)

    def __post_init__(self):
        self.R_blocks = _freeze_map(self.R_blocks)
        self.alpha = _freeze_map(self.alpha)
        self.Q_leader = _freeze_map(self.Q_leader)
        self.v_leader = _freeze_map(self.v_leader)

    @classmethod
    def with_shared_leader_terms(cls, R_blocks, alpha, leader_ids,
                                 Q=None, v=None) -> "CostParams":
        """Build per-leader terms from one shared (Q, v) pair.

        Defaults: Q = 0 and v = 0.01 * ones, the usual light design penalty.
        """
        L = len(leader_ids)
        Qm = np.zeros((L, L)) if Q is None else np.asarray(Q, dtype=float)
        vv = np.full(L, 0.01) if v is None else np.asarray(v, dtype=float)
        return cls(R_blocks, alpha,
                   {lid: Qm.copy() for lid in leader_ids},
                   {lid: vv.copy() for lid in leader_ids})


@dataclass(eq=False)
class Scenario:
    """Horizon data: T steps, initial state, demand series, pre-horizon inputs."""

    T: int
    dt: float
    x0: np.ndarray
    d: np.ndarray                        # (T, n_d)
    u_prev: dict[str, np.ndarray]        # follower id -> (n_ui,)

    def __post_init__(self):
        self.T = int(self.T)
        self.dt = float(self.dt)
        self.x0 = _freeze(self.x0)
        self.d = _freeze(np.asarray(self.d, dtype=float).reshape(self.T, -1)
                         if np.asarray(self.d).size else
                         np.zeros((self.T, 0)))
        self.u_prev = _freeze_map(self.u_prev)


def state_upper_bound(model: NetworkModel, design: DesignSpace,
                      a: LeaderProfile) -> np.ndarray:
    """Scaled state cap for a design profile.

    Each leader's action multiplies the nominal cap of exactly one storage
    state; every other coordinate keeps its nominal cap.
    """
    design.profile_indices(a)  # membership check
    cap = np.array(model.x_cap_base, dtype=float)
    for lid, val in zip(design.leader_ids, a):
        cap[design.state_of_leader[lid]] *= float(val)
    return cap


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, msg: str):
        self.violations.append(msg)

    def __str__(self) -> str:
        if self.ok:
            return "valid"
        return "\n".join(f"- {v}" for v in self.violations)


def _check_shape(rep, arr, shape, name):
    if np.asarray(arr).shape != shape:
        rep.add(f"{name}: expected shape {shape}, got {np.asarray(arr).shape}")
        return False
    return True


def validate_model(model: NetworkModel, design: DesignSpace,
                   costs: CostParams, scenario: Scenario) -> ValidationReport:
    """Structural validation of a problem bundle.

    Pure shape/sign/membership checks; does not solve anything.  Emptiness
    of the dynamic feasible set is probed separately (see
    followers.probe_extreme_profiles).
    """
    rep = ValidationReport()
    n_x, n_d, n_e = model.n_x, model.n_d, model.n_e

    if model.A.ndim != 2 or model.A.shape[0] != model.A.shape[1]:
        rep.add(f"A must be square, got {model.A.shape}")
        return rep

    ids = model.follower_ids
    if len(set(ids)) != len(ids):
        rep.add("follower ids are not distinct")
    for dict_name, d in [("B_blocks", model.B_blocks), ("E_blocks", model.E_blocks),
                         ("u_min_blocks", model.u_min_blocks),
                         ("u_max_blocks", model.u_max_blocks),
                         ("R_blocks", costs.R_blocks), ("alpha", costs.alpha),
                         ("u_prev", scenario.u_prev)]:
        missing = [f for f in ids if f not in d]
        extra = [f for f in d if f not in ids]
        if missing:
            rep.add(f"{dict_name}: missing followers {missing}")
        if extra:
            rep.add(f"{dict_name}: unknown followers {extra}")
    if not rep.ok:
        return rep

    _check_shape(rep, model.B_demand, (n_x, n_d), "B_demand")
    _check_shape(rep, model.E_demand, (n_e, n_d), "E_demand")
    _check_shape(rep, model.x_min, (n_x,), "x_min")
    _check_shape(rep, model.x_cap_base, (n_x,), "x_cap_base")
    if np.any(model.x_min > model.x_cap_base):
        rep.add("x_min exceeds x_cap_base on some coordinate")

    T = scenario.T
    if T < 0:
        rep.add(f"T must be >= 0, got {T}")
    if scenario.dt <= 0:
        rep.add(f"dt must be > 0, got {scenario.dt}")
    _check_shape(rep, scenario.x0, (n_x,), "x0")
    if scenario.d.shape != (max(T, 0), n_d):
        rep.add(f"demand series: expected shape ({T}, {n_d}), got {scenario.d.shape}")
    if scenario.x0.shape == (n_x,):
        if np.any(scenario.x0 < model.x_min - 1e-12) or \
           np.any(scenario.x0 > model.x_cap_base + 1e-12):
            rep.add("x0 outside the nominal state box")

    for f in ids:
        nu = model.n_u(f)
        _check_shape(rep, model.B_blocks[f], (n_x, nu), f"B_blocks[{f}]")
        _check_shape(rep, model.E_blocks[f], (n_e, nu), f"E_blocks[{f}]")
        _check_shape(rep, model.u_min_blocks[f], (nu,), f"u_min_blocks[{f}]")
        _check_shape(rep, model.u_max_blocks[f], (nu,), f"u_max_blocks[{f}]")
        if model.u_min_blocks[f].shape == (nu,) and model.u_max_blocks[f].shape == (nu,):
            if np.any(model.u_min_blocks[f] > model.u_max_blocks[f]):
                rep.add(f"u_min > u_max for follower {f}")
        if _check_shape(rep, costs.R_blocks[f], (nu, nu), f"R_blocks[{f}]"):
            R = costs.R_blocks[f]
            if np.max(np.abs(R - R.T)) > 1e-8 * (1 + np.max(np.abs(R))):
                rep.add(f"R_blocks[{f}] not symmetric")
            elif nu and np.linalg.eigvalsh(R).min() <= 0:
                rep.add(f"R_blocks[{f}] not positive definite")
        _check_shape(rep, costs.alpha[f], (max(T, 0), nu), f"alpha[{f}]")
        _check_shape(rep, scenario.u_prev[f], (nu,), f"u_prev[{f}]")

    L = design.n_leaders
    lids = design.leader_ids
    if len(set(lids)) != len(lids):
        rep.add("leader ids are not distinct")
    for lid in lids:
        if lid not in design.action_sets:
            rep.add(f"action_sets: missing leader {lid}")
            continue
        acts = design.action_sets[lid]
        if not acts:
            rep.add(f"action set of {lid} is empty")
            continue
        if any(v <= 0 for v in acts):
            rep.add(f"action set of {lid} has non-positive entries")
        if any(b <= a for a, b in zip(acts, acts[1:])):
            rep.add(f"action set of {lid} is not strictly increasing")
        if lid not in design.state_of_leader:
            rep.add(f"state_of_leader: missing leader {lid}")
            continue
        s = design.state_of_leader[lid]
        if not (0 <= s < n_x):
            rep.add(f"state_of_leader[{lid}] = {s} out of range [0, {n_x})")
            continue
        # the scaled cap must never drop below the floor, else some profile
        # has an empty state box
        for v in acts:
            if v * model.x_cap_base[s] < model.x_min[s] - 1e-12:
                rep.add(f"action {v} of {lid} drops cap of state {s} below x_min")
    designed = [design.state_of_leader.get(l) for l in lids if l in design.state_of_leader]
    if len(set(designed)) != len(designed):
        rep.add("two leaders scale the same state")

    for lid in lids:
        if lid in costs.Q_leader:
            if _check_shape(rep, costs.Q_leader[lid], (L, L), f"Q_leader[{lid}]"):
                Q = costs.Q_leader[lid]
                if np.max(np.abs(Q - Q.T)) > 1e-8 * (1 + np.max(np.abs(Q))):
                    rep.add(f"Q_leader[{lid}] not symmetric")
                elif L and np.linalg.eigvalsh(Q).min() < -1e-9 * (1 + np.max(np.abs(Q))):
                    rep.add(f"Q_leader[{lid}] not positive semidefinite")
        else:
            rep.add(f"Q_leader: missing leader {lid}")
        if lid in costs.v_leader:
            _check_shape(rep, costs.v_leader[lid], (L,), f"v_leader[{lid}]")
        else:
            rep.add(f"v_leader: missing leader {lid}")

    return rep
