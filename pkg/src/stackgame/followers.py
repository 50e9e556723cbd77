"""Follower layer: horizon transcription, cooperative solve, best
responses, and the Gauss-Seidel equilibrium loop.

The followers share one constraint set (dynamics, balance rows, input and
state boxes) and have individually separable costs: V_i depends on u_i
only.  Equilibria are therefore generalized Nash: a deviating follower must
keep the whole trajectory feasible with everyone else's inputs frozen.

Transcription keeps states as explicit decision variables ("simultaneous"
form).  The decision vector is

    z = [u(0), ..., u(T-1), x(0), ..., x(T)]

so a problem with 61 stacked inputs, 17 states and T = 72 transcribes to
61*72 + 17*73 variables.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import qp
from .config import GameConfig
from .errors import FollowerInfeasible, FollowerSolveFailed
from .model import CostParams, DesignSpace, LeaderProfile, NetworkModel, Scenario, \
    state_upper_bound

log = logging.getLogger("stackgame")

# inputs moving less than this (relative) between sweeps count as unchanged
_U_SETTLE_TOL = 1e-10
# residual ceiling for balance rows a deviating follower cannot influence
_DEAD_ROW_TOL = 1e-6


@dataclass
class Transcription:
    """Index bookkeeping for the stacked decision vector."""

    T: int
    n_u: int
    n_x: int

    @property
    def n_vars(self) -> int:
        return self.T * self.n_u + (self.T + 1) * self.n_x

    @property
    def x_offset(self) -> int:
        return self.T * self.n_u

    def u_of(self, z: np.ndarray) -> np.ndarray:
        return z[: self.x_offset].reshape(self.T, self.n_u)

    def x_of(self, z: np.ndarray) -> np.ndarray:
        return z[self.x_offset:].reshape(self.T + 1, self.n_x)

    def pack(self, u: np.ndarray, x: np.ndarray) -> np.ndarray:
        return np.concatenate([np.asarray(u, dtype=float).reshape(-1),
                               np.asarray(x, dtype=float).reshape(-1)])


@dataclass(eq=False)
class FollowerTrajectorySet:
    """A joint follower solution at one leader profile."""

    u: dict[str, np.ndarray]        # follower id -> (T, n_ui)
    x: np.ndarray                   # (T+1, n_x)
    V: dict[str, float]             # follower id -> own cost
    qp_status: str = qp.OPTIMAL
    kkt_residual: float = 0.0

    @property
    def total_V(self) -> float:
        return float(sum(self.V.values()))


@dataclass
class FollowerEquilibriumCert:
    """Certification record for a Gauss-Seidel equilibrium seek.

    max_gain is the largest observed unilateral improvement scaled by
    max(1, |V_i|); converged implies max_gain <= epsilon.
    """

    epsilon: float
    max_gain: float
    sweeps: int
    converged: bool
    gains: dict[str, float] = field(default_factory=dict)
    solves: int = 0
    note: str = ""


def follower_cost(alpha_i: np.ndarray, R_i: np.ndarray, u_prev_i: np.ndarray,
                  u_i: np.ndarray) -> float:
    """V_i = sum_k alpha_i[k].u_i[k] + du_i[k]' R_i du_i[k], du taken
    against the pre-horizon input at k = 0."""
    u_i = np.asarray(u_i, dtype=float)
    T = u_i.shape[0]
    if T == 0:
        return 0.0
    lin = float(np.sum(alpha_i * u_i))
    du = np.diff(np.vstack([u_prev_i[None, :], u_i]), axis=0)
    quad = float(np.sum(du * (du @ np.asarray(R_i, dtype=float).T)))
    return lin + quad


def _smoothing_quadratic(T: int, R: np.ndarray) -> sp.csc_matrix:
    # sum_k du' R du  ==  0.5 u' P u with P = 2 * kron(D'D, R),
    # D the first-difference matrix anchored at the pre-horizon input
    D = sp.eye(T, format="csr") - sp.eye(T, k=-1, format="csr")
    return 2.0 * sp.kron(D.T @ D, sp.csc_matrix(R), format="csc")


def _dyn_rows(T: int, n_x: int, A: np.ndarray, B: np.ndarray,
              n_u: int) -> tuple[sp.csc_matrix, sp.csc_matrix]:
    """Coefficients of the T*n_x dynamics rows on (u, x)."""
    I_T = sp.eye(T, format="csr")
    on_u = -sp.kron(I_T, sp.csc_matrix(B), format="csc") if n_u else \
        sp.csc_matrix((T * n_x, 0))
    shift_cur = sp.eye(T, T + 1, format="csr")            # selects x_k
    shift_next = sp.eye(T, T + 1, k=1, format="csr")      # selects x_{k+1}
    on_x = (sp.kron(shift_next, sp.eye(n_x), format="csc")
            - sp.kron(shift_cur, sp.csc_matrix(A), format="csc"))
    return on_u, on_x


def _stack_problem(T: int, n_x: int, A: np.ndarray, B: np.ndarray,
                   E: np.ndarray, R: np.ndarray, alpha_flat: np.ndarray,
                   u_prev: np.ndarray, u_lo_step: np.ndarray,
                   u_hi_step: np.ndarray, x_lo: np.ndarray, x_hi: np.ndarray,
                   x0: np.ndarray, dyn_rhs: np.ndarray, bal_rhs: np.ndarray,
                   ) -> tuple[qp.QuadProgram, Transcription]:
    """Assemble the sparse QP shared by the cooperative and best-response
    builders.  Row order: state pin, dynamics (k-major), balance (k-major)."""
    n_u = B.shape[1]
    tr = Transcription(T, n_u, n_x)
    n = tr.n_vars
    n_e = E.shape[0]

    blocks = []
    init = sp.hstack([sp.csc_matrix((n_x, T * n_u)),
                      sp.eye(n_x, (T + 1) * n_x, format="csc")], format="csc") \
        if T else sp.eye(n_x, format="csc")
    blocks.append(init)
    if T:
        on_u, on_x = _dyn_rows(T, n_x, A, B, n_u)
        blocks.append(sp.hstack([on_u, on_x], format="csc"))
        if n_e:
            bal_u = sp.kron(sp.eye(T), sp.csc_matrix(E), format="csc")
            blocks.append(sp.hstack(
                [bal_u, sp.csc_matrix((T * n_e, (T + 1) * n_x))], format="csc"))
    A_eq = sp.vstack(blocks, format="csc") if len(blocks) > 1 else blocks[0]
    b_eq = np.concatenate([x0, dyn_rhs, bal_rhs])

    if T and n_u:
        P_u = _smoothing_quadratic(T, R)
        P = sp.block_diag([P_u, sp.csc_matrix(((T + 1) * n_x, (T + 1) * n_x))],
                          format="csc")
    else:
        P = sp.csc_matrix((n, n))
    q = np.zeros(n)
    if T and n_u:
        q[: T * n_u] = alpha_flat
        q[:n_u] -= 2.0 * (np.asarray(R, dtype=float) @ u_prev)

    lb = np.concatenate([np.tile(u_lo_step, T), np.tile(x_lo, T + 1)])
    ub = np.concatenate([np.tile(u_hi_step, T), np.tile(x_hi, T + 1)])

    prob = qp.QuadProgram._from_parts(P, q, A_eq, b_eq, lb, ub)
    return prob, tr


def build_cooperative_qp(model: NetworkModel, design: DesignSpace,
                         costs: CostParams, scenario: Scenario,
                         a: LeaderProfile
                         ) -> tuple[qp.QuadProgram, Transcription]:
    """Transcribe the joint minimum-total-cost problem at profile a."""
    T = scenario.T
    ids = model.follower_ids
    B = model.stacked_B()
    E = model.stacked_E()
    R = sp.block_diag([costs.R_blocks[f] for f in ids]).toarray() if ids \
        else np.zeros((0, 0))
    alpha_flat = np.hstack([costs.alpha[f] for f in ids]).reshape(-1) if ids and T \
        else np.zeros(0)
    u_prev = np.concatenate([scenario.u_prev[f] for f in ids]) if ids \
        else np.zeros(0)
    u_lo, u_hi = model.stacked_u_bounds()
    x_hi = state_upper_bound(model, design, a)
    dyn_rhs = (scenario.d @ model.B_demand.T).reshape(-1) if T else np.zeros(0)
    bal_rhs = (-scenario.d @ model.E_demand.T).reshape(-1) if T and model.n_e \
        else np.zeros(0)
    return _stack_problem(T, model.n_x, model.A, B, E, R, alpha_flat, u_prev,
                          u_lo, u_hi, model.x_min, x_hi, scenario.x0,
                          dyn_rhs, bal_rhs)


def _extract(model: NetworkModel, costs: CostParams, scenario: Scenario,
             tr: Transcription, z: np.ndarray, status: str,
             residual: float) -> FollowerTrajectorySet:
    u_all = tr.u_of(z)
    u_map, V_map = {}, {}
    for f in model.follower_ids:
        u_f = u_all[:, model.u_slice(f)].copy()
        u_map[f] = u_f
        V_map[f] = follower_cost(costs.alpha[f], costs.R_blocks[f],
                                 scenario.u_prev[f], u_f)
    return FollowerTrajectorySet(u_map, tr.x_of(z).copy(), V_map, status, residual)


def solve_cooperative(model: NetworkModel, design: DesignSpace,
                      costs: CostParams, scenario: Scenario, a: LeaderProfile,
                      cfg: GameConfig | None = None) -> FollowerTrajectorySet:
    """Joint minimizer of the total follower cost at profile a.

    Raises FollowerInfeasible when the constraint set is empty and
    FollowerSolveFailed when the iteration budget runs out uncertified.
    """
    cfg = cfg or GameConfig()
    prob, tr = build_cooperative_qp(model, design, costs, scenario, a)
    sol = qp.solve_qp(prob, cfg.qp)
    if sol.status == qp.INFEASIBLE:
        raise FollowerInfeasible(a, "cooperative transcription infeasible")
    if sol.status != qp.OPTIMAL:
        raise FollowerSolveFailed(
            f"cooperative solve hit the iteration cap at profile {tuple(a)} "
            f"(residual {sol.residuals.max():.2e})")
    return _extract(model, costs, scenario, tr, sol.z, sol.status,
                    sol.residuals.max())


def _br_problem(model: NetworkModel, design: DesignSpace, costs: CostParams,
                scenario: Scenario, a: LeaderProfile, fid: str,
                u_map: dict[str, np.ndarray]
                ) -> tuple[qp.QuadProgram, Transcription]:
    """Transcribe follower fid's best-response problem with every other
    follower's inputs frozen."""
    T = scenario.T
    others = [f for f in model.follower_ids if f != fid]
    B_i = model.B_blocks[fid]
    E_i = model.E_blocks[fid]

    dyn_rhs = (scenario.d @ model.B_demand.T) if T else np.zeros((0, model.n_x))
    for f in others:
        if T:
            dyn_rhs = dyn_rhs + u_map[f] @ model.B_blocks[f].T

    live = np.zeros(model.n_e, dtype=bool)
    if model.n_e:
        live = np.asarray(np.abs(E_i).sum(axis=1)).reshape(-1) > 0
    bal_rhs_full = (-scenario.d @ model.E_demand.T) if T and model.n_e \
        else np.zeros((max(T, 0), model.n_e))
    for f in others:
        if T and model.n_e:
            bal_rhs_full = bal_rhs_full - u_map[f] @ model.E_blocks[f].T
    if model.n_e and T and np.any(~live):
        dead_resid = np.max(np.abs(bal_rhs_full[:, ~live])) \
            if bal_rhs_full[:, ~live].size else 0.0
        if dead_resid > _DEAD_ROW_TOL:
            raise FollowerInfeasible(
                a, f"balance rows outside follower {fid}'s control are "
                   f"violated by {dead_resid:.2e}")
    E_live = E_i[live] if model.n_e else E_i
    bal_rhs = bal_rhs_full[:, live].reshape(-1) if T and model.n_e else np.zeros(0)

    return _stack_problem(
        T, model.n_x, model.A, B_i, E_live, costs.R_blocks[fid],
        costs.alpha[fid].reshape(-1) if T else np.zeros(0),
        scenario.u_prev[fid], model.u_min_blocks[fid], model.u_max_blocks[fid],
        model.x_min, state_upper_bound(model, design, a), scenario.x0,
        dyn_rhs.reshape(-1), bal_rhs)


def best_response(model: NetworkModel, design: DesignSpace, costs: CostParams,
                  scenario: Scenario, a: LeaderProfile, fid: str,
                  u_map: dict[str, np.ndarray], cfg: GameConfig | None = None,
                  warm: tuple[np.ndarray, np.ndarray] | None = None
                  ) -> tuple[np.ndarray, np.ndarray, float, qp.QpSolution]:
    """Follower fid's exact best response to the other followers' inputs.

    Returns (u_i, x, V_i, qp_solution); the state trajectory is the one
    induced by (u_i, frozen others).
    """
    cfg = cfg or GameConfig()
    prob, tr = _br_problem(model, design, costs, scenario, a, fid, u_map)
    init_z = init_y = None
    if warm is not None:
        init_z, init_y = warm
    sol = qp.solve_qp(prob, cfg.qp, init_z=init_z, init_y=init_y)
    if sol.status == qp.INFEASIBLE:
        raise FollowerInfeasible(a, f"best response of follower {fid} infeasible")
    if sol.status != qp.OPTIMAL:
        raise FollowerSolveFailed(
            f"best response of follower {fid} hit the iteration cap at "
            f"profile {tuple(a)} (residual {sol.residuals.max():.2e})")
    u_i = tr.u_of(sol.z).copy() if scenario.T else np.zeros((0, model.n_u(fid)))
    x = tr.x_of(sol.z).copy()
    V_i = follower_cost(costs.alpha[fid], costs.R_blocks[fid],
                        scenario.u_prev[fid], u_i)
    return u_i, x, V_i, sol


def follower_nash(model: NetworkModel, design: DesignSpace, costs: CostParams,
                  scenario: Scenario, a: LeaderProfile,
                  cfg: GameConfig | None = None,
                  init: FollowerTrajectorySet | None = None
                  ) -> tuple[FollowerTrajectorySet, FollowerEquilibriumCert]:
    """Gauss-Seidel best-response iteration to an epsilon equilibrium.

    Sweeps the followers in their declared order.  A sweep that moves
    nobody doubles as the certification pass, since every response was then
    computed against the final frozen profile; otherwise an explicit
    frozen-profile pass re-solves each follower before convergence is
    declared.  Non-convergence is reported in the certificate, not raised.
    """
    cfg = cfg or GameConfig()
    ids = model.follower_ids
    solves = 0

    if init is None:
        try:
            current = solve_cooperative(model, design, costs, scenario, a, cfg)
            solves += 1
        except FollowerSolveFailed:
            # zero-profile fallback keeps the seek alive when the joint
            # solve stalls; best responses may still succeed
            log.warning("cooperative initialization failed at %s; starting "
                        "from zero inputs", a)
            zero_u = {f: np.zeros((scenario.T, model.n_u(f))) for f in ids}
            zero_x = np.tile(scenario.x0, (scenario.T + 1, 1))
            current = FollowerTrajectorySet(
                zero_u, zero_x,
                {f: follower_cost(costs.alpha[f], costs.R_blocks[f],
                                  scenario.u_prev[f], zero_u[f]) for f in ids},
                qp_status="fallback")
    else:
        current = FollowerTrajectorySet({f: np.array(init.u[f]) for f in ids},
                                        np.array(init.x), dict(init.V),
                                        init.qp_status, init.kkt_residual)

    warm: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    eps = cfg.eps_follower

    def hint(f: str) -> tuple[np.ndarray, np.ndarray | None]:
        got = warm.get(f)
        if got is not None:
            return got
        return (np.concatenate([current.u[f].reshape(-1),
                                current.x.reshape(-1)]), None)

    def frozen_pass() -> tuple[dict[str, float], bool]:
        nonlocal solves
        gains = {}
        ok = True
        for f in ids:
            _, _, V_new, sol = best_response(model, design, costs, scenario, a,
                                             f, current.u, cfg, hint(f))
            solves += 1
            gains[f] = current.V[f] - V_new
            if gains[f] > cfg.follower_threshold(current.V[f]):
                ok = False
        return gains, ok

    sweeps = 0
    cert = None
    while sweeps < max(cfg.max_sweeps, 1):
        sweeps += 1
        changed = False
        sweep_gains: dict[str, float] = {}
        for f in ids:
            u_i, x, V_new, sol = best_response(model, design, costs, scenario,
                                               a, f, current.u, cfg, hint(f))
            solves += 1
            warm[f] = (sol.z, np.concatenate([sol.y_eq, sol.y_bound]))
            sweep_gains[f] = current.V[f] - V_new
            scale = 1.0 + np.max(np.abs(current.u[f])) if current.u[f].size else 1.0
            if u_i.size and np.max(np.abs(u_i - current.u[f])) > _U_SETTLE_TOL * scale:
                changed = True
            current.u[f] = u_i
            current.x = x
            current.V[f] = V_new
            current.qp_status = sol.status
            current.kkt_residual = sol.residuals.max()

        if not changed:
            # nobody moved: the sweep itself certified the frozen profile
            scaled = {f: sweep_gains[f] / max(1.0, abs(current.V[f])) for f in ids}
            cert = FollowerEquilibriumCert(
                eps, max(scaled.values(), default=0.0), sweeps, True,
                sweep_gains, solves, "multiplicity unexplored")
            break

        within = all(sweep_gains[f] <= cfg.follower_threshold(current.V[f])
                     for f in ids)
        if within:
            gains, ok = frozen_pass()
            if ok:
                scaled = {f: gains[f] / max(1.0, abs(current.V[f])) for f in ids}
                cert = FollowerEquilibriumCert(
                    eps, max(scaled.values(), default=0.0), sweeps, True,
                    gains, solves, "multiplicity unexplored")
                break

    if cert is None:
        gains, ok = frozen_pass()
        scaled = {f: gains[f] / max(1.0, abs(current.V[f])) for f in ids}
        cert = FollowerEquilibriumCert(
            eps, max(scaled.values(), default=0.0), sweeps, ok, gains, solves,
            "sweep cap reached" if not ok else "converged at sweep cap")

    return current, cert


def probe_extreme_profiles(model: NetworkModel, design: DesignSpace,
                           costs: CostParams, scenario: Scenario,
                           cfg: GameConfig | None = None) -> list[str]:
    """Feasibility probe at the componentwise smallest and largest
    profiles.  Because state boxes only grow with each action, feasibility
    at the smallest profile implies it everywhere on the lattice."""
    cfg = cfg or GameConfig()
    out = []
    lo = tuple(design.action_sets[l][0] for l in design.leader_ids)
    hi = tuple(design.action_sets[l][-1] for l in design.leader_ids)
    for name, prof in [("smallest", lo), ("largest", hi)]:
        try:
            solve_cooperative(model, design, costs, scenario, prof, cfg)
        except FollowerInfeasible:
            out.append(f"infeasible at the {name} profile {prof}")
        except FollowerSolveFailed as e:
            out.append(f"probe did not certify at the {name} profile {prof}: {e}")
    return out
