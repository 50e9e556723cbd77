"""Two-layer equilibrium classes, price-of-anarchy ratios, and the full
four-class study.

Class tags pair a leader behavior with a follower behavior:

    I   : self-interested leaders,  self-interested followers
    II  : cooperative leaders,      cooperative followers
    III : self-interested leaders,  cooperative followers
    IV  : cooperative leaders,      self-interested followers

Leaders interact with the follower layer only through the memoized
response cache, so classes sharing a follower behavior share solves.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import qp
from .config import GameConfig
from .errors import NoEquilibriumFound
from .followers import FollowerEquilibriumCert, FollowerTrajectorySet, \
    build_cooperative_qp, follower_cost, follower_nash, solve_cooperative, _extract
from .leaders import COOPERATIVE, NASH, LeaderEquilibriumCert, ResponseCache, \
    enumerate_pure_nash, leader_cooperative, leader_cost, leader_nash, \
    operating_cost
from .model import CostParams, DesignSpace, LeaderProfile, NetworkModel, Scenario

log = logging.getLogger("stackgame")


@dataclass(frozen=True)
class StackelbergClass:
    tag: str
    leader_behavior: str
    follower_behavior: str


CLASS_TABLE: dict[str, StackelbergClass] = {
    "I": StackelbergClass("I", NASH, NASH),
    "II": StackelbergClass("II", COOPERATIVE, COOPERATIVE),
    "III": StackelbergClass("III", NASH, COOPERATIVE),
    "IV": StackelbergClass("IV", COOPERATIVE, NASH),
}


@dataclass(eq=False)
class EquilibriumReport:
    game_class: str
    leader_behavior: str
    follower_behavior: str
    profile: LeaderProfile
    leader_J: dict[str, float]
    total_J: float
    follower_V: dict[str, float]
    total_V: float
    trajectories: FollowerTrajectorySet | None
    follower_cert: FollowerEquilibriumCert
    leader_cert: LeaderEquilibriumCert
    feasible: bool = True
    # informational only; excluded from exported files so repeated runs
    # stay byte-identical
    wall_time: float = 0.0
    solve_stats: dict = field(default_factory=dict)


@dataclass
class PoAReport:
    layer: str                       # "leader" | "follower"
    label: str                       # which behavior the other layer plays
    numerator: float
    denominator: float
    poa: float
    numerator_profile: LeaderProfile | None = None
    denominator_profile: LeaderProfile | None = None
    note: str = ""


def _coop_cert(cfg: GameConfig) -> FollowerEquilibriumCert:
    return FollowerEquilibriumCert(cfg.eps_follower, 0.0, 0, True, {}, 0,
                                   "exact cooperative solve")


def resolve_class(game_class) -> StackelbergClass:
    if isinstance(game_class, StackelbergClass):
        return game_class
    try:
        return CLASS_TABLE[str(game_class).upper()]
    except KeyError:
        raise ValueError(f"unknown class {game_class!r}; expected I..IV") from None


def solve_class(model: NetworkModel, design: DesignSpace, costs: CostParams,
                scenario: Scenario, game_class, cfg: GameConfig | None = None,
                cache: ResponseCache | None = None) -> EquilibriumReport:
    """Solve one behavior pairing and assemble its equilibrium report."""
    cfg = cfg or GameConfig()
    cls = resolve_class(game_class)
    t0 = time.perf_counter()
    if cache is None:
        cache = ResponseCache(model, design, costs, scenario,
                              cls.follower_behavior, cfg)
    elif cache.behavior != cls.follower_behavior:
        raise ValueError(f"cache behavior {cache.behavior!r} does not match "
                         f"class {cls.tag}")

    if cls.leader_behavior == NASH:
        profile, lcert = leader_nash(cache, cfg)
    else:
        profile, total = leader_cooperative(cache, cfg)
        lcert = LeaderEquilibriumCert(cfg.eps_leader, 0.0, 0, True,
                                      design.lattice_size, "exhaustive argmin")

    idx = design.profile_indices(profile)
    rec = cache.ensure_trajectories(idx)
    fcert = rec.follower_cert if rec.follower_cert is not None else _coop_cert(cfg)
    report = EquilibriumReport(
        game_class=cls.tag,
        leader_behavior=cls.leader_behavior,
        follower_behavior=cls.follower_behavior,
        profile=profile,
        leader_J={lid: float(rec.J[j]) for j, lid in enumerate(design.leader_ids)},
        total_J=rec.total_J,
        follower_V=dict(rec.V),
        total_V=float(rec.total_V),
        trajectories=rec.trajectories,
        follower_cert=fcert,
        leader_cert=lcert,
        feasible=rec.feasible,
        wall_time=time.perf_counter() - t0,
        solve_stats={"cache_fills": cache.fills, "cache_hits": cache.hits},
    )
    return report


def verify_report(report: EquilibriumReport, design: DesignSpace,
                  costs: CostParams, scenario: Scenario) -> float:
    """Max deviation between stored costs and costs recomputed from the
    stored profile and trajectories."""
    if report.trajectories is None:
        return 0.0
    ts = report.trajectories
    dev = 0.0
    for f, u_f in ts.u.items():
        V = follower_cost(costs.alpha[f], costs.R_blocks[f],
                          scenario.u_prev[f], u_f)
        dev = max(dev, abs(V - report.follower_V[f]))
    J = leader_cost(design, costs, report.profile,
                    operating_cost(costs, ts.u))
    for j, lid in enumerate(design.leader_ids):
        dev = max(dev, abs(float(J[j]) - report.leader_J[lid]))
    dev = max(dev, abs(float(np.sum(J)) - report.total_J))
    dev = max(dev, abs(sum(ts.V.values()) - report.total_V))
    return dev


# ---------------------------------------------------------------------------
# price of anarchy


def poa_leader(cache: ResponseCache, cfg: GameConfig | None = None) -> PoAReport:
    """Worst pure-equilibrium total cost over the cooperative optimum at
    the leader layer, for whatever follower behavior the cache solves."""
    cfg = cfg or cache.cfg
    equilibria = enumerate_pure_nash(cache, cfg)
    if not equilibria:
        raise NoEquilibriumFound("the leader game has no pure equilibrium "
                                 f"at eps = {cfg.eps_leader}")
    worst_prof, worst_val = None, -np.inf
    for prof in equilibria:
        val = cache.total_cost(cache.design.profile_indices(prof))
        if val > worst_val:
            worst_prof, worst_val = prof, val
    best_prof, best_val = leader_cooperative(cache, cfg)
    ratio = worst_val / best_val if best_val > 0 else np.inf
    return PoAReport(
        layer="leader",
        label=f"followers={cache.behavior}",
        numerator=float(worst_val), denominator=float(best_val),
        poa=float(ratio), numerator_profile=worst_prof,
        denominator_profile=best_prof,
        note=f"{len(equilibria)} pure equilibria enumerated")


def _perturbed_start(model, design, costs, scenario, a, cfg,
                     rng: np.random.Generator) -> FollowerTrajectorySet | None:
    """A random feasible joint profile: re-solve the cooperative program
    under a perturbed linear cost."""
    prob, tr = build_cooperative_qp(model, design, costs, scenario, a)
    scale = 1.0 + np.max(np.abs(prob.q)) if prob.q.size else 1.0
    prob2 = prob.replaced(q=prob.q + 0.25 * scale * rng.standard_normal(prob.n))
    sol = qp.solve_qp(prob2, cfg.qp)
    if sol.status != qp.OPTIMAL:
        return None
    return _extract(model, costs, scenario, tr, sol.z, sol.status,
                    sol.residuals.max())


def poa_follower(model: NetworkModel, design: DesignSpace, costs: CostParams,
                 scenario: Scenario, a: LeaderProfile, label: str = "",
                 cfg: GameConfig | None = None,
                 nash_cache: ResponseCache | None = None,
                 coop_cache: ResponseCache | None = None) -> PoAReport:
    """Follower-layer inefficiency at a fixed leader profile: equilibrium
    total cost over the joint cooperative optimum.

    The numerator uses the single deterministic equilibrium the sweep
    finds.  With cfg.multi_start > 0, additional equilibria are sought from
    seeded random feasible starts and the worst converged one is reported.
    """
    cfg = cfg or GameConfig()
    idx = design.profile_indices(a)
    if nash_cache is not None:
        rec = nash_cache.get(idx)
        nash_V, cert = rec.total_V, rec.follower_cert
    else:
        ts, cert = follower_nash(model, design, costs, scenario, a, cfg)
        nash_V = ts.total_V
    if coop_cache is not None:
        coop_V = coop_cache.get(idx).total_V
    else:
        coop_V = solve_cooperative(model, design, costs, scenario, a, cfg).total_V

    note = "multiplicity unexplored (single deterministic equilibrium)"
    if cfg.multi_start > 0:
        rng = np.random.default_rng(cfg.seed)
        found = 1
        for _ in range(cfg.multi_start):
            init = _perturbed_start(model, design, costs, scenario, a, cfg, rng)
            if init is None:
                continue
            ts_k, cert_k = follower_nash(model, design, costs, scenario, a,
                                         cfg, init=init)
            if cert_k.converged:
                found += 1
                if ts_k.total_V > nash_V:
                    nash_V = ts_k.total_V
        note = f"multi-start probe: {found} converged seeks " \
               f"({cfg.multi_start} extra starts, seed {cfg.seed})"
    if cert is not None and not cert.converged:
        note += "; equilibrium seek did not certify"

    ratio = nash_V / coop_V if coop_V > 0 else np.inf
    return PoAReport(
        layer="follower",
        label=label or f"profile={tuple(round(v, 6) for v in a)}",
        numerator=float(nash_V), denominator=float(coop_V), poa=float(ratio),
        numerator_profile=tuple(a), denominator_profile=tuple(a), note=note)


# ---------------------------------------------------------------------------
# full study


@dataclass(eq=False)
class StudyResult:
    reports: dict[str, EquilibriumReport]
    poa: list[PoAReport]
    wall_time: float = 0.0


def run_study(model: NetworkModel, design: DesignSpace, costs: CostParams,
              scenario: Scenario, cfg: GameConfig | None = None) -> StudyResult:
    """All four classes plus the four price-of-anarchy rows, sharing one
    response cache per follower behavior."""
    cfg = cfg or GameConfig()
    t0 = time.perf_counter()
    caches = {
        NASH: ResponseCache(model, design, costs, scenario, NASH, cfg),
        COOPERATIVE: ResponseCache(model, design, costs, scenario,
                                   COOPERATIVE, cfg),
    }
    # the study table needs the full lattice under both behaviors anyway
    log.info("prefilling cooperative responses (%d profiles)",
             design.lattice_size)
    caches[COOPERATIVE].prefill(cfg.jobs)
    log.info("prefilling equilibrium responses (%d profiles)",
             design.lattice_size)
    caches[NASH].prefill(cfg.jobs)

    reports = {}
    for tag in ("I", "II", "III", "IV"):
        cls = CLASS_TABLE[tag]
        reports[tag] = solve_class(model, design, costs, scenario, tag, cfg,
                                   cache=caches[cls.follower_behavior])
        log.info("class %s: profile %s, total J %.6g", tag,
                 reports[tag].profile, reports[tag].total_J)

    poa = [
        poa_leader(caches[COOPERATIVE], cfg),
        poa_leader(caches[NASH], cfg),
        poa_follower(model, design, costs, scenario, reports["IV"].profile,
                     "leaders=cooperative", cfg,
                     nash_cache=caches[NASH], coop_cache=caches[COOPERATIVE]),
        poa_follower(model, design, costs, scenario, reports["I"].profile,
                     "leaders=nash", cfg,
                     nash_cache=caches[NASH], coop_cache=caches[COOPERATIVE]),
    ]
    return StudyResult(reports, poa, time.perf_counter() - t0)
