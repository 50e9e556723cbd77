"""Problem bundle serialization, synthetic instance generation, and report
export.

File formats
------------
* Problem bundle: one JSON document with top-level keys ``network``,
  ``design``, ``costs``, ``scenario`` and an optional ``config``.  Matrices
  are row-major nested lists.  The demand and price series may be inlined
  or referenced as T-row CSV files by a path relative to the JSON file.
* Series CSV: header row, ``k`` first, one row per step, LF endings.
* Reports: one directory per solved class with profile, cost and
  trajectory CSVs plus a human-readable summary.

Floats are serialized with shortest round-trip representation, so
re-exporting unchanged data is byte-identical.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import GameConfig
from .errors import InfeasibleSpec, ParseError, ValidationFailed
from .followers import probe_extreme_profiles
from .model import CostParams, DesignSpace, NetworkModel, Scenario, \
    state_upper_bound, validate_model
from .stackelberg import EquilibriumReport, PoAReport, StudyResult

log = logging.getLogger("stackgame")


@dataclass(eq=False)
class ProblemBundle:
    model: NetworkModel
    design: DesignSpace
    costs: CostParams
    scenario: Scenario
    config: dict = field(default_factory=dict)

    def parts(self):
        return self.model, self.design, self.costs, self.scenario

    def game_config(self, **overrides) -> GameConfig:
        """GameConfig from the bundle's config section; explicit overrides
        win (file < caller precedence)."""
        known = {k: v for k, v in self.config.items()
                 if k in GameConfig.__dataclass_fields__ and k != "qp"}
        known.update({k: v for k, v in overrides.items() if v is not None})
        return GameConfig(**known)


# ---------------------------------------------------------------------------
# CSV series


def write_series_csv(path, series: np.ndarray, prefix: str) -> None:
    """T-row series file: header k,<prefix>0,... then one row per step."""
    series = np.asarray(series, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k"] + [f"{prefix}{i}" for i in range(series.shape[1])])
        for k in range(series.shape[0]):
            w.writerow([k] + [repr(float(v)) for v in series[k]])


def read_series_csv(path, T: int, width: int) -> np.ndarray:
    """Read a series file, enforcing the k column and exact shape."""
    path = Path(path)
    out = np.zeros((T, width))
    try:
        fh = open(path, newline="")
    except OSError as e:
        raise ParseError(f"{path.name}: cannot open series file: {e}") from e
    with fh:
        rd = csv.reader(fh)
        try:
            header = next(rd)
        except StopIteration:
            raise ParseError(f"{path.name}: empty series file") from None
        if not header or header[0] != "k":
            raise ParseError(f"{path.name}: first header column must be 'k'")
        if len(header) != width + 1:
            raise ParseError(f"{path.name}: expected {width + 1} columns "
                             f"(k plus {width} series), got {len(header)}")
        k = 0
        for row in rd:
            if not row:
                continue
            if k >= T:
                raise ParseError(f"{path.name}: more than {T} data rows")
            if len(row) != width + 1:
                raise ParseError(f"{path.name}: row for k={k}: expected "
                                 f"{width + 1} fields, got {len(row)}")
            try:
                if int(row[0]) != k:
                    raise ValueError
            except ValueError:
                raise ParseError(f"{path.name}: row {k}: first field must "
                                 f"be k={k}, got {row[0]!r}") from None
            try:
                out[k] = [float(v) for v in row[1:]]
            except ValueError as e:
                raise ParseError(f"{path.name}: row k={k}: {e}") from None
            k += 1
        if k != T:
            raise ParseError(f"{path.name}: missing row for k={k} "
                             f"(expected {T} rows, found {k})")
    return out


# ---------------------------------------------------------------------------
# problem bundle JSON


def _need(doc: dict, key: str, where: str):
    if key not in doc:
        raise ParseError(f"{where}.{key}: missing")
    return doc[key]


def _matrix(doc, key, where) -> np.ndarray:
    val = _need(doc, key, where)
    try:
        return np.array(val, dtype=float)
    except (TypeError, ValueError) as e:
        raise ParseError(f"{where}.{key}: not a numeric array: {e}") from None


def _follower_map(doc, key, where, ids) -> dict[str, np.ndarray]:
    val = _need(doc, key, where)
    if not isinstance(val, dict):
        raise ParseError(f"{where}.{key}: expected an object keyed by follower id")
    out = {}
    for f in ids:
        if f not in val:
            raise ParseError(f"{where}.{key}.{f}: missing")
        out[f] = np.array(val[f], dtype=float)
    return out


def _series(value, base: Path, T: int, width: int, where: str) -> np.ndarray:
    """A series entry is either an inline (T, width) array or a relative
    CSV path."""
    if isinstance(value, str):
        return read_series_csv(base / value, T, width)
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError) as e:
        raise ParseError(f"{where}: not a numeric array: {e}") from None
    if arr.size == 0:
        arr = np.zeros((0, width))
    if arr.shape != (T, width):
        raise ParseError(f"{where}: expected shape ({T}, {width}), "
                         f"got {arr.shape}")
    return arr


def load_problem(path) -> ProblemBundle:
    """Parse and validate a problem bundle.

    Raises ParseError with file/field provenance on malformed input and
    ValidationFailed when the parsed bundle violates structural rules.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ParseError(f"{path}: cannot read: {e}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path.name}: line {e.lineno} column {e.colno}: "
                         f"{e.msg}") from None

    net = _need(doc, "network", path.name)
    ids = list(_need(net, "followers", "network"))
    model = NetworkModel(
        follower_ids=ids,
        A=_matrix(net, "A", "network"),
        B_blocks=_follower_map(net, "B", "network", ids),
        B_demand=_matrix(net, "B_demand", "network"),
        E_blocks=_follower_map(net, "E", "network", ids),
        E_demand=_matrix(net, "E_demand", "network"),
        x_min=_matrix(net, "x_min", "network"),
        x_cap_base=_matrix(net, "x_cap", "network"),
        u_min_blocks=_follower_map(net, "u_min", "network", ids),
        u_max_blocks=_follower_map(net, "u_max", "network", ids),
        units=dict(net.get("units", {})),
    )

    des = _need(doc, "design", path.name)
    lids = list(_need(des, "leaders", "design"))
    acts = _need(des, "action_sets", "design")
    sol = _need(des, "state_of_leader", "design")
    for lid in lids:
        if lid not in acts:
            raise ParseError(f"design.action_sets.{lid}: missing")
        if lid not in sol:
            raise ParseError(f"design.state_of_leader.{lid}: missing")
    design = DesignSpace(lids, {l: tuple(acts[l]) for l in lids},
                         {l: int(sol[l]) for l in lids})

    scen = _need(doc, "scenario", path.name)
    T = int(_need(scen, "T", "scenario"))
    d = _series(scen.get("demand", np.zeros((T, model.n_d)).tolist()),
                path.parent, T, model.n_d, "scenario.demand")
    u_prev = {}
    up_doc = scen.get("u_prev", {})
    for f in ids:
        u_prev[f] = np.array(up_doc.get(f, np.zeros(model.n_u(f))), dtype=float)
    scenario = Scenario(T=T, dt=float(scen.get("dt", 1.0)),
                        x0=_matrix(scen, "x0", "scenario"), d=d, u_prev=u_prev)

    cst = _need(doc, "costs", path.name)
    alpha_doc = _need(cst, "alpha", "costs")
    alpha = {}
    for f in ids:
        if f not in alpha_doc:
            raise ParseError(f"costs.alpha.{f}: missing")
        alpha[f] = _series(alpha_doc[f], path.parent, T, model.n_u(f),
                           f"costs.alpha.{f}")
    L = len(lids)
    Q_doc = cst.get("Q_leader")
    v_doc = cst.get("v_leader")

    def per_leader(docval, shape, name, default):
        if docval is None:
            return {l: default.copy() for l in lids}
        if isinstance(docval, dict):
            out = {}
            for l in lids:
                if l not in docval:
                    raise ParseError(f"costs.{name}.{l}: missing")
                out[l] = np.array(docval[l], dtype=float)
            return out
        shared = np.array(docval, dtype=float)
        return {l: shared.copy() for l in lids}

    costs = CostParams(
        R_blocks=_follower_map(cst, "R", "costs", ids),
        alpha=alpha,
        Q_leader=per_leader(Q_doc, (L, L), "Q_leader", np.zeros((L, L))),
        v_leader=per_leader(v_doc, (L,), "v_leader", np.full(L, 0.01)),
    )

    bundle = ProblemBundle(model, design, costs, scenario,
                           dict(doc.get("config", {})))
    rep = validate_model(model, design, costs, scenario)
    if not rep.ok:
        raise ValidationFailed(rep.violations)
    return bundle


def _listify(arr) -> list:
    return np.asarray(arr, dtype=float).tolist()


def save_problem(path, bundle: ProblemBundle, series: str = "inline") -> list[Path]:
    """Write a bundle back to disk.  series="csv" stores the demand and
    price series as sibling CSV files; "inline" embeds everything.
    Returns the list of files written."""
    path = Path(path)
    m, des, cst, scen = bundle.parts()
    written = [path]

    if series == "csv":
        demand_ref = f"{path.stem}_demand.csv"
        write_series_csv(path.parent / demand_ref, scen.d, "d")
        written.append(path.parent / demand_ref)
        alpha_refs = {}
        for f in m.follower_ids:
            ref = f"{path.stem}_alpha_{f}.csv"
            write_series_csv(path.parent / ref, cst.alpha[f], "u")
            written.append(path.parent / ref)
            alpha_refs[f] = ref
        demand_val = demand_ref
        alpha_val = alpha_refs
    elif series == "inline":
        demand_val = _listify(scen.d)
        alpha_val = {f: _listify(cst.alpha[f]) for f in m.follower_ids}
    else:
        raise ValueError(f"series must be 'inline' or 'csv', got {series!r}")

    doc = {
        "network": {
            "followers": m.follower_ids,
            "A": _listify(m.A),
            "B": {f: _listify(m.B_blocks[f]) for f in m.follower_ids},
            "B_demand": _listify(m.B_demand),
            "E": {f: _listify(m.E_blocks[f]) for f in m.follower_ids},
            "E_demand": _listify(m.E_demand),
            "x_min": _listify(m.x_min),
            "x_cap": _listify(m.x_cap_base),
            "u_min": {f: _listify(m.u_min_blocks[f]) for f in m.follower_ids},
            "u_max": {f: _listify(m.u_max_blocks[f]) for f in m.follower_ids},
            "units": m.units,
        },
        "design": {
            "leaders": des.leader_ids,
            "action_sets": {l: list(des.action_sets[l]) for l in des.leader_ids},
            "state_of_leader": {l: des.state_of_leader[l] for l in des.leader_ids},
        },
        "costs": {
            "R": {f: _listify(cst.R_blocks[f]) for f in m.follower_ids},
            "alpha": alpha_val,
            "Q_leader": {l: _listify(cst.Q_leader[l]) for l in des.leader_ids},
            "v_leader": {l: _listify(cst.v_leader[l]) for l in des.leader_ids},
        },
        "scenario": {
            "T": scen.T,
            "dt": scen.dt,
            "x0": _listify(scen.x0),
            "demand": demand_val,
            "u_prev": {f: _listify(scen.u_prev[f]) for f in m.follower_ids},
        },
    }
    if bundle.config:
        doc["config"] = bundle.config
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return written


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SyntheticSpec:
    """Knobs for the storage-network generator.

    The layout mirrors a multi-operator water system: every tank has a
    supply pump, a delivery valve to its own demand node, and an expensive
    direct bypass; a share of each demand drains its tank directly.
    Cross-operator links let one follower draw from another's tank, which
    is the only coupling between followers (link_density 0 decouples them).
    """

    n_tanks: int = 3
    n_followers: int = 2
    n_leaders: int = 2
    T: int = 24
    dt: float = 1.0
    seed: int = 0
    link_density: float = 0.4
    actions: tuple[float, ...] = (0.5, 0.75, 1.0, 1.25, 1.5)
    demand_base: tuple[float, float] = (2.0, 4.0)
    demand_swing: float = 0.5
    direct_share: float = 0.4        # fraction of demand drawn from the tank
    price_base: float = 1.0
    price_swing: float = 0.5
    smoothing: float = 0.02
    design_cost: float = 0.01
    period: int = 24
    max_retries: int = 5
    probe: bool = True


def _synth_once(spec: SyntheticSpec, rng: np.random.Generator) -> ProblemBundle:
    nt, T = spec.n_tanks, spec.T
    ids = [f"f{i + 1}" for i in range(spec.n_followers)]
    lids = [f"L{j + 1}" for j in range(spec.n_leaders)]
    beta = 1.0 - spec.direct_share

    # contiguous tank partition; leaders design the first tanks
    sizes = [nt // spec.n_followers + (1 if i < nt % spec.n_followers else 0)
             for i in range(spec.n_followers)]
    owner = []
    for i, s in enumerate(sizes):
        owner += [i] * s

    cap = rng.uniform(80.0, 120.0, nt)
    x_min = 0.05 * cap
    base = rng.uniform(*spec.demand_base, nt)
    phase = rng.uniform(0.0, spec.period, nt)
    k = np.arange(T)
    d = np.stack([base[t] * (1.0 + spec.demand_swing *
                             np.sin(2 * np.pi * (k + phase[t]) / spec.period))
                  for t in range(nt)], axis=1) if T else np.zeros((0, nt))

    # cross-links: foreign tank -> own node, owned by the demanding follower
    candidates = [(s, t) for s in range(nt) for t in range(nt)
                  if owner[s] != owner[t]]
    n_links = min(len(candidates), int(round(spec.link_density * nt)))
    links = []
    if n_links:
        pick = rng.choice(len(candidates), size=n_links, replace=False)
        links = sorted(candidates[int(i)] for i in pick)
    link_max = 0.3 * beta * float(np.min(base))

    peak = base * (1.0 + spec.demand_swing)
    out_links = np.array([sum(1 for s, _ in links if s == t) for t in range(nt)])
    pump_max = 1.3 * (peak + out_links * link_max)
    valve_max = 1.2 * beta * peak
    by_max = 0.6 * beta * base

    # per follower: own tanks get (pump, valve, bypass); then own links
    B, E, u_lo, u_hi, alpha = {}, {}, {}, {}, {}
    price_valve = 0.05 * spec.price_base
    price_bypass = 2.5 * spec.price_base
    price_link = 0.02 * spec.price_base
    for i, f in enumerate(ids):
        own = [t for t in range(nt) if owner[t] == i]
        own_links = [lk for lk in links if owner[lk[1]] == i]
        n_ui = 3 * len(own) + len(own_links)
        Bf = np.zeros((nt, n_ui))
        Ef = np.zeros((nt, n_ui))
        lo = np.zeros(n_ui)
        hi = np.zeros(n_ui)
        al = np.zeros((T, n_ui))
        col = 0
        jitter = 1.0 + 0.05 * rng.standard_normal()
        for t in own:
            # pump: source -> tank t
            Bf[t, col] = spec.dt
            hi[col] = pump_max[t]
            al[:, col] = jitter * spec.price_base * (
                1.0 - spec.price_swing *
                np.sin(2 * np.pi * (k + phase[t]) / spec.period))
            col += 1
            # valve: tank t -> node t
            Bf[t, col] = -spec.dt
            Ef[t, col] = 1.0
            hi[col] = valve_max[t]
            al[:, col] = price_valve
            col += 1
            # bypass: source -> node t
            Ef[t, col] = 1.0
            hi[col] = by_max[t]
            al[:, col] = price_bypass
            col += 1
        for (s, t) in own_links:
            # link: foreign tank s -> own node t
            Bf[s, col] = -spec.dt
            Ef[t, col] = 1.0
            hi[col] = link_max
            al[:, col] = price_link
            col += 1
        B[f], E[f], u_lo[f], u_hi[f] = Bf, Ef, lo, hi
        alpha[f] = al

    amin = min(spec.actions)
    designed = set(range(spec.n_leaders))
    x0 = np.array([x_min[t] + 0.35 * ((amin if t in designed else 1.0)
                                      * cap[t] - x_min[t])
                   for t in range(nt)])

    model = NetworkModel(
        follower_ids=ids, A=np.eye(nt), B_blocks=B,
        B_demand=-spec.direct_share * spec.dt * np.eye(nt),
        E_blocks=E, E_demand=-beta * np.eye(nt),
        x_min=x_min, x_cap_base=cap, u_min_blocks=u_lo, u_max_blocks=u_hi,
        units={"state": "m3", "flow": "m3/h", "price": "eur/m3"},
    )
    design = DesignSpace(lids, {l: tuple(spec.actions) for l in lids},
                         {l: j for j, l in enumerate(lids)})
    costs = CostParams.with_shared_leader_terms(
        {f: spec.smoothing * np.eye(model.n_u(f)) for f in ids}, alpha, lids,
        v=np.full(len(lids), spec.design_cost))
    scenario = Scenario(T=T, dt=spec.dt, x0=x0, d=d,
                        u_prev={f: np.zeros(model.n_u(f)) for f in ids})
    return ProblemBundle(model, design, costs, scenario)


def generate_synthetic(spec: SyntheticSpec | None = None, **kw) -> ProblemBundle:
    """Generate a feasible synthetic instance.

    Every accepted instance passes structural validation and, unless
    spec.probe is off, a cooperative feasibility solve at the extreme
    profiles.  Because the state boxes only grow with the actions, passing
    at the smallest profile implies feasibility on the whole lattice.
    Retries with fresh randomness up to max_retries, then raises
    InfeasibleSpec.
    """
    if spec is None:
        spec = SyntheticSpec(**kw)
    elif kw:
        raise ValueError("pass either a SyntheticSpec or keyword fields")
    if spec.n_leaders > spec.n_tanks:
        raise InfeasibleSpec("need at least one tank per leader")
    if spec.n_followers > spec.n_tanks:
        raise InfeasibleSpec("need at least one tank per follower")
    rng = np.random.default_rng(spec.seed)
    last = ""
    for attempt in range(max(spec.max_retries, 1)):
        bundle = _synth_once(spec, rng)
        rep = validate_model(*bundle.parts())
        if not rep.ok:
            last = str(rep)
            log.warning("generated instance invalid (attempt %d): %s",
                        attempt + 1, last)
            continue
        if spec.probe:
            problems = probe_extreme_profiles(*bundle.parts())
            if problems:
                last = "; ".join(problems)
                log.warning("generated instance failed the probe "
                            "(attempt %d): %s", attempt + 1, last)
                continue
        return bundle
    raise InfeasibleSpec(
        f"no feasible instance within {spec.max_retries} attempts: {last}")


# ---------------------------------------------------------------------------
# report export


def _fmt(v: float) -> str:
    return repr(float(v))


def _write_csv(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row)
    return path


def export_report(report: EquilibriumReport, model: NetworkModel,
                  design: DesignSpace, out_dir) -> list[Path]:
    """Write one class report: costs, trajectories, per-designed-state cap
    series, and a summary.  Returns the manifest of written files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    written.append(_write_csv(
        out / "profile.csv", ["leader", "action"],
        [[lid, _fmt(v)] for lid, v in zip(design.leader_ids, report.profile)]))
    written.append(_write_csv(
        out / "leader_costs.csv", ["leader", "J"],
        [[lid, _fmt(report.leader_J[lid])] for lid in design.leader_ids]))
    written.append(_write_csv(
        out / "follower_costs.csv", ["follower", "V"],
        [[f, _fmt(report.follower_V[f])] for f in model.follower_ids]))

    ts = report.trajectories
    T = ts.u[model.follower_ids[0]].shape[0] if ts is not None and \
        model.follower_ids else 0
    for f in model.follower_ids:
        rows = []
        if ts is not None and T:
            u_f = ts.u[f]
            rows = [[k, i, _fmt(u_f[k, i])]
                    for k in range(T) for i in range(u_f.shape[1])]
        written.append(_write_csv(out / f"inputs_{f}.csv",
                                  ["k", "input", "value"], rows))
    state_rows = []
    if ts is not None and T:
        state_rows = [[k, s, _fmt(ts.x[k, s])]
                      for k in range(T + 1) for s in range(model.n_x)]
    written.append(_write_csv(out / "states.csv", ["k", "state", "value"],
                              state_rows))

    if ts is not None and T:
        cap = state_upper_bound(model, design, report.profile)
        for lid in design.leader_ids:
            s = design.state_of_leader[lid]
            rows = [[k, _fmt(ts.x[k, s]), _fmt(cap[s])] for k in range(T + 1)]
            written.append(_write_csv(out / f"cap_state_{s}.csv",
                                      ["k", "volume", "cap"], rows))

    lines = [
        f"class {report.game_class}: leaders {report.leader_behavior}, "
        f"followers {report.follower_behavior}",
        f"feasible: {str(report.feasible).lower()}",
        "profile: " + ", ".join(
            f"{lid}={_fmt(v)}" for lid, v in
            zip(design.leader_ids, report.profile)),
        "leader costs: " + ", ".join(
            f"{lid}={_fmt(report.leader_J[lid])}" for lid in design.leader_ids),
        f"total leader cost: {_fmt(report.total_J)}",
        "follower costs: " + ", ".join(
            f"{f}={_fmt(report.follower_V[f])}" for f in model.follower_ids),
        f"total follower cost: {_fmt(report.total_V)}",
        f"follower certificate: converged={str(report.follower_cert.converged).lower()} "
        f"max_gain={_fmt(report.follower_cert.max_gain)} "
        f"sweeps={report.follower_cert.sweeps} "
        f"eps={_fmt(report.follower_cert.epsilon)}"
        + (f" ({report.follower_cert.note})" if report.follower_cert.note else ""),
        f"leader certificate: converged={str(report.leader_cert.converged).lower()} "
        f"max_gain={_fmt(report.leader_cert.max_gain)} "
        f"rounds={report.leader_cert.rounds} "
        f"eps={_fmt(report.leader_cert.epsilon)}"
        + (f" ({report.leader_cert.note})" if report.leader_cert.note else ""),
    ]
    summary = out / "summary.txt"
    summary.write_text("\n".join(lines) + "\n")
    written.append(summary)
    return written


def export_poa(poa: list[PoAReport], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for r in poa:
        rows.append([r.layer, r.label, _fmt(r.numerator), _fmt(r.denominator),
                     _fmt(r.poa),
                     ";".join(_fmt(v) for v in (r.numerator_profile or ())),
                     ";".join(_fmt(v) for v in (r.denominator_profile or ())),
                     r.note])
    return _write_csv(out / "poa.csv",
                      ["layer", "label", "numerator", "denominator", "poa",
                       "numerator_profile", "denominator_profile", "note"],
                      rows)


def export_study(study: StudyResult, model: NetworkModel, design: DesignSpace,
                 out_dir) -> list[Path]:
    """Write the four class directories plus the shared poa table and a
    study summary.  Returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for tag, rep in sorted(study.reports.items()):
        written += export_report(rep, model, design, out / f"class_{tag}")
    written.append(export_poa(study.poa, out))

    lines = ["study summary", "============="]
    for tag in sorted(study.reports):
        rep = study.reports[tag]
        lines.append(
            f"class {tag}: profile ("
            + ", ".join(_fmt(v) for v in rep.profile)
            + f"), total J {_fmt(rep.total_J)}, total V {_fmt(rep.total_V)}")
    for r in study.poa:
        lines.append(f"poa {r.layer} ({r.label}): {_fmt(r.poa)}")
    summary = out / "study_summary.txt"
    summary.write_text("\n".join(lines) + "\n")
    written.append(summary)
    return written
