"""Box- and equality-constrained convex quadratic programming.

Solves

    minimize    0.5 * z' P z + q' z
    subject to  A_eq z = b_eq
                lb <= z <= ub

with P symmetric positive semidefinite.  The workhorse is an
operator-splitting (ADMM) iteration with over-relaxation and a vectorized
penalty that weights equality rows more aggressively than box rows.  Once
the iteration has localized the active set, an exact polish solve on the
reduced KKT system brings all residuals near machine precision.  Problems
with no finite bounds skip the iteration entirely and take a direct sparse
KKT factorization.

Determinism: identical inputs and settings produce bitwise-identical
results on one machine.  The only internal state is a per-thread
factorization memo keyed by matrix content, which never alters results.
"""

from __future__ import annotations

import hashlib
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DimensionMismatch

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"

# eigenvalue floor used when validating small dense P blocks
_PSD_FLOOR = -1e-9
# dense eigenvalue validation is cubic; larger problems rely on the
# transcription producing PSD costs by construction
_PSD_CHECK_MAX_N = 400

_EQ_RHO_BOOST = 1e3


def _as_1d(v, n: int, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=float).reshape(-1)
    if arr.shape != (n,):
        raise DimensionMismatch(f"{name}: expected length {n}, got {arr.shape}")
    return arr


def _norm_inf(v: np.ndarray) -> float:
    if v.size == 0:
        return 0.0
    return float(np.max(np.abs(v)))


@dataclass
class QpSettings:
    """Solver knobs.  Defaults certify KKT residuals at 1e-6 within a
    50,000 iteration budget."""

    tol: float = 1e-6
    max_iter: int = 50_000
    rho: float = 0.1
    sigma: float = 1e-6
    over_relax: float = 1.6
    check_every: int = 25
    polish_every: int = 200
    infeas_tol: float = 1e-7


@dataclass
class KktResiduals:
    """Infinity norms of the four first-order optimality residuals."""

    equality: float
    bounds: float
    stationarity: float
    complementarity: float

    def max(self) -> float:
        return max(self.equality, self.bounds, self.stationarity, self.complementarity)


@dataclass
class QpSolution:
    status: str
    z: np.ndarray
    y_eq: np.ndarray
    y_bound: np.ndarray
    objective: float
    residuals: KktResiduals
    iterations: int
    polished: bool = False
    # Farkas-style certificate direction when status == INFEASIBLE
    certificate: np.ndarray | None = None


class QuadProgram:
    """Problem container; validates shapes and convexity on construction.

    Parameters
    ----------
    P : (n, n) array or sparse matrix, symmetric PSD.
    q : (n,) array.
    A_eq : (m, n) array or sparse matrix, may have zero rows.
    b_eq : (m,) array.
    lb, ub : (n,) arrays; entries may be -inf/+inf.
    """

    def __init__(self, P, q, A_eq=None, b_eq=None, lb=None, ub=None):
        q = np.asarray(q, dtype=float).reshape(-1)
        n = q.shape[0]
        self.n = n
        self.q = q

        Pc = sp.csc_matrix(P, dtype=float) if not sp.issparse(P) else P.tocsc().astype(float)
        if Pc.shape != (n, n):
            raise DimensionMismatch(f"P: expected ({n}, {n}), got {Pc.shape}")
        asym = abs(Pc - Pc.T)
        scale = 1.0 + (abs(Pc).max() if Pc.nnz else 0.0)
        if asym.nnz and asym.max() > 1e-8 * scale:
            raise DimensionMismatch("P is not symmetric")
        if n and n <= _PSD_CHECK_MAX_N:
            w = np.linalg.eigvalsh(Pc.toarray())
            if w.min() < _PSD_FLOOR * scale:
                raise DimensionMismatch(f"P is not PSD (min eigenvalue {w.min():.3e})")
        self.P = Pc

        if A_eq is None:
            A_eq = sp.csc_matrix((0, n))
        Ac = sp.csc_matrix(A_eq, dtype=float) if not sp.issparse(A_eq) else A_eq.tocsc().astype(float)
        if Ac.shape[1] != n:
            raise DimensionMismatch(f"A_eq: expected {n} columns, got {Ac.shape[1]}")
        self.A_eq = Ac
        self.m_eq = Ac.shape[0]
        self.b_eq = _as_1d(b_eq if b_eq is not None else np.zeros(0), self.m_eq, "b_eq")

        self.lb = _as_1d(lb if lb is not None else np.full(n, -np.inf), n, "lb")
        self.ub = _as_1d(ub if ub is not None else np.full(n, np.inf), n, "ub")
        if np.any(self.lb > self.ub):
            bad = int(np.argmax(self.lb > self.ub))
            raise DimensionMismatch(f"lb > ub at coordinate {bad}")

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ (self.P @ z) + self.q @ z)

    def has_finite_bounds(self) -> bool:
        return bool(np.any(np.isfinite(self.lb)) or np.any(np.isfinite(self.ub)))

    @classmethod
    def _from_parts(cls, P, q, A_eq, b_eq, lb, ub) -> "QuadProgram":
        """Construct without re-validating the matrices (internal reuse)."""
        out = cls.__new__(cls)
        out.P, out.A_eq = P, A_eq
        out.q = np.asarray(q, dtype=float).reshape(-1)
        out.n = out.q.shape[0]
        out.m_eq = A_eq.shape[0]
        out.b_eq = np.asarray(b_eq, dtype=float).reshape(-1)
        out.lb = np.asarray(lb, dtype=float).reshape(-1)
        out.ub = np.asarray(ub, dtype=float).reshape(-1)
        return out

    def replaced(self, q=None, b_eq=None, lb=None, ub=None) -> "QuadProgram":
        """A copy with new vector data but the same validated matrices.

        Shapes are still enforced; the expensive matrix checks are not
        repeated because P and A_eq are shared.
        """
        out = QuadProgram._from_parts(
            self.P,
            self.q if q is None else _as_1d(q, self.n, "q"),
            self.A_eq,
            self.b_eq if b_eq is None else _as_1d(b_eq, self.m_eq, "b_eq"),
            self.lb if lb is None else _as_1d(lb, self.n, "lb"),
            self.ub if ub is None else _as_1d(ub, self.n, "ub"),
        )
        if np.any(out.lb > out.ub):
            bad = int(np.argmax(out.lb > out.ub))
            raise DimensionMismatch(f"lb > ub at coordinate {bad}")
        return out


def check_kkt(prob: QuadProgram, z: np.ndarray, y_eq: np.ndarray,
              y_bound: np.ndarray) -> KktResiduals:
    """Evaluate first-order optimality residuals at a candidate point.

    Sign convention: y_bound >= 0 presses against the upper bound,
    y_bound <= 0 against the lower bound.
    """
    z = np.asarray(z, dtype=float).reshape(-1)
    y_eq = np.asarray(y_eq, dtype=float).reshape(-1)
    y_bound = np.asarray(y_bound, dtype=float).reshape(-1)

    r_eq = _norm_inf(prob.A_eq @ z - prob.b_eq) if prob.m_eq else 0.0

    lo_viol = np.maximum(prob.lb - z, 0.0)
    hi_viol = np.maximum(z - prob.ub, 0.0)
    r_bnd = max(_norm_inf(lo_viol), _norm_inf(hi_viol))

    stat = prob.P @ z + prob.q
    if prob.m_eq:
        stat = stat + prob.A_eq.T @ y_eq
    stat = stat + y_bound
    r_stat = _norm_inf(stat)

    y_pos = np.maximum(y_bound, 0.0)
    y_neg = np.maximum(-y_bound, 0.0)
    hi_gap = np.where(np.isfinite(prob.ub), np.abs(prob.ub - z), 1.0)
    lo_gap = np.where(np.isfinite(prob.lb), np.abs(z - prob.lb), 1.0)
    r_comp = max(_norm_inf(y_pos * hi_gap), _norm_inf(y_neg * lo_gap))

    return KktResiduals(r_eq, r_bnd, r_stat, r_comp)


# --------------------------------------------------------------------------
# factorization memo (per thread; results never depend on hits or misses)

_tls = threading.local()
_FACTOR_CACHE_CAP = 32


def _factor_cache() -> OrderedDict:
    cache = getattr(_tls, "qp_factor_cache", None)
    if cache is None:
        cache = OrderedDict()
        _tls.qp_factor_cache = cache
    return cache


def _content_key(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, np.ndarray):
            h.update(p.tobytes())
        elif sp.issparse(p):
            c = p.tocsc()
            h.update(np.asarray(c.shape).tobytes())
            h.update(c.indptr.tobytes())
            h.update(c.indices.tobytes())
            h.update(c.data.tobytes())
        else:
            h.update(repr(p).encode())
    return h.hexdigest()


def _cached_splu(key_parts, build):
    cache = _factor_cache()
    key = _content_key(*key_parts)
    hit = cache.get(key)
    if hit is not None:
        cache.move_to_end(key)
        return hit
    lu = spla.splu(build().tocsc())
    cache[key] = lu
    if len(cache) > _FACTOR_CACHE_CAP:
        cache.popitem(last=False)
    return lu


# --------------------------------------------------------------------------


def _direct_kkt_solve(prob: QuadProgram, settings: QpSettings) -> QpSolution | None:
    """Equality-only fast path: one sparse KKT factorization plus a
    refinement pass.  Returns None when the system is singular."""
    n, m = prob.n, prob.m_eq
    if m:
        K = sp.bmat([[prob.P, prob.A_eq.T], [prob.A_eq, None]], format="csc")
    else:
        K = prob.P.tocsc()
    rhs = np.concatenate([-prob.q, prob.b_eq])
    try:
        lu = _cached_splu(("kkt_direct", prob.P, prob.A_eq), lambda: K)
        sol = lu.solve(rhs)
        sol = sol + lu.solve(rhs - K @ sol)
    except (RuntimeError, ValueError):
        return None
    if not np.all(np.isfinite(sol)):
        return None
    z, y_eq = sol[:n], sol[n:]
    res = check_kkt(prob, z, y_eq, np.zeros(n))
    status = OPTIMAL if res.max() <= settings.tol else MAX_ITER
    return QpSolution(status, z, y_eq, np.zeros(n), prob.objective(z), res, 1, polished=True)


def _polish(prob: QuadProgram, x: np.ndarray, y_bound: np.ndarray,
            r_prim: float, settings: QpSettings) -> QpSolution | None:
    """Fix the bounds that look active, solve the reduced equality KKT
    system exactly, and accept only if the full KKT check passes."""
    n, m = prob.n, prob.m_eq
    lb, ub = prob.lb, prob.ub

    prox = 10.0 * r_prim + 1e-9
    lo_fin = np.isfinite(lb)
    hi_fin = np.isfinite(ub)
    act_lo = lo_fin & ((y_bound < -1e-10) | (x - lb <= prox * (1.0 + np.abs(lb))))
    act_hi = hi_fin & ((y_bound > 1e-10) | (ub - x <= prox * (1.0 + np.abs(ub))))
    both = act_lo & act_hi
    if np.any(both):
        closer_lo = np.abs(x - lb) <= np.abs(ub - x)
        act_hi &= ~(both & closer_lo)
        act_lo &= ~(both & ~closer_lo)

    fixed = act_lo | act_hi
    free = ~fixed
    z = np.where(act_lo, lb, np.where(act_hi, ub, x))

    nf = int(np.sum(free))
    P = prob.P.tocsr()
    A = prob.A_eq.tocsr()
    try:
        if nf:
            Pff = P[free][:, free]
            Pfa = P[free][:, fixed]
            qf = prob.q[free] + (Pfa @ z[fixed] if np.any(fixed) else 0.0)
            if m:
                Af = A[:, free]
                rhs_eq = prob.b_eq - (A[:, fixed] @ z[fixed] if np.any(fixed) else 0.0)
                K = sp.bmat([[Pff, Af.T], [Af, None]], format="csc")
                rhs = np.concatenate([-qf, rhs_eq])
            else:
                K = Pff.tocsc()
                rhs = -qf
            lu = spla.splu(K)
            sol = lu.solve(rhs)
            sol = sol + lu.solve(rhs - K @ sol)
            if not np.all(np.isfinite(sol)):
                return None
            z[free] = sol[:nf]
            y_eq = sol[nf:] if m else np.zeros(0)
        else:
            if m:
                grad = prob.P @ z + prob.q
                y_eq, *_ = np.linalg.lstsq(A.T.toarray(), -grad, rcond=None)
            else:
                y_eq = np.zeros(0)
    except (RuntimeError, ValueError):
        return None

    grad = prob.P @ z + prob.q + (prob.A_eq.T @ y_eq if m else 0.0)
    mu = np.zeros(n)
    mu[fixed] = -grad[fixed]
    # multiplier sign must match the bound side it presses on
    sign_tol = settings.tol
    if np.any(act_hi & (mu < -sign_tol)) or np.any(act_lo & (mu > sign_tol)):
        return None

    res = check_kkt(prob, z, y_eq, mu)
    if res.max() > settings.tol:
        return None
    return QpSolution(OPTIMAL, z, y_eq, mu, prob.objective(z), res, 0, polished=True)


def _infeasibility_certificate(prob: QuadProgram, C: sp.csc_matrix, dy: np.ndarray,
                               l: np.ndarray, u: np.ndarray, tol: float) -> bool:
    ndy = _norm_inf(dy)
    if ndy <= 1e-14:
        return False
    dy = dy / ndy
    dyp = np.maximum(dy, 0.0)
    dym = np.minimum(dy, 0.0)
    u_inf = ~np.isfinite(u)
    l_inf = ~np.isfinite(l)
    if np.any(dyp[u_inf] > tol) or np.any(-dym[l_inf] > tol):
        return False
    if _norm_inf(C.T @ dy) > tol:
        return False
    support = float(np.sum(u[~u_inf] * dyp[~u_inf]) + np.sum(l[~l_inf] * dym[~l_inf]))
    return support <= -tol


def solve_qp(prob: QuadProgram, settings: QpSettings | None = None,
             init_z: np.ndarray | None = None,
             init_y: np.ndarray | None = None) -> QpSolution:
    """Solve the quadratic program.

    Parameters
    ----------
    prob : QuadProgram
    settings : QpSettings, optional
    init_z, init_y : optional primal / dual starting points.  A hint only;
        the solution does not depend on it beyond roundoff of the
        deterministic iteration it seeds.

    Returns
    -------
    QpSolution with status "optimal", "infeasible" or "max_iter";
    residuals are reported for whichever iterate is returned.
    """
    if settings is None:
        settings = QpSettings()
    n, m = prob.n, prob.m_eq

    if n == 0:
        res = KktResiduals(_norm_inf(-prob.b_eq) if m else 0.0, 0.0, 0.0, 0.0)
        status = OPTIMAL if res.max() <= settings.tol else INFEASIBLE
        return QpSolution(status, np.zeros(0), np.zeros(m), np.zeros(0), 0.0, res, 0)

    # structurally empty rows must have matching right-hand sides
    if m:
        row_nnz = np.diff(prob.A_eq.tocsr().indptr)
        dead = (row_nnz == 0) & (np.abs(prob.b_eq) > settings.tol)
        if np.any(dead):
            cert = np.zeros(m)
            cert[dead] = -np.sign(prob.b_eq[dead])
            res = KktResiduals(_norm_inf(prob.b_eq[dead]), 0.0, 0.0, 0.0)
            return QpSolution(INFEASIBLE, np.zeros(n), np.zeros(m), np.zeros(n),
                              0.0, res, 0, certificate=cert)
        if np.any(row_nnz == 0):
            # consistent 0 = 0 rows would make every KKT system singular;
            # solve without them and re-expand the multipliers
            live = row_nnz > 0
            sub = QuadProgram._from_parts(
                prob.P, prob.q, prob.A_eq.tocsr()[live].tocsc(),
                prob.b_eq[live], prob.lb, prob.ub)
            init_y_sub = None
            if init_y is not None:
                init_y = np.asarray(init_y, dtype=float)
                init_y_sub = np.concatenate([init_y[:m][live], init_y[m:]])
            out = solve_qp(sub, settings, init_z, init_y_sub)
            y_eq = np.zeros(m)
            y_eq[live] = out.y_eq
            res = check_kkt(prob, out.z, y_eq, out.y_bound)
            return QpSolution(out.status, out.z, y_eq, out.y_bound, out.objective,
                              res, out.iterations, out.polished, out.certificate)

    if not prob.has_finite_bounds():
        out = _direct_kkt_solve(prob, settings)
        if out is not None and out.status == OPTIMAL:
            return out

    # ADMM on  l <= C x <= u  with C = [A_eq; I]
    C = sp.vstack([prob.A_eq, sp.identity(n, format="csc")], format="csc")
    l = np.concatenate([prob.b_eq, prob.lb])
    u = np.concatenate([prob.b_eq, prob.ub])
    rho = np.full(m + n, settings.rho)
    rho[:m] *= _EQ_RHO_BOOST
    sigma = settings.sigma
    alpha = settings.over_relax

    def build_kkt():
        return sp.bmat(
            [[prob.P + sigma * sp.identity(n), C.T],
             [C, -sp.diags(1.0 / rho)]], format="csc")

    lu = _cached_splu(("admm", prob.P, prob.A_eq, settings.rho, sigma), build_kkt)

    x = np.zeros(n) if init_z is None else np.asarray(init_z, dtype=float).copy()
    z = np.clip(C @ x, l, u)
    y = np.zeros(m + n) if init_y is None else np.asarray(init_y, dtype=float).copy()

    y_prev_check = y.copy()
    infeas_hits = 0
    best: tuple[float, np.ndarray, np.ndarray] | None = None
    it = 0
    while it < settings.max_iter:
        it += 1
        rhs = np.concatenate([sigma * x - prob.q, z - y / rho])
        sol = lu.solve(rhs)
        x_t = sol[:n]
        nu = sol[n:]
        z_t = z + (nu - y) / rho
        x = alpha * x_t + (1.0 - alpha) * x
        z_relax = alpha * z_t + (1.0 - alpha) * z
        z_new = np.clip(z_relax + y / rho, l, u)
        y = y + rho * (z_relax - z_new)
        z = z_new

        if it % settings.check_every and it != settings.max_iter:
            continue
        if not np.all(np.isfinite(x)):
            res = KktResiduals(np.inf, np.inf, np.inf, np.inf)
            return QpSolution(MAX_ITER, x, y[:m], y[m:], np.nan, res, it)

        r_prim = _norm_inf(C @ x - z)
        r_dual = _norm_inf(prob.P @ x + prob.q + C.T @ y)
        if best is None or max(r_prim, r_dual) < best[0]:
            best = (max(r_prim, r_dual), x.copy(), y.copy())

        if r_prim <= settings.tol and r_dual <= settings.tol:
            # polish first: it tightens residuals to near machine precision
            out = _polish(prob, x, y[m:], r_prim, settings)
            if out is not None:
                out.iterations = it
                return out
            res = check_kkt(prob, x, y[:m], y[m:])
            if res.max() <= settings.tol:
                return QpSolution(OPTIMAL, x, y[:m], y[m:], prob.objective(x), res, it)

        if (it % settings.polish_every == 0) and max(r_prim, r_dual) < 1e-2:
            out = _polish(prob, x, y[m:], r_prim, settings)
            if out is not None:
                out.iterations = it
                return out

        dy = y - y_prev_check
        y_prev_check = y.copy()
        if _infeasibility_certificate(prob, C, dy, l, u, settings.infeas_tol):
            infeas_hits += 1
            if infeas_hits >= 2:
                res = check_kkt(prob, x, y[:m], y[m:])
                return QpSolution(INFEASIBLE, x, y[:m], y[m:], np.nan, res, it,
                                  certificate=dy / max(_norm_inf(dy), 1e-300))
        else:
            infeas_hits = 0

    # iteration budget exhausted: one last polish attempt, then report the
    # best iterate seen
    if best is not None:
        _, xb, yb = best
        out = _polish(prob, xb, yb[m:], _norm_inf(C @ xb - z), settings)
        if out is not None:
            out.iterations = it
            return out
        res = check_kkt(prob, xb, yb[:m], yb[m:])
        return QpSolution(MAX_ITER, xb, yb[:m], yb[m:], prob.objective(xb), res, it)
    res = check_kkt(prob, x, y[:m], y[m:])
    return QpSolution(MAX_ITER, x, y[:m], y[m:], prob.objective(x), res, it)
