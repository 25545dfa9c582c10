"""Numerical checks of the spectral facts behind the welded-trees reduction.

Each check returns a :class:`CheckReport` listing every inequality it
evaluated together with its slack (right side minus left side for ``a <= b``).
A report passes when every slack is at least ``-tolerance``.

Two normalizations appear.  The matrix side uses ``Delta = sqrt(lam^2 - 8)``
with roots ``(lam -/+ Delta)/4``.  The gap equation for eigenvalues uses
``Dp = sqrt((lam/2)^2 - 2) = Delta/2``; it is kept separate as ``delta_half``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import mpmath
import numpy as np
import scipy.linalg as sla
from scipy.optimize import brentq

from .welded_trees import (HardMatrixParams, LayeredSolution, WeldedTreesInstance,
                           level_sizes, make_params)

SQRT8 = math.sqrt(8)
DEFAULT_TOL = {"double": 1e-12, "extended": 1e-15}
EXTENDED_DPS = 40


@dataclass
class CheckReport:
    check: str
    n: int | None
    seed: int | None = None
    tolerance: float = 1e-12
    slacks: dict[str, float] = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def le(self, name: str, lhs, rhs) -> None:
        """Record ``lhs <= rhs``; keeps the worst slack seen under ``name``."""
        s = rhs - lhs
        s = float(np.min(s)) if isinstance(s, np.ndarray) else float(s)
        if name not in self.slacks or s < self.slacks[name]:
            self.slacks[name] = s

    def sandwich(self, name: str, lo, mid, hi) -> None:
        self.le(name + ".lower", lo, mid)
        self.le(name + ".upper", mid, hi)

    @property
    def worst_slack(self) -> float:
        return min(self.slacks.values()) if self.slacks else math.inf

    @property
    def worst(self) -> str | None:
        return min(self.slacks, key=self.slacks.get) if self.slacks else None

    @property
    def passed(self) -> bool:
        return self.worst_slack >= -self.tolerance

    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.slacks.items() if v < -self.tolerance}

    def to_json(self) -> dict:
        return {"check": self.check, "n": self.n, "seed": self.seed, "pass": self.passed,
                "worst_slack": self.worst_slack, "tolerance": self.tolerance}


# --- eigenvalue gap ---------------------------------------------------------

@dataclass
class EigenReport:
    n: int
    eigenvalues: np.ndarray
    lambda1: float
    gap_violations: list[float]
    tol: float

    @property
    def lambda1_bound(self) -> float:
        return 3 - 2 / len(self.eigenvalues)

    @property
    def passed(self) -> bool:
        ev = self.eigenvalues
        in_range = ev.max() <= 3 + 1e-9 and ev.min() >= -3 - 1e-9
        return not self.gap_violations and self.lambda1 >= self.lambda1_bound and in_range

    def to_json(self, seed=None) -> dict:
        slack = min(self.lambda1 - self.lambda1_bound,
                    *(SQRT8 + self.tol - v for v in self.gap_violations)) \
            if self.gap_violations else self.lambda1 - self.lambda1_bound
        return {"check": "eigen-gap", "n": self.n, "seed": seed, "pass": self.passed,
                "worst_slack": float(slack), "tolerance": self.tol}


def eigen_gap_check(instance: WeldedTreesInstance, params: HardMatrixParams | None = None,
                    tol: float = 1e-9) -> EigenReport:
    """Dense spectrum of the adjacency matrix and the forbidden window
    ``(sqrt 8 + tol, 3 - 2^-n]``."""
    n = instance.n
    if n > 9:
        raise ValueError("dense eigensolves are capped at n = 9")
    a = instance.adjacency_matrix().toarray()
    ev = np.sort(sla.eigh(a, eigvals_only=True, driver="evr"))[::-1]
    hi = 3 - 2.0 ** -n
    bad = [float(v) for v in ev if SQRT8 + tol < v <= hi]
    return EigenReport(n, ev, float(ev[0]), bad, tol)


def layer_project(v, instance: WeldedTreesInstance) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    lvl = instance.level - 1
    # Correctly rounded sums over power-of-two level sizes make the projection
    # exactly idempotent: k copies of m sum to k*m with no rounding.
    order = np.argsort(lvl, kind="stable")
    bounds = np.cumsum(level_sizes(instance.n))[:-1]
    sums = np.array([math.fsum(chunk) for chunk in np.split(v[order], bounds)])
    means = sums / level_sizes(instance.n)
    return means[lvl]


def top_layered_eigenvector(instance: WeldedTreesInstance):
    a = instance.adjacency_matrix().toarray()
    w, vecs = sla.eigh(a)
    return float(w[-1]), vecs[:, -1]


# --- recurrences ------------------------------------------------------------

@dataclass
class RecurrenceSolution:
    """Closed form ``alpha r_plus^i + beta r_minus^i`` with
    ``r_plus, r_minus = (-b +/- sqrt(b^2 - 4ac)) / (2a)``.

    When the roots are close, ``alpha`` and ``beta`` are large and of opposite
    sign, so evaluation in doubles loses digits.  The coefficients are kept in
    mpmath as well and :meth:`__call__` evaluates there before rounding.
    """

    a: float
    b: float
    c: float
    r_plus: float
    r_minus: float
    alpha: float
    beta: float
    _exact: tuple = field(default=(), repr=False, compare=False)

    def __call__(self, i):
        if not self._exact:
            return self.alpha * self.r_plus**i + self.beta * self.r_minus**i
        rp, rm, al, be, ctx = self._exact
        with ctx.workdps(ctx.dps):
            return float(al * rp**i + be * rm**i)

    def iterate(self, phi1: float, phi2: float, steps: int) -> np.ndarray:
        out = [phi1, phi2]
        for _ in range(steps):
            out.append(-(self.b * out[-1] + self.c * out[-2]) / self.a)
        return np.array(out)


def recurrence_closed_form(a: float, b: float, c: float, phi1: float, phi2: float,
                           dps: int = 40) -> RecurrenceSolution:
    """Solve ``a phi_{i+2} + b phi_{i+1} + c phi_i = 0`` from ``phi_1, phi_2``."""
    if a == 0:
        raise ValueError("leading coefficient must be non-zero")
    if b * b <= 4 * a * c:
        raise ValueError("b^2 must exceed 4ac (complex roots are out of scope)")
    if c == 0:
        raise ValueError("c = 0 gives a zero root; the two seeds cannot be fitted")
    ctx = mpmath.mp.clone()
    ctx.dps = dps
    A, B, C = ctx.mpf(a), ctx.mpf(b), ctx.mpf(c)
    sq = ctx.sqrt(B * B - 4 * A * C)
    rp, rm = (-B + sq) / (2 * A), (-B - sq) / (2 * A)
    # alpha rp + beta rm = phi1 ; alpha rp^2 + beta rm^2 = phi2
    det = rp * rm * (rm - rp)
    al = (ctx.mpf(phi1) * rm**2 - ctx.mpf(phi2) * rm) / det
    be = (ctx.mpf(phi2) * rp - ctx.mpf(phi1) * rp**2) / det
    return RecurrenceSolution(a, b, c, float(rp), float(rm), float(al), float(be),
                              (rp, rm, al, be, ctx))


# --- Claims on the layered solution ----------------------------------------

class _Backend:
    """Tiny arithmetic shim so the claim checks run in double or mpmath."""

    def __init__(self, precision: str):
        if precision not in DEFAULT_TOL:
            raise ValueError(f"precision must be one of {sorted(DEFAULT_TOL)}")
        self.precision = precision
        self.mp = mpmath.mp.clone() if precision == "extended" else None
        if self.mp is not None:
            self.mp.dps = EXTENDED_DPS

    def num(self, x):
        return self.mp.mpf(x) if self.mp is not None else float(x)

    def sqrt(self, x):
        return self.mp.sqrt(x) if self.mp is not None else math.sqrt(x)

    def log1p(self, x):
        return self.mp.log1p(x) if self.mp is not None else math.log1p(x)

    def expm1(self, x):
        return self.mp.expm1(x) if self.mp is not None else math.expm1(x)

    def params(self, n: int, gamma=None):
        # The canonical gamma is formed in the working precision, not rounded first.
        gamma = 1 / self.num(16 * (n + 2)) ** 2 if gamma is None else self.num(gamma)
        lam = self.sqrt(self.num(8)) + gamma
        delta = self.sqrt(gamma * (2 * self.sqrt(self.num(8)) + gamma))
        return gamma, lam, delta

    def ratio_pow_minus_one(self, lam, delta, i):
        """``((lam+Delta)/(lam-Delta))^i - 1`` without cancellation."""
        return self.expm1(i * self.log1p(2 * delta / (lam - delta)))

    def inv_ratio_pow_minus_one(self, lam, delta, i):
        """``((lam-Delta)/(lam+Delta))^i - 1``."""
        return self.expm1(i * self.log1p(-2 * delta / (lam + delta)))


def _check_claim_preconditions(n: int, gamma: float, report: CheckReport):
    report.le("pre.gamma<=1/64", gamma, 1 / 64)
    # n+2 <= gamma^{-1/2}/16; equality for the canonical gamma, so allow rounding.
    report.details["precondition_slack"] = 1 / (16 * math.sqrt(gamma)) - (n + 2)
    if gamma <= 0 or gamma > 1 / 64 or report.details["precondition_slack"] < -1e-9 * (n + 2):
        raise ValueError(f"claim preconditions violated for n={n}, gamma={gamma}")


def claim_approx_check(n: int, gamma: float | None = None, precision: str = "double",
                       tol: float | None = None) -> CheckReport:
    """The four approximation items on ``(lam +/- Delta)`` powers, for every
    ``i <= n+2``, plus ``sqrt(gamma) <= Delta <= 4 sqrt(gamma)``."""
    bk = _Backend(precision)
    rep = CheckReport("claim-approx", n, tolerance=DEFAULT_TOL[precision] if tol is None else tol)
    _check_claim_preconditions(n, make_params(n).gamma if gamma is None else gamma, rep)
    g, lam, d = bk.params(n, gamma)
    rep.sandwich("delta", bk.sqrt(g), d, 4 * bk.sqrt(g))
    # item 1: 0 < 2D/(l+D) < 2D/(l-D) < 1/(2(n+2))
    a1, a2 = 2 * d / (lam + d), 2 * d / (lam - d)
    rep.le("item1.positive", 0, a1)
    rep.le("item1.order", a1, a2)
    rep.le("item1.upper", a2, 1 / bk.num(2 * (n + 2)))
    for i in range(1, n + 3):
        up = bk.ratio_pow_minus_one(lam, d, i)        # ((l+D)/(l-D))^i - 1
        rep.sandwich("item2", i * d / (lam - d), up, 4 * i * d / (lam - d))
        down = bk.inv_ratio_pow_minus_one(lam, d, i)  # ((l-D)/(l+D))^i - 1
        rep.sandwich("item3", -4 * i * d / (lam + d), down, -i * d / (lam + d))
    q = bk.ratio_pow_minus_one(lam, d, n + 2) / bk.ratio_pow_minus_one(lam, d, n + 1)
    rep.sandwich("item4", 1 + 1 / bk.num(2 * (n + 1)), q, 1 + 4 / bk.num(n + 1))
    rep.details["gamma"] = float(g)
    return rep


def alpha_extended(n: int, gamma=None, dps: int = EXTENDED_DPS):
    """``alpha`` and ``alpha'`` from the level-matching system in mpmath."""
    ctx = mpmath.mp.clone()
    ctx.dps = dps
    g = 1 / ctx.mpf(16 * (n + 2)) ** 2 if gamma is None else ctx.mpf(gamma)
    lam = ctx.sqrt(8) + g
    d = ctx.sqrt(g * (2 * ctx.sqrt(8) + g))
    rm = (lam - d) / 4
    lp = ctx.log1p(2 * d / (lam - d))

    def diff(i):                       # r+^i - r-^i
        return rm**i * ctx.expm1(i * lp)

    def t1(i):
        return -diff(i), rm**i + diff(i)

    a1, c1 = t1(n + 1)
    a2, c2 = t1(n + 2)
    b1, b2 = -diff(n + 2), -diff(n + 1)
    m = ctx.matrix([[a1, -b1], [a2, -b2]])
    sol = ctx.lu_solve(m, ctx.matrix([-c1, -c2]))
    return sol[0], sol[1], ctx


def claim_alpha_check(n: int, gamma: float | None = None, solution: LayeredSolution | None = None,
                      precision: str = "double", tol: float | None = None) -> CheckReport:
    """``-1 - 2/(n+1) <= alpha (((lam-D)/(lam+D))^{n+1} - 1) <= -1 - 1/(4(n+1))``."""
    rep = CheckReport("claim-alpha", n, tolerance=DEFAULT_TOL[precision] if tol is None else tol)
    _check_claim_preconditions(n, make_params(n).gamma if gamma is None else gamma, rep)
    bk = _Backend(precision)
    if precision == "extended":
        alpha, _, _ = alpha_extended(n, gamma)
    else:
        if solution is None:
            from .welded_trees import layered_solve
            solution = layered_solve(make_params(n, gamma))
        alpha = solution.alpha
    _, lam, d = bk.params(n, gamma)
    q = alpha * bk.inv_ratio_pow_minus_one(lam, d, n + 1)
    rep.sandwich("sandwich", -1 - 2 / bk.num(n + 1), q, -1 - 1 / bk.num(4 * (n + 1)))
    rep.le("below_minus_one", q, -1)
    rep.details.update(alpha=float(alpha), quantity=float(q),
                       lower=float(-1 - 2 / bk.num(n + 1)), upper=float(-1 - 1 / bk.num(4 * (n + 1))))
    return rep


def ratio_bounds_check(solution: LayeredSolution, n: int | None = None,
                       tol: float = 1e-10) -> CheckReport:
    """Bounds relating each level value to the leaf level ``n+1`` and the T2 root.

    Ratios are compared in log space so that the exponentially small and large
    factors do not under- or overflow; slacks are relative.
    """
    n = solution.n if n is None else n
    p = solution.params
    lam, d = p.lambda_, p.delta
    rm, rp = (lam - d) / 4, (lam + d) / 4
    phi = np.abs(solution.phi)
    f = lambda i: phi[i - 1]   # noqa: E731  levels are 1-based
    rep = CheckReport("ratio-bounds", n, tolerance=tol)

    def rel_le(name, lhs, rhs):
        rep.le(name, 0.0, 1.0 - lhs / rhs)

    for i in range(1, n + 3):
        r = f(2 * n + 3 - i) / f(n + 1)
        base = rm ** (i - n - 2)
        rel_le("sandwich_t2.lower", base * i / (4 * (n + 2)), r)
        rel_le("sandwich_t2.upper", r, base * 4 * i / (n + 2))
    for i in range(1, n + 2):
        rel_le("upper_t1", f(i) / f(n + 1), 12 * (n + 1) * rp ** (i - n - 1))
    rel_le("relate_root", f(n + 1), f(2 * n + 2) * 4 * (n + 2) * rm ** (n + 1))
    for i in range(1, n + 3):
        rel_le("chain_t2", f(2 * n + 3 - i), 16 * i * f(2 * n + 2) * rm ** (i - 1))
    for i in range(1, n + 2):
        rel_le("chain_t1", f(i), 48 * (n + 2) ** 2 * f(2 * n + 2) * rp**i)
    rep.details["norm_over_n5_root"] = solution.norm_squared() / (n**5 * f(2 * n + 2) ** 2)
    return rep


# --- the draft's gap equation -----------------------------------------------

def delta_half(lam):
    return np.sqrt(np.maximum((np.asarray(lam) / 2) ** 2 - 2, 0.0))


def gap_equation_sides(lam, n: int):
    """``(LHS, RHS)`` of ``(1 + 2Dp/(lam/2 - Dp))^{n+1} = 1 + 2Dp/(2 - lam/2 - Dp)``."""
    lam = np.asarray(lam, dtype=float)
    dp = delta_half(lam)
    lhs = np.exp((n + 1) * np.log1p(2 * dp / (lam / 2 - dp)))
    rhs = 1 + 2 * dp / (2 - lam / 2 - dp)
    return lhs, rhs


def gap_equation_grid(mu: float, grid_points: int = 10_000) -> np.ndarray:
    """Points in ``(sqrt 8, 3 - mu]``: half uniform, half log-spaced towards sqrt 8."""
    hi = 3 - mu
    width = hi - SQRT8
    half = grid_points // 2
    uni = np.linspace(SQRT8, hi, grid_points - half + 1)[1:]
    logs = SQRT8 + width * np.geomspace(1e-12, 1.0, half, endpoint=False)
    return np.sort(np.concatenate([logs, uni]))


def critical_mu(n: int) -> float:
    """``3 - lam*`` where ``lam*`` is the root of the gap equation below 3."""
    g = lambda x: np.subtract(*gap_equation_sides(x, n))  # noqa: E731
    lo = SQRT8 + 1e-3
    hi = 3 - 1e-15
    while g(hi) > 0:
        hi = 3 - (3 - hi) / 10
    root = brentq(g, lo, hi, xtol=1e-16, rtol=4 * np.finfo(float).eps, maxiter=500)
    return 3 - root


def gap_equation_scan(n: int, mu: float | None = None, grid_points: int = 10_000) -> CheckReport:
    """Evaluate ``LHS - RHS`` on a grid in ``(sqrt 8, 3 - mu]``; a root would show
    up as a non-positive value.  Near ``sqrt 8`` also checks the two one-sided
    bounds ``LHS >= 1 + (n+1) Dp`` and ``RHS <= 1 + 4 Dp``."""
    if grid_points < 1000:
        raise ValueError("grid_points must be at least 1000")
    mu = 2.0 ** -n if mu is None else mu
    rep = CheckReport("gap-equation", n, tolerance=0.0)
    lam = gap_equation_grid(mu, grid_points)
    lhs, rhs = gap_equation_sides(lam, n)
    diff = lhs - rhs
    # Strict positivity: report the smallest relative gap.
    rel = diff / rhs
    k = int(np.argmin(rel))
    rep.slacks["lhs>rhs"] = float(rel[k]) if rel[k] > 0 else min(float(rel[k]), -1e-300)
    near = lam <= SQRT8 + 1e-4
    dp = delta_half(lam[near])
    if near.any():
        rep.le("small_lambda.lhs", (1 + (n + 1) * dp), lhs[near])
        rep.le("small_lambda.rhs", rhs[near], 1 + 4 * dp)
    cm = critical_mu(n)
    rep.details.update(mu=mu, grid_points=int(lam.size), argmin_lambda=float(lam[k]),
                       critical_mu=cm, c_empirical=-math.log(cm) / n,
                       sign_changes=int(np.count_nonzero(np.diff(np.sign(diff)))))
    return rep


# --- odd cycles ------------------------------------------------------------

def cycle_adjacency(n: int) -> np.ndarray:
    a = np.zeros((n, n))
    idx = np.arange(n)
    a[idx, (idx + 1) % n] = 1
    a[(idx + 1) % n, idx] = 1
    return a


def odd_cycle_solution(n: int, i: int = 0) -> np.ndarray:
    """Closed-form solution of ``A x = e_i``: ``x_{i+1+2k} = (-1)^k / 2``."""
    x = np.empty(n)
    for k in range(n):
        x[(i + 1 + 2 * k) % n] = (-1) ** k / 2
    return x


def odd_cycle_checks(n_odd: int, tol: float = 1e-10) -> CheckReport:
    if n_odd < 3 or n_odd % 2 == 0:
        raise ValueError("cycle length must be an odd integer >= 3")
    n = n_odd
    a = cycle_adjacency(n)
    rep = CheckReport("odd-cycle", n, tolerance=tol)
    ev = np.linalg.eigvalsh(a)
    rank = int(np.linalg.matrix_rank(a))
    rep.le("full_rank", n, rank)
    smax = float(np.abs(ev).max())
    rep.le("spectral_norm<=2", smax, 2.0)
    rep.le("frobenius.lower", math.sqrt(2 * n), np.linalg.norm(a))
    rep.le("frobenius.upper", np.linalg.norm(a), math.sqrt(2 * n))
    worst = 0.0
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        x = np.linalg.solve(a, e)
        cf = odd_cycle_solution(n, i)
        worst = max(worst, float(np.abs(x - cf).max()))
        rep.le("neighbors_half", abs(cf[(i - 1) % n] - 0.5) + abs(cf[(i + 1) % n] - 0.5), 0.0)
    rep.le("closed_form_vs_solve", worst, 0.0)
    rep.details.update(rank=rank, sigma_max=smax, eigenvalues=sorted(ev.tolist(), reverse=True),
                       max_solution_error=worst)
    return rep
