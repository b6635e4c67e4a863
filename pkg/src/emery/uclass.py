"""Membership probes for universal representing functions, composition, catalog.

A function passes when it vanishes at the origin, has a finite first and
second real derivative there, keeps those derivatives bounded as time
approaches zero, and has a remainder ``|f(x) - Df(0) x| / |x|^2`` that stays
bounded near the origin. All four are probed numerically on a fixed grid so
that results are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .expr import (
    Abs, Const, Exp, Log, Mul, NonDifferentiableAtZero, Pow, RepFunction,
    Sgn, Var, as_value, hat_from_wirtinger, jets_at_zero, substitute,
)

__all__ = [
    "CheckResult", "UReport", "Reason", "Rejection", "Composition", "CatalogEntry",
    "IteratedExp", "probe_times", "check_u", "compose_check", "chain_rule_error",
    "catalog", "catalog_entry", "iterate_exp", "hat_jets",
]

N_TIME = 64
SMALL_TIMES = (1e-3, 1e-6)
SHELLS = tuple(2.0**-j for j in range(1, 13))
N_DIRECTIONS = 16
GROWTH_FACTOR = 100.0  # values near t = 0 vs. the first grid time
DECADE_GROWTH = 2.0  # t = 1e-6 vs. t = 1e-3; catches power-law blow-up
ZERO_TOL = 1e-12
REMAINDER_FLOOR = 1e-6  # quotients below this are round-off, whatever their trend
CHAIN_TOL = 1e-9


class Reason(str, Enum):
    OUTER_NOT_DIFFERENTIABLE = "OuterNotDifferentiable"
    INNER_NOT_DIFFERENTIABLE = "InnerNotDifferentiable"
    LOCAL_BOUNDEDNESS = "LocalBoundedness"
    ZERO_VALUE_VIOLATED = "ZeroValueViolated"
    REMAINDER_UNBOUNDED = "RemainderUnbounded"
    CHAIN_RULE_MISMATCH = "ChainRuleMismatch"


@dataclass(frozen=True)
class CheckResult:
    condition: int
    passed: bool
    witness: str

    def to_dict(self) -> dict:
        return {"condition": self.condition, "passed": self.passed, "witness": self.witness}


@dataclass(frozen=True)
class UReport:
    passes: bool
    checks: tuple[CheckResult, ...]
    remainder_bound: float
    time_singularities: tuple[float, ...]
    horizon: float

    def check(self, condition: int) -> CheckResult:
        return next(c for c in self.checks if c.condition == condition)

    def to_dict(self) -> dict:
        rb = self.remainder_bound
        return {
            "passes": self.passes,
            "horizon": self.horizon,
            "checks": [c.to_dict() for c in self.checks],
            "remainder_bound": rb if np.isfinite(rb) else None,
            "time_singularities": list(self.time_singularities),
            "probe": {
                "time_grid": f"T*k/{N_TIME}, k=1..{N_TIME}, plus {list(SMALL_TIMES)}",
                "shells": f"|x| = 2^-j, j=1..{len(SHELLS)}",
                "directions": N_DIRECTIONS,
                "growth_factor": GROWTH_FACTOR,
                "decade_growth": DECADE_GROWTH,
            },
        }


@dataclass(frozen=True)
class Rejection:
    reason: Reason
    detail: str

    def to_dict(self) -> dict:
        return {"accepted": False, "reason": self.reason.value, "detail": self.detail}


@dataclass(frozen=True)
class Composition:
    function: RepFunction
    report: UReport
    chain_rule_error: float

    def to_dict(self) -> dict:
        from .parser import pretty

        return {
            "accepted": True,
            "expression": pretty(self.function),
            "chain_rule_error": self.chain_rule_error,
            "chain_rule_tolerance": CHAIN_TOL,
            "report": self.report.to_dict(),
        }


def probe_times(horizon: float) -> np.ndarray:
    grid = [horizon * k / N_TIME for k in range(1, N_TIME + 1)]
    return np.array(grid + list(SMALL_TIMES))


def _directions(d: int) -> np.ndarray:
    """Fixed unit directions in C^d, shape (16, d)."""
    if d == 1:
        ang = 2 * np.pi * np.arange(N_DIRECTIONS) / N_DIRECTIONS
        return np.exp(1j * ang)[:, None]
    rng = np.random.Generator(np.random.Philox(key=0x5EED))
    v = rng.standard_normal((N_DIRECTIONS, 2 * d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v[:, 0::2] + 1j * v[:, 1::2]


def _lift_cols(z: np.ndarray) -> np.ndarray:
    out = np.empty(z.shape[:-1] + (2 * z.shape[-1],))
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out


def hat_jets(f: RepFunction, ts: Sequence[float], params: Mapping | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Real-lift gradients (T, n, 2d) and Hessians (T, n, 2d, 2d) at the origin."""
    g, h = jets_at_zero(f, ts, params)
    return hat_from_wirtinger(g, h)


def _magnitude(g: np.ndarray, h: np.ndarray) -> np.ndarray:
    return np.maximum(np.abs(g).reshape(len(g), -1).max(axis=1), np.abs(h).reshape(len(h), -1).max(axis=1))


def _grows_near_zero(series: np.ndarray, reference: float) -> tuple[bool, list[float]]:
    """Decision on values at (T/64, 1e-3, 1e-6) given as ``reference`` and series."""
    a, b = series  # t = 1e-3, t = 1e-6
    bad = []
    ref = max(reference, 1e-300)
    if a > GROWTH_FACTOR * ref:
        bad.append(SMALL_TIMES[0])
    if b > GROWTH_FACTOR * ref:
        bad.append(SMALL_TIMES[1])
    if b > DECADE_GROWTH * max(a, 1e-300) and b > 1e-12:
        if SMALL_TIMES[1] not in bad:
            bad.append(SMALL_TIMES[1])
    return bool(bad), bad


def check_u(f: RepFunction, horizon: float = 1.0, params: Mapping | None = None) -> UReport:
    """Probe the four membership conditions; failures are reported, not raised."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    ts_all = probe_times(horizon)
    ts = ts_all if f.time_dependent else ts_all[:1]
    d = f.dim_in
    checks: list[CheckResult] = []
    singular: set[float] = set()

    # (1) value at the origin
    vals = f.evaluate_array(ts, np.zeros((len(ts), d)), params)
    err = np.where(np.isfinite(vals), np.abs(vals), np.inf).max(axis=1)
    worst = int(np.argmax(err))
    ok1 = bool(err[worst] <= ZERO_TOL)
    checks.append(CheckResult(1, ok1, f"|f(t, 0)| = {err[worst]:.3g} at t = {ts[worst]:.6g}"))
    singular.update(float(t) for t, e in zip(ts, err) if not np.isfinite(e))

    # (2) twice differentiable at the origin, for every probe time
    grads = np.zeros((len(ts), f.dim_out, 2 * d), dtype=complex)
    hesss = np.zeros((len(ts), f.dim_out, 2 * d, 2 * d), dtype=complex)
    ok2 = True
    witness2 = "finite jets at all probe times"
    for i, t in enumerate(ts):
        try:
            g, h = hat_jets(f, [t], params)
        except NonDifferentiableAtZero as exc:
            ok2 = False
            witness2 = str(exc)
            singular.add(float(t))
            break
        grads[i], hesss[i] = g[0], h[0]
    if ok2 and not (np.isfinite(grads).all() and np.isfinite(hesss).all()):
        ok2 = False
        witness2 = "non-finite derivative at the origin"
    checks.append(CheckResult(2, ok2, witness2))

    # (3) local boundedness of the jets as t -> 0
    if not ok2:
        checks.append(CheckResult(3, False, "not probed: derivatives unavailable"))
    elif not f.time_dependent:
        checks.append(CheckResult(3, True, "time-independent"))
    else:
        mag = _magnitude(grads, hesss)
        bad, where = _grows_near_zero(mag[N_TIME:], mag[0])
        singular.update(where)
        checks.append(CheckResult(3, not bad, (
            f"max |D f(0)| = {mag[0]:.3g} at t = {ts[0]:.6g}, {mag[N_TIME]:.3g} at t = 1e-3, "
            f"{mag[N_TIME + 1]:.3g} at t = 1e-6"
        )))

    # (4) remainder quotient on dyadic shells
    if not ok2:
        rb = float("inf")
        checks.append(CheckResult(4, False, "not probed: derivatives unavailable"))
    else:
        rb, ok4, witness4, where = _remainder(f, ts, grads, params)
        singular.update(where)
        checks.append(CheckResult(4, ok4, witness4))

    passes = all(c.passed for c in checks)
    return UReport(passes, tuple(checks), float(rb), tuple(sorted(singular)), float(horizon))


def _remainder(f: RepFunction, ts: np.ndarray, grads: np.ndarray, params):
    d = f.dim_in
    dirs = _directions(d)
    radii = np.array(SHELLS)
    pts = radii[:, None, None] * dirs[None, :, :]  # (12, 16, d)
    flat = pts.reshape(-1, d)
    lifted = _lift_cols(flat)  # (192, 2d)
    sups_t = np.empty(len(ts))
    inner_outer = np.empty((len(ts), 2))
    for i, t in enumerate(ts):
        vals = f.evaluate_array(t, flat, params)  # (192, n)
        lin = lifted @ grads[i].T  # (192, n)
        num = np.linalg.norm(vals - lin, axis=1)
        q = (num / np.linalg.norm(flat, axis=1) ** 2).reshape(len(radii), -1)
        q = np.where(np.isfinite(q), q, np.inf)
        sups_t[i] = q.max()
        inner_outer[i] = q[8:].max(), q[:4].max()
        innermost, middle = q[-1].max(), q[5].max()
        if innermost > REMAINDER_FLOOR and innermost > DECADE_GROWTH * middle:
            return (float(q.max()), False,
                    f"quotient keeps growing toward the origin at t = {t:.6g}: {middle:.3g} -> {innermost:.3g}", [])
    rb = float(sups_t.max())
    if not np.isfinite(rb):
        i = int(np.argmax(~np.isfinite(sups_t)))
        return rb, False, f"remainder undefined near the origin at t = {ts[i]:.6g}", [float(ts[i])]
    inner, outer = inner_outer.max(axis=0)
    if inner > GROWTH_FACTOR * max(outer, REMAINDER_FLOOR):
        return rb, False, f"quotient grows toward the origin: {outer:.3g} -> {inner:.3g}", []
    if len(ts) > 1:
        bad, where = _grows_near_zero(sups_t[N_TIME:], sups_t[0])
        if bad:
            return rb, False, f"quotient bound grows as t -> 0: {sups_t[0]:.3g} -> {sups_t[-1]:.3g}", where
    return rb, True, f"sup quotient = {rb:.6g}", []


# ---------------------------------------------------------------------------
# composition

def _real_rows(g: np.ndarray) -> np.ndarray:
    """Gradient of the lifted output: interleave Re and Im rows."""
    out = np.empty((2 * g.shape[0],) + g.shape[1:])
    out[0::2] = g.real
    out[1::2] = g.imag
    return out


def chain_rule_error(outer: RepFunction, inner: RepFunction, composite: RepFunction, t: float,
                     params: Mapping | None = None) -> float:
    """Largest scaled mismatch between the composite's jet and the chain rule."""
    gp, hp = (a[0] for a in hat_jets(outer, [t], params))
    gx, hx = (a[0] for a in hat_jets(inner, [t], params))
    ge, he = (a[0] for a in hat_jets(composite, [t], params))
    J = _real_rows(gx)  # (2n, 2d) real
    H = _real_rows(hx)  # (2n, 2d, 2d) real
    g_pred = gp @ J
    h_pred = np.einsum("ckl,ka,lb->cab", hp, J, J) + np.einsum("ck,kab->cab", gp, H)
    err_g = np.abs(ge - g_pred) / np.maximum(1.0, np.abs(g_pred))
    err_h = np.abs(he - h_pred) / np.maximum(1.0, np.abs(h_pred))
    return float(max(err_g.max(), err_h.max()))


def compose_check(outer: RepFunction, inner: RepFunction, horizon: float = 1.0,
                  params: Mapping | None = None) -> Composition | Rejection:
    """Composite ``outer(inner)`` if both are universal, else a Rejection."""
    from .expr import DimensionMismatchError

    if outer.dim_in != inner.dim_out:
        raise DimensionMismatchError(f"outer takes {outer.dim_in} inputs, inner produces {inner.dim_out}")
    ro = check_u(outer, horizon, params)
    ri = check_u(inner, horizon, params)
    if not ro.check(2).passed:
        return Rejection(Reason.OUTER_NOT_DIFFERENTIABLE, ro.check(2).witness)
    for label, rep in (("outer", ro), ("inner", ri)):
        if not rep.check(1).passed:
            return Rejection(Reason.ZERO_VALUE_VIOLATED, f"{label}: {rep.check(1).witness}")
    if not ri.check(2).passed:
        return Rejection(Reason.INNER_NOT_DIFFERENTIABLE, ri.check(2).witness)
    for label, rep in (("outer", ro), ("inner", ri)):
        if not rep.check(3).passed:
            return Rejection(Reason.LOCAL_BOUNDEDNESS, f"{label}: {rep.check(3).witness}")
    for label, rep in (("outer", ro), ("inner", ri)):
        if not rep.check(4).passed:
            return Rejection(Reason.REMAINDER_UNBOUNDED, f"{label}: {rep.check(4).witness}")
    composite = substitute(outer, inner)
    report = check_u(composite, horizon, params)
    times = [horizon] if not composite.time_dependent else [horizon / N_TIME, horizon / 2, horizon]
    err = max(chain_rule_error(outer, inner, composite, t, params) for t in times)
    if err > CHAIN_TOL:
        return Rejection(Reason.CHAIN_RULE_MISMATCH, f"chain rule mismatch {err:.3g}")
    return Composition(composite, report, err)


# ---------------------------------------------------------------------------
# catalog

@dataclass(frozen=True)
class CatalogEntry:
    name: str
    params: Mapping[str, complex]
    function: RepFunction
    domain: str
    identity: str


def _v(k: int) -> Var:
    return Var(k)


def _builders():
    x, x1, x2 = _v(1), _v(1), _v(2)
    return {
        "power": (
            lambda a, b: RepFunction.scalar(Pow(1 + x, a) - 1),
            {"alpha": 1.5}, 1,
            "alpha in Z+; or alpha in Z and dX != -1; or Re E(X) > 0",
            "E(X)^alpha = E(((1+id)^alpha - 1) o X)",
        ),
        "yor": (
            lambda a, b: RepFunction.scalar(Mul(Pow(1 + x1, a), Pow(1 + x2, b)) - 1, 2),
            {"alpha": 2.0, "beta": -1.0}, 2,
            "as for power, componentwise",
            "E(X1)^alpha E(X2)^beta = E(((1+id1)^alpha (1+id2)^beta - 1) o X)",
        ),
        "exp": (
            lambda a, b: RepFunction.scalar(Exp(x if a == 1 else Mul(Const(a), x)) - 1),
            {"alpha": 1.0}, 1,
            "none",
            "L(exp(alpha X)) = (exp(alpha id) - 1) o X",
        ),
        "log": (
            lambda a, b: RepFunction.scalar(Log(1 + x)),
            {}, 1,
            "dX != -1",
            "E(X) = exp(log(1+id) o X)",
        ),
        "abs-power": (
            lambda a, b: RepFunction.scalar(Pow(Abs(1 + x), a) - 1),
            {"alpha": 0.5}, 1,
            "alpha in (0, inf); or dX != -1",
            "|E(X)|^alpha = E((|1+id|^alpha - 1) o X)",
        ),
        "signed-abs-power": (
            lambda a, b: RepFunction.scalar(Mul(Sgn(1 + x), Pow(Abs(1 + x), a)) - 1),
            {"alpha": 1.5}, 1,
            "real X; dX != -1",
            "sgn(E(X)) |E(X)|^alpha = E((sgn(1+id) |1+id|^alpha - 1) o X)",
        ),
        "abs": (
            lambda a, b: RepFunction.scalar(Abs(1 + x) - 1),
            {}, 1,
            "none",
            "|E(X)| = E((|1+id| - 1) o X)",
        ),
        "abs-yor": (
            lambda a, b: RepFunction.scalar(Mul(Pow(Abs(1 + x1), a), Pow(Abs(1 + x2), b)) - 1, 2),
            {"alpha": 2.0, "beta": -1.0}, 2,
            "as for abs-power, componentwise",
            "|E(X1)|^alpha |E(X2)|^beta = E((|1+id1|^alpha |1+id2|^beta - 1) o X)",
        ),
        "identity": (
            lambda a, b: RepFunction.scalar(x),
            {}, 1,
            "none",
            "X - X0 = id o X",
        ),
        "quadratic": (
            lambda a, b: RepFunction.scalar(Pow(x, 2)),
            {}, 1,
            "none",
            "[X, X] = id^2 o X",
        ),
    }


def catalog_entry(name: str, alpha=None, beta=None) -> CatalogEntry:
    """A catalog member, optionally with non-default parameters."""
    table = _builders()
    if name not in table:
        raise KeyError(f"unknown catalog entry {name!r}; known: {', '.join(table)}")
    build, defaults, _dim, domain, identity = table[name]
    params = dict(defaults)
    if alpha is not None and "alpha" in params:
        params["alpha"] = alpha
    if beta is not None and "beta" in params:
        params["beta"] = beta
    a = as_value(params.get("alpha", 1.0))
    b = as_value(params.get("beta", 1.0))
    return CatalogEntry(name, {k: complex(v) for k, v in params.items()}, build(a, b), domain, identity)


def catalog() -> list[CatalogEntry]:
    return [catalog_entry(name) for name in _builders()]


# ---------------------------------------------------------------------------
# iterated exponentials

@dataclass(frozen=True)
class IteratedExp:
    function: RepFunction
    alpha: complex
    k: int
    first: complex  # D xi^k (0)
    second: complex  # D^2 xi^k (0)


def iterate_exp(alpha, k: int) -> IteratedExp:
    """k-fold composition of ``exp(alpha*y) - 1`` with the closed-form jet."""
    if not 1 <= k <= 8:
        raise ValueError("k must be between 1 and 8")
    a = complex(alpha)
    step = RepFunction.scalar(Exp(Var(1) if a == 1 else Mul(Const(a), Var(1))) - 1)
    f = RepFunction.scalar(Var(1))
    for _ in range(k):
        f = substitute(step, f)
    ratio = k if a == 1 else (a**k - 1) / (a - 1)
    return IteratedExp(f, a, k, a**k, a ** (k + 1) * ratio)
