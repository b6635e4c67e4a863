"""Levy models and the characteristics of represented processes.

The drift of a model is stored untruncated (relative to ``h = id``), which is
legitimate because every engine model has finitely many jump atoms with finite
mean. All covariations are bilinear: ``[X, Y]`` and never ``[X, conj Y]``.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .expr import (
    Abs, Exp, Mul, Pow, RepFunction, Sgn, Var, Const, jets_at_zero, hat_from_wirtinger,
)

__all__ = [
    "ModelError", "AtomOutsideDomain", "AtomAtMinusOne", "NotUniversal",
    "Truncation", "ScheduledJump", "LevyModel", "TransformedCharacteristics",
    "lift", "bilinear_from_lifted", "transform", "drift_rate_wirtinger",
    "drift_rate_analytic", "levy_exponent", "char_fn", "char_exponent_function",
    "mellin", "retruncate_drift", "complex_pair",
]

MERGE_TOL = 1e-12
PROB_TOL = 1e-12


class ModelError(ValueError):
    pass


class AtomOutsideDomain(ValueError):
    def __init__(self, index: int, atom, detail: str = "outside the domain of the function"):
        self.index = index
        self.atom = atom
        shown = ", ".join(f"{complex(z):g}" for z in np.atleast_1d(atom))
        super().__init__(f"jump atom #{index} ({shown}) is {detail}" if index >= 0 else detail)


class AtomAtMinusOne(ValueError):
    pass


class NotUniversal(ValueError):
    def __init__(self, report):
        self.report = report
        failed = [c for c in report.checks if not c.passed]
        super().__init__("function fails the universality check: " + "; ".join(c.witness for c in failed))


def complex_pair(z: complex) -> list[float]:
    return [float(z.real), float(z.imag)]


def lift(z: np.ndarray) -> np.ndarray:
    """(..., d) complex -> (..., 2d) real, interleaving real and imaginary parts."""
    z = np.asarray(z, dtype=complex)
    out = np.empty(z.shape[:-1] + (2 * z.shape[-1],))
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out


def bilinear_from_lifted(q: np.ndarray) -> np.ndarray:
    """Complex bilinear covariation matrix (d, d) from a lifted (2d, 2d) one."""
    rr, ri = q[..., 0::2, 0::2], q[..., 0::2, 1::2]
    ir, ii = q[..., 1::2, 0::2], q[..., 1::2, 1::2]
    return rr - ii + 1j * (ri + ir)


@dataclass(frozen=True)
class Truncation:
    kind: str = "id"  # "id", "zero" or "ball"
    radius: float = 0.0

    def __post_init__(self):
        if self.kind not in ("id", "zero", "ball"):
            raise ValueError(f"unknown truncation {self.kind!r}")
        if self.kind == "ball" and not self.radius > 0:
            raise ValueError("ball truncation needs a positive radius")

    @classmethod
    def parse(cls, text: str) -> "Truncation":
        text = text.strip()
        if text in ("id", "identity"):
            return cls("id")
        if text == "zero":
            return cls("zero")
        if text.startswith("ball:"):
            try:
                r = float(text[5:])
            except ValueError:
                raise ValueError(f"bad ball radius in {text!r}") from None
            return cls("ball", r)
        raise ValueError(f"truncation must be id, zero or ball:R, got {text!r}")

    def __call__(self, w: np.ndarray) -> np.ndarray:
        """Apply to vectors along the last axis."""
        w = np.asarray(w, dtype=complex)
        if self.kind == "id":
            return w
        if self.kind == "zero":
            return np.zeros_like(w)
        keep = np.linalg.norm(w, axis=-1, keepdims=True) <= self.radius
        return np.where(keep, w, 0)

    def __str__(self) -> str:
        return f"ball:{self.radius!r}" if self.kind == "ball" else self.kind


@dataclass(frozen=True)
class ScheduledJump:
    time: float
    values: np.ndarray  # (m, d) complex
    probs: np.ndarray  # (m,)


@dataclass(frozen=True)
class LevyModel:
    """Finite-activity Levy model on C^d with optional jumps at fixed times."""

    dim: int
    drift: np.ndarray  # (d,) complex, untruncated
    cov_hat: np.ndarray  # (2d, 2d) real
    atoms: np.ndarray = None  # (k, d) complex
    rates: np.ndarray = None  # (k,)
    scheduled: tuple[ScheduledJump, ...] = ()

    def __post_init__(self):
        d = self.dim
        if d < 1:
            raise ModelError("dim must be >= 1")
        drift = np.asarray(self.drift, dtype=complex).reshape(-1)
        cov = np.asarray(self.cov_hat, dtype=float)
        atoms = np.zeros((0, d), dtype=complex) if self.atoms is None else np.asarray(self.atoms, dtype=complex)
        rates = np.zeros(0) if self.rates is None else np.asarray(self.rates, dtype=float).reshape(-1)
        if atoms.ndim == 1:
            atoms = atoms.reshape(-1, d)
        if drift.shape != (d,):
            raise ModelError(f"drift must have {d} entries")
        if cov.shape != (2 * d, 2 * d):
            raise ModelError(f"cov_hat must be {2 * d}x{2 * d}")
        if not np.allclose(cov, cov.T, atol=1e-14, rtol=0):
            raise ModelError("cov_hat must be symmetric")
        if atoms.shape != (len(rates), d):
            raise ModelError("each jump needs an atom of dimension dim and a rate")
        if (rates <= 0).any() or not np.isfinite(rates).all():
            raise ModelError("jump rates must be positive")
        for s in self.scheduled:
            if not s.time > 0:
                raise ModelError("scheduled jump times must be positive")
            if abs(float(np.sum(s.probs)) - 1) > PROB_TOL or (s.probs < 0).any():
                raise ModelError(f"scheduled outcome probabilities at t={s.time} must be >= 0 and sum to 1")
            if s.values.shape != (len(s.probs), d):
                raise ModelError("scheduled outcome values must have dimension dim")
        object.__setattr__(self, "drift", drift)
        object.__setattr__(self, "cov_hat", 0.5 * (cov + cov.T))
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "rates", rates)
        object.__setattr__(self, "scheduled", tuple(sorted(self.scheduled, key=lambda s: s.time)))

    # -- construction helpers
    @classmethod
    def real(cls, drift: float = 0.0, sigma: float = 0.0, jumps: Sequence[tuple[float, float]] = (),
             scheduled: Sequence[tuple[float, Sequence[tuple[float, float]]]] = ()) -> "LevyModel":
        atoms = np.array([[a] for a, _ in jumps], dtype=complex).reshape(-1, 1)
        rates = np.array([r for _, r in jumps], dtype=float)
        sched = tuple(
            ScheduledJump(float(tau), np.array([[v] for v, _ in outs], dtype=complex), np.array([p for _, p in outs]))
            for tau, outs in scheduled
        )
        return cls(1, np.array([drift]), np.diag([sigma**2, 0.0]), atoms, rates, sched)

    @classmethod
    def from_dict(cls, data: Mapping) -> "LevyModel":
        known = {"dim", "drift", "cov_hat", "jumps", "scheduled", "drift_truncation"}
        unknown = set(data) - known
        if unknown:
            raise ModelError(f"unknown model keys: {', '.join(sorted(unknown))}")
        try:
            d = int(data["dim"])
            drift = np.array([_pair(p) for p in data.get("drift", [[0, 0]] * d)])
            cov = np.array(data.get("cov_hat", np.zeros((2 * d, 2 * d)).tolist()), dtype=float)
            atoms, rates = [], []
            for j in data.get("jumps", []):
                extra = set(j) - {"atom", "rate"}
                if extra:
                    raise ModelError(f"unknown jump keys: {', '.join(sorted(extra))}")
                atoms.append([_pair(p) for p in j["atom"]])
                rates.append(float(j["rate"]))
            sched = []
            for s in data.get("scheduled", []):
                extra = set(s) - {"time", "outcomes"}
                if extra:
                    raise ModelError(f"unknown scheduled keys: {', '.join(sorted(extra))}")
                vals = [[_pair(p) for p in o["value"]] for o in s["outcomes"]]
                probs = [float(o["prob"]) for o in s["outcomes"]]
                sched.append(ScheduledJump(float(s["time"]), np.array(vals, dtype=complex).reshape(len(vals), d),
                                           np.array(probs)))
        except KeyError as exc:
            raise ModelError(f"missing model key {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ModelError):
                raise
            raise ModelError(f"malformed model: {exc}") from None
        model = cls(d, drift, cov, np.array(atoms, dtype=complex).reshape(-1, d), np.array(rates), tuple(sched))
        trunc = Truncation.parse(str(data.get("drift_truncation", "id")))
        if trunc.kind != "id":
            # the file gives the drift relative to another truncation; store it untruncated
            comp = (model.rates[:, None] * (model.atoms - trunc(model.atoms))).sum(axis=0)
            model = cls(d, model.drift + comp, model.cov_hat, model.atoms, model.rates, model.scheduled)
        return model

    @classmethod
    def from_toml(cls, path: str | Path) -> "LevyModel":
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "drift": [complex_pair(z) for z in self.drift],
            "cov_hat": self.cov_hat.tolist(),
            "jumps": [{"atom": [complex_pair(z) for z in a], "rate": float(r)} for a, r in zip(self.atoms, self.rates)],
            "scheduled": [
                {"time": s.time, "outcomes": [{"value": [complex_pair(z) for z in v], "prob": float(p)}
                                              for v, p in zip(s.values, s.probs)]}
                for s in self.scheduled
            ],
        }

    @property
    def is_real(self) -> bool:
        cov_im = self.cov_hat[1::2, :].any() or self.cov_hat[:, 1::2].any()
        return not (
            np.any(self.drift.imag != 0) or cov_im or np.any(self.atoms.imag != 0)
            or any(np.any(s.values.imag != 0) for s in self.scheduled)
        )

    @property
    def total_rate(self) -> float:
        return float(self.rates.sum())

    @property
    def continuous_drift(self) -> np.ndarray:
        """Drift of the continuous part once compensated jumps are split off."""
        return self.drift - (self.rates[:, None] * self.atoms).sum(axis=0)

    def cov_bilinear(self) -> np.ndarray:
        return bilinear_from_lifted(self.cov_hat)


def _pair(p) -> complex:
    if isinstance(p, (int, float)):
        return complex(p)
    if len(p) != 2:
        raise ModelError(f"complex numbers are written as [re, im], got {p!r}")
    return complex(float(p[0]), float(p[1]))


@dataclass(frozen=True)
class TransformedCharacteristics:
    drift_rate: np.ndarray  # (n,)
    cov_rate_bilinear: np.ndarray  # (n, n)
    pushforward_atoms: np.ndarray  # (m, n)
    pushforward_rates: np.ndarray  # (m,)
    dropped_intensity: float
    scheduled_drift: tuple[tuple[float, np.ndarray], ...]
    truncation: Truncation
    time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "truncation": str(self.truncation),
            "time": self.time,
            "drift_rate": [complex_pair(z) for z in self.drift_rate],
            "cov_rate_bilinear": [[complex_pair(z) for z in row] for row in self.cov_rate_bilinear],
            "pushforward_atoms": [
                {"atom": [complex_pair(z) for z in a], "rate": float(r)}
                for a, r in zip(self.pushforward_atoms, self.pushforward_rates)
            ],
            "dropped_intensity": self.dropped_intensity,
            "scheduled_drift": [{"time": tau, "jump": [complex_pair(z) for z in v]} for tau, v in self.scheduled_drift],
        }


def _jets(xi: RepFunction, t: float, params) -> tuple[np.ndarray, np.ndarray]:
    """Real-lift first and second derivatives at the origin, (n, 2d) and (n, 2d, 2d)."""
    g, h = hat_from_wirtinger(*jets_at_zero(xi, [t], params))
    return g[0], h[0]


def _atom_values(model: LevyModel, xi: RepFunction, points: np.ndarray, t: float, params) -> np.ndarray:
    if len(points) == 0:
        return np.zeros((0, xi.dim_out), dtype=complex)
    vals = xi.evaluate_array(t, points, params)
    bad = ~np.isfinite(vals).all(axis=1)
    if bad.any():
        j = int(np.flatnonzero(bad)[0])
        raise AtomOutsideDomain(j, points[j])
    return vals


def _require(model: LevyModel, xi: RepFunction, check: bool, horizon: float, params) -> None:
    if xi.dim_in != model.dim:
        from .expr import DimensionMismatchError

        raise DimensionMismatchError(f"function takes {xi.dim_in} inputs, model has dimension {model.dim}")
    if check:
        from .uclass import check_u

        rep = check_u(xi, horizon, params)
        if not rep.passes:
            raise NotUniversal(rep)


def _merge(points: np.ndarray, rates: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    out_p: list[np.ndarray] = []
    out_r: list[float] = []
    dropped = 0.0
    for p, r in zip(points, rates):
        if np.abs(p).max(initial=0.0) <= MERGE_TOL:
            dropped += float(r)
            continue
        for k, q in enumerate(out_p):
            if np.abs(p - q).max() <= MERGE_TOL:
                out_r[k] += float(r)
                break
        else:
            out_p.append(p)
            out_r.append(float(r))
    n = points.shape[1] if points.ndim == 2 else 0
    return np.array(out_p, dtype=complex).reshape(-1, n), np.array(out_r), dropped


def transform(model: LevyModel, xi: RepFunction, g: Truncation | None = None, *, t: float = 0.0,
              params: Mapping | None = None, check: bool = True, horizon: float = 1.0) -> TransformedCharacteristics:
    """Characteristics of ``xi o X`` for the Levy model ``X``.

    >>> m = LevyModel.real(0.1, 0.3, [(1.0, 0.5)])
    >>> from emery.parser import parse
    >>> round(transform(m, parse("(1+id)^2 - 1")).drift_rate[0].real, 12)
    0.79
    """
    g = g or Truncation()
    _require(model, xi, check, horizon, params)
    grad, hess = _jets(xi, t, params)
    b_hat = lift(model.drift[None, :])[0]
    x_hat = lift(model.atoms)
    vals = _atom_values(model, xi, model.atoms, t, params)
    drift = grad @ b_hat + 0.5 * np.einsum("cij,ij->c", hess, model.cov_hat)
    if len(vals):
        drift = drift + (model.rates[:, None] * (g(vals) - x_hat @ grad.T)).sum(axis=0)
    cov = grad @ model.cov_hat @ grad.T
    pts, rates, dropped = _merge(vals, model.rates)
    sched = []
    for s in model.scheduled:
        sv = xi.evaluate_array(s.time, s.values, params)
        if not np.isfinite(sv).all():
            raise AtomOutsideDomain(-1, s.values[0], f"scheduled outcome at t={s.time} is outside the domain of the function")
        sched.append((s.time, (s.probs[:, None] * sv).sum(axis=0)))
    return TransformedCharacteristics(drift, cov, pts, rates, dropped, tuple(sched), g, float(t))


def _check_cov(model: LevyModel) -> np.ndarray:
    """[X^a, X^b]^c for a, b ranging over (x_1, conj x_1, x_2, ...)."""
    d = model.dim
    C = model.cov_hat
    out = np.empty((2 * d, 2 * d), dtype=complex)
    for k in range(d):
        for a in range(2):
            sa = 1j if a == 0 else -1j  # x = Re + i Im; conj x = Re - i Im
            for l in range(d):
                for b in range(2):
                    sb = 1j if b == 0 else -1j
                    rr, ri = C[2 * k, 2 * l], C[2 * k, 2 * l + 1]
                    ir, ii = C[2 * k + 1, 2 * l], C[2 * k + 1, 2 * l + 1]
                    out[2 * k + a, 2 * l + b] = rr + sb * ri + sa * ir + sa * sb * ii
    return out


def drift_rate_wirtinger(model: LevyModel, xi: RepFunction, g: Truncation | None = None, *, t: float = 0.0,
                         params: Mapping | None = None) -> np.ndarray:
    """Drift rate from Wirtinger derivatives against the (x, conj x) covariations."""
    g = g or Truncation()
    wg, wh = jets_at_zero(xi, [t], params)
    wg, wh = wg[0], wh[0]
    b_check = np.empty(2 * model.dim, dtype=complex)
    b_check[0::2] = model.drift
    b_check[1::2] = model.drift.conj()
    a_check = np.empty((len(model.atoms), 2 * model.dim), dtype=complex)
    a_check[:, 0::2] = model.atoms
    a_check[:, 1::2] = model.atoms.conj()
    drift = wg @ b_check + 0.5 * np.einsum("cij,ij->c", wh, _check_cov(model))
    if len(model.atoms):
        vals = _atom_values(model, xi, model.atoms, t, params)
        drift = drift + (model.rates[:, None] * (g(vals) - a_check @ wg.T)).sum(axis=0)
    return drift


def drift_rate_analytic(model: LevyModel, xi: RepFunction, g: Truncation | None = None, *, t: float = 0.0,
                        params: Mapping | None = None) -> np.ndarray:
    """Drift rate using only complex derivatives; valid when ``xi`` is analytic at 0."""
    if not xi.analytic_at_zero:
        raise ValueError("the complex-derivative form needs a function analytic at the origin")
    g = g or Truncation()
    wg, wh = jets_at_zero(xi, [t], params)
    dz = wg[0][:, 0::2]
    dzz = wh[0][:, 0::2, 0::2]
    cov = model.cov_bilinear()
    drift = dz @ model.drift + 0.5 * np.einsum("ckl,kl->c", dzz, cov)
    if len(model.atoms):
        vals = _atom_values(model, xi, model.atoms, t, params)
        drift = drift + (model.rates[:, None] * (g(vals) - model.atoms @ dz.T)).sum(axis=0)
    return drift


def retruncate_drift(model: LevyModel, h: Truncation) -> np.ndarray:
    """Drift of ``X`` relative to truncation ``h``."""
    if len(model.atoms) == 0:
        return model.drift.copy()
    return model.drift - (model.rates[:, None] * (model.atoms - h(model.atoms))).sum(axis=0)


def levy_exponent(model: LevyModel, xi: RepFunction, *, t: float = 0.0, params: Mapping | None = None) -> complex:
    """Per-unit-time exponent ``k`` with ``E[E(xi o X)_t] = exp(t k)`` (Levy part only)."""
    if xi.dim_out != 1:
        raise ValueError("the exponent is defined for scalar functions")
    return complex(transform(model, xi, Truncation(), t=t, params=params).drift_rate[0])


def char_exponent_function(u: Sequence[float], dim: int) -> RepFunction:
    """``exp(i u.x) - 1`` with ``u`` of length ``dim`` (u_k x_k) or ``2 dim`` (lifted)."""
    u = [float(v) for v in u]
    terms = []
    if len(u) == dim:
        for k, uk in enumerate(u):
            if uk:
                terms.append(Mul(Const(1j * uk), Var(k + 1)))
    elif len(u) == 2 * dim:
        from .expr import Im, Re

        for k in range(dim):
            for part, uk in ((Re, u[2 * k]), (Im, u[2 * k + 1])):
                if uk:
                    terms.append(Mul(Const(1j * uk), part(Var(k + 1))))
    else:
        raise ValueError(f"u must have {dim} or {2 * dim} entries")
    if not terms:
        return RepFunction.scalar(Const(0), dim)
    arg = terms[0]
    for term in terms[1:]:
        arg = arg + term
    return RepFunction.scalar(Exp(arg) - 1, dim)


def _scheduled_factor(model: LevyModel, t: float, fn) -> complex:
    out = 1.0 + 0j
    for s in model.scheduled:
        if s.time <= t:
            out *= complex(np.sum(s.probs * fn(s.values)))
    return out


def char_fn(model: LevyModel, u: Sequence[float], t: float) -> complex:
    """``E[exp(i u.(X_t - X_0))]``."""
    if t < 0:
        raise ValueError("t must be >= 0")
    xi = char_exponent_function(u, model.dim)
    kappa = levy_exponent(model, xi)
    ev = lambda vals: xi.evaluate_array(0.0, vals)[:, 0] + 1  # noqa: E731
    return complex(np.exp(t * kappa) * _scheduled_factor(model, t, ev))


def _abs_power(alpha: complex, signed: bool) -> RepFunction:
    x = Var(1)
    body = Pow(Abs(1 + x), alpha)
    if signed:
        body = Mul(Sgn(1 + x), body)
    return RepFunction.scalar(body - 1)


def mellin(model: LevyModel, alpha, t: float, signed: bool = False) -> complex:
    """``E[|E(X)_t|^alpha]``, or the signed power when ``signed``."""
    if model.dim != 1 or not model.is_real:
        raise ModelError("the Mellin transform needs a one-dimensional real model")
    a = complex(alpha)
    positive = a.imag == 0 and a.real > 0
    hits = [v for v in list(model.atoms[:, 0]) + [w for s in model.scheduled for w in s.values[:, 0]] if v == -1]
    if hits and (signed or not positive):
        raise AtomAtMinusOne("a jump of size -1 is not allowed for this exponent")
    xi = _abs_power(a, signed)
    kappa = levy_exponent(model, xi)
    ev = lambda vals: xi.evaluate_array(0.0, vals)[:, 0] + 1  # noqa: E731
    return complex(np.exp(t * kappa) * _scheduled_factor(model, t, ev))
