"""Command-line entry point.

Exit codes: 0 success or pass, 1 a check or verification failed, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import characteristics as ch
from . import paths as pth
from .expr import DimensionMismatchError, ExprError, _max_var, simplify, wirtinger_diff
from .parser import ParseError, parse, pretty_expr
from .uclass import Composition, check_u, compose_check

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Validated options for one run; also loadable from a TOML file for ``verify``."""

    subcommand: str
    model: str | None = None
    expr: str | None = None
    outer: str | None = None
    inner: str | None = None
    var: int | None = None
    conj: bool = False
    dim: int | None = None
    horizon: float = 1.0
    time: float = 0.0
    trunc: str = "id"
    u: list[float] = field(default_factory=list)
    t: float = 1.0
    alpha: str | None = None
    signed: bool = False
    dt: float = 2.0**-9
    paths: int = 64
    seed: int = 0
    tol: float | None = None
    identity: str | None = None
    params: dict = field(default_factory=dict)
    order: bool = False
    force: bool = False
    out: str | None = None
    format: str = "json"

    def validate(self) -> "RunConfig":
        if self.horizon <= 0:
            raise UsageError("--horizon must be positive")
        if self.t < 0:
            raise UsageError("--t must be non-negative")
        if self.subcommand in ("simulate", "verify"):
            if self.t <= 0:
                raise UsageError("--t must be positive")
            if self.dt <= 0:
                raise UsageError("--dt must be positive")
            if self.paths < 1:
                raise UsageError("--paths must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise UsageError("--seed must be a 64-bit unsigned integer")
        if self.format not in ("json", "csv", "text"):
            raise UsageError("--format must be json, csv or text")
        if self.var is not None and not 1 <= self.var <= 9:
            raise UsageError("--var must be between 1 and 9")
        return self


_CONFIG_KEYS = {f.name for f in dataclasses.fields(RunConfig)} - {"subcommand"}


def load_config(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    unknown = set(data) - _CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return data


# ---------------------------------------------------------------------------
# output helpers

def _clean(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (complex, np.complexfloating)):
        return [_clean(float(obj.real)), _clean(float(obj.imag))]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=False) + "\n"


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# argument parsing

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="emery", description="Representing functions, Levy characteristics, paths.")
    sub = ap.add_subparsers(dest="subcommand", required=True)

    def add(name: str, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--out", help="write output to this file instead of stdout")
        return p

    p = add("diff", "Wirtinger derivative of an expression")
    p.add_argument("--expr", required=True)
    p.add_argument("--var", type=int, required=True)
    p.add_argument("--conj", action="store_true", help="differentiate along the conjugate variable")
    p.add_argument("--dim", type=int)

    p = add("check-u", "probe class membership; exit 0 iff it passes")
    p.add_argument("--expr", required=True)
    p.add_argument("--horizon", type=float)
    p.add_argument("--dim", type=int)

    p = add("compose", "compose two functions after checking both")
    p.add_argument("--outer", required=True)
    p.add_argument("--inner", required=True)
    p.add_argument("--horizon", type=float)
    p.add_argument("--dim", type=int)

    p = add("transform", "characteristics of xi o X")
    p.add_argument("--model", required=True)
    p.add_argument("--expr", required=True)
    p.add_argument("--trunc", default=None, help="id, zero or ball:R")
    p.add_argument("--time", type=float, help="time at which time-dependent coefficients are evaluated")

    p = add("cf", "characteristic function table")
    p.add_argument("--model", required=True)
    p.add_argument("--u", required=True, help="comma-separated u values (one component per value for dim 1)")
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--format", choices=("text", "json"), default="text")

    p = add("mellin", "E |E(X)_t|^alpha")
    p.add_argument("--model", required=True)
    p.add_argument("--alpha", required=True)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--signed", action="store_true")

    p = add("simulate", "simulate paths and dump them as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--dt", type=float, required=True)
    p.add_argument("--paths", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)

    p = add("verify", "check an identity pathwise; exit 0 iff the discrepancy is within tolerance")
    p.add_argument("--config", help="TOML file with run options")
    p.add_argument("--identity")
    p.add_argument("--model")
    p.add_argument("--t", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--paths", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--order", action="store_true", default=None)
    p.add_argument("--force", action="store_true", default=None)
    return ap


def _config_from_args(ns: argparse.Namespace) -> RunConfig:
    data: dict = {}
    if getattr(ns, "config", None):
        data.update(load_config(ns.config))
    params = dict(data.get("params", {}))
    for item in getattr(ns, "param", []) or []:
        if "=" not in item:
            raise UsageError(f"--param expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        params[k.strip()] = v.strip()
    for key, value in vars(ns).items():
        if key in ("config", "param") or value is None:
            continue
        data[key] = value
    if "u" in data and isinstance(data["u"], str):
        try:
            data["u"] = [float(v) for v in data["u"].split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"--u must be comma-separated numbers, got {data['u']!r}") from None
    data["params"] = params
    try:
        cfg = RunConfig(**data)
    except TypeError as exc:
        raise UsageError(str(exc)) from None
    return cfg.validate()


def _infer_dim(*texts: str) -> int:
    used = 1
    for text in texts:
        f = parse(text, 9)
        used = max(used, max(_max_var(c) for c in f.components))
    return used


def _load_model(path: str | None) -> ch.LevyModel:
    if not path:
        raise UsageError("--model is required")
    try:
        return ch.LevyModel.from_toml(path)
    except OSError as exc:
        raise UsageError(f"cannot read model {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"malformed TOML in {path}: {exc}") from None
    except (ch.ModelError, ValueError) as exc:
        raise UsageError(f"invalid model {path}: {exc}") from None


# ---------------------------------------------------------------------------
# subcommands

def _cmd_diff(cfg: RunConfig) -> int:
    dim = cfg.dim or max(_infer_dim(cfg.expr), cfg.var)
    if cfg.var > dim:
        raise UsageError(f"--var {cfg.var} exceeds the dimension {dim}")
    f = parse(cfg.expr, dim)
    parts = [pretty_expr(simplify(wirtinger_diff(c, cfg.var, cfg.conj)), dim) for c in f.components]
    _emit("; ".join(parts) + "\n", cfg.out)
    return EXIT_OK


def _cmd_check_u(cfg: RunConfig) -> int:
    f = parse(cfg.expr, cfg.dim or _infer_dim(cfg.expr))
    rep = check_u(f, cfg.horizon)
    _emit(dumps({"expression": cfg.expr, **rep.to_dict()}), cfg.out)
    return EXIT_OK if rep.passes else EXIT_FAIL


def _cmd_compose(cfg: RunConfig) -> int:
    inner = parse(cfg.inner, cfg.dim or _infer_dim(cfg.inner))
    outer = parse(cfg.outer, inner.dim_out)
    res = compose_check(outer, inner, cfg.horizon)
    _emit(dumps({"outer": cfg.outer, "inner": cfg.inner, **res.to_dict()}), cfg.out)
    return EXIT_OK if isinstance(res, Composition) else EXIT_FAIL


def _cmd_transform(cfg: RunConfig) -> int:
    model = _load_model(cfg.model)
    xi = parse(cfg.expr, model.dim)
    try:
        trunc = ch.Truncation.parse(cfg.trunc)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        res = ch.transform(model, xi, trunc, t=cfg.time)
    except ch.NotUniversal as exc:
        _emit(dumps({"expression": cfg.expr, "accepted": False, "report": exc.report.to_dict()}), cfg.out)
        return EXIT_FAIL
    except ch.AtomOutsideDomain as exc:
        _emit(dumps({"expression": cfg.expr, "accepted": False, "error": str(exc)}), cfg.out)
        return EXIT_FAIL
    _emit(dumps({"expression": cfg.expr, **res.to_dict()}), cfg.out)
    return EXIT_OK


def _cmd_cf(cfg: RunConfig) -> int:
    model = _load_model(cfg.model)
    if not cfg.u:
        raise UsageError("--u needs at least one value")
    if model.dim == 1:
        rows = [(u, ch.char_fn(model, [u], cfg.t)) for u in cfg.u]
    else:
        if len(cfg.u) not in (model.dim, 2 * model.dim):
            raise UsageError(f"--u must list {model.dim} or {2 * model.dim} values for this model")
        rows = [(cfg.u, ch.char_fn(model, cfg.u, cfg.t))]
    if cfg.format == "json":
        _emit(dumps({"t": cfg.t, "values": [{"u": u, "value": v} for u, v in rows]}), cfg.out)
    else:
        lines = ["u re im"]
        for u, v in rows:
            us = ",".join(repr(float(x)) for x in (u if isinstance(u, list) else [u]))
            lines.append(f"{us} {v.real!r} {v.imag!r}")
        _emit("\n".join(lines) + "\n", cfg.out)
    return EXIT_OK


def _cmd_mellin(cfg: RunConfig) -> int:
    model = _load_model(cfg.model)
    try:
        alpha = pth._as_complex(cfg.alpha)
    except pth.IdentityError as exc:
        raise UsageError(str(exc)) from None
    try:
        v = ch.mellin(model, alpha, cfg.t, cfg.signed)
    except ch.AtomAtMinusOne as exc:
        _emit(dumps({"error": str(exc)}), cfg.out)
        return EXIT_FAIL
    except ch.ModelError as exc:
        raise UsageError(str(exc)) from None
    _emit(dumps({"alpha": alpha, "t": cfg.t, "signed": cfg.signed, "value": v}), cfg.out)
    return EXIT_OK


def _cmd_simulate(cfg: RunConfig) -> int:
    model = _load_model(cfg.model)
    try:
        ens = pth.simulate(model, cfg.t, cfg.dt, cfg.paths, cfg.seed)
    except pth.PathError as exc:
        raise UsageError(str(exc)) from None
    except pth.CovarianceError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_FAIL
    if cfg.out:
        with open(cfg.out, "w", encoding="utf-8", newline="\n") as fh:
            ens.write_csv(fh)
        sys.stdout.write(dumps({"paths": len(ens), "T": ens.T, "dt": ens.dt, "seed": ens.master_seed,
                                "events": int(sum(len(p.event_times) for p in ens)), "out": cfg.out}))
    else:
        ens.write_csv(sys.stdout)
    return EXIT_OK


def _cmd_verify(cfg: RunConfig) -> int:
    if not cfg.identity:
        raise UsageError("--identity is required")
    model = _load_model(cfg.model)
    params = dict(cfg.params)
    if cfg.force:
        params["force"] = True
    try:
        rep = pth.verify_identity(cfg.identity, model, params, n_paths=cfg.paths, dt=cfg.dt, T=cfg.t,
                                  master_seed=cfg.seed, order=cfg.order, tol=cfg.tol)
    except pth.IdentityRejected as exc:
        _emit(dumps({"identity": cfg.identity, "passed": False, **exc.rejection.to_dict(),
                     "hint": "use --force to evaluate anyway"}), cfg.out)
        return EXIT_FAIL
    except (pth.IdentityError, pth.PathError) as exc:
        raise UsageError(str(exc)) from None
    _emit(dumps(rep.to_dict()), cfg.out)
    tol = "n/a" if rep.tolerance is None else f"{rep.tolerance:.6g}"
    disc = "n/a" if rep.max_sup_discrepancy is None else f"{rep.max_sup_discrepancy:.6g}"
    sys.stderr.write(f"{cfg.identity}: max sup discrepancy {disc}, tolerance {tol}: "
                     f"{'PASS' if rep.passed else 'FAIL'}\n")
    return EXIT_OK if rep.passed else EXIT_FAIL


_COMMANDS = {
    "diff": _cmd_diff, "check-u": _cmd_check_u, "compose": _cmd_compose, "transform": _cmd_transform,
    "cf": _cmd_cf, "mellin": _cmd_mellin, "simulate": _cmd_simulate, "verify": _cmd_verify,
}


def main(argv: Sequence[str] | None = None) -> int:
    ap = _parser()
    try:
        ns = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        cfg = _config_from_args(ns)
        return _COMMANDS[cfg.subcommand](cfg)
    except ParseError as exc:
        sys.stderr.write(exc.annotate() + "\n")
        return EXIT_USAGE
    except (UsageError, DimensionMismatchError, ExprError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
