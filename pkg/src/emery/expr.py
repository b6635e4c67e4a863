"""Immutable symbolic expressions over complex variables.

Nodes are hash-consed: constructing a node that is structurally equal to a
live one returns the same object, so structural equality is identity and
memoisation by ``id`` is cheap. Evaluation follows principal branches and
propagates a dedicated :data:`NAN` sentinel instead of floating-point NaN.
"""

from __future__ import annotations

import cmath
import math
import threading
import weakref
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Callable, Iterable, Mapping, Sequence, Union

import numpy as np

__all__ = [
    "NAN", "ComplexValue", "is_nan", "as_value", "to_pair", "from_pair",
    "Expr", "Const", "Var", "Time", "Param", "Add", "Mul", "Neg", "Pow",
    "Exp", "Log", "Abs", "Conj", "Re", "Im", "Sgn",
    "ExprError", "UnboundParameterError", "VariableIndexError",
    "DimensionMismatchError", "NonDifferentiableAtZero",
    "RepFunction", "WirtingerJet",
    "evaluate", "compile_numpy", "wirtinger_diff", "simplify", "substitute",
    "jet_at_zero", "jets_at_zero", "hat_gradient", "hat_from_wirtinger",
    "is_provably_real", "contains_time", "params_of", "walk",
]


# ---------------------------------------------------------------------------
# values

class _NaN:
    """The distinguished non-number. Every arithmetic operation absorbs it."""

    __slots__ = ()
    _instance: "_NaN | None" = None

    def __new__(cls) -> "_NaN":
        if cls._instance is None:
            cls._instance = object.__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "NAN"

    def __reduce__(self):
        return (_NaN, ())

    def _absorb(self, *_args) -> "_NaN":
        return self

    __add__ = __radd__ = __sub__ = __rsub__ = _absorb
    __mul__ = __rmul__ = __truediv__ = __rtruediv__ = _absorb
    __pow__ = __rpow__ = __neg__ = __pos__ = __abs__ = _absorb
    conjugate = _absorb


NAN = _NaN()
ComplexValue = Union[complex, _NaN]


def is_nan(v: object) -> bool:
    return v is NAN


def as_value(v) -> ComplexValue:
    """Coerce a number to a ComplexValue; non-finite floats become NAN."""
    if v is NAN:
        return NAN
    c = complex(v)
    if not (math.isfinite(c.real) and math.isfinite(c.imag)):
        return NAN
    # drop signed zeros so that interning and branch cuts behave predictably
    return complex(c.real + 0.0, c.imag + 0.0)


def to_pair(v: ComplexValue) -> tuple[float, float] | None:
    return None if v is NAN else (v.real, v.imag)


def from_pair(pair: Sequence[float] | None) -> ComplexValue:
    if pair is None:
        return NAN
    re, im = pair
    return as_value(complex(float(re), float(im)))


# ---------------------------------------------------------------------------
# errors

class ExprError(Exception):
    pass


class UnboundParameterError(ExprError, KeyError):
    pass


class VariableIndexError(ExprError, IndexError):
    pass


class DimensionMismatchError(ExprError, ValueError):
    pass


class NonDifferentiableAtZero(ExprError, ValueError):
    """Raised when a component has no finite real derivative at the origin."""

    def __init__(self, component: int, direction: str, t: float, detail: str = ""):
        self.component = component
        self.direction = direction
        self.t = t
        msg = f"component {component} is not differentiable at 0 along {direction} (t={t:g})"
        super().__init__(msg + (f": {detail}" if detail else ""))


# ---------------------------------------------------------------------------
# nodes

class Expr:
    """Base class of all expression nodes."""

    __slots__ = ("_args", "__weakref__")
    _table: "weakref.WeakValueDictionary[tuple, Expr]" = weakref.WeakValueDictionary()
    _lock = threading.Lock()
    arity = 0

    def __new__(cls, *args):
        key = (cls,) + args
        with Expr._lock:
            node = Expr._table.get(key)
            if node is None:
                node = object.__new__(cls)
                object.__setattr__(node, "_args", args)
                Expr._table[key] = node
        return node

    def __setattr__(self, name, value):
        raise AttributeError("expressions are immutable")

    def __reduce__(self):
        return (type(self), self._args)

    @property
    def children(self) -> tuple["Expr", ...]:
        return self._args[: self.arity]

    def __repr__(self) -> str:
        return f"{type(self).__name__}({', '.join(map(repr, self._args))})"

    def __str__(self) -> str:
        from .parser import pretty_expr

        return pretty_expr(self)

    # construction sugar
    def __add__(self, other):
        return Add(self, _lift(other))

    def __radd__(self, other):
        return Add(_lift(other), self)

    def __sub__(self, other):
        return Add(self, _negate(_lift(other)))

    def __rsub__(self, other):
        return Add(_lift(other), _negate(self))

    def __mul__(self, other):
        return Mul(self, _lift(other))

    def __rmul__(self, other):
        return Mul(_lift(other), self)

    def __truediv__(self, other):
        return Mul(self, Pow(_lift(other), -1))

    def __rtruediv__(self, other):
        return Mul(_lift(other), Pow(self, -1))

    def __neg__(self):
        return _negate(self)

    def __pow__(self, exponent):
        if isinstance(exponent, Expr):
            if not isinstance(exponent, Const):
                raise TypeError("exponent must be a constant")
            exponent = exponent.value
        return Pow(self, exponent)

    def conj(self):
        return Conj(self)


def _lift(v) -> Expr:
    return v if isinstance(v, Expr) else Const(v)


def _negate(e: Expr) -> Expr:
    # matches the parser, which folds the sign into literal constants
    if isinstance(e, Const) and e.value is not NAN:
        return Const(-e.value)
    return Neg(e)


class Const(Expr):
    __slots__ = ()

    def __new__(cls, value):
        return super().__new__(cls, as_value(value))

    @property
    def value(self) -> ComplexValue:
        return self._args[0]


class Var(Expr):
    __slots__ = ()

    def __new__(cls, index: int):
        index = int(index)
        if index < 1:
            raise VariableIndexError(f"variable index must be >= 1, got {index}")
        return super().__new__(cls, index)

    @property
    def index(self) -> int:
        return self._args[0]


class Time(Expr):
    __slots__ = ()

    def __new__(cls):
        return super().__new__(cls)


class Param(Expr):
    __slots__ = ()

    def __new__(cls, name: str):
        return super().__new__(cls, str(name))

    @property
    def name(self) -> str:
        return self._args[0]


class _Binary(Expr):
    __slots__ = ()
    arity = 2

    def __new__(cls, left: Expr, right: Expr):
        return super().__new__(cls, _lift(left), _lift(right))

    @property
    def left(self) -> Expr:
        return self._args[0]

    @property
    def right(self) -> Expr:
        return self._args[1]


class Add(_Binary):
    __slots__ = ()


class Mul(_Binary):
    __slots__ = ()


class _Unary(Expr):
    __slots__ = ()
    arity = 1

    def __new__(cls, arg: Expr):
        return super().__new__(cls, _lift(arg))

    @property
    def arg(self) -> Expr:
        return self._args[0]


class Neg(_Unary):
    __slots__ = ()


class Exp(_Unary):
    __slots__ = ()


class Log(_Unary):
    __slots__ = ()


class Abs(_Unary):
    __slots__ = ()


class Conj(_Unary):
    __slots__ = ()


class Re(_Unary):
    __slots__ = ()


class Im(_Unary):
    __slots__ = ()


class Sgn(_Unary):
    """Sign of the real part: locally constant, NAN where the real part is 0."""

    __slots__ = ()


class Pow(Expr):
    __slots__ = ()
    arity = 1

    def __new__(cls, base: Expr, exponent):
        e = as_value(exponent)
        if e is NAN:
            raise ExprError("exponent must be a finite constant")
        return super().__new__(cls, _lift(base), e)

    @property
    def base(self) -> Expr:
        return self._args[0]

    @property
    def exponent(self) -> complex:
        return self._args[1]


ZERO = Const(0)
ONE = Const(1)


# ---------------------------------------------------------------------------
# traversal helpers

@lru_cache(maxsize=16384)
def _program(f: Expr) -> tuple[tuple[Expr, tuple[int, ...]], ...]:
    """Unique nodes of ``f`` in post-order, each with its children's slots."""
    slot: dict[int, int] = {}
    order: list[tuple[Expr, tuple[int, ...]]] = []
    stack: list[tuple[Expr, bool]] = [(f, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in slot:
            continue
        if expanded:
            slot[id(node)] = len(order)
            order.append((node, tuple(slot[id(c)] for c in node.children)))
        else:
            stack.append((node, True))
            for c in reversed(node.children):
                if id(c) not in slot:
                    stack.append((c, False))
    return tuple(order)


def walk(f: Expr) -> Iterable[Expr]:
    """Each distinct node of ``f`` once, children before parents."""
    return (node for node, _ in _program(f))


@lru_cache(maxsize=16384)
def contains_time(f: Expr) -> bool:
    return any(isinstance(n, Time) for n in walk(f))


@lru_cache(maxsize=16384)
def params_of(f: Expr) -> frozenset[str]:
    return frozenset(n.name for n in walk(f) if isinstance(n, Param))


@lru_cache(maxsize=16384)
def _max_var(f: Expr) -> int:
    return max((n.index for n in walk(f) if isinstance(n, Var)), default=0)


# ---------------------------------------------------------------------------
# scalar evaluation

def _is_int(c: complex) -> bool:
    return c.imag == 0.0 and float(c.real).is_integer() and abs(c.real) < 2**31


def _spow(b: complex, c: complex) -> ComplexValue:
    if b == 0:
        if c == 0:
            return 1 + 0j
        return 0j if c.real > 0 else NAN
    if _is_int(c):
        return b ** int(c.real)
    if b.imag == 0.0 and b.real > 0 and c.imag == 0.0:
        return complex(b.real ** c.real)
    b = complex(b.real, b.imag + 0.0)
    return cmath.exp(c * cmath.log(b))


def _slog(z: complex) -> ComplexValue:
    if z == 0:
        return NAN
    return cmath.log(complex(z.real, z.imag + 0.0))


def _ssgn(z: complex) -> ComplexValue:
    if z.real == 0:
        return NAN
    return 1 + 0j if z.real > 0 else -1 + 0j


def _sexp(z: complex) -> ComplexValue:
    try:
        return cmath.exp(z)
    except OverflowError:
        return NAN


_SCALAR: dict[type, Callable] = {
    Add: lambda a, b: a + b,
    Mul: lambda a, b: a * b,
    Neg: lambda a: -a,
    Exp: _sexp,
    Log: _slog,
    Abs: lambda a: complex(abs(a)),
    Conj: lambda a: a.conjugate(),
    Re: lambda a: complex(a.real),
    Im: lambda a: complex(a.imag),
    Sgn: _ssgn,
}


def evaluate(f: Expr, t: float = 0.0, x: Sequence = (), params: Mapping[str, object] | None = None) -> ComplexValue:
    """Value of ``f`` at time ``t`` and point ``x``; NAN outside the domain.

    >>> evaluate(Exp(Var(1)) - 1, 0.0, [0])
    0j
    >>> evaluate(Log(1 + Var(1)), 0.0, [-1])
    NAN
    """
    params = params or {}
    xs = [as_value(v) for v in x]
    vals: list[ComplexValue] = []
    for node, kids in _program(f):
        if isinstance(node, Const):
            v = node.value
        elif isinstance(node, Var):
            if node.index > len(xs):
                raise VariableIndexError(f"id{node.index} used with a {len(xs)}-dimensional point")
            v = xs[node.index - 1]
        elif isinstance(node, Time):
            v = complex(t)
        elif isinstance(node, Param):
            if node.name not in params:
                raise UnboundParameterError(node.name)
            v = as_value(params[node.name])
        else:
            args = [vals[k] for k in kids]
            if any(a is NAN for a in args):
                v = NAN
            elif isinstance(node, Pow):
                v = _spow(args[0], node.exponent)
            else:
                v = _SCALAR[type(node)](*args)
            if v is not NAN:
                v = as_value(v)
        vals.append(v)
    return vals[-1]


# ---------------------------------------------------------------------------
# vectorised evaluation

def _apow(b: np.ndarray, c: complex) -> np.ndarray:
    if _is_int(c):
        n = int(c.real)
        if n >= 0:
            return b**n
        safe = np.where(b == 0, 1.0, b)
        return np.where(b == 0, np.nan, safe**n)
    bn = b.real + 1j * (b.imag + 0.0)
    safe = np.where(bn == 0, 1.0, bn)
    out = np.exp(c * np.log(safe))
    at_zero = (0.0 + 0j) if c.real > 0 else complex(np.nan, np.nan)
    return np.where(bn == 0, at_zero, out)


def _alog(z: np.ndarray) -> np.ndarray:
    zn = z.real + 1j * (z.imag + 0.0)
    safe = np.where(zn == 0, 1.0, zn)
    return np.where(zn == 0, np.nan, np.log(safe))


def _asgn(z: np.ndarray) -> np.ndarray:
    r = z.real
    return np.where(r > 0, 1.0, np.where(r < 0, -1.0, np.nan)) + 0j


_VECTOR: dict[type, Callable] = {
    Add: np.add,
    Mul: np.multiply,
    Neg: np.negative,
    Exp: np.exp,
    Log: _alog,
    Abs: lambda a: np.abs(a) + 0j,
    Conj: np.conj,
    Re: lambda a: a.real + 0j,
    Im: lambda a: a.imag + 0j,
    Sgn: _asgn,
}


@lru_cache(maxsize=16384)
def compile_numpy(f: Expr) -> Callable[..., np.ndarray]:
    """Vectorised evaluator ``g(t, X, params) -> complex array``.

    ``X`` has shape ``(..., d)``; ``t`` and parameter values broadcast against
    ``X[..., 0]``. Points outside the domain come back as complex nan.
    """
    prog = _program(f)

    def run(t, X, params: Mapping[str, object] | None = None) -> np.ndarray:
        X = np.asarray(X, dtype=complex)
        shape = X.shape[:-1]
        params = params or {}
        vals: list[np.ndarray] = []
        with np.errstate(all="ignore"):
            for node, kids in prog:
                if isinstance(node, Const):
                    v = np.full(shape, np.nan + 0j if node.value is NAN else node.value)
                elif isinstance(node, Var):
                    if node.index > X.shape[-1]:
                        raise VariableIndexError(f"id{node.index} used with {X.shape[-1]} inputs")
                    v = X[..., node.index - 1]
                elif isinstance(node, Time):
                    v = np.broadcast_to(np.asarray(t, dtype=complex), shape)
                elif isinstance(node, Param):
                    if node.name not in params:
                        raise UnboundParameterError(node.name)
                    v = np.broadcast_to(np.asarray(params[node.name], dtype=complex), shape)
                elif isinstance(node, Pow):
                    v = _apow(vals[kids[0]], node.exponent)
                else:
                    v = _VECTOR[type(node)](*(vals[k] for k in kids))
                vals.append(v)
            out = np.array(vals[-1], dtype=complex)
            bad = ~np.isfinite(out)
            if bad.any():
                out[bad] = complex(np.nan, np.nan)
        return out

    return run


# ---------------------------------------------------------------------------
# smart constructors used by differentiation

def _c(v) -> Const:
    return Const(v)


def _is_const(e: Expr, v=None) -> bool:
    return isinstance(e, Const) and (v is None or e.value == v)


def _sadd(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0):
        return b
    if _is_const(b, 0):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    return Add(a, b)


def _smul(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0) or _is_const(b, 0):
        return ZERO
    if _is_const(a, 1):
        return b
    if _is_const(b, 1):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    return Mul(a, b)


def _sneg(a: Expr) -> Expr:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def _sconj(a: Expr) -> Expr:
    if isinstance(a, Const):
        return Const(a.value.conjugate())
    if isinstance(a, Conj):
        return a.arg
    return Conj(a)


def _spow_e(b: Expr, c: complex) -> Expr:
    if c == 0:
        return ONE
    if c == 1:
        return b
    return Pow(b, c)


@lru_cache(maxsize=65536)
def _raw_diff(f: Expr, k: int, conjugated: bool) -> Expr:
    d = lambda e: _raw_diff(e, k, conjugated)  # noqa: E731
    d_other = lambda e: _raw_diff(e, k, not conjugated)  # noqa: E731
    if isinstance(f, (Const, Time, Param)):
        return ZERO
    if isinstance(f, Var):
        return ONE if (f.index == k and not conjugated) else ZERO
    if isinstance(f, Add):
        return _sadd(d(f.left), d(f.right))
    if isinstance(f, Mul):
        return _sadd(_smul(d(f.left), f.right), _smul(f.left, d(f.right)))
    if isinstance(f, Neg):
        return _sneg(d(f.arg))
    if isinstance(f, Pow):
        db = d(f.base)
        if _is_const(db, 0):
            return ZERO
        c = f.exponent
        return _smul(_smul(_c(c), _spow_e(f.base, c - 1)), db)
    if isinstance(f, Exp):
        return _smul(f, d(f.arg))
    if isinstance(f, Log):
        return _smul(Pow(f.arg, -1), d(f.arg))
    if isinstance(f, Conj):
        return _sconj(d_other(f.arg))
    if isinstance(f, Re):
        return _smul(_c(0.5), _sadd(d(f.arg), _sconj(d_other(f.arg))))
    if isinstance(f, Im):
        return _smul(_c(-0.5j), _sadd(d(f.arg), _sneg(_sconj(d_other(f.arg)))))
    if isinstance(f, Abs):
        e = f.arg
        inner = _sadd(_smul(_sconj(e), d(e)), _smul(e, _sconj(d_other(e))))
        if _is_const(inner, 0):
            return ZERO
        return _smul(_smul(_c(0.5), Pow(f, -1)), inner)
    if isinstance(f, Sgn):
        return ZERO
    raise TypeError(f"unknown node {type(f).__name__}")


@lru_cache(maxsize=65536)
def wirtinger_diff(f: Expr, k: int, conjugated: bool = False) -> Expr:
    """Symbolic d f / d x_k (or d f / d conj(x_k) when ``conjugated``).

    Modulus, real part, imaginary part, and conjugation are differentiated
    through their rewritings in terms of ``e`` and ``conj(e)``; the sign
    function has derivative 0 wherever it is defined.
    """
    if k < 1:
        raise VariableIndexError(f"variable index must be >= 1, got {k}")
    return simplify(_raw_diff(f, k, bool(conjugated)))


# ---------------------------------------------------------------------------
# simplification

@lru_cache(maxsize=65536)
def is_provably_real(f: Expr) -> bool:
    if isinstance(f, Const):
        return f.value is not NAN and f.value.imag == 0
    if isinstance(f, (Time, Abs, Re, Im, Sgn)):
        return True
    if isinstance(f, (Add, Mul)):
        return is_provably_real(f.left) and is_provably_real(f.right)
    if isinstance(f, (Neg, Exp, Conj)):
        return is_provably_real(f.arg)
    if isinstance(f, Pow):
        return is_provably_real(f.base) and _is_int(f.exponent)
    return False


def _fold(node_type: type, args: list[ComplexValue], exponent=None) -> ComplexValue:
    if any(a is NAN for a in args):
        return NAN
    if node_type is Pow:
        v = _spow(args[0], exponent)
    else:
        v = _SCALAR[node_type](*args)
    return NAN if v is NAN else as_value(v)


def _terms(e: Expr, out: list[Expr]) -> None:
    if isinstance(e, Add):
        _terms(e.left, out)
        _terms(e.right, out)
    else:
        out.append(e)


def _factors(e: Expr, out: list[Expr]) -> None:
    if isinstance(e, Mul):
        _factors(e.left, out)
        _factors(e.right, out)
    else:
        out.append(e)


def _simplify_add(node: Add) -> Expr:
    terms: list[Expr] = []
    _terms(node, terms)
    const = 0j
    rest: list[Expr] = []
    for term in terms:
        if isinstance(term, Const) and term.value is not NAN:
            const += term.value
        else:
            rest.append(term)
    # cancel u + (-u)
    kept: list[Expr | None] = list(rest)
    for i, a in enumerate(kept):
        if a is None:
            continue
        target = a.arg if isinstance(a, Neg) else Neg(a)
        for j in range(i + 1, len(kept)):
            if kept[j] is target:
                kept[i] = kept[j] = None
                break
    rest = [a for a in kept if a is not None]
    const = as_value(const)
    if not rest:
        return Const(const)
    out = rest[0]
    for a in rest[1:]:
        out = Add(out, a)
    if const != 0:
        out = Add(out, Const(const))
    return out


def _merge_exponent(outer: complex, inner: complex) -> bool:
    # (z^a)^b == z^(a*b) on the principal branch when b is an integer, or
    # when a is real in (-1, 1] so that a*Arg(z) stays in (-pi, pi].
    return _is_int(outer) or (inner.imag == 0 and -1 < inner.real <= 1)


def _simplify_mul(node: Mul) -> Expr:
    factors: list[Expr] = []
    _factors(node, factors)
    const = 1 + 0j
    negate = False
    groups: dict[int, list] = {}
    order: list[int] = []
    for fac in factors:
        if isinstance(fac, Neg):
            negate = not negate
            fac = fac.arg
        if isinstance(fac, Const) and fac.value is not NAN:
            const *= fac.value
            continue
        base, power = (fac.base, fac.exponent) if isinstance(fac, Pow) else (fac, 1 + 0j)
        if id(base) in groups:
            groups[id(base)][1] += power
        else:
            groups[id(base)] = [base, power]
            order.append(id(base))
    if negate:
        const = -const
    const = as_value(const)
    if const == 0:
        return ZERO
    rest = []
    for key in order:
        base, power = groups[key]
        power = as_value(power)
        if power == 0:
            continue
        rest.append(_simplify_pow(Pow(base, power)) if power != 1 else base)
    if not rest:
        return Const(const)
    out = rest[0]
    for a in rest[1:]:
        out = Mul(out, a)
    if const == 1:
        return out
    if const == -1:
        return Neg(out)
    return Mul(Const(const), out)


def _simplify_pow(node: Pow) -> Expr:
    base, c = node.base, node.exponent
    if c == 0:
        return ONE
    if c == 1:
        return base
    if isinstance(base, Const):
        v = _fold(Pow, [base.value], c)
        return node if v is NAN else Const(v)
    if isinstance(base, Pow) and _merge_exponent(c, base.exponent):
        return _simplify_pow(Pow(base.base, as_value(base.exponent * c)))
    if isinstance(base, Exp) and _is_int(c):
        return Exp(simplify(Mul(Const(c), base.arg)))
    return node


def _simplify_node(node: Expr) -> Expr:
    if isinstance(node, (Const, Var, Time, Param)):
        return node
    kids = node.children
    if all(isinstance(k, Const) for k in kids):
        v = _fold(type(node), [k.value for k in kids], getattr(node, "exponent", None))
        if v is not NAN:
            return Const(v)
    if isinstance(node, Add):
        return _simplify_add(node)
    if isinstance(node, Mul):
        return _simplify_mul(node)
    if isinstance(node, Pow):
        return _simplify_pow(node)
    a = node.arg
    if isinstance(node, Neg):
        if isinstance(a, Neg):
            return a.arg
        return node
    if isinstance(node, Exp):
        if isinstance(a, Log):
            return a.arg
        return node
    if isinstance(node, Log):
        if isinstance(a, Exp) and is_provably_real(a.arg):
            return a.arg
        return node
    if isinstance(node, Abs):
        if isinstance(a, (Abs, Neg, Conj)):
            return Abs(a.arg) if not isinstance(a, Abs) else a
        return node
    if isinstance(node, Conj):
        if isinstance(a, Conj):
            return a.arg
        if is_provably_real(a):
            return a
        return node
    if isinstance(node, Re):
        return a if is_provably_real(a) else node
    if isinstance(node, Im):
        return ZERO if is_provably_real(a) else node
    return node


def _rebuild(node: Expr, kids: list[Expr]) -> Expr:
    if list(node.children) == kids:
        return node
    if isinstance(node, Pow):
        return Pow(kids[0], node.exponent)
    return type(node)(*kids)


@lru_cache(maxsize=65536)
def simplify(f: Expr) -> Expr:
    """Conservative rewriting; preserves values wherever both sides are finite.

    >>> simplify(Exp(Log(1 + Var(1))) - 1) is Var(1)
    True
    """
    done: dict[int, Expr] = {}
    for node, _ in _program(f):
        kids = [done[id(c)] for c in node.children]
        done[id(node)] = _simplify_node(_rebuild(node, kids))
    return done[id(f)]


def _replace_vars(f: Expr, mapping: Sequence[Expr]) -> Expr:
    done: dict[int, Expr] = {}
    for node, _ in _program(f):
        if isinstance(node, Var):
            if node.index > len(mapping):
                raise DimensionMismatchError(f"id{node.index} has no substitute")
            done[id(node)] = mapping[node.index - 1]
        else:
            done[id(node)] = _rebuild(node, [done[id(c)] for c in node.children])
    return done[id(f)]


# ---------------------------------------------------------------------------
# representing functions and jets

@dataclass(frozen=True, eq=False)
class RepFunction:
    """A vector of ``dim_out`` expressions in ``dim_in`` complex inputs."""

    components: tuple[Expr, ...]
    dim_in: int

    def __post_init__(self):
        comps = tuple(_lift(c) for c in self.components)
        object.__setattr__(self, "components", comps)
        if not comps:
            raise DimensionMismatchError("a representing function needs at least one component")
        if self.dim_in < 1:
            raise DimensionMismatchError("dim_in must be >= 1")
        used = max(_max_var(c) for c in comps)
        if used > self.dim_in:
            raise VariableIndexError(f"id{used} exceeds the declared dimension {self.dim_in}")

    @classmethod
    def scalar(cls, expr: Expr, dim_in: int = 1) -> "RepFunction":
        return cls((expr,), dim_in)

    @property
    def dim_out(self) -> int:
        return len(self.components)

    @cached_property
    def time_dependent(self) -> bool:
        return any(contains_time(c) for c in self.components)

    @cached_property
    def params(self) -> frozenset[str]:
        return frozenset().union(*(params_of(c) for c in self.components))

    @cached_property
    def analytic_at_zero(self) -> bool:
        """True when every conjugate-direction derivative reduces to 0 symbolically."""
        return all(
            wirtinger_diff(c, k, True) is ZERO
            for c in self.components
            for k in range(1, self.dim_in + 1)
        )

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, RepFunction)
            and self.dim_in == other.dim_in
            and all(a is b for a, b in zip(self.components, other.components))
            and len(self.components) == len(other.components)
        )

    def __hash__(self) -> int:
        return hash((self.dim_in, tuple(id(c) for c in self.components)))

    def __call__(self, t: float, x: Sequence, params: Mapping | None = None) -> list[ComplexValue]:
        return [evaluate(c, t, x, params) for c in self.components]

    def evaluate_array(self, t, X, params: Mapping | None = None) -> np.ndarray:
        """Vectorised values, shape ``X.shape[:-1] + (dim_out,)``."""
        return np.stack([compile_numpy(c)(t, X, params) for c in self.components], axis=-1)

    def simplified(self) -> "RepFunction":
        return RepFunction(tuple(simplify(c) for c in self.components), self.dim_in)

    def __str__(self) -> str:
        from .parser import pretty

        return pretty(self)


def substitute(outer: RepFunction, inner: RepFunction, simplify_result: bool = True) -> RepFunction:
    """The composite ``outer(inner)``, with inner outputs feeding outer inputs."""
    if outer.dim_in != inner.dim_out:
        raise DimensionMismatchError(
            f"outer takes {outer.dim_in} inputs but inner produces {inner.dim_out}"
        )
    if inner.dim_in == inner.dim_out and inner.components == tuple(Var(k) for k in range(1, inner.dim_in + 1)):
        return outer
    comps = tuple(_replace_vars(c, inner.components) for c in outer.components)
    if simplify_result:
        comps = tuple(simplify(c) for c in comps)
    return RepFunction(comps, inner.dim_in)


@dataclass(frozen=True, eq=False)
class WirtingerJet:
    """First and second Wirtinger derivatives at the origin.

    ``hess[c, 2k + a, 2l + b]`` is the mixed derivative of component ``c``
    along ``x_k`` (a = 0) or ``conj(x_k)`` (a = 1) and likewise for ``l, b``.
    """

    grad_z: np.ndarray
    grad_zbar: np.ndarray
    hess: np.ndarray

    @property
    def dim_out(self) -> int:
        return self.grad_z.shape[0]

    @property
    def dim_in(self) -> int:
        return self.grad_z.shape[1]

    def check(self) -> np.ndarray:
        """Jet in interleaved (x, conj x) column order: shape (n, 2d)."""
        n, d = self.grad_z.shape
        out = np.empty((n, 2 * d), dtype=complex)
        out[:, 0::2] = self.grad_z
        out[:, 1::2] = self.grad_zbar
        return out


def _sigma(d: int) -> np.ndarray:
    """Maps real-lift gradients to Wirtinger gradients: D_check = D_hat @ S."""
    block = 0.5 * np.array([[1, 1], [-1j, 1j]])
    return np.kron(np.eye(d), block)


def _sigma_inv(d: int) -> np.ndarray:
    block = np.array([[1, 1j], [1, -1j]])
    return np.kron(np.eye(d), block)


def hat_from_wirtinger(check_grad: np.ndarray, check_hess: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = check_grad.shape[-1] // 2
    si = _sigma_inv(d)
    grad = check_grad @ si
    hess = np.einsum("ai,...ab,bj->...ij", si, check_hess, si)
    return grad, hess


def hat_gradient(jet: WirtingerJet) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives along (Re x_1, Im x_1, Re x_2, ...): shapes (n, 2d), (n, 2d, 2d).

    >>> g, h = hat_gradient(jet_at_zero(RepFunction.scalar(Var(1))))
    >>> g.tolist()
    [[(1+0j), 1j]]
    """
    return hat_from_wirtinger(jet.check(), jet.hess)


def _wirtinger_from_hat(grad: np.ndarray, hess: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = grad.shape[-1] // 2
    s = _sigma(d)
    return grad @ s, np.einsum("ai,...ab,bj->...ij", s, hess, s)


@lru_cache(maxsize=4096)
def _derivative_table(c: Expr, d: int) -> tuple[tuple[Expr, ...], tuple[tuple[Expr, ...], ...]]:
    """First and second Wirtinger derivatives of ``c`` in interleaved order."""
    first = tuple(wirtinger_diff(c, k // 2 + 1, bool(k % 2)) for k in range(2 * d))
    second = tuple(
        tuple(wirtinger_diff(first[i], j // 2 + 1, bool(j % 2)) for j in range(2 * d))
        for i in range(2 * d)
    )
    return first, second


_FD_STEP = 1e-5
_FD_GROWTH = 1.5
_FD_FLOOR = 1e-4
# slow blow-up such as h^-0.5 stays under the halving test; compare against a coarse step too
_FD_COARSE = 1e-3
_FD_COARSE_GROWTH = 2.0


def _direction_label(a: int) -> str:
    return f"{'Re' if a % 2 == 0 else 'Im'} x{a // 2 + 1}"


def _fd_component(c: Expr, d: int, t: float, params: Mapping | None, component: int):
    """Real-lift gradient and Hessian of ``c`` at 0 by central differences."""
    m = 2 * d
    g = compile_numpy(c)

    def lifted(points: np.ndarray) -> np.ndarray:
        z = points[..., 0::2] + 1j * points[..., 1::2]
        return g(t, z, params)

    def stencil(h: float) -> tuple[np.ndarray, np.ndarray]:
        eye = np.eye(m) * h
        f0 = lifted(np.zeros((1, m)))[0]
        fp = lifted(eye)
        fm = lifted(-eye)
        grad = (fp - fm) / (2 * h)
        hess = np.empty((m, m), dtype=complex)
        for a in range(m):
            hess[a, a] = (fp[a] - 2 * f0 + fm[a]) / h**2
        pts = []
        for a in range(m):
            for b in range(a + 1, m):
                pts += [eye[a] + eye[b], eye[a] - eye[b], -eye[a] + eye[b], -eye[a] - eye[b]]
        if pts:
            vals = lifted(np.array(pts)).reshape(-1, 4)
            idx = 0
            for a in range(m):
                for b in range(a + 1, m):
                    pp, pm, mp, mm = vals[idx]
                    hess[a, b] = hess[b, a] = (pp - pm - mp + mm) / (4 * h * h)
                    idx += 1
        return grad, hess

    g0, h0 = stencil(_FD_COARSE)
    g1, h1 = stencil(_FD_STEP)
    g2, h2 = stencil(_FD_STEP / 2)
    for a in range(m):
        _fd_check(g0[a], g1[a], g2[a], component, _direction_label(a), t)
        for b in range(m):
            _fd_check(h0[a, b], h1[a, b], h2[a, b], component, f"{_direction_label(a)}, {_direction_label(b)}", t)
    grad = (4 * g2 - g1) / 3
    hess = (4 * h2 - h1) / 3
    return grad, hess


def _fd_check(v0: complex, v1: complex, v2: complex, component: int, label: str, t: float) -> None:
    if not (np.isfinite(v0) and np.isfinite(v1) and np.isfinite(v2)):
        raise NonDifferentiableAtZero(component, label, t, "undefined near 0")
    if abs(v2) > _FD_GROWTH * abs(v1) and abs(v2) > _FD_FLOOR:
        raise NonDifferentiableAtZero(
            component, label, t, f"difference quotient grew from {abs(v1):.3g} to {abs(v2):.3g} when the step was halved"
        )
    if abs(v1) > _FD_COARSE_GROWTH * abs(v0) and abs(v1) > _FD_FLOOR:
        raise NonDifferentiableAtZero(
            component, label, t,
            f"difference quotient grew from {abs(v0):.3g} to {abs(v1):.3g} as the step shrank from {_FD_COARSE:g} to {_FD_STEP:g}",
        )


def jets_at_zero(f: RepFunction, ts: Sequence[float], params: Mapping | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Check-form jets at several times: shapes (T, n, 2d) and (T, n, 2d, 2d)."""
    ts = np.asarray(ts, dtype=float)
    d, n = f.dim_in, f.dim_out
    m = 2 * d
    grads = np.empty((len(ts), n, m), dtype=complex)
    hesss = np.empty((len(ts), n, m, m), dtype=complex)
    origin = np.zeros((len(ts), d), dtype=complex)
    for ci, c in enumerate(f.components):
        first, second = _derivative_table(c, d)
        for a in range(m):
            grads[:, ci, a] = compile_numpy(first[a])(ts, origin, params)
            for b in range(m):
                hesss[:, ci, a, b] = compile_numpy(second[a][b])(ts, origin, params)
        bad = ~(np.isfinite(grads[:, ci]).all(axis=1) & np.isfinite(hesss[:, ci]).all(axis=(1, 2)))
        for ti in np.flatnonzero(bad):
            g_hat, h_hat = _fd_component(c, d, float(ts[ti]), params, ci)
            g_chk, h_chk = _wirtinger_from_hat(g_hat[None, :], h_hat[None, :, :])
            grads[ti, ci] = g_chk[0]
            hesss[ti, ci] = h_chk[0]
    return grads, hesss


def jet_at_zero(f: RepFunction, t: float = 0.0, params: Mapping | None = None) -> WirtingerJet:
    """Wirtinger jet of ``f`` at the origin; finite differences if symbols fail.

    Raises :class:`NonDifferentiableAtZero` when the difference quotients
    blow up as the step shrinks.
    """
    grads, hesss = jets_at_zero(f, [t], params)
    g = grads[0]
    return WirtingerJet(grad_z=g[:, 0::2].copy(), grad_zbar=g[:, 1::2].copy(), hess=hesss[0].copy())
