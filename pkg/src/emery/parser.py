"""Text syntax for representing functions.

Grammar, loosest binding first::

    vector   := expr (';' expr)*
    expr     := term (('+' | '-') term)*
    term     := unary (('*' | '/') unary)*
    unary    := '-' unary | power
    power    := atom ('^' exponent)?
    exponent := '-' exponent | power          # must fold to a constant
    atom     := NUMBER | 'i' | 't' | 'id' | 'id1'..'id9' | 'theta.' NAME
              | FUNC '(' expr ')' | '(' expr ')'

Sums, products and negations whose operands are all literal constants are
folded while parsing, so ``(2 + 3*i)`` reads back as a single constant.
:func:`pretty` is the inverse of :func:`parse` on such folded trees.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .expr import (
    NAN, Abs, Add, Conj, Const, Exp, Expr, Im, Log, Mul, Neg, Param, Pow, Re,
    RepFunction, Sgn, Time, Var, as_value,
)

__all__ = ["SourceSpan", "ParseError", "ExponentNotConstantError", "parse", "parse_expr", "pretty", "pretty_expr"]


@dataclass(frozen=True)
class SourceSpan:
    start: int  # byte offset, inclusive
    end: int  # byte offset, exclusive
    line: int
    column: int


class ParseError(ValueError):
    def __init__(self, message: str, span: SourceSpan, expected: frozenset[str] = frozenset(), text: str = ""):
        self.message = message
        self.span = span
        self.expected = expected
        self.text = text
        super().__init__(f"{message} at line {span.line}, column {span.column}")

    def annotate(self) -> str:
        """Human-readable diagnostic with a caret line under the offending span."""
        lines = self.text.splitlines() or [""]
        src = lines[self.span.line - 1] if self.span.line - 1 < len(lines) else ""
        width = max(1, len(self.text.encode()[self.span.start:self.span.end].decode(errors="replace")))
        out = [f"error: {self.message} (line {self.span.line}, column {self.span.column})", f"  {src}",
               "  " + " " * (self.span.column - 1) + "^" * width]
        if self.expected:
            out.append("  expected one of: " + ", ".join(sorted(self.expected)))
        return "\n".join(out)


class ExponentNotConstantError(ParseError):
    pass


FUNCTIONS = {"exp": Exp, "log": Log, "abs": Abs, "conj": Conj, "re": Re, "im": Im, "sgn": Sgn}
_NAME_OF = {v: k for k, v in FUNCTIONS.items()}
_ATOM_START = frozenset({"number", "id", "id1..id9", "t", "i", "theta.<name>", "(", "-"} | set(FUNCTIONS))

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<param>theta\.[A-Za-z_][A-Za-z0-9_]*)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[-+*/^();])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Tok:
    kind: str  # num, param, name, op, end
    text: str
    pos: int  # character offset
    end: int


class _Parser:
    def __init__(self, text: str, dim: int):
        self.text = text
        self.dim = dim
        self.toks = self._lex()
        self.k = 0

    # -- diagnostics
    def span(self, start: int, end: int) -> SourceSpan:
        b = lambda i: len(self.text[:i].encode())  # noqa: E731
        line = self.text.count("\n", 0, start) + 1
        col = start - (self.text.rfind("\n", 0, start) + 1) + 1
        return SourceSpan(b(start), b(max(start, end)), line, col)

    def fail(self, message: str, tok: _Tok, expected=frozenset(), cls=ParseError):
        raise cls(message, self.span(tok.pos, tok.end), frozenset(expected), self.text)

    def _lex(self) -> list[_Tok]:
        toks = []
        i = 0
        while i < len(self.text):
            m = _TOKEN.match(self.text, i)
            if not m:
                tok = _Tok("bad", self.text[i], i, i + 1)
                self.fail(f"unexpected character {self.text[i]!r}", tok, _ATOM_START)
            kind = m.lastgroup
            if kind != "ws":
                toks.append(_Tok(kind, m.group(), m.start(), m.end()))
            i = m.end()
        toks.append(_Tok("end", "", len(self.text), len(self.text)))
        return toks

    # -- token helpers
    @property
    def tok(self) -> _Tok:
        return self.toks[self.k]

    def at(self, text: str) -> bool:
        t = self.tok
        return t.kind in ("op", "name") and t.text == text

    def expect(self, text: str) -> _Tok:
        if not self.at(text):
            self.fail(f"expected {text!r}", self.tok, {text})
        t = self.tok
        self.k += 1
        return t

    # -- grammar
    def vector(self) -> list[Expr]:
        comps = [self.expr()]
        while self.at(";"):
            self.k += 1
            comps.append(self.expr())
        if self.tok.kind != "end":
            self.fail(f"unexpected {self.tok.text!r}", self.tok, {"+", "-", "*", "/", "^", ";", "end of input"})
        return comps

    def expr(self) -> Expr:
        left = self.term()
        while self.at("+") or self.at("-"):
            op = self.tok.text
            self.k += 1
            right = self.term()
            left = _fold(Add(left, right if op == "+" else _fold(Neg(right))))
        return left

    def term(self) -> Expr:
        left = self.unary()
        while self.at("*") or self.at("/"):
            op = self.tok.text
            self.k += 1
            right = self.unary()
            left = _fold(Mul(left, right if op == "*" else Pow(right, -1)))
        return left

    def unary(self) -> Expr:
        if self.at("-"):
            self.k += 1
            return _fold(Neg(self.unary()))
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.at("^"):
            self.k += 1
            start = self.tok
            value = self.exponent()
            if not isinstance(value, Const) or value.value is NAN:
                end = self.toks[self.k - 1]
                raise ExponentNotConstantError(
                    "exponent must be a constant", self.span(start.pos, end.end), frozenset({"constant"}), self.text
                )
            return Pow(base, value.value)
        return base

    def exponent(self) -> Expr:
        if self.at("-"):
            self.k += 1
            return _fold_all(Neg(self.exponent()))
        return _fold_all(self.power())

    def atom(self) -> Expr:
        t = self.tok
        if t.kind == "num":
            self.k += 1
            return Const(float(t.text))
        if t.kind == "param":
            self.k += 1
            return Param(t.text[len("theta."):])
        if t.kind == "op" and t.text == "(":
            self.k += 1
            e = self.expr()
            self.expect(")")
            return e
        if t.kind == "name":
            name = t.text
            if name in FUNCTIONS:
                self.k += 1
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return FUNCTIONS[name](arg)
            if name == "t":
                self.k += 1
                return Time()
            if name == "i":
                self.k += 1
                return Const(1j)
            m = re.fullmatch(r"id([1-9]?)", name)
            if m:
                idx = int(m.group(1) or 1)
                if idx > self.dim:
                    self.fail(f"{name} exceeds the declared dimension {self.dim}", t,
                              {"id"} | {f"id{j}" for j in range(1, self.dim + 1)})
                self.k += 1
                return Var(idx)
            self.fail(f"unknown name {name!r}", t, _ATOM_START - {"-"})
        if t.kind == "end":
            self.fail("unexpected end of input", t, _ATOM_START)
        self.fail(f"unexpected {t.text!r}", t, _ATOM_START)


def _fold(e: Expr) -> Expr:
    """Collapse Add/Mul/Neg nodes whose operands are all constants."""
    if isinstance(e, (Add, Mul, Neg)) and all(isinstance(c, Const) for c in e.children):
        vals = [c.value for c in e.children]
        if NAN in vals:
            return e
        v = -vals[0] if isinstance(e, Neg) else (vals[0] + vals[1] if isinstance(e, Add) else vals[0] * vals[1])
        v = as_value(v)
        if v is not NAN:
            return Const(v)
    return e


def _fold_all(e: Expr) -> Expr:
    """Evaluate a constant exponent expression completely (powers included)."""
    from .expr import contains_time, evaluate, params_of, walk

    if contains_time(e) or params_of(e) or any(isinstance(n, Var) for n in walk(e)):
        return e
    v = evaluate(e, 0.0, ())
    return e if v is NAN else Const(v)


def parse(text: str, dim: int = 1) -> RepFunction:
    """Parse ``text`` into a representing function with ``dim`` inputs.

    >>> pretty(parse("exp(id)-1"))
    'exp(id) - 1'
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    comps = _Parser(text, dim).vector()
    return RepFunction(tuple(comps), dim)


def parse_expr(text: str, dim: int = 1) -> Expr:
    f = parse(text, dim)
    if f.dim_out != 1:
        raise ValueError("expected a single component")
    return f.components[0]


# ---------------------------------------------------------------------------
# printing

_ADD, _MUL, _NEG, _POW, _ATOM = 1, 2, 3, 4, 5


def _num(x: float) -> str:
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def _const_text(c: complex) -> tuple[str, int]:
    re_, im_ = c.real, c.imag
    if im_ == 0:
        return (_num(re_), _ATOM) if re_ >= 0 else (f"(-{_num(-re_)})", _ATOM)
    if c == 1j:
        return "i", _ATOM
    imag = f"{_num(abs(im_))}*i"
    if re_ == 0:
        return (f"({imag})" if im_ > 0 else f"(-{imag})"), _ATOM
    sign = "+" if im_ > 0 else "-"
    head = _num(re_) if re_ >= 0 else f"-{_num(-re_)}"
    return f"({head} {sign} {imag})", _ATOM


def _exponent_text(c: complex) -> str:
    return _const_text(c)[0]


def _render(e: Expr, names: dict[int, str], memo: dict[int, tuple[str, int]]) -> tuple[str, int]:
    key = id(e)
    if key in memo:
        return memo[key]

    def wrap(child: Expr, level: int) -> str:
        s, p = _render(child, names, memo)
        return s if p >= level else f"({s})"

    if isinstance(e, Const):
        if e.value is NAN:
            raise ValueError("NaN constants have no text form")
        out = _const_text(e.value)
    elif isinstance(e, Var):
        out = (names.get(e.index, f"id{e.index}"), _ATOM)
    elif isinstance(e, Time):
        out = ("t", _ATOM)
    elif isinstance(e, Param):
        out = (f"theta.{e.name}", _ATOM)
    elif isinstance(e, Add):
        r = e.right
        if isinstance(r, Neg):
            out = (f"{wrap(e.left, _ADD)} - {wrap(r.arg, _MUL)}", _ADD)
        elif isinstance(r, Const) and r.value is not NAN and r.value.imag == 0 and r.value.real < 0:
            out = (f"{wrap(e.left, _ADD)} - {_num(-r.value.real)}", _ADD)
        else:
            out = (f"{wrap(e.left, _ADD)} + {wrap(r, _MUL)}", _ADD)
    elif isinstance(e, Mul):
        out = (f"{wrap(e.left, _MUL)} * {wrap(e.right, _NEG)}", _MUL)
    elif isinstance(e, Neg):
        out = (f"-{wrap(e.arg, _NEG)}", _NEG)
    elif isinstance(e, Pow):
        out = (f"{wrap(e.base, _ATOM)}^{_exponent_text(e.exponent)}", _POW)
    else:
        out = (f"{_NAME_OF[type(e)]}({_render(e.arg, names, memo)[0]})", _ATOM)
    memo[key] = out
    return out


def pretty_expr(e: Expr, dim: int | None = None) -> str:
    names = {1: "id"} if dim == 1 else {}
    return _render(e, names, {})[0]


def pretty(f: RepFunction) -> str:
    return "; ".join(pretty_expr(c, f.dim_in) for c in f.components)
