"""Symbolic representing functions, Levy characteristics and pathwise checks."""

from .expr import (
    NAN, Abs, Add, Conj, Const, Exp, Expr, Im, Log, Mul, Neg, Param, Pow, Re,
    RepFunction, Sgn, Time, Var, WirtingerJet, evaluate, hat_gradient,
    jet_at_zero, simplify, substitute, wirtinger_diff,
)
from .parser import ParseError, parse, pretty

__all__ = [
    "NAN", "Abs", "Add", "Conj", "Const", "Exp", "Expr", "Im", "Log", "Mul", "Neg",
    "Param", "Pow", "Re", "RepFunction", "Sgn", "Time", "Var", "WirtingerJet",
    "evaluate", "hat_gradient", "jet_at_zero", "simplify", "substitute",
    "wirtinger_diff", "ParseError", "parse", "pretty",
]
