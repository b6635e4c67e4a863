"""Shared models and random expression trees for the test suite."""

from __future__ import annotations

import numpy as np
from hypothesis import strategies as st

from emery.characteristics import LevyModel
from emery.expr import Abs, Add, Conj, Const, Exp, Im, Log, Mul, Neg, Param, Pow, Re, Sgn, Time, Var

BM_JUMP = dict(drift=0.1, sigma=0.3, jumps=[(1.0, 0.5)])


def bm_jump() -> LevyModel:
    return LevyModel.real(**BM_JUMP)


def drifted_bm(mu=0.1, sigma=0.2) -> LevyModel:
    return LevyModel.real(drift=mu, sigma=sigma)


def jump_diffusion_1d() -> LevyModel:
    return LevyModel.real(drift=0.1, sigma=0.3, jumps=[(0.5, 1.0)])


def jump_diffusion_2d() -> LevyModel:
    return LevyModel(
        dim=2, drift=np.array([0.1, 0.05]), cov_hat=np.diag([0.09, 0.0, 0.04, 0.0]),
        atoms=np.array([[0.5, 0.0], [0.0, 0.5]], dtype=complex), rates=np.array([1.0, 1.0]),
    )


def conformal_model() -> LevyModel:
    # X = (W1 + i W2) / sqrt(2): Re and Im parts independent with variance 1/2 each
    return LevyModel(dim=1, drift=np.zeros(1), cov_hat=np.diag([0.5, 0.5]),
                     atoms=np.zeros((0, 1), dtype=complex), rates=np.zeros(0))


REALS = [0.5, 1.0, 2.0, 3.0, 0.25, 1.5, 2.5, 7.0]
CONSTS = REALS + [1j, 2 + 3j, 0.5 - 1.5j, -2.0, -0.75]
EXPONENTS = [2, 3, -1, 0.5, 1.5, -0.5, 2 + 1j, 1 / 3]
UNARY = [Exp, Log, Abs, Conj, Re, Im, Sgn]


def _leaves(dim: int, with_time: bool, with_params: bool):
    opts = [st.sampled_from([Var(k) for k in range(1, dim + 1)]), st.sampled_from([Const(c) for c in CONSTS])]
    if with_time:
        opts.append(st.just(Time()))
    if with_params:
        opts.append(st.sampled_from([Param("a"), Param("b")]))
    return st.one_of(*opts)


def _is_const(e) -> bool:
    return isinstance(e, Const)


def _extend(children):
    """One level of tree growth; avoids the all-constant sums and products the parser folds."""
    binary = st.tuples(st.sampled_from([Add, Mul]), children, children).filter(
        lambda t: not (_is_const(t[1]) and _is_const(t[2]))
    ).map(lambda t: t[0](t[1], t[2]))
    neg = children.filter(lambda c: not _is_const(c)).map(Neg)
    unary = st.tuples(st.sampled_from(UNARY), children).map(lambda t: t[0](t[1]))
    power = st.tuples(children, st.sampled_from(EXPONENTS)).map(lambda t: Pow(t[0], t[1]))
    return st.one_of(binary, neg, unary, power)


def _depth(e) -> int:
    kids = e.children
    return 1 + (max(_depth(c) for c in kids) if kids else 0)


def expr_trees(dim: int = 1, max_depth: int = 6, with_time: bool = True, with_params: bool = False):
    return st.recursive(_leaves(dim, with_time, with_params), _extend, max_leaves=12).filter(
        lambda e: _depth(e) <= max_depth
    )


def random_points(rng: np.random.Generator, n: int, dim: int, radius: float = 0.5) -> np.ndarray:
    r = radius * np.sqrt(rng.uniform(0.05, 1.0, size=(n, dim)))
    ang = rng.uniform(-np.pi, np.pi, size=(n, dim))
    return r * np.exp(1j * ang)
