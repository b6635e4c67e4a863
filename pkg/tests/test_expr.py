import cmath

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emery.expr import (
    NAN, Abs, Add, Conj, Const, Exp, Log, Mul, NonDifferentiableAtZero, Param, Pow, Re, RepFunction, Sgn, Var,
    evaluate, hat_gradient, is_nan, jet_at_zero, simplify, substitute, walk, wirtinger_diff,
)
from emery.parser import parse, parse_expr
from emery.uclass import catalog

from helpers import expr_trees, random_points

X = Var(1)


def fd_wirtinger(f: RepFunction, x: np.ndarray, k: int, h: float = 1e-5):
    """Central differences along Re and Im of x_k, combined into the two Wirtinger derivatives."""
    def at(p):
        return np.asarray([complex(evaluate(c, 0.0, list(p))) for c in f.components])

    e = np.zeros(len(x), dtype=complex)
    e[k] = 1
    d_re = (at(x + h * e) - at(x - h * e)) / (2 * h)
    d_im = (at(x + 1j * h * e) - at(x - 1j * h * e)) / (2 * h)
    return 0.5 * (d_re - 1j * d_im), 0.5 * (d_re + 1j * d_im)


# -- evaluation

def test_eval_exp_minus_one_at_zero():
    assert evaluate(parse_expr("exp(id) - 1"), 0.0, [0]) == 0


def test_eval_log_at_boundary_is_nan():
    assert is_nan(evaluate(parse_expr("log(1 + id)"), 0.0, [-1]))


def test_eval_abs_square():
    assert evaluate(parse_expr("abs(1 + id)^2 - 1"), 0.0, [1j]) == pytest.approx(1, abs=1e-15)


def test_eval_unbound_parameter_raises():
    with pytest.raises(KeyError):
        evaluate(Param("a") * X, 0.0, [1])


def test_eval_variable_out_of_range_raises():
    with pytest.raises(IndexError):
        evaluate(Var(2), 0.0, [1])


def test_sgn_zero_is_nan():
    assert is_nan(evaluate(Sgn(X), 0.0, [0]))
    assert evaluate(Sgn(X), 0.0, [-3]) == -1


@settings(max_examples=200, deadline=None)
@given(expr_trees(dim=2, max_depth=5), st.data())
def test_nan_absorption(tree, data):
    leaves = [n for n in walk(tree) if not n.children]
    target = data.draw(st.sampled_from(leaves))

    def inject(e):
        if e is target:
            return Const(NAN)
        if not e.children:
            return e
        return type(e)(*(inject(c) for c in e.children), *e._args[e.arity:])

    poisoned = inject(tree)
    x = [0.3 + 0.2j, -0.4 + 0.1j]
    assert is_nan(evaluate(poisoned, 0.4, x, {"a": 1, "b": 2}))


# -- Wirtinger derivatives

def test_wirtinger_of_modulus_square():
    d = wirtinger_diff(Mul(X, Conj(X)), 1)
    for z in (0.3 + 0.4j, -1.2j, 2.0):
        assert evaluate(d, 0.0, [z]) == pytest.approx(z.conjugate(), abs=1e-15)


def test_wirtinger_conjugate_annihilates_analytic():
    d = simplify(wirtinger_diff(parse_expr("exp(id) - 1"), 1, conjugated=True))
    assert d is Const(0)


def test_wirtinger_abs_power():
    a = 0.7
    f = parse_expr(f"abs(1 + id)^{a} - 1")
    d = wirtinger_diff(f, 1)
    for z in (0.2 + 0.1j, -0.3 + 0.35j, 0.45j):
        expected = (a / 2) * (1 + z) ** (a / 2 - 1) * (1 + z.conjugate()) ** (a / 2)
        assert evaluate(d, 0.0, [z]) == pytest.approx(expected, rel=1e-13)


@pytest.mark.parametrize("entry", catalog(), ids=lambda e: e.name)
def test_wirtinger_matches_finite_differences(entry):
    f = entry.function
    rng = np.random.default_rng(3)
    pts = random_points(rng, 20, f.dim_in)
    for x in pts:
        for k in range(f.dim_in):
            fd_z, fd_zbar = fd_wirtinger(f, x, k)
            sym_z = [complex(evaluate(wirtinger_diff(c, k + 1), 0.0, list(x))) for c in f.components]
            sym_zbar = [complex(evaluate(wirtinger_diff(c, k + 1, True), 0.0, list(x))) for c in f.components]
            for s, n in zip(sym_z + sym_zbar, list(fd_z) + list(fd_zbar)):
                assert abs(s - n) <= 1e-6 * max(1.0, abs(n))


@pytest.mark.parametrize("entry", [e for e in catalog() if e.function.analytic_at_zero], ids=lambda e: e.name)
def test_analytic_catalog_members_have_zero_conjugate_gradient(entry):
    jet = jet_at_zero(entry.function)
    assert np.all(jet.grad_zbar == 0)
    assert np.all(jet.hess[:, 1::2, :] == 0) and np.all(jet.hess[:, :, 1::2] == 0)


def test_analytic_flags():
    names = {e.name: e.function.analytic_at_zero for e in catalog()}
    assert names["power"] and names["exp"] and names["log"] and names["quadratic"] and names["identity"]
    assert not names["abs"] and not names["abs-power"]


# -- jets at zero

def test_jet_identity():
    jet = jet_at_zero(RepFunction.scalar(X))
    assert jet.grad_z.tolist() == [[1]]
    assert jet.grad_zbar.tolist() == [[0]]
    assert not jet.hess.any()


@pytest.mark.parametrize("alpha", [2.0, 1.5, -1.0, 0.5 + 0.5j])
def test_jet_power(alpha):
    jet = jet_at_zero(RepFunction.scalar(Pow(1 + X, alpha) - 1))
    assert jet.grad_z[0, 0] == pytest.approx(alpha, abs=1e-14)
    assert jet.hess[0, 0, 0] == pytest.approx(alpha * (alpha - 1), abs=1e-14)


def test_jet_cube_root_not_differentiable():
    with pytest.raises(NonDifferentiableAtZero):
        jet_at_zero(parse("id^(1/3)"))


def test_jet_real_hessian_matches_wirtinger_after_fallback():
    # sgn(1 + x) has a NaN symbolic derivative only where 1 + x = 0; fine at the origin
    jet = jet_at_zero(parse("sgn(1 + id) * abs(1 + id)^1.5 - 1"))
    assert jet.grad_z[0, 0] == pytest.approx(0.75, abs=1e-12)
    assert jet.grad_zbar[0, 0] == pytest.approx(0.75, abs=1e-12)


# -- real-lift gradients

def test_hat_gradient_identity():
    g, h = hat_gradient(jet_at_zero(RepFunction.scalar(X)))
    assert g.tolist() == [[1, 1j]]
    assert not h.any()


def test_hat_gradient_modulus_square():
    g, h = hat_gradient(jet_at_zero(RepFunction.scalar(Mul(X, Conj(X)))))
    assert np.abs(g).max() == 0
    np.testing.assert_allclose(h[0], 2 * np.eye(2), atol=1e-15)


def test_hat_gradient_real_part():
    g, _ = hat_gradient(jet_at_zero(RepFunction.scalar(Re(X))))
    np.testing.assert_allclose(g, [[1, 0]], atol=1e-15)


@pytest.mark.parametrize("entry", catalog(), ids=lambda e: e.name)
def test_hat_gradient_matches_real_differences(entry):
    f = entry.function
    g, h = hat_gradient(jet_at_zero(f))
    d = f.dim_in
    step = 1e-4

    def at(v):
        z = v[0::2] + 1j * v[1::2]
        return np.array([complex(evaluate(c, 0.0, list(z))) for c in f.components])

    for i in range(2 * d):
        e = np.zeros(2 * d)
        e[i] = step
        np.testing.assert_allclose((at(e) - at(-e)) / (2 * step), g[:, i], atol=1e-7)
        for j in range(2 * d):
            u = np.zeros(2 * d)
            u[j] = step
            fd = (at(e + u) - at(e - u) - at(-e + u) + at(-e - u)) / (4 * step * step)
            np.testing.assert_allclose(fd, h[:, i, j], atol=1e-5)


# -- simplification and substitution

def test_simplify_add_zero():
    assert simplify(Add(X, Const(0))) is X


def test_simplify_exp_log_pair():
    assert simplify(parse_expr("exp(log(1 + id)) - 1")) is X


def test_simplify_preserves_square():
    f = parse_expr("(1 + id)^2 - 1")
    s = simplify(f)
    for z in (0.3, -0.2 + 0.5j, 1.5j):
        assert evaluate(s, 0.0, [z]) == pytest.approx(evaluate(f, 0.0, [z]), abs=1e-14)


@settings(max_examples=150, deadline=None)
@given(expr_trees(dim=1, max_depth=5))
def test_simplify_preserves_values(tree):
    s = simplify(tree)
    for z in (0.31 + 0.17j, -0.43 + 0.05j, 0.2 - 0.38j):
        a = evaluate(tree, 0.7, [z])
        b = evaluate(s, 0.7, [z])
        if is_nan(a) or is_nan(b):
            continue
        assert abs(a - b) <= 1e-9 * max(1.0, abs(a))


def test_substitute_exp_after_log_is_identity():
    out = substitute(parse("exp(id) - 1"), parse("log(1 + id)"))
    assert out.components[0] is X


def test_substitute_identity_inner():
    psi = parse("abs(1 + id)^0.5 - 1")
    assert substitute(psi, parse("id")).components == psi.components


def test_substitute_powers():
    a, b = 1.7, -0.6
    out = substitute(parse(f"(1 + id)^{b} - 1"), parse(f"(1 + id)^{a} - 1"))
    rng = np.random.default_rng(0)
    for z in random_points(rng, 50, 1)[:, 0]:
        assert evaluate(out.components[0], 0.0, [z]) == pytest.approx((1 + z) ** (a * b) - 1, rel=1e-12, abs=1e-14)


def test_substitute_dimension_mismatch():
    from emery.expr import DimensionMismatchError

    with pytest.raises(DimensionMismatchError):
        substitute(parse("id1 * id2", 2), parse("id"))


@settings(max_examples=60, deadline=None)
@given(expr_trees(dim=1, max_depth=3, with_time=False), expr_trees(dim=1, max_depth=3, with_time=False),
       expr_trees(dim=1, max_depth=3, with_time=False))
def test_substitute_associative(a, b, c):
    fa, fb, fc = (RepFunction.scalar(e) for e in (a, b, c))
    left = substitute(substitute(fa, fb), fc).components[0]
    right = substitute(fa, substitute(fb, fc)).components[0]
    for z in (0.21 + 0.13j, -0.37 + 0.29j, 0.05 - 0.44j):
        u, v = evaluate(left, 0.0, [z]), evaluate(right, 0.0, [z])
        if is_nan(u) or is_nan(v):
            continue
        if not (cmath.isfinite(u) and cmath.isfinite(v)):
            continue
        assert abs(u - v) <= 1e-12 * max(1.0, abs(u))


def test_inverse_pairs():
    rng = np.random.default_rng(5)
    pts = random_points(rng, 50, 1)[:, 0]
    first = substitute(parse("exp(id) - 1"), parse("log(1 + id)")).components[0]
    for alpha in (2.0, 0.5, 3.0, 1.5 + 0.5j):
        inv = substitute(RepFunction.scalar(Pow(1 + X, 1 / alpha) - 1), RepFunction.scalar(Pow(1 + X, alpha) - 1))
        for z in pts:
            assert abs(evaluate(inv.components[0], 0.0, [z]) - z) <= 1e-10
    for z in pts:
        assert abs(evaluate(first, 0.0, [z]) - z) <= 1e-10


def test_hash_consing():
    assert Add(X, Const(1)) is Add(Var(1), Const(1))
    assert Log(Exp(X)) is Log(Exp(Var(1)))
    assert Abs(X) is not Conj(X)
