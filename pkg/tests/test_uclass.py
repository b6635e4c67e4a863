import itertools

import numpy as np
import pytest

from emery.expr import evaluate, jet_at_zero
from emery.parser import parse, pretty
from emery.uclass import (
    CHAIN_TOL, Composition, Reason, Rejection, catalog, catalog_entry, chain_rule_error, check_u, compose_check,
    iterate_exp,
)


def test_square_passes():
    rep = check_u(parse("(1+id)^2 - 1"))
    assert rep.passes
    assert all(c.passed for c in rep.checks)
    assert np.isfinite(rep.remainder_bound)


def test_cube_root_fails_differentiability():
    rep = check_u(parse("id^(1/3)"))
    assert not rep.passes
    assert not rep.check(2).passed


def test_time_singular_scaling_fails_local_boundedness():
    rep = check_u(parse("t^(-1/3) * id"))
    assert not rep.passes
    assert rep.check(1).passed and rep.check(2).passed
    assert not rep.check(3).passed
    assert rep.time_singularities


def test_nonzero_value_at_origin_fails():
    rep = check_u(parse("exp(id)"))
    assert not rep.check(1).passed


def test_slow_second_derivative_blow_up_fails():
    # once differentiable at 0, but the second difference quotient grows like h^-0.5
    rep = check_u(parse("abs(id)^1.5"))
    assert not rep.passes
    assert not rep.check(2).passed


def test_round_off_is_not_remainder_growth():
    rep = check_u(parse("log(exp(id))"))
    assert rep.passes, rep.check(4).witness


@pytest.mark.parametrize("entry", catalog(), ids=lambda e: e.name)
def test_catalog_members_pass(entry):
    assert check_u(entry.function).passes


def test_compose_exp_with_scaling():
    res = compose_check(parse("exp(id) - 1"), parse("2.5 * id"))
    assert isinstance(res, Composition)
    f = res.function.components[0]
    assert evaluate(f, 0.0, [0.3]) == pytest.approx(np.exp(0.75) - 1, rel=1e-14)
    assert res.report.passes


def test_compose_rejects_cube_root_outer():
    res = compose_check(parse("id^(1/3)"), parse("id^3"))
    assert isinstance(res, Rejection)
    assert res.reason is Reason.OUTER_NOT_DIFFERENTIABLE


def test_compose_rejects_time_singular_pair():
    res = compose_check(parse("t^(-1/3) * id"), parse("id + id^2 * t^(-2/3)"))
    assert isinstance(res, Rejection)
    assert res.reason is Reason.LOCAL_BOUNDEDNESS


def test_compose_rejects_bad_inner():
    res = compose_check(parse("exp(id) - 1"), parse("abs(id)^0.5"))
    assert isinstance(res, Rejection)
    assert res.reason is Reason.INNER_NOT_DIFFERENTIABLE


_ONE_DIM = [e for e in catalog() if e.function.dim_in == 1]


@pytest.mark.parametrize("outer,inner", list(itertools.product(_ONE_DIM, catalog())),
                         ids=lambda e: e.name)
def test_closure_under_composition(outer, inner):
    res = compose_check(outer.function, inner.function)
    assert isinstance(res, Composition), res
    assert res.report.passes
    assert res.chain_rule_error <= CHAIN_TOL


def test_chain_rule_two_dimensional_inner():
    outer = parse("exp(id1 + 2*id2) - 1", 2)
    inner = parse("(1+id)^2 - 1; abs(1+id) - 1")
    res = compose_check(outer, inner)
    assert isinstance(res, Composition)
    assert chain_rule_error(outer, inner, res.function, 1.0) <= 1e-9


def test_catalog_contents():
    entries = {e.name: e for e in catalog()}
    assert len(entries) == 10
    assert pretty(entries["exp"].function) == "exp(id) - 1"
    assert entries["exp"].identity == "L(exp(alpha X)) = (exp(alpha id) - 1) o X"
    assert pretty(entries["log"].function) == "log(1 + id)"
    assert entries["log"].domain == "dX != -1"
    assert pretty(entries["identity"].function) == "id"
    assert entries["identity"].identity == "X - X0 = id o X"


def test_catalog_entry_parameters():
    e = catalog_entry("power", alpha=3.0)
    assert pretty(e.function) == "(1 + id)^3 - 1"
    with pytest.raises(KeyError):
        catalog_entry("nonsense")


@pytest.mark.parametrize("alpha", [1, 2, -1, 0.5 + 0.5j])
@pytest.mark.parametrize("k", range(1, 7))
def test_iterated_exponential_jets(alpha, k):
    it = iterate_exp(alpha, k)
    a = complex(alpha)
    ratio = k if a == 1 else (a**k - 1) / (a - 1)
    assert it.first == pytest.approx(a**k, abs=1e-15)
    assert it.second == pytest.approx(a ** (k + 1) * ratio, abs=1e-12)
    jet = jet_at_zero(it.function)
    assert abs(jet.grad_z[0, 0] - it.first) <= 1e-9
    assert abs(jet.hess[0, 0, 0] - it.second) <= 1e-9


def test_iterated_examples():
    one = iterate_exp(2, 1)
    assert (one.first, one.second) == (2, 4)
    three = iterate_exp(1, 3)
    assert (three.first, three.second) == (1, 3)


def test_iterate_exp_bounds():
    with pytest.raises(ValueError):
        iterate_exp(2, 9)


def test_report_serialises():
    d = check_u(parse("t^(-1/3) * id")).to_dict()
    assert d["passes"] is False
    assert d["probe"]["growth_factor"] == 100
    assert [c["condition"] for c in d["checks"]] == [1, 2, 3, 4]
