import pytest
from hypothesis import given, settings

from emery.expr import Abs, Add, Const, Exp, Mul, Neg, Pow, Time, Var
from emery.parser import ExponentNotConstantError, ParseError, parse, parse_expr, pretty, pretty_expr
from emery.uclass import catalog, catalog_entry

from helpers import expr_trees

X = Var(1)


def test_parse_square():
    assert parse_expr("(1+id)^2 - 1") is Add(Pow(Add(Const(1), X), 2), Const(-1))


def test_parse_yor():
    f = parse("(1+id1)^2 * (1+id2)^-1 - 1", 2)
    assert f.components == catalog_entry("yor", 2.0, -1.0).function.components
    assert f.dim_in == 2


def test_parse_abs_power():
    assert parse_expr("abs(1+id)^0.5 - 1") is Add(Pow(Abs(Add(Const(1), X)), 0.5), Const(-1))


def test_precedence_and_associativity():
    assert parse_expr("1 - id - id") is Add(Add(Const(1), Neg(X)), Neg(X))
    assert parse_expr("-id^2") is Neg(Pow(X, 2))
    assert parse_expr("id^2^3") is Pow(X, 8)


def test_whitespace_insensitive():
    assert parse_expr(" exp ( id )-1 ") is parse_expr("exp(id)-1")


def test_vector_output():
    f = parse("id1; id2 * t", 2)
    assert f.components == (Var(1), Mul(Var(2), Time()))


def test_constants_fold():
    assert parse_expr("(2 + 3*i)") is Const(2 + 3j)


def test_pretty_examples():
    assert pretty(parse("exp(id)-1")) == "exp(id) - 1"
    assert pretty_expr(Const(2 + 3j)) == "(2 + 3*i)"
    f = parse("t^(-0.5) * id")
    assert parse(pretty(f)).components == f.components


@pytest.mark.parametrize("entry", catalog(), ids=lambda e: e.name)
def test_round_trip_catalog(entry):
    f = entry.function
    assert parse(pretty(f), f.dim_in).components == f.components


@settings(max_examples=200, deadline=None)
@given(expr_trees(dim=3, max_depth=6, with_params=True))
def test_round_trip_random_trees(tree):
    text = pretty_expr(tree)
    assert parse_expr(text, 3) is tree


@pytest.mark.parametrize("text", [
    "", "1 +", "exp(id", "foo(id)", "id4", "id ^ id", "(1+id))", "2 $ id", "log()", "id;", "theta.", "1..2",
    "abs(1 + \n id ^ t)",
])
def test_error_spans_inside_input(text):
    with pytest.raises(ParseError) as info:
        parse(text, 3)
    span = info.value.span
    n = len(text.encode())
    assert 0 <= span.start <= span.end <= n
    assert span.line >= 1 and span.column >= 1
    assert "^" in info.value.annotate()


def test_exponent_must_be_constant():
    with pytest.raises(ExponentNotConstantError) as info:
        parse("(1+id)^id")
    assert info.value.span.start == len("(1+id)^")


def test_variable_index_above_dimension():
    with pytest.raises(ParseError) as info:
        parse("id1 + id2", 1)
    assert info.value.span.start == 6
    assert "id1" in info.value.expected


def test_expected_tokens_reported():
    with pytest.raises(ParseError) as info:
        parse("1 +")
    assert "number" in info.value.expected


def test_power_of_exp_parses():
    assert parse_expr("exp(id)^2") is Pow(Exp(X), 2)
