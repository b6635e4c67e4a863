import cmath
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emery.characteristics import (
    AtomAtMinusOne, AtomOutsideDomain, LevyModel, ModelError, NotUniversal, Truncation, char_exponent_function,
    char_fn, drift_rate_analytic, drift_rate_wirtinger, levy_exponent, mellin, retruncate_drift, transform,
)
from emery.expr import RepFunction, substitute
from emery.parser import parse
from emery.uclass import catalog

from helpers import bm_jump, conformal_model, jump_diffusion_2d

MODELS = Path(__file__).resolve().parent.parent / "models"
B, SIGMA, X1, LAM = 0.1, 0.3, 1.0, 0.5
KAPPA_H_ID = 1j * B - SIGMA**2 / 2 + LAM * (cmath.exp(1j * X1) - 1 - 1j * X1)


def rich_model() -> LevyModel:
    return LevyModel(
        dim=2, drift=np.array([0.1 + 0.05j, -0.2]),
        cov_hat=np.array([[0.09, 0.01, 0.02, 0.0], [0.01, 0.04, 0.0, 0.0],
                          [0.02, 0.0, 0.05, 0.01], [0.0, 0.0, 0.01, 0.03]]),
        atoms=np.array([[0.3 + 0.2j, -0.1], [0.0, 0.45j], [-0.25, 0.2 - 0.1j]]),
        rates=np.array([0.7, 1.3, 0.4]),
    )


def test_identity_transform():
    m = rich_model()
    tc = transform(m, parse("id1; id2", 2))
    np.testing.assert_allclose(tc.drift_rate, m.drift, atol=1e-15)
    np.testing.assert_allclose(tc.cov_rate_bilinear, m.cov_bilinear(), atol=1e-15)
    np.testing.assert_array_equal(tc.pushforward_atoms, m.atoms)
    np.testing.assert_array_equal(tc.pushforward_rates, m.rates)


def test_square_transform():
    tc = transform(bm_jump(), parse("(1+id)^2 - 1"))
    assert abs(tc.drift_rate[0] - 0.79) <= 1e-12
    assert tc.pushforward_atoms.tolist() == [[3]]
    assert tc.pushforward_rates.tolist() == [0.5]
    assert tc.cov_rate_bilinear[0, 0] == pytest.approx(4 * 0.09, abs=1e-15)


def test_atom_outside_domain():
    m = LevyModel.real(0.0, 0.1, [(0.5, 1.0), (-1.0, 2.0)])
    with pytest.raises(AtomOutsideDomain) as info:
        transform(m, parse("log(1 + id)"))
    assert info.value.index == 1


def test_non_universal_rejected():
    with pytest.raises(NotUniversal):
        transform(bm_jump(), parse("id^(1/3)"))


def test_levy_exponent_examples():
    m = bm_jump()
    assert abs(levy_exponent(m, char_exponent_function([1.0], 1)) - KAPPA_H_ID) <= 1e-12
    assert abs(levy_exponent(m, parse("id")) - B) <= 1e-15
    kappa = levy_exponent(m, parse("abs(1+id)^2 - 1"))
    # the jump term is compensated by the gradient at 0, here 2x
    assert abs(kappa - (2 * B + SIGMA**2 + LAM * ((1 + X1) ** 2 - 1 - 2 * X1))) <= 1e-12
    assert abs(kappa - transform(m, parse("abs(1+id)^2 - 1")).drift_rate[0]) <= 1e-15


def test_drift_under_zero_truncation_reading():
    # a model file whose drift is quoted relative to the zero truncation
    m = LevyModel.from_dict({"dim": 1, "drift": [[B, 0]], "cov_hat": [[SIGMA**2, 0], [0, 0]],
                             "jumps": [{"atom": [[X1, 0]], "rate": LAM}], "drift_truncation": "zero"})
    kappa = levy_exponent(m, char_exponent_function([1.0], 1))
    assert abs(kappa - (1j * B - SIGMA**2 / 2 + LAM * (cmath.exp(1j * X1) - 1))) <= 1e-12
    # agrees with the five-decimal value -0.27485 + 0.52075i up to its last printed digit
    assert abs(kappa - (-0.27485 + 0.52075j)) <= 2e-5


def test_char_fn_examples():
    m = bm_jump()
    assert char_fn(m, [0.0], 1.0) == 1
    assert abs(char_fn(LevyModel.real(0.0, 1.0), [1.0], 1.0) - math.exp(-0.5)) <= 1e-15
    assert abs(char_fn(m, [1.0], 2.0) - cmath.exp(2 * KAPPA_H_ID)) <= 1e-12


def test_char_fn_scheduled_factor():
    m = LevyModel.real(0.0, 0.0, scheduled=[(0.5, [(1.0, 0.5), (-1.0, 0.5)])])
    assert char_fn(m, [1.0], 0.25) == 1
    assert abs(char_fn(m, [1.0], 1.0) - math.cos(1.0)) <= 1e-15


def test_char_fn_lifted_u():
    m = rich_model()
    u = [0.3, -0.7, 1.1, 0.2]
    xi = char_exponent_function(u, 2)
    direct = char_fn(m, u, 1.5)
    assert abs(direct - cmath.exp(1.5 * levy_exponent(m, xi))) <= 1e-14
    with pytest.raises(ValueError):
        char_exponent_function([1, 2, 3], 2)


def test_mellin_examples():
    assert abs(mellin(LevyModel.real(0.0, 0.4), 1, 1.0) - 1) <= 1e-15
    assert abs(mellin(bm_jump(), 2, 1.0) - math.exp(0.79)) <= 1e-12
    m = LevyModel.real(0.05, 0.2, [(-2.0, 0.7)])
    assert abs(mellin(m, 1, 1.0, signed=True) - mellin(m, 1, 1.0)) > 0.1


def test_mellin_atom_at_minus_one():
    m = LevyModel.real(0.0, 0.2, [(-1.0, 0.3)])
    with pytest.raises(AtomAtMinusOne):
        mellin(m, -0.5, 1.0)
    assert mellin(m, 2, 1.0) == pytest.approx(cmath.exp(0.04 + 0.3 * (0 - 1 + 2)), abs=1e-12)


def test_retruncate_examples():
    m = bm_jump()
    assert retruncate_drift(m, Truncation()) == pytest.approx([B])
    assert abs(retruncate_drift(m, Truncation("zero"))[0] - (-0.4)) <= 1e-15
    assert retruncate_drift(m, Truncation("ball", 0.5)) == pytest.approx(retruncate_drift(m, Truncation("zero")))


def test_truncation_parsing():
    assert Truncation.parse("ball:0.5") == Truncation("ball", 0.5)
    assert str(Truncation.parse("zero")) == "zero"
    with pytest.raises(ValueError):
        Truncation.parse("ball:-1")
    with pytest.raises(ValueError):
        Truncation.parse("square")


@pytest.mark.parametrize("entry", catalog(), ids=lambda e: e.name)
@pytest.mark.parametrize("radius", [0.3, 1.0, 5.0])
def test_truncation_invariance(entry, radius):
    m = rich_model() if entry.function.dim_in == 2 else LevyModel.real(0.1, 0.3, [(0.4, 0.5), (-0.35, 1.2), (2.0, 0.1)])
    xi = entry.function
    g = Truncation("ball", radius)
    full = transform(m, xi).drift_rate
    cut = transform(m, xi, g)
    vals = xi.evaluate_array(0.0, m.atoms)
    comp = (m.rates[:, None] * (vals - g(vals))).sum(axis=0)
    assert np.abs(full - (cut.drift_rate + comp)).max() <= 1e-12


@pytest.mark.parametrize("entry", catalog(), ids=lambda e: e.name)
def test_real_and_wirtinger_forms_agree(entry):
    xi = entry.function
    m = rich_model() if xi.dim_in == 2 else LevyModel(
        dim=1, drift=np.array([0.1 - 0.02j]), cov_hat=np.array([[0.09, 0.02], [0.02, 0.04]]),
        atoms=np.array([[0.3 + 0.1j], [-0.2j]]), rates=np.array([0.8, 0.5]))
    for g in (Truncation(), Truncation("ball", 0.3)):
        a = transform(m, xi, g).drift_rate
        b = drift_rate_wirtinger(m, xi, g)
        assert np.abs(a - b).max() <= 1e-12


@pytest.mark.parametrize("entry", [e for e in catalog() if e.function.analytic_at_zero], ids=lambda e: e.name)
def test_analytic_shortcut(entry):
    xi = entry.function
    m = rich_model() if xi.dim_in == 2 else LevyModel(
        dim=1, drift=np.array([0.1 - 0.02j]), cov_hat=np.array([[0.09, 0.02], [0.02, 0.04]]),
        atoms=np.array([[0.3 + 0.1j]]), rates=np.array([0.8]))
    assert np.abs(transform(m, xi).drift_rate - drift_rate_analytic(m, xi)).max() <= 1e-12


def test_analytic_shortcut_refuses_non_analytic():
    with pytest.raises(ValueError):
        drift_rate_analytic(bm_jump(), parse("abs(1+id) - 1"))


_coef = st.complex_numbers(max_magnitude=3, allow_nan=False, allow_infinity=False)


@settings(max_examples=40, deadline=None)
@given(_coef, _coef)
def test_linearity(a, b):
    m = rich_model()
    f = parse("exp(id1) - 1; abs(1+id2)^0.5 - 1", 2)
    h = parse("(1+id1)^2 * (1+id2)^(-1) - 1; id2^2", 2)
    combo = RepFunction(tuple(a * fc + b * hc for fc, hc in zip(f.components, h.components)), 2)
    lhs = transform(m, combo, check=False).drift_rate
    rhs = a * transform(m, f).drift_rate + b * transform(m, h).drift_rate
    assert np.abs(lhs - rhs).max() <= 1e-12 * max(1.0, np.abs(rhs).max())


@pytest.mark.parametrize("text", ["id", "exp(id) - 1", "(1+id)^3 - 1", "log(1+id)", "id^2", "exp(2*id) - 1"])
def test_conformal_covariance_vanishes(text):
    tc = transform(conformal_model(), parse(text))
    assert np.abs(tc.cov_rate_bilinear).max() <= 1e-12


def test_conformal_non_analytic_has_covariance():
    tc = transform(conformal_model(), parse("abs(1+id) - 1"))
    assert np.abs(tc.cov_rate_bilinear).max() > 1e-3


@pytest.mark.parametrize("outer,inner", [("exp(id) - 1", "log(1+id)"), ("(1+id)^2 - 1", "exp(id) - 1"),
                                         ("id^2", "abs(1+id) - 1"), ("log(1+id)", "(1+id)^0.5 - 1")])
def test_pushforward_composition(outer, inner):
    m = LevyModel.real(0.0, 0.2, [(0.4, 0.5), (-0.3, 1.0), (1.5, 0.25)])
    psi, xi = parse(outer), parse(inner)
    inner_tc = transform(m, xi)
    mid = LevyModel.real(0.0, 0.0, [(complex(a[0]).real, r) for a, r in
                                    zip(inner_tc.pushforward_atoms, inner_tc.pushforward_rates)])
    two_step = transform(mid, psi, check=False)
    # the unsimplified composite evaluates exactly as psi after xi
    direct = transform(m, substitute(psi, xi, simplify_result=False), check=False)
    np.testing.assert_array_equal(direct.pushforward_rates, two_step.pushforward_rates)
    np.testing.assert_array_equal(direct.pushforward_atoms, two_step.pushforward_atoms)
    simplified = transform(m, substitute(psi, xi), check=False)
    np.testing.assert_array_equal(simplified.pushforward_rates, two_step.pushforward_rates)
    assert np.abs(simplified.pushforward_atoms - two_step.pushforward_atoms).max() <= 1e-14 * 20


def test_pushforward_drops_atoms_mapped_to_zero():
    m = LevyModel.real(0.0, 0.0, [(1.0, 0.5), (-1.0, 0.25)])
    tc = transform(m, parse("id^2 - abs(id)^2"), check=False)
    assert len(tc.pushforward_atoms) == 0
    assert tc.dropped_intensity == 0.75


def test_pushforward_merges_equal_images():
    m = LevyModel.real(0.0, 0.0, [(1.0, 0.5), (-1.0, 0.25)])
    tc = transform(m, parse("id^2"))
    assert tc.pushforward_atoms.tolist() == [[1]]
    assert tc.pushforward_rates.tolist() == [0.75]


def test_scheduled_drift():
    m = LevyModel.real(0.0, 0.1, scheduled=[(0.5, [(1.0, 0.25), (-1.0, 0.75)])])
    tc = transform(m, parse("id^2 + id"))
    assert tc.scheduled_drift[0][0] == 0.5
    assert tc.scheduled_drift[0][1][0] == pytest.approx(0.25 * 2 + 0.75 * 0)


@pytest.mark.parametrize("name", sorted(p.name for p in MODELS.glob("*.toml")))
def test_shipped_models_load(name):
    m = LevyModel.from_toml(MODELS / name)
    assert LevyModel.from_dict(m.to_dict()).to_dict() == m.to_dict()


def test_bmjump_file_matches_oracle():
    m = LevyModel.from_toml(MODELS / "bmjump.toml")
    assert abs(levy_exponent(m, char_exponent_function([1.0], 1)) - KAPPA_H_ID) <= 1e-12


@pytest.mark.parametrize("data,message", [
    ({"dim": 1, "drift": [[0, 0]], "colour": 3}, "unknown model keys"),
    ({"drift": [[0, 0]]}, "missing model key"),
    ({"dim": 1, "jumps": [{"atom": [[1, 0]], "rate": -1}]}, "positive"),
    ({"dim": 1, "cov_hat": [[1, 2], [0, 1]]}, "symmetric"),
    ({"dim": 1, "scheduled": [{"time": 0.5, "outcomes": [{"value": [[1, 0]], "prob": 0.4}]}]}, "sum to 1"),
    ({"dim": 1, "jumps": [{"atom": [[1, 0]], "rate": 1, "size": 2}]}, "unknown jump keys"),
])
def test_model_validation(data, message):
    with pytest.raises(ModelError, match=message):
        LevyModel.from_dict(data)


def test_toml_round_trip(tmp_path):
    p = tmp_path / "m.toml"
    p.write_text('dim = 1\ndrift = [[0.1, 0.0]]\ncov_hat = [[0.09, 0.0], [0.0, 0.0]]\n'
                 '[[jumps]]\natom = [[1.0, 0.0]]\nrate = 0.5\n')
    m = LevyModel.from_toml(p)
    assert m.to_dict() == bm_jump().to_dict()


def test_two_dim_transform_real_form():
    m = jump_diffusion_2d()
    tc = transform(m, parse("(1+id1) * (1+id2) - 1", 2))
    # both gradients 1, cross second derivative 1 but components independent
    expected = 0.1 + 0.05 + 1.0 * (0.5 - 0.5) + 1.0 * (0.5 - 0.5)
    assert abs(tc.drift_rate[0] - expected) <= 1e-14
