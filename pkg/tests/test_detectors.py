import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from depthscope.detectors import (
    COSINE,
    DetectorConfig,
    ed_from_cosine,
    ed_from_kl,
    ed_from_overlap,
    ratio,
)
from depthscope.errors import InputError

curves = st.lists(st.floats(-1, 1, allow_nan=False), min_size=2, max_size=40)
positive_curves = st.lists(st.floats(0, 50, allow_nan=False), min_size=2, max_size=40)


@pytest.mark.parametrize("ed,L,want", [(16, 28, 0.61), (23, 28, 0.86), (1, 28, 0.07), (46, 64, 0.73), (61, 64, 0.97)])
def test_ratio_two_decimal_fixtures(ed, L, want):
    assert round(ratio(ed, L), 2) == want


def test_ratio_bounds():
    assert ratio(0, 1) == 1.0
    for bad in [(-1, 4), (4, 4), (1.0, 4), (True, 4)]:
        with pytest.raises(InputError):
            ratio(*bad)


def test_cosine_planted_crossing():
    L = 16
    curve = np.where(np.arange(L) <= 10, -0.3, 0.2)
    curve[:3] = 0.05
    est = ed_from_cosine(curve)
    assert (est.ed, est.ratio, est.method, est.flag) == (10, 0.6875, COSINE, None)


def test_cosine_flags():
    assert ed_from_cosine([0.1, 0.2, 0.3]).flag == "no-negative-phase"
    est = ed_from_cosine([0.1, -0.2, -0.3])
    assert (est.ed, est.flag) == (2, "no-transition")


def test_kl_half_max_fixture():
    est = ed_from_kl([4.0, 8.0, 5.0, 4.0, 3.9, 0.0])
    assert est.ed == 4 and est.params == {"kl_fraction": 0.5}
    assert ed_from_kl([0.0, 0.0]).flag == "zero-curve"
    assert ed_from_kl([1.0, 1.0]).flag == "no-crossing"


def test_overlap_threshold_fixture():
    assert ed_from_overlap([0.0, 0.2, 0.3, 0.4, 1.0]).ed == 3
    est = ed_from_overlap([0.0, 0.1, 0.3])
    assert (est.ed, est.flag) == (2, "no-crossing")


@pytest.mark.parametrize(
    "fn,curve",
    [
        (ed_from_kl, [1.0, -0.1]),
        (ed_from_overlap, [0.0, 1.2]),
        (ed_from_cosine, [0.0, float("nan")]),
        (ed_from_cosine, []),
        (ed_from_cosine, [[0.1, 0.2]]),
    ],
)
def test_invalid_curves(fn, curve):
    with pytest.raises(InputError):
        fn(curve)


def test_length_check():
    with pytest.raises(InputError):
        ed_from_cosine([0.1, -0.1], n_layers=3)


def test_config_validation():
    with pytest.raises(InputError):
        DetectorConfig(overlap_threshold=1.0)
    with pytest.raises(InputError):
        DetectorConfig(kl_fraction=0.0)


@settings(max_examples=200, deadline=None)
@given(curves, st.floats(0.01, 100))
def test_cosine_scale_invariance(curve, c):
    assume(all(v == 0 or abs(v) > 1e-200 for v in curve))
    assert ed_from_cosine(curve).ed == ed_from_cosine(np.array(curve) * c).ed


@settings(max_examples=200, deadline=None)
@given(positive_curves, st.floats(0.01, 100))
def test_kl_scale_invariance(curve, c):
    a = np.array(curve)
    b = a * c
    # rescaling can only move a value across the threshold through rounding
    assume(not np.any(np.isclose(a, 0.5 * a.max(), rtol=1e-9)))
    assert ed_from_kl(a).ed == ed_from_kl(b).ed


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=40), st.floats(0.01, 0.98), st.floats(0.01, 0.98))
def test_overlap_monotone_in_threshold(curve, t1, t2):
    lo, hi = sorted((t1, t2))
    assert ed_from_overlap(curve, cfg=DetectorConfig(lo)).ed <= ed_from_overlap(curve, cfg=DetectorConfig(hi)).ed


@settings(max_examples=200, deadline=None)
@given(positive_curves, st.floats(0.01, 0.98), st.floats(0.01, 0.98))
def test_kl_monotone_in_fraction(curve, f1, f2):
    lo, hi = sorted((f1, f2))
    assert ed_from_kl(curve, cfg=DetectorConfig(kl_fraction=hi)).ed <= ed_from_kl(curve, cfg=DetectorConfig(kl_fraction=lo)).ed


@settings(max_examples=200, deadline=None)
@given(curves)
def test_every_estimate_satisfies_ratio_identity(curve):
    for est in (ed_from_cosine(curve), ed_from_overlap(np.abs(curve)), ed_from_kl(np.abs(curve))):
        assert 0 <= est.ed < len(curve)
        assert est.ratio == (est.ed + 1) / len(curve)
        assert est.to_json()["ratio"] == est.ratio
