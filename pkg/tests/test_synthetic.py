import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthscope.detectors import COSINE, KL, METHODS, OVERLAP, ed_from_kl, ed_from_overlap
from depthscope.errors import InputError
from depthscope.probes import cosine_profile
from depthscope.synthetic import (
    SyntheticTraceSpec,
    detect_all,
    gen_trace,
    generate,
    planted_lens_curves,
    validate_detectors,
)


def test_trace_obeys_residual_recurrence():
    tr = gen_trace(SyntheticTraceSpec(12, 16, 2, 7, noise_sigma=0.1, seed=3))
    np.testing.assert_allclose(tr.hhat, tr.h[:-1] + tr.a)
    np.testing.assert_allclose(tr.h[1:], tr.hhat + tr.m)


def test_phase_signs():
    spec = SyntheticTraceSpec(10, 16, 2, 6, seed=1)
    prof = cosine_profile(gen_trace(spec))
    assert np.all(np.abs(prof.avg[:3]) < 1e-12)
    assert np.all(prof.avg[3:7] < 0)
    assert np.all(prof.avg[7:] > 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.data())
def test_planted_lens_curves_cross_at_k(L, data):
    k = data.draw(st.integers(1, L - 1))
    kl, overlap = planted_lens_curves(L, k)
    assert ed_from_kl(kl).ed == k and ed_from_overlap(overlap).ed == k
    assert kl[-1] == 0 and overlap[-1] == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 64), st.data(), st.integers(0, 2**31))
def test_zero_noise_recovery(L, data, seed):
    k_star = data.draw(st.integers(1, L - 1))
    k_write = data.draw(st.integers(0, k_star - 1))
    found = detect_all(generate(SyntheticTraceSpec(L, 16, k_write, k_star, seed=seed)))
    assert found == {m: k_star for m in METHODS}


def test_spec_validation():
    with pytest.raises(InputError):
        gen_trace(SyntheticTraceSpec(8, 16, 5, 3))
    with pytest.raises(InputError):
        gen_trace(SyntheticTraceSpec(8, 16, 0, 8))
    with pytest.raises(InputError):
        planted_lens_curves(8, 0)


def test_validate_report_shape():
    rep = validate_detectors(5)
    assert rep["n_seeds"] == 5 and len(rep["entries"]) == 5
    assert [e["n_layers"] for e in rep["entries"]] == [8, 16, 28, 48, 64]
    for m in (COSINE, KL, OVERLAP):
        assert rep["detectors"][m]["recovery_rate"] == 1.0
        assert rep["detectors"][m]["off_by"] == {"0": 5}
    assert validate_detectors(5) == rep


def test_noise_degrades_but_reports_histogram():
    rep = validate_detectors(40, noise_sigma=0.3)
    assert any(rep["detectors"][m]["recovery_rate"] < 1.0 for m in METHODS)
    assert all(sum(rep["detectors"][m]["off_by"].values()) == 40 for m in METHODS)
    with pytest.raises(InputError):
        validate_detectors(0)
