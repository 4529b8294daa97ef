import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthscope.errors import InputError, ShapeError
from depthscope.model import (
    PRESETS,
    InterventionSpec,
    ModelConfig,
    decode_lens,
    expected_shapes,
    forward,
    init_random,
    preset,
)
from depthscope.tensor import cosim_rows

from conftest import small_config
from reference import reference_forward


def test_forward_matches_loop_reference(small_weights):
    w64 = small_weights.astype(np.float64)
    tokens = [3, 1, 4, 1, 5, 9, 2]
    trace = forward(w64, tokens)
    h_ref, y_ref = reference_forward(w64, tokens)
    np.testing.assert_allclose(trace.h, h_ref, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(trace.y, y_ref, rtol=1e-10, atol=1e-14)


def test_float32_forward_close_to_reference(small_weights):
    tokens = [0, 7, 7, 2, 11]
    _, y_ref = reference_forward(small_weights, tokens)
    np.testing.assert_allclose(forward(small_weights, tokens).y, y_ref, rtol=1e-4, atol=1e-6)


def test_residual_bookkeeping(tiny_weights):
    tr = forward(tiny_weights, [0, 10, 20, 30, 1])
    np.testing.assert_array_equal(tr.hhat, tr.h[:-1] + tr.a)
    np.testing.assert_array_equal(tr.h[1:], tr.hhat + tr.m)
    assert tr.h.shape == (9, 5, 64) and tr.y.shape == (5, 258)


def test_forward_is_deterministic(tiny_weights):
    a = forward(tiny_weights, [0, 5, 9, 1])
    b = forward(tiny_weights, [0, 5, 9, 1])
    assert a.y.tobytes() == b.y.tobytes() and a.h.tobytes() == b.h.tobytes()


def test_init_random_is_seeded():
    cfg = preset("tiny")
    assert init_random(cfg, 3)["embed"].tobytes() == init_random(cfg, 3)["embed"].tobytes()
    assert init_random(cfg, 3)["embed"].tobytes() != init_random(cfg, 4)["embed"].tobytes()


def test_causality(small_weights):
    a = forward(small_weights, [1, 2, 3, 4, 5, 6])
    b = forward(small_weights, [1, 2, 3, 9, 9, 9])
    np.testing.assert_array_equal(a.h[:, :3], b.h[:, :3])
    np.testing.assert_array_equal(a.y[:3], b.y[:3])


def test_lens_of_last_residual_equals_output_bitwise(tiny_weights):
    tr = forward(tiny_weights, [0, 40, 41, 42, 43, 1])
    assert decode_lens(tiny_weights, tr.h[-1]).tobytes() == tr.y.tobytes()
    assert decode_lens(tiny_weights, tr.h[-1][2]).tobytes() == tr.y[2].tobytes()


def test_decode_lens_shape_error(tiny_weights):
    with pytest.raises(ShapeError):
        decode_lens(tiny_weights, np.zeros(63))


def test_taped_forward_equals_eager(small_weights):
    tokens = [2, 3, 5, 7]
    eager = forward(small_weights, tokens)
    taped, handles = forward(small_weights, tokens, record_tape=True)
    assert eager.y.tobytes() == taped.y.tobytes()
    assert eager.h.tobytes() == taped.h.tobytes()
    replayed = handles.tape.replay()
    assert replayed[handles.logits.index - len(handles.tape.leaves)].tobytes() == handles.logits.value.tobytes()


def test_silenced_layer_is_identity_with_zero_cosines(tiny_weights):
    w = tiny_weights.with_layer_silenced(3)
    tr = forward(w, [0, 5, 6, 7, 1])
    np.testing.assert_array_equal(tr.h[4], tr.h[3])
    assert np.all(tr.a[3] == 0) and np.all(tr.m[3] == 0)
    assert np.all(cosim_rows(tr.a[3], tr.h[3]) == 0.0)


def test_skip_intervention_matches_reference(small_weights):
    w64 = small_weights.astype(np.float64)
    tokens = [4, 8, 15, 16, 2, 3]
    tr = forward(w64, tokens, InterventionSpec.skip(1, 2))
    h_ref, y_ref = reference_forward(w64, tokens, skip=(1, 2))
    np.testing.assert_allclose(tr.h, h_ref, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(tr.y, y_ref, rtol=1e-10, atol=1e-14)
    np.testing.assert_array_equal(tr.h[2, :3], tr.h[1, :3])


def test_erase_intervention_matches_reference(small_weights):
    w64 = small_weights.astype(np.float64)
    tokens = [4, 8, 15, 16, 2]
    vec = np.linspace(-1, 1, 16)
    tr = forward(w64, tokens, InterventionSpec.erase(0, 3, vec))
    h_ref, y_ref = reference_forward(w64, tokens, erase=(0, 3, vec))
    np.testing.assert_allclose(tr.h, h_ref, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(tr.y, y_ref, rtol=1e-10, atol=1e-14)


def test_intervention_validation(tiny_weights):
    with pytest.raises(InputError):
        forward(tiny_weights, [0, 1], InterventionSpec.skip(8, 0))
    with pytest.raises(InputError):
        forward(tiny_weights, [0, 1], InterventionSpec.skip(0, 5))
    with pytest.raises(InputError):
        forward(tiny_weights, [0, 1], InterventionSpec.erase(0, 0, np.zeros(3)))


@pytest.mark.parametrize("tokens", [[], [0, 258], [-1], [[1, 2]]])
def test_bad_tokens(tiny_weights, tokens):
    with pytest.raises(InputError):
        forward(tiny_weights, tokens)


@pytest.mark.parametrize(
    "name,L,q,kv",
    [("1.5B-shape", 28, 12, 2), ("7B-shape", 28, 28, 4), ("14B-shape", 48, 40, 8), ("32B-shape", 64, 40, 8)],
)
def test_preset_layer_and_head_counts(name, L, q, kv):
    for f in (1.0, 0.05):
        cfg = preset(name, f)
        assert (cfg.n_layers, cfg.n_q_heads, cfg.n_kv_heads) == (L, q, kv)
    assert preset(name, 0.05).d_model < PRESETS[name].d_model


def test_tiny_preset():
    cfg = preset("tiny")
    assert (cfg.n_layers, cfg.d_model, cfg.n_q_heads, cfg.n_kv_heads) == (8, 64, 4, 2)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(sorted(PRESETS)), st.floats(0.005, 1.0))
def test_scaled_presets_are_valid(name, f):
    cfg = preset(name, f)
    assert cfg.d_model % cfg.n_q_heads == 0 and cfg.d_head % 2 == 0
    assert cfg.vocab_size >= 258


def test_config_validation():
    with pytest.raises(InputError):
        ModelConfig(2, 15, 4, 2, 8, 19)
    with pytest.raises(InputError):
        ModelConfig(2, 16, 4, 3, 8, 19)
    with pytest.raises(InputError):
        ModelConfig(0, 16, 4, 2, 8, 19)
    with pytest.raises(InputError):
        preset("nope")


def test_weights_reject_wrong_shapes_and_are_readonly():
    w = init_random(small_config(), 0)
    with pytest.raises(ShapeError):
        w.replace({"embed": np.zeros((3, 3))})
    with pytest.raises(ValueError):
        w["embed"][0, 0] = 1.0
    assert set(w.tensors) == set(expected_shapes(w.config))


def test_config_roundtrip_and_digest():
    cfg = small_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert len(cfg.digest()) == 64 and cfg.digest() != small_config(n_layers=3).digest()
