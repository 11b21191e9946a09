import json
import pathlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jcaswave import (CommPath, ScenarioConfig, Target, array_response,
                      draw_scenario, steering_derivative, synth_comm_channel,
                      synth_sensing_scene)
from jcaswave.channel import entity_rng

FROZEN = json.loads((pathlib.Path(__file__).parent / "data" /
                     "frozen.json").read_text())

angles = st.floats(-np.pi, np.pi, allow_nan=False)


def test_array_response_matches_frozen_loop_values():
    ref = FROZEN["array_response"]
    a = array_response(ref["omega"], ref["n"])
    np.testing.assert_allclose(a.real, ref["re"], atol=1e-15)
    np.testing.assert_allclose(a.imag, ref["im"], atol=1e-15)


@given(angles, st.integers(1, 64))
def test_array_response_unit_norm(omega, n):
    assert np.linalg.norm(array_response(omega, n)) == pytest.approx(1.0)


@given(angles, st.integers(2, 32))
def test_array_response_periodic(omega, n):
    np.testing.assert_allclose(array_response(omega + 2 * np.pi, n),
                               array_response(omega, n), atol=1e-12)


def test_array_response_stacks_columns():
    A = array_response([0.1, -0.4, 2.0], 5)
    assert A.shape == (5, 3)
    np.testing.assert_allclose(A[:, 1], array_response(-0.4, 5))


@given(angles)
def test_steering_derivative_central_difference(omega):
    h = 1e-6
    fd = (array_response(omega + h, 6) - array_response(omega - h, 6)) / (2 * h)
    np.testing.assert_allclose(steering_derivative(omega, 6), fd, atol=1e-8)


def _cfg(**kw):
    base = dict(n_antennas=4, n_users=2, n_subcarriers=6, n_targets=2,
                n_paths_per_user=2)
    base.update(kw)
    return ScenarioConfig(**base)


def test_single_path_channel_is_phase_rotated_steering():
    cfg = _cfg(n_users=1, n_paths_per_user=1)
    p = CommPath(0.5 - 0.2j, 0.9, 0.04e-3)
    H = synth_comm_channel(cfg, [[p]]).h_matrices
    for k in range(cfg.n_subcarriers):
        ph = np.exp(-2j * np.pi * k * p.delay / cfg.symbol_period)
        np.testing.assert_allclose(H[k, :, 0],
                                   p.gain * ph * array_response(0.9, 4))


def test_zero_delay_channel_flat_over_subcarriers():
    cfg = _cfg(n_users=1, n_paths_per_user=1)
    H = synth_comm_channel(cfg, [[CommPath(1.0, 0.3, 0.0)]]).h_matrices
    np.testing.assert_allclose(H, np.broadcast_to(H[:1], H.shape))


def test_path_count_and_delay_checked():
    cfg = _cfg(n_users=1, n_paths_per_user=2)
    with pytest.raises(ValueError):
        synth_comm_channel(cfg, [[CommPath(1.0, 0.3, 0.0)]])
    with pytest.raises(ValueError):
        synth_comm_channel(cfg, [[CommPath(1.0, 0.3, 0.0),
                                  CommPath(1.0, 0.3, 1.0)]])


def test_sensing_scene_factorization():
    cfg = _cfg()
    t = [Target(1 + 1j, 0.2, 0.01e-3), Target(-0.5j, -1.0, 0.09e-3)]
    sc = synth_sensing_scene(cfg, t)
    assert sc.n_targets == 2
    np.testing.assert_allclose(sc.gains, [1 + 1j, -0.5j])
    k = 3
    h = sum(x.gain * np.exp(-2j * np.pi * k * x.delay / cfg.symbol_period)
            * array_response(x.equiv_aod, 4) for x in t)
    np.testing.assert_allclose(sc.h_s[k], h)


def test_empty_scene_rejected():
    with pytest.raises(ValueError):
        synth_sensing_scene(_cfg(), [])


@pytest.mark.parametrize("kw", [dict(n_antennas=1, n_users=2),
                                dict(cp_length=0.3e-3),
                                dict(tx_power=0.0),
                                dict(fim_noise_convention="other"),
                                dict(n_targets=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        _cfg(**kw)


def test_draw_scenario_reproducible_and_keyed():
    cfg = _cfg(rng_seed=5)
    c1, s1 = draw_scenario(cfg, 3)
    c2, s2 = draw_scenario(cfg, 3)
    np.testing.assert_array_equal(c1.h_matrices, c2.h_matrices)
    np.testing.assert_array_equal(s1.h_s, s2.h_s)
    c3, _ = draw_scenario(cfg, 4)
    assert not np.allclose(c1.h_matrices, c3.h_matrices)


def test_entity_streams_do_not_depend_on_other_counts():
    # adding a user must not change the targets or the first user
    c1, s1 = draw_scenario(_cfg(n_users=1, rng_seed=2))
    c2, s2 = draw_scenario(_cfg(n_users=3, rng_seed=2))
    np.testing.assert_array_equal(s1.h_s, s2.h_s)
    np.testing.assert_array_equal(c1.h_matrices[:, :, 0],
                                  c2.h_matrices[:, :, 0])


def test_entity_rng_distinct_streams():
    a = entity_rng(0, 0, 1, 0).standard_normal(4)
    b = entity_rng(0, 0, 1, 1).standard_normal(4)
    assert not np.allclose(a, b)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32))
def test_drawn_delays_inside_cyclic_prefix(seed):
    cfg = _cfg(rng_seed=seed)
    comm, scene = draw_scenario(cfg)
    assert np.all((scene.delays >= 0) & (scene.delays <= cfg.cp_length))
    assert np.all(np.abs(scene.equiv_aods) <= np.pi)
    assert comm.h_matrices.shape == (6, 4, 2)
