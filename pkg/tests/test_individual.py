import json
import pathlib
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _instances import crb_oracle_scene
from jcaswave import (DegenerateChannelError, ScenarioConfig, Target,
                      array_response, draw_scenario, j_metric,
                      opt_comm_precoder, opt_crb_covariance, opt_mi_precoder,
                      sensing_mi, synth_sensing_scene)
from jcaswave import oracle
from jcaswave.individual import (_project_feasible, covariance_factor,
                                 negative_eigenpairs)

FROZEN = json.loads((pathlib.Path(__file__).parent / "data" /
                     "frozen.json").read_text())


@pytest.fixture(scope="module")
def desk():
    cfg = ScenarioConfig(n_antennas=6, n_users=2, n_subcarriers=4,
                         n_targets=2, n_paths_per_user=2, rng_seed=3)
    return cfg, *draw_scenario(cfg)


def test_comm_precoder_unit_columns_and_eigen(desk):
    cfg, comm, _ = desk
    P = opt_comm_precoder(comm, 5.0).matrices
    np.testing.assert_allclose(np.linalg.norm(P, axis=1), 1.0)
    from jcaswave import build_ru
    R = build_ru(comm, 5.0).matrices
    for k in range(4):
        for u in range(2):
            p = P[k, :, u]
            lam = np.linalg.eigvalsh(R[k, u])[0]
            np.testing.assert_allclose(R[k, u] @ p, lam * p, atol=1e-10)


def test_comm_precoder_dominates_random(desk):
    cfg, comm, _ = desk
    jstar = j_metric(comm, opt_comm_precoder(comm, 5.0), 5.0)
    rng = np.random.default_rng(0)
    best = oracle.random_dominance(
        lambda Ps: np.array([oracle.naive_j(comm.h_matrices, P, 5.0)
                             for P in Ps]),
        lambda g, m: oracle.haar_unit_columns(g, (m, 4, 6, 2)), 2000, rng)
    assert jstar >= best - 1e-9


def test_mi_precoder_rank_one_along_sensing_channel(desk):
    cfg, comm, scene = desk
    P, gain = opt_mi_precoder(scene, comm, 5.0)
    M = P.matrices
    np.testing.assert_allclose(np.sum(np.abs(M) ** 2, axis=(1, 2)), 2.0)
    for k in range(4):
        u, s, _ = np.linalg.svd(M[k])
        assert s[1] < 1e-10 * s[0]
        h = scene.h_s[k] / np.linalg.norm(scene.h_s[k])
        assert abs(np.vdot(u[:, 0], h)) == pytest.approx(1.0)
    assert gain.lam.shape == (4, 2)


def test_mi_precoder_dominates_random(desk):
    cfg, comm, scene = desk
    P, _ = opt_mi_precoder(scene, comm, 5.0)
    mstar = sensing_mi(scene, P, cfg)
    best = oracle.random_dominance(
        lambda Ps: np.array([oracle.naive_mi(scene.h_s, X, 1.0, 1.0)
                             for X in Ps]),
        lambda g, m: oracle.haar_unit_columns(g, (m, 4, 6, 2)), 2000,
        np.random.default_rng(1))
    assert mstar >= best - 1e-9


def test_zero_sensing_channel_rejected(desk):
    cfg, comm, scene = desk
    with pytest.raises(DegenerateChannelError):
        opt_mi_precoder(replace(scene, h_s=np.zeros_like(scene.h_s)),
                        comm, 5.0)


def test_negative_eigenpairs_requires_negative():
    with pytest.raises(DegenerateChannelError):
        negative_eigenpairs(np.eye(3)[None])
    r, v = negative_eigenpairs(np.diag([2.0, -1.0])[None])
    assert r[0] == -1.0
    np.testing.assert_allclose(v[0], [0, 1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.5, 4.0))
def test_projection_is_feasible_and_idempotent(seed, U):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((2, 4, 4)) + 1j * rng.standard_normal((2, 4, 4))
    Q = _project_feasible(G + np.conj(np.swapaxes(G, 1, 2)), U)
    ev = np.linalg.eigvalsh(Q)
    assert ev.min() >= -1e-12
    assert np.all(ev.sum(axis=1) <= U + 1e-9)
    np.testing.assert_allclose(_project_feasible(Q, U), Q, atol=1e-10)


def test_projection_is_nearest_point():
    # diag(3, 1) onto trace <= 2: nearest is diag(2, 0), not a rescale
    Q = _project_feasible(np.diag([3.0, 1.0]).astype(complex)[None], 2.0)
    np.testing.assert_allclose(Q[0], np.diag([2.0, 0.0]), atol=1e-12)


def test_crb_single_target_rank_one_on_steering():
    cfg = ScenarioConfig(n_antennas=4, n_users=2, n_subcarriers=3,
                         n_targets=1, n_paths_per_user=1)
    scene = synth_sensing_scene(cfg, [Target(1.0, 0.6, 0.02e-3)])
    res = opt_crb_covariance(scene, cfg)
    a = array_response(0.6, 4)
    for k in (1, 2):
        np.testing.assert_allclose(res.q_matrices[k], 2 * np.outer(a, a.conj()),
                                   atol=1e-6)


def test_crb_zero_gain_returns_zero_objective():
    cfg = ScenarioConfig(n_antennas=4, n_users=1, n_subcarriers=2,
                         n_targets=1, n_paths_per_user=1)
    scene = synth_sensing_scene(cfg, [Target(0.0, 0.3, 0.01e-3)])
    res = opt_crb_covariance(scene, cfg)
    np.testing.assert_array_equal(res.t_value, 0.0)
    np.testing.assert_allclose(np.trace(res.q_matrices, axis1=1, axis2=2), 1)


def test_crb_covariance_beats_random_oracle():
    cfg, scene = crb_oracle_scene()
    res = opt_crb_covariance(scene, cfg, keep_history=True)
    ref = FROZEN["crb_random_oracle"]["lambda_min"]
    assert res.t_value[1] >= 0.98 * ref
    hist = np.array(res.history)[:, 1]
    assert np.all(np.diff(hist) >= 0)
    Q = res.q_matrices[1]
    assert np.linalg.eigvalsh(Q).min() >= -1e-10
    assert np.trace(Q).real <= 2 + 1e-9


def test_crb_shared_covariance(desk):
    cfg, _, scene = desk
    res = opt_crb_covariance(scene, cfg, per_k=False)
    np.testing.assert_allclose(res.q_matrices, res.q_matrices[:1].repeat(4, 0))


def test_covariance_factor_reconstructs_rank_u():
    rng = np.random.default_rng(4)
    G = rng.standard_normal((1, 5, 2)) + 1j * rng.standard_normal((1, 5, 2))
    Q = G @ np.conj(np.swapaxes(G, 1, 2))
    P = covariance_factor(Q, 2)
    np.testing.assert_allclose(P @ np.conj(np.swapaxes(P, 1, 2)), Q,
                               atol=1e-10)
