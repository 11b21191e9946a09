import json
import pathlib
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freeze_oracles import metric_scenario
from jcaswave import (PrecoderSet, ScenarioConfig, SingularFimError, Target,
                      build_ru, comm_report, crb_total, draw_scenario, ecg,
                      fim, j_metric, mui, sensing_mi, sinr_and_rate,
                      synth_sensing_scene)
from jcaswave import oracle
from jcaswave.metrics import ksum, sinr_bound_conditions

FROZEN = json.loads((pathlib.Path(__file__).parent / "data" /
                     "frozen.json").read_text())


@pytest.fixture(scope="module")
def scenario():
    return metric_scenario()


def test_comm_metrics_match_frozen_loops(scenario):
    cfg, comm, scene, P = scenario
    ref = FROZEN["metrics"]
    assert mui(comm, P)[1] == pytest.approx(ref["mui"], rel=1e-12)
    assert ecg(comm, P)[1] == pytest.approx(ref["ecg"], rel=1e-12)
    assert j_metric(comm, P, 5.0) == pytest.approx(ref["j_mu5"], rel=1e-12)
    assert sinr_and_rate(comm, P, cfg)[1] == pytest.approx(ref["sum_rate"],
                                                           rel=1e-12)


def test_mi_matches_frozen_loop(scenario):
    cfg, _, scene, P = scenario
    assert sensing_mi(scene, P, cfg) == pytest.approx(
        FROZEN["metrics"]["mi_bits"], rel=1e-12)


def test_fim_matches_frozen_numeric_jacobian(scenario):
    cfg, _, scene, P = scenario
    F = fim(scene, P, cfg).fim
    ref = np.array(FROZEN["numeric_fim"])
    assert np.abs(F - ref).max() <= 1e-4 * np.abs(ref).max()


def test_mi_log_det_form(scenario):
    cfg, _, scene, P = scenario
    ld = 0.0
    for k in range(P.shape[0]):
        h = scene.h_s[k][:, None]
        M = np.eye(1) + cfg.tx_power * h.conj().T @ P[k] @ P[k].conj().T \
            @ h / cfg.noise_var_radar
        ld += np.log2(np.linalg.det(M).real)
    assert sensing_mi(scene, P, cfg) == pytest.approx(ld, rel=1e-12)


def test_ru_is_hermitian_with_one_negative_direction(scenario):
    _, comm, _, _ = scenario
    R = build_ru(comm, 5.0).matrices
    np.testing.assert_allclose(R, np.conj(np.swapaxes(R, -1, -2)))
    ev = np.linalg.eigvalsh(R)
    assert np.all(ev[..., 0] < 0)
    assert np.all(np.sum(ev < -1e-12, axis=-1) == 1)


def test_build_ru_rejects_nonpositive_mu(scenario):
    with pytest.raises(ValueError):
        build_ru(scenario[1], 0.0)


def test_precoder_power_invariant():
    with pytest.raises(ValueError):
        PrecoderSet(np.full((1, 2, 1), 1.0))
    with pytest.raises(ValueError):
        PrecoderSet(np.ones((2, 2)))
    assert PrecoderSet(np.eye(2)[None] / 1.0).power()[0] == 2.0


def test_sinr_zero_interference_is_snr():
    # orthogonal channels, matched precoders: SINR = P |h|^2 / (U sigma^2)
    cfg = ScenarioConfig(n_antennas=2, n_users=2, n_subcarriers=1,
                         n_targets=1, n_paths_per_user=1, noise_var_comm=0.5)
    comm, _ = draw_scenario(cfg)
    comm = replace(comm, h_matrices=np.eye(2, dtype=complex)[None] * 2)
    sinr, _ = sinr_and_rate(comm, np.eye(2)[None], cfg)
    np.testing.assert_allclose(sinr, [[4.0, 4.0]])
    assert mui(comm, np.eye(2)[None])[1] == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_dual_forms_random(seed):
    rng = np.random.default_rng(seed)
    cfg = ScenarioConfig(n_antennas=4, n_users=3, n_subcarriers=2,
                         n_targets=1, n_paths_per_user=2, rng_seed=seed)
    comm, _ = draw_scenario(cfg)
    P = rng.standard_normal((2, 4, 3)) + 1j * rng.standard_normal((2, 4, 3))
    H = comm.h_matrices
    assert mui(comm, P)[1] == pytest.approx(oracle.naive_mui(H, P),
                                            rel=1e-10)
    assert j_metric(comm, P, 2.5) == pytest.approx(
        oracle.naive_j(H, P, 2.5), rel=1e-10, abs=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_sum_sinr_bounded_below_by_j_when_conditions_hold(seed):
    rng = np.random.default_rng(seed)
    cfg = ScenarioConfig(n_antennas=8, n_users=2, n_subcarriers=4,
                         n_targets=1, n_paths_per_user=3, rng_seed=seed,
                         noise_var_comm=0.01)
    comm, _ = draw_scenario(cfg)
    H = comm.h_matrices
    P = np.linalg.pinv(H.conj().swapaxes(1, 2))
    P = P + 0.05 * (rng.standard_normal(P.shape)
                    + 1j * rng.standard_normal(P.shape))
    P /= np.linalg.norm(P, axis=1, keepdims=True)
    ok = sinr_bound_conditions(comm, P, cfg)
    if not ok.all():
        return
    sinr, _ = sinr_and_rate(comm, P, cfg)
    assert sinr.sum() >= j_metric(comm, P, cfg.mui_weight) - 1e-9


def test_comm_report_consistent(scenario):
    cfg, comm, _, P = scenario
    rep = comm_report(comm, P, cfg)
    assert rep.j_value == pytest.approx(rep.ecg_total
                                        - cfg.mui_weight * rep.mui_total)
    assert rep.sinr_per.shape == (3, 2)


def test_ksum_sums_leading_axis():
    x = np.arange(12.0).reshape(4, 3)
    np.testing.assert_array_equal(ksum(x), x.sum(axis=0))


def _one_target(cfg, k_delay=0.02e-3):
    return synth_sensing_scene(cfg, [Target(0.8 + 0.3j, 0.4, k_delay)])


def test_fim_symmetric_psd(scenario):
    cfg, _, scene, P = scenario
    F = fim(scene, P, cfg).fim
    np.testing.assert_allclose(F, F.T, atol=1e-9 * np.abs(F).max())
    ev = np.linalg.eigvalsh(0.5 * (F + F.T))
    assert ev[0] >= -1e-9 * ev[-1]


def test_fim_delay_block_vanishes_at_dc():
    cfg = ScenarioConfig(n_antennas=4, n_users=1, n_subcarriers=1,
                         n_targets=1, n_paths_per_user=1)
    scene = _one_target(cfg)
    P = np.ones((1, 4, 1)) / 2
    rep = fim(scene, P, cfg)
    assert np.all(rep.fim[2, :] == 0) and np.all(rep.fim[:, 2] == 0)
    np.testing.assert_allclose(rep.fim, oracle.numeric_fim(scene, P, cfg),
                               atol=1e-8)
    assert not rep.invertible
    with pytest.raises(SingularFimError):
        crb_total(rep)


def test_fim_noise_scaling():
    cfg = ScenarioConfig(n_antennas=4, n_users=1, n_subcarriers=3,
                         n_targets=1, n_paths_per_user=1)
    scene = _one_target(cfg)
    P = np.ones((3, 4, 1)) / 2
    F1 = fim(scene, P, cfg).fim
    F4 = fim(scene, P, replace(cfg, noise_var_radar=4.0)).fim
    np.testing.assert_allclose(F4, F1 / 2)            # 2 / sqrt(sigma^2)
    Fv = fim(scene, P, replace(cfg, noise_var_radar=4.0,
                               fim_noise_convention="variance")).fim
    np.testing.assert_allclose(Fv, F1 / 4)


def test_crb_total_accepts_matrix(scenario):
    cfg, _, scene, P = scenario
    rep = fim(scene, P, cfg)
    assert crb_total(rep.fim) == pytest.approx(crb_total(rep), rel=1e-9)
    with pytest.raises(SingularFimError):
        crb_total(np.zeros((4, 4)))


def test_f4_f1_ratio_grows_with_k():
    cfg = ScenarioConfig(n_antennas=4, n_users=1, n_subcarriers=33,
                         n_targets=1, n_paths_per_user=1)
    scene = _one_target(cfg)
    P = np.zeros((33, 4, 1))
    P[:, 0, 0] = 1.0
    r = []
    for k in (4, 8):
        Pk = P.copy()
        Pk[np.arange(33) != k] = 0.0
        r.append(fim(scene, Pk, cfg).f4_f1_ratio)
    assert r[1] / r[0] == pytest.approx(4.0, rel=1e-9)
