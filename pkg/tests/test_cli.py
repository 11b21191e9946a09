import csv
import io
from dataclasses import replace

import numpy as np
import pytest

from jcaswave import array_response, fim
from jcaswave.cli import (CSV_COLUMNS, ConfigError, EXIT_CONFIG,
                          EXIT_INFEASIBLE, EXIT_INVARIANT, EXIT_OK,
                          beam_pattern, beam_pattern_rows, load_config,
                          main, pattern_peaks, run_sweep, validate)

TINY = """
[scenario]
n_antennas = 4
n_users = 2
n_subcarriers = 4
n_targets = 2
n_paths_per_user = 2
rng_seed = 7

[sweep]
values = 10

[experiment]
algorithms = {algs}
n_monte_carlo = {draws}
output_path = -
"""


def _cfg(algs="comm_opt", draws=1, kind="snr", **kw):
    return load_config(TINY.format(algs=algs, draws=draws), kw or None,
                       sweep_kind=kind)


def _parse(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_one_draw_one_value_one_algorithm_gives_two_rows(capsys):
    rows, text = run_sweep(_cfg())
    parsed = _parse(text)
    assert len(parsed) == 2
    assert [r["draw"] for r in parsed] == ["0", "-1"]
    assert tuple(parsed[0].keys()) == CSV_COLUMNS
    assert parsed[0]["j_value"] == parsed[1]["j_value"]
    assert parsed[0]["wall_ms"] == ""


def test_threshold_sweep_sets_rho_and_xi():
    cfg = load_config(TINY.format(algs="alg1", draws=1).replace(
        "values = 10", "values = 0.5, 1.0"), sweep_kind="threshold")
    rows, text = run_sweep(cfg)
    detail = [r for r in _parse(text) if r["draw"] == "0"]
    assert [(r["rho"], r["xi"]) for r in detail] == [("0.5", "0.5"),
                                                     ("1", "1")]
    assert all(r["termination"] != "infeasible" for r in detail)


def test_unknown_key_and_section_rejected():
    with pytest.raises(ConfigError):
        load_config("[scenario]\nn_antenas = 4\n")
    with pytest.raises(ConfigError):
        load_config("[plots]\nx = 1\n")
    with pytest.raises(ConfigError):
        load_config("[experiment]\nalgorithms = alg9\n", sweep_kind="snr")
    with pytest.raises(ConfigError):
        load_config("[sweep]\nkind = snr\n", sweep_kind="threshold")


def test_defaults_follow_sweep_kind():
    cfg = load_config("", sweep_kind="snr")
    assert cfg.sweep_values == (-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0)
    assert cfg.scenario.n_subcarriers == 512
    assert cfg.jcas.epsilon == 0.05 and cfg.scenario.mui_weight == 5.0


def test_fixed_entities_parsed():
    cfg = load_config("""
[scenario]
n_users = 1
n_paths_per_user = 1
n_targets = 1
[comm_paths]
u0_p0 = 1.0, 0.0, 30.0, 0.0
[targets]
t0 = 0.5, 0.5, -30.0, 0.00001
""")
    assert cfg.comm_paths[0][0].equiv_aod == pytest.approx(np.pi / 2)
    assert cfg.targets[0].gain == 0.5 + 0.5j


def test_byte_identical_across_runs_and_jobs(tmp_path):
    cfg = _cfg(algs="comm_opt mi_opt alg1", draws=3)
    a = run_sweep(cfg, jobs=1, out_path=str(tmp_path / "a.csv"))[1]
    b = run_sweep(cfg, jobs=2, out_path=str(tmp_path / "b.csv"))[1]
    assert a == b
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv") \
        .read_bytes()


def test_main_exit_codes(tmp_path, capsys):
    good = tmp_path / "c.ini"
    good.write_text(TINY.format(algs="comm_opt", draws=1))
    out = tmp_path / "o.csv"
    assert main(["sweep-snr", "--config", str(good), "--out",
                 str(out)]) == EXIT_OK
    assert len(out.read_text().splitlines()) == 3
    bad = tmp_path / "bad.ini"
    bad.write_text("[scenario]\nbogus = 1\n")
    assert main(["sweep-snr", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["sweep-snr", "--config", str(tmp_path / "none.ini")]) \
        == EXIT_CONFIG
    assert main(["sweep-snr", "--config", str(good), "--out",
                 str(tmp_path / "no" / "dir.csv")]) == EXIT_CONFIG


def test_main_all_infeasible(tmp_path, capsys):
    # one user, three targets: rank-1 P P^H stays far from Q*
    ini = tmp_path / "inf.ini"
    ini.write_text(TINY.format(algs="alg2", draws=1).replace(
        "[sweep]\nvalues = 10", "[sweep]\nvalues = 0.001").replace(
        "n_users = 2", "n_users = 1").replace("n_targets = 2",
                                              "n_targets = 3")
        + "[jcas]\npsi2_mode = frobenius\nepsilon = 0.0005\n")
    assert main(["sweep-threshold", "--config", str(ini), "--out",
                 str(tmp_path / "x.csv")]) == EXIT_INFEASIBLE


def test_desk_scale_and_flag_overrides():
    cfg = load_config("", {"scenario.n_antennas": 8,
                           "scenario.n_subcarriers": 32,
                           "jcas.psi2_mode": "frobenius"}, "snr")
    assert (cfg.scenario.n_antennas, cfg.scenario.n_subcarriers) == (8, 32)
    assert cfg.jcas.psi2_mode == "frobenius"


def test_beam_pattern_matched_steering_peak():
    omega = np.pi * np.sin(np.radians(20.0))
    P = array_response(omega, 8)[:, None]
    ang = np.arange(-90, 90.01, 0.25)
    _, total = beam_pattern(P, ang)
    assert total.max() == 0.0
    assert ang[np.argmax(total)] == pytest.approx(20.0)


def test_beam_pattern_uniform_peaks_at_broadside():
    ang = np.arange(-90, 90.01, 0.5)
    _, total = beam_pattern(np.ones((6, 1)) / np.sqrt(6), ang)
    assert ang[np.argmax(total)] == 0.0
    with pytest.raises(ValueError):
        beam_pattern(np.ones((6, 1)), [95.0])


def test_pattern_peaks():
    ang = np.linspace(-10, 10, 21)
    g = -np.minimum((ang - 3) ** 2, (ang + 6) ** 2 + 1)
    np.testing.assert_allclose(pattern_peaks(ang, g), [3.0, -6.0])


def test_beam_pattern_rows_layout():
    cfg = _cfg(algs="comm_opt mi_opt")
    rows = beam_pattern_rows(cfg, 1, [-10.0, 0.0, 10.0])
    assert len(rows) == 2 * 3 * 3
    assert {r[2] for r in rows} == {"u0", "u1", "total"}
    with pytest.raises(ConfigError):
        beam_pattern_rows(cfg, 9, [0.0])


def test_beam_pattern_command(tmp_path, capsys):
    ini = tmp_path / "b.ini"
    ini.write_text(TINY.format(algs="comm_opt", draws=1))
    out = tmp_path / "beam.csv"
    assert main(["beam-pattern", "--config", str(ini), "--angles=-10:10:5",
                 "--out", str(out)]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0] == "algorithm,angle_deg,column,power_db"
    assert len(lines) == 1 + 5 * 3


def test_validate_fast_passes():
    results = validate("fast")
    assert all(r.passed for r in results), [r for r in results
                                            if not r.passed]


def test_validate_flags_corrupted_fim():
    def flipped(scene, prec, cfg):
        rep = fim(scene, prec, cfg)
        F = rep.fim.copy()
        F[0, 1:] *= -1
        F[1:, 0] *= -1
        return replace(rep, fim=F)
    bad = {r.name for r in validate("fast", fim_fn=flipped) if not r.passed}
    assert bad == {"fim_matches_numeric"}


def test_validate_command_exit(capsys):
    assert main(["validate"]) == EXIT_OK
    assert "6/6 checks passed" in capsys.readouterr().out
    assert EXIT_INVARIANT == 1


def test_desk_snr_sweep_budget():
    # 5 of the 100 draws, extrapolated; draws are independent
    import time
    import warnings
    cfg = load_config("", {"scenario.n_antennas": 8,
                           "scenario.n_subcarriers": 32,
                           "experiment.n_monte_carlo": 5}, "snr")
    assert len(cfg.sweep_values) == 7
    t = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rows, _ = run_sweep(cfg)
    per_draw = (time.perf_counter() - t) / 5
    assert len(rows) == (5 + 1) * 7 * len(cfg.algorithms)
    assert 100 * per_draw < 600, per_draw
