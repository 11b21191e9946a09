"""Recompute the frozen oracle values in ``tests/data/frozen.json``.

Run ``python3 tests/freeze_oracles.py``.  Everything here uses the brute
force references in :mod:`jcaswave.oracle` or plain loops; none of it
calls the solvers under test.
"""

import cmath
import json
import pathlib
import sys

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).parent))

from _instances import (GRID_STEP, N_GRID, closed_form_instance,  # noqa: E402
                        crb_grid_instance, crb_oracle_scene,
                        mi_grid_instance, psi2_real)
from jcaswave import ScenarioConfig, draw_scenario  # noqa: E402
from jcaswave import oracle  # noqa: E402

OUT = pathlib.Path(__file__).parent / "data" / "frozen.json"
SPEC = oracle.GridSpec(2, -1.0, 1.0, GRID_STEP)
CRB_ORACLE_TRIALS = 1_000_000


def metric_scenario():
    cfg = ScenarioConfig(n_antennas=4, n_users=2, n_subcarriers=3,
                         n_targets=2, n_paths_per_user=2, rng_seed=11,
                         noise_var_comm=0.3, noise_var_radar=0.7)
    comm, scene = draw_scenario(cfg)
    rng = np.random.default_rng(12)
    P = rng.standard_normal((3, 4, 2)) + 1j * rng.standard_normal((3, 4, 2))
    P /= np.linalg.norm(P, axis=1, keepdims=True)
    return cfg, comm, scene, P


def array_response_loops(omega, n):
    return [cmath.exp(1j * i * omega) / n ** 0.5 for i in range(n)]


def grid_values():
    out = {"mi": [], "frobenius": [], "determinant": []}
    for i in range(N_GRID):
        R, _, c, rho = mi_grid_instance(i)
        g = oracle.grid_search_j(
            R, lambda x: (np.sum(x ** 2, 1) <= 1)
            & (np.sum((x - c) ** 2, 1) <= rho), SPEC)
        out["mi"].append(g.j_value)
    for mode in ("frobenius", "determinant"):
        for i in range(N_GRID):
            R, _, Q, xi = crb_grid_instance(mode, i)
            g = oracle.grid_search_j(
                R, lambda x: (np.sum(x ** 2, 1) <= 1)
                & (psi2_real(x, Q, mode) <= xi), SPEC)
            out[mode].append(g.j_value)
    return out


def crb_factor_loops(scene, k):
    # C = A X Wdot[k], built entry by entry from the target list
    N = scene.steering.shape[0]
    T = scene.symbol_period
    C = np.zeros((N, len(scene.targets)), dtype=complex)
    for l, t in enumerate(scene.targets):
        wd = -2j * np.pi * k / T * cmath.exp(-2j * np.pi * k * t.delay / T)
        for n in range(N):
            C[n, l] = cmath.exp(1j * n * t.equiv_aod) / N ** 0.5 * t.gain * wd
    return C


def main():
    cfg, comm, scene, P = metric_scenario()
    H = comm.h_matrices
    sinr = oracle.naive_sinr(H, P, cfg.tx_power, cfg.noise_var_comm)
    ocfg, oscene = crb_oracle_scene()
    weight = 2.0 / np.sqrt(ocfg.noise_var_radar)
    lmin = oracle.crb_cov_random_oracle(
        crb_factor_loops(oscene, 1), weight, float(ocfg.n_users),
        CRB_ORACLE_TRIALS, np.random.default_rng(2024))
    frozen = {
        "array_response": {
            "omega": 0.3, "n": 4,
            "re": [z.real for z in array_response_loops(0.3, 4)],
            "im": [z.imag for z in array_response_loops(0.3, 4)]},
        "metrics": {
            "mui": oracle.naive_mui(H, P),
            "ecg": oracle.naive_ecg(H, P),
            "j_mu5": oracle.naive_j(H, P, 5.0),
            "mi_bits": oracle.naive_mi(scene.h_s, P, cfg.tx_power,
                                       cfg.noise_var_radar),
            "sum_rate": float(np.log2(1 + sinr).sum())},
        "numeric_fim": oracle.numeric_fim(scene, P, cfg).tolist(),
        "grid_j": grid_values(),
        "crb_random_oracle": {"k": 1, "trials": CRB_ORACLE_TRIALS,
                              "lambda_min": lmin},
        "closed_form_j": [closed_form_instance(i)[4] for i in range(20)],
    }
    OUT.parent.mkdir(exist_ok=True)
    OUT.write_text(json.dumps(frozen, indent=1) + "\n")
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
