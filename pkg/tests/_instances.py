"""Seeded problem instances shared by the tests and the freeze script."""

import numpy as np

from jcaswave import ScenarioConfig, Target, synth_sensing_scene

GRID_STEP = 1e-3
N_GRID = 30


def _r_matrix(rng):
    # R_u shape for N = 2, U = 1: mu g g^T - h h^T with one negative eigenvalue
    h = rng.standard_normal(2)
    g = rng.standard_normal(2)
    return 5 * np.outer(g, g) - np.outer(h, h), h


def mi_grid_instance(i):
    """``(R, h, c, rho)``: real N=2, U=1, K=1 MI-constrained problem."""
    rng = np.random.default_rng([5, 1, i])
    R, h = _r_matrix(rng)
    c = rng.standard_normal(2)
    c /= np.linalg.norm(c)
    return R, h, c, float(rng.uniform(0.1, 1.5))


def crb_grid_instance(mode, i):
    """``(R, h, Q, xi)``: real N=2, U=1, K=1 CRB-constrained problem."""
    rng = np.random.default_rng([5, 2 if mode == "frobenius" else 3, i])
    R, h = _r_matrix(rng)
    G = rng.standard_normal((2, 2))
    Q = G @ G.T
    Q *= rng.uniform(0.5, 1.0) / np.trace(Q)
    if mode == "frobenius":
        # below lambda_min(Q) the Frobenius ball misses every rank-1 matrix
        xi = max(rng.uniform(0.1, 0.6), 1.05 * np.linalg.eigvalsh(Q)[0])
    else:
        xi = rng.uniform(0.01, 0.2)
    return R, h, Q, float(xi)


def psi2_real(x, Q, mode):
    """Vectorized constraint value for real points ``x`` of shape (M, 2)."""
    D = x[:, :, None] * x[:, None, :] - Q
    if mode == "determinant":
        return np.abs(np.linalg.det(D))
    return np.linalg.norm(D, axis=(1, 2))


def closed_form_instance(i, N=4):
    """U=1 problem where a closed-form optimum is known.

    Returns ``(R, h, c, rho, j_star)``.  For ``i < 10`` the unit eigenvector
    of the negative eigenvalue is feasible (``rho`` above its distance), so
    ``J* = -r``.  Otherwise ``c`` is a scaled copy of that eigenvector and
    ``rho`` is small, so the optimum is ``(|c| + sqrt(rho)) v`` with
    ``J* = -r (|c| + sqrt(rho))^2``.
    """
    rng = np.random.default_rng([9, i])
    Z = rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))
    V, _ = np.linalg.qr(Z)
    r = -rng.uniform(1, 5)
    ev = np.concatenate([[r], rng.uniform(0.1, 3, N - 1)])
    R = (V * ev) @ V.conj().T
    R = 0.5 * (R + R.conj().T)
    h = rng.standard_normal(N) + 1j * rng.standard_normal(N)
    v = V[:, 0]
    if i < 10:
        c = rng.standard_normal(N) + 1j * rng.standard_normal(N)
        c *= rng.uniform(0.3, 1) / np.linalg.norm(c)
        vv = v * np.exp(1j * np.angle(np.vdot(v, c)))
        rho = np.sum(np.abs(vv - c) ** 2) * rng.uniform(1.0, 1.3)
        j_star = -r
    else:
        beta = rng.uniform(0.2, 0.6)
        c = beta * v * np.exp(1j * rng.uniform(0, 2 * np.pi))
        rho = rng.uniform(0.02, 0.1)
        j_star = -r * (beta + np.sqrt(rho)) ** 2
    return R, h, c, float(rho), float(j_star)


def crb_oracle_scene():
    """Two targets, N=4; subcarrier 1 carries the delay information."""
    cfg = ScenarioConfig(n_antennas=4, n_users=2, n_subcarriers=2,
                         n_targets=2, n_paths_per_user=1)
    targets = [Target(0.9 - 0.4j, 0.7, 0.03e-3),
               Target(-0.3 + 1.1j, -1.2, 0.071e-3)]
    return cfg, synth_sensing_scene(cfg, targets)
