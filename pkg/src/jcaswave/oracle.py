"""Brute-force references for testing.

Everything here is deliberately naive: explicit loops, dense grids and
finite differences.  Nothing in the solvers imports this module.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .channel import ScenarioConfig, SensingScene

__all__ = [
    "GridSpec",
    "GridResult",
    "grid_search_j",
    "numeric_fim",
    "haar_unit_columns",
    "random_psd_trace",
    "random_dominance",
    "naive_mui",
    "naive_ecg",
    "naive_j",
    "naive_mi",
    "naive_sinr",
    "crb_cov_random_oracle",
]

MAX_POINTS_PER_DIM = 10_000


@dataclass(frozen=True)
class GridSpec:
    dims: int
    lo: float
    hi: float
    step: float

    def __post_init__(self):
        if not 1 <= self.dims <= 4:
            raise ValueError("dims must be between 1 and 4")
        if not self.hi > self.lo or not self.step > 0:
            raise ValueError("need hi > lo and step > 0")
        if (self.hi - self.lo) / self.step > MAX_POINTS_PER_DIM:
            raise ValueError("grid too fine: more than 1e4 points per dim")

    @property
    def axis(self) -> np.ndarray:
        n = int(np.floor((self.hi - self.lo) / self.step + 1e-9)) + 1
        return self.lo + self.step * np.arange(n)


@dataclass(frozen=True)
class GridResult:
    point: np.ndarray
    j_value: float
    n_feasible: int


def grid_search_j(R: np.ndarray, feasible: Callable[[np.ndarray], np.ndarray],
                  spec: GridSpec, chunk: int = 1_000_000) -> GridResult:
    """Maximize ``J = -p^T R p`` over real ``p`` on a grid.

    ``R`` is a real symmetric ``dims x dims`` matrix and ``feasible`` maps
    points ``(M, dims)`` to a boolean mask.
    """
    R = np.asarray(R, dtype=float)
    if R.shape != (spec.dims, spec.dims):
        raise ValueError("R must be dims x dims")
    ax = spec.axis
    n = ax.size
    total = n ** spec.dims
    best_j, best_p, count = -np.inf, None, 0
    for start in range(0, total, chunk):
        flat = np.arange(start, min(start + chunk, total))
        idx = np.stack(np.unravel_index(flat, (n,) * spec.dims), axis=1)
        pts = ax[idx]
        ok = feasible(pts)
        if not ok.any():
            continue
        pts = pts[ok]
        count += pts.shape[0]
        j = -np.einsum("mi,ij,mj->m", pts, R, pts)
        i = int(np.argmax(j))
        if j[i] > best_j:
            best_j, best_p = float(j[i]), pts[i].copy()
    if best_p is None:
        raise ValueError("no feasible grid point")
    return GridResult(point=best_p, j_value=best_j, n_feasible=count)


def _steer(omega: float, n: int) -> np.ndarray:
    return np.array([np.exp(1j * i * omega) for i in range(n)]) / np.sqrt(n)


def _q_vectors(theta: np.ndarray, P: np.ndarray, T: float) -> np.ndarray:
    """``q[k] = P[k]^T conj(A X W[k] 1)`` from the parameter vector
    ``[Re alpha, Im alpha, tau, Omega]``; returns ``(K, U)``."""
    K, N, U = P.shape
    L = theta.size // 4
    alpha = theta[:L] + 1j * theta[L:2 * L]
    tau = theta[2 * L:3 * L]
    omega = theta[3 * L:]
    out = np.zeros((K, U), dtype=complex)
    for k in range(K):
        h = np.zeros(N, dtype=complex)
        for l in range(L):
            h += _steer(omega[l], N) * alpha[l] * \
                np.exp(-2j * np.pi * k * tau[l] / T)
        out[k] = P[k].T @ h.conj()
    return out


def numeric_fim(scene: SensingScene, prec, config: ScenarioConfig,
                h: float = 1e-6, check: bool = True) -> np.ndarray:
    """FIM by central differences of ``q[k]`` over ``4L`` parameters.

    ``F = c sum_k Re(J_k^H J_k)`` with ``J_k = dq[k]/dTheta`` and ``c`` the
    noise prefactor of the configured convention.  ``h`` must lie in
    ``[1e-8, 1e-4]``; delay steps are relative to the symbol period.  With ``check`` the Jacobian is recomputed with
    step ``2h`` and a ``ValueError`` is raised when the two disagree by
    more than 1e-4 relative (cancellation or curvature trouble).
    """
    if not 1e-8 <= h <= 1e-4:
        raise ValueError("step h must lie in [1e-8, 1e-4]")
    P = prec.matrices if hasattr(prec, "matrices") else np.asarray(prec)
    L = scene.n_targets
    T = scene.symbol_period
    theta = np.concatenate([scene.gains.real, scene.gains.imag,
                            scene.delays, scene.equiv_aods])
    steps = np.full(4 * L, h)
    steps[2 * L:3 * L] = h * T

    def jac(scale):
        cols = []
        for i in range(4 * L):
            e = np.zeros(4 * L)
            e[i] = steps[i] * scale
            cols.append((_q_vectors(theta + e, P, T)
                         - _q_vectors(theta - e, P, T)) / (2 * e[i]))
        return np.stack(cols, axis=-1)                  # (K, U, 4L)

    Jk = jac(1.0)
    if check:
        J2 = jac(2.0)
        err = np.abs(J2 - Jk).max() / max(np.abs(Jk).max(), 1e-300)
        if err > 1e-4:
            raise ValueError(f"finite-difference Jacobian unstable "
                             f"(h vs 2h relative gap {err:.2e})")
    if config.fim_noise_convention == "paper":
        c = 2.0 / np.sqrt(config.noise_var_radar)
    else:
        c = 2.0 / config.noise_var_radar
    F = np.zeros((4 * L, 4 * L))
    for k in range(Jk.shape[0]):
        F += c * np.real(Jk[k].conj().T @ Jk[k])
    return F


def haar_unit_columns(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform unit-norm complex columns, shape ``(..., N, U)``."""
    z = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    return z / np.linalg.norm(z, axis=-2, keepdims=True)


def random_psd_trace(rng: np.random.Generator, n_samples: int, n: int,
                     trace: float) -> np.ndarray:
    """Random PSD matrices with trace ``trace`` and ranks spread over
    ``1..n`` (each sample draws its rank uniformly)."""
    G = rng.standard_normal((n_samples, n, n)) + \
        1j * rng.standard_normal((n_samples, n, n))
    rank = rng.integers(1, n + 1, n_samples)
    G = G * (np.arange(n)[None, None, :] < rank[:, None, None])
    Q = G @ np.conj(np.swapaxes(G, 1, 2))
    tr = np.real(np.trace(Q, axis1=1, axis2=2))
    return Q * (trace / tr)[:, None, None]


def random_dominance(objective: Callable[[np.ndarray], np.ndarray],
                     sampler: Callable[[np.random.Generator, int], np.ndarray],
                     trials: int, rng: np.random.Generator,
                     chunk: int = 10_000) -> float:
    """Largest objective value over ``trials`` random samples.

    ``sampler(rng, m)`` returns ``m`` samples stacked on axis 0 and
    ``objective`` maps them to ``m`` values.
    """
    if trials < 1000:
        raise ValueError("use at least 1e3 trials")
    best = -np.inf
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        best = max(best, float(np.max(objective(sampler(rng, m)))))
        done += m
    return best


def crb_cov_random_oracle(C: np.ndarray, weight: float, trace: float,
                          trials: int, rng: np.random.Generator,
                          chunk: int = 100_000) -> float:
    """Best ``lambda_min(w Re(C^H Q C))`` over random feasible ``Q``."""
    N = C.shape[0]

    def obj(Q):
        M = weight * np.real(np.einsum("nl,bnm,mj->blj", C.conj(), Q, C))
        return np.linalg.eigvalsh(0.5 * (M + np.swapaxes(M, 1, 2)))[:, 0]
    return random_dominance(obj, lambda g, m: random_psd_trace(g, m, N,
                                                               trace),
                            trials, rng, chunk)


# naive metric loops --------------------------------------------------------

def naive_mui(H: np.ndarray, P: np.ndarray) -> float:
    K, N, U = H.shape
    total = 0.0
    for k in range(K):
        for u in range(U):
            for v in range(U):
                if v != u:
                    total += abs(np.vdot(H[k, :, u], P[k, :, v])) ** 2
    return total


def naive_ecg(H: np.ndarray, P: np.ndarray) -> float:
    K, N, U = H.shape
    return sum(abs(np.vdot(H[k, :, u], P[k, :, u])) ** 2
               for k in range(K) for u in range(U))


def naive_j(H: np.ndarray, P: np.ndarray, mu: float) -> float:
    return naive_ecg(H, P) - mu * naive_mui(H, P)


def naive_mi(h_s: np.ndarray, P: np.ndarray, power: float,
             noise_var: float) -> float:
    total = 0.0
    for k in range(h_s.shape[0]):
        g = P[k].conj().T @ h_s[k]
        total += np.log2(1 + power * np.sum(np.abs(g) ** 2) / noise_var)
    return total


def naive_sinr(H: np.ndarray, P: np.ndarray, power: float,
               noise_var: float) -> np.ndarray:
    K, N, U = H.shape
    out = np.zeros((K, U))
    for k in range(K):
        for u in range(U):
            s = abs(np.vdot(H[k, :, u], P[k, :, u])) ** 2
            # interference is the leakage of p_u into the other users
            i = sum(abs(np.vdot(H[k, :, v], P[k, :, u])) ** 2
                    for v in range(U) if v != u)
            out[k, u] = (power * s / U) / (power * i / U + noise_var)
    return out
