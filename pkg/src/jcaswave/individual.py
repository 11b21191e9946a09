"""Individually optimal precoders for communication and for sensing."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .channel import CommChannel, ScenarioConfig, SensingScene
from .metrics import PrecoderSet, build_ru, fim_prefactor

__all__ = [
    "DegenerateChannelError",
    "MiPrecoderGain",
    "CrbCovariance",
    "negative_eigenpairs",
    "opt_comm_precoder",
    "opt_mi_precoder",
    "opt_crb_covariance",
    "covariance_factor",
]

log = logging.getLogger(__name__)


class DegenerateChannelError(ValueError):
    """A channel quantity needed by an optimizer vanishes."""


@dataclass(frozen=True)
class MiPrecoderGain:
    """Row weights ``Lambda[k]`` (shape ``(K, U)``) and scale ``c[k]``."""

    lam: np.ndarray
    scale: np.ndarray


@dataclass(frozen=True)
class CrbCovariance:
    q_matrices: np.ndarray = field(repr=False)   # (K, N, N)
    t_value: np.ndarray                          # (K,) attained lambda_min
    converged: np.ndarray                        # (K,) bool
    iterations: np.ndarray                       # (K,)
    history: list = field(default_factory=list, repr=False)


def _fix_sign(v: np.ndarray) -> np.ndarray:
    """Rotate columns so the first non-negligible entry is real positive."""
    v = np.array(v, dtype=complex)
    flat = v.reshape(-1, v.shape[-2], v.shape[-1])
    for i in range(flat.shape[0]):
        for j in range(flat.shape[2]):
            col = flat[i, :, j]
            idx = np.flatnonzero(np.abs(col) > 1e-12 * np.abs(col).max())
            if idx.size:
                c = col[idx[0]]
                flat[i, :, j] = col * (abs(c) / c)
    return flat.reshape(v.shape)


def negative_eigenpairs(R: np.ndarray, require_negative: bool = True):
    """Smallest eigenpair of each Hermitian matrix in ``R[..., N, N]``.

    Returns ``(r, v)`` with ``r[...]`` the algebraically smallest eigenvalue
    and ``v[..., N]`` its unit eigenvector (first nonzero entry real
    positive).
    """
    ev, V = np.linalg.eigh(R)
    r = ev[..., 0]
    v = _fix_sign(V[..., :, :1])[..., 0]
    if require_negative:
        tol = 1e-12 * np.maximum(np.abs(ev).max(axis=-1), 1e-300)
        bad = r >= -tol
        if np.any(bad):
            idx = tuple(np.argwhere(bad)[0])
            raise DegenerateChannelError(
                f"R_u has no negative eigenvalue at index {idx}")
    return r, v


def opt_comm_precoder(comm: CommChannel, mu: float,
                      config: ScenarioConfig | None = None) -> PrecoderSet:
    """Maximize ``J`` per column: ``p_u[k]`` is the unit eigenvector of the
    negative eigenvalue of ``R_u[k]``.

    When ``config`` is given, the two side conditions under which ``J``
    lower-bounds the SINR are checked and a warning is logged where they
    fail; they are not enforced.
    """
    R = build_ru(comm, mu).matrices                      # (K, U, N, N)
    _, v = negative_eigenpairs(R)
    prec = PrecoderSet(np.swapaxes(v, 1, 2))             # (K, N, U)
    if config is not None:
        from .metrics import sinr_bound_conditions
        ok = sinr_bound_conditions(comm, prec, config, mu)
        if not ok.all():
            log.warning("lower-bound side conditions fail on %d of %d "
                        "(k, u) entries", int((~ok).sum()), ok.size)
    return prec


def opt_mi_precoder(scene: SensingScene, comm: CommChannel,
                    mu: float) -> tuple[PrecoderSet, MiPrecoderGain]:
    """Rank-one MI-optimal precoder ``P[k] = h_s[k] Lambda[k]``.

    ``lambda_u = c ||R_u h_s||`` with ``c`` fixing
    ``||Lambda||^2 = U / ||h_s||^2``, so ``||P[k]||_F^2 = U``.
    """
    h = scene.h_s                                        # (K, N)
    hn2 = np.sum(np.abs(h) ** 2, axis=1)
    if np.any(hn2 <= 0):
        raise DegenerateChannelError(
            f"zero sensing channel on subcarrier "
            f"{int(np.flatnonzero(hn2 <= 0)[0])}")
    R = build_ru(comm, mu).matrices
    U = R.shape[1]
    g = np.linalg.norm(np.einsum("kunm,km->kun", R, h), axis=2)  # (K, U)
    gn2 = np.sum(g ** 2, axis=1)
    # all ||R_u h_s|| zero: any direction works, use the uniform split
    g = np.where(gn2[:, None] > 0, g, 1.0)
    gn2 = np.sum(g ** 2, axis=1)
    c = np.sqrt(U / (hn2 * gn2))
    lam = (c[:, None] * g).astype(complex)
    P = h[:, :, None] * lam[:, None, :]
    return PrecoderSet(P), MiPrecoderGain(lam=lam, scale=c)


def _f4_factors(scene: SensingScene, config: ScenarioConfig) -> np.ndarray:
    """``C[k] = A X Wdot[k]`` so that ``F4`` term k is ``pref C^H Q C``."""
    K = scene.h_s.shape[0]
    k = np.arange(K)
    wd = (-2j * np.pi * k / scene.symbol_period)[:, None] * scene.phase_diag
    return scene.steering[None] * (scene.gains[None] * wd)[:, None, :]


def _lmin_objective(C: np.ndarray, weights: np.ndarray, Q: np.ndarray):
    """lambda_min of ``sum_j w_j Re(C_j^H Q C_j)`` and its eigenvectors.

    ``C`` is ``(B, J, N, L)``, ``Q`` is ``(B, N, N)``.
    """
    M = np.einsum("bjnl,bnm,bjmi->bli", C.conj(), Q, C * weights[..., None,
                                                              None]).real
    M = 0.5 * (M + np.swapaxes(M, 1, 2))
    return np.linalg.eigh(M)


def _project_simplex(ev: np.ndarray, U: float) -> np.ndarray:
    """Euclidean projection of each row onto ``{x >= 0, sum x <= U}``."""
    out = np.clip(ev, 0.0, None)
    over = out.sum(axis=1) > U
    if over.any():
        x = ev[over]
        s = -np.sort(-x, axis=1)
        css = np.cumsum(s, axis=1) - U
        j = np.arange(1, x.shape[1] + 1)
        n = np.sum(s - css / j > 0, axis=1)
        theta = css[np.arange(x.shape[0]), n - 1] / n
        out[over] = np.clip(x - theta[:, None], 0.0, None)
    return out


def _project_feasible(Q: np.ndarray, U: float) -> np.ndarray:
    """Euclidean projection onto ``{Q >= 0, Tr Q <= U}`` (eigenvalue
    projection onto the capped simplex)."""
    Q = 0.5 * (Q + np.conj(np.swapaxes(Q, 1, 2)))
    ev, V = np.linalg.eigh(Q)
    ev = _project_simplex(ev, U)
    return np.einsum("bnl,bl,bml->bnm", V, ev, V.conj())


def _supergradient_ascent(C, weights, U, step0, max_iters, tol, window):
    B, _, N, L = C.shape
    Q = np.repeat((U / N) * np.eye(N, dtype=complex)[None], B, axis=0)
    ev, V = _lmin_objective(C, weights, Q)
    best_Q = Q.copy()
    best_t = ev[:, 0].copy()
    mark_t = best_t.copy()
    mark_i = np.zeros(B, dtype=int)
    active = np.ones(B, dtype=bool)
    iters = np.zeros(B, dtype=int)
    history = [best_t.copy()]
    scale = np.maximum(np.abs(ev).max(axis=1), 1e-300)
    # all-zero objective (e.g. zero-gain targets or k = 0): nothing to do
    active &= scale > 1e-300
    for it in range(1, max_iters + 1):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        e = ev[idx]
        # average over the (numerically) tied minimal eigenvectors
        tied = e <= e[:, :1] + 1e-9 * scale[idx, None]
        Vt = V[idx] * tied[:, None, :]
        g = np.einsum("bjnl,bli->bjni", C[idx] * np.sqrt(weights[idx])[...,
                                                                      None,
                                                                      None],
                      Vt)
        G = np.einsum("bjni,bjmi->bnm", g, g.conj()) / tied.sum(axis=1)[
            :, None, None]
        gnorm = np.linalg.norm(G, axis=(1, 2))
        gnorm = np.where(gnorm > 0, gnorm, 1.0)
        step = step0 * U / np.sqrt(it)
        Qn = _project_feasible(Q[idx] + (step / gnorm)[:, None, None] * G, U)
        Q[idx] = Qn
        evn, Vn = _lmin_objective(C[idx], weights[idx], Qn)
        ev[idx], V[idx] = evn, Vn
        t = evn[:, 0]
        better = t > best_t[idx]
        bi = idx[better]
        best_t[bi] = t[better]
        best_Q[bi] = Qn[better]
        iters[idx] = it
        history.append(best_t.copy())
        # convergence: best value improved by < tol (relative) over window
        due = idx[(it - mark_i[idx]) >= window]
        if due.size:
            gain = best_t[due] - mark_t[due]
            stop = gain <= tol * np.maximum(np.abs(best_t[due]), 1e-300)
            active[due[stop]] = False
            mark_t[due] = best_t[due]
            mark_i[due] = it
    converged = ~active
    return best_Q, best_t, converged, iters, history


def opt_crb_covariance(scene: SensingScene, config: ScenarioConfig,
                       per_k: bool = True, step0: float = 0.2,
                       max_iters: int = 5000, tol: float = 1e-8,
                       window: int = 50, n_users: int | None = None,
                       keep_history: bool = False) -> CrbCovariance:
    """Covariance maximizing ``lambda_min(Re F4(Q))`` under
    ``Q >= 0, Tr Q <= U``.

    Only the delay block ``F4`` of the FIM is used (it dominates by a factor
    ``~k^2``).  The problem is solved by projected supergradient ascent: the
    supergradient at a minimal eigenvector ``v`` is ``g g^H`` with
    ``g = C v`` because ``v^T Re(C^H Q C) v = g^H Q g``.

    With ``per_k`` each subcarrier gets its own problem using its own ``F4``
    term; otherwise one ``Q`` shared by every subcarrier maximizes the
    summed ``F4``.  A vanishing term (``k = 0``, zero gains) leaves every
    feasible ``Q`` optimal with ``t = 0``; the rank-one ``U a a^H`` toward
    the strongest target is returned.
    """
    U = config.n_users if n_users is None else n_users
    C = _f4_factors(scene, config)                       # (K, N, L)
    K, N, L = C.shape
    pref = fim_prefactor(config)
    if per_k:
        Cb = C[:, None]                                  # (K, 1, N, L)
        w = np.full((K, 1), pref)
    else:
        Cb = C[None]                                     # (1, K, N, L)
        w = np.full((1, K), pref)
    Q, t, conv, iters, hist = _supergradient_ascent(
        Cb, w, float(U), step0, max_iters, tol, window)
    if not conv.all():
        log.warning("CRB covariance ascent hit %d iterations without "
                    "converging on %d problem(s); returning best iterate",
                    max_iters, int((~conv).sum()))
    # a vanishing objective (k = 0, zero gains) leaves Q free; point all
    # power at the strongest target so a rank-U precoder matches Q exactly
    flat = np.abs(Cb).reshape(Cb.shape[0], -1).max(axis=1) == 0
    if flat.any():
        a = scene.steering[:, int(np.argmax(np.abs(scene.gains)))]
        Q[flat] = U * np.outer(a, a.conj())
    if not per_k:
        Q = np.repeat(Q, K, axis=0)
        t = np.repeat(t, K)
        conv = np.repeat(conv, K)
        iters = np.repeat(iters, K)
    return CrbCovariance(q_matrices=Q, t_value=t, converged=conv,
                         iterations=iters,
                         history=hist if keep_history else [])


def covariance_factor(Q: np.ndarray, U: int) -> np.ndarray:
    """Rank-``U`` factor ``P`` (``N x U``) with ``P P^H`` the best rank-U
    approximation of each ``Q[k]`` (top eigenpairs)."""
    ev, V = np.linalg.eigh(Q)
    ev = np.clip(ev[..., ::-1][..., :U], 0.0, None)
    V = V[..., ::-1][..., :U]
    return _fix_sign(V) * np.sqrt(ev)[..., None, :]
