"""Communication and sensing performance metrics.

Communication side: multi-user interference (MUI), effective channel gain
(ECG), the regulated bound ``J = ECG - mu*MUI`` with its per-user quadratic
forms ``R_u[k]``, per-user SINR and the sum rate.

Sensing side: mutual information between the sensing channel and the radar
echo, the Fisher information matrix (FIM) of the target parameters
``Theta = [Re alpha, Im alpha, tau, Omega]`` and the CRB ``B = F^-1``.
The derivative of MI with respect to power equals half the MMSE for a
Gaussian sensing channel; the MMSE itself is not computed here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import CommChannel, ScenarioConfig, SensingScene, \
    steering_derivative

__all__ = [
    "PrecoderSet",
    "CommMetricReport",
    "RuMatrix",
    "FimReport",
    "SingularFimError",
    "ksum",
    "mui",
    "ecg",
    "build_ru",
    "j_metric",
    "sinr_and_rate",
    "comm_report",
    "sensing_mi",
    "fim_prefactor",
    "fim",
    "crb_total",
    "sinr_bound_conditions",
]

POWER_TOL = 1e-9
CONDITION_LIMIT = 1e12


class SingularFimError(np.linalg.LinAlgError):
    """The Fisher information matrix is singular or ill-conditioned."""


@dataclass(frozen=True)
class PrecoderSet:
    """Per-subcarrier precoders, ``matrices[k]`` is the ``N x U`` ``P[k]``."""

    matrices: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = np.asarray(self.matrices, dtype=complex)
        if m.ndim != 3:
            raise ValueError("precoders must have shape (K, N, U)")
        object.__setattr__(self, "matrices", m)
        U = m.shape[2]
        power = np.sum(np.abs(m) ** 2, axis=(1, 2))
        if np.any(power > U + POWER_TOL * max(1.0, U)):
            raise ValueError(
                f"power constraint violated: max ||P[k]||_F^2 = "
                f"{power.max():.12g} > U = {U}")

    @property
    def shape(self):
        return self.matrices.shape

    def power(self) -> np.ndarray:
        return np.sum(np.abs(self.matrices) ** 2, axis=(1, 2))


@dataclass(frozen=True)
class CommMetricReport:
    mui_per: np.ndarray
    ecg_per: np.ndarray
    mui_total: float
    ecg_total: float
    j_value: float
    sinr_per: np.ndarray
    sum_rate: float


@dataclass(frozen=True)
class RuMatrix:
    """``R_u[k] = mu*Ht_u Ht_u^H - h_u h_u^H``, stacked as ``(K, U, N, N)``."""

    matrices: np.ndarray
    mu: float


@dataclass(frozen=True)
class FimReport:
    """Fisher information of ``Theta = [Re alpha, Im alpha, tau, Omega]``."""

    f1: np.ndarray
    f2: np.ndarray
    f3: np.ndarray
    f4: np.ndarray
    f5: np.ndarray
    f6: np.ndarray
    fim: np.ndarray
    condition: float
    crb: np.ndarray | None
    theta_order: tuple = ("re_alpha", "im_alpha", "tau", "omega")

    @property
    def f4_f1_ratio(self) -> float:
        """``||F4||_F / ||F1||_F``; grows like ``k^2``."""
        return float(np.linalg.norm(self.f4) / np.linalg.norm(self.f1))

    @property
    def invertible(self) -> bool:
        return self.crb is not None

    @property
    def crb_total(self) -> float:
        return crb_total(self)


def ksum(x: np.ndarray) -> np.ndarray:
    """Sum over the leading (subcarrier) axis with pairwise summation."""
    x = np.asarray(x)
    return np.ascontiguousarray(np.moveaxis(x, 0, -1)).sum(axis=-1)


def _mats(prec) -> np.ndarray:
    return prec.matrices if isinstance(prec, PrecoderSet) else \
        np.asarray(prec, dtype=complex)


def _check_shapes(comm: CommChannel, P: np.ndarray):
    if P.shape != comm.h_matrices.shape:
        raise ValueError(f"precoder shape {P.shape} does not match channel "
                         f"shape {comm.h_matrices.shape} (K, N, U)")


def _gram(comm: CommChannel, P: np.ndarray) -> np.ndarray:
    """``G[k] = H[k]^H P[k]``; ``G[k, v, u] = h_v^H p_u``."""
    return np.einsum("knv,knu->kvu", comm.h_matrices.conj(), P)


def mui(comm: CommChannel, prec) -> tuple[np.ndarray, float]:
    """Per-(k, u) interference ``I[k, u]`` and the total MUI.

    The total is computed from the off-diagonal Frobenius form and checked
    against the per-entry double sum.
    """
    P = _mats(prec)
    _check_shapes(comm, P)
    G2 = np.abs(_gram(comm, P)) ** 2
    per = G2.sum(axis=1) - np.einsum("kuu->ku", G2)
    G = _gram(comm, P)
    off = G - np.einsum("kuu->ku", G)[:, :, None] * np.eye(G.shape[1])
    total = float(ksum(np.sum(np.abs(off) ** 2, axis=(1, 2))))
    per = np.maximum(per, 0.0)
    scale = max(total, 1.0)
    if abs(total - float(ksum(per.sum(axis=1)))) > 1e-10 * scale:
        raise AssertionError("MUI sum and Frobenius forms disagree")
    return per, total


def ecg(comm: CommChannel, prec) -> tuple[np.ndarray, float]:
    P = _mats(prec)
    _check_shapes(comm, P)
    per = np.abs(np.einsum("knu,knu->ku", comm.h_matrices.conj(), P)) ** 2
    return per, float(ksum(per.sum(axis=1)))


def build_ru(comm: CommChannel, mu: float) -> RuMatrix:
    """Quadratic-form matrices of ``-J``: ``J = -sum p_u^H R_u p_u``."""
    if not mu > 0:
        raise ValueError("mu must be positive")
    H = comm.h_matrices
    full = np.einsum("knv,kmv->knm", H, H.conj())       # sum_v h_v h_v^H
    own = np.einsum("knu,kmu->kunm", H, H.conj())       # h_u h_u^H
    R = mu * (full[:, None] - own) - own
    R = 0.5 * (R + np.conj(np.swapaxes(R, -1, -2)))
    return RuMatrix(matrices=R, mu=float(mu))


def j_metric(comm: CommChannel, prec, mu: float) -> float:
    """``J = ECG - mu*MUI``, cross-checked against ``-sum p^H R_u p``."""
    P = _mats(prec)
    _, I = mui(comm, P)
    _, S = ecg(comm, P)
    j_diff = S - mu * I
    R = build_ru(comm, mu).matrices
    quad = np.einsum("knu,kunm,kmu->ku", P.conj(), R, P).real
    j_quad = -float(ksum(quad.sum(axis=1)))
    scale = max(S + mu * I, 1.0)
    if abs(j_diff - j_quad) > 1e-10 * scale:
        raise AssertionError("J quadratic-form and difference routes "
                             "disagree")
    return j_diff


def sinr_and_rate(comm: CommChannel, prec,
                  config: ScenarioConfig) -> tuple[np.ndarray, float]:
    """``SINR = (P S/U) / (P I/U + sigma1^2)`` and ``sum log2(1 + SINR)``."""
    P = _mats(prec)
    I, _ = mui(comm, P)
    S, _ = ecg(comm, P)
    U = P.shape[2]
    p = config.tx_power
    sinr = (p * S / U) / (p * I / U + config.noise_var_comm)
    rate = float(ksum(np.log2(1.0 + sinr).sum(axis=1)))
    return sinr, rate


def sinr_bound_conditions(comm: CommChannel, prec, config: ScenarioConfig,
                        mu: float | None = None) -> np.ndarray:
    """Mask of (k, u) where ``I + U sigma1^2/P <= 1`` and ``S > mu I``."""
    P = _mats(prec)
    mu = config.mui_weight if mu is None else mu
    I, _ = mui(comm, P)
    S, _ = ecg(comm, P)
    U = P.shape[2]
    return (I + U * config.noise_var_comm / config.tx_power <= 1.0) & \
        (S > mu * I)


def comm_report(comm: CommChannel, prec, config: ScenarioConfig,
                mu: float | None = None) -> CommMetricReport:
    mu = config.mui_weight if mu is None else mu
    I, It = mui(comm, prec)
    S, St = ecg(comm, prec)
    sinr, rate = sinr_and_rate(comm, prec, config)
    return CommMetricReport(mui_per=I, ecg_per=S, mui_total=It,
                            ecg_total=St, j_value=j_metric(comm, prec, mu),
                            sinr_per=sinr, sum_rate=rate)


def sensing_mi(scene: SensingScene, prec, config: ScenarioConfig) -> float:
    """Sensing mutual information in bits, summed over subcarriers.

    Uses the scalar form ``log2(1 + P h^H P P^H h / sigma^2)``; the
    equivalent log-determinant form is used only as a test oracle.
    """
    P = _mats(prec)
    g = np.einsum("knu,kn->ku", P.conj(), scene.h_s)     # P^H h
    snr = config.tx_power * np.sum(np.abs(g) ** 2, axis=1) \
        / config.noise_var_radar
    return float(ksum(np.log2(1.0 + snr)))


def fim_prefactor(config: ScenarioConfig) -> float:
    """``2/sigma`` (as printed, ``paper``) or ``2/sigma^2`` (``variance``)."""
    if config.fim_noise_convention == "paper":
        return 2.0 / np.sqrt(config.noise_var_radar)
    return 2.0 / config.noise_var_radar


def _subblocks(scene: SensingScene, Q: np.ndarray, pref: float):
    """F1..F6 for per-subcarrier covariances ``Q[k] = P[k] P[k]^H``."""
    K = Q.shape[0]
    A = scene.steering
    Ad = steering_derivative(scene.equiv_aods, A.shape[0])
    alpha = scene.gains
    w = scene.phase_diag                                    # (K, L)
    k = np.arange(K)
    wd = (-2j * np.pi * k / scene.symbol_period)[:, None] * w
    xx = np.outer(alpha.conj(), alpha)                      # X^H 1 1^H X

    M = np.einsum("nl,knm,mj->klj", A.conj(), Q, A)         # A^H Q A
    Md = np.einsum("nl,knm,mj->klj", A.conj(), Q, Ad)       # A^H Q Adot
    Mdd = np.einsum("nl,knm,mj->klj", Ad.conj(), Q, Ad)     # Adot^H Q Adot

    def sandwich(left, mid, right):
        return ksum(left.conj()[:, :, None] * mid * right[:, None, :])

    # "(.) o X" scales column m by alpha_m
    f1 = sandwich(w, M, w)
    f2 = sandwich(w, M * alpha, wd)
    f3 = sandwich(w, Md * alpha, w)
    f4 = sandwich(wd, M * xx, wd)
    f5 = sandwich(wd, Md * xx, w)
    f6 = sandwich(w, Mdd * xx, w)
    return [pref * f for f in (f1, f2, f3, f4, f5, f6)]


def assemble_fim(f1, f2, f3, f4, f5, f6) -> np.ndarray:
    """Real ``4L x 4L`` FIM from the complex subblocks."""
    return np.block([
        [f1.real, -f1.imag, f2.real, f3.real],
        [f1.imag, f1.real, f2.imag, f3.imag],
        [f2.T.real, f2.T.imag, f4.real, f5.real],
        [f3.T.real, f3.T.imag, f5.T.real, f6.real],
    ])


def equilibrated_inverse(F: np.ndarray,
                         limit: float = CONDITION_LIMIT):
    """Inverse of a symmetric PSD matrix after diagonal equilibration.

    Returns ``(inverse or None, condition number of the scaled matrix)``.
    Delay entries are ~``(2 pi k / T)^2`` larger than gain entries, so the
    raw condition number says nothing about identifiability.
    """
    d = np.diag(F).copy()
    if np.any(d <= 0) or not np.all(np.isfinite(F)):
        return None, np.inf
    s = 1.0 / np.sqrt(d)
    Fs = s[:, None] * F * s[None, :]
    Fs = 0.5 * (Fs + Fs.T)
    ev = np.linalg.eigvalsh(Fs)
    cond = np.inf if ev[0] <= 0 else ev[-1] / ev[0]
    if cond > limit:
        return None, cond
    inv = np.linalg.solve(Fs, np.eye(F.shape[0]))
    inv = 0.5 * (inv + inv.T)
    return s[:, None] * inv * s[None, :], cond


def fim(scene: SensingScene, prec, config: ScenarioConfig) -> FimReport:
    """Analytic FIM and CRB for the given precoders.

    ``crb`` is ``None`` when the equilibrated FIM has condition number above
    ``1e12``; :func:`crb_total` then raises :class:`SingularFimError`.
    """
    P = _mats(prec)
    if P.shape[0] != scene.h_s.shape[0]:
        raise ValueError("precoders must be supplied for every subcarrier")
    Q = np.einsum("knu,kmu->knm", P, P.conj())
    blocks = _subblocks(scene, Q, fim_prefactor(config))
    F = assemble_fim(*blocks)
    crb, cond = equilibrated_inverse(F)
    return FimReport(*blocks, fim=F, condition=float(cond), crb=crb)


def crb_total(report) -> float:
    """``||F^-1||_F``.  Accepts a :class:`FimReport` or a raw FIM matrix."""
    if isinstance(report, FimReport):
        if report.crb is None:
            raise SingularFimError(
                f"FIM is singular or ill-conditioned "
                f"(condition {report.condition:.3g})")
        return float(np.linalg.norm(report.crb))
    F = np.asarray(report, dtype=float)
    inv, cond = equilibrated_inverse(F)
    if inv is None:
        raise SingularFimError(f"FIM is singular or ill-conditioned "
                               f"(condition {cond:.3g})")
    return float(np.linalg.norm(inv))
