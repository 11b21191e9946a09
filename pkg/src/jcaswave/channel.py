"""ULA array responses and OFDM communication / sensing channels.

All channels are frequency-domain, one vector per subcarrier
``k = 0, ..., K-1``.  Arrays are laid out with the subcarrier index first:
``h_matrices`` has shape ``(K, N, U)`` and ``h_s`` has shape ``(K, N)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "ScenarioConfig",
    "CommPath",
    "CommChannel",
    "Target",
    "SensingScene",
    "array_response",
    "steering_derivative",
    "synth_comm_channel",
    "synth_sensing_scene",
    "draw_scenario",
    "entity_rng",
]

# entity kinds used to split the random streams
KIND_COMM = 1
KIND_TARGET = 2

FIM_CONVENTIONS = ("paper", "variance")


@dataclass(frozen=True)
class ScenarioConfig:
    """Scalar system parameters of one JCAS scenario.

    ``block_length`` is carried for completeness only; channels are
    time-invariant over the block and no metric depends on it.
    """

    n_antennas: int = 16
    n_users: int = 2
    n_subcarriers: int = 512
    n_targets: int = 3
    n_paths_per_user: int = 3
    symbol_period: float = 0.2e-3
    cp_length: float = 0.1e-3
    tx_power: float = 1.0
    noise_var_radar: float = 1.0
    noise_var_comm: float = 1.0
    mui_weight: float = 5.0
    rng_seed: int = 0
    block_length: int = 1
    fim_noise_convention: str = "paper"

    def __post_init__(self):
        for name in ("n_antennas", "n_users", "n_subcarriers", "n_targets",
                     "n_paths_per_user", "block_length"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.n_antennas < self.n_users:
            raise ValueError("need n_antennas >= n_users")
        if not 0 < self.cp_length < self.symbol_period:
            raise ValueError("need 0 < cp_length < symbol_period")
        for name in ("tx_power", "noise_var_radar", "noise_var_comm",
                     "mui_weight"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.fim_noise_convention not in FIM_CONVENTIONS:
            raise ValueError(
                f"fim_noise_convention must be one of {FIM_CONVENTIONS}")
        if not 0 <= int(self.rng_seed) < 2 ** 64:
            raise ValueError("rng_seed must fit in 64 bits")

    @property
    def subcarriers(self) -> np.ndarray:
        return np.arange(self.n_subcarriers)


@dataclass(frozen=True)
class CommPath:
    gain: complex
    equiv_aod: float
    delay: float


@dataclass(frozen=True)
class Target:
    gain: complex
    equiv_aod: float
    delay: float


@dataclass(frozen=True)
class CommChannel:
    """Per-user multipath parameters and the synthesized ``H[k]``.

    ``h_matrices[k][:, u]`` is the channel of user ``u`` on subcarrier ``k``.
    """

    paths: tuple
    h_matrices: np.ndarray = field(repr=False)

    @property
    def n_subcarriers(self) -> int:
        return self.h_matrices.shape[0]

    @property
    def n_antennas(self) -> int:
        return self.h_matrices.shape[1]

    @property
    def n_users(self) -> int:
        return self.h_matrices.shape[2]


@dataclass(frozen=True)
class SensingScene:
    """Targets and the factorized sensing channel ``h_s[k] = A X W[k] 1``."""

    targets: tuple
    steering: np.ndarray = field(repr=False)        # A, (N, L)
    gains_diag: np.ndarray = field(repr=False)      # X, (L, L)
    phase_diag: np.ndarray = field(repr=False)      # W[k] diagonals, (K, L)
    h_s: np.ndarray = field(repr=False)             # (K, N)
    symbol_period: float = 0.2e-3

    @property
    def n_targets(self) -> int:
        return self.steering.shape[1]

    @property
    def gains(self) -> np.ndarray:
        return np.diag(self.gains_diag).copy()

    @property
    def equiv_aods(self) -> np.ndarray:
        return np.array([t.equiv_aod for t in self.targets], dtype=float)

    @property
    def delays(self) -> np.ndarray:
        return np.array([t.delay for t in self.targets], dtype=float)


def array_response(equiv_aod, n_antennas: int) -> np.ndarray:
    """Normalized ULA response ``a(Omega)``, entries ``e^{j n Omega}/sqrt(N)``.

    ``equiv_aod`` may be an array, in which case the responses are stacked
    as columns (shape ``(N, len(equiv_aod))``).
    """
    if n_antennas < 1:
        raise ValueError("n_antennas must be >= 1")
    n = np.arange(n_antennas)
    omega = np.asarray(equiv_aod, dtype=float)
    return np.exp(1j * np.multiply.outer(n, omega)) / np.sqrt(n_antennas)


def steering_derivative(equiv_aod, n_antennas: int) -> np.ndarray:
    """Derivative of :func:`array_response` with respect to ``Omega``."""
    if n_antennas < 1:
        raise ValueError("n_antennas must be >= 1")
    n = np.arange(n_antennas)
    a = array_response(equiv_aod, n_antennas)
    jn = 1j * n if a.ndim == 1 else (1j * n)[:, None]
    return jn * a


def _check_path(p, cp_length: float, what: str):
    if not 0.0 <= p.delay <= cp_length:
        raise ValueError(
            f"{what} delay {p.delay!r} outside [0, {cp_length!r}]")
    if not -np.pi <= p.equiv_aod < np.pi:
        raise ValueError(f"{what} equivalent AoD {p.equiv_aod!r} outside "
                         "[-pi, pi)")


def _delay_phases(delays: np.ndarray, config: ScenarioConfig) -> np.ndarray:
    """``e^{-j 2 pi k tau / T}``, shape ``(K, len(delays))``."""
    k = config.subcarriers
    return np.exp(-2j * np.pi * np.multiply.outer(k, delays)
                  / config.symbol_period)


def synth_comm_channel(config: ScenarioConfig,
                       paths: Sequence[Sequence[CommPath]]) -> CommChannel:
    """Build ``H[k]`` from per-user path lists.

    Every user must have ``config.n_paths_per_user`` paths.
    """
    if len(paths) != config.n_users:
        raise ValueError(f"expected paths for {config.n_users} users, "
                         f"got {len(paths)}")
    N = config.n_antennas
    H = np.zeros((config.n_subcarriers, N, config.n_users), dtype=complex)
    for u, user_paths in enumerate(paths):
        if len(user_paths) != config.n_paths_per_user:
            raise ValueError(f"user {u} has {len(user_paths)} paths, "
                             f"expected {config.n_paths_per_user}")
        for p in user_paths:
            _check_path(p, config.cp_length, f"user {u} path")
        gains = np.array([p.gain for p in user_paths], dtype=complex)
        steer = array_response([p.equiv_aod for p in user_paths], N)
        phases = _delay_phases(np.array([p.delay for p in user_paths]),
                               config)
        # sum over paths: (K, Lu) * (Lu,) -> (K, Lu) @ (Lu, N)
        H[:, :, u] = (phases * gains) @ steer.T
    frozen = tuple(tuple(p) for p in paths)
    return CommChannel(paths=frozen, h_matrices=H)


def synth_sensing_scene(config: ScenarioConfig,
                        targets: Sequence[Target]) -> SensingScene:
    """Build ``A``, ``X``, ``W[k]`` and ``h_s[k]`` for a list of targets.

    ``h_s`` is evaluated both as the explicit sum over targets and as
    ``A X W[k] 1``; the two must agree to 1e-12 relative.
    """
    if len(targets) == 0:
        raise ValueError("a sensing scene needs at least one target")
    for t in targets:
        _check_path(t, config.cp_length, "target")
    N = config.n_antennas
    alphas = np.array([t.gain for t in targets], dtype=complex)
    A = array_response([t.equiv_aod for t in targets], N)
    X = np.diag(alphas)
    w = _delay_phases(np.array([t.delay for t in targets]), config)

    h_fact = np.einsum("nl,lm,km->kn", A, X, w)
    h_sum = np.zeros_like(h_fact)
    for l, t in enumerate(targets):
        h_sum += t.gain * np.outer(w[:, l], array_response(t.equiv_aod, N))
    scale = max(np.abs(h_sum).max(), np.finfo(float).tiny)
    if np.abs(h_fact - h_sum).max() > 1e-12 * scale:
        raise AssertionError("sensing channel factorization mismatch")

    return SensingScene(targets=tuple(targets), steering=A, gains_diag=X,
                        phase_diag=w, h_s=h_fact,
                        symbol_period=config.symbol_period)


def entity_rng(seed: int, draw: int, kind: int,
               index: int) -> np.random.Generator:
    """Independent stream keyed by ``(seed, draw, kind, index)``.

    Draws for one entity never depend on how many other entities were
    generated before it, so evaluation order cannot change results.
    """
    ss = np.random.SeedSequence(entropy=int(seed),
                                spawn_key=(int(draw), int(kind), int(index)))
    return np.random.default_rng(ss)


def _cn(rng: np.random.Generator, size) -> np.ndarray:
    return (rng.standard_normal(size) + 1j * rng.standard_normal(size)) \
        / np.sqrt(2.0)


def _equiv_from_physical(phi: np.ndarray) -> np.ndarray:
    omega = np.pi * np.sin(phi)
    # pi and -pi are the same array response
    return np.where(omega >= np.pi, omega - 2 * np.pi, omega)


def _draw_entities(config, draw, kind, index, count):
    rng = entity_rng(config.rng_seed, draw, kind, index)
    gains = _cn(rng, count)
    phi = rng.uniform(-np.pi, np.pi, count)
    delays = rng.uniform(0.0, config.cp_length, count)
    return gains, _equiv_from_physical(phi), delays


def draw_scenario(config: ScenarioConfig,
                  draw: int = 0) -> tuple[CommChannel, SensingScene]:
    """Random channels for Monte-Carlo draw ``draw``.

    Physical AoDs are uniform on ``[-pi, pi)`` (converted to equivalent
    angles ``pi*sin``), delays uniform on ``[0, T_C]`` and gains unit-variance
    circular complex Gaussian.
    """
    paths = []
    for u in range(config.n_users):
        g, om, tau = _draw_entities(config, draw, KIND_COMM, u,
                                    config.n_paths_per_user)
        paths.append([CommPath(complex(a), float(b), float(c))
                      for a, b, c in zip(g, om, tau)])
    targets = []
    for l in range(config.n_targets):
        g, om, tau = _draw_entities(config, draw, KIND_TARGET, l, 1)
        targets.append(Target(complex(g[0]), float(om[0]), float(tau[0])))
    return synth_comm_channel(config, paths), synth_sensing_scene(config,
                                                                  targets)
