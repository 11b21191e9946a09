"""Experiment harness: config files, Monte-Carlo sweeps, beam patterns and
the validation suite.

Configs are INI files.  Sections and keys mirror the dataclass fields::

    [scenario]        ScenarioConfig fields (n_antennas, n_users, ...)
    [sweep]           kind = snr | threshold, values = comma list
    [experiment]      algorithms, n_monte_carlo, output_path
    [jcas]            JcasParams fields (rho, xi, epsilon, ...)
    [comm_paths]      optional fixed paths, ``u<user>_p<path> = re, im,
                      angle_deg, delay``
    [targets]         optional fixed targets, ``t<index> = re, im,
                      angle_deg, delay``

Unknown sections or keys are rejected.  Angles in the entity sections are
physical angles in degrees; they are converted to ``pi sin(angle)``.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial

import numpy as np

from .channel import (CommPath, ScenarioConfig, Target, draw_scenario,
                      array_response, synth_comm_channel, synth_sensing_scene)
from .individual import (covariance_factor, opt_comm_precoder,
                         opt_crb_covariance, opt_mi_precoder)
from .jcas import InfeasibleError, JcasParams, algorithm1, algorithm2
from .metrics import (PrecoderSet, SingularFimError, crb_total, fim,
                      j_metric, sensing_mi, sinr_and_rate)

__all__ = [
    "ALGORITHMS",
    "CSV_COLUMNS",
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "run_sweep",
    "sweep_rows",
    "write_csv",
    "beam_pattern",
    "pattern_peaks",
    "design_precoders",
    "beam_pattern_rows",
    "CheckResult",
    "validate",
    "main",
]

log = logging.getLogger(__name__)

ALGORITHMS = ("comm_opt", "mi_opt", "crb_opt", "alg1", "alg2")
SWEEP_KINDS = ("snr", "threshold")
CSV_COLUMNS = ("seed", "draw", "algorithm", "sweep_kind", "sweep_value",
               "snr_db", "rho", "xi", "j_value", "sum_rate_bits", "mi_bits",
               "crb_total", "iterations", "wall_ms", "termination")
DESK_SCALE = {"n_antennas": 8, "n_subcarriers": 32}
DEFAULT_VALUES = {"snr": (-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0),
                  "threshold": (0.5, 1.0, 1.5)}

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG, EXIT_INFEASIBLE = 0, 1, 2, 3


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    sweep_kind: str = "snr"
    sweep_values: tuple = (0.0,)
    algorithms: tuple = ALGORITHMS
    jcas: JcasParams = field(default_factory=JcasParams)
    n_monte_carlo: int = 1
    output_path: str = "results.csv"
    comm_paths: tuple | None = None
    targets: tuple | None = None

    def __post_init__(self):
        if self.sweep_kind not in SWEEP_KINDS:
            raise ConfigError(f"sweep kind must be one of {SWEEP_KINDS}")
        if len(self.sweep_values) == 0:
            raise ConfigError("sweep values must be nonempty")
        if self.n_monte_carlo < 1:
            raise ConfigError("n_monte_carlo must be >= 1")
        if not self.algorithms:
            raise ConfigError("need at least one algorithm")
        for a in self.algorithms:
            if a not in ALGORITHMS:
                raise ConfigError(f"unknown algorithm {a!r}; choose from "
                                  f"{ALGORITHMS}")
        if self.sweep_kind == "threshold":
            for v in self.sweep_values:
                if not v > 0:
                    raise ConfigError("threshold values must be positive")


# config parsing ------------------------------------------------------------

def _convert(name: str, raw: str, typ):
    try:
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        if typ in (bool, "bool"):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def _section_to_fields(cls, section, where: str) -> dict:
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in section.items():
        if key not in types:
            raise ConfigError(f"unknown key {key!r} in [{where}]")
        out[key] = _convert(f"{where}.{key}", raw, types[key])
    return out


def _floats(raw: str, what: str) -> tuple:
    try:
        vals = tuple(float(x) for x in raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"bad number list for {what}: {raw!r}") from None
    return vals


def _entity(raw: str, what: str):
    vals = _floats(raw, what)
    if len(vals) != 4:
        raise ConfigError(f"{what} needs 4 numbers: re, im, angle_deg, "
                          "delay")
    re_, im_, ang, delay = vals
    omega = math.pi * math.sin(math.radians(ang))
    return complex(re_, im_), omega, delay


def _parse_entities(parser, scenario: ScenarioConfig):
    paths = targets = None
    if parser.has_section("comm_paths"):
        grid = {}
        for key, raw in parser["comm_paths"].items():
            try:
                u_s, p_s = key.split("_")
                u, p = int(u_s.lstrip("u")), int(p_s.lstrip("p"))
            except ValueError:
                raise ConfigError(f"comm path key must look like u0_p1, "
                                  f"got {key!r}") from None
            g, om, d = _entity(raw, f"comm_paths.{key}")
            grid[(u, p)] = CommPath(g, om, d)
        paths = tuple(
            tuple(grid.get((u, p)) for p in range(scenario.n_paths_per_user))
            for u in range(scenario.n_users))
        if len(grid) != scenario.n_users * scenario.n_paths_per_user or \
                any(p is None for user in paths for p in user):
            raise ConfigError("comm_paths must list every (user, path) of "
                              "the scenario exactly once")
    if parser.has_section("targets"):
        items = {}
        for key, raw in parser["targets"].items():
            try:
                idx = int(key.lstrip("t"))
            except ValueError:
                raise ConfigError(f"target key must look like t0, got "
                                  f"{key!r}") from None
            g, om, d = _entity(raw, f"targets.{key}")
            items[idx] = Target(g, om, d)
        if sorted(items) != list(range(scenario.n_targets)):
            raise ConfigError("targets must be t0..t{L-1} with L = "
                              "n_targets")
        targets = tuple(items[i] for i in range(scenario.n_targets))
    return paths, targets


def load_config(text: str, overrides: dict | None = None,
                sweep_kind: str | None = None) -> ExperimentConfig:
    """Parse INI text into an :class:`ExperimentConfig`.

    ``overrides`` maps ``section.key`` to already-typed values and is
    applied after parsing (used by the command-line flags).  ``sweep_kind``
    fixes the sweep kind; a conflicting ``[sweep] kind`` is an error and
    missing values fall back to :data:`DEFAULT_VALUES`.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from None
    known = {"scenario", "sweep", "experiment", "jcas", "comm_paths",
             "targets"}
    for sec in parser.sections():
        if sec not in known:
            raise ConfigError(f"unknown section [{sec}]")
    overrides = dict(overrides or {})
    scen = _section_to_fields(ScenarioConfig, parser["scenario"], "scenario") \
        if parser.has_section("scenario") else {}
    jc = _section_to_fields(JcasParams, parser["jcas"], "jcas") \
        if parser.has_section("jcas") else {}
    exp = {}
    if parser.has_section("sweep"):
        for key, raw in parser["sweep"].items():
            if key == "kind":
                exp["sweep_kind"] = raw.strip()
            elif key == "values":
                exp["sweep_values"] = _floats(raw, "sweep.values")
            else:
                raise ConfigError(f"unknown key {key!r} in [sweep]")
    if parser.has_section("experiment"):
        for key, raw in parser["experiment"].items():
            if key == "algorithms":
                exp["algorithms"] = tuple(
                    a for a in raw.replace(",", " ").split())
            elif key == "n_monte_carlo":
                exp["n_monte_carlo"] = _convert(key, raw, int)
            elif key == "output_path":
                exp["output_path"] = raw.strip()
            else:
                raise ConfigError(f"unknown key {key!r} in [experiment]")
    if sweep_kind is not None:
        if exp.get("sweep_kind", sweep_kind) != sweep_kind:
            raise ConfigError(f"config sweep kind {exp['sweep_kind']!r} "
                              f"conflicts with a {sweep_kind} sweep")
        exp["sweep_kind"] = sweep_kind
        exp.setdefault("sweep_values", DEFAULT_VALUES[sweep_kind])
    for dotted, value in overrides.items():
        sec, key = dotted.split(".", 1)
        {"scenario": scen, "jcas": jc, "experiment": exp}[sec][key] = value
    try:
        scenario = ScenarioConfig(**scen)
        jcas = JcasParams(**jc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    paths, targets = _parse_entities(parser, scenario)
    return ExperimentConfig(scenario=scenario, jcas=jcas, comm_paths=paths,
                            targets=targets, **exp)


# sweeps --------------------------------------------------------------------

def _scene(cfg: ExperimentConfig, draw: int):
    comm, scene = draw_scenario(cfg.scenario, draw)
    if cfg.comm_paths is not None:
        comm = synth_comm_channel(cfg.scenario, cfg.comm_paths)
    if cfg.targets is not None:
        scene = synth_sensing_scene(cfg.scenario, cfg.targets)
    return comm, scene


@dataclass
class _Design:
    prec: PrecoderSet | None
    iterations: int
    wall_ms: float
    termination: str


def design_precoders(comm, scene, scenario: ScenarioConfig,
                     params: JcasParams, algorithms, q_star=None) -> dict:
    """Run the requested designs on one channel draw.

    Returns ``{algorithm: _Design}``; an infeasible JCAS problem gives a
    design with ``prec=None`` and ``termination='infeasible'``.
    """
    mu = scenario.mui_weight
    out = {}
    cov = None
    need_q = {"crb_opt", "alg2"} & set(algorithms)
    if need_q and q_star is None:
        t = time.perf_counter()
        cov = opt_crb_covariance(scene, scenario)
        q_star, q_ms = cov.q_matrices, 1e3 * (time.perf_counter() - t)
    for alg in algorithms:
        t = time.perf_counter()
        iters, term = 0, "closed_form"
        try:
            if alg == "comm_opt":
                prec = opt_comm_precoder(comm, mu)
            elif alg == "mi_opt":
                prec, _ = opt_mi_precoder(scene, comm, mu)
            elif alg == "crb_opt":
                prec = PrecoderSet(covariance_factor(q_star,
                                                     scenario.n_users))
                if cov is not None:
                    iters = int(cov.iterations.max())
                    term = "converged" if cov.converged.all() \
                        else "max_iters"
            elif alg == "alg1":
                prec, tr = algorithm1(comm, scene, params, mu, kkt=False)
                iters, term = tr.iterations, tr.termination
            else:
                prec, tr = algorithm2(comm, scene, params, mu,
                                      q_star=q_star, kkt=False)
                iters, term = tr.iterations, tr.termination
        except InfeasibleError as exc:
            log.info("%s infeasible: %s", alg, exc)
            prec, term = None, "infeasible"
        ms = 1e3 * (time.perf_counter() - t)
        if alg == "crb_opt" and cov is not None:
            ms += q_ms
        out[alg] = _Design(prec, iters, ms, term)
    return out


def _noise_for_snr(scenario: ScenarioConfig, snr_db: float) -> ScenarioConfig:
    nv = scenario.tx_power / 10 ** (snr_db / 10)
    return replace(scenario, noise_var_radar=nv, noise_var_comm=nv)


def _metrics(comm, scene, prec, scenario: ScenarioConfig) -> dict:
    _, rate = sinr_and_rate(comm, prec, scenario)
    try:
        crb = crb_total(fim(scene, prec, scenario))
    except SingularFimError:
        crb = math.inf
    return {"j_value": j_metric(comm, prec, scenario.mui_weight),
            "sum_rate_bits": rate,
            "mi_bits": sensing_mi(scene, prec, scenario),
            "crb_total": crb}


def _snr_db(scenario: ScenarioConfig) -> float:
    return 10 * math.log10(scenario.tx_power / scenario.noise_var_comm)


def sweep_rows(cfg: ExperimentConfig, draw: int, timing: bool = False):
    """Detail rows of one Monte-Carlo draw, in sweep order then algorithm
    order."""
    comm, scene = _scene(cfg, draw)
    base = {"seed": cfg.scenario.rng_seed, "draw": draw,
            "sweep_kind": cfg.sweep_kind}
    rows = []

    def emit(alg, value, design, scenario, rho, xi):
        row = dict(base, algorithm=alg, sweep_value=value,
                   snr_db=_snr_db(scenario), rho=rho, xi=xi,
                   iterations=design.iterations,
                   wall_ms=design.wall_ms if timing else None,
                   termination=design.termination)
        if design.prec is not None:
            row.update(_metrics(comm, scene, design.prec, scenario))
        rows.append(row)

    p = cfg.jcas
    if cfg.sweep_kind == "snr":
        # precoders do not depend on the noise level
        designs = design_precoders(comm, scene, cfg.scenario, p,
                                   cfg.algorithms)
        for value in cfg.sweep_values:
            scen = _noise_for_snr(cfg.scenario, value)
            for alg in cfg.algorithms:
                emit(alg, value, designs[alg], scen, p.rho, p.xi)
        return rows
    fixed = [a for a in cfg.algorithms if a not in ("alg1", "alg2")]
    q_star = None
    if {"crb_opt", "alg2"} & set(cfg.algorithms):
        q_star = opt_crb_covariance(scene, cfg.scenario).q_matrices
    designs = design_precoders(comm, scene, cfg.scenario, p, fixed, q_star)
    for value in cfg.sweep_values:
        pv = replace(p, rho=value, xi=value)
        jc = [a for a in cfg.algorithms if a in ("alg1", "alg2")]
        designs.update(design_precoders(comm, scene, cfg.scenario, pv, jc,
                                        q_star))
        for alg in cfg.algorithms:
            emit(alg, value, designs[alg], cfg.scenario, value, value)
    return rows


def _aggregate(rows: list, cfg: ExperimentConfig, timing: bool) -> list:
    keys = ("j_value", "sum_rate_bits", "mi_bits", "crb_total", "iterations")
    out = []
    for value in cfg.sweep_values:
        for alg in cfg.algorithms:
            grp = [r for r in rows if r["algorithm"] == alg
                   and r["sweep_value"] == value]
            ok = [r for r in grp if r["termination"] != "infeasible"]
            row = {"seed": cfg.scenario.rng_seed, "draw": -1,
                   "algorithm": alg, "sweep_kind": cfg.sweep_kind,
                   "sweep_value": value, "snr_db": grp[0]["snr_db"],
                   "rho": grp[0]["rho"], "xi": grp[0]["xi"],
                   "termination": f"mean_of_{len(ok)}/{len(grp)}"}
            for k in keys:
                row[k] = float(np.mean([r[k] for r in ok])) if ok else None
            row["wall_ms"] = float(np.mean([r["wall_ms"] for r in grp])) \
                if timing else None
            out.append(row)
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".12g")
    return str(v)


def write_csv(rows: list, stream) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in CSV_COLUMNS])


def run_sweep(cfg: ExperimentConfig, jobs: int = 1, timing: bool = False,
              out_path: str | None = None) -> tuple[list, str]:
    """Run every draw, append aggregates and write the CSV.

    Draws run in ``jobs`` worker processes; rows are ordered by draw then
    sweep value regardless of completion order.  Returns ``(rows, text)``.
    """
    fn = partial(sweep_rows, cfg, timing=timing)
    draws = range(cfg.n_monte_carlo)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_draw = list(pool.map(fn, draws))
    else:
        per_draw = [fn(d) for d in draws]
    rows = [r for chunk in per_draw for r in chunk]
    rows += _aggregate(rows, cfg, timing)
    buf = io.StringIO()
    write_csv(rows, buf)
    text = buf.getvalue()
    path = out_path or cfg.output_path
    if path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return rows, text


# beam patterns -------------------------------------------------------------

def beam_pattern(P: np.ndarray, angles_deg) -> tuple[np.ndarray, np.ndarray]:
    """Transmit gain ``g(phi) = sum_u |a(pi sin phi)^H p_u|^2`` in dB.

    ``P`` is one subcarrier's ``N x U`` precoder.  Returns
    ``(per_column_db (A, U), total_db (A,))``, all normalized so that the
    total peaks at 0 dB.
    """
    ang = np.asarray(angles_deg, dtype=float)
    if np.any(np.abs(ang) > 90):
        raise ValueError("angles must lie in [-90, 90] degrees")
    P = np.asarray(P, dtype=complex)
    A = array_response(np.pi * np.sin(np.radians(ang)), P.shape[0])
    cols = np.abs(A.conj().T @ P) ** 2                   # (A, U)
    total = cols.sum(axis=1)
    peak = max(float(total.max()), np.finfo(float).tiny)
    floor = np.finfo(float).tiny
    return (10 * np.log10(np.maximum(cols / peak, floor)),
            10 * np.log10(np.maximum(total / peak, floor)))


def pattern_peaks(angles_deg, gain_db, count: int = 2,
                  min_db: float = -20.0) -> np.ndarray:
    """Angles of the ``count`` highest interior local maxima of a pattern
    that are above ``min_db`` (sorted by height)."""
    a = np.asarray(angles_deg, dtype=float)
    g = np.asarray(gain_db, dtype=float)
    mid = (g[1:-1] >= g[:-2]) & (g[1:-1] > g[2:]) & (g[1:-1] >= min_db)
    idx = np.flatnonzero(mid) + 1
    # plateau or edge maximum
    if g[0] > g[1] and g[0] >= min_db:
        idx = np.append(idx, 0)
    if g[-1] > g[-2] and g[-1] >= min_db:
        idx = np.append(idx, g.size - 1)
    idx = idx[np.argsort(-g[idx], kind="stable")][:count]
    return a[idx]


def beam_pattern_rows(cfg: ExperimentConfig, subcarrier: int, angles,
                      draw: int = 0) -> list:
    """Long-format rows ``(algorithm, angle_deg, column, power_db)`` for
    every configured design at one subcarrier."""
    comm, scene = _scene(cfg, draw)
    if not 0 <= subcarrier < cfg.scenario.n_subcarriers:
        raise ConfigError("subcarrier out of range")
    designs = design_precoders(comm, scene, cfg.scenario, cfg.jcas,
                               cfg.algorithms)
    rows = []
    for alg in cfg.algorithms:
        d = designs[alg]
        if d.prec is None:
            continue
        cols, total = beam_pattern(d.prec.matrices[subcarrier], angles)
        for i, a in enumerate(angles):
            for u in range(cols.shape[1]):
                rows.append((alg, a, f"u{u}", cols[i, u]))
            rows.append((alg, a, "total", total[i]))
    return rows


# validation suite ----------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _sinr_bound_check(n_valid: int, rng) -> CheckResult:
    """SINR >= J on (channel, precoder) draws meeting both side conditions.

    Precoders are zero forcing plus a random perturbation so that a good
    share of the draws meets the conditions.  The bound is checked per
    draw on the sums over subcarriers and users.
    """
    from .metrics import sinr_bound_conditions
    base = ScenarioConfig(n_antennas=8, n_users=2, n_subcarriers=4)
    mu = base.mui_weight
    found = viol = tried = 0
    worst = -np.inf
    while found < n_valid and tried < 50 * n_valid:
        # noise up to the level where the power condition binds
        cfg = replace(base, noise_var_comm=rng.uniform(1e-3, 0.5))
        comm, _ = draw_scenario(cfg, int(rng.integers(0, 2 ** 31)))
        H = comm.h_matrices
        Z = np.linalg.pinv(np.conj(np.swapaxes(H, 1, 2)))
        noise = rng.standard_normal(Z.shape) + 1j * rng.standard_normal(
            Z.shape)
        P = Z / np.linalg.norm(Z, axis=1, keepdims=True) + \
            rng.uniform(0.0, 0.3) * noise / np.sqrt(2 * Z.shape[1])
        P = P / np.linalg.norm(P, axis=1, keepdims=True)
        tried += 1
        if not sinr_bound_conditions(comm, P, cfg, mu).all():
            continue
        found += 1
        sinr, _ = sinr_and_rate(comm, P, cfg)
        gap = j_metric(comm, P, mu) - float(sinr.sum())
        worst = max(worst, gap)
        viol += gap > 1e-9
    ok = viol == 0 and found >= n_valid
    return CheckResult("sinr_bound", ok,
                       f"{found} valid draws of {tried}, {viol} violations, "
                       f"max(J - sum SINR) = {worst:.3g}")


def _fim_check(n_inst: int, rng, fim_fn) -> list:
    from .oracle import numeric_fim
    cfg = ScenarioConfig(n_antennas=4, n_users=2, n_subcarriers=4,
                         n_targets=2)
    worst = 0.0
    sym = psd = True
    L = cfg.n_targets
    for _ in range(n_inst):
        _, scene = draw_scenario(cfg, int(rng.integers(0, 2 ** 31)))
        P = rng.standard_normal((4, 4, 2)) + 1j * rng.standard_normal(
            (4, 4, 2))
        P *= np.sqrt(2.0) / np.linalg.norm(P, axis=(1, 2), keepdims=True)
        F = fim_fn(scene, PrecoderSet(P), cfg).fim
        Fn = numeric_fim(scene, P, cfg)
        d = np.sqrt(np.abs(np.diag(Fn)))
        # error per entry relative to the geometric scale of its row/column
        err = np.abs(F - Fn) / np.maximum(np.outer(d, d), 1e-300)
        worst = max(worst, float(err.max()))
        sym &= bool(np.allclose(F, F.T, rtol=0, atol=1e-12 * np.abs(F).max()))
        ev = np.linalg.eigvalsh(0.5 * (F + F.T) / np.outer(d, d))
        psd &= bool(ev[0] >= -1e-9)
    return [CheckResult("fim_matches_numeric", worst < 1e-4,
                        f"max scaled error {worst:.3g} over {n_inst} "
                        f"instances ({4 * L} parameters)"),
            CheckResult("fim_symmetric_psd", sym and psd,
                        f"symmetric={sym} psd={psd}")]


def _dual_form_check(n_inst: int, rng) -> CheckResult:
    from .metrics import mui
    from .oracle import naive_mi, naive_mui
    cfg = ScenarioConfig(n_antennas=4, n_users=2, n_subcarriers=3,
                         n_targets=2)
    worst = 0.0
    for _ in range(n_inst):
        comm, scene = draw_scenario(cfg, int(rng.integers(0, 2 ** 31)))
        P = rng.standard_normal((3, 4, 2)) + 1j * rng.standard_normal(
            (3, 4, 2))
        _, tot = mui(comm, P)
        worst = max(worst, abs(tot - naive_mui(comm.h_matrices, P))
                    / max(tot, 1.0))
        mi = sensing_mi(scene, P, cfg)
        # log-det form of the MI
        ld = sum(np.linalg.slogdet(np.eye(2) + P[k].conj().T @ np.outer(
            scene.h_s[k], scene.h_s[k].conj()) @ P[k])[1]
            for k in range(3)) / np.log(2)
        worst = max(worst, abs(mi - ld) / max(abs(mi), 1.0),
                    abs(mi - naive_mi(scene.h_s, P, 1.0, 1.0))
                    / max(abs(mi), 1.0))
    return CheckResult("metric_dual_forms", worst < 1e-9,
                       f"max relative gap {worst:.3g} over {n_inst} "
                       "instances")


def _dominance_check(n_samples: int, rng) -> CheckResult:
    from .oracle import haar_unit_columns
    cfg = ScenarioConfig(n_antennas=4, n_users=2, n_subcarriers=1,
                         n_targets=2)
    comm, scene = draw_scenario(cfg, int(rng.integers(0, 2 ** 31)))
    mu = cfg.mui_weight
    pc = opt_comm_precoder(comm, mu).matrices
    pm, _ = opt_mi_precoder(scene, comm, mu)
    jc = j_metric(comm, pc, mu)
    mi = sensing_mi(scene, pm, cfg)
    # unit columns for J; Frobenius norm U for MI
    S = haar_unit_columns(rng, (n_samples, 4, 2))
    H = comm.h_matrices[0]
    G = np.abs(np.einsum("nv,snu->svu", H.conj(), S)) ** 2
    own = np.einsum("suu->su", G)
    js = (own - mu * (G.sum(axis=1) - own)).sum(axis=1)
    Sm = S * np.sqrt(rng.dirichlet(np.ones(2), n_samples) * 2)[:, None, :]
    g = np.einsum("snu,n->su", Sm.conj(), scene.h_s[0])
    mis = np.log2(1 + np.sum(np.abs(g) ** 2, axis=1))
    ok = js.max() <= jc + 1e-9 and mis.max() <= mi + 1e-9
    return CheckResult("individual_dominance", bool(ok),
                       f"J* {jc:.4g} vs best sample {js.max():.4g}; MI* "
                       f"{mi:.4g} vs best sample {mis.max():.4g}")


def _solver_check(rng) -> CheckResult:
    from .jcas import constraint_psi, constraint_psi_prime, \
        constraint_psi_dprime
    cfg = ScenarioConfig(n_antennas=4, n_users=2, n_subcarriers=4,
                         n_targets=2)
    comm, scene = draw_scenario(cfg, int(rng.integers(0, 2 ** 31)))
    mu = cfg.mui_weight
    params = JcasParams(rho=0.5, xi=1.0, psi2_mode="frobenius")
    msgs, ok = [], True
    try:
        P1, _ = algorithm1(comm, scene, params, mu, kkt=False)
        pm, _ = opt_mi_precoder(scene, comm, mu)
        for k in range(cfg.n_subcarriers):
            ok &= constraint_psi(P1.matrices[k]) <= 2 + 1e-8
            ok &= constraint_psi_prime(P1.matrices[k], pm.matrices[k]) \
                <= params.rho + 1e-8
        Q = opt_crb_covariance(scene, cfg).q_matrices
        P2, _ = algorithm2(comm, scene, params, mu, q_star=Q, kkt=False)
        for k in range(cfg.n_subcarriers):
            ok &= constraint_psi(P2.matrices[k]) <= 2 + 1e-8
            ok &= constraint_psi_dprime(P2.matrices[k], Q[k],
                                        params.psi2_mode) <= params.xi + 1e-8
        msgs.append("outputs feasible" if ok else "constraint violated")
    except InfeasibleError as exc:
        msgs.append(f"skipped: {exc}")
    return CheckResult("solver_feasibility", bool(ok), "; ".join(msgs))


def validate(level: str = "fast", seed: int = 0, fim_fn=None) -> list:
    """Run the invariant suites; returns a list of :class:`CheckResult`.

    ``fast`` uses reduced trial counts; ``full`` runs 1e4 SINR-bound draws.
    ``fim_fn`` replaces the analytic FIM (used to test the suite itself).
    """
    if level not in ("fast", "full"):
        raise ValueError("level must be 'fast' or 'full'")
    full = level == "full"
    rng = np.random.default_rng(seed)
    results = [_sinr_bound_check(10_000 if full else 1000, rng)]
    results += _fim_check(20 if full else 3, rng, fim_fn or fim)
    results.append(_dual_form_check(1000 if full else 100, rng))
    results.append(_dominance_check(100_000 if full else 10_000, rng))
    results.append(_solver_check(rng))
    return results


# command line --------------------------------------------------------------

def _angles(spec: str) -> np.ndarray:
    try:
        lo, hi, step = (float(x) for x in spec.split(":"))
    except ValueError:
        raise ConfigError("angles must be lo:hi:step") from None
    if not step > 0 or hi < lo:
        raise ConfigError("angles need hi >= lo and step > 0")
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return np.round(lo + step * np.arange(n), 10)


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config")
    common.add_argument("--out", help="output CSV path ('-' for stdout)")
    common.add_argument("--seed", type=int, help="override rng_seed")
    common.add_argument("--desk-scale", action="store_true",
                        help="use N=8, K=32")
    common.add_argument("--fim-noise-convention",
                        choices=("paper", "variance"))
    common.add_argument("--psi2-mode", choices=("determinant", "frobenius"))
    common.add_argument("--jobs", type=int, default=1,
                        help="worker processes for Monte-Carlo draws")
    common.add_argument("--timing", action="store_true",
                        help="fill the wall_ms column")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="jcaswave",
                                description="Broadband JCAS precoder "
                                "experiments")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("sweep-snr", parents=[common],
                   help="Monte-Carlo sweep over SNR")
    sub.add_parser("sweep-threshold", parents=[common],
                   help="Monte-Carlo sweep over rho (alg1) and xi (alg2)")
    bp = sub.add_parser("beam-pattern", parents=[common],
                        help="beam patterns of every design at one "
                        "subcarrier")
    bp.add_argument("--subcarrier", type=int, default=None,
                    help="subcarrier index (default K // 2)")
    bp.add_argument("--angles", default="-90:90:0.5",
                    help="lo:hi:step in degrees (write --angles=-30:30:1 "
                    "when lo is negative)")
    va = sub.add_parser("validate", parents=[common],
                        help="run the invariant suites")
    va.add_argument("--level", choices=("fast", "full"), default="fast")
    return p


def _load(args, kind=None) -> ExperimentConfig:
    text = ""
    if args.config:
        try:
            with open(args.config) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
    ov = {}
    if args.seed is not None:
        ov["scenario.rng_seed"] = args.seed
    if args.desk_scale:
        ov.update({f"scenario.{k}": v for k, v in DESK_SCALE.items()})
    if args.fim_noise_convention:
        ov["scenario.fim_noise_convention"] = args.fim_noise_convention
    if args.psi2_mode:
        ov["jcas.psi2_mode"] = args.psi2_mode
    return load_config(text, ov, kind)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else
                        logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "validate":
            results = validate(args.level, seed=args.seed or 0)
            for r in results:
                print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: "
                      f"{r.detail}")
            bad = [r.name for r in results if not r.passed]
            print(f"{len(results) - len(bad)}/{len(results)} checks passed")
            return EXIT_INVARIANT if bad else EXIT_OK
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        if args.command == "beam-pattern":
            cfg = _load(args)
            k = cfg.scenario.n_subcarriers // 2 if args.subcarrier is None \
                else args.subcarrier
            rows = beam_pattern_rows(cfg, k, _angles(args.angles))
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(("algorithm", "angle_deg", "column", "power_db"))
            w.writerows((a, _fmt(float(x)), c, _fmt(float(g)))
                        for a, x, c, g in rows)
            path = args.out or "beam_pattern.csv"
            if path == "-":
                sys.stdout.write(buf.getvalue())
            else:
                with open(path, "w", newline="") as fh:
                    fh.write(buf.getvalue())
            return EXIT_OK
        kind = "snr" if args.command == "sweep-snr" else "threshold"
        cfg = _load(args, kind)
        rows, _ = run_sweep(cfg, jobs=args.jobs, timing=args.timing,
                            out_path=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"output error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    detail = [r for r in rows if r["draw"] >= 0]
    if all(r["termination"] == "infeasible" for r in detail):
        print("every instance was infeasible", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK
