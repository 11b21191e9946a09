"""Joint communication/sensing precoder optimization.

Both solvers maximize ``J = -sum_u p_u^H R_u p_u`` per subcarrier under the
power constraint ``psi(P) = ||P||_F^2 <= U`` and one sensing constraint:

* MI-constrained (:func:`algorithm1`): ``psi'(P) = ||P - P_MI||_F^2 <= rho``,
  a ball around the MI-optimal precoder.
* CRB-constrained (:func:`algorithm2`): ``psi''(P) <= xi``, the deviation of
  the covariance ``P P^H`` from the CRB-optimal covariance ``Q*``.

The optimum lies on a constraint surface.  Each column is moved by
``+-eps`` along the eigenvector of the single negative eigenvalue of ``R_u``
and pulled back onto the active surface; the better candidate is kept.  The
step is halved whenever neither candidate improves, and the solver stops
once the step falls below ``min_step``.

With ``directions='eigen+gradient'`` (the default) a third candidate
follows the descent direction projected onto the tangent cone of the
active constraints, retracted onto the surfaces afterwards.  The eigenvector
moves alone can stall where the objective still decreases along the
surface.

Budgets.  ``psi`` and ``psi'`` are sums over columns while the updates are
per column, so the totals are split into per-column budgets: an equal
split (``1`` and ``rho/U``) where the start allows it, otherwise the
columns over the equal share keep their usage and the rest share what is
left evenly.  ``psi''`` couples the
columns and is handled jointly: columns of one subcarrier are updated in a
fixed order, each against the current state of the others, followed by a
tangent step on all columns together.

Starts.  :func:`mi_pipeline` and :func:`crb_pipeline` run the solver from
several feasible points per subcarrier (zero forcing pulled onto the
sensing constraint, the scaled eigenvector solution and, for the CRB
problem, radial scalings of a few base precoders) and keep the best.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
import itertools
import logging
import warnings

import numpy as np
from scipy.optimize import nnls

from .channel import CommChannel, ScenarioConfig, SensingScene
from .individual import (
    covariance_factor,
    negative_eigenpairs,
    opt_crb_covariance,
    opt_mi_precoder,
)
from .metrics import PrecoderSet, build_ru

__all__ = [
    "InfeasibleError",
    "JcasParams",
    "IterationTrace",
    "RealifiedEntry",
    "ClosedForm",
    "realify",
    "constraint_psi",
    "constraint_psi_prime",
    "constraint_psi_dprime",
    "closed_form_jcas",
    "find_initial",
    "solve_mi_constrained",
    "solve_crb_constrained",
    "mi_start_point",
    "crb_start_point",
    "mi_pipeline",
    "crb_pipeline",
    "algorithm1",
    "algorithm2",
]

log = logging.getLogger(__name__)

PSI2_MODES = ("determinant", "frobenius")
DIRECTIONS = ("eigen", "eigen+gradient")
FEAS_TOL = 1e-10
ACTIVE_TOL = 1e-8


class InfeasibleError(ValueError):
    """No feasible starting point exists for some subcarrier."""


@dataclass(frozen=True)
class JcasParams:
    rho: float = 1.0
    xi: float = 1.0
    epsilon: float = 0.05
    max_iters: int = 5000
    stall_tol: float = 1e-9
    min_step: float = 1e-10
    stall_window: int = 100
    window_tol: float = 1e-5
    psi2_mode: str = "determinant"
    directions: str = "eigen+gradient"
    real_only: bool = False
    multistart: bool = True

    def __post_init__(self):
        for name in ("rho", "xi", "epsilon", "stall_tol", "min_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iters < 1 or self.stall_window < 1:
            raise ValueError("max_iters and stall_window must be >= 1")
        if self.window_tol < 0:
            raise ValueError("window_tol must be non-negative")
        if self.psi2_mode not in PSI2_MODES:
            raise ValueError(f"psi2_mode must be one of {PSI2_MODES}")
        if self.directions not in DIRECTIONS:
            raise ValueError(f"directions must be one of {DIRECTIONS}")
        if self.epsilon >= min(self.rho, self.xi):
            warnings.warn("epsilon >= min(rho, xi); steps may overshoot the "
                          "constraint surfaces", stacklevel=3)


@dataclass
class IterationTrace:
    """Per-sweep diagnostics of one solver run.

    ``records`` holds one dict per sweep with keys ``iteration``,
    ``j_value``, ``n_active`` (per constraint name), ``n_accepted``,
    ``n_halved``, ``coefficient`` (mean projection coefficient per name),
    ``worst_increase`` (largest change of ``-J`` over accepted column moves,
    never positive) and ``max_violation``.
    """

    algorithm: str
    records: list = field(default_factory=list)
    termination: str = ""
    iterations: int = 0
    column_termination: np.ndarray | None = None
    start: np.ndarray | None = None
    kkt_angle: np.ndarray | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("column_termination", "start", "kkt_angle"):
            if d[key] is not None:
                d[key] = np.asarray(d[key]).tolist()
        return d


@dataclass(frozen=True)
class RealifiedEntry:
    p_bar: np.ndarray
    r_bar: np.ndarray
    v_r: np.ndarray
    r_r: float


@dataclass(frozen=True)
class ClosedForm:
    """Closed-form candidates: ``branch[k]`` is 0 (none), 1 (power surface
    active) or 2 (sensing surface active)."""

    matrices: np.ndarray
    branch: np.ndarray

    @property
    def precoders(self) -> PrecoderSet | None:
        if np.all(self.branch > 0):
            return PrecoderSet(self.matrices)
        return None


# ---------------------------------------------------------------- helpers

def realify(p: np.ndarray, R: np.ndarray) -> RealifiedEntry:
    """Real form of ``Re[p^H R p]``: ``p_bar^T R_bar p_bar``.

    ``R_bar = [[Re R, -Im R], [Im R, Re R]]``; each eigenvalue of ``R``
    appears twice in ``R_bar``.  ``v_r`` is the real form of the complex
    eigenvector of the smallest eigenvalue.
    """
    p = np.asarray(p, dtype=complex)
    R = np.asarray(R, dtype=complex)
    if R.shape != (p.size, p.size):
        raise ValueError("R must be N x N for a length-N column")
    p_bar = np.concatenate([p.real, p.imag])
    r_bar = np.block([[R.real, -R.imag], [R.imag, R.real]])
    r, v = negative_eigenpairs(R, require_negative=False)
    return RealifiedEntry(p_bar=p_bar, r_bar=r_bar,
                          v_r=np.concatenate([v.real, v.imag]),
                          r_r=float(r))


def constraint_psi(P: np.ndarray) -> float:
    return float(np.sum(np.abs(P) ** 2))


def constraint_psi_prime(P: np.ndarray, mi_star: np.ndarray) -> float:
    P = np.asarray(P)
    mi_star = np.asarray(mi_star)
    if P.shape != mi_star.shape:
        raise ValueError("shape mismatch between P and the MI precoder")
    return float(np.sum(np.abs(P - mi_star) ** 2))


def _psi2_from_m(M: np.ndarray, mode: str) -> np.ndarray:
    if mode == "determinant":
        return np.abs(np.linalg.det(M))
    return np.linalg.norm(M, axis=(-2, -1))


def _deviation(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """``Re D + Im D`` for ``D = P P^H - Q`` (batched)."""
    D = np.einsum("...nu,...mu->...nm", P, P.conj()) - Q
    return D.real + D.imag


def constraint_psi_dprime(P: np.ndarray, q_star: np.ndarray,
                          mode: str = "determinant") -> float:
    """Covariance deviation ``|Re D + Im D|`` with ``D = P P^H - Q*``.

    ``mode='determinant'`` takes the absolute determinant, ``'frobenius'``
    the Frobenius norm.
    """
    if mode not in PSI2_MODES:
        raise ValueError(f"mode must be one of {PSI2_MODES}")
    return float(_psi2_from_m(_deviation(np.asarray(P, dtype=complex),
                                         np.asarray(q_star)), mode))


def _sq(x: np.ndarray) -> np.ndarray:
    return np.sum(np.abs(x) ** 2, axis=-1)


def _outer_re_im(x: np.ndarray) -> np.ndarray:
    """``Re(x x^H) + Im(x x^H)`` for a batch of vectors ``x[..., N]``."""
    O = x[..., :, None] * x[..., None, :].conj()
    return O.real + O.imag


def _align_phase(v: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Rotate each column ``v[..., :, u]`` so that ``v^H c`` is real >= 0."""
    ip = np.sum(v.conj() * c, axis=-2)
    ph = np.where(np.abs(ip) > 0, ip / np.where(np.abs(ip) > 0,
                                                np.abs(ip), 1.0), 1.0)
    return v * ph[..., None, :]


def _zf_columns(H: np.ndarray) -> np.ndarray:
    """Column-normalized zero-forcing precoders ``(H^H)^+`` (MUI = 0)."""
    Z = np.linalg.pinv(np.conj(np.swapaxes(H, 1, 2)))
    n = np.linalg.norm(Z, axis=1, keepdims=True)
    return Z / np.where(n > 0, n, 1.0)


def _kkt_angle(grad: np.ndarray, normals: list) -> float:
    """Angle between ``-grad`` and the cone spanned by active normals."""
    g = -np.asarray(grad, dtype=float)
    gn = np.linalg.norm(g)
    if gn == 0:
        return 0.0
    if not normals:
        return np.pi / 2
    Nm = np.stack(normals, axis=1)
    mu, _ = nnls(Nm, g)
    fit = Nm @ mu
    fn = np.linalg.norm(fit)
    if fn == 0:
        return np.pi / 2
    return float(np.arccos(np.clip(g @ fit / (gn * fn), -1.0, 1.0)))


def _real(x: np.ndarray) -> np.ndarray:
    return np.concatenate([x.real, x.imag])


def _largest_root(fn, lo: float, hi: float, n_grid: int = 200,
                  tol: float = 1e-12):
    """Largest ``x`` in ``[lo, hi]`` with ``fn(x) = 0`` by grid + bisection."""
    xs = np.linspace(lo, hi, n_grid + 1)
    fs = np.array([fn(x) for x in xs])
    for i in range(n_grid - 1, -1, -1):
        a, b = xs[i], xs[i + 1]
        fa, fb = fs[i], fs[i + 1]
        if fb == 0:
            return b
        if fa == 0 or np.sign(fa) != np.sign(fb):
            if fa == 0:
                return a
            while b - a > tol * max(1.0, abs(b)):
                m = 0.5 * (a + b)
                fm = fn(m)
                if np.sign(fm) == np.sign(fa):
                    a, fa = m, fm
                else:
                    b = m
            return 0.5 * (a + b)
    return None


def _bisect(fn, lo: float, hi: float, tol: float = 1e-10) -> float:
    """Root of ``fn`` on ``[lo, hi]`` given ``fn(lo) > 0 >= fn(hi)``."""
    while hi - lo > tol:
        m = 0.5 * (lo + hi)
        if fn(m) > 0:
            lo = m
        else:
            hi = m
    return hi


# ------------------------------------------------------- MI-constrained

def _closed_form_mi(V: np.ndarray, C: np.ndarray, rho: float) -> ClosedForm:
    """Scaled negative eigenvectors ``f V`` meeting one surface exactly.

    ``V`` is phase-aligned with the centres ``C`` (``(K, N, U)``).  Branch 1
    uses unit columns (``psi = U``) when ``psi'(V) <= rho``; branch 2 uses
    the largest common scale ``f <= 1`` with ``psi'(f V) = rho``.
    """
    K, N, U = V.shape
    out = np.zeros_like(V)
    branch = np.zeros(K, dtype=int)
    d1 = np.sum(np.abs(V - C) ** 2, axis=(1, 2))
    b1 = d1 <= rho + FEAS_TOL
    out[b1] = V[b1]
    branch[b1] = 1
    # psi'(fV) = U f^2 - 2 f s + c2 = rho
    s = np.sum(np.real(np.sum(V.conj() * C, axis=1)), axis=1)
    c2 = np.sum(np.abs(C) ** 2, axis=(1, 2))
    disc = s ** 2 - U * (c2 - rho)
    for k in np.flatnonzero(~b1 & (disc >= 0)):
        roots = [(s[k] + sg * np.sqrt(disc[k])) / U for sg in (1, -1)]
        ok = [f for f in roots if 0 < f <= 1 + 1e-12]
        if ok:
            f = min(max(ok), 1.0)
            out[k] = f * V[k]
            branch[k] = 2
    return ClosedForm(matrices=out, branch=branch)


def mi_start_point(H: np.ndarray, C: np.ndarray, rho: float):
    """Zero-forcing start, pulled toward the centres until ``psi' = rho``."""
    Z = _align_phase(_zf_columns(H), C)
    d = np.sum(np.abs(Z - C) ** 2, axis=(1, 2))
    t = np.where(d > rho, 1.0 - np.sqrt(rho / np.where(d > 0, d, 1.0)), 0.0)
    P0 = (1 - t)[:, None, None] * Z + t[:, None, None] * C
    return P0, np.where(d > rho, 1, 2)


def _level_fill(used: np.ndarray, total: float) -> np.ndarray:
    """Budgets ``max(used, tau)`` per row summing to ``total``.

    Gives the equal split ``total / U`` whenever no column already uses
    more than that; columns above it keep exactly what they use.
    """
    K, U = used.shape
    srt = np.sort(used, axis=1)[:, ::-1]                  # descending
    out = np.empty_like(used)
    for k in range(K):
        tau = total / U
        for j in range(U):
            # columns 0..j-1 keep their usage, the rest share the remainder
            tau = (total - srt[k, :j].sum()) / (U - j)
            if j == U - 1 or srt[k, j] <= tau:
                break
        out[k] = np.maximum(used[k], tau)
    return out


def _mi_budgets(P0: np.ndarray, C: np.ndarray, rho: float, U: int):
    """Per-column power / distance budgets summing to ``U`` / ``rho``:
    the equal split where the start point allows it, otherwise level-filled
    above the start point's own usage."""
    pw = np.sum(np.abs(P0) ** 2, axis=1)                  # (K, U)
    dist = np.sum(np.abs(P0 - C) ** 2, axis=1)
    return _level_fill(pw, float(U)), _level_fill(dist, float(rho))


def _gram_solve(G: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve small batched Gram systems; a relative ridge handles
    (near-)dependent normals, giving the minimum-norm answer."""
    m = G.shape[-1]
    tr = np.trace(G, axis1=-2, axis2=-1)
    ridge = 1e-13 * np.where(tr > 0, tr, 1.0)
    return np.linalg.solve(G + ridge[:, None, None] * np.eye(m),
                           b[..., None])[..., 0]


def _tangent_dir(g: np.ndarray, normals: list):
    """Unit descent direction: ``-g`` minus its best nonnegative
    combination of the given normals (rows of ``normals`` are zero where a
    constraint is not considered).  The result does not increase any
    considered constraint to first order.  Subsets of the (at most a few)
    normals are enumerated, which solves this small NNLS exactly."""
    Nm = np.stack(normals, axis=1)                        # (B, m, N)
    B, m, _ = Nm.shape
    G = np.real(np.einsum("bin,bjn->bij", Nm.conj(), Nm))
    b = -np.real(np.einsum("bin,bn->bi", Nm.conj(), g))
    best = -g.copy()
    best_n = _sq(best)
    for size in range(1, m + 1):
        for sub in itertools.combinations(range(m), size):
            sub = list(sub)
            Gs = G[:, sub][:, :, sub]
            mu = _gram_solve(Gs, b[:, sub])
            ok = np.all(mu >= 0, axis=1)
            d = -g - np.einsum("bi,bin->bn", mu, Nm[:, sub])
            nd = _sq(d)
            take = ok & (nd < best_n)
            best[take] = d[take]
            best_n = np.where(take, nd, best_n)
    n = np.sqrt(best_n)
    ok = n > 1e-14 * np.sqrt(_sq(g))
    return best / np.where(ok, n, 1.0)[:, None], ok


def _on(value, bound):
    return np.abs(value - bound) <= ACTIVE_TOL * np.maximum(1.0, bound)


def _near(value, bound, reach):
    """Within ``reach`` (or the activity tolerance) below ``bound``."""
    return bound - value <= np.maximum(reach,
                                       ACTIVE_TOL * np.maximum(1.0, bound))


def solve_mi_constrained(R, r, v, C, P0, power_budget, dist_budget,
                         params: JcasParams):
    """Column-wise iterative solver for the MI-constrained problem.

    All arrays are flattened over (k, u): ``R`` ``(B, N, N)``, ``r`` ``(B,)``,
    ``v``/``C``/``P0`` ``(B, N)``, budgets ``(B,)``.

    Candidates are ``p +- eps v`` and, unless ``params.directions`` is
    ``'eigen'``, ``p + eta d`` with ``d`` the tangent descent direction.
    Each is pulled toward the centre onto ``psi'`` (coefficient ``a``) and
    rescaled onto ``psi`` (coefficient ``b``); the best feasible one is kept
    if it lowers ``-J``.  ``eps`` halves when the eigen moves fail and
    ``eta`` doubles or halves with the gradient moves; both halve when the
    improvement drops below ``stall_tol`` relative.  A column stops once its
    steps fall below ``min_step``.

    In ``'eigen'`` mode a column step costs ``O(N)``: ``R p`` is carried
    along using ``R v = r v`` and a precomputed ``R c``.

    Returns ``(P, records, termination, iterations)``.
    """
    p = np.array(P0, dtype=complex)
    B, N = p.shape
    use_grad = params.directions != "eigen"
    Rp = np.einsum("bnm,bm->bn", R, p)
    Rc = np.einsum("bnm,bm->bn", R, C)
    rv = r[:, None] * v
    f = np.real(np.sum(p.conj() * Rp, axis=1))
    eps = np.full(B, float(params.epsilon))
    eta = np.full(B, float(params.epsilon) if use_grad else 0.0)
    done = np.zeros(B, dtype=bool)
    term = np.array(["stalled"] * B, dtype=object)
    pi, de = power_budget, dist_budget
    tol_p = FEAS_TOL * np.maximum(1.0, pi)
    tol_d = FEAS_TOL * np.maximum(1.0, de)
    sq_de = np.sqrt(de)
    sq_pi = np.sqrt(pi)
    eta_cap = sq_pi + sq_de
    records = []
    it = 0
    while not done.all() and it < params.max_iters:
        it += 1
        idx = np.flatnonzero(~done)
        pa, Rpa, ca, Rca = p[idx], Rp[idx], C[idx], Rc[idx]
        f0 = f[idx]
        moves = [(pa + (s * eps[idx])[:, None] * v[idx],
                  Rpa + (s * eps[idx])[:, None] * rv[idx], 0)
                 for s in (1.0, -1.0)]
        if use_grad:
            n1 = pa * _on(_sq(pa), pi[idx])[:, None]
            n2 = (pa - ca) * _on(_sq(pa - ca), de[idx])[:, None]
            d, okd = _tangent_dir(2 * Rpa, [n1, n2])
            step = eta[idx][:, None] * d
            moves.append((pa + step, Rpa + np.einsum("bnm,bm->bn", R[idx],
                                                     step), 1))
        else:
            okd = np.zeros(idx.size, dtype=bool)
        cn = np.sqrt(_sq(ca))
        c_hat = ca / np.where(cn > 0, cn, 1.0)[:, None]
        Rc_hat = Rca / np.where(cn > 0, cn, 1.0)[:, None]
        x0 = (pi[idx] - de[idx] + cn ** 2) / (2 * np.where(cn > 0, cn, 1.0))
        rad2 = pi[idx] - x0 ** 2
        both = (cn > 0) & (rad2 > 0)
        best_f = f0.copy()
        best_p = pa.copy()
        best_Rp = Rpa.copy()
        best_kind = np.full(idx.size, -1)
        best_coef = np.zeros(idx.size)
        src_best = [f0.copy(), f0.copy()]
        for q, Rq, src in moves:
            dq = q - ca
            nd = np.sqrt(_sq(dq))
            coef_a = np.where(nd > 0, 1.0 - sq_de[idx] / np.where(
                nd > 0, nd, 1.0), 0.0)
            p1 = q + coef_a[:, None] * (ca - q)
            Rp1 = (1 - coef_a)[:, None] * Rq + coef_a[:, None] * Rca
            ok1 = _sq(p1) <= pi[idx] + tol_p[idx]
            nq = np.sqrt(_sq(q))
            coef_b = sq_pi[idx] / np.where(nq > 0, nq, 1.0)
            p2 = coef_b[:, None] * q
            Rp2 = coef_b[:, None] * Rq
            ok2 = _sq(p2 - ca) <= de[idx] + tol_d[idx]
            # onto the intersection of both spheres: Re(c^H p)/|c| = x0 and
            # a perpendicular radius fixed by the power share
            alpha = np.real(np.sum(c_hat.conj() * q, axis=1))
            qp = q - alpha[:, None] * c_hat
            Rqp = Rq - alpha[:, None] * Rc_hat
            nqp = np.sqrt(_sq(qp))
            coef_c = np.sqrt(np.where(both, rad2, 0.0)) / \
                np.where(nqp > 0, nqp, 1.0)
            p3 = x0[:, None] * c_hat + coef_c[:, None] * qp
            Rp3 = x0[:, None] * Rc_hat + coef_c[:, None] * Rqp
            ok3 = both & (nqp > 0)
            if src == 1:
                ok1 &= okd
                ok2 &= okd
                ok3 &= okd
            for kind, pc, Rpc, ok, coef in ((0, p1, Rp1, ok1, coef_a),
                                            (1, p2, Rp2, ok2, coef_b),
                                            (2, p3, Rp3, ok3, coef_c)):
                fc = np.real(np.sum(pc.conj() * Rpc, axis=1))
                src_best[src] = np.where(ok, np.minimum(src_best[src], fc),
                                         src_best[src])
                better = ok & (fc < best_f)
                best_f = np.where(better, fc, best_f)
                best_p[better] = pc[better]
                best_Rp[better] = Rpc[better]
                best_kind[better] = kind
                best_coef[better] = coef[better]
        accepted = best_kind >= 0
        gain = f0 - best_f
        ai = idx[accepted]
        p[ai] = best_p[accepted]
        Rp[ai] = best_Rp[accepted]
        f[ai] = best_f[accepted]
        thresh = params.stall_tol * np.maximum(np.abs(best_f), 1e-300)
        eps[idx[src_best[0] >= f0]] *= 0.5
        if use_grad:
            grew = (f0 - src_best[1]) >= thresh
            eta[idx] = np.where(grew, np.minimum(2 * eta[idx],
                                                 eta_cap[idx]),
                                0.5 * eta[idx])
        slow = idx[gain < thresh]
        eps[slow] *= 0.5
        eta[slow] *= 0.5
        done |= np.maximum(eps, eta) < params.min_step
        if it % 50 == 0:
            # resynchronize the carried R p against rounding drift
            Rp[idx] = np.einsum("bnm,bm->bn", R[idx], p[idx])
            f[idx] = np.real(np.sum(p[idx].conj() * Rp[idx], axis=1))
        viol = max(float(np.max(_sq(p) - pi, initial=0.0)),
                   float(np.max(_sq(p - C) - de, initial=0.0)), 0.0)
        records.append({
            "iteration": it,
            "j_value": -float(f.sum()),
            "n_active": {"psi": int(_on(_sq(p), pi).sum()),
                         "psi_prime": int(_on(_sq(p - C), de).sum())},
            "n_accepted": int(accepted.sum()),
            "n_halved": int(slow.size),
            "coefficient": {
                "a": float(np.mean(best_coef[best_kind == 0]))
                if np.any(best_kind == 0) else None,
                "b": float(np.mean(best_coef[best_kind == 1]))
                if np.any(best_kind == 1) else None,
                "ab": float(np.mean(best_coef[best_kind == 2]))
                if np.any(best_kind == 2) else None,
            },
            "worst_increase": float(np.max(-gain[accepted], initial=-0.0)),
            "max_violation": viol,
        })
    term[~done] = "max_iters"
    return p, records, term, it


def _mi_kkt(R, p, C, pi, de):
    angles = np.zeros(p.shape[0])
    for b in range(p.shape[0]):
        grad = 2 * _real(R[b] @ p[b])
        normals = []
        if abs(_sq(p[b]) - pi[b]) <= ACTIVE_TOL * max(1.0, pi[b]):
            normals.append(_real(p[b]))
        if abs(_sq(p[b] - C[b]) - de[b]) <= ACTIVE_TOL * max(1.0, de[b]):
            normals.append(_real(p[b] - C[b]))
        angles[b] = _kkt_angle(grad, normals)
    return angles


def find_initial(comm: CommChannel, scene: SensingScene, params: JcasParams,
                 constraint_kind: str = "mi", mu: float = 5.0,
                 q_star: np.ndarray | None = None) -> PrecoderSet:
    """Feasible starting precoders with exactly one active constraint.

    Starts from column-normalized zero forcing (MUI = 0) and moves along the
    segment toward the constraint centre (``P_MI`` for ``'mi'``, a rank-U
    factor of ``Q*`` for ``'crb'``) until the sensing constraint is met.
    """
    U = comm.n_users
    H = comm.h_matrices
    if constraint_kind == "mi":
        C = opt_mi_precoder(scene, comm, mu)[0].matrices
        P0, _ = mi_start_point(H, C, params.rho)
        return PrecoderSet(P0)
    if constraint_kind == "crb":
        if q_star is None:
            raise ValueError("q_star is required for the CRB constraint")
        P0, _, bad = crb_start_point(H, q_star, params.xi, params.psi2_mode, U)
        if bad.size:
            raise InfeasibleError(_infeasible_msg(bad, "xi", params.xi))
        return PrecoderSet(P0)
    raise ValueError("constraint_kind must be 'mi' or 'crb'")


def closed_form_jcas(comm: CommChannel, scene: SensingScene,
                     params: JcasParams, constraint_kind: str = "mi",
                     mu: float = 5.0,
                     q_star: np.ndarray | None = None) -> ClosedForm:
    """Per-subcarrier closed-form solutions ``p_u = f_u v_u`` where they
    exist (common scale ``f`` over the columns of one subcarrier)."""
    R = build_ru(comm, mu).matrices
    _, v = negative_eigenpairs(R)
    V = np.swapaxes(v, 1, 2)
    if constraint_kind == "mi":
        P_mi, _ = opt_mi_precoder(scene, comm, mu)
        C = P_mi.matrices
        return _closed_form_mi(_align_phase(V, C), C, params.rho)
    if constraint_kind == "crb":
        if q_star is None:
            raise ValueError("q_star is required for the CRB constraint")
        return _closed_form_crb(V, q_star, params.xi, params.psi2_mode)
    raise ValueError("constraint_kind must be 'mi' or 'crb'")


def _infeasible_msg(bad, name, value):
    return (f"no feasible start on subcarrier(s) {list(map(int, bad[:8]))}"
            f"{'...' if bad.size > 8 else ''}: the sensing constraint "
            f"{name}={value} cannot be met along the segment from zero "
            f"forcing to the sensing optimum")


def mi_pipeline(R: np.ndarray, C: np.ndarray, H: np.ndarray,
                params: JcasParams, use_closed_form: bool = True,
                kkt: bool = True) -> tuple[np.ndarray, IterationTrace]:
    """MI-constrained solve on raw arrays.

    ``R`` ``(K, U, N, N)``, centres ``C`` and channels ``H`` ``(K, N, U)``.
    Subcarriers whose unit-power eigenvector solution satisfies
    ``psi' <= rho`` take it directly.  The others are iterated from two
    starts, the zero-forcing point pulled onto the ``psi'`` sphere and (when
    it exists) the scaled eigenvector solution on that sphere; the better
    result per subcarrier is kept.
    """
    K, U, N, _ = R.shape
    r, v = negative_eigenpairs(R)
    V = _align_phase(np.swapaxes(v, 1, 2), C)
    trace = IterationTrace(algorithm="alg1")
    cf = _closed_form_mi(V, C, params.rho) if use_closed_form else \
        ClosedForm(np.zeros_like(V), np.zeros(K, dtype=int))
    out = cf.matrices.copy()
    start = np.zeros(K, dtype=int)
    col_term = np.full((K, U), "closed_form", dtype=object)
    angles = np.zeros((K, U))
    it_k = np.flatnonzero(cf.branch != 1)
    trace.iterations = 0
    if it_k.size:
        Pz, case = mi_start_point(H[it_k], C[it_k], params.rho)
        alt = it_k[cf.branch[it_k] == 2]
        ks = np.concatenate([it_k, alt])
        P0 = np.concatenate([Pz, cf.matrices[alt]])
        cases = np.concatenate([case, np.ones(alt.size, dtype=int)])
        pi, de = _mi_budgets(P0, C[ks], params.rho, U)
        cols = lambda x: np.swapaxes(x, 1, 2).reshape(-1, N)
        Rb = R[ks].reshape(-1, N, N)
        Cb, pib, deb = cols(C[ks]), pi.reshape(-1), de.reshape(-1)
        pb, recs, term, iters = solve_mi_constrained(
            Rb, r[ks].reshape(-1), v[ks].reshape(-1, N), Cb, cols(P0),
            pib, deb, params)
        fk = np.real(np.einsum("bn,bnm,bm->b", pb.conj(), Rb, pb)).reshape(
            ks.size, U).sum(axis=1)
        sel = _pick_best(ks, fk)
        Pk = np.swapaxes(pb.reshape(ks.size, U, N), 1, 2)
        out[ks[sel]] = Pk[sel]
        col_term[ks[sel]] = term.reshape(ks.size, U)[sel]
        start[ks[sel]] = cases[sel]
        trace.records = recs
        trace.iterations = iters
        if kkt:
            angles[ks[sel]] = _mi_kkt(
                Rb.reshape(ks.size, U, N, N)[sel].reshape(-1, N, N),
                pb.reshape(ks.size, U, N)[sel].reshape(-1, N),
                Cb.reshape(ks.size, U, N)[sel].reshape(-1, N),
                pib.reshape(ks.size, U)[sel].reshape(-1),
                deb.reshape(ks.size, U)[sel].reshape(-1)).reshape(-1, U)
    trace.start = start
    trace.column_termination = col_term
    trace.kkt_angle = angles
    trace.termination = _overall(col_term)
    return _fit_power(out, U), trace


def _pick_best(ks: np.ndarray, fk: np.ndarray) -> np.ndarray:
    """Row of the smallest ``fk`` for each distinct subcarrier in ``ks``."""
    order = np.lexsort((fk, ks))
    first = np.ones(order.size, dtype=bool)
    first[1:] = ks[order][1:] != ks[order][:-1]
    return order[first]


def algorithm1(comm: CommChannel, scene: SensingScene, params: JcasParams,
               mu: float = 5.0, use_closed_form: bool = True,
               kkt: bool = True) -> tuple[PrecoderSet, IterationTrace]:
    """MI-constrained JCAS precoders (see :func:`mi_pipeline`)."""
    R = build_ru(comm, mu).matrices
    P_mi, _ = opt_mi_precoder(scene, comm, mu)
    P, trace = mi_pipeline(R, P_mi.matrices, comm.h_matrices, params,
                           use_closed_form, kkt)
    return PrecoderSet(P), trace


def _overall(col_term) -> str:
    vals = set(np.asarray(col_term).ravel().tolist())
    for key in ("max_iters", "stalled", "closed_form"):
        if key in vals:
            return key
    return "stalled"


def _fit_power(P: np.ndarray, U: int) -> np.ndarray:
    """Remove rounding excess above ``||P||_F^2 = U``."""
    pw = np.sum(np.abs(P) ** 2, axis=(1, 2))
    s = np.where(pw > U, np.sqrt(U / np.where(pw > 0, pw, 1.0)), 1.0)
    return P * s[:, None, None]


def _adjugate(M: np.ndarray) -> np.ndarray:
    """Adjugate of real square matrices via the SVD (valid when singular)."""
    U_, s, Vt = np.linalg.svd(M)
    n = s.shape[-1]
    lead = np.concatenate([np.ones(s.shape[:-1] + (1,)),
                           np.cumprod(s, axis=-1)[..., :-1]], axis=-1)
    trail = np.concatenate([np.cumprod(s[..., ::-1], axis=-1)[..., -2::-1],
                            np.ones(s.shape[:-1] + (1,))], axis=-1) \
        if n > 1 else np.ones_like(s)
    sign = np.linalg.det(U_) * np.linalg.det(Vt)
    return sign[..., None, None] * np.einsum(
        "...ij,...i,...ki->...jk", Vt, lead * trail, U_)


def _psi2_grad(M: np.ndarray, p: np.ndarray, mode: str,
               real: bool = False) -> np.ndarray:
    """Complex gradient ``g`` of ``psi''`` with respect to one column ``p``
    (directional derivative ``Re(g^H dp)``), given ``M = Re D + Im D``.
    With ``real`` only the real part (moves of a real ``p``) is kept."""
    if mode == "frobenius":
        n = np.linalg.norm(M, axis=(-2, -1))
        GM = M / np.where(n > 0, n, 1.0)[..., None, None]
    else:
        d = np.linalg.det(M)
        GM = np.sign(d)[..., None, None] * np.swapaxes(_adjugate(M), -2, -1)
    W = (1 - 1j) * GM
    g = np.einsum("...nm,...m->...n", W.conj(), p) + \
        np.einsum("...mn,...m->...n", W, p)
    return g.real.astype(complex) if real else g


# ------------------------------------------------------ CRB-constrained

def _closed_form_crb(V: np.ndarray, Q: np.ndarray, xi: float,
                     mode: str) -> ClosedForm:
    K, N, U = V.shape
    out = np.zeros_like(V)
    branch = np.zeros(K, dtype=int)
    for k in range(K):
        def g(gam):
            return _psi2_from_m(_deviation(np.sqrt(gam) * V[k], Q[k]),
                                mode) - xi
        if g(1.0) <= FEAS_TOL:
            out[k] = V[k]
            branch[k] = 1
            continue
        gam = _largest_root(g, 0.0, 1.0)
        if gam is not None and gam > 0:
            out[k] = np.sqrt(gam) * V[k]
            branch[k] = 2
    return ClosedForm(matrices=out, branch=branch)


def _procrustes(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Unitary ``G`` minimizing ``||A G - B||_F``."""
    u, _, vh = np.linalg.svd(A.conj().T @ B)
    return u @ vh


def crb_start_point(H, Q, xi, mode, U):
    """Start points for the CRB-constrained solver.

    Returns ``(P0, start_case, infeasible_subcarriers)``.
    """
    K = H.shape[0]
    Z = _zf_columns(H)
    Pc = covariance_factor(Q, U)
    P0 = Z.copy()
    start = np.full(K, 2)
    bad = []
    for k in range(K):
        if _psi2_from_m(_deviation(Z[k], Q[k]), mode) <= xi:
            continue
        target = Pc[k] @ _procrustes(Pc[k], Z[k])

        def g(t, k=k, target=target):
            return _psi2_from_m(_deviation((1 - t) * Z[k] + t * target,
                                           Q[k]), mode) - xi
        if g(1.0) > FEAS_TOL:
            bad.append(k)
            continue
        t = _bisect(g, 0.0, 1.0)
        P0[k] = (1 - t) * Z[k] + t * target
        start[k] = 1
    return P0, start, np.array(bad, dtype=int)


def _real_roots(c: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Real roots in ``[0, hi]`` of the polynomials with ascending
    coefficients ``c[B, d+1]``; ``nan`` where absent (shape ``(B, d)``)."""
    B, d1 = c.shape
    d = d1 - 1
    scale = np.maximum(np.abs(c).max(axis=1), 1e-300)
    lead = c[:, -1]
    # a vanishing leading coefficient becomes a tiny one: the spurious
    # root it creates is huge and falls outside [0, hi]
    tiny = np.abs(lead) < 1e-13 * scale
    lead = np.where(tiny, 1e-13 * scale, lead)
    comp = np.zeros((B, d, d))
    comp[:, 0, :] = -c[:, -2::-1] / lead[:, None]
    if d > 1:
        comp[:, np.arange(1, d), np.arange(d - 1)] = 1.0
    z = np.linalg.eigvals(comp)
    x = z.real
    powers = np.arange(d1)
    for _ in range(3):
        # Newton polish on the original polynomial
        xp = x[..., None] ** powers
        val = np.einsum("bri,bi->br", xp, c)
        der = np.einsum("bri,bi->br", xp[..., :-1],
                        c[:, 1:] * powers[1:])
        x = x - np.where(der != 0, val / np.where(der != 0, der, 1.0), 0.0)
    val = np.einsum("bri,bi->br", x[..., None] ** powers, c)
    good = (np.abs(z.imag) <= 1e-6 * np.maximum(1.0, np.abs(z.real))) & \
        (np.abs(val) <= 1e-9 * scale[:, None] * np.maximum(
            1.0, np.abs(x)) ** d) & (x >= 0) & (x <= hi[:, None] * (1 + 1e-12))
    return np.where(good, x, np.nan)


def _all_scale_roots(Mb, S, gmax, xi, mode, degree=2):
    """Every scale ``gamma`` in ``[0, gmax]`` with ``psi''(Mb + gamma S) =
    xi`` (``nan`` padded, shape ``(B, r)``).

    The squared Frobenius norm is quadratic in ``gamma``; the determinant
    is a polynomial of degree ``rank(S) <= degree``, recovered exactly from
    ``degree + 1`` evaluations.
    """
    if mode == "frobenius":
        c = np.stack([np.sum(Mb * Mb, axis=(1, 2)) - xi ** 2,
                      2 * np.sum(Mb * S, axis=(1, 2)),
                      np.sum(S * S, axis=(1, 2))], axis=1)
        return _real_roots(c, gmax)
    n = Mb.shape[-1]
    deg = min(degree, n)
    g = np.arange(deg + 1, dtype=float)
    dets = np.stack([np.linalg.det(Mb + gi * S) for gi in g], axis=1)
    c = np.linalg.solve(np.vander(g, increasing=True), dets.T).T
    return np.concatenate([
        _real_roots(c - np.eye(deg + 1)[0] * t, gmax) for t in (xi, -xi)],
        axis=1)


def _scale_roots(Mb, S, gmax, xi, mode, degree=2):
    """Root of :func:`_all_scale_roots` closest to 1 (``nan`` where
    none)."""
    roots = _all_scale_roots(Mb, S, gmax, xi, mode, degree)
    dist = np.where(np.isfinite(roots), np.abs(roots - 1), np.inf)
    pick = np.argmin(dist, axis=1)
    best = roots[np.arange(roots.shape[0]), pick]
    return np.where(np.isfinite(dist.min(axis=1)), best, np.nan)


def _radial_starts(bases, Q, xi, mode, power):
    """Feasible scalings ``sqrt(gamma) B`` of each base ``B`` (``(K, N,
    U)``): every root of ``psi'' = xi`` inside the power ball, plus the
    power-sphere point when it satisfies ``psi''``.  Returns ``(ks, P0)``.
    """
    Qm = Q.real + Q.imag
    ks, out = [], []
    for B in bases:
        K, N, U = B.shape
        S = _outer_sum(B)
        nb = np.sum(np.abs(B) ** 2, axis=(1, 2))
        gmax = power / np.where(nb > 0, nb, 1.0)
        roots = _all_scale_roots(-Qm, S, gmax, xi, mode, degree=2 * U)
        ok4 = (nb > 0) & (_psi2_from_m(gmax[:, None, None] * S - Qm, mode)
                          <= xi + FEAS_TOL * max(1.0, xi))
        cand = np.concatenate([roots, np.where(ok4, gmax, np.nan)[:, None]],
                              axis=1)
        for k, j in zip(*np.nonzero(np.isfinite(cand) & (cand > 0))):
            Pk = np.sqrt(cand[k, j]) * B[k]
            if _psi2_from_m(_deviation(Pk, Q[k]), mode) <= \
                    xi + FEAS_TOL * max(1.0, xi):
                ks.append(k)
                out.append(Pk)
    if not ks:
        return np.zeros(0, dtype=int), np.zeros((0,) + bases[0].shape[1:],
                                                dtype=complex)
    return np.array(ks), np.stack(out)


def _retract_both(P, Qm, power, xi, mode, mask, real=False, n_iter=12):
    """Gauss-Newton projection of ``P`` (``(B, N, U)``) onto
    ``{||P||^2 = power, psi'' = xi}``, moving only entries where ``mask``
    is set.  Each step is the minimum-norm correction of the linearized
    residuals.  Returns ``(P, M, ok)`` with ``ok`` where both residuals
    end below the feasibility tolerance."""
    P = P.copy()
    B = P.shape[0]
    flat = lambda x: x.reshape(B, -1)
    tol = 1e-3 * FEAS_TOL * max(1.0, power, xi)
    for _ in range(n_iter):
        M = _outer_sum(P) - Qm
        res = np.stack([np.sum(np.abs(P) ** 2, axis=(1, 2)) - power,
                        _psi2_from_m(M, mode) - xi], axis=1)
        if np.abs(res).max() <= tol:
            break
        gX = np.stack([_psi2_grad(M, P[:, :, u], mode, real)
                       for u in range(P.shape[2])], axis=2)
        Nm = np.stack([flat(2 * P * mask), flat(gX * mask)], axis=1)
        G = np.real(np.einsum("bin,bjn->bij", Nm.conj(), Nm))
        lam = _gram_solve(G, res)
        P = P - np.einsum("bi,bin->bn", lam, Nm).reshape(P.shape)
    M = _outer_sum(P) - Qm
    pw = np.sum(np.abs(P) ** 2, axis=(1, 2))
    psi2 = _psi2_from_m(M, mode)
    ok = (np.abs(pw - power) <= FEAS_TOL * max(1.0, power)) & \
        (np.abs(psi2 - xi) <= FEAS_TOL * max(1.0, xi))
    # land inside: trim power rounding, never above the bound
    P = P * np.minimum(1.0, np.sqrt(power / np.where(pw > 0, pw, 1.0)))[
        :, None, None]
    M = _outer_sum(P) - Qm
    ok &= _psi2_from_m(M, mode) <= xi + FEAS_TOL * max(1.0, xi)
    return P, M, ok


class _Best:
    """Running best candidate per batch row."""

    def __init__(self, f0, p0, M0):
        self.f = f0.copy()
        self.p = p0.copy()
        self.M = M0.copy()
        self.kind = np.full(f0.shape[0], -1)
        self.coef = np.zeros(f0.shape[0])
        self.src = [f0.copy(), f0.copy()]

    def offer(self, src, kind, fc, pc, Mc, ok, coef):
        self.src[src] = np.where(ok, np.minimum(self.src[src], fc),
                                 self.src[src])
        better = ok & (fc < self.f)
        self.f = np.where(better, fc, self.f)
        self.p[better] = pc[better]
        self.M[better] = Mc[better]
        self.kind[better] = kind
        self.coef[better] = coef[better]


def solve_crb_constrained(R, r, v, Q, P0, params: JcasParams,
                          power: float | None = None,
                          groups: np.ndarray | None = None):
    """Iterative solver for the CRB-constrained problem.

    ``R`` ``(K, U, N, N)``, ``r`` ``(K, U)``, ``v`` ``(K, U, N)``, ``Q``
    ``(K, N, N)``, ``P0`` ``(K, N, U)`` feasible.  Subcarriers are processed
    in parallel.

    One sweep moves the columns in a fixed order by ``+-eps v_u``, each
    against the current state of the others; its power share is whatever
    the other columns leave of ``U``.  A candidate column is rescaled by
    ``c`` onto ``psi'' = xi`` or by ``d`` onto the power share; when both
    constraints are active a third candidate follows the power sphere back
    toward the current point until ``psi''`` is met.  Unless
    ``params.directions`` is ``'eigen'`` the sweep ends with the same three
    retractions applied to a joint tangent descent step ``P + eta D``,
    which keeps the coupled columns from jamming.  A subcarrier also stops
    when ``-J`` improves by less than ``params.window_tol`` (relative) over
    ``params.stall_window`` sweeps.  Rows sharing a ``groups`` label are
    alternative starts of one problem; a row stops once its rate of progress
    can no longer close the gap to the best row of its group.

    Returns ``(P, records, termination, iterations)``.
    """
    P = np.array(P0, dtype=complex)
    K, N, U = P.shape
    power = float(U if power is None else power)
    xi, mode = params.xi, params.psi2_mode
    use_grad = params.directions != "eigen"
    real = params.real_only
    Qm = Q.real + Q.imag
    M = _deviation(P, Q)
    pcol = np.swapaxes(P, 1, 2)
    f = np.real(np.einsum("kun,kunm,kum->ku", pcol.conj(), R, pcol))
    eps = np.full((K, U), float(params.epsilon))
    eta = np.full(K, float(params.epsilon) if use_grad else 0.0)
    done = np.zeros(K, dtype=bool)
    term = np.full(K, "stalled", dtype=object)
    tol_x = FEAS_TOL * max(1.0, xi)
    tot = np.full(K, power)
    mark = f.sum(axis=1)
    records = []
    it = 0
    while not done.all() and it < params.max_iters:
        it += 1
        n_acc = 0
        worst = -0.0
        coef = {"c": [], "d": [], "cd": []}
        f_start = f.sum(axis=1)
        for u in range(U):
            idx = np.flatnonzero(~done & (eps[:, u] >= params.min_step))
            if idx.size == 0:
                continue
            p = P[idx, :, u]
            Ru = R[idx, u]
            f0 = f[idx, u]
            # rounding can push the share of a near-empty column below 0
            piu = np.maximum(power - (np.sum(np.abs(P[idx]) ** 2,
                                             axis=(1, 2)) - _sq(p)), 0.0)
            Mb = M[idx] - _outer_re_im(p)
            reach = eps[idx, u] * np.sqrt(_sq(p))
            gxn = np.sqrt(_sq(_psi2_grad(M[idx], p, mode, real)))
            both = _near(_sq(p), piu, 2 * reach) & \
                _near(_psi2_from_m(M[idx], mode), xi, eps[idx, u] * gxn)
            best = _Best(f0, p, M[idx])
            for s in (1.0, -1.0):
                q = p + (s * eps[idx, u])[:, None] * v[idx, u]
                S = _outer_re_im(q)
                nq2 = _sq(q)
                fq = np.real(np.einsum("bn,bnm,bm->b", q.conj(), Ru, q))
                gmax = piu / np.where(nq2 > 0, nq2, 1.0)
                M4 = Mb + gmax[:, None, None] * S
                ok4 = (nq2 > 0) & (_psi2_from_m(M4, mode) <= xi + tol_x)
                g3 = _scale_roots(Mb, S, gmax, xi, mode, degree=2)
                g3s = np.where(np.isfinite(g3), g3, 0.0)
                M3 = Mb + g3s[:, None, None] * S
                ok3 = np.isfinite(g3) & _on(_psi2_from_m(M3, mode), xi)
                q4 = np.sqrt(gmax)[:, None] * q
                best.offer(0, 0, g3s * fq, np.sqrt(g3s)[:, None] * q, M3,
                           ok3, np.sqrt(g3s))
                best.offer(0, 1, gmax * fq, q4, M4, ok4, np.sqrt(gmax))
                rows = np.flatnonzero(both & ~ok4)
                if rows.size:
                    Pq = P[idx[rows]].copy()
                    Pq[:, :, u] = q4[rows]
                    mask = np.zeros((1, 1, U))
                    mask[..., u] = 1.0
                    Py, My, okc = _retract_both(Pq, Qm[idx[rows]], power,
                                                xi, mode, mask, real)
                    y = Py[:, :, u]
                    fy = np.real(np.einsum("bn,bnm,bm->b", y.conj(),
                                           Ru[rows], y))
                    full = lambda a, fill: _scatter(a, rows, idx.size, fill)
                    best.offer(0, 2, full(fy, np.inf), full(y, 0),
                               full(My, 0), full(okc, False),
                               full(np.sqrt(_sq(y) / _sq(q4[rows])), 0.0))
            accepted = best.kind >= 0
            gain = f0 - best.f
            ai = idx[accepted]
            P[ai, :, u] = best.p[accepted]
            M[ai] = best.M[accepted]
            f[ai, u] = best.f[accepted]
            thresh = params.stall_tol * np.maximum(np.abs(best.f), 1e-300)
            eps[idx[(best.src[0] >= f0) | (gain < thresh)], u] *= 0.5
            n_acc += int(accepted.sum())
            worst = max(worst, float(np.max(-gain[accepted], initial=-0.0)))
            for key, kind in (("c", 0), ("d", 1), ("cd", 2)):
                coef[key] += best.coef[best.kind == kind].tolist()
        if use_grad:
            idx = np.flatnonzero(~done & (eta >= params.min_step))
            if idx.size:
                a, w = _joint_step(R[idx], Qm[idx], P[idx], M[idx],
                                   f[idx], eta[idx], power, xi, mode,
                                   real)
                ok_any, acc, fnew, Pn, Mn, fcols, kinds, kc = a
                ai = idx[acc]
                P[ai], M[ai], f[ai] = Pn[acc], Mn[acc], fcols[acc]
                f0 = w
                thresh = params.stall_tol * np.maximum(np.abs(fnew), 1e-300)
                grew = (f0 - fnew) >= thresh
                eta[idx] = np.where(grew & ok_any,
                                    np.minimum(2 * eta[idx],
                                               2 * np.sqrt(power)),
                                    0.5 * eta[idx])
                n_acc += int(acc.sum())
                worst = max(worst, float(np.max((fnew - f0)[acc],
                                                initial=-0.0)))
                for key, kind in (("c", 0), ("d", 1), ("cd", 2)):
                    coef[key] += kc[acc & (kinds == kind)].tolist()
        sweep_gain = f_start - f.sum(axis=1)
        slow = sweep_gain < params.stall_tol * np.maximum(
            np.abs(f.sum(axis=1)), 1e-300)
        eps[slow] *= 0.5
        eta[slow] *= 0.5
        done |= np.maximum(eps.max(axis=1), eta) < params.min_step
        if it % params.stall_window == 0:
            # slow creep: too little progress over the whole window
            fs = f.sum(axis=1)
            rate = mark - fs
            done |= rate < params.window_tol * np.maximum(np.abs(fs), 1e-300)
            if groups is not None:
                best_g = np.full(groups.max() + 1, np.inf)
                np.minimum.at(best_g, groups, fs)
                left = (params.max_iters - it) / params.stall_window
                lost = fs - best_g[groups] > rate * left
                term[lost & ~done] = "dominated"
                done |= lost
            mark = fs
        psi2 = _psi2_from_m(M, mode)
        pw = np.sum(np.abs(P) ** 2, axis=(1, 2))
        records.append({
            "iteration": it,
            "j_value": -float(f.sum()),
            "n_active": {"psi": int(_on(pw, tot).sum()),
                         "psi_dprime": int(_on(psi2, xi).sum())},
            "n_accepted": n_acc,
            "n_halved": int(slow.sum()),
            "coefficient": {key: (float(np.mean(val)) if val else None)
                            for key, val in coef.items()},
            "worst_increase": worst,
            "max_violation": max(float(np.max(pw - power, initial=0.0)),
                                 float(np.max(psi2 - xi, initial=0.0)), 0.0),
        })
    term[~done] = "max_iters"
    return P, records, term, it


def _scatter(a, rows, n, fill):
    out = np.full((n,) + a.shape[1:], fill, dtype=a.dtype)
    out[rows] = a
    return out


def _joint_grads(R, Qm, P, M, mode, real=False):
    """Gradients of ``sum_u p_u^H R_u p_u`` and of ``psi''`` w.r.t. ``P``."""
    gJ = 2 * np.einsum("kunm,kmu->knu", R, P)
    if real:
        gJ = gJ.real.astype(complex)
    gX = np.stack([_psi2_grad(M, P[:, :, u], mode, real)
                   for u in range(P.shape[2])], axis=2)
    return gJ, gX


def _joint_step(R, Qm, P, M, f, eta, power, xi, mode, real=False):
    """One tangent descent step on all columns of each subcarrier.

    Returns ``((ok_any, accepted, f_new, P_new, M_new, f_cols, kind,
    coef), f_old)`` with ``f_new`` the best candidate objective (``f_old``
    where none is feasible).
    """
    B, N, U = P.shape
    f_old = f.sum(axis=1)
    pw = np.sum(np.abs(P) ** 2, axis=(1, 2))
    gJ, gX = _joint_grads(R, Qm, P, M, mode, real)
    # constraints within reach of one step count as active
    on_pw = _near(pw, power, 2 * eta * np.sqrt(pw))
    on_x = _near(_psi2_from_m(M, mode), xi,
                 eta * np.sqrt(np.sum(np.abs(gX) ** 2, axis=(1, 2))))
    flat = lambda x: x.reshape(B, -1)
    d, okd = _tangent_dir(flat(gJ), [flat(P) * on_pw[:, None],
                                     flat(gX) * on_x[:, None]])
    q = P + eta[:, None, None] * d.reshape(B, N, U)
    S = _outer_sum(q)
    nq2 = np.sum(np.abs(q) ** 2, axis=(1, 2))
    qcol = np.swapaxes(q, 1, 2)
    fqc = np.real(np.einsum("kun,kunm,kum->ku", qcol.conj(), R, qcol))
    gmax = power / np.where(nq2 > 0, nq2, 1.0)
    M4 = gmax[:, None, None] * S - Qm
    ok4 = okd & (nq2 > 0) & (_psi2_from_m(M4, mode) <= xi + FEAS_TOL *
                             max(1.0, xi))
    g3 = _scale_roots(-Qm, S, gmax, xi, mode, degree=2 * U)
    g3s = np.where(np.isfinite(g3), g3, 0.0)
    M3 = g3s[:, None, None] * S - Qm
    ok3 = okd & np.isfinite(g3) & _on(_psi2_from_m(M3, mode), xi)
    best = _Best(f_old, P, M)
    fcols = f.copy()
    best_cols = f.copy()

    def offer(kind, fc_cols, pc, Mc, ok, coef):
        fc = fc_cols.sum(axis=1)
        better = ok & (fc < best.f)
        best.offer(1, kind, fc, pc, Mc, ok, coef)
        best_cols[better] = fc_cols[better]
    q4 = np.sqrt(gmax)[:, None, None] * q
    offer(0, g3s[:, None] * fqc, np.sqrt(g3s)[:, None, None] * q, M3, ok3,
          np.sqrt(g3s))
    offer(1, gmax[:, None] * fqc, q4, M4, ok4, np.sqrt(gmax))
    rows = np.flatnonzero(okd & on_pw & on_x & ~ok4)
    if rows.size:
        y, My, okc = _retract_both(q4[rows], Qm[rows], power, xi, mode,
                                   np.ones((1, 1, U)), real)
        ycol = np.swapaxes(y, 1, 2)
        fy = np.real(np.einsum("kun,kunm,kum->ku", ycol.conj(), R[rows],
                               ycol))
        offer(2, _scatter(fy, rows, B, np.inf), _scatter(y, rows, B, 0),
              _scatter(My, rows, B, 0), _scatter(okc, rows, B, False),
              _scatter(np.ones(rows.size), rows, B, 0.0))
    acc = best.kind >= 0
    ok_any = best.src[1] < f_old
    return (ok_any, acc, best.f, best.p, best.M, best_cols, best.kind,
            best.coef), f_old


def _outer_sum(P):
    """``Re(P P^H) + Im(P P^H)`` per subcarrier."""
    O = np.einsum("knu,kmu->knm", P, P.conj())
    return O.real + O.imag


def _crb_kkt(R, P, Q, power, xi, mode, real=False, h=1e-7):
    """Joint stationarity angle per subcarrier.  The normal of ``psi''`` is
    a central-difference gradient, independent of the analytic one used by
    the solver.  With ``real`` only real perturbations are considered."""
    K, N, U = P.shape
    angles = np.zeros(K)
    for k in range(K):
        Pk = P[k]
        grad = 2 * np.concatenate([np.einsum("unm,mu->nu", R[k],
                                             Pk).real.ravel(),
                                   np.einsum("unm,mu->nu", R[k],
                                             Pk).imag.ravel()])
        normals = []
        if _on(np.sum(np.abs(Pk) ** 2), power):
            normals.append(np.concatenate([Pk.real.ravel(),
                                           Pk.imag.ravel()]))
        if _on(_psi2_from_m(_deviation(Pk, Q[k]), mode), xi):
            g = np.zeros(2 * N * U)
            for i in range(2 * N * U):
                E = np.zeros(N * U, dtype=complex)
                E[i % (N * U)] = h if i < N * U else 1j * h
                E = E.reshape(N, U)
                g[i] = (_psi2_from_m(_deviation(Pk + E, Q[k]), mode)
                        - _psi2_from_m(_deviation(Pk - E, Q[k]), mode)) \
                    / (2 * h)
            normals.append(g)
        keep = slice(0, N * U) if real else slice(None)
        angles[k] = _kkt_angle(grad[keep], [n[keep] for n in normals])
    return angles


def crb_pipeline(R: np.ndarray, Q: np.ndarray, H: np.ndarray,
                 params: JcasParams, use_closed_form: bool = True,
                 kkt: bool = True) -> tuple[np.ndarray, IterationTrace]:
    """CRB-constrained solve on raw arrays (``Q`` is ``Q*`` per subcarrier).

    Same structure as :func:`mi_pipeline`: closed form where the unit
    eigenvectors meet ``psi'' <= xi``, otherwise the better of the runs
    from the zero-forcing start (blended toward a factor of ``Q*`` when
    needed) and from the scaled eigenvector solution.
    """
    K, U, N, _ = R.shape
    r, v = negative_eigenpairs(R)
    V = np.swapaxes(v, 1, 2)
    trace = IterationTrace(algorithm="alg2")
    cf = _closed_form_crb(V, Q, params.xi, params.psi2_mode) \
        if use_closed_form else ClosedForm(np.zeros_like(V),
                                           np.zeros(K, dtype=int))
    out = cf.matrices.copy()
    start = np.zeros(K, dtype=int)
    col_term = np.full((K, U), "closed_form", dtype=object)
    angles = np.zeros((K, U))
    it_k = np.flatnonzero(cf.branch != 1)
    trace.iterations = 0
    if it_k.size:
        Pz, case, bad = crb_start_point(H[it_k], Q[it_k], params.xi,
                                        params.psi2_mode, U)
        good = np.ones(it_k.size, dtype=bool)
        good[bad] = False
        alt = it_k[cf.branch[it_k] == 2]
        ks, P0, cases = [it_k[good], alt], [Pz[good], cf.matrices[alt]], \
            [case[good], np.ones(alt.size, dtype=int)]
        if params.multistart:
            Z = _zf_columns(H[it_k])
            Pc = covariance_factor(Q[it_k], U)
            Pc = np.stack([Pc[i] @ _procrustes(Pc[i], Z[i])
                           for i in range(it_k.size)])
            rk, rP = _radial_starts([V[it_k], Pc, Z], Q[it_k], params.xi,
                                    params.psi2_mode, float(U))
            ks.append(it_k[rk])
            P0.append(rP)
            cases.append(np.full(rk.size, 3))
        ks, P0, cases = (np.concatenate(x) for x in (ks, P0, cases))
        missing = np.setdiff1d(it_k, ks)
        if missing.size:
            raise InfeasibleError(_infeasible_msg(missing, "xi", params.xi))
        Pk, recs, term, iters = solve_crb_constrained(
            R[ks], r[ks], v[ks], Q[ks], P0, params, groups=ks)
        pc = np.swapaxes(Pk, 1, 2)
        fk = np.real(np.einsum("kun,kunm,kum->k", pc.conj(), R[ks], pc))
        sel = _pick_best(ks, fk)
        out[ks[sel]] = Pk[sel]
        col_term[ks[sel]] = term[sel, None]
        start[ks[sel]] = cases[sel]
        trace.records = recs
        trace.iterations = iters
        if kkt:
            angles[ks[sel]] = _crb_kkt(R[ks[sel]], Pk[sel], Q[ks[sel]],
                                       float(U), params.xi,
                                       params.psi2_mode,
                                       params.real_only)[:, None]
    trace.start = start
    trace.column_termination = col_term
    trace.kkt_angle = angles
    trace.termination = _overall(col_term)
    return _fit_power(out, U), trace


def algorithm2(comm: CommChannel, scene: SensingScene, params: JcasParams,
               mu: float = 5.0, config: ScenarioConfig | None = None,
               q_star: np.ndarray | None = None, use_closed_form: bool = True,
               kkt: bool = True) -> tuple[PrecoderSet, IterationTrace]:
    """CRB-constrained JCAS precoders (see :func:`crb_pipeline`).

    ``q_star`` defaults to the per-subcarrier CRB covariance from
    :func:`~jcaswave.individual.opt_crb_covariance` (needs ``config``).
    """
    if q_star is None:
        if config is None:
            raise ValueError("pass either q_star or config")
        q_star = opt_crb_covariance(scene, config).q_matrices
    R = build_ru(comm, mu).matrices
    P, trace = crb_pipeline(R, q_star, comm.h_matrices, params,
                            use_closed_form, kkt)
    return PrecoderSet(P), trace
