"""Riemannian energy, length and minimal geodesics for state-dependent metrics.

A path is stored as ``N + 1`` nodes on the uniform grid ``s_k = k / N``.
Both functionals use the composite midpoint rule with the central-difference
velocity ``N (x_{k+1} - x_k)`` on each segment:

    energy = N * sum_k d_k' M(m_k) d_k,    length = sum_k sqrt(d_k' M(m_k) d_k)

with ``d_k = x_{k+1} - x_k`` and ``m_k`` the segment midpoint. By
Cauchy-Schwarz the discrete energy is never below the squared discrete length.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .errors import InputError
from .lmi import symmetrize

log = logging.getLogger(__name__)

FD_STEP = 1e-6


class MetricField:
    """A symmetric positive definite matrix field ``x -> M(x)``.

    Parameters
    ----------
    fn
        Evaluator for a single state.
    batch
        Optional evaluator for an array of states ``(k, n) -> (k, n, n)``.
    alpha1, alpha2
        Claimed uniform bounds ``alpha1 I <= M(x) <= alpha2 I``, used by
        :meth:`check_bounds`.
    """

    def __init__(self, fn: Callable | None = None, batch: Callable | None = None, alpha1: float | None = None,
                 alpha2: float | None = None, constant=None):
        if constant is not None:
            C = symmetrize(np.atleast_2d(np.asarray(constant, dtype=float)))
            fn = lambda x: C  # noqa: E731
            batch = lambda X: np.broadcast_to(C, (len(X),) + C.shape)  # noqa: E731
            self.constant = C
        else:
            self.constant = None
        if fn is None and batch is None:
            raise InputError("a metric needs an evaluator")
        self._fn = fn
        self._batch = batch
        self.alpha1 = alpha1
        self.alpha2 = alpha2

    @classmethod
    def from_certificate(cls, cert, sys) -> "MetricField":
        """``M = W^{-1}`` for a CCM or robust certificate."""
        W = cert.W
        m = sys.m
        # bounds hold on the verification grid only, so they are not enforced here
        if W.is_constant():
            return cls(constant=np.linalg.inv(W(np.zeros(len(W.variables)))))

        def batch(X):
            X = np.atleast_2d(X)
            Z = np.hstack([X, np.zeros((len(X), m))])
            return np.linalg.inv(W(Z))

        return cls(batch=batch)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self._fn is not None:
            return np.atleast_2d(self._fn(x))
        return self._batch(x[None, :])[0]

    def many(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self._batch is not None:
            return np.asarray(self._batch(X))
        return np.array([np.atleast_2d(self._fn(x)) for x in X])

    def check_bounds(self, points) -> tuple[float, float]:
        """Smallest and largest eigenvalue over ``points``; raises if a claimed bound fails."""
        ev = np.linalg.eigvalsh(symmetrize(self.many(points)))
        lo, hi = float(ev[:, 0].min()), float(ev[:, -1].max())
        if lo <= 0:
            raise InputError("metric is not positive definite at a sampled state")
        if self.alpha1 is not None and lo < self.alpha1 * (1 - 1e-9):
            raise InputError(f"metric eigenvalue {lo:.3g} below the bound {self.alpha1:.3g}")
        if self.alpha2 is not None and hi > self.alpha2 * (1 + 1e-9):
            raise InputError(f"metric eigenvalue {hi:.3g} above the bound {self.alpha2:.3g}")
        return lo, hi


@dataclass
class Path:
    """Nodes ``x(s_k)`` on the uniform grid ``s_k = k / N``."""

    nodes: np.ndarray

    def __post_init__(self):
        self.nodes = np.atleast_2d(np.asarray(self.nodes, dtype=float))
        if len(self.nodes) < 3:
            raise InputError("a path needs N >= 2 segments")

    @classmethod
    def straight(cls, a, b, N: int) -> "Path":
        s = np.linspace(0.0, 1.0, N + 1)[:, None]
        a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
        nodes = (1 - s) * a + s * b
        nodes[0], nodes[-1] = a, b
        return cls(nodes)

    @property
    def N(self) -> int:
        return len(self.nodes) - 1

    @property
    def s(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.N + 1)

    @property
    def start(self) -> np.ndarray:
        return self.nodes[0]

    @property
    def end(self) -> np.ndarray:
        return self.nodes[-1]

    def velocity(self, end: int) -> np.ndarray:
        """Second-order one-sided estimate of ``gamma_s`` at ``s = 0`` (end=0) or ``s = 1`` (end=1)."""
        x, N = self.nodes, self.N
        if end == 0:
            return N * (-1.5 * x[0] + 2.0 * x[1] - 0.5 * x[2])
        return N * (1.5 * x[-1] - 2.0 * x[-2] + 0.5 * x[-3])


@dataclass
class GeodesicResult:
    path: Path
    energy: float
    length: float
    converged: bool
    iterations: int
    start_index: int
    grad_norm: float = 0.0
    history: list = field(default_factory=list, repr=False)


def _segments(path: Path):
    x = path.nodes
    return x[1:] - x[:-1], 0.5 * (x[1:] + x[:-1])


def path_energy(M: MetricField, path: Path) -> float:
    """Discrete energy; exact for straight paths under a constant metric."""
    d, mid = _segments(path)
    Mm = M.many(mid)
    return float(path.N * np.einsum("ki,kij,kj->", d, Mm, d))


def path_length(M: MetricField, path: Path) -> float:
    d, mid = _segments(path)
    Mm = M.many(mid)
    q = np.einsum("ki,kij,kj->k", d, Mm, d)
    return float(np.sum(np.sqrt(np.maximum(q, 0.0))))


@dataclass
class GeodesicOptions:
    N: int = 32
    tol: float = 1e-8
    max_iter: int = 200
    starts: int = 3
    perturbation: float = 0.1
    fd_step: float = FD_STEP
    fd_step2: float = 1e-4


def _energy(M: MetricField, X) -> float:
    d = X[1:] - X[:-1]
    return (len(X) - 1) * float(np.einsum("ki,kij,kj->", d, M.many(0.5 * (X[1:] + X[:-1])), d))


def _metric_derivs(M: MetricField, mid, h1: float, h2: float):
    """Metric at the midpoints with first and second coordinate derivatives.

    Central differences; the second derivatives use the larger step ``h2``
    to keep roundoff under control.
    """
    K, n = mid.shape
    if M.constant is not None:
        Mm = M.many(mid)
        return Mm, np.zeros((n,) + Mm.shape), np.zeros((n, n) + Mm.shape)
    E = np.eye(n)
    shifts = [mid]
    shifts += [mid + h1 * e for e in E] + [mid - h1 * e for e in E]
    pairs = [(i, j) for i in range(n) for j in range(i, n)]
    for i, j in pairs:
        for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
            shifts.append(mid + h2 * (si * E[i] + sj * E[j]))
    vals = M.many(np.concatenate(shifts)).reshape(len(shifts), K, n, n)
    Mm = vals[0]
    dM = (vals[1:n + 1] - vals[n + 1:2 * n + 1]) / (2 * h1)
    d2M = np.zeros((n, n, K, n, n))
    base = 2 * n + 1
    for t, (i, j) in enumerate(pairs):
        pp, pm, mp, mm = vals[base + 4 * t: base + 4 * t + 4]
        d2M[i, j] = d2M[j, i] = (pp - pm - mp + mm) / (4 * h2 * h2)
    return Mm, dM, d2M


def _gradient(N, d, Mm, q):
    Md = np.einsum("kij,kj->ki", Mm, d)
    # interior node j touches segments j-1 and j
    return N * (2 * Md[:-1] - 2 * Md[1:] + 0.5 * q[:-1] + 0.5 * q[1:])


def _hessian(N, d, Mm, dM, d2M):
    """Sparse Hessian of the discrete energy in the interior nodes.

    Per segment the energy is ``e(d, m) = d' M(m) d`` with ``d = x_{k+1} - x_k``
    and ``m`` the midpoint, so its Hessian in ``(x_k, x_{k+1})`` is that in
    ``(d, m)`` pulled back through ``S_k = [-I; I/2]`` and ``S_{k+1} = [I; I/2]``.
    """
    K, n = d.shape
    Hdd = 2 * Mm
    Hdm = 2 * np.einsum("ikab,kb->kai", dM, d)
    Hmm = np.einsum("ijkab,ka,kb->kij", d2M, d, d)
    # (d, m) blocks mapped to the two endpoints
    P = Hdd + 0.5 * (Hdm + np.swapaxes(Hdm, 1, 2)) + 0.25 * Hmm  # node k+1 with itself
    Q = Hdd - 0.5 * (Hdm + np.swapaxes(Hdm, 1, 2)) + 0.25 * Hmm  # node k with itself
    R = -Hdd + 0.5 * Hdm - 0.5 * np.swapaxes(Hdm, 1, 2) + 0.25 * Hmm  # rows node k+1, cols node k
    R = N * R
    diag = N * (P[:-1] + Q[1:])
    off = R[1:-1]  # coupling of interior nodes j+1 (rows) and j (cols)
    nb = K - 1
    rows, cols, vals = [], [], []
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    blk = np.arange(nb)[:, None, None] * n
    rows.append((blk + ii).ravel())
    cols.append((blk + jj).ravel())
    vals.append(diag.ravel())
    if nb > 1:
        lo = np.arange(nb - 1)[:, None, None] * n
        rows += [(lo + n + ii).ravel(), (lo + jj).ravel()]
        cols += [(lo + jj).ravel(), (lo + n + ii).ravel()]
        vals += [off.ravel(), off.ravel()]
    H = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nb * n, nb * n))
    return H, N * (Hdd[:-1] + Hdd[1:])


def _minimize(M: MetricField, nodes: np.ndarray, opts: GeodesicOptions, start_index: int) -> GeodesicResult:
    X = nodes.copy()
    N = len(X) - 1
    n = X.shape[1]
    E = _energy(M, X)
    history = [E]
    mu = 1e-8
    converged = False
    gnorm = np.inf
    it = 0
    while True:
        d = X[1:] - X[:-1]
        Mm, dM, d2M = _metric_derivs(M, 0.5 * (X[1:] + X[:-1]), opts.fd_step, opts.fd_step2)
        q = np.einsum("kj,ikjl,kl->ki", d, dM, d)
        g = _gradient(N, d, Mm, q)
        gnorm = float(np.linalg.norm(g))
        if gnorm <= opts.tol * (1.0 + E):
            converged = True
            break
        if it >= opts.max_iter:
            break
        it += 1
        H, gn = _hessian(N, d, Mm, dM, d2M)
        # Levenberg damping scaled by the positive Gauss-Newton diagonal
        scale = sp.diags(np.einsum("kii->ki", gn).ravel())
        accepted = False
        for _ in range(40):
            step = spsolve((H + mu * scale).tocsc(), -g.reshape(-1))
            Xc = X.copy()
            Xc[1:-1] += step.reshape(-1, n)
            Ec = _energy(M, Xc)
            if np.isfinite(Ec) and Ec <= E:
                accepted = True
                break
            mu = max(mu * 10.0, 1e-8)
        if not accepted:
            break
        X, E = Xc, Ec
        history.append(E)
        mu = mu / 10.0
    path = Path(X)
    return GeodesicResult(path, E, path_length(M, path), converged, it, start_index, gnorm, history)


def compute_geodesic(M: MetricField, a, b, opts: GeodesicOptions | None = None, init: Path | None = None,
                     **kw) -> GeodesicResult:
    """Minimal-energy path from ``a`` to ``b`` by damped Newton iterations with multi-start.

    Starts are the straight line and ``starts - 1`` lines bent by a
    deterministic sine bump. The lowest-energy converged run wins, ties going
    to the earliest start; if none converges the best run is returned with
    ``converged=False``. ``init`` (e.g. the previous geodesic in a control
    loop) replaces the straight line as the first start; its endpoints are
    moved to ``a`` and ``b`` by adding a linear correction.
    """
    if opts is None:
        opts = GeodesicOptions(**kw)
    elif kw:
        raise InputError("pass either options or keywords, not both")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise InputError("endpoints must be vectors of equal length")
    if opts.N < 2:
        raise InputError("N must be at least 2")
    base = Path.straight(a, b, opts.N)
    if np.array_equal(a, b):
        return GeodesicResult(base, 0.0, 0.0, True, 0, 0)
    n = a.size
    span = np.linalg.norm(b - a)
    s = base.s[:, None]
    bump = np.sin(np.pi * s)
    rng = np.random.default_rng(12345)
    results = []
    for k in range(max(1, opts.starts)):
        nodes = base.nodes.copy()
        if k == 0 and init is not None and init.N == opts.N and init.nodes.shape[1] == n:
            nodes = init.nodes + (1 - s) * (a - init.start) + s * (b - init.end)
            nodes[0], nodes[-1] = a, b
        elif k > 0:
            direction = rng.standard_normal(n)
            nodes = nodes + opts.perturbation * span * bump * direction / np.linalg.norm(direction)
        results.append(_minimize(M, nodes, opts, k))
    pool = [r for r in results if r.converged] or results
    best = pool[0]
    for r in pool[1:]:
        if r.energy < best.energy - 1e-12 * (1.0 + best.energy):
            best = r
    if not best.converged:
        log.warning("geodesic solver did not converge (gradient norm %.3g)", best.grad_norm)
    return best


def first_variation(M: MetricField, result: GeodesicResult, xstar_dot, x_dot) -> float:
    """Half the rate of change of the energy when the endpoints move.

    Returns ``<gamma_s(1), x_dot>_{M(x)} - <gamma_s(0), xstar_dot>_{M(x*)}``
    with ``x* = gamma(0)`` and ``x = gamma(1)``.
    """
    if not result.converged:
        raise InputError("first variation needs a converged geodesic")
    p = result.path
    if result.energy == 0.0:
        return 0.0
    g0, g1 = p.velocity(0), p.velocity(1)
    xs_dot = np.asarray(xstar_dot, dtype=float)
    x_dot = np.asarray(x_dot, dtype=float)
    return float(g1 @ M(p.end) @ x_dot - g0 @ M(p.start) @ xs_dot)


def save_path(path: Path, file) -> None:
    """CSV with columns ``s, x1..xn``."""
    n = path.nodes.shape[1]
    header = ",".join(["s"] + [f"x{i + 1}" for i in range(n)])
    np.savetxt(file, np.column_stack([path.s, path.nodes]), delimiter=",", header=header, comments="",
               fmt="%.17g")


def load_path(file) -> Path:
    data = np.loadtxt(file, delimiter=",", skiprows=1, ndmin=2)
    return Path(data[:, 1:])


def save_result(result: GeodesicResult, file) -> None:
    save_path(result.path, file)
