"""Dense symmetric linear algebra and convex solvers for pointwise LMIs.

The central routine is :func:`minimize_max_eig`, which minimizes

    g(theta) = max_j lambda_max(base_j + sum_i theta_i * basis_ji)

over a box with a trust-region cutting-plane method. Each eigenvector ``v``
of a constraint matrix yields the affine minorant ``v' S_j(theta) v`` of
``lambda_max(S_j(theta))``, so the piecewise-linear model built from the
cuts never overestimates ``g``. The model is minimized with a linear
program (HiGHS via scipy).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linprog

from .errors import InputError, NoCrossingError

log = logging.getLogger(__name__)

SYM_TOL = 1e-12


def symmetrize(S: np.ndarray) -> np.ndarray:
    return 0.5 * (S + np.swapaxes(S, -1, -2))


def lambda_max(S, return_vector: bool = False):
    """Largest eigenvalue of a symmetric matrix (optionally with a unit eigenvector)."""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise InputError(f"expected a square matrix, got shape {S.shape}")
    if not np.all(np.isfinite(S)):
        raise InputError("matrix has non-finite entries")
    if np.max(np.abs(S - S.T), initial=0.0) > 1e-9 * (1.0 + np.max(np.abs(S), initial=0.0)):
        raise InputError("matrix is not symmetric")
    vals, vecs = np.linalg.eigh(symmetrize(S))
    if return_vector:
        return float(vals[-1]), vecs[:, -1]
    return float(vals[-1])


def lambda_min(S) -> float:
    return -lambda_max(-np.asarray(S, dtype=float))


@dataclass
class AffineMatrixFamily:
    """``value(theta) = base + sum_i theta_i * basis[i]`` with symmetric members."""

    base: np.ndarray
    basis: np.ndarray
    label: str = ""

    def __post_init__(self):
        base = np.atleast_2d(np.asarray(self.base, dtype=float))
        basis = np.asarray(self.basis, dtype=float)
        d = base.shape[0]
        if base.shape != (d, d):
            raise InputError(f"base must be square, got {base.shape}")
        if basis.size == 0:
            basis = basis.reshape(0, d, d)
        if basis.ndim != 3 or basis.shape[1:] != (d, d):
            raise InputError(f"basis must have shape (k, {d}, {d}), got {basis.shape}")
        scale = 1.0 + max(np.max(np.abs(base), initial=0.0), np.max(np.abs(basis), initial=0.0))
        for M in (base, *basis):
            if np.max(np.abs(M - M.T), initial=0.0) > SYM_TOL * scale:
                raise InputError(f"family {self.label!r} has a non-symmetric member")
        self.base = symmetrize(base)
        self.basis = symmetrize(basis)

    @property
    def dim(self) -> int:
        return self.base.shape[0]

    @property
    def nvars(self) -> int:
        return self.basis.shape[0]

    def value(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return self.base + np.tensordot(theta, self.basis, axes=1)


@dataclass
class SolveOptions:
    radius: float = 1e3
    tol: float = 1e-6
    max_iter: int = 5000
    stop_below: float | None = None
    stop_above: float | None = None
    margin: float = 1e-6
    initial_trust: float = 1.0
    max_cuts: int = 6000
    cut_gap: float = 1e-3
    cut_window: float = 0.5


@dataclass
class SolveReport:
    theta: np.ndarray
    objective: float
    iterations: int
    converged: bool
    worst_constraint: int
    lower_bound: float = -np.inf
    feasible: bool = False
    history: list = field(default_factory=list, repr=False)


class _Stack:
    """Constraints grouped by matrix size for batched eigendecomposition."""

    def __init__(self, constraints: Sequence[AffineMatrixFamily]):
        self.groups = []
        by_dim: dict[int, list[int]] = {}
        for j, c in enumerate(constraints):
            by_dim.setdefault(c.dim, []).append(j)
        for d in sorted(by_dim):
            idx = by_dim[d]
            base = np.stack([constraints[j].base for j in idx])
            basis = np.stack([constraints[j].basis for j in idx])  # (J, k, d, d)
            self.groups.append((np.array(idx), base, basis))
        self.count = len(constraints)

    def evaluate(self, theta, n_vec: int = 1, gap: float = 0.0, window: float = np.inf):
        """Return per-constraint lambda_max and cut data ``(a, b, owner)``.

        Cuts are produced only for constraints whose largest eigenvalue lies
        within ``window`` of the overall maximum.
        """
        lam = np.empty(self.count)
        cuts_a, cuts_b, owner = [], [], []
        decomp = []
        for idx, base, basis in self.groups:
            S = base + np.einsum("k,jkde->jde", theta, basis)
            vals, vecs = np.linalg.eigh(symmetrize(S))
            lam[idx] = vals[:, -1]
            decomp.append((vals, vecs))
        top = lam.max()
        for (idx, base, basis), (vals, vecs) in zip(self.groups, decomp):
            d = base.shape[-1]
            near = vals[:, -1] >= top - window
            for r in range(min(n_vec, d)):
                col = d - 1 - r
                if r == 0:
                    sel = np.nonzero(near)[0]
                else:
                    sel = np.nonzero(near & (vals[:, col] >= vals[:, -1] - gap))[0]
                if sel.size == 0:
                    continue
                v = vecs[sel, :, col]
                a = np.einsum("jd,jkde,je->jk", v, basis[sel], v)
                b = np.einsum("jd,jde,je->j", v, base[sel], v)
                cuts_a.append(a)
                cuts_b.append(b)
                owner.append(idx[sel])
        return lam, np.vstack(cuts_a), np.concatenate(cuts_b), np.concatenate(owner)


def max_eig_objective(constraints: Sequence[AffineMatrixFamily], theta) -> tuple[float, int]:
    """Independent recomputation of ``max_j lambda_max`` and its argmax."""
    vals = [lambda_max(c.value(theta)) for c in constraints]
    j = int(np.argmax(vals))
    return float(vals[j]), j


def minimize_max_eig(constraints: Sequence[AffineMatrixFamily], theta0=None,
                     opts: SolveOptions | None = None) -> SolveReport:
    """Minimize the largest eigenvalue over a list of affine matrix families.

    Iteration-cap exhaustion is reported through ``converged=False``; it is
    not an exception. When ``opts.stop_below`` is set the search stops as
    soon as the objective drops to that level; ``opts.stop_above`` stops it
    once the certified lower bound exceeds that level.
    """
    opts = opts or SolveOptions()
    if not constraints:
        raise InputError("at least one constraint family is required")
    k = constraints[0].nvars
    if any(c.nvars != k for c in constraints):
        raise InputError("all constraint families must share the decision dimension")
    stack = _Stack(constraints)
    theta = np.zeros(k) if theta0 is None else np.clip(np.asarray(theta0, dtype=float), -opts.radius,
                                                          opts.radius)
    if theta.shape != (k,):
        raise InputError(f"theta0 must have length {k}")

    # per-coordinate scaling of the trust region
    norms = np.array([max(np.max(np.abs(c.basis[i])) for c in constraints) for i in range(k)]) if k else np.zeros(0)
    scale = 1.0 / np.where(norms > 0, norms, 1.0)

    def win(level):
        return opts.cut_window * (1.0 + abs(level))

    lam, A, b, owner = stack.evaluate(theta, n_vec=2, gap=opts.cut_gap, window=win(0.0))
    g = float(lam.max())
    worst = int(lam.argmax())
    history = [g]
    if k == 0:
        return SolveReport(theta, g, 0, True, worst, g, g <= -opts.margin, history)

    cut_A = A
    cut_b = b
    cut_age = np.zeros(len(b), dtype=int)
    trust = opts.initial_trust
    lower = -np.inf
    converged = False
    it = 0
    stop = opts.stop_below
    c_obj_full = np.zeros(k + 1)
    c_obj_full[-1] = 1.0
    while it < opts.max_iter:
        if stop is not None and g <= stop:
            converged = True
            break
        it += 1
        if opts.stop_above is not None and it % 10 == 0:
            # whole-box model minimum: a valid lower bound for infeasibility proofs
            res = linprog(c_obj_full, A_ub=np.hstack([cut_A, -np.ones((len(cut_b), 1))]), b_ub=-cut_b,
                          bounds=[(-opts.radius, opts.radius)] * k + [(None, None)], method="highs")
            if res.status == 0:
                lower = max(lower, res.x[-1])
                if lower > opts.stop_above:
                    break
        lo = np.maximum(theta - trust * scale, -opts.radius)
        hi = np.minimum(theta + trust * scale, opts.radius)
        # variables (theta, t): minimize t subject to a.theta - t <= -b
        c_obj = np.zeros(k + 1)
        c_obj[-1] = 1.0
        A_ub = np.hstack([cut_A, -np.ones((len(cut_b), 1))])
        bounds = list(zip(lo, hi)) + [(None, None)]
        res = linprog(c_obj, A_ub=A_ub, b_ub=-cut_b, bounds=bounds, method="highs")
        if res.status != 0:
            log.warning("cutting-plane LP failed (%s); stopping", res.message)
            break
        cand = res.x[:k]
        t_model = res.x[-1]
        pred = g - t_model
        on_boundary = np.any((np.abs(cand - lo) < 1e-9 * (1 + np.abs(lo))) & (lo > -opts.radius)) or \
            np.any((np.abs(cand - hi) < 1e-9 * (1 + np.abs(hi))) & (hi < opts.radius))
        log.debug("it=%d g=%.9g pred=%.3g trust=%.3g boundary=%s cuts=%d", it, g, pred, trust, on_boundary, len(cut_b))
        if not on_boundary:
            lower = max(lower, t_model)
            if opts.stop_above is not None and lower > opts.stop_above:
                break
        if pred <= opts.tol * (1.0 + abs(g)):
            if not on_boundary:
                converged = True
                break
            # flat model inside the box: widen it instead of evaluating a useless point
            trust *= 4.0
            continue
        slack = cut_A @ cand + cut_b - t_model  # <= 0 for every cut; 0 when active
        cut_age = np.where(slack > -1e-9 * (1 + abs(t_model)), 0, cut_age + 1)

        lam_c, A_c, b_c, _ = stack.evaluate(cand, n_vec=2, gap=opts.cut_gap, window=win(g))
        g_c = float(lam_c.max())
        if g - g_c >= 0.1 * pred:
            theta, g, worst = cand, g_c, int(lam_c.argmax())
            if on_boundary:
                trust *= 2.0
        elif g_c > g and on_boundary:
            trust = max(trust * 0.5, 1e-12)
        history.append(g)

        cut_A = np.vstack([cut_A, A_c])
        cut_b = np.concatenate([cut_b, b_c])
        cut_age = np.concatenate([cut_age, np.zeros(len(b_c), dtype=int)])
        if len(cut_b) > opts.max_cuts:
            keep = np.argsort(cut_age, kind="stable")[: opts.max_cuts // 2]
            keep.sort()
            cut_A, cut_b, cut_age = cut_A[keep], cut_b[keep], cut_age[keep]

    return SolveReport(theta=theta, objective=g, iterations=it, converged=converged,
                       worst_constraint=worst, lower_bound=lower, feasible=g <= -opts.margin,
                       history=history)


def bisect_scalar(predicate: Callable[[float], bool], lo: float, hi: float, tol: float,
                  relative: bool = False) -> float:
    """Locate the switching point of a monotone predicate on ``[lo, hi]``.

    Returns the endpoint of the final bracket on which the predicate holds,
    so the value returned has been certified by an actual evaluation.
    With ``relative=True`` the bracket is halved geometrically and the
    stopping rule is ``hi / lo - 1 <= tol``.
    """
    if not tol > 0:
        raise InputError("tol must be positive")
    if not lo < hi:
        raise InputError("need lo < hi")
    if relative and lo <= 0:
        raise InputError("relative bisection needs lo > 0")
    p_lo, p_hi = bool(predicate(lo)), bool(predicate(hi))
    if p_lo == p_hi:
        raise NoCrossingError(f"predicate is {p_lo} at both {lo} and {hi}")
    while (hi / lo - 1.0 if relative else hi - lo) > tol:
        mid = float(np.sqrt(lo * hi)) if relative else 0.5 * (lo + hi)
        if bool(predicate(mid)) == p_lo:
            lo = mid
        else:
            hi = mid
    return lo if p_lo else hi


def solve_lyapunov(Acl, Q) -> np.ndarray:
    """Solve ``Acl' X + X Acl = -Q`` for a Hurwitz ``Acl``.

    The equation is vectorized with Kronecker products and solved directly;
    fine for the small dimensions used here.
    """
    Acl = np.atleast_2d(np.asarray(Acl, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    n = Acl.shape[0]
    if Acl.shape != (n, n) or Q.shape != (n, n):
        raise InputError("Acl and Q must be square of equal size")
    if np.max(np.real(np.linalg.eigvals(Acl))) >= 0:
        raise InputError("Acl is not Hurwitz")
    I = np.eye(n)
    # column-major vec: vec(A'X) = (I kron A') vec X, vec(X A) = (A' kron I) vec X
    L = np.kron(I, Acl.T) + np.kron(Acl.T, I)
    x = np.linalg.solve(L, -Q.reshape(-1, order="F"))
    return symmetrize(x.reshape(n, n, order="F"))
