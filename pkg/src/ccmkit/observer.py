"""Observer contraction conditions, the reduced-order observer and diffeomorphism checks.

The reduced-order observer works in coordinates ``x = (y, w)`` where the
first ``p`` states are measured. With constant blocks ``M21`` and ``M22`` of
a contraction metric it estimates ``w`` through

    w_hat' = P f(x_hat),    x_hat = C_plus y + [0; w_hat],

with ``P = [M22^{-1} M21, I]`` and ``C_plus = [I; -M22^{-1} M21]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import null_space

from .ccm import MatrixField, Region, VerificationReport
from .errors import InputError
from .lmi import lambda_max, symmetrize
from .poly import PolyExpr, PolyMatrix
from .sim import NoiseStream, gaussian_array, rk4_step, time_grid
from .sysmodel import ControlAffineSystem


# coordinates --------------------------------------------------------------------

def coordinate_normalize(C) -> np.ndarray:
    """``T = [C; R]`` with the rows of ``R`` an orthonormal basis of ker C.

    In the coordinates ``z = T x`` the output ``C x`` becomes ``[I, 0] z``.
    Each kernel row is signed so that its largest-magnitude entry is positive.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    p, n = C.shape
    if np.linalg.matrix_rank(C) < p:
        raise InputError("C must have full row rank")
    R = null_space(C).T
    for i, row in enumerate(R):
        if row[np.argmax(np.abs(row))] < 0:
            R[i] = -row
    return np.vstack([C, R]) + 0.0  # no negative zeros


def transform_linear(sys: ControlAffineSystem, T, names=None, output=None) -> ControlAffineSystem:
    """The system in coordinates ``z = T x`` (``T`` constant and invertible).

    ``output`` optionally replaces the output map by ``C x`` before the
    change of coordinates.
    """
    T = np.atleast_2d(np.asarray(T, dtype=float))
    n = sys.n
    if T.shape != (n, n) or abs(np.linalg.det(T)) < 1e-12:
        raise InputError("T must be square and invertible")
    names = tuple(names) if names is not None else tuple(f"z{i + 1}" for i in range(n))
    V = names + sys.input_names
    Tinv = np.linalg.inv(T)
    zs = [PolyExpr.var(V, s) for s in names]
    images = [sum((zs[j] * float(Tinv[i, j]) for j in range(n) if Tinv[i, j] != 0.0), PolyExpr.zero(V))
              for i in range(n)]
    images += [PolyExpr.var(V, u) for u in sys.input_names]

    def mapped(mat: PolyMatrix, left=None) -> PolyMatrix:
        sub = mat.substitute(images)
        if left is None:
            return sub
        ents = [[sum((sub[k, j] * float(left[i, k]) for k in range(mat.shape[0])), PolyExpr.zero(V))
                 for j in range(mat.shape[1])] for i in range(left.shape[0])]
        return PolyMatrix(ents, V, shape=(left.shape[0], mat.shape[1]))

    g = sys.g
    if output is not None:
        Cm = np.atleast_2d(np.asarray(output, dtype=float))
        xs = [PolyExpr.var(sys.variables, s) for s in sys.state_names]
        g = PolyMatrix([[sum((xs[j] * float(Cm[i, j]) for j in range(n)), PolyExpr.zero(sys.variables))]
                        for i in range(Cm.shape[0])], sys.variables, shape=(Cm.shape[0], 1))
    return ControlAffineSystem(
        name=f"{sys.name}-transformed", state_names=names, input_names=sys.input_names,
        f=mapped(sys.f, T), B=mapped(sys.B, T), B_w=mapped(sys.B_w, T),
        g=None if g is None else mapped(g), time_varying=sys.time_varying)


# reduced-order observer -----------------------------------------------------------

@dataclass(frozen=True)
class ReducedObserverDesign:
    """Constant metric blocks for the reduced-order observer.

    Parameters
    ----------
    p
        Number of measured states (the first ``p`` coordinates).
    M21
        ``(n - p) x p`` block.
    M22
        ``(n - p) x (n - p)`` symmetric positive definite block.
    lam
        Design contraction rate.
    """

    p: int
    M21: np.ndarray
    M22: np.ndarray
    lam: float

    def __post_init__(self):
        M21 = np.atleast_2d(np.asarray(self.M21, dtype=float))
        M22 = np.atleast_2d(np.asarray(self.M22, dtype=float))
        if M21.shape[1] != self.p or M22.shape != (M21.shape[0], M21.shape[0]):
            raise InputError("M21 must be (n-p) x p and M22 (n-p) x (n-p)")
        if np.max(np.abs(M22 - M22.T)) > 1e-12 or np.linalg.eigvalsh(symmetrize(M22))[0] <= 0:
            raise InputError("M22 must be symmetric positive definite")
        object.__setattr__(self, "M21", M21)
        object.__setattr__(self, "M22", M22)

    @property
    def n(self) -> int:
        return self.p + self.M22.shape[0]

    @property
    def gain(self) -> np.ndarray:
        """``M22^{-1} M21``; only this ratio enters the observer."""
        return np.linalg.solve(self.M22, self.M21)

    @property
    def P(self) -> np.ndarray:
        return np.hstack([self.gain, np.eye(self.n - self.p)])

    @property
    def C_plus(self) -> np.ndarray:
        return np.vstack([np.eye(self.p), -self.gain])

    def reconstruct(self, y, w_hat) -> np.ndarray:
        return self.C_plus @ np.atleast_1d(y) + np.concatenate([np.zeros(self.p), np.atleast_1d(w_hat)])

    def metric(self, m11) -> np.ndarray:
        """Full constant metric ``[[m11, M21'], [M21, M22]]`` for a chosen upper-left block."""
        m11 = np.atleast_2d(np.asarray(m11, dtype=float)) * np.ones((self.p, self.p)) if np.ndim(m11) == 0 \
            else np.atleast_2d(np.asarray(m11, dtype=float))
        return np.block([[m11, self.M21.T], [self.M21, self.M22]])


def _points(region_or_points, dims=None, density: int = 41) -> np.ndarray:
    if isinstance(region_or_points, Region):
        d = list(range(region_or_points.n)) if dims is None else dims
        return region_or_points.state_grid(d, density)
    return np.atleast_2d(np.asarray(region_or_points, dtype=float))


def _scan_points(points, ev, required: float) -> VerificationReport:
    margins = np.array([ev(x) for x in points])
    k = int(np.argmax(margins))
    worst = float(margins[k])
    rep = VerificationReport(worst, (points[k],), len(points), worst <= -required, required)
    rep.details["margins"] = margins
    return rep


M22_TOL = 1e-9


def check_m22_condition(sys: ControlAffineSystem, design: ReducedObserverDesign, grid, u=None,
                        tol: float = M22_TOL) -> VerificationReport:
    """Worst ``lambda_max(M21 A12 + A12'M21' + M22 A22 + A22'M22 + 2 lam M22)`` over the grid.

    ``sys`` must be in coordinates where the first ``p`` states are measured.
    The boundary case (worst margin exactly zero) passes: the required
    margin is ``-tol``.
    """
    p = design.p
    if sys.n != design.n:
        raise InputError("design and system dimensions differ")
    pts = _points(grid)
    u0 = np.zeros(sys.m) if u is None else np.asarray(u, dtype=float)

    def ev(x):
        A = sys.jacobian(x, u0)
        A12, A22 = A[:p, p:], A[p:, p:]
        S = design.M21 @ A12 + design.M22 @ A22
        return lambda_max(symmetrize(S + S.T + 2 * design.lam * design.M22))

    return _scan_points(pts, ev, -tol)


@dataclass
class ObserverRun:
    t: np.ndarray
    y: np.ndarray
    x_hat: np.ndarray
    w_hat: np.ndarray
    x: np.ndarray | None = None

    def to_csv(self, file) -> None:
        """Columns ``t, y, x_hat1..x_hatn`` and ``x1..xn`` when the truth is known."""
        cols = [self.t[:, None], self.y, self.x_hat]
        names = ["t"] + [f"y{i + 1}" for i in range(self.y.shape[1])] + \
            [f"xhat{i + 1}" for i in range(self.x_hat.shape[1])]
        if self.x is not None:
            cols.append(self.x)
            names += [f"x{i + 1}" for i in range(self.x.shape[1])]
        np.savetxt(file, np.hstack(cols), delimiter=",", header=",".join(names), comments="", fmt="%.17g")


def simulate_observer(sys: ControlAffineSystem, design: ReducedObserverDesign, y_signal, x_hat0, tspan,
                      step: float, u_signal=None) -> ObserverRun:
    """Run the observer on a measured signal.

    ``y_signal`` is a callable ``t -> y`` (evaluated at the RK4 stage times)
    or an array sampled on the grid (held over each step).
    """
    if not step > 0:
        raise InputError("step must be positive")
    t = time_grid(tspan[0], tspan[1], step)
    P = design.P

    def y_at(s, i):
        if callable(y_signal):
            return np.atleast_1d(y_signal(s))
        return np.atleast_1d(np.asarray(y_signal, dtype=float)[i])

    def u_at(s, i):
        if u_signal is None:
            return np.zeros(sys.m)
        if callable(u_signal):
            return np.atleast_1d(u_signal(s))
        return np.atleast_1d(np.asarray(u_signal, dtype=float)[i])

    T = len(t)
    Yl = np.empty((T, design.p))
    Xh = np.empty((T, sys.n))
    Wh = np.empty((T, sys.n - design.p))
    w_hat = P @ np.asarray(x_hat0, dtype=float)
    for i in range(T):
        Yl[i] = y_at(t[i], i)
        Wh[i] = w_hat
        Xh[i] = design.reconstruct(Yl[i], w_hat)
        if i + 1 < T:
            def field(s, wh, i=i):
                xh = design.reconstruct(y_at(s, i), wh)
                return P @ sys.dynamics(xh, u_at(s, i))
            w_hat = rk4_step(field, t[i], w_hat, t[i + 1] - t[i])
    return ObserverRun(t, Yl, Xh, Wh)


def cosimulate_observer(sys: ControlAffineSystem, design: ReducedObserverDesign, x0, x_hat0, tspan, step: float,
                        noise: NoiseStream | None = None, u_fn: Callable | None = None) -> ObserverRun:
    """Plant and observer integrated together; the measurement is ``y = x[:p]`` plus held noise.

    Noise sample ``i * p + j`` of the stream perturbs output ``j`` over step ``i``.
    """
    t = time_grid(tspan[0], tspan[1], step)
    p, n = design.p, sys.n
    P = design.P
    T = len(t)
    nz = np.zeros((T, p)) if noise is None else gaussian_array(noise, np.arange(T * p)).reshape(T, p)
    X = np.empty((T, n))
    Xh = np.empty((T, n))
    Wh = np.empty((T, n - p))
    Yl = np.empty((T, p))
    z = np.concatenate([np.asarray(x0, dtype=float), P @ np.asarray(x_hat0, dtype=float)])
    for i in range(T):
        u = np.zeros(sys.m) if u_fn is None else np.atleast_1d(u_fn(t[i], z[:n]))
        X[i] = z[:n]
        Wh[i] = z[n:]
        Yl[i] = z[:p] + nz[i]
        Xh[i] = design.reconstruct(Yl[i], z[n:])
        if i + 1 < T:
            def field(s, zz, i=i, u=u):
                x, wh = zz[:n], zz[n:]
                xh = design.reconstruct(x[:p] + nz[i], wh)
                return np.concatenate([sys.dynamics(x, u), P @ sys.dynamics(xh, u)])
            z = rk4_step(field, t[i], z, t[i + 1] - t[i])
    return ObserverRun(t, Yl, Xh, Wh, X)


# observer contraction metric ----------------------------------------------------------

def check_ocm(sys: ControlAffineSystem, M, rho, lam: float, grid, C=None, u=None) -> VerificationReport:
    """Observer contraction condition over the grid, in full and kernel form.

    Full form: ``lambda_max(Mdot + A'M + MA - rho C'C + 2 lam M)``. Kernel
    form: the same without the ``rho`` term, projected on ker C(x); it is
    stored under ``details["kernel"]`` (``-inf`` margins where C has full
    column rank). ``C`` defaults to the output Jacobian of the system.
    """
    Mf = M if isinstance(M, MatrixField) else MatrixField(M, sys)
    pts = _points(grid)
    u0 = np.zeros(sys.m) if u is None else np.asarray(u, dtype=float)

    def parts(x):
        A = sys.jacobian(x, u0)
        Cx = sys.output_jacobians(x, u0)[0] if C is None else np.atleast_2d(C(x) if callable(C) else C)
        Mx = Mf(x)
        G = Mf.rate(x, u0, sys.dynamics(x, u0)) + A.T @ Mx + Mx @ A + 2 * lam * Mx
        r = float(rho(sys._z(x, u0))) if isinstance(rho, PolyExpr) else float(rho(x) if callable(rho) else rho)
        return G, Cx, r

    def full(x):
        G, Cx, r = parts(x)
        return lambda_max(symmetrize(G - r * Cx.T @ Cx))

    def kernel(x):
        G, Cx, _ = parts(x)
        N = null_space(Cx)
        if N.shape[1] == 0:
            return -math.inf
        return lambda_max(symmetrize(N.T @ G @ N))

    rep = _scan_points(pts, full, 0.0)
    rep.details["kernel"] = _scan_points(pts, kernel, 0.0)
    return rep


# diffeomorphism conditions ---------------------------------------------------------------

@dataclass
class DiffeoCandidate:
    """Unmeasured coordinates ``r(x)`` and the multipliers of the convex conditions."""

    r: PolyMatrix
    Q: np.ndarray
    rho: PolyExpr | float
    mu: float
    lam: float

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        if np.max(np.abs(Q - Q.T)) > 1e-12 or np.linalg.eigvalsh(symmetrize(Q))[0] <= 0:
            raise InputError("Q must be symmetric positive definite")
        if not self.mu > 0:
            raise InputError("mu must be positive")
        self.Q = symmetrize(Q)


def diffeo_jacobians(sys: ControlAffineSystem, cand: DiffeoCandidate):
    """Symbolic ``Phi = d phi/dx`` and ``F = d(Phi f)/dx`` for ``phi = [c(x); r(x)]``."""
    if sys.g is None:
        raise InputError("the system needs an output map c(x)")
    if any(sys.g.depends_on(u) for u in sys.input_names):
        raise InputError("the output map must not depend on the input")
    V = sys.variables
    if cand.r.variables != V:
        raise InputError(f"r must use variables {V}")
    rows = [sys.g[i, 0] for i in range(sys.g.shape[0])] + [cand.r[i, 0] for i in range(cand.r.shape[0])]
    if len(rows) != sys.n:
        raise InputError("c and r must together have n components")
    phi = PolyMatrix([[e] for e in rows], V, shape=(sys.n, 1))
    Phi = PolyMatrix([[phi[i, 0].diff(x) for x in sys.state_names] for i in range(sys.n)], V)
    Phif = Phi @ sys.f
    F = PolyMatrix([[Phif[i, 0].diff(x) for x in sys.state_names] for i in range(sys.n)], V)
    Cj = PolyMatrix([[sys.g[i, 0].diff(x) for x in sys.state_names] for i in range(sys.g.shape[0])], V)
    return Phi, F, Cj


def check_diffeo_conditions(sys: ControlAffineSystem, cand: DiffeoCandidate, grid) -> VerificationReport:
    """Both convex conditions for the coordinate change over the grid.

    Contraction: ``(Phi+F)'Q^{-1}(Phi+F) + Q - (Phi-F) - (Phi-F)' - 2 rho C'C + 4 lam I <= 0``.
    Invertibility: ``2 mu I - Phi - Phi' <= 0``.
    Margins are in ``details["contraction"]`` and ``details["invertibility"]``;
    the report passes only if both do.
    """
    Phi, F, Cj = diffeo_jacobians(sys, cand)
    pts = _points(grid)
    n = sys.n
    Qinv = np.linalg.inv(cand.Q)

    def z(x):
        return sys._z(x, np.zeros(sys.m))

    def contraction(x):
        zz = z(x)
        Ph, Fx, Cx = Phi(zz), F(zz), Cj(zz)
        r = float(cand.rho(zz)) if isinstance(cand.rho, PolyExpr) else float(cand.rho)
        S = (Ph + Fx).T @ Qinv @ (Ph + Fx) + cand.Q - (Ph - Fx) - (Ph - Fx).T - 2 * r * Cx.T @ Cx \
            + 4 * cand.lam * np.eye(n)
        return lambda_max(symmetrize(S))

    def invertibility(x):
        Ph = Phi(z(x))
        return lambda_max(symmetrize(2 * cand.mu * np.eye(n) - Ph - Ph.T))

    a = _scan_points(pts, contraction, 0.0)
    b = _scan_points(pts, invertibility, 0.0)
    worst = a if a.worst_margin >= b.worst_margin else b
    rep = VerificationReport(worst.worst_margin, worst.worst_point, len(pts), a.passed and b.passed, 0.0)
    rep.details.update(contraction=a, invertibility=b)
    return rep


def polarisation_gap(Phi, F, Q) -> float:
    """``lambda_max(-(Phi-F)'Q^{-1}(Phi-F) - Q + (Phi-F) + (Phi-F)')``; never positive."""
    D = np.atleast_2d(Phi) - np.atleast_2d(F)
    Q = np.atleast_2d(Q)
    return lambda_max(symmetrize(-D.T @ np.linalg.solve(Q, D) - Q + D + D.T))
