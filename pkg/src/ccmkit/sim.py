"""Fixed-step simulation, seeded noise and empirical gain / decay measurements."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ControllerError, InputError
from .lmi import symmetrize
from .sysmodel import ControlAffineSystem

log = logging.getLogger(__name__)

_MASK = (1 << 64) - 1


# integration ---------------------------------------------------------------------

def rk4_step(field: Callable, t: float, x: np.ndarray, h: float) -> np.ndarray:
    k1 = field(t, x)
    k2 = field(t + 0.5 * h, x + 0.5 * h * k1)
    k3 = field(t + 0.5 * h, x + 0.5 * h * k2)
    k4 = field(t + h, x + h * k3)
    return x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def time_grid(t0: float, t1: float, step: float) -> np.ndarray:
    """Uniform grid from ``t0`` to ``t1`` whose spacing is ``step`` rounded to fit."""
    if not step > 0:
        raise InputError("step must be positive")
    if not t1 > t0:
        raise InputError("need t1 > t0")
    n = max(1, int(round((t1 - t0) / step)))
    return t0 + (t1 - t0) * np.arange(n + 1) / n


@dataclass
class Trajectory:
    """Samples on a uniform time grid; unused channels have zero columns."""

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray | None = None
    w: np.ndarray | None = None
    y: np.ndarray | None = None
    xstar: np.ndarray | None = None
    ystar: np.ndarray | None = None
    status: str = "ok"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        T = len(self.t)
        for name in ("x", "u", "w", "y", "xstar", "ystar"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=float)
                if v.ndim == 1:
                    v = v[:, None]
                if len(v) != T:
                    raise InputError(f"{name} has {len(v)} samples for {T} times")
                setattr(self, name, v)

    @property
    def step(self) -> float:
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else 0.0

    def truncated(self, k: int) -> "Trajectory":
        cut = {n: (None if getattr(self, n) is None else getattr(self, n)[:k])
               for n in ("x", "u", "w", "y", "xstar", "ystar")}
        return Trajectory(self.t[:k], status=self.status, meta=dict(self.meta), **cut)

    def to_csv(self, file) -> None:
        """Columns ``t, x*, x, u, w, y, y*`` (each block expanded per component), 17 significant digits."""
        cols = [self.t[:, None]]
        names = ["t"]
        for label, arr in (("xstar", self.xstar), ("x", self.x), ("u", self.u), ("w", self.w), ("y", self.y),
                           ("ystar", self.ystar)):
            if arr is None or arr.shape[1] == 0:
                continue
            cols.append(arr)
            names += [f"{label}{i + 1}" for i in range(arr.shape[1])]
        np.savetxt(file, np.hstack(cols), delimiter=",", header=",".join(names), comments="", fmt="%.17g")


def integrate(field: Callable, x0, t0: float, t1: float, step: float) -> Trajectory:
    """Classical RK4 at fixed step for ``x' = field(t, x)``."""
    t = time_grid(t0, t1, step)
    x = np.empty((len(t), np.size(x0)))
    x[0] = np.asarray(x0, dtype=float)
    for i in range(len(t) - 1):
        x[i + 1] = rk4_step(field, t[i], x[i], t[i + 1] - t[i])
    return Trajectory(t, x)


# references ------------------------------------------------------------------------

@dataclass
class Reference:
    """Sampled target solution ``(x*, u*, w*)`` on the simulation grid (held between samples)."""

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    w: np.ndarray | None = None

    @classmethod
    def constant(cls, sys: ControlAffineSystem, xstar, ustar, t) -> "Reference":
        t = np.asarray(t, dtype=float)
        X = np.tile(np.asarray(xstar, dtype=float), (len(t), 1))
        U = np.tile(np.atleast_1d(np.asarray(ustar, dtype=float)), (len(t), 1))
        return cls(t, X, U, np.zeros((len(t), sys.p_w)))

    @classmethod
    def simulate(cls, sys: ControlAffineSystem, x0, u_fn: Callable, t, w_fn: Callable | None = None) -> "Reference":
        """Open-loop solution for ``u*(t) = u_fn(t)`` held over each step."""
        t = np.asarray(t, dtype=float)
        X = np.empty((len(t), sys.n))
        U = np.array([np.atleast_1d(u_fn(tt)) for tt in t], dtype=float)
        W = np.array([np.atleast_1d(w_fn(tt)) if w_fn else np.zeros(sys.p_w) for tt in t], dtype=float)
        W = W.reshape(len(t), sys.p_w)
        X[0] = x0
        for i in range(len(t) - 1):
            X[i + 1] = rk4_step(lambda s, x: sys.dynamics(x, U[i], W[i], s), t[i], X[i], t[i + 1] - t[i])
        return cls(t, X, U, W)

    def w_at(self, i: int, p_w: int) -> np.ndarray:
        return np.zeros(p_w) if self.w is None else self.w[i]


def check_reference(sys: ControlAffineSystem, ref: Reference, tol: float = 1e-6) -> float:
    """Largest one-step mismatch of the reference against the dynamics; raises above ``tol``."""
    worst = 0.0
    for i in range(len(ref.t) - 1):
        xn = rk4_step(lambda s, x: sys.dynamics(x, ref.u[i], ref.w_at(i, sys.p_w), s), ref.t[i], ref.x[i],
                      ref.t[i + 1] - ref.t[i])
        worst = max(worst, float(np.max(np.abs(xn - ref.x[i + 1]))))
    if worst > tol:
        raise InputError(f"reference violates the dynamics (one-step mismatch {worst:.3g})")
    return worst


def closed_loop(sys: ControlAffineSystem, controller: Callable, ref: Reference, w_signal, x0, tspan,
                step: float, check: bool = True) -> Trajectory:
    """Simulate ``x' = f(x) + B(x)u + B_w(x)w`` under ``u = controller(t, x, x*, u*)``.

    Control and disturbance are held constant over each RK4 step. The
    reference must be sampled on the same grid. If the controller raises
    :class:`ControllerError`, the error is re-raised with the trajectory up
    to the failure attached as ``exc.trajectory``.
    """
    t = time_grid(tspan[0], tspan[1], step)
    if len(ref.t) != len(t) or np.max(np.abs(ref.t - t)) > 1e-9 * (1 + abs(t[-1])):
        raise InputError("reference must be sampled on the simulation grid")
    if check:
        check_reference(sys, ref)
    T = len(t)
    X = np.empty((T, sys.n))
    U = np.empty((T, sys.m))
    Wd = np.empty((T, sys.p_w))
    Y = np.empty((T, sys.q))
    Ys = np.empty((T, sys.q))
    X[0] = np.asarray(x0, dtype=float)
    traj = Trajectory(t, X, U, Wd, Y, ref.x, Ys)
    for i in range(T):
        try:
            u = np.atleast_1d(np.asarray(controller(t[i], X[i], ref.x[i], ref.u[i]), dtype=float))
        except ControllerError as exc:
            traj.status = "controller-failure"
            exc.trajectory = traj.truncated(i)
            raise
        U[i] = u
        Wd[i] = _signal(w_signal, t[i], i, sys.p_w)
        if sys.q:
            Y[i] = sys.output(X[i], u)
            Ys[i] = sys.output(ref.x[i], ref.u[i])
        if i + 1 < T:
            w = Wd[i]
            X[i + 1] = rk4_step(lambda s, x: sys.dynamics(x, u, w, s), t[i], X[i], t[i + 1] - t[i])
            if not np.all(np.isfinite(X[i + 1])):
                traj.status = "diverged"
                log.warning("state became non-finite at t=%.4g", t[i + 1])
                return traj.truncated(i + 1)
    return traj


def _signal(sig, t: float, i: int, p: int) -> np.ndarray:
    if p == 0:
        return np.zeros(0)
    if sig is None:
        return np.zeros(p)
    if callable(sig):
        return np.atleast_1d(np.asarray(sig(t), dtype=float))
    return np.atleast_1d(np.asarray(sig, dtype=float)[i])


# measurements ------------------------------------------------------------------

def empirical_l2_ratio(traj: Trajectory, reference: Trajectory) -> float:
    """``int |y - y*|^2 / int |w - w*|^2`` by the trapezoidal rule; NaN when the denominator vanishes."""
    if traj.y is None or traj.w is None:
        raise InputError("trajectory lacks output or disturbance samples")
    if len(reference.t) != len(traj.t):
        raise InputError("trajectories must share the time grid")
    ref_y = reference.y if reference.y is not None else np.zeros_like(traj.y)
    ref_w = reference.w if reference.w is not None else np.zeros_like(traj.w)
    num = np.trapezoid(np.sum((traj.y - ref_y) ** 2, axis=1), traj.t)
    den = np.trapezoid(np.sum((traj.w - ref_w) ** 2, axis=1), traj.t)
    if den <= 1e-12:
        return math.nan
    return float(num / den)


def fit_decay_rate(t, err, floor: float = 1e-9) -> float:
    """Exponential rate from a least-squares fit of ``log err`` against ``t``.

    Samples with ``err <= floor`` are dropped so integration noise does not
    bend the fit.
    """
    t = np.asarray(t, dtype=float)
    err = np.asarray(err, dtype=float)
    keep = err > floor
    if keep.sum() < 2:
        raise InputError("not enough samples above the floor to fit a rate")
    slope = np.polyfit(t[keep], np.log(err[keep]), 1)[0]
    return float(-slope)


# noise ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseStream:
    """Counter-based Gaussian noise: sample ``k`` depends only on ``(seed, k)``."""

    seed: int
    sigma: float = 1.0

    def __post_init__(self):
        if self.sigma < 0:
            raise InputError("sigma must be non-negative")


def _splitmix64(z: np.ndarray) -> np.ndarray:
    z = z + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def gaussian_array(stream: NoiseStream, indices) -> np.ndarray:
    """Vectorized :func:`gaussian`."""
    idx = np.asarray(indices, dtype=np.uint64)
    with np.errstate(over="ignore"):
        key = _splitmix64(np.uint64(stream.seed & _MASK))
        h1 = _splitmix64(key ^ (np.uint64(2) * idx))
        h2 = _splitmix64(key ^ (np.uint64(2) * idx + np.uint64(1)))
    # 53-bit uniforms strictly inside (0, 1)
    u1 = ((h1 >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    u2 = ((h2 >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    return stream.sigma * np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def gaussian(stream: NoiseStream, index: int) -> float:
    """Sample ``index`` of the stream: SplitMix64 hashes, two uniforms, Box-Muller."""
    if index < 0:
        raise InputError("noise index must be non-negative")
    return float(gaussian_array(stream, [index])[0])


class ZohNoise:
    """Gaussian signal held constant over intervals of ``1 / rate`` seconds and clamped to ``+-clamp``."""

    def __init__(self, stream: NoiseStream, dim: int, rate: float = 10.0, clamp: float | None = None):
        if not rate > 0:
            raise InputError("rate must be positive")
        self.stream = stream
        self.dim = dim
        self.rate = rate
        self.clamp = clamp
        self.clamped = 0

    def __call__(self, t: float) -> np.ndarray:
        k = int(math.floor(t * self.rate + 1e-9))
        v = gaussian_array(self.stream, np.arange(k * self.dim, (k + 1) * self.dim))
        if self.clamp is not None:
            over = np.abs(v) > self.clamp
            if np.any(over):
                self.clamped += int(over.sum())
                v = np.clip(v, -self.clamp, self.clamp)
        return v


# differential storage ---------------------------------------------------------------

def variational_storage_check(sys: ControlAffineSystem, cert, traj: Trajectory, dx0, dw: Callable,
                              slack: float = 1e-4) -> float:
    """Propagate the closed-loop variational system along ``traj`` and test the storage inequality.

    With ``M = W^{-1}``, ``K = Y W^{-1}``, ``dy = (C + D K) dx`` the check is
    ``d/dt (dx' M dx) <= alpha^2 |dw|^2 - |dy|^2 + slack`` at every sample.
    Returns the largest value of the left side minus the right side (without
    the slack); raises :class:`InputError` if it exceeds ``slack``.
    """
    from .ccm import MatrixField

    Wf = MatrixField(cert.W, sys)
    Yf = MatrixField(cert.Y, sys, takes_u=True)
    C, D = np.atleast_2d(cert.C), np.atleast_2d(cert.D)
    alpha = cert.alpha
    t = traj.t

    def parts(i):
        x, u = traj.x[i], traj.u[i]
        w = traj.w[i] if traj.w is not None and traj.w.shape[1] else None
        W = Wf(x)
        Minv = np.linalg.inv(W)
        K = np.linalg.solve(W, Yf(x, u).T).T
        Acl = sys.jacobian(x, u, w=w) + sys.input_matrix(x) @ K
        Wdot = Wf.rate(x, u, sys.dynamics(x, u, w))
        Mdot = -Minv @ Wdot @ Minv
        return Minv, Mdot, Acl, K, sys.disturbance_matrix(x)

    dx = np.asarray(dx0, dtype=float)
    worst = -math.inf
    for i in range(len(t)):
        M, Mdot, Acl, K, Bw = parts(i)
        dwi = np.atleast_1d(dw(t[i]))
        dy = (C + D @ K) @ dx
        rate = dx @ symmetrize(Mdot + Acl.T @ M + M @ Acl) @ dx + 2 * dx @ M @ Bw @ dwi
        worst = max(worst, float(rate - (alpha ** 2 * dwi @ dwi - dy @ dy)))
        if i + 1 < len(t):
            h = t[i + 1] - t[i]
            # linear ODE between samples with data held at the left sample
            dx = rk4_step(lambda s, d: Acl @ d + Bw @ dwi, t[i], dx, h)
    if worst > slack:
        raise InputError(f"storage inequality violated by {worst:.3g}")
    return worst
