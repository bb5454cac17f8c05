"""Control contraction metric synthesis and verification on sampling grids.

Pointwise conditions (all written so that "holds" means negative semidefinite):

* strong form   ``-Wdot + A W + W A' + B Y + Y' B' + 2 lam W``
* rho form      ``-Wdot + A W + W A' - rho B B' + 2 lam W``
* weak form     ``N' (-Wdot + A W + W A' + 2 lam W) N`` with ``N`` spanning ker B'
* robust block  ``-[[Wcal, W C' + Y' D'], [C W + D Y, I]]`` where
  ``Wcal = Wdot - W A' - A W - B Y - Y' B' - B_w B_w' / alpha^2``

Synthesis parametrizes ``W`` and ``Y`` as polynomials with unknown
coefficients, imposes the condition at every point of a grid over the
region, and minimizes the largest eigenvalue with
:func:`ccmkit.lmi.minimize_max_eig`. The certificate is then re-checked on a
refined grid; refined-grid violators are added to the sampling set and the
solve is repeated until the refined check passes.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import null_space

from .errors import InputError, NoCrossingError, SynthesisFailed
from .lmi import (AffineMatrixFamily, SolveOptions, SolveReport, bisect_scalar, lambda_max,
                  minimize_max_eig, symmetrize)
from .poly import PolyExpr, PolyMatrix
from .sysmodel import ControlAffineSystem

log = logging.getLogger(__name__)

ALPHA1_FLOOR = 1e-3
DEFAULT_DENSITY = 41
REL_MARGIN = 1e-6


# regions --------------------------------------------------------------------

@dataclass(frozen=True)
class Region:
    """Compact set of states plus boxes for the control and the disturbance.

    ``half_widths`` may contain ``inf`` for state coordinates that the
    certified condition does not depend on; gridding such a coordinate is an
    error.
    """

    kind: str
    center: tuple[float, ...]
    half_widths: tuple[float, ...]
    u_half_widths: tuple[float, ...] = ()
    w_half_widths: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("box", "ball"):
            raise InputError(f"region kind must be 'box' or 'ball', got {self.kind!r}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "half_widths", tuple(float(h) for h in self.half_widths))
        object.__setattr__(self, "u_half_widths", tuple(float(h) for h in self.u_half_widths))
        object.__setattr__(self, "w_half_widths", tuple(float(h) for h in self.w_half_widths))
        if self.kind == "ball" and len(self.half_widths) != 1:
            raise InputError("a ball region has a single radius")
        if self.kind == "box" and len(self.half_widths) != len(self.center):
            raise InputError("box half-widths must match the center dimension")
        for h in self.half_widths + self.u_half_widths + self.w_half_widths:
            if not h > 0:
                raise InputError(f"region radii must be positive, got {h}")

    @classmethod
    def box(cls, center, half_widths, u_half_widths=(), w_half_widths=()) -> "Region":
        return cls("box", tuple(center), tuple(half_widths), tuple(u_half_widths), tuple(w_half_widths))

    @classmethod
    def ball(cls, center, radius, u_half_widths=(), w_half_widths=()) -> "Region":
        return cls("ball", tuple(center), (float(radius),), tuple(u_half_widths), tuple(w_half_widths))

    @property
    def n(self) -> int:
        return len(self.center)

    def radius_of(self, i: int) -> float:
        return self.half_widths[0] if self.kind == "ball" else self.half_widths[i]

    def contains(self, x, slack: float = 0.0) -> bool:
        d = np.asarray(x, dtype=float) - np.asarray(self.center)
        if self.kind == "ball":
            return bool(np.linalg.norm(d) <= self.half_widths[0] + slack)
        return bool(np.all(np.abs(d) <= np.asarray(self.half_widths) + slack))

    def scaled(self, factor: float) -> "Region":
        return replace(self, half_widths=tuple(h * factor for h in self.half_widths))

    def state_grid(self, dims: Sequence[int], density: int) -> np.ndarray:
        """Tensor grid over ``dims`` (others at the center), clipped to a ball if needed."""
        if density < 2:
            raise InputError("grid density must be at least 2")
        c = np.asarray(self.center)
        axes = []
        for i in dims:
            h = self.radius_of(i)
            if not math.isfinite(h):
                raise InputError(f"state coordinate {i} is unbounded in the region but must be gridded")
            axes.append(np.linspace(c[i] - h, c[i] + h, density))
        if not axes:
            return c[None, :].copy()
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(dims))
        pts = np.repeat(c[None, :], len(mesh), axis=0)
        pts[:, list(dims)] = mesh
        if self.kind == "ball":
            keep = np.linalg.norm(pts - c, axis=1) <= self.half_widths[0] * (1 + 1e-12)
            pts = pts[keep]
        return pts


def box_points(half_widths: Sequence[float], mode: str = "endpoints") -> np.ndarray:
    """Sample points for a centered box: its vertices or a 5-point tensor grid."""
    h = np.asarray(half_widths, dtype=float)
    if h.size == 0:
        return np.zeros((1, 0))
    if mode == "endpoints":
        levels = [(-1.0, 1.0)] * h.size
    elif mode == "grid5":
        levels = [np.linspace(-1, 1, 5)] * h.size
    else:
        raise InputError(f"unknown box sampling mode {mode!r}")
    return np.array(list(itertools.product(*levels))) * h


# matrix fields ----------------------------------------------------------------

class MatrixField:
    """A matrix depending on ``(x, u)``: polynomial, callable or constant.

    Time derivatives along a state velocity are exact for polynomial data and
    central differences otherwise.
    """

    FD_STEP = 1e-6

    def __init__(self, source, sys: ControlAffineSystem, takes_u: bool = False):
        self.sys = sys
        self.takes_u = takes_u
        self.poly = None
        self.const = None
        self.fn = None
        if isinstance(source, PolyMatrix):
            if source.variables != sys.variables:
                raise InputError(f"polynomial matrix must use variables {sys.variables}")
            self.poly = source
            self.grads = [source.diff(x) for x in sys.state_names]
            self.shape = source.shape
        elif callable(source):
            self.fn = source
            self.shape = None
        else:
            self.const = np.atleast_2d(np.asarray(source, dtype=float))
            self.shape = self.const.shape

    def is_constant(self) -> bool:
        return self.const is not None or (self.poly is not None and self.poly.is_constant())

    def __call__(self, x, u=None) -> np.ndarray:
        if self.const is not None:
            return self.const
        if self.poly is not None:
            return self.poly(self.sys._z(x, u))
        return np.atleast_2d(np.asarray(self.fn(x, u) if self.takes_u else self.fn(x), dtype=float))

    def rate(self, x, u, xdot) -> np.ndarray:
        if self.const is not None:
            return np.zeros_like(self.const)
        if self.poly is not None:
            z = self.sys._z(x, u)
            out = np.zeros(self.shape)
            for g, v in zip(self.grads, xdot):
                if v:
                    out = out + v * g(z)
            return out
        xdot = np.asarray(xdot, dtype=float)
        speed = np.linalg.norm(xdot)
        if speed == 0:
            return np.zeros_like(self(x, u))
        h = self.FD_STEP / speed
        x = np.asarray(x, dtype=float)
        return (self(x + h * xdot, u) - self(x - h * xdot, u)) / (2 * h)


def _field(src, sys, takes_u=False) -> MatrixField:
    return src if isinstance(src, MatrixField) else MatrixField(src, sys, takes_u)


# pointwise conditions ---------------------------------------------------------

def _strong(A, B, W, Wdot, Y, lam):
    AW = A @ W
    BY = B @ Y
    return symmetrize(-Wdot + AW + AW.T + BY + BY.T + 2 * lam * W)


def assemble_strong_lmi(sys: ControlAffineSystem, W, Y, lam: float, x, u=None) -> np.ndarray:
    """Strong-form CCM matrix at ``(x, u)``; negative semidefinite iff the condition holds."""
    Wf, Yf = _field(W, sys), _field(Y, sys, takes_u=True)
    u = np.zeros(sys.m) if u is None else np.asarray(u, dtype=float)
    A = sys.jacobian(x, u)
    B = sys.input_matrix(x)
    Wx = Wf(x)
    Yx = Yf(x, u)
    if Wx.shape != (sys.n, sys.n) or Yx.shape != (sys.m, sys.n):
        raise InputError(f"W must be {sys.n}x{sys.n} and Y {sys.m}x{sys.n}")
    Wdot = Wf.rate(x, u, sys.dynamics(x, u))
    return _strong(A, B, Wx, Wdot, Yx, lam)


def assemble_rho_lmi(sys: ControlAffineSystem, W, rho, lam: float, x, u=None) -> np.ndarray:
    """rho-form CCM matrix; ``rho`` is a number, PolyExpr in ``(x, u)`` or callable."""
    Wf = _field(W, sys)
    u = np.zeros(sys.m) if u is None else np.asarray(u, dtype=float)
    A = sys.jacobian(x, u)
    B = sys.input_matrix(x)
    Wx = Wf(x)
    if Wx.shape != (sys.n, sys.n):
        raise InputError(f"W must be {sys.n}x{sys.n}")
    r = _rho_value(rho, sys, x, u)
    Wdot = Wf.rate(x, u, sys.dynamics(x, u))
    AW = A @ Wx
    return symmetrize(-Wdot + AW + AW.T - r * B @ B.T + 2 * lam * Wx)


def _rho_value(rho, sys, x, u) -> float:
    if isinstance(rho, PolyExpr):
        return float(rho(sys._z(x, u)))
    if callable(rho):
        return float(rho(x, u))
    return float(rho)


def rho_to_gain(sys: ControlAffineSystem, rho, x, u=None) -> np.ndarray:
    """``Y = -rho B' / 2``, the gain that turns a rho-form certificate into a strong one."""
    u = np.zeros(sys.m) if u is None else np.asarray(u, dtype=float)
    return -0.5 * _rho_value(rho, sys, x, u) * sys.input_matrix(x).T


def check_weak_form(sys: ControlAffineSystem, W, lam: float, x, u=None) -> float:
    """Largest eigenvalue of the open-loop condition projected on ker B(x)'.

    Returns ``-inf`` when the kernel is trivial (the condition holds vacuously).
    """
    Wf = _field(W, sys)
    u = np.zeros(sys.m) if u is None else np.asarray(u, dtype=float)
    B = sys.input_matrix(x)
    if np.linalg.matrix_rank(B) < min(B.shape):
        raise InputError("B(x) must have full column rank")
    N = null_space(B.T)
    if N.shape[1] == 0:
        return -math.inf
    A = sys.jacobian(x, u)
    Wx = Wf(x)
    Wdot = Wf.rate(x, u, sys.dynamics(x, u))
    AW = A @ Wx
    G = -Wdot + AW + AW.T + 2 * lam * Wx
    return lambda_max(symmetrize(N.T @ G @ N))


def _robust_block(A, B, Bw, C, D, W, Wdot, Y, alpha):
    AW = A @ W
    BY = B @ Y
    Wcal = Wdot - AW - AW.T - BY - BY.T - (Bw @ Bw.T) / alpha ** 2
    off = W @ C.T + Y.T @ D.T
    q = C.shape[0]
    M = np.block([[Wcal, off], [off.T, np.eye(q)]])
    return symmetrize(-M)


def assemble_robust_lmi(sys: ControlAffineSystem, W, Y, alpha: float, C, D, x, u=None, w=None) -> np.ndarray:
    """Negated gain-bound block matrix; negative semidefinite iff the bound condition holds."""
    Wf, Yf = _field(W, sys), _field(Y, sys, takes_u=True)
    u = np.zeros(sys.m) if u is None else np.asarray(u, dtype=float)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    D = np.atleast_2d(np.asarray(D, dtype=float))
    A = sys.jacobian(x, u, w=w)
    xdot = sys.dynamics(x, u, w)
    return _robust_block(A, sys.input_matrix(x), sys.disturbance_matrix(x), C, D, Wf(x),
                         Wf.rate(x, u, xdot), Yf(x, u), alpha)


# certificates ------------------------------------------------------------------

@dataclass
class VerificationReport:
    """Outcome of a gridded check.

    ``worst_margin`` is the largest eigenvalue over the grid, each divided by
    ``1 + ||constant part||`` of its condition; ``passed`` holds exactly when
    ``worst_margin <= -required_margin``.
    """

    worst_margin: float
    worst_point: tuple
    grid_size: int
    passed: bool
    required_margin: float = REL_MARGIN
    details: dict = field(default_factory=dict)


@dataclass
class CcmCertificate:
    """Metric ``M = W^{-1}`` and differential gain ``K = Y W^{-1}`` with rate ``lam``.

    ``w_floor`` is the imposed lower bound on ``W``; ``alpha1`` and ``alpha2``
    bound the eigenvalues of ``M`` over the verification grid.
    """

    W: PolyMatrix
    Y: PolyMatrix
    lam: float
    region: Region
    w_floor: float = ALPHA1_FLOOR
    alpha1: float = math.nan
    alpha2: float = math.nan
    grid_density: int = DEFAULT_DENSITY
    margin: float = REL_MARGIN
    model: str = ""
    rho: PolyExpr | None = None
    extra_points: np.ndarray | None = None
    solve_report: SolveReport | None = field(default=None, repr=False)
    verification: VerificationReport | None = field(default=None, repr=False)

    kind = "ccm"


@dataclass
class RobustCertificate:
    """Gain-bound certificate; the bound ``alpha`` holds on ``region``."""

    W: PolyMatrix
    Y: PolyMatrix
    alpha: float
    region: Region
    C: np.ndarray
    D: np.ndarray
    lam: float
    stability_region: Region
    w_floor: float = ALPHA1_FLOOR
    alpha1: float = math.nan
    alpha2: float = math.nan
    grid_density: int = DEFAULT_DENSITY
    margin: float = REL_MARGIN
    model: str = ""
    # gridding replaces the multiplier certificate, so there is no multiplier degree
    multiplier_degree: int | None = None
    extra_points: np.ndarray | None = None
    solve_report: SolveReport | None = field(default=None, repr=False)
    verification: VerificationReport | None = field(default=None, repr=False)

    kind = "robust"


# decision-variable parametrization ---------------------------------------------

def _monomials(nvars: int, idx: Sequence[int], degree: int) -> list[tuple[int, ...]]:
    out = []
    for d in range(degree + 1):
        for combo in itertools.combinations_with_replacement(idx, d):
            e = [0] * nvars
            for i in combo:
                e[i] += 1
            out.append(tuple(e))
    return out


class _Parametrization:
    """Symmetric ``W`` and rectangular ``Y`` as linear combinations of scaled monomials.

    Monomials are built in ``(x_i - c_i) / s_i`` with ``s_i`` the region
    half-width so that coefficients are of comparable size for any radius.
    """

    def __init__(self, sys: ControlAffineSystem, region: Region, w_vars, w_degree, y_vars, y_degree):
        self.sys = sys
        V = sys.variables
        nv = len(V)
        self.w_idx = [sys.state_names.index(v) for v in w_vars]
        self.y_idx = [sys.state_names.index(v) for v in y_vars]
        scaled = []
        for i, name in enumerate(sys.state_names):
            h = region.radius_of(i)
            s = h if math.isfinite(h) else 1.0
            scaled.append((PolyExpr.var(V, name) - region.center[i]) * (1.0 / s))

        def basis(idx, degree):
            polys = []
            for e in _monomials(nv, idx, degree):
                p = PolyExpr.constant(V, 1.0)
                for i, k in enumerate(e):
                    if k:
                        p = p * scaled[i] ** k
                polys.append(p)
            return polys

        self.w_mons = basis(self.w_idx, w_degree)
        self.y_mons = basis(self.y_idx, y_degree)
        n, m = sys.n, sys.m
        self.w_slots = [(i, j, k) for i in range(n) for j in range(i, n) for k in range(len(self.w_mons))]
        self.y_slots = [(i, j, k) for i in range(m) for j in range(n) for k in range(len(self.y_mons))]
        self.nw = len(self.w_slots)
        self.size = self.nw + len(self.y_slots)
        self.w_grads = [[p.diff(x) for x in sys.state_names] for p in self.w_mons]

    def initial(self) -> np.ndarray:
        theta = np.zeros(self.size)
        for t, (i, j, k) in enumerate(self.w_slots):
            if i == j and self.w_mons[k].is_constant():
                theta[t] = 1.0
        return theta

    def build(self, theta) -> tuple[PolyMatrix, PolyMatrix]:
        sys = self.sys
        V = sys.variables
        n, m = sys.n, sys.m
        Wents = [[PolyExpr.zero(V) for _ in range(n)] for _ in range(n)]
        for t, (i, j, k) in enumerate(self.w_slots):
            if theta[t]:
                term = self.w_mons[k] * float(theta[t])
                Wents[i][j] = Wents[i][j] + term
                if i != j:
                    Wents[j][i] = Wents[j][i] + term
        Yents = [[PolyExpr.zero(V) for _ in range(n)] for _ in range(m)]
        for t, (i, j, k) in enumerate(self.y_slots):
            c = theta[self.nw + t]
            if c:
                Yents[i][j] = Yents[i][j] + self.y_mons[k] * float(c)
        return (PolyMatrix(Wents, V, symmetric=True, shape=(n, n)),
                PolyMatrix(Yents, V, shape=(m, n)))

    def unit_matrices(self, z, xdot):
        """Per-decision ``(W_t, Wdot_t, Y_t)`` at one point."""
        n, m = self.sys.n, self.sys.m
        wv = [float(p(z)) for p in self.w_mons]
        wd = [sum(float(g(z)) * v for g, v in zip(gs, xdot) if v) for gs in self.w_grads]
        yv = [float(p(z)) for p in self.y_mons]
        out = []
        for i, j, k in self.w_slots:
            E = np.zeros((n, n))
            E[i, j] = E[j, i] = 1.0
            out.append((E * wv[k], E * wd[k], np.zeros((m, n))))
        for i, j, k in self.y_slots:
            E = np.zeros((m, n))
            E[i, j] = yv[k]
            out.append((np.zeros((n, n)), np.zeros((n, n)), E))
        return out


# gridding -------------------------------------------------------------------

def _relevant_state_dims(sys: ControlAffineSystem, W_vars, W_const: bool, y_idx, robust: bool,
                         C_D_from_g: bool = False) -> list[int]:
    names = set()
    A = sys.jacobian_poly
    mats = [A, sys.B]
    if robust:
        mats.append(sys.B_w)
    if not W_const:
        mats.append(sys.f)
    for mat in mats:
        for s in sys.state_names:
            if mat.depends_on(s):
                names.add(s)
    names.update(W_vars)
    names.update(sys.state_names[i] for i in y_idx)
    return sorted(sys.state_names.index(s) for s in names)


def _u_relevant(sys: ControlAffineSystem, W_const: bool) -> bool:
    A_u = any(sys.jacobian_poly.depends_on(u) for u in sys.input_names)
    # Wdot sees u through B(x) u
    return A_u or not W_const


def _sample_points(sys, region: Region, dims, density, u_mode, use_u, use_w):
    xs = region.state_grid(dims, density)
    if use_u:
        if len(region.u_half_widths) != sys.m:
            raise InputError("the condition depends on u: give the region a control box")
        us = box_points(region.u_half_widths, u_mode)
    else:
        us = np.zeros((1, sys.m))
    if use_w:
        if len(region.w_half_widths) != sys.p_w:
            raise InputError("the condition depends on w: give the region a disturbance box")
        ws = box_points(region.w_half_widths, u_mode)
    else:
        ws = np.zeros((1, sys.p_w))
    return [(x, u, w) for x in xs for u in us for w in ws]


def _families(point_data, param: _Parametrization, kind: str, **kw) -> list[AffineMatrixFamily]:
    """One affine family per sample point, rows normalized by the size of their data."""
    fams = []
    for (x, u, w), pd in point_data:
        units = param.unit_matrices(pd["z"], pd["xdot"])
        if kind == "strong":
            base = np.zeros((param.sys.n, param.sys.n))
            basis = [_strong(pd["A"], pd["B"], Wt, Wdt, Yt, kw["lam"]) for Wt, Wdt, Yt in units]
        elif kind == "robust":
            zW = np.zeros((param.sys.n, param.sys.n))
            zY = np.zeros((param.sys.m, param.sys.n))
            base = _robust_block(pd["A"], pd["B"], pd["Bw"], kw["C"], kw["D"], zW, zW, zY, kw["alpha"])
            basis = [_robust_block(pd["A"], pd["B"], pd["Bw"], kw["C"], kw["D"], Wt, Wdt, Yt, kw["alpha"]) - base
                     for Wt, Wdt, Yt in units]
        else:
            raise ValueError(kind)
        basis = np.array(basis)
        scale = 1.0 + np.linalg.norm(base, 2) + max((np.linalg.norm(b, 2) for b in basis), default=0.0)
        fams.append(AffineMatrixFamily(base / scale, basis / scale, label=f"{kind}@{np.round(x, 6)}"))
    return fams


def _floor_families(param: _Parametrization, points, alpha1: float) -> list[AffineMatrixFamily]:
    """``alpha1 I - W(x) <= 0`` at the given states (a single one when W is constant)."""
    n = param.sys.n
    if all(p.is_constant() for p in param.w_mons):
        points = points[:1]
    fams = []
    for z in points:
        units = param.unit_matrices(z, np.zeros(n))
        basis = np.array([-Wt for Wt, _, _ in units])
        base = alpha1 * np.eye(n)
        scale = 1.0 + alpha1 + max(np.linalg.norm(b, 2) for b in basis)
        fams.append(AffineMatrixFamily(base / scale, basis / scale, label="W-floor"))
    return fams


def _ceiling_families(param: _Parametrization, points, w_max: float) -> list[AffineMatrixFamily]:
    """``W(x) - w_max I <= 0``; fixes the scale left free by the homogeneous CCM conditions."""
    fams = []
    for f in _floor_families(param, points, 1.0):
        fams.append(AffineMatrixFamily(-w_max * f.base, -f.basis, label="W-ceiling"))
    return fams


def _gain_cap_families(param: _Parametrization, points, y_max: float) -> list[AffineMatrixFamily]:
    """``[[-y_max I, Y], [Y', -y_max I]] <= 0``, i.e. ``|Y(x)| <= y_max`` in spectral norm."""
    n, m = param.sys.n, param.sys.m
    if all(p.is_constant() for p in param.y_mons):
        points = points[:1]
    fams = []
    for z in points:
        units = param.unit_matrices(z, np.zeros(n))
        basis = np.array([np.block([[np.zeros((m, m)), Yt], [Yt.T, np.zeros((n, n))]]) for _, _, Yt in units])
        scale = 1.0 + y_max
        fams.append(AffineMatrixFamily(-y_max * np.eye(m + n) / scale, basis / scale, label="Y-cap"))
    return fams


def _point_data(sys: ControlAffineSystem, points, robust: bool = False):
    out = []
    for x, u, w in points:
        z = sys._z(x, u)
        xdot = sys.dynamics(x, u, w if robust else None)
        pd = {"z": z, "xdot": xdot, "A": sys.jacobian(x, u, w=w if robust else None),
              "B": sys.input_matrix(x)}
        if robust:
            pd["Bw"] = sys.disturbance_matrix(x)
        out.append(((x, u, w), pd))
    return out


# verification --------------------------------------------------------------------

def _normalized_max(S: np.ndarray, const: np.ndarray) -> float:
    return lambda_max(S) / (1.0 + np.linalg.norm(const, 2))


def _scan(points, evaluate, required=REL_MARGIN) -> VerificationReport:
    worst, where = -math.inf, None
    margins = []
    for p in points:
        val = evaluate(*p)
        margins.append(val)
        if val > worst:
            worst, where = val, p
    rep = VerificationReport(worst, tuple(np.asarray(v).copy() for v in where) if where else (),
                             len(points), worst <= -required, required)
    rep.details["margins"] = np.array(margins)
    return rep


def _refined_density(density: int, factor: int) -> int:
    return (density - 1) * factor + 1


def _grid_setup(sys, W: PolyMatrix, Y: PolyMatrix, robust: bool):
    W_const = W.is_constant()
    W_vars = [s for s in sys.state_names if W.depends_on(s)]
    y_idx = [i for i, s in enumerate(sys.state_names) if Y.depends_on(s)]
    dims = _relevant_state_dims(sys, W_vars, W_const, y_idx, robust)
    use_u = _u_relevant(sys, W_const) or any(Y.depends_on(u) for u in sys.input_names)
    use_w = robust and not W_const and sys.p_w > 0
    return dims, use_u, use_w


def _ccm_verify_points(sys, cert: CcmCertificate, region: Region, density: int, u_mode="endpoints"):
    dims, use_u, use_w = _grid_setup(sys, cert.W, cert.Y, robust=False)
    return _sample_points(sys, region, dims, density, u_mode, use_u, False)


def verify_certificate(cert, sys: ControlAffineSystem, refinement: int = 10, region: Region | None = None,
                       u_mode: str = "endpoints") -> VerificationReport:
    """Re-check a certificate's defining conditions on a grid refined by ``refinement``.

    For a CCM certificate: the strong-form condition at rate ``lam`` and the
    floor ``W >= w_floor I``. For a robust certificate: the gain-bound block on
    the region, the stability condition on its stability region and the floor.
    ``region`` overrides the certificate's own region.
    """
    if refinement < 2:
        raise InputError("refinement factor must be at least 2")
    density = _refined_density(cert.grid_density, refinement)
    Wf = MatrixField(cert.W, sys)
    Yf = MatrixField(cert.Y, sys, takes_u=True)

    def floor_margin(x, u, w):
        Wx = Wf(x)
        return _normalized_max(cert.w_floor * np.eye(sys.n) - Wx, cert.w_floor * np.eye(sys.n))

    if isinstance(cert, CcmCertificate):
        region = region or cert.region
        points = _ccm_verify_points(sys, cert, region, density, u_mode)

        def ev(x, u, w):
            S = assemble_strong_lmi(sys, Wf, Yf, cert.lam, x, u)
            return max(lambda_max(S), floor_margin(x, u, w))

        rep = _scan(points, ev, cert.margin)
        return rep

    region = region or cert.region
    dims, use_u, use_w = _grid_setup(sys, cert.W, cert.Y, robust=True)
    pts = _sample_points(sys, region, dims, density, u_mode, use_u, use_w)
    C, D = np.atleast_2d(cert.C), np.atleast_2d(cert.D)
    const = np.block([[sys.disturbance_matrix(np.asarray(region.center)) @ sys.disturbance_matrix(
        np.asarray(region.center)).T / cert.alpha ** 2, np.zeros((sys.n, C.shape[0]))],
        [np.zeros((C.shape[0], sys.n)), np.eye(C.shape[0])]])

    def ev_gain(x, u, w):
        S = assemble_robust_lmi(sys, Wf, Yf, cert.alpha, C, D, x, u, w)
        return max(_normalized_max(S, const), floor_margin(x, u, w))

    gain = _scan(pts, ev_gain, cert.margin)
    sdims, suse_u, _ = _grid_setup(sys, cert.W, cert.Y, robust=False)
    spts = _sample_points(sys, cert.stability_region, sdims, density, u_mode, suse_u, False)

    def ev_stab(x, u, w):
        return lambda_max(assemble_strong_lmi(sys, Wf, Yf, cert.lam, x, u))

    stab = _scan(spts, ev_stab, cert.margin)
    worst = gain if gain.worst_margin >= stab.worst_margin else stab
    rep = VerificationReport(worst.worst_margin, worst.worst_point, gain.grid_size + stab.grid_size,
                             gain.passed and stab.passed, cert.margin)
    rep.details.update(gain=gain, stability=stab)
    return rep


# synthesis ---------------------------------------------------------------------------

def _violators(report: VerificationReport, points, limit: int = 8):
    """Refined-grid points with the worst margins that fail the requirement."""
    m = report.details["margins"]
    bad = np.nonzero(m > -report.required_margin)[0]
    if bad.size == 0:
        return []
    # local maxima along the scan order first, then the largest overall
    order = bad[np.argsort(-m[bad], kind="stable")]
    chosen = []
    for i in order:
        if all(abs(int(i) - j) > 2 for j in chosen):
            chosen.append(int(i))
        if len(chosen) >= limit:
            break
    return [points[i] for i in sorted(chosen)]


def _default_vars(sys: ControlAffineSystem) -> list[str]:
    dep = [s for s in sys.state_names if sys.jacobian_poly.depends_on(s) or sys.B.depends_on(s)]
    return dep


def synthesize_ccm(sys: ControlAffineSystem, region: Region, lam: float, *, w_degree: int = 0,
                   y_degree: int = 2, w_vars: Sequence[str] | None = None, y_vars: Sequence[str] | None = None,
                   density: int = DEFAULT_DENSITY, alpha1: float = ALPHA1_FLOOR, refinement: int = 10,
                   u_mode: str = "endpoints", max_rounds: int = 6, w_max: float = 1.0,
                   y_max: float | None = None, solver: SolveOptions | None = None) -> CcmCertificate:
    """Search for a CCM ``(W, Y)`` with rate ``lam`` on ``region``.

    ``W`` is polynomial of degree ``w_degree`` in ``w_vars`` (default: the
    states the Jacobian depends on) and ``Y`` of degree ``y_degree`` in
    ``y_vars``. The conditions are homogeneous in ``(W, Y)``, so the scale is
    fixed by ``alpha1 I <= W <= w_max I`` and the solver maximizes the margin.
    Margin maximization favours large ``Y`` and hence stiff closed loops;
    ``y_max`` caps the spectral norm of ``Y`` at the grid points.
    Raises :class:`SynthesisFailed` if the solver cannot make the
    gridded conditions strictly negative or the refined re-check keeps failing.
    """
    if density < 3:
        raise InputError("grid density must be at least 3 points per dimension")
    if lam < 0:
        raise InputError("rate must be non-negative")
    default = _default_vars(sys)
    w_vars = list(default if w_vars is None else w_vars) if w_degree > 0 else []
    y_vars = list(default if y_vars is None else y_vars) if y_degree > 0 else []
    param = _Parametrization(sys, region, w_vars, w_degree, y_vars, y_degree)
    W_const = w_degree == 0
    dims = _relevant_state_dims(sys, w_vars, W_const, param.y_idx, robust=False)
    use_u = _u_relevant(sys, W_const)
    points = _sample_points(sys, region, dims, density, u_mode, use_u, False)
    opts = solver or SolveOptions()
    theta = param.initial()
    extra: list = []
    report = None
    for rnd in range(max_rounds):
        pd = _point_data(sys, points + extra)
        fams = _families(pd, param, "strong", lam=lam)
        zs = [d["z"] for _, d in pd]
        fams += _floor_families(param, zs, alpha1) + _ceiling_families(param, zs, w_max)
        if y_max is not None:
            fams += _gain_cap_families(param, zs, y_max)
        report = minimize_max_eig(fams, theta, opts)
        theta = report.theta
        if not report.feasible:
            raise SynthesisFailed(
                f"gridded CCM conditions infeasible (best max eigenvalue {report.objective:.3g})", report)
        W, Y = param.build(theta)
        cert = CcmCertificate(W, Y, lam, region, alpha1, grid_density=density, model=sys.name,
                              extra_points=np.array([p[0] for p in extra]) if extra else None,
                              solve_report=report)
        ver = verify_certificate(cert, sys, refinement, u_mode=u_mode)
        cert.verification = ver
        if ver.passed:
            cert.alpha1, cert.alpha2 = _metric_bounds(sys, W, region, dims, _refined_density(density, refinement))
            return cert
        fine = _ccm_verify_points(sys, cert, region, _refined_density(density, refinement), u_mode)
        new = _violators(ver, fine)
        log.info("CCM round %d: refined check failed (worst %.3g); adding %d points", rnd, ver.worst_margin,
                 len(new))
        extra += new
    raise SynthesisFailed("refined verification kept failing", report, ver)


def _metric_bounds(sys, W: PolyMatrix, region: Region, dims, density) -> tuple[float, float]:
    """Extreme eigenvalues of ``M = W^{-1}`` over the grid."""
    pts = region.state_grid(dims, density)
    Z = np.hstack([pts, np.zeros((len(pts), sys.m))])
    ev = np.linalg.eigvalsh(symmetrize(W(Z)))
    return float(1.0 / ev[:, -1].max()), float(1.0 / ev[:, 0].min())


@dataclass
class RobustSearch:
    """Bookkeeping of a gain-bound search, kept for reports."""

    queries: list = field(default_factory=list)
    rounds: int = 0


def synthesize_robust(sys: ControlAffineSystem, C, D, radius: float | None = None, *,
                      region: Region | None = None, lam_min: float = 0.5,
                      alpha_lo: float = 0.01, alpha_hi: float = 100.0, rel_tol: float = 1e-2,
                      density: int = DEFAULT_DENSITY, w_degree: int = 0, y_degree: int = 2,
                      y_vars: Sequence[str] | None = None, stability_factor: float = 10.0,
                      alpha1: float = ALPHA1_FLOOR, refinement: int = 10, max_rounds: int = 8,
                      solver: SolveOptions | None = None) -> RobustCertificate:
    """Smallest certified differential gain bound on a region.

    Each feasibility query imposes the gain-bound block at every grid point
    of the region, the strong-form condition with rate ``lam_min`` on the
    region enlarged by ``stability_factor``, and ``W >= alpha1 I``. The bound
    is located by relative bisection in ``[alpha_lo, alpha_hi]``; the final
    certificate is re-verified on a grid refined by ``refinement`` and the
    search repeats with refined-grid violators added until that check passes.

    ``radius`` is a shortcut for a box region that bounds the states the
    conditions depend on by ``radius`` and leaves the others free.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    D = np.atleast_2d(np.asarray(D, dtype=float))
    if C.shape[1] != sys.n or D.shape != (C.shape[0], sys.m):
        raise InputError(f"C must be q x {sys.n} and D q x {sys.m}")
    default = _default_vars(sys)
    y_vars = list(default if y_vars is None else y_vars) if y_degree > 0 else []
    if region is None:
        if radius is None or not radius > 0:
            raise InputError("give a positive radius or an explicit region")
        dims_needed = set(default) | set(y_vars) | {s for s in sys.state_names if sys.B_w.depends_on(s)}
        hw = tuple(float(radius) if s in dims_needed else math.inf for s in sys.state_names)
        region = Region.box((0.0,) * sys.n, hw)
    stab_region = region.scaled(stability_factor)
    param = _Parametrization(sys, region, [], w_degree, y_vars, y_degree) if w_degree == 0 else \
        _Parametrization(sys, region, default, w_degree, y_vars, y_degree)
    W_const = w_degree == 0
    dims = _relevant_state_dims(sys, [], W_const, param.y_idx, robust=True)
    use_u = _u_relevant(sys, W_const)
    gain_pts = _sample_points(sys, region, dims, density, "endpoints", use_u, not W_const and sys.p_w > 0)
    sdims = _relevant_state_dims(sys, [], W_const, param.y_idx, robust=False)
    stab_pts = _sample_points(sys, stab_region, sdims, density, "endpoints", use_u, False)
    opts = solver or SolveOptions()
    stab_fams = _families(_point_data(sys, stab_pts), param, "strong", lam=lam_min)
    floor = _floor_families(param, [sys._z(p[0], p[1]) for p in gain_pts], alpha1)
    extra_gain: list = []
    extra_stab: list = []
    search = RobustSearch()
    warm = {"theta": param.initial()}

    def families(alpha):
        g = _families(_point_data(sys, gain_pts + extra_gain, robust=True), param, "robust",
                      alpha=alpha, C=C, D=D)
        s = stab_fams + (_families(_point_data(sys, extra_stab), param, "strong", lam=lam_min)
                         if extra_stab else [])
        return g + s + floor

    def solve(alpha, early: bool):
        o = replace(opts, stop_below=-opts.margin if early else None,
                    stop_above=-opts.margin if early else None)
        rep = minimize_max_eig(families(alpha), warm["theta"], o)
        search.queries.append((alpha, rep.objective, rep.iterations, rep.feasible))
        log.debug("alpha=%.5g objective=%.3g iters=%d", alpha, rep.objective, rep.iterations)
        return rep

    memo: dict[float, bool] = {}

    def feasible(alpha):
        if alpha not in memo:
            rep = solve(alpha, early=True)
            if rep.feasible:
                warm["theta"] = rep.theta
            memo[alpha] = rep.feasible
        return memo[alpha]

    lo = alpha_lo
    report = None
    ver = None
    for rnd in range(max_rounds):
        search.rounds = rnd + 1
        memo.clear()
        if feasible(lo):
            alpha = lo
        else:
            if not feasible(alpha_hi):
                raise SynthesisFailed(f"gain bound {alpha_hi} is not achievable on this region",
                                      search.queries and solve(alpha_hi, early=False))
            try:
                alpha = bisect_scalar(feasible, lo, alpha_hi, rel_tol, relative=True)
            except NoCrossingError:
                alpha = alpha_hi
        report = solve(alpha, early=False)
        if not report.feasible:
            # the interior-point polish can only improve on the early-stopped iterate
            raise SynthesisFailed("certificate polish lost feasibility", report)
        warm["theta"] = report.theta
        W, Y = param.build(report.theta)
        cert = RobustCertificate(W, Y, alpha, region, C, D, lam_min, stab_region, alpha1, grid_density=density,
                                 model=sys.name, solve_report=report)
        ver = verify_certificate(cert, sys, refinement)
        cert.verification = ver
        if ver.passed:
            cert.alpha1, cert.alpha2 = _metric_bounds(sys, W, region, dims, density)
            cert.extra_points = np.array([p[0] for p in extra_gain]) if extra_gain else None
            cert.search = search
            return cert
        fine_density = _refined_density(density, refinement)
        gain_rep, stab_rep = ver.details["gain"], ver.details["stability"]
        if not gain_rep.passed:
            fine = _sample_points(sys, region, dims, fine_density, "endpoints", use_u,
                                  not W_const and sys.p_w > 0)
            extra_gain += _violators(gain_rep, fine)
        if not stab_rep.passed:
            fine = _sample_points(sys, stab_region, sdims, fine_density, "endpoints", use_u, False)
            extra_stab += _violators(stab_rep, fine)
        log.info("robust round %d: alpha=%.4g failed refined check (worst %.3g)", rnd, alpha, ver.worst_margin)
        lo = max(alpha_lo, alpha / (1 + rel_tol))
        if lo >= alpha_hi:
            break
    raise SynthesisFailed("refined verification kept failing", report, ver)


# differential L2 analysis --------------------------------------------------------

def verify_differential_l2(sys: ControlAffineSystem, M, alpha: float, points, C=None, D=None,
                           u=None) -> VerificationReport:
    """Check the differential storage-function LMI at each state in ``points``.

    ``[[Mdot + A'M + MA + C'C, M B_w + C'D], [B_w'M + D'C, D'D - alpha^2 I]] <= 0``
    with ``C = dg/dx`` and ``D = dg/dw`` (constant arrays, default from the
    system's output map with ``D = 0``).
    """
    Mf = _field(M, sys)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    u0 = np.zeros(sys.m) if u is None else np.asarray(u, dtype=float)

    def ev(x, uu, w):
        A = sys.jacobian(x, uu)
        Mx = Mf(x)
        Mdot = Mf.rate(x, uu, sys.dynamics(x, uu))
        Bw = sys.disturbance_matrix(x)
        Cx = sys.output_jacobians(x, uu)[0] if C is None else np.atleast_2d(C)
        Dx = np.zeros((Cx.shape[0], sys.p_w)) if D is None else np.atleast_2d(D)
        top = Mdot + A.T @ Mx + Mx @ A + Cx.T @ Cx
        off = Mx @ Bw + Cx.T @ Dx
        S = np.block([[top, off], [off.T, Dx.T @ Dx - alpha ** 2 * np.eye(sys.p_w)]])
        return lambda_max(symmetrize(S))

    return _scan([(x, u0, np.zeros(sys.p_w)) for x in pts], ev, 0.0)


# converse constructions -------------------------------------------------------------

@dataclass
class FblinMetric:
    """Metric and differential gain of a feedback-linearizable system."""

    theta_jac: Callable
    X: np.ndarray
    L: np.ndarray
    ubar_dx: Callable | None = None
    beta: Callable | None = None

    def metric(self, x) -> np.ndarray:
        Th = np.atleast_2d(self.theta_jac(x))
        return symmetrize(Th.T @ self.X @ Th)

    def gain(self, x, u=None) -> np.ndarray:
        Th = np.atleast_2d(self.theta_jac(x))
        beta = np.eye(self.L.shape[0]) if self.beta is None else np.atleast_2d(self.beta(x))
        K = beta @ self.L @ Th
        if self.ubar_dx is not None:
            K = K + np.atleast_2d(self.ubar_dx(x, u))
        return K

    def W(self, x) -> np.ndarray:
        return np.linalg.inv(self.metric(x))

    def Y(self, x, u=None) -> np.ndarray:
        return self.gain(x, u) @ self.W(x)


def fblin_metric(theta_jac: Callable, X, L, ubar_dx: Callable | None = None, beta: Callable | None = None,
                 samples=None) -> FblinMetric:
    """Converse metric ``M(x) = Theta(x)' X Theta(x)`` for a feedback-linearizable system.

    ``X`` solves the Lyapunov inequality of the linearized pair with gain
    ``L``; the differential gain is ``d ubar/dx + beta(x) L Theta(x)``, where
    ``ubar_dx(x, u)`` is the partial derivative of the linearizing feedback
    at fixed ``v`` (``v`` being the input that produces ``u``).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if np.max(np.abs(X - X.T)) > 1e-9 or np.linalg.eigvalsh(symmetrize(X))[0] <= 0:
        raise InputError("X must be symmetric positive definite")
    for x in ([] if samples is None else samples):
        if abs(np.linalg.det(np.atleast_2d(theta_jac(x)))) < 1e-12:
            raise InputError(f"Theta is singular at {x}")
    return FblinMetric(theta_jac, symmetrize(X), np.atleast_2d(np.asarray(L, dtype=float)), ubar_dx, beta)


@dataclass
class MechanicalMetric:
    """Metric over ``(d qd, d q)`` with the PD law that makes it contract."""

    H: Callable
    C: Callable
    D: Callable
    K_P: np.ndarray
    K_D: np.ndarray
    G: Callable | None = None

    def metric(self, q, qd) -> np.ndarray:
        q, qd = np.atleast_1d(q), np.atleast_1d(qd)
        H = np.atleast_2d(self.H(q))
        if np.linalg.eigvalsh(symmetrize(H))[0] <= 0:
            raise InputError(f"H(q) is not positive definite at q={q}")
        R = np.atleast_2d(self.C(q, qd)) + np.atleast_2d(self.D(q, qd)) + self.K_D
        KP = self.K_P
        return symmetrize(np.block([[H @ KP @ H, H @ KP @ R], [R.T @ KP @ H, H + R.T @ KP @ R]]))

    def control(self, q, qd, q0) -> np.ndarray:
        q, qd, q0 = np.atleast_1d(q), np.atleast_1d(qd), np.atleast_1d(q0)
        G = np.zeros_like(q) if self.G is None else np.atleast_1d(self.G(q))
        return -self.K_D @ qd - self.K_P @ (q - q0) + G


def mechanical_metric(H: Callable, C: Callable, D: Callable, K_P, K_D, G: Callable | None = None) -> MechanicalMetric:
    """Metric ``[[H K_P H, H K_P R], [R' K_P H, H + R' K_P R]]`` with ``R = C + D + K_D``.

    ``K_P = 0`` is accepted so that the kinetic-energy limit can be formed.
    """
    K_P = np.atleast_2d(np.asarray(K_P, dtype=float))
    K_D = np.atleast_2d(np.asarray(K_D, dtype=float))
    for name, K in (("K_P", K_P), ("K_D", K_D)):
        if np.max(np.abs(K - K.T)) > 1e-12 or np.linalg.eigvalsh(symmetrize(K))[0] < -1e-12:
            raise InputError(f"{name} must be symmetric positive semidefinite")
    return MechanicalMetric(H, C, D, K_P, K_D, G)


# certificate files ------------------------------------------------------------------

def _fmt_vec(v) -> str:
    return ", ".join(repr(float(a)) for a in np.atleast_1d(v))


def _fmt_mat(M) -> str:
    return "; ".join(_fmt_vec(r) for r in np.atleast_2d(M))


def _parse_vec(s: str) -> tuple[float, ...]:
    s = s.strip()
    return tuple(float(a) for a in s.split(",")) if s else ()


def _parse_mat(s: str) -> np.ndarray:
    return np.array([_parse_vec(r) for r in s.split(";")])


def certificate_to_text(cert) -> str:
    r = cert.region
    meta = {
        "type": cert.kind,
        "model": cert.model,
        "lambda": repr(float(cert.lam)),
        "region_kind": r.kind,
        "region_center": _fmt_vec(r.center),
        "region_half_widths": _fmt_vec(r.half_widths),
        "u_half_widths": _fmt_vec(r.u_half_widths),
        "w_half_widths": _fmt_vec(r.w_half_widths),
        "w_floor": repr(float(cert.w_floor)),
        "alpha1": repr(float(cert.alpha1)),
        "alpha2": repr(float(cert.alpha2)),
        "margin": repr(float(cert.margin)),
        "grid_density": str(cert.grid_density),
        "variables": ", ".join(cert.W.variables),
    }
    if isinstance(cert, RobustCertificate):
        meta.update({
            "alpha": repr(float(cert.alpha)),
            "C": _fmt_mat(cert.C),
            "D": _fmt_mat(cert.D),
            "stability_half_widths": _fmt_vec(cert.stability_region.half_widths),
        })
    if cert.extra_points is not None and len(cert.extra_points):
        meta["extra_points"] = _fmt_mat(cert.extra_points)
    lines = ["[meta]"] + [f"{k} = {v}" for k, v in meta.items()]
    lines += ["", "[W]"] + cert.W.to_lines()
    lines += ["", "[Y]"] + cert.Y.to_lines()
    if isinstance(cert, CcmCertificate) and cert.rho is not None:
        lines += ["", "[rho]", cert.rho.to_text()]
    return "\n".join(lines) + "\n"


def certificate_from_text(text: str):
    from .sysmodel import _split_sections

    sec = _split_sections(text)
    for s in ("meta", "W", "Y"):
        if s not in sec:
            raise InputError(f"certificate lacks section [{s}]")
    meta = {}
    for line in sec["meta"]:
        k, _, v = line.partition("=")
        meta[k.strip()] = v.strip()
    variables = tuple(s.strip() for s in meta["variables"].split(","))
    W = PolyMatrix.from_lines(sec["W"], variables, symmetric=True)
    Y = PolyMatrix.from_lines(sec["Y"], variables)
    region = Region(meta["region_kind"], _parse_vec(meta["region_center"]), _parse_vec(meta["region_half_widths"]),
                    _parse_vec(meta.get("u_half_widths", "")), _parse_vec(meta.get("w_half_widths", "")))
    extra = _parse_mat(meta["extra_points"]) if "extra_points" in meta else None
    common = dict(w_floor=float(meta["w_floor"]), alpha1=float(meta["alpha1"]), alpha2=float(meta["alpha2"]),
                  grid_density=int(meta["grid_density"]), margin=float(meta["margin"]), model=meta.get("model", ""),
                  extra_points=extra)
    if meta["type"] == "ccm":
        rho = PolyExpr.parse(sec["rho"][0], variables) if "rho" in sec else None
        return CcmCertificate(W, Y, float(meta["lambda"]), region, rho=rho, **common)
    if meta["type"] == "robust":
        stab = replace(region, half_widths=_parse_vec(meta["stability_half_widths"]))
        return RobustCertificate(W, Y, float(meta["alpha"]), region, _parse_mat(meta["C"]), _parse_mat(meta["D"]),
                                 float(meta["lambda"]), stab, **common)
    raise InputError(f"unknown certificate type {meta['type']!r}")


def save_certificate(cert, path) -> None:
    Path(path).write_text(certificate_to_text(cert))


def load_certificate(path):
    return certificate_from_text(Path(path).read_text())
