"""Feedback laws from contraction certificates.

Two controllers are provided:

* the path-integral law, which integrates the differential feedback
  ``du/ds = K(gamma(s), u(s)) gamma_s(s)`` along a minimal geodesic from the
  target state to the current state, starting from the target control;
* the energy-CLF law, which adds the minimum-norm correction to the target
  control that makes the geodesic energy decrease at a prescribed rate.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .ccm import verify_certificate
from .errors import ControllabilityError, ControllerError, InputError
from .geodesic import GeodesicOptions, GeodesicResult, MetricField, compute_geodesic, first_variation
from .sysmodel import ControlAffineSystem

log = logging.getLogger(__name__)


class RegionWarning(UserWarning):
    """A certificate was used at a state outside the region it was verified on."""


def _check_affine_in_u(cert, sys: ControlAffineSystem) -> None:
    for u in sys.input_names:
        if any(cert.Y[i, j].degree_in(u) > 1 for i in range(cert.Y.shape[0]) for j in range(cert.Y.shape[1])):
            raise InputError(f"Y must be affine in {u}")


class DifferentialGain:
    """``K(x, u) = Y(x, u) W(x)^{-1}`` for a certificate.

    ``outside`` is set after each evaluation at a state that lies outside the
    certificate region (a :class:`RegionWarning` is also emitted).
    """

    def __init__(self, cert, sys: ControlAffineSystem):
        _check_affine_in_u(cert, sys)
        self.cert = cert
        self.sys = sys
        self.outside = False

    def __call__(self, x, u=None) -> np.ndarray:
        sys = self.sys
        x = np.asarray(x, dtype=float)
        u = np.zeros(sys.m) if u is None else np.asarray(u, dtype=float)
        self.outside = not self.cert.region.contains(x)
        if self.outside:
            warnings.warn(f"state {x} is outside the certificate region", RegionWarning, stacklevel=2)
        z = sys._z(x, u)
        W = self.cert.W(z)
        Y = self.cert.Y(z)
        return np.linalg.solve(W, Y.T).T  # W is symmetric

    def along(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Gains at states ``X`` split as ``K(x, u) = K0(x) + sum_j u_j K_j(x)``.

        Returns ``K0`` with shape ``(k, m, n)`` and ``Ku`` with shape ``(k, m, m, n)``.
        """
        sys = self.sys
        X = np.atleast_2d(X)
        k = len(X)
        Z0 = np.hstack([X, np.zeros((k, sys.m))])
        W = self.cert.W(Z0)
        Y0 = self.cert.Y(Z0)
        K0 = np.swapaxes(np.linalg.solve(W, np.swapaxes(Y0, 1, 2)), 1, 2)
        Ku = np.zeros((k, sys.m) + K0.shape[1:])
        for j in range(sys.m):
            if not self.cert.Y.depends_on(sys.input_names[j]):
                continue
            Zj = Z0.copy()
            Zj[:, sys.n + j] = 1.0
            Yj = self.cert.Y(Zj) - Y0
            Ku[:, j] = np.swapaxes(np.linalg.solve(W, np.swapaxes(Yj, 1, 2)), 1, 2)
        return K0, Ku


def differential_gain(cert, sys: ControlAffineSystem, x, u=None) -> np.ndarray:
    """Differential feedback gain at ``(x, u)``; warns outside the certificate region."""
    return DifferentialGain(cert, sys)(x, u)


@dataclass
class PathIntegralController:
    """Path-integral feedback for a verified CCM certificate.

    Parameters
    ----------
    cert, sys
        Certificate and the system it certifies.
    geodesic
        Options for the geodesic solver; its ``N`` also sets the number of
        RK4 steps in ``s``.
    verify
        Re-verify the certificate if it carries no passing report.
    """

    cert: object
    sys: ControlAffineSystem
    geodesic: GeodesicOptions = field(default_factory=GeodesicOptions)
    verify: bool = True
    failures: int = 0
    last_u: np.ndarray | None = None
    last_path: object = None

    def __post_init__(self):
        rep = getattr(self.cert, "verification", None)
        if self.verify and (rep is None or not rep.passed):
            rep = verify_certificate(self.cert, self.sys)
            self.cert.verification = rep
            if not rep.passed:
                raise InputError(f"certificate fails verification (worst margin {rep.worst_margin:.3g})")
        self.gain = DifferentialGain(self.cert, self.sys)
        self.metric = MetricField.from_certificate(self.cert, self.sys)

    def control(self, x, xstar, ustar, t: float = 0.0) -> np.ndarray:
        """Control at state ``x`` for the target ``(xstar, ustar)``; raises on geodesic failure."""
        x = np.asarray(x, dtype=float)
        xstar = np.asarray(xstar, dtype=float)
        ustar = np.atleast_1d(np.asarray(ustar, dtype=float))
        if np.array_equal(x, xstar):
            return ustar.copy()
        for p in (x, xstar):
            if not self.cert.region.contains(p):
                warnings.warn(f"state {p} is outside the certificate region", RegionWarning, stacklevel=2)
        res = compute_geodesic(self.metric, xstar, x, self.geodesic, init=self.last_path)
        if not res.converged:
            raise ControllerError(f"geodesic from {xstar} to {x} did not converge")
        self.last_path = res.path
        return integrate_along(self.gain, res, ustar)

    def __call__(self, t, x, xstar, ustar) -> np.ndarray:
        """Control with the hold-last-value fallback on geodesic failure."""
        try:
            u = self.control(x, xstar, ustar, t)
        except ControllerError as exc:
            if self.last_u is None:
                raise
            self.failures += 1
            log.warning("t=%.4g: %s; holding previous control", t, exc)
            return self.last_u.copy()
        self.last_u = u
        return u


def integrate_along(gain: DifferentialGain, res: GeodesicResult, ustar) -> np.ndarray:
    """RK4 in ``s`` of ``du/ds = K(gamma(s), u) gamma_s(s)`` from ``u(0) = ustar``."""
    path = res.path
    N = path.N
    spline = CubicSpline(path.s, path.nodes, axis=0)
    s_eval = np.linspace(0.0, 1.0, 2 * N + 1)
    X = spline(s_eval)
    V = spline(s_eval, 1)
    K0, Ku = gain.along(X)
    r0 = np.einsum("kmn,kn->km", K0, V)  # drift part of du/ds
    ru = np.einsum("kjmn,kn->kmj", Ku, V)  # u-linear part

    def rhs(i, u):
        return r0[i] + ru[i] @ u

    u = np.array(ustar, dtype=float)
    h = 1.0 / N
    for k in range(N):
        i0, im, i1 = 2 * k, 2 * k + 1, 2 * k + 2
        k1 = rhs(i0, u)
        k2 = rhs(im, u + 0.5 * h * k1)
        k3 = rhs(im, u + 0.5 * h * k2)
        k4 = rhs(i1, u + h * k3)
        u = u + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return u


def path_integral_control(ctrl: PathIntegralController, x, xstar, ustar, t: float = 0.0) -> np.ndarray:
    return ctrl.control(x, xstar, ustar, t)


def clf_control(sys: ControlAffineSystem, metric: MetricField, result: GeodesicResult, x, xstar, xstar_dot,
                ustar, lam: float) -> np.ndarray:
    """Minimum-norm change of ``ustar`` making the geodesic energy decay at rate ``2 lam``.

    With ``a = B(x)' M(x) gamma_s(1)`` and ``c`` the first variation for
    ``x_dot = f(x) + B(x) ustar``, the condition is ``c + a'du <= -lam e``.
    Returns ``ustar`` if it already holds, otherwise
    ``ustar - (c + lam e) / |a|^2 * a``.
    """
    x = np.asarray(x, dtype=float)
    ustar = np.atleast_1d(np.asarray(ustar, dtype=float))
    if result.energy == 0.0:
        return ustar.copy()
    if not result.converged:
        raise ControllerError("energy-CLF control needs a converged geodesic")
    B = sys.input_matrix(x)
    x_dot = sys.dynamics(x, ustar)
    c = first_variation(metric, result, xstar_dot, x_dot)
    viol = c + lam * result.energy
    if viol <= 0:
        return ustar.copy()
    a = B.T @ metric(result.path.end) @ result.path.velocity(1)
    na = float(a @ a)
    if na == 0.0:
        raise ControllabilityError(f"B'M gamma_s vanishes at {x} while the decrease condition fails")
    return ustar - (viol / na) * a


@dataclass
class ClfController:
    """Energy-CLF feedback; the reference velocity comes from the model."""

    sys: ControlAffineSystem
    metric: MetricField
    lam: float
    geodesic: GeodesicOptions = field(default_factory=GeodesicOptions)
    last_path: object = None

    def __call__(self, t, x, xstar, ustar) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        xstar = np.asarray(xstar, dtype=float)
        res = compute_geodesic(self.metric, xstar, x, self.geodesic, init=self.last_path)
        if res.energy > 0:
            self.last_path = res.path
        xstar_dot = self.sys.dynamics(xstar, ustar)
        return clf_control(self.sys, self.metric, res, x, xstar, xstar_dot, ustar, self.lam)
