import io

import numpy as np
import pytest

from ccmkit.ccm import Region, assemble_rho_lmi
from ccmkit.errors import InputError
from ccmkit.lmi import lambda_max
from ccmkit.observer import (DiffeoCandidate, ReducedObserverDesign, check_diffeo_conditions, check_m22_condition,
                             check_ocm, coordinate_normalize, cosimulate_observer, polarisation_gap,
                             simulate_observer)
from ccmkit.poly import PolyExpr, PolyMatrix
from ccmkit.sim import NoiseStream, fit_decay_rate, integrate
from ccmkit.sysmodel import builtin, make_system

PHI_GRID = [[0.0, p] for p in np.linspace(-5.0, 5.0, 81)]


def _design(m21=-2.0, m22=1.0, lam=0.5):
    return ReducedObserverDesign(1, [[m21]], [[m22]], lam)


def _linear(A, C=None, B=None):
    """x' = A x (+ B u), y = C x, from numeric matrices."""
    A = np.atleast_2d(A)
    n = A.shape[0]
    xs = [f"x{i + 1}" for i in range(n)]

    def lin(row):
        return "0 " + " ".join(f"{'-' if v < 0 else '+'} {abs(float(v))!r} * {x}" for v, x in zip(row, xs))

    B = np.zeros((n, 1)) if B is None else np.atleast_2d(B)
    us = [f"u{j + 1}" for j in range(B.shape[1])]
    g = None if C is None else [lin(r) for r in np.atleast_2d(C)]
    return make_system("linear", xs, us, f=[lin(r) for r in A], B=B.tolist(), g=g)


# coordinates ------------------------------------------------------------------------

def test_normalize_identity():
    assert np.array_equal(coordinate_normalize([[1.0, 0.0]]), np.eye(2))


def test_normalize_swap():
    assert np.array_equal(coordinate_normalize([[0.0, 1.0]]), [[0.0, 1.0], [1.0, 0.0]])


def test_normalize_random(rng):
    for _ in range(10):
        C = rng.standard_normal((2, 4))
        T = coordinate_normalize(C)
        assert np.max(np.abs(C @ np.linalg.inv(T) - np.hstack([np.eye(2), np.zeros((2, 2))]))) <= 1e-10
        R = T[2:]
        assert np.allclose(R @ R.T, np.eye(2), atol=1e-12)


def test_normalize_rank_deficient():
    with pytest.raises(InputError):
        coordinate_normalize([[1.0, 2.0], [2.0, 4.0]])


# reduced design ---------------------------------------------------------------------

def test_design_derived_matrices():
    d = ReducedObserverDesign(1, [[-3.0]], [[1.5]], 0.5)
    assert np.allclose(d.P, [[-2.0, 1.0]])
    assert np.allclose(d.C_plus, [[1.0], [2.0]])
    assert np.allclose(d.P @ d.C_plus, 0.0)


def test_design_rejects_indefinite_m22():
    with pytest.raises(InputError):
        ReducedObserverDesign(1, [[-2.0]], [[-1.0]], 0.5)
    with pytest.raises(InputError):
        ReducedObserverDesign(1, [[-2.0, 0.0]], [[1.0]], 0.5)


def test_m22_boundary_passes(mg):
    rep = check_m22_condition(mg, _design(), PHI_GRID)
    assert rep.passed
    assert abs(rep.worst_margin) <= 1e-12
    assert rep.worst_point[0][1] == pytest.approx(-1.0)


def test_m22_fails_above_threshold(mg):
    rep = check_m22_condition(mg, _design(-1.9), PHI_GRID)
    assert not rep.passed
    assert rep.worst_margin == pytest.approx(0.2)


@pytest.mark.parametrize("m21,ok", [(-2.0 - 1e-4, True), (-2.0 + 1e-4, False), (-3.0, True), (-1.0, False)])
def test_m22_threshold_sign(mg, m21, ok):
    assert check_m22_condition(mg, _design(m21), PHI_GRID).passed is ok


def test_m22_margin_closed_form(mg):
    # M21 - M22 (3 phi + 1.5 phi^2 - lam), doubled
    d = _design(-2.5, 2.0, 0.3)
    rep = check_m22_condition(mg, d, PHI_GRID)
    phi = np.array(PHI_GRID)[:, 1]
    expected = 2 * (-2.5 - 2.0 * (3 * phi + 1.5 * phi ** 2 - 0.3))
    assert np.allclose(rep.details["margins"], expected, atol=1e-12)


# simulation -------------------------------------------------------------------------

def test_observer_exact_initialisation(mg):
    d = _design()
    x0 = [0.2, 0.2]
    truth = integrate(lambda t, x: mg.dynamics(x, [0.0]), x0, 0.0, 10.0, 1e-3)
    run = simulate_observer(mg, d, truth.x[:, :1], x0, (0.0, 10.0), 1e-3)
    # the held samples of y make this a first-order scheme in the measurement
    assert np.max(np.abs(run.x_hat - truth.x)) <= 1e-3
    run = cosimulate_observer(mg, d, x0, x0, (0.0, 10.0), 1e-3)
    assert np.max(np.abs(run.x_hat - run.x)) <= 1e-6


def test_observer_exact_initialisation_builtins():
    for name in ("double-integrator", "mass-spring-damper"):
        sys_ = builtin(name)
        n = sys_.n
        d = ReducedObserverDesign(1, -np.ones((n - 1, 1)), np.eye(n - 1), 0.1)
        x0 = np.linspace(0.3, -0.2, n)
        run = cosimulate_observer(sys_, d, x0, x0, (0.0, 5.0), 1e-2)
        assert np.max(np.abs(run.x_hat - run.x)) <= 1e-6


def test_observer_noiseless_decay(mg):
    run = cosimulate_observer(mg, _design(), [0.2, 0.2], [0.2, 2.2], (0.0, 10.0), 0.01)
    err = np.abs(run.x_hat[:, 1] - run.x[:, 1])
    assert err[0] == pytest.approx(2.0)
    assert fit_decay_rate(run.t, err) >= 0.45


def test_observer_noise_band(mg):
    run = cosimulate_observer(mg, _design(), [0.2, 0.2], [0.2, 2.2], (0.0, 10.0), 0.01, NoiseStream(7, 0.2))
    err = run.x_hat[:, 1] - run.x[:, 1]
    late = run.t >= 5.0
    assert np.sqrt(np.mean(err[late] ** 2)) < 0.5


def test_observer_noise_reproducible(mg):
    def go():
        buf = io.StringIO()
        cosimulate_observer(mg, _design(), [0.2, 0.2], [0.2, 2.2], (0.0, 2.0), 0.01,
                            NoiseStream(3, 0.2)).to_csv(buf)
        return buf.getvalue()

    a = go()
    assert a == go()
    assert a.splitlines()[0] == "t,y1,xhat1,xhat2,x1,x2"


def test_observer_rejects_bad_step(mg):
    with pytest.raises(InputError):
        simulate_observer(mg, _design(), lambda t: [0.0], [0.0, 0.0], (0.0, 1.0), 0.0)


# observer contraction metric ----------------------------------------------------------

def test_ocm_scalar():
    sys_ = _linear([[1.0]], C=[[1.0]])
    rep = check_ocm(sys_, [[1.0]], 4.0, 0.5, [[0.0], [1.0]])
    assert rep.passed
    assert rep.worst_margin == pytest.approx(-1.0)


def test_ocm_no_measurement_unstable():
    sys_ = _linear([[0.5, 1.0], [0.0, 0.2]], C=[[0.0, 0.0]])
    for rho in (0.0, 1.0, 1e6):
        rep = check_ocm(sys_, np.eye(2), rho, 0.0, [[0.0, 0.0]])
        assert not rep.passed
        assert not rep.details["kernel"].passed


def test_ocm_kernel_matches_m22(mg):
    d = _design(-2.3, 1.2, 0.5)
    M = d.metric(1e3)
    rep = check_ocm(mg, M, 1e6, d.lam, PHI_GRID, C=[[1.0, 0.0]])
    ref = check_m22_condition(mg, d, PHI_GRID)
    assert np.max(np.abs(rep.details["kernel"].details["margins"] - ref.details["margins"])) <= 1e-8


def test_ocm_duality_with_rho_lmi(rng):
    for _ in range(30):
        n, p = 3, int(rng.integers(1, 3))
        A = rng.standard_normal((n, n))
        C = rng.standard_normal((p, n))
        G = rng.standard_normal((n, n))
        M = G @ G.T + 0.5 * np.eye(n)
        rho, lam = float(rng.uniform(0.0, 3.0)), float(rng.uniform(0.0, 1.0))
        x = rng.standard_normal(n)
        obs = check_ocm(_linear(A, C=C), M, rho, lam, [x]).worst_margin
        dual = lambda_max(assemble_rho_lmi(_linear(A.T, B=C.T), M, rho, lam, x))
        assert obs == pytest.approx(dual, abs=1e-10)


# diffeomorphism conditions --------------------------------------------------------------

def _identity_candidate(lam, mu=1.0):
    sys_ = _linear(-np.eye(2), C=[[1.0, 0.0]])
    r = PolyMatrix([[PolyExpr.var(sys_.variables, "x2")]], sys_.variables, shape=(1, 1))
    return sys_, DiffeoCandidate(r, np.eye(2), 0.0, mu, lam)


GRID2 = Region.box((0.0, 0.0), (1.0, 1.0)).state_grid([0, 1], 5)


def test_diffeo_identity_closed_form():
    # Phi = I, F = -I: (Phi + F) = 0 and the contraction block is (4 lam - 3) I
    for lam, ok in ((0.25, True), (0.75, True), (0.76, False)):
        sys_, cand = _identity_candidate(lam)
        rep = check_diffeo_conditions(sys_, cand, GRID2)
        assert rep.details["contraction"].worst_margin == pytest.approx(4 * lam - 3, abs=1e-12)
        assert rep.details["invertibility"].worst_margin == pytest.approx(0.0, abs=1e-12)
        assert rep.passed is ok


def test_diffeo_mu_too_large():
    sys_, cand = _identity_candidate(0.1, mu=1.01)
    rep = check_diffeo_conditions(sys_, cand, GRID2)
    assert not rep.details["invertibility"].passed
    assert not rep.passed


def test_diffeo_nonlinear_coordinates():
    # phi = (x1, x2 + x1^2) on x' = -x: Phi = [[1, 0], [2 x1, 1]]
    sys_ = _linear(-np.eye(2), C=[[1.0, 0.0]])
    V = sys_.variables
    r = PolyMatrix([[PolyExpr.parse("x2 + x1^2", V)]], V, shape=(1, 1))
    rep = check_diffeo_conditions(sys_, DiffeoCandidate(r, np.eye(2), 0.0, 0.5, 0.1), [[0.3, 0.0]])
    Phi = np.array([[1.0, 0.0], [0.6, 1.0]])
    F = np.array([[-1.0, 0.0], [-1.2, -1.0]])
    S = (Phi + F).T @ (Phi + F) + np.eye(2) - (Phi - F) - (Phi - F).T + 0.4 * np.eye(2)
    assert rep.details["contraction"].worst_margin == pytest.approx(np.linalg.eigvalsh(S).max(), abs=1e-12)


def test_diffeo_rejects_bad_multipliers():
    sys_, _ = _identity_candidate(0.1)
    r = PolyMatrix([[PolyExpr.var(sys_.variables, "x2")]], sys_.variables, shape=(1, 1))
    with pytest.raises(InputError):
        DiffeoCandidate(r, -np.eye(2), 0.0, 1.0, 0.1)
    with pytest.raises(InputError):
        DiffeoCandidate(r, np.eye(2), 0.0, 0.0, 0.1)


def test_polarisation_bound(rng):
    for _ in range(100):
        n = int(rng.integers(1, 5))
        Phi, F = rng.standard_normal((n, n)), rng.standard_normal((n, n))
        G = rng.standard_normal((n, n))
        Q = G @ G.T + 0.1 * np.eye(n)
        assert polarisation_gap(Phi, F, Q) <= 1e-9
