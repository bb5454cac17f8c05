import io
import math

import numpy as np
import pytest

from ccmkit.ctrl import PathIntegralController
from ccmkit.errors import InputError
from ccmkit.geodesic import GeodesicOptions, MetricField, compute_geodesic
from ccmkit.sim import (NoiseStream, Reference, Trajectory, ZohNoise, closed_loop, empirical_l2_ratio,
                        fit_decay_rate, gaussian, gaussian_array, integrate, time_grid,
                        variational_storage_check)
from ccmkit.sysmodel import make_system


def _zero(*_):
    return np.zeros(1)


@pytest.fixture(scope="module")
def lti():
    """x' = -x + w, y = x; the input does not enter."""
    return make_system("lti", ("x",), ("u",), f=["-x"], B=[[0]], B_w=[[1]], g=["x"])


# integrate -------------------------------------------------------------------------

def test_integrate_exponential():
    traj = integrate(lambda t, x: -x, [1.0], 0.0, 1.0, 0.01)
    assert abs(traj.x[-1, 0] - math.exp(-1.0)) <= 1e-8
    assert np.allclose(np.diff(traj.t), 0.01)


def test_integrate_constant():
    traj = integrate(lambda t, x: np.zeros_like(x), [0.3, -2.0], 0.0, 2.0, 0.1)
    assert np.array_equal(traj.x, np.tile([0.3, -2.0], (len(traj.t), 1)))


def test_integrate_richardson_fourth_order(mg):
    def field(t, x):
        return mg.dynamics(x, [0.0])

    ends = [integrate(field, [0.1, 0.1], 0.0, 2.0, h).x[-1] for h in (0.2, 0.1, 0.05)]
    ratio = np.linalg.norm(ends[0] - ends[1]) / np.linalg.norm(ends[1] - ends[2])
    # halving the step should shrink the change by 2^4
    assert 8.0 <= ratio <= 32.0


def test_time_grid_rejects_bad_step():
    with pytest.raises(InputError):
        time_grid(0.0, 1.0, 0.0)
    with pytest.raises(InputError):
        time_grid(1.0, 1.0, 0.1)


def test_trajectory_length_mismatch():
    with pytest.raises(InputError):
        Trajectory(np.arange(3.0), np.zeros((2, 1)))


# closed loop -----------------------------------------------------------------------

def test_closed_loop_particular_solution(mg):
    t = time_grid(0.0, 2.0, 0.01)
    ref = Reference.simulate(mg, [0.4, -0.2], lambda s: [0.3 * math.sin(s)], t)
    traj = closed_loop(mg, lambda tt, x, xs, us: us, ref, None, ref.x[0], (0.0, 2.0), 0.01)
    assert np.max(np.abs(traj.x - ref.x)) <= 1e-6


def test_closed_loop_rejects_bad_reference(mg):
    t = time_grid(0.0, 1.0, 0.01)
    ref = Reference.constant(mg, [1.0, 0.0], [0.0], t)
    with pytest.raises(InputError, match="reference"):
        closed_loop(mg, _zero, ref, None, [1.0, 0.0], (0.0, 1.0), 0.01)


def test_closed_loop_rejects_grid_mismatch(mg):
    ref = Reference.constant(mg, [0.0, 0.0], [0.0], time_grid(0.0, 1.0, 0.02))
    with pytest.raises(InputError, match="grid"):
        closed_loop(mg, _zero, ref, None, [0.0, 0.0], (0.0, 1.0), 0.01)


@pytest.fixture(scope="module")
def mg_run(mg, mg_cert):
    t = time_grid(0.0, 6.0, 0.01)
    ref = Reference.constant(mg, [0.0, 0.0], [0.0], t)
    ctrl = PathIntegralController(mg_cert, mg)
    return closed_loop(mg, ctrl, ref, None, [1.0, 1.0], (0.0, 6.0), 0.01)


def test_closed_loop_path_controller_decays(mg_run, mg_cert):
    assert mg_run.status == "ok"
    norm = np.linalg.norm(mg_run.x, axis=1)
    late = mg_run.t >= 0.5
    assert np.all(np.diff(norm[late]) <= 0.0)
    assert fit_decay_rate(mg_run.t[late], norm[late]) >= 0.9 * mg_cert.lam


def test_closed_loop_energy_non_increasing(mg, mg_cert, mg_run):
    metric = MetricField.from_certificate(mg_cert, mg)
    energies = [compute_geodesic(metric, [0.0, 0.0], mg_run.x[k]).energy for k in range(0, 301, 20)]
    for e0, e1 in zip(energies, energies[1:]):
        assert e1 <= 1.02 * e0


def test_closed_loop_bitwise_reproducible(mg, mg_robust_r1_sim):
    def run():
        t = time_grid(0.0, 1.0, 0.01)
        ref = Reference.constant(mg, [0.0, 0.0], [0.0], t)
        ctrl = PathIntegralController(mg_robust_r1_sim, mg, GeodesicOptions(starts=1))
        traj = closed_loop(mg, ctrl, ref, ZohNoise(NoiseStream(11, 1.0), 1, clamp=1.0), [0.2, 0.1],
                           (0.0, 1.0), 0.01)
        buf = io.StringIO()
        traj.to_csv(buf)
        return buf.getvalue()

    assert run() == run()


def test_trajectory_csv_columns(mg):
    t = time_grid(0.0, 0.1, 0.05)
    ref = Reference.constant(mg, [0.0, 0.0], [0.0], t)
    traj = closed_loop(mg, _zero, ref, [[0.0]] * 3, [0.0, 0.0], (0.0, 0.1), 0.05)
    buf = io.StringIO()
    traj.to_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "t,xstar1,xstar2,x1,x2,u1,w1,y1,ystar1"
    assert len(lines) == 4
    assert float(lines[2].split(",")[0]) == 0.05


# empirical gain ---------------------------------------------------------------------

def test_l2_ratio_sentinel(lti):
    t = time_grid(0.0, 1.0, 0.01)
    ref = Reference.constant(lti, [0.0], [0.0], t)
    a = closed_loop(lti, _zero, ref, None, [0.0], (0.0, 1.0), 0.01)
    b = closed_loop(lti, _zero, ref, None, [0.0], (0.0, 1.0), 0.01)
    assert math.isnan(empirical_l2_ratio(a, b))


def test_l2_ratio_lti_pulse(lti):
    t = time_grid(0.0, 20.0, 0.01)
    ref = Reference.constant(lti, [0.0], [0.0], t)
    pulse = np.where(t < 1.0, 1.0, 0.0)[:, None]
    traj = closed_loop(lti, _zero, ref, pulse, [0.0], (0.0, 20.0), 0.01)
    base = closed_loop(lti, _zero, ref, None, [0.0], (0.0, 20.0), 0.01)
    ratio = empirical_l2_ratio(traj, base)
    # closed form: int_0^1 (1 - e^-t)^2 + (1 - e^-1)^2 / 2, divided by 1
    exact = 1.0 - 2.0 * (1.0 - math.exp(-1.0)) + 0.5 * (1.0 - math.exp(-2.0)) + 0.5 * (1.0 - math.exp(-1.0)) ** 2
    assert ratio <= 1.0
    # the trapezoid rule smears the pulse edge over one step
    assert ratio == pytest.approx(exact, rel=1e-2)


def test_l2_ratio_needs_shared_grid(lti):
    t = time_grid(0.0, 1.0, 0.1)
    ref = Reference.constant(lti, [0.0], [0.0], t)
    a = closed_loop(lti, _zero, ref, [[1.0]] * 11, [0.0], (0.0, 1.0), 0.1)
    with pytest.raises(InputError):
        empirical_l2_ratio(a, a.truncated(5))


def test_l2_ratio_under_robust_certificate(mg, mg_robust_r1_sim):
    cert = mg_robust_r1_sim
    t = time_grid(0.0, 5.0, 0.01)
    ref = Reference.constant(mg, [0.0, 0.0], [0.0], t)
    base = closed_loop(mg, _zero, ref, None, [0.0, 0.0], (0.0, 5.0), 0.01)
    for seed in range(3):
        ctrl = PathIntegralController(cert, mg, GeodesicOptions(starts=1))
        traj = closed_loop(mg, ctrl, ref, ZohNoise(NoiseStream(seed, 1.0), 1, clamp=1.0), [0.0, 0.0],
                           (0.0, 5.0), 0.01)
        assert np.max(np.abs(traj.x[:, 0])) <= 1.0
        assert empirical_l2_ratio(traj, base) <= cert.alpha ** 2


def test_decay_rate_fit():
    t = np.linspace(0.0, 3.0, 31)
    assert fit_decay_rate(t, 2.0 * np.exp(-0.7 * t)) == pytest.approx(0.7, rel=1e-12)
    with pytest.raises(InputError):
        fit_decay_rate(t, np.zeros_like(t))


# noise -----------------------------------------------------------------------------

def test_gaussian_repeatable():
    s = NoiseStream(123, 0.2)
    assert gaussian(s, 17) == gaussian(NoiseStream(123, 0.2), 17)
    assert gaussian(s, 17) != gaussian(s, 18)
    assert gaussian(s, 17) != gaussian(NoiseStream(124, 0.2), 17)


def test_gaussian_statistics():
    draws = gaussian_array(NoiseStream(2024, 0.2), np.arange(1_000_000))
    assert abs(draws.mean()) <= 0.001
    assert abs(draws.std() - 0.2) <= 0.001


def test_gaussian_scalar_matches_vector():
    s = NoiseStream(5, 1.5)
    v = gaussian_array(s, np.arange(10))
    assert [gaussian(s, k) for k in range(10)] == list(v)


def test_gaussian_guards():
    with pytest.raises(InputError):
        NoiseStream(1, -0.1)
    with pytest.raises(InputError):
        gaussian(NoiseStream(1), -1)


def test_zoh_noise_held_and_clamped():
    w = ZohNoise(NoiseStream(3, 5.0), 1, rate=10.0, clamp=1.0)
    assert np.array_equal(w(0.0), w(0.099))
    assert not np.array_equal(w(0.0), w(0.1))
    vals = np.array([w(k / 10.0)[0] for k in range(200)])
    assert np.max(np.abs(vals)) <= 1.0
    assert w.clamped > 0


# storage inequality ------------------------------------------------------------------

def test_variational_storage_inequality(mg, mg_robust_r1_sim):
    cert = mg_robust_r1_sim
    t = time_grid(0.0, 2.0, 0.01)
    ref = Reference.constant(mg, [0.0, 0.0], [0.0], t)
    ctrl = PathIntegralController(cert, mg, GeodesicOptions(starts=1))
    traj = closed_loop(mg, ctrl, ref, ZohNoise(NoiseStream(4, 1.0), 1, clamp=1.0), [0.3, 0.5], (0.0, 2.0), 0.01)
    dw = ZohNoise(NoiseStream(9, 1.0), 1)
    assert variational_storage_check(mg, cert, traj, [0.1, -0.2], dw) <= 1e-4


def test_variational_storage_detects_false_alpha(mg, mg_robust_r1_sim):
    from dataclasses import replace

    cert = replace(mg_robust_r1_sim, alpha=1e-3)
    t = time_grid(0.0, 0.5, 0.01)
    ref = Reference.constant(mg, [0.0, 0.0], [0.0], t)
    traj = closed_loop(mg, _zero, ref, None, [0.0, 0.0], (0.0, 0.5), 0.01)
    with pytest.raises(InputError, match="storage"):
        variational_storage_check(mg, cert, traj, [0.0, 0.0], lambda s: np.ones(1))
