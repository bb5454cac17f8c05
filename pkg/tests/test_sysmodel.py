import numpy as np
import pytest

from ccmkit.errors import InputError
from ccmkit.sysmodel import (BUILTIN_NAMES, builtin, eval_dynamics, finite_diff_jacobian, jacobian_A,
                             make_system, model_from_text, model_to_text, resolve_model)


def test_mg_origin_is_equilibrium(mg):
    assert np.array_equal(eval_dynamics(mg, [0, 0], [0], [0]), [0, 0])


def test_mg_dynamics_at_unit_phi(mg):
    # phi' = -psi - 1.5 phi^2 - 0.5 phi^3 at phi = 1
    assert np.allclose(eval_dynamics(mg, [0, 1], [0], [0]), [1, -2])


def test_double_integrator_dynamics():
    di = builtin("double-integrator")
    assert np.allclose(eval_dynamics(di, [1, 2], [3]), [2, 3])


def test_mg_structure(mg):
    assert (mg.n, mg.m, mg.p_w) == (2, 1, 1)
    assert np.array_equal(mg.input_matrix([0.3, 0.1]), [[1], [0]])
    assert np.array_equal(mg.disturbance_matrix([0.3, 0.1]), [[0], [1]])


def test_double_integrator_structure():
    di = builtin("double-integrator")
    assert np.array_equal(di.drift([3.0, 4.0]), [4, 0])
    assert np.array_equal(di.input_matrix([3.0, 4.0]), [[0], [1]])


def test_unknown_builtin_rejected():
    with pytest.raises(InputError):
        builtin("unknown")


@pytest.mark.parametrize("phi, a22", [(0.0, 0.0), (-1.0, 1.5)])
def test_mg_jacobian(mg, phi, a22):
    A = jacobian_A(mg, [0.0, phi], [0.0])
    assert A[0, 1] == 1 and A[1, 0] == -1 and A[0, 0] == 0
    assert A[1, 1] == pytest.approx(a22, abs=1e-15)


def test_linear_jacobian_is_constant(rng):
    lin = make_system("lin", ("a", "b"), ("u",), f=["2*a - b", "0.5*a + 3*b"], B=[[1], [0]])
    G = np.array([[2, -1], [0.5, 3]])
    for _ in range(5):
        assert np.array_equal(jacobian_A(lin, rng.normal(size=2), rng.normal(size=1)), G)
        assert np.allclose(finite_diff_jacobian(lin, rng.normal(size=2), rng.normal(size=1), h=0.3), G,
                           atol=1e-13)


def test_fd_jacobian_mg_origin(mg):
    assert np.allclose(finite_diff_jacobian(mg, [0, 0], [0], h=1e-5), jacobian_A(mg, [0, 0], [0]), atol=1e-8)


def test_fd_step_guard(mg):
    with pytest.raises(InputError):
        finite_diff_jacobian(mg, [0, 0], [0], h=0.0)


def test_dimension_mismatch_rejected(mg):
    with pytest.raises(InputError):
        eval_dynamics(mg, [0, 0, 0], [0])
    with pytest.raises(InputError):
        eval_dynamics(mg, [0, 0], [0, 1])


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_jacobian_agrees_with_fd_on_builtins(name, rng):
    sys = builtin(name)
    for _ in range(100):
        x = rng.uniform(-2, 2, sys.n)
        u = rng.uniform(-2, 2, sys.m)
        assert np.allclose(jacobian_A(sys, x, u), finite_diff_jacobian(sys, x, u, h=1e-5), atol=1e-6)


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_jacobian_affine_in_u(name, rng):
    sys = builtin(name)
    for _ in range(20):
        x = rng.normal(size=sys.n)
        u1, u2 = rng.normal(size=sys.m), rng.normal(size=sys.m)
        d = jacobian_A(sys, x, u1) + jacobian_A(sys, x, u2) - 2 * jacobian_A(sys, x, 0.5 * (u1 + u2))
        assert np.max(np.abs(d)) <= 1e-12


def test_evaluation_is_deterministic(mg):
    x = np.array([0.123456789, -0.987654321])
    a = eval_dynamics(mg, x, [0.3], [0.1])
    b = eval_dynamics(mg, x, [0.3], [0.1])
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_model_text_round_trip(name, tmp_path):
    sys = builtin(name)
    text = model_to_text(sys)
    back = model_from_text(text)
    assert model_to_text(back) == text
    assert back.f == sys.f and back.B == sys.B and back.B_w == sys.B_w
    p = tmp_path / "m.txt"
    p.write_text(text)
    assert resolve_model(str(p)).f == sys.f


def test_resolve_model_rejects_missing_file():
    with pytest.raises(InputError):
        resolve_model("no/such/model.txt")
