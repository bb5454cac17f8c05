"""Control-affine systems with polynomial data.

A system is ``xdot = f(x) + B(x) u + B_w(x) w`` with an optional output
``y = g(x, u)``. Every polynomial in a system shares the variable tuple
``state_names + input_names`` so that ``f + B u`` is itself a polynomial
and its state Jacobian can be taken symbolically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import InputError
from .poly import PolyExpr, PolyMatrix

MODEL_SECTIONS = ("system", "f", "B", "B_w", "g")


@dataclass(frozen=True, eq=False)
class ControlAffineSystem:
    name: str
    state_names: tuple[str, ...]
    input_names: tuple[str, ...]
    f: PolyMatrix
    B: PolyMatrix
    B_w: PolyMatrix
    g: PolyMatrix | None = None
    time_varying: bool = False
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        n, m = len(self.state_names), len(self.input_names)
        if n == 0:
            raise InputError("a system needs at least one state")
        if self.f.shape != (n, 1):
            raise InputError(f"f must be {n}x1, got {self.f.shape}")
        if self.B.shape != (n, m):
            raise InputError(f"B must be {n}x{m}, got {self.B.shape}")
        if self.B_w.rows != n:
            raise InputError(f"B_w must have {n} rows, got {self.B_w.shape}")
        if self.g is not None and self.g.cols != 1:
            raise InputError("output map g must be a column")
        if self.time_varying:
            raise InputError("time-varying polynomial data is not supported")
        for mat in (self.f, self.B, self.B_w, self.g):
            if mat is not None and mat.variables != self.variables:
                raise InputError(f"system polynomials must use variables {self.variables}")
        for mat in (self.f, self.B, self.B_w):
            if any(mat.depends_on(u) for u in self.input_names):
                raise InputError("f, B and B_w may depend on the state only")

        # F = f + B u; its state Jacobian is affine in u by construction
        F = []
        for i in range(n):
            acc = self.f[i, 0]
            for j, uname in enumerate(self.input_names):
                acc = acc + self.B[i, j] * PolyExpr.var(self.variables, uname)
            F.append(acc)
        A = PolyMatrix([[F[i].diff(x) for x in self.state_names] for i in range(n)], self.variables,
                       shape=(n, n))
        for u1 in self.input_names:
            for u2 in self.input_names:
                if not all(p.diff(u1).diff(u2).is_zero() for r in A.entries for p in r):
                    raise InputError("state Jacobian is not affine in u")
        self._cache["A"] = A
        # B_w(x) w contributes sum_k w_k dB_w[:, k]/dx to the Jacobian
        self._cache["dBw"] = [
            PolyMatrix([[self.B_w[i, k].diff(x) for x in self.state_names] for i in range(n)],
                       self.variables, shape=(n, n))
            for k in range(self.p_w)
        ]
        if self.g is not None:
            self._cache["C"] = PolyMatrix([[self.g[i, 0].diff(x) for x in self.state_names]
                                           for i in range(self.g.rows)], self.variables,
                                          shape=(self.g.rows, n))
            self._cache["D"] = PolyMatrix([[self.g[i, 0].diff(u) for u in self.input_names]
                                           for i in range(self.g.rows)], self.variables,
                                          shape=(self.g.rows, m))

    @property
    def variables(self) -> tuple[str, ...]:
        return self.state_names + self.input_names

    @property
    def n(self) -> int:
        return len(self.state_names)

    @property
    def m(self) -> int:
        return len(self.input_names)

    @property
    def p_w(self) -> int:
        return self.B_w.cols

    @property
    def q(self) -> int:
        return 0 if self.g is None else self.g.rows

    @property
    def jacobian_poly(self) -> PolyMatrix:
        """Symbolic ``d(f + B u)/dx`` in the variables ``(x, u)``."""
        return self._cache["A"]

    def _z(self, x, u=None) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.size != self.n:
            raise InputError(f"state must have {self.n} entries, got {x.size}")
        if u is None:
            u = np.zeros(self.m)
        u = np.asarray(u, dtype=float).reshape(-1)
        if u.size != self.m:
            raise InputError(f"control must have {self.m} entries, got {u.size}")
        return np.concatenate([x, u])

    def _w(self, w) -> np.ndarray:
        if w is None:
            return np.zeros(self.p_w)
        w = np.asarray(w, dtype=float).reshape(-1)
        if w.size != self.p_w:
            raise InputError(f"disturbance must have {self.p_w} entries, got {w.size}")
        return w

    def drift(self, x) -> np.ndarray:
        return self.f(self._z(x))[:, 0]

    def input_matrix(self, x) -> np.ndarray:
        return self.B(self._z(x))

    def disturbance_matrix(self, x) -> np.ndarray:
        return self.B_w(self._z(x))

    def dynamics(self, x, u=None, w=None, t: float = 0.0) -> np.ndarray:
        z = self._z(x, u)
        w = self._w(w)
        out = self.f(z)[:, 0] + self.B(z) @ z[self.n:]
        if self.p_w:
            out = out + self.B_w(z) @ w
        return out

    def jacobian(self, x, u=None, t: float = 0.0, w=None) -> np.ndarray:
        z = self._z(x, u)
        A = self._cache["A"](z)
        if w is not None and self.p_w:
            for wk, dB in zip(self._w(w), self._cache["dBw"]):
                if wk:
                    A = A + wk * dB(z)
        return A

    def output(self, x, u=None) -> np.ndarray:
        if self.g is None:
            raise InputError(f"system {self.name!r} has no output map")
        return self.g(self._z(x, u))[:, 0]

    def output_jacobians(self, x, u=None) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(C, D) = (dg/dx, dg/du)`` at ``(x, u)``."""
        if self.g is None:
            raise InputError(f"system {self.name!r} has no output map")
        z = self._z(x, u)
        return self._cache["C"](z), self._cache["D"](z)


def eval_dynamics(sys: ControlAffineSystem, x, u=None, w=None, t: float = 0.0) -> np.ndarray:
    return sys.dynamics(x, u, w, t)


def jacobian_A(sys: ControlAffineSystem, x, u=None, t: float = 0.0, w=None) -> np.ndarray:
    """State Jacobian of ``f + B u`` (plus ``B_w w`` when ``w`` is given)."""
    return sys.jacobian(x, u, t, w)


def finite_diff_jacobian(sys: ControlAffineSystem, x, u=None, t: float = 0.0, h: float = 1e-5,
                         w=None) -> np.ndarray:
    """Central-difference Jacobian of the dynamics; truncation error is O(h^2)."""
    if not h > 0:
        raise InputError(f"finite-difference step must be positive, got {h}")
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != sys.n:
        raise InputError(f"state must have {sys.n} entries, got {x.size}")
    w = None if w is None else w
    J = np.empty((sys.n, sys.n))
    for k in range(sys.n):
        e = np.zeros(sys.n)
        e[k] = h
        J[:, k] = (sys.dynamics(x + e, u, w, t) - sys.dynamics(x - e, u, w, t)) / (2 * h)
    return J


# model construction ---------------------------------------------------------

def make_system(name: str, states, inputs, f, B, B_w=None, g=None) -> ControlAffineSystem:
    """Build a system from polynomial strings.

    ``f`` is a list of n strings, ``B`` and ``B_w`` are row lists of strings
    (or numbers), ``g`` a list of output strings.
    """
    states, inputs = tuple(states), tuple(inputs)
    variables = states + inputs
    n = len(states)

    def P(s):
        return PolyExpr.parse(str(s), variables)

    fm = PolyMatrix([[P(s)] for s in f], variables, shape=(len(f), 1))
    Bm = PolyMatrix([[P(s) for s in row] for row in B], variables, shape=(len(B), len(inputs)))
    if B_w is None or len(B_w) == 0 or len(B_w[0]) == 0:
        Bw = PolyMatrix([[] for _ in range(n)], variables, shape=(n, 0))
    else:
        Bw = PolyMatrix([[P(s) for s in row] for row in B_w], variables, shape=(len(B_w), len(B_w[0])))
    gm = None if g is None else PolyMatrix([[P(s)] for s in g], variables, shape=(len(g), 1))
    return ControlAffineSystem(name, states, inputs, fm, Bm, Bw, gm)


@dataclass(frozen=True)
class MechanicalModel:
    """Data of ``H(q) qdd + (C(q, qd) + D(q, qd)) qd + G(q) = u``.

    The companion first-order system uses the state ordering ``(qd, q)``.
    """

    system: ControlAffineSystem
    H: Callable[[np.ndarray], np.ndarray]
    C: Callable[[np.ndarray, np.ndarray], np.ndarray]
    D: Callable[[np.ndarray, np.ndarray], np.ndarray]
    G: Callable[[np.ndarray], np.ndarray]

    @property
    def dof(self) -> int:
        return self.system.n // 2

    def split(self, x) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        k = self.dof
        return x[k:], x[:k]


MSD_MASS, MSD_DAMPING, MSD_STIFFNESS, MSD_CUBIC = 1.0, 0.5, 2.0, 0.5


def _moore_greitzer() -> ControlAffineSystem:
    return make_system(
        "moore-greitzer", ("psi", "phi"), ("u",),
        f=["phi", "-psi - 1.5 * phi^2 - 0.5 * phi^3"],
        B=[[1], [0]],
        B_w=[[0], [1]],
        g=["phi + 0.1 * u"],
    )


def _double_integrator() -> ControlAffineSystem:
    return make_system("double-integrator", ("x1", "x2"), ("u",),
                       f=["x2", "0"], B=[[0], [1]], g=["x1"])


def _point_mass() -> ControlAffineSystem:
    return make_system("point-mass-mech", ("qd", "q"), ("u",),
                       f=["0", "qd"], B=[[1], [0]], g=["q"])


def _mass_spring_damper() -> ControlAffineSystem:
    m, c, k, k3 = MSD_MASS, MSD_DAMPING, MSD_STIFFNESS, MSD_CUBIC
    return make_system(
        "mass-spring-damper", ("qd", "q"), ("u",),
        f=[f"-{c / m!r} * qd - {k / m!r} * q - {k3 / m!r} * q^3", "qd"],
        B=[[repr(1.0 / m)], [0]],
        g=["q"],
    )


_BUILTINS = {
    "moore-greitzer": _moore_greitzer,
    "double-integrator": _double_integrator,
    "point-mass-mech": _point_mass,
    "mass-spring-damper": _mass_spring_damper,
}

BUILTIN_NAMES = tuple(_BUILTINS)


def builtin(name: str) -> ControlAffineSystem:
    try:
        return _BUILTINS[name]()
    except KeyError:
        raise InputError(f"unknown model {name!r}; choose from {', '.join(BUILTIN_NAMES)}") from None


def mechanical_model(name: str) -> MechanicalModel:
    """Euler-Lagrange data for the mechanical builtins."""
    if name == "point-mass-mech":
        return MechanicalModel(
            builtin(name),
            H=lambda q: np.eye(1),
            C=lambda q, qd: np.zeros((1, 1)),
            D=lambda q, qd: np.zeros((1, 1)),
            G=lambda q: np.zeros(1),
        )
    if name == "mass-spring-damper":
        return MechanicalModel(
            builtin(name),
            H=lambda q: np.array([[MSD_MASS]]),
            C=lambda q, qd: np.zeros((1, 1)),
            D=lambda q, qd: np.array([[MSD_DAMPING]]),
            G=lambda q: np.array([MSD_STIFFNESS * q[0] + MSD_CUBIC * q[0] ** 3]),
        )
    raise InputError(f"{name!r} is not a mechanical builtin")


# model files ----------------------------------------------------------------

def _split_sections(text: str) -> dict[str, list[str]]:
    sections: dict[str, list[str]] = {}
    current = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current in sections:
                raise InputError(f"duplicate section [{current}]")
            sections[current] = []
            continue
        if current is None:
            raise InputError(f"content outside any section: {line!r}")
        sections[current].append(line)
    return sections


def _names(value: str) -> tuple[str, ...]:
    return tuple(s.strip() for s in value.split(",") if s.strip())


def model_to_text(sys: ControlAffineSystem) -> str:
    lines = ["[system]", f"name = {sys.name}", f"states = {', '.join(sys.state_names)}",
             f"inputs = {', '.join(sys.input_names)}", f"disturbances = {sys.p_w}",
             f"time_varying = {'true' if sys.time_varying else 'false'}", "", "[f]"]
    lines += sys.f.to_lines()
    lines += ["", "[B]"] + sys.B.to_lines()
    lines += ["", "[B_w]"] + (sys.B_w.to_lines() if sys.p_w else [])
    lines += ["", "[g]"] + (sys.g.to_lines() if sys.g is not None else [])
    return "\n".join(lines) + "\n"


def model_from_text(text: str) -> ControlAffineSystem:
    sec = _split_sections(text)
    for s in ("system", "f", "B"):
        if s not in sec:
            raise InputError(f"model file lacks section [{s}]")
    unknown = set(sec) - set(MODEL_SECTIONS)
    if unknown:
        raise InputError(f"unknown sections {sorted(unknown)}")
    meta = {}
    for line in sec["system"]:
        if "=" not in line:
            raise InputError(f"expected key = value in [system], got {line!r}")
        k, v = line.split("=", 1)
        meta[k.strip()] = v.strip()
    states = _names(meta.get("states", ""))
    inputs = _names(meta.get("inputs", ""))
    p_w = int(meta.get("disturbances", "0"))
    if meta.get("time_varying", "false").lower() not in ("false", "0", "no"):
        raise InputError("time-varying models are not supported")
    variables = states + inputs
    n, m = len(states), len(inputs)
    f = PolyMatrix.from_lines(sec["f"], variables)
    B = PolyMatrix.from_lines(sec["B"], variables, cols=m)
    bw_lines = sec.get("B_w", [])
    B_w = PolyMatrix.from_lines(bw_lines, variables) if bw_lines else PolyMatrix([[] for _ in range(n)],
                                                                              variables, shape=(n, 0))
    if B_w.cols != p_w:
        raise InputError(f"[B_w] has {B_w.cols} columns but disturbances = {p_w}")
    g_lines = sec.get("g", [])
    g = PolyMatrix.from_lines(g_lines, variables) if g_lines else None
    return ControlAffineSystem(meta.get("name", "model"), states, inputs, f, B, B_w, g)


def load_model(path) -> ControlAffineSystem:
    return model_from_text(Path(path).read_text())


def save_model(sys: ControlAffineSystem, path) -> None:
    Path(path).write_text(model_to_text(sys))


def resolve_model(source: str) -> ControlAffineSystem:
    """A builtin name or a path to a model file."""
    if source in _BUILTINS:
        return builtin(source)
    p = Path(source)
    if p.exists():
        return load_model(p)
    raise InputError(f"{source!r} is neither a builtin model nor an existing file")
