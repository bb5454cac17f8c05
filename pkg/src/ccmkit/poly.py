"""Sparse multivariate polynomials and polynomial matrices.

Polynomials are kept in canonical form: one term per exponent vector, no
zero coefficients, terms sorted in graded-lexicographic order. That makes
equality, hashing and the text format deterministic.

Text format for a single polynomial is a signed sum of monomials::

    1.0 * phi - 1.5 * phi^2 - 0.5 * phi^3 + 2.0 * psi * u

Coefficients are written with ``repr`` so that parsing the output of
:meth:`PolyExpr.to_text` reproduces the polynomial bit for bit.
"""

from __future__ import annotations

import re
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InputError

Exponent = tuple[int, ...]


def _grlex_key(exp: Exponent) -> tuple:
    return (sum(exp), tuple(-e for e in exp))


class PolyExpr:
    """Polynomial in an ordered tuple of named variables."""

    __slots__ = ("variables", "_terms", "_exps", "_coefs")

    def __init__(self, variables: Sequence[str], terms: Mapping[Exponent, float] | Iterable = ()):
        self.variables = tuple(variables)
        if len(set(self.variables)) != len(self.variables):
            raise InputError(f"duplicate variable names in {self.variables}")
        nv = len(self.variables)
        items = terms.items() if isinstance(terms, Mapping) else terms
        acc: dict[Exponent, float] = {}
        for exp, coef in items:
            exp = tuple(int(e) for e in exp)
            if len(exp) != nv:
                raise InputError(f"exponent {exp} does not match {nv} variables")
            if any(e < 0 for e in exp):
                raise InputError(f"negative exponent in {exp}")
            acc[exp] = acc.get(exp, 0.0) + float(coef)
        self._terms = tuple(
            (e, c) for e, c in sorted(acc.items(), key=lambda kv: _grlex_key(kv[0])) if c != 0.0
        )
        self._exps = None
        self._coefs = None

    # construction helpers

    @classmethod
    def constant(cls, variables: Sequence[str], value: float) -> "PolyExpr":
        return cls(variables, {(0,) * len(variables): value})

    @classmethod
    def var(cls, variables: Sequence[str], name: str) -> "PolyExpr":
        variables = tuple(variables)
        if name not in variables:
            raise InputError(f"unknown variable {name!r}")
        exp = tuple(1 if v == name else 0 for v in variables)
        return cls(variables, {exp: 1.0})

    @classmethod
    def zero(cls, variables: Sequence[str]) -> "PolyExpr":
        return cls(variables)

    @property
    def terms(self) -> tuple[tuple[Exponent, float], ...]:
        return self._terms

    @property
    def degree(self) -> int:
        return max((sum(e) for e, _ in self._terms), default=0)

    def is_zero(self) -> bool:
        return not self._terms

    def is_constant(self) -> bool:
        return all(sum(e) == 0 for e, _ in self._terms)

    def depends_on(self, name: str) -> bool:
        i = self.variables.index(name)
        return any(e[i] > 0 for e, _ in self._terms)

    def degree_in(self, name: str) -> int:
        i = self.variables.index(name)
        return max((e[i] for e, _ in self._terms), default=0)

    # arithmetic

    def _coerce(self, other) -> "PolyExpr":
        if isinstance(other, PolyExpr):
            if other.variables != self.variables:
                raise InputError(f"variable mismatch: {self.variables} vs {other.variables}")
            return other
        return PolyExpr.constant(self.variables, float(other))

    def __add__(self, other):
        other = self._coerce(other)
        return PolyExpr(self.variables, list(self._terms) + list(other._terms))

    __radd__ = __add__

    def __neg__(self):
        return PolyExpr(self.variables, [(e, -c) for e, c in self._terms])

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        if not isinstance(other, PolyExpr):
            c = float(other)
            return PolyExpr(self.variables, [(e, a * c) for e, a in self._terms])
        other = self._coerce(other)
        out = []
        for e1, c1 in self._terms:
            for e2, c2 in other._terms:
                out.append((tuple(a + b for a, b in zip(e1, e2)), c1 * c2))
        return PolyExpr(self.variables, out)

    __rmul__ = __mul__

    def __pow__(self, k: int):
        if not isinstance(k, int) or k < 0:
            raise InputError("only non-negative integer powers are supported")
        out = PolyExpr.constant(self.variables, 1.0)
        for _ in range(k):
            out = out * self
        return out

    def diff(self, name: str) -> "PolyExpr":
        """Exact partial derivative with respect to ``name``."""
        i = self.variables.index(name)
        out = []
        for e, c in self._terms:
            if e[i] > 0:
                ne = list(e)
                ne[i] -= 1
                out.append((tuple(ne), c * e[i]))
        return PolyExpr(self.variables, out)

    def substitute(self, images: Sequence["PolyExpr"]) -> "PolyExpr":
        """Compose with polynomials: variable ``i`` is replaced by ``images[i]``."""
        if len(images) != len(self.variables):
            raise InputError("need one image per variable")
        target = images[0].variables
        out = PolyExpr.zero(target)
        for e, c in self._terms:
            term = PolyExpr.constant(target, c)
            for img, p in zip(images, e):
                if p:
                    term = term * img ** p
            out = out + term
        return out

    def __eq__(self, other):
        if not isinstance(other, PolyExpr):
            return NotImplemented
        return self.variables == other.variables and self._terms == other._terms

    def __hash__(self):
        return hash((self.variables, self._terms))

    def __repr__(self):
        return f"PolyExpr({self.to_text()!r}, vars={self.variables})"

    # evaluation

    def _arrays(self):
        if self._exps is None:
            nv = len(self.variables)
            self._exps = np.array([e for e, _ in self._terms], dtype=float).reshape(-1, nv)
            self._coefs = np.array([c for _, c in self._terms], dtype=float)
        return self._exps, self._coefs

    def __call__(self, z) -> float | np.ndarray:
        """Evaluate at ``z`` of shape ``(nvars,)`` or a batch ``(k, nvars)``."""
        exps, coefs = self._arrays()
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != len(self.variables):
            raise InputError(f"expected {len(self.variables)} values, got shape {z.shape}")
        mon = np.prod(z[..., None, :] ** exps, axis=-1)
        return mon @ coefs if coefs.size else np.zeros(z.shape[:-1])

    # text

    def to_text(self) -> str:
        if not self._terms:
            return "0.0"
        parts = []
        for k, (e, c) in enumerate(self._terms):
            factors = [repr(abs(c))]
            for name, p in zip(self.variables, e):
                if p == 1:
                    factors.append(name)
                elif p > 1:
                    factors.append(f"{name}^{p}")
            body = " * ".join(factors)
            if k == 0:
                parts.append(("-" if c < 0 else "") + body)
            else:
                parts.append((" - " if c < 0 else " + ") + body)
        return "".join(parts)

    @classmethod
    def parse(cls, text: str, variables: Sequence[str]) -> "PolyExpr":
        return _Parser(text, tuple(variables)).parse()


_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?|inf|nan)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*^]))"
)


class _Parser:
    def __init__(self, text: str, variables: tuple[str, ...]):
        self.variables = variables
        self.tokens = []
        pos = 0
        text = text.strip()
        while pos < len(text):
            m = _TOKEN.match(text, pos)
            if not m or m.end() == pos:
                raise InputError(f"cannot parse polynomial near {text[pos:]!r}")
            kind = m.lastgroup
            self.tokens.append((kind, m.group(kind)))
            pos = m.end()
        self.i = 0

    def _peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else (None, None)

    def _next(self):
        tok = self._peek()
        self.i += 1
        return tok

    def parse(self) -> PolyExpr:
        if not self.tokens:
            raise InputError("empty polynomial")
        terms = []
        sign = 1.0
        kind, val = self._peek()
        if kind == "op" and val in "+-":
            self._next()
            sign = -1.0 if val == "-" else 1.0
        terms.append(self._term(sign))
        while self.i < len(self.tokens):
            kind, val = self._next()
            if kind != "op" or val not in "+-":
                raise InputError(f"expected '+' or '-', got {val!r}")
            terms.append(self._term(-1.0 if val == "-" else 1.0))
        return PolyExpr(self.variables, terms)

    def _term(self, sign: float):
        coef = sign
        exp = [0] * len(self.variables)
        while True:
            kind, val = self._next()
            if kind == "num":
                coef *= float(val)
            elif kind == "name":
                if val not in self.variables:
                    raise InputError(f"unknown variable {val!r}; known: {self.variables}")
                power = 1
                if self._peek() == ("op", "^"):
                    self._next()
                    k2, v2 = self._next()
                    if k2 != "num" or not v2.isdigit():
                        raise InputError(f"bad exponent {v2!r}")
                    power = int(v2)
                exp[self.variables.index(val)] += power
            else:
                raise InputError(f"unexpected token {val!r}")
            if self._peek() == ("op", "*"):
                self._next()
                continue
            return tuple(exp), coef


class PolyMatrix:
    """Dense matrix of :class:`PolyExpr` entries sharing one variable tuple."""

    __slots__ = ("variables", "rows", "cols", "entries", "symmetric", "_packed")

    def __init__(self, entries: Sequence[Sequence[PolyExpr]], variables: Sequence[str] | None = None,
                 symmetric: bool = False, shape: tuple[int, int] | None = None):
        entries = [list(r) for r in entries]
        if shape is not None:
            rows, cols = shape
        else:
            rows = len(entries)
            cols = len(entries[0]) if rows else 0
        if variables is None:
            if not rows or not cols:
                raise InputError("variables must be given for an empty PolyMatrix")
            variables = entries[0][0].variables
        self.variables = tuple(variables)
        if len(entries) != rows or any(len(r) != cols for r in entries):
            raise InputError("ragged PolyMatrix entries")
        for r in entries:
            for p in r:
                if p.variables != self.variables:
                    raise InputError("all entries must share the same variables")
        self.rows, self.cols = rows, cols
        self.entries = tuple(tuple(r) for r in entries)
        if symmetric:
            if rows != cols or any(self.entries[i][j] != self.entries[j][i]
                                   for i in range(rows) for j in range(i)):
                raise InputError("PolyMatrix flagged symmetric is not symmetric")
        self.symmetric = symmetric
        self._packed = None

    @classmethod
    def from_array(cls, values, variables: Sequence[str], symmetric: bool = False) -> "PolyMatrix":
        arr = np.atleast_2d(np.asarray(values, dtype=float))
        ents = [[PolyExpr.constant(variables, v) for v in row] for row in arr]
        return cls(ents, variables, symmetric=symmetric, shape=arr.shape)

    @classmethod
    def zeros(cls, rows: int, cols: int, variables: Sequence[str]) -> "PolyMatrix":
        ents = [[PolyExpr.zero(variables) for _ in range(cols)] for _ in range(rows)]
        return cls(ents, variables, shape=(rows, cols))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def degree(self) -> int:
        return max((p.degree for r in self.entries for p in r), default=0)

    def __getitem__(self, ij) -> PolyExpr:
        i, j = ij
        return self.entries[i][j]

    def is_constant(self) -> bool:
        return all(p.is_constant() for r in self.entries for p in r)

    def depends_on(self, name: str) -> bool:
        return any(p.depends_on(name) for r in self.entries for p in r)

    def map(self, fn) -> "PolyMatrix":
        return PolyMatrix([[fn(p) for p in r] for r in self.entries], self.variables,
                          shape=self.shape)

    def substitute(self, images: Sequence[PolyExpr]) -> "PolyMatrix":
        ents = [[p.substitute(images) for p in r] for r in self.entries]
        return PolyMatrix(ents, images[0].variables, shape=self.shape)

    def diff(self, name: str) -> "PolyMatrix":
        out = self.map(lambda p: p.diff(name))
        out.symmetric = self.symmetric
        return out

    def __add__(self, other: "PolyMatrix") -> "PolyMatrix":
        if other.shape != self.shape:
            raise InputError("shape mismatch in PolyMatrix addition")
        return PolyMatrix([[a + b for a, b in zip(r1, r2)] for r1, r2 in zip(self.entries, other.entries)],
                          self.variables, shape=self.shape)

    def __matmul__(self, other: "PolyMatrix") -> "PolyMatrix":
        if self.cols != other.rows:
            raise InputError("shape mismatch in PolyMatrix product")
        out = []
        for i in range(self.rows):
            row = []
            for j in range(other.cols):
                acc = PolyExpr.zero(self.variables)
                for k in range(self.cols):
                    acc = acc + self.entries[i][k] * other.entries[k][j]
                row.append(acc)
            out.append(row)
        return PolyMatrix(out, self.variables, shape=(self.rows, other.cols))

    def __eq__(self, other):
        if not isinstance(other, PolyMatrix):
            return NotImplemented
        return self.variables == other.variables and self.entries == other.entries

    def __hash__(self):
        return hash((self.variables, self.entries))

    def __repr__(self):
        return f"PolyMatrix({self.rows}x{self.cols}, vars={self.variables})"

    def _pack(self):
        # shared monomial basis so evaluation is a single matmul
        if self._packed is None:
            exps: dict[Exponent, int] = {}
            for r in self.entries:
                for p in r:
                    for e, _ in p.terms:
                        exps.setdefault(e, len(exps))
            nv = len(self.variables)
            E = np.array(list(exps), dtype=float).reshape(-1, nv)
            Cm = np.zeros((self.rows * self.cols, len(exps)))
            for i, r in enumerate(self.entries):
                for j, p in enumerate(r):
                    for e, c in p.terms:
                        Cm[i * self.cols + j, exps[e]] = c
            self._packed = (E, Cm)
        return self._packed

    def __call__(self, z) -> np.ndarray:
        """Evaluate at ``z`` (shape ``(nvars,)``) or a batch ``(k, nvars)``."""
        E, Cm = self._pack()
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != len(self.variables):
            raise InputError(f"expected {len(self.variables)} values, got shape {z.shape}")
        mon = np.prod(z[..., None, :] ** E, axis=-1)
        vals = mon @ Cm.T
        return vals.reshape(z.shape[:-1] + (self.rows, self.cols))

    def to_lines(self) -> list[str]:
        return [", ".join(p.to_text() for p in r) for r in self.entries]

    @classmethod
    def from_lines(cls, lines: Sequence[str], variables: Sequence[str], cols: int | None = None,
                   symmetric: bool = False) -> "PolyMatrix":
        rows = [[PolyExpr.parse(cell, variables) for cell in line.split(",")] for line in lines]
        if not rows:
            return cls([], variables, shape=(0, cols or 0))
        return cls(rows, variables, symmetric=symmetric)
