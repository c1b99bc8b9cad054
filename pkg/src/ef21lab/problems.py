"""Distributed objectives, sparsity patterns, and active-subspace arithmetic.

The global objective is the average f(x) = (1/n) sum_i f_i(x) of client
losses.  Each client depends only on a subset of the coordinates (its
active set), and all gradients it produces are exactly zero outside that
set.  The boolean client-by-feature activity matrix together with the
constants derived from it (column/row support sizes, c, r) drives every
stepsize refinement in this package.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np


class DegenerateProblemError(ValueError):
    """A client or a variable has an empty active set."""


@dataclass(frozen=True)
class SparsityPattern:
    """Client-by-feature activity matrix with its derived sparsity constants.

    ``active[i, j]`` is True iff client i's loss depends on coordinate j.
    Every row and every column must contain at least one True entry; a
    client or a variable violating this plays no role in the problem and
    signals degenerate input.
    """

    active: np.ndarray

    def __post_init__(self):
        act = np.ascontiguousarray(np.asarray(self.active, dtype=bool))
        if act.ndim != 2 or act.shape[0] < 1 or act.shape[1] < 1:
            raise DegenerateProblemError("activity matrix must be a nonempty n x d boolean matrix")
        if not act.any(axis=1).all():
            empty = int(np.flatnonzero(~act.any(axis=1))[0])
            raise DegenerateProblemError(f"client {empty} has an empty active set")
        if not act.any(axis=0).all():
            empty = int(np.flatnonzero(~act.any(axis=0))[0])
            raise DegenerateProblemError(f"variable {empty} is not used by any client")
        object.__setattr__(self, "active", act)

    @property
    def n(self) -> int:
        return self.active.shape[0]

    @property
    def d(self) -> int:
        return self.active.shape[1]

    @property
    def col_counts(self) -> np.ndarray:
        """Number of clients owning each variable (|I_j| for each column j)."""
        return self.active.sum(axis=0)

    @property
    def row_counts(self) -> np.ndarray:
        """Number of variables owned by each client (|J_i| for each row i)."""
        return self.active.sum(axis=1)

    @property
    def c(self) -> int:
        """Maximum number of clients sharing any single variable."""
        return int(self.col_counts.max())

    @property
    def r(self) -> int:
        """Maximum number of variables held by any single client."""
        return int(self.row_counts.max())

    @property
    def z_size(self) -> int:
        """Number of inactive (client, variable) pairs."""
        return self.n * self.d - int(self.active.sum())

    def client_coords(self, i: int) -> np.ndarray:
        """Sorted active coordinate indices of client i."""
        return np.flatnonzero(self.active[i])

    def project_row(self, i: int, v: np.ndarray) -> np.ndarray:
        """Zero out every coordinate of v that client i does not own."""
        v = np.asarray(v, dtype=float)
        if v.shape != (self.d,):
            raise ValueError(f"expected a vector of length {self.d}, got shape {v.shape}")
        out = np.zeros_like(v)
        mask = self.active[i]
        out[mask] = v[mask]
        return out


def project_active(pattern: SparsityPattern, i: int, v: np.ndarray) -> np.ndarray:
    """Projection of v onto the active subspace of client i (idempotent)."""
    return pattern.project_row(i, v)


class ClientObjective:
    """Base class for a local loss with a gradient oracle.

    Concrete clients carry ``index``, the ambient dimension ``d``, the
    sorted ``active`` coordinate indices, and a smoothness constant ``L``.
    Gradients returned by :meth:`grad` are dense d-vectors that are exactly
    zero outside the active set.
    """

    index: int
    d: int
    active: np.ndarray
    L: float

    def value_and_grad_active(self, x_active: np.ndarray) -> tuple[float, np.ndarray]:
        """Loss value and gradient restricted to the active coordinates."""
        raise NotImplementedError

    def curvature_active(self) -> np.ndarray:
        """PSD matrix on the active coordinates whose norm bounds the Hessian norm."""
        raise NotImplementedError

    def value(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        self._check_dim(x)
        return self.value_and_grad_active(x[self.active])[0]

    def grad_active(self, x_active: np.ndarray) -> np.ndarray:
        return self.value_and_grad_active(np.asarray(x_active, dtype=float))[1]

    def grad(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        self._check_dim(x)
        out = np.zeros(self.d)
        out[self.active] = self.value_and_grad_active(x[self.active])[1]
        return out

    def _check_dim(self, x: np.ndarray) -> None:
        if x.shape != (self.d,):
            raise ValueError(f"client {self.index}: expected point of dimension {self.d}, got {x.shape}")

    def to_dict(self) -> dict:
        raise NotImplementedError


class QuadraticClient(ClientObjective):
    """Least-squares loss f_i(x) = (1/m) ||A x_J - b||^2 on the active coordinates.

    A has shape (m, d_i) and acts on the reduced coordinates; the gradient
    in reduced form is H x_J - h with H = (2/m) A^T A and h = (2/m) A^T b.
    """

    def __init__(self, index: int, d: int, active: np.ndarray, A: np.ndarray, b: np.ndarray):
        active = np.asarray(active, dtype=np.intp)
        A = np.asarray(A, dtype=float)
        b = np.asarray(b, dtype=float)
        if active.size == 0:
            raise DegenerateProblemError(f"client {index} has an empty active set")
        if A.ndim != 2 or A.shape[1] != active.size or b.shape != (A.shape[0],):
            raise ValueError(f"client {index}: inconsistent data shapes A{A.shape}, b{b.shape}")
        self.index = index
        self.d = int(d)
        self.active = active
        self.A = A
        self.b = b
        self.m = A.shape[0]
        self.H = (2.0 / self.m) * (A.T @ A)
        self.h = (2.0 / self.m) * (A.T @ b)
        self._c0 = float(b @ b) / self.m
        self.L = float(np.linalg.eigvalsh(self.H)[-1]) if active.size > 1 else float(self.H[0, 0])

    def value_and_grad_active(self, x_active):
        g = self.H @ x_active - self.h
        f = 0.5 * float(x_active @ (g - self.h)) + self._c0
        return f, g

    def curvature_active(self):
        return self.H

    def to_dict(self):
        return {
            "kind": "quadratic",
            "index": self.index,
            "d": self.d,
            "active": self.active.tolist(),
            "A": self.A.tolist(),
            "b": self.b.tolist(),
        }


class LogisticClient(ClientObjective):
    """Binary logistic loss f_i(x) = (1/m) sum_j log(1 + exp(-y_j a_j^T x)).

    Rows are stored densely on the reduced coordinates.  The smoothness
    constant is the standard quarter-Hessian bound ||X^T X|| / (4 m).
    """

    def __init__(self, index: int, d: int, active: np.ndarray, X: np.ndarray, y: np.ndarray):
        active = np.asarray(active, dtype=np.intp)
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if active.size == 0:
            raise DegenerateProblemError(f"client {index} has an empty active set")
        if X.ndim != 2 or X.shape[1] != active.size or y.shape != (X.shape[0],):
            raise ValueError(f"client {index}: inconsistent data shapes X{X.shape}, y{y.shape}")
        self.index = index
        self.d = int(d)
        self.active = active
        self.X = X
        self.y = y
        self.m = X.shape[0]
        self._curv = (X.T @ X) / (4.0 * self.m)
        self.L = float(np.linalg.eigvalsh(self._curv)[-1]) if active.size > 1 else float(self._curv[0, 0])

    def value_and_grad_active(self, x_active):
        z = self.X @ x_active
        u = -self.y * z
        f = float(np.logaddexp(0.0, u).mean())
        # sigma(u) = 0.5 * (1 + tanh(u / 2)) avoids overflow for large |u|
        s = 0.5 * (1.0 + np.tanh(0.5 * u))
        g = -(self.X.T @ (self.y * s)) / self.m
        return f, g

    def curvature_active(self):
        return self._curv

    def to_dict(self):
        return {
            "kind": "logistic",
            "index": self.index,
            "d": self.d,
            "active": self.active.tolist(),
            "X": self.X.tolist(),
            "y": self.y.tolist(),
        }


class RegularizedClient(ClientObjective):
    """Client loss plus the smooth nonconvex penalty lam * sum_j x_j^2 / (x_j^2 + 1).

    The penalty is restricted to the base client's active coordinates.  Its
    per-coordinate curvature lies in [-1/2, 2], so the smoothness constant
    grows by 2 * lam.
    """

    def __init__(self, base: ClientObjective, lam: float):
        if lam < 0:
            raise ValueError("regularization coefficient must be nonnegative")
        self.base = base
        self.lam = float(lam)
        self.index = base.index
        self.d = base.d
        self.active = base.active
        self.L = base.L + 2.0 * self.lam

    def value_and_grad_active(self, x_active):
        f, g = self.base.value_and_grad_active(x_active)
        sq = x_active * x_active
        f = f + self.lam * float((sq / (sq + 1.0)).sum())
        g = g + self.lam * 2.0 * x_active / (sq + 1.0) ** 2
        return f, g

    def curvature_active(self):
        base = self.base.curvature_active()
        return base + 2.0 * self.lam * np.eye(base.shape[0])

    def to_dict(self):
        return {"kind": "nonconvex-regularized", "lam": self.lam, "base": self.base.to_dict()}


def client_from_dict(payload: dict) -> ClientObjective:
    kind = payload.get("kind")
    if kind == "quadratic":
        return QuadraticClient(
            payload["index"], payload["d"], np.array(payload["active"], dtype=np.intp),
            np.array(payload["A"], dtype=float), np.array(payload["b"], dtype=float),
        )
    if kind == "logistic":
        return LogisticClient(
            payload["index"], payload["d"], np.array(payload["active"], dtype=np.intp),
            np.array(payload["X"], dtype=float), np.array(payload["y"], dtype=float),
        )
    if kind == "nonconvex-regularized":
        return RegularizedClient(client_from_dict(payload["base"]), payload["lam"])
    raise ValueError(f"unknown client kind {kind!r}")


def build_pattern(objectives: list[ClientObjective]) -> SparsityPattern:
    """Assemble the activity matrix from the clients' declared active sets."""
    if not objectives:
        raise DegenerateProblemError("empty client list")
    d = objectives[0].d
    for obj in objectives:
        if obj.d != d:
            raise ValueError(f"client {obj.index} has dimension {obj.d}, expected {d}")
        if obj.active.size == 0:
            raise DegenerateProblemError(f"client {obj.index} has an empty active set")
    act = np.zeros((len(objectives), d), dtype=bool)
    for i, obj in enumerate(objectives):
        act[i, obj.active] = True
    return SparsityPattern(act)


@dataclass
class DistributedProblem:
    """The averaged objective f(x) = (1/n) sum_i f_i(x) plus its sparsity pattern.

    ``L`` is a smoothness constant of f.  ``f_star_hint`` is a known lower
    bound on f (the exact minimum for generated quadratics); None when
    unavailable.
    """

    clients: list[ClientObjective]
    pattern: SparsityPattern
    L: float
    f_star_hint: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.clients) != self.pattern.n:
            raise ValueError("pattern row count does not match the number of clients")
        for i, cl in enumerate(self.clients):
            if not np.array_equal(np.flatnonzero(self.pattern.active[i]), cl.active):
                raise ValueError(f"pattern row {i} does not match client {i}'s active set")

    @property
    def n(self) -> int:
        return len(self.clients)

    @property
    def d(self) -> int:
        return self.pattern.d

    def value(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        return float(np.mean([cl.value(x) for cl in self.clients]))

    def value_and_grad_matrix(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-client losses and the (n, d) matrix of client gradients at x.

        Clients are evaluated in index order; rows are zero outside each
        client's active set.
        """
        x = np.asarray(x, dtype=float)
        if x.shape != (self.d,):
            raise ValueError(f"expected point of dimension {self.d}, got {x.shape}")
        fvals = np.empty(self.n)
        grads = np.zeros((self.n, self.d))
        for i, cl in enumerate(self.clients):
            f, g = cl.value_and_grad_active(x[cl.active])
            fvals[i] = f
            grads[i, cl.active] = g
        return fvals, grads

    def grad_matrix(self, x: np.ndarray) -> np.ndarray:
        return self.value_and_grad_matrix(x)[1]

    def gradient(self, x: np.ndarray) -> np.ndarray:
        """Full gradient (1/n) sum_i grad f_i(x), reduced in fixed client order."""
        return self.grad_matrix(x).mean(axis=0)

    def to_dict(self) -> dict:
        return {
            "kind": "distributed-problem",
            "n": self.n,
            "d": self.d,
            "L": self.L,
            "f_star": self.f_star_hint,
            "meta": self.meta,
            "clients": [cl.to_dict() for cl in self.clients],
        }

    def hash(self) -> str:
        """Stable digest of the full problem payload, used to match runs."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def full_gradient(problem: DistributedProblem, x: np.ndarray) -> np.ndarray:
    """Gradient of the averaged objective at x."""
    return problem.gradient(x)


def problem_from_dict(payload: dict) -> DistributedProblem:
    if payload.get("kind") != "distributed-problem":
        raise ValueError("payload is not a serialized distributed problem")
    clients = [client_from_dict(c) for c in payload["clients"]]
    return DistributedProblem(
        clients=clients,
        pattern=build_pattern(clients),
        L=float(payload["L"]),
        f_star_hint=None if payload.get("f_star") is None else float(payload["f_star"]),
        meta=dict(payload.get("meta", {})),
    )
