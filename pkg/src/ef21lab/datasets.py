"""Problem factories: synthetic sparse least squares, logistic data, regularizers.

The synthetic generator plants a controlled sparsity pattern (every feature
owned by exactly c clients), shapes each client's curvature spectrum by a
single interpolation knob v, and perturbs the labels so the planted
solution is not an interpolation point.  The LIBSVM path parses the
standard ``<label> <idx>:<val> ...`` text format and spreads rows evenly
over clients.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field

import numpy as np

from .problems import (
    DegenerateProblemError,
    DistributedProblem,
    LogisticClient,
    QuadraticClient,
    RegularizedClient,
    SparsityPattern,
    build_pattern,
)
from .smoothness import global_curvature_matrix, power_iteration_lmax


class GenerationError(RuntimeError):
    """The sparsity-pattern generator failed to produce a valid instance."""


class LibsvmFormatError(ValueError):
    """Malformed LIBSVM text input."""


@dataclass(frozen=True)
class SynthConfig:
    """Meta-parameters of the synthetic sparse least-squares generator.

    ``c_over_n`` sets the fraction of clients owning each feature, ``v``
    interpolates the cross-client distribution of smoothness constants
    between all-equal (v=0, every L_i = L_c) and single-dominant (v=1, one
    client at peak_L, the rest flat zero), and ``p`` scales the uniform
    label noise that pushes the instance out of the interpolation regime.
    """

    n: int = 100
    d: int = 500
    m: int = 12
    c_over_n: float = 0.05
    v: float = 0.1
    p: float = 2.0
    L_c: float = 20.0
    spectrum_min: float = 1.0
    peak_L: float = 10.0
    seed: int = 0
    attempts: int = 5

    def __post_init__(self):
        if self.n < 1 or self.d < 1 or self.m < 1:
            raise ValueError("n, d and m must all be at least 1")
        if not 1.0 / self.n <= self.c_over_n <= 1.0:
            raise ValueError(f"c_over_n must lie in [1/n, 1], got {self.c_over_n}")
        if not 0.0 <= self.v <= 1.0:
            raise ValueError(f"v must lie in [0, 1], got {self.v}")
        if self.p < 0:
            raise ValueError("noise scale p must be nonnegative")
        if self.attempts < 1:
            raise ValueError("attempts must be at least 1")

    @property
    def c(self) -> int:
        return int(np.clip(round(self.c_over_n * self.n), 1, self.n))

    def to_dict(self) -> dict:
        return {
            "n": self.n, "d": self.d, "m": self.m, "c_over_n": self.c_over_n,
            "v": self.v, "p": self.p, "L_c": self.L_c, "spectrum_min": self.spectrum_min,
            "peak_L": self.peak_L, "seed": self.seed, "attempts": self.attempts,
        }


def _pattern_matrix(n: int, d: int, c: int, rng: np.random.Generator, attempts: int) -> np.ndarray:
    for _ in range(attempts):
        act = np.zeros((n, d), dtype=bool)
        for j in range(d):
            act[rng.choice(n, size=c, replace=False), j] = True
        if act.any(axis=1).all():
            return act
    raise GenerationError(
        f"no client-covering pattern with n={n}, d={d}, c={c} after {attempts} attempts"
    )


def generate_sparsity_matrix(config: SynthConfig) -> SparsityPattern:
    """Sample an activity matrix whose every column has exactly c True entries.

    Columns are filled independently with a uniformly random size-c subset
    of the clients; if some client ends up owning nothing the fill is
    restarted, and after ``config.attempts`` failures generation is aborted.
    """
    rng = np.random.default_rng(config.seed)
    return SparsityPattern(_pattern_matrix(config.n, config.d, config.c, rng, config.attempts))


def _random_orthogonal(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def _client_spectrum(config: SynthConfig, d_i: int, rank: int) -> np.ndarray:
    """Target curvature eigenvalues for one client, descending, length min(m, d_i).

    Only min(m, d_i) eigenvalues are realizable with m data rows; the rest
    of the spectrum is zero.
    """
    k = min(config.m, d_i)
    uniform = np.linspace(config.L_c, config.spectrum_min, k)
    dominant = np.zeros(k)
    if rank == 0:
        dominant[0] = config.peak_L
    return (1.0 - config.v) * uniform + config.v * dominant


def generate_client_quadratic(config: SynthConfig, active: np.ndarray, rank: int,
                              rng: np.random.Generator,
                              x_solution: np.ndarray) -> QuadraticClient:
    """Build one least-squares client on its active coordinates.

    The curvature (2/m) A^T A realizes the v-interpolated target spectrum in
    a seeded random orthogonal basis, and the labels are A x_solution plus
    uniform noise of scale p.
    """
    active = np.asarray(active, dtype=np.intp)
    if active.size == 0:
        raise DegenerateProblemError(f"client {rank} has an empty active set")
    d_i = active.size
    target = _client_spectrum(config, d_i, rank)
    lam = np.zeros(d_i)
    lam[: target.size] = target
    basis = _random_orthogonal(d_i, rng)
    rows = np.sqrt(config.m * lam / 2.0)[:, None] * basis.T
    A = np.zeros((config.m, d_i))
    A[: min(config.m, d_i)] = rows[: min(config.m, d_i)]
    noise = rng.uniform(-1.0, 1.0, size=config.m) * config.p
    b = A @ x_solution[active] + noise
    return QuadraticClient(rank, config.d, active, A, b)


def _exact_f_star(problem: DistributedProblem) -> float:
    """Minimum of an averaged least-squares objective via its normal equations."""
    d = problem.d
    H = np.zeros((d, d))
    h = np.zeros(d)
    for cl in problem.clients:
        idx = cl.active
        H[np.ix_(idx, idx)] += cl.H
        h[idx] += cl.h
    x_star = np.linalg.lstsq(H, h, rcond=None)[0]
    return problem.value(x_star)


def make_quadratic_problem(config: SynthConfig) -> DistributedProblem:
    """Generate a full synthetic sparse least-squares instance.

    Deterministic in the config (including its seed).  The exact minimum of
    the generated objective is stored as the problem's f_star hint.
    """
    rng = np.random.default_rng(config.seed)
    active_matrix = _pattern_matrix(config.n, config.d, config.c, rng, config.attempts)
    x_solution = rng.uniform(-1.0, 1.0, size=config.d)
    clients = [
        generate_client_quadratic(config, np.flatnonzero(active_matrix[i]), i, rng, x_solution)
        for i in range(config.n)
    ]
    pattern = build_pattern(clients)
    L = power_iteration_lmax(global_curvature_matrix(clients))
    problem = DistributedProblem(
        clients=clients,
        pattern=pattern,
        L=L,
        meta={"generator": "synthetic-quadratic", "config": config.to_dict(),
              "x_solution": x_solution.tolist()},
    )
    problem.f_star_hint = _exact_f_star(problem)
    return problem


def add_nonconvex_regularizer(problem: DistributedProblem, lam: float) -> DistributedProblem:
    """Add the smooth nonconvex penalty lam * sum_j x_j^2/(x_j^2+1) to every client.

    Each penalty is restricted to its client's active coordinates.  The
    penalty curvature lies in [-1/2, 2] per coordinate, so every L_i grows
    by 2*lam and the global constant by at most 2*lam*c/n.  The exact
    minimum is no longer known.
    """
    if lam < 0:
        raise ValueError("regularization coefficient must be nonnegative")
    clients = [RegularizedClient(cl, lam) for cl in problem.clients]
    meta = dict(problem.meta)
    meta["regularizer"] = {"kind": "nonconvex", "lam": lam}
    return DistributedProblem(
        clients=clients,
        pattern=problem.pattern,
        L=problem.L + 2.0 * lam * problem.pattern.c / problem.n,
        f_star_hint=None,
        meta=meta,
    )


@dataclass
class LibsvmDataset:
    """Parsed LIBSVM rows: labels in {-1, +1} and 0-based sparse features."""

    rows: list[tuple[int, np.ndarray, np.ndarray]]
    d: int

    @property
    def N(self) -> int:
        return len(self.rows)


_FEATURE_RE = re.compile(r"^(-?\d+):(.+)$")


def parse_libsvm(text: str) -> LibsvmDataset:
    """Parse LIBSVM text: one ``<label> <idx>:<val> ...`` example per line.

    Feature indices are 1-based in the file and stored 0-based.  Labels at
    most zero map to -1, positive labels to +1.  A repeated index on one
    line keeps the last value and emits a warning.  Blank lines are
    skipped; anything else malformed raises with its line and column.
    """
    rows: list[tuple[int, np.ndarray, np.ndarray]] = []
    d = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        tokens = list(re.finditer(r"\S+", line))
        label_tok = tokens[0]
        try:
            raw_label = float(label_tok.group())
        except ValueError:
            raise LibsvmFormatError(
                f"line {lineno}, column {label_tok.start() + 1}: bad label {label_tok.group()!r}"
            ) from None
        label = -1 if raw_label <= 0 else 1
        feats: dict[int, float] = {}
        for tok in tokens[1:]:
            col = tok.start() + 1
            match = _FEATURE_RE.match(tok.group())
            if match is None:
                raise LibsvmFormatError(f"line {lineno}, column {col}: bad token {tok.group()!r}")
            idx = int(match.group(1))
            if idx < 1:
                raise LibsvmFormatError(f"line {lineno}, column {col}: feature index {idx} < 1")
            try:
                val = float(match.group(2))
            except ValueError:
                raise LibsvmFormatError(
                    f"line {lineno}, column {col}: non-numeric value {match.group(2)!r}"
                ) from None
            if idx - 1 in feats:
                warnings.warn(f"line {lineno}: duplicate feature index {idx}, last value wins")
            feats[idx - 1] = val
            d = max(d, idx)
        order = np.array(sorted(feats), dtype=np.intp)
        vals = np.array([feats[j] for j in order], dtype=float)
        rows.append((label, order, vals))
    return LibsvmDataset(rows=rows, d=d)


def partition_even(dataset: LibsvmDataset, n: int, seed: int = 0) -> DistributedProblem:
    """Shuffle the dataset and split it into n equal logistic-regression clients.

    Each client receives floor(N/n) rows; the residual rows are discarded.
    A client's active coordinates are the union of the nonzero feature
    indices across its rows.
    """
    if n < 1:
        raise ValueError("need at least one client")
    if dataset.N < n:
        raise ValueError(f"cannot split {dataset.N} rows across {n} clients")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(dataset.N)
    per_client = dataset.N // n
    d = dataset.d
    clients = []
    for i in range(n):
        chunk = perm[i * per_client: (i + 1) * per_client]
        support: set[int] = set()
        for row_id in chunk:
            _, idx, vals = dataset.rows[row_id]
            support.update(int(j) for j, v in zip(idx, vals) if v != 0.0)
        active = np.array(sorted(support), dtype=np.intp)
        if active.size == 0:
            raise DegenerateProblemError(f"client {i} received rows with no nonzero features")
        pos = {int(j): k for k, j in enumerate(active)}
        X = np.zeros((per_client, active.size))
        y = np.empty(per_client)
        for row_pos, row_id in enumerate(chunk):
            label, idx, vals = dataset.rows[row_id]
            y[row_pos] = label
            for j, v in zip(idx, vals):
                if v != 0.0:
                    X[row_pos, pos[int(j)]] = v
        clients.append(LogisticClient(i, d, active, X, y))
    pattern = build_pattern(clients)
    L = power_iteration_lmax(global_curvature_matrix(clients))
    return DistributedProblem(
        clients=clients,
        pattern=pattern,
        L=L,
        meta={"generator": "libsvm-logistic", "clients": n, "seed": seed,
              "rows_used": n * per_client, "rows_total": dataset.N},
    )
