"""Smoothness constants and stepsizes of the refined error-feedback theory.

Everything the stepsize rules need lives here: the global constant L, the
per-client constants L_i, their quadratic mean L_tilde, the average
smoothness constant L_plus (exact for least squares, bounded through the
sparsity pattern otherwise), the theta/beta algebra of the contraction
parameter, the fixed theoretical stepsizes, and the per-iteration adaptive
estimates built from the realized gradient-estimation error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .problems import DistributedProblem, QuadraticClient, SparsityPattern


class PowerIterationError(RuntimeError):
    """Power iteration failed to converge within the iteration cap."""


def power_iteration_lmax(mat: np.ndarray, tol: float = 1e-10, max_iter: int = 100_000,
                         seed: int = 0) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    Starts from a seeded random unit vector and stops when the Rayleigh
    quotient stagnates to relative tolerance ``tol``.  Raises
    PowerIterationError if the cap is reached, which signals an
    ill-conditioned spectrum.
    """
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError("expected a square matrix")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(mat.shape[0])
    v /= np.linalg.norm(v)
    rayleigh = 0.0
    for _ in range(max_iter):
        w = mat @ v
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return 0.0
        new_rayleigh = float(v @ w)
        v = w / nw
        if abs(new_rayleigh - rayleigh) <= tol * max(abs(new_rayleigh), 1e-300):
            return new_rayleigh
        rayleigh = new_rayleigh
    raise PowerIterationError(f"no convergence after {max_iter} iterations (tol={tol})")


def exact_L_plus_quadratic(matrices: list[np.ndarray], m: int, tol: float = 1e-10,
                           max_iter: int = 100_000) -> float:
    """Exact average-smoothness constant of f(x) = (1/n) sum_i (1/m)||A_i x - b_i||^2.

    Equals sqrt((4 / (m^2 n)) * lambda_max(sum_i (A_i^T A_i)^2)); the
    eigenvalue is found by power iteration on the assembled symmetric PSD
    matrix.  ``matrices`` are the full-width data matrices A_i.
    """
    if not matrices:
        raise ValueError("need at least one data matrix")
    d = matrices[0].shape[1]
    n = len(matrices)
    total = np.zeros((d, d))
    for A in matrices:
        A = np.asarray(A, dtype=float)
        if A.shape[1] != d:
            raise ValueError("all data matrices must share the column count")
        gram = A.T @ A
        total += gram @ gram
    lam = power_iteration_lmax(total, tol=tol, max_iter=max_iter)
    return float(np.sqrt(max(lam, 0.0) * 4.0 / (m * m * n)))


def exact_L_plus_of(problem: DistributedProblem) -> float | None:
    """Exact L_plus of a problem whose clients are all plain least squares, else None."""
    if not all(isinstance(cl, QuadraticClient) for cl in problem.clients):
        return None
    mats = []
    for cl in problem.clients:
        full = np.zeros((cl.m, problem.d))
        full[:, cl.active] = cl.A
        mats.append(full)
    return exact_L_plus_quadratic(mats, problem.clients[0].m)


def L_plus_bounds(L_i: np.ndarray, pattern: SparsityPattern) -> tuple[float, float]:
    """Sparsity-refined upper bounds on L_plus.

    Returns (col_bound, min_bound) with
      col_bound = sqrt(max_j sum_{i owning j} L_i^2 / n)
      min_bound = min( sqrt(c * max_i L_i^2 / n), sqrt(sum_i L_i^2 / n) )
    and col_bound <= min_bound always.
    """
    L_i = np.asarray(L_i, dtype=float)
    if L_i.shape != (pattern.n,):
        raise ValueError(f"expected {pattern.n} client constants, got shape {L_i.shape}")
    if (L_i < 0).any():
        raise ValueError("client smoothness constants must be nonnegative")
    sq = L_i * L_i
    n = pattern.n
    col_sums = pattern.active.T.astype(float) @ sq
    col_bound = float(np.sqrt(col_sums.max() / n))
    min_bound = float(min(np.sqrt(pattern.c * sq.max() / n), np.sqrt(np.sum(sq) / n)))
    return col_bound, min_bound


@dataclass
class SmoothnessReport:
    """All smoothness constants of one problem instance."""

    L: float
    L_i: np.ndarray
    L_tilde: float
    L_plus_exact: float | None
    L_plus_bound_col: float
    L_plus_bound_min: float

    def to_json(self) -> str:
        payload = {
            "L": self.L,
            "L_i": np.asarray(self.L_i, dtype=float).tolist(),
            "L_tilde": self.L_tilde,
            "L_plus_exact": self.L_plus_exact,
            "L_plus_bound_col": self.L_plus_bound_col,
            "L_plus_bound_min": self.L_plus_bound_min,
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SmoothnessReport":
        payload = json.loads(text)
        return cls(
            L=float(payload["L"]),
            L_i=np.array(payload["L_i"], dtype=float),
            L_tilde=float(payload["L_tilde"]),
            L_plus_exact=None if payload["L_plus_exact"] is None else float(payload["L_plus_exact"]),
            L_plus_bound_col=float(payload["L_plus_bound_col"]),
            L_plus_bound_min=float(payload["L_plus_bound_min"]),
        )

    def l_plus(self, source: str = "col-bound") -> float:
        """Pick the L_plus value a stepsize rule should use."""
        if source == "exact":
            if self.L_plus_exact is None:
                raise ValueError("exact L_plus is only available for least-squares problems")
            return self.L_plus_exact
        if source == "col-bound":
            return self.L_plus_bound_col
        if source == "min-bound":
            return self.L_plus_bound_min
        raise ValueError(f"unknown L_plus source {source!r}")


def analyze_problem(problem: DistributedProblem) -> SmoothnessReport:
    """Compute every smoothness constant of a problem instance."""
    L_i = np.array([cl.L for cl in problem.clients], dtype=float)
    L_tilde = float(np.sqrt(np.sum(L_i * L_i) / problem.n))
    col, mn = L_plus_bounds(L_i, problem.pattern)
    return SmoothnessReport(
        L=problem.L,
        L_i=L_i,
        L_tilde=L_tilde,
        L_plus_exact=exact_L_plus_of(problem),
        L_plus_bound_col=col,
        L_plus_bound_min=mn,
    )


def global_curvature_matrix(clients) -> np.ndarray:
    """Assembled (1/n) sum_i of the clients' Hessian-bound matrices, full width."""
    d = clients[0].d
    total = np.zeros((d, d))
    for cl in clients:
        idx = cl.active
        total[np.ix_(idx, idx)] += cl.curvature_active()
    total /= len(clients)
    return total


def sqrt_beta_over_theta(alpha: float) -> float:
    """Closed form of sqrt(beta/theta): (sqrt(1 - alpha) + 1 - alpha) / alpha."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    return (np.sqrt(1.0 - alpha) + (1.0 - alpha)) / alpha


@dataclass(frozen=True)
class StepsizeParams:
    """Contraction-driven stepsize constants: theta = 1 - sqrt(1 - alpha), beta = (1 - alpha)/theta."""

    alpha: float
    theta: float
    beta: float
    gamma: float

    @staticmethod
    def derive(alpha: float, gamma: float) -> "StepsizeParams":
        if not 0.0 < alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
        theta = 1.0 - np.sqrt(1.0 - alpha)
        beta = (1.0 - alpha) / theta
        return StepsizeParams(alpha=alpha, theta=float(theta), beta=float(beta), gamma=float(gamma))


def stepsize_theorem1(L: float, L_plus: float, c: int, n: int, alpha: float) -> StepsizeParams:
    """Largest stepsize the sparsity-refined convergence theorem permits.

    gamma = 1 / (L + L_plus * sqrt(c/n) * sqrt(beta/theta)); alpha = 1 kills
    the compression penalty and recovers gamma = 1/L.
    """
    if L <= 0:
        raise ValueError(f"L must be positive, got {L}")
    if L_plus < 0:
        raise ValueError(f"L_plus must be nonnegative, got {L_plus}")
    if not 1 <= c <= n:
        raise ValueError(f"need 1 <= c <= n, got c={c}, n={n}")
    gamma = 1.0 / (L + L_plus * np.sqrt(c / n) * sqrt_beta_over_theta(alpha))
    return StepsizeParams.derive(alpha, gamma)


def standard_stepsize_ef21(L: float, L_tilde: float, alpha: float) -> float:
    """Baseline stepsize 1 / (L + L_tilde * sqrt(beta/theta)) of the unrefined analysis."""
    return stepsize_theorem1(L, L_tilde, c=1, n=1, alpha=alpha).gamma


def xi_complexity(alpha: float, L: float, L_tilde: float) -> float:
    """Communication-complexity objective xi(alpha) = (L + L_tilde*((1+sqrt(1-alpha))/alpha - 1)) * alpha.

    Nonincreasing on (0, 1] whenever L <= L_tilde, so the per-bit optimum of
    the unrefined analysis sits at alpha = 1 (no compression).
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    return (L + L_tilde * ((1.0 + np.sqrt(1.0 - alpha)) / alpha - 1.0)) * alpha


def adaptive_c_t(g_agg: np.ndarray, grad_f: np.ndarray, G_t: float, n: int) -> float:
    """Smallest overlap parameter consistent with the realized aggregation error.

    Returns n * ||g_agg - grad_f||^2 / G_t clamped to [0, n]; the 0/0 case at
    exact agreement returns 0.  A zero G_t with a nonzero numerator cannot
    occur for valid error-feedback states and is reported as corruption.
    """
    if G_t < 0:
        raise ValueError(f"G_t must be nonnegative, got {G_t}")
    diff = np.asarray(g_agg, dtype=float) - np.asarray(grad_f, dtype=float)
    num = float(diff @ diff)
    if G_t == 0.0:
        if num == 0.0:
            return 0.0
        raise ArithmeticError(f"zero mean estimator error with nonzero aggregate error {num}; state is corrupt")
    return float(np.clip(n * num / G_t, 0.0, n))


def adaptive_stepsize(c_t: float, L: float, L_i: np.ndarray, n: int, alpha: float) -> float:
    """Per-iteration stepsize using the adaptive overlap estimate c_t.

    L_plus_t = min( sqrt(c_t * max_i L_i^2 / n), sqrt(sum_i L_i^2 / n) ),
    gamma_t = 1 / (L + L_plus_t * sqrt(c_t/n) * sqrt(beta/theta)).
    """
    if not 0.0 <= c_t <= n:
        raise ValueError(f"c_t must lie in [0, n], got {c_t}")
    L_i = np.asarray(L_i, dtype=float)
    sq = L_i * L_i
    l_plus_t = min(np.sqrt(c_t * sq.max() / n), np.sqrt(np.sum(sq) / n))
    return float(1.0 / (L + l_plus_t * np.sqrt(c_t / n) * sqrt_beta_over_theta(alpha)))
