"""Optimizer state machines: DGD, DCGD, EF14, and EF21 (fixed or adaptive stepsize).

All methods operate on the same distributed-problem interface, evaluate
client gradients in fixed index order, and emit identically shaped traces.
An error-feedback run keeps one estimator row per client; the aggregate is
always recomputed from the rows, never updated incrementally, so the state
invariant g = mean(g_i) holds bitwise at every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .compressors import TopK, alpha_min, topk_compress_rows
from .metrics import ACCUM_TOL, EXACT_TOL, RunTrace, TraceRecord, VerificationError
from .problems import DistributedProblem
from .smoothness import (
    SmoothnessReport,
    StepsizeParams,
    adaptive_c_t,
    adaptive_stepsize,
    analyze_problem,
    standard_stepsize_ef21,
    stepsize_theorem1,
)

DIVERGENCE_NORM_CAP = 1e12

METHODS = ("DGD", "DCGD", "EF14", "EF21", "EF21-adaptive")
GAMMA_RULES = ("theoretical-standard", "theoretical-new", "adaptive", "explicit")


class DivergenceError(RuntimeError):
    """The iterate left the finite range; carries whatever trace was recorded."""

    def __init__(self, message: str, trace: RunTrace | None = None):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class IterateState:
    """Plain iterate for methods without client-side memory (DGD, DCGD)."""

    x: np.ndarray
    t: int = 0


@dataclass(frozen=True)
class EF21State:
    """EF21 state: iterate, per-client estimator rows, and their exact mean."""

    x: np.ndarray
    g_mat: np.ndarray
    g: np.ndarray
    t: int = 0

    @classmethod
    def initialize(cls, x0: np.ndarray, g_mat0: np.ndarray) -> "EF21State":
        return cls(x=x0, g_mat=g_mat0, g=g_mat0.mean(axis=0), t=0)


@dataclass(frozen=True)
class EF14State:
    """Legacy error-feedback state: iterate plus per-client error memory rows."""

    x: np.ndarray
    e_mat: np.ndarray
    t: int = 0


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce a run bit for bit."""

    method: str
    T: int
    K: int = 1
    gamma_rule: str = "theoretical-new"
    gamma: float | None = None
    seed: int = 0
    init: str = "g0-zero"
    x0: str = "zeros"
    l_plus_source: str = "col-bound"
    check_lemmas: bool = True
    adaptive_force_c: float | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.T < 0:
            raise ValueError(f"iteration budget must be nonnegative, got {self.T}")
        rule = self.resolved_rule()
        if rule not in GAMMA_RULES:
            raise ValueError(f"unknown gamma rule {self.gamma_rule!r}")
        if rule == "explicit" and (self.gamma is None or self.gamma <= 0):
            raise ValueError("explicit stepsize rule needs gamma > 0")
        if rule == "adaptive" and self.resolved_method() != "EF21-adaptive":
            raise ValueError("the adaptive stepsize rule applies to EF21 only")
        if self.init not in ("g0-zero", "g0-exact-gradient"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.x0 not in ("zeros", "uniform"):
            raise ValueError(f"unknown x0 mode {self.x0!r}")

    def resolved_method(self) -> str:
        if self.method == "EF21" and self.gamma_rule == "adaptive":
            return "EF21-adaptive"
        return self.method

    def resolved_rule(self) -> str:
        if self.method == "EF21-adaptive":
            return "adaptive"
        return self.gamma_rule


def _guard_finite(x: np.ndarray, t: int) -> None:
    if not np.isfinite(x).all() or float(np.linalg.norm(x)) > DIVERGENCE_NORM_CAP:
        raise _Diverged(t)


class _Diverged(Exception):
    def __init__(self, t: int):
        super().__init__(f"iterate became non-finite or exceeded norm {DIVERGENCE_NORM_CAP:g} at t={t}")
        self.t = t


def _ef21_advance(state: EF21State, problem: DistributedProblem, spec: TopK, gamma: float):
    x_new = state.x - gamma * state.g
    _guard_finite(x_new, state.t + 1)
    fvals, grads = problem.value_and_grad_matrix(x_new)
    g_mat = state.g_mat + topk_compress_rows(spec, grads - state.g_mat)
    new = EF21State(x=x_new, g_mat=g_mat, g=g_mat.mean(axis=0), t=state.t + 1)
    return new, fvals, grads


def _dgd_advance(state: IterateState, problem: DistributedProblem, grads: np.ndarray, gamma: float):
    x_new = state.x - gamma * grads.mean(axis=0)
    _guard_finite(x_new, state.t + 1)
    fvals, new_grads = problem.value_and_grad_matrix(x_new)
    return IterateState(x=x_new, t=state.t + 1), fvals, new_grads


def _dcgd_advance(state: IterateState, problem: DistributedProblem, spec: TopK,
                  grads: np.ndarray, gamma: float):
    x_new = state.x - gamma * topk_compress_rows(spec, grads).mean(axis=0)
    _guard_finite(x_new, state.t + 1)
    fvals, new_grads = problem.value_and_grad_matrix(x_new)
    return IterateState(x=x_new, t=state.t + 1), fvals, new_grads


def _ef14_advance(state: EF14State, problem: DistributedProblem, spec: TopK,
                  grads: np.ndarray, gamma: float):
    shifted = state.e_mat + gamma * grads
    v = topk_compress_rows(spec, shifted)
    x_new = state.x - v.mean(axis=0)
    _guard_finite(x_new, state.t + 1)
    e_new = shifted - v
    fvals, new_grads = problem.value_and_grad_matrix(x_new)
    return EF14State(x=x_new, e_mat=e_new, t=state.t + 1), fvals, new_grads


def step_ef21(state: EF21State, problem: DistributedProblem, spec: TopK, gamma: float) -> EF21State:
    """One EF21 round: descend along g, then each client compresses its gradient shift."""
    try:
        return _ef21_advance(state, problem, spec, gamma)[0]
    except _Diverged as exc:
        raise DivergenceError(str(exc)) from None


def step_dgd(state: IterateState, problem: DistributedProblem, gamma: float) -> IterateState:
    """One distributed gradient-descent round."""
    grads = problem.grad_matrix(state.x)
    try:
        return _dgd_advance(state, problem, grads, gamma)[0]
    except _Diverged as exc:
        raise DivergenceError(str(exc)) from None


def step_dcgd(state: IterateState, problem: DistributedProblem, spec: TopK, gamma: float) -> IterateState:
    """One compressed gradient-descent round (no error feedback; may diverge)."""
    grads = problem.grad_matrix(state.x)
    try:
        return _dcgd_advance(state, problem, spec, grads, gamma)[0]
    except _Diverged as exc:
        raise DivergenceError(str(exc)) from None


def step_ef14(state: EF14State, problem: DistributedProblem, spec: TopK, gamma: float) -> EF14State:
    """One legacy error-feedback round: compress memory plus scaled gradient."""
    grads = problem.grad_matrix(state.x)
    try:
        return _ef14_advance(state, problem, spec, grads, gamma)[0]
    except _Diverged as exc:
        raise DivergenceError(str(exc)) from None


def _round_bits(method: str, n: int, d: int, k: int) -> tuple[int, int]:
    """Client-to-server bits per round: pure float count and index-annotated count."""
    index_bits = math.ceil(math.log2(d)) if d > 1 else 0
    if method == "DGD":
        return 32 * n * d, 32 * n * d
    return 32 * n * k, n * k * (32 + index_bits)


def _initial_x(config: RunConfig, d: int) -> np.ndarray:
    if config.x0 == "zeros":
        return np.zeros(d)
    rng = np.random.default_rng(config.seed)
    bound = 1.0 / np.sqrt(d)
    return rng.uniform(-bound, bound, size=d)


def run(config: RunConfig, problem: DistributedProblem,
        report: SmoothnessReport | None = None) -> RunTrace:
    """Execute a full run and record one trace row per visited iterate.

    Row t describes the state x_t (objective, squared gradient norm, the
    method's estimator error G_t, the Lyapunov value, the stepsize in force
    and cumulative bits after t rounds); a T-iteration run yields T+1 rows.
    On divergence the partial trace rides along with the raised error.
    """
    method = config.resolved_method()
    rule = config.resolved_rule()
    if report is None:
        report = analyze_problem(problem)
    pattern = problem.pattern
    n, d = problem.n, problem.d
    spec = TopK(config.K)
    if config.K > d:
        raise ValueError(f"K={config.K} exceeds dimension {d}")
    alpha = 1.0 if method == "DGD" else alpha_min(spec, pattern.row_counts)
    params = StepsizeParams.derive(alpha, 0.0)

    gamma_fixed: float | None
    if rule == "explicit":
        gamma_fixed = float(config.gamma)
    elif rule == "theoretical-standard":
        gamma_fixed = standard_stepsize_ef21(report.L, report.L_tilde, alpha)
    elif rule == "theoretical-new":
        l_plus = report.l_plus(config.l_plus_source)
        gamma_fixed = stepsize_theorem1(report.L, l_plus, pattern.c, n, alpha).gamma
    else:
        gamma_fixed = None

    f_star_known = problem.f_star_hint is not None
    f_star_used = problem.f_star_hint if f_star_known else 0.0
    bits_float_round, bits_indexed_round = _round_bits(method, n, d, config.K)
    l_plus_check = report.L_plus_exact if report.L_plus_exact is not None else report.L_plus_bound_col

    metadata = {
        "method": method,
        "gamma_rule": rule,
        "gamma": gamma_fixed,
        "T": config.T,
        "K": config.K,
        "seed": config.seed,
        "init": config.init,
        "x0": config.x0,
        "l_plus_source": config.l_plus_source,
        "check_lemmas": config.check_lemmas,
        "adaptive_force_c": config.adaptive_force_c,
        "n": n,
        "d": d,
        "c": pattern.c,
        "r": pattern.r,
        "alpha": alpha,
        "theta": params.theta,
        "beta": params.beta,
        "L": report.L,
        "L_tilde": report.L_tilde,
        "L_plus_exact": report.L_plus_exact,
        "L_plus_bound_col": report.L_plus_bound_col,
        "L_plus_bound_min": report.L_plus_bound_min,
        "f_star_used": f_star_used,
        "f_star_known": f_star_known,
        "bits_float_per_round": bits_float_round,
        "bits_indexed_per_round": bits_indexed_round,
        "problem_hash": problem.hash(),
        "label": f"{method}[{rule}]",
    }

    x0 = _initial_x(config, d)
    fvals, grads = problem.value_and_grad_matrix(x0)
    if method in ("EF21", "EF21-adaptive"):
        g_mat0 = grads.copy() if config.init == "g0-exact-gradient" else np.zeros((n, d))
        state: object = EF21State.initialize(x0, g_mat0)
    elif method == "EF14":
        state = EF14State(x=x0, e_mat=np.zeros((n, d)), t=0)
    else:
        state = IterateState(x=x0, t=0)

    records: list[TraceRecord] = []
    prev_G: float | None = None
    prev_x: np.ndarray | None = None

    def record_and_check(t: int) -> float:
        """Append row t from the current state; return the stepsize for step t."""
        nonlocal prev_G, prev_x
        f_val = float(fvals.mean())
        grad_f = grads.mean(axis=0)
        grad_sq = float(grad_f @ grad_f)
        agg_err = None
        if method in ("EF21", "EF21-adaptive"):
            diffs = state.g_mat - grads
            G = float(np.einsum("ij,ij->i", diffs, diffs).mean())
            agg = state.g - grad_f
            agg_err = float(agg @ agg)
        elif method == "EF14":
            G = float(np.einsum("ij,ij->i", state.e_mat, state.e_mat).mean())
        elif method == "DCGD":
            resid = topk_compress_rows(spec, grads) - grads
            G = float(np.einsum("ij,ij->i", resid, resid).mean())
        else:
            G = 0.0
        if method == "EF21-adaptive":
            if config.adaptive_force_c is not None:
                c_t = float(config.adaptive_force_c)
            else:
                c_t = adaptive_c_t(state.g, grad_f, G, n)
            gamma_t = adaptive_stepsize(c_t, report.L, report.L_i, n, alpha)
        else:
            c_t = float(pattern.c)
            gamma_t = gamma_fixed
        if config.check_lemmas and method in ("EF21", "EF21-adaptive"):
            bound = pattern.c / n * G
            if agg_err > bound + EXACT_TOL:
                raise VerificationError(
                    f"aggregation inequality violated at t={t}: "
                    f"||g - grad f||^2 = {agg_err!r} > (c/n) G = {bound!r}"
                )
            if prev_G is not None:
                dx = state.x - prev_x
                rhs = (1.0 - params.theta) * prev_G + params.beta * l_plus_check ** 2 * float(dx @ dx)
                if G > rhs + ACCUM_TOL * max(1.0, rhs):
                    raise VerificationError(
                        f"estimator-error recursion violated at t={t}: G={G!r} > {rhs!r}"
                    )
            prev_G, prev_x = G, state.x
        psi = f_val - f_star_used + gamma_t * pattern.c / (2.0 * params.theta * n) * G
        records.append(TraceRecord(
            t=t, f=f_val, grad_norm_sq=grad_sq, G=G, Psi=psi, gamma=gamma_t, c_t=c_t,
            bits_float=t * bits_float_round, bits_indexed=t * bits_indexed_round,
        ))
        return gamma_t

    try:
        for t in range(config.T + 1):
            gamma_t = record_and_check(t)
            if t == config.T:
                break
            if method in ("EF21", "EF21-adaptive"):
                state, fvals, grads = _ef21_advance(state, problem, spec, gamma_t)
            elif method == "DGD":
                state, fvals, grads = _dgd_advance(state, problem, grads, gamma_t)
            elif method == "DCGD":
                state, fvals, grads = _dcgd_advance(state, problem, spec, grads, gamma_t)
            else:
                state, fvals, grads = _ef14_advance(state, problem, spec, grads, gamma_t)
    except _Diverged as exc:
        partial = RunTrace(records=records, metadata={**metadata, "diverged_at": exc.t})
        raise DivergenceError(str(exc), trace=partial) from None

    return RunTrace(records=records, metadata=metadata)
