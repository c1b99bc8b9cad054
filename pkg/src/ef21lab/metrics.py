"""Per-iteration diagnostics, trace serialization, and convergence certificates.

A run trace is one record per visited iterate: objective value, squared
gradient norm, mean squared estimator error G, Lyapunov value Psi, the
stepsize in force, the overlap parameter, and cumulative communication in
bits (pure-float count and indexed count).  Traces round-trip losslessly
through CSV, carry a JSON metadata sidecar, and feed the certificate
checks for the convergence theorem.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .problems import DistributedProblem

CSV_HEADER = "t,f,grad_norm_sq,G,Psi,gamma,c_t,bits_float,bits_indexed"

#: absolute slack for exact identities, relative slack for float accumulation
EXACT_TOL = 1e-12
ACCUM_TOL = 1e-9


class VerificationError(AssertionError):
    """A trajectory violated an inequality that the theory guarantees."""


@dataclass(frozen=True)
class TraceRecord:
    t: int
    f: float
    grad_norm_sq: float
    G: float
    Psi: float
    gamma: float
    c_t: float
    bits_float: int
    bits_indexed: int

    def to_csv_row(self) -> str:
        return ",".join([
            str(self.t), repr(self.f), repr(self.grad_norm_sq), repr(self.G),
            repr(self.Psi), repr(self.gamma), repr(self.c_t),
            str(self.bits_float), str(self.bits_indexed),
        ])

    @classmethod
    def from_csv_row(cls, row: str) -> "TraceRecord":
        parts = row.split(",")
        if len(parts) != 9:
            raise ValueError(f"expected 9 fields per trace row, got {len(parts)}")
        return cls(
            t=int(parts[0]), f=float(parts[1]), grad_norm_sq=float(parts[2]),
            G=float(parts[3]), Psi=float(parts[4]), gamma=float(parts[5]),
            c_t=float(parts[6]), bits_float=int(parts[7]), bits_indexed=int(parts[8]),
        )


@dataclass
class RunTrace:
    """Recorded iterates of one run plus its resolved configuration metadata."""

    records: list[TraceRecord] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(rec, name) for rec in self.records], dtype=float)

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        lines.extend(rec.to_csv_row() for rec in self.records)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str, metadata: dict | None = None) -> "RunTrace":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != CSV_HEADER:
            raise ValueError(f"bad trace header; expected {CSV_HEADER!r}")
        records = [TraceRecord.from_csv_row(ln) for ln in lines[1:]]
        return cls(records=records, metadata=dict(metadata or {}))

    def metadata_json(self) -> str:
        return json.dumps(self.metadata, indent=2, sort_keys=True)

    def first_hit(self, target_grad_sq: float) -> int | None:
        """First iteration whose squared gradient norm is at most the target."""
        for rec in self.records:
            if rec.grad_norm_sq <= target_grad_sq:
                return rec.t
        return None


def gradient_error(problem: DistributedProblem, state) -> tuple[float, np.ndarray, float]:
    """Estimator-error diagnostics (G, per-client G_i, aggregation error) at a state.

    ``state`` must expose the iterate ``x``, the per-client estimator rows
    ``g_mat`` and the aggregate ``g``.  Verifies the sparsity-refined
    aggregation inequality ||g - grad f||^2 <= (c/n) G before returning.
    """
    grads = problem.grad_matrix(state.x)
    diffs = state.g_mat - grads
    G_i = np.einsum("ij,ij->i", diffs, diffs)
    G = float(G_i.mean())
    agg = state.g - grads.mean(axis=0)
    agg_err = float(agg @ agg)
    bound = problem.pattern.c / problem.n * G
    if agg_err > bound + EXACT_TOL:
        raise VerificationError(
            f"aggregation error {agg_err!r} exceeds (c/n) G = {bound!r} at t={getattr(state, 't', '?')} "
            f"(c={problem.pattern.c}, n={problem.n})"
        )
    return G, G_i, agg_err


def lyapunov_values(trace: RunTrace) -> np.ndarray:
    """Psi_t recomputed from trace fields: f - f_star + gamma*c/(2*theta*n) * G."""
    meta = trace.metadata
    f_star = meta["f_star_used"]
    coef = meta["gamma"] * meta["c"] / (2.0 * meta["theta"] * meta["n"])
    return trace.column("f") - f_star + coef * trace.column("G")


def theorem1_certificate(trace: RunTrace, rel_tol: float = ACCUM_TOL,
                         check: bool = True) -> dict:
    """Check the convergence theorem on a completed fixed-stepsize run.

    Validates the per-step Lyapunov descent
    Psi_{t+1} <= Psi_t - (gamma/2) ||grad f(x_t)||^2 and the averaged bound
    (1/T) sum_t ||grad f(x_t)||^2 <= 2 (f_0 - f_star)/(gamma T) + (c/n) G_0 / (theta T).
    Returns the margins; raises VerificationError on violation when
    ``check`` is set.
    """
    meta = trace.metadata
    if len(trace) < 2:
        raise ValueError("certificate needs at least one completed step")
    T = len(trace) - 1
    gamma = meta["gamma"]
    theta = meta["theta"]
    c, n = meta["c"], meta["n"]
    f_star = meta["f_star_used"]
    g_sq = trace.column("grad_norm_sq")
    psi = trace.column("Psi")

    descent_gap = psi[1:] - (psi[:-1] - 0.5 * gamma * g_sq[:-1])
    scale = np.maximum(1.0, np.abs(psi[:-1]))
    worst = float((descent_gap / scale).max())
    lyapunov_ok = worst <= rel_tol

    avg_grad_sq = float(g_sq[:T].mean())
    f0 = trace.records[0].f
    G0 = trace.records[0].G
    bound = 2.0 * (f0 - f_star) / (gamma * T) + (c / n) * G0 / (theta * T)
    average_ok = avg_grad_sq <= bound * (1.0 + rel_tol)

    report = {
        "T": T,
        "gamma": gamma,
        "avg_grad_sq": avg_grad_sq,
        "bound": bound,
        "bound_margin": bound - avg_grad_sq,
        "average_ok": average_ok,
        "lyapunov_worst_gap": worst,
        "lyapunov_ok": lyapunov_ok,
    }
    if check and not (lyapunov_ok and average_ok):
        raise VerificationError(f"convergence certificate failed: {report}")
    return report


def compare_runs(traces: list[RunTrace], targets: list[float] | None = None) -> list[dict]:
    """Iterations and bits needed by each run to hit shared gradient-norm targets.

    All traces must stem from the same problem (matching problem hashes).
    Targets default to a decade grid spanning what every run achieved.
    Each output row carries the target, per-run (iterations, bits) or None,
    and the label of the fastest run (ties keep the first).
    """
    if len(traces) < 2:
        raise ValueError("need at least two runs to compare")
    hashes = {tr.metadata.get("problem_hash") for tr in traces}
    if len(hashes) != 1:
        raise ValueError(f"refusing to compare runs from different problems: {sorted(map(str, hashes))}")
    labels = [tr.metadata.get("label") or f"run{i}" for i, tr in enumerate(traces)]
    if targets is None:
        tops = [tr.column("grad_norm_sq")[0] for tr in traces]
        floors = [tr.column("grad_norm_sq").min() for tr in traces]
        hi, lo = min(tops), max(min(floors), 1e-300)
        if lo >= hi:
            targets = [hi]
        else:
            decades = int(np.floor(np.log10(hi) - np.log10(lo))) + 1
            targets = list(10.0 ** (np.log10(hi) - np.arange(1, decades + 1)))
    rows = []
    for target in targets:
        per_run = []
        for tr in traces:
            t_hit = tr.first_hit(target)
            if t_hit is None:
                per_run.append(None)
            else:
                rec = tr.records[t_hit]
                per_run.append({"iterations": t_hit, "bits_float": rec.bits_float,
                                "bits_indexed": rec.bits_indexed})
        reached = [(res["iterations"], k) for k, res in enumerate(per_run) if res is not None]
        winner = labels[min(reached)[1]] if reached else None
        rows.append({"target_grad_sq": target,
                     "runs": dict(zip(labels, per_run)),
                     "winner": winner})
    return rows
