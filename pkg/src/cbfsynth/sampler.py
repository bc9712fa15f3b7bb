"""Uniform state sampling, feasibility classification, and Jaccard tracking.

States drawn uniformly from the sampling box are split into three classes:

    outside    z(x) < 0
    feasible   z(x) >= 0 and some admissible input attains zdot = 0
               (or zdot > 0 holds unconditionally)
    infeasible z(x) >= 0 but no admissible input can stop z from decaying

The feasible fraction J = card(feasible) / card(all) is recorded at
geometrically growing checkpoints; sampling stops once the count exceeds the
configured minimum and the change in J between consecutive checkpoints drops
below the threshold.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .qp import lie_derivatives, min_zdot_residual, zero_tolerance
from .system import BoxSet, HardConstraint, SystemModel

Array = np.ndarray

FORMAT_VERSION = 1
DEFAULT_ZERO_TOL = 1e-9


class SampleClass(enum.Enum):
    OUTSIDE = "outside"
    INFEASIBLE = "infeasible"
    FEASIBLE = "feasible"


_CLASS_CODE = {SampleClass.OUTSIDE: 0, SampleClass.INFEASIBLE: 1, SampleClass.FEASIBLE: 2}
_CODE_CLASS = {v: k for k, v in _CLASS_CODE.items()}


@dataclass(frozen=True)
class SampleRecord:
    state: Array
    label: SampleClass
    residual: float


@dataclass
class JaccardTracker:
    """Counts of total and feasible samples plus the (n, J) checkpoint history."""

    n_total: int = 0
    n_feasible: int = 0
    history: list[tuple[int, float]] = field(default_factory=list)

    @property
    def jaccard(self) -> float:
        return self.n_feasible / self.n_total if self.n_total else 0.0

    def checkpoint(self):
        self.history.append((self.n_total, self.jaccard))

    def deltas(self) -> list[float]:
        """|J_k - J_{k-1}| per checkpoint, with J_0 = 0 before any data."""
        out, prev = [], 0.0
        for _, j in self.history:
            out.append(abs(j - prev))
            prev = j
        return out


@dataclass
class SampleSet:
    """Classified samples stored column-wise for vectorized consumers."""

    states: Array                  # (N, n)
    labels: Array                  # (N,) int8 codes
    residuals: Array               # (N,)
    bounds: BoxSet
    seed: int
    zero_tol: float                # coefficient of the scale-aware threshold
    tracker: JaccardTracker
    system_name: str = "anonymous"
    converged: bool = True
    hcf: HardConstraint | None = None   # transient, not persisted

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def records(self) -> list[SampleRecord]:
        return list(self.iter_records())

    def iter_records(self) -> Iterator[SampleRecord]:
        for i in range(len(self)):
            yield SampleRecord(self.states[i], _CODE_CLASS[int(self.labels[i])],
                               float(self.residuals[i]))

    def class_mask(self, label: SampleClass) -> Array:
        return self.labels == _CLASS_CODE[label]

    def checksum(self) -> str:
        return hashlib.sha256(canonical_bytes(self)).hexdigest()


def draw_batch(bounds: BoxSet, count: int, rng: np.random.Generator) -> Array:
    """Draw `count` i.i.d. uniform states in the box; degenerate axes yield constants."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return rng.uniform(bounds.lower, bounds.upper, size=(count, bounds.dim))


def default_extra_feasible(sys: SystemModel, states: Array) -> Array:
    """States where the input cannot influence zdot but zdot is strictly positive.

    Vectorized over (..., n); generalizes augmenting the feasible class with
    regions where z can only grow.
    """
    states = np.asarray(states, dtype=float)
    grad = sys.hcf.gradient(states)
    lf = np.sum(grad * sys.drift(states), axis=-1)
    lg = np.einsum("...n,...nm->...m", grad, sys.actuation(states))
    return (np.max(np.abs(lg), axis=-1) == 0.0) & (lf > 0.0)


def classify(sys: SystemModel, input_box: BoxSet, x: Array,
             zero_tol: float | None = None,
             extra_feasible: Callable[[Array], Array] | None = None) -> SampleRecord:
    """Classify one state.

    `zero_tol` is the coefficient of the scale-aware residual threshold
    coeff * (1 + L_f z(x)^2); None selects the default coefficient.
    `extra_feasible` overrides the built-in unconditional-growth rule and must
    accept an (N, n) batch.
    """
    x = np.asarray(x, dtype=float)
    coeff = DEFAULT_ZERO_TOL if zero_tol is None else zero_tol
    zval = float(sys.hcf.value(x))
    if zval < 0.0:
        return SampleRecord(x, SampleClass.OUTSIDE, 0.0)
    u, residual = min_zdot_residual(sys, x, input_box)
    lf, _ = lie_derivatives(sys, x)
    if residual <= zero_tolerance(lf, coeff):
        return SampleRecord(x, SampleClass.FEASIBLE, residual)
    extra = default_extra_feasible(sys, x[None, :]) if extra_feasible is None \
        else np.asarray(extra_feasible(x[None, :]), dtype=bool)
    if bool(extra.reshape(-1)[0]):
        return SampleRecord(x, SampleClass.FEASIBLE, residual)
    return SampleRecord(x, SampleClass.INFEASIBLE, residual)


def classify_batch(sys: SystemModel, input_box: BoxSet, states: Array,
                   zero_tol: float | None = None,
                   extra_feasible: Callable[[Array], Array] | None = None
                   ) -> tuple[Array, Array]:
    """Vectorized classification; returns (label codes, residuals).

    Elementwise-identical to per-state `classify` (same formulas, no
    cross-sample reductions), so batch order cannot affect labels.
    """
    states = np.asarray(states, dtype=float)
    coeff = DEFAULT_ZERO_TOL if zero_tol is None else zero_tol
    n_samples = states.shape[0]
    zvals = sys.hcf.value(states)
    grad = sys.hcf.gradient(states)
    lf = np.sum(grad * sys.drift(states), axis=-1)
    lg = np.einsum("...n,...nm->...m", grad, sys.actuation(states))

    residuals = np.empty(n_samples)
    lg_zero = np.max(np.abs(lg), axis=-1) == 0.0
    residuals[lg_zero] = lf[lg_zero] ** 2
    active = ~lg_zero
    if sys.m == 1 and np.any(active):
        a = lg[active, 0]
        u = np.clip(-lf[active] / a, input_box.lower[0], input_box.upper[0])
        residuals[active] = (lf[active] + a * u) ** 2
    else:
        for i in np.flatnonzero(active):
            _, residuals[i] = min_zdot_residual(sys, states[i], input_box)

    if extra_feasible is None:
        extra = lg_zero & (lf > 0.0)
    else:
        extra = np.asarray(extra_feasible(states), dtype=bool)

    outside = zvals < 0.0
    feasible = ~outside & ((residuals <= zero_tolerance_vec(lf, coeff)) | extra)
    labels = np.full(n_samples, _CLASS_CODE[SampleClass.INFEASIBLE], dtype=np.int8)
    labels[outside] = _CLASS_CODE[SampleClass.OUTSIDE]
    labels[feasible] = _CLASS_CODE[SampleClass.FEASIBLE]
    residuals = np.where(outside, 0.0, residuals)
    return labels, residuals


def zero_tolerance_vec(lf: Array, coeff: float) -> Array:
    return coeff * (1.0 + np.asarray(lf) ** 2)


def run_sampling(sys: SystemModel, input_box: BoxSet, bounds: BoxSet,
                 n_min: int, delta: float, growth: float, seed: int,
                 n_start: int = 243, n_max: int = 2_000_000,
                 zero_tol: float | None = None,
                 extra_feasible: Callable[[Array], Array] | None = None) -> SampleSet:
    """Sample, classify and grow until the Jaccard increment settles.

    Checkpoints are n_start, n_start*growth, ... The run stops at the first
    checkpoint with n >= n_min and |J_k - J_{k-1}| <= delta; exceeding n_max
    returns the data collected so far with `converged` set to False.
    """
    if n_min < 1:
        raise ValueError("n_min must be >= 1")
    if not 0.0 < delta <= 1.0:
        raise ValueError("delta must lie in (0, 1]")
    if growth <= 1.0:
        raise ValueError("growth must exceed 1")
    rng = np.random.Generator(np.random.Philox(key=seed))
    tracker = JaccardTracker()
    chunks_states, chunks_labels, chunks_res = [], [], []
    target = int(n_start)
    converged = False
    prev_j = 0.0
    while True:
        new = target - tracker.n_total
        states = draw_batch(bounds, new, rng)
        labels, residuals = classify_batch(sys, input_box, states, zero_tol, extra_feasible)
        chunks_states.append(states)
        chunks_labels.append(labels)
        chunks_res.append(residuals)
        tracker.n_total += new
        tracker.n_feasible += int(np.sum(labels == _CLASS_CODE[SampleClass.FEASIBLE]))
        tracker.checkpoint()
        j = tracker.jaccard
        if tracker.n_total >= n_min and abs(j - prev_j) <= delta:
            converged = True
            break
        prev_j = j
        if tracker.n_total >= n_max:
            break
        target = min(int(round(target * growth)), int(n_max))
    return SampleSet(
        states=np.vstack(chunks_states),
        labels=np.concatenate(chunks_labels),
        residuals=np.concatenate(chunks_res),
        bounds=bounds,
        seed=int(seed),
        zero_tol=DEFAULT_ZERO_TOL if zero_tol is None else float(zero_tol),
        tracker=tracker,
        system_name=sys.name,
        converged=converged,
        hcf=sys.hcf,
    )


def merge(a: SampleSet, b: SampleSet) -> SampleSet:
    """Concatenate two sample sets drawn over the same box and tolerance."""
    if not (np.array_equal(a.bounds.lower, b.bounds.lower)
            and np.array_equal(a.bounds.upper, b.bounds.upper)):
        raise ValueError("sample sets cover different boxes")
    if a.zero_tol != b.zero_tol:
        raise ValueError("sample sets use different zero tolerances")
    tracker = JaccardTracker(
        n_total=a.tracker.n_total + b.tracker.n_total,
        n_feasible=a.tracker.n_feasible + b.tracker.n_feasible,
    )
    tracker.checkpoint()
    return SampleSet(
        states=np.vstack([a.states, b.states]),
        labels=np.concatenate([a.labels, b.labels]),
        residuals=np.concatenate([a.residuals, b.residuals]),
        bounds=a.bounds,
        seed=a.seed,
        zero_tol=a.zero_tol,
        tracker=tracker,
        system_name=a.system_name,
        converged=a.converged and b.converged,
        hcf=a.hcf,
    )


# ---------------------------------------------------------------------------
# Line-delimited JSON persistence (bit-exact round trip)

def canonical_bytes(s: SampleSet) -> bytes:
    lines = [json.dumps({
        "version": FORMAT_VERSION,
        "system": s.system_name,
        "bounds": {"lower": s.bounds.lower.tolist(), "upper": s.bounds.upper.tolist()},
        "seed": s.seed,
        "zero_tol": s.zero_tol,
        "checkpoints": [{"n": n, "J": j} for n, j in s.tracker.history],
        "converged": s.converged,
    }, separators=(",", ":"))]
    names = {code: cls.value for code, cls in _CODE_CLASS.items()}
    for i in range(len(s)):
        lines.append(json.dumps({
            "x": s.states[i].tolist(),
            "class": names[int(s.labels[i])],
            "residual": float(s.residuals[i]),
        }, separators=(",", ":")))
    return ("\n".join(lines) + "\n").encode()


def save_samples(s: SampleSet, path) -> str:
    """Write the set; returns the content digest."""
    data = canonical_bytes(s)
    with open(path, "wb") as f:
        f.write(data)
    return hashlib.sha256(data).hexdigest()


def load_samples(path) -> SampleSet:
    with open(path, "rb") as f:
        lines = f.read().decode().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty sample file")
    header = json.loads(lines[0])
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported sample file version {header.get('version')}")
    name_code = {cls.value: code for cls, code in _CLASS_CODE.items()}
    states, labels, residuals = [], [], []
    for line in lines[1:]:
        rec = json.loads(line)
        states.append(rec["x"])
        labels.append(name_code[rec["class"]])
        residuals.append(rec["residual"])
    tracker = JaccardTracker(history=[(c["n"], c["J"]) for c in header["checkpoints"]])
    labels_arr = np.array(labels, dtype=np.int8)
    tracker.n_total = len(labels)
    tracker.n_feasible = int(np.sum(labels_arr == _CLASS_CODE[SampleClass.FEASIBLE]))
    return SampleSet(
        states=np.array(states, dtype=float).reshape(len(labels), -1),
        labels=labels_arr,
        residuals=np.array(residuals, dtype=float),
        bounds=BoxSet(np.array(header["bounds"]["lower"]), np.array(header["bounds"]["upper"])),
        seed=int(header["seed"]),
        zero_tol=float(header["zero_tol"]),
        tracker=tracker,
        system_name=header["system"],
        converged=bool(header["converged"]),
    )
