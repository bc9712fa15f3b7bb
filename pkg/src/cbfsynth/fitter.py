"""Barrier parameter fitting over classified samples.

Three programs, all maximizing a Monte Carlo estimate of the candidate set
size over the integration region V:

    uniform      one candidate, D = d I with d > 0, plus shift and offset;
                 the offset is eliminated in closed form as the largest value
                 keeping every boundary sample strictly outside the set.
    nonuniform   per-axis scales d_i >= 0; boundary samples must additionally
                 admit an input making dz/dx Dbar xdot nonnegative, with
                 Dbar = diag(0, d_2 - d_1, ..., d_n - d_1).
    multi        s candidate tuples whose intersection is maximized; instead
                 of the boundary-sample constraint, every sample inside the
                 intersection must belong to the feasible class, and the
                 exists-input condition is enforced at bisection probes of
                 each candidate's active boundary.

The decision spaces are tiny, so the search is Nelder-Mead on a penalized
objective with structured and random restarts, followed by a coordinate-wise
golden-section polish. Incumbents are accepted only when hard-feasible on the
full sample set.
"""

from __future__ import annotations

import json
import hashlib
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import optimize as sopt

from .boundary import BoundarySet
from .qp import QpProblem, max_over_box, solve_box_qp
from .sampler import SampleClass, SampleSet
from .system import (BoxSet, CbfCandidate, HardConstraint, SystemModel,
                     eval_h_batch, identity_candidate)

Array = np.ndarray

# incumbents must keep the non-feasible fraction of the enclosed samples below this
CONTAINMENT_REJECT_TOL = 1e-3
_MIN_UNIFORM_SCALE = 1e-9


@dataclass(frozen=True)
class FitConfig:
    """Mode, constraint strictness, objective and search budget."""

    mode: str = "uniform"                      # uniform | nonuniform | multi
    num_cbfs: int = 1
    margin: float = 0.0
    objective: str = "sample_count"            # sample_count | integral
    restarts: int = 8
    iterations: int = 400
    population: int = 32
    seed: int = 0
    volume_region: BoxSet | None = None
    probes: int = 256

    def __post_init__(self):
        if self.mode not in ("uniform", "nonuniform", "multi"):
            raise ValueError(f"unknown fit mode {self.mode!r}")
        if self.objective not in ("sample_count", "integral"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")
        if self.mode == "multi" and self.num_cbfs < 2:
            raise ValueError("multi mode needs num_cbfs >= 2")


@dataclass(frozen=True)
class VerificationReport:
    containment_fraction: float
    boundary_cbf_feasible_fraction: float
    prop2_feasible_fraction: float
    empty_warning: bool = False


@dataclass(frozen=True)
class FitResult:
    candidates: list[CbfCandidate]
    objective_value: float
    verification: VerificationReport
    redundancy_flags: list[tuple[int, int, bool]]
    mode: str
    feasible: bool = True
    diagnostics: str = ""


def _h_matrix(cands: Sequence[CbfCandidate], hcf: HardConstraint, states: Array) -> Array:
    """(N, s) matrix of barrier values."""
    return np.stack([eval_h_batch(c, hcf, states) for c in cands], axis=-1)


def estimate_set_size(cands: Sequence[CbfCandidate], s: SampleSet,
                      cfg: FitConfig) -> float:
    """Monte Carlo size of {min_j h_j >= 0} inside the integration region.

    sample_count counts enclosed samples; integral averages the clipped
    barrier value (the literal integrand with its negative part dropped).
    """
    if not cands:
        raise ValueError("need at least one candidate")
    region = cfg.volume_region or s.bounds
    vol = region.volume()
    if vol <= 0:
        raise ValueError("volume region has zero volume")
    in_v = region.contains(s.states)
    n_in = int(np.sum(in_v))
    if n_in == 0:
        raise ValueError("volume region contains no samples")
    hmin = _h_matrix(cands, s_hcf(s), s.states[in_v]).min(axis=-1)
    if cfg.objective == "sample_count":
        return float(np.sum(hmin >= 0.0)) / n_in * vol
    return float(np.mean(np.maximum(hmin, 0.0))) * vol


# Sample sets loaded from disk do not carry the constraint function; fits
# receive the system and rebind it before the batched evaluations above.
def s_hcf(s: SampleSet) -> HardConstraint:
    if s.hcf is None:
        raise ValueError("sample set carries no constraint function; "
                         "call bind_hcf(samples, system) first")
    return s.hcf


def bind_hcf(s: SampleSet, sys: SystemModel) -> SampleSet:
    s.hcf = sys.hcf
    return s


# ---------------------------------------------------------------------------
# Search context: everything precomputed once per fit call

class _SearchContext:
    def __init__(self, s: SampleSet, b: BoundarySet | None, sys: SystemModel,
                 input_box: BoxSet | None, cfg: FitConfig):
        bind_hcf(s, sys)
        self.s = s
        self.sys = sys
        self.hcf = sys.hcf
        self.cfg = cfg
        self.input_box = input_box
        self.region = cfg.volume_region or s.bounds
        self.vol = self.region.volume()
        if self.vol <= 0:
            raise ValueError("volume region has zero volume")
        self.n = s.bounds.dim

        self.states = s.states
        self.feas = s.class_mask(SampleClass.FEASIBLE)
        self.in_v = self.region.contains(self.states)
        if not np.any(self.in_v):
            raise ValueError("volume region contains no samples")

        stride = max(1, len(s) // 60000)
        self.sub = slice(None, None, stride)
        self.states_sub = self.states[self.sub]
        self.feas_sub = self.feas[self.sub]
        self.in_v_sub = self.in_v[self.sub]
        self.n_in_v_sub = int(np.sum(self.in_v_sub))
        self.n_in_v = int(np.sum(self.in_v))

        self.bpoints = b.points if b is not None and len(b) else np.zeros((0, self.n))
        if self.bpoints.shape[0]:
            self.bgrad = self.hcf.gradient(self.bpoints)
            self.bdrift = sys.drift(self.bpoints)
            self.bact = sys.actuation(self.bpoints)

        # chord pool for active-boundary probes (multi mode)
        rng = np.random.Generator(np.random.Philox(key=cfg.seed + 0x9E3779B9))
        n_sub = self.states_sub.shape[0]
        pool = min(4096, n_sub * (n_sub - 1) // 2) if n_sub > 1 else 0
        if pool:
            self.pool_a = rng.integers(0, n_sub, size=pool)
            self.pool_b = rng.integers(0, n_sub, size=pool)
        else:
            self.pool_a = self.pool_b = np.zeros(0, dtype=int)

        span = s.bounds.span
        self.z_scale = float(np.max(np.abs(self.hcf.value(self.states_sub))) + 1.0)
        self.c_scale = np.maximum(span, 1.0)
        self.span_w = np.where(span > 0, span, 1.0)
        self.grad_probe = self.states_sub[:512]

    # -- candidate evaluation ------------------------------------------------

    def h_rows(self, cands: Sequence[CbfCandidate], states: Array | None = None) -> Array:
        """(s, N) barrier values; row-major so the min over candidates is cheap."""
        states = self.states_sub if states is None else states
        return np.stack([eval_h_batch(c, self.hcf, states) for c in cands], axis=0)

    def h_sub(self, cands: Sequence[CbfCandidate]) -> Array:
        return self.h_rows(cands)

    def area_and_violation(self, cands: Sequence[CbfCandidate],
                           h_rows: Array | None = None) -> tuple[float, float, int]:
        """Subsampled (area, non-feasible fraction of enclosed, enclosed count).

        With a positive margin the containment test inflates each set by the
        buffer, so the delivered zero-superlevel set sits strictly inside the
        feasible samples.
        """
        if h_rows is None:
            h_rows = self.h_rows(cands)
        hmin = np.minimum.reduce(h_rows, axis=0)
        inside = (hmin >= 0.0) & self.in_v_sub
        n_inside = int(np.count_nonzero(inside))
        if self.cfg.objective == "sample_count":
            area = n_inside / self.n_in_v_sub * self.vol
        else:
            area = float(np.mean(np.maximum(hmin[self.in_v_sub], 0.0))) * self.vol
        shifts = self.margin_shifts(cands)
        if shifts is not None:
            guard = (np.minimum.reduce(h_rows + shifts[:, None], axis=0) >= 0.0) & self.in_v_sub
        else:
            guard = inside
        n_guard = int(np.count_nonzero(guard))
        if n_guard == 0:
            return area, 0.0, n_inside
        viol = float(np.count_nonzero(guard & ~self.feas_sub)) / n_guard
        return area, viol, n_inside

    def full_metrics(self, cands: Sequence[CbfCandidate]) -> tuple[float, float, int]:
        """Full-sample (objective, violation fraction, enclosed count)."""
        h_rows = self.h_rows(cands, self.states)
        hmin = np.minimum.reduce(h_rows, axis=0)
        inside = (hmin >= 0.0) & self.in_v
        n_inside = int(np.count_nonzero(inside))
        if self.cfg.objective == "sample_count":
            area = n_inside / self.n_in_v * self.vol
        else:
            area = float(np.mean(np.maximum(hmin[self.in_v], 0.0))) * self.vol
        shifts = self.margin_shifts(cands)
        if shifts is not None:
            guard = (np.minimum.reduce(h_rows + shifts[:, None], axis=0) >= 0.0) & self.in_v
        else:
            guard = inside
        n_guard = int(np.count_nonzero(guard))
        viol = float(np.count_nonzero(guard & ~self.feas)) / n_guard if n_guard else 0.0
        return area, viol, n_inside

    # -- constraints ----------------------------------------------------------

    def h_unit(self, scale: Array, shift: Array) -> float:
        """Barrier change per unit of normalized state distance.

        The margin is a geometric buffer, so it is converted to barrier units
        through the typical gradient magnitude (in box-normalized coordinates)
        rather than applied to raw h values, which the free candidate scale
        could otherwise inflate away.
        """
        grad = self.hcf.gradient(self.grad_probe * scale + shift) * (scale * self.span_w)
        return max(float(np.mean(np.linalg.norm(grad, axis=-1))), 1e-12)

    def offset_cap(self, scale: Array, shift: Array) -> float:
        """Largest offset keeping h <= -margin buffer at every boundary sample.

        With no boundary samples the constraint is vacuous; the offset is then
        set to exactly enclose the in-region samples.
        """
        if self.bpoints.shape[0]:
            zb = self.hcf.value(self.bpoints * scale + shift)
            buffer = self.cfg.margin * self.h_unit(scale, shift) if self.cfg.margin else 0.0
            return float(-np.max(zb) - buffer)
        z_in = self.hcf.value(self.states[self.in_v] * scale + shift)
        return float(-np.min(z_in))

    def margin_shifts(self, cands: Sequence[CbfCandidate]) -> Array | None:
        """Per-candidate h offsets realizing the margin buffer, or None if zero."""
        if not self.cfg.margin:
            return None
        return np.array([self.cfg.margin * self.h_unit(c.scale, c.shift) for c in cands])

    def prop2_pass(self, scale: Array) -> tuple[int, int]:
        """(passing, total) for the exists-input condition at boundary samples."""
        if not self.bpoints.shape[0]:
            return 0, 0
        if self.input_box is None:
            raise ValueError("nonuniform fitting needs the input box")
        dbar = scale - scale[0]
        dbar[0] = 0.0
        gd = self.bgrad * dbar
        rows = np.einsum("bn,bnm->bm", gd, self.bact)
        biases = np.sum(gd * self.bdrift, axis=-1)
        ok = max_over_box(rows, biases, self.input_box) >= 0.0
        return int(np.sum(ok)), ok.size

    def active_boundary_probes(self, cands: Sequence[CbfCandidate], j: int,
                               h_rows: Array, want: int, bisect_iters: int = 30) -> Array:
        """Probe states on {h_j = 0, min_i h_i >= 0} by chord bisection.

        Chords run between enclosed and h_j-negative subsample points; the
        root along each chord lies on the j-th zero level set, and roots
        leaving the intersection are discarded.
        """
        if not self.pool_a.size:
            return np.zeros((0, self.n))
        hmin = np.minimum.reduce(h_rows, axis=0)
        a, bidx = self.pool_a, self.pool_b
        good = (hmin[a] >= 0.0) & (h_rows[j, bidx] < 0.0)
        a, bidx = a[good][:want], bidx[good][:want]
        if not a.size:
            return np.zeros((0, self.n))
        xa = self.states_sub[a]
        xb = self.states_sub[bidx]
        for _ in range(bisect_iters):
            mid = 0.5 * (xa + xb)
            h_mid = eval_h_batch(cands[j], self.hcf, mid)
            pos = h_mid >= 0.0
            xa = np.where(pos[:, None], mid, xa)
            xb = np.where(pos[:, None], xb, mid)
        roots = xa
        h_all = self.h_rows(cands, roots)
        scale = 1.0 + np.max(np.abs(h_all), initial=0.0)
        on_active = np.all(h_all >= -1e-7 * scale, axis=0)
        return roots[on_active]

    def multi_dz_pass(self, cands: Sequence[CbfCandidate], h_rows: Array,
                      want: int) -> tuple[int, int]:
        """Exists-input condition at active-boundary probes of every candidate."""
        if self.input_box is None:
            raise ValueError("multi fitting needs the input box")
        passing = total = 0
        for j, cand in enumerate(cands):
            probes = self.active_boundary_probes(cands, j, h_rows, want)
            if not probes.shape[0]:
                continue
            dbar = cand.scale - cand.scale[0]
            dbar = dbar.copy()
            dbar[0] = 0.0
            gd = self.hcf.gradient(probes) * dbar
            rows = np.einsum("bn,bnm->bm", gd, self.sys.actuation(probes))
            biases = np.sum(gd * self.sys.drift(probes), axis=-1)
            ok = max_over_box(rows, biases, self.input_box) >= 0.0
            passing += int(np.sum(ok))
            total += ok.size
        return passing, total


# ---------------------------------------------------------------------------
# Parameter vector <-> candidates

def _build_uniform(ctx: _SearchContext, theta: Array) -> list[CbfCandidate]:
    d = max(float(theta[0]), _MIN_UNIFORM_SCALE)
    scale = np.full(ctx.n, d)
    shift = np.asarray(theta[1:1 + ctx.n], dtype=float)
    return [CbfCandidate(scale, shift, ctx.offset_cap(scale, shift))]


def _build_nonuniform(ctx: _SearchContext, theta: Array) -> list[CbfCandidate]:
    scale = np.maximum(np.asarray(theta[:ctx.n], dtype=float), 0.0)
    shift = np.asarray(theta[ctx.n:2 * ctx.n], dtype=float)
    return [CbfCandidate(scale, shift, ctx.offset_cap(scale, shift))]


def _build_multi(ctx: _SearchContext, theta: Array) -> list[CbfCandidate]:
    n, block = ctx.n, 2 * ctx.n + 1
    cands = []
    for j in range(ctx.cfg.num_cbfs):
        t = theta[j * block:(j + 1) * block]
        scale = np.maximum(np.asarray(t[:n], dtype=float), 0.0)
        cands.append(CbfCandidate(scale, np.asarray(t[n:2 * n], dtype=float), float(t[2 * n])))
    return cands


def _embed_uniform(cand: CbfCandidate) -> Array:
    return np.concatenate([[cand.scale[0]], cand.shift])


def _embed_nonuniform(cand: CbfCandidate) -> Array:
    return np.concatenate([cand.scale, cand.shift])


def _embed_multi(cands: Sequence[CbfCandidate], s: int) -> Array:
    cands = list(cands)
    while len(cands) < s:
        cands.append(cands[-1])
    return np.concatenate([
        np.concatenate([c.scale, c.shift, [c.offset]]) for c in cands[:s]
    ])


# ---------------------------------------------------------------------------
# Penalized search

def _score(ctx: _SearchContext, cands: Sequence[CbfCandidate], mode: str) -> float:
    h_rows = ctx.h_rows(cands)
    area, viol, _ = ctx.area_and_violation(cands, h_rows)
    score = -area + 3.0 * ctx.vol * viol
    if mode == "nonuniform":
        ok, total = ctx.prop2_pass(cands[0].scale)
        if total:
            score += 2.0 * ctx.vol * (total - ok) / total
    elif mode == "multi":
        ok, total = ctx.multi_dz_pass(cands, h_rows, want=48)
        if total:
            score += 2.0 * ctx.vol * (total - ok) / total
    return score


def _hard_feasible(ctx: _SearchContext, cands: Sequence[CbfCandidate],
                   mode: str) -> tuple[bool, float, str]:
    """Full-set acceptance test; returns (ok, objective, reason)."""
    obj, viol, n_inside = ctx.full_metrics(cands)
    if n_inside == 0:
        return False, obj, "candidate set encloses no samples"
    if viol > CONTAINMENT_REJECT_TOL:
        return False, obj, f"containment violation {viol:.2e}"
    if mode == "nonuniform":
        ok, total = ctx.prop2_pass(cands[0].scale)
        if total and ok < total:
            return False, obj, f"exists-input condition failed at {total - ok} boundary samples"
    if mode == "multi":
        ok, total = ctx.multi_dz_pass(cands, ctx.h_sub(cands), want=ctx.cfg.probes)
        if total and ok < total:
            return False, obj, f"exists-input condition failed at {total - ok} probes"
    return True, obj, ""


def _nelder_mead(fun, x0: Array, steps: Array, maxiter: int) -> Array:
    simplex = np.vstack([x0] + [x0 + steps * np.eye(x0.size)[i] for i in range(x0.size)])
    res = sopt.minimize(fun, x0, method="Nelder-Mead",
                        options={"initial_simplex": simplex, "maxiter": maxiter,
                                 "maxfev": 4 * maxiter, "xatol": 1e-10, "fatol": 1e-12})
    return res.x


def _golden_polish(fun, x: Array, steps: Array, rounds: int = 2) -> Array:
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    x = x.copy()
    fx = fun(x)
    for _ in range(rounds):
        for i in range(x.size):
            a, b = x[i] - steps[i], x[i] + steps[i]

            def along(v, i=i):
                trial = x.copy()
                trial[i] = v
                return fun(trial)

            c = b - inv_phi * (b - a)
            d = a + inv_phi * (b - a)
            fc, fd = along(c), along(d)
            for _ in range(24):
                if fc <= fd:
                    b, d, fd = d, c, fc
                    c = b - inv_phi * (b - a)
                    fc = along(c)
                else:
                    a, c, fc = c, d, fd
                    d = a + inv_phi * (b - a)
                    fd = along(d)
            best = 0.5 * (a + b)
            f_best = along(best)
            if f_best < fx:
                x[i] = best
                fx = f_best
        steps = steps * 0.25
    return x


@dataclass
class _Incumbent:
    theta: Array | None = None
    cands: list[CbfCandidate] | None = None
    objective: float = -np.inf
    reasons: list[str] = field(default_factory=list)

    def offer(self, ctx: _SearchContext, theta: Array, build, mode: str):
        cands = build(ctx, theta)
        ok, obj, reason = _hard_feasible(ctx, cands, mode)
        if ok and obj > self.objective:
            self.theta, self.cands, self.objective = theta.copy(), cands, obj
        elif not ok and reason:
            self.reasons.append(reason)


def _run_search(ctx: _SearchContext, build, mode: str, seeds: list[Array],
                random_theta, steps: Array) -> _Incumbent:
    cfg = ctx.cfg
    rng = np.random.Generator(np.random.Philox(key=cfg.seed))
    incumbent = _Incumbent()

    def fun(theta):
        return _score(ctx, build(ctx, theta), mode)

    starts: list[Array] = list(seeds)
    while len(starts) < max(cfg.restarts, len(seeds)):
        pool = [random_theta(rng) for _ in range(max(1, cfg.population))]
        starts.append(min(pool, key=fun))

    for theta0 in starts:
        incumbent.offer(ctx, theta0, build, mode)
        theta = _nelder_mead(fun, np.asarray(theta0, dtype=float), steps, cfg.iterations)
        incumbent.offer(ctx, theta, build, mode)
        theta = _golden_polish(fun, theta, steps)
        incumbent.offer(ctx, theta, build, mode)
    return incumbent


def _finalize(ctx: _SearchContext, incumbent: _Incumbent, mode: str,
              b: BoundarySet | None) -> FitResult:
    cfg = ctx.cfg
    if incumbent.cands is None:
        reasons = "; ".join(sorted(set(incumbent.reasons))[:4]) or "no candidate evaluated"
        report = VerificationReport(0.0, 0.0, 0.0, empty_warning=True)
        return FitResult([], 0.0, report, [], mode, feasible=False,
                         diagnostics=f"no feasible candidate after {cfg.restarts} restarts: {reasons}")

    cands = list(incumbent.cands)
    flags: list[tuple[int, int, bool]] = []
    if len(cands) > 1:
        probe_states = ctx.states_sub[:max(2 * ctx.n + 4, 64)]
        drop: set[int] = set()
        for i in range(len(cands)):
            for j in range(i + 1, len(cands)):
                red = check_redundancy(cands[i], cands[j], ctx.hcf, probe_states)
                flags.append((i, j, red))
                if red and j not in drop:
                    drop.add(j)
        if drop:
            warnings.warn(f"collapsed {len(drop)} redundant candidate(s); "
                          f"the optimum is attainable with fewer tuples")
            cands = [c for k, c in enumerate(cands) if k not in drop]

    objective, _, _ = ctx.full_metrics(cands)
    report = verify_candidate(cands, ctx.s, ctx.sys, ctx.input_box
                              if ctx.input_box is not None else _unbounded_box(ctx.sys.m),
                              probes=cfg.probes, boundary=b, seed=cfg.seed)
    return FitResult(cands, objective, report, flags, mode)


def _unbounded_box(m: int) -> BoxSet:
    big = 1e12
    return BoxSet(-big * np.ones(m), big * np.ones(m))


# ---------------------------------------------------------------------------
# Public fitting entry points

def fit_uniform(s: SampleSet, b: BoundarySet, sys: SystemModel, cfg: FitConfig,
                input_box: BoxSet | None = None,
                warm: Sequence[CbfCandidate] = ()) -> FitResult:
    """Uniform scaling and offset: maximize the set size with d I, c, eps."""
    cfg = replace(cfg, mode="uniform", num_cbfs=1)
    ctx = _SearchContext(s, b, sys, input_box, cfg)
    n = ctx.n
    steps = np.concatenate([[0.25], 0.1 * ctx.c_scale])

    seeds = [np.concatenate([[1.0], np.zeros(n)])]
    span = s.bounds.span
    for frac in (0.5, 1.0):
        shift = np.zeros(n)
        shift[-1] = frac * span[-1]
        seeds.append(np.concatenate([[1.0], shift]))
    seeds.extend(_embed_uniform(c) for c in warm if c.is_uniform())

    def random_theta(rng):
        d = float(np.exp(rng.uniform(np.log(0.2), np.log(5.0))))
        c = rng.uniform(-span, span)
        return np.concatenate([[d], c])

    incumbent = _run_search(ctx, _build_uniform, "uniform", seeds, random_theta, steps)
    return _finalize(ctx, incumbent, "uniform", b)


def fit_nonuniform(s: SampleSet, b: BoundarySet, sys: SystemModel,
                   input_box: BoxSet, cfg: FitConfig,
                   warm: Sequence[CbfCandidate] = ()) -> FitResult:
    """Per-axis scaling d_i >= 0 with the exists-input boundary condition."""
    cfg = replace(cfg, mode="nonuniform", num_cbfs=1)
    ctx = _SearchContext(s, b, sys, input_box, cfg)
    n = ctx.n
    steps = np.concatenate([0.25 * np.ones(n), 0.1 * ctx.c_scale])
    span = s.bounds.span

    seeds = [np.concatenate([np.ones(n), np.zeros(n)])]
    seeds.extend(_embed_nonuniform(c) for c in warm)

    def random_theta(rng):
        d = np.exp(rng.uniform(np.log(0.2), np.log(5.0), size=n))
        c = rng.uniform(-span, span)
        return np.concatenate([d, c])

    incumbent = _run_search(ctx, _build_nonuniform, "nonuniform", seeds, random_theta, steps)
    return _finalize(ctx, incumbent, "nonuniform", b)


def fit_multi(s: SampleSet, b: BoundarySet, sys: SystemModel, input_box: BoxSet,
              cfg: FitConfig, warm: Sequence[Sequence[CbfCandidate]] = ()) -> FitResult:
    """Intersection of num_cbfs candidate sets, containment-constrained.

    The search alternates block passes (one tuple at a time) with joint
    refinement; the natural structured seed pairs the raw constraint function
    with a jittered copy, letting the second tuple specialize into whatever
    cap the data demands.
    """
    cfg = replace(cfg, mode="multi")
    ctx = _SearchContext(s, b, sys, input_box, cfg)
    n, s_cbf = ctx.n, cfg.num_cbfs
    block = 2 * n + 1
    steps_one = np.concatenate([0.25 * np.ones(n), 0.1 * ctx.c_scale, [0.1 * ctx.z_scale]])
    steps = np.tile(steps_one, s_cbf)
    span = s.bounds.span
    rng = np.random.Generator(np.random.Philox(key=cfg.seed + 1))

    def fun(theta):
        return _score(ctx, _build_multi(ctx, theta), "multi")

    ident = identity_candidate(n)
    seeds = [_embed_multi([ident] * s_cbf, s_cbf)]
    for tup in warm:
        seeds.append(_embed_multi(list(tup), s_cbf))

    block_iters = max(100, cfg.iterations // 2)
    incumbent = _Incumbent()
    for theta0 in seeds:
        incumbent.offer(ctx, theta0, _build_multi, "multi")
        theta = theta0.astype(float).copy()
        # block-coordinate passes: hold all tuples but one fixed
        for _ in range(2):
            for j in range(s_cbf):
                sel = slice(j * block, (j + 1) * block)

                def block_fun(tj, sel=sel, theta=theta):
                    trial = theta.copy()
                    trial[sel] = tj
                    return fun(trial)

                tj0 = theta[sel] + (rng.standard_normal(block) * 1e-3 * steps_one
                                    if j > 0 else 0.0)
                theta[sel] = _nelder_mead(block_fun, tj0, steps_one, block_iters)
                incumbent.offer(ctx, theta, _build_multi, "multi")
        theta = _nelder_mead(fun, theta, steps, cfg.iterations)
        incumbent.offer(ctx, theta, _build_multi, "multi")
        theta = _golden_polish(fun, theta, steps)
        incumbent.offer(ctx, theta, _build_multi, "multi")

    def random_theta(rng_):
        blocks = []
        for _ in range(s_cbf):
            d = np.exp(rng_.uniform(np.log(0.2), np.log(5.0), size=n))
            c = rng_.uniform(-span, span)
            eps = rng_.uniform(-ctx.z_scale, ctx.z_scale)
            blocks.append(np.concatenate([d, c, [eps]]))
        return np.concatenate(blocks)

    extra = max(0, cfg.restarts - len(seeds))
    for _ in range(extra):
        pool = [random_theta(rng) for _ in range(max(1, cfg.population))]
        theta0 = min(pool, key=fun)
        theta = _nelder_mead(fun, theta0, steps, cfg.iterations)
        incumbent.offer(ctx, theta, _build_multi, "multi")
        theta = _golden_polish(fun, theta, steps)
        incumbent.offer(ctx, theta, _build_multi, "multi")

    return _finalize(ctx, incumbent, "multi", b)


# ---------------------------------------------------------------------------
# Redundancy and verification

def check_redundancy(c1: CbfCandidate, c2: CbfCandidate, hcf: HardConstraint,
                     probe_states: Array, tol: float = 1e-6) -> bool:
    """True when h1 = zeta h2 for some zeta > 0, so one tuple is superfluous.

    Proportionality is fit by least squares over the probes; affine
    constraints (detected by a constant gradient) are additionally checked
    against the closed-form scale and intercept conditions.
    """
    probe_states = np.asarray(probe_states, dtype=float)
    n = c1.dim
    if probe_states.shape[0] < n + 2:
        raise ValueError(f"need at least {n + 2} probe states")
    h1 = eval_h_batch(c1, hcf, probe_states)
    h2 = eval_h_batch(c2, hcf, probe_states)
    mask = np.abs(h2) > 1e-9 * (1.0 + np.max(np.abs(h2)))
    if not np.any(mask):
        warnings.warn("redundancy check indeterminate: reference barrier vanishes on probes")
        return False
    zeta = float(h1[mask] @ h2[mask] / (h2[mask] @ h2[mask]))
    if zeta <= 0.0:
        return False
    if np.max(np.abs(h1 - zeta * h2)) > tol * (1.0 + np.max(np.abs(h1))):
        return False

    grads = hcf.gradient(probe_states)
    if np.max(np.abs(grads - grads[0]), initial=0.0) <= 1e-10 * (1.0 + np.max(np.abs(grads))):
        # affine z(x) = A x + b: require D1 = zeta D2 and matching intercepts
        a_row = grads[0]
        intercept = float(hcf.value(probe_states[0]) - a_row @ probe_states[0])
        scale_ref = 1.0 + np.max(np.abs(c1.scale))
        if np.max(np.abs(c1.scale - zeta * c2.scale)) > tol * scale_ref:
            return False
        i1 = a_row @ c1.shift + c1.offset + intercept
        i2 = a_row @ c2.shift + c2.offset + intercept
        if abs(i1 - zeta * i2) > tol * (1.0 + abs(i1)):
            return False
    return True


def verify_candidate(cands: Sequence[CbfCandidate], s: SampleSet, sys: SystemModel,
                     input_box: BoxSet, probes: int = 256,
                     boundary: BoundarySet | None = None,
                     seed: int = 0) -> VerificationReport:
    """Empirical soundness report for a candidate collection.

    containment: enclosed samples classified feasible. boundary feasibility:
    sup_u hdot >= 0 at bisection probes of each active boundary, solved as a
    box QP. exists-input: the reduced-scaling condition at the extracted
    class-boundary points.
    """
    if not cands:
        raise ValueError("need at least one candidate")
    bind_hcf(s, sys)
    hcf = sys.hcf
    h_all = _h_matrix(cands, hcf, s.states)
    hmin = h_all.min(axis=-1)
    inside = hmin >= 0.0
    n_inside = int(np.sum(inside))
    empty = n_inside == 0
    if empty:
        containment = 1.0
    else:
        feas = s.class_mask(SampleClass.FEASIBLE)
        containment = float(np.sum(inside & feas)) / n_inside

    cfg = FitConfig(mode="multi" if len(cands) > 1 else "nonuniform",
                    num_cbfs=max(2, len(cands)), seed=seed, probes=probes)
    ctx = _SearchContext(s, boundary, sys, input_box, cfg)
    h_sub = ctx.h_sub(cands)

    checked = passing = 0
    for j in range(len(cands)):
        pts = ctx.active_boundary_probes(cands, j, h_sub, probes)
        for x in pts:
            grad_h = hcf.gradient(cands[j].transform(x)) * cands[j].scale
            row = np.asarray(grad_h @ sys.actuation(x), dtype=float).reshape(sys.m)
            bias = float(grad_h @ sys.drift(x))
            prob = QpProblem(hessian=np.zeros((sys.m, sys.m)), linear=-row,
                             ineq_rows=np.zeros((0, sys.m)), ineq_rhs=np.zeros(0),
                             box=input_box)
            sol = solve_box_qp(prob)
            sup_hdot = bias + float(row @ sol.argmin)
            passing += bool(sup_hdot >= -1e-9 * (1.0 + abs(bias)))
            checked += 1
    boundary_frac = passing / checked if checked else 1.0

    if boundary is not None and len(boundary):
        ok = total = 0
        for cand in cands:
            p_ok, p_total = ctx.prop2_pass(cand.scale)
            ok += p_ok
            total += p_total
        prop2_frac = ok / total if total else 1.0
    else:
        prop2_frac = 1.0

    return VerificationReport(containment, boundary_frac, prop2_frac, empty_warning=empty)


# ---------------------------------------------------------------------------
# Persistence

FIT_FORMAT_VERSION = 1


def fit_result_dict(res: FitResult, cfg: FitConfig | None = None,
                    source_checksums: dict[str, str] | None = None) -> dict:
    doc = {
        "version": FIT_FORMAT_VERSION,
        "mode": res.mode,
        "feasible": res.feasible,
        "candidates": [
            {"scale": c.scale.tolist(), "shift": c.shift.tolist(), "offset": c.offset}
            for c in res.candidates
        ],
        "objective_value": res.objective_value,
        "verification": {
            "containment_fraction": res.verification.containment_fraction,
            "boundary_cbf_feasible_fraction": res.verification.boundary_cbf_feasible_fraction,
            "prop2_feasible_fraction": res.verification.prop2_feasible_fraction,
            "empty_warning": res.verification.empty_warning,
        },
        "redundancy": [[i, j, bool(flag)] for i, j, flag in res.redundancy_flags],
        "diagnostics": res.diagnostics,
    }
    if cfg is not None:
        doc["config_echo"] = {
            "mode": cfg.mode, "num_cbfs": cfg.num_cbfs, "margin": cfg.margin,
            "objective": cfg.objective, "restarts": cfg.restarts,
            "iterations": cfg.iterations, "population": cfg.population,
            "seed": cfg.seed, "probes": cfg.probes,
            "volume_region": None if cfg.volume_region is None else {
                "lower": cfg.volume_region.lower.tolist(),
                "upper": cfg.volume_region.upper.tolist(),
            },
        }
    if source_checksums:
        doc["source_checksums"] = dict(sorted(source_checksums.items()))
    return doc


def save_fit(res: FitResult, path, cfg: FitConfig | None = None,
             source_checksums: dict[str, str] | None = None) -> str:
    data = (json.dumps(fit_result_dict(res, cfg, source_checksums),
                       separators=(",", ":"), sort_keys=False) + "\n").encode()
    with open(path, "wb") as f:
        f.write(data)
    return hashlib.sha256(data).hexdigest()


def load_fit(path) -> tuple[FitResult, dict]:
    """Read a stored fit; returns the result plus the raw document."""
    with open(path, "rb") as f:
        doc = json.loads(f.read().decode())
    if doc.get("version") != FIT_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported fit file version")
    cands = [CbfCandidate(np.array(c["scale"]), np.array(c["shift"]), c["offset"])
             for c in doc["candidates"]]
    ver = doc["verification"]
    res = FitResult(
        candidates=cands,
        objective_value=float(doc["objective_value"]),
        verification=VerificationReport(
            ver["containment_fraction"], ver["boundary_cbf_feasible_fraction"],
            ver["prop2_feasible_fraction"], ver.get("empty_warning", False)),
        redundancy_flags=[(int(i), int(j), bool(f)) for i, j, f in doc["redundancy"]],
        mode=doc["mode"],
        feasible=bool(doc["feasible"]),
        diagnostics=doc.get("diagnostics", ""),
    )
    return res, doc
