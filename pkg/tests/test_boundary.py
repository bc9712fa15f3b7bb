import numpy as np
import pytest

from cbfsynth.boundary import (auto_epsilon, boundary_bytes,
                               extract_boundary, load_boundary, save_boundary)
from cbfsynth.sampler import JaccardTracker, SampleClass, SampleSet
from cbfsynth.sampler import _CLASS_CODE  # stable code mapping used in files
from cbfsynth.system import BoxSet

from conftest import REFERENCE_BOUNDS


def _make_set(states, labels, bounds):
    states = np.asarray(states, dtype=float)
    codes = np.array([_CLASS_CODE[c] for c in labels], dtype=np.int8)
    tracker = JaccardTracker(n_total=len(codes),
                             n_feasible=int(np.sum(codes == _CLASS_CODE[SampleClass.FEASIBLE])))
    tracker.checkpoint()
    return SampleSet(states=states, labels=codes, residuals=np.zeros(len(codes)),
                     bounds=bounds, seed=0, zero_tol=1e-9, tracker=tracker)


UNIT = BoxSet([0.0, 0.0], [1.0, 1.0])
F, I, O = SampleClass.FEASIBLE, SampleClass.INFEASIBLE, SampleClass.OUTSIDE


def test_auto_epsilon_formula():
    states = np.random.default_rng(0).uniform(size=(10000, 2))
    s = _make_set(states, [F] * 10000, UNIT)
    assert auto_epsilon(s) == pytest.approx(0.02)


def test_auto_epsilon_reference_run(reference_run):
    assert auto_epsilon(reference_run) == pytest.approx(2.0 / np.sqrt(3 ** 11), rel=1e-12)


def test_auto_epsilon_needs_two_samples():
    s = _make_set([[0.5, 0.5]], [F], UNIT)
    with pytest.raises(ValueError):
        auto_epsilon(s)


def test_auto_epsilon_skips_degenerate_axes():
    box = BoxSet([0.0, 0.0], [1.0, 0.0])
    states = np.stack([np.linspace(0, 1, 100), np.zeros(100)], axis=1)
    s = _make_set(states, [F] * 100, box)
    # one effective axis: spacing estimate is 1/N
    assert auto_epsilon(s) == pytest.approx(2.0 / 100.0)


def test_minimal_witness_pair():
    s = _make_set([[0.5, 0.5], [0.52, 0.5], [0.54, 0.5]], [F, F, I], UNIT)
    b = extract_boundary(s, 0.03)
    # only the middle point has both witnesses within reach
    assert len(b) == 1
    assert np.allclose(b.points[0], [0.52, 0.5])
    assert not b.empty_warning


def test_all_feasible_has_no_boundary():
    states = np.random.default_rng(1).uniform(size=(500, 2))
    s = _make_set(states, [F] * 500, UNIT)
    b = extract_boundary(s, 0.2, box_face_is_boundary=False)
    assert len(b) == 0
    assert b.empty_warning


def test_box_face_witness_flag():
    states = np.array([[0.01, 0.5], [0.02, 0.5]])
    s = _make_set(states, [F, F], UNIT)
    assert len(extract_boundary(s, 0.05, box_face_is_boundary=False)) == 0
    b = extract_boundary(s, 0.05, box_face_is_boundary=True)
    assert len(b) == 2


def test_epsilon_must_be_positive(reference_run):
    with pytest.raises(ValueError):
        extract_boundary(reference_run, 0.0)


def test_tiny_epsilon_gives_empty_with_warning():
    states = np.random.default_rng(2).uniform(size=(100, 2))
    labels = [F if x[0] < 0.5 else I for x in states]
    s = _make_set(states, labels, UNIT)
    b = extract_boundary(s, 1e-12)
    assert len(b) == 0 and b.empty_warning


def test_monotone_in_epsilon():
    rng = np.random.default_rng(3)
    states = rng.uniform(size=(800, 2))
    labels = [F if x[0] + 0.3 * x[1] < 0.6 else (I if x[1] < 0.7 else O) for x in states]
    s = _make_set(states, labels, UNIT)
    prev = set()
    for eps in (0.01, 0.03, 0.08, 0.2):
        pts = {tuple(p) for p in extract_boundary(s, eps).points}
        assert prev <= pts
        prev = pts


def test_boundary_subset_of_feasible(reference_run, reference_boundary):
    feas = {tuple(p) for p in
            reference_run.states[reference_run.class_mask(SampleClass.FEASIBLE)]}
    assert all(tuple(p) in feas for p in reference_boundary.points)


def _frontier_distance_normalized(points: np.ndarray) -> np.ndarray:
    """Distance (per-axis normalized) to the analytic feasibility frontier:
    the velocity cap, the damped-constraint edge, and the position wall."""
    lo, span = REFERENCE_BOUNDS.lower, REFERENCE_BOUNDS.span

    def norm(p):
        return (np.asarray(p, dtype=float) - lo) / span

    segments = [
        (norm([-10.0, 30.0]), norm([-3.0, 30.0])),   # cap at v = 30
        (norm([-3.0, 30.0]), norm([0.0, 0.0])),      # z = 0 edge, v in (0, 30]
        (norm([0.0, 0.0]), norm([0.0, -40.0])),      # wall at x = 0, v <= 0
    ]
    pn = norm(points)
    dists = []
    for a, b in segments:
        ab = b - a
        t = np.clip((pn - a) @ ab / (ab @ ab), 0.0, 1.0)
        proj = a + t[:, None] * ab
        dists.append(np.linalg.norm(pn - proj, axis=1))
    return np.min(dists, axis=0)


def test_reference_boundary_hugs_frontier(reference_run, reference_boundary):
    b = reference_boundary
    assert len(b) > 100
    # every boundary state satisfies the constraint and the velocity cap
    z = reference_run.hcf.value(b.points)
    assert np.all(z >= 0.0)
    eps_v = b.epsilon * REFERENCE_BOUNDS.span[1]
    assert np.all(b.points[:, 1] <= 30.0 + eps_v)
    frac_near = np.mean(_frontier_distance_normalized(b.points) <= 2.0 * b.epsilon)
    assert frac_near >= 0.95


def test_velocity_cap_estimate(reference_boundary):
    pts = reference_boundary.points
    cap = pts[pts[:, 0] < -3.5][:, 1].max()
    assert cap == pytest.approx(30.0, abs=1.5)


def test_boundary_roundtrip(tmp_path, reference_run, reference_boundary):
    path = tmp_path / "boundary.jsonl"
    save_boundary(reference_boundary, path)
    loaded = load_boundary(path, dim=2)
    assert np.array_equal(loaded.points, reference_boundary.points)
    assert loaded.epsilon == reference_boundary.epsilon
    assert loaded.source_checksum == reference_run.checksum()
    assert boundary_bytes(loaded) == path.read_bytes()
