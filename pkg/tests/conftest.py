"""Shared fixtures: the double-integrator reference study, computed once."""

import numpy as np
import pytest

from cbfsynth import (BoxSet, auto_epsilon, build_system, extract_boundary,
                      run_sampling)
from cbfsynth.fitter import FitConfig, fit_multi, fit_nonuniform, fit_uniform

REFERENCE_BOUNDS = BoxSet([-10.0, -40.0], [0.0, 40.0])
REFERENCE_SEED = 3

# closed-form set areas for the reference constraint over the sampling box
AREA_BOX = 800.0
AREA_Z = 720.0           # z >= 0
AREA_FEASIBLE = 655.0    # input-feasible portion (velocity cap at 30)
AREA_UNIFORM = 245.0     # best single uniformly-scaled set
AREA_NONUNIFORM = 550.0  # best single per-axis-scaled set


@pytest.fixture(scope="session")
def di():
    """Reference double integrator and its input box."""
    return build_system("double_integrator", {})


@pytest.fixture(scope="session")
def reference_run(di):
    sysm, input_box = di
    s = run_sampling(sysm, input_box, REFERENCE_BOUNDS, n_min=1000, delta=0.001,
                     growth=3.0, seed=REFERENCE_SEED)
    assert s.converged
    return s


@pytest.fixture(scope="session")
def reference_boundary(reference_run):
    return extract_boundary(reference_run, auto_epsilon(reference_run))


@pytest.fixture(scope="session")
def reference_fits(di, reference_run, reference_boundary):
    """Uniform, nonuniform and multi fits with the safety margin enabled."""
    sysm, input_box = di
    margin = reference_boundary.epsilon
    base = dict(margin=margin, restarts=8, iterations=300, population=32, seed=0)
    uni = fit_uniform(reference_run, reference_boundary, sysm,
                      FitConfig(mode="uniform", **base), input_box=input_box)
    non = fit_nonuniform(reference_run, reference_boundary, sysm, input_box,
                         FitConfig(mode="nonuniform", **base), warm=uni.candidates)
    multi = fit_multi(reference_run, reference_boundary, sysm, input_box,
                      FitConfig(mode="multi", num_cbfs=2, **base),
                      warm=[tuple(non.candidates)])
    for res in (uni, non, multi):
        assert res.feasible
    return {"uniform": uni, "nonuniform": non, "multi": multi}
