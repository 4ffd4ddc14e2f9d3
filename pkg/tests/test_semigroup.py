import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from neumannlab.errors import OverflowGuard
from neumannlab.functions import make_function, suite_functions
from neumannlab.geometry import Annulus, Disk, HalfLine, Interval, ManifoldModel
from neumannlab.pde import grid_value, solve_fields
from neumannlab.semigroup import (
    Request,
    WeightedFunctional,
    estimate_pt,
    estimate_weighted,
    grad_pt,
    grad_pt_with_error,
    path_values,
)
from neumannlab.sde import SimParams

from .conftest import MODELS


@pytest.mark.parametrize("name", sorted(MODELS))
def test_constant_is_preserved_exactly(name, quick):
    model = MODELS[name]
    x = (0.5,) if model.dimension == 1 else ((0.5, 0.5) if name == "rectangle" else (0.9, 0.1))
    one = make_function("constant", model.dimension, c=1.0)
    est = estimate_pt(model, one, x, 0.2, quick)
    assert est.mean == 1.0 and est.std_error == 0.0
    np.testing.assert_array_equal(grad_pt(model, one, x, 0.2, quick), np.zeros(model.dimension))


def test_zero_time_is_pointwise(disk, quick):
    f = make_function("radial_poly", 2)
    est = estimate_pt(disk, f, (0.3, 0.4), 0.0, quick)
    assert est.mean == pytest.approx(0.25) and est.std_error == 0.0


def test_halfline_mean_from_origin(halfline):
    params = SimParams(dt=1e-4, n_paths=20000, base_seed=3)
    est = estimate_pt(halfline, make_function("coordinate", 1), (0.0,), 1.0, params)
    target = 2 / math.sqrt(math.pi)
    # projection bias is O(sqrt(dt)); 0.58 sqrt(2 dt) bounds it
    assert abs(est.mean - target) <= 3 * est.std_error + 0.58 * math.sqrt(2e-4)


def test_halfline_gradient_oracle(halfline):
    params = SimParams(dt=1e-4, n_paths=4000, base_seed=4)
    f = make_function("coordinate", 1)
    g = grad_pt(halfline, f, (1.0,), 0.01, params)[0]
    exact = 2 * stats.norm.cdf(1 / math.sqrt(0.02)) - 1
    assert g == pytest.approx(exact, rel=0.02)
    g0, se = grad_pt_with_error(halfline, f, (0.0,), 0.01, params)
    assert abs(g0[0]) <= 3 * se[0] + 0.1


def test_integral_a_is_time_when_flat(disk):
    w = WeightedFunctional("one", time_integral="A")
    v = path_values(disk, [Request(w, None, 0.37)], (0.2, 0.2), 0.37, SimParams(dt=1e-3, n_paths=50))
    np.testing.assert_array_equal(v[:, 0], np.full(50, 0.37))


def test_local_time_weight_is_one_without_sigma(disk, quick):
    w = WeightedFunctional("one", lt_coef=0.0)
    est = estimate_weighted(disk, w, None, (0.95, 0.0), 0.1, quick)
    assert est.mean == 1.0 and est.std_error == 0.0


def test_sample_cauchy_schwarz_and_monotone_in_sigma(annulus):
    params = SimParams(dt=1e-3, n_paths=3000, base_seed=6)
    f = make_function("tangential", 2, theta0=0.0, amplitude=1.0, radius=0.5, profile="plain")
    cs = [0.0, 0.5, 1.0, 2.0, 4.0]
    reqs = [Request(WeightedFunctional("grad_norm", lt_coef=c), f, 0.1) for c in cs]
    reqs += [Request(WeightedFunctional("grad_sq"), f, 0.1), Request(WeightedFunctional("one", lt_coef=4.0), f, 0.1)]
    v = path_values(annulus, reqs, (0.5, 0.0), 0.1, params)
    means = v.mean(axis=0)
    assert np.all(np.diff(means[: len(cs)]) >= 0.0)
    # (E g e^{2 l})^2 <= E g^2 E e^{4 l} on the sample
    assert means[3] ** 2 <= means[-2] * means[-1]


@pytest.mark.parametrize(
    "model, x",
    [
        (ManifoldModel(Disk(1.0)), (0.3, 0.2)),
        (ManifoldModel(Annulus(0.5, 1.5)), (1.0, 0.4)),
        (ManifoldModel(Interval(0.0, math.pi)), (1.0,)),
    ],
)
def test_monte_carlo_agrees_with_grid(model, x):
    params = SimParams(dt=1e-4, n_paths=4000, base_seed=12)
    fs = suite_functions(model)
    fields = solve_fields(model, fs, [0.2])
    for f, fl in zip(fs, fields):
        est = estimate_pt(model, f, x, 0.2, params)
        ref = grid_value(fl[0], x)
        # C sqrt(dt) with C = 1 covers the projection bias for these f
        assert abs(est.mean - ref) <= 3 * est.std_error + math.sqrt(params.dt), f.label()


def test_overflow_guard(annulus):
    w = WeightedFunctional("one", lt_coef=2000.0)
    with pytest.raises(OverflowGuard):
        estimate_weighted(annulus, w, None, (0.5, 0.0), 0.5, SimParams(dt=1e-3, n_paths=200))


def test_off_grid_request_rejected(disk):
    with pytest.raises(ValueError):
        path_values(disk, [Request(WeightedFunctional("one"), None, 0.12345)], (0.0, 0.0), 0.2, SimParams(dt=1e-2, n_paths=2))


@given(st.integers(1, 4), st.sampled_from(["A", "B"]))
@settings(max_examples=8, deadline=None)
def test_worker_count_does_not_change_results(workers, kind):
    model = ManifoldModel(Annulus(0.5, 1.5))
    f = make_function("bump", 2, center=[1.0, 0.0], width=1.0)
    reqs = [Request(WeightedFunctional("grad_sq", time_integral=kind, sigma=2.0, K=0.5), f, t) for t in (0.05, 0.1)]
    params = SimParams(dt=1e-3, n_paths=64, base_seed=17)
    a = path_values(model, reqs, (0.5, 0.0), 0.1, params, workers=1)
    b = path_values(model, reqs, (0.5, 0.0), 0.1, params, workers=workers)
    np.testing.assert_array_equal(a, b)


def test_weighted_functional_validation():
    with pytest.raises(ValueError):
        WeightedFunctional("one", time_integral="C")
    with pytest.raises(ValueError):
        WeightedFunctional("one", time_integral="var")
    with pytest.raises(ValueError):
        WeightedFunctional("one", lt_coef=math.inf)
