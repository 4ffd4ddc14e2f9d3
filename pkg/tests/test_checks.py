import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from neumannlab.checks import (
    STATEMENTS,
    InequalityReport,
    bochner_gamma2,
    check_levy_gromov,
    check_statement,
    check_statements,
    check_variable_bounds,
    estimate_ii,
    gamma2_nested_fd,
    gaussian_profile,
    gaussian_profile_second,
    inverse_normal_cdf,
    kconst,
    levy_gromov_limit,
    submartingale_diagnostic,
    verdict,
)
from neumannlab.errors import DegenerateGradient, NoisyLimit, UnsupportedShape
from neumannlab.functions import make_function
from neumannlab.geometry import Annulus, Disk, DriftSpec, HalfLine, Interval, ManifoldModel, Rectangle, ScalarField
from neumannlab.pde import grid_value, solve_neumann_heat
from neumannlab.sde import SimParams


# ---------------------------------------------------------------- verdicts


@pytest.mark.parametrize(
    "lhs, rhs, slack, expected",
    [
        (1.0, 1.0, 0.0, "PASS"),
        (0.9, 1.0, 0.5, "PASS"),
        (1.0 + 1e-13, 1.0, 0.0, "PASS"),
        (1.05, 1.0, 0.1, "INCONCLUSIVE"),
        (1.2, 1.0, 0.1, "FAIL"),
        (0.0, -1.0, 0.5, "FAIL"),
    ],
)
def test_verdict_zones(lhs, rhs, slack, expected):
    assert verdict(lhs, rhs, slack) == expected


def test_report_slack_and_row():
    r = InequalityReport("S2", "disk", "f", (0.1, 0.2), 0.5, 1.0, 0.9, se=0.02, margin=0.05)
    assert r.slack == pytest.approx(0.11)
    assert r.verdict == "INCONCLUSIVE"
    assert r.row()["x"] == "0.1/0.2"


# ---------------------------------------------------------------- constants


def test_kconst_flat_limits():
    assert kconst(0.0, 0.5) == (1.0, 2.0, 2.0)


def test_kconst_positive_example():
    k0, k1, k2 = kconst(1.0, 0.5)
    assert k0 == pytest.approx(math.e - 1)
    assert k1 == pytest.approx(2 / (1 - math.exp(-1)))
    assert k2 == pytest.approx(2 / (1 - math.exp(-1)) ** 2)


@given(st.floats(0.01, 3.0), st.floats(1e-7, 1e-5))
def test_kconst_continuous_at_zero(t, K):
    for s in (1, -1):
        np.testing.assert_allclose(kconst(s * K, t), kconst(0.0, t), rtol=5e-5 * max(1.0, t))


@given(st.floats(-3, 3), st.floats(0.01, 2.0))
def test_kconst_positive_and_consistent(K, t):
    k0, k1, k2 = kconst(K, t)
    assert k0 > 0 and k1 > 0 and k2 > 0
    assert k2 == pytest.approx(k1 * k1 / 2, rel=1e-9)


def test_kconst_rejects_zero_time():
    with pytest.raises(ValueError):
        kconst(1.0, 0.0)


# ---------------------------------------------------------------- statements


@pytest.fixture(scope="module")
def small():
    return SimParams(dt=1e-3, n_paths=4000, base_seed=5)


def test_s3_disk_coordinate_at_centre(small):
    model = ManifoldModel(Disk(1.0))
    r = check_statement("S3", model, make_function("coordinate", 2), (0.0, 0.0), 0.1, small)
    # zero drift, convex boundary: |grad P_t x1|^2 <= 1
    assert r.verdict == "PASS"
    assert r.lhs <= 1.0 and r.rhs == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("stmt", ["S5", "S7"])
def test_constant_f_is_equality_zero(stmt, small):
    model = ManifoldModel(Annulus(0.5, 1.5))
    r = check_statement(stmt, model, make_function("constant", 2, c=0.7), (1.0, 0.2), 0.1, small)
    assert r.lhs == pytest.approx(0.0, abs=1e-12) and r.rhs == pytest.approx(0.0, abs=1e-12)
    assert r.verdict == "PASS"


def test_s4_and_s5_share_their_expectation(small):
    model = ManifoldModel(Annulus(0.5, 1.5))
    f = make_function("bump", 2, center=[1.0, 0.0], width=0.8)
    reps = check_statements(model, [f], (0.6, 0.1), [0.05, 0.1], small, ["S4", "S5"])
    by = {(r.statement, r.t): r for r in reps}
    for t in (0.05, 0.1):
        assert by[("S5", t)].rhs == by[("S4", t)].rhs / 2


def test_s6_skipped_for_signed_f(small):
    model = ManifoldModel(Disk(1.0))
    reps = check_statements(model, [make_function("coordinate", 2)], (0.2, 0.1), [0.1], small, STATEMENTS)
    assert [r.statement for r in reps] == ["S2", "S3", "S4", "S5", "S7"]
    with pytest.raises(ValueError):
        check_statement("S6", model, make_function("coordinate", 2), (0.2, 0.1), 0.1, small)


@pytest.mark.parametrize("route", ["pde", "mc"])
def test_disk_suite_passes(route, small):
    model = ManifoldModel(Disk(1.0))
    f = make_function("affine_positive", 2, eps=0.5)
    reps = check_statements(model, [f], (0.3, 0.2), [0.2], small, route=route)
    assert len(reps) == 6
    assert all(r.verdict == "PASS" for r in reps), [r.row() for r in reps]
    assert all(r.details["route"] == route for r in reps)


def test_rows_do_not_depend_on_workers(small):
    model = ManifoldModel(Annulus(0.5, 1.5))
    f = make_function("cosine", 2, k=2.0)
    a = check_statements(model, [f], (1.2, 0.0), [0.1], small, workers=1)
    b = check_statements(model, [f], (1.2, 0.0), [0.1], small, workers=3)
    assert [r.row() for r in a] == [r.row() for r in b]


def test_bad_sigma_override_fails_on_annulus():
    # the inner circle is concave (II = -2); sigma = 0 is too small
    model = ManifoldModel(Annulus(0.5, 1.5))
    f = make_function("tangential", 2, theta0=0.0, amplitude=1.0, radius=0.5, profile="plain")
    params = SimParams(dt=1e-4, n_paths=4000, base_seed=9)
    reps = check_statements(model, [f], (0.5, 0.0), [0.05], params, ["S2", "S3"], K=0.0, sigma=0.0)
    assert all(r.verdict == "FAIL" for r in reps), [r.row() for r in reps]
    good = check_statements(model, [f], (0.5, 0.0), [0.05], params, ["S2", "S3"])
    assert all(r.verdict == "PASS" for r in good), [r.row() for r in good]


# ---------------------------------------------------------------- variable bounds


@pytest.mark.parametrize("which, stmt", [("G2", "S2"), ("G3", "S3")])
def test_constant_fields_reduce_to_constant_bounds(which, stmt, small):
    model = ManifoldModel(Annulus(0.5, 1.5))
    f = make_function("bump", 2, center=[1.0, 0.0], width=0.8)
    x, t = (0.55, 0.05), 0.1
    K, sigma = 0.0, 2.0
    g = check_variable_bounds(
        model, f, x, t, ScalarField("constant", {"value": K}), ScalarField("constant", {"value": sigma}), small, which
    )
    s = check_statement(stmt, model, f, x, t, small, K=K, sigma=sigma)
    assert g.rhs == pytest.approx(s.rhs, rel=1e-10)
    assert g.lhs == pytest.approx(s.lhs, rel=1e-12)
    assert g.verdict == "PASS"


def test_variable_bounds_on_annulus_components(small):
    model = ManifoldModel(Annulus(0.5, 1.5))
    f = make_function("tangential", 2, theta0=0.0, amplitude=1.0, radius=0.5, profile="plain")
    K2 = ScalarField("boundary_curvature")
    r = check_variable_bounds(model, f, (0.5, 0.0), 0.05, ScalarField("constant", {"value": 0.0}), K2, small, "G3")
    assert r.verdict == "PASS"


def test_variable_bounds_reject_unknown(small):
    model = ManifoldModel(Disk(1.0))
    with pytest.raises(ValueError):
        check_variable_bounds(model, make_function("coordinate", 2), (0, 0), 0.1, ScalarField("constant"), ScalarField("constant"), small, "G9")


# ---------------------------------------------------------------- second fundamental form


def _ii(model, x, v, params):
    try:
        return estimate_ii(model, x, v, params=params)
    except NoisyLimit as exc:
        return exc.estimate


def test_ii_quadratic_homogeneity():
    model = ManifoldModel(Disk(1.0))
    params = SimParams(dt=1e-5, n_paths=1000, base_seed=3)
    a = _ii(model, (1.0, 0.0), (0.0, 1.0), params)
    b = _ii(model, (1.0, 0.0), (0.0, 2.0), params)
    # f scales with v and the paths are shared, so only the prefactor moves
    assert b.value == pytest.approx(4 * a.value, rel=1e-9)


def test_ii_one_dimensional_convention():
    est = estimate_ii(ManifoldModel(Interval(0.0, 1.0)), (0.0,), (1.0,))
    assert est.value == 0.0 and est.function == "none"


@pytest.mark.parametrize(
    "model, x, v, err",
    [
        (ManifoldModel(Disk(1.0)), (0.5, 0.0), (0.0, 1.0), ValueError),
        (ManifoldModel(Disk(1.0)), (1.0, 0.0), (1.0, 0.0), ValueError),
        (ManifoldModel(Rectangle(1.0, 1.0)), (0.5, 0.0), (1.0, 0.0), UnsupportedShape),
    ],
)
def test_ii_input_validation(model, x, v, err):
    with pytest.raises(err):
        estimate_ii(model, x, v)


def test_ii_needs_four_decreasing_times():
    model = ManifoldModel(Disk(1.0))
    with pytest.raises(ValueError):
        estimate_ii(model, (1.0, 0.0), (0.0, 1.0), t_list=(0.02, 0.01, 0.005))
    with pytest.raises(ValueError):
        estimate_ii(model, (1.0, 0.0), (0.0, 1.0), t_list=(0.01, 0.02, 0.03, 0.04))


@pytest.mark.slow
def test_ii_disk_value():
    est = estimate_ii(ManifoldModel(Disk(1.0)), (1.0, 0.0), (0.0, 1.0), params=SimParams(dt=1e-5, n_paths=20000, base_seed=1))
    assert est.value == pytest.approx(1.0, abs=0.1)


# ---------------------------------------------------------------- Gamma_2


def test_gamma2_of_square():
    model = ManifoldModel(Disk(1.0))
    g2, _ = bochner_gamma2(model, make_function("radial_poly", 2), (0.3, 0.4))
    # |Hess x1^2 + x2^2|^2 = 8
    assert g2 == pytest.approx(8.0)


@pytest.mark.parametrize("a", [0.0, 1.0, -0.5])
def test_gamma2_linear_f_is_equality(a):
    model = ManifoldModel(Disk(1.0), DriftSpec.linear(a))
    f = make_function("coordinate", 2)
    g2, rhs = bochner_gamma2(model, f, (0.2, -0.1), K=a)
    assert g2 == pytest.approx(-a) and rhs == pytest.approx(-a)


@pytest.mark.parametrize("a", [0.0, 1.0, -0.7])
@pytest.mark.parametrize("name", ["bump", "cosine", "radial_poly", "affine_positive"])
def test_gamma2_bound_holds_and_routes_agree(name, a):
    model = ManifoldModel(Disk(1.0), DriftSpec.linear(a))
    f = make_function(name, 2)
    x = np.array([0.3, 0.2])
    g2, rhs = bochner_gamma2(model, f, x, K=a)
    assert g2 >= rhs - 1e-10
    assert gamma2_nested_fd(model, f, x) == pytest.approx(g2, rel=1e-5, abs=1e-6)


def test_gamma2_degenerate_gradient():
    with pytest.raises(DegenerateGradient):
        bochner_gamma2(ManifoldModel(Disk(1.0)), make_function("radial_poly", 2), (0.0, 0.0))


# ---------------------------------------------------------------- profile


def test_profile_centre_and_ends():
    assert gaussian_profile(0.5) == pytest.approx(1 / math.sqrt(2 * math.pi), rel=1e-15)
    assert gaussian_profile(0.0) == 0.0 and gaussian_profile(1.0) == 0.0


@given(st.floats(1e-12, 1 - 1e-12))
def test_inverse_normal_matches_reference(v):
    assert inverse_normal_cdf(v) == pytest.approx(stats.norm.ppf(v), rel=1e-12, abs=1e-12)


@given(st.floats(1e-9, 0.5))
def test_profile_symmetry_and_ode(v):
    assert gaussian_profile(v) == pytest.approx(gaussian_profile(1 - v), rel=1e-9)
    # U U'' = -1
    assert gaussian_profile(v) * gaussian_profile_second(v) == pytest.approx(-1.0, rel=1e-12)


def test_profile_rejects_out_of_range():
    with pytest.raises(ValueError):
        gaussian_profile(1.5)


# ---------------------------------------------------------------- isoperimetric


def test_levy_gromov_constant_is_equality(small):
    model = ManifoldModel(Disk(1.0))
    r = check_levy_gromov(model, make_function("constant", 2, c=0.3), (0.2, 0.2), 0.1, small)
    assert r.lhs == pytest.approx(r.rhs, rel=1e-12) and r.verdict == "PASS"


def test_levy_gromov_at_zero_time(small):
    model = ManifoldModel(HalfLine())
    f = make_function("smoothed_indicator", 1, c=1.0, width=0.3)
    r = check_levy_gromov(model, f, (0.4,), 0.0, small)
    assert r.lhs == r.rhs == pytest.approx(gaussian_profile(float(f(np.array([0.4])))))


@pytest.mark.parametrize("t", [0.05, 0.2, 1.0])
def test_levy_gromov_passes_on_annulus(t, small):
    model = ManifoldModel(Annulus(0.5, 1.5))
    f = make_function("smoothed_indicator", 2, c=1.0, width=0.25)
    r = check_levy_gromov(model, f, (0.6, 0.1), t, small)
    assert r.verdict == "PASS", r.row()


def test_levy_gromov_needs_unit_range(small):
    with pytest.raises(ValueError):
        check_levy_gromov(ManifoldModel(Disk(1.0)), make_function("coordinate", 2), (0, 0), 0.1, small)


def test_stationary_form_on_ou_halfline():
    model = ManifoldModel(HalfLine(), DriftSpec.linear(-1.0))
    f = make_function("smoothed_indicator", 1, c=0.7, width=0.3)
    r = levy_gromov_limit(model, f)
    assert r.statement == "LG41" and r.verdict == "PASS"
    assert r.details["R"] == pytest.approx(1.0)


def test_stationary_form_needs_negative_k():
    with pytest.raises(ValueError):
        levy_gromov_limit(ManifoldModel(Interval(0.0, 1.0)), make_function("smoothed_indicator", 1, c=0.5))


def test_submartingale_endpoints():
    model = ManifoldModel(Interval(0.0, math.pi))
    f = make_function("smoothed_indicator", 1, c=1.5, width=0.3)
    x, t = (1.0,), 0.2
    params = SimParams(dt=1e-3, n_paths=4000, base_seed=8)
    rep = submartingale_diagnostic(model, f, x, t, [0.0, 0.05, 0.1, 0.2], params)
    pt = grid_value(solve_neumann_heat(model, f, t), x)
    assert rep.means[0] == pytest.approx(gaussian_profile(pt), abs=1e-6)
    assert rep.std_errors[0] == 0.0
    lg = check_levy_gromov(model, f, x, t, params)
    assert rep.means[-1] == pytest.approx(lg.rhs, rel=1e-3)
    assert rep.monotone
