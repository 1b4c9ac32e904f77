import cmath
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blenderkit import blender
from blenderkit.complexgeo import Polydisk
from blenderkit.errors import (
    EpsZero,
    HypothesisViolation,
    NoEnteringComponent,
    OutOfDomain,
    PreconditionError,
)
from blenderkit.skewprod import (
    Polynomial1D,
    RescaledModel,
    constant_graph,
    find_core_point,
    fit_exponent,
    henon_covering_check,
    julia_inverse_branch,
    kappa_gate,
    make_skew_product,
    misiurewicz_certify,
    parabolic_split,
    push_graph,
    rescaled_inverse_derivative,
    rescaled_inverse_ifs,
    rescaled_inverse_raw,
    roots_of_unity,
    rouche_verify,
    unit_disk_samples,
    unstable_manifold,
    verify_julia_geometry,
)

M = 0.99 * cmath.exp(0.2j)
KAPPA, EPS = 1e6, 1e-6


def quiet_skew(p, d=3, kappa=KAPPA, eps=EPS, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return make_skew_product(p, d, kappa, eps, **kw)


def quadratic(m):
    return Polynomial1D((0, 1 / m, 1))


def critical_fixed(m):
    """z (z - 1)^2 / m: repelling fixed point 0, simple critical point 1 with p(1) = 0."""
    return Polynomial1D((0, 1 / m, -2 / m, 1 / m))


@pytest.fixture(scope="module")
def a4_skew():
    return quiet_skew(quadratic(M), z0=0)


# ---------------------------------------------------------------- polynomials

root_lists = st.lists(st.builds(complex, st.floats(-2, 2), st.floats(-2, 2)), min_size=1, max_size=6)


@settings(max_examples=80, deadline=None)
@given(root_lists)
def test_roots_recover_well_separated_inputs(rs):
    gaps = [abs(a - b) for i, a in enumerate(rs) for b in rs[i + 1:]]
    if gaps and min(gaps) < 0.05:
        return
    found = Polynomial1D.from_roots(rs).roots()
    for r in rs:
        assert np.min(np.abs(found - r)) < 1e-8


@settings(max_examples=60, deadline=None)
@given(root_lists, root_lists, st.builds(complex, st.floats(-1, 1), st.floats(-1, 1)))
def test_composition_matches_pointwise(outer, inner, z):
    f, g = Polynomial1D.from_roots(outer), Polynomial1D.from_roots(inner)
    expected = f(g(z))
    h = f.compose(g)
    # evaluation error of the expanded form scales with sum |c_k| |z|^k
    condition = sum(abs(c) * abs(z) ** k for k, c in enumerate(h.coefficients))
    assert abs(h(z) - expected) <= 1e-12 * max(1.0, condition)


def test_derivative_and_products():
    p = Polynomial1D((1, 2, 3))
    assert p.derivative().coefficients == (2, 6)
    assert (p * Polynomial1D((0, 1))).coefficients == (0, 1, 2, 3)
    assert (p - p).coefficients == (0,)


def test_kappa_gate_for_cubic():
    assert kappa_gate(3) == pytest.approx(2000**1.5)


# ---------------------------------------------------------------- Julia geometry

def test_inverse_branch_normalisation_at_zero():
    for zeta in roots_of_unity(3):
        assert abs(julia_inverse_branch(3, KAPPA, zeta, 0) - zeta * np.power(-KAPPA + 0j, 1 / 3)) < 1e-12


def test_inverse_branch_images_are_small_disks_around_cube_roots():
    x = 2 * KAPPA ** (1 / 3) * unit_disk_samples(10_000)
    c = np.power(-KAPPA + 0j, 1 / 3)
    for zeta in roots_of_unity(3):
        dev = np.max(np.abs(julia_inverse_branch(3, KAPPA, zeta, x) - zeta * c))
        assert 0.9 * 2 / 300 < dev < 1.01 * 2 / 300


def test_inverse_branch_round_trip():
    gen = np.random.default_rng(1)
    r = 2 * KAPPA ** (1 / 3)
    x = r * np.sqrt(gen.random(10_000)) * np.exp(2j * np.pi * gen.random(10_000))
    for zeta in roots_of_unity(3):
        w = julia_inverse_branch(3, KAPPA, zeta, x)
        assert np.max(np.abs(w**3 + KAPPA - x) / KAPPA) < 1e-9


def test_inverse_branch_rejects_points_outside_domain():
    with pytest.raises(OutOfDomain):
        julia_inverse_branch(3, KAPPA, 1, 1000.0)


def test_non_root_of_unity_rejected():
    with pytest.raises(PreconditionError):
        julia_inverse_branch(3, KAPPA, 1j, 0)


@pytest.mark.parametrize("kappa", [2000**1.5, 1e6])
def test_cubic_julia_geometry(kappa):
    rep = verify_julia_geometry(3, kappa)
    assert rep.samples >= 10_000
    assert rep.containment_radius == pytest.approx(0.5 * kappa ** (-2 / 3))
    assert rep.containment_margin > 0 and rep.derivative_margin > 0


def test_cubic_geometry_constants_at_one_million():
    rep = verify_julia_geometry(3, 1e6)
    assert rep.max_deviation <= 0.5e-4 and max(rep.max_derivative, rep.max_derivative_fd) <= 1e-4


def test_quadratic_julia_derivative_bound():
    rep = verify_julia_geometry(2, 1e6)
    assert rep.derivative_margin > 0


def test_quadratic_julia_containment():
    # Known red: the first-order deviation (1/2)|kappa|^{-1/2}|x| already equals the
    # radius on |x| = 1, and the second-order term pushes it over by about 2.5e-7.
    rep = verify_julia_geometry(2, 1e6)
    assert rep.containment_margin > 0


def test_rescaled_derivative_matches_difference_quotient():
    x = unit_disk_samples(500) * 0.9
    h = 1e-5
    for zeta in roots_of_unity(3):
        fd = (rescaled_inverse_raw(3, KAPPA, zeta, x + h) - rescaled_inverse_raw(3, KAPPA, zeta, x - h)) / (2 * h)
        assert np.max(np.abs(fd - rescaled_inverse_derivative(3, KAPPA, zeta, x))) < 1e-10


# ---------------------------------------------------------------- skew products and delta

def test_delta_for_cubic_instance(a4_skew):
    assert a4_skew.delta == pytest.approx(100 * 1e-6 / (0.8 * 0.01), rel=1e-9)


def test_delta_for_quadratic_instance():
    m = 0.995j
    sk = quiet_skew(quadratic(m), d=2, eps=1e-8, z0=0)
    assert sk.delta == pytest.approx(1000 * 1e-8 / (0.95 * 0.005), rel=1e-9)


def test_zero_eps_rejected():
    with pytest.raises(EpsZero):
        make_skew_product(quadratic(M), 3, KAPPA, 0)


def test_multiplier_outside_range_rejected():
    with pytest.raises(HypothesisViolation):
        make_skew_product(quadratic(0.5), 3, KAPPA, EPS, z0=0)


def test_rescaling_round_trip(a4_skew):
    z, w = 0.001 + 0.002j, 30 - 40j
    back = a4_skew.from_rescaled(*a4_skew.to_rescaled(z, w))
    assert abs(back[0] - z) < 1e-15 and abs(back[1] - w) < 1e-12


def test_rescaled_forward_conjugates_original_map(a4_skew):
    zt, wt = 0.05 - 0.01j, 0.3 + 0.1j
    direct = a4_skew.to_rescaled(*a4_skew.forward(*a4_skew.from_rescaled(zt, wt)))
    via = a4_skew.forward_rescaled(zt, wt)
    assert abs(direct[0] - via[0]) < 1e-9 and abs(direct[1] - via[1]) < 1e-6 * abs(via[1])


def test_inverse_branches_undo_forward_map(a4_skew):
    model = RescaledModel.of(a4_skew)
    z = 0.05 * unit_disk_samples(300)
    w = 0.7 * unit_disk_samples(300)[::-1]
    for j in range(3):
        zp, wp = model.branch(j, z, w)
        fz, fw = model.forward(zp, wp)
        assert np.max(np.abs(fz - z)) < 1e-12
        assert np.max(np.abs(fw - w)) < 1e-9


def test_linear_map_blender_validates():
    sk = quiet_skew(Polynomial1D((0, 1 / M)))
    ifs = rescaled_inverse_ifs(sk)
    assert blender.validate_blender(ifs).passed
    assert ifs.perturbation_c1 < 10 * KAPPA ** (-2 / 3)


def test_quadratic_map_perturbation_within_budget(a4_skew):
    # Known red: with delta from the formula the nonlinearity of p contributes
    # about delta-size terms (measured 2.5e-2), far above (1/1000)(1-|m|) = 1e-5.
    ifs = rescaled_inverse_ifs(a4_skew)
    assert ifs.perturbation_c1 < (1 - abs(M)) / 1000


def test_fiber_value_at_origin_is_half_root_of_unity(a4_skew):
    ifs = rescaled_inverse_ifs(a4_skew)
    for j, b in enumerate(ifs.branches):
        v = b.fiber(np.array([0j]), np.array([[0j]]))[0, 0]
        assert abs(v - roots_of_unity(3)[j] / 2) <= 0.5 * KAPPA ** (-2 / 3)


# ---------------------------------------------------------------- Rouche and core points

def test_rouche_half_map_unperturbed():
    rep = rouche_verify(lambda x: x / 2, lambda x: 0 * x, Polydisk.unit(2))
    assert rep.holds and rep.margin == pytest.approx(0.5)


def test_rouche_large_perturbation_fails():
    rep = rouche_verify(lambda x: x / 2, lambda x: 0 * x + 0.6, Polydisk.unit(2))
    assert not rep.holds


def test_rouche_requires_enough_boundary_samples():
    with pytest.raises(PreconditionError):
        rouche_verify(lambda x: x / 2, lambda x: 0 * x, Polydisk.unit(2), boundary_n=16)


def test_far_regime_core_point():
    m = 0.995 * cmath.exp(1j * math.pi / 4)
    sk = quiet_skew(quadratic(m), z0=0)
    core = find_core_point(sk)
    assert core.regime == "far" and core.period == 1
    t = sk.translation
    assert abs(core.point[0] - t / (1 - m)) < 1e-3
    assert abs(core.point[0]) <= 8 / 100
    assert core.rouche.min_displacement >= 2 / 1000
    assert core.rouche.margin > 0


def test_near_regime_period_three_core_point():
    sk = quiet_skew(quadratic(0.995), z0=0)
    core = find_core_point(sk)
    assert core.regime == "near" and core.period == 3
    assert core.residual < 1e-12
    assert core.boundary_margin > 0 and core.clearance > 0
    model = RescaledModel.of(sk)
    h = 1e-7

    def g(z):
        w = core.point[1]
        for j in core.symbols:
            z, w = model.branch(j, z, w)
        return z

    dz = (g(core.point[0] + h) - g(core.point[0] - h)) / (2 * h)
    assert abs(abs(dz) - 0.995**3) < 1e-3


def test_a4_instance_core_point_residual(a4_skew):
    core = find_core_point(a4_skew)
    assert core.residual < 1e-12
    assert abs(core.point[0]) < 0.1 and abs(core.point[1]) < 1


# ---------------------------------------------------------------- graphs and strong unstable manifold

def test_pushing_constant_graph_without_coupling_gives_constant_graphs():
    sk = quiet_skew(quadratic(M), eps=0, delta=0.0125, z0=0)
    comps = push_graph(sk, constant_graph(0.03))
    expected = sk.p_rescaled()(0.03)
    for c in comps:
        assert np.max(np.abs(c.values - expected)) < 1e-15


def test_pushed_graph_points_satisfy_the_forward_map(a4_skew):
    src = constant_graph(0.02 + 0.01j)
    model = RescaledModel.of(a4_skew)
    comps = push_graph(a4_skew, src)
    w = comps[0].nodes()[0].ravel()[:1000]
    for j, c in enumerate(comps):
        wp = model.fiber_inverse(j, w)
        fz, fw = model.forward(src(wp), wp)
        assert np.max(np.abs(fw - w)) < 1e-9
        assert np.max(np.abs(c(w) - fz)) < 1e-14


def test_pushed_critical_line_slope_bound(a4_skew):
    model = RescaledModel.of(a4_skew)
    x = unit_disk_samples(10_000)
    bound = abs(a4_skew.tau) * max(np.max(np.abs(rescaled_inverse_derivative(3, KAPPA, z, x)))
                                   for z in model.roots)
    for c in push_graph(a4_skew, constant_graph(0.5)):
        assert c.finite_difference_slope() <= bound * (1 + 1e-6)
        assert c.slope_bound <= 2 * (1 - abs(M)) * KAPPA ** (-2 / 3)


def test_unstable_manifold_without_coupling_is_vertical():
    sk = quiet_skew(quadratic(0.995 * cmath.exp(1j * math.pi / 4)), eps=0, delta=0.0125, z0=0)
    core = find_core_point(sk)
    g = unstable_manifold(sk, core)
    assert np.max(np.abs(g.values - core.point[0])) < 1e-12


@pytest.mark.parametrize("m", [0.995, 0.995 * cmath.exp(1j * math.pi / 4), M])
def test_unstable_manifold_contracts_geometrically(m):
    sk = quiet_skew(quadratic(m), z0=0)
    g = unstable_manifold(sk, find_core_point(sk))
    ratios = g.meta["ratios"]
    assert all(r < 1 for r in ratios[2:])
    assert g.slope_bound <= (1 - abs(m)) / 100
    assert g.meta["invarianceResidual"] < 1e-9
    assert g.meta["throughCore"] < 1e-9


# ---------------------------------------------------------------- Misiurewicz intersections

@pytest.fixture(scope="module")
def critical_skew():
    return quiet_skew(critical_fixed(M), z0=0)


def test_misiurewicz_witness_from_critical_line(critical_skew):
    wit = misiurewicz_certify(critical_skew, 1.0)
    assert wit.radius < 1e-8
    assert wit.meta["source"] == "push"
    assert wit.meta["entrySlope"] <= 2 * (1 - abs(M)) * KAPPA ** (-2 / 3)
    assert wit.meta["chainResidual"] < 1e-10
    assert wit.meta["pointOnEntryGraph"] <= wit.radius + 1e-12


def test_long_push_uses_unstable_manifold(critical_skew):
    wit = misiurewicz_certify(critical_skew, 1.0, n_push=13)
    assert wit.meta["source"] == "unstable manifold" and wit.radius < 1e-8


def test_non_critical_point_rejected(critical_skew):
    with pytest.raises(HypothesisViolation):
        misiurewicz_certify(critical_skew, 0.5)


def test_critical_value_far_from_fixed_point_does_not_enter():
    p = Polynomial1D((0, 1 / M, 1))  # critical point -1/(2m), critical value far from 0 after rescaling
    sk = quiet_skew(p, z0=0)
    with pytest.raises(NoEnteringComponent):
        misiurewicz_certify(sk, -1 / (2 * M))


def test_uncoupled_push_of_critical_line_is_vertical(critical_skew):
    sk = quiet_skew(critical_fixed(M), eps=0, delta=critical_skew.delta, z0=0)
    ct = (1.0 - sk.z0) / sk.scale
    comps = push_graph(sk, constant_graph(ct))
    for c in comps:
        assert np.max(np.abs(c.values)) < 1e-12  # p(1) = 0 = z0, evaluated at |c~| ~ 80


# ---------------------------------------------------------------- parabolic splitting

def linear_family(lam):
    return Polynomial1D((0, 1 + lam, 1))


def flip_family(lam):
    return Polynomial1D((0, -(1 + lam), 1))


def test_parabolic_closed_form():
    s = parabolic_split(linear_family, 1, 1, 0.01)
    pts = sorted(s.fixed_points, key=abs)
    assert abs(pts[0]) < 1e-12 and abs(pts[1] + 0.01) < 1e-12
    mult = sorted(s.multipliers, key=lambda z: z.real)
    assert abs(mult[0] - 0.99) < 1e-12 and abs(mult[1] - 1.01) < 1e-12
    assert abs(s.b - 1) < 1e-6


def test_parabolic_imaginary_parameter():
    s = parabolic_split(linear_family, 1, 1, 0.01j)
    mods = sorted(abs(z) for z in s.multipliers)
    assert mods[0] < 1 < mods[1] or math.isclose(mods[0], mods[1])
    assert sorted(s.multipliers, key=lambda z: z.imag) == pytest.approx([1 - 0.01j, 1 + 0.01j], abs=1e-12)


def test_flip_family_has_three_fixed_points_of_square():
    s = parabolic_split(flip_family, 2, 1, 1e-3)
    assert len(s.fixed_points) == 3
    assert s.next_root_distance > 2 * s.cluster_radius


def test_flip_family_residual_exponent():
    lams = [1e-2, 1e-3, 1e-4]
    res = [max(parabolic_split(flip_family, 2, 1, lam).residuals) for lam in lams]
    assert abs(fit_exponent(lams, res) - 1.5) < 0.1


def test_parabolic_requires_neutral_fixed_point():
    with pytest.raises(PreconditionError):
        parabolic_split(lambda lam: Polynomial1D((0, 0.5 + lam, 1)), 1, 1, 0.01)


# ---------------------------------------------------------------- Henon-type covering

def quintic():
    return Polynomial1D((0, 0, 0, 0, 0, 1))


def test_henon_covering_quintic():
    rep = henon_covering_check(1, quintic(), quintic(), 1e-4, n_samples=200)
    assert rep.passed
    assert rep.containment_margin > 0 and rep.escape_margin > 0
    assert set(rep.preimage_counts) == {25}
    assert rep.critical_samples >= 200


def test_henon_gate_rejects_large_eps():
    with pytest.raises(HypothesisViolation) as info:
        henon_covering_check(1, quintic(), quintic(), 1e-2)
    assert info.value.clause == "eps^(beta-a)"
