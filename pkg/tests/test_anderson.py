import numpy as np
import pytest
from hypothesis import given, strategies as st

from anls import anderson as A
from anls.noise import Enhancement, MollifierSpec, enhance_from_seed
from anls.spectral import TWO_PI, Field, Grid, product, resample, sobolev_norm


@pytest.fixture(scope="module")
def ctx8():
    return A.calibrate(enhance_from_seed(1, Grid(3, 8), MollifierSpec("gaussian", 0.5)))


@pytest.fixture(scope="module")
def ctx12():
    return A.calibrate(enhance_from_seed(2, Grid(3, 12), MollifierSpec("gaussian", 1 / 3)))


@pytest.fixture(scope="module")
def free8():
    return A.trivial_context(Grid(3, 8))


def rand(grid, seed, real=True, decay=2.0):
    return Field.random(grid, np.random.default_rng(seed), real=real, decay=decay)


def rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


# --- calibration ---------------------------------------------------------------


def test_zero_enhancement_calibration(free8):
    assert (free8.M, free8.N, free8.K) == (0, 0, 1.0)
    u = rand(free8.grid, 0, real=False).coef
    for a in A.GAUGES:
        for b in A.GAUGES:
            assert rel(free8.convert(u, a, b), u) < 1e-14


def test_selected_cutoff_is_smallest_contracting():
    ench = enhance_from_seed(1, Grid(3, 16), MollifierSpec("sharp", 0.0625))
    tol = A.Tolerances(contraction=0.15)
    M, N, diag = A.select_cutoffs(ench, tol)
    assert M >= 1
    q = A.OperatorContext(ench, M, ench.grid.max_block, 0.0, tol).theta_contraction()
    q_prev = A.OperatorContext(ench, M - 1, ench.grid.max_block, 0.0, tol).theta_contraction()
    assert q <= 0.15 < q_prev
    assert A.OperatorContext(ench, M, N, 0.0, tol).gamma_contraction() <= 0.15


def test_shift_gives_unit_lower_bound(ctx8):
    H = ctx8.assemble("flat")
    ritz = np.linalg.eigvalsh(-0.5 * (H + H.T))
    assert ritz[0] >= 1 - 1e-8


def test_calibration_is_deterministic():
    g = Grid(3, 8)
    a = A.calibrate(enhance_from_seed(4, g, MollifierSpec("gaussian", 0.5)))
    b = A.calibrate(enhance_from_seed(4, g, MollifierSpec("gaussian", 0.5)))
    assert a.manifest() == b.manifest()
    assert np.array_equal(a.factorization().evals, b.factorization().evals)


# --- remainder maps ------------------------------------------------------------------


def test_remainders_vanish_without_noise(free8):
    u = rand(free8.grid, 1)
    assert A.B_map(u, free8).norm() == 0.0
    assert A.G_map(u, free8).norm() == 0.0


@given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3))
def test_remainders_are_linear(ctx8, seed, a, b):
    g = ctx8.grid
    u, v = rand(g, seed), rand(g, seed + 1)
    for fn in (A.B_map, A.G_map):
        lhs = fn(u * a + v * b, ctx8).coef
        rhs = a * fn(u, ctx8).coef + b * fn(v, ctx8).coef
        assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(rhs)))


def test_G_bound_stable_under_refinement():
    rng = np.random.default_rng(0)
    vs = [Field.random(Grid(3, 8), rng, decay=2.5) for _ in range(30)]
    ratios = {}
    for n in (8, 12):
        c = A.calibrate(enhance_from_seed(1, Grid(3, n), MollifierSpec("gaussian", 1 / 3)))
        ratios[n] = np.array([A.G_map(resample(v, c.grid), c).norm() / sobolev_norm(resample(v, c.grid), 1.6) for v in vs])
    assert ratios[12].max() / ratios[8].max() < 1.5


# --- gauges --------------------------------------------------------------------------


@given(st.integers(0, 2**31), st.booleans())
def test_physical_natural_round_trip(ctx8, seed, real):
    u = rand(ctx8.grid, seed, real=real)
    w = A.WaveState(u)
    back = A.gauge_convert(A.gauge_convert(w, "natural", ctx8), "physical", ctx8)
    assert back.gauge == "physical"
    assert rel(back.field.coef, u.coef) <= 1e-10


def test_flat_gauge_strips_exponential(ctx8):
    v = rand(ctx8.grid, 3)
    u = product(ctx8.expw, v)
    flat = A.gauge_convert(A.WaveState(u), "flat", ctx8).field
    assert rel(flat.coef, v.coef) <= 1e-12


def test_unknown_gauge(ctx8):
    with pytest.raises(ValueError):
        A.gauge_convert(A.WaveState(rand(ctx8.grid, 0)), "round", ctx8)
    with pytest.raises(ValueError):
        A.WaveState(rand(ctx8.grid, 0), gauge="round")


# --- operator action -------------------------------------------------------------------


def test_free_operator_in_every_gauge(free8):
    u = rand(free8.grid, 5, real=False)
    expect = free8.grid.laplacian_symbol * u.coef - free8.K * u.coef
    for gauge in A.GAUGES:
        out = A.H_apply(A.WaveState(u, gauge=gauge), free8)
        assert rel(out.coef, expect) < 1e-13


def test_natural_operator_is_conjugate(ctx8):
    u = rand(ctx8.grid, 6, decay=3.0).coef
    direct = ctx8.apply(u, "natural")
    two_path = ctx8.convert(ctx8.apply(ctx8.convert(u, "natural", "physical")), "physical", "natural")
    assert rel(direct, two_path) <= 1e-8


def test_assembled_operator_symmetric(ctx8):
    for method in ("flat", "formula"):
        H = ctx8.assemble(method)
        assert np.max(np.abs(H - H.T)) <= 1e-8 * np.max(np.abs(H))


def test_flat_and_formula_assembly_agree(ctx8):
    a, b = ctx8.assemble("flat"), ctx8.assemble("formula")
    assert np.max(np.abs(a - b)) <= 1e-10 * np.max(np.abs(a))


def test_regularised_operator_basics():
    g = Grid(3, 8)
    u = rand(g, 7)
    zero = Field.zeros(g)
    assert rel(A.H_delta_apply(u, zero, 0.0).coef, g.laplacian_symbol * u.coef) < 1e-15
    # band-limited smooth data: the dealiased product is the exact pointwise product
    xi = Field.mode(g, (1, 0, 0)) + Field.mode(g, (-1, 0, 0))
    xi = Field(g, xi.coef, True)
    e = Field(g, (Field.mode(g, (0, 1, 0)) + Field.mode(g, (0, -1, 0))).coef, True)
    out = A.H_delta_apply(e, xi, 0.3).values()
    x, y = g.points[0], g.points[1]
    direct = -(TWO_PI**2) * 2 * np.cos(TWO_PI * y) + (2 * np.cos(TWO_PI * x) - 0.3) * 2 * np.cos(TWO_PI * y)
    assert np.max(np.abs(out - direct)) < 1e-12


@pytest.mark.parametrize("n", [8, 12])
def test_regularised_operator_matches_paracontrolled_form(n):
    e = enhance_from_seed(1, Grid(3, n), MollifierSpec("gaussian", 0.5))
    c = A.calibrate(e)
    us = Field(c.grid, (Field.mode(c.grid, (1, 0, 0)) + Field.mode(c.grid, (-1, 0, 0))).coef, True)
    u = c.convert(us.coef, "sharp", "physical")
    lhs = A.H_delta_apply(Field(c.grid, u, True), e.xi_delta, e.c).coef
    assert rel(lhs, c.apply(u) + c.K * u) < 1e-12


# --- spectrum and functional calculus --------------------------------------------------


def test_free_spectrum_is_lattice():
    g = Grid(3, 4)
    ctx = A.trivial_context(g)
    evals = np.array([lam for lam, _, _ in A.spectrum(ctx, 1000)])
    expect = np.sort((TWO_PI**2 * g.k2 + ctx.K)[g.active])
    assert np.allclose(evals, expect, rtol=1e-13, atol=1e-12)


def test_spectrum_lower_bound_and_residuals(ctx8):
    spec = A.spectrum(ctx8, 10)
    assert spec[0][0] >= 1 - 1e-8
    assert all(r < 1e-8 * abs(lam) for lam, _, r in spec)


def test_lowest_eigenvalue_settles_on_fixed_grid():
    # fixed 12^3 grid, sharp mollifier opening up: 1/delta = 2, 4, 8, 16
    lam = []
    for d in (0.5, 0.25, 0.125, 0.0625):
        c = A.calibrate(enhance_from_seed(1, Grid(3, 12), MollifierSpec("sharp", d)))
        lam.append(c.factorization().evals[0] - c.K)
    gaps = np.abs(np.diff(lam))
    assert np.all(np.diff(gaps) < 0)


def test_functional_calculus(ctx8):
    u = rand(ctx8.grid, 9, real=False)
    minus_H = -ctx8.apply(u.coef)
    assert rel(A.func_calc(lambda x: x, u, ctx8).coef, minus_H) <= 1e-9
    U = A.func_calc(lambda x: np.exp(-0.7j * x), u, ctx8)
    assert abs(U.norm() - u.norm()) <= 1e-10 * u.norm()
    root = A.func_calc(np.sqrt, A.func_calc(np.sqrt, u, ctx8), ctx8)
    assert rel(root.coef, minus_H) <= 1e-9
    with pytest.raises(ValueError):
        A.func_calc(lambda x: 1.0 / (x - x[0]), u, ctx8)


def test_functional_calculus_in_sharp_gauge(ctx8):
    u = rand(ctx8.grid, 10)
    via = ctx8.convert(A.func_calc(np.sqrt, Field(ctx8.grid, ctx8.convert(u.coef, "sharp", "physical"), True), ctx8).coef, "physical", "sharp")
    assert rel(A.func_calc(np.sqrt, u, ctx8, gauge="sharp").coef, via) <= 1e-9


def test_norm_equivalence_constants(ctx12):
    # form and graph norms against the flat and sharp Sobolev norms
    g = ctx12.grid
    rng = np.random.default_rng(0)
    form, dom = [], []
    for _ in range(10):
        u = Field.random(g, rng, decay=2.5).coef
        Hu = ctx12.apply(u)
        q = -float(np.real(np.vdot(u, Hu)))
        form.append(np.sqrt(q) / sobolev_norm(Field(g, ctx12.convert(u, "physical", "flat"), True), 1.0))
        dom.append(np.linalg.norm(Hu) / sobolev_norm(Field(g, ctx12.convert(u, "physical", "sharp"), True), 2.0))
    assert max(form) / min(form) < 20 and max(dom) / min(dom) < 20


def test_trivial_enhancement_contractions():
    ctx = A.OperatorContext(Enhancement.zero(Grid(3, 8)), 0, 0)
    assert ctx.theta_contraction() == 0.0
