import numpy as np
import pytest
from hypothesis import given, strategies as st

from anls import anderson as A
from anls import dynamics as D
from anls.noise import MollifierSpec, enhance_from_seed
from anls.spectral import TWO_PI, BesovSpec, Field, Grid, besov_norms, sobolev_norm


@pytest.fixture(scope="module")
def ctx8():
    return A.calibrate(enhance_from_seed(1, Grid(3, 8), MollifierSpec("gaussian", 0.5)))


@pytest.fixture(scope="module")
def free8():
    return A.trivial_context(Grid(3, 8))


def unit(f):
    return f * (1.0 / f.norm())


def data(grid, seed=3, decay=3.0):
    return unit(Field.random(grid, np.random.default_rng(seed), real=False, decay=decay))


def plane(grid, k):
    return Field.mode(grid, k)


# --- potentials ----------------------------------------------------------------------


def test_constant_potential():
    g = Grid(3, 8)
    V = D.synthesize_potential(D.PotentialSpec("constant", c_beta=2.5), g)
    assert np.allclose(V.values(), 2.5)


@pytest.mark.parametrize("beta", [0.5, 1.0, 2.0, 3.0])
def test_bessel_potential_symbol(beta):
    g = Grid(3, 8)
    V = D.synthesize_potential(D.PotentialSpec("bessel_riesz", beta), g)
    vhat = V.coef.real[g.active]
    assert np.all(vhat > 0) and np.max(np.abs(V.coef.imag)) == 0
    # even in k and decreasing in |k|
    k2 = g.k2[g.active]
    order = np.argsort(k2)
    assert np.all(np.diff(vhat[order]) <= 1e-15)
    assert V.hermitian_defect() < 1e-15


def test_fejer_taper_is_pointwise_positive():
    g = Grid(3, 8)
    V = D.synthesize_potential(D.PotentialSpec("bessel_riesz", 1.0, taper="fejer"), g)
    assert V.values().min() >= -1e-12


def test_potential_guards():
    with pytest.raises(ValueError):
        D.PotentialSpec("coulomb")
    with pytest.raises(ValueError):
        D.PotentialSpec("bessel_riesz", beta=3.5)
    with pytest.raises(ValueError):
        D.PotentialSpec("bounded_custom")
    g = Grid(3, 4)
    neg = Field.constant(g, -1.0)
    with pytest.raises(ValueError):
        D.synthesize_potential(D.PotentialSpec("bounded_custom", field=neg), g)
    odd = Field(g, (Field.mode(g, (1, 0, 0)) * 1j - Field.mode(g, (-1, 0, 0)) * 1j).coef, True)
    with pytest.raises(ValueError):
        D.synthesize_potential(D.PotentialSpec("bounded_custom", field=odd + Field.constant(g, 5.0)), g)


# --- Hartree potential ---------------------------------------------------------------


def test_hartree_zero_and_constant():
    g = Grid(3, 8)
    V = D.synthesize_potential(D.PotentialSpec("constant", c_beta=3.0), g)
    assert D.hartree_potential(Field.zeros(g), V).norm() == 0.0
    u = data(g)
    phi = D.hartree_potential(u, V).values()
    assert np.allclose(phi, 3.0 * u.norm() ** 2, rtol=1e-13)


def test_hartree_matches_direct_quadrature():
    g = Grid(3, 8)
    V = D.synthesize_potential(D.PotentialSpec("bessel_riesz", 1.0), g)
    u = data(g, decay=1.0)
    rho = np.abs(u.values()) ** 2
    Vv = V.values()
    direct = np.zeros_like(rho)
    for idx in np.ndindex(*rho.shape):
        shifted = np.roll(Vv[::-1, ::-1, ::-1], shift=tuple(i + 1 for i in idx), axis=(0, 1, 2))
        direct[idx] = np.mean(shifted * rho)
    assert np.max(np.abs(D.hartree_potential(u, V).values() - direct)) < 1e-12 * np.max(np.abs(direct))


def test_interaction_bound():
    g = Grid(3, 8)
    V = D.synthesize_potential(D.PotentialSpec("bessel_riesz", 1.0, taper="fejer"), g)
    sup, bound = D.interaction_bound(data(g), V)
    assert sup <= bound * (1 + 1e-12)


# --- evolution -----------------------------------------------------------------------


def test_free_evolution_is_exact(free8):
    u0 = data(free8.grid, seed=0, decay=2.0)
    V = D.synthesize_potential(D.PotentialSpec("constant", c_beta=0.0), free8.grid)
    out = D.evolve(A.WaveState(u0), 1.0, 1e-2, "strang", free8, V, observe_every=0).final.field.coef
    exact = u0.coef * np.exp(1j * (-free8.grid.laplacian_symbol + free8.K))
    assert np.linalg.norm(out - exact) <= 1e-10


@pytest.mark.parametrize("scheme", D.SCHEMES)
def test_mass_conserved(ctx8, scheme):
    V = D.synthesize_potential(D.PotentialSpec("bessel_riesz", 1.0), ctx8.grid)
    tr = D.evolve(A.WaveState(data(ctx8.grid)), 0.05, 1e-3, scheme, ctx8, V, observe_every=10)
    m = np.array([r.mass for r in tr.reports])
    if scheme == "strang":
        assert np.max(np.abs(m - m[0])) <= 1e-12
    else:
        assert np.max(np.abs(m - m[0])) <= 1e-6


def test_strang_second_order(ctx8):
    V = D.synthesize_potential(D.PotentialSpec("bessel_riesz", 2.0), ctx8.grid)
    u0 = A.WaveState(data(ctx8.grid))
    run = lambda h: D.evolve(u0, 0.2, h, "strang", ctx8, V, observe_every=0).final.field.coef
    ref = run(1e-4)
    errs = [np.linalg.norm(run(h) - ref) for h in (4e-3, 2e-3, 1e-3)]
    for a, b in zip(errs, errs[1:]):
        assert 3.0 <= a / b <= 5.0


def test_schemes_agree(ctx8):
    V = D.synthesize_potential(D.PotentialSpec("bessel_riesz", 1.0), ctx8.grid)
    u0 = A.WaveState(data(ctx8.grid))
    a = D.evolve(u0, 0.1, 1e-3, "strang", ctx8, V, observe_every=0).final
    b = D.evolve(u0, 0.1, 1e-3, "mild_exponential", ctx8, V, observe_every=0).final
    assert b.gauge == "sharp"
    assert np.linalg.norm(a.field.coef - ctx8.convert(b.field.coef, "sharp", "physical")) <= 1e-5


def test_evolve_guards(ctx8):
    V = D.synthesize_potential(D.PotentialSpec("constant", c_beta=0.0), ctx8.grid)
    u0 = A.WaveState(data(ctx8.grid))
    with pytest.raises(ValueError):
        D.evolve(u0, 0.1, 0.0, "strang", ctx8, V)
    with pytest.raises(ValueError):
        D.evolve(u0, 0.1, 0.03, "strang", ctx8, V)
    with pytest.raises(ValueError):
        D.evolve(u0, 0.1, 0.01, "leapfrog", ctx8, V)


def test_blow_up_guard_reports_trajectory(ctx8):
    V = D.synthesize_potential(D.PotentialSpec("constant", c_beta=0.0), ctx8.grid)
    with pytest.raises(D.BlowUpError) as err:
        D.evolve(A.WaveState(data(ctx8.grid)), 0.1, 0.01, "strang", ctx8, V, guard=1e-3)
    assert err.value.time == pytest.approx(0.01)
    assert err.value.trajectory.final.field.grid == ctx8.grid


# --- observables -----------------------------------------------------------------------


def test_observables_of_zero(ctx8):
    V = D.synthesize_potential(D.PotentialSpec("bessel_riesz", 1.0), ctx8.grid)
    r = D.observables(Field.zeros(ctx8.grid), ctx8, V)
    assert r.mass == r.E0 == r.E1 == r.E1_tilde == r.domain_norm == r.form_norm == 0.0


@given(st.tuples(st.integers(-3, 3), st.integers(-3, 3), st.integers(-3, 3)), st.floats(0, 5))
def test_plane_wave_energy(free8, k, c):
    V = D.synthesize_potential(D.PotentialSpec("constant", c_beta=c), free8.grid)
    r = D.observables(plane(free8.grid, k), free8, V)
    expect = TWO_PI**2 * sum(x * x for x in k) + free8.K + c / 2
    assert r.mass == pytest.approx(1.0, rel=1e-14)
    assert r.E0 == pytest.approx(expect, rel=1e-12)


def test_focusing_sign_flips_interaction(free8):
    V = D.synthesize_potential(D.PotentialSpec("constant", c_beta=2.0), free8.grid)
    u = plane(free8.grid, (1, 0, 0))
    r = D.observables(u, free8, V, defocusing=False)
    assert r.E0 == pytest.approx(TWO_PI**2 + free8.K - 1.0, rel=1e-12)


def test_modified_energy_matches_time_derivative(ctx8):
    V = D.synthesize_potential(D.PotentialSpec("bessel_riesz", 1.0), ctx8.grid)
    dt = 1e-5
    tr = D.evolve(A.WaveState(data(ctx8.grid)), 2 * dt, dt, "strang", ctx8, V, observe_every=0, keep_every=1)
    u_prev, u, u_next = (s.field for s in tr.states)
    r = D.observables(u, ctx8, V, u_prev=u_prev, u_next=u_next, dt=dt)
    assert r.E1_tilde_fd == pytest.approx(r.E1_tilde, rel=1e-5)
    assert np.isfinite(r.E1)


def test_energy_audit(ctx8):
    V = D.synthesize_potential(D.PotentialSpec("bessel_riesz", 2.0), ctx8.grid)
    tr = D.evolve(A.WaveState(data(ctx8.grid)), 0.02, 1e-4, "strang", ctx8, V, observe_every=0, keep_every=1)
    audit = D.energy_audit(tr.states, ctx8, V)
    assert audit.residual.max() <= 1e-2 * np.max(np.abs(audit.lhs))
    with pytest.raises(ValueError):
        D.energy_audit(tr.states[:2], ctx8, V)


# --- exponent diagnostics ---------------------------------------------------------------


def test_s_beta():
    assert D.s_beta(0.0) == pytest.approx(19159 / 2800, rel=1e-15)
    assert D.s_beta(1.0) == pytest.approx(-20 / 7 + 65 / 7 - 1663 / 140 + 19159 / 2800, rel=1e-14)
    root = D.s_beta_root()
    assert 0.70 < root < 0.75 and abs(D.s_beta(root) - 2.0) <= 1e-12
    b = np.linspace(0.0, 1.5, 301)
    assert np.all(np.diff(D.s_beta(b)) < 0)


# --- probes --------------------------------------------------------------------------


def test_probe_spec_guards():
    with pytest.raises(ValueError):
        D.ProbeSpec(q=2.0, r=10.0)
    with pytest.raises(ValueError):
        D.ProbeSpec(gauge="flat")
    assert D.ProbeSpec().sigma == pytest.approx(2.0 - 0.45 - 0.01)


@pytest.mark.parametrize("gamma", [0.0, 1.0, 2.0])
def test_free_heat_probe_matches_lattice_sup(free8, gamma):
    g = free8.grid
    res = D.heat_probe(free8, gamma)
    lam = (TWO_PI**2 * g.k2 + free8.K)[g.active]
    bessel = (1 + TWO_PI**2 * g.k2)[g.active]
    expect = np.array([np.max(np.exp(-t * lam) * bessel ** (gamma / 2)) for t in res.times])
    assert np.allclose(res.norms, expect, rtol=1e-12)
    if gamma == 0.0:
        assert abs(res.slope) < 0.05


def test_free_strichartz_single_mode(free8):
    probe = D.ProbeSpec(s=1.0, eps=0.0, times=50)
    u = plane(free8.grid, (1, 0, 0))
    # a free mode only changes phase, so the time integral is T^{1/q} times a constant
    spatial = besov_norms(free8.grid, u.coef, BesovSpec(probe.sigma, probe.r, probe.r))
    expect = probe.horizon ** (1 / probe.q) * spatial / sobolev_norm(u, probe.s)
    assert D.strichartz_ratio(free8, u, probe) == pytest.approx(float(expect), rel=1e-12)


def test_strichartz_probe_reproducible(ctx8):
    probe = D.ProbeSpec(samples=4, times=20)
    a = D.strichartz_probe(ctx8, probe)
    b = D.strichartz_probe(ctx8, probe)
    assert np.array_equal(a.ratios, b.ratios) and a.max >= a.median > 0
