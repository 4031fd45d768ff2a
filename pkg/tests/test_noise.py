import numpy as np
import pytest
from hypothesis import given, strategies as st

from anls.noise import (
    Enhancement,
    MollifierSpec,
    UnresolvedMollifierWarning,
    enhance,
    enhance_from_seed,
    enhancement_norm,
    mollify,
    renorm_constants,
    sample_white_noise,
    spawn_seeds,
)
from anls.spectral import TWO_PI, Field, Grid, gradient, inverse_laplacian_plus_one


def test_white_noise_is_deterministic():
    g = Grid(3, 8)
    a, b = sample_white_noise(7, g), sample_white_noise(7, g)
    assert a.coef.tobytes() == b.coef.tobytes()
    assert sample_white_noise(8, g).coef.tobytes() != a.coef.tobytes()


@given(st.integers(0, 2**31))
def test_white_noise_is_real(seed):
    xi = sample_white_noise(seed, Grid(3, 8))
    assert xi.hermitian_defect() == 0.0


def test_white_noise_unit_variance():
    g = Grid(3, 4)
    samples = 1000
    power = np.mean([np.abs(sample_white_noise(s, g).coef) ** 2 for s in range(samples)], axis=0)[g.active]
    assert abs(power.mean() - 1.0) <= 0.1
    # |xi_hat|^2 has variance 1 for complex modes and 2 for the real zero mode
    se = np.sqrt(2.0 / samples)
    assert np.all(np.abs(power - 1.0) <= 4 * se)


def test_mollifier_multiplier():
    g = Grid(3, 16)
    xi = sample_white_noise(0, g)
    assert np.array_equal(mollify(xi, MollifierSpec("gaussian", 0.0)).coef, xi.coef)
    e = Field.mode(g, (4, 0, 0))
    out = mollify(e, MollifierSpec("gaussian", 0.25))
    assert out.coef[4, 0, 0] == pytest.approx(np.exp(-4 * np.pi**2), rel=1e-14)
    sharp = MollifierSpec("sharp", 0.25)
    assert mollify(e, sharp).coef[4, 0, 0] == 1.0
    assert mollify(Field.mode(g, (4, 1, 0)), sharp).norm() == 0.0


def test_mollifier_commutes_with_resolvent():
    xi = sample_white_noise(3, Grid(3, 16))
    spec = MollifierSpec("gaussian", 0.1)
    a = mollify(inverse_laplacian_plus_one(xi), spec)
    b = inverse_laplacian_plus_one(mollify(xi, spec))
    assert np.max(np.abs(a.coef - b.coef)) <= 1e-14


def test_mollifier_guards():
    with pytest.raises(ValueError):
        MollifierSpec("box", 0.1)
    with pytest.raises(ValueError):
        MollifierSpec("gaussian", -0.1)


def test_unresolved_mollifier_warns():
    with pytest.warns(UnresolvedMollifierWarning):
        renorm_constants(MollifierSpec("gaussian", 0.1), Grid(3, 8))


def test_degenerate_mollifier_has_no_counterterm():
    # a sharp cutoff below |k| = 1 keeps only the zero mode
    rc = renorm_constants(MollifierSpec("sharp", 2.0), Grid(3, 8))
    assert rc.c1 == 0.0 and rc.c2 == 0.0


def test_c1_matches_monte_carlo():
    g = Grid(3, 8)
    spec = MollifierSpec("gaussian", 0.125)
    c1 = renorm_constants(spec, g).c1
    samples = []
    for s in range(200):
        X = inverse_laplacian_plus_one(mollify(sample_white_noise(s, g), spec))
        samples.append(sum(x.norm() ** 2 for x in gradient(X)))
    samples = np.array(samples)
    se = samples.std(ddof=1) / np.sqrt(len(samples))
    assert abs(samples.mean() - c1) <= 3 * se


def test_c1_grows_like_inverse_delta():
    deltas = np.array([2.0**-j for j in range(2, 7)])
    c1 = [renorm_constants(MollifierSpec("sharp", d), Grid(3, int(round(4 / d)))).c1 for d in deltas]
    slope = np.polyfit(np.log(1 / deltas), np.log(c1), 1)[0]
    assert slope == pytest.approx(1.0, abs=0.15)


def test_c1_lattice_sum_direct():
    # direct sum over the working modes, independent of the shell-count reduction
    g = Grid(3, 16)
    spec = MollifierSpec("gaussian", 0.1)
    q = TWO_PI**2 * g.k2
    direct = float(np.sum(np.where(g.active, q * spec.symbol(g) ** 2 / (1 + q) ** 2, 0.0)))
    assert renorm_constants(spec, g, warn=False).c1 == pytest.approx(direct, rel=1e-12)


def test_zero_noise_enhancement():
    g = Grid(3, 8)
    spec = MollifierSpec("gaussian", 0.5)
    e = enhance(Field.zeros(g), spec, 0)
    c1, c2 = e.c1, e.c2
    const = lambda f, c: np.max(np.abs(f.values() - c))
    assert c1 > 0 and c2 > 0
    assert const(e.X, 0) == 0 and const(e.X3, 0) == 0
    assert const(e.X2, -c1) < 1e-15 and const(e.W, -c1) < 1e-15
    assert const(e.Z, -(c1 + c2)) < 1e-14
    assert const(e.R2, 0) == 0 and all(const(r, 0) == 0 for r in e.R1)


def test_enhancement_hash_is_reproducible():
    g = Grid(3, 8)
    spec = MollifierSpec("gaussian", 0.5)
    a = enhance_from_seed(5, g, spec, M=1)
    b = enhance_from_seed(5, g, spec, M=1)
    assert a.content_hash() == b.content_hash()
    assert enhance_from_seed(6, g, spec, M=1).content_hash() != a.content_hash()
    assert a.with_cutoff(2).content_hash() != a.content_hash()


def test_enhancement_components_are_real():
    e = enhance_from_seed(1, Grid(3, 8), MollifierSpec("gaussian", 0.25))
    for name, f in e.components().items():
        assert f.real and f.hermitian_defect() < 1e-12, name


def test_enhancement_norm_basics():
    g = Grid(3, 8)
    assert enhancement_norm(Enhancement.zero(g), 0.1) == 0.0
    e = enhance_from_seed(1, g, MollifierSpec("sharp", 0.5))
    vals = [enhancement_norm(e, eps) for eps in (0.05, 0.15, 0.3, 0.45)]
    assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        enhancement_norm(e, 0.6)


def test_enhancement_norm_ensemble_stable():
    medians = []
    for d in (0.5, 0.25, 0.125):
        n = int(4 / d)
        medians.append(np.median([enhancement_norm(enhance_from_seed(s, Grid(3, n), MollifierSpec("sharp", d)), 0.1) for s in range(5)]))
    growth = np.array(medians[1:]) / np.array(medians[:-1])
    assert np.all(growth < 1.3)


def test_spawned_seeds_are_independent():
    a, b = spawn_seeds(0, 2)
    g = Grid(3, 4)
    assert sample_white_noise(a, g).coef.tobytes() != sample_white_noise(b, g).coef.tobytes()
    assert sample_white_noise(spawn_seeds(0, 2)[0], g).coef.tobytes() == sample_white_noise(a, g).coef.tobytes()
