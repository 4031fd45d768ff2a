"""Verification battery: the acceptance criteria and fast identity checks.

Each check returns a CheckResult carrying the measured quantities, so the
same code backs the test suite and the ``verify`` subcommand.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from . import anderson as A
from . import dynamics as D
from . import manybody as MB
from .noise import MollifierSpec, UnresolvedMollifierWarning, enhance_from_seed, mollify, renorm_constants, sample_white_noise
from .spectral import (
    Field,
    Grid,
    gradient,
    holder_norm,
    inverse_laplacian_plus_one,
    lp_block,
    paraproduct_split,
    product,
    resample,
    sobolev_norm,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    values: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        shown = ", ".join(f"{k}={_fmt(v)}" for k, v in self.values.items())
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} ({self.seconds:.1f}s): {shown}"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


def _timed(name: str, fn: Callable[[], tuple[bool, dict]]) -> CheckResult:
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UnresolvedMollifierWarning)
        ok, vals = fn()
    return CheckResult(name, bool(ok), vals, time.perf_counter() - t0)


def _context(n: int, delta: float, seed: int = 1) -> A.OperatorContext:
    return A.calibrate(enhance_from_seed(seed, Grid(3, n), MollifierSpec("gaussian", delta)))


def _unit(f: Field) -> Field:
    return f * (1.0 / f.norm())


# ---------------------------------------------------------------------------
# acceptance criteria


def paraproduct_identity(pairs: int = 100, n: int = 32, seed: int = 0) -> CheckResult:
    def run():
        g = Grid(3, n)
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(pairs):
            f = Field.random(g, rng, decay=rng.uniform(0, 2))
            h = Field.random(g, rng, decay=rng.uniform(0, 2))
            lt, res, gt = paraproduct_split(f, h)
            gap = np.max(np.abs(product(f, h).values() - (lt + res + gt).values()))
            worst = max(worst, gap / (np.max(np.abs(f.values())) * np.max(np.abs(h.values()))))
        return worst <= 1e-12, {"max_rel_defect": worst}

    return _timed("1 paraproduct identity", run)


def bernstein_stability(n: int = 64, samples: int = 5, seed: int = 0) -> CheckResult:
    def run():
        g = Grid(3, n)
        rng = np.random.default_rng(seed)
        lo, hi = np.inf, 0.0
        for _ in range(samples):
            f = Field.random(g, rng, decay=rng.uniform(0, 3))
            ratios = []
            for j in range(1, g.max_block + 1):
                b = lp_block(f, j)
                nb = b.norm()
                if nb == 0:
                    continue
                grad = math.sqrt(sum(x.norm() ** 2 for x in gradient(b)))
                ratios.append(grad / (2.0**j * nb))
            q = np.array(ratios[1:]) / np.array(ratios[:-1])
            lo, hi = min(lo, q.min()), max(hi, q.max())
        return 0.5 <= lo and hi <= 2.0, {"min_quotient": lo, "max_quotient": hi}

    return _timed("2 Bernstein stability", run)


def _rate_fit(kind: str, deltas) -> dict:
    c1, c2 = [], []
    for d in deltas:
        rc = renorm_constants(MollifierSpec(kind, d), Grid(3, int(round(4.0 / d))))
        c1.append(rc.c1)
        c2.append(rc.c2)
    x = np.log(1.0 / np.array(deltas))
    slope = float(np.polyfit(x, np.log(c1), 1)[0])
    r2 = float(stats.linregress(x, c2).rvalue ** 2)
    return {"c1_slope": slope, "c2_R2": r2, "c1": c1, "c2": c2}


def renormalization_rates(deltas=(0.25, 0.125, 0.0625, 0.03125)) -> CheckResult:
    """c1 ~ 1/delta and c2 ~ log(1/delta), graded on the sharp mollifier.

    The Gaussian fit is reported alongside: at these deltas its constants are
    still dominated by the exponential tail and the fit is far from asymptotic.
    """

    def run():
        sharp = _rate_fit("sharp", deltas)
        gauss = _rate_fit("gaussian", deltas)
        ok = abs(sharp["c1_slope"] - 1.0) <= 0.15 and sharp["c2_R2"] > 0.95
        vals = dict(sharp)
        vals.update({"gaussian_c1_slope": gauss["c1_slope"], "gaussian_c2_R2": gauss["c2_R2"]})
        return ok, vals

    return _timed("3 renormalization rates", run)


def enhancement_cauchy(seeds: int = 20, n: int = 128, deltas=(0.25, 0.125, 0.0625, 0.03125)) -> CheckResult:
    """Median C^0.4 size of X_delta - X_{delta/2} over dyadic levels.

    Every level is resolved on the grid (n >= 4/delta). The difference lives on
    the shell |k| ~ 1/delta, where its C^0.4 norm scales like
    delta^0.1 * sqrt(log 1/delta); the square-root factor wins until 1/delta is
    far beyond desk-scale grids, so the medians need not decrease here.
    """

    def run():
        g = Grid(3, n)
        diffs = np.zeros((seeds, len(deltas) - 1))
        for s in range(seeds):
            xi = sample_white_noise(s, g)
            X = [inverse_laplacian_plus_one(mollify(xi, MollifierSpec("sharp", d))) for d in deltas]
            diffs[s] = [holder_norm(a - b, 0.4) for a, b in zip(X, X[1:])]
        med = np.median(diffs, axis=0)
        return bool(np.all(np.diff(med) < 0)), {"medians": med.tolist(), "grid": n}

    return _timed("4 enhancement Cauchy trend", run)


def operator_self_adjoint(n: int = 8, delta: float = 0.5) -> CheckResult:
    def run():
        ctx = _context(n, delta)
        H = ctx.assemble("formula")
        asym = float(np.max(np.abs(H - H.T)) / np.max(np.abs(H)))
        lam = float(np.linalg.eigvalsh(-0.5 * (H + H.T))[0])
        return asym <= 1e-8 and lam >= 1 - 1e-8, {"asymmetry": asym, "min_eig_minus_H": lam, "K": ctx.K}

    return _timed("5 self-adjointness and lower bound", run)


def gauge_round_trips(n: int = 16, delta: float = 0.25, samples: int = 30, seed: int = 0) -> CheckResult:
    def run():
        ctx = _context(n, delta)
        rng = np.random.default_rng(seed)
        pairs = {"Gamma": ("sharp", "flat"), "Theta": ("natural", "sharp"), "Lambda": ("physical", "natural")}
        worst = {k: 0.0 for k in pairs}
        for _ in range(samples):
            u = Field.random(ctx.grid, rng, real=bool(rng.integers(2)), decay=1.0).coef
            for name, (a, b) in pairs.items():
                # map o inverse, with the map going b -> a
                back = ctx.convert(ctx.convert(u, a, b), b, a)
                worst[name] = max(worst[name], float(np.linalg.norm(back - u) / np.linalg.norm(u)))
        q = A.OperatorContext(ctx.ench, ctx.M, ctx.N, ctx.K).theta_contraction()
        vals = {f"{k}_round_trip": v for k, v in worst.items()}
        vals.update({"theta_contraction": q, "M": ctx.M})
        return max(worst.values()) <= 1e-10 and q <= 0.5, vals

    return _timed("6 gauge round trips", run)


def _mode_family(grid: Grid, radii=(2, 3, 4, 6, 8, 11, 16)) -> list[tuple[int, int, int]]:
    """One lattice mode per requested radius, as close to it as the grid allows."""
    lim = grid.n // 2 - 1
    rng = range(-lim, lim + 1)
    modes = [(a, b, c) for a in rng for b in rng for c in range(0, lim + 1)]
    return [min(modes, key=lambda k: abs(math.sqrt(k[0] ** 2 + k[1] ** 2 + k[2] ** 2) - r)) for r in radii]


def perturbation_gain(n: int = 34, delta: float = 1.0 / 16.0, gain: float = 0.4) -> CheckResult:
    """Flatness of the Lambda - id and natural-remainder ratios over |k| in [2, 16].

    The noise is cut sharply at |k| = 1/delta = 16 so that it stays rough across
    the whole tested band; a Gaussian mollifier at a feasible delta smooths the
    noise over most of the band and the gain becomes artificially large there.
    """

    def run():
        g = Grid(3, n)
        ench = enhance_from_seed(1, g, MollifierSpec("sharp", delta))
        # ratios are read to three digits, so the fixed-point solves can stop early
        tol = A.Tolerances(ftol=1e-6, power_iter=15)
        M, N, _ = A.select_cutoffs(ench, tol=tol)
        ctx = A.OperatorContext(ench, M, N, 0.0, tol)
        family = _mode_family(g)
        radii = [math.sqrt(sum(c * c for c in k)) for k in family]
        # real cosine modes keep every map on the single real pass
        es = [Field.mode(g, k, 0.5) + Field.mode(g, tuple(-c for c in k), 0.5) for k in family]
        batch = np.stack([e.coef for e in es])
        lam = ctx.convert(batch, "natural", "physical") - batch
        rem = ctx.apply(batch, "natural") - g.laplacian_symbol * batch
        lam_ratio = [sobolev_norm(Field(g, lam[i], True), gain) / sobolev_norm(e, 0.0) for i, e in enumerate(es)]
        nat_ratio = [float(np.linalg.norm(rem[i])) / sobolev_norm(e, 2.0 - gain) for i, e in enumerate(es)]
        s1 = max(lam_ratio) / min(lam_ratio)
        s2 = max(nat_ratio) / min(nat_ratio)
        vals = {"lambda_spread": s1, "natural_spread": s2, "radius_min": min(radii), "radius_max": max(radii), "M": M, "N": N}
        return s1 < 10 and s2 < 10, vals

    return _timed("7 perturbation properties", run)


def _equivalence_constants(ctx: A.OperatorContext, vs: list[Field]) -> tuple[np.ndarray, np.ndarray]:
    g = ctx.grid
    form, dom = [], []
    for v in vs:
        v = resample(v, g)
        u = ctx.convert(v.coef, "natural", "physical")
        Hu = ctx.apply(u)
        q = -float(np.real(np.vdot(u, Hu)))
        flat = Field(g, ctx.convert(u, "physical", "flat"), False)
        sharp = Field(g, ctx.convert(u, "physical", "sharp"), False)
        form.append(math.sqrt(q) / sobolev_norm(flat, 1.0))
        dom.append(float(np.linalg.norm(Hu)) / sobolev_norm(sharp, 2.0))
    return np.array(form), np.array(dom)


def norm_equivalences(samples: int = 30, delta: float = 1.0 / 3.0, seed: int = 0) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        vs = [Field.random(Grid(3, 12), rng, real=False, decay=2.5) for _ in range(samples)]
        out = {}
        for n in (12, 16):
            out[n] = _equivalence_constants(_context(n, delta), vs)
        vals, ok = {}, True
        for i, name in enumerate(("form", "domain")):
            a, b = out[12][i], out[16][i]
            spread = max(a.max() / a.min(), b.max() / b.min())
            growth = max(b.max() / a.max(), a.max() / b.max(), b.min() / a.min(), a.min() / b.min())
            vals[f"{name}_spread"] = spread
            vals[f"{name}_growth"] = growth
            ok = ok and spread < 20 and growth < 1.5
        return ok, vals

    return _timed("8 norm equivalences", run)


def _evolution_setup(n: int = 16, delta: float = 0.25, beta: float = 1.0, decay: float = 3.0, seed: int = 3):
    ctx = _context(n, delta)
    V = D.synthesize_potential(D.PotentialSpec("bessel_riesz", beta), ctx.grid)
    u0 = _unit(Field.random(ctx.grid, np.random.default_rng(seed), real=False, decay=decay))
    return ctx, V, u0


def conservation(dt: float = 1e-3, T: float = 1.0) -> CheckResult:
    def run():
        ctx, V, u0 = _evolution_setup()
        drift = {}
        mass = 0.0
        for h in (dt, dt / 2):
            tr = D.evolve(A.WaveState(u0), T, h, "strang", ctx, V, observe_every=int(round(0.01 / h)))
            E = np.array([r.E0 for r in tr.reports])
            m = np.array([r.mass for r in tr.reports])
            drift[h] = float(np.max(np.abs(E - E[0])) / abs(E[0]))
            if h == dt:
                mass = float(np.max(np.abs(m - m[0])))
        ratio = drift[dt] / drift[dt / 2]
        ok = mass <= 1e-10 and drift[dt] <= 1e-4 and abs(ratio - 4) <= 0.5
        return ok, {"mass_drift": mass, "E0_drift": drift[dt], "E0_drift_half": drift[dt / 2], "ratio": ratio}

    return _timed("9 conservation", run)


def scheme_cross_validation(dt: float = 5e-4, T: float = 0.5) -> CheckResult:
    def run():
        ctx, V, u0 = _evolution_setup()
        a = D.evolve(A.WaveState(u0), T, dt, "strang", ctx, V, observe_every=0).final
        b = D.evolve(A.WaveState(u0), T, dt, "mild_exponential", ctx, V, observe_every=0).final
        gap = float(np.linalg.norm(a.field.coef - ctx.convert(b.field.coef, b.gauge, "physical")))
        return gap <= 1e-4, {"L2_difference": gap}

    return _timed("10 scheme cross-validation", run)


def s_beta_diagnostics() -> CheckResult:
    def run():
        v = D.s_beta(0.85)
        root = D.s_beta_root()
        return abs(v - 1.7) <= 1e-12 and abs(root - 0.733) <= 1e-3, {"s(0.85)": v, "root": root}

    return _timed("11 s_beta diagnostics", run)


def bounded_potential(grid: Grid, amplitude: float = 20.0, b: float = 0.8) -> Field:
    """V = amplitude * prod_a (1 + b cos 2 pi x_a): smooth, even and positive."""
    x = np.arange(grid.n) / grid.n
    one = 1.0 + b * np.cos(2 * np.pi * x)
    vals = amplitude * np.einsum("i,j,k->ijk", one, one, one) if grid.d == 3 else None
    return D.synthesize_potential(D.PotentialSpec("bounded_custom", field=Field.from_values(grid, vals)), grid)


def _random_mixture(grid: Grid, m: int, rank: int, rng) -> MB.DensityMatrix:
    P = grid.size
    psis = []
    for _ in range(rank):
        p = rng.standard_normal(P**m) + 1j * rng.standard_normal(P**m)
        psis.append(p / math.sqrt(np.sum(np.abs(p) ** 2) / P**m))
    return MB.DensityMatrix.mixture(rng.dirichlet(np.ones(rank)), psis, m, grid)


def hierarchy_identities(samples: int = 50, seed: int = 0) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        g8 = Grid(3, 8)
        c8 = MB.ManyBodyContext.from_seed(1, g8, MollifierSpec("gaussian", 0.5))
        V8 = D.synthesize_potential(D.PotentialSpec("bessel_riesz", 2.0), g8)
        u = Field.random(g8, rng, real=False, decay=2.0).values()
        tens = MB.tensorization_defect(u, V8, c8)

        g4 = Grid(3, 4)
        c4 = MB.ManyBodyContext.from_seed(1, g4, MollifierSpec("gaussian", 0.5))
        V4 = D.synthesize_potential(D.PotentialSpec("bessel_riesz", 2.0), g4)
        v = rng.standard_normal(64) + 1j * rng.standard_normal(64)
        psi = MB.ManyBodyState.product(v, 3, g4)
        r3 = MB.DensityMatrix.pure(psi.psi, 3, g4)
        compat = float(np.max(np.abs(MB.partial_trace(MB.partial_trace(r3, 2), 1).kernel - MB.partial_trace(r3, 1).kernel)))

        rho1 = MB.partial_trace(_random_mixture(g4, 2, 3, rng), 1)
        iso = abs(MB.trace_norm(MB.unitary_conjugate(rho1, 0.7, c4)) - MB.trace_norm(rho1))

        vinf = float(np.max(np.abs(V4.values())))
        spohn = 0.0
        for i in range(samples):
            n = 1 + i % 2
            rho = _random_mixture(g4, n + 1, 2, rng)
            out = MB.collision_sum(rho, V4, c4)
            spohn = max(spohn, MB.trace_norm(out) / (2 * n * vinf * MB.trace_norm(rho)))
        ok = tens <= 1e-12 and compat <= 1e-12 and iso <= 1e-10 and spohn <= 1.0
        return ok, {"tensorization": tens, "compatibility": compat, "isometry": iso, "spohn_ratio": spohn}

    return _timed("12 hierarchy identities", run)


def bbgky_consistency(dts=(0.02, 0.01, 0.005), T: float = 0.5, seed: int = 0) -> CheckResult:
    def run():
        g = Grid(3, 4)
        ctx = MB.ManyBodyContext.from_seed(1, g, MollifierSpec("gaussian", 0.5))
        V = bounded_potential(g)
        u = np.random.default_rng(seed).standard_normal(64) + 0j
        u = u + 1j * np.random.default_rng(seed + 1).standard_normal(64)
        res = []
        for dt in dts:
            us = MB.hartree_trajectory(u, T, dt, ctx, V)
            t1 = [MB.DensityMatrix(1, g, kernel=np.outer(x, x.conj())) for x in us]
            t2 = [MB.DensityMatrix.pure(np.multiply.outer(x, x), 2, g) for x in us]
            res.append(float(MB.bbgky_residual(t1, t2, ctx, V, dt).max()))
        orders = [math.log2(a / b) for a, b in zip(res, res[1:])]
        return min(orders) >= 1.0, {"residuals": res, "orders": orders}

    return _timed("13 BBGKY consistency", run)


def mean_field_trend(T: float = 0.5, dt: float = 0.01, seed: int = 0, amplitude: float = 1.0) -> CheckResult:
    """Mean-field deviation over N = 2, 3, 4 at unit interaction strength.

    Much stronger interactions saturate the trace distance near its ceiling 2
    at these particle numbers, and no trend is visible.
    """

    def run():
        g = Grid(3, 4)
        ctx = MB.ManyBodyContext.from_seed(1, g, MollifierSpec("gaussian", 0.5))
        V = bounded_potential(g, amplitude)
        rng = np.random.default_rng(seed)
        u = rng.standard_normal(64) + 1j * rng.standard_normal(64)
        rows = MB.convergence_study([2, 3, 4], [ctx], u, V, T, dt)
        dev = [r.sup_trace_distance for r in rows]
        ratio = dev[0] / dev[2]
        ok = dev[0] > dev[1] > dev[2] and 1.0 <= ratio <= 4.0
        return ok, {"deviations": dev, "ratio_2_4": ratio}

    return _timed("14 mean-field trend", run)


def probes(delta: float = 1.0 / 3.0, hardy_samples: int = 20, seed: int = 0) -> CheckResult:
    def run():
        ctx = {n: _context(n, delta) for n in (12, 16)}
        heat = D.heat_probe(ctx[16], 1.0).slope
        st = {n: D.strichartz_probe(ctx[n], D.ProbeSpec(seed=seed)).max for n in (12, 16)}
        s_growth = st[16] / st[12]
        rng = np.random.default_rng(seed)
        h_growth = 0.0
        for _ in range(hardy_samples):
            f = Field.random(Grid(3, 12), rng, real=False, decay=1.5)
            a = MB.hardy_ratio(f, ctx[12], 1.0)
            b = MB.hardy_ratio(resample(f, Grid(3, 16)), ctx[16], 1.0)
            h_growth = max(h_growth, b / a)
        ok = abs(heat + 0.5) <= 0.15 and s_growth < 2 and h_growth < 1.5
        return ok, {"heat_slope": heat, "strichartz_max_12": st[12], "strichartz_max_16": st[16], "strichartz_growth": s_growth, "hardy_growth": h_growth}

    return _timed("15 probes", run)


ACCEPTANCE: list[Callable[[], CheckResult]] = [
    paraproduct_identity,
    bernstein_stability,
    renormalization_rates,
    enhancement_cauchy,
    operator_self_adjoint,
    gauge_round_trips,
    perturbation_gain,
    norm_equivalences,
    conservation,
    scheme_cross_validation,
    s_beta_diagnostics,
    hierarchy_identities,
    bbgky_consistency,
    mean_field_trend,
    probes,
]


# ---------------------------------------------------------------------------
# fast tier: identities and free cases


def free_evolution(n: int = 8, T: float = 1.0, dt: float = 1e-2) -> CheckResult:
    def run():
        ctx = A.trivial_context(Grid(3, n))
        u0 = _unit(Field.random(ctx.grid, np.random.default_rng(0), real=False, decay=2.0))
        V = D.synthesize_potential(D.PotentialSpec("constant", c_beta=0.0), ctx.grid)
        out = D.evolve(A.WaveState(u0), T, dt, "strang", ctx, V, observe_every=0).final.field.coef
        exact = u0.coef * np.exp(1j * T * (-ctx.grid.laplacian_symbol + ctx.K))
        err = float(np.linalg.norm(out - exact))
        return err <= 1e-10, {"L2_error": err}

    return _timed("free evolution", run)


def free_gauges(n: int = 8, samples: int = 5) -> CheckResult:
    def run():
        ctx = A.trivial_context(Grid(3, n))
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(samples):
            u = Field.random(ctx.grid, rng, real=False).coef
            for gname in A.GAUGES:
                worst = max(worst, float(np.linalg.norm(ctx.convert(u, "physical", gname) - u)))
            Hu = ctx.apply(u)
            worst = max(worst, float(np.linalg.norm(Hu - (ctx.grid.laplacian_symbol - ctx.K) * u)))
        return worst <= 1e-12, {"max_defect": worst, "K": ctx.K}

    return _timed("free gauges and operator", run)


def manybody_reductions() -> CheckResult:
    def run():
        g = Grid(3, 4)
        ctx = MB.ManyBodyContext.from_seed(1, g, MollifierSpec("gaussian", 0.5))
        rng = np.random.default_rng(0)
        u = rng.standard_normal(64) + 1j * rng.standard_normal(64)
        one = MB.evolve_manybody(MB.ManyBodyState.product(u, 1, g), 0.2, 0.01, ctx, None).final.psi
        lin = MB.hartree_trajectory(u, 0.2, 0.01, ctx, None)[-1]
        e1 = float(np.max(np.abs(one - lin)))
        three = MB.evolve_manybody(MB.ManyBodyState.product(u, 3, g), 0.2, 0.01, ctx, None).final.psi
        e2 = float(np.max(np.abs(three - MB.ManyBodyState.product(lin, 3, g).psi)))
        return max(e1, e2) <= 1e-12, {"N1": e1, "tensor_power": e2}

    return _timed("many-body reductions", run)


FAST: list[Callable[[], CheckResult]] = [
    paraproduct_identity,
    bernstein_stability,
    s_beta_diagnostics,
    free_evolution,
    free_gauges,
    manybody_reductions,
]


def run_battery(tier: str = "fast", report: Callable[[str], None] | None = print) -> list[CheckResult]:
    if tier not in ("fast", "full"):
        raise ValueError(f"unknown tier {tier!r}")
    out = []
    for check in FAST if tier == "fast" else FAST + ACCEPTANCE[2:10] + ACCEPTANCE[11:]:
        res = check()
        out.append(res)
        if report:
            report(res.line())
    return out
