"""
Spatial white noise, mollification, renormalisation constants and the enhancement.

The enhancement is the tuple of iterated stochastic objects built from the
mollified noise xi_delta that the paracontrolled construction of the Anderson
Hamiltonian needs:

    X  = (1 - Lap)^-1 xi_delta
    X2 = (1 - Lap)^-1 (|grad X|^2 - c1)
    X3 = 2 (1 - Lap)^-1 (grad X . grad X2)
    W  = X + X2 + X3

together with Z, R1 = grad W o (1 - Lap)^-1 grad^2 W and R2 = grad Z o grad W.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import scipy.fft as sfft

from .spectral import (
    TWO_PI,
    Blocks,
    Field,
    Grid,
    dot,
    fourier_cutoff,
    from_padded,
    gradient,
    holder_norm,
    inverse_laplacian_plus_one,
    laplacian,
    res_values,
    _fft_workers,
    _symmetrize,
)


class UnresolvedMollifierWarning(UserWarning):
    """The grid is too coarse for the mollification scale (n < 4 / delta)."""


@dataclass(frozen=True)
class MollifierSpec:
    """Mollifier kind ('gaussian' or 'sharp') and scale delta >= 0."""

    kind: str = "gaussian"
    delta: float = 0.25

    def __post_init__(self):
        if self.kind not in ("gaussian", "sharp"):
            raise ValueError(f"unknown mollifier kind {self.kind!r}")
        if self.delta < 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")

    def symbol(self, grid: Grid) -> np.ndarray:
        """Fourier multiplier a_delta(k) in [0, 1] with a_delta(0) = 1."""
        return self.symbol_from_k2(grid.k2)

    def symbol_from_k2(self, k2: np.ndarray) -> np.ndarray:
        k2 = np.asarray(k2, dtype=float)
        if self.delta == 0:
            return np.ones_like(k2)
        if self.kind == "gaussian":
            return np.exp(-(TWO_PI**2) * self.delta**2 * k2)
        return (k2 <= 1.0 / self.delta**2).astype(float)

    def resolved(self, grid: Grid) -> bool:
        return self.delta > 0 and grid.n >= 4.0 / self.delta - 1e-12


def sample_white_noise(seed: int | np.random.SeedSequence, grid: Grid) -> Field:
    """Real white noise with E|xi_hat(k)|^2 = 1 on every working mode.

    Point values are i.i.d. N(0, n^d), whose normalised DFT has unit-variance
    coefficients with xi_hat(-k) = conj xi_hat(k) (real zero mode).
    """
    rng = np.random.default_rng(seed)
    vals = rng.standard_normal(grid.shape) * np.sqrt(grid.size)
    return Field.from_values(grid, vals)


def mollify(xi: Field, spec: MollifierSpec) -> Field:
    """xi_delta = a_delta * xi, i.e. xi_hat(k) a_delta(k)."""
    return Field(xi.grid, xi.coef * spec.symbol(xi.grid), xi.real)


@dataclass(frozen=True)
class RenormConstants:
    c1: float
    c2: float
    resolved: bool

    @property
    def c(self) -> float:
        return self.c1 + self.c2


def renorm_constants(spec: MollifierSpec, grid: Grid, warn: bool = True) -> RenormConstants:
    """Exact lattice sums for c1 = E|grad X|^2 and c2 = E|grad X2|^2.

    With g(m) = a(m) / (1 + 4 pi^2 |m|^2) the Fourier coefficient of |grad X|^2
    at k is Q(k) = -4 pi^2 sum_m m.(k - m) g(m) g(k - m) xi(m) xi(k - m), so
    E Q(0) = c1 and Wick's theorem gives the variance of the centred Q(k) as
    2 sum_m 16 pi^4 (m.(k - m))^2 g(m)^2 g(k - m)^2.  Then

        c2 = sum_k 4 pi^2 |k|^2 (1 + 4 pi^2 |k|^2)^-2 Var Q(k).

    The inner sum is evaluated as sum_{a,b} (h_ab * h_ab)(k) with
    h_ab(m) = m_a m_b g(m)^2 by zero-padded FFT convolution; both m and k - m
    range over the working modes, exactly as in the dealiased product.
    """
    resolved = spec.resolved(grid)
    if warn and not resolved:
        warnings.warn(
            f"grid n={grid.n} does not resolve delta={spec.delta} (need n >= 4/delta)",
            UnresolvedMollifierWarning,
            stacklevel=2,
        )
    c1 = _c1_lattice_sum(spec, grid)
    c2 = _c2_lattice_sum(spec, grid)
    return RenormConstants(c1, c2, resolved)


def _c1_lattice_sum(spec: MollifierSpec, grid: Grid) -> float:
    """sum over working modes of 4 pi^2 |k|^2 a(k)^2 / (1 + 4 pi^2 |k|^2)^2.

    The summand depends on |k|^2 only, so the cube of working modes is reduced
    to shell counts r(q) = #{k : |k|^2 = q}, obtained as the d-fold convolution
    of the one-dimensional square counts.  This keeps very fine grids cheap.
    """
    half = grid.n // 2 - 1
    counts = np.zeros(half * half + 1)
    for k in range(-half, half + 1):
        counts[k * k] += 1
    shells = counts
    for _ in range(grid.d - 1):
        shells = np.rint(sfft.irfft(sfft.rfft(shells, 2 * len(shells) + 1) * sfft.rfft(counts, 2 * len(shells) + 1), 2 * len(shells) + 1))
        shells = np.trim_zeros(shells, "b")
    q = np.arange(len(shells), dtype=float)
    if spec.delta == 0:
        a2 = np.ones_like(q)
    elif spec.kind == "gaussian":
        a2 = np.exp(-2.0 * TWO_PI**2 * spec.delta**2 * q)
    else:
        a2 = (q <= 1.0 / spec.delta**2).astype(float)
    return float(np.sum(shells * TWO_PI**2 * q * a2 / (1.0 + TWO_PI**2 * q) ** 2))


def _c2_lattice_sum(spec: MollifierSpec, grid: Grid) -> float:
    # Modes where g^2 < 1e-17 max(g^2) are dropped, which bounds the transform
    # size by the mollifier rather than by n and keeps fine grids cheap.
    d = grid.d
    half = grid.n // 2 - 1
    if spec.delta > 0 and spec.kind == "gaussian":
        reach = int(np.ceil(np.sqrt(np.log(1e17) / (2.0 * TWO_PI**2 * spec.delta**2))))
    elif spec.delta > 0:
        reach = int(np.floor(1.0 / spec.delta))
    else:
        reach = half
    reach = min(reach, half)
    m = sfft.next_fast_len(2 * reach + 2, real=True)
    m += m % 2
    freqs = np.fft.fftfreq(m, 1.0 / m).astype(int)
    kk = np.meshgrid(*([freqs] * d), indexing="ij", sparse=True)
    q = sum(k * k for k in kk)
    inside = np.ones(q.shape, dtype=bool)
    for k in kk:
        inside = inside & (np.abs(k) <= reach)
    bessel = 1.0 + TWO_PI**2 * q
    a = MollifierSpec(spec.kind, spec.delta).symbol_from_k2(q)
    g2 = np.where(inside, (a / bessel) ** 2, 0.0)
    acc = None
    for i in range(d):
        for j in range(i, d):
            hs = sfft.rfftn(kk[i] * kk[j] * g2, s=(m,) * d, workers=_fft_workers())
            hs *= hs
            if i != j:
                hs *= 2.0
            if acc is None:
                acc = hs
            else:
                acc += hs
            del hs
    conv = sfft.irfftn(acc, s=(m,) * d, workers=_fft_workers())
    del acc
    # output modes: working modes of the grid reachable by the convolution
    out = np.ones(q.shape, dtype=bool)
    for k in kk:
        out = out & (np.abs(k) <= min(half, 2 * reach)) & (np.abs(k) < m // 2)
    var_q = 2.0 * 16.0 * np.pi**4 * np.where(out, conv, 0.0)
    return float(np.sum(TWO_PI**2 * q / bessel**2 * var_q))


@dataclass(frozen=True, eq=False)
class Enhancement:
    """Mollified enhancement with its renormalisation constants.

    R1 is the vector field grad W o (1 - Lap)^-1 grad^2 W, stored by component.
    """

    X: Field
    X2: Field
    X3: Field
    W: Field
    Z: Field
    R1: tuple[Field, ...]
    R2: Field
    c1: float
    c2: float
    delta: float
    M: int
    seed: int | None
    xi_delta: Field
    mollifier: MollifierSpec

    @property
    def grid(self) -> Grid:
        return self.X.grid

    @property
    def c(self) -> float:
        return self.c1 + self.c2

    def components(self) -> dict[str, Field]:
        out = {"X": self.X, "X2": self.X2, "X3": self.X3, "W": self.W, "Z": self.Z, "R2": self.R2}
        for a, r in enumerate(self.R1):
            out[f"R1_{a}"] = r
        out["xi_delta"] = self.xi_delta
        return out

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name, f in sorted(self.components().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(f.coef).tobytes())
        h.update(np.array([self.c1, self.c2, self.delta, self.M], dtype=float).tobytes())
        return h.hexdigest()

    def with_cutoff(self, M: int) -> "Enhancement":
        """Recompute the M-dependent objects Z and R2 for another cutoff."""
        if M == self.M:
            return self
        Z, R2 = _z_and_r2(self.X, self.X2, self.X3, self.W, self.c2, M)
        return replace(self, Z=Z, R2=R2, M=M)

    @classmethod
    def zero(cls, grid: Grid, M: int = 0) -> "Enhancement":
        """The trivial enhancement (all objects and constants zero)."""
        z = Field.zeros(grid)
        return cls(z, z, z, z, z, tuple([z] * grid.d), z, 0.0, 0.0, 0.0, M, None, z, MollifierSpec("gaussian", 0.0))


def _check_cutoff(grid: Grid, M: int) -> None:
    if M < 0 or M > grid.max_block:
        raise ValueError(f"cutoff M={M} outside [0, {grid.max_block}] for n={grid.n}")


def _z_and_r2(X: Field, X2: Field, X3: Field, W: Field, c2: float, M: int) -> tuple[Field, Field]:
    gX, gX2, gX3, gW = gradient(X), gradient(X2), gradient(X3), gradient(W)
    low = fourier_cutoff(W, M, above=False)
    g_low = gradient(low)
    # Lap[exp(-w)] exp(w) = -Lap w + |grad w|^2 for the smooth low part w
    rhs = (
        dot(gX2, gX2)
        - Field.constant(X.grid, c2)
        + dot(gX3, gX3)
        + 2.0 * dot(gX, gX3)
        + 2.0 * dot(gX2, gX3)
        + W
        - 2.0 * dot(g_low, gW)
        - laplacian(low)
        + dot(g_low, g_low)
    )
    Z = inverse_laplacian_plus_one(rhs)
    R2 = resonant_dot(gradient(Z), gW)
    return Z, R2


def resonant_dot(u: Sequence[Field], v: Sequence[Field]) -> Field:
    """sum_a u_a o v_a."""
    grid = u[0].grid
    acc = 0.0
    for a in range(len(u)):
        acc = acc + res_values(Blocks(grid, u[a].coef, u[a].real), Blocks(grid, v[a].coef, v[a].real))
    coef = from_padded(grid, acc) if np.ndim(acc) else np.zeros(grid.shape, complex)
    real = all(f.real for f in u) and all(f.real for f in v)
    f = Field(grid, coef, real)
    return _real_part(f) if real else f


def _real_part(f: Field) -> Field:
    return Field(f.grid, _symmetrize(f.coef, f.grid.d), True)


def r1_field(W: Field) -> tuple[Field, ...]:
    """R1_b = sum_a d_a W o (1 - Lap)^-1 d_a d_b W."""
    gW = gradient(W)
    out = []
    for b in range(W.grid.d):
        hess_b = [inverse_laplacian_plus_one(gradient(gW[a])[b]) for a in range(W.grid.d)]
        out.append(resonant_dot(gW, hess_b))
    return tuple(out)


def enhance(xi: Field, spec: MollifierSpec, M: int, seed: int | None = None, constants: RenormConstants | None = None) -> Enhancement:
    """Assemble the mollified enhancement of the white noise xi at cutoff M."""
    grid = xi.grid
    _check_cutoff(grid, M)
    rc = constants if constants is not None else renorm_constants(spec, grid)
    xi_d = mollify(xi, spec)
    X = inverse_laplacian_plus_one(xi_d)
    gX = gradient(X)
    X2 = inverse_laplacian_plus_one(dot(gX, gX) - Field.constant(grid, rc.c1))
    X3 = 2.0 * inverse_laplacian_plus_one(dot(gX, gradient(X2)))
    W = X + X2 + X3
    Z, R2 = _z_and_r2(X, X2, X3, W, rc.c2, M)
    R1 = r1_field(W)
    return Enhancement(X, X2, X3, W, Z, R1, R2, rc.c1, rc.c2, spec.delta, M, seed, xi_d, spec)


def enhance_from_seed(seed: int, grid: Grid, spec: MollifierSpec, M: int = 0) -> Enhancement:
    return enhance(sample_white_noise(seed, grid), spec, M, seed=seed)


def enhancement_norm(ench: Enhancement, eps: float) -> float:
    """Max of the component norms in C^{1/2-e}, C^{1-e}, C^{3/2-e}, C^{3/2-e}, C^{-e}, C^{-e}."""
    if not 0 < eps < 0.5:
        raise ValueError(f"eps must lie in (0, 1/2), got {eps}")
    norms = [
        holder_norm(ench.X, 0.5 - eps),
        holder_norm(ench.X2, 1.0 - eps),
        holder_norm(ench.X3, 1.5 - eps),
        holder_norm(ench.Z, 1.5 - eps),
        max(holder_norm(r, -eps) for r in ench.R1),
        holder_norm(ench.R2, -eps),
    ]
    return float(max(norms))


def spawn_seeds(master: int, count: int) -> list[np.random.SeedSequence]:
    """Independent child streams of a master seed for ensembles."""
    return np.random.SeedSequence(master).spawn(count)
