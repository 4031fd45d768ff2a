"""
Fourier representation, Littlewood-Paley blocks and Bony paraproducts on the torus.

Fields live on (R/Z)^d and are stored as Fourier coefficients f_hat(k) of the
expansion f(x) = sum_k f_hat(k) exp(2 pi i k.x), so that the integral of |f|^2
over the torus equals sum_k |f_hat(k)|^2.  Coefficient arrays use numpy FFT
ordering along every axis.

The working space on an n^d grid is spanned by the modes with |k_a| < n/2 on
every axis.  The Nyquist modes k_a = -n/2 are kept at zero: their conjugate
partner is not on the grid, so excluding them keeps the space closed under
complex conjugation and makes every dealiased product of real fields real.

Pointwise products are evaluated exactly on a 3n/2 padded grid (the 2/3 rule
viewed from the output side) and projected back onto the working space.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from typing import BinaryIO, Sequence

import numpy as np
import scipy.fft as sfft

TWO_PI = 2.0 * np.pi
FORMAT_MAGIC = b"ANLS"
FORMAT_VERSION = 1
KERNEL_FORMAT_VERSION = 2


class GridMismatchError(ValueError):
    """Raised when fields defined on different grids are combined."""


class EmptyBlockError(ValueError):
    """Raised when a Littlewood-Paley block lies beyond the grid resolution."""


_WORKERS = [1]


def _fft_workers() -> int:
    return _WORKERS[0]


def set_fft_workers(count: int) -> None:
    """Set the number of threads used by the FFT backend."""
    _WORKERS[0] = max(1, int(count))


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid with n points per axis on the d-torus."""

    d: int
    n: int

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.d}")
        if self.n < 2 or self.n % 2:
            raise ValueError(f"grid size must be even and >= 2, got {self.n}")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def size(self) -> int:
        return self.n**self.d

    @property
    def padded(self) -> int:
        return 3 * self.n // 2

    @cached_property
    def freqs(self) -> np.ndarray:
        """Integer wavenumbers along one axis in FFT order."""
        return np.fft.fftfreq(self.n, 1.0 / self.n).astype(int)

    @cached_property
    def k(self) -> np.ndarray:
        """Wavenumber vectors, shape (d, n, ..., n)."""
        return np.stack(np.meshgrid(*([self.freqs] * self.d), indexing="ij"))

    @cached_property
    def k2(self) -> np.ndarray:
        """Squared wavenumber magnitude |k|^2 (integer)."""
        return np.sum(self.k**2, axis=0)

    @cached_property
    def kabs(self) -> np.ndarray:
        return np.sqrt(self.k2.astype(float))

    @cached_property
    def active(self) -> np.ndarray:
        """Boolean mask of the working modes (no Nyquist component)."""
        return np.all(np.abs(self.k) < self.n // 2, axis=0)

    @cached_property
    def block_index(self) -> np.ndarray:
        """Sharp dyadic block j of each mode; -1 marks |k| <= 1."""
        # |k| <= 1 is the low block; j >= 1 collects |k|^2 in (4^(j-1), 4^j].
        # On the integer lattice the annulus (1/2, 1] of block 0 lies inside
        # the low ball, so block 0 is always empty.
        q = self.k2
        j = np.full(q.shape, -1, dtype=int)
        rest = q > 1
        level = 1
        while np.any(rest):
            sel = rest & (q <= 4**level)
            j[sel] = level
            rest &= ~sel
            level += 1
        return j

    @cached_property
    def max_block(self) -> int:
        return int(self.block_index[self.active].max())

    @cached_property
    def laplacian_symbol(self) -> np.ndarray:
        return -(TWO_PI**2) * self.k2.astype(float)

    @cached_property
    def bessel_symbol(self) -> np.ndarray:
        """1 + 4 pi^2 |k|^2, the symbol of 1 - Laplacian."""
        return 1.0 + (TWO_PI**2) * self.k2.astype(float)

    @cached_property
    def _pad_index(self) -> tuple:
        idx = np.mod(self.freqs, self.padded)
        return np.ix_(*([idx] * self.d))

    @cached_property
    def _pad_index_half(self) -> tuple:
        idx = np.mod(self.freqs, self.padded)
        return np.ix_(*([idx] * (self.d - 1) + [np.arange(self.n // 2)]))

    @cached_property
    def _pad_index_mirror(self) -> tuple:
        # padded half-spectrum positions of -k for the modes with k_last < 0
        idx = np.mod(-self.freqs, self.padded)
        return np.ix_(*([idx] * (self.d - 1) + [np.arange(self.n // 2 - 1, 0, -1)]))

    @cached_property
    def points(self) -> np.ndarray:
        """Grid coordinates x_a = i_a / n, shape (d, n, ..., n)."""
        x = np.arange(self.n) / self.n
        return np.stack(np.meshgrid(*([x] * self.d), indexing="ij"))

    def axes(self) -> tuple[int, ...]:
        return tuple(range(-self.d, 0))


@dataclass(frozen=True, eq=False)
class Field:
    """Scalar field on the torus held by its Fourier coefficients."""

    grid: Grid
    coef: np.ndarray
    real: bool = True

    def __post_init__(self):
        if self.coef.shape != self.grid.shape:
            raise ValueError(f"coefficient shape {self.coef.shape} does not match grid {self.grid.shape}")

    # construction -------------------------------------------------------
    @classmethod
    def zeros(cls, grid: Grid, real: bool = True) -> "Field":
        return cls(grid, np.zeros(grid.shape, dtype=complex), real)

    @classmethod
    def constant(cls, grid: Grid, value: complex) -> "Field":
        coef = np.zeros(grid.shape, dtype=complex)
        coef[(0,) * grid.d] = value
        return cls(grid, coef, np.isreal(value))

    @classmethod
    def mode(cls, grid: Grid, k: Sequence[int], amplitude: complex = 1.0) -> "Field":
        """Single Fourier mode amplitude * exp(2 pi i k.x)."""
        coef = np.zeros(grid.shape, dtype=complex)
        coef[tuple(int(c) % grid.n for c in k)] = amplitude
        return cls(grid, project(grid, coef), False)

    @classmethod
    def from_values(cls, grid: Grid, values: np.ndarray) -> "Field":
        """Build a field from grid point values (Nyquist content discarded)."""
        values = np.asarray(values)
        coef = sfft.fftn(values, axes=grid.axes(), workers=_fft_workers()) / grid.size
        real = not np.iscomplexobj(values)
        return cls(grid, project(grid, coef), real)

    @classmethod
    def random(cls, grid: Grid, rng: np.random.Generator, real: bool = True, decay: float = 0.0) -> "Field":
        """Gaussian random field with spectrum (1 + 4 pi^2 |k|^2)^(-decay/2)."""
        vals = rng.standard_normal(grid.shape)
        if not real:
            vals = vals + 1j * rng.standard_normal(grid.shape)
        f = cls.from_values(grid, vals)
        if decay:
            f = bessel_multiplier(f, -decay)
        return f

    # views ----------------------------------------------------------------
    def values(self) -> np.ndarray:
        """Point values on the n^d grid."""
        v = sfft.ifftn(self.coef, axes=self.grid.axes(), workers=_fft_workers()) * self.grid.size
        return v.real if self.real else v

    def with_coef(self, coef: np.ndarray, real: bool | None = None) -> "Field":
        return Field(self.grid, coef, self.real if real is None else real)

    # arithmetic -----------------------------------------------------------
    def _check(self, other: "Field") -> None:
        if other.grid != self.grid:
            raise GridMismatchError(f"grid mismatch: {self.grid} vs {other.grid}")

    def __add__(self, other: "Field") -> "Field":
        self._check(other)
        return Field(self.grid, self.coef + other.coef, self.real and other.real)

    def __sub__(self, other: "Field") -> "Field":
        self._check(other)
        return Field(self.grid, self.coef - other.coef, self.real and other.real)

    def __neg__(self) -> "Field":
        return Field(self.grid, -self.coef, self.real)

    def __mul__(self, scalar) -> "Field":
        if isinstance(scalar, Field):
            return product(self, scalar)
        return Field(self.grid, self.coef * scalar, self.real and np.isreal(scalar))

    __rmul__ = __mul__

    def norm(self) -> float:
        """L^2 norm (Parseval)."""
        return float(np.sqrt(np.sum(np.abs(self.coef) ** 2)))

    def inner(self, other: "Field") -> complex:
        """L^2 inner product (self, other) = integral of self * conj(other)."""
        self._check(other)
        return complex(np.sum(self.coef * np.conj(other.coef)))

    def hermitian_defect(self) -> float:
        """Relative violation of f_hat(-k) = conj f_hat(k)."""
        flipped = np.conj(_reflect(self.coef, self.grid.d))
        scale = max(np.max(np.abs(self.coef)), 1e-300)
        return float(np.max(np.abs(self.coef - flipped)) / scale)


def resample(f: Field, grid: Grid) -> Field:
    """Carry the shared working modes of f onto another grid of the same dimension.

    Refining keeps f exactly (new modes are zero); coarsening truncates.
    """
    if grid.d != f.grid.d:
        raise GridMismatchError(f"dimension mismatch: {f.grid.d} vs {grid.d}")
    cut = min(f.grid.n, grid.n) // 2
    keep = np.arange(-cut + 1, cut)
    src = np.ix_(*([keep % f.grid.n] * grid.d))
    dst = np.ix_(*([keep % grid.n] * grid.d))
    coef = np.zeros(grid.shape, dtype=complex)
    coef[dst] = f.coef[src]
    return Field(grid, coef, f.real)


def _reflect(coef: np.ndarray, d: int) -> np.ndarray:
    """Coefficients at -k in FFT ordering."""
    out = coef
    for ax in range(-d, 0):
        out = np.roll(np.flip(out, axis=ax), 1, axis=ax)
    return out


def project(grid: Grid, coef: np.ndarray) -> np.ndarray:
    """Zero every inactive (Nyquist) mode; works on batched arrays."""
    return np.where(grid.active, coef, 0.0)


# ---------------------------------------------------------------------------
# Fourier multipliers


def apply_multiplier(f: Field, symbol: np.ndarray) -> Field:
    return Field(f.grid, f.coef * symbol, f.real)


def bessel_multiplier(f: Field, s: float) -> Field:
    """(1 - Laplacian)^(s/2) f."""
    return apply_multiplier(f, f.grid.bessel_symbol ** (s / 2.0))


def inverse_laplacian_plus_one(f: Field) -> Field:
    """(1 - Laplacian)^(-1) f."""
    return apply_multiplier(f, 1.0 / f.grid.bessel_symbol)


def laplacian(f: Field) -> Field:
    return apply_multiplier(f, f.grid.laplacian_symbol)


def gradient(f: Field) -> list[Field]:
    """Components 2 pi i k_a f_hat of the gradient."""
    return [Field(f.grid, TWO_PI * 1j * f.grid.k[a] * f.coef, f.real) for a in range(f.grid.d)]


def divergence(v: Sequence[Field]) -> Field:
    g = v[0].grid
    coef = sum(TWO_PI * 1j * g.k[a] * v[a].coef for a in range(g.d))
    return Field(g, coef, all(c.real for c in v))


def dot(u: Sequence[Field], v: Sequence[Field]) -> Field:
    """Dealiased pointwise dot product sum_a u_a v_a."""
    out = product(u[0], v[0])
    for a in range(1, len(u)):
        out = out + product(u[a], v[a])
    return out


def fourier_cutoff(f: Field, level: int, above: bool) -> Field:
    """P_{>level} (above=True) or P_{<=level} with the sharp cut |k| = 2^level."""
    mask = f.grid.k2 > 4.0**level
    return Field(f.grid, np.where(mask if above else ~mask, f.coef, 0.0), f.real)


# ---------------------------------------------------------------------------
# padded transforms and dealiased products


def to_padded(grid: Grid, coef: np.ndarray, real: bool = False) -> np.ndarray:
    """Point values on the 3n/2 padded grid; leading axes are batch axes.

    With real=True the coefficients are taken to be Hermitian and only the
    half spectrum is transformed, giving real values at half the cost.
    """
    m = grid.padded
    batch = coef.shape[: coef.ndim - grid.d]
    if real:
        big = np.zeros(batch + (m,) * (grid.d - 1) + (m // 2 + 1,), dtype=complex)
        big[(Ellipsis,) + grid._pad_index_half] = coef[..., : grid.n // 2]
        return sfft.irfftn(big, s=(m,) * grid.d, axes=grid.axes(), workers=_fft_workers(), overwrite_x=True) * (m**grid.d)
    big = np.zeros(batch + (m,) * grid.d, dtype=complex)
    big[(Ellipsis,) + grid._pad_index] = coef
    return sfft.ifftn(big, axes=grid.axes(), workers=_fft_workers(), overwrite_x=True) * (m**grid.d)


def from_padded(grid: Grid, values: np.ndarray) -> np.ndarray:
    """Coefficients on the working space of values given on the padded grid."""
    m = grid.padded
    if np.isrealobj(values):
        half = sfft.rfftn(values, axes=grid.axes(), workers=_fft_workers()) / (m**grid.d)
        h = grid.n // 2
        out = np.zeros(values.shape[: values.ndim - grid.d] + grid.shape, dtype=complex)
        out[..., :h] = half[(Ellipsis,) + grid._pad_index_half]
        out[..., h + 1 :] = np.conj(half[(Ellipsis,) + grid._pad_index_mirror])
        return project(grid, out)
    big = sfft.fftn(values, axes=grid.axes(), workers=_fft_workers()) / (m**grid.d)
    return project(grid, big[(Ellipsis,) + grid._pad_index])


def product(f: Field, g: Field) -> Field:
    """Dealiased pointwise product f g projected onto the working space."""
    f._check(g)
    real = f.real and g.real
    coef = from_padded(f.grid, to_padded(f.grid, f.coef, f.real) * to_padded(f.grid, g.coef, g.real))
    if real:
        coef = _symmetrize(coef, f.grid.d)
    return Field(f.grid, coef, real)


def _symmetrize(coef: np.ndarray, d: int) -> np.ndarray:
    # remove round-off breaking Hermitian symmetry of products of real fields
    return 0.5 * (coef + np.conj(_reflect(coef, d)))


def apply_function(f: Field, func, oversample: int = 4) -> Field:
    """Coefficients of func(f) sampled on an oversampled grid, then projected.

    Oversampling keeps the aliasing of the spectral tail of func(f) out of the
    working modes for smooth f.
    """
    grid = f.grid
    m = oversample * grid.n
    big = np.zeros((m,) * grid.d, dtype=complex)
    idx = np.ix_(*([np.mod(grid.freqs, m)] * grid.d))
    big[idx] = f.coef
    vals = sfft.ifftn(big, workers=_fft_workers()) * m**grid.d
    out = func(vals.real if f.real else vals)
    coef = project(grid, (sfft.fftn(out, workers=_fft_workers()) / m**grid.d)[idx])
    if f.real:
        coef = _symmetrize(coef, grid.d)
    return Field(grid, coef, f.real)


def exp_field(f: Field) -> Field:
    return apply_function(f, np.exp)


# ---------------------------------------------------------------------------
# Littlewood-Paley blocks


@dataclass(frozen=True)
class BesovSpec:
    """Regularity s and integrability p, q of a Besov norm B^s_{p,q}."""

    s: float
    p: float = 2.0
    q: float = 2.0
    partition: str = "sharp"

    def __post_init__(self):
        if self.p < 1 or self.q < 1:
            raise ValueError(f"Besov integrability exponents must be >= 1, got p={self.p}, q={self.q}")
        if self.partition not in ("sharp", "smooth"):
            raise ValueError(f"unknown partition kind {self.partition!r}")


def block_symbol(grid: Grid, j: int, partition: str = "sharp") -> np.ndarray:
    """Fourier symbol of the block Delta_j."""
    if j < -1:
        raise ValueError(f"block index must be >= -1, got {j}")
    if j > grid.max_block:
        raise EmptyBlockError(f"block {j} exceeds the largest resolvable block {grid.max_block} on n={grid.n}")
    if partition == "sharp":
        return (grid.block_index == j).astype(float) * grid.active
    return _smooth_symbol(grid, j) * grid.active


def _bump(r: np.ndarray) -> np.ndarray:
    out = np.zeros_like(r)
    inside = r < 1
    out[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
    return out


def _smooth_chi(r: np.ndarray) -> np.ndarray:
    # smooth radial function equal to 1 on r <= 1 and 0 on r >= 4/3
    t = np.clip((r - 1.0) * 3.0, 0.0, 1.0)
    a = _bump(1.0 - t)
    b = _bump(t)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(a + b > 0, a / np.where(a + b > 0, a + b, 1.0), 0.0)


def _smooth_symbol(grid: Grid, j: int) -> np.ndarray:
    # Delta_{-1} = chi(|k|), Delta_j = chi(|k|/2^(j+1)) - chi(|k|/2^j); the last
    # resolvable block absorbs the tail so the family still sums to one
    r = grid.kabs
    if j == -1:
        return _smooth_chi(r)
    upper = np.ones_like(r) if j == grid.max_block else _smooth_chi(r / 2.0 ** (j + 1))
    return upper - _smooth_chi(r / 2.0**j)


def lp_block(f: Field, j: int, spec: BesovSpec | None = None) -> Field:
    """Littlewood-Paley block Delta_j f."""
    partition = spec.partition if spec else "sharp"
    return Field(f.grid, f.coef * block_symbol(f.grid, j, partition), f.real)


def lp_blocks(f: Field, spec: BesovSpec | None = None) -> list[Field]:
    return [lp_block(f, j, spec) for j in range(-1, f.grid.max_block + 1)]


def lp_norm(f: Field, p: float) -> float:
    """L^p norm by uniform grid quadrature; the sup over grid points for p = inf."""
    v = np.abs(f.values())
    if np.isinf(p):
        return float(v.max())
    return float(np.mean(v**p) ** (1.0 / p))


def besov_norm(f: Field, spec: BesovSpec) -> float:
    """(sum_j (2^(s j) ||Delta_j f||_{L^p})^q)^(1/q), the sup over j when q = inf."""
    # the low block carries weight 1 so that the scale is monotone in s
    terms = np.array(
        [2.0 ** (spec.s * max(j, 0)) * lp_norm(lp_block(f, j, spec), spec.p) for j in range(-1, f.grid.max_block + 1)]
    )
    if np.isinf(spec.q):
        return float(terms.max())
    return float(np.sum(terms**spec.q) ** (1.0 / spec.q))


def besov_norms(grid: Grid, coef: np.ndarray, spec: BesovSpec) -> np.ndarray:
    """besov_norm over the leading batch axes of a coefficient array."""
    batch = coef.shape[: coef.ndim - grid.d]
    terms = []
    for j in range(-1, grid.max_block + 1):
        v = np.abs(sfft.ifftn(coef * block_symbol(grid, j, spec.partition), axes=grid.axes(), workers=_fft_workers())) * grid.size
        v = v.reshape(batch + (-1,))
        lp = v.max(axis=-1) if np.isinf(spec.p) else np.mean(v**spec.p, axis=-1) ** (1.0 / spec.p)
        terms.append(2.0 ** (spec.s * max(j, 0)) * lp)
    terms = np.stack(terms, axis=-1)
    if np.isinf(spec.q):
        return terms.max(axis=-1)
    return np.sum(terms**spec.q, axis=-1) ** (1.0 / spec.q)


def holder_norm(f: Field, s: float) -> float:
    """Besov-Holder norm C^s = B^s_{inf,inf}."""
    return besov_norm(f, BesovSpec(s, np.inf, np.inf))


def sobolev_norm(f: Field, s: float) -> float:
    """||(1 - Laplacian)^(s/2) f||_{L^2}."""
    return float(np.sqrt(np.sum(f.grid.bessel_symbol**s * np.abs(f.coef) ** 2)))


def bessel_sobolev_norm(f: Field, s: float, p: float) -> float:
    """W^{s,p} norm ||(1 - Laplacian)^(s/2) f||_{L^p}."""
    return lp_norm(bessel_multiplier(f, s), p)


# ---------------------------------------------------------------------------
# paraproducts


class Blocks:
    """Padded-grid point values of the sharp blocks of a (batched) coefficient array.

    Bilinear paraproduct pieces are accumulated in padded point values and
    transformed back once, so a field that enters several products is split
    into blocks only once.
    """

    def __init__(self, grid: Grid, coef: np.ndarray, real: bool = False):
        self.grid = grid
        nb = grid.max_block + 2
        idx = grid.block_index
        self.parts = []
        for b in range(nb):
            mask = (idx == b - 1) & grid.active
            self.parts.append(to_padded(grid, np.where(mask, coef, 0.0), real) if mask.any() else 0.0)
        self._cum: list[np.ndarray] | None = None

    @property
    def count(self) -> int:
        return len(self.parts)

    def cumulative(self, b: int):
        """Sum of blocks 0..b (block position, i.e. j <= b - 1); zero for b < 0."""
        if self._cum is None:
            acc = []
            run = None
            for p in self.parts:
                run = p if run is None else run + p
                acc.append(run)
            self._cum = acc
        if b < 0:
            return 0.0
        return self._cum[min(b, self.count - 1)]

    def total(self):
        return self.cumulative(self.count - 1)


def lt_values(f: Blocks, g: Blocks):
    """Padded point values of f < g = sum_j S_{j-1} f Delta_j g."""
    out = 0.0
    for b in range(2, g.count):
        out = out + f.cumulative(b - 2) * g.parts[b]
    return out


def res_values(f: Blocks, g: Blocks):
    """Padded point values of the resonant product sum_{|i-j|<=1} Delta_i f Delta_j g."""
    out = 0.0
    for b in range(f.count):
        near = g.parts[b]
        if b > 0:
            near = near + g.parts[b - 1]
        if b + 1 < g.count:
            near = near + g.parts[b + 1]
        out = out + f.parts[b] * near
    return out


def paraproduct_split(f: Field, g: Field) -> tuple[Field, Field, Field]:
    """Bony decomposition (f < g, f o g, f > g) of the dealiased product."""
    f._check(g)
    grid = f.grid
    fb, gb = Blocks(grid, f.coef, f.real), Blocks(grid, g.coef, g.real)
    real = f.real and g.real
    pieces = []
    for vals in (lt_values(fb, gb), res_values(fb, gb), lt_values(gb, fb)):
        coef = from_padded(grid, vals) if np.ndim(vals) else np.zeros(grid.shape, complex)
        pieces.append(Field(grid, _symmetrize(coef, grid.d) if real else coef, real))
    return pieces[0], pieces[1], pieces[2]


def paraproduct(f: Field, g: Field) -> Field:
    return paraproduct_split(f, g)[0]


def resonant(f: Field, g: Field) -> Field:
    return paraproduct_split(f, g)[1]


def commutator_com(f: Field, g: Field, h: Field) -> Field:
    """com(f, g, h) = (f < g) o h - f (g o h)."""
    return resonant(paraproduct(f, g), h) - product(f, resonant(g, h))


# ---------------------------------------------------------------------------
# binary field format


def _wavenumber_order(coef: np.ndarray, d: int) -> np.ndarray:
    return np.fft.fftshift(coef, axes=tuple(range(coef.ndim - d, coef.ndim))) if d else coef


def write_field(fh: BinaryIO, f: Field) -> None:
    """Write magic, version, d, n, real_flag and little-endian (re, im) pairs.

    Coefficients are written in row-major order of ascending wavenumbers
    k_a = -n/2, ..., n/2 - 1 along every axis.
    """
    fh.write(FORMAT_MAGIC)
    fh.write(struct.pack("<4I", FORMAT_VERSION, f.grid.d, f.grid.n, int(f.real)))
    data = np.ascontiguousarray(np.fft.fftshift(f.coef)).astype("<c16")
    fh.write(data.view("<f8").tobytes())


def read_field(fh: BinaryIO) -> Field:
    magic = fh.read(4)
    if magic != FORMAT_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    version, d, n, real = struct.unpack("<4I", fh.read(16))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported field format version {version}")
    grid = Grid(d, n)
    raw = np.frombuffer(fh.read(16 * grid.size), dtype="<f8")
    coef = (raw[0::2] + 1j * raw[1::2]).reshape(grid.shape)
    return Field(grid, np.fft.ifftshift(coef).astype(complex), bool(real))


def write_kernel(fh: BinaryIO, grid: Grid, kernel: np.ndarray, particles: int) -> None:
    """Write a 2n-axis grid-value kernel; the header carries the particle count."""
    fh.write(FORMAT_MAGIC)
    fh.write(struct.pack("<5I", KERNEL_FORMAT_VERSION, grid.d, grid.n, 0, particles))
    fh.write(np.ascontiguousarray(kernel).astype("<c16").view("<f8").tobytes())


def read_kernel(fh: BinaryIO) -> tuple[Grid, np.ndarray, int]:
    if fh.read(4) != FORMAT_MAGIC:
        raise ValueError("bad magic")
    version, d, n, _, particles = struct.unpack("<5I", fh.read(20))
    if version != KERNEL_FORMAT_VERSION:
        raise ValueError(f"unsupported kernel format version {version}")
    grid = Grid(d, n)
    shape = (n,) * (2 * particles * d)
    raw = np.frombuffer(fh.read(16 * int(np.prod(shape))), dtype="<f8")
    return grid, (raw[0::2] + 1j * raw[1::2]).reshape(shape), particles
