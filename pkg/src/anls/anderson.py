"""
Renormalised Anderson Hamiltonian on the 3-torus and its gauge transforms.

Notation used throughout: w = W^M = P_{>M} W, L = (1 - Lap)^-1 and
Y = (1 - Lap) Z.  The four gauges of a state are

    physical  u
    flat      u_b  = E^-1 u            (E = dealiased multiplication by e^w)
    sharp     u_s  = Gamma^-1 u_b
    natural   u_n  = Theta u_s

The flat operator is T = Lap + 2 grad w . grad + Y, and H = E T E^-1 - K.  T is
evaluated through the paracontrolled decomposition

    T u_b = Lap u_s + Y o u_s + 2 grad w o grad u_s + G(u_b)

where u_b = P_{>N} A(u_b) + u_s with A(c) = c < Z + 2 grad c < L grad w + B(c).
Every manipulation behind G is an exact identity for dealiased products, so the
two sides agree to round-off on the grid; ``flat_operator_direct`` is the
reference for that check.

Internal routines act on coefficient arrays with optional leading batch axes so
that operator assembly can push many basis vectors through at once.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .noise import Enhancement, _check_cutoff
from .spectral import (
    TWO_PI,
    Blocks,
    Field,
    Grid,
    GridMismatchError,
    exp_field,
    fourier_cutoff,
    from_padded,
    lt_values,
    res_values,
    to_padded,
    _reflect,
    _symmetrize,
)

GAUGES = ("physical", "flat", "sharp", "natural")


class CalibrationError(RuntimeError):
    """No admissible cutoff was found below the grid resolution."""


class IterationError(RuntimeError):
    """A fixed-point or Krylov iteration failed to reach its tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (final residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class WaveState:
    field: Field
    time: float = 0.0
    gauge: str = "physical"
    defocusing: bool = True

    def __post_init__(self):
        if self.gauge not in GAUGES:
            raise ValueError(f"unknown gauge {self.gauge!r}")


@dataclass(frozen=True)
class Tolerances:
    ftol: float = 1e-10
    max_iter: int = 50
    contraction: float = 0.5
    cg_tol: float = 1e-14
    power_iter: int = 40


@dataclass
class Factorization:
    """Eigen-decomposition of -H restricted to the real Fourier basis."""

    evals: np.ndarray
    evecs: np.ndarray
    matrix: np.ndarray  # assembled H (real coordinates, not symmetrised)
    asymmetry: float  # max |H - H^T| / max |H|


# ---------------------------------------------------------------------------
# array helpers


def _grad(grid: Grid, c: np.ndarray) -> list[np.ndarray]:
    return [TWO_PI * 1j * grid.k[a] * c for a in range(grid.d)]


def _lap(grid: Grid, c: np.ndarray) -> np.ndarray:
    return grid.laplacian_symbol * c


def _L(grid: Grid, c: np.ndarray) -> np.ndarray:
    return c / grid.bessel_symbol


def _low(grid: Grid, c: np.ndarray, level: int) -> np.ndarray:
    return np.where(grid.k2 > 4.0**level, 0.0, c)


def _high(grid: Grid, c: np.ndarray, level: int) -> np.ndarray:
    return np.where(grid.k2 > 4.0**level, c, 0.0)


def _unpad(grid: Grid, vals, batch: tuple) -> np.ndarray:
    if np.ndim(vals) == 0:
        return np.zeros(batch + grid.shape, dtype=complex)
    return from_padded(grid, vals)


def _norms(grid: Grid, c: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.abs(c) ** 2, axis=grid.axes()))


def _inner(grid: Grid, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sum(np.conj(a) * b, axis=grid.axes())


def _bcast(grid: Grid, x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape + (1,) * grid.d)


def _cmatmul(z: np.ndarray, m: np.ndarray) -> np.ndarray:
    """z @ m for complex z and real m in one pass over m (no complex copy of m)."""
    lead = z.shape[:-1]
    flat = z.reshape(-1, z.shape[-1])
    out = np.concatenate([flat.real, flat.imag]) @ m
    k = flat.shape[0]
    return (out[:k] + 1j * out[k:]).reshape(lead + (m.shape[1],))


def _lt_adjoint(grid: Grid, f: Blocks, h: np.ndarray) -> np.ndarray:
    """Adjoint of g -> f < g applied to h (coefficients)."""
    hp = to_padded(grid, h, True)
    out = np.zeros(h.shape, dtype=complex)
    idx = grid.block_index
    for b in range(2, f.count):
        low = f.cumulative(b - 2)
        if np.ndim(low) == 0:
            continue
        piece = from_padded(grid, np.conj(low) * hp)
        out += np.where((idx == b - 1) & grid.active, piece, 0.0)
    return out


# ---------------------------------------------------------------------------
# real orthonormal Fourier basis


class RealBasis:
    """Orthonormal basis of real fields: e_0 and sqrt(2) cos / sin pairs."""

    def __init__(self, grid: Grid):
        self.grid = grid
        flat_active = np.flatnonzero(grid.active.ravel())
        k = grid.k.reshape(grid.d, -1)[:, flat_active].T
        index = {tuple(v): i for i, v in enumerate(k)}
        zero, pos, neg = [], [], []
        for i, v in enumerate(k):
            t = tuple(v)
            if not any(t):
                zero.append(i)
                continue
            first = next(c for c in t if c != 0)
            if first > 0:
                pos.append(i)
                neg.append(index[tuple(-c for c in t)])
        self.active = flat_active
        self.kvec = k
        self.zero = np.array(zero, dtype=int)
        self.pos = np.array(pos, dtype=int)
        self.neg = np.array(neg, dtype=int)
        self.dim = len(flat_active)

    def to_coords(self, coef: np.ndarray) -> np.ndarray:
        """Fourier coefficients (batch + grid shape) -> coordinates (batch, dim)."""
        g = self.grid
        batch = coef.shape[: coef.ndim - g.d]
        v = coef.reshape(batch + (-1,))[..., self.active]
        out = np.empty(batch + (self.dim,), dtype=complex)
        nz, npos = len(self.zero), len(self.pos)
        s2 = np.sqrt(2.0)
        out[..., :nz] = v[..., self.zero]
        out[..., nz : nz + npos] = (v[..., self.pos] + v[..., self.neg]) / s2
        out[..., nz + npos :] = 1j * (v[..., self.pos] - v[..., self.neg]) / s2
        return out

    def from_coords(self, x: np.ndarray) -> np.ndarray:
        g = self.grid
        batch = x.shape[:-1]
        nz, npos = len(self.zero), len(self.pos)
        s2 = np.sqrt(2.0)
        a, b = x[..., nz : nz + npos], x[..., nz + npos :]
        v = np.zeros(batch + (self.dim,), dtype=complex)
        v[..., self.zero] = x[..., :nz]
        v[..., self.pos] = (a - 1j * b) / s2
        v[..., self.neg] = (a + 1j * b) / s2
        full = np.zeros(batch + (g.size,), dtype=complex)
        full[..., self.active] = v
        return full.reshape(batch + g.shape)

    def fourier_matrix_to_real(self, m: np.ndarray) -> np.ndarray:
        """U M U^H for a matrix acting on active Fourier coefficients."""
        rows = self._rows(m)
        return self._rows(rows.conj().T).conj().T

    def _rows(self, m: np.ndarray) -> np.ndarray:
        nz, npos = len(self.zero), len(self.pos)
        s2 = np.sqrt(2.0)
        out = np.empty(m.shape, dtype=complex)
        out[:nz] = m[self.zero]
        out[nz : nz + npos] = (m[self.pos] + m[self.neg]) / s2
        out[nz + npos :] = 1j * (m[self.pos] - m[self.neg]) / s2
        return out

    def multiplication_matrix(self, f: Field) -> np.ndarray:
        """Fourier matrix of u -> dealiased f u on the active modes."""
        g = self.grid
        half = g.n // 2 - 1
        k = self.kvec
        idx = np.zeros((self.dim, self.dim), dtype=np.int64)
        ok = np.ones((self.dim, self.dim), dtype=bool)
        for a in range(g.d):
            diff = k[:, a][:, None] - k[:, a][None, :]
            ok &= np.abs(diff) <= half
            idx = idx * g.n + np.mod(diff, g.n)
        return np.where(ok, f.coef.ravel()[idx], 0.0)


# ---------------------------------------------------------------------------
# operator context


class OperatorContext:
    """Calibrated data for H built from an enhancement at cutoffs (M, N) and shift K."""

    def __init__(self, ench: Enhancement, M: int, N: int, K: float = 0.0, tol: Tolerances | None = None):
        grid = ench.grid
        _check_cutoff(grid, M)
        _check_cutoff(grid, N)
        self.ench = ench.with_cutoff(M)
        self.M, self.N, self.K = int(M), int(N), float(K)
        self.tol = tol or Tolerances()
        self.grid = grid
        self._factorization: Factorization | None = None
        self.cache_hits = 0
        e = self.ench
        w = fourier_cutoff(e.W, M, above=True)
        self.WM = w
        self.expw = exp_field(w)
        self.Y = Field(grid, grid.bessel_symbol * e.Z.coef, True)
        g = grid
        gw = _grad(g, w.coef)
        gZ = _grad(g, e.Z.coef)
        self._b_Z = Blocks(g, e.Z.coef, True)
        self._b_Y = Blocks(g, self.Y.coef, True)
        self._b_gw = [Blocks(g, x, True) for x in gw]
        self._b_gZ = [Blocks(g, x, True) for x in gZ]
        self._b_Lgw = [Blocks(g, _L(g, x), True) for x in gw]
        hw = [[_L(g, TWO_PI * 1j * g.k[b] * gw[a]) for b in range(g.d)] for a in range(g.d)]
        self._b_Lhw = [[Blocks(g, hw[a][b], True) for b in range(g.d)] for a in range(g.d)]
        # R^M objects built from w itself
        r2 = sum(res_values(self._b_gZ[a], self._b_gw[a]) for a in range(g.d))
        self.R2M = Field(g, _symmetrize(_unpad(g, r2, ()), g.d), True)
        r1 = []
        for a in range(g.d):
            acc = sum(res_values(self._b_Lhw[a][b], self._b_gw[b]) for b in range(g.d))
            r1.append(Field(g, _symmetrize(_unpad(g, acc, ()), g.d), True))
        self.R1M = tuple(r1)
        self._b_R2 = Blocks(g, self.R2M.coef, True)
        self._b_R1 = [Blocks(g, r.coef, True) for r in self.R1M]
        em1 = self.expw - Field.constant(g, 1.0)
        self.expw_minus_one = em1
        self._b_em1 = Blocks(g, em1.coef, True)
        self._expw_pad = to_padded(g, self.expw.coef, True)
        self._gw_pad = [to_padded(g, x, True) for x in gw]
        self._Y_pad = to_padded(g, self.Y.coef, True)

    # basic maps --------------------------------------------------------------
    def _E(self, c: np.ndarray) -> np.ndarray:
        return from_padded(self.grid, to_padded(self.grid, c, True) * self._expw_pad)

    def _E_inv(self, u: np.ndarray) -> np.ndarray:
        """Solve E c = u by conjugate gradients (E is Hermitian positive definite)."""
        g = self.grid
        batch = u.shape[: u.ndim - g.d]
        x = u.copy()
        r = u - self._E(x)
        p = r.copy()
        rs = np.real(_inner(g, r, r))
        target = (self.tol.cg_tol * np.maximum(_norms(g, u), 1e-300)) ** 2
        for _ in range(200):
            if np.all(rs <= target):
                return x
            Ap = self._E(p)
            alpha = rs / np.maximum(np.real(_inner(g, p, Ap)), 1e-300)
            alpha = np.where(rs <= target, 0.0, alpha)
            x = x + _bcast(g, alpha) * p
            r = r - _bcast(g, alpha) * Ap
            rs_new = np.real(_inner(g, r, r))
            beta = np.where(rs > 0, rs_new / np.maximum(rs, 1e-300), 0.0)
            p = r + _bcast(g, beta) * p
            rs = rs_new
        if np.all(rs <= 100 * target):
            return x
        raise IterationError("E^-1 conjugate gradients did not converge", float(np.sqrt(np.max(rs))))

    def _A(self, c: np.ndarray):
        """A(c) = c < Z + 2 grad c < L grad w + B(c) with the pieces reused by G."""
        g = self.grid
        d = g.d
        batch = c.shape[: c.ndim - d]
        gc = _grad(g, c)
        bc = Blocks(g, c, True)
        bgc = [Blocks(g, x, True) for x in gc]
        bh = [[None] * d for _ in range(d)]
        for a in range(d):
            for b in range(a, d):
                blk = Blocks(g, TWO_PI * 1j * g.k[b] * gc[a], True)
                bh[a][b] = bh[b][a] = blk
        # (1 - Lap) B = 2 grad c > grad w + 2 [grad c <, 1 - Lap] L grad w + 2 c < R2 + 4 grad c < R1
        # with [f <, 1 - Lap] g = Lap f < g + 2 grad f < grad g
        bv = 0.0
        for a in range(d):
            bv = bv + 2.0 * lt_values(self._b_gw[a], bgc[a])
            bv = bv + 2.0 * lt_values(Blocks(g, _lap(g, gc[a]), True), self._b_Lgw[a])
            bv = bv + 4.0 * lt_values(bgc[a], self._b_R1[a])
            for b in range(d):
                bv = bv + 4.0 * lt_values(bh[a][b], self._b_Lhw[a][b])
        bv = bv + 2.0 * lt_values(bc, self._b_R2)
        B = _L(g, _unpad(g, bv, batch))
        av = lt_values(bc, self._b_Z)
        for a in range(d):
            av = av + 2.0 * lt_values(bgc[a], self._b_Lgw[a])
        A = _unpad(g, av, batch) + B
        return A, B, (bc, gc, bgc, bh)

    def _gamma_inv(self, c: np.ndarray) -> np.ndarray:
        A = self._A(c)[0]
        return c - _high(self.grid, A, self.N)

    def _gamma(self, us: np.ndarray) -> np.ndarray:
        g = self.grid
        c = us.copy()
        scale = np.maximum(_norms(g, us), 1e-300)
        res = np.inf
        for _ in range(self.tol.max_iter):
            nxt = us + _high(g, self._A(c)[0], self.N)
            res = float(np.max(_norms(g, nxt - c) / scale))
            c = nxt
            if res <= self.tol.ftol * 1e-2:
                return c
        if res <= self.tol.ftol:
            return c
        raise IterationError("Gamma Picard iteration did not converge", res)

    def _theta_part(self, us: np.ndarray) -> np.ndarray:
        """L([e^w - 1] < Lap u)."""
        g = self.grid
        batch = us.shape[: us.ndim - g.d]
        return _L(g, _unpad(g, lt_values(self._b_em1, Blocks(g, _lap(g, us), True)), batch))

    def _theta(self, us: np.ndarray) -> np.ndarray:
        return us - self._theta_part(us)

    def _theta_inv(self, un: np.ndarray) -> np.ndarray:
        g = self.grid
        x = un.copy()
        scale = np.maximum(_norms(g, un), 1e-300)
        res = np.inf
        for _ in range(self.tol.max_iter):
            nxt = un + self._theta_part(x)
            res = float(np.max(_norms(g, nxt - x) / scale))
            x = nxt
            if res <= self.tol.ftol * 1e-2:
                return x
        if res <= self.tol.ftol:
            return x
        raise IterationError("Theta^-1 Neumann iteration did not converge", res)

    # paracontrolled evaluation of T -------------------------------------------
    def _G(self, c: np.ndarray, parts=None) -> tuple[np.ndarray, np.ndarray]:
        """Return (G(c), u_sharp)."""
        g = self.grid
        d = g.d
        batch = c.shape[: c.ndim - d]
        A, B, (bc, gc, bgc, bh) = parts if parts is not None else self._A(c)
        N = self.N
        A_low = _low(g, A, N)
        A_high = A - A_low
        us = c - A_high
        out = A - _lap(g, A_low)
        # [c <, 1 - Lap] Z = Lap c < Z + 2 grad c < grad Z
        v = lt_values(Blocks(g, _lap(g, c), True), self._b_Z)
        for a in range(d):
            v = v + 2.0 * lt_values(bgc[a], self._b_gZ[a])
        # c > Y and (P_{>N} A) o Y
        v = v + lt_values(self._b_Y, bc) + res_values(Blocks(g, A_high, True), self._b_Y)
        # 2 c |> R2 + 4 grad c |> R1, with |> = > + o
        v = v + 2.0 * (lt_values(self._b_R2, bc) + res_values(bc, self._b_R2))
        for a in range(d):
            v = v + 4.0 * (lt_values(self._b_R1[a], bgc[a]) + res_values(bgc[a], self._b_R1[a]))
        # sum_b F_b o d_b w with
        # F_b = 2 d_b c < Z + 4 sum_a d_a d_b c < L d_a w + 2 c < d_b Z + 4 sum_a d_a c < L d_a d_b w
        # which collects the bracket term and both commutators before subtracting c R2 and grad c . R1
        cpad = bc.total()
        sub = 2.0 * cpad * self._b_R2.total()
        for b in range(d):
            fv = 2.0 * lt_values(bgc[b], self._b_Z) + 2.0 * lt_values(bc, self._b_gZ[b])
            for a in range(d):
                fv = fv + 4.0 * lt_values(bh[a][b], self._b_Lgw[a])
                fv = fv + 4.0 * lt_values(bgc[a], self._b_Lhw[a][b])
            Fb = _unpad(g, fv, batch)
            v = v + res_values(Blocks(g, Fb, True), self._b_gw[b])
            sub = sub + 4.0 * bgc[b].total() * self._b_R1[b].total()
        v = v - sub
        # 2 grad (B - P_{<=N} A) o grad w
        gq = _grad(g, B - A_low)
        for a in range(d):
            v = v + 2.0 * res_values(Blocks(g, gq[a], True), self._b_gw[a])
        return out + _unpad(g, v, batch), us

    def _interior(self, c: np.ndarray) -> np.ndarray:
        """Lap u_s + Y o u_s + 2 grad w o grad u_s + G(c) = T c."""
        g = self.grid
        batch = c.shape[: c.ndim - g.d]
        G, us = self._G(c)
        v = res_values(self._b_Y, Blocks(g, us, True))
        for a, x in enumerate(_grad(g, us)):
            v = v + 2.0 * res_values(self._b_gw[a], Blocks(g, x, True))
        return _lap(g, us) + _unpad(g, v, batch) + G

    def _T_direct(self, c: np.ndarray) -> np.ndarray:
        """Lap c + 2 grad w . grad c + Y c with plain dealiased products."""
        g = self.grid
        vals = self._Y_pad * to_padded(g, c, True)
        for a, x in enumerate(_grad(g, c)):
            vals = vals + 2.0 * self._gw_pad[a] * to_padded(g, x, True)
        return _lap(g, c) + from_padded(g, vals)

    def _T_adjoint(self, c: np.ndarray) -> np.ndarray:
        g = self.grid
        cp = to_padded(g, c, True)
        out = _lap(g, c) + from_padded(g, self._Y_pad * cp)
        for a in range(g.d):
            out = out - 2.0 * TWO_PI * 1j * g.k[a] * from_padded(g, self._gw_pad[a] * cp)
        return out

    # operator actions -----------------------------------------------------------
    def _H_physical(self, u: np.ndarray) -> np.ndarray:
        c = self._E_inv(u)
        return self._E(self._interior(c)) - self.K * u

    def _H_sharp(self, us: np.ndarray) -> np.ndarray:
        c = self._gamma(us)
        return self._gamma_inv(self._interior(c) - self.K * c)

    def _natural_remainder(self, us: np.ndarray) -> np.ndarray:
        """H Lambda u_n - Lap u_n expressed through u_s = Theta^-1 u_n."""
        g = self.grid
        batch = us.shape[: us.ndim - g.d]
        c = self._gamma(us)
        G, us2 = self._G(c)
        blap = Blocks(g, _lap(g, us), True)
        em1 = self._b_em1
        part = lt_values(em1, blap)
        v = lt_values(blap, em1) + res_values(em1, blap)
        inner = res_values(self._b_Y, Blocks(g, us, True))
        for a, x in enumerate(_grad(g, us)):
            inner = inner + 2.0 * res_values(self._b_gw[a], Blocks(g, x, True))
        r = _unpad(g, v, batch) + _L(g, _unpad(g, part, batch))
        r = r + self._E(_unpad(g, inner, batch) + G) - self.K * self._E(c)
        return r

    def _H_natural(self, un: np.ndarray) -> np.ndarray:
        us = self._theta_inv(un)
        return self._lambda_inv(_lap(self.grid, un) + self._natural_remainder(us))

    def _lambda(self, un: np.ndarray) -> np.ndarray:
        return self._E(self._gamma(self._theta_inv(un)))

    def _lambda_inv(self, u: np.ndarray) -> np.ndarray:
        return self._theta(self._gamma_inv(self._E_inv(u)))

    def real_linear(self, fn: Callable[[np.ndarray], np.ndarray], coef: np.ndarray) -> np.ndarray:
        """Apply a real-linear map to complex coefficients through its real and imaginary parts.

        The internal maps run on Hermitian coefficient arrays (real fields) with
        half-spectrum transforms; a general complex field is split first.
        """
        ref = np.conj(_reflect(coef, self.grid.d))
        if np.array_equal(coef, ref):
            return fn(coef)
        parts = fn(np.stack([0.5 * (coef + ref), -0.5j * (coef - ref)]))
        return parts[0] + 1j * parts[1]

    def apply(self, coef: np.ndarray, gauge: str = "physical") -> np.ndarray:
        """Action of H (conjugated into the given gauge) on coefficient arrays."""
        return self.real_linear(lambda c: self._apply(c, gauge), coef)

    def _apply(self, coef: np.ndarray, gauge: str) -> np.ndarray:
        if gauge == "physical":
            return self._H_physical(coef)
        if gauge == "flat":
            return self._interior(coef) - self.K * coef
        if gauge == "sharp":
            return self._H_sharp(coef)
        if gauge == "natural":
            return self._H_natural(coef)
        raise ValueError(f"unknown gauge {gauge!r}")

    def convert(self, coef: np.ndarray, src: str, dst: str) -> np.ndarray:
        """Move coefficients along the chain physical <-> flat <-> sharp <-> natural."""
        if src == dst:
            return coef
        return self.real_linear(lambda c: self._convert(c, src, dst), coef)

    def _convert(self, coef: np.ndarray, src: str, dst: str) -> np.ndarray:
        i, j = GAUGES.index(src), GAUGES.index(dst)
        x = coef
        while i < j:
            x = (self._E_inv, self._gamma_inv, self._theta)[i](x)
            i += 1
        while i > j:
            x = (self._E, self._gamma, self._theta_inv)[i - 1](x)
            i -= 1
        return x

    # contraction estimates ----------------------------------------------------
    def theta_contraction(self, seed: int = 0) -> float:
        """L^2 operator norm of u -> L([e^w - 1] < Lap u) by power iteration."""
        g = self.grid
        if not np.any(self.expw_minus_one.coef):
            return 0.0
        rng = np.random.default_rng(seed)
        x = Field.random(g, rng).coef
        x /= np.linalg.norm(x)
        est = 0.0
        for _ in range(self.tol.power_iter):
            y = self._theta_part(x)
            z = _lap(g, _lt_adjoint(g, self._b_em1, _L(g, y)))
            nz = np.linalg.norm(z)
            if nz == 0:
                return 0.0
            new = float(np.sqrt(nz))
            x = z / nz
            if abs(new - est) <= 1e-6 * new:
                est = new
                break
            est = new
        return est

    def gamma_contraction(self, seed: int = 0) -> float:
        """Spectral radius of c -> P_{>N} A(c), measured in H^1 by power iteration."""
        g = self.grid
        rng = np.random.default_rng(seed)
        x = Field.random(g, rng).coef
        weight = np.sqrt(g.bessel_symbol)
        x /= np.linalg.norm(weight * x)
        ratios = []
        for _ in range(self.tol.power_iter):
            y = _high(g, self._A(x)[0], self.N)
            ny = np.linalg.norm(weight * y)
            if ny == 0:
                return 0.0
            ratios.append(ny)
            x = y / ny
            if len(ratios) > 4 and abs(ratios[-1] - ratios[-2]) <= 1e-4 * ratios[-1]:
                break
        return float(ratios[-1])

    # assembly and spectrum ------------------------------------------------------
    @cached_property
    def basis(self) -> RealBasis:
        return RealBasis(self.grid)

    def assemble(self, method: str = "flat", batch: int = 32) -> np.ndarray:
        """Matrix of H in the real Fourier basis.

        method="formula" pushes every basis vector through the paracontrolled
        evaluation; method="flat" forms E T E^-1 - K from multiplication
        matrices, which is the same operator and far cheaper.
        """
        rb = self.basis
        D = rb.dim
        if method == "formula":
            out = np.empty((D, D))
            for s in range(0, D, batch):
                cols = np.eye(D, min(batch, D - s), -s).T
                res = rb.to_coords(self._H_physical(rb.from_coords(cols)))
                out[:, s : s + cols.shape[0]] = res.real.T
            return out
        if method != "flat":
            raise ValueError(f"unknown assembly method {method!r}")
        kv = rb.kvec
        E = self.E_matrix
        T = rb.multiplication_matrix(self.Y)
        for a in range(self.grid.d):
            Ma = rb.multiplication_matrix(Field(self.grid, TWO_PI * 1j * self.grid.k[a] * self.WM.coef, True))
            T += 2.0 * Ma * (TWO_PI * 1j * kv[:, a])[None, :]
        T[np.diag_indices(D)] += -(TWO_PI**2) * np.sum(kv**2, axis=1)
        T = np.ascontiguousarray(rb.fourier_matrix_to_real(T).real)
        ET = E @ T
        H = sla.cho_solve(self._E_cho, ET.T).T
        H[np.diag_indices(D)] -= self.K
        return H

    @cached_property
    def E_matrix(self) -> np.ndarray:
        """Real-basis matrix of multiplication by e^w."""
        rb = self.basis
        return np.ascontiguousarray(rb.fourier_matrix_to_real(rb.multiplication_matrix(self.expw)).real)

    @cached_property
    def _E_cho(self):
        return sla.cho_factor(self.E_matrix)

    def gauge_eigenvectors(self, gauge: str, batch: int = 128) -> np.ndarray:
        """Eigenvectors of -H carried into a gauge, as real-basis columns (cached)."""
        if gauge not in GAUGES:
            raise ValueError(f"unknown gauge {gauge!r}")
        cache = self.__dict__.setdefault("_gauge_vecs", {})
        if gauge in cache:
            self.cache_hits += 1
            return cache[gauge]
        fac = self.factorization()
        if gauge == "physical":
            out = fac.evecs
        elif gauge == "flat":
            out = sla.cho_solve(self._E_cho, fac.evecs)
        else:
            step = self._gamma_inv if gauge == "sharp" else self._theta
            prev = self.gauge_eigenvectors("flat" if gauge == "sharp" else "sharp", batch)
            rb = self.basis
            out = np.empty_like(prev)
            for s in range(0, prev.shape[1], batch):
                cols = prev[:, s : s + batch].T.astype(complex)
                out[:, s : s + batch] = rb.to_coords(step(rb.from_coords(cols))).real.T
        cache[gauge] = out
        return out

    def factorization(self, method: str = "flat") -> Factorization:
        if self._factorization is not None:
            self.cache_hits += 1
            return self._factorization
        self._factorization = _factor(self.assemble(method))
        return self._factorization

    def set_factorization(self, fac: Factorization) -> None:
        self._factorization = fac
        self.__dict__.pop("_gauge_vecs", None)

    def manifest(self) -> str:
        e = self.ench
        rows = [
            ("seed", e.seed),
            ("delta", repr(e.delta)),
            ("M", self.M),
            ("N", self.N),
            ("K", repr(self.K)),
            ("grid", f"{self.grid.d}x{self.grid.n}"),
            ("ftol", repr(self.tol.ftol)),
            ("max_iter", self.tol.max_iter),
            ("contraction", repr(self.tol.contraction)),
            ("enhancement_hash", e.content_hash()),
        ]
        buf = io.StringIO()
        for k, v in rows:
            buf.write(f"{k} = {v}\n")
        return buf.getvalue()


# ---------------------------------------------------------------------------
# public operations


def _factor(H: np.ndarray) -> Factorization:
    scale = max(np.max(np.abs(H)), 1e-300)
    asym = float(np.max(np.abs(H - H.T)) / scale)
    evals, evecs = sla.eigh(-0.5 * (H + H.T))
    return Factorization(evals, evecs, H, asym)


def _top_eigenvalue(ctx: OperatorContext, dense_limit: int) -> tuple[float, Factorization | None]:
    """Largest eigenvalue of the symmetric part of the unshifted H.

    Small grids use the dense factorization, which is returned for reuse;
    larger ones run Lanczos on the symmetric part built from E T E^-1.
    """
    rb = ctx.basis
    if rb.dim <= dense_limit:
        fac = _factor(ctx.assemble("flat"))
        return -float(fac.evals[0]), fac

    def sym(x):
        c = rb.from_coords(x.astype(complex))
        y = ctx._E(ctx._T_direct(ctx._E_inv(c)))
        z = ctx._E_inv(ctx._T_adjoint(ctx._E(c)))
        return rb.to_coords(0.5 * (y + z)).real

    op = spla.LinearOperator((rb.dim, rb.dim), matvec=sym, dtype=float)
    try:
        val = spla.eigsh(op, k=1, which="LA", tol=1e-10, v0=np.ones(rb.dim))[0]
    except spla.ArpackNoConvergence as exc:
        raise IterationError("Lanczos did not converge for the top eigenvalue", float("nan")) from exc
    return float(val[0]), None


def select_cutoffs(ench: Enhancement, tol: Tolerances | None = None, M: int | None = None, N: int | None = None) -> tuple[int, int, list]:
    """Smallest M with a contracting Theta map, then the smallest contracting N."""
    tol = tol or Tolerances()
    top = ench.grid.max_block
    diagnostics = []
    if M is None:
        for m in range(0, top + 1):
            q = OperatorContext(ench, m, top, 0.0, tol).theta_contraction()
            diagnostics.append(("M", m, q))
            if q <= tol.contraction:
                M = m
                break
        else:
            raise CalibrationError(f"no admissible M below the grid resolution: {diagnostics}")
    if N is None:
        for n_ in range(0, top + 1):
            q = OperatorContext(ench, M, n_, 0.0, tol).gamma_contraction()
            diagnostics.append(("N", n_, q))
            if q <= tol.contraction:
                N = n_
                break
        else:
            raise CalibrationError(f"no admissible N below the grid resolution: {diagnostics}")
    return M, N, diagnostics


def calibrate(ench: Enhancement, tol: Tolerances | None = None, M: int | None = None, N: int | None = None, dense_limit: int = 4096) -> OperatorContext:
    """Choose the smallest contracting cutoffs M and N and the shift K."""
    tol = tol or Tolerances()
    M, N, diagnostics = select_cutoffs(ench, tol, M, N)
    ctx = OperatorContext(ench, M, N, 0.0, tol)
    lam, fac = _top_eigenvalue(ctx, dense_limit)
    K = max(0.0, 1.0 + lam)
    ctx.K = K
    if fac is not None:
        H = fac.matrix
        H[np.diag_indices_from(H)] -= K
        ctx.set_factorization(Factorization(fac.evals + K, fac.evecs, H, fac.asymmetry))
    ctx.diagnostics = diagnostics + [("lambda_top", None, lam)]
    return ctx


def B_map(u_flat: Field, ctx: OperatorContext) -> Field:
    _same_grid(u_flat, ctx)
    return _wrap(u_flat, ctx.real_linear(lambda c: ctx._A(c)[1], u_flat.coef))


def G_map(u_flat: Field, ctx: OperatorContext) -> Field:
    _same_grid(u_flat, ctx)
    return _wrap(u_flat, ctx.real_linear(lambda c: ctx._G(c)[0], u_flat.coef))


def flat_operator_direct(u_flat: Field, ctx: OperatorContext) -> Field:
    """T u = Lap u + 2 grad w . grad u + Y u evaluated with plain products."""
    _same_grid(u_flat, ctx)
    return _wrap(u_flat, ctx.real_linear(ctx._T_direct, u_flat.coef))


def _same_grid(f: Field, ctx: OperatorContext) -> None:
    if f.grid != ctx.grid:
        raise GridMismatchError(f"field grid {f.grid} differs from context grid {ctx.grid}")


def _wrap(like: Field, coef: np.ndarray) -> Field:
    if like.real:
        coef = _symmetrize(coef, like.grid.d)
    return Field(like.grid, coef, like.real)


def gauge_convert(u: WaveState, to: str, ctx: OperatorContext) -> WaveState:
    if to not in GAUGES:
        raise ValueError(f"unknown gauge {to!r}")
    _same_grid(u.field, ctx)
    coef = ctx.convert(u.field.coef, u.gauge, to)
    return WaveState(_wrap(u.field, coef), u.time, to, u.defocusing)


def H_apply(u: WaveState, ctx: OperatorContext) -> Field:
    _same_grid(u.field, ctx)
    return _wrap(u.field, ctx.apply(u.field.coef, u.gauge))


def H_delta_apply(u: Field, xi_delta: Field, c: float) -> Field:
    """(Lap + xi_delta - c) u with a dealiased product."""
    u._check(xi_delta)
    coef = u.grid.laplacian_symbol * u.coef + from_padded(u.grid, to_padded(u.grid, xi_delta.coef) * to_padded(u.grid, u.coef)) - c * u.coef
    return _wrap(u if xi_delta.real else Field(u.grid, u.coef, False), coef)


def spectrum(ctx: OperatorContext, count: int) -> list[tuple[float, Field, float]]:
    """Lowest eigenpairs of -H with residuals against the assembled operator."""
    fac = ctx.factorization()
    rb = ctx.basis
    out = []
    for i in range(min(count, rb.dim)):
        v = fac.evecs[:, i]
        r = float(np.linalg.norm(-fac.matrix @ v - fac.evals[i] * v))
        out.append((float(fac.evals[i]), Field(ctx.grid, rb.from_coords(v.astype(complex)), True), r))
    return out


def func_calc(F: Callable[[np.ndarray], np.ndarray], u: Field, ctx: OperatorContext, gauge: str = "physical") -> Field:
    """F(-H) u through the eigen-expansion; sharp and natural gauges by conjugation."""
    _same_grid(u, ctx)
    fac = ctx.factorization()
    rb = ctx.basis
    coef = ctx.convert(u.coef, gauge, "physical")
    vals = np.asarray(F(fac.evals))
    if not np.all(np.isfinite(vals)):
        raise ValueError("F is undefined at an eigenvalue of -H")
    y = vals * _cmatmul(rb.to_coords(coef), fac.evecs)
    if gauge in ctx.__dict__.get("_gauge_vecs", {}) or gauge == "physical":
        out = rb.from_coords(_cmatmul(y, ctx.gauge_eigenvectors(gauge).T))
    else:
        out = ctx.convert(rb.from_coords(_cmatmul(y, fac.evecs.T)), "physical", gauge)
    real = u.real and np.isrealobj(vals)
    return _wrap(Field(u.grid, u.coef, real), out)


def regularizer(lam: float) -> Callable[[np.ndarray], np.ndarray]:
    """F(x) = (1 + lam sqrt(x))^-1."""
    return lambda x: 1.0 / (1.0 + lam * np.sqrt(x))


def trivial_context(grid: Grid, tol: Tolerances | None = None) -> OperatorContext:
    """Context of the zero enhancement: H = Lap - 1."""
    return calibrate(Enhancement.zero(grid), tol)
