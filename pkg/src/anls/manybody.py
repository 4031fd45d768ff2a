"""N-particle Schrödinger dynamics with the regularised Anderson Hamiltonian.

Wave functions live on the N-fold product of the collocation grid: psi has
shape (n^d,) * N and is normalised with the quadrature weight w = n^-d per
particle, so that ||psi||^2 = w^N sum |psi|^2.  The single-particle operator
is the collocation matrix

    h = F^-1 (-4 pi^2 |k|^2) F + diag(xi_delta) - c_delta

on all n^d grid points (Nyquist modes included), which is real symmetric.
Its eigendecomposition drives every linear flow: the N-body equation

    i d/dt Psi = -1/2 sum_k h_{x_k} Psi + (1/N) sum_{j<k} V(x_j - x_k) Psi

is split into diagonal phases in the h-eigenbasis and pointwise interaction
phases on the grid.

Density matrices are kept either as kernels rho(x, y) on grid^n x grid^n or
in factored form rho = L R^*, where the columns of L and R are grid functions
on n particles (a pure state has L = R = psi).  The matrix of rho in the
orthonormal grid basis is kernel * w^n.
"""

from __future__ import annotations

import math
import time as _time
from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np
import scipy.linalg as sla

from .noise import Enhancement, MollifierSpec, mollify, renorm_constants, sample_white_noise
from .spectral import TWO_PI, Field, Grid

MAX_ENTRIES = 2**25
KERNEL_ENTRIES = 2**24
SIDES = ("I", "J", "commutator")


class MemoryGuardError(MemoryError):
    """The requested N-body array would exceed the configured size limit."""


def check_feasible(N: int, grid: Grid, limit: int = MAX_ENTRIES) -> None:
    entries = grid.size**N
    if N < 1:
        raise ValueError(f"particle count must be >= 1, got {N}")
    if entries > limit:
        raise MemoryGuardError(f"N={N} on {grid.n}^{grid.d} needs {entries} entries (limit {limit})")


class ManyBodyContext:
    """Factorised single-particle operator h and its shifted form for norms.

    ``shift`` is the smallest K >= 0 with -h + K >= 1; it is zero whenever the
    renormalisation constant already makes -h coercive.
    """

    def __init__(self, grid: Grid, xi_values: np.ndarray, c: float, delta: float):
        self.grid = grid
        self.delta = float(delta)
        self.c = float(c)
        self.xi_values = np.asarray(xi_values, dtype=float).reshape(grid.shape)
        P = grid.size
        lap = np.fft.ifftn(-(TWO_PI**2) * _full_k2(grid)[..., None] * _dft_columns(grid), axes=grid.axes())
        h = lap.reshape(P, P).real
        h = 0.5 * (h + h.T)
        h[np.diag_indices(P)] += self.xi_values.ravel() - self.c
        self.h = h
        self.mu, self.evecs = sla.eigh(h)
        self.shift = max(0.0, 1.0 + float(self.mu.max()))

    @classmethod
    def from_enhancement(cls, ench: Enhancement) -> "ManyBodyContext":
        return cls(ench.grid, ench.xi_delta.values(), ench.c, ench.delta)

    @classmethod
    def from_seed(cls, seed: int, grid: Grid, spec: MollifierSpec) -> "ManyBodyContext":
        if spec.delta <= 0:
            raise ValueError("many-body runs need delta > 0")
        xi = mollify(sample_white_noise(seed, grid), spec)
        rc = renorm_constants(spec, grid)
        return cls(grid, xi.values(), rc.c, spec.delta)

    @classmethod
    def free(cls, grid: Grid) -> "ManyBodyContext":
        return cls(grid, np.zeros(grid.shape), 0.0, 0.0)

    @property
    def P(self) -> int:
        return self.grid.size

    @property
    def weight(self) -> float:
        return 1.0 / self.grid.size

    def propagator(self, t: float) -> np.ndarray:
        """Single-particle e^{(it/2) h}."""
        return (self.evecs * np.exp(0.5j * t * self.mu)) @ self.evecs.T

    def power(self, alpha: float) -> np.ndarray:
        """(-h + shift)^alpha."""
        return (self.evecs * (self.shift - self.mu) ** alpha) @ self.evecs.T

    def interaction_matrix(self, V: Field) -> np.ndarray:
        """D[i, j] = V(x_i - x_j) on the grid, symmetrised."""
        _check_grid(self.grid, V.grid)
        v = V.values().real.ravel()
        pts = np.indices(self.grid.shape).reshape(self.grid.d, -1)
        diff = (pts[:, :, None] - pts[:, None, :]) % self.grid.n
        D = v[np.ravel_multi_index(tuple(diff), self.grid.shape)]
        return 0.5 * (D + D.T)


def _full_k2(grid: Grid) -> np.ndarray:
    f = np.fft.fftfreq(grid.n, 1.0 / grid.n)
    mesh = np.meshgrid(*([f] * grid.d), indexing="ij")
    return sum(m**2 for m in mesh)


def _dft_columns(grid: Grid) -> np.ndarray:
    """FFT of every grid delta, stacked on a trailing axis."""
    eye = np.eye(grid.size).reshape(grid.shape + (grid.size,))
    return np.fft.fftn(eye, axes=grid.axes())


def _check_grid(a: Grid, b: Grid) -> None:
    if a != b:
        raise ValueError(f"grid mismatch: {a} vs {b}")


def _axis_apply(arr: np.ndarray, M: np.ndarray, axis: int) -> np.ndarray:
    """Apply a P x P matrix along one particle axis of an array of shape (P,)*N (+ trailing).

    A real M acting on complex data runs as a real GEMM on the interleaved
    (re, im) view, half the work of a promoted complex product.
    """
    P = M.shape[0]
    shape = arr.shape
    a = int(np.prod(shape[:axis], dtype=np.int64))
    b = int(np.prod(shape[axis + 1 :], dtype=np.int64))
    if np.isrealobj(M) and np.iscomplexobj(arr):
        arr = np.ascontiguousarray(arr, dtype=complex)
        flat = arr.view(float).reshape(a, P, 2 * b)
        if a == 1:
            out = M @ flat[0]
        else:
            out = np.matmul(M, flat)
        return np.ascontiguousarray(out).view(complex).reshape(shape)
    if b == 1:
        return (arr.reshape(a, P) @ M.T).reshape(shape)
    return np.matmul(M, arr.reshape(a, P, b)).reshape(shape)


# ---------------------------------------------------------------------------
# States and density matrices


@dataclass
class ManyBodyState:
    N: int
    grid: Grid
    psi: np.ndarray
    time: float = 0.0
    delta: float = 0.0

    def __post_init__(self):
        self.psi = np.asarray(self.psi, dtype=complex)
        want = (self.grid.size,) * self.N
        if self.psi.shape != want:
            self.psi = self.psi.reshape(want)

    @classmethod
    def product(cls, u: Field | np.ndarray, N: int, grid: Grid | None = None, delta: float = 0.0) -> "ManyBodyState":
        """The tensor power u^{(x)N} of grid values (normalised)."""
        grid = u.grid if isinstance(u, Field) else grid
        vals = u.values().ravel() if isinstance(u, Field) else np.asarray(u, dtype=complex).ravel()
        check_feasible(N, grid)
        vals = vals / math.sqrt(np.sum(np.abs(vals) ** 2) / grid.size)
        psi = vals
        for _ in range(N - 1):
            psi = np.multiply.outer(psi, vals)
        return cls(N, grid, psi, 0.0, delta)

    @property
    def weight(self) -> float:
        return (1.0 / self.grid.size) ** self.N

    def norm(self) -> float:
        return math.sqrt(self.weight * float(np.vdot(self.psi, self.psi).real))

    def symmetry_defect(self, pairs: Sequence[tuple[int, int]] | None = None) -> float:
        """max ||psi - psi o sigma|| over transpositions (all pairs by default)."""
        if pairs is None:
            pairs = [(i, j) for i in range(self.N) for j in range(i + 1, self.N)]
        out = 0.0
        for i, j in pairs:
            diff = self.psi - np.swapaxes(self.psi, i, j)
            out = max(out, math.sqrt(self.weight * float(np.vdot(diff, diff).real)))
        return out


@dataclass
class DensityMatrix:
    """n-particle operator as a kernel or in factored form L R^*."""

    n: int
    grid: Grid
    kernel: np.ndarray | None = None
    left: np.ndarray | None = None
    right: np.ndarray | None = None

    def __post_init__(self):
        dim = self.grid.size**self.n
        if self.kernel is not None:
            self.kernel = np.asarray(self.kernel, dtype=complex).reshape(dim, dim)
        elif self.left is not None:
            self.left = np.asarray(self.left, dtype=complex).reshape(dim, -1)
            self.right = self.left if self.right is None else np.asarray(self.right, dtype=complex).reshape(dim, -1)
        else:
            raise ValueError("need a kernel or factors")

    @classmethod
    def pure(cls, psi: np.ndarray, n: int, grid: Grid) -> "DensityMatrix":
        psi = np.asarray(psi, dtype=complex).reshape(-1, 1)
        return cls(n, grid, left=psi)

    @classmethod
    def mixture(cls, weights: Sequence[float], psis: Sequence[np.ndarray], n: int, grid: Grid) -> "DensityMatrix":
        cols = [math.sqrt(w) * np.asarray(p, dtype=complex).ravel() for w, p in zip(weights, psis)]
        return cls(n, grid, left=np.stack(cols, axis=1))

    @property
    def factored(self) -> bool:
        return self.kernel is None

    @property
    def is_pure_form(self) -> bool:
        return self.factored and self.left is self.right

    @property
    def weight(self) -> float:
        return (1.0 / self.grid.size) ** self.n

    def kernel_array(self) -> np.ndarray:
        if self.kernel is not None:
            return self.kernel
        return self.left @ self.right.conj().T

    def matrix(self) -> np.ndarray:
        """Matrix in the orthonormal grid basis."""
        return self.kernel_array() * self.weight

    def trace(self) -> complex:
        if self.kernel is not None:
            return complex(np.trace(self.kernel)) * self.weight
        return complex(np.sum(self.left * self.right.conj())) * self.weight

    def hermitian_defect(self) -> float:
        K = self.kernel_array()
        return float(np.max(np.abs(K - K.conj().T)))

    def min_eigenvalue(self) -> float:
        return float(sla.eigvalsh(0.5 * (self.matrix() + self.matrix().conj().T))[0])

    def __sub__(self, other: "DensityMatrix") -> "DensityMatrix":
        _check_same(self, other)
        if self.factored and other.factored:
            return DensityMatrix(
                self.n, self.grid, left=np.hstack([self.left, -other.left]), right=np.hstack([self.right, other.right])
            )
        return DensityMatrix(self.n, self.grid, kernel=self.kernel_array() - other.kernel_array())

    def __add__(self, other: "DensityMatrix") -> "DensityMatrix":
        _check_same(self, other)
        if self.factored and other.factored:
            return DensityMatrix(
                self.n, self.grid, left=np.hstack([self.left, other.left]), right=np.hstack([self.right, other.right])
            )
        return DensityMatrix(self.n, self.grid, kernel=self.kernel_array() + other.kernel_array())

    def scaled(self, s: complex) -> "DensityMatrix":
        if self.factored:
            return DensityMatrix(self.n, self.grid, left=s * self.left, right=self.right)
        return DensityMatrix(self.n, self.grid, kernel=s * self.kernel)

    def check(self, tol_herm: float = 1e-12, tol_trace: float = 1e-10, tol_psd: float = 1e-10) -> list[str]:
        """Violated density-matrix invariants (empty when all hold)."""
        bad = []
        if self.hermitian_defect() > tol_herm * max(1.0, float(np.max(np.abs(self.kernel_array())))):
            bad.append("hermitian")
        if abs(self.trace() - 1.0) > tol_trace:
            bad.append("trace")
        if self.min_eigenvalue() < -tol_psd:
            bad.append("psd")
        return bad


def _check_same(a: DensityMatrix, b: DensityMatrix) -> None:
    _check_grid(a.grid, b.grid)
    if a.n != b.n:
        raise ValueError(f"particle counts differ: {a.n} vs {b.n}")


def _as_density(state: ManyBodyState | DensityMatrix) -> DensityMatrix:
    if isinstance(state, DensityMatrix):
        return state
    return DensityMatrix.pure(state.psi, state.N, state.grid)


def partial_trace(state: ManyBodyState | DensityMatrix, n: int) -> DensityMatrix:
    """Marginal on the first n particles.

    Small results are returned as kernels; a factored input whose kernel would
    exceed KERNEL_ENTRIES stays factored with rank multiplied by P^(m-n).
    """
    rho = _as_density(state)
    m = rho.n
    if n > m or n < 1:
        raise ValueError(f"cannot trace {m} particles down to {n}")
    if n == m:
        return rho
    P = rho.grid.size
    head, tail = P**n, P ** (m - n)
    w = (1.0 / P) ** (m - n)
    if rho.factored:
        L = rho.left.reshape(head, tail * rho.left.shape[1])
        R = rho.right.reshape(head, tail * rho.right.shape[1])
        if head * head <= KERNEL_ENTRIES:
            return DensityMatrix(n, rho.grid, kernel=w * (L @ R.conj().T))
        s = math.sqrt(w)
        return DensityMatrix(n, rho.grid, left=s * L, right=s * R)
    K = rho.kernel.reshape(head, tail, head, tail)
    return DensityMatrix(n, rho.grid, kernel=w * np.einsum("azbz->ab", K))


# ---------------------------------------------------------------------------
# Norms


def _nuclear_lowrank(L: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Singular values of L R^* through thin QR factors."""
    if L.shape[1] >= L.shape[0]:
        return sla.svdvals(L @ R.conj().T)
    Q1, R1 = sla.qr(L, mode="economic")
    Q2, R2 = sla.qr(R, mode="economic")
    return sla.svdvals(R1 @ R2.conj().T)


def singular_values(rho: DensityMatrix) -> np.ndarray:
    if rho.factored:
        s = math.sqrt(rho.weight)
        return _nuclear_lowrank(s * rho.left, s * rho.right)
    A = rho.matrix()
    if np.allclose(A, A.conj().T, rtol=0, atol=1e-14 * max(1.0, np.abs(A).max())):
        return np.abs(sla.eigvalsh(0.5 * (A + A.conj().T)))
    if np.allclose(A, -A.conj().T, rtol=0, atol=1e-14 * max(1.0, np.abs(A).max())):
        return np.abs(sla.eigvalsh(0.5j * (A - A.conj().T)))
    return sla.svdvals(A)


def schatten(rho: DensityMatrix, p: float) -> float:
    """(Tr |A|^p)^(1/p); p = inf gives the operator norm."""
    if p < 1:
        raise ValueError(f"Schatten index must be >= 1, got {p}")
    s = singular_values(rho)
    if np.isinf(p):
        return float(s.max(initial=0.0))
    return float(np.sum(s**p) ** (1.0 / p))


def trace_norm(rho: DensityMatrix) -> float:
    return schatten(rho, 1)


def w_norm(rho: DensityMatrix, alpha: float, ctx: ManyBodyContext, p: float = 1) -> float:
    """n ||(-h_{x1} + K)^{alpha/2} rho (-h_{x1} + K)^{alpha/2}||_{L^p}."""
    _check_grid(rho.grid, ctx.grid)
    if rho.hermitian_defect() > 1e-10 * max(1.0, float(np.max(np.abs(rho.kernel_array())))):
        raise ValueError("w_norm needs a Hermitian operator")
    B = ctx.power(alpha / 2.0)
    P = ctx.P
    if rho.factored:
        L = _axis_apply(rho.left.reshape((P,) * rho.n + (-1,)), B, 0)
        R = _axis_apply(rho.right.reshape((P,) * rho.n + (-1,)), B, 0)
        out = DensityMatrix(rho.n, rho.grid, left=L, right=R)
    else:
        K = rho.kernel.reshape((P,) * (2 * rho.n))
        K = _axis_apply(K, B, 0)
        K = _axis_apply(K, B.conj(), rho.n)
        out = DensityMatrix(rho.n, rho.grid, kernel=K)
    return rho.n * schatten(out, p)


# ---------------------------------------------------------------------------
# Flows


def unitary_conjugate(rho: DensityMatrix, t: float, ctx: ManyBodyContext) -> DensityMatrix:
    """e^{(it/2) sum h_x} rho e^{-(it/2) sum h_y}."""
    _check_grid(rho.grid, ctx.grid)
    if t == 0:
        return rho
    U = ctx.propagator(t)
    P, n = ctx.P, rho.n
    if rho.factored:
        L = rho.left.reshape((P,) * n + (-1,))
        R = rho.right.reshape((P,) * n + (-1,))
        for a in range(n):
            L = _axis_apply(L, U, a)
            if not rho.is_pure_form:
                R = _axis_apply(R, U, a)
        return DensityMatrix(n, rho.grid, left=L, right=L if rho.is_pure_form else R)
    K = rho.kernel.reshape((P,) * (2 * n))
    Uc = U.conj()
    for a in range(n):
        K = _axis_apply(K, U, a)
        K = _axis_apply(K, Uc, n + a)
    return DensityMatrix(n, rho.grid, kernel=K)


def interaction_field(N: int, D: np.ndarray) -> np.ndarray:
    """(1/N) sum_{j<k} V(x_j - x_k) over the N-fold grid."""
    P = D.shape[0]
    out = np.zeros((P,) * N)
    for j in range(N):
        for k in range(j + 1, N):
            shape = [1] * N
            shape[j] = P
            shape[k] = P
            out += D.reshape(shape) if j < k else D.T.reshape(shape)
    return out / N


@dataclass
class ManyBodyTrajectory:
    times: list[float] = dc_field(default_factory=list)
    states: list[ManyBodyState] = dc_field(default_factory=list)
    mass: list[float] = dc_field(default_factory=list)
    energy: list[float] = dc_field(default_factory=list)
    marginal_energy: list[float] = dc_field(default_factory=list)
    marginals: list[DensityMatrix] = dc_field(default_factory=list)
    final: ManyBodyState | None = None


def _eig_phases(ctx: ManyBodyContext, N: int, s: float) -> np.ndarray:
    one = np.exp(0.5j * s * ctx.mu)
    out = one
    for _ in range(N - 1):
        out = np.multiply.outer(out, one)
    return out


def _lin_symbol(ctx: ManyBodyContext, N: int) -> np.ndarray:
    """sum_k -mu_k / 2 over the N-fold eigen-index grid."""
    P = ctx.P
    out = np.zeros((P,) * N)
    for k in range(N):
        shape = [1] * N
        shape[k] = P
        out += (-0.5 * ctx.mu).reshape(shape)
    return out


def _to_eig(psi: np.ndarray, ctx: ManyBodyContext) -> np.ndarray:
    for a in range(psi.ndim):
        psi = _axis_apply(psi, ctx.evecs.T, a)
    return psi


def _to_grid(y: np.ndarray, ctx: ManyBodyContext) -> np.ndarray:
    for a in range(y.ndim):
        y = _axis_apply(y, ctx.evecs, a)
    return y


def _eig_marginal(y: np.ndarray, n: int, ctx: ManyBodyContext) -> DensityMatrix:
    """n-particle marginal from h-eigen coordinates.

    The partial trace is invariant under the basis change on the traced
    particles, so only the kept n axes are rotated back to the grid.
    """
    P, N = ctx.P, y.ndim
    Y = y.reshape(P**n, -1)
    K = (Y @ Y.conj().T) * (1.0 / P) ** (N - n)
    K = K.reshape((P,) * (2 * n))
    for a in range(n):
        K = _axis_apply(K, ctx.evecs, a)
        K = _axis_apply(K, ctx.evecs, n + a)
    return DensityMatrix(n, ctx.grid, kernel=K)


def evolve_manybody(
    psi0: ManyBodyState,
    T: float,
    dt: float,
    ctx: ManyBodyContext,
    V: Field | None,
    observe_every: int = 1,
    keep_every: int = 0,
    marginal_n: int = 0,
    energies: bool = True,
    limit: int = MAX_ENTRIES,
) -> ManyBodyTrajectory:
    """Strang splitting: half linear phase, interaction phase, half linear phase.

    The state is carried in the h-eigenbasis, where the linear half-steps
    e^{i (dt/2)(1/2) sum h} are diagonal.  Observed steps record mass, the
    first-marginal energy (Psi, -h_{x1} Psi), the N-body energy when
    ``energies`` is set, and the n-particle marginal when ``marginal_n`` > 0.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if T < 0:
        raise ValueError(f"T must be >= 0, got {T}")
    _check_grid(psi0.grid, ctx.grid)
    N = psi0.N
    check_feasible(N, ctx.grid, limit)
    if marginal_n > N:
        raise ValueError(f"marginal on {marginal_n} particles of {N}")
    steps = int(round(T / dt))
    w = psi0.weight
    half = _eig_phases(ctx, N, 0.5 * dt)
    lin = _lin_symbol(ctx, N)
    first = (-ctx.mu).reshape((ctx.P,) + (1,) * (N - 1))
    if V is not None and N > 1:
        Wf = interaction_field(N, ctx.interaction_matrix(V))
        kick = np.exp(-1j * dt * Wf)
    else:
        Wf, kick = None, None
    traj = ManyBodyTrajectory()
    y = _to_eig(psi0.psi, ctx)

    def emit(k: int, y: np.ndarray):
        t = psi0.time + k * dt
        a2 = np.abs(y) ** 2
        traj.times.append(t)
        traj.mass.append(w * float(np.sum(a2)))
        traj.marginal_energy.append(w * float(np.sum(a2 * first)))
        keep = bool(keep_every) and k % keep_every == 0
        x = _to_grid(y, ctx) if keep or (energies and Wf is not None) else None
        if energies:
            e = float(np.sum(a2 * lin))
            if Wf is not None:
                e += float(np.sum(np.abs(x) ** 2 * Wf))
            traj.energy.append(w * e)
        if keep:
            traj.states.append(ManyBodyState(N, psi0.grid, x, t, psi0.delta))
        if marginal_n:
            traj.marginals.append(_eig_marginal(y, marginal_n, ctx))

    emit(0, y)
    for k in range(1, steps + 1):
        y = y * half
        if kick is not None:
            x = _to_grid(y, ctx) * kick
            y = _to_eig(x, ctx)
        y = y * half
        if k % observe_every == 0 or k == steps:
            emit(k, y)
    traj.final = ManyBodyState(N, psi0.grid, _to_grid(y, ctx), psi0.time + steps * dt, psi0.delta)
    return traj


def hartree_trajectory(u0: np.ndarray, T: float, dt: float, ctx: ManyBodyContext, V: Field | None) -> list[np.ndarray]:
    """Grid values of the mean-field solution i u_t = -h u / 2 + (V * |u|^2) u.

    Same Strang splitting and grid quadrature as the N-body solver, so V = 0
    reproduces the factorised linear flow exactly.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    u = np.asarray(u0, dtype=complex).ravel()
    u = u / math.sqrt(np.sum(np.abs(u) ** 2) * ctx.weight)
    D = ctx.interaction_matrix(V) * ctx.weight if V is not None else None
    half = np.exp(0.25j * dt * ctx.mu)
    y = ctx.evecs.T @ u
    out = [u]
    for _ in range(int(round(T / dt))):
        y = y * half
        if D is not None:
            x = ctx.evecs @ y
            x = x * np.exp(-1j * dt * (D @ np.abs(x) ** 2))
            y = ctx.evecs.T @ x
        y = y * half
        out.append(ctx.evecs @ y)
    return out


# ---------------------------------------------------------------------------
# Hierarchy operators


def _pair_profile(ctx: ManyBodyContext, V: Field, n1: int, ell: int) -> np.ndarray:
    """V(x_ell - x_{n1}) over the n1-fold grid (particles indexed from 1)."""
    D = ctx.interaction_matrix(V)
    P = ctx.P
    shape = [1] * n1
    shape[ell - 1] = P
    shape[n1 - 1] = P
    return np.broadcast_to(D.reshape(shape), (P,) * n1)


def collision_op(rho_np1: DensityMatrix, ell: int, V: Field, side: str, ctx: ManyBodyContext) -> DensityMatrix:
    """Tr_{n+1}(V_{ell,n+1} rho) ('I'), Tr_{n+1}(rho V_{ell,n+1}) ('J') or I - J."""
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}, got {side!r}")
    n = rho_np1.n - 1
    if n < 1 or not 1 <= ell <= n:
        raise IndexError(f"need 1 <= ell <= n with n >= 1, got ell={ell}, n={n}")
    _check_grid(rho_np1.grid, ctx.grid)
    P = ctx.P
    Vp = _pair_profile(ctx, V, n + 1, ell).reshape(P**n, P)
    w = 1.0 / P
    if rho_np1.factored:
        r = rho_np1.left.shape[1]
        L = rho_np1.left.reshape(P**n, P, r)
        R = rho_np1.right.reshape(P**n, P, -1)
        VL = (Vp[:, :, None] * L).reshape(P**n, -1)
        VR = (Vp[:, :, None] * R).reshape(P**n, -1)
        L, R = L.reshape(P**n, -1), R.reshape(P**n, -1)
        s = math.sqrt(w)
        if side == "I":
            return _maybe_kernel(n, rho_np1.grid, s * VL, s * R)
        if side == "J":
            return _maybe_kernel(n, rho_np1.grid, s * L, s * VR)
        return _maybe_kernel(n, rho_np1.grid, s * np.hstack([VL, -L]), s * np.hstack([R, VR]))
    K = rho_np1.kernel.reshape(P**n, P, P**n, P)
    diag = np.einsum("azbz->abz", K)
    I = w * np.einsum("abz,az->ab", diag, Vp) if side != "J" else None
    J = w * np.einsum("abz,bz->ab", diag, Vp) if side != "I" else None
    out = I if side == "I" else J if side == "J" else I - J
    return DensityMatrix(n, rho_np1.grid, kernel=out)


def _maybe_kernel(n: int, grid: Grid, L: np.ndarray, R: np.ndarray) -> DensityMatrix:
    if L.shape[0] ** 2 <= KERNEL_ENTRIES and L.shape[1] >= L.shape[0]:
        return DensityMatrix(n, grid, kernel=L @ R.conj().T)
    return DensityMatrix(n, grid, left=L, right=R)


def collision_sum(rho_np1: DensityMatrix, V: Field, ctx: ManyBodyContext) -> DensityMatrix:
    """sum_{ell <= n} Tr_{n+1}[V_{ell,n+1}, rho]."""
    n = rho_np1.n - 1
    out = collision_op(rho_np1, 1, V, "commutator", ctx)
    for ell in range(2, n + 1):
        out = out + collision_op(rho_np1, ell, V, "commutator", ctx)
    return out


def mean_field_commutator(rho1: DensityMatrix, V: Field, ctx: ManyBodyContext) -> DensityMatrix:
    """[int V(. - z) rho(z, z) dz, rho] for a one-particle kernel."""
    if rho1.n != 1:
        raise ValueError("mean-field commutator acts on one-particle operators")
    K = rho1.kernel_array()
    dens = np.diag(K).real
    phi = ctx.interaction_matrix(V) @ dens * ctx.weight
    return DensityMatrix(1, rho1.grid, kernel=phi[:, None] * K - K * phi[None, :])


def bbgky_residual(
    traj_n: Sequence[DensityMatrix],
    traj_np1: Sequence[DensityMatrix],
    ctx: ManyBodyContext,
    V: Field,
    dt: float,
    coupling: float = 1.0,
) -> np.ndarray:
    """Trace-norm residual of the mild hierarchy at every trajectory time.

    rho^n(t) - U_t rho^n(0) + i coupling sum_k int_0^t U_{t-s} Tr_{n+1}[V_{k,n+1}, rho^{n+1}(s)] ds,
    with the Duhamel integral by the trapezoidal rule on the trajectory's
    own step.  The factor -i comes from the Heisenberg form of the flow.
    """
    if len(traj_n) != len(traj_np1):
        raise ValueError("time grids are not aligned")
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    n = traj_n[0].n
    if any(r.n != n for r in traj_n) or any(r.n != n + 1 for r in traj_np1):
        raise ValueError("trajectories must hold n and n+1 particle marginals")
    U = ctx.propagator(dt)
    P = ctx.P

    def step(K: np.ndarray) -> np.ndarray:
        K = K.reshape((P,) * (2 * n))
        for a in range(n):
            K = _axis_apply(K, U, a)
            K = _axis_apply(K, U.conj(), n + a)
        return K.reshape(P**n, P**n)

    free = traj_n[0].kernel_array()
    C_prev = collision_sum(traj_np1[0], V, ctx).kernel_array()
    duh = np.zeros_like(free)
    out = [trace_norm(DensityMatrix(n, ctx.grid, kernel=traj_n[0].kernel_array() - free))]
    for k in range(1, len(traj_n)):
        C = collision_sum(traj_np1[k], V, ctx).kernel_array()
        free = step(free)
        duh = step(duh) + 0.5 * dt * (step(C_prev) + C)
        C_prev = C
        res = traj_n[k].kernel_array() - free + 1j * coupling * duh
        out.append(trace_norm(DensityMatrix(n, ctx.grid, kernel=res)))
    return np.array(out)


def tensorization_defect(u: np.ndarray, V: Field, ctx: ManyBodyContext) -> float:
    """max |[V * rho(z,z), rho] - Tr_2[V(. - x2), rho^{(x)2}]| for rho = Pi_u."""
    u = np.asarray(u, dtype=complex).ravel()
    u = u / math.sqrt(np.sum(np.abs(u) ** 2) * ctx.weight)
    rho1 = DensityMatrix.pure(u, 1, ctx.grid)
    rho2 = DensityMatrix.pure(np.multiply.outer(u, u), 2, ctx.grid)
    a = mean_field_commutator(rho1, V, ctx).kernel_array()
    b = collision_op(rho2, 1, V, "commutator", ctx).kernel_array()
    return float(np.max(np.abs(a - b)))


# ---------------------------------------------------------------------------
# Studies and diagnostics


@dataclass
class ConvergenceRow:
    N: int
    delta: float
    grid: int
    T: float
    sup_trace_distance: float
    runtime: float

    COLUMNS = ("N", "delta", "grid", "T", "sup_trace_distance", "runtime")

    def values(self) -> tuple:
        return tuple(getattr(self, c) for c in self.COLUMNS)


def mean_field_deviation(
    N: int, ctx: ManyBodyContext, u0: np.ndarray, V: Field | None, T: float, dt: float
) -> float:
    """sup_t ||rho^1_N(t) - Pi_{u(t)}||_tr for product data u0^{(x)N}."""
    psi0 = ManyBodyState.product(u0, N, ctx.grid, ctx.delta)
    traj = evolve_manybody(psi0, T, dt, ctx, V, observe_every=1, marginal_n=1, energies=False)
    us = hartree_trajectory(u0, T, dt, ctx, V)
    out = 0.0
    for rho, u in zip(traj.marginals, us):
        diff = rho - DensityMatrix.pure(u, 1, ctx.grid)
        out = max(out, trace_norm(DensityMatrix(1, ctx.grid, kernel=diff.kernel_array())))
    return out


def convergence_study(
    N_list: Sequence[int],
    contexts: Sequence[ManyBodyContext],
    u0: np.ndarray | Field,
    V: Field | None,
    T: float,
    dt: float = 5e-3,
) -> list[ConvergenceRow]:
    """Mean-field deviations over the (N, delta) product grid."""
    vals = u0.values().ravel() if isinstance(u0, Field) else np.asarray(u0).ravel()
    for ctx in contexts:
        for N in N_list:
            check_feasible(N, ctx.grid)
    rows = []
    for ctx in contexts:
        for N in N_list:
            t0 = _time.perf_counter()
            dev = mean_field_deviation(N, ctx, vals, V, T, dt)
            rows.append(ConvergenceRow(N, ctx.delta, ctx.grid.n, T, dev, _time.perf_counter() - t0))
    return rows


def first_marginal_energy(state: ManyBodyState, ctx: ManyBodyContext) -> float:
    """(Psi, -h_{x1} Psi)."""
    y = _axis_apply(state.psi, ctx.evecs.T, 0)
    a2 = np.sum(np.abs(y.reshape(ctx.P, -1)) ** 2, axis=1)
    return state.weight * float(np.sum(-ctx.mu * a2))


def operator_bound_ratio(state: ManyBodyState, ctx: ManyBodyContext, V: Field) -> float:
    """<V_{12}^2 Psi, Psi> / <(-h_{x1} + K) Psi, Psi>."""
    if state.N < 2:
        raise ValueError("need at least two particles")
    D = ctx.interaction_matrix(V)
    P = ctx.P
    shape = [P, P] + [1] * (state.N - 2)
    prof = D.reshape(shape)
    num = state.weight * float(np.sum(np.abs(state.psi) ** 2 * prof**2))
    den = first_marginal_energy(state, ctx) + ctx.shift * state.norm() ** 2
    return num / den


def hardy_kernel(grid: Grid, s: float) -> np.ndarray:
    """Grid values of a periodised |x|^{-2s}.

    Same recipe as the Bessel-type interaction: the multiplier
    (1 + 4 pi^2 |k|^2)^{-(d - 2s)/2} on the working modes, whose kernel behaves
    like a multiple of |x|^{-2s} near the origin.  The origin cell keeps the
    finite value of the truncated series.
    """
    if not 0 < s <= 1:
        raise ValueError(f"s must lie in (0, 1], got {s}")
    sym = grid.bessel_symbol ** (-(grid.d - 2 * s) / 2.0) * grid.active
    return Field(grid, sym.astype(complex), True).values()


def hardy_ratio(f: Field, ctx, s: float) -> float:
    """sup_x int |f(y)|^2 |x - y|^{-2s} dy divided by (f, -H f).

    ``ctx`` may be an Anderson OperatorContext or a ManyBodyContext, whose
    form is taken with the coercivity shift.
    """
    if f.norm() == 0:
        return 0.0
    grid = f.grid
    kern = hardy_kernel(grid, s)
    dens = np.abs(f.values()) ** 2
    conv = np.fft.ifftn(np.fft.fftn(kern) * np.fft.fftn(dens)).real / grid.size
    return float(conv.max()) / form_value(f, ctx)


def form_value(f: Field, ctx) -> float:
    """(f, -H f) for either kind of context."""
    if isinstance(ctx, ManyBodyContext):
        y = ctx.evecs.T @ f.values().ravel()
        return ctx.weight * float(np.sum((ctx.shift - ctx.mu) * np.abs(y) ** 2))
    fac = ctx.factorization()
    y = ctx.basis.to_coords(f.coef) @ fac.evecs
    return float(np.sum(fac.evals * np.abs(y) ** 2))
