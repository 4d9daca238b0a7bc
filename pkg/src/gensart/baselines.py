"""Reference reconstructions: filtered back-projection, bulk Tikhonov (CG and
primal-dual Huber) and the small-matrix symmetric-cycle equivalence oracle."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ConfigurationError
from .geometry import VolumeGrid, adjoint, project
from .linalg import pcg

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Stacked operators
# --------------------------------------------------------------------------

def project_all(f, grid: VolumeGrid, geoms) -> np.ndarray:
    """Sinogram stack ``(n_views, *det_shape)``."""
    return np.stack([project(f, grid, g) for g in geoms])


def adjoint_all(sino, grid: VolumeGrid, geoms) -> np.ndarray:
    out = np.zeros(grid.shape)
    for p, g in zip(sino, geoms):
        out += adjoint(p, grid, g)
    return out


def _measures(geoms):
    return np.stack([g.pixel_measure() for g in geoms])


# --------------------------------------------------------------------------
# FBP
# --------------------------------------------------------------------------

def _ramp_kernel(n, d):
    """Band-limited ramp filter in space (Kak & Slaney), length ``2n - 1``."""
    k = np.arange(-(n - 1), n)
    h = np.zeros(k.shape)
    h[k == 0] = 1.0 / (4 * d * d)
    odd = k % 2 == 1
    h[odd] = -1.0 / (np.pi * k[odd] * d) ** 2
    return h


def filter_projections(sino, pitch, filter_name="ram-lak"):
    """Apply the ramp (or Shepp-Logan apodized ramp) filter along the detector axis."""
    sino = np.atleast_2d(np.asarray(sino, dtype=float))
    m = sino.shape[-1]
    size = 1 << int(math.ceil(math.log2(4 * m)))
    h = _ramp_kernel(m, pitch)
    hf = np.zeros(size)
    hf[: m] = h[m - 1:]
    hf[size - m + 1:] = h[: m - 1]
    H = np.real(np.fft.fft(hf)) * pitch
    if filter_name == "shepp-logan":
        freq = np.fft.fftfreq(size)
        H = H * np.sinc(freq)
    elif filter_name != "ram-lak":
        raise ConfigurationError(f"unknown FBP filter {filter_name!r}")
    pad = np.zeros(sino.shape[:-1] + (size,))
    pad[..., :m] = sino
    out = np.real(np.fft.ifft(np.fft.fft(pad, axis=-1) * H, axis=-1))
    return out[..., :m]


def check_uniform_angles(geoms, tol=1e-6):
    angles = np.array([g.angle for g in geoms])
    if len(angles) < 2:
        raise ConfigurationError("FBP needs at least two views")
    steps = np.diff(angles)
    if np.any(steps <= 0) or np.ptp(steps) > tol * max(abs(steps[0]), 1.0):
        raise ConfigurationError("FBP requires uniformly spaced, increasing angles")
    span = steps[0] * len(angles)
    if abs(span - math.pi) > 1e-3 and abs(span - 2 * math.pi) > 1e-3:
        raise ConfigurationError("FBP angles must cover [0, pi) or [0, 2 pi) uniformly")
    return angles, span


def fbp_reconstruct(sino, grid: VolumeGrid, geoms, filter_name: str = "ram-lak") -> np.ndarray:
    """Filtered back-projection for 2D parallel beams with uniform angles.

    The filtered projections are smeared back by linear interpolation at
    ``x . e_perp`` and summed with weight ``pi / n_views``.
    """
    if grid.ndim != 2 or any((not g.is_parallel) or g.ndim != 2 for g in geoms):
        raise ConfigurationError("FBP supports 2D parallel geometries only")
    angles, span = check_uniform_angles(geoms)
    sino = np.asarray(sino, dtype=float)
    pitch = geoms[0].pitch[0]
    q = filter_projections(sino, pitch, filter_name)
    x, y = grid.coords()
    out = np.zeros(grid.shape)
    for qa, g, a in zip(q, geoms, angles):
        s = -np.sin(a) * x + np.cos(a) * y
        out += np.interp(s, g.det_coords(0), qa, left=0.0, right=0.0)
    # a full turn measures every line twice, so pi / N is right for both spans
    out *= math.pi / len(angles)
    return grid.restrict(out)


# --------------------------------------------------------------------------
# Tikhonov via CG
# --------------------------------------------------------------------------

def tikhonov_l2(sino, grid: VolumeGrid, geoms, alpha: float, rtol=1e-6, maxiter=500, f0=None):
    """Minimize ``sum_j ||P_j f - g_j||^2 + alpha ||f||^2`` by CG on the normal equation.

    With ``f0`` the penalty is ``alpha ||f - f0||^2``.
    """
    if not alpha > 0:
        raise ConfigurationError("alpha must be positive")
    sino = np.asarray(sino, dtype=float)
    rhs = adjoint_all(sino, grid, geoms)
    if f0 is not None:
        rhs = rhs + alpha * grid.restrict(f0)
    mask = grid.mask

    def normal(f):
        return np.where(mask, adjoint_all(project_all(f, grid, geoms), grid, geoms) + alpha * f, f)

    f, info = pcg(normal, np.where(mask, rhs, 0.0), rtol=rtol, maxiter=maxiter, raise_on_fail=False)
    if not info.converged:
        warnings.warn(f"tikhonov_l2: CG reached {info.iterations} iterations "
                      f"with relative residual {info.residual:.2e}; returning best iterate")
    log.info("tikhonov_l2: %d CG iterations, residual %.2e", info.iterations, info.residual)
    return np.where(mask, f, 0.0)


# --------------------------------------------------------------------------
# Huber Tikhonov via primal-dual
# --------------------------------------------------------------------------

@dataclass
class PDResult:
    f: np.ndarray
    iterations: int
    gap: float
    primal: float
    history: list = field(default_factory=list)


def _huber(r, nu):
    a = np.abs(r)
    return np.where(a <= nu, a * a, 2 * nu * a - nu * nu)


def operator_norm(grid, geoms, n_iter=30, seed=0):
    """Estimate ``||P_tot||`` by power iteration on ``P* P``."""
    rng = np.random.default_rng(seed)
    x = grid.restrict(rng.standard_normal(grid.shape))
    x /= grid.norm(x)
    lam = 0.0
    for _ in range(n_iter):
        y = adjoint_all(project_all(x, grid, geoms), grid, geoms)
        lam = grid.norm(y)
        if lam == 0:
            return 0.0
        x = y / lam
    return math.sqrt(lam)


def tikhonov_huber_pd(sino, grid: VolumeGrid, geoms, alpha: float, nu: float,
                      gap_tol=0.01, maxiter=500, op_norm=None, seed=0) -> PDResult:
    """Minimize ``sum_j sum_i mu_i H_nu(P_j f - g_j)_i + alpha ||f||^2``.

    Accelerated Chambolle-Pock iteration (the penalty is strongly convex)
    with ``tau sigma ||P||^2 <= 1``; stops when the duality gap falls below
    ``gap_tol`` times the primal value or after ``maxiter`` iterations.  Each
    iteration costs one projection and one adjoint per view.
    """
    if not alpha > 0 or not nu > 0:
        raise ConfigurationError("alpha and nu must be positive")
    g = np.asarray(sino, dtype=float)
    mu = _measures(geoms)
    L = operator_norm(grid, geoms, seed=seed) if op_norm is None else float(op_norm)
    if L == 0:
        return PDResult(grid.zeros(), 0, 0.0, 0.0)
    tau = sigma = 1.0 / L
    gam = 2 * alpha
    x = grid.zeros()
    kx = np.zeros_like(g)
    kxbar = kx.copy()
    y = np.zeros_like(g)
    hist = []
    gap = primal = float("inf")
    it = 0
    for it in range(1, maxiter + 1):
        v = y + sigma * kxbar
        y = np.clip((v - sigma * g) / (1 + sigma / 2), -2 * nu, 2 * nu)
        kty = adjoint_all(y, grid, geoms)
        x_new = grid.restrict((x - tau * kty) / (1 + 2 * alpha * tau))
        theta = 1.0 / math.sqrt(1 + 2 * gam * tau)
        tau *= theta
        sigma /= theta
        kx_new = project_all(x_new, grid, geoms)
        kxbar = kx_new + theta * (kx_new - kx)
        x, kx = x_new, kx_new
        # duality gap at (x, y); K^T y is the one used in this update
        primal = float(np.sum(mu * _huber(kx - g, nu))) + alpha * grid.inner(x, x)
        dual = -float(np.sum(mu * (y * g + y * y / 4))) - grid.inner(kty, kty) / (4 * alpha)
        gap = primal - dual
        hist.append(gap)
        if gap <= gap_tol * abs(primal):
            break
    log.info("tikhonov_huber_pd: %d iterations, relative gap %.3g", it, gap / max(primal, 1e-300))
    return PDResult(x, it, gap, primal, hist)


def huber_objective(f, sino, grid, geoms, alpha, nu):
    kx = project_all(f, grid, geoms)
    return float(np.sum(_measures(geoms) * _huber(kx - sino, nu))) + alpha * grid.inner(f, f)


# --------------------------------------------------------------------------
# Symmetric-cycle oracle
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BlockLinearSystem:
    """Dense blocks ``A_j`` (``m_j x n``), data ``g_j``, weight ``alpha`` and start ``f0``."""

    blocks: tuple
    data: tuple
    alpha: float
    f0: np.ndarray

    def __post_init__(self):
        n = self.f0.shape[0]
        if any(A.shape[1] != n for A in self.blocks):
            raise ConfigurationError("all blocks need the same column count")
        if len(self.blocks) != len(self.data):
            raise ConfigurationError("one data vector per block")
        if not self.alpha > 0:
            raise ConfigurationError("alpha must be positive")

    @classmethod
    def random(cls, rng, n=30, m=(8, 8, 8), alpha=5.0):
        blocks = tuple(rng.standard_normal((mj, n)) for mj in m)
        data = tuple(rng.standard_normal(mj) for mj in m)
        return cls(blocks, data, alpha, rng.standard_normal(n))


def _sym_sqrt(M):
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def _bulk_factors(sys: BlockLinearSystem):
    """Block diagonal ``D`` and block unit lower triangular ``T`` of the bulk weight."""
    A = sys.blocks
    a = sys.alpha
    sizes = [B.shape[0] for B in A]
    offs = np.concatenate([[0], np.cumsum(sizes)])
    M = offs[-1]
    D = np.zeros((M, M))
    T = np.eye(M)
    for i, Ai in enumerate(A):
        si = slice(offs[i], offs[i + 1])
        D[si, si] = np.eye(sizes[i]) + Ai @ Ai.T / (2 * a)
        for j in range(i):
            sj = slice(offs[j], offs[j + 1])
            T[si, sj] = -Ai @ A[j].T / a
    return D, T


def bulk_weight(sys: BlockLinearSystem) -> np.ndarray:
    """Weight ``W = D^{1/2} T^{-1}`` of the bulk functional reproduced by a symmetric cycle.

    ``D`` is block diagonal with blocks ``I + A_j A_j^T / (2 alpha)`` and ``T``
    is block unit lower triangular with ``T_ij = -A_i A_j^T / alpha`` for
    ``j < i`` (forward sweep first).
    """
    D, T = _bulk_factors(sys)
    return _sym_sqrt(D) @ solve_triangular(T, np.eye(T.shape[0]), lower=True, unit_diagonal=True)


def symmetric_cycle_oracle(sys: BlockLinearSystem):
    """Compare one symmetric Kaczmarz cycle with the weighted bulk Tikhonov minimizer.

    Returns ``(f_cycle, f_bulk, relative_gap)``.
    """
    from .kaczmarz import DenseBlock, IterationPlan, run
    from .schemes import PenaltySpec

    views = [DenseBlock(A, g) for A, g in zip(sys.blocks, sys.data)]
    plan = IterationPlan(len(views), PenaltySpec("l2", sys.alpha), cycle="symmetric",
                         ordering="sequential")
    f_cycle = run(plan, views, sys.f0).f
    A = np.vstack(sys.blocks)
    g = np.concatenate(sys.data)
    D, T = _bulk_factors(sys)
    # W (A f - g) with W = D^{1/2} T^{-1}, applied by a triangular solve
    Dh = _sym_sqrt(D)
    WA = Dh @ solve_triangular(T, A, lower=True, unit_diagonal=True)
    Wr = Dh @ solve_triangular(T, g - A @ sys.f0, lower=True, unit_diagonal=True)
    # least squares form of ||W(A f - g)||^2 + (alpha/2) ||f - f0||^2
    n = A.shape[1]
    K = np.vstack([WA, math.sqrt(0.5 * sys.alpha) * np.eye(n)])
    rhs = np.concatenate([Wr, np.zeros(n)])
    f_bulk = sys.f0 + np.linalg.lstsq(K, rhs, rcond=None)[0]
    gap = float(np.linalg.norm(f_cycle - f_bulk) / max(np.linalg.norm(f_bulk), 1e-300))
    return f_cycle, f_bulk, gap
