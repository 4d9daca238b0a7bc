"""Synthetic phantoms, forward data simulation and image-quality metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .geometry import VolumeGrid, project

#: Supersampling factor of the data-generating projector.  Reconstructions
#: use the plain projector, so the forward model is never identical to the
#: one inverted.
SIM_SUPERSAMPLE = 2

# Modified Shepp-Logan table: value, semi-axes (a, b), centre (x, y), angle [deg]
_SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
)


def _ellipse_mask(X, Y, cx, cy, a, b, phi):
    c, s = np.cos(phi), np.sin(phi)
    xr = (X - cx) * c + (Y - cy) * s
    yr = -(X - cx) * s + (Y - cy) * c
    return (xr / a) ** 2 + (yr / b) ** 2 <= 1.0


def _fits(grid: VolumeGrid, centre, radius, margin=0.95):
    """True if a ball of ``radius`` around ``centre`` lies inside the domain."""
    centre = np.asarray(centre, dtype=float)
    R = grid.support_radius
    if grid.omega == "ball":
        return np.linalg.norm(centre) + radius <= margin * R
    if grid.omega == "cylinder":
        ok = np.linalg.norm(centre[:2]) + radius <= margin * R
        return ok and abs(centre[2]) + radius <= margin * grid.half_extent[2]
    return bool(np.all(np.abs(centre) + radius <= margin * grid.half_extent))


def random_ellipses(grid: VolumeGrid, count=10, seed=0, value_range=(0.2, 1.0),
                    size_range=(0.08, 0.35)):
    """Random ellipses painted into a 2D domain.

    Each ellipse (including its full extent) lies inside the domain; later
    ellipses overwrite earlier ones, so every nonzero value lies in
    ``value_range``.  Semi-axes are fractions ``size_range`` of the domain
    radius.

    Returns
    -------
    ndarray
        Image of shape ``grid.shape``, zero outside the ellipses.
    """
    if grid.ndim != 2:
        raise ConfigurationError("random ellipses need a 2D grid")
    lo, hi = value_range
    if not lo <= hi:
        raise ConfigurationError("value_range needs lo <= hi")
    rng = np.random.default_rng(seed)
    X, Y = np.meshgrid(grid.axis_coords(0), grid.axis_coords(1), indexing="ij")
    R = float(np.min(grid.half_extent)) if grid.omega == "box" else grid.support_radius
    f = np.zeros(grid.shape)
    placed = 0
    tries = 0
    while placed < count:
        tries += 1
        if tries > 1000 * max(count, 1):
            raise ConfigurationError("could not place the requested ellipses")
        a, b = rng.uniform(*size_range, size=2) * R
        centre = rng.uniform(-R, R, size=2)
        if not _fits(grid, centre, max(a, b)):
            continue
        phi = rng.uniform(0, np.pi)
        f[_ellipse_mask(X, Y, centre[0], centre[1], a, b, phi)] = rng.uniform(lo, hi)
        placed += 1
    return f * grid.mask


def shepp_logan_like(grid: VolumeGrid):
    """Modified Shepp-Logan head scaled to the inscribed disk of the grid."""
    if grid.ndim != 2:
        raise ConfigurationError("Shepp-Logan needs a 2D grid")
    X, Y = np.meshgrid(grid.axis_coords(0), grid.axis_coords(1), indexing="ij")
    R = 0.95 * float(np.min(grid.half_extent))
    if grid.omega != "box":
        R = 0.95 * grid.support_radius
    f = np.zeros(grid.shape)
    for v, a, b, cx, cy, deg in _SHEPP_LOGAN:
        # table uses y as the long axis
        f[_ellipse_mask(X, Y, cx * R, cy * R, a * R, b * R, np.deg2rad(deg))] += v
    return np.maximum(f, 0.0) * grid.mask


def balls_3d(grid: VolumeGrid, count=8, seed=0, value_range=(0.2, 1.0),
             size_range=(0.08, 0.3)):
    """Random balls painted into a 3D domain (same conventions as :func:`random_ellipses`)."""
    if grid.ndim != 3:
        raise ConfigurationError("balls_3d needs a 3D grid")
    rng = np.random.default_rng(seed)
    X, Y, Z = grid.coords()
    R = float(np.min(grid.half_extent))
    f = np.zeros(grid.shape)
    placed = 0
    tries = 0
    while placed < count:
        tries += 1
        if tries > 1000 * max(count, 1):
            raise ConfigurationError("could not place the requested balls")
        r = rng.uniform(*size_range) * R
        c = rng.uniform(-R, R, size=3)
        if not _fits(grid, c, r):
            continue
        m = (X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2 <= r * r
        f[m] = rng.uniform(*value_range)
        placed += 1
    return f * grid.mask


@dataclass(frozen=True)
class PhantomSpec:
    """Phantom recipe.

    Parameters
    ----------
    kind : {'random_ellipses', 'shepp_logan', 'balls_3d'}
    count : int
        Number of ellipses or balls.
    seed : int
    value_range : (float, float)
        Range of the painted values (``>= 0``).
    """

    kind: str = "random_ellipses"
    count: int = 10
    seed: int = 0
    value_range: tuple = (0.2, 1.0)

    def __post_init__(self):
        if self.kind not in ("random_ellipses", "shepp_logan", "balls_3d"):
            raise ConfigurationError(f"unknown phantom kind {self.kind!r}")
        if self.count < 0:
            raise ConfigurationError("phantom count must be nonnegative")
        lo, hi = self.value_range
        if not 0 <= lo <= hi:
            raise ConfigurationError("phantom values need 0 <= min <= max")


def make_phantom(spec: PhantomSpec, grid: VolumeGrid) -> np.ndarray:
    """Build the phantom described by ``spec`` on ``grid``."""
    if spec.kind == "random_ellipses":
        return random_ellipses(grid, spec.count, spec.seed, spec.value_range)
    if spec.kind == "shepp_logan":
        return shepp_logan_like(grid)
    return balls_3d(grid, spec.count, spec.seed, spec.value_range)


# --------------------------------------------------------------------------
# Data simulation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSpec:
    """Corruptions applied to clean data.

    Parameters
    ----------
    gaussian_rel : float
        Relative norm ``||noise|| / ||clean||`` of additive Gaussian noise.
    dead_pixel_frac : float
        Fraction of detector pixels (the same in every view) overwritten with
        ``dead_value`` after noise is added.
    dead_value : float
    poisson_exposure : float, optional
        If given, replace the data by Poisson counts with mean
        ``exposure * clean`` before Gaussian noise.
    seed : int
        Seed of all random corruptions.
    """

    gaussian_rel: float = 0.0
    dead_pixel_frac: float = 0.0
    dead_value: float = 0.0
    poisson_exposure: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.gaussian_rel < 0:
            raise ConfigurationError("Gaussian noise level must be nonnegative")
        if not 0.0 <= self.dead_pixel_frac <= 1.0:
            raise ConfigurationError("dead pixel fraction must lie in [0, 1]")
        if self.poisson_exposure is not None and not self.poisson_exposure > 0:
            raise ConfigurationError("Poisson exposure must be positive")


@dataclass
class SimResult:
    data: list
    clean: list
    dead_pixels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    supersample: int = SIM_SUPERSAMPLE

    def stacked(self):
        return np.stack(self.data)


def simulate_data(f, grid: VolumeGrid, geoms, formation="identity", noise=None,
                  intensity=1.0, xpct_model=None, polyct_model=None):
    """Simulate measured data of ``f`` for each geometry.

    Parameters
    ----------
    formation : {'identity', 'beer_lambert', 'xpct', 'polyct'}
        ``identity`` returns projections, ``beer_lambert`` the intensities
        ``intensity * exp(-P f)``, ``xpct`` applies ``xpct_model.forward`` to
        the projections and ``polyct`` evaluates ``polyct_model`` on the
        supersampled projector.
    noise : NoiseSpec, optional

    Returns
    -------
    SimResult
    """
    noise = noise or NoiseSpec()
    rng = np.random.default_rng(noise.seed)
    clean = []
    for g in geoms:
        if formation == "polyct":
            if polyct_model is None:
                raise ConfigurationError("polyct formation needs a model")
            clean.append(polyct_model.forward_view(f, grid, g, supersample=SIM_SUPERSAMPLE))
            continue
        p = project(f, grid, g, supersample=SIM_SUPERSAMPLE)
        if formation == "identity":
            clean.append(p)
        elif formation == "beer_lambert":
            clean.append(intensity * np.exp(-p))
        elif formation == "xpct":
            if xpct_model is None:
                raise ConfigurationError("xpct formation needs a model")
            clean.append(xpct_model.forward(p))
        else:
            raise ConfigurationError(f"unknown image formation {formation!r}")
    clean = [np.asarray(c, dtype=float) for c in clean]
    data = [c.copy() for c in clean]
    if noise.poisson_exposure is not None:
        t = noise.poisson_exposure
        if any(np.any(c < 0) for c in clean):
            raise ConfigurationError("Poisson resampling needs nonnegative data")
        data = [rng.poisson(t * c).astype(float) for c in clean]
    if noise.gaussian_rel > 0:
        n = [rng.standard_normal(c.shape) for c in clean]
        scale = noise.gaussian_rel * _stack_norm(clean) / _stack_norm(n)
        data = [d + scale * e for d, e in zip(data, n)]
    m = clean[0].size
    k = int(np.floor(noise.dead_pixel_frac * m))
    dead = np.sort(rng.choice(m, size=k, replace=False)) if k else np.zeros(0, dtype=int)
    for d in data:
        d.reshape(-1)[dead] = noise.dead_value
    return SimResult(data, clean, dead)


def _stack_norm(arrs):
    return float(np.sqrt(sum(np.sum(a * a) for a in arrs)))


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------

def psnr(f, ref, mask=None, peak=None):
    """Peak signal-to-noise ratio in dB over ``mask``.

    The peak defaults to ``max(ref) - min(ref)`` over the mask; identical
    images give ``inf``.
    """
    f = np.asarray(f, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if f.shape != ref.shape:
        raise ConfigurationError("images differ in shape")
    if mask is None:
        mask = np.ones(f.shape, dtype=bool)
    r = ref[mask]
    if peak is None:
        peak = float(r.max() - r.min()) if r.size else 0.0
    mse = float(np.mean((f[mask] - r) ** 2))
    if mse == 0.0:
        return float("inf")
    if peak <= 0:
        raise ConfigurationError("PSNR needs a positive peak")
    return 10.0 * np.log10(peak ** 2 / mse)


def relative_error(f, ref, mask=None):
    """``||f - ref|| / ||ref||`` over ``mask``."""
    f = np.asarray(f, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if mask is not None:
        f, ref = f[mask], ref[mask]
    den = float(np.linalg.norm(ref))
    num = float(np.linalg.norm(f - ref))
    if den == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return num / den


def masked_correlation(f, ref, mask=None):
    """Pearson correlation of ``f`` and ``ref`` over ``mask``."""
    f = np.asarray(f, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if mask is not None:
        f, ref = f[mask], ref[mask]
    a = f.ravel() - f.mean()
    b = ref.ravel() - ref.mean()
    den = float(np.linalg.norm(a) * np.linalg.norm(b))
    return float(a @ b / den) if den > 0 else 0.0
