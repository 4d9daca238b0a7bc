"""Volume grids, acquisition geometries and the discrete projector triple.

The projector is ray driven: every detector pixel owns one ray, sampled at
points ``t_k = k * dt`` (``dt = h / 2``) along the ray, and the volume is
interpolated (bi/trilinear, zero outside the grid) at each sample.  For
parallel beams ``t`` is measured from the plane through the origin that is
orthogonal to the beam, so the sample lattice is shared by all rays of a view;
for divergent beams it is measured from the source.

Three operators are exposed per view:

* :func:`project` evaluates the line integrals,
* :func:`adjoint` is the exact transpose with respect to the inner products
  ``h**d * sum(f * g)`` on the volume and ``sum(mu * p * q)`` on the detector,
  where ``mu`` is the pixel measure of the detector parameterization,
* :func:`back_project` is the adjoint with the ray density divided out, i.e.
  the smearing of detector values along rays.

Volume arrays are plain ``numpy`` arrays whose axis ``i`` corresponds to the
spatial coordinate ``i`` (x, y[, z]).  Grids are centred at the origin.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import ConfigurationError

# Detector pixels whose unit projection falls below this fraction of the
# maximum are treated as lying outside the projection domain.
ZERO_THICKNESS = 1e-12

OMEGA_KINDS = ("box", "ball", "cylinder", "custom")

call_counts: Counter = Counter()


def reset_counters():
    """Reset the global projector call counters."""
    call_counts.clear()


def get_counters() -> dict:
    """Return a snapshot of the projector call counters."""
    return {k: call_counts.get(k, 0) for k in ("project", "adjoint", "back_project")}


# --------------------------------------------------------------------------
# Volume grid
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class VolumeGrid:
    """Cartesian voxel grid centred at the origin with a support mask Omega.

    Parameters
    ----------
    shape : tuple of int
        Voxel counts per axis (2 or 3 entries).
    voxel_size : float
        Isotropic voxel edge length ``h``.
    omega : {'box', 'ball', 'cylinder', 'custom'}
        Shape of the support domain.  ``cylinder`` has its axis along z and
        coincides with ``ball`` for 2D grids.
    radius : float, optional
        Radius of ball/cylinder supports; defaults to the inscribed radius.
    custom_mask : ndarray of bool, optional
        Mask used when ``omega == 'custom'``.
    """

    shape: tuple
    voxel_size: float = 1.0
    omega: str = "box"
    radius: float | None = None
    custom_mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        shape = tuple(int(n) for n in self.shape)
        object.__setattr__(self, "shape", shape)
        if len(shape) not in (2, 3) or min(shape) < 1:
            raise ConfigurationError(f"grid shape must have 2 or 3 positive entries, got {shape}")
        if not self.voxel_size > 0:
            raise ConfigurationError("voxel_size must be positive")
        if self.omega not in OMEGA_KINDS:
            raise ConfigurationError(f"unknown omega kind {self.omega!r}")
        if self.omega in ("ball", "cylinder"):
            r = self.radius
            if r is None:
                ext = self.half_extent
                r = float(min(ext[:2])) if self.omega == "cylinder" else float(min(ext))
                object.__setattr__(self, "radius", r)
            if not r > 0:
                raise ConfigurationError("radius must be positive")
        if self.omega == "custom":
            if self.custom_mask is None or tuple(self.custom_mask.shape) != shape:
                raise ConfigurationError("custom omega requires a mask of the grid shape")
        object.__setattr__(self, "_mask", self._build_mask())

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def half_extent(self) -> np.ndarray:
        return 0.5 * np.asarray(self.shape, dtype=float) * self.voxel_size

    @property
    def cell_volume(self) -> float:
        return self.voxel_size ** self.ndim

    def axis_coords(self, axis: int) -> np.ndarray:
        n = self.shape[axis]
        return (np.arange(n) - 0.5 * (n - 1)) * self.voxel_size

    def coords(self) -> list[np.ndarray]:
        """Voxel-centre coordinates as a list of broadcastable arrays."""
        return np.meshgrid(*[self.axis_coords(a) for a in range(self.ndim)],
                           indexing="ij", sparse=True)

    def _build_mask(self) -> np.ndarray:
        if self.omega == "box":
            return np.ones(self.shape, dtype=bool)
        if self.omega == "custom":
            return np.asarray(self.custom_mask, dtype=bool).copy()
        c = self.coords()
        r2 = c[0] ** 2 + c[1] ** 2
        if self.omega == "ball" and self.ndim == 3:
            r2 = r2 + c[2] ** 2
        mask = r2 <= self.radius ** 2 * (1 + 1e-12)
        return np.broadcast_to(mask, self.shape).copy()

    @property
    def mask(self) -> np.ndarray:
        return self._mask

    @property
    def support_radius(self) -> float:
        """Radius of a ball (xy-disc for 3D parallel) containing Omega."""
        if self.omega == "ball":
            return float(self.radius)
        ext = self.half_extent
        if self.omega == "cylinder":
            return float(self.radius)
        return float(np.sqrt(np.sum(ext[:2] ** 2)))

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)

    def ones(self) -> np.ndarray:
        return self.mask.astype(float)

    def restrict(self, f) -> np.ndarray:
        """Return ``f`` with values outside Omega set to zero."""
        f = np.asarray(f, dtype=float)
        if f.shape != self.shape:
            raise ConfigurationError(f"volume shape {f.shape} does not match grid {self.shape}")
        return np.where(self.mask, f, 0.0)

    def inner(self, f, g) -> float:
        return float(self.cell_volume * np.sum(f * g))

    def norm(self, f) -> float:
        return math.sqrt(max(self.inner(f, f), 0.0))


# --------------------------------------------------------------------------
# Geometry
# --------------------------------------------------------------------------

def _rot2(v, a):
    c, s = math.cos(a), math.sin(a)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


@dataclass(frozen=True)
class Geometry:
    """One tomographic view.

    Parameters
    ----------
    mode : {'parallel', 'divergent'}
    ndim : int
        Volume dimension (2 or 3).
    angle : float
        Rotation angle in radians.  Parallel: beam direction
        ``(cos a, sin a[, 0])``.  Divergent: the source sits at
        ``-source_distance * (cos a, sin a[, 0])``.
    det_shape : tuple of int
        Pixel counts, ``(m,)`` for 2D volumes, ``(m_u, m_v)`` for 3D.
    pitch : tuple of float
        Pixel pitch per detector axis: lengths for parallel beams, angles
        (radians) for divergent beams (fan angle, cone elevation).
    source_distance : float, optional
        Distance of the source from the origin (divergent only).
    """

    mode: str
    ndim: int
    angle: float
    det_shape: tuple
    pitch: tuple
    source_distance: float | None = None

    def __post_init__(self):
        if self.mode not in ("parallel", "divergent"):
            raise ConfigurationError(f"unknown geometry mode {self.mode!r}")
        if self.ndim not in (2, 3):
            raise ConfigurationError("ndim must be 2 or 3")
        det_shape = tuple(int(n) for n in np.atleast_1d(self.det_shape))
        pitch = tuple(float(d) for d in np.atleast_1d(self.pitch))
        if len(pitch) == 1 and len(det_shape) == 2:
            pitch = pitch * 2
        object.__setattr__(self, "det_shape", det_shape)
        object.__setattr__(self, "pitch", pitch)
        if len(det_shape) != self.ndim - 1 or len(pitch) != len(det_shape):
            raise ConfigurationError("detector dimension must be ndim - 1")
        if min(det_shape) < 1 or min(pitch) <= 0:
            raise ConfigurationError("detector needs positive pixel counts and pitch")
        if self.mode == "divergent":
            if self.source_distance is None or not self.source_distance > 0:
                raise ConfigurationError("divergent geometry requires source_distance > 0")
            if self.ndim == 2 and self.det_shape[0] * self.pitch[0] >= math.pi:
                raise ConfigurationError("fan opening angle must be below pi")

    @property
    def is_parallel(self) -> bool:
        return self.mode == "parallel"

    @property
    def direction(self) -> np.ndarray:
        """Beam direction (parallel) or central ray direction (divergent)."""
        d = np.zeros(self.ndim)
        d[0], d[1] = math.cos(self.angle), math.sin(self.angle)
        return d

    @property
    def source(self) -> np.ndarray | None:
        if self.is_parallel:
            return None
        return -self.source_distance * self.direction

    def det_coords(self, axis: int = 0) -> np.ndarray:
        n = self.det_shape[axis]
        return (np.arange(n) - 0.5 * (n - 1)) * self.pitch[axis]

    def pixel_measure(self) -> np.ndarray:
        """Detector quadrature weights ``mu`` (shape ``det_shape``)."""
        if self.is_parallel or self.ndim == 2:
            return np.full(self.det_shape, float(np.prod(self.pitch)))
        zeta = self.det_coords(1)
        return np.broadcast_to(np.cos(zeta)[None, :] * self.pitch[0] * self.pitch[1],
                               self.det_shape).copy()

    def rays(self, supersample: int = 1):
        """Ray origins and unit directions, shape ``(n_rays, ndim)``.

        With ``supersample = s`` each pixel is split into ``s**(ndim-1)``
        sub-rays ordered pixel-major.
        """
        s = int(supersample)
        offs = (np.arange(s) + 0.5) / s - 0.5
        axes = []
        for a in range(self.ndim - 1):
            c = self.det_coords(a)
            axes.append((c[:, None] + offs[None, :] * self.pitch[a]).ravel())
        th = self.direction
        if self.ndim == 2:
            (a0,) = axes
            if self.is_parallel:
                perp = _rot2(th, math.pi / 2)
                org = a0[:, None] * perp[None, :]
                dirs = np.broadcast_to(th, org.shape).copy()
            else:
                dirs = np.stack([np.cos(self.angle + a0), np.sin(self.angle + a0)], axis=1)
                org = np.broadcast_to(self.source, dirs.shape).copy()
            return _pixel_major(org, self.det_shape, s), _pixel_major(dirs, self.det_shape, s)
        a0, a1 = np.meshgrid(axes[0], axes[1], indexing="ij")
        if self.is_parallel:
            eu = np.array([-math.sin(self.angle), math.cos(self.angle), 0.0])
            ev = np.array([0.0, 0.0, 1.0])
            org = a0[..., None] * eu + a1[..., None] * ev
            dirs = np.broadcast_to(th, org.shape).copy()
        else:
            cz = np.cos(a1)
            dirs = np.stack([cz * np.cos(self.angle + a0), cz * np.sin(self.angle + a0),
                             np.sin(a1)], axis=-1)
            org = np.broadcast_to(self.source, dirs.shape).copy()
        return _pixel_major(org, self.det_shape, s), _pixel_major(dirs, self.det_shape, s)

    def ray_density(self, grid: VolumeGrid) -> np.ndarray:
        """Ray density ``w`` on voxel centres (1 for parallel beams).

        For divergent beams ``w = |x - s|**-(ndim-1)``, the Jacobian between
        the volume measure and the (angle, distance) parameterization of the
        rays.
        """
        if self.is_parallel:
            return np.ones(grid.shape)
        c = grid.coords()
        s = self.source
        r2 = sum((c[i] - s[i]) ** 2 for i in range(grid.ndim))
        return np.broadcast_to(r2 ** (-(grid.ndim - 1) / 2.0), grid.shape).copy()

    def validate(self, grid: VolumeGrid):
        """Raise :class:`ConfigurationError` if the view does not fit the grid."""
        if grid.ndim != self.ndim:
            raise ConfigurationError(f"geometry is {self.ndim}D but the grid is {grid.ndim}D")
        R = grid.support_radius
        if self.is_parallel:
            half = 0.5 * self.det_shape[0] * self.pitch[0]
            if half < R * (1 - 1e-9) - 0.5 * self.pitch[0]:
                raise ConfigurationError(
                    f"detector half-width {half:g} does not cover the support radius {R:g}")
            if self.ndim == 3:
                hz = 0.5 * self.det_shape[1] * self.pitch[1]
                if hz < grid.half_extent[2] - 0.5 * self.pitch[1]:
                    raise ConfigurationError("detector height does not cover the grid")
        else:
            Rb = R if self.ndim == 2 or grid.omega == "ball" else math.sqrt(
                R ** 2 + grid.half_extent[2] ** 2)
            if self.source_distance <= Rb:
                raise ConfigurationError("source lies inside the closure of Omega")
            need = math.asin(min(R / self.source_distance, 1.0))
            half = 0.5 * self.det_shape[0] * self.pitch[0]
            if half < need - 0.5 * self.pitch[0]:
                raise ConfigurationError("fan detector does not cover the support")


def _pixel_major(a, det_shape, s):
    """Reorder sub-ray arrays so that the sub-rays of one pixel are contiguous."""
    d = a.shape[-1]
    if len(det_shape) == 1:
        return np.ascontiguousarray(a.reshape(det_shape[0] * s, d))
    m0, m1 = det_shape
    a = a.reshape(m0, s, m1, s, d).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(a.reshape(m0 * m1 * s * s, d))


def parallel_geometries(grid: VolumeGrid, angles, n_det=None, pitch=None):
    """Parallel views covering ``grid`` for each angle (radians).

    The default pitch equals the voxel size and the default pixel count is
    the smallest count whose first pixel beyond the detector misses the
    interpolated support (radius plus ``sqrt(2) h``), with the parity of the
    grid so that pixel centres line up with voxel centres for axis-aligned
    views.
    """
    h = grid.voxel_size
    pitch = h if pitch is None else float(pitch)
    if n_det is None:
        reach = grid.support_radius + math.sqrt(2.0) * h
        n_det = _covering_count(2 * reach / pitch - 1, grid.shape[1])
    if grid.ndim == 2:
        return [Geometry("parallel", 2, float(a), (n_det,), (pitch,)) for a in angles]
    nz = grid.shape[2]
    nv = int(math.ceil(nz * h / pitch - 1e-9))
    if (nv - nz) % 2 and pitch == h:
        nv += 1
    return [Geometry("parallel", 3, float(a), (n_det, nv), (pitch, pitch)) for a in angles]


def divergent_geometries(grid: VolumeGrid, angles, source_distance, n_det=None, pitch=None):
    """Fan (2D) or cone (3D) views with an equiangular detector covering Omega."""
    R = grid.support_radius
    D = float(source_distance)
    if D <= R:
        raise ConfigurationError("source lies inside the closure of Omega")
    if pitch is None:
        # angular pitch matching one voxel at the centre of rotation
        pitch = grid.voxel_size / D
    pitch = float(pitch)
    if n_det is None:
        n_det = int(math.ceil(2 * math.asin(R / D) / pitch)) + 2
    if grid.ndim == 2:
        return [Geometry("divergent", 2, float(a), (n_det,), (pitch,), D) for a in angles]
    hz = grid.half_extent[2]
    zmax = math.atan2(hz, D - R)
    nv = int(math.ceil(2 * zmax / pitch)) + 2
    return [Geometry("divergent", 3, float(a), (n_det, nv), (pitch, pitch), D) for a in angles]


def _covering_count(width_in_pixels, parity_ref):
    n = int(math.ceil(width_in_pixels - 1e-9))
    if (n - parity_ref) % 2:
        n += 1
    return max(n, 1)


# --------------------------------------------------------------------------
# Kernels
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _clip_range(o, d, ext, pad):
    t0 = -np.inf
    t1 = np.inf
    for a in range(o.shape[0]):
        e = ext[a] + pad
        if abs(d[a]) > 1e-14:
            ta = (-e - o[a]) / d[a]
            tb = (e - o[a]) / d[a]
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
        elif abs(o[a]) > e:
            return 1.0, 0.0
    return t0, t1


@numba.njit(cache=True)
def _fp2(f, h, org, dirs, dt, out):
    nx, ny = f.shape
    ext = np.array([0.5 * nx * h, 0.5 * ny * h])
    for r in range(org.shape[0]):
        t0, t1 = _clip_range(org[r], dirs[r], ext, 0.5 * h)
        if t1 < t0:
            out[r] = 0.0
            continue
        k0 = math.ceil(t0 / dt)
        k1 = math.floor(t1 / dt)
        ox, oy = org[r, 0], org[r, 1]
        dx, dy = dirs[r, 0], dirs[r, 1]
        acc = 0.0
        for k in range(k0, k1 + 1):
            t = k * dt
            fx = (ox + t * dx + ext[0]) / h - 0.5
            fy = (oy + t * dy + ext[1]) / h - 0.5
            ix = math.floor(fx)
            iy = math.floor(fy)
            wx = fx - ix
            wy = fy - iy
            for a in range(2):
                jx = ix + a
                if jx < 0 or jx >= nx:
                    continue
                cx = wx if a else 1.0 - wx
                for b in range(2):
                    jy = iy + b
                    if jy < 0 or jy >= ny:
                        continue
                    cy = wy if b else 1.0 - wy
                    acc += cx * cy * f[jx, jy]
        out[r] = acc * dt


@numba.njit(cache=True)
def _bp2(p, h, org, dirs, dt, g):
    nx, ny = g.shape
    ext = np.array([0.5 * nx * h, 0.5 * ny * h])
    for r in range(org.shape[0]):
        val = p[r] * dt
        if val == 0.0:
            continue
        t0, t1 = _clip_range(org[r], dirs[r], ext, 0.5 * h)
        if t1 < t0:
            continue
        k0 = math.ceil(t0 / dt)
        k1 = math.floor(t1 / dt)
        ox, oy = org[r, 0], org[r, 1]
        dx, dy = dirs[r, 0], dirs[r, 1]
        for k in range(k0, k1 + 1):
            t = k * dt
            fx = (ox + t * dx + ext[0]) / h - 0.5
            fy = (oy + t * dy + ext[1]) / h - 0.5
            ix = math.floor(fx)
            iy = math.floor(fy)
            wx = fx - ix
            wy = fy - iy
            for a in range(2):
                jx = ix + a
                if jx < 0 or jx >= nx:
                    continue
                cx = wx if a else 1.0 - wx
                for b in range(2):
                    jy = iy + b
                    if jy < 0 or jy >= ny:
                        continue
                    cy = wy if b else 1.0 - wy
                    g[jx, jy] += cx * cy * val


@numba.njit(cache=True)
def _fp3(f, h, org, dirs, dt, out):
    nx, ny, nz = f.shape
    ext = np.array([0.5 * nx * h, 0.5 * ny * h, 0.5 * nz * h])
    for r in range(org.shape[0]):
        t0, t1 = _clip_range(org[r], dirs[r], ext, 0.5 * h)
        if t1 < t0:
            out[r] = 0.0
            continue
        k0 = math.ceil(t0 / dt)
        k1 = math.floor(t1 / dt)
        acc = 0.0
        for k in range(k0, k1 + 1):
            t = k * dt
            fx = (org[r, 0] + t * dirs[r, 0] + ext[0]) / h - 0.5
            fy = (org[r, 1] + t * dirs[r, 1] + ext[1]) / h - 0.5
            fz = (org[r, 2] + t * dirs[r, 2] + ext[2]) / h - 0.5
            ix = math.floor(fx)
            iy = math.floor(fy)
            iz = math.floor(fz)
            wx = fx - ix
            wy = fy - iy
            wz = fz - iz
            for a in range(2):
                jx = ix + a
                if jx < 0 or jx >= nx:
                    continue
                cx = wx if a else 1.0 - wx
                for b in range(2):
                    jy = iy + b
                    if jy < 0 or jy >= ny:
                        continue
                    cy = wy if b else 1.0 - wy
                    for c in range(2):
                        jz = iz + c
                        if jz < 0 or jz >= nz:
                            continue
                        cz = wz if c else 1.0 - wz
                        acc += cx * cy * cz * f[jx, jy, jz]
        out[r] = acc * dt


@numba.njit(cache=True)
def _bp3(p, h, org, dirs, dt, g):
    nx, ny, nz = g.shape
    ext = np.array([0.5 * nx * h, 0.5 * ny * h, 0.5 * nz * h])
    for r in range(org.shape[0]):
        val = p[r] * dt
        if val == 0.0:
            continue
        t0, t1 = _clip_range(org[r], dirs[r], ext, 0.5 * h)
        if t1 < t0:
            continue
        k0 = math.ceil(t0 / dt)
        k1 = math.floor(t1 / dt)
        for k in range(k0, k1 + 1):
            t = k * dt
            fx = (org[r, 0] + t * dirs[r, 0] + ext[0]) / h - 0.5
            fy = (org[r, 1] + t * dirs[r, 1] + ext[1]) / h - 0.5
            fz = (org[r, 2] + t * dirs[r, 2] + ext[2]) / h - 0.5
            ix = math.floor(fx)
            iy = math.floor(fy)
            iz = math.floor(fz)
            wx = fx - ix
            wy = fy - iy
            wz = fz - iz
            for a in range(2):
                jx = ix + a
                if jx < 0 or jx >= nx:
                    continue
                cx = wx if a else 1.0 - wx
                for b in range(2):
                    jy = iy + b
                    if jy < 0 or jy >= ny:
                        continue
                    cy = wy if b else 1.0 - wy
                    for c in range(2):
                        jz = iz + c
                        if jz < 0 or jz >= nz:
                            continue
                        cz = wz if c else 1.0 - wz
                        g[jx, jy, jz] += cx * cy * cz * val


# --------------------------------------------------------------------------
# Operators
# --------------------------------------------------------------------------

_RAY_CACHE: dict = {}


def _cached_rays(geom: Geometry, supersample: int):
    key = (geom, supersample)
    hit = _RAY_CACHE.get(key)
    if hit is None:
        if len(_RAY_CACHE) > 4096:
            _RAY_CACHE.clear()
        hit = geom.rays(supersample)
        _RAY_CACHE[key] = hit
    return hit


def _check(grid: VolumeGrid, geom: Geometry):
    if grid.ndim != geom.ndim:
        raise ConfigurationError(f"geometry is {geom.ndim}D but the grid is {grid.ndim}D")


def _raw_forward(f, grid, geom, supersample=1):
    org, dirs = _cached_rays(geom, supersample)
    dt = 0.5 * grid.voxel_size / supersample
    out = np.empty(org.shape[0])
    f = np.ascontiguousarray(f, dtype=np.float64)
    kern = _fp2 if grid.ndim == 2 else _fp3
    kern(f, float(grid.voxel_size), org, dirs, dt, out)
    k = supersample ** (geom.ndim - 1)
    if k > 1:
        out = out.reshape(-1, k).mean(axis=1)
    return out.reshape(geom.det_shape)


def _raw_transpose(p, grid, geom):
    org, dirs = _cached_rays(geom, 1)
    dt = 0.5 * grid.voxel_size
    g = np.zeros(grid.shape)
    p = np.ascontiguousarray(np.asarray(p, dtype=np.float64).ravel())
    kern = _bp2 if grid.ndim == 2 else _bp3
    kern(p, float(grid.voxel_size), org, dirs, dt, g)
    return g


def project(f, grid: VolumeGrid, geom: Geometry, supersample: int = 1) -> np.ndarray:
    """Line integrals of ``f`` (restricted to Omega) along the rays of ``geom``.

    ``supersample > 1`` averages ``supersample**(ndim-1)`` sub-rays per pixel
    with a finer step; this variant is meant for data simulation only.
    """
    _check(grid, geom)
    f = np.asarray(f, dtype=float)
    if f.shape != grid.shape:
        raise ConfigurationError(f"volume shape {f.shape} does not match grid {grid.shape}")
    call_counts["project"] += 1
    return _raw_forward(np.where(grid.mask, f, 0.0), grid, geom, int(supersample))


def _adjoint(p, grid, geom):
    p = np.asarray(p, dtype=float)
    if p.shape != geom.det_shape:
        raise ConfigurationError(f"projection shape {p.shape} does not match detector {geom.det_shape}")
    g = _raw_transpose(p * geom.pixel_measure(), grid, geom)
    g /= grid.cell_volume
    g[~grid.mask] = 0.0
    return g


def adjoint(p, grid: VolumeGrid, geom: Geometry) -> np.ndarray:
    """L2 adjoint of :func:`project` (exact transpose up to the measures)."""
    _check(grid, geom)
    call_counts["adjoint"] += 1
    return _adjoint(p, grid, geom)


def back_project(p, grid: VolumeGrid, geom: Geometry) -> np.ndarray:
    """Smear ``p`` along the rays: the adjoint with the ray density divided out."""
    _check(grid, geom)
    call_counts["back_project"] += 1
    g = _adjoint(p, grid, geom)
    if not geom.is_parallel:
        g /= geom.ray_density(grid)
    return g


# --------------------------------------------------------------------------
# Unit projections
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class UnitProjections:
    """Projections of the indicator of Omega (``u``) and of the ray density (``u_tilde``)."""

    u: np.ndarray
    u_tilde: np.ndarray
    density: str = "discrete"

    @property
    def support(self) -> np.ndarray:
        return self.u > 0


def _analytic_parallel(grid: VolumeGrid, geom: Geometry):
    if not geom.is_parallel or grid.omega == "custom":
        return None
    if grid.omega == "box":
        org, dirs = geom.rays()
        ext = grid.half_extent
        out = np.empty(org.shape[0])
        for r in range(org.shape[0]):
            t0, t1 = _clip_range(org[r], dirs[r], ext, 0.0)
            out[r] = max(t1 - t0, 0.0)
        return out.reshape(geom.det_shape)
    R = float(grid.radius)
    su = geom.det_coords(0)
    if geom.ndim == 2:
        return 2.0 * np.sqrt(np.clip(R ** 2 - su ** 2, 0.0, None))
    sv = geom.det_coords(1)
    if grid.omega == "ball":
        r2 = su[:, None] ** 2 + sv[None, :] ** 2
        return 2.0 * np.sqrt(np.clip(R ** 2 - r2, 0.0, None))
    chord = 2.0 * np.sqrt(np.clip(R ** 2 - su ** 2, 0.0, None))
    inside = np.abs(sv) <= grid.half_extent[2]
    return chord[:, None] * inside[None, :]


_DENSITY_CACHE: dict = {}


def ray_density(grid: VolumeGrid, geom: Geometry, density: str = "discrete") -> np.ndarray:
    """Ray density ``w`` of a view on the voxel centres.

    ``'analytic'`` is :meth:`Geometry.ray_density`.  ``'discrete'`` is the
    adjoint applied to the detector support, i.e. the density realized by
    the discrete operator pair; it is cached per grid and view.  Both are 1
    for parallel beams.
    """
    if density not in ("discrete", "analytic"):
        raise ConfigurationError(f"unknown ray density {density!r}")
    if geom.is_parallel or density == "analytic":
        return geom.ray_density(grid)
    key = (grid, geom)
    hit = _DENSITY_CACHE.get(key)
    if hit is None:
        if len(_DENSITY_CACHE) > 512:
            _DENSITY_CACHE.clear()
        u = _raw_forward(grid.ones(), grid, geom)
        sup = (u > 0) & (u >= ZERO_THICKNESS * u.max())
        hit = _adjoint(sup, grid, geom)
        hit.setflags(write=False)
        _DENSITY_CACHE[key] = hit
    return hit


def unit_projections(grid: VolumeGrid, geom: Geometry, method: str = "projected",
                     density: str = "discrete") -> UnitProjections:
    """Unit projections ``u = P(1_Omega)`` and ``u_tilde = P(w 1_Omega)``.

    ``method='analytic'`` uses closed-form chord lengths for box, ball and
    cylinder supports in parallel geometry and falls back to projection
    otherwise.  The projected form is the default because it is the one that
    is consistent with the discrete operator pair.

    For divergent beams ``density`` selects the ray density ``w``:
    ``'discrete'`` uses ``P*`` applied to the detector support, the density
    actually realized by the discrete adjoint, and ``'analytic'`` uses
    ``|x - s|**-(ndim-1)``.  The two agree to a few percent, but only the
    discrete one makes ``P P* p - u_tilde p`` vanish under grid refinement,
    because the interpolation pattern of a fan scales with the voxel size.
    """
    _check(grid, geom)
    u = None
    if method == "analytic":
        u = _analytic_parallel(grid, geom)
    elif method != "projected":
        raise ConfigurationError(f"unknown unit projection method {method!r}")
    if u is None:
        u = _raw_forward(grid.ones(), grid, geom)
    u = np.where(u < ZERO_THICKNESS * max(u.max(), 0.0), 0.0, u)
    if geom.is_parallel:
        ut = u
    else:
        ut = _raw_forward(grid.ones() * ray_density(grid, geom, density), grid, geom)
        ut = np.where(u > 0, ut, 0.0)
        # keep the supports identical
        u = np.where(ut > 0, u, 0.0)
    return UnitProjections(u, ut, density)


def masked_divide(p, u_pow, exponent: float = 1.0) -> np.ndarray:
    """``p / u**exponent`` where ``u > 0`` and exactly zero elsewhere."""
    p = np.asarray(p, dtype=float)
    u = np.asarray(u_pow, dtype=float)
    pos = u > 0
    out = np.zeros(np.broadcast(p, u).shape)
    safe = np.where(pos, u, 1.0)
    np.divide(p, safe ** exponent, out=out, where=pos)
    return out
