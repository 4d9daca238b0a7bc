"""Simplified polychromatic CT model and its Newton-Kaczmarz GenSART step.

The detected intensity of view ``j`` is

    G_j(f) = sum_e w_e I0(e) exp(-Phi(e) P_j(phi(f)) - Theta(e) P_j(theta(f)))

with photo-electric scaling ``Phi(e) = (e0 / e)**3`` and Compton scaling
``Theta(e) = f_KN(e) / f_KN(e0)``.  ``f`` is the attenuation at the
reference energy ``e0``; ``phi`` and ``theta`` split it into its two
components by interpolating a material table.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import ConfigurationError, DomainError
from .geometry import adjoint, back_project, masked_divide, project, ray_density

#: Electron rest energy in keV.
ELECTRON_REST_KEV = 510.998950


def klein_nishina(energy_kev):
    """Klein-Nishina total cross-section per electron, in units of ``2 pi r_e**2``.

    Uses the standard closed form in ``x = E / (m_e c**2)``.
    """
    x = np.asarray(energy_kev, dtype=float) / ELECTRON_REST_KEV
    if np.any(x <= 0):
        raise ConfigurationError("photon energies must be positive")
    l2x = np.log1p(2 * x)
    return ((1 + x) / x ** 2 * (2 * (1 + x) / (1 + 2 * x) - l2x / x)
            + l2x / (2 * x) - (1 + 3 * x) / (1 + 2 * x) ** 2)


def trapezoid_weights(x):
    x = np.asarray(x, dtype=float)
    if x.size == 1:
        return np.ones(1)
    w = np.zeros_like(x)
    dx = np.diff(x)
    w[:-1] += dx / 2
    w[1:] += dx / 2
    return w


@dataclass(frozen=True, eq=False)
class SpectrumModel:
    """Discrete source spectrum.

    Parameters
    ----------
    energies : array_like
        Photon energies in keV (increasing).
    intensity : array_like
        Emitted intensity density ``I0`` at each energy.
    e0 : float
        Reference energy in keV.
    weights : array_like, optional
        Quadrature weights; trapezoidal over ``energies`` by default (a
        single energy gets weight 1).
    """

    energies: np.ndarray
    intensity: np.ndarray
    e0: float = 70.0
    weights: np.ndarray | None = None

    def __post_init__(self):
        e = np.atleast_1d(np.asarray(self.energies, dtype=float))
        i0 = np.atleast_1d(np.asarray(self.intensity, dtype=float))
        if e.shape != i0.shape or e.ndim != 1:
            raise ConfigurationError("energies and intensity must be 1D of equal length")
        if np.any(e <= 0) or np.any(np.diff(e) <= 0):
            raise ConfigurationError("energies must be positive and increasing")
        if not np.all(np.isfinite(i0)) or np.any(i0 < 0):
            raise ConfigurationError("intensities must be finite and nonnegative")
        if not self.e0 > 0:
            raise ConfigurationError("reference energy must be positive")
        w = trapezoid_weights(e) if self.weights is None else np.asarray(self.weights, dtype=float)
        if w.shape != e.shape or np.any(w < 0):
            raise ConfigurationError("quadrature weights must be nonnegative, one per energy")
        object.__setattr__(self, "energies", e)
        object.__setattr__(self, "intensity", i0)
        object.__setattr__(self, "weights", w)

    @classmethod
    def flat(cls, e_min=30.0, e_max=120.0, n=20, e0=70.0, total=1.0):
        """Flat toy spectrum with ``sum(w * I0) = total``."""
        e = np.linspace(e_min, e_max, n)
        i0 = np.full(n, total / (e_max - e_min)) if n > 1 else np.full(1, total)
        return cls(e, i0, e0)

    @classmethod
    def monochromatic(cls, e0=70.0, intensity=1.0):
        return cls(np.array([e0]), np.array([intensity]), e0)

    @classmethod
    def from_csv(cls, path, e0=70.0):
        """Read ``energy_kev,intensity`` rows (header required)."""
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        try:
            e = [float(r["energy_kev"]) for r in rows]
            i0 = [float(r["intensity"]) for r in rows]
        except (KeyError, ValueError) as exc:
            raise ConfigurationError(f"bad spectrum table {path}: {exc}") from exc
        return cls(np.array(e), np.array(i0), e0)

    @property
    def Phi(self):
        return (self.e0 / self.energies) ** 3

    @property
    def Theta(self):
        return klein_nishina(self.energies) / klein_nishina(self.e0)

    @property
    def effective(self):
        """``w_e * I0(e)``."""
        return self.weights * self.intensity


class MaterialDecomposition:
    """Photo-electric and Compton components ``phi(f)``, ``theta(f)``.

    Monotone piecewise-cubic (PCHIP) interpolation through the anchors
    ``(f_m, phi_m)``, ``(f_m, theta_m)`` with the anchor ``(0, 0, 0)``
    always included.  Beyond the last anchor the interpolants continue
    linearly with the end slope, so they stay C1.
    """

    # attenuation per unit length at 70 keV split into photo-electric and
    # Compton parts; toy values for water and cortical bone
    DEFAULT_TABLE = ((0.19, 0.015, 0.175), (0.45, 0.10, 0.35))

    def __init__(self, table=DEFAULT_TABLE):
        t = np.asarray(table, dtype=float).reshape(-1, 3)
        t = t[t[:, 0] > 0]
        if t.size == 0:
            raise ConfigurationError("material table needs a positive anchor")
        t = np.vstack([[0.0, 0.0, 0.0], t[np.argsort(t[:, 0])]])
        if np.any(np.diff(t[:, 0]) <= 0) or np.any(t[:, 1:] < 0):
            raise ConfigurationError("material anchors must be distinct and nonnegative")
        self.table = t
        self._phi = PchipInterpolator(t[:, 0], t[:, 1], extrapolate=False)
        self._theta = PchipInterpolator(t[:, 0], t[:, 2], extrapolate=False)
        self._fmax = t[-1, 0]

    @classmethod
    def from_csv(cls, path):
        """Read ``f,phi,theta`` rows (header required)."""
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        try:
            table = [(float(r["f"]), float(r["phi"]), float(r["theta"])) for r in rows]
        except (KeyError, ValueError) as exc:
            raise ConfigurationError(f"bad material table {path}: {exc}") from exc
        return cls(table)

    def _eval(self, pc, f, deriv):
        f = np.asarray(f, dtype=float)
        fc = np.minimum(f, self._fmax)
        end_val = float(pc(self._fmax))
        end_slope = float(pc.derivative()(self._fmax))
        if deriv:
            return np.where(f > self._fmax, end_slope, pc.derivative()(fc))
        return np.where(f > self._fmax, end_val + end_slope * (f - self._fmax), pc(fc))

    def phi(self, f):
        return self._eval(self._phi, f, False)

    def theta(self, f):
        return self._eval(self._theta, f, False)

    def dphi(self, f):
        return self._eval(self._phi, f, True)

    def dtheta(self, f):
        return self._eval(self._theta, f, True)


class LinearMaterials(MaterialDecomposition):
    """``phi(f) = a f``, ``theta(f) = b f``; ``a=1, b=0`` gives plain absorption CT."""

    def __init__(self, a=1.0, b=0.0):
        self.a, self.b = float(a), float(b)
        self.table = np.array([[0.0, 0.0, 0.0], [1.0, a, b]])

    def phi(self, f):
        return self.a * np.asarray(f, dtype=float)

    def theta(self, f):
        return self.b * np.asarray(f, dtype=float)

    def dphi(self, f):
        return np.full(np.shape(f), self.a)

    def dtheta(self, f):
        return np.full(np.shape(f), self.b)


def _check_f(f):
    f = np.asarray(f, dtype=float)
    if np.any(f < 0):
        raise DomainError("polychromatic model needs nonnegative attenuation")
    return f


def _energy_terms(spectrum, p_phi, p_theta):
    """Return ``G``, ``G^Phi`` and ``G^Theta`` from the two component projections."""
    G = np.zeros_like(p_phi)
    G_phi = np.zeros_like(p_phi)
    G_theta = np.zeros_like(p_phi)
    for we, Ph, Th in zip(spectrum.effective, spectrum.Phi, spectrum.Theta):
        ge = we * np.exp(-Ph * p_phi - Th * p_theta)
        G += ge
        G_phi += Ph * ge
        G_theta += Th * ge
    return G, G_phi, G_theta


@dataclass
class PolyState:
    """Forward evaluation of one view at ``f``."""

    G: np.ndarray
    G_phi: np.ndarray
    G_theta: np.ndarray


def polyct_state(f, grid, geom, spectrum, materials, supersample=1) -> PolyState:
    """Evaluate ``G_j(f)`` and its energy moments with two projector calls."""
    f = _check_f(f)
    p_phi = project(materials.phi(f), grid, geom, supersample)
    p_theta = project(materials.theta(f), grid, geom, supersample)
    return PolyState(*_energy_terms(spectrum, p_phi, p_theta))


def polyct_forward(f, grid, geom, spectrum, materials, supersample=1):
    """``G_j(f)``: detected polychromatic intensity of one view."""
    return polyct_state(f, grid, geom, spectrum, materials, supersample).G


def polyct_derivative(f, h, grid, geom, spectrum, materials):
    """``G_j'[f] h = -G^Phi P(phi'(f) h) - G^Theta P(theta'(f) h)`` evaluated directly."""
    st = polyct_state(f, grid, geom, spectrum, materials)
    return (-st.G_phi * project(materials.dphi(f) * h, grid, geom)
            - st.G_theta * project(materials.dtheta(f) * h, grid, geom))


def _lambda(f, grid, geom, materials, st):
    # the derivative carries a minus sign: G'[f] h = P(lambda h)
    return -(materials.dphi(f) * back_project(st.G_phi, grid, geom)
             + materials.dtheta(f) * back_project(st.G_theta, grid, geom))


def polyct_lambda(f, grid, geom, spectrum, materials):
    """Volume field ``lambda_j(f)`` with ``G_j'[f] h = P_j(lambda_j(f) h)``.

    ``lambda = -(phi'(f) P^B(G^Phi) + theta'(f) P^B(G^Theta))``; the identity
    is exact whenever the projector satisfies ``g P(h) = P(h P^B(g))``.
    """
    f = _check_f(f)
    st = polyct_state(f, grid, geom, spectrum, materials)
    return _lambda(f, grid, geom, materials, st)


@dataclass
class PolyStep:
    f_new: np.ndarray
    residual: np.ndarray
    lam: np.ndarray


def polyct_newton_step(f_k, grid, geom, data, spectrum, materials, alpha) -> PolyStep:
    """Newton-Kaczmarz GenSART step of the polychromatic model.

    ``f_{k+1} = f_k + lam * P*( r / (P(w |lam|^2) + alpha) )`` with
    ``r = g_obs - G(f_k)``.  Costs three forward projections (two for
    ``G``, one for the denominator) and three back-projections (two for
    ``lam``, one adjoint).
    """
    if not alpha > 0:
        raise ConfigurationError("alpha must be positive")
    f_k = _check_f(f_k)
    st = polyct_state(f_k, grid, geom, spectrum, materials)
    lam = _lambda(f_k, grid, geom, materials, st)
    r = np.asarray(data, dtype=float) - st.G
    den = project(ray_density(grid, geom) * lam ** 2, grid, geom) + alpha
    q = masked_divide(r, den)
    f_new = f_k + lam * adjoint(q, grid, geom)
    return PolyStep(f_new, r, lam)


class PolyModel:
    """Bundle of spectrum and materials used by the simulator and the CLI."""

    def __init__(self, spectrum: SpectrumModel, materials: MaterialDecomposition):
        self.spectrum = spectrum
        self.materials = materials

    def forward_view(self, f, grid, geom, supersample=1):
        return polyct_forward(f, grid, geom, self.spectrum, self.materials, supersample)


def polyct_cycle(f0, grid, geoms, datas, spectrum, materials, alpha, order=None,
                 symmetric=True):
    """One Newton-Kaczmarz cycle; iterates are clamped at zero to stay in the model domain."""
    from .kaczmarz import multilevel_order
    base = multilevel_order(len(geoms)) if order is None else list(order)
    seq = base + base[::-1] if symmetric else base
    f = np.maximum(np.array(f0, dtype=float), 0.0)
    res = []
    for j in seq:
        st = polyct_newton_step(f, grid, geoms[j], datas[j], spectrum, materials, alpha)
        res.append(float(np.linalg.norm(st.residual)))
        f = np.maximum(st.f_new, 0.0)
    return f, res
