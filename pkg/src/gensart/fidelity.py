"""Integral-form data fidelities, their scalar proximal maps and the
pixelwise projection-space solve.

A fidelity is ``S(p) = sum_i mu_i * s_i(p_i)`` over detector pixels, where
``mu`` is the detector pixel measure and ``s_i`` a scalar function attached to
pixel ``i``.  The proximal map of ``s`` is

    prox(y, tau) = argmin_x  s(x) + (x - y)**2 / (2 tau).

Supported kinds (``g`` is the observed data, ``r = x - g`` the residual):

``l2``              ``r**2``
``weighted_l2``     ``r**2 / sigma**2``
``huber``           ``r**2`` for ``|r| <= nu`` and ``2 nu |r| - nu**2`` beyond
``student_t``       ``nu**2 * log(1 + r**2 / nu**2)``
``poisson_dark``    ``omega * KL(g; t I x)``
``poisson_bright``  ``omega * (t I exp(-x) + g x)``

For the Poisson kinds ``g`` is the count density produced by
:func:`bin_counts_to_density`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

KINDS = ("l2", "weighted_l2", "huber", "student_t", "poisson_dark", "poisson_bright")
QUADRATIC_KINDS = ("l2", "weighted_l2")


@dataclass(frozen=True, eq=False)
class FidelitySpec:
    """Tagged description of a scalar data fidelity.

    Parameters
    ----------
    kind : str
        One of :data:`KINDS`.
    data : ndarray
        Observed data on the detector grid (count density for Poisson kinds).
    sigma : float or ndarray
        Per-pixel standard deviation for ``weighted_l2``.
    nu : float, optional
        Robustness scale for ``huber`` and ``student_t``.  Defaults to 20 % of
        the standard deviation of ``data``.
    exposure : float
        Exposure time ``t`` of the Poisson models.
    intensity : float or ndarray
        Illumination intensity ``I`` of the Poisson models.
    omega : float or ndarray
        Summed pixel sensitivity of the Poisson models.
    """

    kind: str
    data: np.ndarray
    sigma: float | np.ndarray = 1.0
    nu: float | None = None
    exposure: float = 1.0
    intensity: float | np.ndarray = 1.0
    omega: float | np.ndarray = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown fidelity kind {self.kind!r}")
        data = np.asarray(self.data, dtype=float)
        object.__setattr__(self, "data", data)
        if self.kind in ("huber", "student_t"):
            nu = self.nu
            if nu is None:
                nu = default_nu(data)
            if not nu > 0:
                raise ConfigurationError("nu must be positive")
            object.__setattr__(self, "nu", float(nu))
        if self.kind == "weighted_l2" and np.any(np.asarray(self.sigma) <= 0):
            raise ConfigurationError("sigma must be positive")
        if self.kind.startswith("poisson"):
            if not self.exposure > 0:
                raise ConfigurationError("exposure must be positive")
            if np.any(np.asarray(self.intensity) < 0):
                raise ConfigurationError("intensity must be nonnegative")
            if np.any(data < 0):
                raise ConfigurationError("Poisson data must be nonnegative")

    @property
    def is_quadratic(self) -> bool:
        return self.kind in QUADRATIC_KINDS

    def quadratic_weight(self):
        """Weight ``a`` with ``s(x) = a * (x - g)**2`` for quadratic kinds."""
        if self.kind == "l2":
            return 1.0
        if self.kind == "weighted_l2":
            return 1.0 / np.asarray(self.sigma, dtype=float) ** 2
        raise ConfigurationError(f"fidelity {self.kind!r} is not quadratic")

    def with_data(self, data) -> "FidelitySpec":
        """Copy of the spec with different observed data (nu kept fixed)."""
        return FidelitySpec(self.kind, data, self.sigma, self.nu, self.exposure,
                            self.intensity, self.omega)


def default_nu(data) -> float:
    """Robustness scale default: 20 % of the data standard deviation."""
    sd = float(np.std(np.asarray(data, dtype=float)))
    return 0.2 * sd if sd > 0 else 1.0


def kl_divergence(b, a):
    """Elementwise ``KL(b; a) = a - b - b log(a / b)`` with ``0 log(a/0) = 0``.

    Returns ``inf`` for negative arguments and for ``a = 0 < b``.
    """
    b = np.asarray(b, dtype=float)
    a = np.asarray(a, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        logterm = np.where(b > 0, b * np.log(np.where(b > 0, a, 1.0) / np.where(b > 0, b, 1.0)), 0.0)
        out = a - b - logterm
    bad = (a < 0) | (b < 0) | ((a == 0) & (b > 0))
    return np.where(bad, np.inf, out)


def scalar_fidelity(spec: FidelitySpec, x) -> np.ndarray:
    """Evaluate ``s_i(x_i)`` pixelwise."""
    x = np.asarray(x, dtype=float)
    g = spec.data
    k = spec.kind
    if k in QUADRATIC_KINDS:
        return spec.quadratic_weight() * (x - g) ** 2
    if k == "huber":
        r = np.abs(x - g)
        nu = spec.nu
        return np.where(r <= nu, r ** 2, 2 * nu * r - nu ** 2)
    if k == "student_t":
        nu2 = spec.nu ** 2
        return nu2 * np.log1p((x - g) ** 2 / nu2)
    c = spec.exposure * np.asarray(spec.intensity, dtype=float)
    w = np.asarray(spec.omega, dtype=float)
    if k == "poisson_dark":
        val = kl_divergence(g, c * x)
        return np.where(w == 0, 0.0, w * val)
    with np.errstate(over="ignore"):
        return w * (c * np.exp(-x) + g * x)


def fidelity_derivative(spec: FidelitySpec, x) -> np.ndarray:
    """Pixelwise derivative ``s_i'(x_i)`` (a subgradient where ``s`` has a kink)."""
    x = np.asarray(x, dtype=float)
    g = spec.data
    k = spec.kind
    if k in QUADRATIC_KINDS:
        return 2 * spec.quadratic_weight() * (x - g)
    r = x - g
    if k == "huber":
        return np.clip(2 * r, -2 * spec.nu, 2 * spec.nu)
    if k == "student_t":
        return 2 * r / (1 + r * r / spec.nu ** 2)
    c = spec.exposure * np.asarray(spec.intensity, dtype=float)
    w = np.asarray(spec.omega, dtype=float)
    if k == "poisson_dark":
        with np.errstate(divide="ignore", invalid="ignore"):
            return w * (c - np.where(g > 0, g / x, 0.0))
    return w * (g - c * np.exp(-np.clip(x, -700.0, None)))


def fidelity_argmin(spec: FidelitySpec, fallback) -> np.ndarray:
    """Pixelwise minimizer of ``s`` (``fallback`` where it is not attained)."""
    g = spec.data
    fallback = np.broadcast_to(np.asarray(fallback, dtype=float), g.shape)
    k = spec.kind
    if not k.startswith("poisson"):
        return np.broadcast_to(g, fallback.shape).astype(float)
    c = np.broadcast_to(spec.exposure * np.asarray(spec.intensity, dtype=float), g.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        if k == "poisson_dark":
            x = np.where(c > 0, g / c, fallback)
        else:
            x = np.where((g > 0) & (c > 0), np.log(c / g), fallback)
    return np.where(np.isfinite(x), x, fallback)


def eval_fidelity(spec: FidelitySpec, p, mu=1.0) -> float:
    """Integral-form fidelity ``sum(mu * s(p))``; ``inf`` is a legal value."""
    vals = scalar_fidelity(spec, p)
    with np.errstate(invalid="ignore"):
        return float(np.sum(np.broadcast_to(mu, vals.shape) * vals))


def prox_objective(spec, x, y, tau):
    """``s(x) + (x - y)**2 / (2 tau)`` pixelwise."""
    return scalar_fidelity(spec, x) + (np.asarray(x) - y) ** 2 / (2 * np.asarray(tau))


# --------------------------------------------------------------------------
# Proximal maps
# --------------------------------------------------------------------------

def prox(spec: FidelitySpec, y, tau) -> np.ndarray:
    """Vectorized proximal map of the pixelwise fidelity ``s``.

    ``y`` and ``tau`` broadcast against the data array.
    """
    y = np.asarray(y, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0):
        raise ConfigurationError("tau must be positive")
    g = spec.data
    k = spec.kind
    if k in QUADRATIC_KINDS:
        s2 = 1.0 / spec.quadratic_weight()
        return (s2 * y + 2 * tau * g) / (s2 + 2 * tau)
    if k == "huber":
        z = y - g
        nu = spec.nu
        return y - 2 * nu * tau * z / np.maximum(np.abs(z), nu * (1 + 2 * tau))
    if k == "student_t":
        return g + _prox_student_residual(np.broadcast_to(y - g, np.broadcast(y, g, tau).shape),
                                          spec.nu, tau)
    c = spec.exposure * np.asarray(spec.intensity, dtype=float)
    w = np.asarray(spec.omega, dtype=float)
    if k == "poisson_dark":
        return _prox_poisson_dark(y, tau * w, c, g)
    return _prox_poisson_bright(y, tau * w, c, g)


def _prox_poisson_dark(y, tau, c, b):
    shape = np.broadcast(y, tau, c, b).shape
    y, tau, c, b = (np.broadcast_to(a, shape) for a in (y, tau, c, b))
    q = y - tau * c
    x = 0.5 * (q + np.sqrt(q * q + 4 * tau * b))
    # avoid cancellation for q < 0: x = 2 tau b / (sqrt(q^2 + 4 tau b) - q)
    neg = q < 0
    den = np.sqrt(q * q + 4 * tau * b) - q
    x = np.where(neg & (den > 0), 2 * tau * b / np.where(den > 0, den, 1.0), x)
    x = np.where(b == 0, np.maximum(q, 0.0), x)
    return np.where(tau == 0, y, x)


def _prox_poisson_bright(y, tau, c, b, newton_iters=30):
    """Root of ``x - y + tau (b - c exp(-x)) = 0`` (strictly increasing in x)."""
    shape = np.broadcast(y, tau, c, b).shape
    y, tau, c, b = (np.broadcast_to(np.asarray(a, dtype=float), shape).copy() for a in (y, tau, c, b))

    def phi(x):
        e = np.exp(-np.clip(x, -700.0, None))
        return x - y + tau * (b - c * e), 1.0 + tau * c * e

    lo = np.minimum(y - tau * b, y)
    with np.errstate(over="ignore"):
        hi = np.maximum(y, y + tau * c * np.exp(-np.clip(y, -700.0, None)))
    x = y.copy()
    for _ in range(newton_iters):
        f, df = phi(x)
        lo = np.where(f < 0, x, lo)
        hi = np.where(f > 0, x, hi)
        step = x - f / df
        inside = (step > lo) & (step < hi) & np.isfinite(step)
        x = np.where(inside, step, 0.5 * (lo + hi))
        if np.all(np.abs(f) <= 1e-14 * (1 + np.abs(x))):
            break
    # bisection fallback for anything Newton left unresolved
    f, _ = phi(x)
    todo = np.abs(f) > 1e-12 * (1 + np.abs(x))
    it = 0
    while np.any(todo) and it < 200:
        mid = 0.5 * (lo + hi)
        fm, _ = phi(mid)
        lo = np.where(todo & (fm < 0), mid, lo)
        hi = np.where(todo & (fm > 0), mid, hi)
        x = np.where(todo, mid, x)
        todo = todo & (np.abs(fm) > 1e-12 * (1 + np.abs(mid))) & (hi - lo > 1e-15 * (1 + np.abs(mid)))
        it += 1
    return x


def _prox_student_residual(z, nu, tau):
    """Minimizer over r of ``nu^2 log(1 + r^2/nu^2) + (r - z)^2 / (2 tau)``.

    Stationary points solve ``r^3 - z r^2 + nu^2 (1 + 2 tau) r - nu^2 z = 0``.
    All real roots are computed (Cardano / trigonometric form), polished by
    Newton steps, and the one with the smallest objective is returned; ties
    go to the root closest to ``z``.
    """
    z = np.asarray(z, dtype=float)
    tau = np.broadcast_to(np.asarray(tau, dtype=float), z.shape)
    nu2 = float(nu) ** 2
    a = -z
    b = nu2 * (1 + 2 * tau)
    c = -nu2 * z
    roots = _real_cubic_roots(a, b, c)  # (3, ...) with nan for missing roots
    for _ in range(3):
        val = ((roots + a) * roots + b) * roots + c
        der = (3 * roots + 2 * a) * roots + b
        with np.errstate(invalid="ignore", divide="ignore"):
            upd = np.where(der != 0, val / der, 0.0)
        roots = np.where(np.isfinite(upd), roots - upd, roots)
    obj = nu2 * np.log1p(roots ** 2 / nu2) + (roots - z) ** 2 / (2 * tau)
    obj = np.where(np.isnan(roots), np.inf, obj)
    best = np.min(obj, axis=0)
    tie = obj <= best + 1e-15 * (1 + np.abs(best))
    dist = np.where(tie, np.abs(roots - z), np.inf)
    idx = np.argmin(dist, axis=0)
    return np.take_along_axis(roots, idx[None], axis=0)[0]


def _real_cubic_roots(a, b, c):
    """Real roots of ``x^3 + a x^2 + b x + c``; missing roots are nan."""
    a, b, c = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a, b, c)))
    P = b - a * a / 3.0
    Q = 2 * a ** 3 / 27.0 - a * b / 3.0 + c
    disc = (Q / 2) ** 2 + (P / 3) ** 3
    shift = -a / 3.0
    out = np.full((3,) + a.shape, np.nan)
    one = disc > 0
    sq = np.sqrt(np.where(one, disc, 0.0))
    r1 = np.cbrt(-Q / 2 + sq) + np.cbrt(-Q / 2 - sq)
    out[0] = np.where(one, r1 + shift, out[0])
    three = ~one
    m = np.sqrt(np.where(three, -P / 3.0, 0.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        arg = np.where(three & (m > 0), -Q / (2 * np.where(m > 0, m, 1.0) ** 3), 0.0)
    th = np.arccos(np.clip(arg, -1.0, 1.0)) / 3.0
    for k in range(3):
        rk = 2 * m * np.cos(th - 2 * np.pi * k / 3) + shift
        out[k] = np.where(three, rk, out[k])
    return out


def prox_scalar(spec: FidelitySpec, index, y: float, tau: float) -> float:
    """Proximal map of the fidelity of a single pixel ``index``."""
    sub = _pixel_spec(spec, index)
    return float(prox(sub, np.float64(y), np.float64(tau)))


def _pixel_spec(spec, index):
    def pick(v):
        v = np.asarray(v, dtype=float)
        return v[index] if v.ndim and v.shape == spec.data.shape else v
    return FidelitySpec(spec.kind, spec.data[index], pick(spec.sigma), spec.nu, spec.exposure,
                        pick(spec.intensity), pick(spec.omega))


# --------------------------------------------------------------------------
# Projection-space solve
# --------------------------------------------------------------------------

def solve_projection_problem(spec: FidelitySpec, p_ref, u_factor, alpha, penalty_weight=1.0):
    """Pixelwise minimizer of ``s(p_ref + c*y) + alpha*b*y**2``.

    Here ``c = u_factor`` (typically ``u_tilde**0.5``) and ``b`` is the
    optional per-pixel ``penalty_weight``.  Each pixel reduces to one proximal
    map with ``tau = c**2 / (2 alpha b)``:  ``y = (prox(p_ref, tau) - p_ref) / c``.
    Pixels with ``c == 0`` return 0.
    """
    p_ref = np.asarray(p_ref, dtype=float)
    c = np.broadcast_to(np.asarray(u_factor, dtype=float), p_ref.shape)
    beta = alpha * np.broadcast_to(np.asarray(penalty_weight, dtype=float), p_ref.shape)
    if np.any(beta[c > 0] <= 0):
        raise ConfigurationError("regularization weight must be positive")
    on = c > 0
    dp = np.zeros_like(p_ref)
    if not np.any(on):
        return dp
    if spec.is_quadratic:
        # closed form avoids the cancellation in (prox - p_ref) / c
        a = np.broadcast_to(spec.quadratic_weight(), p_ref.shape)
        g = spec.data
        num = a * c * (g - p_ref)
        den = a * c * c + beta
        dp[on] = (num / np.where(on, den, 1.0))[on]
        return dp
    cs, bs = c[on], beta[on]
    sub = _subset_spec(spec, on)
    tau = cs * cs / (2 * bs)
    x = prox(sub, p_ref[on], tau)
    dp[on] = (x - p_ref[on]) / cs
    return dp


def _subset_spec(spec, mask):
    def pick(v):
        v = np.asarray(v, dtype=float)
        return v[mask] if v.shape == spec.data.shape else v
    return FidelitySpec(spec.kind, spec.data[mask], pick(spec.sigma), spec.nu, spec.exposure,
                        pick(spec.intensity), pick(spec.omega))


# --------------------------------------------------------------------------
# Counts to density
# --------------------------------------------------------------------------

def bin_counts_to_density(counts, sensitivities, cell=1.0):
    """Turn binned counts into a count-density field.

    Parameters
    ----------
    counts : array_like, shape (m,)
        Counts per detector pixel.
    sensitivities : array_like, shape (m, K)
        Sensitivity functions ``omega_i`` sampled on ``K`` quadrature points.
    cell : float
        Quadrature weight of one sample point.

    Returns
    -------
    g_cont : ndarray, shape (K,)
        ``(sum_i counts_i omega_i / int omega_i) / omega`` with ``0/0 = 0``.
    omega : ndarray, shape (K,)
        Summed sensitivity ``sum_i omega_i``.
    """
    counts = np.asarray(counts, dtype=float)
    sens = np.asarray(sensitivities, dtype=float)
    if np.any(counts < 0):
        raise ConfigurationError("counts must be nonnegative")
    if sens.ndim != 2 or sens.shape[0] != counts.shape[0]:
        raise ConfigurationError("sensitivities must have shape (len(counts), K)")
    mass = sens.sum(axis=1) * cell
    coef = np.divide(counts, mass, out=np.zeros_like(counts), where=mass > 0)
    num = coef @ sens
    omega = sens.sum(axis=0)
    g = np.divide(num, omega, out=np.zeros_like(num), where=omega != 0)
    return g, omega
