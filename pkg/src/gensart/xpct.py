"""Near-field X-ray phase contrast: Fresnel propagation, the intensity forward
map ``F(p) = |D(exp(-i p))|^2 - 1``, its derivative, and Newton-Kaczmarz
GenSART steps with a conjugate-gradient projection-space solve.

Frequencies are in detector-pixel units: ``xi = 2 pi * fftfreq(n)`` along
each axis, and the Fresnel number is given per pixel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, IterationError, UnsupportedCombinationError
from .geometry import back_project, masked_divide, project
from .linalg import pcg
from .schemes import SupportGradient


def fresnel_kernel(shape, fresnel_number):
    """Pure-phase multiplier ``exp(-i |xi|^2 / (4 pi f))`` on the FFT grid."""
    if not fresnel_number > 0:
        raise ConfigurationError("Fresnel number must be positive")
    xi2 = np.zeros(shape)
    for a, n in enumerate(shape):
        xi = 2 * np.pi * np.fft.fftfreq(n)
        sh = [1] * len(shape)
        sh[a] = n
        xi2 = xi2 + xi.reshape(sh) ** 2
    return np.exp(-1j * xi2 / (4 * np.pi * fresnel_number))


def fresnel_propagate(psi, fresnel_number, kernel=None, inverse=False):
    """Apply the Fresnel propagator ``D`` (or its inverse) to a complex field."""
    psi = np.asarray(psi, dtype=complex)
    m = fresnel_kernel(psi.shape, fresnel_number) if kernel is None else kernel
    if inverse:
        m = np.conj(m)
    return np.fft.ifftn(m * np.fft.fftn(psi))


class FresnelModel:
    """Phase-contrast image formation on a detector grid.

    Parameters
    ----------
    fresnel_number : float
        Per-pixel Fresnel number.
    shape : tuple of int
        Detector shape of the projections.
    pad : bool
        Zero-pad projections to twice their size before propagation (the
        field is ``exp(0) = 1`` there) and crop the result back.
    """

    def __init__(self, fresnel_number, shape, pad=True):
        self.fresnel_number = float(fresnel_number)
        self.shape = tuple(int(n) for n in shape)
        self.pad = bool(pad)
        self.pad_shape = tuple(2 * n for n in self.shape) if pad else self.shape
        self.kernel = fresnel_kernel(self.pad_shape, self.fresnel_number)
        self._crop = tuple(slice((P - n) // 2, (P - n) // 2 + n)
                           for P, n in zip(self.pad_shape, self.shape))

    def embed(self, p):
        if not self.pad:
            return np.asarray(p, dtype=float)
        out = np.zeros(self.pad_shape)
        out[self._crop] = p
        return out

    def crop(self, q):
        return q[self._crop] if self.pad else q

    def propagate(self, psi, inverse=False):
        return fresnel_propagate(psi, self.fresnel_number, self.kernel, inverse)

    def _fields(self, p):
        psi = np.exp(-1j * self.embed(p))
        return psi, self.propagate(psi)

    def forward(self, p):
        """``F(p) = |D(exp(-i p))|^2 - 1`` (real)."""
        _, a = self._fields(p)
        return self.crop(np.abs(a) ** 2 - 1.0)

    def linearization(self, p):
        """Return ``(F(p), T, T_adj)`` with ``T = F'[p]`` and its adjoint."""
        psi, a = self._fields(p)
        ca = np.conj(a)

        def T(h):
            return self.crop(2.0 * np.imag(ca * self.propagate(psi * self.embed(h))))

        def T_adj(q):
            w = self.propagate(1j * a * self.embed(q), inverse=True)
            return self.crop(2.0 * np.real(psi * np.conj(w)))

        return self.crop(np.abs(a) ** 2 - 1.0), T, T_adj

    def derivative(self, p, h):
        return self.linearization(p)[1](h)

    def derivative_adjoint(self, p, q):
        return self.linearization(p)[2](q)


class IdentityModel:
    """Test hook replacing ``F`` by the identity."""

    def __init__(self, shape=None):
        self.shape = shape

    def forward(self, p):
        return np.asarray(p, dtype=float)

    def linearization(self, p):
        return np.asarray(p, dtype=float), (lambda h: h), (lambda q: q)


def xpct_forward(p, fresnel_number, pad=True):
    """``F(p) = |D(exp(-i p))|^2 - 1``."""
    p = np.asarray(p, dtype=float)
    return FresnelModel(fresnel_number, p.shape, pad).forward(p)


def xpct_derivative_apply(p, h, fresnel_number, pad=True):
    """``F'[p] h = 2 Im(conj(D psi) D(psi h))`` with ``psi = exp(-i p)``."""
    p = np.asarray(p, dtype=float)
    return FresnelModel(fresnel_number, p.shape, pad).derivative(p, h)


def xpct_derivative_adjoint(p, q, fresnel_number, pad=True):
    p = np.asarray(p, dtype=float)
    return FresnelModel(fresnel_number, p.shape, pad).derivative_adjoint(p, q)


@dataclass
class XpctSystem:
    """Projection-space normal operator of one Newton-Kaczmarz step.

    ``A dp = mu (u^{1/2} T*T u^{1/2} + alpha (1-gamma)) dp
    + alpha gamma u^{-1/2} G (u^{-1/2} dp)`` on the support, where ``G`` is
    the support-restricted gradient energy operator.
    """

    T: object
    T_adj: object
    u: np.ndarray
    mu: float
    alpha: float
    gamma: float
    grad: SupportGradient

    def __post_init__(self):
        self.sup = self.u > 0
        self.su = np.sqrt(self.u)
        self.isu = masked_divide(1.0, self.u, 0.5)

    def apply(self, dp):
        v = self.su * dp
        out = self.mu * (self.su * self.T_adj(self.T(v)) + self.alpha * (1 - self.gamma) * dp)
        if self.gamma > 0:
            out = out + self.alpha * self.gamma * self.isu * self.grad.apply(self.isu * dp)
        return np.where(self.sup, out, dp)

    def rhs(self, r):
        return np.where(self.sup, self.mu * self.su * self.T_adj(r), 0.0)

    def diagonal_estimate(self):
        d = self.mu * (2.0 * self.u + self.alpha * (1 - self.gamma))
        if self.gamma > 0:
            d = d + self.alpha * self.gamma * self.isu ** 2 * self.grad.diagonal()
        return np.where(self.sup, d, 1.0)


def xpct_system(model, p_k, units_u, mu, pitch, alpha, gamma):
    _, T, T_adj = model.linearization(p_k)
    grad = SupportGradient(units_u, mu, pitch)
    return XpctSystem(T, T_adj, np.asarray(units_u, dtype=float), float(np.mean(mu)),
                      float(alpha), float(gamma), grad)


@dataclass
class XpctStep:
    f_new: np.ndarray
    residual_norm: float
    cg_iterations: int


def newton_kaczmarz_step(f_k, grid, geom, units, data, model, alpha=500.0, gamma=0.0,
                         nonneg=False, rtol=1e-6, maxiter=300) -> XpctStep:
    """One Newton-Kaczmarz GenSART step for phase-contrast data of one view."""
    if not geom.is_parallel:
        raise UnsupportedCombinationError("phase-contrast steps require parallel beams")
    if not 0.0 <= gamma <= 1.0 or not alpha > 0:
        raise ConfigurationError("need alpha > 0 and gamma in [0, 1]")
    p_k = project(f_k, grid, geom)
    u = units.u
    fp, T, T_adj = model.linearization(p_k)
    r = np.asarray(data, dtype=float) - fp
    mu = geom.pixel_measure()
    sysop = XpctSystem(T, T_adj, u, float(np.mean(mu)), float(alpha), float(gamma),
                       SupportGradient(u, mu, geom.pitch))
    try:
        dp, info = pcg(sysop.apply, sysop.rhs(r), precond=1.0 / sysop.diagonal_estimate(),
                       rtol=rtol, maxiter=maxiter)
    except IterationError as exc:
        raise IterationError(f"CG stagnated in the phase-contrast step: {exc}",
                             residual=exc.residual) from exc
    f_new = f_k + back_project(masked_divide(np.where(sysop.sup, dp, 0.0), u, 0.5), grid, geom)
    if nonneg:
        f_new = np.maximum(f_new, 0.0)
    return XpctStep(f_new, float(np.linalg.norm(r)), info.iterations)


def total_residual(f, grid, geoms, datas, model) -> float:
    """``sqrt(sum_j ||g_j - F(P_j f)||^2)``."""
    tot = 0.0
    for geom, g in zip(geoms, datas):
        tot += float(np.sum((g - model.forward(project(f, grid, geom))) ** 2))
    return tot ** 0.5


def xpct_cycle(f0, grid, geoms, units, datas, model, alpha=500.0, gamma=0.0, order=None,
               symmetric=True, nonneg=False, **kw):
    """Run one (symmetric) Newton-Kaczmarz cycle; returns the iterate and step log."""
    from .kaczmarz import multilevel_order
    base = multilevel_order(len(geoms)) if order is None else list(order)
    seq = base + base[::-1] if symmetric else base
    f = np.array(f0, dtype=float)
    log = []
    for k, j in enumerate(seq):
        try:
            st = newton_kaczmarz_step(f, grid, geoms[j], units[j], datas[j], model, alpha,
                                      gamma, nonneg=nonneg, **kw)
        except IterationError as exc:
            exc.iteration = k
            raise
        log.append((k, j, st.residual_norm, st.cg_iterations))
        f = st.f_new
    return f, log
