"""Closed-form GenSART updates.

Every scheme follows the same three stages for one view:

1. forward projection of the reference object, ``p_ref = P(f_ref)``,
2. a low-dimensional solve in projection space for an increment ``dp``
   (pixelwise proximal maps, or CG for coupled quadratic problems),
3. a single (back-)projection of ``dp`` added to ``f_ref``.

Each update therefore costs exactly one ``project`` and one
``adjoint``/``back_project`` call, plus one extra projection of a weight
field for the weighted-projector and weighted-L2 families.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import fidelity as fid
from .errors import ConfigurationError, IterationError, UnsupportedCombinationError
from .geometry import (Geometry, UnitProjections, VolumeGrid, adjoint, back_project,
                       masked_divide, project, ray_density, unit_projections)
from .linalg import minimize_bracketed, pcg

FAMILIES = ("l2", "weighted_l2", "weighted_projector", "w12", "lq")


@dataclass(frozen=True, eq=False)
class ProjectionView:
    """One view: geometry, its data fidelity and cached unit projections."""

    grid: VolumeGrid
    geometry: Geometry
    fidelity: fid.FidelitySpec
    units: UnitProjections | None = None

    def __post_init__(self):
        self.geometry.validate(self.grid)
        if self.fidelity.data.shape != self.geometry.det_shape:
            raise ConfigurationError(
                f"data shape {self.fidelity.data.shape} does not match detector {self.geometry.det_shape}")
        if self.units is None:
            object.__setattr__(self, "units", unit_projections(self.grid, self.geometry))

    @property
    def data(self) -> np.ndarray:
        return self.fidelity.data

    @property
    def mu(self) -> np.ndarray:
        return self.geometry.pixel_measure()

    def with_fidelity(self, spec) -> "ProjectionView":
        return ProjectionView(self.grid, self.geometry, spec, self.units)


@dataclass(frozen=True, eq=False)
class PenaltySpec:
    """Penalty family of a Kaczmarz step.

    Parameters
    ----------
    family : {'l2', 'weighted_l2', 'weighted_projector', 'w12', 'lq'}
    alpha : float
        Regularization weight.
    weight : ndarray, optional
        Volume weight ``w`` (weighted_l2) or ``lambda`` (weighted_projector).
    gamma : float
        Gradient share of the W^{1,2} penalty, in ``[0, 1]``.
    q : float
        Exponent of the Lq penalty, ``q >= 1``.
    """

    family: str = "l2"
    alpha: float = 1.0
    weight: np.ndarray | None = field(default=None, repr=False)
    gamma: float = 0.0
    q: float = 2.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown penalty family {self.family!r}")
        if not self.alpha > 0:
            raise ConfigurationError("alpha must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError("gamma must lie in [0, 1]")
        if self.family == "lq" and not self.q >= 1:
            raise ConfigurationError("Lq penalties require q >= 1")
        if self.family in ("weighted_l2", "weighted_projector"):
            if self.weight is None:
                raise ConfigurationError(f"{self.family} requires a weight field")
            w = np.asarray(self.weight, dtype=float)
            if self.family == "weighted_l2" and np.any(w <= 0):
                raise ConfigurationError("weighted_l2 weights must be positive")
            if self.family == "weighted_projector" and np.any(np.abs(w) == 0):
                raise ConfigurationError("projector weights must be bounded away from zero")

    def check_geometry(self, geom: Geometry):
        if self.family == "lq" and not geom.is_parallel:
            raise UnsupportedCombinationError("Lq penalties are only available for parallel beams")


@dataclass
class StepResult:
    f_new: np.ndarray
    p_ref: np.ndarray
    dp: np.ndarray
    objective: float = float("nan")


def _proj_objective(view, p, penalty_density):
    """``sum(mu * (s(p) + penalty_density))`` over the support."""
    mu = np.broadcast_to(view.mu, p.shape)
    with np.errstate(invalid="ignore"):
        val = mu * (fid.scalar_fidelity(view.fidelity, p) + penalty_density)
    return float(np.sum(val))


# --------------------------------------------------------------------------
# L2 family
# --------------------------------------------------------------------------

def _l2(f_ref, view: ProjectionView, alpha) -> StepResult:
    g, geom = view.grid, view.geometry
    ut = view.units.u_tilde
    p_ref = project(f_ref, g, geom)
    c = np.sqrt(ut)
    dp = fid.solve_projection_problem(view.fidelity, p_ref, c, alpha)
    f_new = f_ref + adjoint(masked_divide(dp, ut, 0.5), g, geom)
    return StepResult(f_new, p_ref, dp, _proj_objective(view, p_ref + c * dp, alpha * dp ** 2))


def gensart_l2(f_ref, view: ProjectionView, alpha: float) -> np.ndarray:
    """Kaczmarz step ``argmin_f S(P f) + alpha ||f - f_ref||^2``."""
    return _l2(f_ref, view, alpha).f_new


def _weighted_projector(f_ref, view: ProjectionView, alpha, lam, lam_p=None) -> StepResult:
    g, geom = view.grid, view.geometry
    ut = view.units.u_tilde
    lam = np.asarray(lam, dtype=float)
    p_ref = project(lam * f_ref, g, geom)
    if lam_p is None:
        lam_p = masked_divide(project(ray_density(g, geom, view.units.density) * lam ** 2, g, geom), ut)
    c = lam_p * np.sqrt(ut)
    dp = fid.solve_projection_problem(view.fidelity, p_ref, c, alpha,
                                      penalty_weight=np.where(ut > 0, lam_p, 1.0))
    f_new = f_ref + lam * adjoint(masked_divide(dp, ut, 0.5), g, geom)
    obj = _proj_objective(view, p_ref + c * dp, alpha * lam_p * dp ** 2)
    return StepResult(f_new, p_ref, dp, obj)


def gensart_weighted_projector(f_ref, view: ProjectionView, alpha: float, lam) -> np.ndarray:
    """Kaczmarz step ``argmin_f S(P(lam f)) + alpha ||f - f_ref||^2``."""
    return _weighted_projector(f_ref, view, alpha, lam).f_new


def _weighted_l2(f_ref, view: ProjectionView, alpha, w) -> StepResult:
    g, geom = view.grid, view.geometry
    ut = view.units.u_tilde
    w = np.asarray(w, dtype=float)
    p_ref = project(f_ref, g, geom)
    v_p = masked_divide(project(w * ray_density(g, geom, view.units.density), g, geom), ut)
    c = v_p * np.sqrt(ut)
    dp = fid.solve_projection_problem(view.fidelity, p_ref, c, alpha,
                                      penalty_weight=np.where(ut > 0, v_p, 1.0))
    f_new = f_ref + w * adjoint(masked_divide(dp, ut, 0.5), g, geom)
    obj = _proj_objective(view, p_ref + c * dp, alpha * v_p * dp ** 2)
    return StepResult(f_new, p_ref, dp, obj)


def gensart_weighted_l2(f_ref, view: ProjectionView, alpha: float, w) -> np.ndarray:
    """Kaczmarz step ``argmin_f S(P f) + alpha ||w^{-1/2} (f - f_ref)||^2``."""
    return _weighted_l2(f_ref, view, alpha, w).f_new


# --------------------------------------------------------------------------
# Sobolev family
# --------------------------------------------------------------------------

class SupportGradient:
    """Forward-difference gradient energy on the detector restricted to a support.

    ``energy(z) = sum_a sum_pairs mu_pair * U_pair * ((z_j - z_i) / d_a)**2``
    over neighbour pairs along each detector axis whose two pixels both lie
    in the support; ``U_pair`` is the mean of ``u`` at the two pixels.
    """

    def __init__(self, u, mu, pitch):
        u = np.asarray(u, dtype=float)
        mu = np.broadcast_to(np.asarray(mu, dtype=float), u.shape)
        sup = u > 0
        self.shape = u.shape
        self.weights = []
        for a in range(u.ndim):
            sl0 = [slice(None)] * u.ndim
            sl1 = [slice(None)] * u.ndim
            sl0[a] = slice(0, -1)
            sl1[a] = slice(1, None)
            sl0, sl1 = tuple(sl0), tuple(sl1)
            both = sup[sl0] & sup[sl1]
            wgt = 0.5 * (u[sl0] + u[sl1]) * 0.5 * (mu[sl0] + mu[sl1]) / pitch[a] ** 2
            self.weights.append((sl0, sl1, np.where(both, wgt, 0.0)))

    def diff(self, z):
        return [z[s1] - z[s0] for s0, s1, _ in self.weights]

    def energy(self, z) -> float:
        return float(sum(np.sum(w * d * d) for (_, _, w), d in zip(self.weights, self.diff(z))))

    def apply(self, z):
        """``D^T W D z``, the gradient of ``energy / 2``."""
        out = np.zeros(self.shape)
        for (s0, s1, w), d in zip(self.weights, self.diff(z)):
            v = w * d
            out[s0] -= v
            out[s1] += v
        return out

    def diagonal(self):
        out = np.zeros(self.shape)
        for s0, s1, w in self.weights:
            out[s0] += w
            out[s1] += w
        return out


def w12_increment(view: ProjectionView, p_ref, alpha, gamma, rtol=1e-8, maxiter=200):
    """Projection-space increment of the W^{1,2} scheme.

    Minimizes ``S(p_ref + u^{1/2} p) + alpha (1-gamma) ||p||^2
    + alpha gamma ||U^{1/2} grad(u^{-1/2} p)||^2`` over ``p`` on the support.
    """
    u = view.units.u
    spec = view.fidelity
    if gamma == 0.0:
        return fid.solve_projection_problem(spec, p_ref, np.sqrt(u), alpha)
    sup = u > 0
    mu = np.broadcast_to(view.mu, u.shape)
    su = np.sqrt(u)
    isu = masked_divide(1.0, u, 0.5)
    grad = SupportGradient(u, mu, view.geometry.pitch)
    a1 = alpha * (1.0 - gamma)
    a2 = alpha * gamma
    if spec.is_quadratic:
        aw = np.broadcast_to(spec.quadratic_weight(), u.shape)
        diag_fid = mu * aw * u + a1 * mu

        def apply_a(p):
            out = diag_fid * p + a2 * isu * grad.apply(isu * p)
            return np.where(sup, out, p)

        rhs = np.where(sup, mu * aw * su * (spec.data - p_ref), 0.0)
        diag = np.where(sup, diag_fid + a2 * isu ** 2 * grad.diagonal(), 1.0)
        dp, _ = pcg(apply_a, rhs, precond=1.0 / diag, rtol=rtol, maxiter=maxiter)
        return np.where(sup, dp, 0.0)
    return _w12_smooth(spec, p_ref, su, isu, sup, mu, grad, a1, a2)


def _w12_smooth(spec, p_ref, su, isu, sup, mu, grad, a1, a2):
    idx = np.flatnonzero(sup)
    full = np.zeros(sup.shape)

    def unpack(v):
        full.flat[idx] = v
        return full

    def fun(v):
        p = unpack(v)
        x = p_ref + su * p
        s = fid.scalar_fidelity(spec, x)
        val = np.sum((mu * s)[sup]) + a1 * np.sum(mu * p * p) + a2 * grad.energy(isu * p)
        gr = mu * su * fid.fidelity_derivative(spec, x) + 2 * a1 * mu * p \
            + 2 * a2 * isu * grad.apply(isu * p)
        return float(val), gr.flat[idx].copy()

    bounds = None
    if spec.kind == "poisson_dark":
        lo = (1e-12 - p_ref.flat[idx]) / su.flat[idx]
        bounds = list(zip(lo, [None] * len(idx)))
        x0 = np.maximum(lo, 0.0)
    else:
        x0 = np.zeros(len(idx))
    res = optimize.minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                            options={"maxiter": 2000, "gtol": 1e-10})
    if not res.success and not np.all(np.isfinite(res.x)):
        raise IterationError(f"projection-space solve failed: {res.message}")
    return unpack(res.x).copy()


def _w12(f_ref, view: ProjectionView, alpha, gamma, **kw) -> StepResult:
    g, geom = view.grid, view.geometry
    p_ref = project(f_ref, g, geom)
    u = view.units.u
    dp = w12_increment(view, p_ref, alpha, gamma, **kw)
    f_new = f_ref + back_project(masked_divide(dp, u, 0.5), g, geom)
    obj = _proj_objective(view, p_ref + np.sqrt(u) * dp, alpha * (1 - gamma) * dp ** 2)
    if gamma > 0:
        grad = SupportGradient(u, view.mu, geom.pitch)
        obj += alpha * gamma * grad.energy(masked_divide(dp, u, 0.5))
    return StepResult(f_new, p_ref, dp, obj)


def gensart_w12(f_ref, view: ProjectionView, alpha: float, gamma: float, **kw) -> np.ndarray:
    """Kaczmarz step with the ray-adapted W^{1,2} penalty (update via back-projection)."""
    if not 0.0 <= gamma <= 1.0:
        raise ConfigurationError("gamma must lie in [0, 1]")
    return _w12(f_ref, view, alpha, gamma, **kw).f_new


# --------------------------------------------------------------------------
# Lq family
# --------------------------------------------------------------------------

def lq_increment(spec: fid.FidelitySpec, p_ref, u, alpha, q):
    """Pixelwise minimizer of ``s(p_ref + u^{1/2} y) + alpha u^{1-q/2} |y|^q``.

    In the variable ``x = p_ref + u^{1/2} y`` each pixel minimizes
    ``s(x) + kappa |x - p_ref|^q`` with ``kappa = alpha u^{1-q}``.  For q = 1
    with a quadratic fidelity this is soft thresholding; otherwise a
    bracketed 1D search between ``p_ref`` and the minimizer of ``s`` is used.
    """
    p_ref = np.asarray(p_ref, dtype=float)
    u = np.asarray(u, dtype=float)
    on = u > 0
    dp = np.zeros_like(p_ref)
    if not np.any(on):
        return dp
    if q == 2.0:
        return fid.solve_projection_problem(spec, p_ref, np.sqrt(u), alpha)
    sub = fid._subset_spec(spec, on)
    pr, uu = p_ref[on], u[on]
    kappa = alpha * uu ** (1.0 - q)
    if q == 1.0 and spec.is_quadratic:
        a = np.broadcast_to(sub.quadratic_weight(), pr.shape)
        r = sub.data - pr
        t = kappa / (2 * a)
        x = pr + np.sign(r) * np.maximum(np.abs(r) - t, 0.0)
    else:
        xs = fid.fidelity_argmin(sub, pr + 50.0 * (1.0 + np.abs(pr)))
        lo = np.minimum(pr, xs)
        hi = np.maximum(pr, xs)
        if sub.kind == "poisson_dark":
            lo = np.maximum(lo, 0.0)
            hi = np.maximum(hi, lo)

        def obj(x):
            with np.errstate(invalid="ignore", over="ignore"):
                v = fid.scalar_fidelity(sub, x) + kappa * np.abs(x - pr) ** q
            return np.where(np.isnan(v), np.inf, v)

        x = minimize_bracketed(obj, lo, hi)
    dp[on] = (x - pr) / np.sqrt(uu)
    return dp


def _lq(f_ref, view: ProjectionView, alpha, q) -> StepResult:
    g, geom = view.grid, view.geometry
    if not geom.is_parallel:
        raise UnsupportedCombinationError("Lq penalties are only available for parallel beams")
    if not q >= 1:
        raise ConfigurationError("Lq penalties require q >= 1")
    u = view.units.u
    p_ref = project(f_ref, g, geom)
    dp = lq_increment(view.fidelity, p_ref, u, alpha, float(q))
    f_new = f_ref + adjoint(masked_divide(dp, u, 0.5), g, geom)
    pen = alpha * np.where(u > 0, np.where(u > 0, u, 1.0) ** (1 - q / 2), 0.0) * np.abs(dp) ** q
    return StepResult(f_new, p_ref, dp, _proj_objective(view, p_ref + np.sqrt(u) * dp, pen))


def gensart_lq(f_ref, view: ProjectionView, alpha: float, q: float) -> np.ndarray:
    """Kaczmarz step ``argmin_f S(P f) + alpha ||f - f_ref||_q^q`` (parallel beams)."""
    return _lq(f_ref, view, alpha, q).f_new


# --------------------------------------------------------------------------
# Dispatch and objectives
# --------------------------------------------------------------------------

def gensart_update(f_ref, view: ProjectionView, penalty: PenaltySpec, alpha=None) -> StepResult:
    """Apply the scheme selected by ``penalty`` (``alpha`` overrides ``penalty.alpha``)."""
    penalty.check_geometry(view.geometry)
    a = penalty.alpha if alpha is None else alpha
    fam = penalty.family
    if fam == "l2":
        return _l2(f_ref, view, a)
    if fam == "weighted_projector":
        return _weighted_projector(f_ref, view, a, penalty.weight)
    if fam == "weighted_l2":
        return _weighted_l2(f_ref, view, a, penalty.weight)
    if fam == "w12":
        return _w12(f_ref, view, a, penalty.gamma)
    return _lq(f_ref, view, a, penalty.q)


def volume_gradient_energy(f, grid: VolumeGrid) -> float:
    """``h^d * sum |forward differences / h|^2`` over pairs inside Omega."""
    m = grid.mask
    e = 0.0
    for a in range(grid.ndim):
        d = np.diff(f, axis=a) / grid.voxel_size
        both = np.logical_and(np.take(m, range(m.shape[a] - 1), axis=a),
                              np.take(m, range(1, m.shape[a]), axis=a))
        e += float(np.sum(np.where(both, d * d, 0.0)))
    return grid.cell_volume * e


def penalty_value(penalty: PenaltySpec, f, f_ref, grid: VolumeGrid, alpha=None) -> float:
    """Discrete penalty of the step, evaluated on the grid."""
    a = penalty.alpha if alpha is None else alpha
    d = f - f_ref
    fam = penalty.family
    if fam in ("l2", "weighted_projector"):
        return a * grid.inner(d, d)
    if fam == "weighted_l2":
        return a * grid.inner(d / penalty.weight, d)
    if fam == "w12":
        return a * ((1 - penalty.gamma) * grid.inner(d, d)
                    + penalty.gamma * volume_gradient_energy(d, grid))
    return a * grid.cell_volume * float(np.sum(np.abs(d) ** penalty.q))


def step_objective(f, f_ref, view: ProjectionView, penalty: PenaltySpec, alpha=None) -> float:
    """Fidelity plus penalty of a single Kaczmarz step at ``f``."""
    g = view.grid
    arg = f * penalty.weight if penalty.family == "weighted_projector" else f
    p = project(arg, g, view.geometry)
    return fid.eval_fidelity(view.fidelity, p, view.mu) + penalty_value(penalty, f, f_ref, g, alpha)
