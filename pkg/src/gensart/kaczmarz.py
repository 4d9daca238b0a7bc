"""Kaczmarz cycles built from GenSART steps.

The driver walks a processing order of views, applies one regularized
Kaczmarz step per view (a GenSART update for tomographic views, an exact
dense solve for matrix blocks) and optionally interleaves box projections,
a static quadratic regularizer and a volume-space splitting step.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, GensartError, IterationError
from .schemes import PenaltySpec, gensart_update, volume_gradient_energy
from .linalg import pcg

METRIC_COLUMNS = ("iter", "view", "residual", "objective", "update_norm")


def multilevel_order(n_proj: int) -> list[int]:
    """Multilevel (bit-reversal) ordering of ``n_proj`` equally spaced views.

    The angular index range is halved repeatedly so that consecutive views
    are far apart.  For non powers of two the bit-reversal permutation of
    the next power of two is filtered to the valid indices.

    >>> multilevel_order(8)
    [0, 4, 2, 6, 1, 5, 3, 7]
    """
    n = int(n_proj)
    if n < 1:
        raise ConfigurationError("need at least one view")
    bits = max((n - 1).bit_length(), 0)
    out = []
    for i in range(1 << bits):
        r = int(format(i, f"0{bits}b")[::-1], 2) if bits else 0
        if r < n:
            out.append(r)
    return out


def apply_box(f, f_min=None, f_max=None, mask=None):
    """Clamp ``f`` to ``[f_min, f_max]`` inside ``mask``; values outside are kept."""
    if f_min is not None and f_max is not None and f_min > f_max:
        raise ConfigurationError("box bounds need f_min <= f_max")
    lo = -np.inf if f_min is None else f_min
    hi = np.inf if f_max is None else f_max
    clamped = np.maximum(np.minimum(f, hi), lo)
    if mask is None:
        return clamped
    return np.where(mask, clamped, f)


def merge_static_regularizer(f_k, f_static, alpha1, alpha2):
    """Fold ``alpha2 ||f - f_static||^2`` into the step penalty ``alpha1 ||f - f_k||^2``.

    Returns the merged reference ``(alpha1 f_k + alpha2 f_static) / (alpha1 + alpha2)``
    and the merged weight ``alpha1 + alpha2``.
    """
    if not alpha1 > 0 or alpha2 < 0:
        raise ConfigurationError("need alpha1 > 0 and alpha2 >= 0")
    if alpha2 == 0:
        return f_k, alpha1
    a = alpha1 + alpha2
    return (alpha1 * f_k + alpha2 * f_static) / a, a


# --------------------------------------------------------------------------
# Volume-space penalties for splitting
# --------------------------------------------------------------------------

class VolumePenalty:
    """Penalty ``R`` used by :func:`splitting_step`; subclasses supply ``prox`` and/or ``grad``."""

    def value(self, f) -> float:
        raise NotImplementedError

    prox: Callable | None = None
    grad: Callable | None = None


class ZeroPenalty(VolumePenalty):
    def value(self, f):
        return 0.0

    def prox(self, f, sigma):
        return f

    def grad(self, f):
        return np.zeros_like(f)


class SquaredNormPenalty(VolumePenalty):
    """``R(f) = c * sum(f**2)``."""

    def __init__(self, c=1.0):
        self.c = float(c)

    def value(self, f):
        return self.c * float(np.sum(f * f))

    def prox(self, f, sigma):
        return f / (1 + 2 * sigma * self.c)

    def grad(self, f):
        return 2 * self.c * f


class GradientEnergyPenalty(VolumePenalty):
    """``R(f) = c * sum |forward differences|^2`` (unit spacing, Neumann ends)."""

    def __init__(self, c=1.0):
        self.c = float(c)

    @staticmethod
    def _dtd(f):
        out = np.zeros_like(f)
        for a in range(f.ndim):
            d = np.diff(f, axis=a)
            lo = [slice(None)] * f.ndim
            hi = [slice(None)] * f.ndim
            lo[a] = slice(0, -1)
            hi[a] = slice(1, None)
            out[tuple(lo)] -= d
            out[tuple(hi)] += d
        return out

    def value(self, f):
        return self.c * float(sum(np.sum(np.diff(f, axis=a) ** 2) for a in range(f.ndim)))

    def grad(self, f):
        return 2 * self.c * self._dtd(f)

    def prox(self, f, sigma):
        x, _ = pcg(lambda v: v + 2 * sigma * self.c * self._dtd(v), f, rtol=1e-10, maxiter=500)
        return x


def splitting_step(f_half, reg: VolumePenalty | None, sigma: float, mode: str = "backward"):
    """Second half of a Kaczmarz splitting iteration.

    ``backward``: ``argmin R(f) + ||f - f_half||^2 / (2 sigma)`` via ``reg.prox``;
    ``forward``:  ``f_half - sigma * grad R(f_half)``.
    """
    if reg is None:
        return f_half
    if mode == "backward":
        if getattr(reg, "prox", None) is None:
            raise ConfigurationError("backward splitting needs a proximal map")
        return reg.prox(f_half, sigma)
    if mode == "forward":
        if getattr(reg, "grad", None) is None:
            raise ConfigurationError("forward splitting needs a gradient")
        return f_half - sigma * reg.grad(f_half)
    raise ConfigurationError(f"unknown splitting mode {mode!r}")


@dataclass
class SplittingSpec:
    """Volume-space penalty interleaved after each data step.

    ``tau`` sets the data step weight ``alpha = 1 / (2 tau)``; ``None`` keeps
    the penalty's alpha (i.e. ``tau = 1 / (2 alpha)``).
    """

    reg: VolumePenalty
    sigma: float = 1.0
    mode: str = "backward"
    tau: float | None = None


# --------------------------------------------------------------------------
# Matrix blocks
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DenseBlock:
    """Abstract linear view ``A f = g`` with Euclidean inner products."""

    A: np.ndarray
    data: np.ndarray

    def step(self, f, f_ref, alpha):
        """Exact minimizer of ``||A f - g||^2 + alpha ||f - f_ref||^2``."""
        A = self.A
        r = self.data - A @ f_ref
        y = np.linalg.solve(A @ A.T + alpha * np.eye(A.shape[0]), r)
        f_new = f_ref + A.T @ y
        obj = float(np.sum((A @ f_new - self.data) ** 2) + alpha * np.sum((f_new - f_ref) ** 2))
        return f_new, float(np.linalg.norm(A @ f - self.data)), obj


# --------------------------------------------------------------------------
# Plan and run
# --------------------------------------------------------------------------

@dataclass
class IterationPlan:
    """Processing order and per-step options of a Kaczmarz run.

    Parameters
    ----------
    n_views : int
    penalty : PenaltySpec
    cycle : {'plain', 'symmetric'}
        Symmetric cycles append the reversed sweep.
    ordering : {'sequential', 'multilevel'}
    n_cycles : int
    order : sequence of int, optional
        Explicit base sweep overriding ``ordering``.
    box : (f_min, f_max), optional
    static_reg : (alpha2, f_static), optional
    splitting : SplittingSpec, optional
    k_stop : int, optional
        Number of steps to run; defaults to the full sequence.
    """

    n_views: int
    penalty: PenaltySpec = field(default_factory=PenaltySpec)
    cycle: str = "symmetric"
    ordering: str = "multilevel"
    n_cycles: int = 1
    order: Sequence[int] | None = None
    box: tuple | None = None
    static_reg: tuple | None = None
    splitting: SplittingSpec | None = None
    k_stop: int | None = None

    def __post_init__(self):
        if self.cycle not in ("plain", "symmetric"):
            raise ConfigurationError(f"unknown cycle type {self.cycle!r}")
        if self.ordering not in ("sequential", "multilevel"):
            raise ConfigurationError(f"unknown ordering {self.ordering!r}")
        if self.n_cycles < 0:
            raise ConfigurationError("n_cycles must be nonnegative")
        if self.box is not None:
            lo, hi = self.box
            if lo is not None and hi is not None and lo > hi:
                raise ConfigurationError("box bounds need f_min <= f_max")
        if self.order is not None and sorted(self.order) != list(range(self.n_views)):
            raise ConfigurationError("explicit order must be a permutation of the views")
        if self.static_reg is not None and self.static_reg[0] < 0:
            raise ConfigurationError("static regularizer weight must be nonnegative")

    def sweep(self) -> list[int]:
        if self.order is not None:
            return list(self.order)
        if self.ordering == "multilevel":
            return multilevel_order(self.n_views)
        return list(range(self.n_views))

    def sequence(self) -> list[int]:
        base = self.sweep()
        one = base + base[::-1] if self.cycle == "symmetric" else base
        seq = one * self.n_cycles
        if self.k_stop is not None:
            if self.k_stop > len(seq):
                reps = -(-self.k_stop // len(one))
                seq = one * reps
            seq = seq[: self.k_stop]
        return seq


@dataclass
class RunResult:
    f: np.ndarray
    metrics: list = field(default_factory=list)

    def write_metrics(self, path):
        write_metrics_csv(self.metrics, path)


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in METRIC_COLUMNS})


def run(plan: IterationPlan, views: Sequence, f0, callback=None) -> RunResult:
    """Run the Kaczmarz iteration described by ``plan``.

    ``views`` holds :class:`ProjectionView` or :class:`DenseBlock` objects
    (not mixed).  Returns the final iterate and per-step metrics.
    """
    if len(views) != plan.n_views:
        raise ConfigurationError(f"plan expects {plan.n_views} views, got {len(views)}")
    dense = bool(views) and isinstance(views[0], DenseBlock)
    if not dense:
        for v in views:
            plan.penalty.check_geometry(v.geometry)
    mask = None if dense or not views else views[0].grid.mask
    f = np.array(f0, dtype=float, copy=True)
    rows = []
    alpha1 = plan.penalty.alpha
    if plan.splitting is not None and plan.splitting.tau is not None:
        alpha1 = 1.0 / (2.0 * plan.splitting.tau)
    for k, j in enumerate(plan.sequence()):
        view = views[j]
        f_ref, alpha = f, alpha1
        if plan.static_reg is not None:
            f_ref, alpha = merge_static_regularizer(f, plan.static_reg[1], alpha1, plan.static_reg[0])
        try:
            if dense:
                f_new, res, obj = view.step(f, f_ref, alpha)
            else:
                st = gensart_update(f_ref, view, plan.penalty, alpha=alpha)
                f_new, obj = st.f_new, st.objective
                res = float(np.linalg.norm(st.p_ref - view.data))
            if plan.splitting is not None:
                sp = plan.splitting
                f_new = splitting_step(f_new, sp.reg, sp.sigma, sp.mode)
            if plan.box is not None:
                f_new = apply_box(f_new, plan.box[0], plan.box[1], mask)
        except GensartError as exc:
            exc.iteration = k
            raise
        if not np.all(np.isfinite(f_new)):
            raise IterationError("non-finite iterate", iteration=k)
        upd = float(np.linalg.norm(f_new - f))
        if not dense:
            upd *= views[0].grid.cell_volume ** 0.5
        rows.append({"iter": k, "view": j, "residual": res, "objective": obj, "update_norm": upd})
        f = f_new
        if callback is not None:
            callback(k, j, f)
    return RunResult(f, rows)


__all__ = [
    "IterationPlan", "RunResult", "SplittingSpec", "DenseBlock", "run", "multilevel_order",
    "apply_box", "merge_static_regularizer", "splitting_step", "VolumePenalty", "ZeroPenalty",
    "SquaredNormPenalty", "GradientEnergyPenalty", "write_metrics_csv", "METRIC_COLUMNS",
    "volume_gradient_energy",
]
