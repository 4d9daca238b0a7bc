"""Brute-force reference solutions used by the ``oracle`` subcommand and the tests."""
from __future__ import annotations

import numpy as np

from . import fidelity as fid
from .baselines import BlockLinearSystem, symmetric_cycle_oracle


def grid_prox(spec: fid.FidelitySpec, y: float, tau: float, n=801, levels=6):
    """Global minimizer of ``s(x) + (x - y)^2 / (2 tau)`` by coarse-to-fine grid search.

    ``spec`` must hold scalar data.  Every local minimum of the coarse grid
    is refined by repeated zooming; returns ``(x_best, f_best, f_second)``
    where ``f_second`` is the best value of a different local minimum (``inf``
    if there is none), so callers can recognise near-ties.
    """
    a = float(fid.fidelity_argmin(spec, y))
    # any minimizer obeys (x - y)^2 / (2 tau) <= s(y) - inf s
    s_inf = 0.0
    if spec.kind == "poisson_bright" and float(spec.data) > 0:
        s_inf = float(fid.scalar_fidelity(spec, a))
    with np.errstate(divide="ignore", invalid="ignore"):
        s_y = float(fid.scalar_fidelity(spec, y))
    if not np.isfinite(s_y):
        s_y = float(fid.scalar_fidelity(spec, a)) + (y - a) ** 2 / (2 * tau)
    width = np.sqrt(2 * tau * max(s_y - s_inf, 0.0)) + abs(y - a) + 1e-3
    lo, hi = y - width, y + width
    if spec.kind == "poisson_dark":
        lo = max(lo, 0.0)

    def obj(x):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            v = fid.prox_objective(spec, x, y, tau)
        return np.where(np.isnan(v), np.inf, v)

    xs = np.linspace(lo, hi, n)
    v = obj(xs)
    padded = np.concatenate(([np.inf], v, [np.inf]))
    idx = np.flatnonzero((v <= padded[:-2]) & (v <= padded[2:]))
    cands = []
    step = xs[1] - xs[0]
    for i in idx:
        c, h = xs[i], step
        for _ in range(levels):
            sub = np.linspace(max(c - h, lo), min(c + h, hi), 201)
            sv = obj(sub)
            c = sub[int(np.argmin(sv))]
            h = sub[1] - sub[0]
        cands.append((float(obj(np.array([c]))[0]), float(c)))
    cands.sort()
    f_best, x_best = cands[0]
    f_second = np.inf
    for fv, xv in cands[1:]:
        if abs(xv - x_best) > 1e-6 * (1 + abs(x_best)):
            f_second = fv
            break
    return x_best, f_best, f_second


def random_prox_case(kind, rng):
    """Random scalar fidelity, prox centre ``y`` and step ``tau``."""
    tau = float(10 ** rng.uniform(-2, 2))
    if kind.startswith("poisson"):
        g = 0.0 if rng.random() < 0.1 else float(rng.uniform(0, 5))
        spec = fid.FidelitySpec(kind, np.array(g), exposure=float(rng.uniform(0.5, 2)),
                                intensity=float(rng.uniform(0.5, 2)),
                                omega=float(rng.uniform(0.5, 2)))
        y = float(rng.uniform(-2, 6))
        return spec, y, tau
    g = float(rng.uniform(-3, 3))
    spec = fid.FidelitySpec(kind, np.array(g), sigma=float(rng.uniform(0.3, 3)),
                            nu=float(rng.uniform(0.1, 2)))
    return spec, g + float(rng.uniform(-5, 5)), tau


def prox_suite(n_cases=1000, seed=0, kinds=fid.KINDS, x_tol=1e-5, f_tol=1e-8):
    """Compare :func:`gensart.fidelity.prox` with :func:`grid_prox` on random cases.

    Returns ``{kind: (n_fail, max_dx, max_df)}``.  ``dx`` is only counted
    when the global minimum is not tied (within ``f_tol``) with another
    local minimum.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for kind in kinds:
        fails, mdx, mdf = 0, 0.0, 0.0
        for _ in range(n_cases):
            spec, y, tau = random_prox_case(kind, rng)
            x = float(fid.prox(spec, y, tau))
            xg, fg, f2 = grid_prox(spec, y, tau)
            fx = float(fid.prox_objective(spec, x, y, tau))
            scale = 1.0 + abs(fg)
            df = (fx - fg) / scale
            dx = abs(x - xg) if f2 - fg > f_tol * scale else 0.0
            mdx, mdf = max(mdx, dx), max(mdf, df)
            if dx > x_tol or df > f_tol:
                fails += 1
        out[kind] = (fails, mdx, mdf)
    return out


def cycle_suite(n_systems=50, seed=0):
    """Run the symmetric-cycle oracle on random block systems; returns the gaps."""
    rng = np.random.default_rng(seed)
    gaps = []
    for _ in range(n_systems):
        n = int(rng.integers(5, 31))
        m = tuple(int(k) for k in rng.integers(1, 9, size=int(rng.integers(1, 5))))
        sys = BlockLinearSystem.random(rng, n=n, m=m, alpha=float(rng.uniform(0.5, 10)))
        gaps.append(symmetric_cycle_oracle(sys)[2])
    return np.array(gaps)
