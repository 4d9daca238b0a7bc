"""Small numerical helpers shared by the projection-space solvers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IterationError


@dataclass
class CGInfo:
    iterations: int
    residual: float
    converged: bool


def pcg(apply_a, b, precond=None, rtol=1e-8, maxiter=200, x0=None, raise_on_fail=True):
    """Preconditioned conjugate gradients for a symmetric positive definite operator.

    Parameters
    ----------
    apply_a : callable
        ``x -> A x`` on arrays shaped like ``b``.
    b : ndarray
        Right-hand side.
    precond : ndarray or callable, optional
        Inverse diagonal (array) or an operator ``r -> M^{-1} r``.
    rtol : float
        Stop when ``||A x - b|| <= rtol * ||b||``.
    maxiter : int
    x0 : ndarray, optional
    raise_on_fail : bool
        Raise :class:`IterationError` if the tolerance is not met.

    Returns
    -------
    x : ndarray
    info : CGInfo
    """
    b = np.asarray(b, dtype=float)
    if callable(precond):
        m_inv = precond
    elif precond is None:
        def m_inv(r):
            return r
    else:
        d = np.asarray(precond, dtype=float)

        def m_inv(r):
            return d * r
    bnorm = float(np.linalg.norm(b))
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    if bnorm == 0.0:
        return np.zeros_like(b), CGInfo(0, 0.0, True)
    r = b - apply_a(x) if x0 is not None else b.copy()
    z = m_inv(r)
    p = z.copy()
    rz = float(np.vdot(r, z))
    res = float(np.linalg.norm(r)) / bnorm
    it = 0
    while res > rtol and it < maxiter:
        ap = apply_a(p)
        pap = float(np.vdot(p, ap))
        if not pap > 0:
            break
        step = rz / pap
        x += step * p
        r -= step * ap
        res = float(np.linalg.norm(r)) / bnorm
        it += 1
        if res <= rtol:
            break
        z = m_inv(r)
        rz_new = float(np.vdot(r, z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    ok = res <= rtol
    if not ok and raise_on_fail:
        raise IterationError(f"conjugate gradients stopped after {it} iterations", residual=res)
    return x, CGInfo(it, res, ok)


def minimize_bracketed(fun, lo, hi, n_grid=201, iters=80):
    """Vectorized global-then-golden 1D minimization on ``[lo, hi]``.

    ``fun`` maps an array of candidate points (same shape as ``lo``) to
    objective values.  The best grid point is refined by golden-section
    search on its two neighbouring cells.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    ts = np.linspace(0.0, 1.0, n_grid)
    best_val = np.full(lo.shape, np.inf)
    best_t = np.zeros(lo.shape)
    for t in ts:
        v = fun(lo + t * (hi - lo))
        better = v < best_val
        best_val = np.where(better, v, best_val)
        best_t = np.where(better, t, best_t)
    step = 1.0 / (n_grid - 1)
    a = lo + np.clip(best_t - step, 0.0, 1.0) * (hi - lo)
    b = lo + np.clip(best_t + step, 0.0, 1.0) * (hi - lo)
    gr = (np.sqrt(5.0) - 1.0) / 2.0
    c = b - gr * (b - a)
    d = a + gr * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(iters):
        left = fc < fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = np.where(left, b - gr * (b - a), d)
        new_d = np.where(left, c, a + gr * (b - a))
        fe = fun(np.where(left, new_c, new_d))
        fc, fd = np.where(left, fe, fd), np.where(left, fc, fe)
        c, d = new_c, new_d
    x = 0.5 * (a + b)
    # keep the grid point if refinement somehow did worse
    xb = lo + best_t * (hi - lo)
    return np.where(fun(x) <= best_val, x, xb)
