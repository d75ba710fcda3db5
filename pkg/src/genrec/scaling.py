"""Offset power-law and log-law fits of metric-vs-backbone-size curves.

The offset law is ``P(N) = P0 - (N / N0) ** -a`` with ``a > 0``. It is fitted by
least squares on the raw metric values. ``N0`` is carried as ``ln N0`` and ``a``
as a softplus pre-image, so the inner damped Gauss-Newton solver is
unconstrained. ``P0`` is never clamped: a fitted ceiling above 1 on an MRR
curve is an estimation artifact worth seeing, not hiding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateFitError, InputError

MAX_ITER = 500
STEP_TOL = 1e-10
A_PREIMAGE_MIN = -700.0


@dataclass(frozen=True)
class ScalingPoint:
    N: float
    P: float
    task: str = ""


@dataclass(frozen=True)
class OffsetFit:
    P0: float
    N0: float
    a: float
    rmse: float
    iterations: int = 0
    grad_norm: float = 0.0

    def predict(self, N):
        return self.P0 - np.power(np.asarray(N, dtype=float) / self.N0, -self.a)

    def headroom(self, N):
        return np.power(np.asarray(N, dtype=float) / self.N0, -self.a)


@dataclass(frozen=True)
class LogFit:
    slope: float
    intercept: float
    rmse: float

    def predict(self, N):
        return self.slope * np.log(np.asarray(N, dtype=float)) + self.intercept


@dataclass(frozen=True)
class FitComparison:
    offset: OffsetFit
    log: LogFit

    @property
    def reduction(self) -> float:
        return rmse_reduction(self.offset.rmse, self.log.rmse)


def rmse_reduction(rmse_offset: float, rmse_log: float) -> float:
    """Relative RMSE reduction of the offset fit over the log fit."""
    if rmse_log == 0.0:
        return 0.0 if rmse_offset == 0.0 else -math.inf
    return 1.0 - rmse_offset / rmse_log


def _prepare(points) -> tuple[np.ndarray, np.ndarray]:
    """Deduplicate by N (keeping the max P) and sort so fits are order-free."""
    best: dict[float, float] = {}
    for p in points:
        N, P = (p.N, p.P) if isinstance(p, ScalingPoint) else (p[0], p[1])
        N, P = float(N), float(P)
        if not (math.isfinite(N) and math.isfinite(P)) or N < 1:
            raise InputError(f"invalid scaling point N={N} P={P}")
        best[N] = max(P, best.get(N, -math.inf))
    Ns = np.array(sorted(best), dtype=float)
    Ps = np.array([best[n] for n in Ns], dtype=float)
    return Ns, Ps


def _softplus_inv(a):
    return a + math.log(-math.expm1(-a))


def _residuals(theta, x, y):
    """Residuals for a stack of parameter rows ``(M, 3)``; returns (r, e, a)."""
    P0, c, sp = theta[:, 0:1], theta[:, 1:2], theta[:, 2:3]
    a = np.logaddexp(0.0, sp)
    e = np.exp(-a * (x[None, :] - c))
    return P0 - e - y[None, :], e, a


def _jacobian(x, e, a, theta):
    J = np.empty(e.shape + (3,))
    J[..., 0] = 1.0
    J[..., 1] = -a * e
    sig = np.exp(-np.logaddexp(0.0, -theta[:, 2:3]))
    J[..., 2] = (x[None, :] - theta[:, 1:2]) * e * sig
    return J


def _gauss_newton(theta, x, y):
    """Damped Gauss-Newton run on every start at once.

    Each start keeps its own damping factor: an accepted step divides it by 3,
    a rejected one multiplies it by 4 and is retried on the next pass. A start
    stops when its accepted step norm falls below ``STEP_TOL``, when damping
    exceeds 1e16, or after ``MAX_ITER`` accepted steps.
    """
    theta = np.array(theta, dtype=float).reshape(-1, 3)
    M = theta.shape[0]
    with np.errstate(over="ignore", invalid="ignore"):
        r, e, a = _residuals(theta, x, y)
    cost = np.einsum("mn,mn->m", r, r)
    lam = np.full(M, 1e-3)
    iters = np.zeros(M, dtype=np.int64)
    active = np.isfinite(cost)
    eye = np.eye(3)
    while active.any():
        idx = np.flatnonzero(active)
        th = theta[idx]
        J = _jacobian(x, e[idx], a[idx], th)
        g = np.einsum("mnk,mn->mk", J, r[idx])
        A = np.einsum("mnk,mnl->mkl", J, J)
        diag = np.einsum("mkk->mk", A).copy()
        diag[diag == 0.0] = 1.0
        lhs = A + lam[idx, None, None] * diag[:, :, None] * eye
        with np.errstate(over="ignore", invalid="ignore"):
            ok = np.isfinite(lhs).all(axis=(1, 2)) & (np.abs(np.linalg.det(lhs)) > 0)
            step = np.zeros_like(th)
            if ok.any():
                step[ok] = -np.linalg.solve(lhs[ok], g[ok][..., None])[..., 0]
            cand = th + step
            # softplus(-700) ~ 1e-304 keeps a strictly positive despite underflow
            cand[:, 2] = np.maximum(cand[:, 2], A_PREIMAGE_MIN)
            r_new, e_new, a_new = _residuals(cand, x, y)
            new_cost = np.einsum("mn,mn->m", r_new, r_new)
        accept = ok & np.isfinite(new_cost) & (new_cost <= cost[idx])
        acc = idx[accept]
        theta[acc], r[acc], e[acc], a[acc], cost[acc] = cand[accept], r_new[accept], e_new[accept], \
            a_new[accept], new_cost[accept]
        lam[acc] = np.maximum(lam[acc] / 3.0, 1e-12)
        iters[acc] += 1
        rej = idx[~accept]
        lam[rej] *= 4.0
        small = np.linalg.norm(step, axis=1) < STEP_TOL
        done = np.zeros(M, dtype=bool)
        done[acc[small[accept]]] = True
        done[rej[lam[rej] >= 1e16]] = True
        done[iters >= MAX_ITER] = True
        active &= ~done
    with np.errstate(over="ignore", invalid="ignore"):
        J = _jacobian(x, e, a, theta)
        grad_norm = np.linalg.norm(np.einsum("mnk,mn->mk", J, r), axis=1)
    return theta, cost, iters, grad_norm


def _start_grid(x, y):
    a_grid = np.linspace(0.05, 1.0, 10)
    lo, hi = math.floor(x.min() / math.log(10)), math.ceil(x.max() / math.log(10))
    c_grid = np.arange(lo, hi + 1) * math.log(10)
    p_grid = y.max() + np.linspace(0.3 / 4, 0.3, 4)
    for a in a_grid:
        for c in c_grid:
            for p0 in p_grid:
                yield np.array([p0, c, _softplus_inv(a)])


def fit_offset(points) -> OffsetFit:
    points = list(points)
    if len(points) < 4:
        raise InputError("offset fit needs at least 4 points")
    x_N, y = _prepare(points)
    if x_N.size < 3:
        raise InputError("offset fit needs at least 3 distinct N values")
    if np.ptp(y) == 0.0:
        raise DegenerateFitError("all metric values identical; offset fit is degenerate")
    x = np.log(x_N)
    starts = np.array(list(_start_grid(x, y)))
    theta, cost, iters, grad_norm = _gauss_newton(starts, x, y)
    a_all = np.logaddexp(0.0, theta[:, 2])
    finite = np.isfinite(cost) & np.isfinite(theta).all(axis=1)
    if not finite.any():
        raise DegenerateFitError("no start converged to a finite fit")
    # lowest cost, then lowest a, then grid order
    order = np.lexsort((np.arange(cost.size), a_all, np.where(finite, cost, np.inf)))
    i = int(order[0])
    theta, cost, it, gn, a = theta[i], float(cost[i]), int(iters[i]), float(grad_norm[i]), float(a_all[i])
    rmse = math.sqrt(cost / x.size)
    # flat curves push the offset far outside the data; report inf rather than crash
    n0 = math.exp(theta[1]) if theta[1] < 709.0 else math.inf
    return OffsetFit(P0=float(theta[0]), N0=float(n0), a=float(a),
                     rmse=rmse, iterations=it, grad_norm=gn)


def fit_log(points) -> LogFit:
    """Ordinary least squares of P on ln N."""
    x_N, y = _prepare(points)
    if x_N.size < 2:
        raise InputError("log fit needs at least 2 distinct N values")
    x = np.log(x_N)
    xm, ym = x.mean(), y.mean()
    slope = float(((x - xm) @ (y - ym)) / ((x - xm) @ (x - xm)))
    intercept = float(ym - slope * xm)
    resid = slope * x + intercept - y
    return LogFit(slope, intercept, float(math.sqrt(resid @ resid / x.size)))


def compare_fits(points) -> FitComparison:
    points = list(points)
    return FitComparison(fit_offset(points), fit_log(points))


def group_by_task(points: Iterable[ScalingPoint]) -> dict[str, list[ScalingPoint]]:
    out: dict[str, list[ScalingPoint]] = {}
    for p in points:
        out.setdefault(p.task, []).append(p)
    return dict(sorted(out.items()))


def curve_samples(fit: FitComparison, n_min: float, n_max: float, num: int = 50) -> np.ndarray:
    """Columns (N, offset prediction, log prediction) on a log grid for plotting."""
    N = np.logspace(math.log10(n_min), math.log10(n_max), num)
    return np.column_stack([N, fit.offset.predict(N), fit.log.predict(N)])


def generate_points(P0, N0, a, Ns: Sequence[float], noise=0.0, seed=0) -> list[ScalingPoint]:
    """Forward-generate points from a known offset law, optionally with Gaussian noise."""
    Ns = np.asarray(Ns, dtype=float)
    P = P0 - (Ns / N0) ** -a
    if noise:
        P = P + np.random.default_rng(seed).normal(0.0, noise, size=P.shape)
    return [ScalingPoint(float(n), float(p)) for n, p in zip(Ns, P)]
