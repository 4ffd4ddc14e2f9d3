"""Monte Carlo estimators of P_t f and of local-time weighted functionals.

All estimators reduce per-path values in path-index order, so results depend
only on (base_seed, n_paths, dt) and never on the worker count.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy import integrate

from .errors import OverflowGuard, StepClipped
from .functions import TestFunction, terminal_values
from .geometry import Annulus, Disk, ScalarField, as_point
from .sde import SimParams, iter_chunks, record_steps

__all__ = [
    "EstimateWithError",
    "Request",
    "WeightedFunctional",
    "estimate_pt",
    "estimate_weighted",
    "fd_step",
    "grad_pt",
    "grad_pt_with_error",
    "path_values",
    "summarize",
]

# per-path weights above this are treated as overflow
WEIGHT_MAX = 1e300
_LOG_WEIGHT_MAX = math.log(WEIGHT_MAX)


@dataclass(frozen=True)
class EstimateWithError:
    mean: float
    std_error: float
    n_paths: int
    dt: float


@dataclass(frozen=True)
class WeightedFunctional:
    """terminal(X_t) * exp(lt_coef * l_t) * time_integral.

    ``terminal`` is a registered terminal name or a callable (X_t, l_t) ->
    values, which lets callers put the local time inside a nonlinearity.
    ``time_integral`` is one of
      none -- factor 1
      A    -- int_0^t exp(2 sigma (l_t - l_{t-s}) + 2 K s) ds
      B    -- int_0^t exp(2 sigma l_s - 2 K s) ds
      var  -- exp(var_coef * (int_0^t K1(X_s) ds + int_0^t K2(X_s) dl_s))
    """

    terminal: Union[str, Callable] = "f"
    lt_coef: float = 0.0
    time_integral: str = "none"
    sigma: float = 0.0
    K: float = 0.0
    K1: Optional[ScalarField] = None
    K2: Optional[ScalarField] = None
    var_coef: float = 1.0
    p: float = 2.0

    def __post_init__(self):
        if self.time_integral not in ("none", "A", "B", "var"):
            raise ValueError(f"unknown time integral {self.time_integral!r}")
        for c in (self.lt_coef, self.sigma, self.K, self.var_coef, self.p):
            if not math.isfinite(c):
                raise ValueError("weight coefficients must be finite")
        if self.time_integral == "var" and not (isinstance(self.K1, ScalarField) and isinstance(self.K2, ScalarField)):
            raise ValueError("IntegralVar needs registered K1 and K2 fields")


@dataclass(frozen=True)
class Request:
    """One column of a batch evaluation: functional of f read at time ``time``."""

    functional: WeightedFunctional
    f: Optional[TestFunction]
    time: float


def _guard(exponent):
    if exponent.size and float(np.max(exponent)) > _LOG_WEIGHT_MAX:
        raise OverflowGuard(
            f"per-path weight exceeds {WEIGHT_MAX:g} (log weight {float(np.max(exponent)):.1f}); "
            "review sigma, n_paths or dt"
        )


def _trapezoid(y, s):
    if s.size < 2:
        return np.zeros(y.shape[0])
    return np.trapezoid(y, s, axis=1)


def _grid_index(times, s):
    """Position of time s among the recorded times."""
    j = int(np.argmin(np.abs(times - s)))
    if abs(times[j] - s) > 1e-9 * max(1.0, s):
        raise ValueError(f"time {s} is not on the simulation grid")
    return j


def _chunk_values(model, req, times, pos, loc, cache=None):
    """Per-path values of one request on a stack of paths.

    ``cache`` shares path weights between requests that differ only in
    their terminal function or time.
    """
    w = req.functional
    cache = {} if cache is None else cache
    k = _grid_index(times, req.time)
    X = pos[:, k]
    lt = loc[:, k]
    if callable(w.terminal):
        term = np.asarray(w.terminal(X, lt), dtype=float)
    else:
        term = terminal_values(req.f, w.terminal, X, w.p)
    key = (w.lt_coef, w.time_integral, w.sigma, w.K, w.K1, w.K2, w.var_coef, k)
    if key not in cache:
        cache[key] = _weights(model, w, k, times, pos, loc, cache)
    return term * cache[key]


def _cumulative(cache, key, build):
    if key not in cache:
        cache[key] = build()
    return cache[key]


def _exp_checked(e):
    _guard(e)
    if e.size and float(np.min(e)) < -_LOG_WEIGHT_MAX:
        raise OverflowGuard("per-path weight underflows; review sigma, K or the horizon")
    return np.exp(e)


def _weights(model, w, k, times, pos, loc, cache):
    lt = loc[:, k]
    log_w = w.lt_coef * lt
    integral = 1.0
    if w.time_integral == "A":
        # int_0^t exp(2 sigma (l_t - l_{t-s}) + 2K s) ds
        #   = exp(2 sigma l_t + 2K t) int_0^t exp(-2 sigma l_u - 2K u) du
        cum = _cumulative(cache, ("A", w.sigma, w.K), lambda: integrate.cumulative_trapezoid(
            _exp_checked(-2 * w.sigma * loc - 2 * w.K * times[None, :]), times, axis=1, initial=0.0))
        log_w = log_w + 2 * w.sigma * lt + 2 * w.K * times[k]
        integral = cum[:, k]
    elif w.time_integral == "B":
        cum = _cumulative(cache, ("B", w.sigma, w.K), lambda: integrate.cumulative_trapezoid(
            _exp_checked(2 * w.sigma * loc - 2 * w.K * times[None, :]), times, axis=1, initial=0.0))
        integral = cum[:, k]
    elif w.time_integral == "var":
        s = times[: k + 1]
        drift_part = _trapezoid(w.K1(model, pos[:, : k + 1]), s)
        # Ito-type sum with K2 read at the post-projection point
        dl = np.diff(loc[:, : k + 1], axis=1)
        bdry_part = np.sum(w.K2(model, pos[:, 1 : k + 1]) * dl, axis=1) if k else np.zeros(len(lt))
        log_w = log_w + w.var_coef * (drift_part + bdry_part)
    _guard(log_w + np.log(np.maximum(integral, 1e-300)))
    return np.exp(log_w) * integral


def path_values(model, requests, x, horizon, params: SimParams, workers=None):
    """Per-path values, shape (n_paths, len(requests)), from one batch.

    Every request reads the same simulated paths, so sample-level identities
    between columns hold exactly.
    """
    requests = list(requests)
    x = as_point(x, model.dimension)
    for r in requests:
        if not 0 <= r.time <= horizon:
            raise ValueError(f"request time {r.time} outside [0, {horizon}]")
    out = np.empty((params.n_paths, len(requests)))
    if not requests:
        return out
    # terminal-only requests need the path at their own times only
    if all(r.functional.time_integral == "none" for r in requests):
        record = record_steps(horizon, params, [r.time for r in requests])
    else:
        record = record_steps(horizon, params)
    for lo, times, pos, loc in iter_chunks(model, x, horizon, params, workers, record=record):
        cache = {}
        for j, r in enumerate(requests):
            out[lo : lo + pos.shape[0], j] = _chunk_values(model, r, times, pos, loc, cache)
    return out


def summarize(values, params: SimParams):
    """Mean and standard error of one column of per-path values."""
    values = np.asarray(values, dtype=float)
    n = values.size
    mean = float(np.mean(values))
    se = float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    if not (math.isfinite(mean) and math.isfinite(se)):
        raise OverflowGuard("non-finite Monte Carlo estimate")
    return EstimateWithError(mean, se, n, params.dt)


def estimate_weighted(model, w: WeightedFunctional, f, x, t, params: SimParams, workers=None):
    if t < 0:
        raise ValueError("t must be non-negative")
    vals = path_values(model, [Request(w, f, t)], x, t, params, workers)
    return summarize(vals[:, 0], params)


def estimate_pt(model, f, x, t, params: SimParams, workers=None):
    """P_t f(x) = E^x f(X_t); at t = 0 this is (f(x), 0)."""
    if t == 0:
        x = as_point(x, model.dimension)
        return EstimateWithError(float(f(x)), 0.0, params.n_paths, params.dt)
    return estimate_weighted(model, WeightedFunctional("f"), f, x, t, params, workers)


def fd_step(params: SimParams):
    return max(1e-3, math.sqrt(params.dt))


def _frame(model, x, h):
    """Orthonormal directions for differencing and, for each, whether x
    sits within h of the boundary along it.

    Disk/annulus use the polar frame (tangential differences follow the
    circle through x, which stays at constant distance from the boundary);
    intervals and rectangles use the coordinate axes.
    """
    shape = model.shape
    if isinstance(shape, (Disk, Annulus)) and np.hypot(*x) > 0:
        r = float(np.hypot(*x))
        e_r = x / r
        e_t = np.array([-e_r[1], e_r[0]])
        return [("radial", e_r), ("arc", e_t)]
    return [("axis", e) for e in np.eye(model.dimension)]


def _inside(model, y):
    return model.shape.signed_distance(as_point(y, model.dimension)) >= 0


def _stencil(model, x, kind, e, h):
    """(points, weights, step) for d/de at x."""
    if kind == "arc":
        r = float(np.hypot(*x))
        th = math.atan2(x[1], x[0])
        pts = [r * np.array([math.cos(th + s * h / r), math.sin(th + s * h / r)]) for s in (1, -1)]
        return pts, [0.5 / h, -0.5 / h]
    if _inside(model, x + h * e) and _inside(model, x - h * e):
        return [x + h * e, x - h * e], [0.5 / h, -0.5 / h]
    # second-order one-sided difference toward the interior
    sgn = 1.0 if _inside(model, x + h * e) else -1.0
    d = sgn * e
    pts = [x, x + h * d, x + 2 * h * d]
    wts = [-1.5 * sgn / h, 2.0 * sgn / h, -0.5 * sgn / h]
    return pts, wts


def grad_pt_with_error(model, f, x, t, params: SimParams, workers=None):
    """grad P_t f(x) by common-random-number differences, with per-component SE.

    Every stencil point is simulated with the same seeds, and the difference
    quotient is formed path by path before averaging.
    """
    if t <= 0:
        raise ValueError("grad_pt needs t > 0")
    x = as_point(x, model.dimension)
    h0 = fd_step(params)
    grad = np.zeros(model.dimension)
    se = np.zeros(model.dimension)
    cache = {}

    def per_path(y):
        key = tuple(np.round(y, 15))
        if key not in cache:
            req = Request(WeightedFunctional("f"), f, t)
            cache[key] = path_values(model, [req], y, t, params, workers)[:, 0]
        return cache[key]

    for kind, e in _frame(model, x, h0):
        h = h0
        while True:
            pts, wts = _stencil(model, x, kind, e, h)
            if all(_inside(model, p) for p in pts):
                break
            h *= 0.5
        if h < h0:
            warnings.warn(f"finite-difference step shrunk from {h0:g} to {h:g}", StepClipped, stacklevel=2)
        comb = sum(wt * per_path(p) for p, wt in zip(pts, wts))
        est = summarize(comb, params)
        grad += est.mean * e
        se += (est.std_error * e) ** 2
    return grad, np.sqrt(se)


def grad_pt(model, f, x, t, params: SimParams, workers=None):
    return grad_pt_with_error(model, f, x, t, params, workers)[0]
