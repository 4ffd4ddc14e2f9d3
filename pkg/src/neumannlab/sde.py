"""Reflected diffusion dX = sqrt(2) dB + Z(X) dt + N(X) dl by projection.

Each step proposes an Euler move, projects it back onto the closed domain,
and books the projection distance as the local-time increment.  Paths are
seeded from (base_seed, path_index) so batches are reproducible and do not
depend on how they are split across workers.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba as nb
import numpy as np

from .errors import ProjectionFailure
from .geometry import ANNULUS, DISK, EPS_PROJ, HALFLINE, INTERVAL, LINEAR_DIAG, as_point

__all__ = [
    "EPS_PROJ",
    "PathSample",
    "SimParams",
    "exit_time",
    "path_rng",
    "record_steps",
    "iter_chunks",
    "simulate_batch",
    "simulate_chunk",
    "simulate_reflected_path",
    "step_grid",
    "worker_count",
]

DEFAULT_DT = 1e-4


@dataclass(frozen=True)
class SimParams:
    dt: float = DEFAULT_DT
    n_paths: int = 10_000
    base_seed: int = 0
    scheme: str = "projection"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.scheme != "projection":
            raise ValueError(f"unknown scheme {self.scheme!r}")

    def replace(self, **kw):
        return SimParams(**{**self.__dict__, **kw})


@dataclass
class PathSample:
    times: np.ndarray
    positions: np.ndarray  # (n_steps + 1, dim)
    local_time: np.ndarray
    seed: tuple

    @property
    def dt(self):
        return self.times[1] - self.times[0] if self.times.size > 1 else 0.0

    def index_of(self, s):
        """Grid index of time s (must lie on the grid up to rounding)."""
        if self.times.size == 1:
            return 0
        k = int(round(s / self.dt))
        if not 0 <= k < self.times.size or abs(k * self.dt - s) > 1e-9 * max(1.0, s):
            raise ValueError(f"time {s} is not on the simulation grid")
        return k


def step_grid(t, dt):
    """Number of steps and the (possibly shrunk) step so that n * dt = t."""
    if t == 0:
        return 0, dt
    ratio = t / dt
    n = int(round(ratio))
    if n < 1 or abs(n - ratio) > 1e-9 * ratio:
        n = max(1, math.ceil(ratio))
    return n, t / n


def path_rng(base_seed, path_index):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(base_seed), int(path_index)])))


def _make_kernel(shape_code, dim, drift_code):
    """Compile a stepper with shape, dimension and drift law fixed."""

    @nb.njit(nogil=True)
    def run(rng, x0, n, dt, sp, c1, c2, record, positions, local):
        sq = math.sqrt(2.0 * dt)
        x1 = x0[0]
        x2 = x0[1] if dim == 2 else 0.0
        m = record.shape[0]
        j = 0
        if m and record[0] == 0:
            positions[0, 0] = x1
            if dim == 2:
                positions[0, 1] = x2
            local[0] = 0.0
            j = 1
        ell = 0.0
        for k in range(n):
            if drift_code == LINEAR_DIAG:
                z1 = c1 * x1
                z2 = c2 * x2
            else:
                z1 = c1 * (x1 - x1 * x1 * x1)
                z2 = c2 * (x2 - x2 * x2 * x2)
            y1 = x1 + sq * rng.standard_normal() + z1 * dt
            y2 = 0.0
            if dim == 2:
                y2 = x2 + sq * rng.standard_normal() + z2 * dt
            dl = 0.0
            if shape_code == HALFLINE:
                if y1 < 0.0:
                    dl = -y1
                    y1 = 0.0
            elif shape_code == INTERVAL:
                if y1 < sp[0]:
                    dl = sp[0] - y1
                    y1 = sp[0]
                elif y1 > sp[1]:
                    dl = y1 - sp[1]
                    y1 = sp[1]
            elif shape_code == DISK:
                r2 = y1 * y1 + y2 * y2
                if r2 > sp[0] * sp[0]:
                    r = math.sqrt(r2)
                    dl = r - sp[0]
                    y1 *= sp[0] / r
                    y2 *= sp[0] / r
            elif shape_code == ANNULUS:
                r2 = y1 * y1 + y2 * y2
                if r2 < sp[0] * sp[0]:
                    r = math.sqrt(r2)
                    dl = sp[0] - r
                    if dl > 0.5 * sp[0]:
                        return k + 1
                    y1 *= sp[0] / r
                    y2 *= sp[0] / r
                elif r2 > sp[1] * sp[1]:
                    r = math.sqrt(r2)
                    dl = r - sp[1]
                    y1 *= sp[1] / r
                    y2 *= sp[1] / r
            else:
                p1 = min(max(y1, 0.0), sp[0])
                p2 = min(max(y2, 0.0), sp[1])
                if p1 != y1 or p2 != y2:
                    dl = math.sqrt((y1 - p1) ** 2 + (y2 - p2) ** 2)
                    y1 = p1
                    y2 = p2
            x1 = y1
            x2 = y2
            ell += dl
            if j < m and record[j] == k + 1:
                positions[j, 0] = x1
                if dim == 2:
                    positions[j, 1] = x2
                local[j] = ell
                j += 1
        return 0

    return run


_KERNELS = {}


def _kernel(shape_code, dim, drift_code):
    key = (shape_code, dim, drift_code)
    if key not in _KERNELS:
        _KERNELS[key] = _make_kernel(*key)
    return _KERNELS[key]


def _prepare(model, x0, t):
    x0 = as_point(x0, model.dimension)
    if model.shape.signed_distance(x0) < -EPS_PROJ:
        raise ValueError(f"start point {x0} lies outside the domain")
    if t < 0:
        raise ValueError("horizon must be non-negative")
    # start exactly on the closed domain
    return np.asarray(model.shape.project(x0), dtype=float)


def record_steps(t, params, times=None):
    """Grid indices to keep: all of them, or those of the given times."""
    n, dt = step_grid(t, params.dt)
    if times is None:
        return np.arange(n + 1)
    idx = set()
    for s in times:
        k = int(round(s / dt)) if n else 0
        if not 0 <= k <= n or abs(k * dt - s) > 1e-9 * max(1.0, s):
            raise ValueError(f"time {s} is not on the simulation grid (dt={dt:g})")
        idx.add(k)
    return np.array(sorted(idx), dtype=np.int64)


def simulate_chunk(model, x0, t, params, start, count, record=None):
    """Paths start .. start+count-1 as stacked arrays (times, positions, local).

    ``record`` lists the grid indices to keep (default: every step), so
    positions has shape (count, len(record), dim) and local (count,
    len(record)).  Setup is shared; each path draws from its own seeded
    generator, and what is recorded never changes the sampled values.
    """
    x0 = _prepare(model, x0, t)
    n, dt = step_grid(t, params.dt)
    record = np.arange(n + 1) if record is None else np.asarray(record, dtype=np.int64)
    if record.size and (record[0] < 0 or record[-1] > n or np.any(np.diff(record) <= 0)):
        raise ValueError("record must be increasing grid indices in [0, n_steps]")
    m = record.size
    positions = np.empty((count, m, model.dimension))
    local = np.empty((count, m))
    times = record * dt
    if m and record[-1] == n:
        times[-1] = t
    if n == 0:
        positions[:] = x0
        local[:] = 0.0
        return times, positions, local
    code, c1, c2 = model.drift.kernel_spec()
    run = _kernel(model.shape.code, model.dimension, code)
    sp = np.asarray(model.shape.kernel_params(), dtype=float)
    c1, c2 = float(c1), float(c2)
    base = int(params.base_seed)
    for j in range(count):
        status = run(path_rng(base, start + j), x0, n, dt, sp, c1, c2, record, positions[j], local[j])
        if status:
            raise ProjectionFailure(
                f"ambiguous projection at step {status} of path {start + j}: dt={dt:g} too large",
                path_index=start + j,
            )
    return times, positions, local


def simulate_reflected_path(model, x0, t, params, path_index=0):
    """One projected-Euler path of the reflected L-diffusion started at x0."""
    times, positions, local = simulate_chunk(model, x0, t, params, path_index, 1)
    return PathSample(times, positions[0], local[0], (int(params.base_seed), int(path_index)))


def worker_count():
    cap = os.environ.get("NEUMANN_THREADS")
    n = os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return n


def default_chunk(model, t, params, n_record=None):
    """Paths per chunk, bounded so stacked arrays stay a few tens of MB."""
    if n_record is None:
        n_record = step_grid(t, params.dt)[0] + 1
    return max(1, min(1024, 4_000_000 // (n_record * (model.dimension + 1))))


def iter_chunks(model, x0, t, params, workers=None, chunk=None, start=0, record=None):
    """Yield (first_index, times, positions, local) covering paths
    start .. start+n_paths-1 in order.

    Chunk boundaries never affect the sampled values, only memory and
    scheduling, so output is identical for any worker count.
    """
    workers = worker_count() if workers is None else max(1, int(workers))
    if record is None:
        record = record_steps(t, params)
    chunk = chunk or default_chunk(model, t, params, len(record))
    stop = start + params.n_paths
    starts = range(start, stop, chunk)

    def job(lo):
        return (lo, *simulate_chunk(model, x0, t, params, lo, min(chunk, stop - lo), record))

    if workers == 1:
        for lo in starts:
            yield job(lo)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for i in range(0, len(starts), workers):
            yield from pool.map(job, starts[i : i + workers])


def simulate_batch(model, x0, t, params, workers=None, start=0):
    """Yield n_paths PathSamples in path-index order, beginning at ``start``."""
    seed = int(params.base_seed)
    for lo, times, pos, loc in iter_chunks(model, x0, t, params, workers, start=start):
        for j in range(pos.shape[0]):
            yield PathSample(times, pos[j], loc[j], (seed, lo + j))


def exit_time(path, x0, delta):
    """First grid time with |X_t - x0| >= delta, or None."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    if delta == 0:
        return 0.0
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    dist = np.linalg.norm(path.positions - x0, axis=1)
    hit = np.flatnonzero(dist >= delta)
    return float(path.times[hit[0]]) if hit.size else None
