"""Registered test functions with closed-form derivatives.

Each function is built as a sympy expression in the ambient coordinates and
lambdified once; gradients, Hessians and the Gamma_2 expression all come from
the same symbolic source.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import sympy as sp

X1, X2 = sp.symbols("x1 x2", real=True)


def coords(dim):
    return (X1,) if dim == 1 else (X1, X2)


def _bump(dim, center, width):
    c = list(center) + [0.0] * (dim - len(center))
    s = sum((xi - ci) ** 2 for xi, ci in zip(coords(dim), c)) / width**2
    return sp.Piecewise((sp.exp(1 - 1 / (1 - s)), s < 1), (0, True))


def _tangential(dim, theta0, amplitude, radius, profile):
    # amplitude * radius * sin(theta - theta0), written in Cartesian form; the
    # "cubic" profile removes the singularity at r = 0 while keeping a zero
    # radial derivative at r = radius.
    if dim != 2:
        raise ValueError("tangential functions need a 2D domain")
    c, s = math.cos(theta0), math.sin(theta0)
    lin = X2 * c - X1 * s
    r2 = X1**2 + X2**2
    if profile == "cubic":
        return amplitude * lin * (3 * radius**2 - r2) / (2 * radius**2)
    return amplitude * radius * lin / sp.sqrt(r2)


def _build(name, dim, p):
    x = coords(dim)
    if name == "constant":
        return sp.Float(p.get("c", 1.0))
    if name == "coordinate":
        return x[int(p.get("axis", 0))]
    if name == "radial_poly":
        return sum(xi**2 for xi in x)
    if name == "bump":
        return _bump(dim, p.get("center", [0.0] * dim), float(p.get("width", 1.0)))
    if name == "affine_positive":
        eps = float(p.get("eps", 0.5))
        return 1 + eps * sp.cos(float(p.get("freq", 1.0)) * x[0])
    if name == "cosine":
        return sp.cos(float(p.get("k", 1.0)) * x[0])
    if name == "smoothed_indicator":
        c = float(p.get("c", 1.0))
        w = float(p.get("width", 0.25))
        return (1 - sp.tanh((x[0] - c) / w)) / 2
    if name == "tangential":
        return _tangential(dim, float(p["theta0"]), float(p.get("amplitude", 1.0)),
                           float(p["radius"]), p.get("profile", "plain"))
    raise KeyError(name)


# declared range per family: (lower, upper, unit_interval)
_RANGES = {
    "constant": None,
    "coordinate": (-math.inf, math.inf),
    "radial_poly": (0.0, math.inf),
    "bump": (0.0, 1.0),
    "affine_positive": None,
    "cosine": (-1.0, 1.0),
    "smoothed_indicator": (0.0, 1.0),
    "tangential": (-math.inf, math.inf),
}

REGISTERED = tuple(_RANGES)


def _lambdify(expr, dim):
    fn = sp.lambdify(coords(dim), expr, modules="numpy")

    def call(x):
        x = np.asarray(x, dtype=float)
        args = [x[..., i] for i in range(dim)]
        with np.errstate(all="ignore"):
            out = fn(*args)
        return np.broadcast_to(np.asarray(out, dtype=float), x.shape[:-1]).copy()

    return call


@dataclass(frozen=True)
class TestFunction:
    """A registered closed-form function on R^dim.

    Vectorised methods take points of shape (..., dim).
    """

    __test__ = False  # keep pytest from collecting this class

    name: str
    dim: int
    params: dict = field(default_factory=dict, hash=False)

    def __post_init__(self):
        if self.name not in _RANGES:
            raise ValueError(f"unknown test function {self.name!r}")
        # force construction so bad parameters fail early
        self.expr

    @cached_property
    def expr(self):
        return _build(self.name, self.dim, self.params)

    @cached_property
    def grad_exprs(self):
        return [sp.diff(self.expr, xi) for xi in coords(self.dim)]

    @cached_property
    def _value(self):
        return _lambdify(self.expr, self.dim)

    @cached_property
    def _grad(self):
        return [_lambdify(g, self.dim) for g in self.grad_exprs]

    @cached_property
    def _hess(self):
        x = coords(self.dim)
        return [[_lambdify(sp.diff(g, xj), self.dim) for xj in x] for g in self.grad_exprs]

    def __call__(self, x):
        return self._value(x)

    def grad(self, x):
        return np.stack([g(x) for g in self._grad], axis=-1)

    def hess(self, x):
        return np.stack([np.stack([h(x) for h in row], axis=-1) for row in self._hess], axis=-2)

    def grad_sq(self, x):
        g = self.grad(x)
        return np.sum(g * g, axis=-1)

    def grad_norm(self, x):
        return np.sqrt(self.grad_sq(x))

    def range_bounds(self):
        if self.name == "constant":
            c = float(self.params.get("c", 1.0))
            return c, c
        if self.name == "affine_positive":
            eps = abs(float(self.params.get("eps", 0.5)))
            return 1 - eps, 1 + eps
        return _RANGES[self.name]

    def is_positive(self):
        return self.range_bounds()[0] > 0

    def in_unit_interval(self):
        lo, hi = self.range_bounds()
        return lo >= 0 and hi <= 1

    def label(self):
        if not self.params:
            return self.name
        parts = []
        for k, v in self.params.items():
            if isinstance(v, (list, tuple)):
                v = "/".join(f"{u:g}" for u in v)
            elif isinstance(v, float):
                v = f"{v:g}"
            parts.append(f"{k}={v}")
        return f"{self.name}({';'.join(parts)})"

    def describe(self):
        return {"id": self.name, **self.params}


def xlogx(v):
    """v log v with 0 log 0 = 0."""
    v = np.asarray(v, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(v > 0, v * np.log(np.where(v > 0, v, 1.0)), 0.0)


# terminal functionals of X_t
TERMINALS = ("one", "f", "f2", "grad_sq", "grad_norm", "grad_p", "flogf", "f2logf2")


def terminal_values(f, kind, x, p=2.0):
    """Evaluate a terminal functional at points x of shape (..., dim)."""
    x = np.asarray(x, dtype=float)
    if kind == "one":
        return np.ones(x.shape[:-1])
    if kind == "f":
        return f(x)
    if kind == "f2":
        v = f(x)
        return v * v
    if kind == "grad_sq":
        return f.grad_sq(x)
    if kind == "grad_norm":
        return f.grad_norm(x)
    if kind == "grad_p":
        return f.grad_norm(x) ** p
    if kind == "flogf":
        return xlogx(f(x))
    if kind == "f2logf2":
        v = f(x)
        return xlogx(v * v)
    raise ValueError(f"unknown terminal {kind!r}")


def make_function(name, dim, **params):
    return TestFunction(name, dim, params)


def tangential_function(model, x, v, profile=None):
    """Neumann-compatible f on a disk/annulus with grad f(x) = v at a boundary point x.

    On the disk the cubic profile amplitude*(3R^2 - r^2)/(2R^2) keeps f smooth
    at the origin; on the annulus the plain angular form is already smooth.
    """
    from .geometry import Annulus, Disk

    shape = model.shape
    if not isinstance(shape, (Disk, Annulus)):
        raise ValueError("tangential construction needs a disk or annulus")
    x = np.asarray(x, dtype=float)
    r = float(np.hypot(*x))
    theta0 = math.atan2(x[1], x[0])
    v = np.asarray(v, dtype=float)
    normal = shape.inward_normal(x)
    if abs(float(v @ normal)) > 1e-9 * max(1.0, float(np.linalg.norm(v))):
        raise ValueError("v must be tangent to the boundary")
    e_theta = np.array([-math.sin(theta0), math.cos(theta0)])
    amp = float(v @ e_theta)
    if profile is None:
        profile = "cubic" if isinstance(shape, Disk) else "plain"
    return TestFunction("tangential", 2, {"theta0": theta0, "amplitude": amp, "radius": r, "profile": profile})


def suite_functions(model):
    """One instance of every registered family that makes sense on ``model``.

    Parameters are placed relative to the domain so each function has a
    non-trivial gradient somewhere in it.
    """
    from .geometry import Annulus, Disk, HalfLine, Interval, Rectangle

    shape = model.shape
    dim = model.dimension
    if isinstance(shape, HalfLine):
        centre, scale = [0.5], 1.0
    elif isinstance(shape, Interval):
        centre, scale = [0.5 * (shape.a + shape.b)], 0.5 * (shape.b - shape.a)
    elif isinstance(shape, Disk):
        centre, scale = [0.2 * shape.R, 0.1 * shape.R], shape.R
    elif isinstance(shape, Annulus):
        mid = 0.5 * (shape.r_in + shape.r_out)
        centre, scale = [mid, 0.0], 0.5 * (shape.r_out - shape.r_in)
    elif isinstance(shape, Rectangle):
        centre, scale = [0.5 * shape.w, 0.5 * shape.h], 0.5 * min(shape.w, shape.h)
    else:
        raise ValueError(f"no default functions for {type(shape).__name__}")
    out = [
        make_function("constant", dim, c=1.0),
        make_function("coordinate", dim, axis=0),
        make_function("radial_poly", dim),
        make_function("bump", dim, center=centre, width=1.4 * scale),
        make_function("affine_positive", dim, eps=0.5, freq=1.0 / scale),
        make_function("cosine", dim, k=1.0 / scale),
        make_function("smoothed_indicator", dim, c=centre[0], width=0.5 * scale),
    ]
    if isinstance(shape, (Disk, Annulus)):
        r = shape.R if isinstance(shape, Disk) else shape.r_in
        prof = "cubic" if isinstance(shape, Disk) else "plain"
        out.append(make_function("tangential", dim, theta0=0.0, amplitude=1.0, radius=r, profile=prof))
    return out
