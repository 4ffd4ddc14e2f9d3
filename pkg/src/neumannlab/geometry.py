"""Flat domains with boundary, drift fields and their curvature constants.

Every domain lives in R^1 or R^2 with the Euclidean metric, so Ric = 0 and
the Bakry-Emery condition Ric - grad Z >= -K only constrains the drift
Jacobian.  Boundary geometry (inward normal, second fundamental form) is
closed-form per shape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import RectangleCorner, UnsupportedDrift

# Projection / boundary tolerance shared with the simulator.
EPS_PROJ = 1e-9

# Integer shape codes understood by the compiled step kernels.
HALFLINE, INTERVAL, DISK, ANNULUS, RECTANGLE = range(5)


def as_point(x, dim):
    """Coerce a scalar / sequence into a float array of shape (dim,)."""
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if arr.shape != (dim,):
        raise ValueError(f"expected a point of dimension {dim}, got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# Shapes
# ---------------------------------------------------------------------------


class Shape:
    """Base class for the domain family.  Subclasses are frozen dataclasses."""

    name = "shape"
    dim = 1
    code = -1

    def kernel_params(self):
        """Parameters packed for the compiled projection kernel."""
        raise NotImplementedError

    def signed_distance(self, x):
        """Distance to the boundary: positive inside, negative outside."""
        raise NotImplementedError

    def project(self, y):
        """Nearest point of the closed domain (vectorised over leading axes)."""
        raise NotImplementedError

    def inward_normal(self, x):
        raise NotImplementedError

    def second_fundamental_form(self, x, v):
        raise NotImplementedError

    def boundary_min_ii(self):
        """List of (component name, min of II over unit tangents) pairs."""
        raise NotImplementedError

    def diameter(self):
        return 1.0

    def describe(self):
        return {"shape": self.name, **self.params()}

    def params(self):
        return {}

    def label(self):
        p = ",".join(f"{k}={v:g}" for k, v in self.params().items())
        return f"{self.name}({p})" if p else self.name

    def _check_on_boundary(self, x):
        d = float(np.atleast_1d(self.signed_distance(x))[0])
        if abs(d) > EPS_PROJ:
            raise ValueError(f"{x!r} is not on the boundary (signed distance {d:.3g})")


@dataclass(frozen=True)
class HalfLine(Shape):
    name = "halfline"
    dim = 1
    code = HALFLINE

    def kernel_params(self):
        return np.zeros(2)

    def signed_distance(self, x):
        x = np.asarray(x, dtype=float)
        return x[..., 0]

    def project(self, y):
        return np.maximum(y, 0.0)

    def inward_normal(self, x):
        self._check_on_boundary(x)
        return np.array([1.0])

    def second_fundamental_form(self, x, v):
        self._check_on_boundary(x)
        return 0.0

    def boundary_min_ii(self):
        return [("origin", 0.0)]


@dataclass(frozen=True)
class Interval(Shape):
    a: float = 0.0
    b: float = 1.0
    name = "interval"
    dim = 1
    code = INTERVAL

    def __post_init__(self):
        if not self.a < self.b:
            raise ValueError("Interval requires a < b")

    def params(self):
        return {"a": self.a, "b": self.b}

    def kernel_params(self):
        return np.array([self.a, self.b])

    def diameter(self):
        return self.b - self.a

    def signed_distance(self, x):
        x = np.asarray(x, dtype=float)[..., 0]
        inside = np.minimum(x - self.a, self.b - x)
        return inside

    def project(self, y):
        return np.clip(y, self.a, self.b)

    def inward_normal(self, x):
        self._check_on_boundary(x)
        x = float(np.atleast_1d(x)[0])
        return np.array([1.0]) if abs(x - self.a) <= abs(x - self.b) else np.array([-1.0])

    def second_fundamental_form(self, x, v):
        self._check_on_boundary(x)
        return 0.0

    def boundary_min_ii(self):
        return [("left", 0.0), ("right", 0.0)]


@dataclass(frozen=True)
class Disk(Shape):
    R: float = 1.0
    name = "disk"
    dim = 2
    code = DISK

    def __post_init__(self):
        if not self.R > 0:
            raise ValueError("Disk requires R > 0")

    def params(self):
        return {"R": self.R}

    def kernel_params(self):
        return np.array([self.R, 0.0])

    def diameter(self):
        return 2 * self.R

    def signed_distance(self, x):
        x = np.asarray(x, dtype=float)
        return self.R - np.hypot(x[..., 0], x[..., 1])

    def project(self, y):
        y = np.asarray(y, dtype=float)
        r = np.hypot(y[..., 0], y[..., 1])[..., None]
        scale = np.where(r > self.R, self.R / np.where(r > 0, r, 1.0), 1.0)
        return y * scale

    def inward_normal(self, x):
        self._check_on_boundary(x)
        x = np.asarray(x, dtype=float)
        return -x / np.hypot(*x)

    def second_fundamental_form(self, x, v):
        self._check_on_boundary(x)
        v = np.asarray(v, dtype=float)
        return float(v @ v) / self.R

    def boundary_min_ii(self):
        return [("circle", 1.0 / self.R)]


@dataclass(frozen=True)
class Annulus(Shape):
    r_in: float = 0.5
    r_out: float = 1.5
    name = "annulus"
    dim = 2
    code = ANNULUS

    def __post_init__(self):
        if not 0 < self.r_in < self.r_out:
            raise ValueError("Annulus requires 0 < r_in < r_out")

    def params(self):
        return {"r_in": self.r_in, "r_out": self.r_out}

    def kernel_params(self):
        return np.array([self.r_in, self.r_out])

    def diameter(self):
        return 2 * self.r_out

    def signed_distance(self, x):
        x = np.asarray(x, dtype=float)
        r = np.hypot(x[..., 0], x[..., 1])
        return np.minimum(r - self.r_in, self.r_out - r)

    def project(self, y):
        y = np.asarray(y, dtype=float)
        r = np.hypot(y[..., 0], y[..., 1])[..., None]
        safe = np.where(r > 0, r, 1.0)
        target = np.clip(r, self.r_in, self.r_out)
        return y * np.where(r > 0, target / safe, 1.0)

    def _component(self, x):
        r = float(np.hypot(*np.asarray(x, dtype=float)))
        return "inner" if abs(r - self.r_in) <= abs(r - self.r_out) else "outer"

    def inward_normal(self, x):
        self._check_on_boundary(x)
        x = np.asarray(x, dtype=float)
        radial = x / np.hypot(*x)
        return radial if self._component(x) == "inner" else -radial

    def second_fundamental_form(self, x, v):
        self._check_on_boundary(x)
        v = np.asarray(v, dtype=float)
        if self._component(x) == "inner":
            return -float(v @ v) / self.r_in
        return float(v @ v) / self.r_out

    def boundary_min_ii(self):
        return [("inner", -1.0 / self.r_in), ("outer", 1.0 / self.r_out)]


@dataclass(frozen=True)
class Rectangle(Shape):
    w: float = 1.0
    h: float = 1.0
    name = "rectangle"
    dim = 2
    code = RECTANGLE

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError("Rectangle requires w, h > 0")

    def params(self):
        return {"w": self.w, "h": self.h}

    def kernel_params(self):
        return np.array([self.w, self.h])

    def diameter(self):
        return math.hypot(self.w, self.h)

    def signed_distance(self, x):
        x = np.asarray(x, dtype=float)
        px, py = x[..., 0], x[..., 1]
        inside = np.minimum(np.minimum(px, self.w - px), np.minimum(py, self.h - py))
        dx = np.maximum(np.maximum(-px, px - self.w), 0.0)
        dy = np.maximum(np.maximum(-py, py - self.h), 0.0)
        outside = -np.hypot(dx, dy)
        return np.where((dx > 0) | (dy > 0), outside, inside)

    def project(self, y):
        y = np.asarray(y, dtype=float)
        out = np.empty_like(y)
        out[..., 0] = np.clip(y[..., 0], 0.0, self.w)
        out[..., 1] = np.clip(y[..., 1], 0.0, self.h)
        return out

    def _check_corner(self, x):
        for cx in (0.0, self.w):
            for cy in (0.0, self.h):
                if math.hypot(x[0] - cx, x[1] - cy) <= EPS_PROJ:
                    raise RectangleCorner(f"point {tuple(x)} is within {EPS_PROJ:g} of a corner")

    def inward_normal(self, x):
        self._check_on_boundary(x)
        x = np.asarray(x, dtype=float)
        self._check_corner(x)
        gaps = [x[0], self.w - x[0], x[1], self.h - x[1]]
        normals = [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)]
        return np.array(normals[int(np.argmin(gaps))])

    def second_fundamental_form(self, x, v):
        self._check_on_boundary(x)
        self._check_corner(np.asarray(x, dtype=float))
        return 0.0

    def boundary_min_ii(self):
        return [("edges", 0.0)]


SHAPES = {
    "halfline": HalfLine,
    "interval": Interval,
    "disk": Disk,
    "annulus": Annulus,
    "rectangle": Rectangle,
}


def boundary_tangent(shape, x):
    """Unit tangent at a 2D boundary point (counter-clockwise for circles)."""
    x = np.asarray(x, dtype=float)
    n = shape.inward_normal(x)
    return np.array([-n[1], n[0]])


def move_along_boundary(shape, x, s):
    """Point reached by moving arclength ``s`` along the boundary from x.

    Circles are followed exactly; straight edges are translated along the
    edge.  Used for tangential finite differences that must stay on the
    boundary.
    """
    x = np.asarray(x, dtype=float)
    if isinstance(shape, (Disk, Annulus)):
        r = float(np.hypot(*x))
        theta = math.atan2(x[1], x[0]) + s / r
        return np.array([r * math.cos(theta), r * math.sin(theta)])
    if isinstance(shape, Rectangle):
        n = shape.inward_normal(x)
        return x + s * np.array([-n[1], n[0]])
    raise ValueError("1D boundaries have no tangent direction")


def sample_boundary(shape, n, rng):
    """n boundary points (rectangle corners excluded)."""
    if isinstance(shape, HalfLine):
        return np.zeros((n, 1))
    if isinstance(shape, Interval):
        return rng.choice([shape.a, shape.b], size=(n, 1))
    theta = rng.uniform(0.0, 2 * math.pi, size=n)
    ring = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    if isinstance(shape, Disk):
        return shape.R * ring
    if isinstance(shape, Annulus):
        radii = np.where(rng.random(n) < 0.5, shape.r_in, shape.r_out)
        return radii[:, None] * ring
    # rectangle: uniform along the perimeter, away from corners
    margin = 1e-6
    edge = rng.integers(0, 4, size=n)
    u = rng.uniform(margin, 1 - margin, size=n)
    pts = np.empty((n, 2))
    pts[:, 0] = np.select([edge == 0, edge == 1], [0.0, shape.w], u * shape.w)
    pts[:, 1] = np.select([edge == 2, edge == 3], [0.0, shape.h], u * shape.h)
    return pts


def sample_interior(shape, n, rng, margin=0.0):
    """n points with signed distance > margin."""
    out = []
    while sum(len(o) for o in out) < n:
        if isinstance(shape, HalfLine):
            cand = rng.uniform(0, 3, size=(2 * n, 1))
        elif isinstance(shape, Interval):
            cand = rng.uniform(shape.a, shape.b, size=(2 * n, 1))
        elif isinstance(shape, (Disk, Annulus)):
            r = shape.R if isinstance(shape, Disk) else shape.r_out
            cand = rng.uniform(-r, r, size=(2 * n, 2))
        else:
            cand = rng.uniform([0, 0], [shape.w, shape.h], size=(2 * n, 2))
        out.append(cand[shape.signed_distance(cand) > margin])
    return np.concatenate(out)[:n]


# ---------------------------------------------------------------------------
# Drift
# ---------------------------------------------------------------------------

# kernel drift codes: Z_i(x) = c_i x_i            (LINEAR_DIAG)
#                     Z_i(x) = c_i (x_i - x_i^3)  (DOUBLE_WELL)
LINEAR_DIAG, DOUBLE_WELL = 0, 1


@dataclass(frozen=True)
class Potential:
    """Closed-form potential V with Z = grad V."""

    name: str
    V: object
    grad: object
    hess: object
    hess_bound: object  # callable(shape) -> sup of largest eigenvalue, or None
    kernel: tuple


def _quadratic(c):
    return Potential(
        "quadratic",
        V=lambda x: 0.5 * c * np.sum(x * x, axis=-1),
        grad=lambda x: c * x,
        hess=lambda x: c * np.broadcast_to(np.eye(x.shape[-1]), x.shape + (x.shape[-1],)),
        hess_bound=lambda shape: c,
        kernel=(LINEAR_DIAG, c, c),
    )


def _anisotropic(a, b):
    diag = np.array([a, b])
    return Potential(
        "anisotropic",
        V=lambda x: 0.5 * np.sum(diag[: x.shape[-1]] * x * x, axis=-1),
        grad=lambda x: diag[: x.shape[-1]] * x,
        hess=lambda x: np.broadcast_to(np.diag(diag[: x.shape[-1]]), x.shape + (x.shape[-1],)),
        hess_bound=lambda shape: max(a, b) if shape.dim == 2 else a,
        kernel=(LINEAR_DIAG, a, b),
    )


def _double_well(c):
    # V = c * sum(x^2/2 - x^4/4); Hess V = c * diag(1 - 3 x_i^2).  The sup of
    # the largest eigenvalue depends on whether the domain reaches x_i = 0, so
    # no shape-independent bound is registered.
    return Potential(
        "double_well",
        V=lambda x: c * np.sum(0.5 * x**2 - 0.25 * x**4, axis=-1),
        grad=lambda x: c * (x - x**3),
        hess=lambda x: c * (np.eye(x.shape[-1]) * (1 - 3 * x**2)[..., None, :]),
        hess_bound=None,
        kernel=(DOUBLE_WELL, c, c),
    )


POTENTIALS = {
    "quadratic": lambda p: _quadratic(float(p.get("c", 1.0))),
    "anisotropic": lambda p: _anisotropic(float(p.get("a", 1.0)), float(p.get("b", 1.0))),
    "double_well": lambda p: _double_well(float(p.get("c", 1.0))),
}


@dataclass(frozen=True)
class DriftSpec:
    """Z = 0, Z = a x, or Z = grad V for a registered potential."""

    kind: str = "zero"
    a: float = 0.0
    potential: str | None = None
    params: dict = field(default_factory=dict, hash=False)

    def __post_init__(self):
        if self.kind not in ("zero", "linear", "potential"):
            raise ValueError(f"unknown drift kind {self.kind!r}")
        if self.kind == "potential" and self.potential not in POTENTIALS:
            raise ValueError(f"unknown potential {self.potential!r}")

    @classmethod
    def zero(cls):
        return cls("zero")

    @classmethod
    def linear(cls, a):
        return cls("linear", a=float(a))

    @classmethod
    def gradient(cls, name, **params):
        return cls("potential", potential=name, params=params)

    def _pot(self):
        if self.kind == "zero":
            return _quadratic(0.0)
        if self.kind == "linear":
            return _quadratic(self.a)
        return POTENTIALS[self.potential](self.params)

    def V(self, x):
        return self._pot().V(np.asarray(x, dtype=float))

    def __call__(self, x):
        return self._pot().grad(np.asarray(x, dtype=float))

    def jacobian(self, x):
        return self._pot().hess(np.asarray(x, dtype=float))

    def kernel_spec(self):
        """(code, c1, c2) for the compiled stepper."""
        return self._pot().kernel

    def hess_bound(self, shape):
        bound = self._pot().hess_bound
        if bound is None:
            raise UnsupportedDrift(
                f"potential {self.potential!r} has no registered closed-form Hessian bound"
            )
        return float(bound(shape))

    def describe(self):
        if self.kind == "zero":
            return {"kind": "zero"}
        if self.kind == "linear":
            return {"kind": "linear", "a": self.a}
        return {"kind": "potential", "potential": self.potential, **self.params}

    def label(self):
        if self.kind == "zero":
            return "zero"
        if self.kind == "linear":
            return f"linear(a={self.a:g})"
        p = ",".join(f"{k}={v:g}" for k, v in self.params.items())
        return f"{self.potential}({p})"


# ---------------------------------------------------------------------------
# Model and curvature constants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifoldModel:
    shape: Shape
    drift: DriftSpec = DriftSpec()

    @property
    def dimension(self):
        return self.shape.dim

    def label(self):
        return f"{self.shape.label()}+{self.drift.label()}"

    def describe(self):
        return {**self.shape.describe(), "drift": self.drift.describe()}


@dataclass(frozen=True)
class CurvatureBounds:
    K: float
    sigma: float
    K1: object = None
    K2: object = None


def signed_distance(model, x):
    x = as_point(x, model.dimension)
    return float(model.shape.signed_distance(x))


def inward_normal(model, x):
    return model.shape.inward_normal(as_point(x, model.dimension))


def second_fundamental_form(model, x, v):
    x = as_point(x, model.dimension)
    if model.dimension == 1:
        model.shape.inward_normal(x)  # validates boundary membership
        return 0.0
    v = as_point(v, 2)
    return model.shape.second_fundamental_form(x, v)


def drift_eval(model, x):
    return model.drift(as_point(x, model.dimension))


def curvature_bounds(model):
    """Tightest (K, sigma) with sigma clipped below at 0."""
    K = model.drift.hess_bound(model.shape)
    sigma = max(0.0, max(-m for _, m in model.shape.boundary_min_ii()))
    return CurvatureBounds(
        K=K,
        sigma=sigma,
        K1=ScalarField("drift_curvature"),
        K2=ScalarField("boundary_curvature"),
    )


# ---------------------------------------------------------------------------
# Variable bounds K1(x), K2(x)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalarField:
    """Registered scalar field used as a variable curvature bound.

    constant(value)             -- K(x) = value
    drift_curvature(offset)     -- largest eigenvalue of grad Z at x, plus offset
    boundary_curvature(offset)  -- -II_min at the nearest boundary component, plus offset
    components(inner, outer)    -- per-component constants on an annulus
    """

    name: str
    params: dict = field(default_factory=dict, hash=False)

    def __post_init__(self):
        if self.name not in ("constant", "drift_curvature", "boundary_curvature", "components"):
            raise ValueError(f"unknown scalar field {self.name!r}")

    def __call__(self, model, x):
        x = np.asarray(x, dtype=float)
        lead = x.shape[:-1]
        offset = float(self.params.get("offset", 0.0))
        if self.name == "constant":
            return np.full(lead, float(self.params.get("value", 0.0)))
        if self.name == "drift_curvature":
            jac = np.asarray(model.drift.jacobian(x), dtype=float)
            jac = np.broadcast_to(jac, lead + (x.shape[-1], x.shape[-1]))
            return np.linalg.eigvalsh(0.5 * (jac + np.swapaxes(jac, -1, -2)))[..., -1] + offset
        shape = model.shape
        if self.name == "components":
            if not isinstance(shape, Annulus):
                raise ValueError("components field is only defined on an annulus")
            r = np.hypot(x[..., 0], x[..., 1])
            inner = np.abs(r - shape.r_in) <= np.abs(r - shape.r_out)
            return np.where(inner, float(self.params["inner"]), float(self.params["outer"]))
        # boundary_curvature
        if isinstance(shape, Annulus):
            r = np.hypot(x[..., 0], x[..., 1])
            inner = np.abs(r - shape.r_in) <= np.abs(r - shape.r_out)
            return np.where(inner, 1.0 / shape.r_in, -1.0 / shape.r_out) + offset
        if isinstance(shape, Disk):
            return np.full(lead, -1.0 / shape.R) + offset
        return np.full(lead, 0.0) + offset

    def label(self):
        if not self.params:
            return self.name
        p = ",".join(f"{k}={v:g}" for k, v in self.params.items())
        return f"{self.name}({p})"


def make_shape(name, **params):
    try:
        cls = SHAPES[name]
    except KeyError:
        raise ValueError(f"unknown shape {name!r}") from None
    return cls(**{k: float(v) for k, v in params.items()})
