"""Value types for complex geometry: disks, polydisks, affine maps, graphs.

Complex scalars are plain Python ``complex`` (or numpy complex arrays for
vectorised evaluation); every public constructor rejects NaN/Inf.
"""
from __future__ import annotations

import cmath
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteSample

ComplexScalar = complex

SLOPE_SAFETY = 1.05
DEFAULT_GRID_N = 64


def as_complex(x, name="value") -> complex:
    z = complex(x)
    if not (math.isfinite(z.real) and math.isfinite(z.imag)):
        raise ValueError(f"{name} must be finite, got {z!r}")
    return z


@dataclass(frozen=True)
class Disk:
    center: complex
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", as_complex(self.center, "center"))
        r = float(self.radius)
        if not math.isfinite(r) or r < 0:
            raise ValueError(f"radius must be finite and >= 0, got {r}")
        object.__setattr__(self, "radius", r)

    def contains(self, z, closed=True):
        d = np.abs(np.asarray(z) - self.center)
        return d <= self.radius if closed else d < self.radius

    def contains_disk(self, other: "Disk") -> bool:
        return abs(other.center - self.center) + other.radius <= self.radius

    def clearance(self, other: "Disk") -> float:
        """Signed gap between ``other`` and the boundary of ``self``."""
        return self.radius - abs(other.center - self.center) - other.radius

    def boundary(self, n: int) -> np.ndarray:
        t = 2 * np.pi * np.arange(n) / n
        return self.center + self.radius * np.exp(1j * t)


@dataclass(frozen=True)
class Polydisk:
    centers: tuple
    radii: tuple

    def __post_init__(self):
        cs = tuple(as_complex(c, "center") for c in self.centers)
        rs = tuple(float(r) for r in self.radii)
        if len(cs) != len(rs) or not cs:
            raise ValueError("polydisk needs matching, nonempty centers and radii")
        if any(not (math.isfinite(r) and r > 0) for r in rs):
            raise ValueError("polydisk radii must be positive")
        object.__setattr__(self, "centers", cs)
        object.__setattr__(self, "radii", rs)

    @property
    def dim(self) -> int:
        return len(self.centers)

    @classmethod
    def unit(cls, k: int) -> "Polydisk":
        return cls((0j,) * k, (1.0,) * k)

    def axis(self, i: int) -> Disk:
        return Disk(self.centers[i], self.radii[i])


@dataclass(frozen=True)
class AffineContraction:
    """z -> m z + t with 0 < |m| < 1."""

    m: complex
    t: complex

    def __post_init__(self):
        m = as_complex(self.m, "m")
        if not 0 < abs(m) < 1:
            raise ValueError(f"multiplier must satisfy 0 < |m| < 1, got |m|={abs(m)}")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "t", as_complex(self.t, "t"))

    def __call__(self, z):
        return self.m * z + self.t

    def inverse(self, z):
        return (z - self.t) / self.m

    def after(self, inner: "AffineContraction") -> "AffineContraction":
        """Closed form of ``self o inner``."""
        return AffineContraction(self.m * inner.m, self.m * inner.t + self.t)


def affine_image(f: AffineContraction, disk: Disk) -> Disk:
    return Disk(f.m * disk.center + f.t, abs(f.m) * disk.radius)


def affine_preimage(f: AffineContraction, disk: Disk) -> Disk:
    return Disk((disk.center - f.t) / f.m, disk.radius / abs(f.m))


@dataclass(frozen=True)
class AngularSector:
    """{z : rmin < |z| < rmax, |arg(z e^{-i axis})| < half_angle}."""

    rmin: float
    rmax: float
    half_angle: float
    axis: float = 0.0

    def __post_init__(self):
        if not 0 < self.rmin < self.rmax:
            raise ValueError("need 0 < rmin < rmax")
        if not 0 < self.half_angle < math.pi:
            raise ValueError("need 0 < half_angle < pi")

    def margin(self, z) -> float:
        """Distance from z to the sector boundary, negative outside.

        Exact for the radial constraints; the angular constraint uses the
        distance |z| sin(gap) to the bounding ray, valid while the gap is
        below pi/2.
        """
        z = complex(z) * cmath.exp(-1j * self.axis)
        r = abs(z)
        if r == 0:
            return -self.rmin
        gap = self.half_angle - abs(cmath.phase(z))
        ang = r * math.sin(gap) if abs(gap) < math.pi / 2 else math.copysign(r, gap)
        return min(r - self.rmin, self.rmax - r, ang)

    def contains(self, z) -> bool:
        z = complex(z) * cmath.exp(-1j * self.axis)
        return self.rmin < abs(z) < self.rmax and abs(cmath.phase(z)) < self.half_angle

    def contains_disk(self, disk: Disk) -> bool:
        return self.margin(disk.center) > disk.radius


SECTOR_A = AngularSector(3 / 5, 1.0, math.pi / 20)
SECTOR_A_PRIME = AngularSector(0.7, 0.9, math.pi / 40)


def _axis_nodes(domain: Polydisk, n: int):
    """Real grid lines (re, im per complex axis) over the bounding boxes."""
    axes = []
    for c, r in zip(domain.centers, domain.radii):
        axes.append(np.linspace(c.real - r, c.real + r, n))
        axes.append(np.linspace(c.imag - r, c.imag + r, n))
    return axes


@dataclass(frozen=True, eq=False)
class VerticalGraph:
    """A graph z = gamma(omega) sampled on a tensor grid over ``domain``.

    ``values`` has one array axis per real coordinate of omega, ordered
    (re w1, im w1, re w2, im w2, ...). Between nodes the graph is
    multilinear in those real coordinates.
    """

    domain: Polydisk
    values: np.ndarray
    slope_bound: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=complex)
        if vals.ndim != 2 * self.domain.dim or len(set(vals.shape)) != 1:
            raise ValueError("values must be a hypercube with two axes per omega coordinate")
        if not np.all(np.isfinite(vals)):
            raise NonFiniteSample("graph samples must be finite")
        if self.slope_bound < 0:
            raise ValueError("slope bound must be >= 0")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def grid_n(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.domain.dim + 1

    def axes(self):
        return _axis_nodes(self.domain, self.grid_n)

    def spacing(self) -> np.ndarray:
        return np.array([2 * r / (self.grid_n - 1) for r in self.domain.radii for _ in (0, 1)])

    def nodes(self) -> list:
        """Complex omega coordinates of every node, one array per axis."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return [mesh[2 * i] + 1j * mesh[2 * i + 1] for i in range(self.domain.dim)]

    def node_mask(self) -> np.ndarray:
        """True at grid nodes lying in the closed polydisk."""
        mask = np.ones(self.values.shape, dtype=bool)
        for w, c, r in zip(self.nodes(), self.domain.centers, self.domain.radii):
            mask &= np.abs(w - c) <= r * (1 + 1e-12)
        return mask

    def __call__(self, *omega):
        """Multilinear interpolation; points outside the grid are clamped."""
        omega = [np.asarray(w, dtype=complex) for w in omega]
        if len(omega) != self.domain.dim:
            raise ValueError("wrong number of omega coordinates")
        n = self.grid_n
        idx, frac = [], []
        for i, w in enumerate(omega):
            c, r = self.domain.centers[i], self.domain.radii[i]
            for part in (w.real - (c.real - r), w.imag - (c.imag - r)):
                s = np.clip(part / (2 * r) * (n - 1), 0, n - 1)
                j = np.minimum(np.floor(s).astype(np.int64), n - 2)
                idx.append(j)
                frac.append(s - j)
        out = np.zeros(np.broadcast(*omega).shape, dtype=complex)
        for corner in itertools.product((0, 1), repeat=len(idx)):
            weight = 1.0
            pos = []
            for bit, j, f in zip(corner, idx, frac):
                weight = weight * (f if bit else 1 - f)
                pos.append(j + bit)
            out = out + weight * self.values[tuple(pos)]
        return out

    def finite_difference_slope(self) -> float:
        """Max |d gamma| / |d omega| over adjacent node pairs inside the domain, scaled by sqrt(k-1).

        Nodes in the corners of the bounding box lie outside the polydisk and
        are skipped.
        """
        h = self.spacing()
        inside = self.node_mask()
        worst = 0.0
        for ax in range(self.values.ndim):
            diff = np.abs(np.diff(self.values, axis=ax)) / h[ax]
            both = np.delete(inside, -1, axis=ax) & np.delete(inside, 0, axis=ax)
            if both.any():
                worst = max(worst, float(diff[both].max()))
        return worst * math.sqrt(self.domain.dim)

    def z_hull(self) -> Disk:
        """Smallest disk containing every sampled value."""
        return min_enclosing_disk(self.values.ravel())


def graph_from_callable(evaluator: Callable, domain: Polydisk, grid_n: int = DEFAULT_GRID_N) -> VerticalGraph:
    """Sample ``evaluator(w1, ..., w_{k-1})`` on the tensor grid of ``domain``."""
    if grid_n < 2:
        raise ValueError("gridN must be >= 2")
    mesh = np.meshgrid(*_axis_nodes(domain, grid_n), indexing="ij")
    omega = [mesh[2 * i] + 1j * mesh[2 * i + 1] for i in range(domain.dim)]
    vals = np.broadcast_to(np.asarray(evaluator(*omega), dtype=complex), omega[0].shape)
    if not np.all(np.isfinite(vals)):
        raise NonFiniteSample("evaluator returned NaN/Inf on the domain grid")
    g = VerticalGraph(domain, np.array(vals), 0.0)
    return VerticalGraph(domain, g.values, SLOPE_SAFETY * g.finite_difference_slope())


def _circle2(a, b):
    c = (a + b) / 2
    return c, abs(a - c)


def _circle3(a, b, c):
    ax, ay, bx, by, cx, cy = a.real, a.imag, b.real, b.imag, c.real, c.imag
    d = 2 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    if d == 0:
        pairs = [_circle2(a, b), _circle2(a, c), _circle2(b, c)]
        return max(pairs, key=lambda p: p[1])
    ux = ((ax * ax + ay * ay) * (by - cy) + (bx * bx + by * by) * (cy - ay) + (cx * cx + cy * cy) * (ay - by)) / d
    uy = ((ax * ax + ay * ay) * (cx - bx) + (bx * bx + by * by) * (ax - cx) + (cx * cx + cy * cy) * (bx - ax)) / d
    o = complex(ux, uy)
    return o, max(abs(a - o), abs(b - o), abs(c - o))


def min_enclosing_disk(points: Sequence[complex]) -> Disk:
    """Welzl's algorithm, iterative form, on a fixed pseudo-random order.

    The returned radius is inflated by a relative 1e-12 so that every input
    point is contained despite round-off.
    """
    pts = np.unique(np.asarray(points, dtype=complex).ravel())
    if pts.size == 0:
        raise ValueError("no points")
    if pts.size > 64:
        # only points on the convex hull matter
        from scipy.spatial import ConvexHull, QhullError
        try:
            hull = ConvexHull(np.column_stack([pts.real, pts.imag]))
            pts = pts[hull.vertices]
        except (QhullError, ValueError):
            pass
    order = np.random.default_rng(0).permutation(pts.size)
    p = [complex(v) for v in pts[order]]
    tol = 1e-12

    def inside(q, c, r):
        return abs(q - c) <= r * (1 + tol) + tol * 1e-3

    c, r = p[0], 0.0
    for i in range(1, len(p)):
        if inside(p[i], c, r):
            continue
        c, r = p[i], 0.0
        for j in range(i):
            if inside(p[j], c, r):
                continue
            c, r = _circle2(p[i], p[j])
            for k in range(j):
                if not inside(p[k], c, r):
                    c, r = _circle3(p[i], p[j], p[k])
    r = max(r, max(abs(q - c) for q in p))
    return Disk(c, r * (1 + tol))
