"""Basin-boundary regions, the epsilon scan, and winding-number transversality."""
from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from ._parallel import map_chunks
from .errors import LoopHitsBand, NotAttracting, OutOfViewport, Undersampled, ZeroOnLoop
from .skewprod import Polynomial1D

INN, NEAR_E, OUT = 0, 1, 2
LABEL_NAMES = {INN: "Inn", NEAR_E: "NearE", OUT: "Out"}
PGM_LEVELS = {INN: 0, NEAR_E: 128, OUT: 255}

ATTRACTED, ESCAPED, UNDETERMINED = 0, 1, 2


@dataclass(frozen=True)
class Viewport:
    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ValueError("empty viewport")

    def contains(self, z) -> bool:
        z = complex(z)
        return self.xmin <= z.real <= self.xmax and self.ymin <= z.imag <= self.ymax

    def as_dict(self) -> dict:
        return {"xmin": self.xmin, "xmax": self.xmax, "ymin": self.ymin, "ymax": self.ymax}


def cell_centers(vp: Viewport, nx: int, ny: int) -> np.ndarray:
    """Array (ny, nx) of cell centers; row 0 is the bottom of the viewport."""
    hx, hy = (vp.xmax - vp.xmin) / nx, (vp.ymax - vp.ymin) / ny
    x = vp.xmin + (np.arange(nx) + 0.5) * hx
    y = vp.ymin + (np.arange(ny) + 0.5) * hy
    return x[None, :] + 1j * y[:, None]


@dataclass(frozen=True)
class Classifier:
    p: Polynomial1D
    cycle: tuple
    max_iter: int
    capture_radius: float
    escape_radius: float

    def behaviour(self, z: np.ndarray) -> np.ndarray:
        """ATTRACTED / ESCAPED / UNDETERMINED for every point of a flat array."""
        z = np.array(z, dtype=complex).ravel()
        out = np.full(z.shape, UNDETERMINED, dtype=np.int8)
        idx = np.arange(z.size)
        cyc = np.array(self.cycle)
        for _ in range(self.max_iter + 1):
            near = np.min(np.abs(z[:, None] - cyc[None, :]), axis=1) < self.capture_radius
            far = np.abs(z) > self.escape_radius
            out[idx[near]] = ATTRACTED
            out[idx[far & ~near]] = ESCAPED
            keep = ~(near | far)
            z, idx = z[keep], idx[keep]
            if not z.size:
                break
            z = self.p(z)
        return out


def escape_radius(p: Polynomial1D) -> float:
    a = np.abs(np.array(p.coefficients))
    lead = a[-1]
    return 2.0 + float(a[:-1].sum() / lead) + (2 / lead) ** (1 / max(1, p.degree - 1))


def _cycle_multiplier(p: Polynomial1D, cycle: Sequence[complex]) -> complex:
    dp = p.derivative()
    mult = 1 + 0j
    for c in cycle:
        mult *= complex(dp(c))
    return mult


def _capture_radius(p: Polynomial1D, cycle: Sequence[complex]) -> float:
    """Radius r with p^P(D(c, r)) inside D(c, r (1 + |lambda|) / 2) on boundary samples."""
    period = len(cycle)
    shrink = (1 + abs(_cycle_multiplier(p, cycle))) / 2
    t = np.exp(2j * np.pi * np.arange(64) / 64)
    r = 0.25
    for _ in range(60):
        ok = True
        for c in cycle:
            z = c + r * t
            for _ in range(period):
                z = p(z)
            if np.max(np.abs(z - c)) >= r * shrink:
                ok = False
                break
        if ok:
            return r
        r /= 2
    raise NotAttracting("could not find a trapping disk around the cycle")


def make_classifier(p: Polynomial1D, cycle: Sequence, max_iter: int) -> Classifier:
    cycle = tuple(complex(c) for c in cycle)
    if not cycle:
        raise NotAttracting("empty cycle")
    for i, c in enumerate(cycle):
        nxt = cycle[(i + 1) % len(cycle)]
        if abs(complex(p(c)) - nxt) > 1e-10 * max(1.0, abs(nxt)):
            raise NotAttracting(f"{c} does not map to {nxt}")
    mult = _cycle_multiplier(p, cycle)
    if not abs(mult) < 1:
        raise NotAttracting(f"cycle multiplier has modulus {abs(mult)} >= 1")
    return Classifier(p, cycle, int(max_iter), _capture_radius(p, cycle), escape_radius(p))


@dataclass(frozen=True, eq=False)
class RegionMap:
    viewport: Viewport
    resolution: tuple
    labels: np.ndarray = field(repr=False)
    behaviour: np.ndarray = field(repr=False)
    curve: tuple = field(repr=False)
    classifier: Optional[Classifier] = field(default=None, repr=False)

    @property
    def cell_size(self) -> tuple:
        nx, ny = self.resolution
        return ((self.viewport.xmax - self.viewport.xmin) / nx, (self.viewport.ymax - self.viewport.ymin) / ny)

    @property
    def cell_diameter(self) -> float:
        return math.hypot(*self.cell_size)

    def cell_index(self, z) -> tuple:
        z = complex(z)
        if not self.viewport.contains(z):
            raise OutOfViewport(f"{z} is outside the viewport")
        nx, ny = self.resolution
        hx, hy = self.cell_size
        i = min(int((z.real - self.viewport.xmin) / hx), nx - 1)
        j = min(int((z.imag - self.viewport.ymin) / hy), ny - 1)
        return j, i

    def curve_vertices(self) -> np.ndarray:
        if not self.curve:
            return np.array([], dtype=complex)
        return np.concatenate(self.curve)

    def counts(self) -> dict:
        return {LABEL_NAMES[k]: int(np.sum(self.labels == k)) for k in (INN, NEAR_E, OUT)}

    def to_pgm(self) -> bytes:
        ny, nx = self.labels.shape
        lut = np.array([PGM_LEVELS[INN], PGM_LEVELS[NEAR_E], PGM_LEVELS[OUT]], dtype=np.uint8)
        # PGM rows run top to bottom
        body = lut[self.labels[::-1]].tobytes()
        return f"P5\n{nx} {ny}\n255\n".encode() + body


def _neighbour_differs(b: np.ndarray) -> np.ndarray:
    diff = np.zeros(b.shape, dtype=bool)
    d0 = b[1:, :] != b[:-1, :]
    d1 = b[:, 1:] != b[:, :-1]
    diff[1:, :] |= d0
    diff[:-1, :] |= d0
    diff[:, 1:] |= d1
    diff[:, :-1] |= d1
    return diff


def label_regions(behaviour: np.ndarray) -> np.ndarray:
    """NearE = undetermined or behaviour change; Out = non-band components meeting the frame."""
    near = (behaviour == UNDETERMINED) | _neighbour_differs(behaviour)
    comp, _ = ndimage.label(~near)
    frame = np.unique(np.concatenate([comp[0], comp[-1], comp[:, 0], comp[:, -1]]))
    frame = frame[frame > 0]
    labels = np.full(behaviour.shape, INN, dtype=np.int8)
    labels[np.isin(comp, frame)] = OUT
    labels[near] = NEAR_E
    return labels


_MS_EDGES = {
    # corner bits: 1 = bottom-left, 2 = bottom-right, 4 = top-right, 8 = top-left
    # edges: 0 bottom, 1 right, 2 top, 3 left
    1: [(3, 0)], 2: [(0, 1)], 3: [(3, 1)], 4: [(1, 2)], 5: [(3, 2), (1, 0)], 6: [(0, 2)], 7: [(3, 2)],
    8: [(2, 3)], 9: [(2, 0)], 10: [(0, 3), (2, 1)], 11: [(2, 1)], 12: [(1, 3)], 13: [(1, 0)], 14: [(0, 3)],
}


def marching_squares(indicator: np.ndarray, centers: np.ndarray) -> list:
    """Polylines of the 1/2 level set of a 0/1 indicator sampled at ``centers``.

    Vertices sit at midpoints between differing neighbouring samples.
    """
    ny, nx = indicator.shape
    ind = indicator.astype(np.int64)
    code = (ind[:-1, :-1] | (ind[:-1, 1:] << 1) | (ind[1:, 1:] << 2) | (ind[1:, :-1] << 3))

    def edge_point(j, i, e):
        if e == 0:
            return (j, i, j, i + 1)
        if e == 1:
            return (j, i + 1, j + 1, i + 1)
        if e == 2:
            return (j + 1, i, j + 1, i + 1)
        return (j, i, j + 1, i)

    segs = []
    js, iss = np.nonzero((code > 0) & (code < 15))
    for j, i in zip(js.tolist(), iss.tolist()):
        for a, b in _MS_EDGES[int(code[j, i])]:
            segs.append((edge_point(j, i, a), edge_point(j, i, b)))
    # chain segments sharing endpoints
    adj = {}
    for s, (a, b) in enumerate(segs):
        adj.setdefault(a, []).append((s, b))
        adj.setdefault(b, []).append((s, a))
    used = [False] * len(segs)
    lines = []

    def mid(key):
        j0, i0, j1, i1 = key
        return (centers[j0, i0] + centers[j1, i1]) / 2

    for s0 in range(len(segs)):
        if used[s0]:
            continue
        used[s0] = True
        a, b = segs[s0]
        path = [a, b]
        for forward in (True, False):
            while True:
                end = path[-1] if forward else path[0]
                nxt = None
                for s, other in adj.get(end, []):
                    if not used[s]:
                        used[s] = True
                        nxt = other
                        break
                if nxt is None:
                    break
                if forward:
                    path.append(nxt)
                else:
                    path.insert(0, nxt)
        lines.append(np.array([mid(k) for k in path]))
    return lines


def basin_classify(p: Polynomial1D, cycle: Sequence, viewport: Viewport, resolution: tuple,
                   max_iter: int = 200, threads: int = 1) -> RegionMap:
    """Inn/Out/NearE labels from attraction to ``cycle`` versus escape."""
    nx, ny = int(resolution[0]), int(resolution[1])
    if nx < 2 or ny < 2:
        raise ValueError("resolution must be at least 2 x 2")
    clf = make_classifier(p, cycle, max_iter)
    centers = cell_centers(viewport, nx, ny)
    flat = centers.ravel()
    parts = map_chunks(lambda a, b: clf.behaviour(flat[a:b]), flat.size, threads)
    beh = np.concatenate(parts).reshape(ny, nx)
    labels = label_regions(beh)
    curve = tuple(marching_squares(beh == ATTRACTED, centers))
    return RegionMap(viewport, (nx, ny), labels, beh, curve, clf)


def region_of(rmap: RegionMap, z) -> str:
    j, i = rmap.cell_index(z)
    return LABEL_NAMES[int(rmap.labels[j, i])]


def refined_agrees(rmap: RegionMap, z, factor: int = 4) -> bool:
    """Re-classify around z at ``factor`` times the resolution; True when the label survives."""
    label = region_of(rmap, z)
    if label == "NearE" or rmap.classifier is None:
        return False
    hx, hy = rmap.cell_size
    fx, fy = hx / factor, hy / factor
    z = complex(z)
    # a 3 x 3 block of fine cells around z
    off = np.arange(-1, 2)
    pts = (z.real + off[None, :] * fx) + 1j * (z.imag + off[:, None] * fy)
    beh = rmap.classifier.behaviour(pts.ravel()).reshape(3, 3)
    j, i = rmap.cell_index(z)
    return bool(np.all(beh == rmap.behaviour[j, i]))


def signed_distance(rmap: RegionMap, z, tree: Optional[cKDTree] = None) -> np.ndarray:
    """Distance to the curve approximation, positive on Out, negative on Inn.

    In the band the sign follows the cell's behaviour (attracted counts as inside);
    outside the viewport the sign is positive.
    """
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    verts = rmap.curve_vertices()
    if tree is None:
        tree = cKDTree(np.column_stack([verts.real, verts.imag]))
    dist, _ = tree.query(np.column_stack([z.real, z.imag]))
    sign = np.ones(z.shape)
    vp = rmap.viewport
    inside = (z.real >= vp.xmin) & (z.real <= vp.xmax) & (z.imag >= vp.ymin) & (z.imag <= vp.ymax)
    nx, ny = rmap.resolution
    hx, hy = rmap.cell_size
    i = np.clip(((z.real - vp.xmin) / hx).astype(np.int64), 0, nx - 1)
    j = np.clip(((z.imag - vp.ymin) / hy).astype(np.int64), 0, ny - 1)
    lab = rmap.labels[j, i]
    beh = rmap.behaviour[j, i]
    neg = inside & ((lab == INN) | ((lab == NEAR_E) & (beh == ATTRACTED)))
    sign[neg] = -1
    return sign * dist


# ------------------------------------------------------------------ epsilon scan

def angle_condition(alpha, d: int, max_den: int = 64, tol: float = 1e-3) -> tuple:
    """Distance from arg((zeta+ - alpha)/(zeta- - alpha))/pi to rationals p/q with q <= max_den."""
    zp, zm = cmath.exp(2j * math.pi / d), cmath.exp(-2j * math.pi / d)
    theta = cmath.phase((zp - alpha) / (zm - alpha)) / math.pi
    best = min(abs(theta - round(theta * q) / q) for q in range(1, max_den + 1))
    return best > tol, best, theta


def q_poly(alpha) -> Polynomial1D:
    """(w - 1)(w - alpha)."""
    return Polynomial1D.from_roots([1.0, complex(alpha)])


@dataclass(frozen=True)
class ScanResult:
    admissible: tuple
    swapped: tuple
    marginal: tuple
    scanned: int

    def as_dict(self) -> dict:
        return {"admissible": list(self.admissible), "swapped": list(self.swapped),
                "marginal": list(self.marginal), "scanned": self.scanned}


def scan_epsilon(rmap: RegionMap, q_alpha, d: int, eps_values: Sequence, anchor=0j,
                 refine: bool = True) -> ScanResult:
    """eps with anchor + eps q(zeta-) in Inn and anchor + eps q(zeta+) in Out (or swapped)."""
    q = q_poly(q_alpha)
    zm, zp = cmath.exp(-2j * math.pi / d), cmath.exp(2j * math.pi / d)
    qm, qp = complex(q(zm)), complex(q(zp))
    good, swapped, marginal = [], [], []
    for eps in eps_values:
        eps = complex(eps)
        a, b = anchor + eps * qm, anchor + eps * qp
        try:
            ra, rb = region_of(rmap, a), region_of(rmap, b)
        except OutOfViewport:
            continue
        if {ra, rb} != {"Inn", "Out"}:
            continue
        if refine and not (refined_agrees(rmap, a) and refined_agrees(rmap, b)):
            marginal.append(eps)
            continue
        good.append(eps)
        swapped.append(ra == "Out")
    return ScanResult(tuple(good), tuple(swapped), tuple(marginal), len(eps_values))


# ------------------------------------------------------------------ winding numbers

@dataclass(frozen=True)
class LoopSamples:
    points: np.ndarray
    closed: bool = True

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=complex)
        if self.closed and pts.size and abs(pts[0] - pts[-1]) > 1e-12 * max(1.0, float(np.abs(pts).max())):
            raise ValueError("closed loop must end where it starts")
        object.__setattr__(self, "points", pts)


def winding_number(values, jump_limit: float = math.pi / 2, zero_tol: float = 1e-12) -> int:
    """Winding number of a closed sampled loop around 0."""
    if isinstance(values, LoopSamples):
        if not values.closed:
            raise ValueError("loop must be closed")
        v = values.points
    else:
        v = np.asarray(values, dtype=complex)
        if v.size and v[0] != v[-1]:
            v = np.append(v, v[0])
    mod = np.abs(v)
    if mod.min() <= zero_tol * max(1.0, float(mod.max())):
        raise ZeroOnLoop(f"loop passes within {mod.min():.3e} of 0")
    steps = np.angle(v[1:] / v[:-1])
    worst = float(np.abs(steps).max())
    if worst > jump_limit:
        raise Undersampled(f"argument jump {worst:.3f} exceeds {jump_limit:.3f}")
    return int(round(steps.sum() / (2 * math.pi)))


def rectangle_loop(d: int, rho: float, n_samples: int):
    """(r, theta) samples along the oriented boundary of [1-rho, 1+rho] x [-2pi/d, 2pi/d]."""
    per = max(2, n_samples // 4)
    th = 2 * math.pi / d
    s = np.linspace(0, 1, per, endpoint=False)
    r = np.concatenate([1 - rho + 2 * rho * s, np.full(per, 1 + rho), 1 + rho - 2 * rho * s, np.full(per, 1 - rho)])
    t = np.concatenate([np.full(per, -th), -th + 2 * th * s, np.full(per, th), th - 2 * th * s])
    return np.append(r, r[0]), np.append(t, t[0])


@dataclass(frozen=True)
class TransversalityReport:
    winding: int
    min_modulus: float
    samples: int
    phi_endpoints: tuple

    def as_dict(self) -> dict:
        return {"winding": self.winding, "minModulus": self.min_modulus, "samples": self.samples,
                "phiAtMinus": self.phi_endpoints[0], "phiAtPlus": self.phi_endpoints[1]}


def transversality_check(p: Polynomial1D, q: Polynomial1D, eps, c, rho: float, rmap: RegionMap,
                         n_samples: int = 1024, d: int = 3, report: bool = False):
    """Winding number of Phi = (|w|^d - 1) + i phi(p(c) + eps q(w)) around the polar rectangle."""
    r, t = rectangle_loop(d, rho, n_samples)
    w = r * np.exp(1j * t)
    z = complex(p(complex(c))) + complex(eps) * q(w)
    verts = rmap.curve_vertices()
    tree = cKDTree(np.column_stack([verts.real, verts.imag]))
    phi = signed_distance(rmap, z, tree)
    vp = rmap.viewport
    inside = (z.real >= vp.xmin) & (z.real <= vp.xmax) & (z.imag >= vp.ymin) & (z.imag <= vp.ymax)
    nx, ny = rmap.resolution
    hx, hy = rmap.cell_size
    i = np.clip(((z.real - vp.xmin) / hx).astype(np.int64), 0, nx - 1)
    j = np.clip(((z.imag - vp.ymin) / hy).astype(np.int64), 0, ny - 1)
    band = inside & (rmap.labels[j, i] == NEAR_E) & (np.abs(r - 1) < rho / 2)
    if band.any():
        raise LoopHitsBand(f"{int(band.sum())} loop samples fall in the boundary band")
    vals = (r ** d - 1) + 1j * phi
    wn = winding_number(vals)
    if not report:
        return wn
    ends = signed_distance(rmap, complex(p(complex(c))) + complex(eps) * q(np.array([cmath.exp(-2j * math.pi / d),
                                                                                       cmath.exp(2j * math.pi / d)])))
    return TransversalityReport(wn, float(np.abs(vals).min()), int(vals.size - 1), (float(ends[0]), float(ends[1])))


def zero_crossing_parity(p: Polynomial1D, q: Polynomial1D, eps, c, rmap: RegionMap, d: int = 3, n: int = 20000) -> int:
    """Independent oracle: sign changes of phi along |w| = 1, theta in [-2pi/d, 2pi/d]."""
    t = np.linspace(-2 * math.pi / d, 2 * math.pi / d, n)
    z = complex(p(complex(c))) + complex(eps) * q(np.exp(1j * t))
    phi = signed_distance(rmap, z)
    return int(np.sum(np.sign(phi[1:]) != np.sign(phi[:-1])))
