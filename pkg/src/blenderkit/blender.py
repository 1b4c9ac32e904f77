"""Skew IFSs (l_j(z), phi_j(z, w)) on the unit polydisk and the graph-pullback
intersection oracle.

Points of C^k are split as a complex array ``z`` and an array ``w`` whose
trailing axis has length k-1.
"""
from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import rng
from .complexgeo import AffineContraction, Disk, Polydisk, SLOPE_SAFETY, VerticalGraph, SECTOR_A_PRIME
from .errors import DenominatorNonpositive, NoBranch, NoConvergence, SlopeBlowup
from .ifs1d import Ifs1D, LEMMA_TARGET, rank_branches

MAX_PULLBACK_ITER = 200
EMPIRICAL_SAFETY = 1.1
ROUNDING_FLOOR = 16 * np.finfo(float).eps


@dataclass(frozen=True, eq=False)
class SkewBranch:
    """L(z, w) = (first(z, w), fiber(z, w)).

    ``first`` defaults to the affine ``base``; when given, it is the actual
    first coordinate and ``base`` is its unperturbed reference.
    """

    base: AffineContraction
    fiber: Callable
    dz_bound: float
    dw_bound: float
    first: Optional[Callable] = None
    empirical: bool = False

    def first_coord(self, z, w):
        if self.first is None:
            return self.base(z)
        return self.first(z, w)

    def __call__(self, z, w):
        return self.first_coord(z, w), self.fiber(z, w)


@dataclass(frozen=True, eq=False)
class BlenderIfs:
    k: int
    branches: tuple
    perturbation_c1: float = 0.0
    label: str = ""

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("a blender IFS lives in C^k with k >= 2")
        object.__setattr__(self, "branches", tuple(self.branches))
        if not self.branches:
            raise ValueError("need at least one branch")

    @property
    def d(self) -> int:
        return len(self.branches)

    @property
    def m(self) -> complex:
        return self.branches[0].base.m

    def base_ifs(self) -> Ifs1D:
        return Ifs1D(tuple(b.base for b in self.branches), label=self.label)


@dataclass(frozen=True, eq=False)
class IntersectionWitness:
    symbols: tuple
    point: tuple
    radius: float
    graph_trail: tuple
    factors: tuple = ()
    diameters: tuple = ()
    analytic_radius: float = 0.0
    measured_radius: float = 0.0
    meta: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "symbols": list(self.symbols),
            "point": list(self.point),
            "radius": self.radius,
            "analyticRadius": self.analytic_radius,
            "measuredRadius": self.measured_radius,
            "graphTrail": list(self.graph_trail),
            "factors": list(self.factors),
        }


def slope_threshold(k: int, m) -> float:
    if k < 2:
        raise ValueError("k must be >= 2")
    am = abs(complex(m))
    if not 0 < am < 1:
        raise ValueError("need 0 < |m| < 1")
    return (1 - am) / (100 * math.sqrt(k - 1))


def c1_budget(k: int, m) -> float:
    return (1 - abs(complex(m))) / (1000 * math.sqrt(k - 1))


def propagate_slope(graph_slope: float, branch: SkewBranch, eps_c1: float, m) -> float:
    """Implicit-function bound on the slope of a pulled-back graph."""
    s, e = float(graph_slope), float(eps_c1)
    num = s * (branch.dw_bound + e) + e
    den = abs(complex(m)) - s * (branch.dz_bound + e) - e
    if den <= 0:
        raise DenominatorNonpositive(f"denominator {den} <= 0")
    return num / den


def _stack_nodes(graph: VerticalGraph) -> np.ndarray:
    return np.stack(graph.nodes(), axis=-1)


def _eval_graph(graph: VerticalGraph, w: np.ndarray):
    return graph(*[w[..., i] for i in range(w.shape[-1])])


def pullback_graph(branch: SkewBranch, graph: VerticalGraph, tol: float = 1e-13,
                   eps_c1: float = 0.0, threshold: Optional[float] = None) -> VerticalGraph:
    """Graph of L^{-1}(Gamma): per node, solve z = l^{-1}(gamma(phi(z, w)) - eps1(z, w))."""
    if tol <= 0:
        raise ValueError("tol must be > 0")
    w = _stack_nodes(graph)
    z = np.array(graph.values)  # warm start
    active = np.ones(z.shape, dtype=bool)
    for _ in range(MAX_PULLBACK_ITER):
        za, wa = z[active], w[active]
        target = _eval_graph(graph, branch.fiber(za, wa))
        if branch.first is not None:
            target = target - (branch.first(za, wa) - branch.base(za))
        znew = branch.base.inverse(target)
        res = np.abs(znew - za)
        z[active] = znew
        done = res < tol
        idx = np.flatnonzero(active)
        active.flat[idx[done]] = False
        if not active.any():
            break
    else:
        node = int(np.flatnonzero(active)[0])
        raise NoConvergence(f"pullback did not converge at node {node}", node=node)
    out = VerticalGraph(graph.domain, z, 0.0)
    fd = SLOPE_SAFETY * out.finite_difference_slope()
    m = branch.base.m
    try:
        analytic = propagate_slope(graph.slope_bound, branch, eps_c1, m)
    except DenominatorNonpositive:
        analytic = math.inf
    slope = min(fd, analytic)
    limit = slope_threshold(graph.k, m) if threshold is None else threshold
    if slope > limit:
        raise SlopeBlowup(f"pulled-back slope {slope:.3e} exceeds {limit:.3e}")
    return VerticalGraph(graph.domain, z, slope, {"fdSlope": fd, "analyticSlope": analytic})


def push_point(ifs: BlenderIfs, symbols, z, w):
    """Apply L_{s_n}, ..., L_{s_1} in that order, i.e. L_{s_1} o ... o L_{s_n}."""
    z = np.asarray(z, dtype=complex)
    w = np.asarray(w, dtype=complex)
    for j in reversed(symbols):
        z, w = ifs.branches[j](z, w)
    return z, w


def _domain_probe(domain: Polydisk, n: int = 16) -> np.ndarray:
    """Points on the distinguished boundary plus the center, shape (N, k-1)."""
    t = np.exp(2j * np.pi * np.arange(n) / n)
    pts = [np.array(domain.centers)]
    for i in range(domain.dim):
        for u in t:
            p = np.array(domain.centers, dtype=complex)
            p[i] += domain.radii[i] * u
            pts.append(p)
    return np.array(pts)


def intersect_graph_blender(ifs: BlenderIfs, graph: VerticalGraph, steps: int, tol: float = 1e-13,
                            target: Disk = LEMMA_TARGET) -> IntersectionWitness:
    """Nested pullbacks of ``graph``; the symbols define a cylinder meeting the graph."""
    k = ifs.k
    if graph.k != k:
        raise ValueError("graph dimension does not match the IFS")
    limit = slope_threshold(k, ifs.m)
    if graph.slope_bound > limit:
        raise SlopeBlowup(f"initial slope {graph.slope_bound:.3e} exceeds {limit:.3e}")
    base = ifs.base_ifs()
    dom_r = max(graph.domain.radii) * math.sqrt(graph.domain.dim)
    current = graph
    symbols, trail, factors, diams = [], [], [], []
    ext = 2 * math.sqrt(sum(r * r for r in graph.domain.radii))
    for step in range(steps):
        hull = current.z_hull()
        ranked = rank_branches(base, hull.center, hull.radius + current.slope_bound * dom_r, target)
        if not ranked:
            raise NoBranch(f"step {step + 1}: no branch pulls the graph back into the target")
        nxt = None
        for j in ranked:
            b = ifs.branches[j]
            try:
                cand = pullback_graph(b, current, tol, ifs.perturbation_c1, limit)
            except (SlopeBlowup, NoConvergence):
                continue
            h = cand.z_hull()
            if target.contains_disk(h):
                nxt = (j, cand)
                break
        if nxt is None:
            raise NoBranch(f"step {step + 1}: no pulled-back graph stays in the graph class")
        j, current = nxt
        b = ifs.branches[j]
        f = b.dw_bound + b.dz_bound * current.slope_bound
        ext *= f
        symbols.append(j)
        trail.append(current.slope_bound)
        factors.append(f)
        diams.append(ext)
    center = np.array(current.domain.centers, dtype=complex)
    zc = complex(_eval_graph(current, center[None, :])[0])
    pz, pw = push_point(ifs, symbols, np.array([zc]), center[None, :])
    point = (complex(pz[0]),) + tuple(complex(v) for v in pw[0])
    probe = _domain_probe(current.domain)
    qz, qw = push_point(ifs, symbols, _eval_graph(current, probe), probe)
    spread = np.sqrt(np.abs(qz - pz[0]) ** 2 + np.sum(np.abs(qw - pw[0]) ** 2, axis=-1))
    measured = float(spread.max())
    analytic = ext * (1 + graph.slope_bound)
    # the point itself carries rounding error of a few ulps
    floor = ROUNDING_FLOOR * max(1.0, float(np.linalg.norm(point)))
    return IntersectionWitness(tuple(symbols), point, max(analytic, measured, floor), tuple(trail),
                               tuple(factors), tuple(diams), analytic, measured)


# ---------------------------------------------------------------- validation

@dataclass(frozen=True)
class Clause:
    name: str
    passed: bool
    measured: float
    threshold: float
    margin: float
    empirical: bool = False

    def as_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "measured": self.measured,
                "threshold": self.threshold, "margin": self.margin, "empirical": self.empirical}


@dataclass(frozen=True)
class BlenderReport:
    clauses: tuple

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.clauses)

    def clause(self, name: str) -> Clause:
        for c in self.clauses:
            if c.name == name:
                return c
        raise KeyError(name)

    def failed(self) -> list:
        return [c.name for c in self.clauses if not c.passed]


def _lt(name, measured, threshold, empirical=False) -> Clause:
    return Clause(name, bool(measured < threshold), float(measured), float(threshold),
                  float(threshold - measured), empirical)


def polydisk_samples(k: int, per_axis: int) -> np.ndarray:
    """Samples of the closed unit polydisk in C^k, shape (N, k); includes the torus."""
    radii = np.array([0.0, 0.5, 0.9, 1.0])
    ang = np.exp(2j * np.pi * np.arange(per_axis) / per_axis)
    axis = np.unique(np.concatenate([[0j], (radii[1:, None] * ang[None, :]).ravel()]))
    mesh = np.meshgrid(*([axis] * k), indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=-1)


def fiber_derivatives(branch: SkewBranch, pts: np.ndarray, h: float = 1e-6):
    """Sup of |d phi / dz| and the Frobenius norm of d phi / dw over ``pts``."""
    z, w = pts[:, 0], pts[:, 1:]
    dz = (branch.fiber(z + h, w) - branch.fiber(z - h, w)) / (2 * h)
    dzmax = float(np.max(np.sqrt(np.sum(np.abs(dz) ** 2, axis=-1))))
    acc = np.zeros(len(z))
    for i in range(w.shape[-1]):
        e = np.zeros(w.shape[-1], dtype=complex)
        e[i] = h
        col = (branch.fiber(z, w + e) - branch.fiber(z, w - e)) / (2 * h)
        acc += np.sum(np.abs(col) ** 2, axis=-1)
    return dzmax, float(np.sqrt(acc.max()))


def first_coordinate_c1(branch: SkewBranch, pts: np.ndarray, h: float = 1e-6) -> float:
    """max(sup|eps1|, sup|d eps1/dz|, sup|d eps1/dw|) with eps1 = first - base."""
    if branch.first is None:
        return 0.0
    z, w = pts[:, 0], pts[:, 1:]

    def eps1(zz, ww):
        return branch.first(zz, ww) - branch.base(zz)

    c0 = float(np.max(np.abs(eps1(z, w))))
    dz = float(np.max(np.abs((eps1(z + h, w) - eps1(z - h, w)) / (2 * h))))
    acc = np.zeros(len(z))
    for i in range(w.shape[-1]):
        e = np.zeros(w.shape[-1], dtype=complex)
        e[i] = h
        acc += np.abs((eps1(z, w + e) - eps1(z, w - e)) / (2 * h)) ** 2
    return max(c0, dz, float(np.sqrt(acc.max())))


def branch_alphas(ifs: BlenderIfs):
    """alpha_j = t_j / ((1-|m|) zeta_j) with zeta_j the d-th root closest in angle to t_j."""
    d = ifs.d
    am = abs(ifs.m)
    roots = np.exp(2j * np.pi * np.arange(d) / d)
    out, used = [], []
    for b in ifs.branches:
        r = int(np.argmax((b.base.t * np.conj(roots)).real))
        used.append(r)
        out.append(b.base.t / ((1 - am) * roots[r]))
    return out, used


def validate_blender(ifs: BlenderIfs, per_axis: int = 24) -> BlenderReport:
    """Check every hypothesis of the blender lemma; failures are reported, not raised."""
    k, d = ifs.k, ifs.d
    mods = [abs(b.base.m) for b in ifs.branches]
    am = mods[0]
    cl = [Clause("k>=2", k >= 2, k, 2, k - 2)]
    spread = max(mods) - min(mods)
    cl.append(_lt("common |m|", spread, 1e-9 + 1e-300))
    if d >= 3:
        cl.append(Clause("d>=3", True, d, 3, d - 3))
        cl.append(Clause("0.98<|m|<1", 0.98 < am < 1, am, 0.98, min(am - 0.98, 1 - am)))
        alphas, used = branch_alphas(ifs)
        cl.append(Clause("distinct roots", len(set(used)) == d, len(set(used)), d, len(set(used)) - d))
        for j, a in enumerate(alphas):
            mg = SECTOR_A_PRIME.margin(a)
            cl.append(Clause(f"alpha_{j} in A'", mg > 0, abs(a), 0.7, mg))
    elif d == 2:
        m = ifs.m
        t0, t1 = ifs.branches[0].base.t, ifs.branches[1].base.t
        alpha = t0 / (1 - am)
        cl.append(Clause("two-branch form", abs(t0 + t1) < 1e-12, abs(t0 + t1), 1e-12, 1e-12 - abs(t0 + t1)))
        cl.append(Clause("0.99<|m|<1", 0.99 < am < 1, am, 0.99, min(am - 0.99, 1 - am)))
        gap = abs(cmath.phase(m) - math.pi / 2)
        cl.append(_lt("|arg m - pi/2|<pi/50", gap, math.pi / 50))
        cl.append(Clause("0.9<|alpha|<1", 0.9 < abs(alpha) < 1, abs(alpha), 0.9,
                         min(abs(alpha) - 0.9, 1 - abs(alpha))))
    else:
        cl.append(Clause("d>=2", False, d, 2, d - 2))
    pts = polydisk_samples(k, per_axis if k == 2 else max(4, per_axis // 4))
    c1 = float(ifs.perturbation_c1)
    for j, b in enumerate(ifs.branches):
        mdz, mdw = fiber_derivatives(b, pts)
        dz = b.dz_bound if (not b.empirical and b.dz_bound >= mdz) else max(b.dz_bound, EMPIRICAL_SAFETY * mdz)
        dw = b.dw_bound if (not b.empirical and b.dw_bound >= mdw) else max(b.dw_bound, EMPIRICAL_SAFETY * mdw)
        cl.append(_lt(f"branch {j}: |d phi/dz| < 1", dz, 1.0, b.empirical or dz != b.dz_bound))
        cl.append(_lt(f"branch {j}: |d phi/dw| < 1/2", dw, 0.5, b.empirical or dw != b.dw_bound))
        img = float(np.max(np.abs(b.fiber(pts[:, 0], pts[:, 1:]))))
        cl.append(_lt(f"branch {j}: fiber inside unit polydisk", img, 1.0, True))
        c1 = max(c1, first_coordinate_c1(b, pts))
    cl.append(_lt("C1 budget", c1, c1_budget(k, am)))
    return BlenderReport(tuple(cl))


def sample_limit_set_k(ifs: BlenderIfs, n_points: int, burn_in: int = 64, seed: int = 0) -> np.ndarray:
    """Chaos game in C^k; returns an array of shape (n_points, k)."""
    if n_points < 1:
        raise ValueError("nPoints must be >= 1")
    chains = max(1, min(n_points, 256))
    per = -(-n_points // chains)
    z = np.zeros(chains, dtype=complex)
    w = np.zeros((chains, ifs.k - 1), dtype=complex)
    out = np.empty((per, chains, ifs.k), dtype=complex)
    for step in range(burn_in + per):
        j = rng.integers(seed, step * chains, chains, ifs.d)
        zn, wn = np.empty_like(z), np.empty_like(w)
        for b in range(ifs.d):
            sel = j == b
            if sel.any():
                zn[sel], wn[sel] = ifs.branches[b](z[sel], w[sel])
        z, w = zn, wn
        if step >= burn_in:
            out[step - burn_in, :, 0] = z
            out[step - burn_in, :, 1:] = w
    return out.transpose(1, 0, 2).reshape(-1, ifs.k)[:n_points]


def product_blender(d: int, m, alphas, k: int = 2, fiber_scale: float = 0.25,
                    z_coupling: float = 0.0) -> BlenderIfs:
    """Reference blender: lemma base maps with fibers zeta_j/2 + s w (+ c z)."""
    m = complex(m)
    br = []
    for j, a in enumerate(alphas):
        zeta = cmath.exp(2j * math.pi * j / d)
        base = AffineContraction(m, complex(a) * (1 - abs(m)) * zeta)

        def fiber(z, w, zeta=zeta):
            z = np.asarray(z)
            return zeta / 2 + fiber_scale * np.asarray(w) + z_coupling * z[..., None]

        dw = fiber_scale * math.sqrt(k - 1)
        dz = z_coupling * math.sqrt(k - 1)
        br.append(SkewBranch(base, fiber, dz, dw))
    return BlenderIfs(k, tuple(br), 0.0, label=f"product d={d}")
