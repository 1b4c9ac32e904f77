"""Perturbed product maps f(z, w) = (p(z) + eps w, w^d + kappa).

Convention: q(w) = w^d + kappa, and c_kappa denotes the principal d-th root of
-kappa, so the Julia set of q clusters around the points zeta * c_kappa.

Rescaled coordinates (z~, w~) = ((z - z0) / S, w / (2 c_kappa)) with
S = delta * e^{i theta}; theta is picked so that the translation part of every
rescaled inverse branch is the positive real alpha |m| (1 - |m|) times zeta.
"""
from __future__ import annotations

import cmath
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng
from .blender import (BlenderIfs, IntersectionWitness, SkewBranch, c1_budget, first_coordinate_c1,
                      intersect_graph_blender, polydisk_samples, slope_threshold)
from .complexgeo import AffineContraction, Polydisk, SLOPE_SAFETY, VerticalGraph, graph_from_callable
from .errors import (EpsZero, GeometryUnverified, HypothesisViolation, NoConvergence, NoEnteringComponent,
                     NotContracting, OutOfDomain, PreconditionError, RootFindingFailure)
from .ifs1d import LEMMA_TARGET

ALPHA_D3 = 0.8
ALPHA_D2 = 0.95
PUSH_CAP = 12
CORE_RADIUS = 0.1


def kappa_gate(d: int) -> float:
    """Smallest |kappa| with |kappa|^{(d-1)/d} >= 2000; equals 2000^{3/2} for d = 3."""
    return 2000.0 ** (d / (d - 1))


# ------------------------------------------------------------------ polynomials

@dataclass(frozen=True)
class Polynomial1D:
    """Coefficients in ascending order: coefficients[k] multiplies z^k."""

    coefficients: tuple

    def __post_init__(self):
        cs = [complex(c) for c in self.coefficients]
        while len(cs) > 1 and cs[-1] == 0:
            cs.pop()
        if not cs or not all(math.isfinite(c.real) and math.isfinite(c.imag) for c in cs):
            raise ValueError("coefficients must be finite and nonempty")
        object.__setattr__(self, "coefficients", tuple(cs))

    @classmethod
    def from_roots(cls, roots, lead=1.0) -> "Polynomial1D":
        c = np.array([complex(lead)])
        for r in roots:
            c = np.convolve(c, [-complex(r), 1.0])
        return cls(tuple(c))

    @property
    def degree(self) -> int:
        return len(self.coefficients) - 1

    @property
    def leading(self) -> complex:
        return self.coefficients[-1]

    def __call__(self, z):
        z = np.asarray(z, dtype=complex) if not isinstance(z, complex) else z
        acc = 0j * z
        for c in reversed(self.coefficients):
            acc = acc * z + c
        return acc

    def derivative(self) -> "Polynomial1D":
        if self.degree == 0:
            return Polynomial1D((0j,))
        return Polynomial1D(tuple(k * c for k, c in enumerate(self.coefficients) if k))

    def __add__(self, other: "Polynomial1D") -> "Polynomial1D":
        a, b = list(self.coefficients), list(other.coefficients)
        n = max(len(a), len(b))
        a += [0j] * (n - len(a))
        b += [0j] * (n - len(b))
        return Polynomial1D(tuple(x + y for x, y in zip(a, b)))

    def __sub__(self, other: "Polynomial1D") -> "Polynomial1D":
        return self + other.scale(-1)

    def __mul__(self, other: "Polynomial1D") -> "Polynomial1D":
        return Polynomial1D(tuple(np.convolve(self.coefficients, other.coefficients)))

    def scale(self, s) -> "Polynomial1D":
        return Polynomial1D(tuple(complex(s) * c for c in self.coefficients))

    def compose(self, inner: "Polynomial1D") -> "Polynomial1D":
        """self o inner, by Horner's scheme on coefficient arrays."""
        acc = np.array([self.coefficients[-1]])
        ic = np.array(inner.coefficients)
        for c in reversed(self.coefficients[:-1]):
            acc = np.convolve(acc, ic)
            acc[0] += c
        return Polynomial1D(tuple(acc))

    def affine_conjugate_input(self, a, s) -> "Polynomial1D":
        """Coefficients of x -> self(a + s x)."""
        return self.compose(Polynomial1D((complex(a), complex(s))))

    def roots(self, polish: int = 8) -> np.ndarray:
        """Companion-matrix eigenvalues followed by Newton polishing."""
        n = self.degree
        if n < 1:
            return np.array([], dtype=complex)
        c = np.array(self.coefficients)
        comp = np.zeros((n, n), dtype=complex)
        comp[1:, :-1] = np.eye(n - 1)
        comp[:, -1] = -c[:-1] / c[-1]
        r = np.linalg.eigvals(comp)
        if not np.all(np.isfinite(r)):
            raise RootFindingFailure("companion eigenvalues are not finite")
        dp = self.derivative()
        for _ in range(polish):
            f, g = self(r), dp(r)
            step = np.where(np.abs(g) > 0, f / np.where(g == 0, 1, g), 0)
            # keep a Newton step only when it lowers the residual
            cand = r - step
            r = np.where(np.abs(self(cand)) < np.abs(f), cand, r)
        return r

    def newton(self, z, tol=1e-15, max_iter=100):
        dp = self.derivative()
        z = complex(z)
        for _ in range(max_iter):
            g = dp(z)
            if g == 0:
                break
            step = self(z) / g
            z -= step
            if abs(step) <= tol * (1 + abs(z)):
                return z
        raise NoConvergence(f"Newton did not converge near {z}")


# ------------------------------------------------------------------ Julia set of q

def principal_root(d: int, kappa) -> complex:
    """Principal d-th root of -kappa."""
    # 0j - kappa keeps a +0 imaginary part for real kappa, so arg(-kappa) = pi, not -pi
    return complex(np.power(0j - complex(kappa), 1.0 / d))


def _check_root_of_unity(d: int, zeta) -> complex:
    zeta = complex(zeta)
    if abs(zeta ** d - 1) > 1e-12:
        raise PreconditionError(f"{zeta} is not a {d}-th root of unity")
    return zeta


def roots_of_unity(d: int) -> np.ndarray:
    return np.exp(2j * np.pi * np.arange(d) / d)


def julia_inverse_branch(d: int, kappa, zeta, x):
    """Inverse branch of w^d + kappa on D(0, 2|kappa|^{1/d}) with value zeta * c_kappa at 0."""
    kappa = complex(kappa)
    zeta = _check_root_of_unity(d, zeta)
    if not abs(kappa) ** ((d - 1) / d) > 4 / d:
        raise OutOfDomain("|kappa| too small for the inverse branches to separate")
    x = np.asarray(x, dtype=complex)
    if np.any(np.abs(x) > 2 * abs(kappa) ** (1 / d) * (1 + 1e-12)):
        raise OutOfDomain("x outside D(0, 2|kappa|^{1/d})")
    c = principal_root(d, kappa)
    out = zeta * c * np.power(1 - x / kappa, 1.0 / d)
    return complex(out) if out.ndim == 0 else out


def rescaled_inverse_raw(d: int, kappa, zeta, x):
    """Unchecked inverse branch in w~ = w / (2 c_kappa): (zeta/2)(1 - 2 c x / kappa)^{1/d}."""
    kappa = complex(kappa)
    c = principal_root(d, kappa)
    return zeta / 2 * np.power(1 - 2 * c * np.asarray(x) / kappa, 1.0 / d)


def rescaled_inverse_derivative(d: int, kappa, zeta, x):
    kappa = complex(kappa)
    c = principal_root(d, kappa)
    y = 1 - 2 * c * np.asarray(x) / kappa
    return zeta / 2 / d * np.power(y, 1.0 / d - 1) * (-2 * c / kappa)


def rescaled_q(d: int, kappa, w):
    kappa = complex(kappa)
    c = principal_root(d, kappa)
    return kappa * (1 - (2 * np.asarray(w)) ** d) / (2 * c)


@dataclass(frozen=True)
class JuliaGeometryReport:
    d: int
    kappa: complex
    containment_radius: float
    max_deviation: float
    derivative_bound: float
    max_derivative: float
    max_derivative_fd: float
    roundtrip_residual: float
    kappa_gate: float
    samples: int

    @property
    def containment_margin(self) -> float:
        return self.containment_radius - self.max_deviation

    @property
    def derivative_margin(self) -> float:
        return self.derivative_bound - max(self.max_derivative, self.max_derivative_fd)

    @property
    def passed(self) -> bool:
        return self.containment_margin > 0 and self.derivative_margin > 0

    def as_dict(self) -> dict:
        return {
            "convention": "q(w) = w^d + kappa",
            "d": self.d, "kappa": self.kappa,
            "containmentRadius": self.containment_radius, "maxDeviation": self.max_deviation,
            "containmentMargin": self.containment_margin,
            "derivativeBound": self.derivative_bound, "maxDerivative": self.max_derivative,
            "maxDerivativeFD": self.max_derivative_fd, "derivativeMargin": self.derivative_margin,
            "roundtripResidual": self.roundtrip_residual,
            "kappaGate": self.kappa_gate, "aboveGate": abs(self.kappa) >= self.kappa_gate,
            "samples": self.samples, "passed": self.passed,
        }


def unit_disk_samples(n: int) -> np.ndarray:
    """About n deterministic points of the closed unit disk, boundary included."""
    nb = max(8, int(math.sqrt(n) * 2))
    side = max(2, int(math.sqrt(max(n - nb, 4) * 4 / math.pi)))
    while True:
        s = np.linspace(-1, 1, side)
        x, y = np.meshgrid(s, s)
        g = (x + 1j * y).ravel()
        g = g[np.abs(g) <= 1]
        if g.size + nb >= n:
            break
        side += 1
    return np.concatenate([g, np.exp(2j * np.pi * np.arange(nb) / nb)])


def verify_julia_geometry(d: int, kappa, n_samples: int = 10_000) -> JuliaGeometryReport:
    """Dense check of the rescaled inverse branches on the closed unit disk."""
    kappa = complex(kappa)
    x = unit_disk_samples(n_samples)
    scale = abs(kappa) ** (-(d - 1) / d)
    dev = der = fd = rt = 0.0
    h = 1e-4
    for zeta in roots_of_unity(d):
        b = rescaled_inverse_raw(d, kappa, zeta, x)
        dev = max(dev, float(np.max(np.abs(b - zeta / 2))))
        der = max(der, float(np.max(np.abs(rescaled_inverse_derivative(d, kappa, zeta, x)))))
        fdv = (rescaled_inverse_raw(d, kappa, zeta, x + h) - rescaled_inverse_raw(d, kappa, zeta, x - h)) / (2 * h)
        fd = max(fd, float(np.max(np.abs(fdv))))
        rt = max(rt, float(np.max(np.abs(rescaled_q(d, kappa, b) - x))))
    return JuliaGeometryReport(d, kappa, 0.5 * scale, dev, scale, der, fd, rt, kappa_gate(d), int(x.size))


# ------------------------------------------------------------------ skew product

def _alpha0(d: int) -> float:
    return ALPHA_D2 if d == 2 else ALPHA_D3


@dataclass(frozen=True, eq=False)
class SkewProduct:
    p: Polynomial1D
    d: int
    kappa: complex
    eps: complex
    z0: complex
    m: complex
    delta: float

    def __post_init__(self):
        if self.d < 2:
            raise HypothesisViolation("d", "need d >= 2")
        fix = abs(self.p(self.z0) - self.z0)
        if fix > 1e-10 * max(1.0, abs(self.z0)):
            raise HypothesisViolation("p(z0)=z0", f"|p(z0) - z0| = {fix:.3e}")
        am = abs(self.m)
        if abs(self.m * self.p.derivative()(self.z0) - 1) > 1e-9:
            raise HypothesisViolation("m", "m must equal 1/p'(z0)")
        if self.d == 2:
            if not 0.99 < am < 1:
                raise HypothesisViolation("|m|", f"need 0.99 < |m| < 1 for d = 2, got {am}")
            if not abs(cmath.phase(self.m) - math.pi / 2) < math.pi / 50:
                raise HypothesisViolation("arg m", "need |arg m - pi/2| < pi/50 for d = 2")
        elif not 0.98 < am < 1:
            raise HypothesisViolation("|m|", f"need 0.98 < |m| < 1, got {am}")
        if not self.delta > 0:
            raise HypothesisViolation("delta", "delta must be positive")

    @property
    def alpha0(self) -> float:
        return _alpha0(self.d)

    @property
    def low_multiplier(self) -> bool:
        return 1 < abs(1 / self.m) < 1.01

    @property
    def c_kappa(self) -> complex:
        return principal_root(self.d, self.kappa)

    @property
    def rotation(self) -> complex:
        """Unit complex number e^{i theta} of the first-coordinate rescaling."""
        v = -self.m * self.c_kappa * self.eps
        return v / abs(v) if v != 0 else 1 + 0j

    @property
    def scale(self) -> complex:
        return self.delta * self.rotation

    @property
    def tau(self) -> complex:
        """Coefficient of w~ in the rescaled first coordinate."""
        return 2 * self.c_kappa * self.eps / self.scale

    @property
    def translation(self) -> float:
        return self.alpha0 * abs(self.m) * (1 - abs(self.m))

    def p_rescaled(self) -> Polynomial1D:
        """p~(x) = (p(z0 + S x) - z0) / S."""
        S = self.scale
        sh = self.p.affine_conjugate_input(self.z0, S)
        cs = list(sh.coefficients)
        cs[0] -= self.z0
        return Polynomial1D(tuple(c / S for c in cs))

    def forward(self, z, w):
        return self.p(z) + self.eps * w, np.asarray(w) ** self.d + self.kappa

    def forward_rescaled(self, zt, wt):
        return self.p_rescaled()(zt) + self.tau * wt, rescaled_q(self.d, self.kappa, wt)

    def to_rescaled(self, z, w):
        return (np.asarray(z) - self.z0) / self.scale, np.asarray(w) / (2 * self.c_kappa)

    def from_rescaled(self, zt, wt):
        return self.z0 + self.scale * np.asarray(zt), 2 * self.c_kappa * np.asarray(wt)

    def report(self) -> dict:
        return {
            "convention": "q(w) = w^d + kappa",
            "d": self.d, "kappa": self.kappa, "eps": self.eps, "z0": self.z0, "m": self.m,
            "delta": self.delta, "multiplier": 1 / self.m, "lowMultiplier": self.low_multiplier,
        }


def _delta_formula(d: int, kappa, eps, m) -> float:
    if eps == 0:
        raise EpsZero("eps must be nonzero")
    return abs(complex(kappa)) ** (1 / d) * abs(complex(eps)) / (_alpha0(d) * (1 - abs(complex(m))))


def nonlinearity_c1(skew: SkewProduct, n: int = 2000) -> float:
    """Rescaled C1 size of p~_0^{-1}(x) - m x on the unit disk (the O(delta) term)."""
    x = unit_disk_samples(n)
    ptil = skew.p_rescaled()
    y = _inverse_p0(ptil, skew.m, x)
    err = y - skew.m * x
    der = 1 / ptil.derivative()(y) - skew.m
    return max(float(np.max(np.abs(err))), float(np.max(np.abs(der))))


def o_delta_budget(m) -> float:
    return (1 - abs(complex(m))) / 2000


def choose_delta(skew: SkewProduct) -> float:
    """|kappa|^{1/d} |eps| / (alpha0 (1 - |m|)); warns when the O(delta) term exceeds its budget."""
    delta = _delta_formula(skew.d, skew.kappa, skew.eps, skew.m)
    probe = replace(skew, delta=delta)
    size = nonlinearity_c1(probe)
    if size > o_delta_budget(skew.m):
        warnings.warn(f"O(delta) term {size:.3e} exceeds (1/2000)(1-|m|) = {o_delta_budget(skew.m):.3e}",
                      RuntimeWarning, stacklevel=2)
    return delta


def find_fixed_point(p: Polynomial1D, guess) -> complex:
    return (p - Polynomial1D((0j, 1.0))).newton(guess)


def make_skew_product(p: Polynomial1D, d: int, kappa, eps, z0=None, delta: Optional[float] = None) -> SkewProduct:
    """Build a SkewProduct; z0 defaults to the fixed point of p closest to the origin."""
    if z0 is None:
        fixed = (p - Polynomial1D((0j, 1.0))).roots()
        z0 = complex(fixed[np.argmin(np.abs(fixed))])
    z0 = complex(z0)
    m = 1 / complex(p.derivative()(z0))
    if delta is None:
        delta = _delta_formula(d, kappa, eps, m)
    sk = SkewProduct(p, d, complex(kappa), complex(eps), z0, m, float(delta))
    if eps != 0:
        size = nonlinearity_c1(sk)
        if size > o_delta_budget(m):
            warnings.warn(f"O(delta) term {size:.3e} exceeds (1/2000)(1-|m|) = {o_delta_budget(m):.3e}",
                          RuntimeWarning, stacklevel=2)
    return sk


def _inverse_p0(ptil: Polynomial1D, m, x, max_iter: int = 80):
    """Branch of p~^{-1} fixing 0, by vectorised Newton from m x."""
    x = np.asarray(x, dtype=complex)
    y = m * x
    dp = ptil.derivative()
    for _ in range(max_iter):
        step = (ptil(y) - x) / dp(y)
        y = y - step
        if np.all(np.abs(step) <= 1e-16 * (1 + np.abs(y))):
            return y
    if np.all(np.abs(ptil(y) - x) <= 1e-13 * (1 + np.abs(x))):
        return y
    raise NoConvergence("inverse branch of p near z0 did not converge")


@dataclass(frozen=True, eq=False)
class RescaledModel:
    """Everything needed to evaluate the rescaled inverse branches quickly."""

    skew: SkewProduct
    ptil: Polynomial1D
    tau: complex
    roots: np.ndarray

    @classmethod
    def of(cls, skew: SkewProduct) -> "RescaledModel":
        return cls(skew, skew.p_rescaled(), skew.tau, roots_of_unity(skew.d))

    def fiber_inverse(self, j: int, wt):
        return rescaled_inverse_raw(self.skew.d, self.skew.kappa, self.roots[j], wt)

    def branch(self, j: int, zt, wt):
        """Inverse branch number j of the rescaled map: returns (z~', w~')."""
        wp = self.fiber_inverse(j, wt)
        zp = _inverse_p0(self.ptil, self.skew.m, np.asarray(zt) - self.tau * wp)
        return zp, wp

    def forward(self, zt, wt):
        return self.ptil(zt) + self.tau * np.asarray(wt), rescaled_q(self.skew.d, self.skew.kappa, wt)


def rescaled_inverse_ifs(skew: SkewProduct, n_samples: int = 10_000) -> BlenderIfs:
    """k = 2 blender IFS of the rescaled inverse branches; C1 distance measured by sampling."""
    geo = verify_julia_geometry(skew.d, skew.kappa, n_samples)
    # the containment radius is the d = 3 constant; for d = 2 the first-order
    # deviation equals it, so only separation of the branch images is required
    contained = geo.containment_margin > 0 if skew.d >= 3 else geo.max_deviation < 0.25
    if geo.derivative_margin <= 0 or not contained:
        raise GeometryUnverified(f"Julia geometry margins negative: containment {geo.containment_margin:.3e}, "
                                 f"derivative {geo.derivative_margin:.3e}")
    model = RescaledModel.of(skew)
    t = skew.translation
    dw = geo.derivative_bound
    branches = []
    for j in range(skew.d):
        zeta = model.roots[j]
        base = AffineContraction(skew.m, t * zeta)

        def fiber(z, w, j=j):
            return model.fiber_inverse(j, np.asarray(w)[..., 0])[..., None]

        def first(z, w, j=j):
            return model.branch(j, z, np.asarray(w)[..., 0])[0]

        branches.append(SkewBranch(base, fiber, 0.0, dw, first))
    ifs = BlenderIfs(2, tuple(branches), 0.0, label=f"rescaled d={skew.d}")
    pts = polydisk_samples(2, 24)
    measured = max(first_coordinate_c1(b, pts) for b in ifs.branches)
    return BlenderIfs(2, ifs.branches, measured, ifs.label)


def working_region_c1(ifs: BlenderIfs, radius: float = CORE_RADIUS) -> float:
    """C1 distance to the affine reference on D(0, radius) x D only."""
    pts = polydisk_samples(2, 24)
    pts[:, 0] *= radius
    return max(first_coordinate_c1(b, pts) for b in ifs.branches)


def square_blender(ifs: BlenderIfs) -> BlenderIfs:
    """All two-fold compositions L_i o L_j (used for the d = 2 regime)."""
    out = []
    for bi in ifs.branches:
        for bj in ifs.branches:
            def fiber(z, w, bi=bi, bj=bj):
                z1, w1 = bj(z, w)
                return bi.fiber(z1, w1)

            def first(z, w, bi=bi, bj=bj):
                z1, w1 = bj(z, w)
                return bi.first_coord(z1, w1)

            base = bi.base.after(bj.base)
            dz = bi.dz_bound * abs(bj.base.m) + bi.dw_bound * bj.dz_bound
            dw = bi.dw_bound * bj.dw_bound
            out.append(SkewBranch(base, fiber, dz, dw, first, bi.empirical or bj.empirical))
    pts = polydisk_samples(ifs.k, 24 if ifs.k == 2 else 6)
    c1 = max(first_coordinate_c1(b, pts) for b in out)
    return BlenderIfs(ifs.k, tuple(out), max(c1, ifs.perturbation_c1), ifs.label + "^2")


# ------------------------------------------------------------------ Rouche check

@dataclass(frozen=True)
class RoucheReport:
    holds: bool
    min_displacement: float
    max_perturbation: float

    @property
    def margin(self) -> float:
        return self.min_displacement - self.max_perturbation

    def __bool__(self):
        return self.holds

    def as_dict(self) -> dict:
        return {"holds": self.holds, "minDisplacement": self.min_displacement,
                "maxPerturbation": self.max_perturbation, "margin": self.margin}


def polydisk_boundary(box: Polydisk, n: int) -> np.ndarray:
    """Samples of the topological boundary of a polydisk, shape (N, k)."""
    k = box.dim
    circle = np.exp(2j * np.pi * np.arange(n) / n)
    inner = np.concatenate([[0j], 0.5 * circle[::4], circle[::2]])
    faces = []
    for i in range(k):
        axes = [inner if j != i else circle for j in range(k)]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([g.ravel() for g in mesh], axis=-1)
        faces.append(pts)
    pts = np.concatenate(faces)
    return np.array(box.centers) + pts * np.array(box.radii)


def rouche_verify(h: Callable, eta: Callable, box: Polydisk, boundary_n: int = 64) -> RoucheReport:
    """Sampled check of |eta| < |h - id| (max norm) on the boundary of ``box``.

    ``h`` and ``eta`` map arrays of shape (N, k) to arrays of shape (N, k).
    """
    if boundary_n < 64:
        raise PreconditionError("boundaryN must be >= 64")
    pts = polydisk_boundary(box, boundary_n)
    disp = np.max(np.abs(h(pts) - pts), axis=-1)
    pert = np.max(np.abs(eta(pts)), axis=-1)
    lo, hi = float(disp.min()), float(pert.max())
    return RoucheReport(lo - hi > 0, lo, hi)


# ------------------------------------------------------------------ core point

@dataclass(frozen=True)
class CorePoint:
    point: tuple
    period: int
    residual: float
    regime: str
    symbols: tuple = ()
    clearance: float = 0.0
    forward_residual_z: float = 0.0
    rouche: Optional[RoucheReport] = None
    boundary_margin: Optional[float] = None

    def as_dict(self) -> dict:
        out = {"point": list(self.point), "period": self.period, "residual": self.residual,
               "regime": self.regime, "symbols": list(self.symbols), "clearance": self.clearance,
               "forwardResidualZ": self.forward_residual_z}
        if self.rouche is not None:
            out["rouche"] = self.rouche.as_dict()
        if self.boundary_margin is not None:
            out["boundaryMargin"] = self.boundary_margin
        return out


def _compose_branches(model: RescaledModel, symbols: Sequence[int]):
    """x -> F_{s_n} o ... o F_{s_1}(x) on arrays of shape (N, 2)."""
    def g(x):
        z, w = x[..., 0], x[..., 1]
        for j in symbols:
            z, w = model.branch(j, z, w)
        return np.stack([z, w], axis=-1)
    return g


def _newton_fixed(g: Callable, x0: np.ndarray, tol: float = 1e-14, max_iter: int = 50) -> np.ndarray:
    """Newton on g(x) - x with a complex finite-difference Jacobian."""
    x = np.array(x0, dtype=complex)
    h = 1e-7
    for _ in range(max_iter):
        r = g(x[None, :])[0] - x
        jac = np.empty((2, 2), dtype=complex)
        for i in range(2):
            e = np.zeros(2, dtype=complex)
            e[i] = h
            jac[:, i] = (g((x + e)[None, :])[0] - g((x - e)[None, :])[0]) / (2 * h)
        step = np.linalg.solve(jac - np.eye(2), -r)
        x = x + step
        if np.max(np.abs(step)) < tol:
            break
    return x


def find_core_point(skew: SkewProduct, boundary_n: int = 1000) -> CorePoint:
    """Fixed point (far regime) or period-3 point (near regime) inside D(0,1/10) x D."""
    model = RescaledModel.of(skew)
    m, t = skew.m, skew.translation
    box = Polydisk((0j, 0j), (CORE_RADIUS, 1.0))
    far = abs(m - 1) > 0.1
    if far:
        symbols = (0,)
        guess = np.array([t / (1 - m), 0.5])
    else:
        if skew.d < 3:
            raise PreconditionError("the near regime needs d >= 3")
        symbols = (0, 1, 2)
        z1, z2 = model.roots[1], model.roots[2]
        guess = np.array([t * (m * m * 1 + m * z1 + z2) / (1 - m ** 3), z2 / 2])
    g = _compose_branches(model, symbols)
    rouche = None
    bmargin = None
    if far:
        def h(x):
            return np.stack([m * x[:, 0] + t, np.full(len(x), 0.5 + 0j)], axis=-1)

        def eta(x):
            return g(x) - h(x)

        rouche = rouche_verify(h, eta, box, max(64, boundary_n // 8))
    else:
        bd = polydisk_boundary(box, max(64, int(math.sqrt(boundary_n)) * 4))
        img = g(bd)
        bmargin = float(min(CORE_RADIUS - np.abs(img[:, 0]).max(), 1 - np.abs(img[:, 1]).max()))
        if bmargin <= 0:
            raise NotContracting(f"composed branch does not map the bidisk inside itself (margin {bmargin:.3e})")
    x = _newton_fixed(g, guess)
    res = float(np.max(np.abs(g(x[None, :])[0] - x)))
    if res >= 1e-10:
        raise NoConvergence(f"core point residual {res:.3e}")
    clearance = float(min(CORE_RADIUS - abs(x[0]), 1 - abs(x[1])))
    if clearance <= 0:
        raise NoConvergence("core point left D(0,1/10) x D")
    # forward substitution on the first coordinate along the cycle
    orbit = [x]
    for j in symbols:
        zz, ww = model.branch(j, orbit[-1][0], orbit[-1][1])
        orbit.append(np.array([complex(zz), complex(ww)]))
    fz = 0.0
    for a, b in zip(orbit[1:], orbit[:-1]):
        zf = model.ptil(a[0]) + model.tau * a[1]
        fz = max(fz, abs(complex(zf) - b[0]))
    return CorePoint((complex(x[0]), complex(x[1])), len(symbols), res, "far" if far else "near",
                     symbols, clearance, fz, rouche, bmargin)


# ------------------------------------------------------------------ graphs

UNIT = Polydisk.unit(1)


def _graph(values, grid_domain=UNIT, meta=None) -> VerticalGraph:
    g = VerticalGraph(grid_domain, values, 0.0)
    return VerticalGraph(grid_domain, g.values, SLOPE_SAFETY * g.finite_difference_slope(), meta or {})


def push_component(model: RescaledModel, graph: VerticalGraph, j: int) -> VerticalGraph:
    """Component j of the image: z~ = p~(phi(q~_j^{-1}(w~))) + tau q~_j^{-1}(w~)."""
    wt = graph.nodes()[0]
    wp = model.fiber_inverse(j, wt)
    return _graph(model.ptil(graph(wp)) + model.tau * wp, graph.domain)


def push_graph(skew: SkewProduct, graph: VerticalGraph) -> list:
    """The d graphs of f(graph) over the unit disk, in rescaled coordinates."""
    model = RescaledModel.of(skew)
    return [push_component(model, graph, j) for j in range(skew.d)]


def constant_graph(value, grid_n: int = 33) -> VerticalGraph:
    return graph_from_callable(lambda w: np.full(np.shape(w), complex(value)), UNIT, grid_n)


def unstable_manifold(skew: SkewProduct, core: CorePoint, n_iters: int = 50, grid_n: int = 33) -> VerticalGraph:
    """Graph transform along the cycle of ``core``, starting from the vertical line through it."""
    if n_iters < 1:
        raise ValueError("nIters must be >= 1")
    model = RescaledModel.of(skew)
    order = tuple(reversed(core.symbols))
    # the forward image of F_{s_P} o ... o F_{s_1} (x) = x visits s_P's region first
    graph = constant_graph(core.point[0], grid_n)
    dists, ratios = [], []

    def cycle(g):
        for j in order:
            g = push_component(model, g, j)
        return g

    converged = False
    for _ in range(n_iters):
        nxt = cycle(graph)
        e = float(np.max(np.abs(nxt.values - graph.values)))
        if dists and dists[-1] > 0:
            ratios.append(e / dists[-1])
        dists.append(e)
        graph = nxt
        if e < 1e-12:
            converged = True
            break
    if not converged:
        raise NoConvergence(f"graph transform not converged after {n_iters} cycles (last step {dists[-1]:.3e})")
    again = cycle(graph)
    invariance = float(np.max(np.abs(again.values - graph.values)))
    through = abs(complex(graph(np.array([core.point[1]]))[0]) - core.point[0])
    limit = slope_threshold(2, skew.m)
    if graph.slope_bound > limit:
        raise NoConvergence(f"unstable manifold slope {graph.slope_bound:.3e} exceeds {limit:.3e}")
    meta = {"distances": dists, "ratios": ratios, "invarianceResidual": invariance,
            "throughCore": through, "slopeLimit": limit, "cycles": len(dists)}
    return VerticalGraph(graph.domain, graph.values, graph.slope_bound, meta)


# ------------------------------------------------------------------ Misiurewicz

def check_simple_critical(p: Polynomial1D, crit) -> complex:
    crit = complex(crit)
    d1, d2 = p.derivative(), p.derivative().derivative()
    if abs(d1(crit)) > 1e-9 * max(1.0, abs(crit)):
        raise HypothesisViolation("critical point", f"p'({crit}) = {complex(d1(crit))} is not zero")
    if abs(d2(crit)) < 1e-9:
        raise HypothesisViolation("simple critical point", f"p''({crit}) vanishes")
    return crit


def in_graph_class(graph: VerticalGraph, m) -> tuple:
    hull = graph.z_hull()
    limit = slope_threshold(2, m)
    ok = LEMMA_TARGET.contains_disk(hull) and graph.slope_bound <= limit
    return ok, hull, limit


def misiurewicz_certify(skew: SkewProduct, crit, n_push: int = 1, n_pull: int = 60, tol: float = 1e-13,
                        grid_n: int = 33, ifs: Optional[BlenderIfs] = None) -> IntersectionWitness:
    """Push the critical line into the blender region, then pull back through the blender IFS."""
    crit = check_simple_critical(skew.p, crit)
    if n_push < 1:
        raise ValueError("nPush must be >= 1")
    model = RescaledModel.of(skew)
    if ifs is None:
        ifs = rescaled_inverse_ifs(skew)
    ct = complex((crit - skew.z0) / skew.scale)
    push_symbols = []
    if n_push > PUSH_CAP:
        core = find_core_point(skew)
        graph = unstable_manifold(skew, core, grid_n=grid_n)
        source = "unstable manifold"
    else:
        graph = constant_graph(ct, grid_n)
        for _ in range(n_push):
            comps = [push_component(model, graph, j) for j in range(skew.d)]
            best = min(range(skew.d), key=lambda j: (abs(comps[j].z_hull().center), j))
            push_symbols.append(best)
            graph = comps[best]
        source = "push"
    ok, hull, limit = in_graph_class(graph, skew.m)
    if not ok:
        raise NoEnteringComponent(f"no pushed component enters D(0,1/10) x D with slope <= {limit:.3e} "
                                  f"(hull center {hull.center:.3e}, radius {hull.radius:.3e}, "
                                  f"slope {graph.slope_bound:.3e})")
    wit = intersect_graph_blender(ifs, graph, n_pull, tol)
    pz, pw = wit.point
    on_graph = abs(complex(graph(np.array([pw]))[0]) - pz)
    chain = float("nan")
    if source == "push":
        ws = [complex(pw)]
        for j in reversed(push_symbols):
            ws.append(complex(model.fiber_inverse(j, ws[-1])))
        ws = ws[::-1]  # ws[0] is the fiber on the critical line
        z = ct
        for i in range(len(push_symbols)):
            z = complex(model.ptil(z) + model.tau * ws[i])
        chain = abs(z - pz)
    meta = dict(wit.meta)
    meta.update({"source": source, "pushSymbols": push_symbols, "entrySlope": graph.slope_bound,
                 "entryHull": {"center": hull.center, "radius": hull.radius},
                 "pointOnEntryGraph": on_graph, "chainResidual": chain,
                 "criticalPoint": crit, "rescaledCritical": ct})
    return replace(wit, meta=meta)


def perturbed_instance(skew: SkewProduct, crit, seed: int, index: int, fraction: float = 1.0):
    """Random coefficient perturbation of p with rescaled C1 size <= fraction * (1/2000)(1-|m|).

    Returns the new skew product (z0, m, delta recomputed) and its critical point.
    """
    n = skew.p.degree + 1
    u = rng.uniform(seed, index * (2 * n + 1), 2 * n + 1)
    coeff = (u[:n] - 0.5) + 1j * (u[n:2 * n] - 0.5)
    dp = Polynomial1D(tuple(coeff))
    x = unit_disk_samples(2000)
    zs = skew.z0 + skew.scale * x
    size = max(float(np.max(np.abs(dp(zs)))) / skew.delta, float(np.max(np.abs(dp.derivative()(zs)))))
    target = fraction * o_delta_budget(skew.m) * (0.5 + 0.5 * u[-1])
    p2 = skew.p + dp.scale(target / size)
    z0 = find_fixed_point(p2, skew.z0)
    c2 = p2.derivative().newton(crit)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        new = make_skew_product(p2, skew.d, skew.kappa, skew.eps, z0)
    return new, c2, target


# ------------------------------------------------------------------ parabolic splitting

@dataclass(frozen=True)
class ParabolicSplit:
    fixed_points: tuple
    multipliers: tuple
    b: float
    b_paper_form: complex
    leading: complex
    residuals: tuple
    multiplier_residuals: tuple
    cluster_radius: float
    next_root_distance: float

    def as_dict(self) -> dict:
        return {"fixedPoints": list(self.fixed_points), "multipliers": list(self.multipliers),
                "b": self.b, "bFromQTimesRhoPrime": self.b_paper_form, "leadingCoefficient": self.leading,
                "residuals": list(self.residuals), "multiplierResiduals": list(self.multiplier_residuals),
                "clusterRadius": self.cluster_radius, "nextRootDistance": self.next_root_distance}


def iterate_poly(f: Polynomial1D, q: int) -> Polynomial1D:
    out = f
    for _ in range(q - 1):
        out = f.compose(out)
    return out


def _iterate_derivative(f: Polynomial1D, q: int, x):
    df = f.derivative()
    acc = 1 + 0j
    for _ in range(q):
        acc *= df(x)
        x = f(x)
    return acc


def _multiplier_at_origin_point(family, lam, q):
    f = family(lam)
    z = find_fixed_point(f, 0j) if abs(f(0j)) > 0 else 0j
    return _iterate_derivative(f, 1, z) ** q, _iterate_derivative(f, 1, z)


def parabolic_split(family: Callable, q: int, nu: int, lam) -> ParabolicSplit:
    """Fixed points of f_lambda^q near 0 and their multipliers, with asymptotic residuals."""
    lam = complex(lam)
    f0 = family(0j)
    rho0 = complex(f0.derivative()(0j))
    if abs(f0(0j)) > 1e-12 or abs(rho0 ** q - 1) > 1e-10:
        raise PreconditionError("family(0) needs a fixed point at 0 with multiplier a q-th root of unity")
    n = nu * q + 1
    g0 = iterate_poly(f0, q) - Polynomial1D((0j, 1.0))
    cs = list(g0.coefficients) + [0j] * (n + 1)
    if any(abs(c) > 1e-10 for c in cs[:n]):
        raise PreconditionError("f_0^q - x must vanish to order nu q + 1 at 0")
    leading = complex(cs[n])
    if abs(leading) < 1e-12:
        raise PreconditionError("coefficient of x^{nu q + 1} vanishes")
    h = 1e-6
    plus, rho_plus = _multiplier_at_origin_point(family, h, q)
    minus, rho_minus = _multiplier_at_origin_point(family, -h, q)
    b = (plus - minus) / (2 * h)
    b_paper = q * (rho_plus - rho_minus) / (2 * h)
    f = family(lam)
    g = iterate_poly(f, q) - Polynomial1D((0j, 1.0))
    roots = g.roots()
    order = np.argsort(np.abs(roots))
    if roots.size < n + 0:
        raise RootFindingFailure("not enough roots")
    near = roots[order[:n]]
    cluster = float(np.abs(near).max())
    nxt = float(np.abs(roots[order[n]])) if roots.size > n else math.inf
    if not nxt > 2 * cluster:
        raise RootFindingFailure(f"fixed points near 0 not separated (cluster {cluster:.3e}, next {nxt:.3e})")
    mults = [complex(_iterate_derivative(f, q, r)) for r in near]
    k0 = int(np.argmin(np.abs(near)))
    res, mres = [], []
    for i, (r, mu) in enumerate(zip(near, mults)):
        if i == k0:
            continue
        res.append(float(abs(leading * r ** (nu * q) + b * lam)))
        mres.append(float(abs(mu - (1 - nu * q * b * lam))))
    return ParabolicSplit(tuple(complex(r) for r in near), tuple(mults), complex(b), complex(b_paper),
                          leading, tuple(res), tuple(mres), cluster, nxt)


def fit_exponent(lams: Sequence[float], values: Sequence[float]) -> float:
    """Least-squares slope of log(value) against log(lambda)."""
    x, y = np.log(np.asarray(lams, dtype=float)), np.log(np.asarray(values, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


# ------------------------------------------------------------------ Henon-type covering

@dataclass(frozen=True)
class HenonReport:
    d: int
    eps: float
    beta: float
    a: float
    gate_value: float
    containment_margin: float
    preimage_counts: tuple
    min_root_separation: float
    max_residual: float
    escape_margin: float
    critical_samples: int

    @property
    def passed(self) -> bool:
        return (self.containment_margin > 0 and self.escape_margin > 0
                and all(c == self.d ** 2 for c in self.preimage_counts))

    def as_dict(self) -> dict:
        return {"d": self.d, "eps": self.eps, "beta": self.beta, "a": self.a, "gateValue": self.gate_value,
                "containmentMargin": self.containment_margin,
                "preimageCounts": sorted(set(self.preimage_counts)),
                "minRootSeparation": self.min_root_separation, "maxResidual": self.max_residual,
                "escapeMargin": self.escape_margin, "criticalSamples": self.critical_samples,
                "passed": self.passed}


def _v_margin(zh, w, wmax):
    """Relative margin of (z^, w) inside {1/2 < |z^| < 3/2} x {|w| < wmax}; negative outside."""
    r = np.abs(zh)
    return np.minimum(np.minimum(r - 0.5, 1.5 - r), (wmax - np.abs(w)) / wmax)


def _henon_factor(c, p: Polynomial1D, eps, beta, wmax, u_hat, v, d):
    """Preimages of (u, v) (u = eps^{-beta} u^) under (z, w) -> (w + eps z^d, c z + p(w))."""
    sb = eps ** (-beta)
    # w = sb (u^ - z^^d), and c sb z^ + p(w) = v
    inner = Polynomial1D(tuple([sb * u_hat] + [0j] * (d - 1) + [-sb]))
    poly = p.compose(inner) + Polynomial1D((-v, c * sb))
    zh = poly.roots(polish=12)
    w = sb * (u_hat - zh ** d)
    res = np.abs(poly(zh)) / np.maximum(1.0, np.abs(poly.coefficients).max())
    return zh, w, res


def henon_covering_check(c, p_plus: Polynomial1D, p_minus: Polynomial1D, eps: float, n_samples: int = 200,
                         a: Optional[float] = None, seed: int = 0, gate: float = 0.5) -> HenonReport:
    """Sampled covering and critical-escape check for (w + eps z^d, c^{+-1} z + p^{+-}(w))."""
    d = p_plus.degree
    if d < 2 or p_minus.degree != d:
        raise HypothesisViolation("degree", "p+ and p- need the same degree d >= 2")
    eps = float(eps)
    beta = 1 / (d - 1)
    if a is None:
        a = beta * (1 + 1 / d) / 2
    if not beta / d < a < beta:
        raise HypothesisViolation("a", f"need beta/d < a < beta, got {a}")
    gate_value = eps ** (beta - a)
    if not gate_value < gate:
        raise HypothesisViolation("eps^(beta-a)", f"eps^(beta-a) = {gate_value:.3e} is not below {gate}")
    wmax = eps ** (-a)
    sb = eps ** (-beta)
    u = rng.uniform(seed, 0, 4 * n_samples).reshape(4, n_samples)
    u_hat = (0.5 + u[0]) * np.exp(2j * np.pi * u[1])
    v = wmax * np.sqrt(u[2]) * np.exp(2j * np.pi * u[3])
    cmargin, counts, sep, resmax = math.inf, [], math.inf, 0.0
    emargin, ncrit = math.inf, 0
    for cc, p in ((complex(c), p_plus), (1 / complex(c), p_minus)):
        for i in range(n_samples):
            zh, w, res = _henon_factor(cc, p, eps, beta, wmax, u_hat[i], v[i], d)
            ok = np.isfinite(zh) & np.isfinite(w)
            counts.append(int(ok.sum()))
            cmargin = min(cmargin, float(_v_margin(zh, w, wmax).min()))
            diff = np.abs(zh[:, None] - zh[None, :]) + np.eye(len(zh)) * 1e300
            sep = min(sep, float(diff.min()))
            resmax = max(resmax, float(res.max()))
        # critical curve in rescaled form: d z^^{d-1} p'(w) = c
        dp = p.derivative()
        t = rng.uniform(seed + 1, 0, 2 * n_samples).reshape(2, n_samples)
        zc = (0.5 + t[0]) * np.exp(2j * np.pi * t[1])
        for zh in zc:
            ws = (dp - Polynomial1D((cc / (d * zh ** (d - 1)),))).roots()
            inside = _v_margin(np.full(ws.shape, zh), ws, wmax) > 0
            for w in ws[inside]:
                ncrit += 1
                u_img = w + eps * (sb * zh) ** d
                v_img = cc * sb * zh + p(w)
                out = -float(_v_margin(np.array([u_img / sb]), np.array([v_img]), wmax)[0])
                emargin = min(emargin, out)
    return HenonReport(d, eps, beta, a, gate_value, cmargin, tuple(counts), sep, resmax, emargin, ncrit)
