"""One-dimensional complex affine IFSs: covering certificates, powers, sampling."""
from __future__ import annotations

import cmath
import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import rng
from ._parallel import map_chunks
from .complexgeo import AffineContraction, Disk, affine_preimage, as_complex
from .errors import BranchExplosion, HypothesisViolation, InvalidGrid, NoBranch

BRANCH_CAP = 10**6
LEMMA_TARGET = Disk(0j, 0.1)


@dataclass(frozen=True)
class Ifs1D:
    branches: tuple
    label: str = ""

    def __post_init__(self):
        br = tuple(self.branches)
        if not br or not all(isinstance(b, AffineContraction) for b in br):
            raise ValueError("an IFS needs at least one AffineContraction")
        object.__setattr__(self, "branches", br)
        if self.unit_disk_margin() < -1e-12:
            raise ValueError("some branch does not map the unit disk into itself")

    @property
    def d(self) -> int:
        return len(self.branches)

    def unit_disk_margin(self) -> float:
        """min_j 1 - (|m_j| + |t_j|): gap between l_j(D) and the unit circle."""
        return min(1 - abs(b.m) - abs(b.t) for b in self.branches)

    def lipschitz_inverse(self) -> float:
        return max(1 / abs(b.m) for b in self.branches)

    def multipliers(self) -> np.ndarray:
        return np.array([b.m for b in self.branches])

    def translations(self) -> np.ndarray:
        return np.array([b.t for b in self.branches])


@dataclass(frozen=True, eq=False)
class CoveringCertificate:
    holds: bool
    target: Disk
    margin: float
    witness_grid_n: int
    counterexample: Optional[complex]
    branch_chart: np.ndarray = field(repr=False)
    lipschitz: float = 0.0
    cell_diameter: float = 0.0

    @property
    def sound(self) -> bool:
        """True when the sampled margin beats the Lipschitz sampling error."""
        return self.holds and self.margin > self.lipschitz * self.cell_diameter

    def as_dict(self) -> dict:
        return {
            "holds": self.holds,
            "sound": self.sound,
            "target": {"center": self.target.center, "radius": self.target.radius},
            "margin": self.margin,
            "witnessGridN": self.witness_grid_n,
            "lipschitz": self.lipschitz,
            "cellDiameter": self.cell_diameter,
            "requiredMargin": self.lipschitz * self.cell_diameter,
            "counterexample": self.counterexample,
        }


def preimage_clearance(ifs: Ifs1D, target: Disk, z: np.ndarray) -> np.ndarray:
    """Array of shape (d, *z.shape): target.radius - |l_j^{-1}(z) - center|."""
    m = ifs.multipliers().reshape((-1,) + (1,) * np.ndim(z))
    t = ifs.translations().reshape(m.shape)
    return target.radius - np.abs((z - t) / m - target.center)


def _test_points(target: Disk, grid_n: int):
    """Cell centers of the bounding square, projected into the closed disk."""
    h = 2 * target.radius / grid_n
    s = (np.arange(grid_n) + 0.5) * h - target.radius
    x, y = np.meshgrid(s, s, indexing="xy")
    off = x + 1j * y
    dist = np.abs(off)
    # keep cells that meet the disk: center within r + half diagonal
    keep = dist <= target.radius + h * math.sqrt(2) / 2
    scale = np.where(dist > target.radius, target.radius / np.maximum(dist, 1e-300), 1.0)
    return target.center + off * scale, keep, h * math.sqrt(2)


def certify_covering(ifs: Ifs1D, target: Disk, grid_n: int = 256, threads: int = 1) -> CoveringCertificate:
    """Grid certificate that every point of the closed target has a preimage inside it."""
    if grid_n < 16:
        raise InvalidGrid(f"gridN must be >= 16, got {grid_n}")
    pts, keep, diam = _test_points(target, grid_n)
    flat = pts.ravel()
    kflat = keep.ravel()

    def work(a, b):
        cl = preimage_clearance(ifs, target, flat[a:b])
        return cl.max(axis=0), cl.argmax(axis=0)

    parts = map_chunks(work, flat.size, threads)
    best = np.concatenate([p[0] for p in parts])
    arg = np.concatenate([p[1] for p in parts])
    best = np.where(kflat, best, np.inf)
    chart = np.where(kflat, arg, -1).reshape(keep.shape)
    i = int(np.argmin(best))
    margin = float(best[i])
    holds = margin > 0
    counter = None
    if not holds:
        z = complex(flat[i])
        # direct re-check of the uncovered point
        assert np.all(preimage_clearance(ifs, target, np.array([z])) <= 0)
        counter = z
    return CoveringCertificate(holds, target, margin, grid_n, counter, chart,
                               ifs.lipschitz_inverse(), diam)


def lemma_ifs(d: int, m, alphas: Sequence, theta: float = 0.0) -> Ifs1D:
    """Branches z -> m z + e^{i theta} alpha_j (1-|m|) e^{2 pi i j / d}, j = 1..d."""
    m = as_complex(m, "m")
    rot = cmath.exp(1j * theta)
    br = [AffineContraction(m, rot * complex(a) * (1 - abs(m)) * cmath.exp(2j * math.pi * j / d))
          for j, a in zip(range(1, d + 1), alphas)]
    return Ifs1D(tuple(br), label=f"lemma d={d}")


def check_lemma_hypotheses(d: int, m, alphas: Sequence) -> None:
    if d < 3:
        raise HypothesisViolation("d", f"need d >= 3, got {d}")
    if len(alphas) != d:
        raise HypothesisViolation("len(alphas)", f"need {d} values, got {len(alphas)}")
    am = abs(complex(m))
    if not 0.98 < am < 1:
        raise HypothesisViolation("|m|", f"need 0.98 < |m| < 1, got {am}")
    for j, a in enumerate(alphas):
        a = complex(a)
        if not 3 / 5 < abs(a) < 1:
            raise HypothesisViolation("|alpha_j|", f"branch {j}: |alpha|={abs(a)}")
        if not abs(cmath.phase(a)) < math.pi / 20:
            raise HypothesisViolation("arg alpha_j", f"branch {j}: arg={cmath.phase(a)}")


def certify_lemma_ifs(d: int, m, alphas: Sequence, grid_n: int = 256, threads: int = 1) -> CoveringCertificate:
    check_lemma_hypotheses(d, m, alphas)
    return certify_covering(lemma_ifs(d, m, alphas), LEMMA_TARGET, grid_n, threads)


def certify_rotated(d: int, m, alphas: Sequence, theta: float, grid_n: int = 256,
                    threads: int = 1) -> CoveringCertificate:
    """Covering certificate for the lemma IFS with all translations turned by theta."""
    return certify_covering(lemma_ifs(d, m, alphas, theta), LEMMA_TARGET, grid_n, threads)


def compose_power(ifs: Ifs1D, n: int) -> Ifs1D:
    """All ordered n-fold compositions.

    The tuple (j1, ..., jn), in lexicographic order, gives l_{jn} o ... o l_{j1}
    (j1 is applied first).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if ifs.d ** n > BRANCH_CAP:
        raise BranchExplosion(f"{ifs.d}^{n} branches exceeds the cap {BRANCH_CAP}")
    out = []
    for word in itertools.product(ifs.branches, repeat=n):
        f = word[0]
        for g in word[1:]:
            f = g.after(f)
        out.append(f)
    return Ifs1D(tuple(out), label=f"{ifs.label}^{n}")


def two_branch_ifs(m, alpha) -> Ifs1D:
    m, alpha = complex(m), complex(alpha)
    t = alpha * (1 - abs(m))
    return Ifs1D((AffineContraction(m, t), AffineContraction(m, -t)), label="pm")


def check_lemma2_hypotheses(m, alpha) -> None:
    m, alpha = complex(m), complex(alpha)
    if not 0.99 < abs(m) < 1:
        raise HypothesisViolation("|m|", f"need 0.99 < |m| < 1, got {abs(m)}")
    if not abs(cmath.phase(m) - math.pi / 2) < math.pi / 50:
        raise HypothesisViolation("arg m", f"need |arg m - pi/2| < pi/50, got arg m={cmath.phase(m)}")
    if not 0.9 < abs(alpha) < 1:
        raise HypothesisViolation("|alpha|", f"need 0.9 < |alpha| < 1, got {abs(alpha)}")


def certify_lemma_ifs2(m, alpha, grid_n: int = 256, threads: int = 1) -> CoveringCertificate:
    """Covering of D(0, 1/10) by the square of the two-branch IFS m z +- alpha (1-|m|)."""
    check_lemma2_hypotheses(m, alpha)
    return certify_covering(compose_power(two_branch_ifs(m, alpha), 2), LEMMA_TARGET, grid_n, threads)


def branch_clearances(ifs: Ifs1D, z0, r: float, target: Disk) -> list:
    """(clearance, |preimage center|) of l_j^{-1}(D(z0, r)) inside target, per branch."""
    disk = Disk(z0, r)
    out = []
    for b in ifs.branches:
        pre = affine_preimage(b, disk)
        out.append((target.clearance(pre), abs(pre.center)))
    return out


def rank_branches(ifs: Ifs1D, z0, r: float, target: Disk) -> list:
    """Indices of admissible branches, best first (max clearance, then min |center|)."""
    cl = branch_clearances(ifs, z0, r, target)
    ok = [j for j, (c, _) in enumerate(cl) if c >= 0]
    return sorted(ok, key=lambda j: (-cl[j][0], cl[j][1], j))


def select_branch(ifs: Ifs1D, z0, r: float, target: Disk) -> int:
    ranked = rank_branches(ifs, z0, r, target)
    if not ranked:
        raise NoBranch(f"no branch maps D({complex(z0)}, {r}) back into the target")
    return ranked[0]


def _chains(n_points: int) -> int:
    return max(1, min(n_points, 256))


def sample_limit_set(ifs: Ifs1D, n_points: int, burn_in: int = 64, seed: int = 0) -> np.ndarray:
    """Chaos game with independent chains started at 0.

    Each chain discards ``burn_in`` iterates, then emits; branch choices come
    from the splitmix64 stream of ``seed``.
    """
    if n_points < 1:
        raise ValueError("nPoints must be >= 1")
    chains = _chains(n_points)
    per = -(-n_points // chains)
    m, t = ifs.multipliers(), ifs.translations()
    z = np.zeros(chains, dtype=complex)
    out = np.empty((per, chains), dtype=complex)
    for step in range(burn_in + per):
        j = rng.integers(seed, step * chains, chains, ifs.d)
        z = m[j] * z + t[j]
        if step >= burn_in:
            out[step - burn_in] = z
    return out.T.ravel()[:n_points]
