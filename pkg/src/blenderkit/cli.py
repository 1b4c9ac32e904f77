"""Command-line entry point: certify-ifs, blender, misiurewicz, topology, render."""
from __future__ import annotations

import argparse
import cmath
import json
import math
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import blender, ifs1d, skewprod, topo
from .complexgeo import Polydisk
from .errors import BlenderKitError, ConfigError, HypothesisViolation

# ------------------------------------------------------------------ serialisation


def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        return "null"
    return format(x, ".17g")


def to_json(obj, indent: int = 0) -> str:
    """JSON with every float written to 17 significant digits; complex -> {re, im}."""
    pad, nxt = "  " * indent, "  " * (indent + 1)
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, (complex, np.complexfloating)):
        return to_json({"re": float(obj.real), "im": float(obj.imag)}, indent)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{nxt}{json.dumps(str(k))}: {to_json(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        return "[\n" + ",\n".join(nxt + to_json(v, indent + 1) for v in seq) + "\n" + pad + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_csv(path: Path, header: list, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt_float(float(v)) for v in row) + "\n")


def write_points_csv(path: Path, pts: np.ndarray) -> None:
    pts = np.atleast_2d(pts)
    k = pts.shape[1]
    names = ["z"] + [f"w{i}" for i in range(1, k)]
    header = [f"{n}_{part}" for n in names for part in ("re", "im")]
    flat = np.empty((pts.shape[0], 2 * k))
    flat[:, 0::2], flat[:, 1::2] = pts.real, pts.imag
    write_csv(path, header, flat)


# ------------------------------------------------------------------ configuration

def parse_value(text: str):
    s = text.strip()
    low = s.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low.startswith("polar(") and s.endswith(")"):
        r, t = (float(v) for v in s[6:-1].split(","))
        return complex(r * cmath.exp(1j * t))
    if "," in s:
        return [parse_value(v) for v in s.split(",") if v.strip()]
    for conv in (int, float, complex):
        try:
            return conv(s)
        except ValueError:
            pass
    return s


def read_config(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out


class Config:
    def __init__(self, values: dict):
        self.values = dict(values)
        self.used = {}

    def get(self, key, default):
        v = self.values.get(key, default)
        self.used[key] = v
        return v

    def integer(self, key, default) -> int:
        v = self.get(key, default)
        if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
            raise ConfigError(f"{key} must be an integer, got {v!r}")
        return int(v)

    def real(self, key, default) -> float:
        v = self.get(key, default)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{key} must be a real number, got {v!r}")
        return float(v)

    def positive(self, key, default) -> float:
        v = self.real(key, default)
        if not v > 0:
            raise ConfigError(f"{key} must be > 0")
        return v

    def cplx(self, key, default) -> complex:
        v = self.get(key, default)
        if isinstance(v, bool) or not isinstance(v, (int, float, complex)):
            raise ConfigError(f"{key} must be a number, got {v!r}")
        return complex(v)

    def numbers(self, key, default) -> list:
        v = self.get(key, default)
        v = v if isinstance(v, list) else [v]
        if not all(isinstance(x, (int, float, complex)) and not isinstance(x, bool) for x in v):
            raise ConfigError(f"{key} must be a comma-separated list of numbers")
        return [complex(x) for x in v]

    def echo(self) -> dict:
        return {k: self.used[k] for k in sorted(self.used)}


# ------------------------------------------------------------------ reports

def clause(name, passed, measured=None, threshold=None, margin=None) -> dict:
    return {"name": name, "passed": bool(passed), "measured": measured, "threshold": threshold, "margin": margin}


class Run:
    def __init__(self, command: str, cfg: Config, out: Path, seed: int, threads: int):
        self.command, self.cfg, self.out = command, cfg, out
        self.seed, self.threads = seed, threads
        self.clauses, self.artifacts, self.results = [], [], {}
        self.out.mkdir(parents=True, exist_ok=True)

    def add(self, c: dict) -> None:
        self.clauses.append(c)

    def artifact(self, name: str) -> Path:
        self.artifacts.append(name)
        return self.out / name

    def report(self, wall: float, status: str, code: int, error=None) -> dict:
        rep = {
            "command": self.command,
            "seed": self.seed,
            "config": self.cfg.echo(),
            "status": status,
            "exitCode": code,
            "clauses": self.clauses,
            "results": self.results,
            "artifacts": self.artifacts,
        }
        if error is not None:
            rep["error"] = error
        rep["runtime"] = {"wallTime": wall, "threads": self.threads}
        return rep


# ------------------------------------------------------------------ commands

def _limit_set_pgm(points: np.ndarray, n: int = 256, radius: float = 1.0) -> bytes:
    idx = (points + radius * (1 + 1j)) / (2 * radius) * n
    ix = np.clip(np.floor(idx.real).astype(int), 0, n - 1)
    iy = np.clip(np.floor(idx.imag).astype(int), 0, n - 1)
    img = np.zeros((n, n), dtype=np.uint8)
    img[iy, ix] = 255
    return f"P5\n{n} {n}\n255\n".encode() + img[::-1].tobytes()


def _certify_one(cfg: Config, d: int, m: complex, grid_n: int, threads: int):
    lemma = cfg.get("lemma", "ifs")
    if lemma == "ifs2":
        alpha = cfg.cplx("alpha", 0.95)
        cert = ifs1d.certify_lemma_ifs2(m, alpha, grid_n, threads)
        ifs = ifs1d.two_branch_ifs(m, alpha)
    elif lemma == "ifs":
        alphas = cfg.numbers("alphas", [0.8] * d)
        if len(alphas) == 1:
            alphas = alphas * d
        theta = cfg.real("theta", 0.0)
        ifs1d.check_lemma_hypotheses(d, m, alphas)
        ifs = ifs1d.lemma_ifs(d, m, alphas, theta)
        cert = ifs1d.certify_covering(ifs, ifs1d.LEMMA_TARGET, grid_n, threads)
    else:
        raise ConfigError(f"lemma must be ifs or ifs2, got {lemma!r}")
    return cert, ifs


def cmd_certify_ifs(run: Run, grid_n, tol) -> None:
    cfg = run.cfg
    grid_n = grid_n or cfg.integer("gridN", 256)
    if cfg.get("sweep", False):
        ds = [int(x.real) for x in cfg.numbers("sweep_d", [3, 4, 5])]
        ms = [x.real for x in cfg.numbers("sweep_m", [0.981, 0.99, 0.995])]
        cells = []
        for d in ds:
            for am in ms:
                cert, _ = _certify_one(cfg, d, am, grid_n, run.threads)
                cell = {"d": d, "m": am, **cert.as_dict()}
                name = f"report_d{d}_m{am:.4f}.json"
                run.artifact(name).write_text(to_json(cell) + "\n")
                cells.append({"d": d, "m": am, "holds": cert.holds, "sound": cert.sound, "margin": cert.margin})
                run.add(clause(f"d={d} |m|={am}: covering", cert.holds, cert.margin, 0.0, cert.margin))
        run.results["cells"] = cells
        return
    d = cfg.integer("d", 3)
    m = cfg.cplx("m", 0.99)
    cert, ifs = _certify_one(cfg, d, m, grid_n, run.threads)
    need = cert.lipschitz * cert.cell_diameter
    run.add(clause("covering holds at samples", cert.holds, cert.margin, 0.0, cert.margin))
    run.add(clause("margin > Lip * h", cert.sound, cert.margin, need, cert.margin - need))
    run.results["certificate"] = cert.as_dict()
    n = cfg.integer("samples", 0)
    if n > 0:
        pts = ifs1d.sample_limit_set(ifs, n, cfg.integer("burn_in", 64), run.seed)
        write_points_csv(run.artifact("limit_set.csv"), pts[:, None])
        run.artifact("limit_set.pgm").write_bytes(_limit_set_pgm(pts))


def _default_p(m: complex) -> list:
    return [0, 1 / m, 1]


def _skew_from_config(cfg: Config, crit_default=None):
    d = cfg.integer("d", 3)
    if d == 2:
        m = cfg.cplx("m", 0.995 * cmath.exp(0.5j * math.pi))
        eps = cfg.cplx("eps", 1e-8)
        kappa = cfg.cplx("kappa", 4e6)
    else:
        m = cfg.cplx("m", 0.99 * cmath.exp(0.2j))
        eps = cfg.cplx("eps", 1e-6)
        kappa = cfg.cplx("kappa", 1e6)
    coeffs = cfg.numbers("p", crit_default(m) if crit_default else _default_p(m))
    p = skewprod.Polynomial1D(tuple(coeffs))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        sk = skewprod.make_skew_product(p, d, kappa, eps, cfg.cplx("z0", 0))
    return sk, [str(w.message) for w in caught]


def _validation_clauses(run: Run, rep: blender.BlenderReport) -> None:
    for c in rep.clauses:
        run.add(c.as_dict())


def cmd_blender(run: Run, grid_n, tol) -> None:
    cfg = run.cfg
    sk, warns = _skew_from_config(cfg)
    run.results["skewProduct"] = sk.report()
    run.results["warnings"] = warns
    ifs = skewprod.rescaled_inverse_ifs(sk)
    rep = blender.validate_blender(ifs)
    _validation_clauses(run, rep)
    run.results["workingRegionC1"] = skewprod.working_region_c1(ifs)
    pull = skewprod.square_blender(ifs) if sk.d == 2 else ifs
    g = skewprod.constant_graph(cfg.cplx("graph", 0.05), grid_n or cfg.integer("gridN", 33))
    wit = blender.intersect_graph_blender(pull, g, cfg.integer("steps", 60), tol or cfg.positive("tol", 1e-13))
    limit = cfg.positive("radius_limit", 1e-8)
    run.add(clause("witness radius", wit.radius < limit, wit.radius, limit, limit - wit.radius))
    run.results["witness"] = wit.as_dict()
    run.artifact("witness.json").write_text(to_json(wit.as_dict()) + "\n")
    n = cfg.integer("samples", 100_000)
    if n > 0:
        cloud = blender.sample_limit_set_k(ifs, n, cfg.integer("burn_in", 64), run.seed)
        write_points_csv(run.artifact("cloud.csv"), cloud)
        dist = float(np.min(np.linalg.norm(cloud - np.array(wit.point), axis=1)))
        run.add(clause("witness near chaos-game cloud", dist < 1e-3, dist, 1e-3, 1e-3 - dist))


def _misiurewicz_p(m: complex) -> list:
    # z (z - 1)^2 / m: fixed point 0 with multiplier 1/m, simple critical point 1 mapped to 0
    return [0, 1 / m, -2 / m, 1 / m]


def cmd_misiurewicz(run: Run, grid_n, tol) -> None:
    cfg = run.cfg
    sk, warns = _skew_from_config(cfg, _misiurewicz_p)
    crit = cfg.cplx("crit", 1.0)
    n_push, n_pull = cfg.integer("n_push", 1), cfg.integer("n_pull", 60)
    tol = tol or cfg.positive("tol", 1e-13)
    gn = grid_n or cfg.integer("gridN", 33)
    run.results["skewProduct"] = sk.report()
    run.results["warnings"] = warns
    wit = skewprod.misiurewicz_certify(sk, crit, n_push, n_pull, tol, gn)
    run.results["witness"] = {**wit.as_dict(), "provenance": wit.meta}
    run.artifact("witness.json").write_text(to_json(run.results["witness"]) + "\n")
    run.add(clause("witness produced", True, wit.radius, None, None))
    trials = cfg.integer("perturbations", 10)
    rows, ok = [], 0
    for i in range(trials):
        s2, c2, size = skewprod.perturbed_instance(sk, crit, run.seed, i)
        try:
            w2 = skewprod.misiurewicz_certify(s2, c2, n_push, n_pull, tol, gn)
            ok += 1
            rows.append([i, size, 1, w2.radius])
        except BlenderKitError:
            rows.append([i, size, 0, float("nan")])
    write_csv(run.artifact("persistence.csv"), ["trial", "c1_size", "survived", "radius"], rows)
    run.add(clause("perturbation persistence", ok == trials, ok, trials, ok - trials))
    sweep = cfg.get("eps_sweep", None)
    if sweep is not None:
        table = []
        for e in (sweep if isinstance(sweep, list) else [sweep]):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                s3 = skewprod.make_skew_product(sk.p, sk.d, sk.kappa, complex(e), sk.z0)
            try:
                w3 = skewprod.misiurewicz_certify(s3, crit, n_push, n_pull, tol, gn)
                table.append([abs(complex(e)), s3.delta, 1, w3.radius])
            except BlenderKitError:
                table.append([abs(complex(e)), s3.delta, 0, float("nan")])
        write_csv(run.artifact("eps_sweep.csv"), ["abs_eps", "delta", "witness", "radius"], table)


def _viewport(cfg: Config, default) -> topo.Viewport:
    v = [x.real for x in cfg.numbers("viewport", default)]
    if len(v) != 4:
        raise ConfigError("viewport needs xmin,xmax,ymin,ymax")
    try:
        return topo.Viewport(*v)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _write_regions(run: Run, rmap: topo.RegionMap, stem: str) -> None:
    run.artifact(f"{stem}.pgm").write_bytes(rmap.to_pgm())
    side = {"viewport": rmap.viewport.as_dict(), "resolution": list(rmap.resolution),
            "levels": {"Inn": 0, "NearE": 128, "Out": 255}, "counts": rmap.counts()}
    run.artifact(f"{stem}.json").write_text(to_json(side) + "\n")


def cmd_topology(run: Run, grid_n, tol) -> None:
    cfg = run.cfg
    p = skewprod.Polynomial1D(tuple(cfg.numbers("p", [0, 0.5, 0, 1])))
    cycle = cfg.numbers("cycle", [0])
    vp = _viewport(cfg, [-1.5, 1.5, -1.5, 1.5])
    res = grid_n or cfg.integer("resolution", 1024)
    rmap = topo.basin_classify(p, cycle, vp, (res, res), cfg.integer("max_iter", 200), run.threads)
    _write_regions(run, rmap, "regions")
    run.results["regions"] = rmap.counts()
    d = cfg.integer("d", 3)
    alpha = cfg.real("alpha", 0.35)
    good_angle, dist, theta = topo.angle_condition(alpha, d)
    run.add(clause("angle condition", good_angle, dist, 1e-3, dist - 1e-3))
    c = cfg.cplx("c", math.sqrt(0.5))
    anchor = complex(p(c))
    phase = cfg.real("eps_phase", math.pi / 2)
    rs = np.logspace(cfg.real("eps_log_min", -2.3), cfg.real("eps_log_max", -1.0), cfg.integer("eps_count", 1000))
    scan = topo.scan_epsilon(rmap, alpha, d, rs * cmath.exp(1j * phase), anchor)
    run.artifact("admissible.json").write_text(to_json(list(scan.admissible)) + "\n")
    run.results["scan"] = {"admissible": len(scan.admissible), "marginal": len(scan.marginal),
                           "swapped": int(sum(scan.swapped))}
    run.add(clause("scan nonempty", bool(scan.admissible), len(scan.admissible), 1, len(scan.admissible) - 1))
    q = topo.q_poly(alpha)
    rho = cfg.positive("rho", 0.05)
    ns = cfg.integer("nsamples", 1024)
    if "eps" in cfg.values:
        eps = cfg.cplx("eps", 0)
    elif scan.admissible:
        eps = scan.admissible[len(scan.admissible) // 2]
    else:
        return
    tr = topo.transversality_check(p, q, eps, c, rho, rmap, ns, d, report=True)
    tr2 = topo.transversality_check(p, q, eps, c, rho, rmap, 2 * ns, d)
    want = -1 if (eps in scan.admissible and scan.swapped[scan.admissible.index(eps)]) else 1
    run.results["transversality"] = {"eps": eps, **tr.as_dict(), "windingDoubled": tr2}
    run.add(clause("winding on admissible eps", tr.winding == want, tr.winding, want, None))
    run.add(clause("winding stable under sample doubling", tr.winding == tr2, tr2, tr.winding, None))
    control = cfg.cplx("control_eps", 0.2)
    ra = topo.region_of(rmap, anchor + control * complex(q(cmath.exp(-2j * math.pi / d))))
    rb = topo.region_of(rmap, anchor + control * complex(q(cmath.exp(2j * math.pi / d))))
    wc = topo.transversality_check(p, q, control, c, rho, rmap, ns, d)
    run.results["control"] = {"eps": control, "regions": [ra, rb], "winding": wc}
    run.add(clause("control images both Out", ra == rb == "Out", None, None, None))
    run.add(clause("winding on both-Out control", wc == 0, wc, 0, None))


def julia_raster(d: int, kappa: complex, vp: topo.Viewport, res: int, max_iter: int) -> np.ndarray:
    """Escape-time raster of w^d + kappa, with pixels thickened by the Lipschitz bound."""
    centers = topo.cell_centers(vp, res, res)
    h = math.hypot(*(((vp.xmax - vp.xmin) / res), ((vp.ymax - vp.ymin) / res))) / 2
    radius = 2 * abs(kappa) ** (1 / d)
    w = centers.ravel().copy()
    der = np.ones(w.shape, dtype=complex)
    level = np.full(w.shape, max_iter, dtype=np.int64)
    alive = np.ones(w.shape, dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        _escape_levels(w, der, level, alive, d, kappa, radius, h, max_iter)
    return (255 * level / max_iter).astype(np.uint8).reshape(res, res)


def _escape_levels(w, der, level, alive, d, kappa, radius, h, max_iter) -> None:
    for n in range(max_iter):
        # a pixel stays while its disk may still meet the trapped set
        gone = alive & (np.abs(w) > radius + np.abs(der) * h)
        level[gone] = n
        alive &= ~gone
        der = np.where(alive, d * w ** (d - 1) * der, der)
        w = np.where(alive, w ** d + kappa, w)
        big = ~np.isfinite(w) | ~np.isfinite(der)
        level[alive & big] = n + 1
        alive &= ~big


def cmd_render(run: Run, grid_n, tol) -> None:
    cfg = run.cfg
    kind = cfg.get("kind", "julia")
    res = grid_n or cfg.integer("resolution", 512)
    if res < 2:
        raise ConfigError("resolution must be >= 2")
    if kind == "julia":
        d = cfg.integer("d", 3)
        kappa = cfg.cplx("kappa", 1e6)
        s = 1.5 * abs(kappa) ** (1 / d)
        vp = _viewport(cfg, [-s, s, -s, s])
        img = julia_raster(d, kappa, vp, res, cfg.integer("max_iter", 4))
        from scipy import ndimage
        comps = int(ndimage.label(img == 255)[1])
        run.results["components"] = comps
        expect = cfg.integer("expect_components", d)
        run.add(clause("component count", comps == expect, comps, expect, comps - expect))
    elif kind == "regions":
        p = skewprod.Polynomial1D(tuple(cfg.numbers("p", [0, 0.5, 0, 1])))
        vp = _viewport(cfg, [-1.5, 1.5, -1.5, 1.5])
        rmap = topo.basin_classify(p, cfg.numbers("cycle", [0]), vp, (res, res), cfg.integer("max_iter", 200),
                                   run.threads)
        img = np.array([0, 128, 255], dtype=np.uint8)[rmap.labels]
        run.results["counts"] = rmap.counts()
    elif kind == "limitset":
        sk, _ = _skew_from_config(cfg)
        ifs = skewprod.rescaled_inverse_ifs(sk)
        pts = blender.sample_limit_set_k(ifs, cfg.integer("samples", 100_000), 64, run.seed)
        vp = _viewport(cfg, [-0.1, 0.1, -0.1, 0.1])
        ix = np.floor((pts[:, 0].real - vp.xmin) / (vp.xmax - vp.xmin) * res).astype(int)
        iy = np.floor((pts[:, 0].imag - vp.ymin) / (vp.ymax - vp.ymin) * res).astype(int)
        keep = (ix >= 0) & (ix < res) & (iy >= 0) & (iy < res)
        img = np.zeros((res, res), dtype=np.uint8)
        img[iy[keep], ix[keep]] = 255
    else:
        raise ConfigError(f"unknown render kind {kind!r}")
    pgm = f"P5\n{res} {res}\n255\n".encode() + img[::-1].tobytes()
    run.artifact("render.pgm").write_bytes(pgm)
    side = {"kind": kind, "viewport": vp.as_dict(), "resolution": [res, res]}
    run.artifact("render.json").write_text(to_json(side) + "\n")


COMMANDS = {
    "certify-ifs": cmd_certify_ifs,
    "blender": cmd_blender,
    "misiurewicz": cmd_misiurewicz,
    "topology": cmd_topology,
    "render": cmd_render,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="blenderkit", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="flat key=value file")
        sp.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--gridN", type=int, default=None)
        sp.add_argument("--tol", type=float, default=None)
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable, last wins)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    start = time.perf_counter()
    values = {}
    try:
        if args.config is not None:
            values.update(read_config(args.config))
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            values[k.strip()] = parse_value(v)
        if args.tol is not None and not args.tol > 0:
            raise ConfigError("--tol must be > 0")
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
    except (ConfigError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    run = Run(args.command, Config(values), args.out, args.seed, args.threads)
    error = None
    try:
        COMMANDS[args.command](run, args.gridN, args.tol)
        code = 0 if all(c["passed"] for c in run.clauses) else 1
        status = "pass" if code == 0 else "fail"
    except BlenderKitError as e:
        code, status = e.exit_code, "error"
        error = {"type": type(e).__name__, "message": str(e)}
        if isinstance(e, HypothesisViolation):
            error["clause"] = e.clause
    rep = run.report(time.perf_counter() - start, status, code, error)
    (args.out / "report.json").write_text(to_json(rep) + "\n")
    if error is not None:
        print(f"{error['type']}: {error['message']}", file=sys.stderr)
    print(f"{args.command}: {status} (exit {code}) -> {args.out / 'report.json'}")
    return code


if __name__ == "__main__":
    sys.exit(main())
