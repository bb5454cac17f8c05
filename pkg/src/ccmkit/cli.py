"""Command-line entry point.

Every run gets its own output directory ``<root>/<command>-<timestamp>-<hash>``
under ``--out-root`` (default: ``$CCMKIT_OUTPUT_ROOT`` or ``./runs``). It
holds the outputs, ``config.txt`` (the resolved settings, reusable through
``--config``) and ``manifest.json``.

Exit codes: 0 success, 2 infeasible or failed verification, 1 usage or IO error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np
import scipy

from . import __version__
from .ccm import (ALPHA1_FLOOR, CcmCertificate, Region, VerificationReport, load_certificate, save_certificate, synthesize_ccm,
                  synthesize_robust, verify_certificate)
from .ctrl import ClfController, PathIntegralController
from .errors import ControllerError, InputError, SynthesisFailed
from .geodesic import GeodesicOptions, MetricField, compute_geodesic, save_result
from .observer import ReducedObserverDesign, check_m22_condition, cosimulate_observer
from .sim import NoiseStream, Reference, ZohNoise, closed_loop, fit_decay_rate, time_grid
from .sysmodel import BUILTIN_NAMES, ControlAffineSystem, resolve_model

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "CCMKIT_OUTPUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# parameter conversion -----------------------------------------------------------

def _vector(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in str(text).replace(" ", "").split(",") if v != "")
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _matrix(text: str) -> np.ndarray:
    """Rows separated by ``;``, entries by ``,``."""
    rows = [_vector(r) for r in str(text).split(";") if r.strip()]
    if not rows or len({len(r) for r in rows}) != 1:
        raise UsageError(f"malformed matrix {text!r}")
    return np.array(rows, dtype=float)


def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


@dataclass(frozen=True)
class Param:
    name: str
    kind: Callable
    default: Any
    help: str
    check: Callable | None = None
    check_msg: str = "must be positive"


def _p(name, kind, default, help, check=None, msg="must be positive"):
    return Param(name, kind, default, help, check, msg)


_MODEL = _p("model", str, None, f"builtin name ({', '.join(BUILTIN_NAMES)}) or model file")
_CERT = _p("cert", str, None, "certificate file")
_DENSITY = _p("density", int, 41, "grid points per gridded dimension", lambda v: v >= 3, "must be at least 3")
_REFINE = _p("refinement", int, 10, "verification grid refinement factor", lambda v: v >= 2, "must be at least 2")

PARAMS: dict[str, list[Param]] = {
    "synth": [
        _p("model", str, "moore-greitzer", _MODEL.help),
        _p("radius", float, 5.0, "half-width of the region in the states the dynamics are nonlinear in", _positive),
        _p("lam", float, 0.5, "contraction rate", _nonneg, "must be non-negative"),
        _DENSITY,
        _p("w_degree", int, 0, "polynomial degree of W", _nonneg, "must be non-negative"),
        _p("y_degree", int, 2, "polynomial degree of Y", _nonneg, "must be non-negative"),
        _p("y_max", float, 10.0, "cap on the norm of Y, which keeps gains moderate (0 disables)", _nonneg,
           "must be non-negative"),
        _REFINE,
    ],
    "robust": [
        _p("model", str, "moore-greitzer", _MODEL.help),
        _p("radius", _vector, (1.0,), "comma-separated region radii to sweep",
           lambda v: len(v) > 0 and min(v) > 0, "must be positive numbers"),
        _p("alpha_min", float, 0.01, "lower end of the gain search", _positive),
        _p("alpha_max", float, 100.0, "upper end of the gain search", _positive),
        _p("rel_tol", float, 1e-2, "relative tolerance of the gain bisection", _positive),
        _p("lam_min", float, 0.5, "contraction rate imposed on the enlarged region", _positive),
        _p("stability_factor", float, 10.0, "enlargement of the region for the contraction constraint",
           lambda v: v >= 1, "must be at least 1"),
        _p("w_floor", float, ALPHA1_FLOOR, "lower bound on W; larger values give gentler gains", _positive),
        _DENSITY,
        _REFINE,
        _p("workers", int, 1, "radii solved in parallel", _positive),
    ],
    "geodesic": [
        _CERT,
        _MODEL,
        _p("a", _vector, None, "start point, comma-separated"),
        _p("b", _vector, None, "end point, comma-separated"),
        _p("nodes", int, 32, "path segments", lambda v: v >= 2, "must be at least 2"),
        _p("starts", int, 3, "initial paths tried", _positive),
        _p("tol", float, 1e-8, "gradient tolerance", _positive),
    ],
    "simulate": [
        _CERT,
        _MODEL,
        _p("controller", str, "path", "path (path-integral) or clf (energy CLF)",
           lambda v: v in ("path", "clf"), "must be 'path' or 'clf'"),
        _p("x0", _vector, None, "initial state (default: all ones)"),
        _p("xstar", _vector, None, "target equilibrium state (default: origin)"),
        _p("ustar", _vector, None, "target equilibrium control (default: zero)"),
        _p("lam", float, None, "CLF decay rate (default: the certificate rate)", _positive),
        _p("tfinal", float, 10.0, "simulation horizon", _positive),
        _p("step", float, 0.01, "integration step", _positive),
        _p("nodes", int, 32, "geodesic segments", lambda v: v >= 2, "must be at least 2"),
        _p("w_sigma", float, 0.0, "standard deviation of the held disturbance", _nonneg, "must be non-negative"),
        _p("w_clamp", float, None, "disturbance amplitude clamp", _positive),
        _p("seed", int, 0, "disturbance seed", _nonneg, "must be non-negative"),
    ],
    "observe": [
        _p("model", str, "moore-greitzer", _MODEL.help),
        _p("p", int, 1, "number of measured leading states", _positive),
        _p("m21", _matrix, np.array([[-2.0]]), "metric block M21 (rows ';', entries ',')"),
        _p("m22", _matrix, np.array([[1.0]]), "metric block M22"),
        _p("lam", float, 0.5, "design rate", _positive),
        _p("x0", _vector, (0.2, 0.2), "plant initial state"),
        _p("xhat0", _vector, (0.2, 2.2), "observer initial state"),
        _p("sigma", float, 0.2, "measurement noise standard deviation", _nonneg, "must be non-negative"),
        _p("seed", int, 7, "noise seed", _nonneg, "must be non-negative"),
        _p("tfinal", float, 10.0, "simulation horizon", _positive),
        _p("step", float, 1e-3, "integration step", _positive),
        _p("check_radius", float, 5.0, "half-width of the grid for the observer condition check", _positive),
        _DENSITY,
    ],
    "verify": [
        _CERT,
        _MODEL,
        _REFINE,
    ],
}

SUMMARIES = {
    "synth": "search for a CCM certificate on a box region",
    "robust": "smallest certified differential gain bound for each radius",
    "geodesic": "minimal-energy path between two points under a certificate metric",
    "simulate": "closed-loop run with the path-integral or energy-CLF controller",
    "observe": "reduced-order observer run with measurement noise",
    "verify": "re-check a certificate file on a refined grid",
}

REQUIRED = {"geodesic": ("cert", "a", "b"), "simulate": ("cert",), "verify": ("cert",)}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ccmkit", description="Contraction-metric synthesis, control and observation.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="command")
    for cmd, params in PARAMS.items():
        sp = sub.add_parser(cmd, help=SUMMARIES[cmd], description=SUMMARIES[cmd])
        sp.add_argument("--config", help="key=value file; flags override its values")
        sp.add_argument("--out-root", help=f"output root (default ${OUTPUT_ROOT_ENV} or ./runs)")
        sp.add_argument("-v", "--verbose", action="store_true")
        for p in params:
            default = p.default if not isinstance(p.default, np.ndarray) else "matrix"
            sp.add_argument(_flag(p.name), dest=p.name, default=None, help=f"{p.help} [default: {default}]")
    return parser


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; keys may use dashes or underscores."""
    out = {}
    for k, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{k}: expected key=value")
        out[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return out


def resolve_config(command: str, flags: dict[str, str | None], file_values: dict[str, str]) -> dict[str, Any]:
    """Merge defaults, file values and flags (in increasing priority) and validate."""
    params = PARAMS[command]
    known = {p.name for p in params}
    unknown = sorted(set(file_values) - known)
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
    cfg = {}
    for p in params:
        raw = flags.get(p.name)
        if raw is None:
            raw = file_values.get(p.name)
        if raw is None:
            value = p.default
        else:
            try:
                value = p.kind(raw)
            except (TypeError, ValueError):
                raise UsageError(f"{_flag(p.name)}: cannot parse {raw!r}") from None
        if value is not None and p.check is not None and not p.check(value):
            raise UsageError(f"{_flag(p.name)} {p.check_msg}")
        cfg[p.name] = value
    for name in REQUIRED.get(command, ()):
        if cfg[name] is None:
            raise UsageError(f"{command} needs {_flag(name)}")
    for key in ("cert", "model"):
        if cfg.get(key) and Path(cfg[key]).is_file():
            cfg[key] = str(Path(cfg[key]).resolve())  # reruns from config.txt work from any directory
    return cfg


def _config_text(cfg: dict[str, Any]) -> str:
    lines = []
    for k, v in cfg.items():
        if v is None:
            continue
        if isinstance(v, np.ndarray):
            v = ";".join(",".join(repr(float(a)) for a in row) for row in v)
        elif isinstance(v, tuple):
            v = ",".join(repr(float(a)) for a in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# run bookkeeping -------------------------------------------------------------------

class Run:
    """Output directory, hashes and the manifest of one invocation."""

    def __init__(self, command: str, cfg: dict[str, Any], root: Path):
        self.command = command
        self.cfg = cfg
        self.inputs: dict[str, str] = {}
        for key in ("cert", "model"):
            v = cfg.get(key)
            if v is not None and Path(v).is_file():
                self.inputs[v] = _sha256(v)
        text = _config_text(cfg)
        digest = hashlib.sha256((command + "\n" + text + json.dumps(self.inputs, sort_keys=True)).encode())
        stamp = time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())
        base = root / f"{command}-{stamp}-{digest.hexdigest()[:10]}"
        path, k = base, 1
        while path.exists():
            k += 1
            path = Path(f"{base}-{k}")
        path.mkdir(parents=True)
        self.dir = path
        (path / "config.txt").write_text(text)
        self.outputs: list[str] = []
        self.seeds: dict[str, int] = {}
        self.summary: dict[str, Any] = {}
        self.started = time.time()

    def file(self, name: str) -> Path:
        self.outputs.append(name)
        return self.dir / name

    def finish(self, code: int, message: str = "") -> None:
        manifest = {
            "command": self.command,
            "config": json.loads(json.dumps(self.cfg, default=_jsonable)),
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": {n: _sha256(self.dir / n) for n in self.outputs if (self.dir / n).exists()},
            "summary": json.loads(json.dumps(self.summary, default=_jsonable)),
            "versions": {"ccmkit": __version__, "python": platform.python_version(), "numpy": np.__version__,
                         "scipy": scipy.__version__},
            "wall_time_s": round(time.time() - self.started, 3),
            "exit_code": code,
            "message": message,
        }
        (self.dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return str(v)


def write_report(path: Path, rep: VerificationReport | None, **extra) -> None:
    lines = [f"{k} = {v}" for k, v in extra.items()]
    if rep is not None:
        lines += [f"passed = {rep.passed}", f"worst_margin = {rep.worst_margin!r}",
                  f"required_margin = {rep.required_margin!r}", f"grid_size = {rep.grid_size}",
                  "worst_point = " + "; ".join(",".join(repr(float(a)) for a in np.atleast_1d(p))
                                               for p in rep.worst_point)]
    path.write_text("\n".join(lines) + "\n")


# commands ------------------------------------------------------------------------

def _model_for(cfg, cert=None) -> ControlAffineSystem:
    source = cfg.get("model")
    if source is None:
        source = getattr(cert, "model", "") or ""
        if source not in BUILTIN_NAMES:
            raise UsageError("the certificate does not name a builtin model; pass --model")
    return resolve_model(source)


def _region_for(sys: ControlAffineSystem, radius: float) -> Region:
    """Box of half-width ``radius`` in the states the Jacobian or ``B`` depend on, unbounded elsewhere."""
    dep = {s for s in sys.state_names if sys.jacobian_poly.depends_on(s) or sys.B.depends_on(s)}
    return Region.box(np.zeros(sys.n), [radius if s in dep else math.inf for s in sys.state_names])


def _vec_arg(v, n, name) -> np.ndarray:
    if v is None:
        return np.zeros(n)
    if len(v) != n:
        raise UsageError(f"{_flag(name)} needs {n} entries, got {len(v)}")
    return np.asarray(v, dtype=float)


def cmd_synth(cfg, run: Run) -> int:
    sys_ = _model_for(cfg)
    region = _region_for(sys_, cfg["radius"])
    try:
        cert = synthesize_ccm(sys_, region, cfg["lam"], w_degree=cfg["w_degree"], y_degree=cfg["y_degree"],
                              density=cfg["density"], refinement=cfg["refinement"], y_max=cfg["y_max"] or None)
    except SynthesisFailed as exc:
        write_report(run.file("report.txt"), exc.verification, status="infeasible", message=str(exc))
        run.summary["status"] = "infeasible"
        return EXIT_FAIL
    save_certificate(cert, run.file("certificate.cert"))
    write_report(run.file("report.txt"), cert.verification, status="feasible", alpha1=cert.alpha1,
                 alpha2=cert.alpha2)
    run.summary.update(status="feasible", worst_margin=cert.verification.worst_margin)
    print(f"certificate written to {run.dir / 'certificate.cert'}")
    return EXIT_OK


def _robust_one(args):
    sys_, C, D, r, cfg = args
    try:
        cert = synthesize_robust(sys_, C, D, radius=r, lam_min=cfg["lam_min"], alpha_lo=cfg["alpha_min"],
                                 alpha_hi=cfg["alpha_max"], rel_tol=cfg["rel_tol"], density=cfg["density"],
                                 stability_factor=cfg["stability_factor"], alpha1=cfg["w_floor"],
                                 refinement=cfg["refinement"])
    except SynthesisFailed as exc:
        return r, None, str(exc)
    return r, cert, ""


def cmd_robust(cfg, run: Run) -> int:
    sys_ = _model_for(cfg)
    C, D = sys_.output_jacobians(np.zeros(sys_.n), np.zeros(sys_.m))
    jobs = [(sys_, C, D, r, cfg) for r in cfg["radius"]]
    if cfg["workers"] > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg["workers"]) as pool:
            results = list(pool.map(_robust_one, jobs))
    else:
        results = [_robust_one(j) for j in jobs]
    rows = ["r,alpha"]
    failed = []
    for r, cert, msg in results:
        if cert is None:
            rows.append(f"{r:g},inf")
            failed.append(f"r={r:g}: {msg}")
            print(f"r = {r:g}: infeasible ({msg})")
            continue
        rows.append(f"{r:g},{cert.alpha:.17g}")
        save_certificate(cert, run.file(f"robust_r{r:g}.cert"))
        print(f"r = {r:g}: alpha = {cert.alpha:.4g}")
    run.file("table.csv").write_text("\n".join(rows) + "\n")
    write_report(run.file("report.txt"), None, status="infeasible" if failed else "feasible",
                 failures=" | ".join(failed) or "none")
    run.summary["table"] = rows[1:]
    return EXIT_FAIL if failed else EXIT_OK


def cmd_geodesic(cfg, run: Run) -> int:
    cert = load_certificate(cfg["cert"])
    sys_ = _model_for(cfg, cert)
    a, b = _vec_arg(cfg["a"], sys_.n, "a"), _vec_arg(cfg["b"], sys_.n, "b")
    metric = MetricField.from_certificate(cert, sys_)
    res = compute_geodesic(metric, a, b, GeodesicOptions(N=cfg["nodes"], starts=cfg["starts"], tol=cfg["tol"]))
    save_result(res, run.file("path.csv"))
    write_report(run.file("report.txt"), None, converged=res.converged, energy=repr(res.energy),
                 length=repr(res.length), iterations=res.iterations, start_index=res.start_index)
    run.summary.update(energy=res.energy, length=res.length, converged=res.converged)
    print(f"energy = {res.energy:.10g}, length = {res.length:.10g}, converged = {res.converged}")
    return EXIT_OK if res.converged else EXIT_FAIL


def cmd_simulate(cfg, run: Run) -> int:
    cert = load_certificate(cfg["cert"])
    sys_ = _model_for(cfg, cert)
    x0 = np.ones(sys_.n) if cfg["x0"] is None else _vec_arg(cfg["x0"], sys_.n, "x0")
    xstar = _vec_arg(cfg["xstar"], sys_.n, "xstar")
    ustar = _vec_arg(cfg["ustar"], sys_.m, "ustar")
    geo = GeodesicOptions(N=cfg["nodes"])
    if cfg["controller"] == "path":
        try:
            controller = PathIntegralController(cert, sys_, geo)
        except InputError as exc:
            write_report(run.file("report.txt"), cert.verification, status="verification-failed", message=str(exc))
            return EXIT_FAIL
    else:
        lam = cfg["lam"] if cfg["lam"] is not None else getattr(cert, "lam", 0.5)
        controller = ClfController(sys_, MetricField.from_certificate(cert, sys_), lam, geo)
    t = time_grid(0.0, cfg["tfinal"], cfg["step"])
    ref = Reference.constant(sys_, xstar, ustar, t)
    w_signal = None
    if cfg["w_sigma"] > 0 and sys_.p_w:
        w_signal = ZohNoise(NoiseStream(cfg["seed"], cfg["w_sigma"]), sys_.p_w, clamp=cfg["w_clamp"])
        run.seeds["disturbance"] = cfg["seed"]
    status = "ok"
    try:
        traj = closed_loop(sys_, controller, ref, w_signal, x0, (0.0, cfg["tfinal"]), cfg["step"])
    except ControllerError as exc:
        traj = exc.trajectory
        status = f"controller-failure: {exc}"
    if traj.status == "diverged":
        status = "diverged"
    traj.to_csv(run.file("trajectory.csv"))
    err = np.linalg.norm(traj.x - traj.xstar, axis=1)
    rate = fit_decay_rate(traj.t, err) if len(traj.t) > 2 else float("nan")
    write_report(run.file("report.txt"), None, status=status, decay_rate=repr(rate), final_error=repr(err[-1]))
    run.summary.update(status=status, decay_rate=rate, final_error=err[-1])
    print(f"status = {status}, fitted decay rate = {rate:.4g}, final error = {err[-1]:.3g}")
    return EXIT_OK if status == "ok" else EXIT_FAIL


def cmd_observe(cfg, run: Run) -> int:
    sys_ = _model_for(cfg)
    design = ReducedObserverDesign(cfg["p"], cfg["m21"], cfg["m22"], cfg["lam"])
    if design.n != sys_.n:
        raise UsageError(f"observer blocks describe {design.n} states, the model has {sys_.n}")
    x0 = _vec_arg(cfg["x0"], sys_.n, "x0")
    xh0 = _vec_arg(cfg["xhat0"], sys_.n, "xhat0")
    dims = [i for i, s in enumerate(sys_.state_names) if sys_.jacobian_poly.depends_on(s)]
    grid = Region.box(np.zeros(sys_.n), [cfg["check_radius"]] * sys_.n).state_grid(dims, cfg["density"])
    rep = check_m22_condition(sys_, design, grid)
    noise = NoiseStream(cfg["seed"], cfg["sigma"]) if cfg["sigma"] > 0 else None
    if noise is not None:
        run.seeds["measurement"] = cfg["seed"]
    obs = cosimulate_observer(sys_, design, x0, xh0, (0.0, cfg["tfinal"]), cfg["step"], noise)
    obs.to_csv(run.file("estimate.csv"))
    p = design.p
    err = np.linalg.norm(obs.x_hat[:, p:] - obs.x[:, p:], axis=1)
    late = obs.t >= 0.5 * cfg["tfinal"]
    rms = float(np.sqrt(np.mean(err[late] ** 2)))
    # noise floors the error, so the rate comes from a noiseless companion run
    clean = obs if noise is None else cosimulate_observer(sys_, design, x0, xh0, (0.0, cfg["tfinal"]), cfg["step"])
    rate = fit_decay_rate(clean.t, np.linalg.norm(clean.x_hat[:, p:] - clean.x[:, p:], axis=1))
    write_report(run.file("report.txt"), rep, decay_rate=repr(rate), late_rms_error=repr(rms),
                 late_max_error=repr(float(err[late].max())))
    run.summary.update(condition_passed=rep.passed, decay_rate=rate, late_rms_error=rms)
    print(f"observer condition {'holds' if rep.passed else 'FAILS'} (worst {rep.worst_margin:.3g}); "
          f"noiseless error decay rate = {rate:.4g}, late RMS error = {rms:.3g}")
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_verify(cfg, run: Run) -> int:
    cert = load_certificate(cfg["cert"])
    sys_ = _model_for(cfg, cert)
    rep = verify_certificate(cert, sys_, cfg["refinement"])
    kind = "ccm" if isinstance(cert, CcmCertificate) else "robust"
    write_report(run.file("report.txt"), rep, kind=kind, refinement=cfg["refinement"])
    run.summary.update(passed=rep.passed, worst_margin=rep.worst_margin)
    print(f"{kind} certificate {'passes' if rep.passed else 'FAILS'}: worst margin {rep.worst_margin:.3g} "
          f"on {rep.grid_size} points")
    return EXIT_OK if rep.passed else EXIT_FAIL


COMMANDS = {"synth": cmd_synth, "robust": cmd_robust, "geodesic": cmd_geodesic, "simulate": cmd_simulate,
            "observe": cmd_observe, "verify": cmd_verify}


def run(argv=None) -> int:
    """Parse ``argv``, execute the subcommand and return the exit code."""
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise UsageError(f"choose a command: {' | '.join(COMMANDS)}")
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        file_values = read_config_file(ns.config) if ns.config else {}
        cfg = resolve_config(ns.command, vars(ns), file_values)
    except (UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    root = Path(ns.out_root or os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    try:
        rec = Run(ns.command, cfg, root)
    except OSError as exc:
        print(f"error: cannot create output directory: {exc}", file=sys.stderr)
        return EXIT_USAGE
    message = ""
    try:
        code = COMMANDS[ns.command](cfg, rec)
    except (UsageError, InputError, OSError, KeyError, ValueError) as exc:
        message = f"{type(exc).__name__}: {exc}"
        print(f"error: {message}", file=sys.stderr)
        code = EXIT_USAGE
    rec.finish(code, message)
    print(f"run directory: {rec.dir}")
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
