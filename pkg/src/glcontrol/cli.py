"""Command-line front end: ``glcontrol run <command> [config] [options]``.

Configuration is a flat ``key = value`` file (an optional ``[run]`` header is
accepted). Precedence: built-in defaults < config file < ``--seed`` < ``--set``.
Every run writes its outputs plus ``manifest.json`` into ``--out``; wall-clock
time goes to ``timing.txt`` so that the JSON and CSV outputs are byte-stable.

Exit codes: 0 success, 1 usage/configuration error, 2 precondition rejected,
3 numerical divergence (``divergence.json`` written).
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .params import DiskGeometry, DivergenceError, Params, PreconditionError

log = logging.getLogger("glcontrol")

COMMANDS = (
    "mesh", "solve-forward", "solve-adjoint", "solve-cubic", "weights", "carleman-identity",
    "carleman-ratio", "control-linear", "control-hum", "observability", "control-nonlinear",
    "estimate-delta", "verify-all",
)
U0_KINDS = ("bump", "zero", "random")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything a run depends on. All fields are documented defaults.

    ``u0_h1`` rescales the initial datum to that H1 norm (``0`` keeps the raw
    field); ``u0_kind`` picks a Gaussian bump at ``u0_center``, zero, or a smooth
    random field drawn from ``seed``.
    """

    # model and numerics (mirrors Params)
    a: float = 1.0
    b: float = 1.0
    c: float = 1.0
    alpha: float = 0.5
    gamma: float = 0.5
    T: float = 1.0
    s: float = 1.1
    lam: float = 1.1
    m: float = 2.0
    theta_scheme: float = 0.5
    cg_tol: float = 1e-10
    cg_maxit: int = 2000
    picard_tol: float = 1e-11
    picard_maxit: int = 30
    weight_floor: float = 1e-300
    cubic_gate: float = 1.0
    literal_envelope_weights: bool = False
    # geometry and discretisation
    R: float = 1.0
    r_inner: float = 0.25
    r_control: float = 0.5
    h_target: float = 0.1
    N_t: int = 64
    # data
    seed: int = 0
    u0_kind: str = "bump"
    u0_center: tuple = (0.55, 0.2)
    u0_width: float = 8.0
    u0_h1: float = 0.0
    # experiments
    s_list: tuple = (5.0, 10.0, 20.0)
    lambda_list: tuple = (2.0,)
    family_count: int = 20
    collocation_count: int = 200
    sample_count: int = 50
    eps_penalty: float = 1e-8
    delta_exponents: int = 13
    criteria: tuple = (1, 2, 3, 4, 5, 6, 7, 8, 9)

    def __post_init__(self):
        if self.u0_kind not in U0_KINDS:
            raise ConfigError(f"u0_kind must be one of {U0_KINDS}, got {self.u0_kind!r}")

    # --- derived objects ----------------------------------------------------
    def params(self) -> Params:
        names = {f.name for f in fields(Params)}
        return Params(**{k: getattr(self, k) for k in names})

    def geometry(self) -> DiskGeometry:
        return DiskGeometry(self.R, self.r_inner, self.r_control)

    # --- serialisation ------------------------------------------------------
    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_text(self) -> str:
        lines = ["[run]"]
        for f in fields(self):
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: dict, base: "RunConfig | None" = None) -> "RunConfig":
        base = base or cls()
        types = {f.name: f for f in fields(cls)}
        kw = base.to_dict()
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown configuration key {key!r}")
            kw[key] = _parse_value(types[key], base, raw)
        return cls(**kw)

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        if not text.lstrip().startswith("["):
            text = "[run]\n" + text
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        if cp.sections() != ["run"]:
            raise ConfigError(f"config must have a single [run] section, found {cp.sections()}")
        return cls.from_mapping(dict(cp["run"]), base)


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(f: dataclasses.Field, base: RunConfig, raw: str):
    raw = raw.strip()
    default = getattr(base, f.name)
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            elem = type(default[0]) if default else float
            return tuple(elem(x) for x in raw.replace(" ", "").split(",") if x)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {f.name}: {raw!r}") from exc


def load_config(path: str | None, overrides: list[str], seed: int | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg = RunConfig.from_text(p.read_text(), cfg)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    kv = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        kv[k.strip()] = v
    return RunConfig.from_mapping(kv, cfg) if kv else cfg


# --- outputs ---------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def write_json(path: Path, obj) -> None:
    text = json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False)
    _atomic_write(path, text + "\n")


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8", newline="\n")
    os.replace(tmp, path)


@dataclass
class RunManifest:
    command: str
    config: dict
    version: str = __version__
    input_hashes: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    exit_code: int = 0
    wall_clock: float = 0.0

    def write(self, out: Path) -> None:
        """``manifest.json`` holds everything except wall-clock time, which goes to
        ``timing.txt`` so that repeated runs produce identical JSON."""
        d = dataclasses.asdict(self)
        d.pop("wall_clock")
        write_json(out / "manifest.json", d)
        _atomic_write(out / "timing.txt", f"wall_clock_seconds {self.wall_clock:.3f}\n")


class Run:
    """Shared state of one command invocation."""

    def __init__(self, cfg: RunConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.files: list[Path] = []
        self.checks: dict = {}
        self._setup = None

    def path(self, name: str) -> Path:
        p = self.out / name
        self.files.append(p)
        return p

    def json(self, name: str, obj) -> None:
        write_json(self.path(name), obj)

    @property
    def params(self) -> Params:
        return self.cfg.params()

    def setup(self, weights: bool = False):
        """mesh, ops, eta, grid (and the weight set, when asked)."""
        from .assembly import assemble
        from .evolution import TimeGrid
        from .geometry import build_eta0, build_mesh
        from .weights import eval_weights

        if self._setup is None:
            geom = self.cfg.geometry()
            mesh = build_mesh(geom, self.cfg.h_target, self.cfg.seed)
            ops = assemble(mesh)
            eta = build_eta0(mesh, geom)
            grid = TimeGrid(self.cfg.T, self.cfg.N_t)
            self._setup = {"mesh": mesh, "ops": ops, "eta": eta, "grid": grid}
        if weights and "wset" not in self._setup:
            s = self._setup
            s["wset"] = eval_weights(s["mesh"], s["eta"], self.params, s["grid"])
        return self._setup

    def u0(self) -> np.ndarray:
        from .acceptance import bump
        from .control import smooth_random_field
        from .evolution import h1_norm_frames

        s = self.setup()
        X = s["mesh"].vertices
        cfg = self.cfg
        if cfg.u0_kind == "zero":
            return np.zeros(len(X), dtype=complex)
        if cfg.u0_kind == "bump":
            u = bump(X, cfg.u0_center, cfg.u0_width)
        else:
            u = smooth_random_field(np.random.default_rng(cfg.seed), X)
        if cfg.u0_h1 > 0:
            u = u * (cfg.u0_h1 / h1_norm_frames(s["ops"], u[None])[0])
        return u


# --- commands ----------------------------------------------------------------------

def cmd_mesh(run: Run) -> None:
    from .geometry import save_mesh

    s = run.setup()
    mesh, ops = s["mesh"], s["ops"]
    save_mesh(mesh, run.path("mesh.txt"))
    one = np.ones(ops.n)
    run.json("mesh.json", {"n_vertices": mesh.n_vertices, "n_triangles": len(mesh.triangles),
                           "n_boundary": len(mesh.boundary_loop), "h_max": mesh.h_max,
                           "area": one @ ops.M_bulk @ one, "perimeter": one @ ops.M_surf @ one,
                           "control_mask_support": int(np.count_nonzero(ops.mask))})


def cmd_solve_forward(run: Run) -> None:
    from .evolution import energy_report, solve_forward

    s = run.setup()
    y = solve_forward(s["ops"], run.params, run.u0(), None, None, s["grid"])
    y.to_csv(run.path("forward.csv"))
    energy_report(y, s["ops"]).to_json(run.path("energy.json"))


def cmd_solve_adjoint(run: Run) -> None:
    from .evolution import l2_norm_frames, solve_adjoint

    s = run.setup()
    z = solve_adjoint(s["ops"], run.params, run.u0(), None, s["grid"])
    z.to_csv(run.path("adjoint.csv"))
    run.json("adjoint.json", {"l2_by_node": l2_norm_frames(s["ops"], z.frames).tolist()})


def cmd_solve_cubic(run: Run) -> None:
    from .evolution import energy_report, solve_cubic

    s = run.setup()
    y = solve_cubic(s["ops"], run.params, run.u0(), None, s["grid"])
    y.to_csv(run.path("cubic.csv"))
    plog = y.meta["log"]
    run.json("picard.json", {"iterations": plog.iterations, "diffs": plog.diffs,
                             "factors": plog.factors, "contraction": plog.contraction,
                             "converged": plog.converged})
    energy_report(y, s["ops"]).to_json(run.path("energy.json"))


def cmd_weights(run: Run) -> None:
    s = run.setup(weights=True)
    w = s["wset"]
    w.to_csv(run.path("weights_space_time.csv"), run.path("weights_time.csv"))
    run.json("weights.json", {"floor": w.floor, "floor_applied": w.floor_applied})


def cmd_carleman_identity(run: Run) -> None:
    from .carleman import TestFunctionFamily, collocation_points, conjugate_identity_defect

    cfg, p, g = run.cfg, run.params, run.cfg.geometry()
    fam = TestFunctionFamily(cfg.seed, cfg.family_count, p.T, g.R, g.r_control)
    rows = []
    for i, v in enumerate(fam.members):
        pts = {"bulk": collocation_points(cfg.collocation_count, p.T, g.R, cfg.seed + 7 * i, False),
               "boundary": collocation_points(cfg.collocation_count, p.T, g.R, cfg.seed + 7 * i + 1, True)}
        rows.append(conjugate_identity_defect(v, p, pts, g.R))
    run.json("identity.json", {"s": p.s, "lambda": p.lam, "defects": rows, "max_defect": max(rows)})
    run.checks["defect_le_1e-9"] = max(rows) <= 1e-9


def cmd_carleman_ratio(run: Run) -> None:
    from .carleman import TestFunctionFamily, carleman_ratio, max_ratio_by_s, write_ratio_csv

    cfg, p, g = run.cfg, run.params, run.cfg.geometry()
    s = run.setup()
    fam = TestFunctionFamily(cfg.seed, cfg.family_count, p.T, g.R, g.r_control)
    rows = carleman_ratio(fam, p, list(cfg.s_list), list(cfg.lambda_list), s["mesh"], s["grid"], s["ops"])
    write_ratio_csv(rows, run.path("carleman_ratios.csv"))
    run.json("carleman_terms.json", [{k: r[k] for k in ("member_id", "s", "lambda", "status", "terms")}
                                     for r in rows])
    run.json("carleman_summary.json", {str(lam): max_ratio_by_s(rows, lam) for lam in cfg.lambda_list})


def _write_control(run: Run, res, ops, stem: str) -> None:
    res.h.to_csv(run.path(f"{stem}_h.csv"))
    res.y.to_csv(run.path(f"{stem}_state.csv"))
    run.json(f"{stem}.json", res.summary(ops))


def cmd_control_linear(run: Run) -> None:
    from .control import solve_fi_variational

    s = run.setup(weights=True)
    res = solve_fi_variational(s["ops"], run.params, s["wset"], run.u0(), None)
    _write_control(run, res, s["ops"], "control_fi")


def cmd_control_hum(run: Run) -> None:
    from .control import penalized_hum

    s = run.setup()
    res = penalized_hum(s["ops"], run.params, run.u0(), None, run.cfg.eps_penalty, s["grid"])
    _write_control(run, res, s["ops"], "control_hum")


def cmd_observability(run: Run) -> None:
    from .control import observability_constant

    s = run.setup(weights=True)
    est = observability_constant(s["ops"], run.params, s["wset"], run.cfg.sample_count,
                                 run.cfg.seed, s["mesh"])
    run.json("observability.json", dataclasses.asdict(est))


def cmd_control_nonlinear(run: Run) -> None:
    from .control import nonlinear_null_control

    s = run.setup(weights=True)
    res, nlog = nonlinear_null_control(s["ops"], run.params, s["wset"], run.u0())
    _write_control(run, res, s["ops"], "control_nonlinear")
    nlog.to_jsonl(run.path("nonlinear_log.jsonl"))


def cmd_estimate_delta(run: Run) -> None:
    from .control import estimate_delta

    s = run.setup(weights=True)
    cfg = dataclasses.replace(run.cfg, u0_h1=0.0)
    direction = Run(cfg, run.out)
    direction._setup = run._setup
    scales = [2.0**-k for k in range(run.cfg.delta_exponents)]
    delta, diag = estimate_delta(s["ops"], run.params, s["wset"], direction.u0(), scales)
    run.json("delta.json", {"delta_hat": delta, "scan": diag})
    run.checks["delta_positive"] = delta > 0


def cmd_verify_all(run: Run) -> None:
    from . import acceptance as acc
    from .carleman import write_ratio_csv

    seed = run.cfg.seed
    lines = []
    runtimes = []
    for k in run.cfg.criteria:
        kw = {}
        if k == 6:
            rows: list = []
            kw["rows_out"] = rows
        res = acc.CRITERIA[k](seed=seed, **kw)
        if k == 6:
            write_ratio_csv(rows, run.path("criterion_06_ratios.csv"))
        run.json(f"criterion_{k:02d}.json", res.to_dict())
        run.checks[f"criterion_{k}"] = res.passed
        runtimes.append(f"criterion_{k} {res.runtime:.3f} limit {res.runtime_limit:g}")
        lines.append(res.line())
        print(res.line(), flush=True)
    run.json("acceptance_summary.json", {"passed": run.checks,
                                         "all_passed": all(run.checks.values())})
    _atomic_write(run.out / "acceptance_runtimes.txt", "\n".join(runtimes) + "\n")


HANDLERS = {
    "mesh": cmd_mesh, "solve-forward": cmd_solve_forward, "solve-adjoint": cmd_solve_adjoint,
    "solve-cubic": cmd_solve_cubic, "weights": cmd_weights,
    "carleman-identity": cmd_carleman_identity, "carleman-ratio": cmd_carleman_ratio,
    "control-linear": cmd_control_linear, "control-hum": cmd_control_hum,
    "observability": cmd_observability, "control-nonlinear": cmd_control_nonlinear,
    "estimate-delta": cmd_estimate_delta, "verify-all": cmd_verify_all,
}


def run(command: str, config_path: str | None = None, overrides: list[str] | None = None,
        out: str | Path = "runs", seed: int | None = None, threads: int | None = None) -> int:
    """Execute one command; returns the exit code."""
    if command not in HANDLERS:
        log.error("unknown command %r (choose from %s)", command, ", ".join(COMMANDS))
        return 1
    try:
        cfg = load_config(config_path, overrides or [], seed)
    except ConfigError as exc:
        log.error("%s", exc)
        return 1
    outdir = Path(out)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        probe = outdir / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        log.error("output directory %s is not writable: %s", outdir, exc)
        return 1
    _atomic_write(outdir / "config.cfg", cfg.to_text())
    manifest = RunManifest(command, cfg.to_dict())
    if config_path:
        manifest.input_hashes[str(Path(config_path).name)] = _sha256(Path(config_path))
    r = Run(cfg, outdir)
    t0 = time.perf_counter()
    code = 0
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=threads):
                HANDLERS[command](r)
        else:
            HANDLERS[command](r)
    except PreconditionError as exc:
        log.error("precondition rejected: %s", exc)
        r.json("precondition.json", {"error": str(exc)})
        code = 2
    except DivergenceError as exc:
        log.error("numerical divergence: %s", exc)
        r.json("divergence.json", {"error": str(exc), "report": getattr(exc, "report", {})})
        code = 3
    manifest.wall_clock = time.perf_counter() - t0
    manifest.exit_code = code
    manifest.checks = r.checks
    manifest.outputs = {p.name: _sha256(p) for p in r.files if p.exists()}
    manifest.write(outdir)
    return code


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="glcontrol", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="action", required=True)
    rp = sub.add_parser("run", help="run one experiment command")
    rp.add_argument("command", choices=COMMANDS)
    rp.add_argument("config_file", nargs="?", help="config file (same as --config)")
    rp.add_argument("--config", dest="config", default=None)
    rp.add_argument("--out", default="runs", help="output directory (default: runs)")
    rp.add_argument("--seed", type=int, default=None)
    rp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    rp.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread limit")
    rp.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("defaults", help="print the default configuration file")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.action == "defaults":
        sys.stdout.write(RunConfig().to_text())
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.config and args.config_file:
        log.error("give the config file either positionally or with --config, not both")
        return 1
    return run(args.command, args.config or args.config_file, args.overrides, args.out,
               args.seed, args.threads)


if __name__ == "__main__":
    sys.exit(main())
