"""Command-line driver: ``dged converge | evolve | props``.

Settings resolve in layers, later ones winning: built-in defaults, a JSON
config file (``--config``), ``DGED_*`` environment variables, command-line
flags. Exit codes: 0 success, 1 numerical failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import os
import sys
import time
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from .dynamics import (
    ModelParams,
    NewtonDivergence,
    State,
    discretisation,
    evolve,
    reduced_relative_entropy,
)
from .mesh_basis import DEFAULT_SEED, BoundaryMode, DgFunction, build_mesh
from .operators import LinearSolveError, PenaltyConfig, riesz_projection
from .verification import COLUMNS, ConvergenceReport, run_convergence_study, tanh_steady_state

EXIT_OK, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2
DESK_N_LIST = (16, 32, 64, 128, 256)
FULL_N_LIST = (16, 32, 64, 128, 256, 512, 1024)
ENV_PREFIX = "DGED_"


class UsageError(ValueError):
    """Bad configuration; the message names the offending flag."""


class Command(str, Enum):
    CONVERGE = "converge"
    EVOLVE = "evolve"
    PROPS = "props"


@dataclass
class RunConfig:
    subcommand: Command = Command.CONVERGE
    gamma: float = 1e-3
    mu: float = 1e-3
    sigma: float | None = None
    degree: int = 1
    N: int = 64
    N_list: tuple[int, ...] = DESK_N_LIST
    T: float = 0.5
    dt: float | None = None
    boundary: BoundaryMode = BoundaryMode.NATURAL
    seed: int = DEFAULT_SEED
    perturb: float = 0.0
    output: str | None = None
    plot_data: bool = False
    latex: bool = False
    timing: bool = True

    @property
    def dt_rule(self) -> str:
        return "h^2" if self.dt is None else f"fixed({self.dt!r})"

    def params(self) -> ModelParams:
        pen = None if self.sigma is None else PenaltyConfig(self.sigma)
        return ModelParams(gamma=self.gamma, mu=self.mu, degree=self.degree, penalty=pen)

    def echo(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            out[f.name] = val.value if isinstance(val, Enum) else val
        out["dt_rule"] = self.dt_rule
        return out


# ---------------------------------------------------------------------------
# Configuration parsing


def _positive(name: str, cast=float):
    def conv(text):
        try:
            val = cast(text)
        except (TypeError, ValueError):
            raise UsageError(f"--{name}: cannot parse {text!r}") from None
        if not val > 0:
            raise UsageError(f"--{name}: must be positive, got {text!r}")
        return val

    return conv


def _nonnegative(name: str):
    def conv(text):
        try:
            val = float(text)
        except (TypeError, ValueError):
            raise UsageError(f"--{name}: cannot parse {text!r}") from None
        if not val >= 0:
            raise UsageError(f"--{name}: must be non-negative, got {text!r}")
        return val

    return conv


def _int_list(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        items = list(text)
    else:
        items = [s for s in str(text).split(",") if s.strip()]
    try:
        vals = tuple(int(s) for s in items)
    except ValueError:
        raise UsageError(f"--N-list: cannot parse {text!r}") from None
    if len(vals) < 2 or any(v < 2 for v in vals):
        raise UsageError("--N-list: need at least two levels, each >= 2")
    return vals


def _boundary(text) -> BoundaryMode:
    try:
        return BoundaryMode(str(text).lower())
    except ValueError:
        raise UsageError(f"--boundary: expected periodic or natural, got {text!r}") from None


def _bool(name: str):
    def conv(text):
        if isinstance(text, bool):
            return text
        low = str(text).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"--{name}: expected a boolean, got {text!r}")

    return conv


# key -> (flag, converter)
_KEYS = {
    "gamma": ("gamma", _positive("gamma")),
    "mu": ("mu", _nonnegative("mu")),
    "sigma": ("sigma", _positive("sigma")),
    "degree": ("degree", _positive("degree", int)),
    "N": ("N", _positive("N", int)),
    "N_list": ("N-list", _int_list),
    "T": ("T", _positive("T")),
    "dt": ("dt", _positive("dt")),
    "boundary": ("boundary", _boundary),
    "seed": ("seed", lambda s: int(s, 0) if isinstance(s, str) else int(s)),
    "perturb": ("perturb", _nonnegative("perturb")),
    "output": ("output", str),
    "plot_data": ("plot-data", _bool("plot-data")),
    "latex": ("latex", _bool("latex")),
    "timing": ("timing", _bool("timing")),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    S = argparse.SUPPRESS
    common.add_argument("--config", default=S, help="JSON file with default settings")
    common.add_argument("--gamma", default=S, help="capillarity (default 1e-3)")
    common.add_argument("--mu", default=S, help="viscosity (default 1e-3)")
    common.add_argument("--sigma", default=S, help="penalty parameter (default 4(q+1)^2)")
    common.add_argument("--degree", "-q", default=S, help="polynomial degree (default 1)")
    common.add_argument("--T", default=S, help="final time (default 0.5)")
    common.add_argument("--dt", default=S, help="fixed time step (default h^2)")
    common.add_argument("--boundary", default=S, help="periodic or natural (default natural)")
    common.add_argument("--seed", default=S, help="seed for random fields and mesh jitter")
    common.add_argument("--output", "-o", default=S, help="output file (default stdout)")
    common.add_argument("--no-timing", dest="timing", action="store_const", const=False, default=S,
                        help="omit wall-clock time so output is byte-reproducible")

    parser = _Parser(prog="dged", description="1D discontinuous Galerkin solver for viscosity-capillarity elastodynamics")
    parser.add_argument("--version", action="version", version=f"dged {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    conv = sub.add_parser("converge", parents=[common], help="EOC table against the tanh steady state")
    conv.add_argument("--N-list", dest="N_list", default=S, help="comma separated cell counts")
    conv.add_argument("--full", action="store_true", default=S, help="run N = 16..1024")
    conv.add_argument("--plot-data", dest="plot_data", action="store_const", const=True, default=S)
    conv.add_argument("--latex", action="store_const", const=True, default=S)

    ev = sub.add_parser("evolve", parents=[common], help="energy and entropy time series")
    ev.add_argument("--N", default=S, help="number of cells (default 64)")
    ev.add_argument("--perturb", default=S, help="velocity perturbation amplitude")

    sub.add_parser("props", parents=[common], help="operator and projection property suite")
    return parser


def _load_config_file(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise UsageError(f"--config: cannot read {path!r}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"--config: {path!r} is not valid JSON ({exc.msg})") from None
    if not isinstance(data, dict):
        raise UsageError("--config: top level must be an object")
    unknown = sorted(set(data) - set(_KEYS))
    if unknown:
        raise UsageError(f"--config: unknown key {unknown[0]!r}")
    return data


def _env_layer(environ: Mapping[str, str]) -> dict:
    out = {}
    by_env = {ENV_PREFIX + k.upper(): k for k in _KEYS}
    for name, val in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        if name not in by_env:
            raise UsageError(f"{name}: unknown setting")
        out[by_env[name]] = val
    return out


def parse_config(argv: Sequence[str], environ: Mapping[str, str] | None = None) -> RunConfig:
    """Resolve a :class:`RunConfig` from flags, environment and config file."""
    ns = vars(_build_parser().parse_args(list(argv)))
    environ = os.environ if environ is None else environ
    cfg = RunConfig(subcommand=Command(ns.pop("subcommand")))
    layers = []
    if "config" in ns:
        layers.append(_load_config_file(ns.pop("config")))
    layers.append(_env_layer(environ))
    if ns.pop("full", False):
        ns["N_list"] = FULL_N_LIST
    layers.append(ns)
    for layer in layers:
        for key, raw in layer.items():
            if raw is None and key in ("sigma", "dt", "output"):
                setattr(cfg, key, None)
                continue
            flag, conv = _KEYS[key]
            setattr(cfg, key, conv(raw))
    if cfg.sigma is not None and PenaltyConfig(cfg.sigma).below_floor(cfg.degree) and cfg.subcommand != Command.PROPS:
        raise UsageError(f"--sigma: {cfg.sigma} is below the coercivity floor for degree {cfg.degree}")
    if cfg.subcommand == Command.CONVERGE and cfg.boundary != BoundaryMode.NATURAL:
        raise UsageError("--boundary: the convergence study uses natural boundary conditions")
    if cfg.dt is not None and cfg.dt > cfg.T:
        raise UsageError("--dt: must not exceed --T")
    return cfg


# ---------------------------------------------------------------------------
# Output helpers


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return f"{float(x):.6e}"


def _meta_lines(meta: dict) -> list[str]:
    lines = []
    for key in sorted(meta):
        val = meta[key]
        if isinstance(val, tuple):
            val = list(val)
        lines.append(f"# {key}={json.dumps(val, sort_keys=True)}")
    return lines


def convergence_csv(report: ConvergenceReport, meta: dict) -> str:
    buf = io.StringIO()
    for line in _meta_lines(meta):
        buf.write(line + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in report.rows:
        vals = []
        for c, v in zip(COLUMNS, r.table_values()):
            if c == "N":
                vals.append(str(v))
            elif c.startswith("eoc"):
                vals.append(f"{v:.3f}")
            else:
                vals.append(_fmt(v))
        w.writerow(vals)
    return buf.getvalue()


def convergence_latex(report: ConvergenceReport) -> str:
    lines = []
    for r in report.rows:
        cells = [str(r.N)]
        for c in COLUMNS[1:]:
            v = getattr(r, c)
            cells.append(f"{v:.3f}" if c.startswith("eoc") else f"{v:.6e}")
        lines.append(" & ".join(cells) + r" \\")
    return "\n".join(lines) + "\n"


def plot_data_csv(report: ConvergenceReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["norm", "log_h", "log_err"])
    for name in ("err_u_LinfL2", "err_u_LinfdG", "err_v_LinfL2", "err_v_L2dG"):
        for r in report.rows:
            e = getattr(r, name)
            if r.failed or not e > 0:
                continue
            w.writerow([name, f"{math.log(r.h):.10e}", f"{math.log(e):.10e}"])
    return buf.getvalue()


def read_table(path_or_text: str) -> tuple[dict, list[dict]]:
    """Parse a file written by this tool into (metadata, rows).

    Accepts a path or the text itself. Numeric cells become int or float.
    """
    if "\n" in path_or_text or not os.path.exists(path_or_text):
        text = path_or_text
    else:
        with open(path_or_text, encoding="utf-8") as fh:
            text = fh.read()
    meta, body = {}, []
    for line in text.splitlines():
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            meta[key] = json.loads(val) if val else None
        elif line.strip():
            body.append(line)
    rows = []
    for rec in csv.DictReader(body):
        row = {}
        for k, v in rec.items():
            try:
                row[k] = int(v)
            except ValueError:
                try:
                    row[k] = float(v)
                except ValueError:
                    row[k] = v
        rows.append(row)
    return meta, rows


def _companion(path: str | None, suffix: str) -> str:
    base = path if path else "dged_converge.csv"
    stem, _ = os.path.splitext(base)
    return stem + suffix


def _emit(text: str, path: str | None, stdout) -> None:
    if path is None:
        stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_converge(cfg: RunConfig, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    p = cfg.params()
    t0 = time.perf_counter()
    report = run_convergence_study(
        p, cfg.N_list, cfg.T, cfg.dt,
        progress=lambda r: print(f"N={r.N} done{' (FAILED)' if r.failed else ''}", file=stderr),
    )
    meta = {"config": cfg.echo(), "version": __version__, **{f"study.{k}": v for k, v in report.metadata.items()}}
    if cfg.timing:
        meta["wall_time_s"] = round(time.perf_counter() - t0, 3)
    _emit(convergence_csv(report, meta), cfg.output, stdout)
    if cfg.plot_data:
        _emit(plot_data_csv(report), _companion(cfg.output, ".plot.csv"), stdout)
    if cfg.latex:
        _emit(convergence_latex(report), _companion(cfg.output, ".tex"), stdout)
    for r in report.rows:
        if r.failed:
            print(f"level N={r.N} failed: {r.message}", file=stderr)
    return EXIT_NUMERICAL if report.failed else EXIT_OK


EVOLVE_COLUMNS = ("t", "energy", "dissipation_integral", "eta_R_vs_exact", "mean_u", "mean_v")


def _evolve_setup(cfg: RunConfig, p: ModelParams):
    """Mesh, initial state and (if one applies) the exact solution."""
    if cfg.boundary == BoundaryMode.NATURAL:
        ex = tanh_steady_state(p)
        mesh = build_mesh(ex.left, ex.right, cfg.N, 0.0, BoundaryMode.NATURAL, seed=cfg.seed)
        f0 = ex.at(0.0)
        eps = cfg.perturb
        z0 = State.project(f0.u, lambda x: f0.v(x) + eps * (1.0 - x * x), mesh, p.degree)
        return mesh, z0, (ex if eps == 0 else None)
    mesh = build_mesh(0.0, 1.0, cfg.N, 0.0, BoundaryMode.PERIODIC, seed=cfg.seed)
    amp = 0.3 + cfg.perturb
    z0 = State.project(
        lambda x: 0.5 * np.sin(2 * np.pi * x), lambda x: amp * np.cos(2 * np.pi * x), mesh, p.degree
    )
    return mesh, z0, None


def cmd_evolve(cfg: RunConfig, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    p = cfg.params()
    mesh, z0, ex = _evolve_setup(cfg, p)
    dt = min(mesh.h**2, cfg.T) if cfg.dt is None else cfg.dt
    d = discretisation(mesh, p)
    ref = None
    if ex is not None:
        fT = ex.at(0.0)
        ref = State(0.0, riesz_projection(fT.u, fT.d2u, mesh, p.degree, p.penalty, dw=fT.du), DgFunction(mesh, p.degree))
    samples = []
    hist = {"acc": 0.0, "last": None}

    def observe(z: State):
        rate = 0.25 * p.mu * float(np.sum(d.mass * (d.Gm @ z.v.vector) ** 2))
        if hist["last"] is not None:
            t_prev, r_prev = hist["last"]
            hist["acc"] += 0.5 * (z.time - t_prev) * (r_prev + rate)
        hist["last"] = (z.time, rate)
        eta = math.nan
        if ref is not None:
            eta = reduced_relative_entropy(z, State(z.time, ref.u, ref.v), hist["acc"], p)
        samples.append((z.time, eta, z.u.mean(), z.v.mean()))

    t0 = time.perf_counter()
    try:
        _, elog = evolve(z0, cfg.T, dt, p, record_every=None, observer=observe)
    except (NewtonDivergence, LinearSolveError) as exc:
        when = getattr(exc, "time", None)
        print(f"solver failure{'' if when is None else f' at t={when:.6e}'}: {exc}", file=stderr)
        return EXIT_NUMERICAL
    cols = [c for c in EVOLVE_COLUMNS if ref is not None or c != "eta_R_vs_exact"]
    meta = {"config": cfg.echo(), "version": __version__, "dt": dt, "steps": len(elog.times) - 1}
    if cfg.timing:
        meta["wall_time_s"] = round(time.perf_counter() - t0, 3)
    buf = io.StringIO()
    for line in _meta_lines(meta):
        buf.write(line + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for (t, eta, mu_, mv), E, D in zip(samples, elog.energy, elog.dissipation_integral):
        rec = {"t": t, "energy": E, "dissipation_integral": D, "eta_R_vs_exact": eta, "mean_u": mu_, "mean_v": mv}
        w.writerow([f"{rec[c]:.12e}" for c in cols])
    _emit(buf.getvalue(), cfg.output, stdout)
    return EXIT_OK


def cmd_props(cfg: RunConfig, stdout=None, stderr=None) -> int:
    from .properties import run_all

    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    results = run_all(sigma=cfg.sigma, seed=cfg.seed)
    lines = [r.line() for r in results]
    if cfg.timing:
        lines = [f"{r.line()}  [{r.seconds:.1f}s]" for r in results]
    _emit("\n".join(lines) + "\n", cfg.output, stdout)
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"first failing property: {failed[0].name}", file=stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


COMMANDS = {Command.CONVERGE: cmd_converge, Command.EVOLVE: cmd_evolve, Command.PROPS: cmd_props}


def main(argv: Sequence[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = parse_config(argv)
    except UsageError as exc:
        print(f"dged: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        return COMMANDS[cfg.subcommand](cfg)
    except (ValueError, OSError) as exc:
        print(f"dged: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
