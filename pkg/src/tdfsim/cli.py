"""Command-line front end.

    tdfsim simulate  --config run.json
    tdfsim verify    --config run.json --tol 1e-9
    tdfsim reproduce --figure fig2a --outdir out/

Exit codes: 0 success / verdict true, 1 verdict false, 2 usage or config
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import TdfsError
from .lindblad import IntegratorConfig, Trajectory, evaluate, integrate
from .models import ControlMode, ModelBundle, Transition, default_dt, five_level_model, xi_model
from .tdfs import DEFAULT_TOL, verify_tdfs

log = logging.getLogger("tdfsim")

EXIT_OK, EXIT_VERDICT_FALSE, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3

_MODE_ALIASES = {
    "none": "none",
    "nocontrol": "none",
    "paper": "paper",
    "paperprinted": "paper",
    "synthesized": "synthesized",
}

_DEFAULT_ROWS = 2000


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Parsed experiment description; see README for the JSON schema."""

    model: str = "xi"
    mode: str = "synthesized"
    r: float = 1.0
    r1: float = 1.0
    r2: float = 1.0
    omega0: float = 1.0
    gamma: float = 1.0
    gamma1: float = 1.0
    gamma2: float = 1.0
    Omega: float = 1.0
    transition: str = "step"
    omega2_variant: str = "printed"
    freeze_fields: bool = False
    t_start: float = 0.0
    t_end: float = 4.0
    time_units: str = "omega0_t_over_pi"
    dt: float | None = None
    output_every: int | None = None
    grid_size: int = 200
    tol: float = DEFAULT_TOL
    csv: str | None = None
    report: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        d = dict(d)
        out = d.pop("output", {}) or {}
        if not isinstance(out, dict):
            raise ConfigError("'output' must be an object")
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.csv = out.get("csv", cfg.csv)
        cfg.report = out.get("report", cfg.report)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def validate(self) -> None:
        if self.model not in ("xi", "five_level"):
            raise ConfigError(f"model must be 'xi' or 'five_level', got {self.model!r}")
        mode = _MODE_ALIASES.get(str(self.mode).lower())
        if mode is None:
            raise ConfigError(f"unknown control mode {self.mode!r}")
        self.mode = mode
        if self.transition not in ("step", "always"):
            raise ConfigError("transition must be 'step' or 'always'")
        if self.time_units not in ("omega0_t_over_pi", "time"):
            raise ConfigError("time_units must be 'omega0_t_over_pi' or 'time'")
        nums = ("r", "r1", "r2", "omega0", "gamma", "gamma1", "gamma2", "Omega", "t_start", "t_end", "tol")
        for key in nums:
            val = getattr(self, key)
            if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
                raise ConfigError(f"{key} must be a finite number")
        if min(self.r, self.r1, self.r2) < 0:
            raise ConfigError("squeezing amplitudes must be non-negative")
        if min(self.gamma, self.gamma1, self.gamma2) <= 0:
            raise ConfigError("rates must be positive")
        if self.time_units == "omega0_t_over_pi" and self.omega0 == 0:
            raise ConfigError("omega0 = 0 needs time_units = 'time'")
        if self.model == "five_level" and self.omega0 <= 0:
            raise ConfigError("five-level model needs omega0 > 0")
        if not self.t_end > self.t_start:
            raise ConfigError(f"empty time span [{self.t_start}, {self.t_end}]")
        if self.dt is not None and not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.output_every is not None and self.output_every < 1:
            raise ConfigError("output_every must be >= 1")
        if self.grid_size < 1 or self.tol <= 0:
            raise ConfigError("grid_size and tol must be positive")
        for p in (self.csv, self.report):
            if p is not None and not Path(p).resolve().parent.is_dir():
                raise ConfigError(f"output directory for {p} does not exist")

    def span(self) -> tuple[float, float]:
        """Time span in model time units."""
        if self.time_units == "time":
            return float(self.t_start), float(self.t_end)
        scale = math.pi / self.omega0
        return self.t_start * scale, self.t_end * scale

    def echo(self) -> dict:
        return asdict(self)


def build_model(cfg: ExperimentConfig) -> ModelBundle:
    if cfg.model == "xi":
        return xi_model(cfg.r, cfg.omega0, cfg.gamma, ControlMode(cfg.mode), cfg.freeze_fields, cfg.tol)
    return five_level_model(
        cfg.r1, cfg.r2, cfg.omega0, cfg.gamma1, cfg.gamma2, cfg.Omega,
        Transition(cfg.transition), ControlMode(cfg.mode), cfg.omega2_variant, cfg.tol,
    )


def verification_grid(bundle: ModelBundle, t0: float, t1: float, n: int) -> np.ndarray:
    """Cell midpoints of a uniform grid; never lands on a breakpoint of the examples."""
    grid = t0 + (np.arange(n) + 0.5) * (t1 - t0) / n
    cuts = set(bundle.model.breakpoints) | set(bundle.subspace.breakpoints)
    return np.array([t for t in grid if t not in cuts])


def run_simulation(cfg: ExperimentConfig, bundle: ModelBundle | None = None) -> tuple[Trajectory, ModelBundle, float]:
    bundle = bundle or build_model(cfg)
    t0, t1 = cfg.span()
    dt = cfg.dt or default_dt(bundle.model, cfg.omega0, t0, t1)
    every = cfg.output_every or max(1, math.ceil((t1 - t0) / dt) // _DEFAULT_ROWS)
    traj = integrate(bundle.model, bundle.initial_state(t0), t0, t1, IntegratorConfig(dt, record_every=every))
    return traj, bundle, dt


def trajectory_table(traj: Trajectory, bundle: ModelBundle) -> dict[str, np.ndarray]:
    """Columns of the simulation CSV."""
    kets = evaluate(bundle.dark_kets, traj.times)
    pops = np.real(np.einsum("tik,tij,tjk->tk", kets.conj(), traj.states, kets))
    cols = {
        "t": traj.times,
        "omega0_t_over_pi": bundle.omega0 * traj.times / math.pi,
        "purity": traj.observables["purity"],
        "trace_dev": traj.observables["trace_dev"],
        "min_eig": traj.observables["min_eig"],
        "pop_DF1": pops[:, 0],
    }
    if bundle.name == "five_level":
        cols["pop_DF2"] = pops[:, 1]
    cols["pop_DFS_total"] = pops.sum(axis=1)
    return cols


def write_csv(path: str | Path, columns: dict[str, np.ndarray]) -> None:
    names = list(columns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in zip(*(columns[n] for n in names)):
            w.writerow([f"{float(v):.12g}" for v in row])


def _emit_json(obj: dict, path: str | None) -> None:
    text = json.dumps(obj, indent=2)
    if path is None:
        print(text)
    else:
        Path(path).write_text(text + "\n")


def cmd_simulate(cfg: ExperimentConfig) -> int:
    start = time.perf_counter()
    traj, bundle, dt = run_simulation(cfg)
    cols = trajectory_table(traj, bundle)
    csv_path = cfg.csv or "simulation.csv"
    write_csv(csv_path, cols)
    t0, t1 = cfg.span()
    dfs = verify_tdfs(bundle.model, bundle.subspace, verification_grid(bundle, t0, t1, cfg.grid_size), cfg.tol)
    report = {
        "config": cfg.echo(),
        "dt": dt,
        "rows": len(traj),
        "csv": str(csv_path),
        "dfs": dfs.summary(),
        "min_purity": float(cols["purity"].min()),
        "max_purity": float(cols["purity"].max()),
        "final_trace_dev": float(cols["trace_dev"][-1]),
        "wall_clock_s": time.perf_counter() - start,
    }
    _emit_json(report, cfg.report)
    return EXIT_OK


def cmd_verify(cfg: ExperimentConfig, tol: float | None = None) -> int:
    tol = cfg.tol if tol is None else tol
    bundle = build_model(cfg)
    t0, t1 = cfg.span()
    rep = verify_tdfs(bundle.model, bundle.subspace, verification_grid(bundle, t0, t1, cfg.grid_size), tol)
    _emit_json(rep.to_dict(), cfg.report)
    s = rep.summary()
    log.info(
        "verdict=%s eigen_residual=%.3g invariance_residual=%.3g",
        rep.verdict, s["max_eigen_residual"], s["max_invariance_residual"],
    )
    return EXIT_OK if rep.verdict else EXIT_VERDICT_FALSE


# ---------------------------------------------------------------------------
# figure reproduction

FIGURES = ("fig2a", "fig2b", "fig4a", "fig4b")

_GNUPLOT = """set datafile separator ','
set key autotitle columnhead
set xlabel '{xlabel}'
set ylabel '{ylabel}'
set terminal pngcairo size 800,500
set output '{name}.png'
plot {plots}
"""


def _figure_runs(figure: str) -> tuple[list[tuple[str, ExperimentConfig]], str]:
    if figure in ("fig2a", "fig2b"):
        w = 0.1 if figure == "fig2a" else 10.0
        base = dict(model="xi", r=1.0, gamma=1.0, omega0=w, t_start=0.0, t_end=4.0)
        runs = [
            ("controlled", ExperimentConfig(mode="synthesized", **base)),
            ("uncontrolled", ExperimentConfig(mode="none", **base)),
        ]
        return runs, "purity"
    base = dict(model="five_level", r1=1.0, r2=1.0, Omega=1.0, omega0=1.0, gamma1=1.0, gamma2=1.0,
                mode="synthesized", t_start=0.0, t_end=2.0)
    if figure == "fig4a":
        return [("step", ExperimentConfig(transition="step", **base))], "population"
    return [
        ("T_always", ExperimentConfig(transition="always", **base)),
        ("T_step", ExperimentConfig(transition="step", **base)),
    ], "purity"


def reproduce(figure: str, outdir: str | Path) -> dict[str, Path]:
    """Run the simulations behind one figure; write CSV data plus a gnuplot script."""
    if figure not in FIGURES:
        raise ConfigError(f"unknown figure {figure!r}; choose from {FIGURES}")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    runs, kind = _figure_runs(figure)
    written: dict[str, Path] = {}
    plots = []
    for label, cfg in runs:
        cfg.validate()
        traj, bundle, _ = run_simulation(cfg)
        cols = trajectory_table(traj, bundle)
        path = outdir / f"{figure}_{label}.csv"
        write_csv(path, cols)
        written[label] = path
        if kind == "purity":
            plots.append(f"'{path.name}' using 'omega0_t_over_pi':'purity' with lines title '{label}'")
        else:
            for col, title in (("pop_DF1", "P1"), ("pop_DF2", "P2"), ("pop_DFS_total", "P1+P2")):
                plots.append(f"'{path.name}' using 'omega0_t_over_pi':'{col}' with lines title '{title}'")
    script = outdir / f"{figure}.gp"
    script.write_text(
        _GNUPLOT.format(
            xlabel="omega_0 t / pi",
            ylabel="P(t)" if kind == "purity" else "population",
            name=figure,
            plots=", \\\n     ".join(plots),
        )
    )
    written["script"] = script
    return written


def cmd_reproduce(figure: str, outdir: str) -> int:
    written = reproduce(figure, outdir)
    for label, path in written.items():
        log.info("%s -> %s", label, path)
    return EXIT_OK


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tdfsim", description="Time-dependent decoherence-free subspace toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", help="integrate the master equation and write a CSV")
    s.add_argument("--config", required=True)
    s.add_argument("--csv", help="override the CSV output path")
    s.add_argument("--report", help="override the JSON report path")
    v = sub.add_parser("verify", help="check the t-DFS conditions on a time grid")
    v.add_argument("--config", required=True)
    v.add_argument("--tol", type=float)
    v.add_argument("--report", help="override the JSON report path")
    r = sub.add_parser("reproduce", help="regenerate the data behind a figure")
    r.add_argument("--figure", required=True, choices=FIGURES)
    r.add_argument("--outdir", required=True)
    return p


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "reproduce":
            return cmd_reproduce(args.figure, args.outdir)
        cfg = ExperimentConfig.load(args.config)
        if getattr(args, "csv", None):
            cfg.csv = args.csv
        if args.report:
            cfg.report = args.report
        cfg.validate()
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.tol is not None and not args.tol > 0:
            raise ConfigError("--tol must be positive")
        return cmd_verify(cfg, args.tol)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (TdfsError, ArithmeticError, np.linalg.LinAlgError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
