"""
Command-line entry point: configuration files, metrics and trajectory output,
and the scaling and load-balance benchmarks.

A run is `parse config -> generate scenario -> run_parallel -> write outputs`.
Configuration errors exit with status 2, instabilities with 3 and worker
failures with 4.
"""

import argparse
import csv
import logging
import math
import re
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np

from app.balance import CellLoad, LoadTraceWriter, build_tree, imbalance, run_parallel, uniform_tree
from app.exceptions import (
    ConfigParseError,
    ConfigurationError,
    EngineError,
    InstabilityError,
    WorkerFailureError,
)
from app.integrate import SerialEngine, StepMetrics
from app.model import MoleculeBlock, SimConfig, format_checkpoint, load_species_file
from app.scenarios import ScenarioSpec, builtin_species, generate
from app.units import UnitSystem, to_internal

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INSTABILITY = 3
EXIT_WORKER = 4
WARMUP_STEPS = 10


# -----------------------------------------------------------------------------------
# Configuration files
# -----------------------------------------------------------------------------------

def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected true or false, got '{text}'")


def _floats(text: str) -> Tuple[float, ...]:
    values = tuple(float(x) for x in text.replace(",", " ").split())
    if len(values) == 1:
        return values * 3
    if len(values) != 3:
        raise ValueError(f"expected one or three numbers, got {len(values)}")
    return values


def _choice(*options: str) -> Callable[[str], str]:
    def convert(text: str) -> str:
        value = text.strip()
        if value not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got '{value}'")
        return value
    return convert


@dataclass(frozen=True)
class ConfigKey:
    """One entry of the key table: converter, unit dimension and default."""

    name: str
    convert: Callable[[str], object]
    dimension: Optional[str] = None
    default: object = None
    required: bool = False
    help: str = ""


CONFIG_KEYS: Tuple[ConfigKey, ...] = (
    ConfigKey("simulation.units", _choice("reduced", "atomic"), default="reduced",
              help="reduced: values are internal units; atomic: SI-facing values converted at parse time"),
    ConfigKey("simulation.cutoff", float, "length", required=True, help="cut-off radius rc"),
    ConfigKey("simulation.timestep", float, "time", help="time step (default 0.002 reduced, 2 fs atomic)"),
    ConfigKey("simulation.steps", int, default=0, help="number of time steps"),
    ConfigKey("simulation.ensemble", _choice("NVE", "NVT"), default="NVE", help="NVE or NVT"),
    ConfigKey("simulation.temperature", float, "temperature", help="thermostat target temperature"),
    ConfigKey("simulation.thermostat_interval", int, default=1, help="rescale every k steps"),
    ConfigKey("simulation.long_range", _choice("none", "lj_tail", "lj_tail+reaction_field"),
              help="long-range corrections (default depends on the scenario)"),
    ConfigKey("simulation.eps_rf", float, default=math.inf, help="reaction-field dielectric constant"),
    ConfigKey("simulation.lj_shifted", _bool, help="truncated-shifted LJ (default depends on the scenario)"),
    ConfigKey("simulation.seed", int, default=0, help="random seed of the scenario generator"),
    ConfigKey("scenario.kind", _choice("homogeneous", "droplet", "planar_interface", "lattice"),
              default="homogeneous", help="initial configuration"),
    ConfigKey("scenario.n", int, help="target molecule count (homogeneous, lattice)"),
    ConfigKey("scenario.density", float, "density", help="number density (homogeneous, lattice)"),
    ConfigKey("scenario.box", _floats, "length", help="box edges, one or three numbers"),
    ConfigKey("scenario.temperature", float, "temperature", help="initial temperature"),
    ConfigKey("scenario.species", _choice("lj", "ethylene_oxide"), default="lj", help="built-in species"),
    ConfigKey("scenario.species_file", str, help="species file; overrides scenario.species"),
    ConfigKey("scenario.species_id", int, default=0, help="species of the generated molecules"),
    ConfigKey("scenario.lattice", _choice("sc", "fcc"), default="sc", help="lattice of the generator"),
    ConfigKey("scenario.radius", float, "length", help="droplet radius"),
    ConfigKey("scenario.offset", float, default=0.05, help="droplet centre offset, fraction of the box"),
    ConfigKey("scenario.liquid_density", float, "density", help="liquid initialisation density"),
    ConfigKey("scenario.vapor_density", float, "density", help="vapour initialisation density"),
    ConfigKey("scenario.slab_thickness", float, "length", help="liquid slab thickness"),
    ConfigKey("cells.adaptive", _bool, default=False, help="subdivide dense cells"),
    ConfigKey("cells.subdivision_threshold", int, default=8, help="molecules per cell that trigger subdivision"),
    ConfigKey("balance.workers", int, default=1, help="number of worker threads"),
    ConfigKey("balance.decomposition", _choice("kdtree", "uniform"), default="kdtree",
              help="k-d tree or uniform-volume decomposition"),
    ConfigKey("balance.axis_policy", _choice("alternate", "longest"), default="alternate",
              help="split axis order"),
    ConfigKey("balance.rebalance_interval", int, default=100, help="rebuild the k-d tree every k steps"),
    ConfigKey("output.dir", str, default="out", help="output directory"),
    ConfigKey("output.trajectory_interval", int, default=0, help="trajectory frame every k steps, 0 = off"),
    ConfigKey("output.load_trace", _bool, default=True, help="write loadtrace.csv"),
    ConfigKey("output.timing", _bool, default=True, help="record wall_ms; false writes 0 for byte-stable output"),
)
KEY_TABLE: Dict[str, ConfigKey] = {key.name: key for key in CONFIG_KEYS}
ETA_KEY = re.compile(r"^mixing\.eta\.(\d+)\.(\d+)$")
KEY_PATTERN = re.compile(r"^[A-Za-z_]\w*(\.\w+)*$")


@dataclass(frozen=True)
class RawEntry:
    value: str
    lineno: int


def parse_config_text(text: str) -> Dict[str, RawEntry]:
    """
    Splits `key = value` lines; `#` starts a comment anywhere on a line.

    **Raises:**
    - `ConfigParseError`: for a line without `=`, a malformed or repeated key.
    """
    entries: Dict[str, RawEntry] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        key, sep, value = content.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigParseError(f"expected 'key = value', got '{content}'", lineno)
        if not KEY_PATTERN.match(key):
            raise ConfigParseError(f"malformed key '{key}'", lineno, key)
        if key in entries:
            raise ConfigParseError(f"key '{key}' repeated (first on line {entries[key].lineno})", lineno, key)
        entries[key] = RawEntry(value.strip(), lineno)
    return entries


@dataclass(frozen=True)
class RunConfig:
    """
    A fully resolved configuration file: the scenario, the run options that go
    into `SimConfig`, and output settings.
    """

    scenario: ScenarioSpec
    rc: float
    dt: float
    run: Dict[str, object] = field(default_factory=dict)
    eta: Dict[Tuple[int, int], float] = field(default_factory=dict)
    units: UnitSystem = field(default_factory=UnitSystem.reduced_lj)
    out_dir: Path = Path("out")
    load_trace: bool = True
    timing: bool = True

    def build(self) -> Tuple[SimConfig, MoleculeBlock]:
        """Generates the initial molecules and the matching `SimConfig`."""
        return generate(self.scenario, rc=self.rc, dt=self.dt, **self.run)

    def with_overrides(self, steps: Optional[int] = None, workers: Optional[int] = None,
                       seed: Optional[int] = None, out_dir: Optional[Union[str, Path]] = None) -> "RunConfig":
        run = dict(self.run)
        if steps is not None:
            run["n_steps"] = steps
        if workers is not None:
            run["workers"] = workers
        scenario = self.scenario if seed is None else replace(self.scenario, seed=seed)
        if seed is not None:
            run["seed"] = seed
        return replace(self, scenario=scenario, run=run,
                       out_dir=Path(out_dir) if out_dir is not None else self.out_dir)


def _convert(entries: Dict[str, RawEntry], units: UnitSystem) -> Dict[str, object]:
    values: Dict[str, object] = {}
    for key in CONFIG_KEYS:
        entry = entries.get(key.name)
        if entry is None:
            if key.required:
                raise ConfigParseError(f"missing required key '{key.name}'", key=key.name)
            values[key.name] = key.default
            continue
        try:
            value = key.convert(entry.value)
            if key.dimension is not None and not units.reduced:
                if isinstance(value, tuple):
                    value = tuple(to_internal(v, key.dimension, units) for v in value)
                else:
                    value = to_internal(value, key.dimension, units)
        except ValueError as error:
            raise ConfigParseError(f"bad value for '{key.name}': {error}", entry.lineno, key.name) from error
        values[key.name] = value
    return values


def _eta(entries: Dict[str, RawEntry]) -> Dict[Tuple[int, int], float]:
    eta = {}
    for name, entry in entries.items():
        match = ETA_KEY.match(name)
        if match is None:
            continue
        try:
            eta[(int(match.group(1)), int(match.group(2)))] = float(entry.value)
        except ValueError as error:
            raise ConfigParseError(f"bad value for '{name}': {error}", entry.lineno, name) from error
    return eta


def resolve_config(entries: Dict[str, RawEntry], base_dir: Path = Path(".")) -> RunConfig:
    """
    Turns parsed entries into a `RunConfig`.

    **Raises:**
    - `ConfigParseError`: for unknown keys, missing required keys and bad values.
    - `ConfigurationError`: for inconsistent combinations.
    """
    for name, entry in entries.items():
        if name not in KEY_TABLE and not ETA_KEY.match(name):
            raise ConfigParseError(f"unknown key '{name}'", entry.lineno, name)
    units_entry = entries.get("simulation.units")
    units = UnitSystem.atomic() if units_entry and units_entry.value.strip() == "atomic" else UnitSystem.reduced_lj()
    v = _convert(entries, units)

    if v["scenario.species_file"] is not None:
        species = load_species_file(base_dir / str(v["scenario.species_file"]))
    else:
        species = (builtin_species(str(v["scenario.species"])),)
    default_temperature = 0.95 if units.reduced else to_internal(375.0, "temperature", units)
    temperature = v["scenario.temperature"]
    if temperature is None:
        temperature = v["simulation.temperature"] if v["simulation.temperature"] is not None else default_temperature
    optional = {
        "n": v["scenario.n"],
        "density": v["scenario.density"],
        "box": v["scenario.box"],
        "radius": v["scenario.radius"],
        "liquid_density": v["scenario.liquid_density"],
        "vapor_density": v["scenario.vapor_density"],
        "slab_thickness": v["scenario.slab_thickness"],
    }
    scenario = ScenarioSpec(
        kind=v["scenario.kind"],
        temperature=temperature,
        species=species,
        species_id=v["scenario.species_id"],
        lattice=v["scenario.lattice"],
        offset=v["scenario.offset"],
        seed=v["simulation.seed"],
        **{k: value for k, value in optional.items() if value is not None},
    )
    dt = v["simulation.timestep"]
    if dt is None:
        dt = 0.002 if units.reduced else to_internal(2.0e-15, "time", units)
    run: Dict[str, object] = {
        "n_steps": v["simulation.steps"],
        "ensemble": v["simulation.ensemble"],
        "target_T": v["simulation.temperature"],
        "thermostat_interval": v["simulation.thermostat_interval"],
        "eps_rf": v["simulation.eps_rf"],
        "seed": v["simulation.seed"],
        "adaptive_cells": v["cells.adaptive"],
        "subdivision_threshold": v["cells.subdivision_threshold"],
        "workers": v["balance.workers"],
        "decomposition": v["balance.decomposition"],
        "axis_policy": v["balance.axis_policy"],
        "rebalance_interval": v["balance.rebalance_interval"],
        "trajectory_interval": v["output.trajectory_interval"],
    }
    for name, target in (("simulation.long_range", "long_range"), ("simulation.lj_shifted", "lj_shifted")):
        if v[name] is not None:
            run[target] = v[name]
    return RunConfig(
        scenario=scenario,
        rc=v["simulation.cutoff"],
        dt=dt,
        run=run,
        eta=_eta(entries),
        units=units,
        out_dir=Path(str(v["output.dir"])),
        load_trace=v["output.load_trace"],
        timing=v["output.timing"],
    )


def load_config(path: Union[str, Path]) -> RunConfig:
    """Reads and resolves a configuration file; species files are relative to it."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as error:
        raise ConfigurationError(f"cannot read config file {path}: {error.strerror}") from error
    return resolve_config(parse_config_text(text), base_dir=path.parent)


# -----------------------------------------------------------------------------------
# Output files
# -----------------------------------------------------------------------------------

METRICS_HEADER = (
    "step", "time", "E_kin", "E_pot", "E_corr", "E_total", "T", "P", "N",
    "distances", "pairs", "hit_rate", "cost_max", "cost_mean", "wall_ms",
)


@dataclass(frozen=True)
class MetricsRow:
    """One line of metrics.csv; E_total = E_kin + E_pot + E_corr."""

    step: int
    time: float
    E_kin: float
    E_pot: float
    E_corr: float
    E_total: float
    T: float
    P: float
    N: int
    distances: int
    pairs: int
    hit_rate: float
    cost_max: float
    cost_mean: float
    wall_ms: float

    @classmethod
    def from_metrics(cls, m: StepMetrics, timing: bool = True) -> "MetricsRow":
        return cls(m.step, m.time, m.kinetic, m.potential, m.correction, m.total, m.temperature,
                   m.pressure, m.molecules, m.distances_computed, m.pairs_within_cutoff, m.hit_rate,
                   m.cost_max, m.cost_mean, m.wall_ms if timing else 0.0)


def _format(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return "%.17g" % value


class MetricsWriter:
    """CSV writer for metrics rows; numbers use %.17g so they round-trip exactly."""

    def __init__(self, stream: TextIO) -> None:
        self._writer = csv.writer(stream, lineterminator="\n")
        self._writer.writerow(METRICS_HEADER)

    def write(self, row: MetricsRow) -> None:
        self._writer.writerow([_format(getattr(row, name)) for name in METRICS_HEADER])


def read_metrics(path: Union[str, Path]) -> List[MetricsRow]:
    integer = {f.name for f in fields(MetricsRow) if f.type in (int, "int")}
    with Path(path).open(newline="", encoding="utf-8") as handle:
        return [MetricsRow(**{k: int(v) if k in integer else float(v) for k, v in record.items()})
                for record in csv.DictReader(handle)]


class TrajectoryWriter:
    """Appends checkpoint-format frames to one text file."""

    def __init__(self, stream: TextIO, config: SimConfig) -> None:
        self._stream = stream
        self._config = config

    def write(self, step: int, block: MoleculeBlock) -> None:
        self._stream.write(format_checkpoint(self._config.box, step, self._config.species, block))


# -----------------------------------------------------------------------------------
# Commands
# -----------------------------------------------------------------------------------

@dataclass
class RunSummary:
    steps: int
    molecules: int
    out_dir: Path
    critical_path_s: float
    wall_s: float
    final: Optional[MetricsRow]


def run(config: RunConfig) -> RunSummary:
    """
    Generates the scenario, runs it and writes metrics.csv, trajectory.txt (when
    enabled) and loadtrace.csv (when enabled) into `config.out_dir`.
    """
    sim, block = config.build()
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    last: List[MetricsRow] = []
    with (out / "metrics.csv").open("w", newline="", encoding="utf-8") as metrics_file:
        metrics = MetricsWriter(metrics_file)
        trajectory_file = (out / "trajectory.txt").open("w", encoding="utf-8") if sim.trajectory_interval else None
        trace = LoadTraceWriter(out / "loadtrace.csv") if config.load_trace else None
        trajectory = TrajectoryWriter(trajectory_file, sim) if trajectory_file is not None else None

        def on_step(step_metrics: StepMetrics, snapshot: Optional[MoleculeBlock]) -> None:
            row = MetricsRow.from_metrics(step_metrics, config.timing)
            metrics.write(row)
            last[:] = [row]
            if trajectory is not None and snapshot is not None:
                trajectory.write(step_metrics.step, snapshot)

        try:
            result = run_parallel(sim, block, eta=config.eta, on_step=on_step, load_trace=trace)
        finally:
            if trace is not None:
                trace.close()
            if trajectory_file is not None:
                trajectory_file.close()
    return RunSummary(sim.n_steps, len(result.block), out, result.critical_path_s, result.wall_s,
                      last[0] if last else None)


@dataclass(frozen=True)
class ScalingPoint:
    molecules: int
    step_s: float

    @property
    def per_molecule_s(self) -> float:
        return self.step_s / self.molecules


def time_serial(sim: SimConfig, block: MoleculeBlock, steps: int, eta=None,
                warmup: int = WARMUP_STEPS) -> float:
    """Mean wall time per step of the serial engine, warmup steps discarded."""
    engine = SerialEngine(sim, block, eta)
    engine.prepare()
    timings = []
    for k in range(warmup + steps):
        started = time.perf_counter()
        engine.step()
        if k >= warmup:
            timings.append(time.perf_counter() - started)
    return float(np.mean(timings))


def bench_scaling(config: RunConfig, sizes: Sequence[int], steps: int = 10,
                  warmup: int = WARMUP_STEPS) -> List[ScalingPoint]:
    """
    Per-molecule step time of the serial engine for each molecule count.

    **Raises:**
    - `ConfigurationError`: for a non-homogeneous scenario, an empty size list,
      a size below 1 or fewer than 1 measured step.
    """
    if config.scenario.kind not in ("homogeneous", "lattice"):
        raise ConfigurationError(f"scaling benchmark needs a homogeneous scenario, got '{config.scenario.kind}'")
    if not sizes or min(sizes) < 1:
        raise ConfigurationError(f"molecule counts must be >= 1, got {list(sizes)}")
    if steps < 1:
        raise ConfigurationError("need at least one measured step")
    points = []
    for n in sizes:
        scenario = replace(config.scenario, n=int(n), box=None)
        sim, block = replace(config, scenario=scenario).build()
        step_s = time_serial(sim, block, steps, config.eta, warmup)
        points.append(ScalingPoint(len(block), step_s))
        logger.info("N = %d: %.3g s per step, %.3g us per molecule", len(block), step_s,
                    1e6 * step_s / len(block))
    return points


@dataclass(frozen=True)
class BalanceResult:
    decomposition: str
    load_ratio: float
    critical_path_s: float
    wall_s: float


@dataclass(frozen=True)
class BalanceReport:
    workers: int
    results: Tuple[BalanceResult, ...]
    serial_s: float

    def get(self, decomposition: str) -> BalanceResult:
        return next(r for r in self.results if r.decomposition == decomposition)

    @property
    def speedup(self) -> float:
        """Uniform critical path over k-d critical path."""
        return self.get("uniform").critical_path_s / self.get("kdtree").critical_path_s

    @property
    def critical_path_ratio(self) -> float:
        """k-d critical path as a fraction of the uniform one; the stand-in for the wall-time ratio."""
        return self.get("kdtree").critical_path_s / self.get("uniform").critical_path_s

    @property
    def wall_ratio(self) -> float:
        # threads share the GIL, so this stays near 1 whatever the decomposition
        return self.get("kdtree").wall_s / self.get("uniform").wall_s


def bench_balance(config: RunConfig, workers: int, steps: int = 200, rebalance_interval: int = 100) -> BalanceReport:
    """
    Runs the scenario with a uniform-volume and a k-d tree decomposition and
    reports estimated max/mean load and critical path of both, plus the serial
    engine time of the same run.
    """
    sim, block = config.build()
    load = CellLoad.from_positions(sim.box_array, sim.rc, block.r)
    trees = {
        "uniform": uniform_tree(load.counts.shape, workers, sim.axis_policy),
        "kdtree": build_tree(load.costs, workers, sim.axis_policy),
    }
    results = []
    for name, tree in trees.items():
        run_config = replace(sim, workers=workers, decomposition=name, n_steps=steps,
                             rebalance_interval=rebalance_interval, trajectory_interval=0)
        outcome = run_parallel(run_config, block, eta=config.eta)
        results.append(BalanceResult(name, imbalance(tree, load.costs), outcome.critical_path_s, outcome.wall_s))
        logger.info("%s: max/mean load %.3f, critical path %.3f s", name, results[-1].load_ratio,
                    outcome.critical_path_s)
    serial_s = time_serial(replace(sim, n_steps=steps), block.copy(), steps, config.eta, warmup=0) * steps
    return BalanceReport(workers, tuple(results), serial_s)


def describe(config: RunConfig, sim: SimConfig, molecules: int) -> List[str]:
    """Resolved settings as `key = value` lines."""
    lines = [f"units = {'reduced' if config.units.reduced else 'atomic'}",
             f"scenario.kind = {config.scenario.kind}",
             f"molecules = {molecules}"]
    for name, value in asdict(sim).items():
        if name == "species":
            value = ", ".join(sp["name"] for sp in value)
        lines.append(f"{name} = {value}")
    lines.append(f"output.dir = {config.out_dir}")
    return lines


# -----------------------------------------------------------------------------------
# CLI
# -----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="main.py", description="Rigid-molecule MD engine")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    commands = parser.add_subparsers(dest="command", required=True)

    run_cmd = commands.add_parser("run", help="run a simulation")
    run_cmd.add_argument("config", help="config file")
    run_cmd.add_argument("--steps", type=int, help="override simulation.steps")
    run_cmd.add_argument("--workers", type=int, help="override balance.workers")
    run_cmd.add_argument("--seed", type=int, help="override simulation.seed")
    run_cmd.add_argument("--out", help="override output.dir")

    scaling = commands.add_parser("bench-scaling", help="per-molecule step time against N")
    scaling.add_argument("config", help="config file of a homogeneous scenario")
    scaling.add_argument("--sizes", default="4000,32000,256000", help="comma-separated molecule counts")
    scaling.add_argument("--steps", type=int, default=10, help="measured steps per size")

    balance = commands.add_parser("bench-balance", help="uniform against k-d tree decomposition")
    balance.add_argument("config", help="config file of a heterogeneous scenario")
    balance.add_argument("--workers", type=int, default=8, help="number of workers")
    balance.add_argument("--steps", type=int, default=200, help="steps per run")

    check = commands.add_parser("check", help="validate a config file")
    check.add_argument("config", help="config file")
    return parser


def _sizes(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as error:
        raise ConfigurationError(f"bad --sizes value '{text}'") from error


def _command(args: argparse.Namespace) -> None:
    config = load_config(args.config)
    if args.command == "run":
        config = config.with_overrides(args.steps, args.workers, args.seed, args.out)
        summary = run(config)
        print(f"{summary.steps} steps, {summary.molecules} molecules -> {summary.out_dir}")
        if summary.final is not None:
            print(f"final E_total = {summary.final.E_total:.10g}, T = {summary.final.T:.6g}")
        print(f"critical path {summary.critical_path_s:.3f} s, wall {summary.wall_s:.3f} s")
    elif args.command == "bench-scaling":
        print("N,step_s,per_molecule_us")
        for point in bench_scaling(config, _sizes(args.sizes), args.steps):
            print(f"{point.molecules},{point.step_s:.6g},{1e6 * point.per_molecule_s:.6g}")
    elif args.command == "bench-balance":
        report = bench_balance(config, args.workers, args.steps)
        print("decomposition,load_ratio,critical_path_s,wall_s")
        for result in report.results:
            print(f"{result.decomposition},{result.load_ratio:.4f},{result.critical_path_s:.4f},{result.wall_s:.4f}")
        print(f"serial,,{report.serial_s:.4f},")
        print(f"speedup {report.speedup:.3f}")
        print(f"kdtree/uniform critical path {report.critical_path_ratio:.3f}, wall {report.wall_ratio:.3f}")
    else:
        sim, block = config.build()
        for line in describe(config, sim, len(block)):
            print(line)
        print("config OK")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parses the command line, runs the command and returns the exit status."""
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        _command(args)
    except ConfigurationError as error:
        print(f"configuration error: {error}", file=sys.stderr)
        return EXIT_CONFIG
    except InstabilityError as error:
        print(f"simulation became unstable: {error}", file=sys.stderr)
        return EXIT_INSTABILITY
    except WorkerFailureError as error:
        print(f"worker failure: {error}", file=sys.stderr)
        return EXIT_WORKER
    except EngineError as error:
        print(f"error: {error}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK
