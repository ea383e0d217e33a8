"""Experiment grid runner, complexity table and plots.

A run directory holds one sub-directory per cell ``<kind>_n<j>_s<seed>``
with ``metrics.csv`` (MetricSeries), ``train_log.csv`` and a controller
checkpoint, plus ``summary.csv`` and ``manifest.json`` at the top. The
manifest carries everything needed to rerun the grid; rerunning it
reproduces ``summary.csv`` byte for byte.
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import io
import json
import os
import shutil
import tempfile
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import controllers, qnet, traffic
from .controllers import ControllerKind, MetricSeries
from .qnet import TrainSchedule
from .traffic import NetworkConfig

OUT_ENV = "FRIENDQ_OUT"
SUMMARY_COLUMNS = ("cell", "kind", "junctions", "seed", "episodes_to_convergence",
                   "final_mean_wait_s", "status")

# Short episodes with EW-heavy demand: fixed 40 s splits queue visibly without
# gridlock, and a learner has something to gain by favouring the busy axis.
DESK_NETWORK = {"sim_duration": 900.0, "arrival_rate": 0.06, "ew_demand_factor": 3.0}
DESK_SCHEDULE = {"learn_rate": 0.01, "gamma": 0.5}
# Table II scale: 5.5 h episodes and uniform demand on every entry road.
FULL_NETWORK = {"sim_duration": 19800.0, "arrival_rate": 0.05, "ew_demand_factor": 1.0}

# Comparative grid checked by the acceptance suite; the budget is set by the
# 30-minute single-CPU runtime cap, not by the outcome.
COMPARISON_GRID = {"kinds": ("fixed", "centralized", "independent", "friend"),
                   "junctions": (2, 3, 4), "seeds": (0, 1, 2), "episodes": 60}

# the paper grid has no independent learners at three junctions
SKIPPED_CELLS = {(ControllerKind.INDEPENDENT_DQN, 3)}


class SpecError(ValueError):
    """The experiment specification or config file is invalid."""


class NoResultsError(FileNotFoundError):
    pass


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "results"))


@dataclass
class ExperimentSpec:
    kinds: Sequence = ("fixed", "centralized", "independent", "friend")
    junctions: Sequence[int] = (2, 3, 4)
    episodes: int = 500
    seeds: Sequence[int] = (0,)
    out: Optional[Path] = None
    network: dict = field(default_factory=lambda: dict(DESK_NETWORK))
    schedule: dict = field(default_factory=lambda: dict(DESK_SCHEDULE))
    parallel: int = 1
    skip_paper_cells: bool = True

    def validate(self) -> "ExperimentSpec":
        if not self.kinds or not self.junctions or not self.seeds:
            raise SpecError("kinds, junctions and seeds must be non-empty")
        try:
            self.kinds = [ControllerKind.parse(k) for k in self.kinds]
        except ValueError as e:
            raise SpecError(str(e)) from None
        if len(set(self.kinds)) != len(self.kinds) or len(set(self.seeds)) != len(self.seeds):
            raise SpecError("duplicate kinds or seeds")
        if self.episodes < 1:
            raise SpecError("episodes must be >= 1")
        if self.parallel < 1:
            raise SpecError("parallel must be >= 1")
        self.junctions = [int(n) for n in self.junctions]
        self.seeds = [int(s) for s in self.seeds]
        try:
            for n in self.junctions:
                self.network_config(n)
            self.train_schedule()
        except (TypeError, ValueError, KeyError) as e:
            raise SpecError(str(e)) from None
        return self

    def network_config(self, n: int) -> NetworkConfig:
        kw = {k: v for k, v in self.network.items() if k not in ("junction_count", "roads")}
        if "durations" in kw:
            kw["durations"] = tuple(kw["durations"])
        return NetworkConfig(junction_count=n, **kw)

    def train_schedule(self) -> TrainSchedule:
        return TrainSchedule(**self.schedule)

    def cells(self) -> list[tuple]:
        """(kind, junctions, seed) in run order, and the skipped (kind, junctions)."""
        out, skipped = [], []
        for n in self.junctions:
            for k in self.kinds:
                if self.skip_paper_cells and (k, n) in SKIPPED_CELLS:
                    skipped.append((k, n))
                    continue
                out += [(k, n, s) for s in self.seeds]
        return out, skipped

    def to_dict(self) -> dict:
        return {
            "kinds": [ControllerKind.parse(k).value for k in self.kinds],
            "junctions": list(self.junctions),
            "episodes": self.episodes,
            "seeds": list(self.seeds),
            "network": _jsonable(self.network),
            "schedule": _jsonable(self.schedule),
            "skip_paper_cells": self.skip_paper_cells,
        }

    @classmethod
    def from_dict(cls, d: dict, **extra) -> "ExperimentSpec":
        keys = {"kinds", "junctions", "episodes", "seeds", "network", "schedule", "skip_paper_cells"}
        unknown = set(d) - keys - {"parallel", "out"}
        if unknown:
            raise SpecError(f"unknown experiment keys {sorted(unknown)}")
        kw = {k: d[k] for k in keys if k in d}
        kw.update(extra)
        return cls(**kw)


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(d.items())}


def cell_name(kind, junctions: int, seed: int) -> str:
    return f"{ControllerKind.parse(kind).value}_n{junctions}_s{seed}"


# ---------------------------------------------------------------- config files

_SCHEDULE_TYPES = {f.name: f.type for f in dataclasses.fields(TrainSchedule)}
_EXPERIMENT_KEYS = {"kinds", "junctions", "episodes", "seeds", "parallel"}


def _parse_schedule(sec) -> dict:
    out = {}
    for key, value in dict(sec).items():
        if key not in _SCHEDULE_TYPES:
            raise SpecError(f"unknown schedule key {key!r}")
        kind = str(_SCHEDULE_TYPES[key])
        if key == "hidden":
            out[key] = tuple(int(x) for x in value.replace(",", " ").split())
        elif "int" in kind:
            out[key] = None if value.strip().lower() == "none" else int(value)
        else:
            out[key] = float(value)
    return out


def _split(value: str) -> list[str]:
    return [x for x in value.replace(",", " ").split() if x]


def read_experiment_config(path) -> ExperimentSpec:
    """Build a spec from a key/value file with [network], [schedule], [experiment] sections.

    Unset keys take the desk profile, then the Table I/II defaults.
    """
    parser = configparser.ConfigParser()
    try:
        if not parser.read(path):
            raise SpecError(f"cannot read config {path}")
    except configparser.Error as e:
        raise SpecError(f"{path}: {e}") from None
    unknown = set(parser.sections()) - {"network", "schedule", "experiment"}
    if unknown:
        raise SpecError(f"unknown sections {sorted(unknown)}")
    try:
        net = dict(parser["network"]) if parser.has_section("network") else {}
        cfg = traffic.config_from_section(net)
        network = dict(DESK_NETWORK)
        network.update({k: getattr(cfg, k) for k in net})
        schedule = dict(DESK_SCHEDULE)
        if parser.has_section("schedule"):
            schedule.update(_parse_schedule(parser["schedule"]))
        kw: dict = {"network": network, "schedule": schedule}
        if "junction_count" in net:
            kw["junctions"] = [cfg.junction_count]
        if parser.has_section("experiment"):
            exp = dict(parser["experiment"])
            bad = set(exp) - _EXPERIMENT_KEYS
            if bad:
                raise SpecError(f"unknown experiment keys {sorted(bad)}")
            if "kinds" in exp:
                kw["kinds"] = _split(exp["kinds"])
            if "junctions" in exp:
                kw["junctions"] = [int(x) for x in _split(exp["junctions"])]
            if "seeds" in exp:
                kw["seeds"] = [int(x) for x in _split(exp["seeds"])]
            for key in ("episodes", "parallel"):
                if key in exp:
                    kw[key] = int(exp[key])
    except (KeyError, ValueError) as e:
        if isinstance(e, SpecError):
            raise
        raise SpecError(str(e).strip("'\"")) from None
    return ExperimentSpec(**kw)


def load_spec(path) -> ExperimentSpec:
    """Spec from an experiment config file or from a run's manifest.json."""
    path = Path(path)
    if path.suffix == ".json":
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise SpecError(f"cannot read manifest {path}: {e}") from None
        return ExperimentSpec.from_dict(data.get("spec", data))
    return read_experiment_config(path)


def validate_config(path) -> list[str]:
    """Problems with a config file (empty when it is valid)."""
    try:
        spec = load_spec(path)
        spec.validate()
        if spec.network.get("roads") is not None:
            for n in spec.junctions:
                traffic.NetworkConfig(junction_count=n, roads=spec.network["roads"])
    except (SpecError, ValueError, TypeError) as e:
        return [str(e)]
    return []


# ---------------------------------------------------------------- running


def _atomic_write(path: Path, data):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        if isinstance(data, bytes):
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
        else:
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def run_cell(spec_dict: dict, kind: str, n: int, seed: int, out: str) -> dict:
    """Train one cell and write its files; returns its summary row."""
    spec = ExperimentSpec.from_dict(spec_dict)
    name = cell_name(kind, n, seed)
    cell_dir = Path(out) / name
    row = {"cell": name, "kind": kind, "junctions": n, "seed": seed}
    try:
        log = qnet.TrainLog()
        ctrl, series = controllers.train(kind, spec.network_config(n), spec.train_schedule(),
                                         spec.episodes, seed=seed, train_log=log)
        cell_dir.mkdir(parents=True, exist_ok=True)
        with tempfile.TemporaryDirectory(dir=cell_dir) as tmp:
            tmp = Path(tmp)
            series.write_csv(tmp / "metrics.csv")
            log.write(tmp / "train_log.csv")
            if ctrl.networks():
                controllers.save_controller(ctrl, tmp / "checkpoint", seed)
                shutil.rmtree(cell_dir / "checkpoint", ignore_errors=True)
            for f in tmp.iterdir():
                os.replace(f, cell_dir / f.name)
        conv = controllers.episodes_to_convergence(series.mean_wait_s)
        row.update(episodes_to_convergence="none" if conv is None else conv,
                   final_mean_wait_s=repr(round(controllers.converged_mean_wait(series.mean_wait_s), 6)),
                   status="ok")
    except Exception as e:  # recorded, not fatal
        row.update(episodes_to_convergence="none", final_mean_wait_s="nan",
                   status=f"failed: {type(e).__name__}: {e}",
                   traceback=traceback.format_exc())
    return row


def _manifest_bytes(spec: ExperimentSpec, rows, skipped) -> bytes:
    from . import __version__

    manifest = {
        "spec": spec.to_dict(),
        "networks": {str(n): spec.network_config(n).to_dict() for n in spec.junctions},
        "schedule_resolved": dataclasses.asdict(spec.train_schedule()),
        "cells": [r["cell"] for r in rows],
        "skipped": [f"{k.value}_n{n}" for k, n in skipped],
        "failures": {r["cell"]: r["status"] for r in rows if r["status"] != "ok"},
        "numba": _numba_flag(),
        "version": __version__,
    }
    return (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode()


def _numba_flag() -> bool:
    from . import _accel

    return bool(_accel.USE_NUMBA)


@dataclass
class RunResult:
    out: Path
    rows: list
    skipped: list

    @property
    def failed(self) -> list:
        return [r for r in self.rows if r["status"] != "ok"]


def run_experiment(spec: ExperimentSpec, progress=None) -> RunResult:
    spec.validate()
    out = Path(spec.out) if spec.out is not None else default_out_root() / "run"
    out.mkdir(parents=True, exist_ok=True)
    cells, skipped = spec.cells()
    sd = spec.to_dict()
    jobs = [(sd, k.value, n, s, str(out)) for k, n, s in cells]
    if spec.parallel == 1 or len(jobs) == 1:
        rows = []
        for job in jobs:
            rows.append(run_cell(*job))
            if progress is not None:
                progress(rows[-1])
    else:
        with ProcessPoolExecutor(max_workers=spec.parallel) as pool:
            futures = [pool.submit(run_cell, *job) for job in jobs]
            rows = []
            for f in futures:
                rows.append(f.result())
                if progress is not None:
                    progress(rows[-1])
    _atomic_write(out / "summary.csv",
                  _csv_text(SUMMARY_COLUMNS, [[r[c] for c in SUMMARY_COLUMNS] for r in rows]))
    _atomic_write(out / "manifest.json", _manifest_bytes(spec, rows, skipped))
    for r in rows:
        if "traceback" in r:
            _atomic_write(out / r["cell"] / "error.txt", r["traceback"])
    return RunResult(out, rows, skipped)


def read_summary(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- complexity


@dataclass(frozen=True)
class ComplexityRow:
    junction_count: int
    centralized_actions: int
    friend_actions: int


def complexity_table(max_n: int, n_actions: int = 6) -> list[ComplexityRow]:
    """Joint-head width 6^n against the summed per-agent widths 6n."""
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    return [ComplexityRow(n, n_actions ** n, n_actions * n) for n in range(1, max_n + 1)]


# ---------------------------------------------------------------- plots


def _load_series(run_dir: Path) -> list[tuple]:
    found = []
    for path in sorted(run_dir.glob("*/metrics.csv")):
        name = path.parent.name
        try:
            kind, n, seed = name.rsplit("_", 2)
            kind = ControllerKind.parse(kind)
            n, seed = int(n.lstrip("n")), int(seed.lstrip("s"))
        except ValueError:
            raise ValueError(f"{path}: cell directory name {name!r} is not <kind>_n<j>_s<seed>") from None
        series = MetricSeries.read_csv(path)
        if not len(series):
            raise ValueError(f"{path}: no episodes")
        found.append((kind, n, seed, series))
    return found


def _with_provenance(svg: str, digest: str) -> str:
    head, sep, rest = svg.partition("?>")
    comment = f"\n<!-- provenance: manifest sha256 {digest} -->"
    return head + sep + comment + rest if sep else comment.lstrip() + "\n" + svg


def emit_plots(run_dir, max_n: Optional[int] = None) -> list[Path]:
    """Learning curves per junction count, the complexity chart, and tidy CSVs."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise NoResultsError(f"no results: {run_dir} is not a directory")
    found = _load_series(run_dir)
    if not found:
        raise NoResultsError(f"no results: no <cell>/metrics.csv under {run_dir}")
    manifest = run_dir / "manifest.json"
    digest = hashlib.sha256(manifest.read_bytes()).hexdigest() if manifest.exists() else "none"
    plt.rcParams["svg.hashsalt"] = digest  # stable element ids
    written = []

    tidy = [(n, k.value, seed, e, repr(w))
            for k, n, seed, s in found for e, w in zip(s.episode, s.mean_wait_s)]
    tidy_text = f"# manifest_sha256={digest}\n" + _csv_text(
        ("junctions", "kind", "seed", "episode", "mean_wait_s"), tidy)
    _atomic_write(run_dir / "learning_curves.csv", tidy_text)
    written.append(run_dir / "learning_curves.csv")

    order = list(ControllerKind)
    for n in sorted({f[1] for f in found}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for kind in order:
            runs = [s.mean_wait_s for k, m, _, s in found if k is kind and m == n]
            if not runs:
                continue
            length = min(len(r) for r in runs)
            mean = np.mean([r[:length] for r in runs], axis=0)
            ax.plot(np.arange(length), mean, label=f"{kind.value} ({len(runs)} seeds)")
        ax.set_xlabel("episode")
        ax.set_ylabel("mean waiting time (s)")
        ax.set_title(f"{n} junctions")
        ax.legend()
        written.append(_save_svg(fig, run_dir / f"learning_curves_n{n}.svg", digest))
        plt.close(fig)

    top = max(max_n or 0, 4, max(f[1] for f in found))
    rows = complexity_table(top)
    _atomic_write(run_dir / "complexity.csv", f"# manifest_sha256={digest}\n" + _csv_text(
        ("junction_count", "centralized_actions", "friend_actions"),
        [dataclasses.astuple(r) for r in rows]))
    written.append(run_dir / "complexity.csv")
    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.arange(len(rows))
    ax.bar(x - 0.2, [r.centralized_actions for r in rows], 0.4, label="centralized DQN")
    ax.bar(x + 0.2, [r.friend_actions for r in rows], 0.4, label="Friend-DQN")
    ax.set_yscale("log")
    ax.set_xticks(x, [str(r.junction_count) for r in rows])
    ax.set_xlabel("junctions")
    ax.set_ylabel("action values per decision")
    ax.legend()
    written.append(_save_svg(fig, run_dir / "complexity.svg", digest))
    plt.close(fig)
    return written


def _save_svg(fig, path: Path, digest: str) -> Path:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Description": f"manifest sha256 {digest}"})
    _atomic_write(path, _with_provenance(buf.getvalue(), digest))
    return path
