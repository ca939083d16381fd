"""Experiment driver: configs, source and patch training, decathlon runs,
lambda sweeps and gate heatmaps.

Everything a run does is fixed by one :class:`ExperimentConfig`, so the same
config on the same build gives the same report and patch bytes.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .data import Dataset, SyntheticTaskSpec, gen_task
from .decathlon import DecathlonResult
from .estimator import DEFAULT_STRIDES, DEFAULT_WIDTHS, GridDetector, PatchedDetector
from .exceptions import ConfigurationError
from .losses import LossConfig
from .model import SourceModel
from .patch_format import FILE_EXTENSION, FootprintReport, bit_width, mode_name
from .patching import PatchMode, PatchTrainState

logger = logging.getLogger(__name__)

REPORT_NAME = "report.json"
SOURCE_NAME = "source.npz"
GATES_NAME = "gates.pgm"
SWEEP_NAME = "sweep.csv"
SWEEP_COLUMNS = ("lambda_sps", "task", "patched_fraction", "footprint", "map50")
DEFAULT_SWEEP = (1e-5, 1e-4, 1e-3)


def _from_dict(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} field(s): {', '.join(sorted(unknown))}")
    return cls(**d)


@dataclass(frozen=True)
class SourceConfig:
    widths: Tuple[int, ...] = DEFAULT_WIDTHS
    strides: Tuple[int, ...] = DEFAULT_STRIDES
    steps: int = 3000
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "cosine"
    data_seed: int = 0
    n_train: int = 8192
    n_eval: int = 512

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if len(self.widths) != len(self.strides):
            raise ConfigurationError("widths and strides must have the same length")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    steps: int = 300
    batch_size: int = 32
    momentum: float = 0.9
    lr_masks: float = 1e-3
    lr_gates: float = 0.2
    lr_scales: float = 2e-4
    lr_bn: float = 1e-3
    lr_weights: float = 1e-4

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigurationError(f"optimizer kind must be 'sgd' or 'adam', got {self.kind!r}")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigurationError("steps and batch_size must be positive")


@dataclass(frozen=True)
class TaskConfig:
    """A target task. ``delta`` is the distance from the source distribution;
    ``seed`` picks the images (the source's data seed with ``delta = 0``
    gives the source task itself)."""

    name: str
    delta: float
    seed: int
    variant_seed: int = 0
    n_train: int = 2048
    n_eval: int = 256


def default_tasks() -> List[TaskConfig]:
    return [TaskConfig("near", 0.1, 101, 1), TaskConfig("mid", 0.25, 102, 2),
            TaskConfig("far", 0.4, 103, 3)]


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    mode: str = "spotpatch"
    footprint_mode: str = "base32"
    n_classes: int = 3
    image_size: int = 32
    channels: int = 3
    baseline: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    source: SourceConfig = field(default_factory=SourceConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    tasks: Tuple[TaskConfig, ...] = field(default_factory=lambda: tuple(default_tasks()))
    sweep: Tuple[float, ...] = DEFAULT_SWEEP

    def __post_init__(self):
        PatchMode.parse(self.mode)
        bit_width(self.footprint_mode)
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "sweep", tuple(float(v) for v in self.sweep))
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ConfigurationError("task names must be unique")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = [asdict(t) for t in self.tasks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "loss" in d:
            d["loss"] = _from_dict(LossConfig, d["loss"])
        if "source" in d:
            d["source"] = _from_dict(SourceConfig, d["source"])
        if "optimizer" in d:
            d["optimizer"] = _from_dict(OptimizerConfig, d["optimizer"])
        if "tasks" in d:
            d["tasks"] = tuple(_from_dict(TaskConfig, t) for t in d["tasks"])
        return _from_dict(cls, d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config is not valid JSON: {e}") from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())

    def with_overrides(self, seed=None, mode=None, lambda_sps=None, lambda_adp=None,
                       bit_mode=None) -> "ExperimentConfig":
        """Copy with command-line style overrides (``None`` keeps the value).
        ``bit_mode`` is 32 or 8."""
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        if mode is not None:
            cfg = replace(cfg, mode=PatchMode.parse(mode).value)
        if lambda_sps is not None:
            cfg = replace(cfg, loss=replace(cfg.loss, lambda_sps=float(lambda_sps)))
        if lambda_adp is not None:
            cfg = replace(cfg, loss=replace(cfg.loss, lambda_adp=float(lambda_adp)))
        if bit_mode is not None:
            cfg = replace(cfg, footprint_mode=mode_name(int(bit_mode)))
        return cfg

    def task(self, name: str) -> TaskConfig:
        for t in self.tasks:
            if t.name == name:
                return t
        raise ConfigurationError(f"no task named {name!r}; have {[t.name for t in self.tasks]}")


# -- reports -------------------------------------------------------------------

@dataclass
class TaskResult:
    name: str
    mode: str
    map50: float
    footprint: FootprintReport
    gates: List[int]
    baseline_map50: Optional[float] = None

    @property
    def patched_fraction(self) -> float:
        return self.footprint.patched_layer_fraction

    def to_dict(self) -> dict:
        return {"name": self.name, "mode": self.mode, "map50": self.map50,
                "footprint": self.footprint.to_dict(), "gates": list(self.gates),
                "patched_fraction": self.patched_fraction, "baseline_map50": self.baseline_map50}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskResult":
        fp = d["footprint"]
        report = FootprintReport(fp["bits_gamma"], fp["bits_theta"], fp["mode"],
                                 fp["patched_layer_fraction"], fp["mask_bits"], fp["float_bits"])
        return cls(d["name"], d["mode"], d["map50"], report, list(d["gates"]), d.get("baseline_map50"))


@dataclass
class RunReport:
    config: dict
    tasks: List[TaskResult]
    n_layers: int
    decathlon: Optional[DecathlonResult] = None
    wall_clock_s: float = 0.0

    def __post_init__(self):
        for t in self.tasks:
            if len(t.gates) != self.n_layers:
                raise ConfigurationError(f"task {t.name}: {len(t.gates)} gate states for "
                                         f"{self.n_layers} patchable layers")

    @property
    def total_footprint(self) -> float:
        return sum(t.footprint.ratio for t in self.tasks)

    def gate_matrix(self) -> List[List[int]]:
        return [list(t.gates) for t in self.tasks]

    def to_dict(self, include_wall_clock: bool = True) -> dict:
        d = {"config": self.config, "tasks": [t.to_dict() for t in self.tasks],
             "n_layers": self.n_layers, "total_footprint": self.total_footprint,
             "decathlon": self.decathlon.to_dict() if self.decathlon else None}
        if include_wall_clock:
            d["wall_clock_s"] = self.wall_clock_s
        return d

    def to_json(self, include_wall_clock: bool = True) -> str:
        return json.dumps(self.to_dict(include_wall_clock), sort_keys=True, indent=2)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        dec = None
        if d.get("decathlon"):
            x = d["decathlon"]
            dec = DecathlonResult(x["tasks"], x["s"], x["b"], x["score"], x["footprint"],
                                  x["score_per_footprint"])
        return cls(d["config"], [TaskResult.from_dict(t) for t in d["tasks"]], d["n_layers"], dec,
                   d.get("wall_clock_s", 0.0))

    @classmethod
    def load(cls, path) -> "RunReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


# -- data and training ---------------------------------------------------------

def source_task(cfg: ExperimentConfig) -> SyntheticTaskSpec:
    s = cfg.source
    return SyntheticTaskSpec("source", s.data_seed, 0.0, 0, cfg.image_size, cfg.channels, cfg.n_classes,
                             n_train=s.n_train, n_eval=s.n_eval)


def task_spec(cfg: ExperimentConfig, task: TaskConfig) -> SyntheticTaskSpec:
    return SyntheticTaskSpec(task.name, task.seed, task.delta, task.variant_seed, cfg.image_size,
                             cfg.channels, cfg.n_classes, n_train=task.n_train, n_eval=task.n_eval)


def task_data(cfg: ExperimentConfig, task: TaskConfig) -> Tuple[Dataset, Dataset]:
    spec = task_spec(cfg, task)
    return gen_task(spec, split="train"), gen_task(spec, split="eval")


def train_source(cfg: ExperimentConfig, data: Optional[Dataset] = None) -> SourceModel:
    s = cfg.source
    if data is None:
        data = gen_task(source_task(cfg))
    det = GridDetector(n_classes=cfg.n_classes, widths=s.widths, strides=s.strides, steps=s.steps,
                       batch_size=s.batch_size, lr=s.lr, momentum=s.momentum,
                       weight_decay=s.weight_decay, schedule=s.schedule, random_state=cfg.seed)
    det.fit(data.images, data.annotations)
    return det.model_


def patch_estimator(model: SourceModel, cfg: ExperimentConfig, mode=None) -> PatchedDetector:
    o = cfg.optimizer
    return PatchedDetector(model, mode=PatchMode.parse(mode or cfg.mode).value,
                           lambda_sps=cfg.loss.lambda_sps, lambda_adp=cfg.loss.lambda_adp,
                           box_weight=cfg.loss.box_weight, steps=o.steps, batch_size=o.batch_size,
                           momentum=o.momentum, lr_masks=o.lr_masks, lr_gates=o.lr_gates,
                           lr_scales=o.lr_scales, lr_bn=o.lr_bn, lr_weights=o.lr_weights,
                           optimizer=o.kind, random_state=cfg.seed)


def fit_task(model: SourceModel, task: TaskConfig, cfg: ExperimentConfig, mode=None,
             data: Optional[Tuple[Dataset, Dataset]] = None) -> Tuple[PatchedDetector, TaskResult]:
    """Train one patch (or fine-tuned copy) and evaluate it on the task's eval split."""
    train, ev = data if data is not None else task_data(cfg, task)
    est = patch_estimator(model, cfg, mode).fit(train.images, train.annotations)
    result = TaskResult(task.name, est.mode_.value, float(est.score(ev.images, ev.annotations)),
                        est.footprint(cfg.footprint_mode), list(est.gates_))
    logger.info("task %s [%s]: mAP %.4f, footprint %.4f, gates %s", task.name, result.mode,
                result.map50, result.footprint.ratio, result.gates)
    return est, result


def train_patch(model: SourceModel, task: TaskConfig, cfg: ExperimentConfig) -> Tuple[PatchTrainState, RunReport]:
    t0 = time.perf_counter()
    est, result = fit_task(model, task, cfg)
    report = RunReport(cfg.to_dict(), [result], len(model.patchable_layers),
                       wall_clock_s=time.perf_counter() - t0)
    return est.state_, report


def run_decathlon(cfg: ExperimentConfig, model: Optional[SourceModel] = None,
                  out_dir=None) -> RunReport:
    """Patch every task, score against fine-tuning on the same budget.

    With ``out_dir`` the report, the source model, one ``.sptp`` per task and
    the gate heatmap are written there.
    """
    if len(cfg.tasks) < 2:
        raise ConfigurationError("a decathlon needs at least two target tasks")
    t0 = time.perf_counter()
    if model is None:
        model = train_source(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        model.save(out / SOURCE_NAME)
    mode = PatchMode.parse(cfg.mode)
    results = []
    for task in cfg.tasks:
        data = task_data(cfg, task)
        est, res = fit_task(model, task, cfg, mode, data)
        if cfg.baseline:
            if mode is PatchMode.FINE_TUNE:
                res.baseline_map50 = res.map50
            else:
                res.baseline_map50 = fit_task(model, task, cfg, PatchMode.FINE_TUNE, data)[1].map50
        if out is not None and est.patch_ is not None:
            est.patch_.save(out / f"{task.name}{FILE_EXTENSION}")
        results.append(res)
    report = RunReport(cfg.to_dict(), results, len(model.patchable_layers))
    if cfg.baseline:
        report.decathlon = decathlon_score(report)
    report.wall_clock_s = time.perf_counter() - t0
    if out is not None:
        report.save(out / REPORT_NAME)
        (out / GATES_NAME).write_bytes(gate_heatmap(report.gate_matrix()))
    return report


def decathlon_score(report: RunReport) -> DecathlonResult:
    missing = [t.name for t in report.tasks if t.baseline_map50 is None]
    if missing:
        raise ConfigurationError(f"no fine-tune baseline for task(s): {', '.join(missing)}")
    return DecathlonResult.compute([t.name for t in report.tasks], [t.map50 for t in report.tasks],
                                   [t.baseline_map50 for t in report.tasks], report.total_footprint)


# -- sweeps and heatmaps -------------------------------------------------------

def lambda_sweep(cfg: ExperimentConfig, model: SourceModel, lambdas: Optional[Sequence[float]] = None) -> List[dict]:
    """One row per (lambda, task) with the ``SWEEP_COLUMNS`` fields."""
    rows = []
    cache: Dict[str, Tuple[Dataset, Dataset]] = {}
    for lam in (cfg.sweep if lambdas is None else lambdas):
        run = cfg.with_overrides(lambda_sps=lam)
        for task in cfg.tasks:
            if task.name not in cache:
                cache[task.name] = task_data(cfg, task)
            _, res = fit_task(model, task, run, data=cache[task.name])
            rows.append({"lambda_sps": float(lam), "task": task.name,
                         "patched_fraction": res.patched_fraction,
                         "footprint": res.footprint.ratio, "map50": res.map50})
    return rows


def sweep_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r[k] for k in SWEEP_COLUMNS})
    return buf.getvalue()


def gate_heatmap(gates: Sequence[Sequence[int]]) -> bytes:
    """Plain PGM: one row per task, one pixel per layer. Closed gates are
    white (255), open gates dark (0)."""
    rows = [list(r) for r in gates]
    width = len(rows[0]) if rows else 0
    if any(len(r) != width for r in rows):
        raise ConfigurationError("every task needs the same number of gate states")
    lines = ["P2", f"{width} {len(rows)}", "255"]
    lines += [" ".join("0" if g else "255" for g in r) for r in rows]
    return ("\n".join(lines) + "\n").encode("ascii")


def dump_gates(report: RunReport, path=None) -> bytes:
    data = gate_heatmap(report.gate_matrix())
    if path is not None:
        Path(path).write_bytes(data)
    return data
