"""Experiment driver: configuration, training loops, metrics and raster outputs.

Every run is a pure function of its :class:`ExperimentConfig`.  Random
streams are derived from ``(seed, purpose)`` so runs that differ only in the
consistency variant share data, split and initialization.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from .consistency import (
    ConfigError,
    TeacherMode,
    Variant,
    check_compatible,
    collapse_fraction,
    ema_update,
    perturb_images,
    sample_perturbation,
    semisup_loss_gradient,
)
from .data import make_split, synth_scenes, two_moons, write_pgm, write_ppm
from .models import AdamState, Mlp, Mode, TinyFcn, adam_step, forward, lr_schedule

log = logging.getLogger(__name__)

SUPERVISED = "supervised"
VARIANTS = (SUPERVISED,) + tuple(v.value for v in Variant)
PERTURBATIONS = ("phtps", "ph", "tps")

# stream ids for np.random.SeedSequence([seed, stream])
_DATA, _INIT, _TRAIN, _TEST, _SPLIT, _VAL = range(6)

COLLAPSE_THRESHOLD = 0.9

_TASK_DEFAULTS = {
    "moons": {"alpha": 1.0, "epochs": 4000, "lr": 1e-3, "schedule": "constant", "weight_decay": 0.0,
              "illumination": 0.0, "texture": 0.0, "batch_norm": False},
    # scenes with strong per-image color casts and a faint class texture: color
    # alone does not identify a class, so photometric invariance pays off
    "dense": {"alpha": 0.5, "epochs": 200, "lr": 4e-3, "schedule": "cosine", "weight_decay": 1e-4,
              "illumination": 0.7, "texture": 0.15, "batch_norm": False},
}


@dataclass
class ExperimentConfig:
    task: str = "moons"
    variant: str = "1w-ct"
    teacher: str = "simple"
    ema: float = 0.99
    alpha: float | None = None
    epochs: int | None = None
    lr: float | None = None
    schedule: str | None = None
    weight_decay: float | None = None
    seed: int = 0
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    # perturbations
    perturbation: str = "phtps"
    r_fraction: float = 0.05
    moons_sigma: float = 0.2
    # moons data
    moons_n: int = 1000
    moons_noise: float = 0.08
    moons_labeled: int = 6
    moons_test_n: int = 1000
    # dense data
    label_proportion: float = 0.125
    train_scenes: int = 200
    val_scenes: int = 50
    image_size: int = 64
    illumination: float | None = None
    texture: float | None = None
    batch_norm: bool | None = None
    hidden_channels: int = 16
    # output
    output_dir: str = "runs/default"
    log_every: int = 100

    def __post_init__(self):
        for key, value in _TASK_DEFAULTS.get(self.task, {}).items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        self.validate()

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as err:
            raise ConfigError(str(err)) from None

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: {err}") from None
        return cls.from_dict(doc)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @property
    def teacher_mode(self) -> TeacherMode:
        return TeacherMode(self.teacher, self.ema)

    @property
    def consistency(self) -> Variant | None:
        return None if self.variant == SUPERVISED or self.alpha == 0 else Variant(self.variant)

    def validate(self) -> None:
        if self.task not in _TASK_DEFAULTS:
            raise ConfigError(f"task must be one of {sorted(_TASK_DEFAULTS)}, got {self.task!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.perturbation not in PERTURBATIONS:
            raise ConfigError(f"perturbation must be one of {PERTURBATIONS}, got {self.perturbation!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")
        teacher = self.teacher_mode  # validates kind and momentum
        if self.variant != SUPERVISED:
            check_compatible(Variant(self.variant), teacher)
        positive = ("lr", "batch_labeled", "batch_unlabeled", "r_fraction", "moons_n", "moons_test_n",
                    "train_scenes", "val_scenes", "image_size", "hidden_channels", "log_every")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("alpha", "epochs", "weight_decay", "moons_sigma", "moons_noise", "illumination", "texture"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0 < self.label_proportion <= 1:
            raise ConfigError(f"label_proportion must lie in (0, 1], got {self.label_proportion}")
        if self.task == "moons" and self.moons_n % 2:
            raise ConfigError("moons_n must be even")


@dataclass
class MetricsRecord:
    step: int
    supervised_loss: float | None = None
    consistency_loss: float | None = None
    accuracy: float | None = None
    per_class_iou: dict[int, float] | None = None
    miou: float | None = None
    collapse_fraction: float | None = None
    collapsed: bool | None = None
    wall_clock: float = 0.0

    def to_json(self) -> str:
        """One JSON line without wall-clock time, so files are reproducible byte for byte."""
        doc = {k: v for k, v in dataclasses.asdict(self).items() if v is not None and k != "wall_clock"}
        if self.per_class_iou is not None:
            doc["per_class_iou"] = {str(k): v for k, v in self.per_class_iou.items()}
        return json.dumps(doc, sort_keys=True)


@dataclass
class RunResult:
    config: ExperimentConfig
    final: MetricsRecord
    history: list[MetricsRecord] = field(default_factory=list)
    outputs: list[Path] = field(default_factory=list)
    routing: dict[str, bool] = field(default_factory=dict)


class _MetricsWriter:
    """Append-only JSON Lines writer, flushed per record."""

    def __init__(self, out_dir: Path):
        out_dir.mkdir(parents=True, exist_ok=True)
        self.path = out_dir / "metrics.jsonl"
        self.timing = out_dir / "timing.jsonl"
        self.path.write_text("")
        self.timing.write_text("")
        self.start = time.perf_counter()

    def write(self, rec: MetricsRecord) -> MetricsRecord:
        rec.wall_clock = time.perf_counter() - self.start
        with self.path.open("a") as f:
            f.write(rec.to_json() + "\n")
        with self.timing.open("a") as f:
            f.write(json.dumps({"step": rec.step, "wall_clock": rec.wall_clock}) + "\n")
        return rec


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


def _audit_routing(variant: Variant, student: bool, teacher: bool) -> dict[str, bool]:
    """Compare the first step's gradient flow with the wiring's contract."""
    expected_teacher = variant == Variant.TWO_WAY
    if not student or teacher != expected_teacher:
        raise AssertionError(
            f"gradient routing violated for {variant.value}: student={student}, target branch={teacher}"
        )
    return {"student_grad_nonzero": student, "target_grad_nonzero": teacher}


def _write_config(out: Path, config: ExperimentConfig) -> Path:
    path = out / "config.json"
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# metrics


def compute_miou(pred, true, ignore: int | None = 0, num_classes: int | None = None):
    """Per-class IoU over non-ignored pixels and their mean; classes absent from both are skipped."""
    pred = np.asarray(pred).ravel()
    true = np.asarray(true).ravel()
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {true.shape}")
    keep = np.ones(true.shape, dtype=bool) if ignore is None else true != ignore
    pred, true = pred[keep], true[keep]
    inter, union = _iou_counts(pred, true, num_classes)
    return _iou_from_counts(inter, union)


def _iou_counts(pred: np.ndarray, true: np.ndarray, num_classes: int | None = None):
    n = int(max(pred.max(initial=0), true.max(initial=0))) + 1
    if num_classes is not None:
        n = max(n, num_classes + 1)
    inter = np.bincount(true[pred == true], minlength=n)
    union = np.bincount(pred, minlength=n) + np.bincount(true, minlength=n) - inter
    return inter, union


def _iou_from_counts(inter: np.ndarray, union: np.ndarray):
    per_class = {int(c): float(inter[c] / union[c]) for c in range(len(union)) if union[c] > 0}
    miou = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, miou


# ---------------------------------------------------------------------------
# two moons


MOONS_VIEW = (-1.5, 2.5, -1.25, 1.75)  # x_min, x_max, y_min, y_max
_RED = np.array([0.85, 0.2, 0.2])
_BLUE = np.array([0.2, 0.3, 0.85])


def moons_boundary_raster(model, params, points, labels, labeled, size: int = 256) -> np.ndarray:
    """Class-probability map with unlabeled points as dots and labeled points as boxes."""
    x0, x1, y0, y1 = MOONS_VIEW
    xs = np.linspace(x0, x1, size)
    ys = np.linspace(y1, y0, size)
    grid = np.stack(np.meshgrid(xs, ys), axis=-1).reshape(-1, 2)
    p = forward(model, params, grid).data[:, 0].reshape(size, size, 1)
    img = 0.35 + 0.65 * (p * (0.5 + 0.5 * _RED) + (1 - p) * (0.5 + 0.5 * _BLUE))
    img[np.abs(p[..., 0] - 0.5) < 0.02] = 0.0

    def pixel(pt):
        col = int(round((pt[0] - x0) / (x1 - x0) * (size - 1)))
        row = int(round((y1 - pt[1]) / (y1 - y0) * (size - 1)))
        return row, col

    for pt in points:
        r, c = pixel(pt)
        if 0 <= r < size and 0 <= c < size:
            img[r, c] = 1.0
    for i in labeled:
        r, c = pixel(points[i])
        color = _RED if labels[i] == 1 else _BLUE
        img[max(r - 3, 0) : r + 4, max(c - 3, 0) : c + 4] = 0.0
        img[max(r - 2, 0) : r + 3, max(c - 2, 0) : c + 3] = color
    return np.clip(img, 0, 1)


def moons_accuracy(model, params, points, labels) -> float:
    pred = np.argmax(forward(model, params, points).data, axis=1) + 1
    return float(np.mean(pred == labels))


def run_moons(config: ExperimentConfig) -> RunResult:
    """Train the two-moons MLP with cross entropy on the labeled points and consistency on all points."""
    if config.task != "moons":
        raise ConfigError("run_moons needs task = 'moons'")
    out = Path(config.output_dir)
    writer = _MetricsWriter(out)
    outputs = [_write_config(out, config), writer.path]

    ds = two_moons(config.moons_n, config.moons_noise, seed=int(_rng(config.seed, _DATA).integers(2**31)),
                   n_labeled=config.moons_labeled)
    test = two_moons(config.moons_test_n, config.moons_noise, seed=int(_rng(config.seed, _TEST).integers(2**31)))
    model = Mlp()
    params = model.init_params(_rng(config.seed, _INIT))
    teacher = dict(params) if config.teacher_mode.is_mean_teacher else None
    rng = _rng(config.seed, _TRAIN)
    state = AdamState()
    variant = config.consistency
    alpha = config.alpha if variant is not None else 0.0
    x_l, y_l = ds.points[ds.labeled], ds.labels[ds.labeled]
    history, routing = [], {}

    for step in range(config.epochs):
        tau = None
        if variant is not None:
            shape = ds.points.shape
            if variant == Variant.BOTH_PERTURBED:
                tau = (rng.normal(0, config.moons_sigma, shape), rng.normal(0, config.moons_sigma, shape))
            else:
                tau = rng.normal(0, config.moons_sigma, shape)
        res = semisup_loss_gradient(model, params, x_l, y_l, ds.points, tau, alpha, variant or Variant.CLEAN_TEACHER,
                                    teacher_params=teacher)
        if step == 0 and variant is not None:
            routing = _audit_routing(variant, res.student_grad_nonzero, res.teacher_grad_nonzero)
        lr = config.lr if config.schedule == "constant" else lr_schedule(step / config.epochs, config.lr)
        params = adam_step(params, res.grads, state, lr, weight_decay=config.weight_decay)
        if teacher is not None:
            teacher = ema_update(teacher, params, config.ema)
        if step % config.log_every == 0:
            history.append(writer.write(MetricsRecord(step, res.supervised_loss, res.consistency_loss)))

    final = MetricsRecord(config.epochs, accuracy=moons_accuracy(model, params, test.points, test.labels))
    history.append(writer.write(final))
    raster = out / "boundary.ppm"
    write_ppm(raster, moons_boundary_raster(model, params, ds.points, ds.labels, ds.labeled))
    outputs.append(raster)
    return RunResult(config, final, history, outputs, routing)


# ---------------------------------------------------------------------------
# dense prediction


def predict_labels(model, params, buffers, images: np.ndarray, chunk: int = 10) -> np.ndarray:
    out = []
    with ad.no_grad():
        for i in range(0, len(images), chunk):
            p = model.forward(_const(params), images[i : i + chunk], Mode.EVAL, buffers)
            out.append(np.argmax(p.data, axis=-1) + 1)
    return np.concatenate(out)


def _const(params):
    return {k: ad.Tensor(v) for k, v in params.items()}


def _dense_taus(rng, config: ExperimentConfig, n: int, size: int, pairs: bool):
    r = config.r_fraction * size
    ph = config.perturbation in ("phtps", "ph")
    geo = config.perturbation in ("phtps", "tps")

    def one():
        return sample_perturbation(rng, size, size, r, photometric=ph, geometric=geo)

    return [(one(), one()) if pairs else one() for _ in range(n)]


def run_dense(config: ExperimentConfig) -> RunResult:
    """Train TinyFcn on synthetic scenes with a labeled split; evaluate mIoU on held-out scenes."""
    if config.task != "dense":
        raise ConfigError("run_dense needs task = 'dense'")
    out = Path(config.output_dir)
    writer = _MetricsWriter(out)
    outputs = [_write_config(out, config), writer.path]
    size = config.image_size

    train = synth_scenes(config.train_scenes, size, size, seed=int(_rng(config.seed, _DATA).integers(2**31)),
                         illumination=config.illumination, texture=config.texture)
    val = synth_scenes(config.val_scenes, size, size, seed=int(_rng(config.seed, _VAL).integers(2**31)),
                       illumination=config.illumination, texture=config.texture)
    labeled = make_split(config.train_scenes, config.label_proportion,
                         seed=int(_rng(config.seed, _SPLIT).integers(2**31)))
    missing = set(range(1, train.num_classes + 1)) - set(np.unique(train.labels[labeled]).tolist())
    if missing:
        raise ConfigError(f"labeled split lacks classes {sorted(missing)}; raise label_proportion or change seed")
    hc = config.hidden_channels
    model = TinyFcn((3, hc, hc, train.num_classes), batch_norm=config.batch_norm)
    params = model.init_params(_rng(config.seed, _INIT))
    buffers = model.init_buffers()
    mean_teacher = config.teacher_mode.is_mean_teacher
    teacher = dict(params) if mean_teacher else None
    teacher_buffers = dict(buffers) if mean_teacher else None
    rng = _rng(config.seed, _TRAIN)
    state = AdamState()
    variant = config.consistency
    alpha = config.alpha if variant is not None else 0.0

    b_l = min(config.batch_labeled, len(labeled))
    steps_per_epoch = max(1, len(labeled) // b_l)
    epochs = config.epochs  # passes over the labeled split
    total = steps_per_epoch * epochs
    history, routing = [], {}
    step = 0
    for _ in range(epochs):
        order = rng.permutation(labeled)
        for s in range(steps_per_epoch):
            idx = order[s * b_l : (s + 1) * b_l]
            tau, x_u = None, None
            if variant is not None:
                u_idx = rng.choice(config.train_scenes, size=config.batch_unlabeled, replace=False)
                x_u = train.images[u_idx]
                tau = _dense_taus(rng, config, len(u_idx), size, pairs=variant == Variant.BOTH_PERTURBED)
            res = semisup_loss_gradient(model, params, train.images[idx], train.labels[idx], x_u, tau, alpha,
                                        variant or Variant.CLEAN_TEACHER, teacher_params=teacher,
                                        buffers=buffers, teacher_buffers=teacher_buffers)
            if step == 0 and variant is not None:
                routing = _audit_routing(variant, res.student_grad_nonzero, res.teacher_grad_nonzero)
            lr = config.lr if config.schedule == "constant" else lr_schedule(step / total, config.lr)
            params = adam_step(params, res.grads, state, lr, weight_decay=config.weight_decay)
            if mean_teacher:
                teacher = ema_update(teacher, params, config.ema)
                teacher_buffers = ema_update(teacher_buffers, buffers, config.ema)
            if step % config.log_every == 0:
                history.append(writer.write(MetricsRecord(step, res.supervised_loss, res.consistency_loss)))
            step += 1

    pred = predict_labels(model, params, buffers, val.images)
    inter, union = _iou_counts(pred.ravel(), val.labels.ravel(), train.num_classes)
    per_class, miou = _iou_from_counts(inter[1:], union[1:])
    per_class = {c + 1: v for c, v in per_class.items()}

    # collapse check on perturbed validation scenes
    probe = val.images[:8]
    taus = _dense_taus(_rng(config.seed, _VAL + 100), config.replace(perturbation="phtps"), len(probe), size, False)
    pb = perturb_images(probe, taus)
    with ad.no_grad():
        p = model.forward(_const(params), pb.images, Mode.TRAIN_FROZEN, buffers).data
    share = collapse_fraction(p, pb.masks)

    final = MetricsRecord(step, per_class_iou=per_class, miou=miou, collapse_fraction=share,
                          collapsed=share > COLLAPSE_THRESHOLD)
    history.append(writer.write(final))
    iou_path = out / "iou.json"
    iou_path.write_text(json.dumps({"per_class_iou": {str(k): v for k, v in per_class.items()}, "miou": miou},
                                   indent=2, sort_keys=True) + "\n")
    outputs.append(iou_path)
    for i in range(min(8, len(pred))):
        path = out / f"pred_{i:02d}.pgm"
        write_pgm(path, pred[i])
        outputs.append(path)
    return RunResult(config, final, history, outputs, routing)


def run(config: ExperimentConfig) -> RunResult:
    return run_moons(config) if config.task == "moons" else run_dense(config)


# ---------------------------------------------------------------------------
# sweeps


def _run_cell(config: ExperimentConfig) -> dict[str, Any]:
    res = run(config)
    return {"config": config.to_dict(), "final": json.loads(res.final.to_json())}


def sweep_configs(base: ExperimentConfig, variants, seeds, perturbations=None) -> list[ExperimentConfig]:
    cells = []
    root = Path(base.output_dir)
    for variant in variants:
        for pert in perturbations or [base.perturbation]:
            for seed in seeds:
                name = f"{variant}_{pert}_s{seed}" if perturbations else f"{variant}_s{seed}"
                cells.append(base.replace(variant=variant, perturbation=pert, seed=seed, output_dir=str(root / name)))
    return cells


def sweep(base: ExperimentConfig, variants, seeds, perturbations=None, workers: int = 1) -> dict[str, Any]:
    """Run every (variant, perturbation, seed) cell and write ``summary.json``.

    Cells are independent; with ``workers > 1`` they run in separate processes.
    """
    cells = sweep_configs(base, variants, seeds, perturbations)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    key = "accuracy" if base.task == "moons" else "miou"
    groups: dict[str, list[float]] = {}
    for r in results:
        cfg = r["config"]
        name = cfg["variant"] if not perturbations else f"{cfg['variant']}/{cfg['perturbation']}"
        groups.setdefault(name, []).append(r["final"][key])
    summary = {
        "metric": key,
        "cells": results,
        "means": {k: float(np.mean(v)) for k, v in groups.items()},
    }
    root = Path(base.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
