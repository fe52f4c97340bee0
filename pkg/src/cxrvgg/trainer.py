"""Training loop, stratified cross-validation harness and synthetic data.

Random streams (all derived from ``RunConfig.seed`` unless noted):

* weights: ``Rng(seed, "fold<i>/init").child(layer name)``
* epoch shuffles: ``Rng(seed, "fold<i>/shuffle").child(epoch)``
* augmentation: ``Rng(augment.seed, "augment/fold<i>").child(epoch, position)``
* fold plan: ``Rng(seed, "kfold").child(class index)``
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import augment as aug
from .arch import Model, build, resolve_spec
from .augment import AugmentConfig, ChannelStats, fit_stats, random_transform, standardize
from .data import CLASS_NAMES, ClassLabel, Dataset, fold_split, load_dataset, stratified_kfold
from .errors import ConfigError, DatasetError, NumericError
from .layers import Mode
from .metrics import CVSummary, EvalResult, evaluate, summarize
from .optim import Adam, cross_entropy
from .tensor import DTYPE, Rng

log = logging.getLogger(__name__)

STATS_LAYER = "_channel_stats"
OUTPUT_ROOT_ENV = "CXRVGG_OUTPUT_ROOT"


@dataclass(frozen=True)
class RunConfig:
    arch: str = "vgg16"
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dropout: float = 0.3
    folds: int = 5
    seed: int = 0
    image_size: int = 182
    data_root: str = ""
    output_dir: str = field(default_factory=lambda: os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    augment: bool = True
    aug: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 (batch normalisation), got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if self.image_size < 1:
            raise ConfigError(f"image_size must be positive, got {self.image_size}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    # flat key = value text ------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "aug":
                continue
            lines.append(f"{f.name} = {_fmt(getattr(self, f.name))}")
        for key, value in self.aug.to_dict().items():
            lines.append(f"aug.{key} = {_fmt(value)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "RunConfig":
        raw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            raw[key] = value
        raw.update({k: _fmt(v) for k, v in overrides.items() if v is not None})
        return cls.from_mapping(raw)

    @classmethod
    def from_mapping(cls, raw: dict) -> "RunConfig":
        top = {f.name: f.type for f in fields(cls) if f.name != "aug"}
        aug_types = AugmentConfig.field_types()
        kwargs, aug_kwargs = {}, {}
        for key, value in raw.items():
            if key.startswith("aug."):
                name = key[4:]
                if name not in aug_types:
                    raise ConfigError(f"unknown config key {key!r}")
                aug_kwargs[name] = _parse(value, aug_types[name], key)
            elif key in top:
                kwargs[key] = _parse(value, top[key], key)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        aug_kwargs.setdefault("seed", kwargs.get("seed", 0))
        try:
            return cls(aug=AugmentConfig(**aug_kwargs), **kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path, **overrides) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text, **overrides)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(value: str, typ, key: str):
    typ = {"int": int, "float": float, "bool": bool, "str": str}.get(typ, typ) if isinstance(typ, str) else typ
    try:
        if typ is bool:
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ is int:
            return int(value, 0)
        if typ is float:
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


# --------------------------------------------------------------------------
# training

@dataclass
class TrainedFold:
    model: Model
    losses: List[float]
    stats: ChannelStats


def model_for(cfg: RunConfig, rng: Rng) -> Model:
    spec = resolve_spec(cfg.arch, classes=len(ClassLabel), p=cfg.dropout,
                        input_shape=(cfg.image_size, cfg.image_size, 3))
    return build(spec, rng)


def train_one_fold(train: Dataset, cfg: RunConfig, fold: int = 0, *, images=None,
                   stats: Optional[ChannelStats] = None, epochs: Optional[int] = None) -> TrainedFold:
    """Train a freshly initialised model on ``train``.

    Each epoch shuffles, cuts full batches (a short tail batch is dropped),
    augments each image, standardises with the channel statistics of
    ``train`` and takes one Adam step per batch. The model is returned in
    inference use; ``epochs`` overrides ``cfg.epochs`` and may be 0.
    """
    epochs = cfg.epochs if epochs is None else epochs
    counts = train.class_counts
    missing = [c.display for c, n in counts.items() if n == 0]
    if missing:
        raise DatasetError(f"training set lacks class(es): {', '.join(missing)}")
    if len(train) < cfg.batch_size:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds the {len(train)} training images")
    if images is None:
        images = train.load_images(cfg.image_size)
    if stats is None:
        stats = fit_stats(images)
    labels = train.one_hot()
    base = Rng(cfg.seed, f"fold{fold}")
    model = model_for(cfg, base.child("init"))
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    aug_rng = Rng(cfg.aug.seed, f"augment/fold{fold}")
    n, bs = len(train), cfg.batch_size
    losses: List[float] = []
    for epoch in range(epochs):
        order = base.child("shuffle", epoch).permutation(n)
        batch_losses = []
        for start in range(0, n - bs + 1, bs):
            idx = order[start:start + bs]
            if cfg.augment:
                batch = np.stack([random_transform(images[i], cfg.aug, aug_rng.child(epoch, int(i))) for i in idx])
            else:
                batch = images[idx]
            probs = model.forward(standardize(batch, stats), Mode.TRAIN)
            loss, dlogits = cross_entropy(probs, labels[idx])
            if not math.isfinite(loss):
                raise NumericError("non-finite training loss", fold=fold, epoch=epoch)
            model.backward(dlogits)
            opt.step(model.params(), model.grads())
            batch_losses.append(loss)
        losses.append(float(np.mean(batch_losses)))
        log.debug("fold %d epoch %d loss %.6f", fold, epoch, losses[-1])
    return TrainedFold(model, losses, stats)


def predict(model: Model, images, stats: ChannelStats, batch_size: int = 32):
    return model.predict(standardize(images, stats), batch_size)


def evaluate_model(model: Model, images, labels, stats: ChannelStats) -> EvalResult:
    """Inference-mode evaluation; never touches parameters or running buffers."""
    probs = predict(model, images, stats)
    if not np.all(np.isfinite(probs)):
        raise NumericError("non-finite predictions during evaluation")
    return evaluate(probs, labels, CLASS_NAMES)


def save_model(path, trained: TrainedFold) -> None:
    mean, std = trained.stats.to_arrays()
    trained.model.save(path, extra=[(STATS_LAYER, "mean", mean), (STATS_LAYER, "std", std)])


def load_model(path, cfg: RunConfig) -> Tuple[Model, ChannelStats]:
    model = model_for(cfg, Rng(cfg.seed, "load"))
    rest = model.load(path)
    try:
        stats = ChannelStats(tuple(rest[(STATS_LAYER, "mean")].tolist()), tuple(rest[(STATS_LAYER, "std")].tolist()))
    except KeyError:
        raise DatasetError(f"{path}: checkpoint carries no channel statistics") from None
    return model, stats


def write_losses(path, losses: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for e, loss in enumerate(losses):
            w.writerow([e, repr(float(loss))])


# --------------------------------------------------------------------------
# cross-validation

AuditHook = Callable[[int, List[str], List[str]], None]


@dataclass
class FoldOutcome:
    fold: int
    internal: EvalResult
    external: EvalResult
    losses: List[float]
    stats_paths: List[str]
    test_paths: List[str]


def run_fold(ds: Dataset, plan, cfg: RunConfig, fold: int, run_dir: Optional[Path] = None,
             audit: Optional[AuditHook] = None) -> FoldOutcome:
    train, test = fold_split(ds, plan, fold)
    train_images = train.load_images(cfg.image_size)
    stats = fit_stats(train_images)
    if audit is not None:
        audit(fold, train.paths, test.paths)
    trained = train_one_fold(train, cfg, fold, images=train_images, stats=stats)
    internal = evaluate_model(trained.model, train_images, train.one_hot(), stats)
    external = evaluate_model(trained.model, test.load_images(cfg.image_size), test.one_hot(), stats)
    if run_dir is not None:
        fdir = Path(run_dir) / f"fold{fold}"
        fdir.mkdir(parents=True, exist_ok=True)
        save_model(fdir / "checkpoint", trained)
        write_losses(fdir / "losses.csv", trained.losses)
    log.info("fold %d: internal acc %.3f, external acc %.3f", fold, internal.accuracy, external.accuracy)
    return FoldOutcome(fold, internal, external, trained.losses, train.paths, test.paths)


def cross_validate(ds: Dataset, cfg: RunConfig, run_dir=None, audit: Optional[AuditHook] = None,
                   parallel: int = 1) -> CVSummary:
    """Stratified k-fold: per fold fit statistics on the training folds, train, evaluate both splits.

    ``audit(fold, stats_paths, test_paths)`` is called with the items whose
    images feed the fold's channel statistics and the held-out items.
    With ``parallel > 1`` folds run in worker processes (the audit hook then
    runs in the workers).
    """
    plan = stratified_kfold(ds, cfg.folds, cfg.seed)
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.snapshot").write_text(cfg.to_text())
    if parallel > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=parallel) as pool:
            futures = [pool.submit(run_fold, ds, plan, cfg, i, run_dir, audit) for i in range(cfg.folds)]
            outcomes = [f.result() for f in futures]
    else:
        outcomes = [run_fold(ds, plan, cfg, i, run_dir, audit) for i in range(cfg.folds)]
    summary = summarize([(o.internal, o.external) for o in outcomes], k=cfg.folds, class_names=CLASS_NAMES)
    summary.meta = {
        "arch": cfg.arch,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "lr": cfg.lr,
        "dropout": cfg.dropout,
        "folds": cfg.folds,
        "seed": cfg.seed,
        "image_size": cfg.image_size,
        "augment": cfg.augment,
        "n_items": len(ds),
        "class_counts": {c.display: n for c, n in ds.class_counts.items()},
    }
    if run_dir is not None:
        write_summary(run_dir, summary)
    return summary


def write_summary(run_dir, summary: CVSummary) -> None:
    run_dir = Path(run_dir)
    (run_dir / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n")
    (run_dir / "summary.csv").write_text(summary.to_csv(digits=3))


def read_summary(run_dir) -> CVSummary:
    path = Path(run_dir) / "summary.json"
    try:
        return CVSummary.from_dict(json.loads(path.read_text()))
    except FileNotFoundError:
        raise DatasetError(f"no summary.json in {run_dir}") from None


# --------------------------------------------------------------------------
# synthetic data

def _blobs(rng: Rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(DTYPE)
    img = np.zeros((size, size))
    for _ in range(int(rng.integers(3, 7))):
        cy, cx = rng.uniform(0.15, 0.85, 2) * size
        sigma = rng.uniform(0.06, 0.12) * size
        img += rng.uniform(0.5, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    return 0.15 + 0.7 * img / max(img.max(), 1e-9)


def _grid(rng: Rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(DTYPE)
    period = rng.uniform(0.11, 0.14) * size
    py, px = rng.uniform(0, 2 * np.pi, 2)
    return 0.5 + 0.2 * (np.sin(2 * np.pi * yy / period + py) + np.sin(2 * np.pi * xx / period + px))


def _rings(rng: Rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(DTYPE)
    cy, cx = rng.uniform(0.35, 0.65, 2) * size
    period = rng.uniform(0.22, 0.3) * size
    r = np.hypot(yy - cy, xx - cx)
    return 0.5 + 0.35 * np.cos(2 * np.pi * r / period + rng.uniform(0, 2 * np.pi))


_TEXTURES = {ClassLabel.COVID19: _blobs, ClassLabel.NO_FINDING: _grid, ClassLabel.OTHER_PNEUMONIA: _rings}


def synth_image(label: ClassLabel, size: int, rng: Rng) -> np.ndarray:
    gray = _TEXTURES[label](rng, size) + rng.normal(0.0, 0.04, (size, size))
    return np.repeat(np.clip(gray, 0.0, 1.0)[..., None], 3, axis=2)


def synth_dataset(root, n_per_class: int = 30, size: int = 32, seed: int = 0) -> Dataset:
    """Write ``n_per_class`` procedural PNGs per class (blobs / grid / rings) and load them."""
    if n_per_class < 5:
        raise ConfigError(f"n_per_class must be >= 5, got {n_per_class}")
    if size < 16:
        raise ConfigError(f"size must be >= 16, got {size}")
    root = Path(root)
    rng = Rng(seed, "synth")
    for label in ClassLabel:
        cdir = root / label.dirname
        cdir.mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            aug.save_png(cdir / f"{label.dirname}_{i:04d}.png", synth_image(label, size, rng.child(label.dirname, i)))
    return load_dataset(root)
