"""Training loop, SGD with momentum, step learning-rate schedule, evaluation, ablations."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import atomic_write_bytes, save_checkpoint
from .data import (
    Dataset,
    NormalizationStats,
    batches,
    compute_normalization,
    expand_dataset_offline,
    find_cifar10_files,
    load_cifar10_binary,
    load_image_folder,
    make_mini_cifar10,
)
from .errors import ConfigError, ContractError, NumericalError
from .losses import LossBreakdown, LossConfig, total_loss
from .models import ModelConfig, ResNet18, build_model, param_count
from .nn import Parameter
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

DATASETS = ("mini_cifar10", "folder")
AUGMENTATIONS = ("none", "online", "offline")
METRIC_COLUMNS = (
    "epoch", "lr", "l_classification", "l_permutation", "l_std", "l_mean",
    "l_feature", "l_total", "train_acc", "test_acc", "seconds",
)
LOSS_TERMS = ("l_classification", "l_permutation", "l_std", "l_mean", "l_feature", "l_total")
MINI_TRAIN_FILE = "mini_train.bin"


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    dataset: str = "mini_cifar10"
    data_dir: str = "data"
    augmentation: str = "online"
    batch_size: int = 64
    lr_initial: float = 0.1
    lr_drop_epochs: tuple[int, ...] = (100, 140)
    total_epochs: int = 160
    momentum: float = 0.9
    weight_decay: float = 5e-4
    master_seed: int = 0
    output_dir: str = "runs/default"
    # mini-CIFAR-10 construction
    mini_per_class: int = 100
    mini_seed: int = 0
    # fixed-seed subsets for desk-scale runs; None keeps everything
    train_subset: Optional[int] = None
    test_subset: Optional[int] = None
    # image-folder datasets
    train_manifest: str = "train.txt"
    test_manifest: str = "test.txt"
    image_size: int = 64
    eval_every: int = 1
    flip_crop: bool = False
    # feed permuted images to the classification head too
    classify_permuted: bool = True
    log_wall_clock: bool = False

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        self.lr_drop_epochs = tuple(int(e) for e in self.lr_drop_epochs)
        self.validate()
        # the permutation head exists exactly when its loss is trained
        self.model = replace(self.model, permutation_head=self.loss.use_permutation_loss)

    def validate(self) -> None:
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.augmentation not in AUGMENTATIONS:
            raise ConfigError(f"augmentation must be one of {AUGMENTATIONS}, got {self.augmentation!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be at least 1")
        drops = self.lr_drop_epochs
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ConfigError(f"lr_drop_epochs must be strictly increasing, got {drops}")
        if drops and (drops[0] < 0 or drops[-1] >= self.total_epochs):
            raise ConfigError(f"lr_drop_epochs must lie in [0, total_epochs), got {drops}")
        if self.lr_initial <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("lr_initial must be positive; momentum and weight_decay non-negative")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be non-negative")
        if self.loss.use_permutation_loss and self.augmentation == "none":
            raise ConfigError("the permutation loss needs permuted inputs (augmentation online or offline)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        except ContractError as exc:
            raise ConfigError(str(exc)) from exc


def lr_at_epoch(epoch: int, config: TrainConfig) -> float:
    """Initial rate divided by 10 for every drop epoch reached (a drop applies at its own epoch)."""
    if not 0 <= epoch < config.total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {config.total_epochs})")
    drops = sum(1 for e in config.lr_drop_epochs if e <= epoch)
    return config.lr_initial / 10.0 ** drops


class SGD:
    """Heavy-ball SGD: ``v = m*v + (g + wd*p); p -= lr*v``.

    Weight decay is skipped for parameters with ``decay=False`` (batch-norm
    affine terms). Running statistics are buffers, never parameters, so they
    are untouched here.
    """

    def __init__(self, params: Sequence[Parameter], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p in self.params:
            if p.grad is None:
                raise ContractError("parameter without gradient in SGD step")
        for p, v in zip(self.params, self.velocity):
            g = p.grad
            if self.weight_decay and getattr(p, "decay", True):
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v


def sgd_update(params: Sequence[Parameter], lr: float, momentum: float, weight_decay: float,
               velocity: Optional[list] = None) -> list:
    """Functional form of one :class:`SGD` step; returns the updated velocities."""
    opt = SGD(params, momentum, weight_decay)
    if velocity is not None:
        opt.velocity = velocity
    opt.step(lr)
    return opt.velocity


@dataclass
class MetricsRow:
    epoch: int
    lr: float
    l_classification: float
    l_total: float
    l_permutation: Optional[float] = None
    l_std: Optional[float] = None
    l_mean: Optional[float] = None
    l_feature: Optional[float] = None
    train_acc: Optional[float] = None
    test_acc: Optional[float] = None
    seconds: Optional[float] = None


@dataclass
class TrainReport:
    final_test_acc: Optional[float]
    best_test_acc: Optional[float]
    best_epoch: Optional[int]
    param_count: int
    checkpoint_path: Path
    metrics_path: Path
    rows: list = field(repr=False)
    first_step: Optional[dict] = field(default=None, repr=False)
    last_step: Optional[dict] = field(default=None, repr=False)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(rows: Sequence[MetricsRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(getattr(row, c)) for c in METRIC_COLUMNS])
    return buf.getvalue()


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (None if v == "" else float(v)) for k, v in row.items()} for row in rows]


# ------------------------------------------------------------------- datasets
def load_datasets(config: TrainConfig) -> tuple[Dataset, Optional[Dataset]]:
    """Training and test splits named by the config, subsets applied."""
    root = Path(config.data_dir)
    if config.dataset == "mini_cifar10":
        mini = root / MINI_TRAIN_FILE
        if mini.is_file():
            train = load_cifar10_binary([mini], "train")
            test_path = root / "test_batch.bin"
            test = load_cifar10_binary([test_path], "test") if test_path.is_file() else None
        else:
            train_paths, test_path = find_cifar10_files(root)
            train = make_mini_cifar10(load_cifar10_binary(train_paths, "train"),
                                      config.mini_per_class, config.mini_seed)
            test = load_cifar10_binary([test_path], "test")
    else:
        train = load_image_folder(root, config.train_manifest, config.image_size, split="train")
        test_manifest = Path(config.test_manifest)
        if not test_manifest.is_absolute():
            test_manifest = root / test_manifest
        test = (load_image_folder(root, test_manifest, config.image_size, train.class_names, "test")
                if test_manifest.is_file() else None)
    if config.train_subset is not None:
        train = fixed_subset(train, config.train_subset, config.master_seed)
    if test is not None and config.test_subset is not None:
        test = fixed_subset(test, config.test_subset, config.master_seed + 1)
    if len(train) == 0:
        raise ContractError("training split is empty")
    return train, test


def fixed_subset(dataset: Dataset, size: int, seed: int) -> Dataset:
    if size >= len(dataset):
        return dataset
    idx = np.sort(np.random.default_rng([seed, 64]).choice(len(dataset), size=size, replace=False))
    return dataset.subset(idx)


# ------------------------------------------------------------------ evaluation
def predict(model: ResNet18, dataset: Dataset, stats: NormalizationStats, batch_size: int = 200) -> np.ndarray:
    preds = []
    with no_grad():
        for batch in batches(dataset, batch_size, None, "identity_only", 0, stats):
            logits = model(batch.images, training=False).class_logits.data
            preds.append(logits.argmax(axis=1))  # first maximum wins ties
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model: ResNet18, dataset: Dataset, stats: Optional[NormalizationStats] = None,
             batch_size: int = 200) -> float:
    """Top-1 accuracy on unpermuted images, eval-mode batch norm."""
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    preds = predict(model, dataset, stats or NormalizationStats.identity(), batch_size)
    return float(np.mean(preds == dataset.class_labels))


# -------------------------------------------------------------------- training
def _augmentation_mode(config: TrainConfig) -> str:
    return "online_uniform" if config.augmentation == "online" else "identity_only"


def _step_losses(model: ResNet18, batch, stats: NormalizationStats, config: TrainConfig) -> tuple[LossBreakdown, np.ndarray]:
    out = model(batch.images, training=True)
    class_logits, features = out.class_logits, out.tapped_features
    permuted = config.augmentation != "none"
    if permuted and not config.classify_permuted:
        plain = model(Tensor(stats.normalize(batch.unpermuted)), training=True)
        class_logits, features = plain.class_logits, plain.tapped_features
    breakdown = total_loss(class_logits, batch.class_labels, out.perm_logits, batch.perm_labels,
                           features, config.loss)
    return breakdown, class_logits.data.argmax(axis=1)


def _write_json(path: Path, payload: dict) -> None:
    atomic_write_bytes(path, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def train(config: TrainConfig) -> TrainReport:
    """Run the full schedule; writes metrics.csv, checkpoints and report.json to output_dir.

    Everything written is a function of the config alone; wall-clock times go to
    timing.csv unless ``log_wall_clock`` puts them in the metrics file too.
    """
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_set, test_set = load_datasets(config)
    stats = compute_normalization(train_set)
    if config.augmentation == "offline":
        train_set = expand_dataset_offline(train_set)
    model_cfg = replace(config.model, num_classes=len(train_set.class_names)) \
        if config.model.num_classes != len(train_set.class_names) else config.model
    model = build_model(model_cfg, seed=config.master_seed)
    opt = SGD(model.parameters(), config.momentum, config.weight_decay)
    mode = _augmentation_mode(config)
    metrics_path = out_dir / "metrics.csv"
    header_meta = {
        "config": config.to_dict(),
        "normalization": asdict(stats),
        "class_names": list(train_set.class_names),
    }
    _write_json(out_dir / "config.json", config.to_dict())

    rows: list[MetricsRow] = []
    timings: list[tuple[int, float]] = []
    best_acc, best_epoch, first_step, last_step = None, None, None, None
    ckpt_path = out_dir / "final.ckpt"
    step = 0
    for epoch in range(config.total_epochs):
        t0 = time.perf_counter()
        lr = lr_at_epoch(epoch, config)
        sums = dict.fromkeys(LOSS_TERMS, 0.0)
        seen = correct = 0
        for batch in batches(train_set, config.batch_size, config.master_seed, mode, epoch, stats, config.flip_crop):
            breakdown, preds = _step_losses(model, batch, stats, config)
            terms = breakdown.as_row()
            bad = {k: v for k, v in terms.items() if v is not None and not math.isfinite(v)}
            if bad:
                raise NumericalError(f"non-finite loss at epoch {epoch}, step {step}: {terms}")
            model.zero_grad()
            breakdown.total.backward()
            opt.step(lr)
            n = len(batch.class_labels)
            for k in LOSS_TERMS:
                if terms[k] is not None:
                    sums[k] += terms[k] * n
            seen += n
            correct += int(np.sum(preds == batch.class_labels))
            if first_step is None:
                first_step = terms
            last_step = terms
            step += 1

        test_acc = None
        due = config.eval_every and ((epoch + 1) % config.eval_every == 0 or epoch == config.total_epochs - 1)
        if test_set is not None and len(test_set) and due:
            test_acc = evaluate(model, test_set, stats)
            if best_acc is None or test_acc > best_acc:
                best_acc, best_epoch = test_acc, epoch
        elapsed = time.perf_counter() - t0
        timings.append((epoch, elapsed))
        present = lambda k: sums[k] / seen if terms[k] is not None else None  # noqa: E731
        row = MetricsRow(
            epoch=epoch, lr=lr,
            l_classification=sums["l_classification"] / seen, l_total=sums["l_total"] / seen,
            l_permutation=present("l_permutation"), l_std=present("l_std"), l_mean=present("l_mean"),
            l_feature=present("l_feature"), train_acc=correct / seen, test_acc=test_acc,
            seconds=elapsed if config.log_wall_clock else None,
        )
        rows.append(row)
        text = metrics_csv(rows)
        atomic_write_bytes(metrics_path, text.encode("utf-8"))
        atomic_write_bytes(out_dir / "timing.csv",
                           ("epoch,seconds\n" + "".join(f"{e},{s:.3f}\n" for e, s in timings)).encode())
        logger.info("epoch %d lr %g loss %.4f train_acc %.3f test_acc %s",
                    epoch, lr, row.l_total, row.train_acc, "-" if test_acc is None else f"{test_acc:.4f}")

        last = epoch == config.total_epochs - 1
        if (epoch + 1) in config.lr_drop_epochs or last:
            meta = dict(header_meta, epoch=epoch, metrics_digest=hashlib.sha256(text.encode()).hexdigest())
            path = ckpt_path if last else out_dir / f"epoch{epoch:04d}.ckpt"
            save_checkpoint(model, meta, path)

    final_acc = rows[-1].test_acc
    report = TrainReport(final_acc, best_acc, best_epoch, param_count(model), ckpt_path, metrics_path,
                         rows, first_step, last_step)
    _write_json(out_dir / "report.json", {
        "final_test_acc": final_acc,
        "best_test_acc": best_acc,
        "best_epoch": best_epoch,
        "param_count": report.param_count,
        "master_seed": config.master_seed,
        "mini_seed": config.mini_seed,
        "momentum": config.momentum,
        "weight_decay": config.weight_decay,
        "train_size": len(train_set),
        "test_size": None if test_set is None else len(test_set),
        "steps": step,
        "first_step": first_step,
        "last_step": last_step,
    })
    return report


# ------------------------------------------------------------------- ablation
@dataclass
class AblationCell:
    name: str
    variant: str
    augmentation: bool
    permutation_loss: bool
    feature_loss: bool


@dataclass
class AblationRow:
    cell: str
    variant: str
    augmentation: bool
    permutation_loss: bool
    feature_loss: bool
    config_hash: str
    final_test_acc: Optional[float]
    best_test_acc: Optional[float]
    param_count: int
    perm_head_params: int
    status: str


ABLATION_COLUMNS = tuple(f.name for f in fields(AblationRow))


def ablation_cells() -> list[AblationCell]:
    """Model x augmentation x permutation loss x feature loss; no permutation loss without augmentation."""
    cells = []
    for variant in ("baseline", "improved"):
        for aug in (False, True):
            for perm in ((False, True) if aug else (False,)):
                for feat in (False, True):
                    name = f"{variant}-aug{int(aug)}-perm{int(perm)}-feat{int(feat)}"
                    cells.append(AblationCell(name, variant, aug, perm, feat))
    return cells


def cell_config(base: TrainConfig, cell: AblationCell, root: Path) -> TrainConfig:
    base_aug = base.augmentation if base.augmentation != "none" else "online"
    return replace(
        base,
        model=replace(base.model, variant=cell.variant),
        loss=replace(base.loss, use_permutation_loss=cell.permutation_loss, use_feature_loss=cell.feature_loss),
        augmentation=base_aug if cell.augmentation else "none",
        output_dir=str(root / cell.name),
    )


def config_hash(config: TrainConfig) -> str:
    payload = config.to_dict()
    payload.pop("output_dir")
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]


def _run_cell(args) -> AblationRow:
    cfg, cell = args
    counts = build_model(replace(cfg.model, permutation_head=cfg.loss.use_permutation_loss), cfg.master_seed)
    head = param_count(counts.perm_fc) if counts.perm_fc is not None else 0
    row = AblationRow(cell.name, cell.variant, cell.augmentation, cell.permutation_loss, cell.feature_loss,
                      config_hash(cfg), None, None, param_count(counts) - head, head, "ok")
    try:
        report = train(cfg)
        row.final_test_acc, row.best_test_acc = report.final_test_acc, report.best_test_acc
    except Exception as exc:  # a failed cell is recorded; the grid carries on
        logger.exception("ablation cell %s failed", cell.name)
        row.status = f"failed: {type(exc).__name__}: {exc}"
    return row


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ABLATION_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(getattr(row, c)) for c in ABLATION_COLUMNS])
    return buf.getvalue()


def run_ablation(base: TrainConfig, output_dir=None, jobs: int = 1,
                 cells: Optional[Sequence[AblationCell]] = None) -> list[AblationRow]:
    """Train every valid grid cell with identical seeds; writes ablation.csv."""
    root = Path(output_dir or base.output_dir)
    cells = list(cells) if cells is not None else ablation_cells()
    work = [(cell_config(base, cell, root), cell) for cell in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_cell, work))
    else:
        rows = [_run_cell(item) for item in work]
    atomic_write_bytes(root / "ablation.csv", ablation_csv(rows).encode("utf-8"))
    return rows
