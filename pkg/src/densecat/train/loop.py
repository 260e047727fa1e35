"""Training loop, run summaries and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .. import ops
from ..graph import ModuleGraph, config_hash, deserialize_architecture, serialize_architecture
from ..tensor import Tape, Tensor, read_tensor, write_tensor
from .augment import color_jitter, cutmix, mixup, one_hot, random_erase
from .data import ImageDataset
from .optim import SGD, AdamW
from .schedule import cosine_lr

SUMMARY_SCHEMA = "densecat.run/1"
CHECKPOINT_SCHEMA = "densecat.checkpoint/1"


class TrainConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Optimization recipe.

    Defaults are the large-scale AdamW recipe (batch 512, lr 1e-4, wd 0.05,
    label smoothing 0.1, mixup 0.8, cutmix 1.0, random erasing 0.25); the
    epoch and warmup counts are not confirmed by a published table.  Use
    :meth:`desk` for something that finishes on a laptop.
    """

    optimizer: str = "adamw"
    base_lr: float = 1e-4
    min_lr: float = 1e-6
    weight_decay: float = 0.05
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 300
    warmup_epochs: int = 20
    batch_size: int = 512
    label_smoothing: float = 0.1
    mixup_alpha: float = 0.8
    cutmix_alpha: float = 1.0
    mix_prob: float = 1.0
    random_erase_prob: float = 0.25
    color_jitter: float = 0.0
    drop_path_rate: Optional[float] = None
    drop_path_ramp: bool = False
    eval_batch_size: int = 256
    seed: int = 0
    single_thread: bool = True

    def __post_init__(self):
        errs = self.violations()
        if errs:
            raise TrainConfigError("; ".join(errs))

    def violations(self) -> list[str]:
        errs = []
        if self.optimizer not in ("sgd", "adamw"):
            errs.append(f"optimizer must be sgd or adamw, got {self.optimizer!r}")
        if self.epochs < 0 or self.warmup_epochs < 0:
            errs.append("epochs and warmup_epochs must be non-negative")
        elif self.epochs > 0 and not self.epochs > self.warmup_epochs:
            errs.append(f"epochs ({self.epochs}) must exceed warmup_epochs ({self.warmup_epochs})")
        for name in ("random_erase_prob", "mix_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                errs.append(f"{name} must be in [0, 1], got {v}")
        if not 0.0 <= self.label_smoothing < 1.0:
            errs.append(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.drop_path_rate is not None and not 0.0 <= self.drop_path_rate < 1.0:
            errs.append(f"drop_path_rate must be in [0, 1), got {self.drop_path_rate}")
        if self.mixup_alpha < 0 or self.cutmix_alpha < 0:
            errs.append("mixup_alpha and cutmix_alpha must be non-negative (0 disables)")
        if self.batch_size < 2 or self.eval_batch_size < 1:
            errs.append("batch_size must be >= 2 and eval_batch_size >= 1")
        if self.base_lr <= 0 or self.min_lr < 0:
            errs.append("base_lr must be positive and min_lr non-negative")
        return errs

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Small-data recipe: short AdamW run, no batch mixing or erasing."""
        base = dict(base_lr=2e-3, min_lr=1e-5, weight_decay=0.05, epochs=10, warmup_epochs=1,
                    batch_size=64, label_smoothing=0.0, mixup_alpha=0.0, cutmix_alpha=0.0,
                    random_erase_prob=0.0)
        base.update(overrides)
        return cls(**base)

    def replace(self, **overrides) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **overrides})

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known - {"schema"})
        if unknown:
            raise TrainConfigError(f"unknown train config fields {unknown}; known: {sorted(known)}")
        return cls(**{k: v for k, v in doc.items() if k != "schema"})


@dataclass
class RunSummary:
    seed: int
    epochs: int
    steps: int = 0
    initial_acc: Optional[float] = None
    final_acc: Optional[float] = None
    train_loss: list = field(default_factory=list)
    eval_acc: list = field(default_factory=list)
    failed: bool = False
    failure: str = ""
    architecture_hash: str = ""
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        doc = {"schema": SUMMARY_SCHEMA}
        doc.update(asdict(self))
        return doc

    def curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "eval_acc"])
        for i, loss in enumerate(self.train_loss):
            acc = self.eval_acc[i] if i < len(self.eval_acc) else ""
            w.writerow([i + 1, repr(loss), repr(acc) if acc != "" else ""])
        return buf.getvalue()


def evaluate(graph: ModuleGraph, data: ImageDataset, batch_size: int = 256) -> float:
    """Top-1 accuracy in eval mode on unaugmented images."""
    if len(data) == 0:
        return float("nan")
    correct = 0
    for x, y in data.batches(batch_size):
        logits = graph.forward(Tensor(x), training=False)
        correct += int((logits.data.argmax(axis=1) == y).sum())
    return correct / len(data)


def drop_path_schedule(graph: ModuleGraph, rate: Optional[float], ramp: bool) -> Optional[dict]:
    """Per drop-path node rates: flat, or linearly ramped from 0 to ``rate`` by depth."""
    if rate is None:
        return None
    names = graph.drop_path_nodes()
    if not ramp or len(names) < 2:
        return {n: rate for n in names}
    return {n: rate * i / (len(names) - 1) for i, n in enumerate(names)}


def output_classes(graph: ModuleGraph) -> int:
    return graph.channels()[graph.output]


def _augment(x, y, cfg: TrainConfig, rng):
    if cfg.color_jitter > 0:
        x = color_jitter(x, cfg.color_jitter, rng)
    choices = [k for k, a in (("mixup", cfg.mixup_alpha), ("cutmix", cfg.cutmix_alpha)) if a > 0]
    if choices and rng.random() < cfg.mix_prob:
        kind = choices[int(rng.integers(len(choices)))]
        if kind == "mixup":
            x, y = mixup(x, y, cfg.mixup_alpha, rng)
        else:
            x, y, _ = cutmix(x, y, cfg.cutmix_alpha, rng)
    if cfg.random_erase_prob > 0:
        x = random_erase(x, cfg.random_erase_prob, rng)
    return x, y


def _run(graph, train_set, cfg, eval_set, summary):
    if not graph.initialized:
        graph.initialize(cfg.seed)
    params = graph.parameters()
    names = list(graph.params)
    decay_mask = [t.data.ndim >= 2 for t in params]
    arrays = [t.data for t in params]
    if cfg.optimizer == "sgd":
        opt = SGD(arrays, cfg.momentum, cfg.weight_decay, names, decay_mask)
    else:
        opt = AdamW(arrays, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay, names, decay_mask)
    drop_rates = drop_path_schedule(graph, cfg.drop_path_rate, cfg.drop_path_ramp)
    eval_data = eval_set if eval_set is not None else train_set

    summary.initial_acc = evaluate(graph, eval_data, cfg.eval_batch_size)
    summary.final_acc = summary.initial_acc
    if cfg.epochs == 0:
        return
    # Incomplete trailing batches are dropped so batch statistics stay well defined.
    steps_per_epoch = len(train_set) // cfg.batch_size
    if steps_per_epoch == 0:
        raise TrainConfigError(f"batch_size {cfg.batch_size} exceeds dataset size {len(train_set)}")
    total = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch
    rng = np.random.default_rng([cfg.seed, 1])
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        for xb, yb in train_set.batches(cfg.batch_size, cfg.seed, epoch, drop_last=True):
            x, y = _augment(xb, one_hot(yb, train_set.classes), cfg, rng)
            with Tape() as tape:
                logits = graph.forward(Tensor(x), training=True, rng=rng, drop_rates=drop_rates)
                loss = ops.softmax_cross_entropy(logits, y, cfg.label_smoothing)
            value = loss.item()
            if not math.isfinite(value):
                summary.failed = True
                summary.failure = f"non-finite loss at epoch {epoch + 1}, step {step}"
                return
            grads = tape.backward(loss, params)
            lr = cosine_lr(step, total, warmup, cfg.base_lr, cfg.min_lr)
            try:
                opt.step(grads, lr)
            except FloatingPointError as exc:
                summary.failed = True
                summary.failure = f"{exc} at epoch {epoch + 1}, step {step}"
                return
            losses.append(value)
            step += 1
            summary.steps = step
        summary.train_loss.append(float(np.mean(losses)))
        summary.eval_acc.append(evaluate(graph, eval_data, cfg.eval_batch_size))
        summary.final_acc = summary.eval_acc[-1]


def train(graph: ModuleGraph, train_set: ImageDataset, cfg: TrainConfig,
          eval_set: Optional[ImageDataset] = None) -> RunSummary:
    """Train ``graph`` in place; accuracy is measured on ``eval_set`` (or the training set).

    The run is a pure function of the graph's initial weights, the data and
    ``cfg`` when ``single_thread`` is set (BLAS pools are pinned to one thread).
    """
    classes = output_classes(graph)
    if classes != train_set.classes:
        raise TrainConfigError(f"model has {classes} outputs but dataset has {train_set.classes} classes")
    summary = RunSummary(seed=cfg.seed, epochs=cfg.epochs, architecture_hash=config_hash(graph),
                         config=cfg.to_json())
    if cfg.single_thread:
        with threadpool_limits(limits=1):
            _run(graph, train_set, cfg, eval_set, summary)
    else:
        _run(graph, train_set, cfg, eval_set, summary)
    return summary


def write_run(summary: RunSummary, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "summary.json", out / "curves.csv"]
    paths[0].write_text(json.dumps(summary.to_json(), indent=1, sort_keys=True) + "\n")
    paths[1].write_text(summary.curves_csv())
    return paths


# -- checkpoints -----------------------------------------------------------------------

def _state(graph: ModuleGraph) -> dict[str, np.ndarray]:
    state = {name: t.data for name, t in graph.params.items()}
    state.update(graph.buffers)
    return state


def save_checkpoint(graph: ModuleGraph, path: str | Path) -> tuple[Path, Path]:
    """Write tensors to ``path`` and a JSON manifest next to it (``.json`` suffix).

    The manifest maps each parameter/buffer name to its byte offset and shape
    and embeds the serialized architecture.
    """
    path = Path(path)
    manifest_path = path.with_suffix(".json")
    entries = {}
    offset = 0
    digest = hashlib.sha256()
    with open(path, "wb") as fh:
        for name, arr in _state(graph).items():
            buf = io.BytesIO()
            n = write_tensor(arr, buf)
            fh.write(buf.getvalue())
            digest.update(buf.getvalue())
            entries[name] = {"offset": offset, "bytes": n, "shape": list(arr.shape)}
            offset += n
    manifest = {"schema": CHECKPOINT_SCHEMA, "tensors": entries, "sha256": digest.hexdigest(),
                "architecture": json.loads(serialize_architecture(graph))}
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path, manifest_path


def load_checkpoint(path: str | Path) -> ModuleGraph:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {manifest.get('schema')!r}")
    graph = deserialize_architecture(manifest["architecture"])
    graph.initialize(0)
    with open(path, "rb") as fh:
        for name, entry in manifest["tensors"].items():
            fh.seek(entry["offset"])
            arr = read_tensor(fh).data
            if list(arr.shape) != entry["shape"]:
                raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}, manifest says {entry['shape']}")
            if name in graph.params:
                graph.params[name] = Tensor(arr, requires_grad=True, name=name)
            elif name in graph.buffers:
                graph.buffers[name] = arr
            else:
                raise ValueError(f"checkpoint tensor {name} does not belong to the architecture")
    return graph
