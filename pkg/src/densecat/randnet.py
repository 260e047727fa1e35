"""Budget-constrained random networks with add or concat shortcuts, trained in pairs.

A pair shares every sampled choice except the shortcut: the add variant keeps
the stem width through all blocks, the concat variant grows by the growth rate
per block (with periodic 1x1 compression).  Both variants must fit the budget
for a draw to be accepted, so the comparison is never skewed by one side
being rejected more often.
"""

from __future__ import annotations

import csv
import io
import json
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import multiprocessing
import numpy as np
from scipy.stats import binomtest

from .blocks import TransitionConfig
from .cost import count_macs, count_params, estimate_peak_memory
from .graph import INPUT, GraphBuilder, GraphError, ModuleGraph, config_hash
from .train.data import ImageDataset
from .train.loop import TrainConfig, train

SPACES_RESOURCE = "randnet_spaces.json"
SPACE_SCHEMA = "densecat.randspace/1"
PAIRED_SCHEMA = "densecat.paired/1"
SHORTCUTS = ("add", "concat")
BLOCK_KINDS = ("PreNorm", "PostNorm", "PostNormNoAct")
MAX_TRIES = 1000


class BudgetError(ValueError):
    """No draw satisfied the budget; ``cap`` names the most frequently violated limit."""

    def __init__(self, cap: str, limit: int, best: int, tries: int):
        self.cap, self.limit, self.best, self.tries = cap, limit, best, tries
        super().__init__(f"budget unsatisfiable after {tries} tries: {cap} <= {limit} "
                         f"violated most often (smallest value seen {best})")


@dataclass(frozen=True)
class Budget:
    max_params: int
    max_macs: int
    max_activation_bytes: int

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"budget {f.name} must be positive")

    def costs(self, graph: ModuleGraph, input_shape) -> dict[str, int]:
        return {"max_params": count_params(graph), "max_macs": count_macs(graph, input_shape),
                "max_activation_bytes": estimate_peak_memory(graph, input_shape)}

    def violations(self, costs: dict[str, int]) -> list[str]:
        return [k for k, v in costs.items() if v > getattr(self, k)]

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RandSpec:
    space_id: str
    depth: tuple = (4, 16)
    widths: tuple = (16, 24, 32, 48, 64)
    growth_rates: tuple = (8, 12, 16, 24, 32)
    kernels: tuple = (3, 5, 7)
    activations: tuple = ("relu", "gelu", "silu")
    norms: tuple = ("batch", "layer")
    block_kinds: tuple = BLOCK_KINDS
    augment: Optional[dict] = None
    optimizer: str = "sgd"
    base_lr: Optional[float] = None
    stem_stride: int = 1
    compress_every: int = 4
    input_size: int = 32
    num_classes: int = 10

    def __post_init__(self):
        for name in ("widths", "growth_rates", "kernels", "activations", "norms", "block_kinds"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "depth", tuple(self.depth))
        errs = []
        lo, hi = self.depth
        if not 1 <= lo <= hi:
            errs.append(f"depth range {self.depth} is empty")
        for name in ("widths", "growth_rates", "kernels", "activations", "norms", "block_kinds"):
            if not getattr(self, name):
                errs.append(f"{name} must be non-empty")
        if not set(self.kernels) <= {1, 3, 5, 7}:
            errs.append(f"kernels must be a subset of (1, 3, 5, 7), got {self.kernels}")
        if not set(self.activations) <= {"relu", "gelu", "silu"}:
            errs.append(f"unknown activation in {self.activations}")
        if not set(self.norms) <= {"batch", "layer"}:
            errs.append(f"unknown norm in {self.norms}")
        if not set(self.block_kinds) <= set(BLOCK_KINDS):
            errs.append(f"block kinds must be a subset of {BLOCK_KINDS}")
        if self.optimizer not in ("sgd", "adamw"):
            errs.append(f"optimizer must be sgd or adamw, got {self.optimizer!r}")
        if self.space_id in ("D", "E") and not self.augment:
            errs.append(f"space {self.space_id} must include augmentation")
        if self.space_id == "E" and self.optimizer != "adamw":
            errs.append("space E uses adamw")
        if errs:
            raise ValueError("invalid RandSpec: " + "; ".join(errs))

    def to_json(self) -> dict:
        doc = asdict(self)
        for k, v in doc.items():
            if isinstance(v, tuple):
                doc[k] = list(v)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "RandSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known - {"schema", "budget"})
        if unknown:
            raise ValueError(f"unknown RandSpec fields {unknown}")
        return cls(**{k: v for k, v in doc.items() if k in known})


def load_spaces() -> dict:
    """The versioned default spaces document (spaces A-E with their budgets)."""
    text = resources.files("densecat").joinpath("data", SPACES_RESOURCE).read_text()
    doc = json.loads(text)
    if doc.get("schema") != SPACE_SCHEMA:
        raise ValueError(f"unexpected spaces schema {doc.get('schema')!r}")
    return doc


def default_space(space_id: str) -> tuple[RandSpec, Budget]:
    doc = load_spaces()
    if space_id not in doc["spaces"]:
        raise KeyError(f"unknown space {space_id!r}; available: {sorted(doc['spaces'])}")
    entry = dict(doc["spaces"][space_id])
    budget = Budget(**entry.pop("budget"))
    return RandSpec(space_id=space_id, **entry), budget


@dataclass(frozen=True)
class RandNetConfig:
    shortcut: str
    depth: int
    width: int
    growth_rate: int
    kernel: int
    activation: str
    norm: str
    block_kind: str
    stem_stride: int = 1
    compress_every: int = 4
    compress_ratio: float = 0.5
    rounding: int = 8
    num_classes: int = 10
    in_channels: int = 3
    input_size: int = 32
    space_id: str = ""
    augment: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.shortcut not in SHORTCUTS:
            raise ValueError(f"shortcut must be add or concat, got {self.shortcut!r}")
        if self.block_kind not in BLOCK_KINDS:
            raise ValueError(f"block kind must be one of {BLOCK_KINDS}, got {self.block_kind!r}")

    def build(self) -> ModuleGraph:
        return build_randnet(self)

    def input_shape(self, batch: int = 1) -> tuple:
        return (batch, self.in_channels, self.input_size, self.input_size)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "RandNetConfig":
        return cls(**{k: v for k, v in doc.items() if k != "schema"})


def add_randnet_block(b: GraphBuilder, x: str, kind: str, shortcut: str, width: int, kernel: int,
                      activation: str, norm: str, prefix: str, drop_rate: float = 0.0) -> str:
    """One sampled block; ``width`` is the branch output (= input width for add, GR for concat)."""
    c = b.ch[x]
    if shortcut == "add" and width != c:
        raise GraphError(f"{prefix}: add shortcut needs branch width {c}, got {width}")
    if shortcut not in SHORTCUTS:
        raise GraphError(f"{prefix}: unknown shortcut {shortcut!r}")
    if kind == "PreNorm":
        h = b.norm(f"{prefix}.norm", x, norm)
        h = b.act(f"{prefix}.act", h, activation)
        h = b.conv(f"{prefix}.conv", h, width, kernel, init="fan_in")
    elif kind in ("PostNorm", "PostNormNoAct"):
        h = b.conv(f"{prefix}.conv", x, width, kernel, bias=False, init="fan_in")
        h = b.norm(f"{prefix}.norm", h, norm)
    else:
        raise GraphError(f"{prefix}: unknown block kind {kind!r}")
    h = b.add(f"{prefix}.drop_path", "drop_path", h, rate=float(drop_rate))
    merged = "add" if shortcut == "add" else "concat"
    out = b.add(f"{prefix}.{merged}", merged, [x, h])
    if kind == "PostNorm":
        out = b.act(f"{prefix}.post_act", out, activation)
    return out


def build_randnet_block(kind: str, shortcut: str, width: int, kernel: int, activation: str,
                        norm: str, c_in: Optional[int] = None) -> ModuleGraph:
    """Standalone fragment; ``c_in`` defaults to ``width`` (required to match for add)."""
    b = GraphBuilder(c_in if c_in is not None else width)
    add_randnet_block(b, INPUT, kind, shortcut, width, kernel, activation, norm, "block")
    return b.build({"kind": "randnet_block", "block_kind": kind, "shortcut": shortcut})


def build_randnet(cfg: RandNetConfig) -> ModuleGraph:
    """Stem conv, one stage of sampled blocks, global average pool, linear head."""
    b = GraphBuilder(cfg.in_channels)
    x = b.conv("stem.conv", INPUT, cfg.width, 3, stride=cfg.stem_stride, bias=False, init="fan_in")
    x = b.norm("stem.norm", x, cfg.norm)
    x = b.act("stem.act", x, cfg.activation)
    branch = cfg.width if cfg.shortcut == "add" else cfg.growth_rate
    transitions = []
    for i in range(cfg.depth):
        x = add_randnet_block(b, x, cfg.block_kind, cfg.shortcut, branch, cfg.kernel,
                              cfg.activation, cfg.norm, f"blocks.{i}")
        if cfg.shortcut == "concat" and (i + 1) % cfg.compress_every == 0 and i + 1 < cfg.depth:
            t = TransitionConfig(b.ch[x], cfg.compress_ratio, 1, cfg.rounding)
            x = b.norm(f"compress.{len(transitions)}.norm", x, cfg.norm)
            x = b.conv(f"compress.{len(transitions)}.conv", x, t.c_out, 1, init="fan_in")
            transitions.append(t.c_out)
    x = b.add("head.pool", "global_pool", x)
    x = b.add("head.flatten", "flatten", x)
    b.add("head.fc", "linear", x, din=b.ch[x], dout=cfg.num_classes, bias=True)
    return b.build({"kind": "randnet", "config": cfg.to_json(), "compressions": transitions})


# -- sampling -------------------------------------------------------------------------


def _draw(spec: RandSpec, rng: np.random.Generator) -> dict:
    def pick(options):
        return options[int(rng.integers(len(options)))]

    choice = {
        "depth": int(rng.integers(spec.depth[0], spec.depth[1] + 1)),
        "width": int(pick(spec.widths)),
        "growth_rate": int(pick(spec.growth_rates)),
        "kernel": int(pick(spec.kernels)),
        "activation": pick(spec.activations),
        "norm": pick(spec.norms),
        "block_kind": pick(spec.block_kinds),
    }
    augment = {}
    for key, values in sorted((spec.augment or {}).items()):
        augment[key] = pick(list(values))
    choice["augment"] = augment
    return choice


def variant(spec: RandSpec, choice: dict, shortcut: str) -> RandNetConfig:
    return RandNetConfig(shortcut=shortcut, stem_stride=spec.stem_stride,
                         compress_every=spec.compress_every, num_classes=spec.num_classes,
                         input_size=spec.input_size, space_id=spec.space_id, **choice)


def costs_of(cfg: RandNetConfig, budget: Budget) -> dict[str, int]:
    return budget.costs(cfg.build(), cfg.input_shape())


def sample_pair(spec: RandSpec, budget: Budget, seed: int,
                stats: Optional[dict] = None) -> dict[str, RandNetConfig]:
    """Rejection-sample one draw whose add and concat variants both fit the budget.

    When ``stats`` is given, ``stats["tries"]`` is incremented once per draw.
    """
    rng = np.random.default_rng(seed)
    violated: Counter = Counter()
    best: dict[str, int] = {}
    for _ in range(MAX_TRIES):
        if stats is not None:
            stats["tries"] = stats.get("tries", 0) + 1
        choice = _draw(spec, rng)
        pair = {s: variant(spec, choice, s) for s in SHORTCUTS}
        bad = []
        for cfg in pair.values():
            costs = costs_of(cfg, budget)
            for cap in budget.violations(costs):
                bad.append(cap)
                best[cap] = min(best.get(cap, costs[cap]), costs[cap])
        if not bad:
            return pair
        violated.update(set(bad))
    # ties go to the cap whose best draw overshoots its limit by the largest factor
    cap = max(sorted(violated), key=lambda k: (violated[k], best[k] / getattr(budget, k)))
    raise BudgetError(cap, getattr(budget, cap), best[cap], MAX_TRIES)


def sample_network(spec: RandSpec, shortcut: str, budget: Budget, seed: int) -> RandNetConfig:
    if shortcut not in SHORTCUTS:
        raise ValueError(f"shortcut must be add or concat, got {shortcut!r}")
    return sample_pair(spec, budget, seed)[shortcut]


# -- paired experiments ----------------------------------------------------------------


def derive_seed(master_seed: int, pair_id: int, kind: str) -> int:
    tag = {"arch": 0, "add": 1, "concat": 2}[kind]
    return int(np.random.SeedSequence([master_seed, pair_id, tag]).generate_state(1)[0])


@dataclass
class RunRecord:
    pair_id: int
    shortcut: str
    seed: int
    params: int
    macs: int
    final_acc: Optional[float]
    epochs: int
    status: str
    config_hash: str
    curve: list = field(default_factory=list)
    failure: str = ""


RUN_COLUMNS = ("pair_id", "shortcut", "seed", "params", "macs", "final_acc", "epochs", "status",
               "config_hash")


@dataclass
class PairedResult:
    records: list[RunRecord]
    summary: dict
    configs: dict = field(default_factory=dict)

    def accuracies(self, shortcut: str) -> list[float]:
        return [r.final_acc for r in self.records if r.shortcut == shortcut and r.status == "ok"]

    def runs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RUN_COLUMNS)
        for r in self.records:
            acc = "" if r.final_acc is None else repr(r.final_acc)
            w.writerow([r.pair_id, r.shortcut, r.seed, r.params, r.macs, acc, r.epochs, r.status,
                        r.config_hash])
        return buf.getvalue()

    def cdf_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["shortcut", "rank", "final_acc", "cum_prob"])
        for kind in SHORTCUTS:
            accs = sorted(self.accuracies(kind))
            for i, a in enumerate(accs):
                w.writerow([kind, i + 1, repr(a), repr((i + 1) / len(accs))])
        return buf.getvalue()

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {"runs.csv": self.runs_csv(), "cdf.csv": self.cdf_csv(),
                 "summary.json": json.dumps(self.summary, indent=1, sort_keys=True) + "\n",
                 "configs.json": json.dumps(self.configs, indent=1, sort_keys=True) + "\n"}
        paths = []
        for name, text in files.items():
            (out / name).write_text(text)
            paths.append(out / name)
        return paths


def summarize(records: Sequence[RunRecord], n_pairs: int, master_seed: int, space_id: str) -> dict:
    kinds = {}
    for kind in SHORTCUTS:
        accs = [r.final_acc for r in records if r.shortcut == kind and r.status == "ok"]
        kinds[kind] = {
            "count": len(accs),
            "failures": sum(1 for r in records if r.shortcut == kind and r.status != "ok"),
            "mean": float(np.mean(accs)) if accs else None,
            "std": float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0,
        }
    by_pair: dict[int, dict[str, float]] = {}
    for r in records:
        if r.status == "ok":
            by_pair.setdefault(r.pair_id, {})[r.shortcut] = r.final_acc
    diffs = [p["concat"] - p["add"] for p in by_pair.values() if len(p) == 2]
    wins = sum(d > 0 for d in diffs)
    losses = sum(d < 0 for d in diffs)
    p = binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue if wins + losses else 1.0
    return {
        "schema": PAIRED_SCHEMA,
        "space_id": space_id,
        "pairs": n_pairs,
        "master_seed": master_seed,
        "kinds": kinds,
        "paired": {"complete_pairs": len(diffs), "concat_wins": int(wins), "add_wins": int(losses),
                   "ties": len(diffs) - int(wins) - int(losses),
                   "mean_difference": float(np.mean(diffs)) if diffs else None,
                   "sign_test_p": float(p)},
    }


_SHARED: dict = {}


def _train_member(task: dict) -> RunRecord:
    cfg = RandNetConfig.from_json(task["config"])
    graph = cfg.build()
    graph.initialize(task["seed"])
    costs = (count_params(graph), count_macs(graph, cfg.input_shape()))
    tcfg = TrainConfig.from_json(task["train"])
    try:
        summary = train(graph, _SHARED["train"], tcfg, _SHARED.get("eval"))
        failed, failure = summary.failed, summary.failure
    except FloatingPointError as exc:
        summary, failed, failure = None, True, str(exc)
    return RunRecord(
        pair_id=task["pair_id"], shortcut=cfg.shortcut, seed=task["seed"], params=costs[0],
        macs=costs[1], final_acc=None if failed else summary.final_acc, epochs=tcfg.epochs,
        status="failed" if failed else "ok", config_hash=config_hash(graph),
        curve=[] if summary is None else list(summary.eval_acc), failure=failure)


def worker_count(requested: Optional[int], tasks: int) -> int:
    if requested is None:
        env = os.environ.get("DENSECAT_THREADS")
        requested = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(requested, tasks))


def member_train_config(spec: RandSpec, base: TrainConfig, cfg: RandNetConfig, seed: int) -> TrainConfig:
    """The shared training recipe, with the space's optimizer and the pair's augmentation draw."""
    over = {"seed": seed, "optimizer": spec.optimizer}
    if spec.base_lr is not None:
        over["base_lr"] = spec.base_lr
    over.update(cfg.augment)
    return base.replace(**over)


def plan_pairs(spec: RandSpec, budget: Budget, n_pairs: int, master_seed: int):
    """The deterministic list of training tasks (two per pair, add first).

    Pair ``i`` comes from the next seed slot whose draws fit the budget.  A slot
    that exhausts ``MAX_TRIES`` is skipped; whether a slot fails does not depend
    on any other slot, so the accepted pairs keep the sampler's distribution.
    After ``n_pairs`` skipped slots the budget is treated as unsatisfiable.
    Returns ``(tasks, skipped_slots)``.
    """
    tasks, skipped = [], []
    slot = 0
    while len(tasks) < 2 * n_pairs:
        try:
            pair = sample_pair(spec, budget, derive_seed(master_seed, slot, "arch"))
        except BudgetError:
            skipped.append(slot)
            if len(skipped) >= n_pairs:
                raise
            slot += 1
            continue
        pair_id = len(tasks) // 2
        for kind in SHORTCUTS:
            tasks.append({"pair_id": pair_id, "slot": slot, "config": pair[kind].to_json(),
                          "seed": derive_seed(master_seed, slot, kind)})
        slot += 1
    return tasks, skipped


def run_paired_experiment(spec: RandSpec, budget: Budget, n_pairs: int, train_cfg: TrainConfig,
                          train_set: ImageDataset, eval_set: Optional[ImageDataset] = None,
                          master_seed: int = 0, workers: Optional[int] = None) -> PairedResult:
    """Train ``n_pairs`` add/concat pairs; results do not depend on ``workers``."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    if train_set.classes != spec.num_classes:
        raise ValueError(f"spec has {spec.num_classes} classes, dataset has {train_set.classes}")
    tasks, skipped = plan_pairs(spec, budget, n_pairs, master_seed)
    for t in tasks:
        cfg = RandNetConfig.from_json(t["config"])
        t["train"] = member_train_config(spec, train_cfg, cfg, t["seed"]).to_json()
    _SHARED["train"], _SHARED["eval"] = train_set, eval_set
    try:
        n = worker_count(workers, len(tasks))
        if n == 1:
            records = [_train_member(t) for t in tasks]
        else:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(n, mp_context=ctx) as pool:
                records = list(pool.map(_train_member, tasks))
    finally:
        _SHARED.clear()
    records.sort(key=lambda r: (r.pair_id, SHORTCUTS.index(r.shortcut)))
    configs = {f"{t['pair_id']}/{t['config']['shortcut']}": t["config"] for t in tasks}
    summary = summarize(records, n_pairs, master_seed, spec.space_id)
    summary["skipped_slots"] = skipped
    return PairedResult(records, summary, configs)


def read_runs_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))
