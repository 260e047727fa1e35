"""Named architectures: the RDNet family, DenseNet-201 and the modernization ledger."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional

from .blocks import TransitionConfig, add_dense_stage, add_stem, add_transition
from .graph import INPUT, GraphBuilder, ModuleGraph

BLOCK_KINDS = ("mixer", "classic_dense")


@dataclass(frozen=True)
class ModelConfig:
    stem_channels: int
    growth_rates: tuple[int, ...]
    blocks: tuple[int, ...]
    expansion_ratio: float = 4.0
    transition_interval: int = 3
    transition_ratio: float = 0.5
    kernel: int = 7
    drop_path_rate: float = 0.0
    num_classes: int = 1000
    block_kind: str = "mixer"
    # knobs that let one builder express every ledger step
    stem: str = "patchify"
    transition_style: str = "refined"
    in_stage_transitions: bool = True
    channel_rescale: bool = True
    er_base: str = "input"
    bottleneck_mult: int = 4
    rounding: int = 8
    head: str = "modern"
    drop_path_ramp: bool = False
    in_channels: int = 3

    def violations(self) -> list[str]:
        v = []
        if len(self.growth_rates) != len(self.blocks) or not self.blocks:
            v.append("growth_rates and blocks must be non-empty and of equal length")
        if any(g <= 0 for g in self.growth_rates):
            v.append("growth rates must be positive")
        if any(n <= 0 for n in self.blocks):
            v.append("block counts must be positive")
        if not 0.0 <= self.drop_path_rate < 1.0:
            v.append("drop_path_rate must be in [0, 1)")
        if self.block_kind not in BLOCK_KINDS:
            v.append(f"block_kind must be one of {BLOCK_KINDS}")
        if self.block_kind == "mixer" and self.transition_interval >= 1:
            bad = [n for n in self.blocks if n % self.transition_interval]
            if bad:
                v.append(f"block counts {bad} not divisible by transition_interval "
                         f"{self.transition_interval}")
        if self.transition_interval < 1:
            v.append("transition_interval must be >= 1")
        if self.stem_channels < 1:
            v.append("stem_channels must be >= 1")
        if self.stem not in ("patchify", "classic"):
            v.append("stem must be 'patchify' or 'classic'")
        if self.head not in ("modern", "classic"):
            v.append("head must be 'modern' or 'classic'")
        return v

    def to_json(self) -> dict:
        d = asdict(self)
        d["growth_rates"] = list(self.growth_rates)
        d["blocks"] = list(self.blocks)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["growth_rates"] = tuple(d["growth_rates"])
        d["blocks"] = tuple(d["blocks"])
        return cls(**d)


def _rdnet(stem, gr, blocks) -> ModelConfig:
    return ModelConfig(stem_channels=stem, growth_rates=gr, blocks=blocks)


PRESETS: dict[str, ModelConfig] = {
    "rdnet_t": _rdnet(64, (64, 104, 128, 224), (3, 3, 12, 3)),
    "rdnet_s": _rdnet(64, (64, 128, 128, 240), (3, 3, 21, 6)),
    "rdnet_b": _rdnet(96, (96, 128, 168, 336), (3, 3, 21, 6)),
    "rdnet_l": _rdnet(128, (128, 192, 256, 360), (3, 3, 24, 6)),
}

_CLASSIC = dict(block_kind="classic_dense", stem="classic", transition_style="classic",
                in_stage_transitions=False, channel_rescale=False, head="classic")

LEDGER: dict[str, ModelConfig] = {}
LEDGER["a"] = ModelConfig(stem_channels=64, growth_rates=(32,) * 4, blocks=(6, 12, 48, 32), **_CLASSIC)
LEDGER["b"] = replace(LEDGER["a"], growth_rates=(120,) * 4, blocks=(3, 3, 12, 3))
LEDGER["c"] = replace(LEDGER["b"], block_kind="mixer", er_base="growth", head="modern")
LEDGER["d"] = replace(LEDGER["c"], growth_rates=(60,) * 4, er_base="input")
LEDGER["e"] = replace(LEDGER["d"], growth_rates=(64, 104, 128, 192), in_stage_transitions=True)
LEDGER["f"] = replace(LEDGER["e"], stem="patchify")
LEDGER["g"] = replace(LEDGER["f"], transition_style="refined")
LEDGER["h"] = replace(LEDGER["g"], channel_rescale=True)
PRESETS["densenet201"] = LEDGER["a"]

# Small-input models for 32x32 experiments on one CPU (patchify stem -> 8x8, three stages).
DESK_PRESETS = {
    "rdnet_mini": ModelConfig(stem_channels=24, growth_rates=(16, 24, 32), blocks=(2, 2, 2),
                              expansion_ratio=2.0, transition_interval=2, kernel=3,
                              num_classes=10),
}


def _drop_rates(cfg: ModelConfig) -> list[list[float]]:
    total = sum(cfg.blocks)
    rates, k = [], 0
    for n in cfg.blocks:
        stage = []
        for _ in range(n):
            r = cfg.drop_path_rate * (k / max(total - 1, 1)) if cfg.drop_path_ramp else cfg.drop_path_rate
            stage.append(r)
            k += 1
        rates.append(stage)
    return rates


def build_model(cfg: ModelConfig, name: Optional[str] = None) -> ModuleGraph:
    """stem -> stages (boundary stride-2 transition before every stage but the first) -> head."""
    problems = cfg.violations()
    if problems:
        raise ValueError("invalid ModelConfig: " + "; ".join(problems))
    b = GraphBuilder(cfg.in_channels)
    x = add_stem(b, INPUT, cfg.stem_channels, cfg.stem)
    drop = _drop_rates(cfg)
    stages = []
    for s, (gr, nb) in enumerate(zip(cfg.growth_rates, cfg.blocks)):
        c_in = b.ch[x]
        boundary = None
        if s > 0:
            t = TransitionConfig(c_in, cfg.transition_ratio, 2, cfg.rounding, cfg.transition_style)
            x = add_transition(b, x, t, f"stages.{s}.downsample")
            boundary = t.c_out
        c_blocks = b.ch[x]
        x = add_dense_stage(
            b, x, gr, nb, f"stages.{s}", cfg.transition_interval, cfg.transition_ratio,
            cfg.rounding, block=cfg.block_kind, transitions=cfg.in_stage_transitions,
            transition_style=cfg.transition_style, drop_rates=drop[s],
            expansion_ratio=cfg.expansion_ratio, kernel=cfg.kernel,
            rescale=cfg.channel_rescale, er_base=cfg.er_base, bottleneck_mult=cfg.bottleneck_mult)
        n_trans = (nb // cfg.transition_interval - 1) if cfg.in_stage_transitions else 0
        stages.append({
            "index": s, "growth_rate": gr, "blocks": nb, "er": cfg.expansion_ratio,
            "block": cfg.block_kind, "in_channels": c_in, "block_in_channels": c_blocks,
            "out_channels": b.ch[x], "boundary_transition_channels": boundary,
            "in_stage_transitions": n_trans, "output": x,
            "transition": {"interval": cfg.transition_interval, "ratio": cfg.transition_ratio,
                           "rounding": cfg.rounding, "style": cfg.transition_style},
        })
    if cfg.head == "modern":
        h = b.add("head.pool", "global_pool", x)
        h = b.norm("head.norm", h, "layer")
    else:
        h = b.norm("head.norm", x, "batch")
        h = b.act("head.act", h, "relu")
        h = b.add("head.pool", "global_pool", h)
    h = b.add("head.flatten", "flatten", h)
    b.add("head.fc", "linear", h, din=b.ch[h], dout=cfg.num_classes, bias=True)
    meta = {
        "kind": "densecat_model",
        "name": name,
        "config": cfg.to_json(),
        "stem": {"patch": 4 if cfg.stem == "patchify" else 7, "channels": cfg.stem_channels,
                 "style": cfg.stem},
        "stages": stages,
        "head": {"classes": cfg.num_classes, "style": cfg.head},
    }
    return b.build(meta)


def resolve(name: str) -> tuple[ModelConfig, str]:
    """Map ``rdnet_t`` / ``densenet201`` / ``ledger:b`` to a config."""
    if name.startswith("ledger:"):
        step = name.split(":", 1)[1]
        if step not in LEDGER:
            raise KeyError(f"unknown ledger step {step!r}; expected one of {sorted(LEDGER)}")
        return LEDGER[step], name
    if name in DESK_PRESETS:
        return DESK_PRESETS[name], name
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {available()}")
    return PRESETS[name], name


def available() -> list[str]:
    return sorted(PRESETS) + sorted(DESK_PRESETS) + [f"ledger:{s}" for s in LEDGER]


def build_preset(name: str, **overrides) -> ModuleGraph:
    cfg, label = resolve(name)
    if overrides:
        cfg = replace(cfg, **overrides)
    return build_model(cfg, label)


def build_ledger_model(step: str) -> ModuleGraph:
    return build_preset(f"ledger:{step}")
