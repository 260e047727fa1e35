"""Dense-connectivity building blocks as graph fragments.

Each ``add_*`` helper appends nodes to a :class:`GraphBuilder` and returns the
name of its output node; the ``build_*`` wrappers return a standalone
:class:`ModuleGraph` fragment with its own input, which is handy for costing a
single block.
"""

from __future__ import annotations

from dataclasses import dataclass

from .graph import INPUT, GraphBuilder, GraphError, ModuleGraph, round_up


@dataclass(frozen=True)
class MixerConfig:
    c_in: int
    growth_rate: int
    expansion_ratio: float = 4.0
    kernel: int = 7
    rescale: bool = False
    drop_rate: float = 0.0
    # "input": hidden width = ER * c_in; "growth": hidden width = ER * GR (classic DenseNet)
    er_base: str = "input"

    def __post_init__(self):
        if self.growth_rate <= 0:
            raise ValueError(f"growth rate must be positive, got {self.growth_rate}")
        if self.expansion_ratio <= 0:
            raise ValueError(f"expansion ratio must be positive, got {self.expansion_ratio}")
        if self.kernel % 2 != 1:
            raise ValueError(f"mixer kernel must be odd, got {self.kernel}")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError(f"drop rate must be in [0, 1), got {self.drop_rate}")
        if self.er_base not in ("input", "growth"):
            raise ValueError(f"er_base must be 'input' or 'growth', got {self.er_base!r}")
        if self.hidden < 1:
            raise ValueError("intermediate width rounds to zero")

    @property
    def hidden(self) -> int:
        base = self.c_in if self.er_base == "input" else self.growth_rate
        return int(round(self.expansion_ratio * base))

    @property
    def c_out(self) -> int:
        return self.c_in + self.growth_rate


@dataclass(frozen=True)
class TransitionConfig:
    c_in: int
    ratio: float = 0.5
    stride: int = 1
    rounding: int = 8
    style: str = "refined"  # "refined": LN + conv(k=stride); "classic": BN-ReLU-1x1 (+ avg pool)

    def __post_init__(self):
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError(f"transition ratio must be in (0, 1], got {self.ratio}")
        if self.stride not in (1, 2):
            raise ValueError(f"transition stride must be 1 or 2, got {self.stride}")
        if self.style not in ("refined", "classic"):
            raise ValueError(f"unknown transition style {self.style!r}")

    @property
    def c_out(self) -> int:
        return round_up(self.ratio * self.c_in, self.rounding)


def add_feature_mixer(b: GraphBuilder, x: str, cfg: MixerConfig, prefix: str) -> str:
    if b.ch[x] != cfg.c_in:
        raise GraphError(f"{prefix}: mixer expects {cfg.c_in} channels, got {b.ch[x]}")
    c = cfg.c_in
    h = b.conv(f"{prefix}.dwconv", x, c, cfg.kernel, groups=c)
    h = b.norm(f"{prefix}.norm", h, "layer")
    h = b.conv(f"{prefix}.pw1", h, cfg.hidden, 1)
    h = b.act(f"{prefix}.act", h, "gelu")
    h = b.conv(f"{prefix}.pw2", h, cfg.growth_rate, 1)
    if cfg.rescale:
        h = b.add(f"{prefix}.rescale", "rescale", h, c=cfg.growth_rate)
    h = b.add(f"{prefix}.drop_path", "drop_path", h, rate=float(cfg.drop_rate))
    return b.add(f"{prefix}.concat", "concat", [x, h])


def add_transition(b: GraphBuilder, x: str, cfg: TransitionConfig, prefix: str) -> str:
    if b.ch[x] != cfg.c_in:
        raise GraphError(f"{prefix}: transition expects {cfg.c_in} channels, got {b.ch[x]}")
    if cfg.style == "refined":
        h = b.norm(f"{prefix}.norm", x, "layer")
        return b.conv(f"{prefix}.conv", h, cfg.c_out, cfg.stride, stride=cfg.stride, pad=0,
                      exact=cfg.stride > 1)
    h = b.norm(f"{prefix}.norm", x, "batch")
    h = b.act(f"{prefix}.act", h, "relu")
    h = b.conv(f"{prefix}.conv", h, cfg.c_out, 1, pad=0, bias=False)
    if cfg.stride == 2:
        h = b.add(f"{prefix}.pool", "pool", h, mode="avg", k=2, stride=2, pad=0)
    return h


def add_stem(b: GraphBuilder, x: str, out_channels: int, style: str = "patchify",
             prefix: str = "stem") -> str:
    if out_channels < 1:
        raise ValueError(f"stem channels must be >= 1, got {out_channels}")
    if style == "patchify":
        h = b.conv(f"{prefix}.conv", x, out_channels, 4, stride=4, pad=0, exact=True)
        return b.norm(f"{prefix}.norm", h, "layer")
    if style == "classic":
        h = b.conv(f"{prefix}.conv", x, out_channels, 7, stride=2, pad=3, bias=False)
        h = b.norm(f"{prefix}.norm", h, "batch")
        h = b.act(f"{prefix}.act", h, "relu")
        return b.add(f"{prefix}.pool", "pool", h, mode="max", k=3, stride=2, pad=1)
    raise ValueError(f"unknown stem style {style!r}")


def add_classic_dense_block(b: GraphBuilder, x: str, growth_rate: int, prefix: str,
                            bottleneck_mult: int = 4, drop_rate: float = 0.0) -> str:
    if growth_rate < 1:
        raise ValueError(f"growth rate must be >= 1, got {growth_rate}")
    h = b.norm(f"{prefix}.norm1", x, "batch")
    h = b.act(f"{prefix}.act1", h, "relu")
    h = b.conv(f"{prefix}.conv1", h, bottleneck_mult * growth_rate, 1, bias=False)
    h = b.norm(f"{prefix}.norm2", h, "batch")
    h = b.act(f"{prefix}.act2", h, "relu")
    h = b.conv(f"{prefix}.conv2", h, growth_rate, 3, bias=False)
    h = b.add(f"{prefix}.drop_path", "drop_path", h, rate=float(drop_rate))
    return b.add(f"{prefix}.concat", "concat", [x, h])


def dense_stage_trace(c_in: int, growth_rate: int, num_blocks: int, interval: int = 3,
                      ratio: float = 0.5, rounding: int = 8) -> list[int]:
    """Channel count after every block and every in-stage transition."""
    if interval < 1 or num_blocks % interval:
        raise ValueError(f"block count {num_blocks} is not divisible by transition interval {interval}")
    trace = [c_in]
    c = c_in
    for i in range(num_blocks):
        c += growth_rate
        trace.append(c)
        if (i + 1) % interval == 0 and i + 1 < num_blocks:
            c = round_up(ratio * c, rounding)
            trace.append(c)
    return trace


def add_dense_stage(b: GraphBuilder, x: str, growth_rate: int, num_blocks: int, prefix: str,
                    interval: int = 3, ratio: float = 0.5, rounding: int = 8,
                    block: str = "mixer", transitions: bool = True, transition_style: str = "refined",
                    drop_rates=None, **block_kw) -> str:
    """Stack blocks; a stride-1 transition follows every ``interval`` blocks except the last group.

    ``drop_rates`` optionally gives one stochastic-depth rate per block.
    """
    if transitions and (interval < 1 or num_blocks % interval):
        raise ValueError(f"block count {num_blocks} is not divisible by transition interval {interval}")
    for i in range(num_blocks):
        rate = float(drop_rates[i]) if drop_rates is not None else block_kw.get("drop_rate", 0.0)
        name = f"{prefix}.blocks.{i}"
        if block == "mixer":
            cfg = MixerConfig(b.ch[x], growth_rate, block_kw.get("expansion_ratio", 4.0),
                              block_kw.get("kernel", 7), block_kw.get("rescale", False), rate,
                              block_kw.get("er_base", "input"))
            x = add_feature_mixer(b, x, cfg, name)
        elif block == "classic_dense":
            x = add_classic_dense_block(b, x, growth_rate, name, block_kw.get("bottleneck_mult", 4), rate)
        else:
            raise ValueError(f"unknown block kind {block!r}")
        if transitions and (i + 1) % interval == 0 and i + 1 < num_blocks:
            t = TransitionConfig(b.ch[x], ratio, 1, rounding, transition_style)
            x = add_transition(b, x, t, f"{prefix}.transitions.{(i + 1) // interval - 1}")
    return x


# -- standalone fragments ------------------------------------------------------------

def build_feature_mixer(cfg: MixerConfig) -> ModuleGraph:
    b = GraphBuilder(cfg.c_in)
    add_feature_mixer(b, INPUT, cfg, "mixer")
    return b.build({"kind": "fragment", "fragment": "feature_mixer"})


def build_transition(cfg: TransitionConfig) -> ModuleGraph:
    b = GraphBuilder(cfg.c_in)
    add_transition(b, INPUT, cfg, "transition")
    return b.build({"kind": "fragment", "fragment": "transition"})


def build_stem(out_channels: int, style: str = "patchify", in_channels: int = 3) -> ModuleGraph:
    b = GraphBuilder(in_channels)
    add_stem(b, INPUT, out_channels, style)
    return b.build({"kind": "fragment", "fragment": "stem"})


def build_classic_dense_block(c_in: int, growth_rate: int, bottleneck_mult: int = 4) -> ModuleGraph:
    b = GraphBuilder(c_in)
    add_classic_dense_block(b, INPUT, growth_rate, "block", bottleneck_mult)
    return b.build({"kind": "fragment", "fragment": "classic_dense_block"})


def build_dense_stage(c_in: int, growth_rate: int, num_blocks: int, transition_interval: int = 3,
                      transition_ratio: float = 0.5, **block_kw) -> tuple[ModuleGraph, int]:
    b = GraphBuilder(c_in)
    out = add_dense_stage(b, INPUT, growth_rate, num_blocks, "stage", transition_interval,
                          transition_ratio, **block_kw)
    return b.build({"kind": "fragment", "fragment": "dense_stage"}), b.ch[out]
