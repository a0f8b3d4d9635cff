"""
Pyramid ViG encoder and classification head.

Layout (defaults in brackets)::

    image [B, C, H, W]
      -> stem: 2 x (3x3 stride-2 conv + batch norm + relu)     C -> D0/2 -> D0
      -> patches [B, H/4 * W/4, D0] + learnable positional encoding
      -> stage 1: depth x (grapher -> ffn)                       D0 [128]
      -> downsample (3x3 stride-2 conv + batch norm)             D0 -> D1
      -> stage 2                                                  D1 [256]
      -> downsample                                               D1 -> D2
      -> stage 3 (no downsample afterwards)                      D2 [512]
      -> global average pool -> FC -> relu -> dropout -> FC -> logits

One k-NN graph is built per image per stage, from the projected features of
the first Grapher block in that stage; later blocks of the stage reuse it.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DimensionError
from .grapher import (
    FfnParams,
    GrapherParams,
    check_heads,
    effective_k,
    ffn_block,
    grapher_block,
    kaiming_uniform,
)
from .tensor import (
    RunningStats,
    Tensor,
    add,
    batch_norm,
    conv2d,
    dropout,
    global_avg_pool,
    linear,
    pad_replicate,
    relu,
    reshape,
    transpose,
)

TASKS = ("multiclass", "multilabel")


@dataclass
class ModelConfig:
    in_channels: int
    input_hw: tuple
    num_classes: int
    task: str = "multiclass"
    stage_dims: tuple = (128, 256, 512)
    stage_depths: tuple = (3, 3, 1)
    heads: int = 16
    k: int = 9
    head_hidden: int = 1024
    dropout: float = 0.0

    def __post_init__(self):
        self.input_hw = tuple(int(v) for v in self.input_hw)
        self.stage_dims = tuple(int(v) for v in self.stage_dims)
        self.stage_depths = tuple(int(v) for v in self.stage_depths)

    def validate(self) -> "ModelConfig":
        problems = []
        if len(self.stage_dims) != 3 or len(self.stage_depths) != 3:
            problems.append("stage_dims and stage_depths must both have 3 entries")
        if self.in_channels < 1 or self.num_classes < 1 or self.head_hidden < 1:
            problems.append("in_channels, num_classes and head_hidden must be positive")
        if len(self.input_hw) != 2 or min(self.input_hw) < 4:
            problems.append(f"input_hw {self.input_hw} must be two extents of at least 4")
        elif any(v % 4 for v in self.input_hw):
            problems.append(f"input_hw {self.input_hw} must be divisible by 4 (stem downsamples by 4)")
        if self.task not in TASKS:
            problems.append(f"task {self.task!r} not in {TASKS}")
        if any(d < 1 for d in self.stage_depths) or any(d < 2 or d % 2 for d in self.stage_dims):
            problems.append("stage depths must be >= 1 and stage dims even and >= 2")
        for d in self.stage_dims:
            if self.heads < 1 or (2 * d) % self.heads or d % self.heads:
                problems.append(f"heads={self.heads} must divide stage width {d} and 2*{d}")
        if self.k < 1:
            problems.append(f"k={self.k} must be at least 1")
        if not 0.0 <= self.dropout < 1.0:
            problems.append(f"dropout={self.dropout} must be in [0, 1)")
        if problems:
            raise ConfigurationError("invalid model config: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_hw"] = list(self.input_hw)
        d["stage_dims"] = list(self.stage_dims)
        d["stage_depths"] = list(self.stage_depths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def stage_grids(cfg: ModelConfig) -> list:
    """(h, w) patch grid of each stage, before any odd-extent padding."""
    h, w = cfg.input_hw[0] // 4, cfg.input_hw[1] // 4
    grids = [(h, w)]
    for _ in range(len(cfg.stage_dims) - 1):
        h, w = (h + 1) // 2, (w + 1) // 2
        grids.append((h, w))
    return grids


@dataclass
class ConvBN:
    weight: Tensor
    bias: Tensor
    gamma: Tensor
    beta: Tensor
    running: RunningStats

    @classmethod
    def init(cls, cin: int, cout: int, rng: np.random.Generator, dtype) -> "ConvBN":
        fan_in = cin * 9
        return cls(
            weight=Tensor(kaiming_uniform(rng, (cout, cin, 3, 3), fan_in), requires_grad=True, dtype=dtype),
            bias=Tensor(np.zeros(cout), requires_grad=True, dtype=dtype),
            gamma=Tensor(np.ones(cout), requires_grad=True, dtype=dtype),
            beta=Tensor(np.zeros(cout), requires_grad=True, dtype=dtype),
            running=RunningStats.init(cout, dtype),
        )

    def named_parameters(self):
        return {"weight": self.weight, "bias": self.bias, "gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running.mean, "running_var": self.running.var}

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = conv2d(x, self.weight, self.bias, stride=2, pad=1)
        return batch_norm(y, self.gamma, self.beta, self.running, training)


@dataclass
class HeadParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, dim: int, hidden: int, classes: int, rng, dtype) -> "HeadParams":
        return cls(
            w1=Tensor(kaiming_uniform(rng, (dim, hidden), dim), requires_grad=True, dtype=dtype),
            b1=Tensor(np.zeros(hidden), requires_grad=True, dtype=dtype),
            w2=Tensor(kaiming_uniform(rng, (hidden, classes), hidden), requires_grad=True, dtype=dtype),
            b2=Tensor(np.zeros(classes), requires_grad=True, dtype=dtype),
        )

    def named_parameters(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class ForwardTrace:
    """Instrumentation filled in by :meth:`VigModel.forward` when requested."""

    stage_dims: list = field(default_factory=list)
    stage_patches: list = field(default_factory=list)
    stage_grids: list = field(default_factory=list)
    stage_k: list = field(default_factory=list)
    downsamples: int = 0
    # one entry per stage: (neighbors [B, N, k], distances [B, N, k])
    graphs: list = field(default_factory=list)
    graphs_built: int = 0


class VigModel:
    """Parameters of the pyramid encoder plus head, with a functional forward."""

    def __init__(self, cfg: ModelConfig, stem, pos_embed, stages, downsamples, head):
        self.cfg = cfg
        self.stem = stem
        self.pos_embed = pos_embed
        self.stages = stages
        self.downsamples = downsamples
        self.head = head

    # -- parameter bookkeeping -------------------------------------------
    def named_parameters(self) -> dict:
        out = {}
        for i, block in enumerate(self.stem):
            for n, t in block.named_parameters().items():
                out[f"stem.{i}.{n}"] = t
        out["pos_embed"] = self.pos_embed
        for s, blocks in enumerate(self.stages):
            for b, (g, f) in enumerate(blocks):
                for n, t in g.named_parameters().items():
                    out[f"stages.{s}.{b}.grapher.{n}"] = t
                for n, t in f.named_parameters().items():
                    out[f"stages.{s}.{b}.ffn.{n}"] = t
            if s < len(self.downsamples):
                for n, t in self.downsamples[s].named_parameters().items():
                    out[f"downsample.{s}.{n}"] = t
        for n, t in self.head.named_parameters().items():
            out[f"head.{n}"] = t
        return out

    def buffers(self) -> dict:
        out = {}
        for i, block in enumerate(self.stem):
            for n, a in block.buffers().items():
                out[f"stem.{i}.{n}"] = a
        for s, block in enumerate(self.downsamples):
            for n, a in block.buffers().items():
                out[f"downsample.{s}.{n}"] = a
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict:
        state = {n: p.data.copy() for n, p in self.named_parameters().items()}
        state.update({n: a.copy() for n, a in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict) -> None:
        params = self.named_parameters()
        buffers = self.buffers()
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise DimensionError(
                f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(unexpected)[:5]}"
            )
        for name, target in list(params.items()) + list(buffers.items()):
            arr = target.data if isinstance(target, Tensor) else target
            if state[name].shape != arr.shape:
                raise DimensionError(f"{name}: checkpoint shape {state[name].shape} != model shape {arr.shape}")
        for name, p in params.items():
            p.data[...] = state[name]
        for name, a in buffers.items():
            a[...] = state[name]

    def astype(self, dtype) -> "VigModel":
        """Deep copy with every parameter and running statistic cast to ``dtype``."""
        clone = copy.deepcopy(self)
        for p in clone.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for block in clone.stem + clone.downsamples:
            block.running.mean = block.running.mean.astype(dtype)
            block.running.var = block.running.var.astype(dtype)
        return clone

    # -- forward ---------------------------------------------------------
    def forward(self, x, mode: str = "eval", rng: Optional[np.random.Generator] = None,
                trace: Optional[ForwardTrace] = None) -> Tensor:
        """Logits [B, num_classes] for images [B, C, H, W]."""
        if mode not in ("train", "eval"):
            raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
        training = mode == "train"
        cfg = self.cfg
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.pos_embed.dtype)
        expected = (cfg.in_channels,) + cfg.input_hw
        if x.ndim != 4 or x.shape[1:] != expected:
            raise DimensionError(f"input shape {x.shape} does not match [B, {', '.join(map(str, expected))}]")

        h = stem(x, self.stem, training)
        B, D, gh, gw = h.shape
        tokens = to_tokens(h)
        tokens = add_positional_encoding(tokens, self.pos_embed)

        n_stages = len(self.stages)
        for s, blocks in enumerate(self.stages):
            k_s = effective_k(cfg.k, gh * gw)
            neighbors = None
            for b, (gp, fp) in enumerate(blocks):
                if neighbors is None:
                    tokens, neighbors, dists = grapher_block(tokens, gp, k_s, return_graph=True)
                    if trace is not None:
                        trace.graphs.append((neighbors, dists))
                        trace.graphs_built += B
                else:
                    tokens = grapher_block(tokens, gp, k_s, graph=neighbors)
                tokens = ffn_block(tokens, fp)
            if trace is not None:
                trace.stage_dims.append(tokens.shape[-1])
                trace.stage_patches.append(gh * gw)
                trace.stage_grids.append((gh, gw))
                trace.stage_k.append(k_s)
            fmap = to_map(tokens, gh, gw)
            if s < n_stages - 1:
                fmap = pad_replicate(fmap, gh % 2, gw % 2)
                fmap = downsample(fmap, self.downsamples[s], training)
                if trace is not None:
                    trace.downsamples += 1
                _, _, gh, gw = fmap.shape
                tokens = to_tokens(fmap)

        pooled = global_avg_pool(fmap)
        hidden = relu(linear(pooled, self.head.w1, self.head.b1))
        hidden = dropout(hidden, cfg.dropout, rng, training)
        return linear(hidden, self.head.w2, self.head.b2)

    __call__ = forward


def to_tokens(fmap: Tensor) -> Tensor:
    """[B, D, h, w] feature map -> [B, h*w, D] patch embeddings (row-major patches)."""
    B, D, h, w = fmap.shape
    return reshape(transpose(fmap, (0, 2, 3, 1)), (B, h * w, D))


def to_map(tokens: Tensor, h: int, w: int) -> Tensor:
    B, N, D = tokens.shape
    return transpose(reshape(tokens, (B, h, w, D)), (0, 3, 1, 2))


def stem(x: Tensor, blocks, training: bool) -> Tensor:
    """Two stride-2 conv + norm + relu blocks: [B, C, H, W] -> [B, D0, H/4, W/4]."""
    H, W = x.shape[-2:]
    if H % 4 or W % 4:
        raise ConfigurationError(f"stem needs H and W divisible by 4, got {H}x{W}")
    for block in blocks:
        x = relu(block(x, training))
    return x


def add_positional_encoding(patches: Tensor, pe: Tensor) -> Tensor:
    if patches.ndim != 3 or patches.shape[1:] != pe.shape:
        raise DimensionError(f"positional encoding {pe.shape} does not match patches {patches.shape}")
    return add(patches, pe)


def downsample(x: Tensor, block: ConvBN, training: bool) -> Tensor:
    """Stride-2 conv + norm: [B, D, h, w] -> [B, D', h/2, w/2]."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ConfigurationError(f"downsample needs an even grid, got {h}x{w}")
    return block(x, training)


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> VigModel:
    """Initialise every parameter from a generator seeded with ``seed``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    d0 = cfg.stage_dims[0]
    stem_blocks = [
        ConvBN.init(cfg.in_channels, d0 // 2, rng, dtype),
        ConvBN.init(d0 // 2, d0, rng, dtype),
    ]
    h0, w0 = stage_grids(cfg)[0]
    pos_embed = Tensor(np.zeros((h0 * w0, d0)), requires_grad=True, dtype=dtype)
    stages = []
    downsamples = []
    for s, (dim, depth) in enumerate(zip(cfg.stage_dims, cfg.stage_depths)):
        check_heads(dim, cfg.heads)
        stages.append([
            (GrapherParams.init(dim, cfg.heads, rng, dtype), FfnParams.init(dim, rng, dtype))
            for _ in range(depth)
        ])
        if s < len(cfg.stage_dims) - 1:
            downsamples.append(ConvBN.init(dim, cfg.stage_dims[s + 1], rng, dtype))
    head = HeadParams.init(cfg.stage_dims[-1], cfg.head_hidden, cfg.num_classes, rng, dtype)
    return VigModel(cfg, stem_blocks, pos_embed, stages, downsamples, head)


def forward(model: VigModel, x, mode: str = "eval", **kwargs) -> Tensor:
    return model.forward(x, mode, **kwargs)


def count_params(model) -> int:
    """Number of trainable scalars (running statistics excluded)."""
    if hasattr(model, "named_parameters"):
        return int(sum(p.size for p in model.named_parameters().values()))
    return int(sum(p.size for p in model))
