"""Model dimensions, expert-block packing and the shared key/value config document.

The document is plain ``key = value`` lines with an optional ``[blocks]``
section listing every expert-block function::

    model_seed = 0
    num_layers = 4
    embed_dim = 32
    ffn_dim = 64
    num_experts = 8
    num_shared = 1
    top_k = 2
    max_seq = 64
    block_size = 3

    [blocks]
    exp-l0-b0 = 0 1 2
    exp-l0-b1 = 3 4 5
    ...

Keys are written in exactly this order. ``vocab_size`` is fixed at 258 and
is never written.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

VOCAB_SIZE = 258
BOS_ID = 256
EOS_ID = 257

MODEL_KEYS = (
    "model_seed",
    "num_layers",
    "embed_dim",
    "ffn_dim",
    "num_experts",
    "num_shared",
    "top_k",
    "max_seq",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    model_seed: int = 0
    num_layers: int = 4
    embed_dim: int = 32
    ffn_dim: int = 64
    num_experts: int = 8
    num_shared: int = 1
    top_k: int = 2
    max_seq: int = 64
    vocab_size: int = VOCAB_SIZE

    def __post_init__(self):
        if not 0 <= self.model_seed < 2**64:
            raise ConfigError(f"model_seed must be a 64-bit unsigned integer, got {self.model_seed}")
        for name in ("num_layers", "embed_dim", "ffn_dim", "num_experts", "max_seq"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.num_shared < 0:
            raise ConfigError("num_shared must be >= 0")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"top_k must lie in [1, {self.num_experts}], got {self.top_k}")
        if self.vocab_size != VOCAB_SIZE:
            raise ConfigError(f"vocab_size is fixed at {VOCAB_SIZE}")

    def expert_param_count(self) -> int:
        """Parameters of one expert FFN (gate, up and down projections)."""
        return 3 * self.ffn_dim * self.embed_dim

    def expert_bytes(self) -> int:
        return 4 * self.expert_param_count()

    def routed_expert_bytes(self) -> int:
        """f32 bytes of every routed expert in the model (shared experts excluded)."""
        return self.num_layers * self.num_experts * self.expert_bytes()


@dataclass(frozen=True)
class Block:
    layer: int
    index: int
    experts: tuple[int, ...]

    @property
    def name(self) -> str:
        return function_name(self.layer, self.index)


def function_name(layer: int, block: int) -> str:
    return f"exp-l{layer}-b{block}"


@dataclass(frozen=True)
class BlockMap:
    block_size: int
    num_layers: int
    num_experts: int
    blocks: tuple[Block, ...] = field(repr=False)

    def __post_init__(self):
        seen: dict[int, set[int]] = {}
        for blk in self.blocks:
            hosted = seen.setdefault(blk.layer, set())
            if hosted & set(blk.experts):
                raise ConfigError(f"expert hosted twice in layer {blk.layer}")
            if list(blk.experts) != sorted(blk.experts):
                raise ConfigError(f"{blk.name}: expert list must be sorted")
            hosted.update(blk.experts)
        for layer in range(self.num_layers):
            if seen.get(layer) != set(range(self.num_experts)):
                raise ConfigError(f"layer {layer}: blocks do not partition the experts")

    def blocks_per_layer(self) -> int:
        return math.ceil(self.num_experts / self.block_size)

    def layer_blocks(self, layer: int) -> list[Block]:
        return [b for b in self.blocks if b.layer == layer]

    def get(self, layer: int, block: int) -> Block:
        for b in self.blocks:
            if b.layer == layer and b.index == block:
                return b
        raise KeyError(f"no block {block} in layer {layer}")

    def block_of(self, layer: int, expert: int) -> Block:
        for b in self.blocks:
            if b.layer == layer and expert in b.experts:
                return b
        raise KeyError(f"expert {expert} of layer {layer} has no hosting block")

    def by_name(self, name: str) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [b.name for b in self.blocks]


def pack_blocks(cfg: ModelConfig, block_size: int) -> BlockMap:
    """Partition every layer's experts into contiguous blocks of ``block_size``."""
    if not 1 <= block_size <= cfg.num_experts:
        raise ConfigError(f"block size must lie in [1, {cfg.num_experts}], got {block_size}")
    blocks = []
    for layer in range(cfg.num_layers):
        for b in range(math.ceil(cfg.num_experts / block_size)):
            lo, hi = b * block_size, min((b + 1) * block_size, cfg.num_experts)
            blocks.append(Block(layer, b, tuple(range(lo, hi))))
    return BlockMap(block_size, cfg.num_layers, cfg.num_experts, tuple(blocks))


def dump_config(cfg: ModelConfig, blockmap: BlockMap | None = None) -> str:
    lines = [f"{key} = {getattr(cfg, key)}" for key in MODEL_KEYS]
    if blockmap is not None:
        lines.append(f"block_size = {blockmap.block_size}")
        lines.append("")
        lines.append("[blocks]")
        for blk in blockmap.blocks:
            lines.append(f"{blk.name} = {' '.join(map(str, blk.experts))}")
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> tuple[ModelConfig, BlockMap | None]:
    scalars: dict[str, int] = {}
    listed: dict[str, tuple[int, ...]] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if line != "[blocks]":
                raise ConfigError(f"line {lineno}: unknown section {line}")
            section = "blocks"
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        try:
            if section == "blocks":
                if key in listed:
                    raise ConfigError(f"line {lineno}: duplicate block {key}")
                listed[key] = tuple(int(v) for v in value.split())
            else:
                if key not in MODEL_KEYS and key != "block_size":
                    raise ConfigError(f"line {lineno}: unknown key {key}")
                if key in scalars:
                    raise ConfigError(f"line {lineno}: duplicate key {key}")
                scalars[key] = int(value)
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: {exc}") from None
    block_size = scalars.pop("block_size", None)
    cfg = ModelConfig(**scalars)
    if block_size is None:
        if listed:
            raise ConfigError("[blocks] section requires block_size")
        return cfg, None
    blockmap = pack_blocks(cfg, block_size)
    if listed and listed != {b.name: b.experts for b in blockmap.blocks}:
        raise ConfigError("[blocks] section disagrees with contiguous packing for block_size")
    return cfg, blockmap


def load_config(path: str | Path) -> tuple[ModelConfig, BlockMap | None]:
    return parse_config(Path(path).read_text())
