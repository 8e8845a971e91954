"""Model configuration, presets, canonical JSON and parameter accounting."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass


class ConfigError(ValueError):
    """Configuration violates an architectural invariant."""


@dataclass(frozen=True)
class ModelConfig:
    """Every architectural hyper-parameter of the model.

    ``embed_depth`` counts the causal layers of the holistic embedding module
    (0 degenerates to raw input embeddings); ``llm_depth`` counts the language
    model layers. ``pixel_shuffle`` enables the HD path: after the embedding
    module, each ``shuffle_r`` x ``shuffle_r`` patch-token neighborhood is
    folded channel-wise and re-projected, so the LLM sees 1/r^2 image tokens.
    """

    hidden: int = 64
    heads: int = 4
    embed_depth: int = 4
    llm_depth: int = 4
    vocab: int = 264
    tile_size: int = 32
    patch_stride: int = 8
    max_tiles: int = 4
    pixel_shuffle: bool = False
    shuffle_r: int = 2
    ffn_mult: float = 2.7
    rope_base: float = 10000.0
    max_seq: int = 640
    seed: int = 0

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.embed_depth < 0 or self.llm_depth < 1:
            raise ConfigError("embed_depth must be >= 0 and llm_depth >= 1")
        if self.vocab < 2:
            raise ConfigError("vocab must be >= 2")
        if self.tile_size % self.patch_stride != 0:
            raise ConfigError(f"tile_size {self.tile_size} not divisible by stride {self.patch_stride}")
        if self.head_dim % 2 != 0:
            raise ConfigError("head dimension must be even for rotary encoding")
        grid_side = self.tile_size // self.patch_stride
        if self.pixel_shuffle and grid_side % self.shuffle_r != 0:
            raise ConfigError(f"per-tile token grid {grid_side} not divisible by shuffle factor {self.shuffle_r}")

    # -- derived sizes -------------------------------------------------------

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def ffn_dim(self) -> int:
        # SwiGLU hidden width, rounded up to a multiple of 8.
        return ((int(self.hidden * self.ffn_mult) + 7) // 8) * 8

    @property
    def tokens_per_tile(self) -> int:
        return (self.tile_size // self.patch_stride) ** 2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_stride * self.patch_stride

    @property
    def pe_rows(self) -> int:
        return (self.max_tiles + 1) * self.tokens_per_tile

    def image_tokens(self, num_tiles: int, post_shuffle: bool = False) -> int:
        """Image-token count for ``num_tiles`` tiles plus the thumbnail."""
        n = (num_tiles + 1) * self.tokens_per_tile
        if post_shuffle and self.pixel_shuffle:
            n //= self.shuffle_r**2
        return n

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def canonical_json(obj) -> str:
    """Stable JSON: sorted keys, compact separators, no trailing whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(cfg: ModelConfig) -> str:
    return hashlib.sha256(canonical_json(cfg.to_dict()).encode()).hexdigest()


def param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count; must equal the enumerated model total.

    text table v*c + patch projection (3s^2*c + c) + positional table pe_rows*c
    + per layer: 4c^2 (attention) + 2c (norm gains) + 3*c*f (SwiGLU)
    + HD re-projection 4c*c when pixel shuffle is on
    + final norm c + output head c*v.
    """
    c, v, f = cfg.hidden, cfg.vocab, cfg.ffn_dim
    per_layer = 4 * c * c + 2 * c + 3 * c * f
    total = v * c
    total += cfg.patch_dim * c + c
    total += cfg.pe_rows * c
    total += (cfg.embed_depth + cfg.llm_depth) * per_layer
    if cfg.pixel_shuffle:
        total += (cfg.shuffle_r**2 * c) * c
    total += c
    total += c * v
    return total


# Desk-scale default: trains in minutes on a CPU while exercising every
# mechanism. Paper-scale presets are reachable for shape/count checks only.
DESK = ModelConfig()

PAPER = ModelConfig(
    hidden=2048,
    heads=16,
    embed_depth=8,
    llm_depth=24,
    vocab=92553,
    tile_size=448,
    patch_stride=28,
    max_tiles=12,
    pixel_shuffle=False,
    max_seq=8192,
)

PAPER_HD = PAPER.replace(patch_stride=14, pixel_shuffle=True)
