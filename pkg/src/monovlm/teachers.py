"""Frozen teacher networks providing distillation targets.

The vision teacher maps raw patch vectors to per-token features; the text
teacher is an embedding table over the same vocabulary. Both are randomly
initialized, fully determined by their seed, and never receive gradients:
their parameters are created with ``requires_grad=False`` and all evaluation
runs under ``no_grad``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .model import RopeTable, causal_mask, init_layer_params, layer_forward
from .sequence import TokenSequence

TRANSFORMER_TEACHER_DEPTH = 2


@dataclass
class TeacherBundle:
    """Vision + text teachers of one kind ("linear" or "transformer")."""

    kind: str
    cfg: ModelConfig
    seed: int
    params: dict[str, Tensor]
    dtype: np.dtype

    def __post_init__(self):
        self._rope = RopeTable(self.cfg.rope_base, self.cfg.head_dim, self.dtype)

    def image_features(self, seq: TokenSequence) -> np.ndarray:
        """Target features (n_I, c) for the sequence's patch vectors; the
        teacher's patch grid matches the student's one-to-one."""
        if seq.patch_vectors is None:
            return np.zeros((0, self.cfg.hidden), dtype=self.dtype)
        patches = np.asarray(seq.patch_vectors, dtype=self.dtype)
        return self._vision_forward(patches[None, :, :])[0]

    def image_features_batch(self, seqs: list[TokenSequence]) -> np.ndarray:
        """Stacked targets (B, n_I, c) for sequences sharing one patch-grid shape."""
        patches = np.stack([np.asarray(s.patch_vectors, dtype=self.dtype) for s in seqs])
        return self._vision_forward(patches)

    def _vision_forward(self, patches: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            if self.kind == "linear":
                return patches @ self.params["vision.proj"].data
            n = patches.shape[1]
            x = Tensor(patches) @ self.params["vision.proj"]
            x = x + self.params["vision.pos"][:n]
            cos, sin = self._rope.rows(0, n)
            mask = Tensor(causal_mask(n, self.dtype))
            for i in range(TRANSFORMER_TEACHER_DEPTH):
                x = layer_forward(self.params, f"vision.layers.{i}", x, self.cfg.heads, Tensor(cos), Tensor(sin), mask)
            return x.data

    def text_features(self, ids: np.ndarray) -> np.ndarray:
        """Target features (n_T, c) for text token ids."""
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab):
            raise ValueError("text teacher ids out of range")
        return self.params["text.table"].data[ids]

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}


def _teacher_params(cfg: ModelConfig, seed: int, dtype, depth: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    scale = 1.0 / np.sqrt(cfg.patch_dim)
    params["vision.proj"] = Tensor(rng.normal(0.0, scale, size=(cfg.patch_dim, cfg.hidden)).astype(dtype))
    params["text.table"] = Tensor(rng.normal(0.0, 1.0, size=(cfg.vocab, cfg.hidden)).astype(dtype))
    if depth:
        params["vision.pos"] = Tensor(rng.normal(0.0, 0.02, size=(cfg.pe_rows, cfg.hidden)).astype(dtype))
        out_scale = 1.0 / np.sqrt(2.0 * depth)
        for i in range(depth):
            init_layer_params(
                params, f"vision.layers.{i}", cfg.hidden, cfg.ffn_dim, rng, dtype, out_scale, requires_grad=False
            )
    return params


def make_desk_teachers(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> TeacherBundle:
    """Desk-scale stand-ins for the pretrained teachers: a frozen random
    2-layer patch transformer and a frozen random embedding table."""
    dtype = np.dtype(dtype)
    params = _teacher_params(cfg, seed, dtype, TRANSFORMER_TEACHER_DEPTH)
    return TeacherBundle(kind="transformer", cfg=cfg, seed=seed, params=params, dtype=dtype)


def make_linear_teachers(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> TeacherBundle:
    """Teachers that are fixed random linear maps of their inputs; used by the
    distillation-recovery check."""
    dtype = np.dtype(dtype)
    params = _teacher_params(cfg, seed, dtype, depth=0)
    return TeacherBundle(kind="linear", cfg=cfg, seed=seed, params=params, dtype=dtype)
