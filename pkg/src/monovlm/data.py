"""Synthetic datasets, JSONL sample IO and training data sources.

Two generators: ``random-distill`` (uniform-byte images paired with uniform
random token ids) and ``shapes-caption`` (1-3 colored primitives with a
ground-truth caption), both written as PPM images plus one JSON object per
line with fields ``image`` (path or null), ``query`` and ``response``.
Generation is deterministic per seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tokenizer as tok
from .config import ModelConfig
from .image import RawImage, read_ppm, write_ppm
from .sequence import (
    DISTILL_TEXT_TOKENS,
    TokenSequence,
    assemble_sample,
    paired_distill_sample,
    random_distill_sample,
    sample_from_image,
)


@dataclass
class DatasetSpec:
    """What to generate: kind, how many samples, the seed, image geometry."""

    kind: str  # random-distill | shapes-caption | jsonl-dir
    count: int
    seed: int = 0
    image_hw: tuple[int, int] = (32, 32)

    def __post_init__(self):
        if self.kind not in ("random-distill", "shapes-caption", "jsonl-dir"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.count < 1:
            raise ValueError("count must be >= 1")


@dataclass
class Record:
    """One raw sample before tokenization."""

    image: RawImage | None
    query: str
    response: str


def record_sequence(cfg: ModelConfig, rec: Record) -> TokenSequence:
    """Assembled training sequence for a record; empty responses produce a
    sequence with an all-false loss mask (the training loop skips those)."""
    query_ids = tok.tokenize(rec.query)
    response_ids = tok.tokenize(rec.response)
    if response_ids:
        return sample_from_image(cfg, rec.image, query_ids, response_ids)
    prompt = record_prompt(cfg, rec)
    return prompt


def record_prompt(cfg: ModelConfig, rec: Record) -> TokenSequence:
    """Generation prompt: the sample layout truncated before the response."""
    full = sample_from_image(cfg, rec.image, tok.tokenize(rec.query), [0])
    cut = full.length - 2  # drop the placeholder response token and eos
    n_img = int(full.modality[:cut].sum())
    return TokenSequence(
        ids=full.ids[:cut],
        modality=full.modality[:cut],
        loss_mask=np.zeros(cut, dtype=bool),
        patch_vectors=None if full.patch_vectors is None else full.patch_vectors[:n_img],
        num_tiles=full.num_tiles,
    )


# ---------------------------------------------------------------------------
# shapes-caption renderer
# ---------------------------------------------------------------------------

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 200, 70),
    "blue": (50, 90, 230),
    "yellow": (235, 220, 50),
}
SHAPES = ("square", "circle", "triangle")
BACKGROUND = (20, 20, 20)
CAPTION_QUERY = "what is in the image?"

# bounding-box fill ratios used by the pixel-level caption checker
_FILL_RATIO = {"square": 1.0, "circle": np.pi / 4.0, "triangle": 0.5}


def _draw_primitive(px: np.ndarray, shape: str, color: tuple[int, int, int], cy: int, cx: int, half: int) -> None:
    ys, xs = np.mgrid[0 : px.shape[0], 0 : px.shape[1]]
    if shape == "square":
        mask = (np.abs(ys - cy) < half) & (np.abs(xs - cx) < half)
    elif shape == "circle":
        mask = (ys - cy) ** 2 + (xs - cx) ** 2 < half**2
    else:  # triangle: apex up, flat base
        dy = ys - (cy - half)
        mask = (dy >= 0) & (dy < 2 * half) & (np.abs(xs - cx) <= dy / 2.0)
    px[mask] = color


def render_shapes(rng: np.random.Generator, image_hw: tuple[int, int] = (32, 32)) -> Record:
    """Render 1-3 non-overlapping colored primitives; the caption names them
    in slot order so it is a deterministic function of the image."""
    h, w = image_hw
    px = np.full((h, w, 3), BACKGROUND, dtype=np.uint8)
    slots = [(h // 4, w // 4), (h // 4, 3 * w // 4), (3 * h // 4, w // 4), (3 * h // 4, 3 * w // 4)]
    count = int(rng.integers(1, 4))
    chosen = sorted(rng.choice(len(slots), size=count, replace=False).tolist())
    color_names = rng.choice(list(COLORS), size=count, replace=False).tolist()
    parts = []
    half = min(h, w) // 4 - 2
    for slot, cname in zip(chosen, color_names):
        shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
        cy, cx = slots[slot]
        _draw_primitive(px, shape, COLORS[cname], cy, cx, half)
        parts.append(f"{cname} {shape}")
    caption = " and ".join(f"a {p}" for p in parts)
    return Record(image=RawImage(px), query=CAPTION_QUERY, response=caption)


def check_caption(rec: Record) -> bool:
    """Pixel-level consistency oracle: every (color, shape) named by the
    caption must appear as a blob of exactly that color whose bounding-box
    fill ratio classifies as the named shape, and no other foreground color
    may be present."""
    if rec.image is None:
        return False
    px = rec.image.pixels
    mentioned = []
    for part in rec.response.split(" and "):
        words = part.split()
        if len(words) != 3 or words[0] != "a" or words[1] not in COLORS or words[2] not in SHAPES:
            return False
        mentioned.append((words[1], words[2]))
    fg = {name for name in COLORS if (px == COLORS[name]).all(axis=-1).any()}
    if fg != {c for c, _ in mentioned}:
        return False
    for cname, shape in mentioned:
        mask = (px == COLORS[cname]).all(axis=-1)
        ys, xs = np.nonzero(mask)
        box = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
        ratio = mask.sum() / box
        best = min(_FILL_RATIO, key=lambda s: abs(_FILL_RATIO[s] - ratio))
        if best != shape:
            return False
    return True


# ---------------------------------------------------------------------------
# dataset generation and loading
# ---------------------------------------------------------------------------


def make_dataset(spec: DatasetSpec, out_dir) -> Path:
    """Write PPM images and samples.jsonl under ``out_dir``; returns the dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    lines = []
    for i in range(spec.count):
        if spec.kind == "random-distill":
            h, w = spec.image_hw
            img = RawImage(rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8))
            ids = rng.integers(0, tok.BYTE_VOCAB, size=DISTILL_TEXT_TOKENS)
            half = DISTILL_TEXT_TOKENS // 2
            rec = Record(image=img, query=tok.decode_text(ids[:half]), response=tok.decode_text(ids[half:]))
        elif spec.kind == "shapes-caption":
            rec = render_shapes(rng, spec.image_hw)
        else:
            raise ValueError(f"cannot generate kind {spec.kind!r}")
        name = f"img_{i:05d}.ppm"
        write_ppm(out / name, rec.image)
        lines.append(json.dumps({"image": name, "query": rec.query, "response": rec.response}, sort_keys=True))
    tmp = out / "samples.jsonl.tmp"
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(out / "samples.jsonl")
    return out


def load_records(data_dir) -> list[Record]:
    data_dir = Path(data_dir)
    records = []
    with open(data_dir / "samples.jsonl", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            img = read_ppm(data_dir / obj["image"]) if obj.get("image") else None
            records.append(Record(image=img, query=obj.get("query", ""), response=obj.get("response", "")))
    return records


def generate_records(spec: DatasetSpec) -> list[Record]:
    """In-memory equivalent of :func:`make_dataset` (same rng discipline)."""
    rng = np.random.default_rng(spec.seed)
    records = []
    for _ in range(spec.count):
        if spec.kind == "random-distill":
            h, w = spec.image_hw
            img = RawImage(rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8))
            ids = rng.integers(0, tok.BYTE_VOCAB, size=DISTILL_TEXT_TOKENS)
            half = DISTILL_TEXT_TOKENS // 2
            records.append(Record(image=img, query=tok.decode_text(ids[:half]), response=tok.decode_text(ids[half:])))
        elif spec.kind == "shapes-caption":
            records.append(render_shapes(rng, spec.image_hw))
        else:
            raise ValueError(f"cannot generate kind {spec.kind!r}")
    return records


# ---------------------------------------------------------------------------
# training sources
# ---------------------------------------------------------------------------


class RandomDistillSource:
    """Endless stream of unpaired random distillation samples."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, image_hw: tuple[int, int] = (32, 32)):
        self.cfg = cfg
        self.image_hw = image_hw
        self.rng = np.random.default_rng(seed)

    def batch(self, n: int) -> list[TokenSequence]:
        return [random_distill_sample(self.rng, self.cfg, self.image_hw)[1] for _ in range(n)]


class PairedDistillSource:
    """Distillation stream built from caption-paired records (the text-data
    ablation); cycles the dataset with a fixed per-epoch shuffle."""

    def __init__(self, cfg: ModelConfig, records: list[Record], seed: int = 0):
        self.cfg = cfg
        self.seqs = [
            paired_distill_sample(cfg, r.image, tok.tokenize(r.query + " " + r.response)) for r in records
        ]
        self._cycle = _EpochCycler(len(self.seqs), seed)

    def batch(self, n: int) -> list[TokenSequence]:
        return [self.seqs[i] for i in self._cycle.take(n)]


class SampleDataset:
    """Assembled sequences with deterministic per-epoch shuffling."""

    def __init__(self, seqs: list[TokenSequence], seed: int = 0):
        if not seqs:
            raise ValueError("empty dataset")
        self.seqs = seqs
        self._cycle = _EpochCycler(len(seqs), seed)

    def __len__(self) -> int:
        return len(self.seqs)

    def batch(self, n: int) -> list[TokenSequence]:
        return [self.seqs[i] for i in self._cycle.take(n)]


class _EpochCycler:
    """Index stream: one fixed shuffle per epoch, seeded."""

    def __init__(self, size: int, seed: int):
        self.size = size
        self.rng = np.random.default_rng(seed)
        self._order = self.rng.permutation(size)
        self._pos = 0

    def take(self, n: int) -> list[int]:
        out = []
        for _ in range(n):
            if self._pos >= self.size:
                self._order = self.rng.permutation(self.size)
                self._pos = 0
            out.append(int(self._order[self._pos]))
            self._pos += 1
        return out
