"""Mixed image/text token sequences and sample assembly.

A sample is laid out as [bos, <img>, image tokens, </img>, query, response,
eos]; text-only samples use the same template without the image block. The
loss mask is true exactly on response tokens and the trailing eos.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tokenizer as tok
from .config import ModelConfig
from .image import RawImage, dyn_process, tileset_patches


class DataError(ValueError):
    """A sample violates the assembly contract (e.g. empty response)."""


@dataclass
class TokenSequence:
    """Per-position token ids / raw patch vectors with modality and loss masks.

    ``ids`` holds text-token indices and -1 at image positions;
    ``patch_vectors`` rows correspond to image positions in order. Image
    positions form contiguous blocks, one per processed image.
    """

    ids: np.ndarray
    modality: np.ndarray  # bool, True at image positions
    loss_mask: np.ndarray
    patch_vectors: np.ndarray | None = None
    num_tiles: int = 0  # tiles excluding the thumbnail, 0 for text-only

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.modality = np.asarray(self.modality, dtype=bool)
        self.loss_mask = np.asarray(self.loss_mask, dtype=bool)
        n = len(self.ids)
        if len(self.modality) != n or len(self.loss_mask) != n:
            raise DataError("modality/loss_mask length mismatch")
        if (self.loss_mask & self.modality).any():
            raise DataError("loss mask set on an image position")
        if self.patch_vectors is not None and len(self.patch_vectors) != int(self.modality.sum()):
            raise DataError("patch_vectors do not cover the image positions")

    @property
    def length(self) -> int:
        return len(self.ids)

    def image_blocks(self) -> list[tuple[int, int]]:
        """Contiguous [start, end) runs of image positions."""
        blocks = []
        m = self.modality
        i = 0
        while i < len(m):
            if m[i]:
                j = i
                while j < len(m) and m[j]:
                    j += 1
                blocks.append((i, j))
                i = j
            else:
                i += 1
        return blocks


def assemble_sample(
    patch_vectors: np.ndarray | None,
    query_ids,
    response_ids,
    num_tiles: int = 0,
) -> TokenSequence:
    """Build one training sample in the canonical layout.

    ``patch_vectors`` is None for text-only samples; otherwise (n_I, 3s^2)
    raw patch pixels from the input pipeline.
    """
    query_ids = list(query_ids)
    response_ids = list(response_ids)
    if not response_ids:
        raise DataError("sample has an empty response")
    ids: list[int] = [tok.BOS]
    modality: list[bool] = [False]
    if patch_vectors is not None:
        n_img = len(patch_vectors)
        ids.append(tok.IMG_START)
        modality.append(False)
        ids.extend([-1] * n_img)
        modality.extend([True] * n_img)
        ids.append(tok.IMG_END)
        modality.append(False)
    ids.extend(query_ids)
    modality.extend([False] * len(query_ids))
    resp_start = len(ids)
    ids.extend(response_ids)
    modality.extend([False] * len(response_ids))
    ids.append(tok.EOS)
    modality.append(False)
    loss_mask = np.zeros(len(ids), dtype=bool)
    loss_mask[resp_start:] = True  # response tokens plus eos
    return TokenSequence(
        ids=np.array(ids, dtype=np.int64),
        modality=np.array(modality, dtype=bool),
        loss_mask=loss_mask,
        patch_vectors=patch_vectors,
        num_tiles=num_tiles,
    )


def sample_from_image(
    cfg: ModelConfig,
    image: RawImage | None,
    query_ids,
    response_ids,
) -> TokenSequence:
    """Tile + patchify ``image`` per the config, then assemble the sample."""
    if image is None:
        return assemble_sample(None, query_ids, response_ids)
    ts = dyn_process(image, cfg.tile_size, cfg.max_tiles)
    patches = tileset_patches(ts, cfg.patch_stride)
    return assemble_sample(patches, query_ids, response_ids, num_tiles=ts.num_tiles)


DISTILL_TEXT_TOKENS = 100  # per sample, split 50/50 query/response


def random_distill_sample(
    rng: np.random.Generator,
    cfg: ModelConfig,
    image_hw: tuple[int, int] = (32, 32),
) -> tuple[RawImage, TokenSequence]:
    """Unpaired random training sample: i.i.d. uniform-byte image pixels and
    100 text ids uniform over the byte vocabulary, split into query/response."""
    h, w = image_hw
    img = RawImage(rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8))
    ids = rng.integers(0, tok.BYTE_VOCAB, size=DISTILL_TEXT_TOKENS)
    half = DISTILL_TEXT_TOKENS // 2
    seq = sample_from_image(cfg, img, ids[:half].tolist(), ids[half:].tolist())
    return img, seq


def paired_distill_sample(cfg: ModelConfig, image: RawImage, text_ids) -> TokenSequence:
    """Distillation sample using caption text instead of random ids (the
    paired-text ablation): the caption is split in half across query/response."""
    text_ids = list(text_ids)
    if len(text_ids) < 2:
        raise DataError("paired text too short to split")
    half = len(text_ids) // 2
    return sample_from_image(cfg, image, text_ids[:half], text_ids[half:])


def shuffled_sequence(seq: TokenSequence, r: int) -> TokenSequence:
    """Sequence metadata after the HD token reduction: every image block
    shrinks by r^2, text positions and masks carry over in order. The result
    carries no patch vectors; its image positions hold derived features."""
    keep = np.ones(seq.length, dtype=bool)
    for start, end in seq.image_blocks():
        n_img = end - start
        keep[start + n_img // (r * r) : end] = False
    return TokenSequence(
        ids=seq.ids[keep],
        modality=seq.modality[keep],
        loss_mask=seq.loss_mask[keep],
        patch_vectors=None,
        num_tiles=seq.num_tiles,
    )
