"""The monolithic vision-language model.

One causal-transformer layer recipe (pre-norm RMSNorm, multi-head causal
attention with rotary positions, SwiGLU feed-forward) is used twice: a stack
of ``embed_depth`` layers forms the holistic embedding module that maps raw
patch vectors and text ids into a shared space, and a stack of ``llm_depth``
layers plus a vocabulary head forms the language model consuming those
embeddings. Rotary phases use one global position index across both stacks.

Greedy generation supports full recomputation and incremental KV-cache
decoding; the two must agree token-for-token.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .sequence import TokenSequence, shuffled_sequence

RMS_EPS = 1e-6


class CapacityError(ValueError):
    """Sequence exceeds the configured maximum length."""


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def init_layer_params(
    params: dict[str, Tensor],
    prefix: str,
    hidden: int,
    ffn_dim: int,
    rng: np.random.Generator,
    dtype,
    out_scale: float,
    requires_grad: bool = True,
) -> None:
    """One transformer layer's parameters under ``prefix`` (shared recipe for
    both stacks and for transformer teachers)."""

    def normal(shape, scale=0.02):
        return Tensor(rng.normal(0.0, scale, size=shape).astype(dtype), requires_grad=requires_grad)

    c, f = hidden, ffn_dim
    params[f"{prefix}.attn_norm.g"] = Tensor(np.ones(c, dtype=dtype), requires_grad=requires_grad)
    params[f"{prefix}.attn.wq"] = normal((c, c))
    params[f"{prefix}.attn.wk"] = normal((c, c))
    params[f"{prefix}.attn.wv"] = normal((c, c))
    params[f"{prefix}.attn.wo"] = normal((c, c), 0.02 * out_scale)
    params[f"{prefix}.ffn_norm.g"] = Tensor(np.ones(c, dtype=dtype), requires_grad=requires_grad)
    params[f"{prefix}.ffn.w1"] = normal((c, f))
    params[f"{prefix}.ffn.w3"] = normal((c, f))
    params[f"{prefix}.ffn.w2"] = normal((f, c), 0.02 * out_scale)


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype) -> dict[str, Tensor]:
    """All model parameters in a fixed creation order (deterministic per seed)."""

    def normal(shape, scale=0.02):
        return Tensor(rng.normal(0.0, scale, size=shape).astype(dtype), requires_grad=True)

    c = cfg.hidden
    out_scale = 1.0 / np.sqrt(2.0 * (cfg.embed_depth + cfg.llm_depth))
    params: dict[str, Tensor] = {}
    params["embed.text_table"] = normal((cfg.vocab, c))
    params["embed.patch_proj.w"] = normal((cfg.patch_dim, c))
    params["embed.patch_proj.b"] = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
    params["embed.pos"] = normal((cfg.pe_rows, c))
    for i in range(cfg.embed_depth):
        init_layer_params(params, f"embed.layers.{i}", c, cfg.ffn_dim, rng, dtype, out_scale)
    if cfg.pixel_shuffle:
        params["embed.shuffle_proj.w"] = normal((cfg.shuffle_r**2 * c, c))
    for i in range(cfg.llm_depth):
        init_layer_params(params, f"llm.layers.{i}", c, cfg.ffn_dim, rng, dtype, out_scale)
    params["llm.final_norm.g"] = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
    params["llm.head.w"] = normal((c, cfg.vocab))
    return params


# ---------------------------------------------------------------------------
# rotary tables and masks
# ---------------------------------------------------------------------------


class RopeTable:
    """Cos/sin tables for rotary positions, grown on demand."""

    def __init__(self, base: float, head_dim: int, dtype):
        self.base = base
        self.head_dim = head_dim
        self.dtype = dtype
        self._cos = np.zeros((0, head_dim))
        self._sin = np.zeros((0, head_dim))

    def _grow(self, n: int) -> None:
        size = max(n, 2 * len(self._cos), 64)
        half = self.head_dim // 2
        inv = 1.0 / (self.base ** (np.arange(half, dtype=np.float64) / half))
        freqs = np.outer(np.arange(size, dtype=np.float64), inv)
        emb = np.concatenate([freqs, freqs], axis=-1)
        self._cos = np.cos(emb).astype(self.dtype)
        self._sin = np.sin(emb).astype(self.dtype)

    def rows(self, start: int, end: int) -> tuple[np.ndarray, np.ndarray]:
        if end > len(self._cos):
            self._grow(end)
        return self._cos[start:end], self._sin[start:end]


def rotate_half(x: Tensor) -> Tensor:
    half = x.shape[-1] // 2
    x1 = x[..., :half]
    x2 = x[..., half:]
    return ad.concat([ad.neg(x2), x1], axis=-1)


def causal_mask(n: int, dtype) -> np.ndarray:
    m = np.zeros((n, n), dtype=dtype)
    m[np.triu_indices(n, k=1)] = -np.inf
    return m


# ---------------------------------------------------------------------------
# shared layer forward
# ---------------------------------------------------------------------------


def layer_forward(
    params: dict[str, Tensor],
    prefix: str,
    x: Tensor,
    heads: int,
    cos: Tensor,
    sin: Tensor,
    mask: Tensor,
    capture: list | None = None,
) -> Tensor:
    """One pre-norm causal block over ``x`` of shape (B, n, c)."""
    B, n, c = x.shape
    hd = c // heads

    h = ad.rms_norm(x, params[f"{prefix}.attn_norm.g"], RMS_EPS)
    q = (h @ params[f"{prefix}.attn.wq"]).reshape(B, n, heads, hd).transpose(0, 2, 1, 3)
    k = (h @ params[f"{prefix}.attn.wk"]).reshape(B, n, heads, hd).transpose(0, 2, 1, 3)
    v = (h @ params[f"{prefix}.attn.wv"]).reshape(B, n, heads, hd).transpose(0, 2, 1, 3)
    q = q * cos + rotate_half(q) * sin
    k = k * cos + rotate_half(k) * sin
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd)) + mask
    w = ad.softmax(scores, axis=-1)
    if capture is not None:
        capture.append((k.data, v.data, w.data))
    o = (w @ v).transpose(0, 2, 1, 3).reshape(B, n, c) @ params[f"{prefix}.attn.wo"]
    x = x + o

    h2 = ad.rms_norm(x, params[f"{prefix}.ffn_norm.g"], RMS_EPS)
    u = ad.silu(h2 @ params[f"{prefix}.ffn.w1"]) * (h2 @ params[f"{prefix}.ffn.w3"])
    return x + u @ params[f"{prefix}.ffn.w2"]


# ---------------------------------------------------------------------------
# pixel shuffle (the HD token reduction)
# ---------------------------------------------------------------------------


def pixel_shuffle_tokens(x: Tensor, grid_side: int, r: int) -> Tensor:
    """Fold each r x r neighborhood of the per-tile token grid channel-wise.

    ``x`` is (n_I, c) with n_I = tiles * grid_side^2; result is
    (n_I / r^2, c * r^2). Pure rearrangement: bijective on entries.
    """
    n, c = x.shape
    g = grid_side
    if g % r != 0:
        raise ad.ShapeError(f"token grid side {g} not divisible by shuffle factor {r}")
    if n % (g * g) != 0:
        raise ad.ShapeError(f"{n} tokens do not tile a {g}x{g} grid")
    tiles = n // (g * g)
    x = x.reshape(tiles, g // r, r, g // r, r, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(tiles * (g // r) ** 2, r * r * c)


def inverse_pixel_shuffle_tokens(x: Tensor, grid_side: int, r: int) -> Tensor:
    """Exact inverse of :func:`pixel_shuffle_tokens` (pre-projection)."""
    n, rc = x.shape
    g = grid_side
    c = rc // (r * r)
    tiles = n * r * r // (g * g)
    x = x.reshape(tiles, g // r, g // r, r, r, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(tiles * g * g, c)


# ---------------------------------------------------------------------------
# attention capture
# ---------------------------------------------------------------------------


@dataclass
class AttentionRecord:
    """Post-softmax attention weights of one layer/head on one sequence."""

    layer: int
    head: int
    weights: np.ndarray  # (n, n), row-stochastic, causal support
    modality: np.ndarray  # bool, True at image positions


@dataclass
class KvCache:
    """Per-layer rotary-encoded keys/values for incremental decoding."""

    embed: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)  # (heads, t, hd)
    llm: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    len_embed: int = 0
    len_llm: int = 0


@dataclass
class ForwardResult:
    logits: Tensor  # (B, n_max, v)
    sequences: list[TokenSequence]  # post-reduction metadata (== input when HD off)
    lengths: np.ndarray  # effective per-sample lengths


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------


class MonoVLM:
    """Holistic-embedding vision-language model over the autodiff engine."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32, seed: int | None = None):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.params = init_params(cfg, rng, self.dtype)
        self.rope = RopeTable(cfg.rope_base, cfg.head_dim, self.dtype)
        self._masks: dict[int, np.ndarray] = {}

    # -- bookkeeping ---------------------------------------------------------

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ad.ShapeError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in arrays.items():
            p = self.params[name]
            if arr.shape != p.shape:
                raise ad.ShapeError(f"tensor {name!r}: stored shape {arr.shape} != model shape {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=self.dtype)

    def _mask(self, n: int) -> Tensor:
        if n not in self._masks:
            self._masks[n] = causal_mask(n, self.dtype)
        return Tensor(self._masks[n])

    def _rope_tensors(self, n: int) -> tuple[Tensor, Tensor]:
        cos, sin = self.rope.rows(0, n)
        return Tensor(cos), Tensor(sin)

    # -- embedding (Eq. 1-2 inputs, then the causal stack) --------------------

    def embed_inputs(self, seq: TokenSequence) -> Tensor:
        """Input embeddings (n, c): patch projection + positional table on
        image blocks, text-table lookup elsewhere, concatenated in order."""
        cfg = self.cfg
        if seq.length > cfg.max_seq:
            raise CapacityError(f"sequence length {seq.length} exceeds max_seq {cfg.max_seq}")
        parts: list[Tensor] = []
        pos = 0
        patch_off = 0
        blocks = dict((start, end) for start, end in seq.image_blocks())
        if blocks and seq.patch_vectors is None:
            raise ad.ShapeError("sequence has image positions but no patch vectors")
        while pos < seq.length:
            if pos in blocks:
                end = blocks[pos]
                n_img = end - pos
                if n_img > cfg.pe_rows:
                    raise CapacityError(f"image block of {n_img} tokens exceeds positional table {cfg.pe_rows}")
                patches = Tensor(np.asarray(seq.patch_vectors[patch_off : patch_off + n_img], dtype=self.dtype))
                x_img = patches @ self.params["embed.patch_proj.w"] + self.params["embed.patch_proj.b"]
                x_img = x_img + self.params["embed.pos"][:n_img]
                parts.append(x_img)
                patch_off += n_img
                pos = end
            else:
                end = pos
                while end < seq.length and end not in blocks:
                    end += 1
                parts.append(ad.embedding(self.params["embed.text_table"], seq.ids[pos:end]))
                pos = end
        return parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)

    def holistic_embed(self, seqs: list[TokenSequence], capture: list | None = None, collect_kv: KvCache | None = None) -> tuple[Tensor, np.ndarray]:
        """Shared-space embeddings (B, n_max, c) for a batch of sequences.

        Shorter sequences are zero-padded at the tail; with ``embed_depth``
        zero the result is the raw input embeddings.
        """
        lengths = np.array([s.length for s in seqs], dtype=np.int64)
        n_max = int(lengths.max())
        rows = []
        for s in seqs:
            x = self.embed_inputs(s)
            if s.length < n_max:
                pad = Tensor(np.zeros((n_max - s.length, self.cfg.hidden), dtype=self.dtype))
                x = ad.concat([x, pad], axis=0)
            rows.append(x)
        x = ad.stack(rows, axis=0)
        cos, sin = self._rope_tensors(n_max)
        mask = self._mask(n_max)
        for i in range(self.cfg.embed_depth):
            cap = [] if (capture is not None or collect_kv is not None) else None
            x = layer_forward(self.params, f"embed.layers.{i}", x, self.cfg.heads, cos, sin, mask, cap)
            if cap is not None:
                k, v, w = cap[0]
                if collect_kv is not None:
                    collect_kv.embed.append((k[0].copy(), v[0].copy()))
                if capture is not None:
                    capture.append((i, w))
        if collect_kv is not None:
            collect_kv.len_embed = n_max
        return x, lengths

    def _hd_reduce(self, x: Tensor, seqs: list[TokenSequence]) -> tuple[Tensor, list[TokenSequence], np.ndarray]:
        """Apply the pixel-shuffle reduction to every image block, then
        re-pad/re-stack. Only called when the config enables it."""
        cfg = self.cfg
        g = cfg.tile_size // cfg.patch_stride
        r = cfg.shuffle_r
        proj = self.params["embed.shuffle_proj.w"]
        new_rows: list[Tensor] = []
        new_seqs: list[TokenSequence] = []
        for b, s in enumerate(seqs):
            row = x[b]
            segments: list[Tensor] = []
            pos = 0
            for start, end in s.image_blocks():
                if start > pos:
                    segments.append(row[pos:start])
                folded = pixel_shuffle_tokens(row[start:end], g, r)
                segments.append(folded @ proj)
                pos = end
            if pos < s.length:
                segments.append(row[pos : s.length])
            new_rows.append(segments[0] if len(segments) == 1 else ad.concat(segments, axis=0))
            new_seqs.append(shuffled_sequence(s, r))
        lengths = np.array([s.length for s in new_seqs], dtype=np.int64)
        n_max = int(lengths.max())
        padded = []
        for t, s in zip(new_rows, new_seqs):
            if s.length < n_max:
                pad = Tensor(np.zeros((n_max - s.length, cfg.hidden), dtype=self.dtype))
                t = ad.concat([t, pad], axis=0)
            padded.append(t)
        return ad.stack(padded, axis=0), new_seqs, lengths

    def llm_forward(self, x: Tensor, capture: list | None = None, collect_kv: KvCache | None = None) -> Tensor:
        """Language-model logits (B, n, v) from shared-space embeddings."""
        if x.ndim != 3 or x.shape[-1] != self.cfg.hidden:
            raise ad.ShapeError(f"llm_forward expects (B, n, {self.cfg.hidden}) embeddings, got {x.shape}")
        n = x.shape[1]
        cos, sin = self._rope_tensors(n)
        mask = self._mask(n)
        for i in range(self.cfg.llm_depth):
            cap = [] if (capture is not None or collect_kv is not None) else None
            x = layer_forward(self.params, f"llm.layers.{i}", x, self.cfg.heads, cos, sin, mask, cap)
            if cap is not None:
                k, v, w = cap[0]
                if collect_kv is not None:
                    collect_kv.llm.append((k[0].copy(), v[0].copy()))
                if capture is not None:
                    capture.append((self.cfg.embed_depth + i, w))
        if collect_kv is not None:
            collect_kv.len_llm = n
        x = ad.rms_norm(x, self.params["llm.final_norm.g"], RMS_EPS)
        return x @ self.params["llm.head.w"]

    def forward(self, seqs: list[TokenSequence], capture: list | None = None, collect_kv: KvCache | None = None) -> ForwardResult:
        x, lengths = self.holistic_embed(seqs, capture=capture, collect_kv=collect_kv)
        out_seqs = list(seqs)
        if self.cfg.pixel_shuffle:
            x, out_seqs, lengths = self._hd_reduce(x, seqs)
        logits = self.llm_forward(x, capture=capture, collect_kv=collect_kv)
        return ForwardResult(logits=logits, sequences=out_seqs, lengths=lengths)

    # -- generation -----------------------------------------------------------

    def generate(
        self,
        prompt: TokenSequence,
        max_new: int,
        use_cache: bool = True,
        ignore_eos: bool = False,
        return_logits: bool = False,
        step_times: list | None = None,
    ):
        """Greedy decoding from ``prompt``; stops at eos (unless ignored) or
        ``max_new``. Cached and uncached modes must emit identical ids."""
        from . import tokenizer as tok
        import time

        if max_new < 1:
            raise ValueError("max_new must be >= 1")
        if prompt.length + max_new > self.cfg.max_seq:
            raise CapacityError(f"prompt {prompt.length} + max_new {max_new} exceeds max_seq {self.cfg.max_seq}")

        ids: list[int] = []
        all_logits: list[np.ndarray] = []
        with ad.no_grad():
            if use_cache:
                cache = KvCache()
                res = self.forward([prompt], collect_kv=cache)
                logits_row = res.logits.data[0, res.lengths[0] - 1]
                while True:
                    nxt = int(np.argmax(logits_row))
                    ids.append(nxt)
                    if step_times is not None:
                        step_times.append(time.perf_counter())
                    if return_logits:
                        all_logits.append(logits_row.copy())
                    if (nxt == tok.EOS and not ignore_eos) or len(ids) >= max_new:
                        break
                    logits_row = self._decode_step(cache, nxt)
            else:
                ext = prompt
                while True:
                    res = self.forward([ext])
                    logits_row = res.logits.data[0, res.lengths[0] - 1]
                    nxt = int(np.argmax(logits_row))
                    ids.append(nxt)
                    if step_times is not None:
                        step_times.append(time.perf_counter())
                    if return_logits:
                        all_logits.append(logits_row.copy())
                    if (nxt == tok.EOS and not ignore_eos) or len(ids) >= max_new:
                        break
                    ext = _extend_sequence(ext, nxt)
        if return_logits:
            return ids, np.stack(all_logits, axis=0)
        return ids

    def _decode_step(self, cache: KvCache, token_id: int) -> np.ndarray:
        """Advance the cache by one text token; returns next-token logits (v,)."""
        x = self.params["embed.text_table"].data[token_id].copy()
        pos_e = cache.len_embed
        pos_l = cache.len_llm
        for i in range(self.cfg.embed_depth):
            x = self._layer_step(f"embed.layers.{i}", x, cache.embed, i, pos_e)
        cache.len_embed += 1
        for i in range(self.cfg.llm_depth):
            x = self._layer_step(f"llm.layers.{i}", x, cache.llm, i, pos_l)
        cache.len_llm += 1
        x = _np_rms(x, self.params["llm.final_norm.g"].data)
        return x @ self.params["llm.head.w"].data

    def _layer_step(self, prefix: str, x: np.ndarray, entries: list, i: int, pos: int) -> np.ndarray:
        cfg = self.cfg
        heads, hd = cfg.heads, cfg.head_dim
        p = self.params
        cos, sin = self.rope.rows(pos, pos + 1)
        cos, sin = cos[0], sin[0]

        h = _np_rms(x, p[f"{prefix}.attn_norm.g"].data)
        q = (h @ p[f"{prefix}.attn.wq"].data).reshape(heads, hd)
        k = (h @ p[f"{prefix}.attn.wk"].data).reshape(heads, hd)
        v = (h @ p[f"{prefix}.attn.wv"].data).reshape(heads, hd)
        q = q * cos + _np_rotate_half(q) * sin
        k = k * cos + _np_rotate_half(k) * sin
        K_prev, V_prev = entries[i]
        K = np.concatenate([K_prev, k[:, None, :]], axis=1)
        V = np.concatenate([V_prev, v[:, None, :]], axis=1)
        entries[i] = (K, V)
        scores = np.einsum("hd,htd->ht", q, K) / np.sqrt(hd)
        m = scores.max(axis=-1, keepdims=True)
        w = np.exp(scores - m)
        w /= w.sum(axis=-1, keepdims=True)
        o = np.einsum("ht,htd->hd", w, V).reshape(-1)
        x = x + o @ p[f"{prefix}.attn.wo"].data

        h2 = _np_rms(x, p[f"{prefix}.ffn_norm.g"].data)
        u = _np_silu(h2 @ p[f"{prefix}.ffn.w1"].data) * (h2 @ p[f"{prefix}.ffn.w3"].data)
        return x + u @ p[f"{prefix}.ffn.w2"].data

    # -- attention capture -----------------------------------------------------

    def capture_attention(self, seq: TokenSequence, layers=None) -> list[AttentionRecord]:
        """Exact post-softmax attention weights for the selected global layer
        indices (embedding layers first, then LLM layers)."""
        total = self.cfg.embed_depth + self.cfg.llm_depth
        if layers is None:
            layers = range(total)
        layers = sorted(set(int(i) for i in layers))
        for i in layers:
            if i < 0 or i >= total:
                raise ValueError(f"layer index {i} out of range 0..{total - 1}")
        captured: list = []
        with ad.no_grad():
            res = self.forward([seq], capture=captured)
        post_modality = res.sequences[0].modality
        records = []
        for layer_idx, w in captured:
            if layer_idx not in layers:
                continue
            modality = seq.modality if layer_idx < self.cfg.embed_depth else post_modality
            for head in range(self.cfg.heads):
                records.append(
                    AttentionRecord(layer=layer_idx, head=head, weights=w[0, head].copy(), modality=modality.copy())
                )
        return records


def _extend_sequence(seq: TokenSequence, token_id: int) -> TokenSequence:
    return TokenSequence(
        ids=np.append(seq.ids, token_id),
        modality=np.append(seq.modality, False),
        loss_mask=np.append(seq.loss_mask, False),
        patch_vectors=seq.patch_vectors,
        num_tiles=seq.num_tiles,
    )


# numpy twins of the engine ops, used on the cached decode path


def _np_rms(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x / np.sqrt(ms + RMS_EPS) * gain


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _np_silu(x: np.ndarray) -> np.ndarray:
    return x * _np_sigmoid(x)


def _np_rotate_half(x: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    return np.concatenate([-x[..., half:], x[..., :half]], axis=-1)
